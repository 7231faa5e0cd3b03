#include "gavatar/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <regex>
#include <string>

#include "gavatar/binary_io.hpp"
#include "gavatar/error.hpp"

namespace gavatar {

Image Image::zeros(int width, int height, int channels) {
  Image img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.data.assign(static_cast<std::size_t>(width) * height * channels, 0.0);
  return img;
}

namespace {

png_uint_32 png_format(int channels) {
  switch (channels) {
    case 1: return PNG_FORMAT_GRAY;
    case 3: return PNG_FORMAT_RGB;
    case 4: return PNG_FORMAT_RGBA;
    default: throw ShapeError("PNG supports 1, 3, or 4 channels, got " + std::to_string(channels));
  }
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = png_format(image.channels);
  std::vector<std::uint8_t> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * 255.0));
  }
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, bytes.data(), 0, nullptr)) {
    throw FormatError("PNG encode failed: " + std::string(png.message));
  }
  std::vector<std::uint8_t> encoded(size);
  if (!png_image_write_to_memory(&png, encoded.data(), &size, 0, bytes.data(), 0, nullptr)) {
    throw FormatError("PNG encode failed: " + std::string(png.message));
  }
  encoded.resize(size);
  write_file_atomic(path, encoded);
}

Image read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
    throw FormatError("cannot read PNG '" + path.string() + "': " + png.message);
  }
  const int channels = PNG_IMAGE_SAMPLE_CHANNELS(png.format) >= 3
                           ? static_cast<int>(PNG_IMAGE_SAMPLE_CHANNELS(png.format))
                           : 1;
  png.format = channels == 1 ? PNG_FORMAT_GRAY : (channels == 4 ? PNG_FORMAT_RGBA : PNG_FORMAT_RGB);
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    throw FormatError("PNG decode failed for '" + path.string() + "': " + png.message);
  }
  Image img = Image::zeros(static_cast<int>(png.width), static_cast<int>(png.height), channels);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

void write_npy(const std::filesystem::path& path, const Image& image) {
  std::string shape = "(" + std::to_string(image.height) + ", " + std::to_string(image.width);
  shape += image.channels == 1 ? ")" : ", " + std::to_string(image.channels) + ")";
  std::string header = "{'descr': '<f4', 'fortran_order': False, 'shape': " + shape + ", }";
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  ByteWriter out;
  out.bytes("\x93NUMPY", 6);
  out.u8(1);
  out.u8(0);
  const auto len = static_cast<std::uint16_t>(header.size());
  out.bytes(&len, 2);
  out.bytes(header.data(), header.size());
  for (double v : image.data) out.f32(static_cast<float>(v));
  write_file_atomic(path, out.take());
}

Image read_npy(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  ByteReader in(bytes);
  in.expect_magic("\x93NUMPY");
  const auto major = in.u8();
  in.u8();
  std::size_t header_len = 0;
  if (major == 1) {
    std::uint16_t len = 0;
    in.read(&len, 2);
    header_len = len;
  } else {
    header_len = in.u32();
  }
  const auto header = in.string(header_len);
  if (header.find("'<f4'") == std::string::npos) {
    throw FormatError("NPY '" + path.string() + "' is not little-endian float32");
  }
  if (header.find("'fortran_order': True") != std::string::npos) {
    throw FormatError("NPY '" + path.string() + "' uses Fortran order");
  }
  static const std::regex shape_re(R"('shape':\s*\(([^)]*)\))");
  std::smatch match;
  if (!std::regex_search(header, match, shape_re)) throw FormatError("NPY header has no shape");
  std::vector<int> dims;
  static const std::regex num_re(R"(\d+)");
  const std::string dims_text = match[1];
  for (auto it = std::sregex_iterator(dims_text.begin(), dims_text.end(), num_re);
       it != std::sregex_iterator(); ++it) {
    dims.push_back(std::stoi(it->str()));
  }
  if (dims.size() != 2 && dims.size() != 3) throw FormatError("NPY image must have rank 2 or 3");
  Image img = Image::zeros(dims[1], dims[0], dims.size() == 3 ? dims[2] : 1);
  for (auto& v : img.data) v = in.f32();
  if (!in.at_end()) throw FormatError("NPY '" + path.string() + "' has trailing bytes");
  return img;
}

}  // namespace gavatar
