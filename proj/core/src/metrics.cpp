#include "gavatar/metrics.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "gavatar/error.hpp"

namespace gavatar {

namespace {

void check_pair(const ImageView& a, const ImageView& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels) {
    throw ShapeError("image sizes differ: " + std::to_string(a.width) + "x" +
                     std::to_string(a.height) + "x" + std::to_string(a.channels) + " vs " +
                     std::to_string(b.width) + "x" + std::to_string(b.height) + "x" +
                     std::to_string(b.channels));
  }
  const auto n = static_cast<std::size_t>(a.width) * a.height * a.channels;
  if (a.data.size() != n || b.data.size() != n) throw ShapeError("image buffer size mismatch");
}

constexpr int kWindow = 11;

std::array<double, kWindow> gaussian_window() {
  std::array<double, kWindow> w{};
  double total = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double x = i - kWindow / 2;
    w[static_cast<std::size_t>(i)] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    total += w[static_cast<std::size_t>(i)];
  }
  for (auto& v : w) v /= total;
  return w;
}

/// Separable 'valid' Gaussian filter of one channel.
std::vector<double> filter_valid(const std::vector<double>& img, int width, int height) {
  static const auto w = gaussian_window();
  const int ow = width - kWindow + 1;
  const int oh = height - kWindow + 1;
  std::vector<double> tmp(static_cast<std::size_t>(ow * height));
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += w[static_cast<std::size_t>(k)] * img[static_cast<std::size_t>(y * width + x + k)];
      tmp[static_cast<std::size_t>(y * ow + x)] = s;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(ow * oh));
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int k = 0; k < kWindow; ++k) s += w[static_cast<std::size_t>(k)] * tmp[static_cast<std::size_t>((y + k) * ow + x)];
      out[static_cast<std::size_t>(y * ow + x)] = s;
    }
  }
  return out;
}

}  // namespace

double mse(const ImageView& a, const ImageView& b) {
  check_pair(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a.data.size());
}

double psnr(const ImageView& a, const ImageView& b) {
  const double e = mse(a, b);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / e);
}

double mean_l1(const ImageView& a, const ImageView& b) {
  check_pair(a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += std::abs(a.data[i] - b.data[i]);
  return s / static_cast<double>(a.data.size());
}

double ssim(const ImageView& a, const ImageView& b) {
  check_pair(a, b);
  if (a.width < kWindow || a.height < kWindow) {
    throw ShapeError("ssim needs images of at least 11x11");
  }
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;
  const int w = a.width, h = a.height, ch = a.channels;
  const auto npix = static_cast<std::size_t>(w * h);
  double total = 0.0;
  std::size_t count = 0;
  for (int c = 0; c < ch; ++c) {
    std::vector<double> x(npix), y(npix), xx(npix), yy(npix), xy(npix);
    for (std::size_t p = 0; p < npix; ++p) {
      x[p] = a.data[p * static_cast<std::size_t>(ch) + static_cast<std::size_t>(c)];
      y[p] = b.data[p * static_cast<std::size_t>(ch) + static_cast<std::size_t>(c)];
      xx[p] = x[p] * x[p];
      yy[p] = y[p] * y[p];
      xy[p] = x[p] * y[p];
    }
    const auto mx = filter_valid(x, w, h), my = filter_valid(y, w, h);
    const auto sxx = filter_valid(xx, w, h), syy = filter_valid(yy, w, h),
               sxy = filter_valid(xy, w, h);
    for (std::size_t i = 0; i < mx.size(); ++i) {
      const double vx = sxx[i] - mx[i] * mx[i];
      const double vy = syy[i] - my[i] * my[i];
      const double cxy = sxy[i] - mx[i] * my[i];
      total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace gavatar
