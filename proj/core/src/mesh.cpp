#include "gavatar/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include <json.hpp>

#include "gavatar/binary_io.hpp"
#include "gavatar/error.hpp"

namespace gavatar {

using nlohmann::json;

bool point_in_polygon(const Vec2& p, const Polygon2& polygon) {
  bool inside = false;
  const std::size_t n = polygon.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Vec2& a = polygon[i];
    const Vec2& b = polygon[j];
    if ((a.y() > p.y()) != (b.y() > p.y())) {
      const double x = (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x();
      if (p.x() < x) inside = !inside;
    }
  }
  return inside;
}

void TemplateMesh::validate() const {
  const auto nv = vertices.size();
  if (nv == 0 || triangles.empty()) throw ConfigError("mesh has no vertices or triangles");
  if (uv.size() != nv) throw ConfigError("mesh: uv count does not match vertex count");
  if (skinning.size() != nv) throw ConfigError("mesh: skinning row count does not match vertex count");
  for (const auto& t : triangles) {
    for (int i : t) {
      if (i < 0 || static_cast<std::size_t>(i) >= nv) throw ConfigError("mesh: triangle references missing vertex");
    }
  }
  for (const auto& q : uv) {
    if (q.x() < 0.0 || q.x() > 1.0 || q.y() < 0.0 || q.y() > 1.0) throw ConfigError("mesh: uv outside [0,1]^2");
  }
  for (const auto& row : skinning) validate_skin_row(row, skeleton.joint_count());
}

bool TemplateMesh::in_face_region(const Vec2& q) const {
  for (const auto& poly : face_uv_polygons) {
    if (point_in_polygon(q, poly)) return true;
  }
  return false;
}

double TemplateMesh::triangle_area(std::size_t t) const {
  const auto& tri = triangles[t];
  const Vec3& a = vertices[static_cast<std::size_t>(tri[0])];
  const Vec3& b = vertices[static_cast<std::size_t>(tri[1])];
  const Vec3& c = vertices[static_cast<std::size_t>(tri[2])];
  return 0.5 * (b - a).cross(c - a).norm();
}

namespace {

json transform_json(const RigidTransform& t) {
  const Quat q(t.rotation);
  return json{{"rest_rotation", {q.w(), q.x(), q.y(), q.z()}},
              {"rest_translation", {t.translation.x(), t.translation.y(), t.translation.z()}}};
}

}  // namespace

TemplateMesh TemplateMesh::from_json_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("mesh json: ") + e.what());
  }
  TemplateMesh mesh;
  try {
    for (const auto& v : doc.at("vertices")) mesh.vertices.emplace_back(v.at(0).get<double>(), v.at(1).get<double>(), v.at(2).get<double>());
    for (const auto& t : doc.at("triangles")) mesh.triangles.push_back({t.at(0).get<int>(), t.at(1).get<int>(), t.at(2).get<int>()});
    for (const auto& q : doc.at("uv")) mesh.uv.emplace_back(q.at(0).get<double>(), q.at(1).get<double>());
    for (const auto& row : doc.at("skinning")) {
      SkinRow r;
      for (const auto& e : row) r.push_back({e.at(0).get<int>(), e.at(1).get<double>()});
      mesh.skinning.push_back(std::move(r));
    }
    const auto& sk = doc.at("skeleton");
    std::vector<Joint> joints;
    for (const auto& j : sk.at("joints")) {
      Joint jt;
      jt.name = j.at("name").get<std::string>();
      jt.parent = j.at("parent").is_null() ? -1 : j.at("parent").get<int>();
      const auto& r = j.at("rest_rotation");
      const Quat q(r.at(0).get<double>(), r.at(1).get<double>(), r.at(2).get<double>(), r.at(3).get<double>());
      jt.rest.rotation = q.normalized().toRotationMatrix();
      const auto& t = j.at("rest_translation");
      jt.rest.translation = Vec3(t.at(0).get<double>(), t.at(1).get<double>(), t.at(2).get<double>());
      joints.push_back(std::move(jt));
    }
    std::vector<JointGroup> groups;
    if (sk.contains("groups")) {
      // Group order is stored explicitly since JSON objects are unordered.
      std::vector<std::string> order;
      if (sk.contains("group_order")) {
        order = sk.at("group_order").get<std::vector<std::string>>();
      } else {
        for (const auto& [k, _] : sk.at("groups").items()) order.push_back(k);
      }
      for (const auto& name : order) groups.push_back({name, sk.at("groups").at(name).get<std::vector<int>>()});
    }
    mesh.skeleton = Skeleton(std::move(joints), std::move(groups));
    if (doc.contains("face_uv_polygons")) {
      for (const auto& poly : doc.at("face_uv_polygons")) {
        Polygon2 p;
        for (const auto& q : poly) p.emplace_back(q.at(0).get<double>(), q.at(1).get<double>());
        mesh.face_uv_polygons.push_back(std::move(p));
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("mesh json: ") + e.what());
  }
  mesh.validate();
  return mesh;
}

TemplateMesh TemplateMesh::load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open mesh '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_string(ss.str());
}

std::string TemplateMesh::to_json_string() const {
  json doc;
  doc["vertices"] = json::array();
  for (const auto& v : vertices) doc["vertices"].push_back({v.x(), v.y(), v.z()});
  doc["triangles"] = json::array();
  for (const auto& t : triangles) doc["triangles"].push_back({t[0], t[1], t[2]});
  doc["uv"] = json::array();
  for (const auto& q : uv) doc["uv"].push_back({q.x(), q.y()});
  doc["skinning"] = json::array();
  for (const auto& row : skinning) {
    json r = json::array();
    for (const auto& w : row) r.push_back({w.joint, w.weight});
    doc["skinning"].push_back(r);
  }
  json joints = json::array();
  for (const auto& j : skeleton.joints()) {
    json jj = transform_json(j.rest);
    jj["name"] = j.name;
    jj["parent"] = j.parent < 0 ? json(nullptr) : json(j.parent);
    joints.push_back(jj);
  }
  json groups = json::object();
  json order = json::array();
  for (const auto& g : skeleton.groups()) {
    groups[g.name] = g.joints;
    order.push_back(g.name);
  }
  doc["skeleton"] = {{"joints", joints}, {"groups", groups}, {"group_order", order}};
  doc["face_uv_polygons"] = json::array();
  for (const auto& poly : face_uv_polygons) {
    json p = json::array();
    for (const auto& q : poly) p.push_back({q.x(), q.y()});
    doc["face_uv_polygons"].push_back(p);
  }
  return doc.dump();
}

void TemplateMesh::save_json(const std::filesystem::path& path) const {
  const auto text = to_json_string();
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void interpolate_on_triangle(const TemplateMesh& mesh, int triangle, const Vec3& bary,
                             Vec3& position, Vec2& uv, SkinRow& skin) {
  const auto& tri = mesh.triangles.at(static_cast<std::size_t>(triangle));
  position.setZero();
  uv.setZero();
  SkinRow merged;
  for (int k = 0; k < 3; ++k) {
    const auto v = static_cast<std::size_t>(tri[static_cast<std::size_t>(k)]);
    position += bary[k] * mesh.vertices[v];
    uv += bary[k] * mesh.uv[v];
    if (bary[k] == 0.0) continue;
    for (const auto& w : mesh.skinning[v]) merged.push_back({w.joint, bary[k] * w.weight});
  }
  skin = normalize_skin_row(std::move(merged));
}

SurfaceSamples sample_surface(const TemplateMesh& mesh, std::int64_t count, std::uint64_t seed) {
  if (count < 1) throw ConfigError("sample_surface: count must be >= 1");
  std::vector<double> cumulative(mesh.triangles.size());
  double total = 0.0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    total += mesh.triangle_area(t);
    cumulative[t] = total;
  }
  if (!(total > 0.0)) throw ConfigError("sample_surface: mesh has zero total area");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  SurfaceSamples out;
  out.positions.resize(static_cast<std::size_t>(count));
  out.uv.resize(static_cast<std::size_t>(count));
  out.skinning.resize(static_cast<std::size_t>(count));
  out.triangle.resize(static_cast<std::size_t>(count));
  out.barycentric.resize(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    const double r = unit(rng) * total;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), r);
    if (it == cumulative.end()) --it;
    auto t = static_cast<int>(it - cumulative.begin());
    while (mesh.triangle_area(static_cast<std::size_t>(t)) == 0.0 && t > 0) --t;
    const double s = std::sqrt(unit(rng));
    const double u = unit(rng);
    const Vec3 bary(1.0 - s, s * (1.0 - u), s * u);
    const auto idx = static_cast<std::size_t>(i);
    out.triangle[idx] = t;
    out.barycentric[idx] = bary;
    interpolate_on_triangle(mesh, t, bary, out.positions[idx], out.uv[idx], out.skinning[idx]);
  }
  return out;
}

}  // namespace gavatar
