#include "gavatar/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <queue>

#include "gavatar/error.hpp"

namespace gavatar {

KdTree::KdTree(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
  std::vector<int> idx(points_.size());
  std::iota(idx.begin(), idx.end(), 0);
  nodes_.reserve(points_.size());
  root_ = build(idx, 0, static_cast<int>(idx.size()), 0);
}

int KdTree::build(std::vector<int>& idx, int lo, int hi, int depth) {
  if (lo >= hi) return -1;
  const int axis = depth % 3;
  const int mid = (lo + hi) / 2;
  std::nth_element(idx.begin() + lo, idx.begin() + mid, idx.begin() + hi, [&](int a, int b) {
    const double pa = points_[static_cast<std::size_t>(a)][axis];
    const double pb = points_[static_cast<std::size_t>(b)][axis];
    return pa < pb || (pa == pb && a < b);
  });
  const int node = static_cast<int>(nodes_.size());
  nodes_.push_back({idx[static_cast<std::size_t>(mid)], axis, -1, -1});
  const int left = build(idx, lo, mid, depth + 1);
  const int right = build(idx, mid + 1, hi, depth + 1);
  nodes_[static_cast<std::size_t>(node)].left = left;
  nodes_[static_cast<std::size_t>(node)].right = right;
  return node;
}

std::vector<int> KdTree::nearest(const Vec3& query, int k, int exclude) const {
  using Entry = std::pair<double, int>;  // (squared distance, index); max-heap on both
  std::priority_queue<Entry> heap;
  std::vector<int> stack;
  if (root_ >= 0) stack.push_back(root_);
  // Explicit-stack search; subtrees are revisited only while they can beat the worst kept entry.
  struct Frame {
    int node;
    double bound;
  };
  std::vector<Frame> frames;
  if (root_ >= 0) frames.push_back({root_, 0.0});
  while (!frames.empty()) {
    const Frame f = frames.back();
    frames.pop_back();
    if (f.node < 0) continue;
    if (static_cast<int>(heap.size()) == k && f.bound > heap.top().first) continue;
    const auto& n = nodes_[static_cast<std::size_t>(f.node)];
    const Vec3& p = points_[static_cast<std::size_t>(n.point)];
    if (n.point != exclude) {
      const Entry e{(p - query).squaredNorm(), n.point};
      if (static_cast<int>(heap.size()) < k) {
        heap.push(e);
      } else if (e < heap.top()) {
        heap.pop();
        heap.push(e);
      }
    }
    const double diff = query[n.axis] - p[n.axis];
    const int near = diff <= 0.0 ? n.left : n.right;
    const int far = diff <= 0.0 ? n.right : n.left;
    frames.push_back({far, diff * diff});
    frames.push_back({near, 0.0});
  }
  std::vector<int> out(heap.size());
  for (int i = static_cast<int>(heap.size()) - 1; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = heap.top().second;
    heap.pop();
  }
  return out;
}

std::array<double, 3> interp_weights(const Vec3& point, const std::array<Vec3, 3>& neighbors) {
  std::array<double, 3> d{};
  for (std::size_t k = 0; k < 3; ++k) {
    const double dist = (point - neighbors[k]).norm();
    if (dist <= 1e-9) {
      std::array<double, 3> w{};
      w[k] = 1.0;
      return w;
    }
    d[k] = 1.0 / dist;
  }
  const double total = d[0] + d[1] + d[2];
  return {d[0] / total, d[1] / total, d[2] / total};
}

std::vector<NeighborTriple> assign_neighbors(std::span<const Vec3> queries,
                                             std::span<const Vec3> targets) {
  if (targets.size() < 3) throw ConfigError("assign_neighbors: need at least 3 targets");
  const KdTree tree(targets);
  std::vector<NeighborTriple> out(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const auto nn = tree.nearest(queries[i], 3);
    std::array<Vec3, 3> pos;
    for (std::size_t k = 0; k < 3; ++k) {
      out[i].index[k] = nn[k];
      pos[k] = targets[static_cast<std::size_t>(nn[k])];
    }
    out[i].weight = interp_weights(queries[i], pos);
  }
  return out;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

Hierarchy build_hierarchy(const TemplateMesh& mesh, const HierarchyCounts& counts,
                          std::uint64_t seed) {
  if (counts.anchors < 4 || counts.control_points < 6 || counts.gaussians < 4) {
    throw ConfigError("build_hierarchy: counts must be at least (4, 6, 4)");
  }
  Hierarchy h;
  h.anchors = sample_surface(mesh, counts.anchors, mix_seed(seed, 0));
  h.control_points = sample_surface(mesh, counts.control_points, mix_seed(seed, 1));
  h.gaussians = sample_surface(mesh, counts.gaussians, mix_seed(seed, 2));
  h.gaussian_anchor = assign_neighbors(h.gaussians.positions, h.anchors.positions);
  h.control_anchor = assign_neighbors(h.control_points.positions, h.anchors.positions);
  h.gaussian_control = assign_neighbors(h.gaussians.positions, h.control_points.positions);

  const KdTree cp_tree(h.control_points.positions);
  h.control_neighbors.resize(h.control_points.size());
  for (std::size_t i = 0; i < h.control_points.size(); ++i) {
    const auto nn = cp_tree.nearest(h.control_points.positions[i], 5, static_cast<int>(i));
    std::copy(nn.begin(), nn.end(), h.control_neighbors[i].begin());
  }
  const KdTree anchor_tree(h.anchors.positions);
  h.anchor_neighbors.resize(h.anchors.size());
  for (std::size_t i = 0; i < h.anchors.size(); ++i) {
    const auto nn = anchor_tree.nearest(h.anchors.positions[i], 3, static_cast<int>(i));
    std::copy(nn.begin(), nn.end(), h.anchor_neighbors[i].begin());
  }
  return h;
}

namespace {

void save_samples(Checkpoint& ck, const std::string& prefix, const SurfaceSamples& s) {
  const auto n = static_cast<std::int64_t>(s.size());
  std::vector<double> pos, uv, bary;
  std::vector<std::int64_t> tri;
  std::vector<double> skin_joint(static_cast<std::size_t>(n * kMaxSkinInfluences), -1.0);
  std::vector<double> skin_weight(static_cast<std::size_t>(n * kMaxSkinInfluences), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    for (int k = 0; k < 3; ++k) pos.push_back(s.positions[idx][k]);
    for (int k = 0; k < 2; ++k) uv.push_back(s.uv[idx][k]);
    for (int k = 0; k < 3; ++k) bary.push_back(s.barycentric[idx][k]);
    tri.push_back(s.triangle[idx]);
    for (std::size_t k = 0; k < s.skinning[idx].size(); ++k) {
      skin_joint[idx * kMaxSkinInfluences + k] = s.skinning[idx][k].joint;
      skin_weight[idx * kMaxSkinInfluences + k] = s.skinning[idx][k].weight;
    }
  }
  ck.put(prefix + "position", {n, 3}, pos);
  ck.put(prefix + "uv", {n, 2}, uv);
  ck.put(prefix + "barycentric", {n, 3}, bary);
  ck.put_indices(prefix + "triangle", {n}, tri);
  ck.put(prefix + "skin_joint", {n, kMaxSkinInfluences}, skin_joint);
  ck.put(prefix + "skin_weight", {n, kMaxSkinInfluences}, skin_weight);
}

SurfaceSamples load_samples(const Checkpoint& ck, const std::string& prefix) {
  SurfaceSamples s;
  const auto& pos = ck.get(prefix + "position");
  const auto n = static_cast<std::size_t>(pos.shape[0]);
  const auto& uv = ck.get(prefix + "uv").values;
  const auto& bary = ck.get(prefix + "barycentric").values;
  const auto tri = ck.indices(prefix + "triangle");
  const auto& sj = ck.get(prefix + "skin_joint").values;
  const auto& sw = ck.get(prefix + "skin_weight").values;
  for (std::size_t i = 0; i < n; ++i) {
    s.positions.emplace_back(pos.values[3 * i], pos.values[3 * i + 1], pos.values[3 * i + 2]);
    s.uv.emplace_back(uv[2 * i], uv[2 * i + 1]);
    s.barycentric.emplace_back(bary[3 * i], bary[3 * i + 1], bary[3 * i + 2]);
    s.triangle.push_back(static_cast<int>(tri[i]));
    SkinRow row;
    for (std::size_t k = 0; k < kMaxSkinInfluences; ++k) {
      const double j = sj[i * kMaxSkinInfluences + k];
      if (j < 0.0) break;
      row.push_back({static_cast<int>(j), sw[i * kMaxSkinInfluences + k]});
    }
    s.skinning.push_back(std::move(row));
  }
  return s;
}

void save_triples(Checkpoint& ck, const std::string& name, const std::vector<NeighborTriple>& t) {
  const auto n = static_cast<std::int64_t>(t.size());
  std::vector<std::int64_t> idx;
  std::vector<double> w;
  for (const auto& e : t) {
    for (int k = 0; k < 3; ++k) {
      idx.push_back(e.index[static_cast<std::size_t>(k)]);
      w.push_back(e.weight[static_cast<std::size_t>(k)]);
    }
  }
  ck.put_indices(name + "_index", {n, 3}, idx);
  ck.put(name + "_weight", {n, 3}, w);
}

std::vector<NeighborTriple> load_triples(const Checkpoint& ck, const std::string& name) {
  const auto idx = ck.indices(name + "_index");
  const auto& w = ck.get(name + "_weight").values;
  std::vector<NeighborTriple> out(idx.size() / 3);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      out[i].index[k] = static_cast<int>(idx[3 * i + k]);
      out[i].weight[k] = w[3 * i + k];
    }
  }
  return out;
}

template <std::size_t K>
void save_graph(Checkpoint& ck, const std::string& name, const std::vector<std::array<int, K>>& g) {
  std::vector<std::int64_t> flat;
  for (const auto& row : g) flat.insert(flat.end(), row.begin(), row.end());
  ck.put_indices(name, {static_cast<std::int64_t>(g.size()), static_cast<std::int64_t>(K)}, flat);
}

template <std::size_t K>
std::vector<std::array<int, K>> load_graph(const Checkpoint& ck, const std::string& name) {
  const auto flat = ck.indices(name);
  std::vector<std::array<int, K>> g(flat.size() / K);
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t k = 0; k < K; ++k) g[i][k] = static_cast<int>(flat[i * K + k]);
  }
  return g;
}

}  // namespace

void Hierarchy::save(Checkpoint& ck, const std::string& prefix) const {
  save_samples(ck, prefix + "anchor/", anchors);
  save_samples(ck, prefix + "control/", control_points);
  save_samples(ck, prefix + "gaussian/", gaussians);
  save_triples(ck, prefix + "gaussian_anchor", gaussian_anchor);
  save_triples(ck, prefix + "control_anchor", control_anchor);
  save_triples(ck, prefix + "gaussian_control", gaussian_control);
  save_graph(ck, prefix + "control_neighbors", control_neighbors);
  save_graph(ck, prefix + "anchor_neighbors", anchor_neighbors);
}

Hierarchy Hierarchy::load(const Checkpoint& ck, const std::string& prefix) {
  Hierarchy h;
  h.anchors = load_samples(ck, prefix + "anchor/");
  h.control_points = load_samples(ck, prefix + "control/");
  h.gaussians = load_samples(ck, prefix + "gaussian/");
  h.gaussian_anchor = load_triples(ck, prefix + "gaussian_anchor");
  h.control_anchor = load_triples(ck, prefix + "control_anchor");
  h.gaussian_control = load_triples(ck, prefix + "gaussian_control");
  h.control_neighbors = load_graph<5>(ck, prefix + "control_neighbors");
  h.anchor_neighbors = load_graph<3>(ck, prefix + "anchor_neighbors");
  return h;
}

Tensor interpolate_corrective(const Tensor& anchor_outputs,
                              std::span<const NeighborTriple> assignment,
                              std::int64_t expected_width) {
  if (anchor_outputs.rank() != 2 || anchor_outputs.dim(1) != expected_width) {
    throw ShapeError("interpolate_corrective: expected [N_a, " + std::to_string(expected_width) +
                     "], got " + shape_str(anchor_outputs.shape()));
  }
  const std::int64_t rows = anchor_outputs.dim(0);
  const std::int64_t width = expected_width;
  const auto n = static_cast<std::int64_t>(assignment.size());
  auto tri = std::make_shared<std::vector<NeighborTriple>>(assignment.begin(), assignment.end());
  for (const auto& t : *tri) {
    for (int k : t.index) {
      if (k < 0 || k >= rows) throw ShapeError("interpolate_corrective: neighbor index out of range");
    }
  }
  const auto in = anchor_outputs.values();
  std::vector<double> out(static_cast<std::size_t>(n * width), 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& t = (*tri)[static_cast<std::size_t>(i)];
    double* dst = out.data() + i * width;
    for (std::size_t k = 0; k < 3; ++k) {
      const double* src = in.data() + t.index[k] * width;
      for (std::int64_t c = 0; c < width; ++c) dst[c] += t.weight[k] * src[c];
    }
  }
  return custom_op("interpolate_corrective", {anchor_outputs}, {n, width}, std::move(out),
                   [src = anchor_outputs.impl(), tri, width](const TensorImpl& o) {
                     if (!src->requires_grad) return;
                     double* g = src->grad_buffer();
                     for (std::size_t i = 0; i < tri->size(); ++i) {
                       const auto& t = (*tri)[i];
                       const double* go = o.grad.data() + static_cast<std::int64_t>(i) * width;
                       for (std::size_t k = 0; k < 3; ++k) {
                         double* dst = g + t.index[k] * width;
                         for (std::int64_t c = 0; c < width; ++c) dst[c] += t.weight[k] * go[c];
                       }
                     }
                   });
}

}  // namespace gavatar
