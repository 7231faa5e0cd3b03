#include "gavatar/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace gavatar::ops {

namespace {

using Impl = std::shared_ptr<TensorImpl>;

[[noreturn]] void shape_fail(std::string_view kind, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(kind) + ": incompatible shapes " + shape_str(a.shape()) +
                   " and " + shape_str(b.shape()));
}

int normalize_axis(int axis, int rank, std::string_view kind) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError(std::string(kind) + ": axis out of range for rank " + std::to_string(rank));
  }
  return axis;
}

// Flat index maps from an output position to each broadcast operand.
struct Broadcast {
  Shape out;
  std::vector<std::int64_t> a_index;  // empty when a matches out exactly
  std::vector<std::int64_t> b_index;
  bool a_same = false;
  bool b_same = false;
};

std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i) + 1] * s[static_cast<std::size_t>(i) + 1];
  }
  return st;
}

Broadcast broadcast(std::string_view kind, const Tensor& a, const Tensor& b) {
  Broadcast bc;
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  const std::size_t rank = std::max(sa.size(), sb.size());
  bc.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < rank - sa.size() ? 1 : sa[i - (rank - sa.size())];
    const std::int64_t db = i < rank - sb.size() ? 1 : sb[i - (rank - sb.size())];
    if (da != db && da != 1 && db != 1) shape_fail(kind, a, b);
    bc.out[i] = std::max(da, db);
  }
  bc.a_same = sa == bc.out;
  bc.b_same = sb == bc.out;
  const auto n = shape_numel(bc.out);
  auto build = [&](const Shape& s) {
    std::vector<std::int64_t> map(static_cast<std::size_t>(n));
    if (shape_numel(s) == 1) return map;  // all zeros
    Shape padded(rank, 1);
    std::copy(s.begin(), s.end(), padded.begin() + static_cast<std::ptrdiff_t>(rank - s.size()));
    const auto src_strides = strides_of(padded);
    std::vector<std::int64_t> idx(rank, 0);
    for (std::int64_t flat = 0; flat < n; ++flat) {
      std::int64_t off = 0;
      for (std::size_t d = 0; d < rank; ++d) {
        if (padded[d] != 1) off += idx[d] * src_strides[d];
      }
      map[static_cast<std::size_t>(flat)] = off;
      for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
        if (++idx[static_cast<std::size_t>(d)] < bc.out[static_cast<std::size_t>(d)]) break;
        idx[static_cast<std::size_t>(d)] = 0;
      }
    }
    return map;
  };
  if (!bc.a_same) bc.a_index = build(sa);
  if (!bc.b_same) bc.b_index = build(sb);
  return bc;
}

enum class BinKind { Add, Sub, Mul, Div };

Tensor binary(BinKind op, std::string_view kind, const Tensor& a, const Tensor& b) {
  detail::require_finite(a, kind);
  detail::require_finite(b, kind);
  auto bc = std::make_shared<Broadcast>(broadcast(kind, a, b));
  const auto n = static_cast<std::size_t>(shape_numel(bc->out));
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  auto ai = [&](std::size_t i) { return bc->a_same ? i : static_cast<std::size_t>(bc->a_index[i]); };
  auto bi = [&](std::size_t i) { return bc->b_same ? i : static_cast<std::size_t>(bc->b_index[i]); };
  switch (op) {
    case BinKind::Add: for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] + bv[bi(i)]; break;
    case BinKind::Sub: for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] - bv[bi(i)]; break;
    case BinKind::Mul: for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] * bv[bi(i)]; break;
    case BinKind::Div: for (std::size_t i = 0; i < n; ++i) out[i] = av[ai(i)] / bv[bi(i)]; break;
  }
  const bool record = detail::needs_record({&a, &b});
  Impl ia = a.impl();
  Impl ib = b.impl();
  auto fn = [op, bc, ia, ib](const TensorImpl& o) {
    const std::size_t n = o.value.size();
    const double* g = o.grad.data();
    auto ai = [&](std::size_t i) { return bc->a_same ? i : static_cast<std::size_t>(bc->a_index[i]); };
    auto bi = [&](std::size_t i) { return bc->b_same ? i : static_cast<std::size_t>(bc->b_index[i]); };
    if (ia->requires_grad) {
      double* ga = ia->grad_buffer();
      switch (op) {
        case BinKind::Add:
        case BinKind::Sub: for (std::size_t i = 0; i < n; ++i) ga[ai(i)] += g[i]; break;
        case BinKind::Mul: for (std::size_t i = 0; i < n; ++i) ga[ai(i)] += g[i] * ib->value[bi(i)]; break;
        case BinKind::Div: for (std::size_t i = 0; i < n; ++i) ga[ai(i)] += g[i] / ib->value[bi(i)]; break;
      }
    }
    if (ib->requires_grad) {
      double* gb = ib->grad_buffer();
      switch (op) {
        case BinKind::Add: for (std::size_t i = 0; i < n; ++i) gb[bi(i)] += g[i]; break;
        case BinKind::Sub: for (std::size_t i = 0; i < n; ++i) gb[bi(i)] -= g[i]; break;
        case BinKind::Mul: for (std::size_t i = 0; i < n; ++i) gb[bi(i)] += g[i] * ia->value[ai(i)]; break;
        case BinKind::Div:
          for (std::size_t i = 0; i < n; ++i) {
            const double d = ib->value[bi(i)];
            gb[bi(i)] -= g[i] * ia->value[ai(i)] / (d * d);
          }
          break;
      }
    }
  };
  return detail::make_result(kind, bc->out, std::move(out), {ia, ib}, std::move(fn), record);
}

// y = f(x) with dy/dx expressed through x and y.
template <typename F, typename D>
Tensor unary(std::string_view kind, const Tensor& a, F f, D dfdx) {
  detail::require_finite(a, kind);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const bool record = detail::needs_record({&a});
  Impl ia = a.impl();
  auto fn = [ia, dfdx](const TensorImpl& o) {
    if (!ia->requires_grad) return;
    double* ga = ia->grad_buffer();
    for (std::size_t i = 0; i < o.value.size(); ++i) {
      ga[i] += o.grad[i] * dfdx(ia->value[i], o.value[i]);
    }
  };
  return detail::make_result(kind, a.shape(), std::move(out), {ia}, std::move(fn), record);
}

// C (+)= op(A) op(B), row-major.
void gemm_nn(const double* A, const double* B, double* C, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* c = C + i * n;
    const double* arow = A + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* b = B + p * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,k] += A[m,n] * B[k,n]^T
void gemm_nt(const double* A, const double* B, double* C, std::int64_t m, std::int64_t n,
             std::int64_t k) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = A + i * n;
    double* c = C + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double* b = B + p * n;
      double s = 0.0;
      for (std::int64_t j = 0; j < n; ++j) s += arow[j] * b[j];
      c[p] += s;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const double* A, const double* B, double* C, std::int64_t m, std::int64_t k,
             std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    const double* b = B + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* c = C + p * n;
      for (std::int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(BinKind::Add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(BinKind::Sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(BinKind::Mul, "mul", a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(BinKind::Div, "div", a, b); }

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; },
               [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary("mul_scalar", a, [s](double x) { return x * s; },
               [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a,
               [](double x) {
                 if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
                 const double e = std::exp(x);
                 return e / (1.0 + e);
               },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw NumericalError("log: input must be positive");
  }
  return unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Tensor abs(const Tensor& a) {
  return unary("abs", a, [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sqrt(const Tensor& a) {
  for (double v : a.values()) {
    if (v < 0.0) throw NumericalError("sqrt: negative input");
  }
  return unary("sqrt", a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor square(const Tensor& a) {
  return unary("square", a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Tensor clamp_max(const Tensor& a, double hi) {
  return unary("clamp_max", a, [hi](double x) { return x < hi ? x : hi; },
               [hi](double x, double) { return x < hi ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& a, const Tensor& lo, const Tensor& hi) {
  if (lo.shape() != a.shape()) shape_fail("clamp", a, lo);
  if (hi.shape() != a.shape()) shape_fail("clamp", a, hi);
  detail::require_finite(a, "clamp");
  const auto av = a.values();
  const auto lv = lo.values();
  const auto hv = hi.values();
  std::vector<double> out(av.size());
  auto pass = std::make_shared<std::vector<char>>(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    out[i] = std::min(std::max(av[i], lv[i]), hv[i]);
    (*pass)[i] = (av[i] > lv[i] && av[i] < hv[i]) ? 1 : 0;
  }
  const bool record = detail::needs_record({&a});
  Impl ia = a.impl();
  auto fn = [ia, pass](const TensorImpl& o) {
    if (!ia->requires_grad) return;
    double* ga = ia->grad_buffer();
    for (std::size_t i = 0; i < o.value.size(); ++i) {
      if ((*pass)[i]) ga[i] += o.grad[i];
    }
  };
  return detail::make_result("clamp", a.shape(), std::move(out), {ia}, std::move(fn), record);
}

Tensor sum(const Tensor& a) {
  detail::require_finite(a, "sum");
  double s = 0.0;
  for (double v : a.values()) s += v;
  const bool record = detail::needs_record({&a});
  Impl ia = a.impl();
  auto fn = [ia](const TensorImpl& o) {
    if (!ia->requires_grad) return;
    double* ga = ia->grad_buffer();
    const double g = o.grad[0];
    for (std::size_t i = 0; i < ia->value.size(); ++i) ga[i] += g;
  };
  return detail::make_result("sum", {1}, {s}, {ia}, std::move(fn), record);
}

Tensor mean(const Tensor& a) {
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum(const Tensor& a, int axis, bool keepdim) {
  detail::require_finite(a, "sum_axis");
  axis = normalize_axis(axis, a.rank(), "sum_axis");
  const auto& s = a.shape();
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < a.rank(); ++i) inner *= s[static_cast<std::size_t>(i)];
  const std::int64_t len = s[static_cast<std::size_t>(axis)];
  std::vector<double> out(static_cast<std::size_t>(outer * inner), 0.0);
  const auto av = a.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t l = 0; l < len; ++l) {
      const double* src = av.data() + (o * len + l) * inner;
      double* dst = out.data() + o * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  Shape out_shape;
  for (int i = 0; i < a.rank(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(s[static_cast<std::size_t>(i)]);
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  const bool record = detail::needs_record({&a});
  Impl ia = a.impl();
  auto fn = [ia, outer, inner, len](const TensorImpl& o) {
    if (!ia->requires_grad) return;
    double* ga = ia->grad_buffer();
    for (std::int64_t oo = 0; oo < outer; ++oo) {
      const double* g = o.grad.data() + oo * inner;
      for (std::int64_t l = 0; l < len; ++l) {
        double* dst = ga + (oo * len + l) * inner;
        for (std::int64_t i = 0; i < inner; ++i) dst[i] += g[i];
      }
    }
  };
  return detail::make_result("sum_axis", std::move(out_shape), std::move(out), {ia},
                             std::move(fn), record);
}

Tensor mean(const Tensor& a, int axis, bool keepdim) {
  const int ax = normalize_axis(axis, a.rank(), "mean_axis");
  return mul_scalar(sum(a, ax, keepdim), 1.0 / static_cast<double>(a.dim(ax)));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_finite(a, "matmul");
  detail::require_finite(b, "matmul");
  std::int64_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_b = false;
  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2) {
    m = a.dim(0); k = a.dim(1); n = b.dim(1);
    if (b.dim(0) != k) shape_fail("matmul", a, b);
    out_shape = {m, n};
  } else if (a.rank() == 3 && b.rank() == 3) {
    batch = a.dim(0); m = a.dim(1); k = a.dim(2); n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k) shape_fail("matmul", a, b);
    out_shape = {batch, m, n};
  } else if (a.rank() == 3 && b.rank() == 2) {
    // Shared right operand: fold the batch into rows.
    m = a.dim(0) * a.dim(1); k = a.dim(2); n = b.dim(1);
    if (b.dim(0) != k) shape_fail("matmul", a, b);
    shared_b = true;
    out_shape = {a.dim(0), a.dim(1), n};
  } else {
    shape_fail("matmul", a, b);
  }
  std::vector<double> out(static_cast<std::size_t>(batch * m * n), 0.0);
  const double* A = a.values().data();
  const double* B = b.values().data();
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    gemm_nn(A + bi * m * k, B + (shared_b ? 0 : bi * k * n), out.data() + bi * m * n, m, k, n);
  }
  const bool record = detail::needs_record({&a, &b});
  Impl ia = a.impl();
  Impl ib = b.impl();
  auto fn = [ia, ib, batch, m, k, n, shared_b](const TensorImpl& o) {
    const double* G = o.grad.data();
    for (std::int64_t bi = 0; bi < batch; ++bi) {
      const double* g = G + bi * m * n;
      const std::int64_t boff = shared_b ? 0 : bi * k * n;
      if (ia->requires_grad) {
        gemm_nt(g, ib->value.data() + boff, ia->grad_buffer() + bi * m * k, m, n, k);
      }
      if (ib->requires_grad) {
        gemm_tn(ia->value.data() + bi * m * k, g, ib->grad_buffer() + boff, m, k, n);
      }
    }
  };
  return detail::make_result("matmul", std::move(out_shape), std::move(out), {ia, ib},
                             std::move(fn), record);
}

Tensor permute(const Tensor& a, std::span<const int> axes) {
  const int r = a.rank();
  if (static_cast<int>(axes.size()) != r) {
    throw ShapeError("permute: axis list does not match rank of " + shape_str(a.shape()));
  }
  std::vector<int> seen(static_cast<std::size_t>(r), 0);
  for (int ax : axes) {
    if (ax < 0 || ax >= r || seen[static_cast<std::size_t>(ax)]++) {
      throw ShapeError("permute: invalid axis permutation");
    }
  }
  const auto& s = a.shape();
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = s[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  const auto in_strides = strides_of(s);
  const auto n = static_cast<std::size_t>(a.numel());
  // map[out_flat] = in_flat
  auto map = std::make_shared<std::vector<std::int64_t>>(n);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::int64_t off = 0;
    for (int d = 0; d < r; ++d) {
      off += idx[static_cast<std::size_t>(d)] * in_strides[static_cast<std::size_t>(axes[static_cast<std::size_t>(d)])];
    }
    (*map)[flat] = off;
    for (int d = r - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < out_shape[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
  std::vector<double> out(n);
  const auto av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[static_cast<std::size_t>((*map)[i])];
  const bool record = detail::needs_record({&a});
  Impl ia = a.impl();
  auto fn = [ia, map](const TensorImpl& o) {
    if (!ia->requires_grad) return;
    double* ga = ia->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[(*map)[i]] += o.grad[i];
  };
  return detail::make_result("permute", std::move(out_shape), std::move(out), {ia},
                             std::move(fn), record);
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose: rank < 2 for " + shape_str(a.shape()));
  std::vector<int> axes(static_cast<std::size_t>(a.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(a, axes);
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const bool record = detail::needs_record({&a});
  Impl ia = a.impl();
  auto fn = [ia](const TensorImpl& o) {
    if (!ia->requires_grad) return;
    double* ga = ia->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) ga[i] += o.grad[i];
  };
  return detail::make_result("reshape", std::move(shape),
                             std::vector<double>(a.values().begin(), a.values().end()), {ia},
                             std::move(fn), record);
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts[0].rank();
  axis = normalize_axis(axis, r, "concat");
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    detail::require_finite(p, "concat");
    if (p.rank() != r) shape_fail("concat", parts[0], p);
    for (int d = 0; d < r; ++d) {
      if (d != axis && p.dim(d) != parts[0].dim(d)) shape_fail("concat", parts[0], p);
    }
    out_shape[static_cast<std::size_t>(axis)] += p.dim(axis);
  }
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<std::size_t>(d)];
  for (int d = axis + 1; d < r; ++d) inner *= out_shape[static_cast<std::size_t>(d)];
  const std::int64_t total = out_shape[static_cast<std::size_t>(axis)];
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::int64_t len = p.dim(axis);
    const auto pv = p.values();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * len * inner, len * inner,
                  out.data() + (o * total + offset) * inner);
    }
    offset += len;
  }
  const bool record = detail::needs_record(parts);
  std::vector<Impl> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  auto fn = [impls, offsets, outer, inner, total](const TensorImpl& o) {
    for (std::size_t pi = 0; pi < impls.size(); ++pi) {
      const auto& ip = impls[pi];
      if (!ip->requires_grad) continue;
      const std::int64_t len = static_cast<std::int64_t>(ip->value.size()) / (outer * inner);
      double* gp = ip->grad_buffer();
      for (std::int64_t oo = 0; oo < outer; ++oo) {
        const double* src = o.grad.data() + (oo * total + offsets[pi]) * inner;
        double* dst = gp + oo * len * inner;
        for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    }
  };
  return detail::make_result("concat", std::move(out_shape), std::move(out), impls,
                             std::move(fn), record);
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t end) {
  axis = normalize_axis(axis, a.rank(), "slice");
  const std::int64_t len = a.dim(axis);
  if (start < 0 || end > len || start >= end) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(end) +
                     ") invalid for " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = end - start;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= a.dim(d);
  for (int d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
  const std::int64_t width = end - start;
  std::vector<double> out(static_cast<std::size_t>(outer * width * inner));
  const auto av = a.values();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy_n(av.data() + (o * len + start) * inner, width * inner,
                out.data() + o * width * inner);
  }
  const bool record = detail::needs_record({&a});
  Impl ia = a.impl();
  auto fn = [ia, outer, inner, len, start, width](const TensorImpl& o) {
    if (!ia->requires_grad) return;
    double* ga = ia->grad_buffer();
    for (std::int64_t oo = 0; oo < outer; ++oo) {
      const double* src = o.grad.data() + oo * width * inner;
      double* dst = ga + (oo * len + start) * inner;
      for (std::int64_t i = 0; i < width * inner; ++i) dst[i] += src[i];
    }
  };
  return detail::make_result("slice", std::move(out_shape), std::move(out), {ia}, std::move(fn),
                             record);
}

Tensor index_select(const Tensor& a, std::span<const std::int64_t> indices) {
  if (indices.empty()) throw ShapeError("index_select: empty index list");
  const std::int64_t rows = a.dim(0);
  const std::int64_t row = a.numel() / rows;
  for (auto i : indices) {
    if (i < 0 || i >= rows) throw ShapeError("index_select: index out of range");
  }
  Shape out_shape = a.shape();
  out_shape[0] = static_cast<std::int64_t>(indices.size());
  std::vector<double> out(indices.size() * static_cast<std::size_t>(row));
  const auto av = a.values();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(av.data() + indices[r] * row, row, out.data() + static_cast<std::int64_t>(r) * row);
  }
  const bool record = detail::needs_record({&a});
  Impl ia = a.impl();
  auto idx = std::make_shared<std::vector<std::int64_t>>(indices.begin(), indices.end());
  auto fn = [ia, idx, row](const TensorImpl& o) {
    if (!ia->requires_grad) return;
    double* ga = ia->grad_buffer();
    for (std::size_t r = 0; r < idx->size(); ++r) {
      const double* src = o.grad.data() + static_cast<std::int64_t>(r) * row;
      double* dst = ga + (*idx)[r] * row;
      for (std::int64_t i = 0; i < row; ++i) dst[i] += src[i];
    }
  };
  return detail::make_result("index_select", std::move(out_shape), std::move(out), {ia},
                             std::move(fn), record);
}

Tensor softmax(const Tensor& a) {
  detail::require_finite(a, "softmax");
  const std::int64_t cols = a.dim(-1);
  const std::int64_t rows = a.numel() / cols;
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::int64_t c = 0; c < cols; ++c) y[c] /= z;
  }
  const bool record = detail::needs_record({&a});
  Impl ia = a.impl();
  auto fn = [ia, rows, cols](const TensorImpl& o) {
    if (!ia->requires_grad) return;
    double* ga = ia->grad_buffer();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = o.value.data() + r * cols;
      const double* g = o.grad.data() + r * cols;
      double dot = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) dot += g[c] * y[c];
      for (std::int64_t c = 0; c < cols; ++c) ga[r * cols + c] += y[c] * (g[c] - dot);
    }
  };
  return detail::make_result("softmax", a.shape(), std::move(out), {ia}, std::move(fn), record);
}

namespace {

// Normalizes `count` contiguous blocks of length `len`; shared by layer/group norm.
Tensor normalize_blocks(std::string_view kind, const Tensor& a, std::int64_t count,
                        std::int64_t len, double eps) {
  detail::require_finite(a, kind);
  const auto av = a.values();
  std::vector<double> out(av.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(count));
  for (std::int64_t b = 0; b < count; ++b) {
    const double* x = av.data() + b * len;
    double mu = 0.0;
    for (std::int64_t i = 0; i < len; ++i) mu += x[i];
    mu /= static_cast<double>(len);
    double var = 0.0;
    for (std::int64_t i = 0; i < len; ++i) var += (x[i] - mu) * (x[i] - mu);
    var /= static_cast<double>(len);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<std::size_t>(b)] = is;
    double* y = out.data() + b * len;
    for (std::int64_t i = 0; i < len; ++i) y[i] = (x[i] - mu) * is;
  }
  const bool record = detail::needs_record({&a});
  Impl ia = a.impl();
  auto fn = [ia, inv_std, count, len](const TensorImpl& o) {
    if (!ia->requires_grad) return;
    double* ga = ia->grad_buffer();
    const double inv_len = 1.0 / static_cast<double>(len);
    for (std::int64_t b = 0; b < count; ++b) {
      const double* y = o.value.data() + b * len;
      const double* g = o.grad.data() + b * len;
      double mg = 0.0, mgy = 0.0;
      for (std::int64_t i = 0; i < len; ++i) {
        mg += g[i];
        mgy += g[i] * y[i];
      }
      mg *= inv_len;
      mgy *= inv_len;
      const double is = (*inv_std)[static_cast<std::size_t>(b)];
      for (std::int64_t i = 0; i < len; ++i) ga[b * len + i] += is * (g[i] - mg - y[i] * mgy);
    }
  };
  return detail::make_result(kind, a.shape(), std::move(out), {ia}, std::move(fn), record);
}

}  // namespace

Tensor layer_norm(const Tensor& a, double eps) {
  const std::int64_t len = a.dim(-1);
  return normalize_blocks("layer_norm", a, a.numel() / len, len, eps);
}

Tensor group_norm(const Tensor& x, int groups, double eps) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw ShapeError("group_norm: expected [N,C,H,W] or [C,H,W], got " + shape_str(x.shape()));
  }
  const std::int64_t channels = x.dim(-3);
  if (groups < 1 || channels % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(channels) +
                     " channels not divisible into " + std::to_string(groups) + " groups");
  }
  const std::int64_t batch = x.rank() == 4 ? x.dim(0) : 1;
  const std::int64_t len = x.numel() / (batch * groups);
  return normalize_blocks("group_norm", x, batch * groups, len, eps);
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  if (x.rank() != 4 || weight.rank() != 4) shape_fail("conv2d", x, weight);
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t O = weight.dim(0), K = weight.dim(2);
  if (weight.dim(1) != C || weight.dim(3) != K) shape_fail("conv2d", x, weight);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O)) shape_fail("conv2d", weight, bias);
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  const std::int64_t Ho = (H + 2 * padding - K) / stride + 1;
  const std::int64_t Wo = (W + 2 * padding - K) / stride + 1;
  if (Ho < 1 || Wo < 1) shape_fail("conv2d", x, weight);
  detail::require_finite(x, "conv2d");
  detail::require_finite(weight, "conv2d");
  if (bias.defined()) detail::require_finite(bias, "conv2d");

  const std::int64_t ckk = C * K * K;
  const std::int64_t hw = Ho * Wo;
  // im2col per batch item; kept for the weight gradient.
  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N * ckk * hw), 0.0);
  const auto xv = x.values();
  for (std::int64_t n = 0; n < N; ++n) {
    double* col = cols->data() + n * ckk * hw;
    for (std::int64_t c = 0; c < C; ++c) {
      const double* img = xv.data() + (n * C + c) * H * W;
      for (std::int64_t ky = 0; ky < K; ++ky) {
        for (std::int64_t kx = 0; kx < K; ++kx) {
          double* row = col + ((c * K + ky) * K + kx) * hw;
          for (std::int64_t oy = 0; oy < Ho; ++oy) {
            const std::int64_t iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= H) continue;
            for (std::int64_t ox = 0; ox < Wo; ++ox) {
              const std::int64_t ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= W) continue;
              row[oy * Wo + ox] = img[iy * W + ix];
            }
          }
        }
      }
    }
  }
  std::vector<double> out(static_cast<std::size_t>(N * O * hw), 0.0);
  const double* wv = weight.values().data();
  for (std::int64_t n = 0; n < N; ++n) {
    double* dst = out.data() + n * O * hw;
    if (bias.defined()) {
      for (std::int64_t o = 0; o < O; ++o) std::fill_n(dst + o * hw, hw, bias.values()[static_cast<std::size_t>(o)]);
    }
    gemm_nn(wv, cols->data() + n * ckk * hw, dst, O, ckk, hw);
  }
  const bool record = detail::needs_record({&x, &weight, &bias});
  Impl ix = x.impl();
  Impl iw = weight.impl();
  Impl ib = bias.defined() ? bias.impl() : nullptr;
  std::vector<Impl> inputs{ix, iw};
  if (ib) inputs.push_back(ib);
  auto fn = [ix, iw, ib, cols, N, C, H, W, O, K, Ho, Wo, ckk, hw, stride, padding](const TensorImpl& o) {
    std::vector<double> dcol;
    for (std::int64_t n = 0; n < N; ++n) {
      const double* g = o.grad.data() + n * O * hw;
      if (ib && ib->requires_grad) {
        double* gb = ib->grad_buffer();
        for (std::int64_t oc = 0; oc < O; ++oc) {
          double s = 0.0;
          for (std::int64_t i = 0; i < hw; ++i) s += g[oc * hw + i];
          gb[oc] += s;
        }
      }
      if (iw->requires_grad) {
        gemm_nt(g, cols->data() + n * ckk * hw, iw->grad_buffer(), O, hw, ckk);
      }
      if (ix->requires_grad) {
        dcol.assign(static_cast<std::size_t>(ckk * hw), 0.0);
        gemm_tn(iw->value.data(), g, dcol.data(), O, ckk, hw);
        double* gx = ix->grad_buffer();
        for (std::int64_t c = 0; c < C; ++c) {
          double* img = gx + (n * C + c) * H * W;
          for (std::int64_t ky = 0; ky < K; ++ky) {
            for (std::int64_t kx = 0; kx < K; ++kx) {
              const double* row = dcol.data() + ((c * K + ky) * K + kx) * hw;
              for (std::int64_t oy = 0; oy < Ho; ++oy) {
                const std::int64_t iy = oy * stride - padding + ky;
                if (iy < 0 || iy >= H) continue;
                for (std::int64_t ox = 0; ox < Wo; ++ox) {
                  const std::int64_t ixx = ox * stride - padding + kx;
                  if (ixx < 0 || ixx >= W) continue;
                  img[iy * W + ixx] += row[oy * Wo + ox];
                }
              }
            }
          }
        }
      }
    }
  };
  return detail::make_result("conv2d", {N, O, Ho, Wo}, std::move(out), std::move(inputs),
                             std::move(fn), record);
}

Tensor bilinear_sample(const Tensor& map, std::span<const double> uvs) {
  if (map.rank() != 3) throw ShapeError("bilinear_sample: map must be [C,H,W], got " + shape_str(map.shape()));
  if (uvs.empty() || uvs.size() % 2 != 0) throw ShapeError("bilinear_sample: uv list must hold pairs");
  detail::require_finite(map, "bilinear_sample");
  const std::int64_t C = map.dim(0), H = map.dim(1), W = map.dim(2);
  const std::int64_t N = static_cast<std::int64_t>(uvs.size() / 2);
  struct Tap {
    std::int64_t idx[4];
    double w[4];
  };
  auto taps = std::make_shared<std::vector<Tap>>(static_cast<std::size_t>(N));
  for (std::int64_t p = 0; p < N; ++p) {
    const double x = std::clamp(uvs[2 * p] * static_cast<double>(W) - 0.5, 0.0, static_cast<double>(W - 1));
    const double y = std::clamp(uvs[2 * p + 1] * static_cast<double>(H) - 0.5, 0.0, static_cast<double>(H - 1));
    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
    const std::int64_t x1 = std::min(x0 + 1, W - 1);
    const std::int64_t y1 = std::min(y0 + 1, H - 1);
    const double fx = x - static_cast<double>(x0);
    const double fy = y - static_cast<double>(y0);
    auto& t = (*taps)[static_cast<std::size_t>(p)];
    t.idx[0] = y0 * W + x0; t.w[0] = (1 - fx) * (1 - fy);
    t.idx[1] = y0 * W + x1; t.w[1] = fx * (1 - fy);
    t.idx[2] = y1 * W + x0; t.w[2] = (1 - fx) * fy;
    t.idx[3] = y1 * W + x1; t.w[3] = fx * fy;
  }
  std::vector<double> out(static_cast<std::size_t>(N * C), 0.0);
  const auto mv = map.values();
  for (std::int64_t p = 0; p < N; ++p) {
    const auto& t = (*taps)[static_cast<std::size_t>(p)];
    for (std::int64_t c = 0; c < C; ++c) {
      const double* plane = mv.data() + c * H * W;
      out[static_cast<std::size_t>(p * C + c)] = t.w[0] * plane[t.idx[0]] + t.w[1] * plane[t.idx[1]] +
                                                 t.w[2] * plane[t.idx[2]] + t.w[3] * plane[t.idx[3]];
    }
  }
  const bool record = detail::needs_record({&map});
  Impl im = map.impl();
  auto fn = [im, taps, C, H, W, N](const TensorImpl& o) {
    if (!im->requires_grad) return;
    double* gm = im->grad_buffer();
    for (std::int64_t p = 0; p < N; ++p) {
      const auto& t = (*taps)[static_cast<std::size_t>(p)];
      for (std::int64_t c = 0; c < C; ++c) {
        const double g = o.grad[static_cast<std::size_t>(p * C + c)];
        double* plane = gm + c * H * W;
        for (int k = 0; k < 4; ++k) plane[t.idx[k]] += g * t.w[k];
      }
    }
  };
  return detail::make_result("bilinear_sample", {N, C}, std::move(out), {im}, std::move(fn), record);
}

Tensor avg_pool_hwc(const Tensor& image, int k) {
  if (image.rank() != 3 || k < 1 || image.dim(0) % k != 0 || image.dim(1) % k != 0) {
    throw ShapeError("avg_pool_hwc: " + shape_str(image.shape()) + " not divisible by window " +
                     std::to_string(k));
  }
  detail::require_finite(image, "avg_pool");
  const std::int64_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  const std::int64_t Ho = H / k, Wo = W / k;
  const double scale = 1.0 / static_cast<double>(k * k);
  std::vector<double> out(static_cast<std::size_t>(Ho * Wo * C), 0.0);
  const auto iv = image.values();
  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t x = 0; x < W; ++x) {
      for (std::int64_t c = 0; c < C; ++c) {
        out[static_cast<std::size_t>(((y / k) * Wo + x / k) * C + c)] += scale * iv[static_cast<std::size_t>((y * W + x) * C + c)];
      }
    }
  }
  const bool record = detail::needs_record({&image});
  Impl ii = image.impl();
  auto fn = [ii, H, W, C, Wo, k, scale](const TensorImpl& o) {
    if (!ii->requires_grad) return;
    double* g = ii->grad_buffer();
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        for (std::int64_t c = 0; c < C; ++c) {
          g[(y * W + x) * C + c] += scale * o.grad[static_cast<std::size_t>(((y / k) * Wo + x / k) * C + c)];
        }
      }
    }
  };
  return detail::make_result("avg_pool", {Ho, Wo, C}, std::move(out), {ii}, std::move(fn), record);
}

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) shape_fail("attention", q, k);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(-1)));
  auto scores = mul_scalar(matmul(q, transpose(k)), scale);
  return matmul(softmax(scores), v);
}

}  // namespace gavatar::ops
