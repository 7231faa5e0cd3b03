#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gavatar/error.hpp"

namespace gavatar {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

/// One recorded operation. Holds its inputs and a closure that pushes the
/// output gradient back into them.
struct Node {
  std::uint64_t id = 0;
  std::string_view kind;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  const TensorImpl* output = nullptr;  // owner of this node
  // Called with the output's value and gradient; accumulates into inputs.
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::shared_ptr<Node> producer;

  double* grad_buffer();  // allocates zeros on first use
};

/// Dense row-major float64 tensor with reverse-mode gradient tracking.
///
/// Copies share storage (handle semantics, like a framework tensor). Use
/// `clone()` for an independent copy of the values.
class Tensor {
 public:
  Tensor();
  explicit Tensor(std::shared_ptr<TensorImpl> impl);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;  // negative axes count from the end
  int rank() const;
  std::int64_t numel() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();  // leaves only; mutating recorded values corrupts backward
  std::span<const double> grad() const;  // empty span when no gradient was accumulated
  bool has_grad() const;
  void zero_grad();

  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;

  /// Detached copy of the values (no gradient tracking).
  Tensor clone() const;
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Runs reverse-mode accumulation from a scalar loss. Every node reachable
/// from the loss is visited exactly once, in reverse creation order.
void backward(const Tensor& loss);

/// Topologically ordered record of the nodes reachable from `root`.
std::vector<std::shared_ptr<Node>> computation_record(const Tensor& root);

namespace detail {

/// Whether an op with these inputs must be recorded.
bool needs_record(std::initializer_list<const Tensor*> inputs);
bool needs_record(std::span<const Tensor> inputs);

/// Builds the output tensor and, when recording, attaches a node.
Tensor make_result(std::string_view kind, Shape shape, std::vector<double> value,
                   std::vector<std::shared_ptr<TensorImpl>> inputs,
                   std::function<void(const TensorImpl&)> backward_fn, bool record);

void require_finite(const Tensor& t, std::string_view kind);

}  // namespace detail

/// Registers a user-defined differentiable operation. `backward_fn` receives
/// the output gradient and must accumulate into each input's `grad_buffer()`.
Tensor custom_op(std::string_view kind, std::vector<Tensor> inputs, Shape shape,
                 std::vector<double> value,
                 std::function<void(const TensorImpl& out)> backward_fn);

}  // namespace gavatar
