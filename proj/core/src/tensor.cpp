#include "gavatar/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace gavatar {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_next_node_id{1};

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

double* TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad.data();
}

Tensor::Tensor() = default;
Tensor::Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d < 1) throw ShapeError("tensor dims must be >= 1, got " + shape_str(shape));
  }
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                     std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value),
              requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return from(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                       bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return from(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(axis)];
}

int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->value.size()); }

std::span<const double> Tensor::values() const { return impl_->value; }
std::span<double> Tensor::mutable_values() { return impl_->value; }

std::span<const double> Tensor::grad() const { return impl_->grad; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
void Tensor::zero_grad() { impl_->grad.clear(); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->value[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) {
    throw ShapeError("index rank does not match " + shape_str(shape()));
  }
  std::int64_t flat = 0;
  int axis = 0;
  for (auto i : index) {
    const auto d = impl_->shape[static_cast<std::size_t>(axis++)];
    if (i < 0 || i >= d) throw ShapeError("index out of range for " + shape_str(shape()));
    flat = flat * d + i;
  }
  return impl_->value[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ConfigError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return impl_->producer == nullptr; }

Tensor Tensor::clone() const { return from(impl_->shape, impl_->value, false); }
Tensor Tensor::detach() const { return clone(); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

std::vector<std::shared_ptr<Node>> computation_record(const Tensor& root) {
  std::vector<std::shared_ptr<Node>> order;
  if (!root.defined() || !root.impl()->producer) return order;
  std::unordered_set<const Node*> seen;
  // Iterative post-order DFS; each node is emitted after all of its inputs.
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(root.impl()->producer, 0);
  seen.insert(root.impl()->producer.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const auto& producer = node->inputs[next++]->producer;
      if (producer && seen.insert(producer.get()).second) stack.emplace_back(producer, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }
  return order;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  auto order = computation_record(loss);
  loss.impl()->grad_buffer()[0] += 1.0;
  // Post-order puts every producer before its consumers; walk it backwards.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const TensorImpl* out = (*it)->output;
    if (out->grad.empty()) continue;  // no gradient reached this branch
    (*it)->backward(*out);
  }
}

namespace detail {

bool needs_record(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

bool needs_record(std::span<const Tensor> inputs) {
  if (!g_grad_enabled) return false;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

Tensor make_result(std::string_view kind, Shape shape, std::vector<double> value,
                   std::vector<std::shared_ptr<TensorImpl>> inputs,
                   std::function<void(const TensorImpl&)> backward_fn, bool record) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(value);
  if (record) {
    auto node = std::make_shared<Node>();
    node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
    node->kind = kind;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
    node->output = impl.get();
    impl->producer = std::move(node);
    impl->requires_grad = true;
  }
  return Tensor(std::move(impl));
}

void require_finite(const Tensor& t, std::string_view kind) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericalError(std::string(kind) + ": non-finite input of shape " +
                           shape_str(t.shape()));
    }
  }
}

}  // namespace detail

Tensor custom_op(std::string_view kind, std::vector<Tensor> inputs, Shape shape,
                 std::vector<double> value,
                 std::function<void(const TensorImpl& out)> backward_fn) {
  const bool record = detail::needs_record(std::span<const Tensor>(inputs));
  std::vector<std::shared_ptr<TensorImpl>> impls;
  if (record) {
    impls.reserve(inputs.size());
    for (const auto& t : inputs) impls.push_back(t.impl());
  }
  return detail::make_result(kind, std::move(shape), std::move(value), std::move(impls),
                             std::move(backward_fn), record);
}

}  // namespace gavatar
