#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fps {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Raised for every contract violation on shapes or arguments.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::uint64_t seq = detail::node_counter().fetch_add(1, std::memory_order_relaxed);
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Shared handle to a node of the reverse-mode graph. Copies alias the same
/// storage; leaves created with requires_grad accumulate gradients.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    for (int d : shape)
      if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    n->data.assign(shape_numel(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(shape));
    Tensor t = zeros(std::move(shape), requires_grad);
    t.node_->data = std::move(values);
    return t;
  }

  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
  [[nodiscard]] const Shape& shape() const { return node_->shape; }
  [[nodiscard]] int rank() const { return static_cast<int>(node_->shape.size()); }
  [[nodiscard]] int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i < 0 ? i + rank() : i)); }
  [[nodiscard]] std::size_t numel() const { return node_->data.size(); }

  [[nodiscard]] std::span<const T> data() const { return node_->data; }
  /// Direct write access; only meaningful on leaves (weights, inputs).
  [[nodiscard]] std::span<T> mutable_data() { return node_->data; }
  [[nodiscard]] const std::vector<T>& values() const { return node_->data; }

  [[nodiscard]] T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  [[nodiscard]] bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; zeros are materialized if nothing has flowed in yet.
  [[nodiscard]] std::span<const T> grad() const { return node_->grad_buffer(); }
  [[nodiscard]] std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no history.
  [[nodiscard]] Tensor detach() const { return Tensor::from(shape(), node_->data, false); }

  /// Deep copy preserving the requires_grad flag (fresh leaf).
  [[nodiscard]] Tensor clone() const { return Tensor::from(shape(), node_->data, requires_grad()); }

  /// Reverse pass from this tensor. A scalar is seeded with 1; otherwise a
  /// seed gradient of matching size must be supplied. The graph is released
  /// as it is consumed, so backward runs at most once per forward.
  void backward(std::span<const T> seed = {}) {
    if (seed.empty()) {
      if (numel() != 1) throw ShapeError("backward() without seed needs a scalar, got " + shape_str(shape()));
      node_->grad_buffer()[0] += T(1);
    } else {
      if (seed.size() != numel()) throw ShapeError("backward seed size mismatch");
      auto& g = node_->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    }
    // Shared ownership keeps queued nodes alive while consumers release
    // their parent lists.
    std::vector<std::shared_ptr<Node<T>>> order;
    std::vector<std::shared_ptr<Node<T>>> stack{node_};
    std::unordered_set<const Node<T>*> seen;
    while (!stack.empty()) {
      std::shared_ptr<Node<T>> n = std::move(stack.back());
      stack.pop_back();
      if (!seen.insert(n.get()).second) continue;
      if (!n->backward_fn) continue;
      for (auto& p : n->parents)
        if (p->requires_grad) stack.push_back(p);
      order.push_back(std::move(n));
    }
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });
    for (auto& n : order) {
      if (!n->grad.empty()) n->backward_fn(*n);
      n->backward_fn = nullptr;
      n->parents.clear();
      if (n != node_) {
        n->grad.clear();
        n->grad.shrink_to_fit();
      }
      n.reset();
    }
  }

  [[nodiscard]] Node<T>* node() const { return node_.get(); }
  [[nodiscard]] const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

/// Builds a result node. When any parent needs a gradient and grad mode is
/// on, the parents and the backward closure are retained.
template <class T, class Fn>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> parents, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::forward<Fn>(backward);
  }
  return Tensor<T>(std::move(n));
}

template <class T, class Fn>
Tensor<T> make_result_n(Shape shape, std::vector<T> data, const std::vector<Tensor<T>>& parents, Fn&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool needs = false;
  if (grad_enabled())
    for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    n->requires_grad = true;
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
    n->backward_fn = std::forward<Fn>(backward);
  }
  return Tensor<T>(std::move(n));
}

/// Gradient sink of a parent, or nullptr when it does not need one.
template <class T>
T* grad_sink(Node<T>& self, std::size_t parent) {
  auto& p = *self.parents[parent];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

}  // namespace detail

template <class T>
void require_shape(const Tensor<T>& t, const Shape& expected, const char* what) {
  if (t.shape() != expected)
    throw ShapeError(std::string(what) + ": expected shape " + shape_str(expected) + ", got " + shape_str(t.shape()));
}

template <class T>
void require_rank(const Tensor<T>& t, int rank, const char* what) {
  if (t.rank() != rank)
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     shape_str(t.shape()));
}

}  // namespace fps
