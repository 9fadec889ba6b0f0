#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "fps/core/rng.hpp"
#include "fps/core/tensor.hpp"

namespace fps {

/// Named parameter set. Module constructors call `param`/`ones`/`zeros` with
/// hierarchical names; an entry that already exists (for example after
/// loading a checkpoint) is returned as is after a shape check, so the same
/// code path both initializes and binds weights.
///
/// Each fresh kernel is drawn from its own substream keyed by name, which
/// makes initialization independent of construction order.
template <class T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  /// Uniform on [-b, b] with b = sqrt(3 / fan_in), i.e. std 1/sqrt(fan_in).
  Tensor<T> param(const std::string& name, const Shape& shape, int fan_in) {
    return get_or_make(params_, name, shape, [&](Tensor<T>& t) {
      const double bound = std::sqrt(3.0 / fan_in);
      Rng rng = Rng(seed_, "weights").substream(name);
      for (auto& v : t.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
    });
  }

  Tensor<T> zeros(const std::string& name, const Shape& shape) {
    return get_or_make(params_, name, shape, [](Tensor<T>&) {});
  }

  Tensor<T> ones(const std::string& name, const Shape& shape) {
    return get_or_make(params_, name, shape, [](Tensor<T>& t) {
      for (auto& v : t.mutable_data()) v = T(1);
    });
  }

  /// Frozen, non-trainable state filled by `fill` on first use.
  Tensor<T> buffer(const std::string& name, const Shape& shape, const std::function<void(Rng&, std::span<T>)>& fill) {
    return get_or_make(buffers_, name, shape, [&](Tensor<T>& t) {
      Rng rng = Rng(seed_, "buffers").substream(name);
      fill(rng, t.mutable_data());
    });
  }

  [[nodiscard]] const Tensor<T>& at(const std::string& name) const {
    if (auto it = params_.find(name); it != params_.end()) return it->second;
    if (auto it = buffers_.find(name); it != buffers_.end()) return it->second;
    throw std::out_of_range("no parameter named '" + name + "'");
  }

  [[nodiscard]] bool contains(const std::string& name) const {
    return params_.count(name) != 0 || buffers_.count(name) != 0;
  }

  /// Inserts a preloaded entry (checkpoint restore).
  void insert(const std::string& name, Tensor<T> t, bool trainable) {
    t.set_requires_grad(trainable);
    (trainable ? params_ : buffers_)[name] = std::move(t);
  }

  [[nodiscard]] std::map<std::string, Tensor<T>>& params() { return params_; }
  [[nodiscard]] const std::map<std::string, Tensor<T>>& params() const { return params_; }
  [[nodiscard]] const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }
  [[nodiscard]] std::uint64_t seed() const { return seed_; }

  [[nodiscard]] std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  /// Names of entries that no param/zeros/ones/buffer call has asked for.
  [[nodiscard]] std::vector<std::string> unbound() const {
    std::vector<std::string> out;
    for (const auto* map : {&params_, &buffers_})
      for (const auto& [name, _] : *map)
        if (!bound_.count(name)) out.push_back(name);
    return out;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

 private:
  template <class Fill>
  Tensor<T> get_or_make(std::map<std::string, Tensor<T>>& map, const std::string& name, const Shape& shape,
                        Fill&& fill) {
    if (auto it = map.find(name); it != map.end()) {
      if (it->second.shape() != shape)
        throw ShapeError("parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                         shape_str(shape));
      bound_.insert(name);
      return it->second;
    }
    if (contains(name)) throw std::invalid_argument("parameter '" + name + "' registered twice with different roles");
    Tensor<T> t = Tensor<T>::zeros(shape, &map == &params_);
    fill(t);
    map.emplace(name, t);
    bound_.insert(name);
    return t;
  }

  std::uint64_t seed_;
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, Tensor<T>> buffers_;
  std::set<std::string> bound_;
};

}  // namespace fps
