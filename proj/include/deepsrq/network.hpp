#ifndef DEEPSRQ_NETWORK_HPP
#define DEEPSRQ_NETWORK_HPP

#include "deepsrq/layers.hpp"

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

namespace deepsrq {

/// One row of an architecture summary: a named group of consecutive layers
/// (e.g. CONV1 = convolution + ELU).
struct LayerRow {
  std::string name;
  Shape output_shape;
  std::size_t param_count = 0;
};

/// Ordered layer stack. Layers are tagged with the group (summary row) they
/// belong to; feature maps can be read at the end of any group.
template <typename T>
class Sequential {
 public:
  Sequential() = default;
  explicit Sequential(Shape input_shape) : input_shape_(std::move(input_shape)) {}
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L& add(std::string group, Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    // validates shape compatibility as layers are appended
    output_shape_ = ref.output_shape(layers_.empty() ? input_shape_ : output_shape_);
    layers_.push_back(std::move(layer));
    groups_.push_back(std::move(group));
    return ref;
  }

  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return layers_.empty() ? input_shape_ : output_shape_; }
  std::size_t size() const { return layers_.size(); }
  Layer<T>& layer(std::size_t i) { return *layers_[i]; }
  const Layer<T>& layer(std::size_t i) const { return *layers_[i]; }
  const std::string& group(std::size_t i) const { return groups_[i]; }

  bool has_group(const std::string& g) const {
    return std::find(groups_.begin(), groups_.end(), g) != groups_.end();
  }

  std::vector<LayerRow> summary() const {
    std::vector<LayerRow> rows;
    Shape shape = input_shape_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      shape = layers_[i]->output_shape(shape);
      if (rows.empty() || rows.back().name != groups_[i]) rows.push_back({groups_[i], {}, 0});
      rows.back().output_shape = shape;
      rows.back().param_count += layers_[i]->param_count();
    }
    return rows;
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& l : layers_)
      for (auto* p : l->params()) out.push_back(p);
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto* p : params()) n += p->value.size();
    return n;
  }

  Tensor<T> forward(const Tensor<T>& input, const ForwardContext& ctx) {
    require_shape(input, input_shape_, "network input");
    Tensor<T> x = input;
    for (auto& l : layers_) x = l->forward(x, ctx);
    recorded_ = true;
    return x;
  }

  /// Output at the end of `group`, without recording anything for backward.
  Tensor<T> forward_until(const Tensor<T>& input, const std::string& group) {
    if (!has_group(group)) throw NnError(NnErrc::UnknownLayer, group);
    require_shape(input, input_shape_, "network input");
    Tensor<T> x = input;
    const ForwardContext ctx{};
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i]->forward(x, ctx);
      if (groups_[i] == group && (i + 1 == layers_.size() || groups_[i + 1] != group)) break;
    }
    recorded_ = false;
    return x;
  }

  /// Propagates `grad_out` through the recorded forward pass, accumulating
  /// parameter gradients. Returns the gradient with respect to the input.
  Tensor<T> backward(const Tensor<T>& grad_out) {
    if (!recorded_) throw NnError(NnErrc::NoRecordedForward, "backward called without a recorded forward pass");
    Tensor<T> g = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    recorded_ = false;
    return g;
  }

  void zero_grad() {
    for (auto* p : params()) p->grad.fill(T{});
  }

 private:
  Shape input_shape_;
  Shape output_shape_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  std::vector<std::string> groups_;
  bool recorded_ = false;
};

}  // namespace deepsrq

#endif  // DEEPSRQ_NETWORK_HPP
