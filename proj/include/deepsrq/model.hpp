#ifndef DEEPSRQ_MODEL_HPP
#define DEEPSRQ_MODEL_HPP

// Quality network: two convolutional substreams (structure, texture) whose
// 128-d embeddings are concatenated and regressed to one score by a small
// fusion head. A single substream ending in its own width-1 layer is the
// ablation model.

#include "deepsrq/imgio.hpp"
#include "deepsrq/network.hpp"
#include "deepsrq/rng.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace deepsrq {

struct SubstreamConfig {
  int input_size = 32;
  int input_channels = 3;
  int kernel_size = 3;
  std::array<int, 5> conv_channels{16, 16, 32, 32, 64};
  std::array<int, 2> dense_widths{128, 128};
  std::array<double, 2> dropout_probs{0.35, 0.5};
  double elu_alpha = 1.0;

  void validate() const {
    if (input_size < 8 || input_size % 8 != 0)
      throw NnError(NnErrc::BadConfig, "input_size must be a positive multiple of 8");
    if (kernel_size < 1 || kernel_size % 2 == 0)
      throw NnError(NnErrc::BadConfig, "kernel_size must be odd (same padding)");
    if (input_channels < 1) throw NnError(NnErrc::BadConfig, "input_channels must be positive");
    for (int c : conv_channels)
      if (c < 1) throw NnError(NnErrc::BadConfig, "conv channel counts must be positive");
    for (int d : dense_widths)
      if (d < 1) throw NnError(NnErrc::BadConfig, "dense widths must be positive");
    for (double p : dropout_probs)
      if (!(p >= 0 && p < 1)) throw NnError(NnErrc::BadConfig, "dropout probabilities must be in [0,1)");
    if (!(elu_alpha > 0)) throw NnError(NnErrc::BadConfig, "elu_alpha must be positive");
  }

  friend bool operator==(const SubstreamConfig&, const SubstreamConfig&) = default;
};

enum class StreamMode { Both, StructureOnly, TextureOnly };

inline const char* to_string(StreamMode m) {
  switch (m) {
    case StreamMode::Both: return "both";
    case StreamMode::StructureOnly: return "structure_only";
    case StreamMode::TextureOnly: return "texture_only";
  }
  return "both";
}

inline StreamMode parse_stream_mode(const std::string& s) {
  if (s == "both") return StreamMode::Both;
  if (s == "structure_only") return StreamMode::StructureOnly;
  if (s == "texture_only") return StreamMode::TextureOnly;
  throw NnError(NnErrc::BadConfig, "unknown stream mode '" + s + "'");
}

struct TwoStreamConfig {
  SubstreamConfig structure;
  SubstreamConfig texture;
  std::array<int, 2> fusion_widths{256, 1};
  double fusion_dropout = 0.5;
  StreamMode mode = StreamMode::Both;

  void validate() const {
    structure.validate();
    texture.validate();
    if (structure.input_size != texture.input_size)
      throw NnError(NnErrc::BadConfig, "streams must share the input size");
    if (fusion_widths[0] < 1 || fusion_widths[1] != 1)
      throw NnError(NnErrc::BadConfig, "fusion widths must be (w >= 1, 1)");
    if (!(fusion_dropout >= 0 && fusion_dropout < 1))
      throw NnError(NnErrc::BadConfig, "fusion dropout must be in [0,1)");
  }

  friend bool operator==(const TwoStreamConfig&, const TwoStreamConfig&) = default;
};

inline void to_json(nlohmann::json& j, const SubstreamConfig& c) {
  j = {{"input_size", c.input_size},         {"input_channels", c.input_channels},
       {"kernel_size", c.kernel_size},       {"conv_channels", c.conv_channels},
       {"dense_widths", c.dense_widths},     {"dropout_probs", c.dropout_probs},
       {"elu_alpha", c.elu_alpha}};
}

inline void from_json(const nlohmann::json& j, SubstreamConfig& c) {
  j.at("input_size").get_to(c.input_size);
  j.at("input_channels").get_to(c.input_channels);
  j.at("kernel_size").get_to(c.kernel_size);
  j.at("conv_channels").get_to(c.conv_channels);
  j.at("dense_widths").get_to(c.dense_widths);
  j.at("dropout_probs").get_to(c.dropout_probs);
  j.at("elu_alpha").get_to(c.elu_alpha);
}

inline void to_json(nlohmann::json& j, const TwoStreamConfig& c) {
  j = {{"structure", c.structure},
       {"texture", c.texture},
       {"fusion_widths", c.fusion_widths},
       {"fusion_dropout", c.fusion_dropout},
       {"mode", to_string(c.mode)}};
}

inline void from_json(const nlohmann::json& j, TwoStreamConfig& c) {
  j.at("structure").get_to(c.structure);
  j.at("texture").get_to(c.texture);
  j.at("fusion_widths").get_to(c.fusion_widths);
  j.at("fusion_dropout").get_to(c.fusion_dropout);
  c.mode = parse_stream_mode(j.at("mode").get<std::string>());
}

/// Table-style substream. With `with_head` false the stack ends after the
/// second dense group (the 128-d embedding).
template <typename T>
Sequential<T> build_substream(const SubstreamConfig& cfg, bool with_head = true) {
  cfg.validate();
  const int k = cfg.kernel_size;
  const auto& ch = cfg.conv_channels;
  const T alpha = static_cast<T>(cfg.elu_alpha);
  Sequential<T> net({cfg.input_size, cfg.input_size, cfg.input_channels});

  int in_c = cfg.input_channels;
  int elu_index = 1;
  auto conv_block = [&](int idx) {
    const std::string name = "CONV" + std::to_string(idx);
    net.template add<Conv2dSame<T>>(name, name, in_c, ch[idx - 1], k);
    net.template add<Elu<T>>(name, "ELU" + std::to_string(elu_index++), alpha);
    in_c = ch[idx - 1];
  };
  auto pool = [&](int idx) {
    const std::string name = "POOL" + std::to_string(idx);
    net.template add<MaxPool2x2<T>>(name, name);
  };

  conv_block(1);
  pool(1);
  conv_block(2);
  pool(2);
  conv_block(3);
  conv_block(4);
  conv_block(5);
  pool(5);

  const int flat = static_cast<int>(shape_size(net.output_shape()));
  net.template add<Flatten<T>>("DENSE1", "FLATTEN");
  net.template add<Dense<T>>("DENSE1", "DENSE1", flat, cfg.dense_widths[0]);
  net.template add<Elu<T>>("DENSE1", "ELU6", alpha);
  net.template add<Dropout<T>>("DENSE1", "DROP1", cfg.dropout_probs[0]);
  net.template add<Dense<T>>("DENSE2", "DENSE2", cfg.dense_widths[0], cfg.dense_widths[1]);
  net.template add<Elu<T>>("DENSE2", "ELU7", alpha);
  net.template add<Dropout<T>>("DENSE2", "DROP2", cfg.dropout_probs[1]);
  if (with_head) net.template add<Dense<T>>("DENSE3", "DENSE3", cfg.dense_widths[1], 1);
  return net;
}

/// Glorot-uniform (limit sqrt(6 / (fan_in + fan_out))) for weights, zero biases.
template <typename T>
void glorot_uniform_init(Sequential<T>& net, Rng& rng) {
  for (auto* p : net.params()) {
    const auto& s = p->value.shape();
    if (s.size() == 1) {
      p->value.fill(T{});
      continue;
    }
    // conv: k x k x C x K, dense: D x U
    const std::size_t receptive = s.size() == 4 ? static_cast<std::size_t>(s[0]) * s[1] : 1;
    const std::size_t fan_in = receptive * static_cast<std::size_t>(s[s.size() - 2]);
    const std::size_t fan_out = receptive * static_cast<std::size_t>(s.back());
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : p->value.values()) v = static_cast<T>(rng.uniform(-limit, limit));
  }
}

template <typename T>
struct NamedParam {
  std::string name;
  Param<T>* param;
};

template <typename T>
class TwoStreamNet {
 public:
  explicit TwoStreamNet(const TwoStreamConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg.validate();
    switch (cfg.mode) {
      case StreamMode::Both: {
        structure_ = build_substream<T>(cfg.structure, false);
        texture_ = build_substream<T>(cfg.texture, false);
        const int fused = cfg.structure.dense_widths[1] + cfg.texture.dense_widths[1];
        head_ = Sequential<T>({fused});
        head_->template add<Dense<T>>("FUSION1", "FUSION1", fused, cfg.fusion_widths[0]);
        head_->template add<Elu<T>>("FUSION1", "ELU_F1", static_cast<T>(cfg.structure.elu_alpha));
        head_->template add<Dropout<T>>("FUSION1", "DROP_F1", cfg.fusion_dropout);
        head_->template add<Dense<T>>("FUSION2", "FUSION2", cfg.fusion_widths[0], cfg.fusion_widths[1]);
        break;
      }
      case StreamMode::StructureOnly: structure_ = build_substream<T>(cfg.structure, true); break;
      case StreamMode::TextureOnly: texture_ = build_substream<T>(cfg.texture, true); break;
    }
    initialize(seed);
  }

  const TwoStreamConfig& config() const { return cfg_; }
  StreamMode mode() const { return cfg_.mode; }
  int input_size() const { return cfg_.structure.input_size; }

  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    if (structure_) glorot_uniform_init(*structure_, rng);
    if (texture_) glorot_uniform_init(*texture_, rng);
    if (head_) glorot_uniform_init(*head_, rng);
  }

  Sequential<T>* structure() { return structure_ ? &*structure_ : nullptr; }
  Sequential<T>* texture() { return texture_ ? &*texture_ : nullptr; }
  Sequential<T>* head() { return head_ ? &*head_ : nullptr; }

  /// Every parameter, in a fixed order, with a stream-qualified name.
  std::vector<NamedParam<T>> named_params() {
    std::vector<NamedParam<T>> out;
    auto collect = [&](std::optional<Sequential<T>>& net, const char* prefix) {
      if (!net) return;
      for (auto* p : net->params()) out.push_back({std::string(prefix) + "/" + p->name, p});
    };
    collect(structure_, "structure");
    collect(texture_, "texture");
    collect(head_, "fusion");
    return out;
  }

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    for (auto& np : named_params()) out.push_back(np.param);
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto* p : params()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : params()) p->grad.fill(T{});
  }

  /// Sets Dropout mask replay on every dropout layer.
  void set_dropout_replay(bool on) {
    for (auto* net : {structure(), texture(), head()}) {
      if (!net) continue;
      for (std::size_t i = 0; i < net->size(); ++i)
        if (auto* d = dynamic_cast<Dropout<T>*>(&net->layer(i))) d->set_replay(on);
    }
  }

  T forward(const Tensor<T>& s, const Tensor<T>& t, const ForwardContext& ctx) {
    switch (cfg_.mode) {
      case StreamMode::StructureOnly: return structure_->forward(s, ctx)[0];
      case StreamMode::TextureOnly: return texture_->forward(t, ctx)[0];
      case StreamMode::Both: break;
    }
    const Tensor<T> es = structure_->forward(s, ctx);
    const Tensor<T> et = texture_->forward(t, ctx);
    Tensor<T> fused({static_cast<int>(es.size() + et.size())});
    std::copy(es.values().begin(), es.values().end(), fused.values().begin());
    std::copy(et.values().begin(), et.values().end(), fused.values().begin() + static_cast<std::ptrdiff_t>(es.size()));
    return head_->forward(fused, ctx)[0];
  }

  /// Back-propagates d(loss)/d(score) for the most recent forward call.
  void backward(T grad_score) {
    const Tensor<T> g({1}, grad_score);
    switch (cfg_.mode) {
      case StreamMode::StructureOnly: structure_->backward(g); return;
      case StreamMode::TextureOnly: texture_->backward(g); return;
      case StreamMode::Both: break;
    }
    const Tensor<T> gf = head_->backward(g);
    const int ws = cfg_.structure.dense_widths[1];
    Tensor<T> gs({ws}), gt({static_cast<int>(gf.size()) - ws});
    std::copy(gf.values().begin(), gf.values().begin() + ws, gs.values().begin());
    std::copy(gf.values().begin() + ws, gf.values().end(), gt.values().begin());
    structure_->backward(gs);
    texture_->backward(gt);
  }

  /// Inference-mode score of one aligned (structure, texture) patch pair.
  T predict(const Tensor<T>& s, const Tensor<T>& t) { return forward(s, t, ForwardContext{}); }

 private:
  TwoStreamConfig cfg_;
  std::optional<Sequential<T>> structure_;
  std::optional<Sequential<T>> texture_;
  std::optional<Sequential<T>> head_;
};

template <typename T>
T predict_patch(TwoStreamNet<T>& net, const Tensor<T>& s, const Tensor<T>& t) {
  return net.predict(s, t);
}

struct FeatureMapSet {
  std::string stream;
  std::vector<RasterImage> maps;
};

/// Min-max normalized grayscale rendering of each channel of `layer`'s output,
/// per active stream. Constant maps render as uniform zero images.
template <typename T>
std::vector<FeatureMapSet> dump_feature_maps(TwoStreamNet<T>& net, const Tensor<T>& s, const Tensor<T>& t,
                                             const std::string& layer = "CONV1") {
  std::vector<FeatureMapSet> out;
  auto render = [&](Sequential<T>* stream, const Tensor<T>& input, const char* name) {
    if (!stream) return;
    if (!stream->has_group(layer)) throw NnError(NnErrc::UnknownLayer, "no layer named '" + layer + "'");
    const Tensor<T> act = stream->forward_until(input, layer);
    const int H = act.rank() == 3 ? act.extent(0) : 1;
    const int W = act.rank() == 3 ? act.extent(1) : static_cast<int>(act.size());
    const int C = act.rank() == 3 ? act.extent(2) : 1;
    FeatureMapSet set{name, {}};
    for (int c = 0; c < C; ++c) {
      T lo = act[c], hi = act[c];
      for (std::size_t i = c; i < act.size(); i += C) {
        lo = std::min(lo, act[i]);
        hi = std::max(hi, act[i]);
      }
      RasterImage img(W, H, 1);
      auto dst = img.data();
      if (hi > lo)
        for (std::size_t p = 0; p < dst.size(); ++p) {
          const double v = (static_cast<double>(act[p * C + c]) - lo) / (static_cast<double>(hi) - lo);
          dst[p] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
      set.maps.push_back(std::move(img));
    }
    out.push_back(std::move(set));
  };
  bool found = false;
  for (auto* st : {net.structure(), net.texture()}) found = found || (st && st->has_group(layer));
  if (!found) throw NnError(NnErrc::UnknownLayer, "no layer named '" + layer + "'");
  render(net.structure(), s, "structure");
  render(net.texture(), t, "texture");
  return out;
}

}  // namespace deepsrq

#endif  // DEEPSRQ_MODEL_HPP
