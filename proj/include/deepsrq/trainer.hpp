#ifndef DEEPSRQ_TRAINER_HPP
#define DEEPSRQ_TRAINER_HPP

// Dataset manifests, content-disjoint splits, patch-pair assembly, the
// mini-batch training loop and image-level prediction by average pooling.

#include "deepsrq/checkpoint.hpp"
#include "deepsrq/decomp.hpp"
#include "deepsrq/imgio.hpp"
#include "deepsrq/model.hpp"
#include "deepsrq/optim.hpp"
#include "deepsrq/patching.hpp"
#include "deepsrq/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepsrq {

enum class TrainErrc { ParseError, RangeError, DuplicatePath, TooFewGroups, NonFiniteLoss, Pipeline, BadConfig };

inline const char* to_string(TrainErrc c) {
  switch (c) {
    case TrainErrc::ParseError: return "ParseError";
    case TrainErrc::RangeError: return "RangeError";
    case TrainErrc::DuplicatePath: return "DuplicatePath";
    case TrainErrc::TooFewGroups: return "TooFewGroups";
    case TrainErrc::NonFiniteLoss: return "NonFiniteLoss";
    case TrainErrc::Pipeline: return "Pipeline";
    case TrainErrc::BadConfig: return "BadConfig";
  }
  return "Unknown";
}

class TrainError : public std::runtime_error {
 public:
  TrainError(TrainErrc code, const std::string& what, long index = -1)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code), index_(index) {}
  TrainErrc code() const noexcept { return code_; }
  /// Manifest row (1-based, header is row 1) or batch index, when relevant.
  long index() const noexcept { return index_; }

 private:
  TrainErrc code_;
  long index_;
};

// ---------------------------------------------------------------------------
// Manifest.

struct MosRange {
  double min = 0.0;
  double max = 10.0;
};

struct DatasetRecord {
  std::filesystem::path image_path;  // resolved against the manifest directory
  double mos = 0;
  std::string content_id;
  double amp_factor = 1;
  std::optional<double> scale;
  std::optional<double> kernel_width;
};

struct DatasetManifest {
  std::vector<DatasetRecord> records;
  MosRange range;
};

inline constexpr const char* kManifestHeader = "image_path,mos,content_id,amp_factor,scale,kernel_width";

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline double parse_number(const std::string& s, long row, const char* field) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw TrainError(TrainErrc::ParseError, "row " + std::to_string(row) + ": bad " + field + " '" + s + "'", row);
  }
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace detail

inline DatasetManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir, MosRange range = {}) {
  std::string line;
  if (!std::getline(in, line)) throw TrainError(TrainErrc::ParseError, "empty manifest", 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  if (line != kManifestHeader)
    throw TrainError(TrainErrc::ParseError, std::string("row 1: header must be exactly '") + kManifestHeader + "'", 1);

  DatasetManifest m;
  m.range = range;
  std::set<std::string> seen;
  long row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 6)
      throw TrainError(TrainErrc::ParseError,
                       "row " + std::to_string(row) + ": expected 6 columns, got " + std::to_string(f.size()), row);
    DatasetRecord r;
    if (f[0].empty()) throw TrainError(TrainErrc::ParseError, "row " + std::to_string(row) + ": empty image_path", row);
    r.image_path = std::filesystem::path(f[0]).is_absolute() ? std::filesystem::path(f[0]) : base_dir / f[0];
    r.mos = detail::parse_number(f[1], row, "mos");
    r.content_id = f[2];
    if (r.content_id.empty())
      throw TrainError(TrainErrc::ParseError, "row " + std::to_string(row) + ": empty content_id", row);
    r.amp_factor = detail::parse_number(f[3], row, "amp_factor");
    if (!(r.amp_factor > 0))
      throw TrainError(TrainErrc::RangeError, "row " + std::to_string(row) + ": amp_factor must be positive", row);
    if (!f[4].empty()) r.scale = detail::parse_number(f[4], row, "scale");
    if (!f[5].empty()) r.kernel_width = detail::parse_number(f[5], row, "kernel_width");
    if (!(r.mos >= range.min && r.mos <= range.max))
      throw TrainError(TrainErrc::RangeError,
                       "row " + std::to_string(row) + ": mos " + f[1] + " outside [" + std::to_string(range.min) +
                           ", " + std::to_string(range.max) + "]",
                       row);
    if (!seen.insert(r.image_path.lexically_normal().string()).second)
      throw TrainError(TrainErrc::DuplicatePath, "row " + std::to_string(row) + ": duplicate path " + f[0], row);
    m.records.push_back(std::move(r));
  }
  return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path, MosRange range = {}) {
  std::ifstream in(path);
  if (!in) throw TrainError(TrainErrc::ParseError, "cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path(), range);
}

/// Writes records with paths relative to `path`'s directory when possible.
inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ostringstream out;
  out << kManifestHeader << '\n';
  const auto base = std::filesystem::absolute(path).parent_path();
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(17);
    s << v;
    return s.str();
  };
  for (const auto& r : m.records) {
    auto p = std::filesystem::absolute(r.image_path).lexically_relative(base);
    if (p.empty()) p = std::filesystem::absolute(r.image_path);
    out << detail::csv_field(p.generic_string()) << ',' << num(r.mos) << ',' << detail::csv_field(r.content_id) << ','
        << num(r.amp_factor) << ',' << (r.scale ? num(*r.scale) : "") << ','
        << (r.kernel_width ? num(*r.kernel_width) : "") << '\n';
  }
  const std::string text = out.str();
  detail::write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// ---------------------------------------------------------------------------
// Split.

struct SplitSpec {
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
};

struct Split {
  DatasetManifest train;
  DatasetManifest test;
};

/// Shuffles content ids by seed and assigns them to train until the train
/// image count reaches the target fraction. The test side always keeps at
/// least one content group.
inline Split split_by_content(const DatasetManifest& m, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0 && spec.train_fraction < 1))
    throw TrainError(TrainErrc::BadConfig, "train_fraction must lie in (0,1)");
  std::vector<std::string> groups;
  std::map<std::string, std::size_t> counts;
  for (const auto& r : m.records)
    if (counts[r.content_id]++ == 0) groups.push_back(r.content_id);
  if (groups.size() < 2) throw TrainError(TrainErrc::TooFewGroups, "need at least 2 distinct content ids");

  Rng rng(spec.seed);
  rng.shuffle(groups);
  const double target = spec.train_fraction * static_cast<double>(m.records.size());
  std::set<std::string> train_ids;
  std::size_t train_images = 0;
  for (std::size_t i = 0; i + 1 < groups.size(); ++i) {
    train_ids.insert(groups[i]);
    train_images += counts[groups[i]];
    if (static_cast<double>(train_images) >= target - 1e-9) break;
  }
  Split s;
  s.train.range = s.test.range = m.range;
  for (const auto& r : m.records) (train_ids.count(r.content_id) ? s.train : s.test).records.push_back(r);
  return s;
}

// ---------------------------------------------------------------------------
// Configuration.

struct StridePolicy {
  bool adaptive = false;
  double max_factor = 8.0;  // adaptive: stride = f / f_max * m
  int fixed_stride = 32;    // fixed: stride in pixels

  int stride_for(double factor, int patch_size) const {
    return adaptive ? adaptive_stride(factor, max_factor, patch_size) : fixed_stride;
  }
};

struct TrainConfig {
  int patch_size = 32;
  StridePolicy stride;
  LbpParams lbp;
  RtvParams rtv;
  int epochs = 1000;
  int batch_size = 128;
  SgdConfig sgd;
  TwoStreamConfig network;
  std::uint64_t seed = 0;
  int checkpoint_every = 100;

  void validate() const {
    if (batch_size < 1) throw TrainError(TrainErrc::BadConfig, "batch_size must be >= 1");
    if (epochs < 1) throw TrainError(TrainErrc::BadConfig, "epochs must be >= 1");
    if (patch_size < 1) throw TrainError(TrainErrc::BadConfig, "patch_size must be >= 1");
    if (!stride.adaptive && stride.fixed_stride < 1) throw TrainError(TrainErrc::BadConfig, "stride must be >= 1");
    if (stride.adaptive && !(stride.max_factor > 0)) throw TrainError(TrainErrc::BadConfig, "f_max must be positive");
    if (network.structure.input_size != patch_size || network.texture.input_size != patch_size)
      throw TrainError(TrainErrc::BadConfig, "network input size must equal the patch size");
    lbp.validate();
    rtv.validate();
    network.validate();
  }

  CropPlan plan_for(double factor) const { return {patch_size, patch_size, stride.stride_for(factor, patch_size)}; }
};

/// Sets the patch size everywhere it appears.
inline void set_patch_size(TrainConfig& cfg, int m) {
  cfg.patch_size = m;
  cfg.network.structure.input_size = m;
  cfg.network.texture.input_size = m;
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"patch_size", c.patch_size},
       {"stride", {{"adaptive", c.stride.adaptive}, {"max_factor", c.stride.max_factor}, {"fixed", c.stride.fixed_stride}}},
       {"lbp",
        {{"radius", c.lbp.radius},
         {"neighbors", c.lbp.neighbors},
         {"per_channel", c.lbp.per_channel},
         {"rotation_invariant", c.lbp.rotation_invariant}}},
       {"rtv",
        {{"lambda", c.rtv.lambda},
         {"sigma", c.rtv.sigma},
         {"sharpness", c.rtv.sharpness},
         {"iterations", c.rtv.iterations},
         {"solver_tol", c.rtv.solver_tol}}},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"sgd", {{"learning_rate", c.sgd.learning_rate}, {"decay", c.sgd.decay}, {"momentum", c.sgd.momentum}}},
       {"network", c.network},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.patch_size = j.at("patch_size");
  const auto& s = j.at("stride");
  c.stride = {s.at("adaptive"), s.at("max_factor"), s.at("fixed")};
  const auto& l = j.at("lbp");
  c.lbp = {l.at("radius"), l.at("neighbors"), l.at("per_channel"), l.at("rotation_invariant")};
  const auto& r = j.at("rtv");
  c.rtv = {r.at("lambda"), r.at("sigma"), r.at("sharpness"), r.at("iterations"), r.at("solver_tol")};
  c.epochs = j.at("epochs");
  c.batch_size = j.at("batch_size");
  const auto& o = j.at("sgd");
  c.sgd = {o.at("learning_rate"), o.at("decay"), o.at("momentum")};
  c.network = j.at("network").get<TwoStreamConfig>();
  c.seed = j.at("seed");
  c.checkpoint_every = j.at("checkpoint_every");
}

// ---------------------------------------------------------------------------
// Patch assembly.

struct PatchPair {
  Tensor<float> structure;
  Tensor<float> texture;
  float label = 0;
  int x0 = 0;
  int y0 = 0;
  std::size_t record = 0;  // index into the record list
};

/// Three-channel view of an image; grayscale samples are replicated.
inline RasterImage ensure_rgb(const RasterImage& img) {
  if (img.channels() == 3) return img;
  RasterImage out(img.width(), img.height(), 3);
  const auto src = img.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[3 * i] = dst[3 * i + 1] = dst[3 * i + 2] = src[i];
  return out;
}

struct Decomposition {
  RasterImage structure;
  RasterImage texture;
};

inline Decomposition decompose(const RasterImage& img, const TrainConfig& cfg) {
  const RasterImage rgb = ensure_rgb(img);
  return {extract_structure(rgb, cfg.rtv), extract_texture(rgb, cfg.lbp)};
}

/// Aligned, normalized (structure, texture) pairs for one decomposed image.
inline std::vector<PatchPair> patch_pairs(const Decomposition& d, const CropPlan& plan, float label,
                                          std::size_t record = 0) {
  std::vector<PatchPair> out;
  for (auto [x, y] : crop_origins(d.structure.width(), d.structure.height(), plan)) {
    out.push_back({normalize_patch<float>(crop(d.structure, x, y, plan.patch_width, plan.patch_height)),
                   normalize_patch<float>(crop(d.texture, x, y, plan.patch_width, plan.patch_height)), label, x, y,
                   record});
  }
  return out;
}

/// Every patch pair inherits its image's MOS. Order follows the record list.
inline std::vector<PatchPair> prepare_patches(const std::vector<DatasetRecord>& records, const TrainConfig& cfg) {
  std::vector<PatchPair> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    try {
      const auto d = decompose(load_image(r.image_path), cfg);
      auto pairs = patch_pairs(d, cfg.plan_for(r.amp_factor), static_cast<float>(r.mos), i);
      std::move(pairs.begin(), pairs.end(), std::back_inserter(out));
    } catch (const std::exception& e) {
      throw TrainError(TrainErrc::Pipeline, r.image_path.string() + ": " + e.what(), static_cast<long>(i));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training.

struct EpochStats {
  int epoch = 0;  // 1-based
  double mean_loss = 0;
  double learning_rate = 0;
};

/// Accumulates the MSE gradient of one batch into the network's gradient
/// buffers (which are zeroed first) and returns the batch loss.
template <typename T>
double accumulate_batch_gradient(TwoStreamNet<T>& net, std::span<const PatchPair* const> batch,
                                 const ForwardContext& ctx) {
  net.zero_grad();
  const auto B = static_cast<T>(batch.size());
  double loss = 0;
  for (const PatchPair* p : batch) {
    T pred;
    if constexpr (std::is_same_v<T, float>) {
      pred = net.forward(p->structure, p->texture, ctx);
    } else {
      pred = net.forward(p->structure.template cast<T>(), p->texture.template cast<T>(), ctx);
    }
    const T diff = pred - static_cast<T>(p->label);
    loss += static_cast<double>(diff) * static_cast<double>(diff);
    net.backward(T{2} * diff / B);
  }
  return loss / static_cast<double>(batch.size());
}

struct TrainHooks {
  /// Called after every epoch; may write periodic checkpoints.
  std::function<void(const EpochStats&, TwoStreamNet<float>&, const SgdMomentum<float>&)> on_epoch;
};

/// Mini-batch SGD over `patches` for cfg.epochs epochs. Shuffles once per
/// epoch; the final partial batch is trained.
inline std::vector<EpochStats> train_on_patches(TwoStreamNet<float>& net, const std::vector<PatchPair>& patches,
                                                const TrainConfig& cfg, SgdMomentum<float>& opt,
                                                const TrainHooks& hooks = {}, int first_epoch = 1) {
  if (patches.empty()) throw TrainError(TrainErrc::Pipeline, "no training patches");
  Rng shuffle_rng(cfg.seed ^ 0x5deece66dULL);
  Rng dropout_rng(cfg.seed ^ 0x2545f4914f6cdd1dULL);
  const ForwardContext ctx{true, &dropout_rng};
  const auto params = net.params();

  std::vector<const PatchPair*> order(patches.size());
  for (std::size_t i = 0; i < patches.size(); ++i) order[i] = &patches[i];

  std::vector<EpochStats> history;
  long batch_index = 0;
  for (int epoch = first_epoch; epoch < first_epoch + cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0;
    double lr = opt.current_learning_rate();
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      const std::span<const PatchPair* const> batch(order.data() + start, n);
      const double loss = accumulate_batch_gradient(net, batch, ctx);
      if (!std::isfinite(loss))
        throw TrainError(TrainErrc::NonFiniteLoss,
                         "non-finite loss in batch " + std::to_string(batch_index) + " (epoch " +
                             std::to_string(epoch) + ")",
                         batch_index);
      lr = opt.current_learning_rate();
      opt.step(params);
      loss_sum += loss * static_cast<double>(n);
      ++batch_index;
    }
    history.push_back({epoch, loss_sum / static_cast<double>(order.size()), lr});
    if (hooks.on_epoch) hooks.on_epoch(history.back(), net, opt);
  }
  return history;
}

inline CheckpointMeta make_meta(const TrainConfig& cfg, int epoch, const SgdMomentum<float>& opt) {
  CheckpointMeta meta;
  meta.extra = {{"train_config", cfg}, {"epoch", epoch}, {"seed", cfg.seed}};
  meta.optimizer = OptimizerSnapshot{opt.config(), opt.step_count(), opt.velocities()};
  return meta;
}

inline void write_history_csv(const std::vector<EpochStats>& history, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "epoch,mean_loss,learning_rate\n";
  out.precision(9);
  for (const auto& h : history) out << h.epoch << ',' << h.mean_loss << ',' << h.learning_rate << '\n';
  const std::string text = out.str();
  detail::write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

struct TrainResult {
  TwoStreamNet<float> net;
  std::vector<EpochStats> history;
  std::size_t patch_count = 0;
};

/// Full training run over `records`. Writes the checkpoint at
/// `checkpoint_path` every cfg.checkpoint_every epochs and at the end.
inline TrainResult train(const std::vector<DatasetRecord>& records, const TrainConfig& cfg,
                         const std::filesystem::path& checkpoint_path) {
  cfg.validate();
  const auto patches = prepare_patches(records, cfg);
  TwoStreamNet<float> net(cfg.network, cfg.seed);
  SgdMomentum<float> opt(cfg.sgd);
  TrainHooks hooks;
  if (!checkpoint_path.empty())
    hooks.on_epoch = [&](const EpochStats& s, TwoStreamNet<float>& n, const SgdMomentum<float>& o) {
      if (cfg.checkpoint_every > 0 && s.epoch % cfg.checkpoint_every == 0 && s.epoch != cfg.epochs)
        save_checkpoint(n, make_meta(cfg, s.epoch, o), checkpoint_path);
    };
  auto history = train_on_patches(net, patches, cfg, opt, hooks);
  if (!checkpoint_path.empty()) save_checkpoint(net, make_meta(cfg, cfg.epochs, opt), checkpoint_path);
  return {std::move(net), std::move(history), patches.size()};
}

// ---------------------------------------------------------------------------
// Image-level prediction.

struct ImagePrediction {
  double quality = 0;
  std::vector<double> patch_scores;
  int stride = 0;
};

/// Arithmetic mean of patch scores.
inline double average_pool(std::span<const double> scores) {
  if (scores.empty()) throw TrainError(TrainErrc::Pipeline, "no patch scores to pool");
  double sum = 0;
  for (double s : scores) sum += s;
  return sum / static_cast<double>(scores.size());
}

/// Decomposes, crops with the training stride policy and averages patch
/// scores. Without an amplification factor the largest factor is assumed
/// (stride = patch size).
inline ImagePrediction predict_image_detailed(TwoStreamNet<float>& net, const RasterImage& image,
                                              const TrainConfig& cfg, std::optional<double> amp_factor = {}) {
  if (image.width() < cfg.patch_size || image.height() < cfg.patch_size)
    throw DecompError(DecompErrc::TooSmall, "image " + std::to_string(image.width()) + "x" +
                                                std::to_string(image.height()) + " is smaller than the " +
                                                std::to_string(cfg.patch_size) + "px patch size");
  const double f = amp_factor.value_or(cfg.stride.max_factor);
  const CropPlan plan = cfg.plan_for(cfg.stride.adaptive ? f : 1.0);
  const auto pairs = patch_pairs(decompose(image, cfg), plan, 0.0f);
  ImagePrediction out;
  out.stride = plan.stride;
  for (const auto& p : pairs) out.patch_scores.push_back(static_cast<double>(net.predict(p.structure, p.texture)));
  out.quality = average_pool(out.patch_scores);
  return out;
}

inline double predict_image(TwoStreamNet<float>& net, const RasterImage& image, const TrainConfig& cfg,
                            std::optional<double> amp_factor = {}) {
  return predict_image_detailed(net, image, cfg, amp_factor).quality;
}

/// Training configuration stored in a checkpoint, with the network taken
/// from the checkpoint header.
inline TrainConfig checkpoint_train_config(const LoadedCheckpoint& ck) {
  TrainConfig cfg;
  if (ck.meta.extra.contains("train_config")) cfg = ck.meta.extra.at("train_config").get<TrainConfig>();
  cfg.network = ck.net.config();
  cfg.patch_size = cfg.network.structure.input_size;
  return cfg;
}

}  // namespace deepsrq

#endif  // DEEPSRQ_TRAINER_HPP
