// deepsrq: command-line front end for decomposition, training, prediction,
// evaluation, feature-map dumps and parameter sweeps.
//
// Exit codes: 0 ok, 1 runtime failure, 2 usage error.

#include "deepsrq/deepsrq.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace deepsrq;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_text(const fs::path& path, const std::string& text) {
  detail::write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// One row per training image: the crop stride the policy chose and the
// number of patches it yields.
void write_patch_plan(const std::vector<DatasetRecord>& records, const TrainConfig& cfg, const fs::path& path) {
  std::ostringstream out;
  out << "image_path,amp_factor,stride,patches\n";
  for (const auto& r : records) {
    const RasterImage img = load_image(r.image_path);
    const CropPlan plan = cfg.plan_for(r.amp_factor);
    const auto n = crop_origins(img.width(), img.height(), plan).size();
    out << detail::csv_field(r.image_path.string()) << ',' << format_double(r.amp_factor) << ',' << plan.stride
        << ',' << n << '\n';
  }
  write_text(path, out.str());
}

// ---------------------------------------------------------------------------

struct DecomposeArgs {
  fs::path input, out_structure, out_texture;
  LbpParams lbp;
  RtvParams rtv;
};

void run_decompose(const DecomposeArgs& a) {
  auto one = [&](const fs::path& in, const fs::path& s_out, const fs::path& t_out) {
    const RasterImage img = ensure_rgb(load_image(in));
    save_image(extract_structure(img, a.rtv), s_out);
    save_image(extract_texture(img, a.lbp), t_out);
  };
  if (fs::is_directory(a.input)) {
    fs::create_directories(a.out_structure);
    fs::create_directories(a.out_texture);
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(a.input))
      if (e.is_regular_file() && (detail::has_extension(e.path(), ".png") || detail::has_extension(e.path(), ".bmp")))
        files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const auto name = f.stem().string() + ".png";
      one(f, a.out_structure / name, a.out_texture / name);
    }
    std::cerr << "decomposed " << files.size() << " images\n";
    return;
  }
  one(a.input, a.out_structure, a.out_texture);
}

// ---------------------------------------------------------------------------

struct CommonTrainArgs {
  fs::path config;
  std::vector<std::string> overrides;
};

RunConfig build_run_config(const CommonTrainArgs& a, const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig rc;
  try {
    if (!a.config.empty()) apply_config_file(rc, a.config);
    for (const auto& [k, v] : flags) apply_setting(rc, k, v);
    apply_overrides(rc, a.overrides);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  return rc;
}

void validate_or_usage(const TrainConfig& cfg) {
  try {
    cfg.validate();
  } catch (const std::exception& e) {
    throw UsageError(std::string("invalid configuration: ") + e.what());
  }
}

struct TrainArgs {
  fs::path manifest, out;
  CommonTrainArgs common;
};

void run_train(const TrainArgs& a, const RunConfig& rc) {
  validate_or_usage(rc.train);
  const auto manifest = load_manifest(a.manifest, rc.mos_range);
  const auto split = split_by_content(manifest, rc.split);
  fs::create_directories(a.out);
  write_manifest(split.train, a.out / "train_manifest.csv");
  write_manifest(split.test, a.out / "test_manifest.csv");
  write_patch_plan(split.train.records, rc.train, a.out / "patch_plan.csv");
  std::cerr << "split: " << split.train.records.size() << " train / " << split.test.records.size()
            << " test images\n";

  auto result = train(split.train.records, rc.train, a.out / "checkpoint.dsrq");
  write_history_csv(result.history, a.out / "history.csv");
  std::cerr << "trained " << rc.train.epochs << " epochs on " << result.patch_count << " patch pairs, "
            << result.net.param_count() << " parameters; final loss "
            << (result.history.empty() ? 0.0 : result.history.back().mean_loss) << "\n";
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  fs::path checkpoint;
  std::vector<fs::path> images;
  double amp_factor = 0;
};

void run_predict(const PredictArgs& a) {
  auto ck = load_checkpoint(a.checkpoint);
  const auto cfg = checkpoint_train_config(ck);
  std::optional<double> f;
  if (a.amp_factor > 0) f = a.amp_factor;
  for (const auto& path : a.images) {
    const double q = predict_image(ck.net, load_image(path), cfg, f);
    std::cout << path.string() << '\t' << format_double(q) << '\n';
  }
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
  fs::path checkpoint, manifest;
  double mos_min = 0, mos_max = 10;
  std::string format = "json";
};

void run_evaluate(const EvaluateArgs& a) {
  auto ck = load_checkpoint(a.checkpoint);
  const auto cfg = checkpoint_train_config(ck);
  const auto manifest = load_manifest(a.manifest, {a.mos_min, a.mos_max});
  const auto ev = evaluate(ck.net, manifest, cfg);
  if (a.format == "json" || a.format == "both") std::cout << to_json(ev.report).dump() << '\n';
  if (a.format == "table" || a.format == "both") std::cout << to_table(ev.report);
}

// ---------------------------------------------------------------------------

struct DumpArgs {
  fs::path checkpoint, image, out_dir;
  std::string layer = "CONV1";
  int x = 0, y = 0;
};

void run_dump(const DumpArgs& a) {
  auto ck = load_checkpoint(a.checkpoint);
  const auto cfg = checkpoint_train_config(ck);
  bool known = false;
  for (auto* s : {ck.net.structure(), ck.net.texture()}) known = known || (s && s->has_group(a.layer));
  if (!known) throw UsageError("unknown layer '" + a.layer + "'");

  const RasterImage img = load_image(a.image);
  const int m = cfg.patch_size;
  if (a.x < 0 || a.y < 0 || a.x + m > img.width() || a.y + m > img.height())
    throw DecompError(DecompErrc::TooSmall, "patch at (" + std::to_string(a.x) + "," + std::to_string(a.y) +
                                                ") does not fit in the image");
  const auto d = decompose(img, cfg);
  const auto s = normalize_patch<float>(crop(d.structure, a.x, a.y, m, m));
  const auto t = normalize_patch<float>(crop(d.texture, a.x, a.y, m, m));
  const auto sets = dump_feature_maps(ck.net, s, t, a.layer);
  fs::create_directories(a.out_dir);
  std::size_t count = 0;
  for (const auto& set : sets)
    for (std::size_t i = 0; i < set.maps.size(); ++i) {
      char name[128];
      std::snprintf(name, sizeof name, "%s_%s_%02zu.png", set.stream.c_str(), a.layer.c_str(), i);
      save_image(set.maps[i], a.out_dir / name);
      ++count;
    }
  std::cerr << "wrote " << count << " feature maps to " << a.out_dir.string() << "\n";
}

// ---------------------------------------------------------------------------

struct SweepArgs {
  fs::path manifest, out;
  std::string vary;
  CommonTrainArgs common;
};

// Ranges "a..b" step by 1, except kernel sizes, which step over odd values.
std::vector<std::string> expand_values(const std::string& list, int default_step) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = detail::trim(item);
    if (item.empty()) continue;
    const auto dots = item.find("..");
    if (dots != std::string::npos) {
      // a..b or a..b:step
      std::string hi = item.substr(dots + 2);
      int step = default_step;
      if (const auto colon = hi.find(':'); colon != std::string::npos) {
        step = std::stoi(hi.substr(colon + 1));
        hi = hi.substr(0, colon);
      }
      const int lo = std::stoi(item.substr(0, dots)), top = std::stoi(hi);
      if (step < 1 || top < lo) throw UsageError("bad range '" + item + "'");
      for (int v = lo; v <= top; v += step) out.push_back(std::to_string(v));
    } else {
      out.push_back(item);
    }
  }
  if (out.empty()) throw UsageError("sweep needs at least one value");
  return out;
}

void apply_sweep_value(RunConfig& rc, const std::string& key, const std::string& value) {
  try {
    if (key == "patch_size") {
      apply_setting(rc, "patch_size", value);
    } else if (key == "kernel_size") {
      apply_setting(rc, "network.kernel_size", value);
    } else if (key == "lbp_radius") {
      apply_setting(rc, "lbp.radius", value);
    } else if (key == "stride") {
      if (value == "adaptive") {
        rc.train.stride.adaptive = true;
      } else if (value == "fixed") {
        rc.train.stride.adaptive = false;
        rc.train.stride.fixed_stride = rc.train.patch_size;
      } else {
        rc.train.stride.adaptive = false;
        apply_setting(rc, "stride", value);
      }
    } else {
      throw UsageError("unknown sweep key '" + key + "' (patch_size, kernel_size, lbp_radius, stride)");
    }
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

std::string metric(double v) { return std::isfinite(v) ? format_double(v) : "nan"; }

void run_sweep(const SweepArgs& a, const RunConfig& base) {
  const auto eq = a.vary.find('=');
  if (eq == std::string::npos) throw UsageError("--vary expects key=v1,v2,...");
  const std::string key = detail::trim(a.vary.substr(0, eq));
  std::vector<std::string> values;
  try {
    values = expand_values(a.vary.substr(eq + 1), key == "kernel_size" ? 2 : 1);
  } catch (const std::logic_error& e) {
    throw UsageError("bad --vary value list '" + a.vary + "'");
  }

  // validate every configuration before any training starts
  std::vector<RunConfig> configs;
  for (const auto& v : values) {
    RunConfig rc = base;
    apply_sweep_value(rc, key, v);
    validate_or_usage(rc.train);
    configs.push_back(rc);
  }

  const auto manifest = load_manifest(a.manifest, base.mos_range);
  const auto split = split_by_content(manifest, base.split);
  std::ostringstream csv;
  csv << "value,srocc,plcc,rmse\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::cerr << "sweep " << key << "=" << values[i] << "\n";
    auto result = train(split.train.records, configs[i].train, {});
    double s = NAN, p = NAN, r = NAN;
    try {
      const auto ev = evaluate(result.net, split.test, configs[i].train);
      s = ev.report.srocc;
      p = ev.report.plcc;
      r = ev.report.rmse;
    } catch (const EvalError& e) {
      std::cerr << "  statistics undefined: " << e.what() << "\n";
    }
    csv << values[i] << ',' << metric(s) << ',' << metric(p) << ',' << metric(r) << '\n';
  }
  if (a.out.empty()) std::cout << csv.str();
  else write_text(a.out, csv.str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deepsrq: blind quality assessment for super-resolved images"};
  app.require_subcommand(1);

  // decompose
  DecomposeArgs dec;
  auto* c_dec = app.add_subcommand("decompose", "Write structure (RTV) and texture (LBP) images");
  c_dec->add_option("--input", dec.input, "Input PNG/BMP image or directory")->required()->check(CLI::ExistingPath);
  c_dec->add_option("--out-structure", dec.out_structure, "Structure output (file, or directory for directory input)")
      ->required();
  c_dec->add_option("--out-texture", dec.out_texture, "Texture output (file, or directory for directory input)")
      ->required();
  c_dec->add_option("--lbp-radius", dec.lbp.radius, "LBP radius r")->capture_default_str()->check(CLI::PositiveNumber);
  c_dec->add_option("--lbp-neighbors", dec.lbp.neighbors, "LBP neighbor count P")
      ->capture_default_str()
      ->check(CLI::Range(4, 24));
  c_dec->add_option("--per-channel", dec.lbp.per_channel, "LBP per color channel (false: luma, replicated)")
      ->capture_default_str();
  c_dec->add_flag("--rotation-invariant", dec.lbp.rotation_invariant, "Map LBP codes to their minimum rotation");
  c_dec->add_option("--rtv-lambda", dec.rtv.lambda, "RTV smoothing strength")->capture_default_str();
  c_dec->add_option("--rtv-sigma", dec.rtv.sigma, "RTV window scale")->capture_default_str();
  c_dec->add_option("--rtv-iterations", dec.rtv.iterations, "RTV reweighting rounds")->capture_default_str();

  // train
  TrainArgs tr;
  const TrainConfig defaults;
  std::string t_mode = "both";
  std::uint64_t t_seed = 0;
  int t_epochs = defaults.epochs, t_batch = defaults.batch_size;
  auto* c_train = app.add_subcommand("train", "Split a manifest by content and train a checkpoint");
  c_train->add_option("--manifest", tr.manifest, "Dataset manifest CSV")->required()->check(CLI::ExistingFile);
  c_train->add_option("--config", tr.common.config, "TOML-style config file")->check(CLI::ExistingFile);
  c_train->add_option("--out", tr.out, "Output directory (checkpoint.dsrq, history.csv, patch_plan.csv, *_manifest.csv)")->required();
  auto* o_mode = c_train->add_option("--mode", t_mode, "both | structure_only | texture_only")
                     ->capture_default_str()
                     ->check(CLI::IsMember({"both", "structure_only", "texture_only"}));
  auto* o_seed = c_train->add_option("--seed", t_seed, "Seed for split, init, shuffling and dropout")
                     ->capture_default_str();
  auto* o_epochs = c_train->add_option("--epochs", t_epochs, "Training epochs")->capture_default_str();
  auto* o_batch = c_train->add_option("--batch-size", t_batch, "Mini-batch size")->capture_default_str();
  c_train->add_option("--set", tr.common.overrides, "Config override key=value (repeatable)");

  // predict
  PredictArgs pr;
  auto* c_pred = app.add_subcommand("predict", "Print 'path<TAB>Q' for each image");
  c_pred->add_option("--checkpoint", pr.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  c_pred->add_option("--image", pr.images, "Image(s) to score")->required()->check(CLI::ExistingFile);
  c_pred->add_option("--amp-factor", pr.amp_factor,
                     "Amplification factor for adaptive cropping (default: f_max, i.e. stride = patch size)");

  // evaluate
  EvaluateArgs ev;
  auto* c_eval = app.add_subcommand("evaluate", "SROCC / PLCC / RMSE of a checkpoint on a manifest");
  c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--manifest", ev.manifest, "Manifest CSV (may be another dataset)")
      ->required()
      ->check(CLI::ExistingFile);
  c_eval->add_option("--mos-min", ev.mos_min, "Lower bound of valid MOS")->capture_default_str();
  c_eval->add_option("--mos-max", ev.mos_max, "Upper bound of valid MOS")->capture_default_str();
  c_eval->add_option("--format", ev.format, "json | table | both")
      ->capture_default_str()
      ->check(CLI::IsMember({"json", "table", "both"}));

  // dump-features
  DumpArgs du;
  auto* c_dump = app.add_subcommand("dump-features", "Render one layer's feature maps for a patch as PNGs");
  c_dump->add_option("--checkpoint", du.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  c_dump->add_option("--image", du.image, "Source image")->required()->check(CLI::ExistingFile);
  c_dump->add_option("--layer", du.layer, "Layer group (CONV1..CONV5, POOL1, POOL2, POOL5, DENSE1, DENSE2)")
      ->capture_default_str();
  c_dump->add_option("--out-dir", du.out_dir, "Output directory")->required();
  c_dump->add_option("--x", du.x, "Patch left edge")->capture_default_str();
  c_dump->add_option("--y", du.y, "Patch top edge")->capture_default_str();

  // sweep
  SweepArgs sw;
  std::uint64_t s_seed = 0;
  int s_epochs = defaults.epochs;
  auto* c_sweep = app.add_subcommand("sweep", "Retrain and evaluate once per value of one parameter");
  c_sweep->add_option("--manifest", sw.manifest, "Dataset manifest CSV")->required()->check(CLI::ExistingFile);
  c_sweep->add_option("--config", sw.common.config, "TOML-style config file")->check(CLI::ExistingFile);
  c_sweep->add_option("--vary", sw.vary,
                      "key=v1,v2,... with key in {patch_size, kernel_size, lbp_radius, stride}; ranges a..b[:step]")
      ->required();
  c_sweep->add_option("--out", sw.out, "CSV output (default: stdout)");
  auto* o_sseed = c_sweep->add_option("--seed", s_seed, "Seed")->capture_default_str();
  auto* o_sepochs = c_sweep->add_option("--epochs", s_epochs, "Training epochs per value")->capture_default_str();
  c_sweep->add_option("--set", sw.common.overrides, "Config override key=value (repeatable)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (c_dec->parsed()) {
      run_decompose(dec);
    } else if (c_train->parsed()) {
      std::vector<std::pair<std::string, std::string>> flags;
      if (o_mode->count()) flags.emplace_back("mode", t_mode);
      if (o_seed->count()) flags.emplace_back("seed", std::to_string(t_seed));
      if (o_epochs->count()) flags.emplace_back("epochs", std::to_string(t_epochs));
      if (o_batch->count()) flags.emplace_back("batch_size", std::to_string(t_batch));
      run_train(tr, build_run_config(tr.common, flags));
    } else if (c_pred->parsed()) {
      run_predict(pr);
    } else if (c_eval->parsed()) {
      run_evaluate(ev);
    } else if (c_dump->parsed()) {
      run_dump(du);
    } else if (c_sweep->parsed()) {
      std::vector<std::pair<std::string, std::string>> flags;
      if (o_sseed->count()) flags.emplace_back("seed", std::to_string(s_seed));
      if (o_sepochs->count()) flags.emplace_back("epochs", std::to_string(s_epochs));
      run_sweep(sw, build_run_config(sw.common, flags));
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
