#ifndef DEEPSRQ_TESTS_SUPPORT_HPP
#define DEEPSRQ_TESTS_SUPPORT_HPP

#include "deepsrq/deepsrq.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace testsupport {

namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("deepsrq_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline deepsrq::RasterImage random_image(deepsrq::Rng& rng, int w, int h, int c = 3) {
  deepsrq::RasterImage img(w, h, c);
  for (auto& v : img.data()) v = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

// Smooth gradient plus oscillating texture plus noise, seeded.
inline deepsrq::RasterImage textured_image(deepsrq::Rng& rng, int w, int h, double noise = 20.0) {
  deepsrq::RasterImage img(w, h, 3);
  const double fx = rng.uniform(0.3, 1.2), fy = rng.uniform(0.3, 1.2), phase = rng.uniform(0, 6.28);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double base = 60.0 + 100.0 * x / w + 20.0 * c;
        const double tex = 40.0 * std::sin(fx * x + phase) * std::cos(fy * y);
        const double v = base + tex + rng.uniform(-noise, noise);
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
  return img;
}

// Anisotropic total variation summed over channels.
inline double total_variation(const deepsrq::RasterImage& img) {
  double tv = 0;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < img.channels(); ++c) {
        if (x + 1 < img.width()) tv += std::abs(int(img.at(x + 1, y, c)) - int(img.at(x, y, c)));
        if (y + 1 < img.height()) tv += std::abs(int(img.at(x, y + 1, c)) - int(img.at(x, y, c)));
      }
  return tv;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

struct CommandResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

inline std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

// Runs a command line, capturing stdout and stderr through temp files.
inline CommandResult run_command(const std::string& cmd) {
  static int counter = 0;
  const auto base = fs::temp_directory_path() /
                    ("deepsrq_cmd_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  const auto out_path = base.string() + ".out", err_path = base.string() + ".err";
  const std::string full = cmd + " >" + shell_quote(out_path) + " 2>" + shell_quote(err_path);
  const int status = std::system(full.c_str());
  CommandResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_text(out_path);
  r.err = read_text(err_path);
  fs::remove(out_path);
  fs::remove(err_path);
  return r;
}

// A manifest of `contents` scenes, each rendered at every factor in
// `factors` with side 32*f, mos a function of brightness.
struct SyntheticSet {
  fs::path manifest;
  std::vector<deepsrq::DatasetRecord> records;
};

inline SyntheticSet make_synthetic_set(const fs::path& dir, int contents, const std::vector<double>& factors,
                                       std::uint64_t seed, int base_side = 32) {
  deepsrq::Rng rng(seed);
  SyntheticSet set;
  std::ostringstream csv;
  csv << deepsrq::kManifestHeader << '\n';
  for (int c = 0; c < contents; ++c) {
    const double level = 40.0 + 170.0 * c / std::max(1, contents - 1);
    for (double f : factors) {
      const int side = static_cast<int>(base_side * f / factors.front());
      deepsrq::RasterImage img(side, side, 3);
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          for (int ch = 0; ch < 3; ++ch) {
            const double v = level + 25.0 * std::sin(0.4 * x + c) * std::cos(0.3 * y) + rng.uniform(-8, 8);
            img.at(x, y, ch) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
          }
      const std::string name = "c" + std::to_string(c) + "_f" + std::to_string(static_cast<int>(f)) + ".png";
      deepsrq::save_image(img, dir / name);
      const double mos = 0.1 + 0.8 * (level - 40.0) / 170.0 - 0.02 * f;
      char line[256];
      std::snprintf(line, sizeof line, "%s,%.6f,scene%d,%g,,\n", name.c_str(), mos, c, f);
      csv << line;
      deepsrq::DatasetRecord r;
      r.image_path = dir / name;
      r.mos = mos;
      r.content_id = "scene" + std::to_string(c);
      r.amp_factor = f;
      set.records.push_back(r);
    }
  }
  set.manifest = dir / "manifest.csv";
  write_text(set.manifest, csv.str());
  return set;
}

}  // namespace testsupport

#endif  // DEEPSRQ_TESTS_SUPPORT_HPP
