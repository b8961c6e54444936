#ifndef DEEPSRQ_DECOMP_HPP
#define DEEPSRQ_DECOMP_HPP

// Structure/texture decomposition of an SR image.
//
// Structure: relative-total-variation smoothing. Each round builds edge-aware
// weights from the current estimate and solves (I + lambda * L_w) S = input
// per channel, where L_w is the weighted five-point Laplacian.
//
// Texture: circular local binary patterns, bilinear neighbor sampling, ties
// count as 1.

#include "deepsrq/imgio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepsrq {

enum class DecompErrc { TooSmall, SolverDiverged, BadParams };

inline const char* to_string(DecompErrc c) {
  switch (c) {
    case DecompErrc::TooSmall: return "TooSmall";
    case DecompErrc::SolverDiverged: return "SolverDiverged";
    case DecompErrc::BadParams: return "BadParams";
  }
  return "Unknown";
}

class DecompError : public std::runtime_error {
 public:
  DecompError(DecompErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  DecompErrc code() const noexcept { return code_; }

 private:
  DecompErrc code_;
};

struct RtvParams {
  double lambda = 0.01;
  double sigma = 3.0;
  double sharpness = 0.02;
  int iterations = 4;
  double solver_tol = 1e-4;

  void validate() const {
    if (!(lambda > 0) || !(sigma >= 1) || !(sharpness > 0) || iterations < 1 ||
        !(solver_tol > 0 && solver_tol < 1))
      throw DecompError(DecompErrc::BadParams, "invalid RTV parameters");
  }
};

struct LbpParams {
  int radius = 1;
  int neighbors = 8;
  bool per_channel = true;
  bool rotation_invariant = false;

  void validate() const {
    if (radius < 1 || neighbors < 4 || neighbors > 24)
      throw DecompError(DecompErrc::BadParams, "invalid LBP parameters (need r>=1, 4<=P<=24)");
  }
};

namespace detail {

// Planar double image, one plane per channel, values in [0,1].
struct Planes {
  int width = 0;
  int height = 0;
  std::vector<std::vector<double>> ch;

  std::size_t size() const { return static_cast<std::size_t>(width) * height; }
};

inline Planes to_planes(const RasterImage& img) {
  Planes p{img.width(), img.height(), std::vector<std::vector<double>>(img.channels())};
  const auto src = img.data();
  for (int c = 0; c < img.channels(); ++c) {
    auto& plane = p.ch[c];
    plane.resize(p.size());
    for (std::size_t i = 0; i < plane.size(); ++i)
      plane[i] = src[i * img.channels() + c] / 255.0;
  }
  return p;
}

inline RasterImage from_planes(const Planes& p) {
  const int channels = static_cast<int>(p.ch.size());
  RasterImage out(p.width, p.height, channels);
  auto dst = out.data();
  for (int c = 0; c < channels; ++c)
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double v = std::clamp(p.ch[c][i] * 255.0, 0.0, 255.0);
      dst[i * channels + c] = static_cast<std::uint8_t>(std::lround(v));
    }
  return out;
}

inline std::vector<double> gaussian_taps(double sigma) {
  const int ksize = static_cast<int>(std::lround(5.0 * sigma)) | 1;
  const int half = ksize / 2;
  std::vector<double> g(ksize);
  double sum = 0;
  for (int i = 0; i < ksize; ++i) {
    const double x = i - half;
    g[i] = std::exp(-x * x / (2 * sigma * sigma));
    sum += g[i];
  }
  for (auto& v : g) v /= sum;
  return g;
}

// Separable Gaussian, zero padding outside the image ("same" convolution).
inline std::vector<double> blur(const std::vector<double>& in, int w, int h, double sigma) {
  const auto g = gaussian_taps(sigma);
  const int half = static_cast<int>(g.size()) / 2;
  std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int k = -half; k <= half; ++k) {
        const int xx = x + k;
        if (xx >= 0 && xx < w) acc += g[k + half] * in[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int k = -half; k <= half; ++k) {
        const int yy = y + k;
        if (yy >= 0 && yy < h) acc += g[k + half] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = acc;
    }
  return out;
}

// Horizontal (wx) and vertical (wy) edge weights of the current estimate:
// inverse pixel-wise gradient magnitude times inverse windowed (blurred)
// gradient magnitude, both averaged over channels.
inline void texture_weights(const Planes& f, double sigma, double sharpness,
                            std::vector<double>& wx, std::vector<double>& wy) {
  constexpr double kGradEps = 1e-3;
  const int w = f.width, h = f.height;
  const auto nc = static_cast<double>(f.ch.size());
  const std::size_t n = f.size();
  std::vector<double> mag(n, 0.0), bx(n, 0.0), by(n, 0.0);

  for (const auto& plane : f.ch) {
    const auto fb = blur(plane, w, h, sigma);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        const double dx = x + 1 < w ? plane[i + 1] - plane[i] : 0.0;
        const double dy = y + 1 < h ? plane[i + w] - plane[i] : 0.0;
        mag[i] += std::sqrt(dx * dx + dy * dy);
        bx[i] += x + 1 < w ? std::abs(fb[i + 1] - fb[i]) : 0.0;
        by[i] += y + 1 < h ? std::abs(fb[i + w] - fb[i]) : 0.0;
      }
  }
  wx.assign(n, 0.0);
  wy.assign(n, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double wto = 1.0 / std::max(mag[i] / nc, sharpness);
      if (x + 1 < w) wx[i] = wto / std::max(bx[i] / nc, kGradEps);
      if (y + 1 < h) wy[i] = wto / std::max(by[i] / nc, kGradEps);
    }
}

// Matrix-free (I + lambda * L_w) with wx[i] coupling i and i+1, wy[i]
// coupling i and i+w.
struct WeightedLaplacianSystem {
  int w, h;
  double lambda;
  const std::vector<double>& wx;
  const std::vector<double>& wy;

  void apply(const std::vector<double>& v, std::vector<double>& out) const {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        double acc = v[i];
        if (x + 1 < w) acc += lambda * wx[i] * (v[i] - v[i + 1]);
        if (x > 0) acc += lambda * wx[i - 1] * (v[i] - v[i - 1]);
        if (y + 1 < h) acc += lambda * wy[i] * (v[i] - v[i + w]);
        if (y > 0) acc += lambda * wy[i - w] * (v[i] - v[i - w]);
        out[i] = acc;
      }
  }

  std::vector<double> diagonal() const {
    std::vector<double> d(static_cast<std::size_t>(w) * h, 1.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (x + 1 < w) d[i] += lambda * wx[i];
        if (x > 0) d[i] += lambda * wx[i - 1];
        if (y + 1 < h) d[i] += lambda * wy[i];
        if (y > 0) d[i] += lambda * wy[i - w];
      }
    return d;
  }
};

/// Jacobi-preconditioned conjugate gradient. `x` holds the initial guess and
/// the result. Returns the iteration count.
inline long solve_cg(const WeightedLaplacianSystem& sys, const std::vector<double>& b,
                     std::vector<double>& x, double tol, long max_iter) {
  const std::size_t n = b.size();
  const auto diag = sys.diagonal();
  std::vector<double> r(n), z(n), p(n), ap(n);

  sys.apply(x, ap);
  double bnorm = 0, rnorm = 0;
  for (std::size_t i = 0; i < n; ++i) {
    r[i] = b[i] - ap[i];
    bnorm += b[i] * b[i];
    rnorm += r[i] * r[i];
  }
  bnorm = std::sqrt(bnorm);
  if (bnorm == 0) {
    std::fill(x.begin(), x.end(), 0.0);
    return 0;
  }
  if (std::sqrt(rnorm) <= tol * bnorm) return 0;

  double rz = 0;
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = r[i] / diag[i];
    p[i] = z[i];
    rz += r[i] * z[i];
  }
  for (long it = 1; it <= max_iter; ++it) {
    sys.apply(p, ap);
    double pap = 0;
    for (std::size_t i = 0; i < n; ++i) pap += p[i] * ap[i];
    if (!(pap > 0) || !std::isfinite(pap))
      throw DecompError(DecompErrc::SolverDiverged, "conjugate gradient breakdown");
    const double alpha = rz / pap;
    rnorm = 0;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
      rnorm += r[i] * r[i];
    }
    if (std::sqrt(rnorm) <= tol * bnorm) return it;
    double rz_next = 0;
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = r[i] / diag[i];
      rz_next += r[i] * z[i];
    }
    const double beta = rz_next / rz;
    rz = rz_next;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
  }
  throw DecompError(DecompErrc::SolverDiverged, "conjugate gradient did not converge");
}

inline std::uint32_t min_rotation(std::uint32_t code, int bits) {
  const std::uint32_t mask = (bits == 32) ? ~0u : ((1u << bits) - 1u);
  std::uint32_t best = code;
  for (int s = 1; s < bits; ++s) {
    const std::uint32_t rot = ((code >> s) | (code << (bits - s))) & mask;
    best = std::min(best, rot);
  }
  return best;
}

// Snap near-integer offsets so axis-aligned neighbors are sampled exactly.
inline double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

// Bilinear sample written as nested lerps so constant neighborhoods
// interpolate to exactly the constant.
inline double bilinear(const std::vector<double>& plane, int w, double px, double py) {
  const int x0 = static_cast<int>(std::floor(px));
  const int y0 = static_cast<int>(std::floor(py));
  const double fx = px - x0;
  const double fy = py - y0;
  auto at = [&](int x, int y) { return plane[static_cast<std::size_t>(y) * w + x]; };
  const double top = fx > 0 ? at(x0, y0) + fx * (at(x0 + 1, y0) - at(x0, y0)) : at(x0, y0);
  if (fy == 0) return top;
  const double bot = fx > 0 ? at(x0, y0 + 1) + fx * (at(x0 + 1, y0 + 1) - at(x0, y0 + 1))
                            : at(x0, y0 + 1);
  return top + fy * (bot - top);
}

// Raw (or rotation-mapped) codes for one plane, border replicated.
inline std::vector<std::uint32_t> lbp_codes(const std::vector<double>& plane, int w, int h,
                                            const LbpParams& p) {
  const int r = p.radius;
  std::vector<double> ox(p.neighbors), oy(p.neighbors);
  for (int i = 0; i < p.neighbors; ++i) {
    const double theta = 2.0 * std::numbers::pi * i / p.neighbors;
    ox[i] = snap(r * std::cos(theta));
    oy[i] = snap(-r * std::sin(theta));
  }
  std::vector<std::uint32_t> codes(static_cast<std::size_t>(w) * h, 0);
  for (int y = r; y < h - r; ++y)
    for (int x = r; x < w - r; ++x) {
      const double center = plane[static_cast<std::size_t>(y) * w + x];
      std::uint32_t code = 0;
      for (int i = 0; i < p.neighbors; ++i)
        if (bilinear(plane, w, x + ox[i], y + oy[i]) >= center) code |= 1u << i;
      if (p.rotation_invariant) code = min_rotation(code, p.neighbors);
      codes[static_cast<std::size_t>(y) * w + x] = code;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int sx = std::clamp(x, r, w - 1 - r);
      const int sy = std::clamp(y, r, h - 1 - r);
      if (sx != x || sy != y)
        codes[static_cast<std::size_t>(y) * w + x] = codes[static_cast<std::size_t>(sy) * w + sx];
    }
  return codes;
}

}  // namespace detail

/// Smoothed structure image with the input's dimensions and channel count.
inline RasterImage extract_structure(const RasterImage& img, const RtvParams& params = {}) {
  params.validate();
  if (img.width() < 3 || img.height() < 3)
    throw DecompError(DecompErrc::TooSmall, "structure extraction needs at least 3x3 pixels");

  const detail::Planes input = detail::to_planes(img);
  detail::Planes estimate = input;
  const long max_iter = 10L * img.width() * img.height();
  double sigma = params.sigma;
  // Matches the reference smoother: lambda is halved once, sigma halves per
  // round with a floor of 0.5.
  const double lambda = params.lambda / 2.0;
  std::vector<double> wx, wy;
  for (int round = 0; round < params.iterations; ++round) {
    detail::texture_weights(estimate, sigma, params.sharpness, wx, wy);
    const detail::WeightedLaplacianSystem sys{img.width(), img.height(), lambda, wx, wy};
    for (std::size_t c = 0; c < input.ch.size(); ++c) {
      std::vector<double> x = input.ch[c];
      detail::solve_cg(sys, input.ch[c], x, params.solver_tol, max_iter);
      estimate.ch[c] = std::move(x);
    }
    sigma = std::max(sigma / 2.0, 0.5);
  }
  return detail::from_planes(estimate);
}

/// LBP texture image. Per-channel mode keeps the channel count; luma mode
/// computes codes on BT.601 luma and replicates them into three channels.
inline RasterImage extract_texture(const RasterImage& img, const LbpParams& params = {}) {
  params.validate();
  const int r = params.radius;
  if (img.width() < 2 * r + 1 || img.height() < 2 * r + 1)
    throw DecompError(DecompErrc::TooSmall, "texture extraction needs at least (2r+1)x(2r+1)");

  const int w = img.width(), h = img.height();
  const double max_code = std::ldexp(1.0, params.neighbors) - 1.0;
  auto to_sample = [&](std::uint32_t code) {
    return static_cast<std::uint8_t>(std::lround(code * 255.0 / max_code));
  };

  if (params.per_channel || img.channels() == 1) {
    const auto planes = detail::to_planes(img);
    RasterImage out(w, h, img.channels());
    auto dst = out.data();
    for (int c = 0; c < img.channels(); ++c) {
      const auto codes = detail::lbp_codes(planes.ch[c], w, h, params);
      for (std::size_t i = 0; i < codes.size(); ++i) dst[i * img.channels() + c] = to_sample(codes[i]);
    }
    return out;
  }

  const auto luma = detail::to_planes(to_grayscale(img));
  const auto codes = detail::lbp_codes(luma.ch[0], w, h, params);
  RasterImage out(w, h, 3);
  auto dst = out.data();
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const auto v = to_sample(codes[i]);
    dst[3 * i] = dst[3 * i + 1] = dst[3 * i + 2] = v;
  }
  return out;
}

}  // namespace deepsrq

#endif  // DEEPSRQ_DECOMP_HPP
