#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "ipsfuse/image.hpp"

namespace ipsfuse {

// Fusion quality metrics. Conventions (documented for reproducibility):
//  - psnr/ssim compare against a reference; peak = 1.
//  - ssim: 11x11 Gaussian window sigma=1.5, K1=0.01, K2=0.03, valid-region
//    windowing, luminance = plain channel mean for color inputs.
//  - q_mi, q_sf, q_abf convert color to ITU-R 601 luma first.
//  - q_mi: 256 uniform bins on [0,1], no smoothing.
//  - q_abf: Sobel gradients, edge-preservation sigmoids with kappa_g=-15,
//    sigma_g=0.5, kappa_a=-22, sigma_a=0.8; the gains are normalized so a
//    perfect match scores exactly 1.

// 10*log10(1/MSE); +infinity for identical images (reported as a marker, not
// a capped number).
inline double psnr(const Image& fused, const Image& reference) {
  require_same_dims(fused, reference, "psnr");
  double acc = 0.0;
  for (std::size_t i = 0; i < fused.size(); ++i) {
    double d = fused.pixels[i] - reference.pixels[i];
    acc += d * d;
  }
  double mse = acc / static_cast<double>(fused.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

namespace detail {

// separable valid-mode Gaussian blur of a [H x W] plane
inline std::vector<double> gauss_valid(const std::vector<double>& img, std::size_t H,
                                       std::size_t W, const std::vector<double>& k) {
  std::size_t r = k.size();
  std::size_t Wv = W - r + 1, Hv = H - r + 1;
  std::vector<double> tmp(H * Wv);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < Wv; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < r; ++i) acc += k[i] * img[y * W + x + i];
      tmp[y * Wv + x] = acc;
    }
  std::vector<double> out(Hv * Wv);
  for (std::size_t y = 0; y < Hv; ++y)
    for (std::size_t x = 0; x < Wv; ++x) {
      double acc = 0.0;
      for (std::size_t i = 0; i < r; ++i) acc += k[i] * tmp[(y + i) * Wv + x];
      out[y * Wv + x] = acc;
    }
  return out;
}

}  // namespace detail

inline double ssim(const Image& fused, const Image& reference) {
  require_same_dims(fused, reference, "ssim");
  constexpr std::size_t win = 11;
  constexpr double sigma = 1.5, K1 = 0.01, K2 = 0.03;
  if (fused.height < win || fused.width < win)
    throw data_error(strcat_all("ssim: image ", fused.height, "x", fused.width,
                                " smaller than the ", win, "x", win, " window"));
  std::vector<double> x = gray_mean(fused);
  std::vector<double> y = gray_mean(reference);
  std::size_t H = fused.height, W = fused.width;

  std::vector<double> k(win);
  double ksum = 0.0;
  for (std::size_t i = 0; i < win; ++i) {
    double d = static_cast<double>(i) - static_cast<double>(win - 1) / 2.0;
    k[i] = std::exp(-0.5 * d * d / (sigma * sigma));
    ksum += k[i];
  }
  for (auto& v : k) v /= ksum;

  std::vector<double> xx(x.size()), yy(y.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  auto mx = detail::gauss_valid(x, H, W, k);
  auto my = detail::gauss_valid(y, H, W, k);
  auto mxx = detail::gauss_valid(xx, H, W, k);
  auto myy = detail::gauss_valid(yy, H, W, k);
  auto mxy = detail::gauss_valid(xy, H, W, k);

  const double C1 = K1 * K1, C2 = K2 * K2;  // dynamic range 1
  double acc = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    double vx = mxx[i] - mx[i] * mx[i];
    double vy = myy[i] - my[i] * my[i];
    double cxy = mxy[i] - mx[i] * my[i];
    double num = (2.0 * mx[i] * my[i] + C1) * (2.0 * cxy + C2);
    double den = (mx[i] * mx[i] + my[i] * my[i] + C1) * (vx + vy + C2);
    acc += num / den;
  }
  return acc / static_cast<double>(mx.size());
}

namespace detail {

struct HistStats {
  double h_a = 0.0, h_b = 0.0, mi = 0.0;
};

// entropies and mutual information from a 256-bin joint histogram (base-2)
inline HistStats joint_stats(const std::vector<double>& a, const std::vector<double>& b) {
  constexpr std::size_t bins = 256;
  std::vector<double> joint(bins * bins, 0.0);
  auto bin_of = [](double v) {
    auto q = static_cast<long>(v * 256.0);
    if (q < 0) q = 0;
    if (q > 255) q = 255;
    return static_cast<std::size_t>(q);
  };
  for (std::size_t i = 0; i < a.size(); ++i) joint[bin_of(a[i]) * bins + bin_of(b[i])] += 1.0;
  double n = static_cast<double>(a.size());
  std::vector<double> pa(bins, 0.0), pb(bins, 0.0);
  for (std::size_t i = 0; i < bins; ++i)
    for (std::size_t j = 0; j < bins; ++j) {
      joint[i * bins + j] /= n;
      pa[i] += joint[i * bins + j];
      pb[j] += joint[i * bins + j];
    }
  HistStats s;
  double h_ab = 0.0;
  for (std::size_t i = 0; i < bins; ++i) {
    if (pa[i] > 0.0) s.h_a -= pa[i] * std::log2(pa[i]);
    if (pb[i] > 0.0) s.h_b -= pb[i] * std::log2(pb[i]);
    for (std::size_t j = 0; j < bins; ++j) {
      double p = joint[i * bins + j];
      if (p > 0.0) h_ab -= p * std::log2(p);
    }
  }
  s.mi = s.h_a + s.h_b - h_ab;
  return s;
}

}  // namespace detail

// Normalized mutual information between the fused image and both sources:
//   2 * [ MI(A,F)/(H(A)+H(F)) + MI(B,F)/(H(B)+H(F)) ]
inline double q_mi(const Image& fused, const Image& src_a, const Image& src_b) {
  require_same_dims(fused, src_a, "q_mi");
  require_same_dims(fused, src_b, "q_mi");
  auto f = gray_luma601(fused);
  auto a = gray_luma601(src_a);
  auto b = gray_luma601(src_b);
  auto saf = detail::joint_stats(a, f);
  auto sbf = detail::joint_stats(b, f);
  if (saf.h_a == 0.0 || saf.h_b == 0.0 || sbf.h_a == 0.0)
    throw data_error(strcat_all("q_mi: zero-entropy image (H(A)=", saf.h_a, ", H(B)=", sbf.h_a,
                                ", H(F)=", saf.h_b, ")"));
  return 2.0 * (saf.mi / (saf.h_a + saf.h_b) + sbf.mi / (sbf.h_a + sbf.h_b));
}

// Spatial frequency: sqrt(RF^2 + CF^2) with RF/CF the RMS of horizontal and
// vertical first differences.
inline double q_sf(const Image& fused) {
  if (fused.height * fused.width < 2) throw data_error("q_sf: single-pixel image");
  auto g = gray_luma601(fused);
  std::size_t H = fused.height, W = fused.width;
  double rf = 0.0, cf = 0.0;
  if (W >= 2) {
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 1; c < W; ++c) {
        double d = g[r * W + c] - g[r * W + c - 1];
        rf += d * d;
      }
    rf /= static_cast<double>(H * (W - 1));
  }
  if (H >= 2) {
    for (std::size_t r = 1; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c) {
        double d = g[r * W + c] - g[(r - 1) * W + c];
        cf += d * d;
      }
    cf /= static_cast<double>((H - 1) * W);
  }
  return std::sqrt(rf + cf);
}

namespace detail {

struct GradientField {
  std::vector<double> strength, angle;
};

inline GradientField sobel_field(const std::vector<double>& g, std::size_t H, std::size_t W) {
  GradientField f;
  f.strength.resize(H * W);
  f.angle.resize(H * W);
  auto px = [&](long r, long c) {
    r = pad_index(r, static_cast<long>(H), Padding::reflect);
    c = pad_index(c, static_cast<long>(W), Padding::reflect);
    return g[static_cast<std::size_t>(r) * W + static_cast<std::size_t>(c)];
  };
  for (long r = 0; r < static_cast<long>(H); ++r)
    for (long c = 0; c < static_cast<long>(W); ++c) {
      // taps grouped by sign so flat regions cancel exactly
      double gx = (px(r - 1, c + 1) + 2.0 * px(r, c + 1) + px(r + 1, c + 1)) -
                  (px(r - 1, c - 1) + 2.0 * px(r, c - 1) + px(r + 1, c - 1));
      double gy = (px(r + 1, c - 1) + 2.0 * px(r + 1, c) + px(r + 1, c + 1)) -
                  (px(r - 1, c - 1) + 2.0 * px(r - 1, c) + px(r - 1, c + 1));
      std::size_t i = static_cast<std::size_t>(r) * W + static_cast<std::size_t>(c);
      f.strength[i] = std::sqrt(gx * gx + gy * gy);
      f.angle[i] = gx == 0.0 ? (gy == 0.0 ? 0.0 : 1.5707963267948966) : std::atan(gy / gx);
    }
  return f;
}

// per-pixel edge preservation of source s in fused f
inline double edge_preservation(double gs, double as, double gf, double af) {
  constexpr double kg = -15.0, sg = 0.5, ka = -22.0, sa = 0.8;
  // gains chosen so that perfect strength and orientation agreement give 1
  const double gamma_g = 1.0 + std::exp(kg * (1.0 - sg));
  const double gamma_a = 1.0 + std::exp(ka * (1.0 - sa));
  double G;
  if (gs == gf)
    G = 1.0;
  else if (gs > gf)
    G = gf / gs;
  else
    G = gs / gf;
  // angles live in (-pi/2, pi/2]; diff of 0 or pi means aligned lines
  double A = std::abs(std::abs(as - af) - 1.5707963267948966) / 1.5707963267948966;
  double qg = gamma_g / (1.0 + std::exp(kg * (G - sg)));
  double qa = gamma_a / (1.0 + std::exp(ka * (A - sa)));
  return qg * qa;
}

}  // namespace detail

// Edge-preservation score between the fused image and both sources, weighted
// by source edge strength.
inline double q_abf(const Image& fused, const Image& src_a, const Image& src_b) {
  require_same_dims(fused, src_a, "q_abf");
  require_same_dims(fused, src_b, "q_abf");
  auto f = detail::sobel_field(gray_luma601(fused), fused.height, fused.width);
  auto a = detail::sobel_field(gray_luma601(src_a), fused.height, fused.width);
  auto b = detail::sobel_field(gray_luma601(src_b), fused.height, fused.width);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < f.strength.size(); ++i) {
    double qa = detail::edge_preservation(a.strength[i], a.angle[i], f.strength[i], f.angle[i]);
    double qb = detail::edge_preservation(b.strength[i], b.angle[i], f.strength[i], f.angle[i]);
    num += qa * a.strength[i] + qb * b.strength[i];
    den += a.strength[i] + b.strength[i];
  }
  if (den == 0.0) throw data_error("q_abf: both sources have all-zero gradients");
  return num / den;
}

// --- report ------------------------------------------------------------------

struct MetricReport {
  struct Entry {
    std::string id;
    std::map<std::string, double> values;
    std::map<std::string, std::string> failures;
  };
  std::vector<Entry> entries;
  std::vector<std::string> metrics;  // requested metric order

  std::map<std::string, double> aggregate_means() const {
    std::map<std::string, double> sums;
    std::map<std::string, std::size_t> counts;
    for (const auto& e : entries)
      for (const auto& [k, v] : e.values) {
        sums[k] += v;
        counts[k] += 1;
      }
    std::map<std::string, double> out;
    for (auto& [k, v] : sums) out[k] = v / static_cast<double>(counts[k]);
    return out;
  }
};

inline std::string metric_value_str(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

// image_id,metric,value rows followed by a trailing aggregate block
inline void write_report_csv(std::ostream& out, const MetricReport& rep) {
  out << "image_id,metric,value\n";
  for (const auto& e : rep.entries)
    for (const auto& m : rep.metrics) {
      auto it = e.values.find(m);
      if (it != e.values.end()) {
        out << e.id << "," << m << "," << metric_value_str(it->second) << "\n";
      } else if (auto f = e.failures.find(m); f != e.failures.end()) {
        out << e.id << "," << m << ",failed: " << f->second << "\n";
      }
    }
  auto agg = rep.aggregate_means();
  for (const auto& m : rep.metrics)
    if (auto it = agg.find(m); it != agg.end())
      out << "aggregate," << m << "," << metric_value_str(it->second) << "\n";
}

}  // namespace ipsfuse
