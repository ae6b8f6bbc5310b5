#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "ipsfuse/image.hpp"
#include "ipsfuse/kernels.hpp"
#include "ipsfuse/rng.hpp"

namespace ipsfuse {

enum class FilterKind { mean, gaussian, median };

inline const char* filter_name(FilterKind k) {
  switch (k) {
    case FilterKind::mean: return "mean";
    case FilterKind::gaussian: return "gaussian";
    case FilterKind::median: return "median";
  }
  return "?";
}

inline FilterKind filter_from_name(const std::string& s) {
  if (s == "mean") return FilterKind::mean;
  if (s == "gaussian") return FilterKind::gaussian;
  if (s == "median") return FilterKind::median;
  throw data_error(strcat_all("unknown filter kind '", s, "'"));
}

struct ShuffleConfig {
  double mask_zero_probability = 0.5;
  FilterKind filter_kind = FilterKind::mean;
  int kernel_min = 3;
  int kernel_max = 31;
  bool swap_augment = true;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (mask_zero_probability < 0.0 || mask_zero_probability > 1.0)
      throw data_error(strcat_all("shuffle: p must be in [0,1], got ", mask_zero_probability));
    if (kernel_min < 3 || kernel_max > 31 || kernel_min > kernel_max || kernel_min % 2 == 0 ||
        kernel_max % 2 == 0)
      throw data_error(strcat_all("shuffle: kernel range [", kernel_min, ",", kernel_max,
                                  "] must be odd values within [3,31]"));
  }
};

namespace detail {

inline void check_filter_args(const Image& img, int k) {
  if (k % 2 == 0) throw data_error(strcat_all("low_pass_filter: kernel size ", k, " is even"));
  if (k < 3 || k > 31)
    throw data_error(strcat_all("low_pass_filter: kernel size ", k, " outside [3,31]"));
  std::size_t mindim = std::min(img.height, img.width);
  if (static_cast<std::size_t>(k) > 2 * mindim)
    throw data_error(strcat_all("low_pass_filter: kernel size ", k, " larger than 2*min(H,W)=",
                                2 * mindim));
}

// direct windowed summation; kept naive so the brute-force oracle matches it exactly
inline Image mean_filter(const Image& img, int k) {
  Image out(img.height, img.width, img.channels);
  long H = static_cast<long>(img.height), W = static_cast<long>(img.width);
  long pad = (k - 1) / 2;
  double count = static_cast<double>(k) * static_cast<double>(k);
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c)
      for (std::size_t j = 0; j < img.channels; ++j) {
        double acc = 0.0;
        for (long dr = -pad; dr <= pad; ++dr) {
          long rr = pad_index(r + dr, H, Padding::reflect);
          for (long dc = -pad; dc <= pad; ++dc) {
            long cc = pad_index(c + dc, W, Padding::reflect);
            acc += img.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc), j);
          }
        }
        out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), j) = acc / count;
      }
  return out;
}

inline Image gaussian_filter(const Image& img, int k) {
  // sigma = k/6 puts ~3 sigma at the kernel edge
  double sigma = static_cast<double>(k) / 6.0;
  long pad = (k - 1) / 2;
  std::vector<double> kern(static_cast<std::size_t>(k));
  double sum = 0.0;
  for (long i = 0; i < k; ++i) {
    double d = static_cast<double>(i - pad);
    kern[static_cast<std::size_t>(i)] = std::exp(-0.5 * d * d / (sigma * sigma));
    sum += kern[static_cast<std::size_t>(i)];
  }
  for (auto& v : kern) v /= sum;

  long H = static_cast<long>(img.height), W = static_cast<long>(img.width);
  Image tmp(img.height, img.width, img.channels);
  for (long r = 0; r < H; ++r)  // horizontal pass
    for (long c = 0; c < W; ++c)
      for (std::size_t j = 0; j < img.channels; ++j) {
        double acc = 0.0;
        for (long d = -pad; d <= pad; ++d) {
          long cc = pad_index(c + d, W, Padding::reflect);
          acc += kern[static_cast<std::size_t>(d + pad)] *
                 img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(cc), j);
        }
        tmp.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), j) = acc;
      }
  Image out(img.height, img.width, img.channels);
  for (long r = 0; r < H; ++r)  // vertical pass
    for (long c = 0; c < W; ++c)
      for (std::size_t j = 0; j < img.channels; ++j) {
        double acc = 0.0;
        for (long d = -pad; d <= pad; ++d) {
          long rr = pad_index(r + d, H, Padding::reflect);
          acc += kern[static_cast<std::size_t>(d + pad)] *
                 tmp.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(c), j);
        }
        out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), j) = acc;
      }
  return out;
}

inline Image median_filter(const Image& img, int k) {
  Image out(img.height, img.width, img.channels);
  long H = static_cast<long>(img.height), W = static_cast<long>(img.width);
  long pad = (k - 1) / 2;
  std::vector<double> window(static_cast<std::size_t>(k) * static_cast<std::size_t>(k));
  for (long r = 0; r < H; ++r)
    for (long c = 0; c < W; ++c)
      for (std::size_t j = 0; j < img.channels; ++j) {
        std::size_t n = 0;
        for (long dr = -pad; dr <= pad; ++dr) {
          long rr = pad_index(r + dr, H, Padding::reflect);
          for (long dc = -pad; dc <= pad; ++dc) {
            long cc = pad_index(c + dc, W, Padding::reflect);
            window[n++] = img.at(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc), j);
          }
        }
        auto mid = window.begin() + static_cast<long>(n / 2);
        std::nth_element(window.begin(), mid, window.begin() + static_cast<long>(n));
        out.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), j) = *mid;
      }
  return out;
}

}  // namespace detail

inline Image low_pass_filter(const Image& img, FilterKind kind, int k) {
  detail::check_filter_args(img, k);
  switch (kind) {
    case FilterKind::mean: return detail::mean_filter(img, k);
    case FilterKind::gaussian: return detail::gaussian_filter(img, k);
    case FilterKind::median: return detail::median_filter(img, k);
  }
  throw data_error("low_pass_filter: unknown kind");
}

// i.i.d. mask: each entry 0 with probability p, 1 otherwise
inline BinaryMask sample_mask(std::size_t h, std::size_t w, std::size_t j, double p, Rng& rng) {
  if (p < 0.0 || p > 1.0) throw data_error(strcat_all("sample_mask: p=", p, " outside [0,1]"));
  BinaryMask m(h, w, j);
  for (auto& b : m.bits) b = rng.uniform() < p ? 0 : 1;
  return m;
}

// Recombination: out_f = f*m + d*(1-m), out_d = f*(1-m) + d*m. With a binary
// mask this is per-pixel selection, which keeps the exchange bit-exact.
inline std::pair<Image, Image> recombine(const Image& img_f, const Image& img_d,
                                         const BinaryMask& m) {
  require_same_dims(img_f, img_d, "recombine");
  if (!m.same_dims(img_f))
    throw data_error(strcat_all("recombine: mask dimensions ", m.height, "x", m.width, "x",
                                m.channels, " differ from image ", img_f.height, "x", img_f.width,
                                "x", img_f.channels));
  Image out_f(img_f.height, img_f.width, img_f.channels);
  Image out_d(img_f.height, img_f.width, img_f.channels);
  for (std::size_t i = 0; i < img_f.size(); ++i) {
    if (m.bits[i]) {
      out_f.pixels[i] = img_f.pixels[i];
      out_d.pixels[i] = img_d.pixels[i];
    } else {
      out_f.pixels[i] = img_d.pixels[i];
      out_d.pixels[i] = img_f.pixels[i];
    }
  }
  return {std::move(out_f), std::move(out_d)};
}

// Inverse of recombine under the same mask; recovers the sharp source exactly.
inline Image reconstruct_with_mask(const Image& shuf_f, const Image& shuf_d,
                                   const BinaryMask& m) {
  require_same_dims(shuf_f, shuf_d, "reconstruct_with_mask");
  if (!m.same_dims(shuf_f))
    throw data_error("reconstruct_with_mask: mask dimensions differ from images");
  Image out(shuf_f.height, shuf_f.width, shuf_f.channels);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.pixels[i] = m.bits[i] ? shuf_f.pixels[i] : shuf_d.pixels[i];
  return out;
}

// one draw from the odd kernel sizes in [kernel_min, kernel_max]
inline int draw_kernel_size(const ShuffleConfig& cfg, Rng& rng) {
  std::uint64_t count = static_cast<std::uint64_t>((cfg.kernel_max - cfg.kernel_min) / 2 + 1);
  return cfg.kernel_min + 2 * static_cast<int>(rng.uniform_int(count));
}

struct TrainingSample {
  Image input_f;   // mixed-focus input pair
  Image input_d;
  Image target;    // unfiltered source
  int kernel = 0;
  bool swapped = false;
};

// Filter, mask, recombine, optionally swap the pair order. The target is
// always the unfiltered source; it never reaches the network input.
inline TrainingSample make_training_sample(const Image& src, const ShuffleConfig& cfg, Rng& rng) {
  cfg.validate();
  TrainingSample s;
  s.kernel = draw_kernel_size(cfg, rng);
  Image blurred = low_pass_filter(src, cfg.filter_kind, s.kernel);
  BinaryMask m =
      sample_mask(src.height, src.width, src.channels, cfg.mask_zero_probability, rng);
  auto [sf, sd] = recombine(src, blurred, m);
  s.swapped = cfg.swap_augment && rng.bernoulli(0.5);
  if (s.swapped) {
    s.input_f = std::move(sd);
    s.input_d = std::move(sf);
  } else {
    s.input_f = std::move(sf);
    s.input_d = std::move(sd);
  }
  s.target = src;
  return s;
}

}  // namespace ipsfuse
