#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "ipsfuse/image.hpp"
#include "ipsfuse/rng.hpp"

namespace testutil {

// central difference d(loss)/d(x[i]) with the loss recomputed from scratch
inline double fd_grad(const std::function<double()>& loss, std::vector<double>& x, std::size_t i,
                      double h = 1e-5) {
  double keep = x[i];
  x[i] = keep + h;
  double up = loss();
  x[i] = keep - h;
  double dn = loss();
  x[i] = keep;
  return (up - dn) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Procedural test image: smooth background + rectangles + fine texture.
// Carries detail at several scales so low-pass filtering is clearly visible.
inline ipsfuse::Image textured_image(ipsfuse::Rng& rng, std::size_t h, std::size_t w,
                                     std::size_t channels = 1) {
  ipsfuse::Image img(h, w, channels);
  for (std::size_t j = 0; j < channels; ++j) {
    double fx = rng.uniform(0.02, 0.12), fy = rng.uniform(0.02, 0.12);
    double px = rng.uniform(0.0, 6.28), py = rng.uniform(0.0, 6.28);
    double gx = rng.uniform(0.3, 0.9), gy = rng.uniform(0.3, 0.9);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        double v = 0.45 + 0.18 * std::sin(fx * static_cast<double>(c) + px) *
                              std::cos(fy * static_cast<double>(r) + py);
        v += 0.08 * std::sin(gx * static_cast<double>(c)) * std::sin(gy * static_cast<double>(r));
        img.at(r, c, j) = v;
      }
  }
  int nrect = 6 + static_cast<int>(rng.uniform_int(6));
  for (int i = 0; i < nrect; ++i) {
    std::size_t r0 = rng.uniform_int(h), c0 = rng.uniform_int(w);
    std::size_t rh = 2 + rng.uniform_int(h / 3), rw = 2 + rng.uniform_int(w / 3);
    double level = rng.uniform(0.1, 0.9);
    for (std::size_t r = r0; r < std::min(h, r0 + rh); ++r)
      for (std::size_t c = c0; c < std::min(w, c0 + rw); ++c)
        for (std::size_t j = 0; j < channels; ++j)
          img.at(r, c, j) = 0.35 * img.at(r, c, j) + 0.65 * level;
  }
  for (auto& v : img.pixels) {
    v += rng.uniform(-0.04, 0.04);
    v = std::clamp(v, 0.005, 0.995);
  }
  return img;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("ipsfuse_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace testutil
