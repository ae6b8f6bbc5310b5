#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ipsfuse/metrics.hpp"
#include "ipsfuse/model.hpp"
#include "ipsfuse/shuffle.hpp"
#include "ipsfuse/ssm.hpp"

namespace ipsfuse {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

namespace selftest_detail {

inline ContinuousSsm random_stable_ssm(Rng& rng, std::size_t n) {
  ContinuousSsm s;
  s.a_diag.resize(n);
  s.b.resize(n);
  s.c.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.a_diag[i] = rng.uniform(-2.0, -0.1);
    s.b[i] = rng.uniform(-1.0, 1.0);
    s.c[i] = rng.uniform(-1.0, 1.0);
  }
  s.d = rng.uniform(-1.0, 1.0);
  return s;
}

inline CheckResult check_ssm_equivalence(std::size_t cases, double tol) {
  Rng rng(42);
  const std::size_t sizes[] = {1, 2, 4, 8};
  const std::size_t lens[] = {1, 8, 64};
  double worst = 0.0;
  for (std::size_t i = 0; i < cases; ++i) {
    auto ssm = random_stable_ssm(rng, sizes[rng.uniform_int(4)]);
    double delta = rng.uniform(0.05, 1.0);
    auto d = zoh_discretize(ssm, delta);
    std::size_t len = lens[rng.uniform_int(3)];
    std::vector<double> x(len);
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    auto yr = ssm_recurrent(d, x);
    auto yc = ssm_conv(d, x);
    for (std::size_t k = 0; k < len; ++k) worst = std::max(worst, std::abs(yr[k] - yc[k]));
  }
  return {"ssm recurrent/convolutional equivalence", worst < tol,
          strcat_all("max |diff| = ", worst, " over ", cases, " systems (tol ", tol, ")")};
}

inline CheckResult check_zoh() {
  ContinuousSsm s;
  s.a_diag = {-1.0};
  s.b = {1.0};
  s.c = {1.0};
  s.d = 0.0;
  auto d = zoh_discretize(s, std::log(2.0));
  bool scalar_ok = std::abs(d.a_bar[0] - 0.5) < 1e-14 && std::abs(d.b_bar[0] - 0.5) < 1e-14;

  // a_bar - (1 + delta a) must shrink as O(delta^2)
  bool ratio_ok = true;
  double prev = 0.0;
  for (int i = 0; i < 3; ++i) {
    double delta = 1e-2 / (1 << i);
    auto dd = zoh_discretize(s, delta);
    double resid = std::abs(dd.a_bar[0] - (1.0 + delta * s.a_diag[0]));
    if (i > 0) ratio_ok = ratio_ok && std::abs(resid / prev - 0.25) < 0.02;
    prev = resid;
  }

  s.b = {2.0};
  double delta = 1e-6;
  auto good = zoh_discretize(s, delta);
  double rel_good = std::abs(good.b_bar[0] - delta * s.b[0]) / (delta * s.b[0]);
  auto bad = zoh_discretize_uncorrected(s, delta);
  double rel_bad = std::abs(bad.b_bar[0] - delta * s.b[0]) / (delta * s.b[0]);
  bool limit_ok = rel_good < 1e-6 && rel_bad > 1e-3;  // the control must fail the limit

  return {"zoh discretization (scalar case, O(dt^2) ratio, dt->0 limit + negative control)",
          scalar_ok && ratio_ok && limit_ok,
          strcat_all("rel err corrected=", rel_good, ", uncorrected control=", rel_bad)};
}

template <typename Fn>
double fd_gradient(Fn&& f, std::vector<double>& x, std::size_t i, double h = 1e-5) {
  double keep = x[i];
  x[i] = keep + h;
  double up = f();
  x[i] = keep - h;
  double dn = f();
  x[i] = keep;
  return (up - dn) / (2.0 * h);
}

inline CheckResult check_model_gradients() {
  ModelConfig cfg;
  cfg.base_channels = 4;
  cfg.local_blocks = 1;
  cfg.global_blocks = 1;
  cfg.ssm_state_size = 2;
  cfg.mlp_expansion = 1;
  cfg.in_channels = 1;
  auto model = init_model<double>(cfg, 7);
  Rng rng(11);
  std::size_t hw = 6;
  std::vector<double> in_f(hw * hw), in_d(hw * hw), tgt(hw * hw);
  for (auto& v : in_f) v = rng.uniform();
  for (auto& v : in_d) v = rng.uniform();
  for (auto& v : tgt) v = rng.uniform();

  auto loss_fn = [&]() {
    Tape<double> tape;
    auto pred = forward(tape, model, Tensor<double>::from_data({1, hw, hw}, in_f),
                        Tensor<double>::from_data({1, hw, hw}, in_d));
    auto diff = tape.sub(pred, Tensor<double>::from_data({1, hw, hw}, tgt));
    return tape.sum(tape.mul(diff, diff)).scalar();
  };

  Tape<double> tape;
  auto pred = forward(tape, model, Tensor<double>::from_data({1, hw, hw}, in_f),
                      Tensor<double>::from_data({1, hw, hw}, in_d));
  auto diff = tape.sub(pred, Tensor<double>::from_data({1, hw, hw}, tgt));
  auto loss = tape.sum(tape.mul(diff, diff));
  model.zero_grads();
  tape.backward(loss);

  double worst = 0.0;
  std::size_t probes = 0;
  for (auto& [name, param] : model.params) {
    std::size_t n = param.numel();
    for (std::size_t rep = 0; rep < 2; ++rep) {  // two probes per parameter tensor
      std::size_t i = rng.uniform_int(n);
      double fd = fd_gradient(loss_fn, param.data_mut(), i);
      double an = param.has_grad() ? param.grad()[i] : 0.0;
      double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      worst = std::max(worst, rel);
      ++probes;
    }
  }
  model.zero_grads();
  return {"model gradients vs central differences (sampled)", worst < 1e-4,
          strcat_all("worst rel err = ", worst, " over ", probes, " probes")};
}

inline CheckResult check_shuffle_algebra() {
  Rng rng(99);
  bool ok = true;
  std::string why;
  for (int rep = 0; rep < 20 && ok; ++rep) {
    std::size_t h = 5 + rng.uniform_int(12), w = 5 + rng.uniform_int(12);
    std::size_t j = rng.bernoulli(0.5) ? 1 : 3;
    double p = rep == 0 ? 0.0 : rep == 1 ? 1.0 : rng.uniform();
    Image f(h, w, j), d(h, w, j);
    for (auto& v : f.pixels) v = rng.uniform();
    for (auto& v : d.pixels) v = rng.uniform();
    auto m = sample_mask(h, w, j, p, rng);
    auto [sf, sd] = recombine(f, d, m);
    for (std::size_t i = 0; i < f.size() && ok; ++i) {
      if (sf.pixels[i] + sd.pixels[i] != f.pixels[i] + d.pixels[i]) {
        ok = false;
        why = "conservation violated";
      }
      bool keep = sf.pixels[i] == f.pixels[i] && sd.pixels[i] == d.pixels[i];
      bool swap = sf.pixels[i] == d.pixels[i] && sd.pixels[i] == f.pixels[i];
      if (!keep && !swap) {
        ok = false;
        why = "pixel group not preserved";
      }
    }
    auto [rf, rd] = recombine(sf, sd, m);
    Image rec = reconstruct_with_mask(sf, sd, m);
    for (std::size_t i = 0; i < f.size() && ok; ++i) {
      if (rf.pixels[i] != f.pixels[i] || rd.pixels[i] != d.pixels[i]) {
        ok = false;
        why = "involution violated";
      }
      if (rec.pixels[i] != f.pixels[i]) {
        ok = false;
        why = "mask reconstruction violated";
      }
    }
  }
  return {"shuffle conservation/involution/reconstruction (bit-exact)", ok,
          ok ? "20 randomized cases incl. p in {0,1}" : why};
}

inline CheckResult check_mask_stats() {
  Rng rng(5);
  bool ok = true;
  std::string detail;
  for (double p : {0.1, 0.5, 0.9}) {
    auto m = sample_mask(1000, 1000, 1, p, rng);
    std::size_t zeros = 0;
    for (auto b : m.bits) zeros += b == 0;
    double frac = static_cast<double>(zeros) / static_cast<double>(m.size());
    detail += strcat_all("p=", p, " frac=", frac, " ");
    ok = ok && std::abs(frac - p) <= 0.002;
  }
  return {"mask zero-fraction within +/-0.002 over 1e6 samples", ok, detail};
}

inline CheckResult check_metric_sanity() {
  Rng rng(17);
  Image a(32, 32, 1), n1(32, 32, 1), n2(32, 32, 1);
  for (auto& v : a.pixels) v = rng.uniform(0.2, 0.8);
  bool ok = true;
  std::string why;

  Image off = a;
  for (auto& v : off.pixels) v = std::min(1.0, v + 0.1);
  // uniform error of 0.1 -> MSE 0.01 -> 20 dB
  if (std::abs(psnr(off, a) - 20.0) > 1e-9) {
    ok = false;
    why = "psnr 20dB case";
  }
  if (!std::isinf(psnr(a, a))) {
    ok = false;
    why = "psnr infinite marker";
  }
  double last = 100.0;
  for (double amp : {0.01, 0.05, 0.1}) {  // monotone decrease with noise
    Image noisy = a;
    Rng nr(3);
    for (auto& v : noisy.pixels) v = std::clamp(v + nr.uniform(-amp, amp), 0.0, 1.0);
    double val = psnr(noisy, a);
    if (val >= last) {
      ok = false;
      why = "psnr monotonicity";
    }
    last = val;
  }
  if (std::abs(ssim(a, a) - 1.0) > 1e-12) {
    ok = false;
    why = "ssim self-similarity";
  }
  if (std::abs(q_mi(a, a, a) - 2.0) > 1e-12) {
    ok = false;
    why = "q_mi identical images";
  }
  Image stripes(16, 16, 1);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) stripes.at(r, c, 0) = c % 2 ? 1.0 : 0.0;
  if (std::abs(q_sf(stripes) - 1.0) > 1e-12) {
    ok = false;
    why = "q_sf stripes";
  }
  if (std::abs(q_abf(a, a, a) - 1.0) > 1e-6) {
    ok = false;
    why = "q_abf identical images";
  }
  return {"metric sanity (psnr/ssim/q_mi/q_sf/q_abf)", ok, ok ? "all analytic cases" : why};
}

}  // namespace selftest_detail

// Fast invariant suite behind `ipsfuse selftest`; returns one row per check.
inline std::vector<CheckResult> run_selftest() {
  using namespace selftest_detail;
  std::vector<CheckResult> out;
  out.push_back(check_zoh());
  out.push_back(check_ssm_equivalence(50, 1e-10));
  out.push_back(check_shuffle_algebra());
  out.push_back(check_mask_stats());
  out.push_back(check_metric_sanity());
  out.push_back(check_model_gradients());
  return out;
}

}  // namespace ipsfuse
