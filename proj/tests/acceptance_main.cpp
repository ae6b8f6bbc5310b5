// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// hard failure. Criterion 7 is reported as a warning when it does not hold.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ipsfuse/ipsfuse.hpp"
#include "ipsfuse/parallel.hpp"
#include <thread>
#include "test_util.hpp"

using namespace ipsfuse;
using Clock = std::chrono::steady_clock;

namespace {

struct Criterion {
  int id;
  bool pass = false;
  bool warn_only = false;
  std::string text;
  double seconds = 0;
};

std::vector<Criterion> g_results;

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

// time_bound > 0 enforces the criterion's stated runtime budget
template <typename F>
void run_criterion(int id, bool warn_only, double time_bound, F&& body) {
  Criterion c;
  c.id = id;
  c.warn_only = warn_only;
  auto t0 = Clock::now();
  try {
    auto [pass, text] = body();
    c.pass = pass;
    c.text = text;
  } catch (const std::exception& e) {
    c.pass = false;
    c.text = std::string("exception: ") + e.what();
  }
  c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  if (c.pass && time_bound > 0 && c.seconds > time_bound) {
    c.pass = false;
    c.text += " -- runtime " + fmt(c.seconds) + " s exceeds the " + fmt(time_bound) + " s budget";
  }
  const char* tag = c.pass ? "[PASS]" : (c.warn_only ? "[WARN]" : "[FAIL]");
  std::printf("%s criterion %d: %s (%.2f s)\n", tag, c.id, c.text.c_str(), c.seconds);
  std::fflush(stdout);
  g_results.push_back(c);
}

using Verdict = std::pair<bool, std::string>;

// ---- criterion 1: SSM path equivalence ------------------------------------

Verdict ssm_equivalence() {
  Rng rng(20260810);
  const std::size_t sizes[] = {1, 2, 4, 8};
  const std::size_t lens[] = {1, 8, 64};
  double worst = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    std::size_t n = sizes[rng.uniform_int(4)];
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
    auto d = zoh_discretize(s, rng.uniform(0.05, 1.0));
    std::vector<double> x(lens[rng.uniform_int(3)]);
    for (auto& v : x) v = rng.uniform(-1.0, 1.0);
    auto yr = ssm_recurrent(d, x);
    auto yc = ssm_conv(d, x);
    for (std::size_t i = 0; i < x.size(); ++i)
      worst = std::max(worst, std::abs(yr[i] - yc[i]));
  }
  bool ok = worst < 1e-10;
  return {ok, "SSM path equivalence: max |recurrent - convolutional| = " + fmt(worst) +
                  " over 200 stable systems (bound 1e-10)"};
}

// ---- criterion 2: ZOH correctness -----------------------------------------

Verdict zoh_correctness() {
  ContinuousSsm s{{-1.3}, {2.0}, {1.0}, 0.0};
  bool ratio_ok = true;
  double prev = 0.0, worst_ratio = 0.0;
  for (int i = 0; i < 3; ++i) {
    double delta = 1e-2 / (1 << i);
    auto d = zoh_discretize(s, delta);
    double resid = std::abs(d.a_bar[0] - (1.0 + delta * s.a_diag[0]));
    if (i > 0) {
      double ratio = resid / prev;
      worst_ratio = std::max(worst_ratio, std::abs(ratio - 0.25));
      ratio_ok = ratio_ok && std::abs(ratio - 0.25) < 0.02;
    }
    prev = resid;
  }
  double delta = 1e-6;
  auto good = zoh_discretize(s, delta);
  double rel_good = std::abs(good.b_bar[0] - delta * s.b[0]) / std::abs(delta * s.b[0]);
  auto bad = zoh_discretize_uncorrected(s, delta);
  double rel_bad = std::abs(bad.b_bar[0] - delta * s.b[0]) / std::abs(delta * s.b[0]);
  bool ok = ratio_ok && rel_good < 1e-6 && rel_bad > 1e-3;
  return {ok, "ZOH correctness: halving ratio within " + fmt(worst_ratio) +
                  " of 1/4, b_bar limit rel err " + fmt(rel_good) +
                  " (bound 1e-6), misprinted-form control errs by " + fmt(rel_bad)};
}

// ---- criterion 3: full-model gradient soundness ----------------------------

Verdict gradient_soundness() {
  ModelConfig cfg;
  cfg.base_channels = 8;
  cfg.local_blocks = 3;
  cfg.global_blocks = 2;
  cfg.ssm_state_size = 4;
  cfg.mlp_expansion = 2;
  cfg.in_channels = 1;
  auto model = init_model<double>(cfg, 11);

  Rng rng(77);
  std::size_t hw = 8;
  std::vector<double> fv(hw * hw), dv(hw * hw), tv(hw * hw);
  for (auto& v : fv) v = rng.uniform();
  for (auto& v : dv) v = rng.uniform();
  for (auto& v : tv) v = rng.uniform();

  auto loss_value = [&]() {
    Tape<double> tape;
    auto pred = forward(tape, model, Tensor<double>::from_data({1, hw, hw}, fv),
                        Tensor<double>::from_data({1, hw, hw}, dv));
    auto diff = tape.sub(pred, Tensor<double>::from_data({1, hw, hw}, tv));
    return tape.sum(tape.mul(diff, diff)).scalar();
  };

  Tape<double> tape;
  auto pred = forward(tape, model, Tensor<double>::from_data({1, hw, hw}, fv),
                      Tensor<double>::from_data({1, hw, hw}, dv));
  auto diff = tape.sub(pred, Tensor<double>::from_data({1, hw, hw}, tv));
  auto loss = tape.sum(tape.mul(diff, diff));
  model.zero_grads();
  tape.backward(loss);

  double worst = 0.0;
  std::string worst_name;
  std::size_t checked = 0;
  for (auto& [name, param] : model.params) {
    auto& data = param.data_mut();
    const auto& grad = param.grad();
    for (std::size_t i = 0; i < data.size(); ++i) {
      double keep = data[i];
      double h = 1e-5;
      data[i] = keep + h;
      double up = loss_value();
      data[i] = keep - h;
      double dn = loss_value();
      data[i] = keep;
      double fd = (up - dn) / (2.0 * h);
      double rel = std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
      if (rel > worst) {
        worst = rel;
        worst_name = name;
      }
      ++checked;
    }
  }
  bool ok = worst < 1e-4;
  return {ok, "gradient soundness: " + std::to_string(checked) +
                  " parameters vs central differences, worst rel err " + fmt(worst) + " (" +
                  worst_name + ", bound 1e-4)"};
}

// ---- criterion 4: shuffle algebra ------------------------------------------

Verdict shuffle_algebra() {
  Rng rng(4040);
  for (int rep = 0; rep < 100; ++rep) {
    std::size_t h = 4 + rng.uniform_int(20), w = 4 + rng.uniform_int(20);
    std::size_t j = rng.bernoulli(0.5) ? 1 : 3;
    double p = rep % 3 == 0 ? 0.0 : rep % 3 == 1 ? 1.0 : (rep % 5 == 0 ? 0.5 : rng.uniform());
    Image f(h, w, j), d(h, w, j);
    for (auto& v : f.pixels) v = rng.uniform();
    for (auto& v : d.pixels) v = rng.uniform();
    auto m = sample_mask(h, w, j, p, rng);
    auto [sf, sd] = recombine(f, d, m);
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (sf.pixels[i] + sd.pixels[i] != f.pixels[i] + d.pixels[i])
        return {false, "shuffle algebra: conservation violated"};
      bool keep = sf.pixels[i] == f.pixels[i] && sd.pixels[i] == d.pixels[i];
      bool swap = sf.pixels[i] == d.pixels[i] && sd.pixels[i] == f.pixels[i];
      if (!keep && !swap) return {false, "shuffle algebra: pixel multiset not preserved"};
    }
    auto [rf, rd] = recombine(sf, sd, m);
    if (rf.pixels != f.pixels || rd.pixels != d.pixels)
      return {false, "shuffle algebra: involution violated"};
    if (reconstruct_with_mask(sf, sd, m).pixels != f.pixels)
      return {false, "shuffle algebra: mask reconstruction violated"};
  }
  return {true, "shuffle algebra: conservation, involution, multiset preservation and "
                "reconstruction bit-exact over 100 cases incl. p in {0, 0.5, 1}"};
}

// ---- criterion 5: mask statistics ------------------------------------------

Verdict mask_statistics() {
  Rng rng(51);
  std::string detail;
  bool ok = true;
  for (double p : {0.1, 0.5, 0.9}) {
    auto m = sample_mask(1000, 1000, 1, p, rng);
    std::size_t zeros = 0;
    for (auto b : m.bits) zeros += b == 0;
    double frac = static_cast<double>(zeros) / 1e6;
    ok = ok && std::abs(frac - p) <= 0.002;
    detail += " p=" + fmt(p) + ":" + fmt(frac);
  }
  return {ok, "mask statistics: zero-fraction within +/-0.002 of p over 1e6 samples," + detail};
}

// ---- criteria 6/7/9: desk-scale training ------------------------------------

ModelConfig desk_model() {
  ModelConfig cfg;
  cfg.base_channels = 8;
  cfg.local_blocks = 3;
  cfg.global_blocks = 2;
  cfg.ssm_state_size = 4;
  cfg.mlp_expansion = 2;
  cfg.in_channels = 1;
  return cfg;
}

TrainConfig desk_train(double p) {
  TrainConfig cfg;
  cfg.total_iters = 20000;
  cfg.base_lr = 1e-4;
  cfg.decay_start = 0.5;
  cfg.crop_size = 64;
  cfg.checkpoint_interval = 0;
  cfg.rng_seed = 20260810;
  cfg.shuffle.mask_zero_probability = p;
  cfg.shuffle.filter_kind = FilterKind::mean;
  cfg.shuffle.kernel_min = 3;
  cfg.shuffle.kernel_max = 31;
  return cfg;
}

std::filesystem::path work_dir() {
  auto p = std::filesystem::current_path() / "acceptance_work";
  std::filesystem::create_directories(p);
  return p;
}

void write_corpus(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Rng rng(606060);
  for (int i = 0; i < 16; ++i) {
    Image img = testutil::textured_image(rng, 96, 96);
    char name[32];
    std::snprintf(name, sizeof(name), "train_%02d.pgm", i);
    write_image((dir / name).string(), img);
  }
}

struct HeldOutScore {
  double fused_psnr_mean = 0, naive_psnr_mean = 0, margin_min = 1e300;
};

template <typename T>
HeldOutScore held_out_eval(const Model<T>& model, double p) {
  HeldOutScore sc;
  Rng rng(717171);  // independent of the training corpus generator seed
  for (int i = 0; i < 8; ++i) {
    Image src = testutil::textured_image(rng, 96, 96);
    ShuffleConfig cfg;
    cfg.mask_zero_probability = p;
    cfg.filter_kind = FilterKind::mean;
    cfg.kernel_min = 3;
    cfg.kernel_max = 31;
    cfg.swap_augment = false;
    Rng draw(818181 + static_cast<std::uint64_t>(i));
    auto s = make_training_sample(src, cfg, draw);
    Image fused = fuse_images(model, s.input_f, s.input_d);
    Image naive(src.height, src.width, src.channels);
    for (std::size_t k = 0; k < naive.size(); ++k)
      naive.pixels[k] = 0.5 * (s.input_f.pixels[k] + s.input_d.pixels[k]);
    double pf = psnr(fused, src), pn = psnr(naive, src);
    sc.fused_psnr_mean += pf / 8;
    sc.naive_psnr_mean += pn / 8;
    sc.margin_min = std::min(sc.margin_min, pf - pn);
  }
  return sc;
}

struct TrainedRun {
  TrainResult<float> result;
  HeldOutScore held_out;
  double loss_ratio = 0;
};

TrainedRun run_desk_training(const std::string& tag, double p) {
  auto dir = work_dir();
  auto corpus_dir = dir / "corpus";
  if (!std::filesystem::exists(corpus_dir / "train_15.pgm")) write_corpus(corpus_dir);
  auto corpus = load_corpus(corpus_dir.string());

  TrainPaths paths{(dir / tag).string(), ""};
  TrainHooks hooks;
  hooks.on_iter = [](std::size_t iter, double, double loss) {
    if ((iter + 1) % 2000 == 0)
      std::fprintf(stderr, "    [train] iter %zu loss %.5f\n", iter + 1, loss);
  };
  TrainedRun run{run_training<float>(corpus, desk_model(), desk_train(p), paths, hooks), {}, 0};
  run.loss_ratio = run.result.trailing_loss_mean / run.result.leading_loss_mean;
  run.held_out = held_out_eval(run.result.model, 0.5);  // held-out protocol fixed at p=0.5
  return run;
}

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// ---- criterion 8: metric sanity ---------------------------------------------

Verdict metric_sanity() {
  Rng rng(88);
  Image ref(48, 48, 1);
  for (auto& v : ref.pixels) v = rng.uniform(0.2, 0.8);

  // psnr analytic cases
  if (!std::isinf(psnr(ref, ref))) return {false, "metric sanity: psnr infinite marker"};
  Image off = ref;
  for (auto& v : off.pixels) v += 0.1;
  if (std::abs(psnr(off, ref) - 20.0) > 1e-9)
    return {false, "metric sanity: psnr 20 dB case"};
  Image other(48, 48, 1);
  for (auto& v : other.pixels) v = rng.uniform();
  double mse = 0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    double d = other.pixels[i] - ref.pixels[i];
    mse += d * d;
  }
  mse /= static_cast<double>(ref.size());
  if (std::abs(psnr(other, ref) - 10.0 * std::log10(1.0 / mse)) > 1e-9)
    return {false, "metric sanity: psnr direct-summation oracle"};
  double prev = 1e300;
  for (double amp : {0.01, 0.05, 0.1}) {
    Image noisy = ref;
    Rng nr(9);
    for (auto& v : noisy.pixels) v = std::clamp(v + nr.uniform(-amp, amp), 0.0, 1.0);
    double val = psnr(noisy, ref);
    if (val >= prev) return {false, "metric sanity: psnr monotonicity under noise"};
    prev = val;
  }

  // ssim
  if (std::abs(ssim(ref, ref) - 1.0) > 1e-12) return {false, "metric sanity: ssim(x,x) != 1"};
  Image bin(32, 32, 1), inv(32, 32, 1);
  for (std::size_t r = 0; r < 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) {
      bin.at(r, c, 0) = ((r / 4 + c / 4) % 2) ? 1.0 : 0.0;
      inv.at(r, c, 0) = 1.0 - bin.at(r, c, 0);
    }
  if (ssim(bin, inv) >= 0.0) return {false, "metric sanity: ssim anti-correlation"};
  Image c1(16, 16, 1, 0.2), c2(16, 16, 1, 0.8);
  double c1c = 0.01 * 0.01;
  double lum = (2 * 0.2 * 0.8 + c1c) / (0.2 * 0.2 + 0.8 * 0.8 + c1c);
  if (std::abs(ssim(c1, c2) - lum) > 1e-9)
    return {false, "metric sanity: ssim constant-pair luminance term"};

  // q_mi
  if (std::abs(q_mi(ref, ref, ref) - 2.0) > 1e-12)
    return {false, "metric sanity: q_mi(F,F,F) != 2"};
  Image big_f(512, 512, 1), big_a(512, 512, 1), big_b(512, 512, 1);
  for (auto& v : big_f.pixels) v = rng.uniform();
  for (auto& v : big_a.pixels) v = rng.uniform();
  for (auto& v : big_b.pixels) v = rng.uniform();
  if (std::abs(q_mi(big_f, big_a, big_b)) > 0.05)
    return {false, "metric sanity: q_mi independence"};
  if (std::abs(q_mi(big_a, big_a, big_b) - 1.0) > 0.05)
    return {false, "metric sanity: q_mi one-source match"};

  // q_sf
  Image constimg(20, 20, 1, 0.6);
  if (q_sf(constimg) != 0.0) return {false, "metric sanity: q_sf constant"};
  Image stripes(16, 16, 1);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c) stripes.at(r, c, 0) = c % 2 ? 1.0 : 0.0;
  if (std::abs(q_sf(stripes) - 1.0) > 1e-12) return {false, "metric sanity: q_sf stripes"};

  // q_abf
  Rng trng(13);
  Image ta = testutil::textured_image(trng, 32, 32);
  Image tb = testutil::textured_image(trng, 32, 32);
  if (std::abs(q_abf(ta, ta, ta) - 1.0) > 1e-6)
    return {false, "metric sanity: q_abf perfect transfer"};
  Image flat(32, 32, 1, 0.5);
  if (q_abf(flat, ta, tb) >= 0.05) return {false, "metric sanity: q_abf flat fused"};
  if (q_abf(ta, tb, ta) != q_abf(ta, ta, tb))
    return {false, "metric sanity: q_abf source symmetry"};

  return {true, "metric sanity: psnr/ssim/q_mi/q_sf/q_abf analytic and oracle cases, "
                "psnr noise monotonicity"};
}

}  // namespace

int main() {
  std::printf("ipsfuse acceptance suite\n");

  run_criterion(1, false, 5.0, ssm_equivalence);
  run_criterion(2, false, 1.0, zoh_correctness);
  // per-op thread dispatch overwhelms 8x8 tensors; the reverse pass is
  // single-threaded by contract anyway
  ThreadPool::instance().set_threads(1);
  run_criterion(3, false, 120.0, gradient_soundness);
  ThreadPool::instance().set_threads(
      ThreadPool::env_thread_cap() ? ThreadPool::env_thread_cap()
                                   : static_cast<int>(std::thread::hardware_concurrency()));
  run_criterion(4, false, 5.0, shuffle_algebra);
  run_criterion(5, false, 2.0, mask_statistics);

  // criterion 6: desk-scale learning (p=0.5)
  TrainedRun base;
  run_criterion(6, false, 0.0, [&]() -> Verdict {
    base = run_desk_training("train_p05", 0.5);
    bool loss_ok = base.loss_ratio < 0.2;
    double margin = base.held_out.fused_psnr_mean - base.held_out.naive_psnr_mean;
    bool psnr_ok = margin >= 3.0;
    return {loss_ok && psnr_ok,
            "desk-scale learning: trailing/leading loss ratio " + fmt(base.loss_ratio) +
                " (bound 0.2); held-out fused " + fmt(base.held_out.fused_psnr_mean) +
                " dB vs naive " + fmt(base.held_out.naive_psnr_mean) + " dB, margin " +
                fmt(margin) + " dB (bound 3, per-pair min " + fmt(base.held_out.margin_min) +
                ")"};
  });

  // criterion 7: mask-ratio ablation direction (warning only)
  run_criterion(7, true, 0.0, [&]() -> Verdict {
    auto low = run_desk_training("train_p01", 0.1);
    bool ok = base.held_out.fused_psnr_mean >= low.held_out.fused_psnr_mean;
    return {ok, "ablation direction: held-out PSNR p=0.5 " +
                    fmt(base.held_out.fused_psnr_mean) + " dB vs p=0.1 " +
                    fmt(low.held_out.fused_psnr_mean) +
                    " dB (desk scale may compress the gap)"};
  });

  run_criterion(8, false, 10.0, metric_sanity);

  // criterion 9: determinism of the criterion-6 run
  run_criterion(9, false, 0.0, [&]() -> Verdict {
    auto rerun = run_desk_training("train_p05_rerun", 0.5);
    auto a = file_bytes(base.result.final_checkpoint);
    auto b = file_bytes(rerun.result.final_checkpoint);
    bool ok = !a.empty() && a == b;
    return {ok, std::string("determinism: re-run final checkpoint is ") +
                    (ok ? "bit-identical" : "DIFFERENT") + " (" +
                    std::to_string(a.size()) + " bytes)"};
  });

  std::size_t failed = 0;
  for (const auto& c : g_results)
    if (!c.pass && !c.warn_only) ++failed;
  std::printf("%zu/%zu criteria passed%s\n", g_results.size() - [&] {
                std::size_t n = 0;
                for (const auto& c : g_results)
                  if (!c.pass) ++n;
                return n;
              }(),
              g_results.size(), failed ? "" : " (warnings do not gate)");
  return failed == 0 ? 0 : 1;
}
