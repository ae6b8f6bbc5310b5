#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <vector>

#include "ipsfuse/checkpoint.hpp"
#include "ipsfuse/model.hpp"
#include "ipsfuse/pnm.hpp"

namespace ipsfuse {

// First/second gradient moments per parameter (adaptive-moment update).
template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> m1, m2;
  std::uint64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static OptimizerState init_for(const Model<T>& model) {
    OptimizerState s;
    s.m1.reserve(model.params.size());
    s.m2.reserve(model.params.size());
    for (const auto& [name, t] : model.params) {
      s.m1.emplace_back(t.numel(), T(0));
      s.m2.emplace_back(t.numel(), T(0));
    }
    return s;
  }
};

// Constant at base_lr until decay_start*total, then linear to zero; reaches 0
// only at iter == total.
inline double lr_at(std::size_t iter, const TrainConfig& cfg) {
  if (iter >= cfg.total_iters)
    throw data_error(strcat_all("lr_at: iteration ", iter, " outside schedule of ",
                                cfg.total_iters));
  auto start = static_cast<std::size_t>(cfg.decay_start * static_cast<double>(cfg.total_iters));
  if (iter < start) return cfg.base_lr;
  return cfg.base_lr *
         (1.0 - static_cast<double>(iter - start) / static_cast<double>(cfg.total_iters - start));
}

template <typename T>
void adam_update(Model<T>& model, OptimizerState<T>& opt, double lr) {
  opt.step += 1;
  double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(opt.step));
  double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(opt.step));
  T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  T lr1 = static_cast<T>(lr / bc1);
  T ib2 = static_cast<T>(1.0 / bc2);
  T eps = static_cast<T>(opt.eps);
  for (std::size_t p = 0; p < model.params.size(); ++p) {
    auto& t = model.params[p].second;
    auto& data = t.data_mut();
    auto& m1 = opt.m1[p];
    auto& m2 = opt.m2[p];
    const T* g = t.has_grad() ? t.grad().data() : nullptr;
    for (std::size_t i = 0; i < data.size(); ++i) {
      T gi = g ? g[i] : T(0);
      m1[i] = b1 * m1[i] + (T(1) - b1) * gi;
      m2[i] = b2 * m2[i] + (T(1) - b2) * gi * gi;
      data[i] -= lr1 * m1[i] / (std::sqrt(m2[i] * ib2) + eps);
    }
  }
}

// One optimization step on a prepared sample. The gradient applied is the raw
// tape gradient (no clipping).
template <typename T>
double train_step(Model<T>& model, OptimizerState<T>& opt, const TrainingSample& sample,
                  double lr) {
  Tape<T> tape;
  auto in_f = image_to_tensor<T>(sample.input_f);
  auto in_d = image_to_tensor<T>(sample.input_d);
  auto target = image_to_tensor<T>(sample.target);
  auto pred = forward(tape, model, in_f, in_d);
  auto loss = tape.l1_loss(pred, target);
  model.zero_grads();
  tape.backward(loss);
  double value = static_cast<double>(loss.scalar());
  adam_update(model, opt, lr);
  model.zero_grads();
  return value;
}

struct TrainHooks {
  // called after each iteration with (iter, lr, loss)
  std::function<void(std::size_t, double, double)> on_iter;
};

struct TrainPaths {
  std::string out_dir;          // checkpoints + loss log land here
  std::string resume_from;      // optional checkpoint to continue from
};

inline std::string checkpoint_name(std::size_t iters_done) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%08zu.ckpt", iters_done);
  return buf;
}

// Deterministic per-iteration sample: image pick, crop corner, then the
// shuffle pipeline, all from a stream derived from (seed, iter) alone so a
// resumed run replays the identical sequence.
template <typename T>
TrainingSample draw_sample(const std::vector<Image>& corpus, const TrainConfig& cfg,
                           std::size_t iter) {
  Rng rng = derive_rng(cfg.rng_seed, 0x736d706cULL + iter);
  const Image& src = corpus[rng.uniform_int(corpus.size())];
  std::size_t r0 = rng.uniform_int(src.height - cfg.crop_size + 1);
  std::size_t c0 = rng.uniform_int(src.width - cfg.crop_size + 1);
  Image patch = crop(src, r0, c0, cfg.crop_size);
  return make_training_sample(patch, cfg.shuffle, rng);
}

template <typename T>
struct TrainResult {
  Model<T> model;
  OptimizerState<T> opt;
  std::string final_checkpoint;
  double leading_loss_mean = 0.0;   // first 500 iterations
  double trailing_loss_mean = 0.0;  // last 500 iterations
};

// The full loop: sample -> shuffle -> forward -> L1 -> adaptive-moment update.
// Emits a loss-log line per iteration and periodic checkpoints.
template <typename T>
TrainResult<T> run_training(const std::vector<Image>& corpus, const ModelConfig& mcfg,
                            const TrainConfig& cfg, const TrainPaths& paths,
                            const TrainHooks& hooks = {}) {
  cfg.validate();
  mcfg.validate();
  if (corpus.empty()) throw data_error("train: corpus is empty");
  for (const auto& img : corpus) {
    if (img.height < cfg.crop_size || img.width < cfg.crop_size)
      throw data_error(strcat_all("train: corpus image ", img.height, "x", img.width,
                                  " smaller than crop ", cfg.crop_size));
    if (img.channels != mcfg.in_channels)
      throw data_error(strcat_all("train: corpus image has ", img.channels,
                                  " channels, model expects ", mcfg.in_channels));
  }

  namespace fs = std::filesystem;
  fs::create_directories(paths.out_dir);
  std::string log_path = (fs::path(paths.out_dir) / "loss_log.txt").string();

  TrainResult<T> result{init_model<T>(mcfg, cfg.rng_seed), OptimizerState<T>{}, "", 0.0, 0.0};
  result.opt = OptimizerState<T>::init_for(result.model);
  std::size_t start_iter = 0;

  if (!paths.resume_from.empty()) {
    CheckpointInfo info;
    result.model = load_checkpoint<T>(paths.resume_from, &info, &result.opt.m1, &result.opt.m2);
    result.opt.step = info.opt_step;
    start_iter = info.iters_done;
    if (info.model != mcfg) throw data_error("train: resume checkpoint has a different model config");
  }

  std::ofstream log(log_path, start_iter == 0 ? std::ios::trunc : std::ios::app);
  if (!log) throw data_error(strcat_all(log_path, ": cannot open loss log"));
  char line[96];

  std::size_t window = std::min<std::size_t>(500, cfg.total_iters);
  double lead_acc = 0.0, trail_acc = 0.0;
  std::size_t lead_n = 0;

  for (std::size_t iter = start_iter; iter < cfg.total_iters; ++iter) {
    double lr = lr_at(iter, cfg);
    TrainingSample sample = draw_sample<T>(corpus, cfg, iter);
    double loss;
    try {
      loss = train_step(result.model, result.opt, sample, lr);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::numeric)
        throw numeric_error(strcat_all("training aborted at iteration ", iter, " (lr=", lr,
                                       "): ", e.what()));
      throw;
    }
    std::snprintf(line, sizeof(line), "%zu\t%.10g\t%.10g\n", iter, lr, loss);
    log << line;
    if (iter < window) {
      lead_acc += loss;
      ++lead_n;
    }
    if (iter + window >= cfg.total_iters) trail_acc += loss;
    if (hooks.on_iter) hooks.on_iter(iter, lr, loss);
    std::size_t done = iter + 1;
    if (cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 &&
        done != cfg.total_iters) {
      save_checkpoint((fs::path(paths.out_dir) / checkpoint_name(done)).string(), result.model,
                      cfg, done, result.opt.m1, result.opt.m2, result.opt.step);
    }
  }
  log.flush();

  result.leading_loss_mean = lead_n ? lead_acc / static_cast<double>(lead_n) : 0.0;
  result.trailing_loss_mean = trail_acc / static_cast<double>(window);
  result.final_checkpoint = (fs::path(paths.out_dir) / "final.ckpt").string();
  save_checkpoint(result.final_checkpoint, result.model, cfg, cfg.total_iters, result.opt.m1,
                  result.opt.m2, result.opt.step);
  return result;
}

// Loads every readable PGM/PPM in a directory, sorted by filename. Unreadable
// files are skipped with a warning on stderr; an empty result is an error.
inline std::vector<Image> load_corpus(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw data_error(strcat_all(dir, ": not a directory"));
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm") files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  std::vector<Image> corpus;
  for (const auto& f : files) {
    try {
      corpus.push_back(read_image(f));
    } catch (const Error& e) {
      std::cerr << "warning: skipping " << f << ": " << e.what() << "\n";
    }
  }
  if (corpus.empty()) throw data_error(strcat_all(dir, ": no readable PGM/PPM images"));
  return corpus;
}

}  // namespace ipsfuse
