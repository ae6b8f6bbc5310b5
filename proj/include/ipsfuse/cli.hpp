#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "ipsfuse/checkpoint.hpp"
#include "ipsfuse/metrics.hpp"
#include "ipsfuse/pnm.hpp"
#include "ipsfuse/selftest.hpp"
#include "ipsfuse/trainer.hpp"

namespace ipsfuse {

namespace fs = std::filesystem;

inline void echo_config(const std::string& cmd,
                        const std::vector<std::pair<std::string, std::string>>& kv) {
  std::cerr << "[" << cmd << "] resolved configuration:\n";
  for (const auto& [k, v] : kv) std::cerr << "  " << k << "=" << v << "\n";
}

inline std::map<std::string, std::string> stem_map(const std::string& dir) {
  if (!fs::is_directory(dir)) throw data_error(strcat_all(dir, ": not a directory"));
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    if (ext != ".pgm" && ext != ".ppm") continue;
    auto stem = e.path().stem().string();
    if (out.count(stem))
      throw data_error(strcat_all(dir, ": duplicate stem '", stem, "' (", out[stem], " and ",
                                  e.path().string(), ")"));
    out[stem] = e.path().string();
  }
  return out;
}

// --- synthesize ---------------------------------------------------------------

struct SynthesisRecord {
  Image shuffled_f, shuffled_d, blurred;
  BinaryMask mask;
  int kernel = 0;
};

// One file's pipeline under its own derived seed; replaying the recorded
// seed reproduces the mask and outputs exactly.
inline SynthesisRecord synthesize_one(const Image& src, const ShuffleConfig& cfg,
                                      std::uint64_t file_seed) {
  cfg.validate();
  Rng rng(file_seed);
  SynthesisRecord rec;
  rec.kernel = draw_kernel_size(cfg, rng);
  rec.blurred = low_pass_filter(src, cfg.filter_kind, rec.kernel);
  rec.mask = sample_mask(src.height, src.width, src.channels, cfg.mask_zero_probability, rng);
  auto [sf, sd] = recombine(src, rec.blurred, rec.mask);
  rec.shuffled_f = std::move(sf);
  rec.shuffled_d = std::move(sd);
  return rec;
}

struct SynthesizeOptions {
  std::string input_dir, out_dir;
  ShuffleConfig shuffle;
};

inline int cmd_synthesize(const SynthesizeOptions& opt) {
  opt.shuffle.validate();
  echo_config("synthesize", {{"input", opt.input_dir},
                             {"out", opt.out_dir},
                             {"p", strcat_all(opt.shuffle.mask_zero_probability)},
                             {"filter", filter_name(opt.shuffle.filter_kind)},
                             {"kmin", strcat_all(opt.shuffle.kernel_min)},
                             {"kmax", strcat_all(opt.shuffle.kernel_max)},
                             {"seed", strcat_all(opt.shuffle.rng_seed)}});
  auto files = stem_map(opt.input_dir);
  if (files.empty()) throw data_error(strcat_all(opt.input_dir, ": no PGM/PPM inputs"));
  std::error_code ec;
  fs::create_directories(opt.out_dir, ec);
  if (!fs::is_directory(opt.out_dir))
    throw data_error(strcat_all(opt.out_dir, ": cannot create output directory"));

  nlohmann::json manifest;
  manifest["seed"] = opt.shuffle.rng_seed;
  manifest["p"] = opt.shuffle.mask_zero_probability;
  manifest["filter"] = filter_name(opt.shuffle.filter_kind);
  manifest["kernel_min"] = opt.shuffle.kernel_min;
  manifest["kernel_max"] = opt.shuffle.kernel_max;
  manifest["files"] = nlohmann::json::array();

  std::uint64_t index = 0;
  for (const auto& [stem, path] : files) {
    Image src = read_image(path);
    std::uint64_t file_seed = derive_rng(opt.shuffle.rng_seed, index).next_u64();
    auto rec = synthesize_one(src, opt.shuffle, file_seed);
    std::string ext = src.channels == 1 ? ".pgm" : ".ppm";
    auto out = [&](const std::string& tag) {
      return (fs::path(opt.out_dir) / (stem + "_" + tag + ext)).string();
    };
    write_image(out("if"), rec.shuffled_f);
    write_image(out("id"), rec.shuffled_d);
    write_image(out("blur"), rec.blurred);
    write_image(out("mask"), mask_to_image(rec.mask));
    manifest["files"].push_back({{"stem", stem},
                                 {"source", path},
                                 {"seed", file_seed},
                                 {"kernel", rec.kernel}});
    ++index;
  }
  std::ofstream mf((fs::path(opt.out_dir) / "manifest.json").string());
  mf << manifest.dump(2) << "\n";
  if (!mf) throw data_error("cannot write manifest.json");
  std::cerr << "synthesize: wrote " << index << " quadruples to " << opt.out_dir << "\n";
  return 0;
}

// --- train --------------------------------------------------------------------

struct TrainOptions {
  std::string corpus_dir, out_dir, resume;
  ModelConfig model;
  TrainConfig train;
};

inline int cmd_train(const TrainOptions& opt) {
  auto corpus = load_corpus(opt.corpus_dir);
  ModelConfig mcfg = opt.model;
  mcfg.in_channels = corpus.front().channels;
  echo_config("train",
              {{"corpus", opt.corpus_dir},
               {"out", opt.out_dir},
               {"resume", opt.resume.empty() ? "(none)" : opt.resume},
               {"images", strcat_all(corpus.size())},
               {"total_iters", strcat_all(opt.train.total_iters)},
               {"base_lr", strcat_all(opt.train.base_lr)},
               {"decay_start", strcat_all(opt.train.decay_start)},
               {"crop", strcat_all(opt.train.crop_size)},
               {"p", strcat_all(opt.train.shuffle.mask_zero_probability)},
               {"filter", filter_name(opt.train.shuffle.filter_kind)},
               {"kernel_range", strcat_all("[", opt.train.shuffle.kernel_min, ",",
                                           opt.train.shuffle.kernel_max, "]")},
               {"seed", strcat_all(opt.train.rng_seed)},
               {"precision", opt.train.use_double ? "f64" : "f32"},
               {"checkpoint_interval", strcat_all(opt.train.checkpoint_interval)},
               {"channels", strcat_all(mcfg.in_channels)},
               {"base_channels", strcat_all(mcfg.base_channels)},
               {"local_blocks", strcat_all(mcfg.local_blocks)},
               {"global_blocks", strcat_all(mcfg.global_blocks)},
               {"ssm_state_size", strcat_all(mcfg.ssm_state_size)},
               {"mlp_expansion", strcat_all(mcfg.mlp_expansion)},
               {"scan_order", scan_order_name(mcfg.scan_order)}});

  TrainPaths paths{opt.out_dir, opt.resume};
  auto progress = [&](std::size_t iter, double lr, double loss) {
    if ((iter + 1) % 500 == 0)
      std::cerr << "iter " << iter + 1 << "/" << opt.train.total_iters << " lr=" << lr
                << " loss=" << loss << "\n";
  };
  if (opt.train.use_double) {
    auto res = run_training<double>(corpus, mcfg, opt.train, paths, {progress});
    std::cerr << "train: final checkpoint " << res.final_checkpoint << "\n";
  } else {
    auto res = run_training<float>(corpus, mcfg, opt.train, paths, {progress});
    std::cerr << "train: final checkpoint " << res.final_checkpoint << "\n";
  }
  return 0;
}

// --- fuse ---------------------------------------------------------------------

struct FuseOptions {
  std::string checkpoint, image_a, image_b, out_path;
};

inline int cmd_fuse(const FuseOptions& opt) {
  echo_config("fuse", {{"checkpoint", opt.checkpoint},
                       {"a", opt.image_a},
                       {"b", opt.image_b},
                       {"out", opt.out_path}});
  Image a = read_image(opt.image_a);
  Image b = read_image(opt.image_b);
  require_same_dims(a, b, "fuse");
  auto info = read_checkpoint_info(opt.checkpoint);
  auto t0 = std::chrono::steady_clock::now();
  Image fused;
  if (info.dtype == ScalarType::f64) {
    auto model = load_checkpoint<double>(opt.checkpoint);
    fused = fuse_images(model, a, b);
  } else {
    auto model = load_checkpoint<float>(opt.checkpoint);
    fused = fuse_images(model, a, b);
  }
  auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0);
  write_image(opt.out_path, fused);
  std::cerr << "fuse: " << opt.image_a << " + " << opt.image_b << " -> " << opt.out_path << " ("
            << ms.count() << " ms)\n";
  return 0;
}

// --- eval ---------------------------------------------------------------------

struct EvalOptions {
  std::string fused_dir, reference_dir, source_a_dir, source_b_dir, out_dir = ".";
  std::vector<std::string> metrics{"psnr", "ssim", "q_mi", "q_sf", "q_abf"};
};

inline nlohmann::json report_to_json(const MetricReport& rep) {
  nlohmann::json j;
  j["images"] = nlohmann::json::array();
  for (const auto& e : rep.entries) {
    nlohmann::json je;
    je["id"] = e.id;
    for (const auto& [k, v] : e.values)
      je["metrics"][k] = std::isinf(v) ? nlohmann::json(metric_value_str(v)) : nlohmann::json(v);
    for (const auto& [k, v] : e.failures) je["failures"][k] = v;
    j["images"].push_back(je);
  }
  for (const auto& [k, v] : rep.aggregate_means())
    j["aggregate"][k] = std::isinf(v) ? nlohmann::json(metric_value_str(v)) : nlohmann::json(v);
  return j;
}

inline int cmd_eval(const EvalOptions& opt) {
  echo_config("eval", {{"fused", opt.fused_dir},
                       {"reference", opt.reference_dir.empty() ? "(none)" : opt.reference_dir},
                       {"source_a", opt.source_a_dir.empty() ? "(none)" : opt.source_a_dir},
                       {"source_b", opt.source_b_dir.empty() ? "(none)" : opt.source_b_dir},
                       {"out", opt.out_dir},
                       {"metrics", [&] {
                          std::string s;
                          for (const auto& m : opt.metrics) s += (s.empty() ? "" : ",") + m;
                          return s;
                        }()}});
  bool need_ref = false, need_src = false;
  for (const auto& m : opt.metrics) {
    if (m == "psnr" || m == "ssim")
      need_ref = true;
    else if (m == "q_mi" || m == "q_abf")
      need_src = true;
    else if (m != "q_sf")
      throw usage_error(strcat_all("eval: unknown metric '", m, "'"));
  }
  if (need_ref && opt.reference_dir.empty())
    throw usage_error("eval: psnr/ssim require --reference");
  if (need_src && (opt.source_a_dir.empty() || opt.source_b_dir.empty()))
    throw usage_error("eval: q_mi/q_abf require --source-a and --source-b");

  auto fused = stem_map(opt.fused_dir);
  if (fused.empty()) throw data_error(strcat_all(opt.fused_dir, ": no PGM/PPM images"));
  std::map<std::string, std::string> refs, srca, srcb;
  if (need_ref) refs = stem_map(opt.reference_dir);
  if (need_src) {
    srca = stem_map(opt.source_a_dir);
    srcb = stem_map(opt.source_b_dir);
  }
  std::vector<std::string> unpaired;
  for (const auto& [stem, path] : fused) {
    if (need_ref && !refs.count(stem)) unpaired.push_back(stem + " (no reference)");
    if (need_src && (!srca.count(stem) || !srcb.count(stem)))
      unpaired.push_back(stem + " (no source pair)");
  }
  if (!unpaired.empty()) {
    std::string list;
    for (const auto& u : unpaired) list += "\n  " + u;
    throw data_error(strcat_all("eval: unpaired files:", list));
  }

  MetricReport rep;
  rep.metrics = opt.metrics;
  for (const auto& [stem, path] : fused) {
    MetricReport::Entry e;
    e.id = stem;
    Image f = read_image(path);
    Image ref, sa, sb;
    if (need_ref) ref = read_image(refs[stem]);
    if (need_src) {
      sa = read_image(srca[stem]);
      sb = read_image(srcb[stem]);
    }
    for (const auto& m : opt.metrics) {
      try {
        if (m == "psnr")
          e.values[m] = psnr(f, ref);
        else if (m == "ssim")
          e.values[m] = ssim(f, ref);
        else if (m == "q_mi")
          e.values[m] = q_mi(f, sa, sb);
        else if (m == "q_sf")
          e.values[m] = q_sf(f);
        else if (m == "q_abf")
          e.values[m] = q_abf(f, sa, sb);
      } catch (const Error& err) {
        e.failures[m] = err.what();
      }
    }
    rep.entries.push_back(std::move(e));
  }

  fs::create_directories(opt.out_dir);
  std::ofstream csv((fs::path(opt.out_dir) / "report.csv").string());
  write_report_csv(csv, rep);
  if (!csv) throw data_error("cannot write report.csv");
  std::ofstream js((fs::path(opt.out_dir) / "report.json").string());
  js << report_to_json(rep).dump(2) << "\n";
  if (!js) throw data_error("cannot write report.json");
  write_report_csv(std::cout, rep);
  return 0;
}

// --- selftest -------------------------------------------------------------------

inline int cmd_selftest() {
  auto results = run_selftest();
  std::size_t failed = 0;
  for (const auto& r : results) {
    std::cout << (r.pass ? "[ ok ] " : "[FAIL] ") << r.name << " -- " << r.detail << "\n";
    failed += r.pass ? 0 : 1;
  }
  std::cout << (failed == 0 ? "selftest: all checks passed\n"
                            : strcat_all("selftest: ", failed, " check(s) FAILED\n"));
  return failed == 0 ? 0 : 3;
}

}  // namespace ipsfuse
