// ipsfuse: self-supervised multi-focus image fusion toolkit.
//
// Subcommands: synthesize, train, fuse, eval, selftest. Every subcommand with
// --seed is bit-reproducible; logs go to stderr, data to files/stdout.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "ipsfuse/cli.hpp"
#include "ipsfuse/parallel.hpp"

namespace {

void add_shuffle_flags(CLI::App* app, ipsfuse::ShuffleConfig& cfg) {
  app->add_option("--p", cfg.mask_zero_probability, "mask zero probability")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  app->add_option_function<std::string>(
         "--filter", [&cfg](const std::string& s) { cfg.filter_kind = ipsfuse::filter_from_name(s); },
         "low-pass filter kind")
      ->check(CLI::IsMember({"mean", "gaussian", "median"}))
      ->default_str("mean");
  app->add_option("--kmin", cfg.kernel_min, "smallest filter kernel (odd)")->capture_default_str();
  app->add_option("--kmax", cfg.kernel_max, "largest filter kernel (odd)")->capture_default_str();
}

void add_model_flags(CLI::App* app, ipsfuse::ModelConfig& cfg) {
  app->add_option("--base-channels", cfg.base_channels)->capture_default_str();
  app->add_option("--local-blocks", cfg.local_blocks)->capture_default_str();
  app->add_option("--global-blocks", cfg.global_blocks)->capture_default_str();
  app->add_option("--state-size", cfg.ssm_state_size)->capture_default_str();
  app->add_option("--expansion", cfg.mlp_expansion)->capture_default_str();
  app->add_option_function<std::string>(
         "--scan-order",
         [&cfg](const std::string& s) { cfg.scan_order = ipsfuse::scan_order_from_name(s); },
         "global-branch scan order")
      ->check(CLI::IsMember({"row_major", "bidirectional_row_major"}))
      ->default_str("bidirectional_row_major");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ipsfuse: multi-focus image fusion without multi-focus training data"};
  app.require_subcommand(1);
  app.set_config("--config", "", "flat key=value configuration file; flags override it");

  int threads = 0;
  app.add_option("--threads", threads, "worker thread cap (default: IPSFUSE_THREADS or all cores)");

  ipsfuse::SynthesizeOptions syn;
  auto* syn_cmd = app.add_subcommand("synthesize", "write shuffled focus/defocus pairs + masks");
  syn_cmd->add_option("--input", syn.input_dir, "directory of PGM/PPM sources")->required();
  syn_cmd->add_option("--out", syn.out_dir, "output directory")->required();
  syn_cmd->add_option("--seed", syn.shuffle.rng_seed, "rng seed")->capture_default_str();
  add_shuffle_flags(syn_cmd, syn.shuffle);

  ipsfuse::TrainOptions tr;
  auto* tr_cmd = app.add_subcommand("train", "run the shuffle-and-reconstruct training loop");
  tr_cmd->add_option("--corpus", tr.corpus_dir, "directory of training images")->required();
  tr_cmd->add_option("--out", tr.out_dir, "output directory for checkpoints + loss log")
      ->required();
  tr_cmd->add_option("--resume", tr.resume, "checkpoint to continue from");
  tr_cmd->add_option("--iters", tr.train.total_iters)->capture_default_str();
  tr_cmd->add_option("--lr", tr.train.base_lr)->capture_default_str();
  tr_cmd->add_option("--decay-start", tr.train.decay_start)->capture_default_str();
  tr_cmd->add_option("--crop", tr.train.crop_size)->capture_default_str();
  tr_cmd->add_option("--checkpoint-interval", tr.train.checkpoint_interval)
      ->capture_default_str();
  tr_cmd->add_option("--seed", tr.train.rng_seed)->capture_default_str();
  tr_cmd->add_flag("--f64", tr.train.use_double, "train in double precision");
  add_shuffle_flags(tr_cmd, tr.train.shuffle);
  add_model_flags(tr_cmd, tr.model);

  ipsfuse::FuseOptions fu;
  auto* fu_cmd = app.add_subcommand("fuse", "fuse two source images with a trained checkpoint");
  fu_cmd->add_option("--checkpoint", fu.checkpoint)->required();
  fu_cmd->add_option("--out", fu.out_path)->required();
  fu_cmd->add_option("image_a", fu.image_a)->required();
  fu_cmd->add_option("image_b", fu.image_b)->required();

  ipsfuse::EvalOptions ev;
  std::string metric_list;
  auto* ev_cmd = app.add_subcommand("eval", "compute fusion quality metrics over a directory");
  ev_cmd->add_option("--fused", ev.fused_dir)->required();
  ev_cmd->add_option("--reference", ev.reference_dir, "all-in-focus references (psnr/ssim)");
  ev_cmd->add_option("--source-a", ev.source_a_dir, "first sources (q_mi/q_abf)");
  ev_cmd->add_option("--source-b", ev.source_b_dir, "second sources (q_mi/q_abf)");
  ev_cmd->add_option("--out", ev.out_dir, "report directory")->capture_default_str();
  ev_cmd->add_option("--metrics", metric_list, "comma-separated metric list")
      ->default_str("psnr,ssim,q_mi,q_sf,q_abf");

  auto* st_cmd = app.add_subcommand("selftest", "run the fast invariant suite");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (threads > 0) ipsfuse::ThreadPool::instance().set_threads(threads);
    if (*syn_cmd) return ipsfuse::cmd_synthesize(syn);
    if (*tr_cmd) {
      tr.train.shuffle.rng_seed = tr.train.rng_seed;
      return ipsfuse::cmd_train(tr);
    }
    if (*fu_cmd) return ipsfuse::cmd_fuse(fu);
    if (*ev_cmd) {
      if (!metric_list.empty()) {
        ev.metrics.clear();
        std::string cur;
        for (char c : metric_list + ",") {
          if (c == ',') {
            if (!cur.empty()) ev.metrics.push_back(cur);
            cur.clear();
          } else {
            cur.push_back(c);
          }
        }
      }
      return ipsfuse::cmd_eval(ev);
    }
    if (*st_cmd) return ipsfuse::cmd_selftest();
  } catch (const ipsfuse::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
