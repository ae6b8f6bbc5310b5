#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ipsfuse/image.hpp"
#include "ipsfuse/rng.hpp"
#include "ipsfuse/shuffle.hpp"
#include "ipsfuse/ssm.hpp"
#include "ipsfuse/tensor.hpp"

namespace ipsfuse {

enum class ScanOrder { row_major, bidirectional_row_major };

inline const char* scan_order_name(ScanOrder s) {
  return s == ScanOrder::row_major ? "row_major" : "bidirectional_row_major";
}

inline ScanOrder scan_order_from_name(const std::string& s) {
  if (s == "row_major") return ScanOrder::row_major;
  if (s == "bidirectional_row_major") return ScanOrder::bidirectional_row_major;
  throw data_error(strcat_all("unknown scan order '", s, "'"));
}

// Network topology. The trunk runs at 2*base_channels; the global branch
// projects tokens to 2*base_channels*mlp_expansion inner channels.
struct ModelConfig {
  std::size_t base_channels = 16;
  std::size_t local_blocks = 3;
  std::size_t global_blocks = 4;  // reduced desk default; full-scale setting is 12
  std::size_t ssm_state_size = 8;
  std::size_t mlp_expansion = 2;
  std::size_t conv_kernel = 3;
  std::size_t in_channels = 1;
  ScanOrder scan_order = ScanOrder::bidirectional_row_major;

  void validate() const {
    if (base_channels < 4) throw data_error("model: base_channels must be >= 4");
    if (local_blocks < 1 || global_blocks < 1) throw data_error("model: blocks must be >= 1");
    if (ssm_state_size < 1) throw data_error("model: ssm_state_size must be >= 1");
    if (mlp_expansion < 1) throw data_error("model: mlp_expansion must be >= 1");
    if (conv_kernel % 2 == 0 || conv_kernel < 1) throw data_error("model: conv_kernel must be odd");
    if (in_channels != 1 && in_channels != 3)
      throw data_error("model: in_channels must be 1 or 3");
  }

  std::size_t trunk_channels() const { return 2 * base_channels; }
  std::size_t inner_channels() const { return trunk_channels() * mlp_expansion; }

  bool operator==(const ModelConfig&) const = default;
};

// Training schedule. The learning rate stays at base_lr for the first
// decay_start fraction of the run and then decays linearly to zero.
struct TrainConfig {
  std::size_t total_iters = 20000;
  std::size_t batch_size = 1;
  double base_lr = 1e-4;
  double decay_start = 0.5;
  std::size_t crop_size = 64;
  ShuffleConfig shuffle;
  std::size_t checkpoint_interval = 5000;
  std::uint64_t rng_seed = 0;
  bool use_double = false;  // gradient oracles need double; training defaults to single

  void validate() const {
    if (total_iters == 0) throw data_error("train: total_iters must be >= 1");
    if (batch_size != 1) throw data_error("train: only batch_size 1 is supported");
    if (!(decay_start > 0.0) || decay_start > 1.0)
      throw data_error(strcat_all("train: decay_start must be in (0,1], got ", decay_start));
    if (crop_size < 8) throw data_error("train: crop_size must be >= 8");
    if (!(base_lr > 0.0)) throw data_error("train: base_lr must be > 0");
    shuffle.validate();
  }
};

template <typename T>
struct ConvLayer {
  Tensor<T> w, b;
};

template <typename T>
struct ResBlockParams {
  ConvLayer<T> conv1, conv2;
};

template <typename T>
struct MambaBlockParams {
  Tensor<T> ln_gain, ln_offset;
  Tensor<T> in_x_w, in_x_b, in_z_w, in_z_b;
  Tensor<T> conv_w, conv_b;
  Tensor<T> dt_w, dt_b;
  Tensor<T> b_w, c_w;
  Tensor<T> a_log;  // A = -exp(a_log) keeps every diagonal entry negative
  Tensor<T> skip;
  Tensor<T> out_w, out_b;
};

template <typename T>
struct Model {
  ModelConfig cfg;
  ConvLayer<T> conv_in;
  ResBlockParams<T> shallow;
  std::vector<ResBlockParams<T>> local;
  std::vector<MambaBlockParams<T>> global;
  ConvLayer<T> head1, head2;

  // flat registry in registration order; backs checkpoints and the optimizer
  std::vector<std::pair<std::string, Tensor<T>>> params;

  mutable std::size_t last_scan_tokens = 0;  // instrumentation: tokens per scan

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : params) t.zero_grad();
  }
};

namespace detail {

template <typename T>
Tensor<T> new_param(Model<T>& m, const std::string& name, Shape shape, Rng& rng, double bound) {
  std::vector<T> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<T>(rng.uniform(-bound, bound));
  Tensor<T> t = Tensor<T>::from_data(std::move(shape), std::move(data), true);
  m.params.emplace_back(name, t);
  return t;
}

template <typename T>
Tensor<T> const_param(Model<T>& m, const std::string& name, Shape shape, std::vector<T> data) {
  Tensor<T> t = Tensor<T>::from_data(std::move(shape), std::move(data), true);
  m.params.emplace_back(name, t);
  return t;
}

template <typename T>
ConvLayer<T> new_conv(Model<T>& m, const std::string& name, std::size_t cout, std::size_t cin,
                      std::size_t k, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  ConvLayer<T> l;
  l.w = new_param(m, name + ".w", {cout, cin, k, k}, rng, bound);
  l.b = new_param(m, name + ".b", {cout}, rng, bound);
  return l;
}

template <typename T>
ResBlockParams<T> new_resblock(Model<T>& m, const std::string& name, std::size_t ch,
                               std::size_t k, Rng& rng) {
  ResBlockParams<T> r;
  r.conv1 = new_conv(m, name + ".conv1", ch, ch, k, rng);
  r.conv2 = new_conv(m, name + ".conv2", ch, ch, k, rng);
  return r;
}

}  // namespace detail

template <typename T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  Rng rng = derive_rng(seed, 0x6d6f64656cULL);

  std::size_t C = cfg.base_channels, D = cfg.trunk_channels(), E = cfg.inner_channels();
  std::size_t N = cfg.ssm_state_size, k = cfg.conv_kernel;

  m.conv_in = detail::new_conv(m, "shallow.conv_in", C, cfg.in_channels, k, rng);
  m.shallow = detail::new_resblock(m, "shallow.res", C, k, rng);
  for (std::size_t i = 0; i < cfg.local_blocks; ++i)
    m.local.push_back(detail::new_resblock(m, strcat_all("local.", i), D, k, rng));

  double lin_d = 1.0 / std::sqrt(static_cast<double>(D));
  double lin_e = 1.0 / std::sqrt(static_cast<double>(E));
  for (std::size_t i = 0; i < cfg.global_blocks; ++i) {
    std::string p = strcat_all("global.", i);
    MambaBlockParams<T> g;
    g.ln_gain = detail::const_param(m, p + ".ln.gain", {D}, std::vector<T>(D, T(1)));
    g.ln_offset = detail::const_param(m, p + ".ln.offset", {D}, std::vector<T>(D, T(0)));
    g.in_x_w = detail::new_param(m, p + ".in_x.w", {D, E}, rng, lin_d);
    g.in_x_b = detail::new_param(m, p + ".in_x.b", {E}, rng, lin_d);
    g.in_z_w = detail::new_param(m, p + ".in_z.w", {D, E}, rng, lin_d);
    g.in_z_b = detail::new_param(m, p + ".in_z.b", {E}, rng, lin_d);
    double conv_bound = 1.0 / std::sqrt(3.0);
    g.conv_w = detail::new_param(m, p + ".conv1d.w", {E, 3}, rng, conv_bound);
    g.conv_b = detail::new_param(m, p + ".conv1d.b", {E}, rng, conv_bound);
    g.dt_w = detail::new_param(m, p + ".dt.w", {E, E}, rng, lin_e);
    // softplus(dt_b) ~ 0.01 so scans start in a stable regime
    double dt_bias = std::log(std::expm1(0.01));
    g.dt_b = detail::const_param(m, p + ".dt.b", {E}, std::vector<T>(E, static_cast<T>(dt_bias)));
    g.b_w = detail::new_param(m, p + ".b_proj.w", {E, N}, rng, lin_e);
    g.c_w = detail::new_param(m, p + ".c_proj.w", {E, N}, rng, lin_e);
    std::vector<T> alog(E * N);
    for (std::size_t e = 0; e < E; ++e)
      for (std::size_t n = 0; n < N; ++n)
        alog[e * N + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
    g.a_log = detail::const_param(m, p + ".a_log", {E, N}, std::move(alog));
    g.skip = detail::const_param(m, p + ".skip", {E}, std::vector<T>(E, T(1)));
    g.out_w = detail::new_param(m, p + ".out.w", {E, D}, rng, lin_e);
    g.out_b = detail::new_param(m, p + ".out.b", {D}, rng, lin_e);
    m.global.push_back(std::move(g));
  }

  m.head1 = detail::new_conv(m, "head.conv1", C, 2 * D, k, rng);
  m.head2 = detail::new_conv(m, "head.conv2", cfg.in_channels, C, k, rng);
  return m;
}

namespace detail {

template <typename T>
Tensor<T> resblock_forward(Tape<T>& tape, const ResBlockParams<T>& r, const Tensor<T>& x) {
  auto h = tape.silu(tape.conv2d(x, r.conv1.w, r.conv1.b));
  return tape.add(x, tape.conv2d(h, r.conv2.w, r.conv2.b));
}

template <typename T>
Tensor<T> mamba_scan(Tape<T>& tape, const MambaBlockParams<T>& g, const Tensor<T>& xc,
                     const Tensor<T>& dt, const Tensor<T>& a, const Tensor<T>& bs,
                     const Tensor<T>& cs, bool reversed) {
  if (!reversed) return selective_scan(tape, xc, dt, a, bs, cs, g.skip);
  auto y = selective_scan(tape, tape.reverse_rows(xc), tape.reverse_rows(dt), a,
                          tape.reverse_rows(bs), tape.reverse_rows(cs), g.skip);
  return tape.reverse_rows(y);
}

template <typename T>
Tensor<T> mamba_block_forward(Tape<T>& tape, const MambaBlockParams<T>& g, const Tensor<T>& q,
                              ScanOrder order) {
  auto u = tape.layernorm(q, g.ln_gain, g.ln_offset);
  auto xm = tape.add(tape.matmul(u, g.in_x_w), g.in_x_b);
  auto zm = tape.add(tape.matmul(u, g.in_z_w), g.in_z_b);
  auto xc = tape.silu(tape.conv1d_depthwise(xm, g.conv_w, g.conv_b));
  auto dt = tape.softplus(tape.add(tape.matmul(xc, g.dt_w), g.dt_b));
  auto bs = tape.matmul(xc, g.b_w);
  auto cs = tape.matmul(xc, g.c_w);
  auto a = tape.scale(tape.exp(g.a_log), T(-1));
  auto y = mamba_scan(tape, g, xc, dt, a, bs, cs, false);
  if (order == ScanOrder::bidirectional_row_major)
    y = tape.add(y, mamba_scan(tape, g, xc, dt, a, bs, cs, true));
  auto gated = tape.mul(y, tape.silu(zm));
  auto out = tape.add(tape.matmul(gated, g.out_w), g.out_b);
  return tape.add(q, out);
}

// shallow extraction -> concat; shared by forward() and the branch probes
template <typename T>
Tensor<T> stem_forward(Tape<T>& tape, const Model<T>& m, const Tensor<T>& in_f,
                       const Tensor<T>& in_d) {
  auto f = resblock_forward(tape, m.shallow, tape.conv2d(in_f, m.conv_in.w, m.conv_in.b));
  auto d = resblock_forward(tape, m.shallow, tape.conv2d(in_d, m.conv_in.w, m.conv_in.b));
  return tape.concat(f, d, 0);
}

template <typename T>
Tensor<T> global_tokens_forward(Tape<T>& tape, const Model<T>& m, const Tensor<T>& trunk) {
  std::size_t D = m.cfg.trunk_channels();
  std::size_t hw = trunk.shape()[1] * trunk.shape()[2];
  m.last_scan_tokens = hw;
  auto tokens = tape.transpose2d(tape.reshape(trunk, {D, hw}));  // row-major [HW x D]
  for (const auto& g : m.global)
    tokens = mamba_block_forward(tape, g, tokens, m.cfg.scan_order);
  return tokens;
}

}  // namespace detail

// Full fusion pass over a pair of planar [J,H,W] tensors; output in [0,1].
template <typename T>
Tensor<T> forward(Tape<T>& tape, const Model<T>& m, const Tensor<T>& in_f,
                  const Tensor<T>& in_d) {
  if (!in_f.defined() || !in_d.defined() || in_f.shape().size() != 3 ||
      in_f.shape() != in_d.shape())
    throw data_error(strcat_all("forward: inputs must be equal [J,H,W] tensors, got ",
                                in_f.defined() ? shape_str(in_f.shape()) : "undefined", " and ",
                                in_d.defined() ? shape_str(in_d.shape()) : "undefined"));
  if (in_f.shape()[0] != m.cfg.in_channels)
    throw data_error(strcat_all("forward: model expects ", m.cfg.in_channels,
                                " channels, input has ", in_f.shape()[0]));
  std::size_t H = in_f.shape()[1], W = in_f.shape()[2];
  std::size_t D = m.cfg.trunk_channels();

  auto trunk = detail::stem_forward(tape, m, in_f, in_d);

  auto local = trunk;
  for (const auto& r : m.local) local = detail::resblock_forward(tape, r, local);

  auto tokens = detail::global_tokens_forward(tape, m, trunk);
  auto global = tape.reshape(tape.transpose2d(tokens), {D, H, W});

  auto both = tape.concat(local, global, 0);
  auto h = tape.silu(tape.conv2d(both, m.head1.w, m.head1.b));
  return tape.sigmoid(tape.conv2d(h, m.head2.w, m.head2.b));
}

// Image-level convenience wrapper (inference).
template <typename T>
Image fuse_images(const Model<T>& m, const Image& a, const Image& b) {
  require_same_dims(a, b, "fuse");
  if (a.channels != m.cfg.in_channels)
    throw data_error(strcat_all("fuse: checkpoint expects ", m.cfg.in_channels,
                                " channels, images have ", a.channels));
  Tape<T> tape;
  auto out = forward(tape, m, image_to_tensor<T>(a), image_to_tensor<T>(b));
  return tensor_to_image(out);
}

// Pre-head token features of the global branch only; used by the
// receptive-field probe.
template <typename T>
Tensor<T> global_branch_features(Tape<T>& tape, const Model<T>& m, const Tensor<T>& in_f,
                                 const Tensor<T>& in_d) {
  auto trunk = detail::stem_forward(tape, m, in_f, in_d);
  return detail::global_tokens_forward(tape, m, trunk);
}

template <typename T>
Tensor<T> l1_loss(Tape<T>& tape, const Tensor<T>& pred, const Tensor<T>& target) {
  return tape.l1_loss(pred, target);
}

}  // namespace ipsfuse
