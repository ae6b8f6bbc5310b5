#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ipsfuse/model.hpp"

namespace ipsfuse {

// Self-describing binary checkpoint, little-endian:
//   magic "IPSFCKPT", format version, scalar dtype,
//   ModelConfig, TrainConfig, completed-iteration counter, optimizer step,
//   then one record per parameter: name, shape, raw values and both
//   optimizer moment arrays in registration order.

inline constexpr char kCheckpointMagic[8] = {'I', 'P', 'S', 'F', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ScalarType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr ScalarType scalar_type_of() {
  return sizeof(T) == 4 ? ScalarType::f32 : ScalarType::f64;
}

namespace detail {

template <typename P>
void write_pod(std::ostream& out, const P& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(P));
}

template <typename P>
P read_pod(std::istream& in, const std::string& path) {
  P v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(P));
  if (!in) throw data_error(strcat_all(path, ": truncated checkpoint"));
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, const std::string& path) {
  auto len = read_pod<std::uint32_t>(in, path);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw data_error(strcat_all(path, ": truncated checkpoint"));
  return s;
}

inline void write_model_config(std::ostream& out, const ModelConfig& c) {
  write_pod(out, static_cast<std::uint64_t>(c.base_channels));
  write_pod(out, static_cast<std::uint64_t>(c.local_blocks));
  write_pod(out, static_cast<std::uint64_t>(c.global_blocks));
  write_pod(out, static_cast<std::uint64_t>(c.ssm_state_size));
  write_pod(out, static_cast<std::uint64_t>(c.mlp_expansion));
  write_pod(out, static_cast<std::uint64_t>(c.conv_kernel));
  write_pod(out, static_cast<std::uint64_t>(c.in_channels));
  write_pod(out, static_cast<std::uint8_t>(c.scan_order));
}

inline ModelConfig read_model_config(std::istream& in, const std::string& path) {
  ModelConfig c;
  c.base_channels = read_pod<std::uint64_t>(in, path);
  c.local_blocks = read_pod<std::uint64_t>(in, path);
  c.global_blocks = read_pod<std::uint64_t>(in, path);
  c.ssm_state_size = read_pod<std::uint64_t>(in, path);
  c.mlp_expansion = read_pod<std::uint64_t>(in, path);
  c.conv_kernel = read_pod<std::uint64_t>(in, path);
  c.in_channels = read_pod<std::uint64_t>(in, path);
  c.scan_order = static_cast<ScanOrder>(read_pod<std::uint8_t>(in, path));
  return c;
}

inline void write_train_config(std::ostream& out, const TrainConfig& c) {
  write_pod(out, static_cast<std::uint64_t>(c.total_iters));
  write_pod(out, static_cast<std::uint64_t>(c.batch_size));
  write_pod(out, c.base_lr);
  write_pod(out, c.decay_start);
  write_pod(out, static_cast<std::uint64_t>(c.crop_size));
  write_pod(out, static_cast<std::uint64_t>(c.checkpoint_interval));
  write_pod(out, c.rng_seed);
  write_pod(out, static_cast<std::uint8_t>(c.use_double ? 1 : 0));
  write_pod(out, c.shuffle.mask_zero_probability);
  write_pod(out, static_cast<std::uint8_t>(c.shuffle.filter_kind));
  write_pod(out, static_cast<std::int32_t>(c.shuffle.kernel_min));
  write_pod(out, static_cast<std::int32_t>(c.shuffle.kernel_max));
  write_pod(out, static_cast<std::uint8_t>(c.shuffle.swap_augment ? 1 : 0));
  write_pod(out, c.shuffle.rng_seed);
}

inline TrainConfig read_train_config(std::istream& in, const std::string& path) {
  TrainConfig c;
  c.total_iters = read_pod<std::uint64_t>(in, path);
  c.batch_size = read_pod<std::uint64_t>(in, path);
  c.base_lr = read_pod<double>(in, path);
  c.decay_start = read_pod<double>(in, path);
  c.crop_size = read_pod<std::uint64_t>(in, path);
  c.checkpoint_interval = read_pod<std::uint64_t>(in, path);
  c.rng_seed = read_pod<std::uint64_t>(in, path);
  c.use_double = read_pod<std::uint8_t>(in, path) != 0;
  c.shuffle.mask_zero_probability = read_pod<double>(in, path);
  c.shuffle.filter_kind = static_cast<FilterKind>(read_pod<std::uint8_t>(in, path));
  c.shuffle.kernel_min = read_pod<std::int32_t>(in, path);
  c.shuffle.kernel_max = read_pod<std::int32_t>(in, path);
  c.shuffle.swap_augment = read_pod<std::uint8_t>(in, path) != 0;
  c.shuffle.rng_seed = read_pod<std::uint64_t>(in, path);
  return c;
}

}  // namespace detail

struct CheckpointInfo {
  ScalarType dtype = ScalarType::f32;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t iters_done = 0;
  std::uint64_t opt_step = 0;
};

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, const TrainConfig& tc,
                     std::uint64_t iters_done, const std::vector<std::vector<T>>& m1,
                     const std::vector<std::vector<T>>& m2, std::uint64_t opt_step) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error(strcat_all(path, ": cannot open checkpoint for writing"));
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, static_cast<std::uint8_t>(scalar_type_of<T>()));
  detail::write_model_config(out, model.cfg);
  detail::write_train_config(out, tc);
  detail::write_pod(out, iters_done);
  detail::write_pod(out, opt_step);
  detail::write_pod(out, static_cast<std::uint32_t>(model.params.size()));
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const auto& [name, t] = model.params[i];
    detail::write_string(out, name);
    detail::write_pod(out, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) detail::write_pod(out, static_cast<std::uint64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.numel() * sizeof(T)));
    std::vector<T> zero;
    const std::vector<T>* mm1 = i < m1.size() && m1[i].size() == t.numel() ? &m1[i] : nullptr;
    const std::vector<T>* mm2 = i < m2.size() && m2[i].size() == t.numel() ? &m2[i] : nullptr;
    if (!mm1 || !mm2) zero.assign(t.numel(), T(0));
    if (!mm1) mm1 = &zero;
    if (!mm2) mm2 = &zero;
    out.write(reinterpret_cast<const char*>(mm1->data()),
              static_cast<std::streamsize>(mm1->size() * sizeof(T)));
    out.write(reinterpret_cast<const char*>(mm2->data()),
              static_cast<std::streamsize>(mm2->size() * sizeof(T)));
  }
  if (!out) throw data_error(strcat_all(path, ": checkpoint write failed"));
}

inline CheckpointInfo read_checkpoint_info(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error(strcat_all(path, ": cannot open checkpoint"));
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw data_error(strcat_all(path, ": not an ipsfuse checkpoint (bad magic)"));
  auto version = detail::read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw data_error(strcat_all(path, ": unsupported checkpoint version ", version));
  CheckpointInfo info;
  info.dtype = static_cast<ScalarType>(detail::read_pod<std::uint8_t>(in, path));
  info.model = detail::read_model_config(in, path);
  info.train = detail::read_train_config(in, path);
  info.iters_done = detail::read_pod<std::uint64_t>(in, path);
  info.opt_step = detail::read_pod<std::uint64_t>(in, path);
  return info;
}

// Rebuilds the model (and optionally optimizer moments) from a checkpoint.
template <typename T>
Model<T> load_checkpoint(const std::string& path, CheckpointInfo* info_out = nullptr,
                         std::vector<std::vector<T>>* m1_out = nullptr,
                         std::vector<std::vector<T>>* m2_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error(strcat_all(path, ": cannot open checkpoint"));
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw data_error(strcat_all(path, ": not an ipsfuse checkpoint (bad magic)"));
  auto version = detail::read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw data_error(strcat_all(path, ": unsupported checkpoint version ", version));
  CheckpointInfo info;
  info.dtype = static_cast<ScalarType>(detail::read_pod<std::uint8_t>(in, path));
  if (info.dtype != scalar_type_of<T>())
    throw data_error(strcat_all(path, ": checkpoint stores ",
                                info.dtype == ScalarType::f32 ? "f32" : "f64",
                                " values, requested the other precision"));
  info.model = detail::read_model_config(in, path);
  info.train = detail::read_train_config(in, path);
  info.iters_done = detail::read_pod<std::uint64_t>(in, path);
  info.opt_step = detail::read_pod<std::uint64_t>(in, path);

  Model<T> model = init_model<T>(info.model, 0);
  auto nparams = detail::read_pod<std::uint32_t>(in, path);
  if (nparams != model.params.size())
    throw data_error(strcat_all(path, ": checkpoint has ", nparams, " parameters, model needs ",
                                model.params.size()));
  if (m1_out) m1_out->assign(nparams, {});
  if (m2_out) m2_out->assign(nparams, {});
  for (std::size_t i = 0; i < nparams; ++i) {
    auto& [name, t] = model.params[i];
    std::string fname = detail::read_string(in, path);
    if (fname != name)
      throw data_error(strcat_all(path, ": parameter ", i, " is '", fname, "', expected '", name,
                                  "'"));
    auto ndim = detail::read_pod<std::uint32_t>(in, path);
    Shape shape(ndim);
    for (auto& d : shape) d = detail::read_pod<std::uint64_t>(in, path);
    if (shape != t.shape())
      throw data_error(strcat_all(path, ": parameter '", name, "' has shape ", shape_str(shape),
                                  ", expected ", shape_str(t.shape())));
    in.read(reinterpret_cast<char*>(t.data_mut().data()),
            static_cast<std::streamsize>(t.numel() * sizeof(T)));
    std::vector<T> mm1(t.numel()), mm2(t.numel());
    in.read(reinterpret_cast<char*>(mm1.data()),
            static_cast<std::streamsize>(mm1.size() * sizeof(T)));
    in.read(reinterpret_cast<char*>(mm2.data()),
            static_cast<std::streamsize>(mm2.size() * sizeof(T)));
    if (!in) throw data_error(strcat_all(path, ": truncated checkpoint"));
    if (m1_out) (*m1_out)[i] = std::move(mm1);
    if (m2_out) (*m2_out)[i] = std::move(mm2);
  }
  if (info_out) *info_out = info;
  return model;
}

}  // namespace ipsfuse
