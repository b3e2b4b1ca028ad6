#pragma once

// Versioned binary checkpoints.
//
//   magic "MVCKPT\0\0" | u32 version
//   str config snapshot (resolved key = value text)
//   u32 vocabulary size | str token...      (regular tokens, in id order)
//   u64 parameter count | { str name | matrix }...
//   u32 optimizer count | { str name | i64 steps | u64 n | { str param | matrix m | matrix v }... }...
//   u8 has_trainer   | [str phase | i64 epoch | i64 step | i64 rl_step | str rng state]
//
// str = u32 length + bytes; matrix = u64 rows + u64 cols + row-major f64.
// All integers and doubles are native little-endian.

#include "mvcodot/errors.hpp"
#include "mvcodot/nn.hpp"

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mvcodot::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

struct TrainerState {
  std::string phase = "pretrain";
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  std::int64_t rl_step = 0;
  std::string rng_state;

  bool operator==(const TrainerState&) const = default;
};

struct OptimizerState {
  std::int64_t steps = 0;
  std::map<std::string, nn::Adam::Moments> moments;
};

struct Checkpoint {
  std::string config_text;
  std::vector<std::string> vocabulary;
  std::map<std::string, Matrix> parameters;
  std::map<std::string, OptimizerState> optimizers;
  std::optional<TrainerState> trainer;
};

inline OptimizerState capture(const nn::Adam& a) { return {a.steps(), a.state()}; }

inline void apply(const OptimizerState& s, nn::Adam& a) {
  a.set_steps(s.steps);
  a.state() = s.moments;
}

namespace detail {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& p) : out_(p, std::ios::binary), path_(p) {
    if (!out_) throw CheckpointError("cannot write checkpoint " + p.string());
  }
  template <typename T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void matrix(const Matrix& m) {
    pod(static_cast<std::uint64_t>(m.rows()));
    pod(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) pod(m(i, j));
  }
  void raw(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  void finish() {
    out_.flush();
    if (!out_) throw CheckpointError("failed writing checkpoint " + path_.string());
  }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& p) : in_(p, std::ios::binary), path_(p) {
    if (!in_) throw CheckpointError("cannot open checkpoint " + p.string());
  }
  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) throw CheckpointError("truncated checkpoint " + path_.string());
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) throw CheckpointError("truncated checkpoint " + path_.string());
    return s;
  }
  Matrix matrix() {
    const auto r = pod<std::uint64_t>();
    const auto c = pod<std::uint64_t>();
    if (r > (1u << 24) || c > (1u << 24)) throw CheckpointError("corrupt matrix header in " + path_.string());
    Matrix m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = pod<double>();
    return m;
  }
  void raw(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    if (!in_) throw CheckpointError("truncated checkpoint " + path_.string());
  }

 private:
  std::ifstream in_;
  std::filesystem::path path_;
};

}  // namespace detail

inline void save(const Checkpoint& ck, const std::filesystem::path& path) {
  detail::Writer w(path);
  w.raw("MVCKPT\0\0", 8);
  w.pod(kVersion);
  w.str(ck.config_text);
  w.pod(static_cast<std::uint32_t>(ck.vocabulary.size()));
  for (const auto& t : ck.vocabulary) w.str(t);
  w.pod(static_cast<std::uint64_t>(ck.parameters.size()));
  for (const auto& [name, m] : ck.parameters) {
    w.str(name);
    w.matrix(m);
  }
  w.pod(static_cast<std::uint32_t>(ck.optimizers.size()));
  for (const auto& [opt_name, opt] : ck.optimizers) {
    w.str(opt_name);
    w.pod(opt.steps);
    w.pod(static_cast<std::uint64_t>(opt.moments.size()));
    for (const auto& [name, mo] : opt.moments) {
      w.str(name);
      w.matrix(mo.m);
      w.matrix(mo.v);
    }
  }
  w.pod(static_cast<std::uint8_t>(ck.trainer.has_value()));
  if (ck.trainer) {
    w.str(ck.trainer->phase);
    w.pod(ck.trainer->epoch);
    w.pod(ck.trainer->step);
    w.pod(ck.trainer->rl_step);
    w.str(ck.trainer->rng_state);
  }
  w.finish();
}

inline Checkpoint load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: " + path.string());
  detail::Reader r(path);
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, "MVCKPT\0\0", 8) != 0) throw CheckpointError("not a checkpoint: " + path.string());
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  }
  Checkpoint ck;
  ck.config_text = r.str();
  const auto nv = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < nv; ++i) ck.vocabulary.push_back(r.str());
  const auto np = r.pod<std::uint64_t>();
  for (std::uint64_t i = 0; i < np; ++i) {
    std::string name = r.str();
    ck.parameters[name] = r.matrix();
  }
  const auto no = r.pod<std::uint32_t>();
  for (std::uint32_t k = 0; k < no; ++k) {
    std::string opt_name = r.str();
    OptimizerState opt;
    opt.steps = r.pod<std::int64_t>();
    const auto n = r.pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string name = r.str();
      nn::Adam::Moments mo;
      mo.m = r.matrix();
      mo.v = r.matrix();
      opt.moments[name] = std::move(mo);
    }
    ck.optimizers[opt_name] = std::move(opt);
  }
  if (r.pod<std::uint8_t>()) {
    TrainerState t;
    t.phase = r.str();
    t.epoch = r.pod<std::int64_t>();
    t.step = r.pod<std::int64_t>();
    t.rl_step = r.pod<std::int64_t>();
    t.rng_state = r.str();
    ck.trainer = std::move(t);
  }
  return ck;
}

// Copies stored tensors into a parameter store with identical layout.
inline void restore_parameters(const Checkpoint& ck, nn::ParameterStore& params) {
  if (ck.parameters.size() != params.all().size()) {
    throw CheckpointError("checkpoint has " + std::to_string(ck.parameters.size()) + " tensors, model expects " +
                          std::to_string(params.all().size()));
  }
  for (auto& [name, p] : params.all()) {
    auto it = ck.parameters.find(name);
    if (it == ck.parameters.end()) throw CheckpointError("checkpoint lacks tensor " + name);
    if (it->second.rows() != p.rows() || it->second.cols() != p.cols()) {
      throw CheckpointError("shape mismatch for tensor " + name);
    }
    p.mutable_value() = it->second;
  }
}

inline std::map<std::string, Matrix> snapshot_parameters(const nn::ParameterStore& params) {
  std::map<std::string, Matrix> out;
  for (const auto& [name, p] : params.all()) out[name] = p.value();
  return out;
}

}  // namespace mvcodot::checkpoint
