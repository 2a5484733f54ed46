#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ctcprompt/config.hpp"
#include "ctcprompt/layers.hpp"
#include "ctcprompt/tensor.hpp"

namespace ctcprompt {

constexpr char kCheckpointMagic[8] = {'C', 'T', 'C', 'P', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

struct OptimizerBlob {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;  // per parameter, model order
};

namespace detail {

inline void ck_write(std::ofstream& out, const void* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), std::streamsize(n));
}

inline void ck_read(std::ifstream& in, void* p, std::size_t n, const std::string& path) {
  in.read(reinterpret_cast<char*>(p), std::streamsize(n));
  if (!in) throw std::runtime_error("checkpoint: corrupt or truncated file " + path);
}

inline void ck_write_str(std::ofstream& out, const std::string& s) {
  const std::uint64_t n = s.size();
  ck_write(out, &n, 8);
  ck_write(out, s.data(), s.size());
}

inline std::string ck_read_str(std::ifstream& in, const std::string& path) {
  std::uint64_t n = 0;
  ck_read(in, &n, 8, path);
  if (n > (1ull << 32)) throw std::runtime_error("checkpoint: corrupt length in " + path);
  std::string s(n, '\0');
  ck_read(in, s.data(), n, path);
  return s;
}

}  // namespace detail

struct CheckpointMeta {
  Config config;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  bool has_optimizer = false;
};

inline void save_checkpoint(const std::string& path, const NamedParams& params,
                            const Config& config, std::uint64_t seed,
                            std::uint64_t step,
                            const OptimizerBlob* opt = nullptr) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path);
  detail::ck_write(out, kCheckpointMagic, 8);
  detail::ck_write(out, &kCheckpointVersion, 4);
  detail::ck_write_str(out, config.serialize());
  detail::ck_write(out, &seed, 8);
  detail::ck_write(out, &step, 8);
  const std::uint32_t n = std::uint32_t(params.size());
  detail::ck_write(out, &n, 4);
  for (const auto& [name, t] : params) {
    detail::ck_write_str(out, name);
    const std::uint32_t nd = std::uint32_t(t.shape().size());
    detail::ck_write(out, &nd, 4);
    for (std::size_t d : t.shape()) {
      const std::uint64_t dd = d;
      detail::ck_write(out, &dd, 8);
    }
    detail::ck_write(out, t.values().data(), t.size() * sizeof(double));
  }
  const std::uint8_t has_opt = opt ? 1 : 0;
  detail::ck_write(out, &has_opt, 1);
  if (opt) {
    detail::ck_write(out, &opt->step, 8);
    for (std::size_t i = 0; i < params.size(); ++i) {
      detail::ck_write(out, opt->m[i].data(), opt->m[i].size() * sizeof(double));
      detail::ck_write(out, opt->v[i].data(), opt->v[i].size() * sizeof(double));
    }
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

// Loads parameter values into an existing model's named parameters. Shapes
// and names must match the model built from the stored config.
inline CheckpointMeta load_checkpoint(const std::string& path, NamedParams& params,
                                      OptimizerBlob* opt = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  detail::ck_read(in, magic, 8, path);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  std::uint32_t version = 0;
  detail::ck_read(in, &version, 4, path);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: version mismatch in " + path + ": file has " +
                             std::to_string(version) + ", expected " +
                             std::to_string(kCheckpointVersion));
  CheckpointMeta meta;
  meta.config = Config::parse(detail::ck_read_str(in, path));
  detail::ck_read(in, &meta.seed, 8, path);
  detail::ck_read(in, &meta.step, 8, path);
  std::uint32_t n = 0;
  detail::ck_read(in, &n, 4, path);
  if (n != params.size())
    throw std::runtime_error("checkpoint: file has " + std::to_string(n) +
                             " parameters, model expects " +
                             std::to_string(params.size()));
  for (auto& [name, t] : params) {
    const std::string fname = detail::ck_read_str(in, path);
    if (fname != name)
      throw std::runtime_error("checkpoint: parameter order mismatch: file has '" +
                               fname + "', model expects '" + name + "'");
    std::uint32_t nd = 0;
    detail::ck_read(in, &nd, 4, path);
    Shape shape(nd);
    for (std::uint32_t i = 0; i < nd; ++i) {
      std::uint64_t d = 0;
      detail::ck_read(in, &d, 8, path);
      shape[i] = std::size_t(d);
    }
    if (shape != t.shape())
      throw std::runtime_error("checkpoint: shape mismatch for parameter '" + name +
                               "': file " + ctcprompt::detail::shape_str(shape) +
                               " vs model " + ctcprompt::detail::shape_str(t.shape()));
    detail::ck_read(in, t.values().data(), t.size() * sizeof(double), path);
  }
  std::uint8_t has_opt = 0;
  detail::ck_read(in, &has_opt, 1, path);
  meta.has_optimizer = has_opt != 0;
  if (has_opt && opt) {
    detail::ck_read(in, &opt->step, 8, path);
    opt->m.clear();
    opt->v.clear();
    for (auto& [name, t] : params) {
      (void)name;
      std::vector<double> m(t.size()), v(t.size());
      detail::ck_read(in, m.data(), m.size() * sizeof(double), path);
      detail::ck_read(in, v.data(), v.size() * sizeof(double), path);
      opt->m.push_back(std::move(m));
      opt->v.push_back(std::move(v));
    }
  }
  return meta;
}

}  // namespace ctcprompt
