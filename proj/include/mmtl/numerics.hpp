#pragma once

// Plain-array numeric utilities, parameter registry, checkpoint I/O and
// the finite-difference gradient checker.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmtl/rng.hpp"
#include "mmtl/tensor.hpp"

namespace mmtl {

/// Stable softmax on a plain vector (max subtraction).
template <class Real>
std::vector<Real> softmax(const std::vector<Real>& v) {
  if (v.empty()) throw std::invalid_argument("softmax: empty input");
  for (Real x : v)
    if (!std::isfinite(static_cast<double>(x)))
      throw std::invalid_argument("softmax: non-finite input");
  Real mx = *std::max_element(v.begin(), v.end());
  std::vector<Real> out(v.size());
  Real z = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    z += out[i];
  }
  for (auto& x : out) x /= z;
  return out;
}

/// gain * (x - mean) / sqrt(var + eps) + bias, biased (1/n) variance.
template <class Real>
std::vector<Real> layer_norm(const std::vector<Real>& x,
                             const std::vector<Real>& gain,
                             const std::vector<Real>& bias, Real eps) {
  if (x.size() != gain.size() || x.size() != bias.size())
    throw std::invalid_argument("layer_norm: length mismatch");
  if (!(eps > Real(0))) throw std::invalid_argument("layer_norm: eps <= 0");
  const std::size_t n = x.size();
  Real mu = 0;
  for (Real xi : x) mu += xi;
  mu /= static_cast<Real>(n);
  Real var = 0;
  for (Real xi : x) var += (xi - mu) * (xi - mu);
  var /= static_cast<Real>(n);
  const Real istd = Real(1) / std::sqrt(var + eps);
  std::vector<Real> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = gain[i] * (x[i] - mu) * istd + bias[i];
  return out;
}

/// Xavier/Glorot uniform init: U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
template <class Real>
void xavier_init(Tensor<Real>& t, int fan_out, int fan_in, Rng& rng) {
  if (fan_in <= 0 || fan_out <= 0)
    throw std::invalid_argument("xavier_init: fans must be positive");
  const double b = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& x : t.v) x = static_cast<Real>(rng.uniform(-b, b));
}

/// Global-norm gradient clipping. Returns the pre-clip norm.
template <class Real>
double clip_global_norm(const std::vector<Tensor<Real>*>& grads, double threshold) {
  if (!(threshold > 0)) throw std::invalid_argument("clip: threshold <= 0");
  double sq = 0;
  for (auto* t : grads)
    for (Real g : t->g) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > threshold) {
    const Real s = static_cast<Real>(threshold / norm);
    for (auto* t : grads)
      for (auto& g : t->g) g *= s;
  }
  return norm;
}

/// Named parameter registry. Ordered map so every iteration order (Adam,
/// clipping, checkpointing, gradient checks) is deterministic.
template <class Real>
class ParamStore {
public:
  ParamStore() = default;
  explicit ParamStore(std::uint64_t seed) : rng_seed(seed) {}

  Tensor<Real>& add(const std::string& name, std::vector<int> shape) {
    auto [it, fresh] = entries_.emplace(name, Tensor<Real>(std::move(shape)));
    if (!fresh) throw std::invalid_argument("ParamStore: duplicate name " + name);
    return it->second;
  }
  Tensor<Real>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw std::out_of_range("ParamStore: unknown name " + name);
    return it->second;
  }
  const Tensor<Real>& at(const std::string& name) const {
    return const_cast<ParamStore*>(this)->at(name);
  }
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& [k, t] : entries_) n += t.v.size();
    return n;
  }
  void zero_grad() {
    for (auto& [k, t] : entries_) t.zero_grad();
  }
  std::map<std::string, Tensor<Real>>& entries() { return entries_; }
  const std::map<std::string, Tensor<Real>>& entries() const { return entries_; }

  std::uint64_t rng_seed = 0;

private:
  std::map<std::string, Tensor<Real>> entries_;
};

// --- Checkpoint format -----------------------------------------------------
// magic "MMTL", version u32, entry count u32, then per entry:
// name length u32 + UTF-8 name, rank u32, dims u32 each, f32 little-endian
// payload. Values are stored as 32-bit floats regardless of Real.

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace detail {
inline void write_u32(std::ostream& os, std::uint32_t x) {
  os.write(reinterpret_cast<const char*>(&x), 4);
}
inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t x = 0;
  if (!is.read(reinterpret_cast<char*>(&x), 4))
    throw std::runtime_error("checkpoint: truncated header");
  return x;
}
}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class Real>
void save_checkpoint(const ParamStore<Real>& ps, std::ostream& os) {
  os.write("MMTL", 4);
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u32(os, static_cast<std::uint32_t>(ps.entries().size()));
  for (const auto& [name, t] : ps.entries()) {
    detail::write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::write_u32(os, static_cast<std::uint32_t>(d));
    std::vector<float> buf(t.v.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t.v[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

template <class Real>
void save_checkpoint(const ParamStore<Real>& ps, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot open " + path);
  save_checkpoint(ps, os);
}

template <class Real>
ParamStore<Real> load_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MMTL", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic");
  const std::uint32_t version = detail::read_u32(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(version));
  const std::uint32_t count = detail::read_u32(is);
  ParamStore<Real> ps;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t nlen = detail::read_u32(is);
    std::string name(nlen, '\0');
    if (!is.read(name.data(), nlen)) throw std::runtime_error("checkpoint: truncated name");
    const std::uint32_t rank = detail::read_u32(is);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::read_u32(is));
    Tensor<Real>& t = ps.add(name, shape);
    std::vector<float> buf(t.v.size());
    if (!is.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float))))
      throw std::runtime_error("checkpoint: truncated payload in entry " + name);
    for (std::size_t i = 0; i < buf.size(); ++i) t.v[i] = static_cast<Real>(buf[i]);
  }
  return ps;
}

template <class Real>
ParamStore<Real> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  return load_checkpoint<Real>(is);
}

// --- Gradient check ---------------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool pass = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool pass = true;
  double worst = 0.0;
};

/// Central finite differences against the analytic gradients.
///
/// model_fn(with_grad) must deterministically compute the loss; when
/// with_grad is true it must also accumulate gradients into the store
/// (the store is zeroed here first). Dropout must be disabled: the
/// caller asserts determinism, checked by evaluating the loss twice.
template <class Real>
GradCheckReport grad_check(const std::function<Real(bool)>& model_fn,
                           ParamStore<Real>& params, double eps, double tol) {
  if (!(eps > 0) || !(tol > 0))
    throw std::invalid_argument("grad_check: eps and tol must be positive");
  const Real l0 = model_fn(false);
  const Real l1 = model_fn(false);
  if (l0 != l1)
    throw std::invalid_argument(
        "grad_check: model_fn is not deterministic (is dropout enabled?)");

  params.zero_grad();
  (void)model_fn(true);

  GradCheckReport report;
  for (auto& [name, t] : params.entries()) {
    GradCheckEntry entry;
    entry.name = name;
    for (std::size_t i = 0; i < t.v.size(); ++i) {
      const Real orig = t.v[i];
      t.v[i] = orig + static_cast<Real>(eps);
      const double lp = static_cast<double>(model_fn(false));
      t.v[i] = orig - static_cast<Real>(eps);
      const double lm = static_cast<double>(model_fn(false));
      t.v[i] = orig;
      const double fd = (lp - lm) / (2.0 * eps);
      const double an = static_cast<double>(t.g[i]);
      const double abs_err = std::abs(fd - an);
      const double rel = abs_err / std::max(std::abs(fd) + std::abs(an), 1e-4);
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
    }
    entry.pass = entry.max_rel_error < tol;
    report.worst = std::max(report.worst, entry.max_rel_error);
    report.pass = report.pass && entry.pass;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace mmtl
