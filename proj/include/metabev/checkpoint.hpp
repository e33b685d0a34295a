#pragma once

#include "metabev/nn.hpp"

#include <cstring>
#include <fstream>

namespace metabev {

// structured load failure: what went wrong and where in the file
struct CheckpointError : std::runtime_error {
  std::uint64_t offset;
  CheckpointError(const std::string& what, std::uint64_t off)
      : std::runtime_error(what + " (at byte offset " + std::to_string(off) + ")"), offset(off) {}
};

// Decoupled-weight-decay Adam with a triangular cyclic step-size schedule.
template <typename S>
struct AdamW {
  double lr_min = 1e-4;
  double lr_max = 3e-3;
  int cycle_steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  long step_count = 0;
  std::vector<ArrayX<S>> m, v;  // aligned with ParamStore order

  void init(const ParamStore<S>& ps) {
    m.clear();
    v.clear();
    for (const auto& [name, p] : ps.entries()) {
      m.push_back(ArrayX<S>::Zero(p.size()));
      v.push_back(ArrayX<S>::Zero(p.size()));
    }
    step_count = 0;
  }

  // triangular wave between lr_min and lr_max, period 2*cycle_steps
  double lr_at(long step) const {
    if (cycle_steps <= 0) return lr_max;
    long phase = step % (2 * cycle_steps);
    double frac = static_cast<double>(phase < cycle_steps ? phase : 2 * cycle_steps - phase) /
                  cycle_steps;
    return lr_min + (lr_max - lr_min) * frac;
  }

  void step(ParamStore<S>& ps) {
    if (m.size() != ps.size()) throw std::logic_error("AdamW: optimizer/param table mismatch");
    ++step_count;
    double lr = lr_at(step_count - 1);
    double bc1 = 1 - std::pow(beta1, static_cast<double>(step_count));
    double bc2 = 1 - std::pow(beta2, static_cast<double>(step_count));
    for (size_t i = 0; i < ps.size(); ++i) {
      Tensor<S>& p = ps.entries()[i].second;
      const ArrayX<S>& g = p.grad();
      m[i] = static_cast<S>(beta1) * m[i] + static_cast<S>(1 - beta1) * g;
      v[i] = static_cast<S>(beta2) * v[i] + static_cast<S>(1 - beta2) * g * g;
      ArrayX<S> mhat = m[i] / static_cast<S>(bc1);
      ArrayX<S> vhat = v[i] / static_cast<S>(bc2);
      p.mutable_value() -= static_cast<S>(lr) *
                           (mhat / (vhat.sqrt() + static_cast<S>(eps)) +
                            static_cast<S>(weight_decay) * p.value());
    }
  }
};

namespace detail {

constexpr char kCkptMagic[8] = {'M', 'B', 'E', 'V', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& os) : os_(os) {}
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));  // little-endian host
  }
  void put_bytes(const void* p, size_t n) { os_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void put_string(const std::string& s) {
    put<std::uint16_t>(static_cast<std::uint16_t>(s.size()));
    put_bytes(s.data(), s.size());
  }

 private:
  std::ostream& os_;
};

class ByteReader {
 public:
  explicit ByteReader(std::istream& is) : is_(is) {}
  template <typename T>
  T get(const char* what) {
    T v;
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is_) throw CheckpointError(std::string("truncated checkpoint reading ") + what, offset_);
    offset_ += sizeof(T);
    return v;
  }
  void get_bytes(void* p, size_t n, const char* what) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!is_) throw CheckpointError(std::string("truncated checkpoint reading ") + what, offset_);
    offset_ += n;
  }
  std::string get_string(const char* what) {
    auto n = get<std::uint16_t>(what);
    std::string s(n, '\0');
    get_bytes(s.data(), n, what);
    return s;
  }
  std::uint64_t offset() const { return offset_; }

 private:
  std::istream& is_;
  std::uint64_t offset_ = 0;
};

}  // namespace detail

// Little-endian binary layout: magic, version, config hash, step counter,
// name-indexed parameter table, then optional optimizer state.
template <typename S>
void save_checkpoint(const std::string& path, const ParamStore<S>& ps, std::uint64_t config_hash,
                     long step, const AdamW<S>* opt = nullptr) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  detail::ByteWriter w(os);
  w.put_bytes(detail::kCkptMagic, sizeof(detail::kCkptMagic));
  w.put<std::uint32_t>(detail::kCkptVersion);
  w.put<std::uint64_t>(config_hash);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(step));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ps.size()));
  for (const auto& [name, p] : ps.entries()) {
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.shape().size()));
    for (int d : p.shape()) w.put<std::int32_t>(d);
    for (long i = 0; i < p.size(); ++i) w.put<double>(static_cast<double>(p.value()[i]));
  }
  w.put<std::uint8_t>(opt ? 1 : 0);
  if (opt) {
    w.put<std::uint64_t>(static_cast<std::uint64_t>(opt->step_count));
    for (size_t i = 0; i < opt->m.size(); ++i) {
      for (long j = 0; j < opt->m[i].size(); ++j) w.put<double>(static_cast<double>(opt->m[i][j]));
      for (long j = 0; j < opt->v[i].size(); ++j) w.put<double>(static_cast<double>(opt->v[i][j]));
    }
  }
  if (!os) throw std::runtime_error("short write to checkpoint: " + path);
}

// Loads into an existing, structurally matching ParamStore. A config-hash
// mismatch is refused unless force is set; any truncation raises a
// CheckpointError carrying the byte offset, leaving no partial state.
template <typename S>
long load_checkpoint(const std::string& path, ParamStore<S>& ps, std::uint64_t config_hash,
                     AdamW<S>* opt = nullptr, bool force = false) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  detail::ByteReader r(is);
  char magic[8];
  r.get_bytes(magic, 8, "magic");
  if (std::memcmp(magic, detail::kCkptMagic, 8) != 0)
    throw CheckpointError("bad magic, not a checkpoint", 0);
  auto version = r.get<std::uint32_t>("version");
  if (version != detail::kCkptVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version),
                          r.offset() - 4);
  auto stored_hash = r.get<std::uint64_t>("config hash");
  if (stored_hash != config_hash && !force)
    throw CheckpointError("config hash mismatch (use force to override)", r.offset() - 8);
  long step = static_cast<long>(r.get<std::uint64_t>("step"));
  auto count = r.get<std::uint32_t>("parameter count");
  if (count != ps.size())
    throw CheckpointError("parameter count mismatch: file has " + std::to_string(count),
                          r.offset() - 4);

  // stage everything before touching the store, so failures leave it intact
  std::vector<std::pair<std::string, ArrayX<S>>> staged;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string("parameter name");
    auto ndim = r.get<std::uint32_t>("rank");
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(r.get<std::int32_t>("extent"));
    if (!ps.has(name)) throw CheckpointError("unknown parameter '" + name + "'", r.offset());
    Tensor<S> p = ps.by_name(name);
    if (p.shape() != shape)
      throw CheckpointError("shape mismatch for '" + name + "': file has " + shape_str(shape),
                            r.offset());
    ArrayX<S> vals(p.size());
    for (long j = 0; j < vals.size(); ++j)
      vals[j] = static_cast<S>(r.get<double>("parameter values"));
    staged.emplace_back(std::move(name), std::move(vals));
  }
  auto has_opt = r.get<std::uint8_t>("optimizer flag");
  AdamW<S> staged_opt;
  if (has_opt) {
    staged_opt.step_count = static_cast<long>(r.get<std::uint64_t>("optimizer step"));
    for (const auto& [name, p] : ps.entries()) {
      ArrayX<S> m(p.size()), v(p.size());
      for (long j = 0; j < m.size(); ++j)
        m[j] = static_cast<S>(r.get<double>("optimizer moment"));
      for (long j = 0; j < v.size(); ++j)
        v[j] = static_cast<S>(r.get<double>("optimizer moment"));
      staged_opt.m.push_back(std::move(m));
      staged_opt.v.push_back(std::move(v));
    }
  }

  for (auto& [name, vals] : staged) ps.by_name(name).mutable_value() = vals;
  if (opt) {
    if (has_opt) {
      opt->m = std::move(staged_opt.m);
      opt->v = std::move(staged_opt.v);
      opt->step_count = staged_opt.step_count;
    } else {
      opt->init(ps);
    }
  }
  return step;
}

}  // namespace metabev
