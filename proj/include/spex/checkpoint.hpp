#pragma once

// Binary checkpoint, little-endian throughout:
//
//   "SPEX1"  u32 version
//   u64 len, config text
//   u32 feature kind, u32 p, u32 degree, u32 output_dim, u32 strict_heads
//   u32 n_heads, per head: u32 size, u32 columns...
//   u32 n_towers, per tower: u32 n_layers, per layer: u32 rows, u32 cols, W (row-major f64), b (f64)
//   u64 steps_done
//   sections, each introduced by a 4-byte tag: "ADAM", "RRTF"; closed by "END0"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>

#include "spex/nn.hpp"
#include "spex/rayleigh_ritz.hpp"

namespace spex {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[5] = {'S', 'P', 'E', 'X', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string config;
  Network net;
  std::uint64_t steps_done = 0;
  std::optional<AdamState> adam;
  std::optional<RRTransform> rr;
};

namespace detail {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }
  void tag(const char (&t)[5]) { bytes(t, 4); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void matrix(const Matrix& m) {
    u32(static_cast<std::uint32_t>(m.rows()));
    u32(static_cast<std::uint32_t>(m.cols()));
    bytes(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  }
  void vec(const Eigen::Ref<const Eigen::VectorXd>& v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) f64(v[i]);
  }
  std::string take() { return out_.str(); }

 private:
  std::ostringstream out_;
};

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  void bytes(void* p, std::size_t n) {
    if (n > data_.size() - pos_) throw FormatError("checkpoint: truncated file");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, sizeof v);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, sizeof v);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, sizeof v);
    return v;
  }
  std::string tag() {
    std::string t(4, '\0');
    bytes(t.data(), 4);
    return t;
  }
  std::string str() {
    const std::uint64_t n = u64();
    if (n > data_.size() - pos_) throw FormatError("checkpoint: truncated string");
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Matrix matrix() {
    const std::uint32_t r = u32(), c = u32();
    if (static_cast<std::uint64_t>(r) * c * sizeof(double) > data_.size() - pos_) throw FormatError("checkpoint: truncated matrix");
    Matrix m(r, c);
    bytes(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
    return m;
  }
  Vector vec() {
    const std::uint32_t n = u32();
    if (static_cast<std::uint64_t>(n) * sizeof(double) > data_.size() - pos_) throw FormatError("checkpoint: truncated vector");
    Vector v(n);
    for (std::uint32_t i = 0; i < n; ++i) v[i] = f64();
    return v;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::size_t pos_ = 0;
};

inline void write_mlps(Writer& w, const std::vector<Mlp>& towers) {
  w.u32(static_cast<std::uint32_t>(towers.size()));
  for (const auto& t : towers) {
    w.u32(static_cast<std::uint32_t>(t.layers.size()));
    for (const auto& l : t.layers) {
      w.matrix(l.W);
      w.vec(l.b.transpose());
    }
  }
}

inline std::vector<Mlp> read_mlps(Reader& r) {
  std::vector<Mlp> towers(r.u32());
  for (auto& t : towers) {
    t.layers.resize(r.u32());
    for (auto& l : t.layers) {
      l.W = r.matrix();
      l.b = r.vec().transpose();
      if (l.b.size() != l.W.rows()) throw FormatError("checkpoint: bias width does not match its layer");
    }
  }
  return towers;
}

inline bool same_shape(const std::vector<Mlp>& a, const std::vector<Mlp>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t t = 0; t < a.size(); ++t) {
    if (a[t].layers.size() != b[t].layers.size()) return false;
    for (std::size_t l = 0; l < a[t].layers.size(); ++l)
      if (a[t].layers[l].W.rows() != b[t].layers[l].W.rows() || a[t].layers[l].W.cols() != b[t].layers[l].W.cols())
        return false;
  }
  return true;
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  detail::Writer w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.str(ck.config);
  const Network& n = ck.net;
  w.u32(static_cast<std::uint32_t>(n.features.kind));
  w.u32(static_cast<std::uint32_t>(n.features.p));
  w.u32(static_cast<std::uint32_t>(n.features.degree));
  w.u32(static_cast<std::uint32_t>(n.output_dim));
  w.u32(n.strict_heads ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(n.heads.size()));
  for (const auto& h : n.heads) {
    w.u32(static_cast<std::uint32_t>(h.size()));
    for (int c : h) w.u32(static_cast<std::uint32_t>(c));
  }
  detail::write_mlps(w, n.towers);
  w.u64(ck.steps_done);
  if (ck.adam) {
    w.tag("ADAM");
    w.f64(ck.adam->lr);
    w.f64(ck.adam->beta1);
    w.f64(ck.adam->beta2);
    w.f64(ck.adam->eps);
    w.u64(ck.adam->step);
    detail::write_mlps(w, ck.adam->m);
    detail::write_mlps(w, ck.adam->v);
  }
  if (ck.rr) {
    const RRTransform& t = *ck.rr;
    w.tag("RRTF");
    w.u32(static_cast<std::uint32_t>(t.mode));
    w.matrix(t.U);
    w.vec(t.eigenvalues);
    w.u32(t.mean ? 1 : 0);
    if (t.mean) w.vec(t.mean->transpose());
    w.u32(t.scale ? 1 : 0);
    if (t.scale) w.vec(t.scale->transpose());
  }
  w.tag("END0");
  return w.take();
}

inline Checkpoint deserialize(std::string data) {
  detail::Reader r(std::move(data));
  char magic[sizeof kCheckpointMagic];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config = r.str();
  Network& n = ck.net;
  const std::uint32_t kind = r.u32();
  if (kind > static_cast<std::uint32_t>(FeatureKind::fourier)) throw FormatError("checkpoint: unknown feature kind");
  n.features.kind = static_cast<FeatureKind>(kind);
  n.features.p = static_cast<int>(r.u32());
  n.features.degree = static_cast<int>(r.u32());
  n.output_dim = static_cast<int>(r.u32());
  n.strict_heads = r.u32() != 0;
  n.heads.resize(r.u32());
  for (auto& h : n.heads) {
    h.resize(r.u32());
    for (int& c : h) {
      c = static_cast<int>(r.u32());
      if (c < 0 || c >= n.output_dim) throw FormatError("checkpoint: head column out of range");
    }
  }
  n.towers = detail::read_mlps(r);
  if (n.towers.empty()) throw FormatError("checkpoint: network has no towers");
  ck.steps_done = r.u64();
  for (;;) {
    const std::string tag = r.tag();
    if (tag == "END0") break;
    if (tag == "ADAM") {
      AdamState a;
      a.lr = r.f64();
      a.beta1 = r.f64();
      a.beta2 = r.f64();
      a.eps = r.f64();
      a.step = r.u64();
      a.m = detail::read_mlps(r);
      a.v = detail::read_mlps(r);
      if (!detail::same_shape(a.m, n.towers) || !detail::same_shape(a.v, n.towers))
        throw FormatError("checkpoint: optimizer state does not match the network");
      ck.adam = std::move(a);
    } else if (tag == "RRTF") {
      RRTransform t;
      const std::uint32_t mode = r.u32();
      if (mode > static_cast<std::uint32_t>(RRMode::scl)) throw FormatError("checkpoint: unknown Rayleigh-Ritz mode");
      t.mode = static_cast<RRMode>(mode);
      t.U = r.matrix();
      t.eigenvalues = r.vec();
      if (r.u32()) t.mean = r.vec().transpose();
      if (r.u32()) t.scale = r.vec().transpose();
      if (t.U.rows() != n.output_dim || t.U.cols() != n.output_dim)
        throw FormatError("checkpoint: Rayleigh-Ritz transform does not match the output width");
      ck.rr = std::move(t);
    } else {
      throw FormatError("checkpoint: unknown section '" + tag + "'");
    }
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes after END0");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const std::string bytes = serialize(ck);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

}  // namespace spex
