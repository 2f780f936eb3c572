#pragma once

// Feed-forward encoder with hand-written reverse mode. A Network is one or
// more GeLU MLP towers; each tower owns a disjoint set of output columns.
// The shared-trunk layout has a single tower (the final layer rows are still
// per-column), the strict layout gives every head group its own tower.

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "spex/numerics.hpp"

namespace spex {

// ---------------------------------------------------------------------------
// Feature maps
// ---------------------------------------------------------------------------

enum class FeatureKind { raw, polynomial, fourier };

inline std::string to_string(FeatureKind k) {
  switch (k) {
    case FeatureKind::raw: return "raw";
    case FeatureKind::polynomial: return "polynomial";
    case FeatureKind::fourier: return "fourier";
  }
  return "?";
}

inline FeatureKind feature_kind_from_string(const std::string& s) {
  if (s == "raw") return FeatureKind::raw;
  if (s == "polynomial") return FeatureKind::polynomial;
  if (s == "fourier") return FeatureKind::fourier;
  throw ConfigError("unknown feature kind '" + s + "'");
}

struct FeatureMap {
  FeatureKind kind = FeatureKind::raw;
  int p = 1;
  int degree = 0;  // max monomial exponent per axis, or max frequency

  int width() const {
    switch (kind) {
      case FeatureKind::raw: return p;
      case FeatureKind::polynomial: {
        int w = 1;
        for (int j = 0; j < p; ++j) w *= degree + 1;
        return w;
      }
      case FeatureKind::fourier: return p * (degree + 1);
    }
    return 0;
  }

  /// Polynomial: every a_1^{i_1} ... a_p^{i_p} with 0 <= i_j <= degree, the
  /// first axis varying slowest. Fourier: cos(i pi a_j), i-major per axis.
  Matrix operator()(const Matrix& points) const {
    require(points.cols() == p, "FeatureMap: points have wrong dimension");
    const Eigen::Index m = points.rows();
    if (kind == FeatureKind::raw) return points;
    Matrix out(m, width());
    if (kind == FeatureKind::fourier) {
      for (Eigen::Index k = 0; k < m; ++k)
        for (int j = 0; j < p; ++j)
          for (int i = 0; i <= degree; ++i)
            out(k, j * (degree + 1) + i) = std::cos(i * std::numbers::pi * points(k, j));
      return out;
    }
    std::vector<double> powers(static_cast<std::size_t>(p * (degree + 1)));
    for (Eigen::Index k = 0; k < m; ++k) {
      for (int j = 0; j < p; ++j) {
        double v = 1.0;
        for (int i = 0; i <= degree; ++i) {
          powers[static_cast<std::size_t>(j * (degree + 1) + i)] = v;
          v *= points(k, j);
        }
      }
      const int w = width();
      for (int c = 0; c < w; ++c) {
        int rest = c;
        double v = 1.0;
        for (int j = p - 1; j >= 0; --j) {
          v *= powers[static_cast<std::size_t>(j * (degree + 1) + rest % (degree + 1))];
          rest /= degree + 1;
        }
        out(k, c) = v;
      }
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Activation
// ---------------------------------------------------------------------------

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
inline constexpr double kGeluA = 0.044715;

/// tanh approximation of GeLU.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x))); }

inline double gelu_derivative(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Dense {
  Matrix W;     // out x in
  RowVector b;  // out
};

/// Hidden layers use GeLU; the last layer is affine.
struct Mlp {
  std::vector<Dense> layers;
};

struct Network {
  FeatureMap features;
  std::vector<Mlp> towers;
  std::vector<std::vector<int>> heads;  // heads[t] = output columns produced by tower t
  int output_dim = 0;
  bool strict_heads = false;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : towers)
      for (const auto& l : t.layers) n += static_cast<std::size_t>(l.W.size() + l.b.size());
    return n;
  }
};

/// Gradient storage has the same shape as the parameters.
using Gradients = std::vector<Mlp>;

struct Architecture {
  int hidden_layers = 2;
  int width = 64;
  int output_dim = 1;
  /// Empty: one shared trunk. Otherwise disjoint groups covering 0..d-1.
  std::vector<std::vector<int>> head_partition;
  bool strict_heads = false;
};

inline std::vector<std::vector<int>> singleton_heads(int d) {
  std::vector<std::vector<int>> heads;
  for (int i = 0; i < d; ++i) heads.push_back({i});
  return heads;
}

namespace detail {

inline Mlp make_mlp(int in, int hidden_layers, int width, int out, Rng& rng) {
  Mlp mlp;
  int fan_in = in;
  for (int l = 0; l <= hidden_layers; ++l) {
    const int fan_out = l == hidden_layers ? out : width;
    const double bound = std::sqrt(6.0 / fan_in);
    mlp.layers.push_back({uniform_matrix(rng, fan_out, fan_in, -bound, bound), RowVector::Zero(fan_out)});
    fan_in = fan_out;
  }
  return mlp;
}

}  // namespace detail

/// He-uniform weights, zero biases, drawn from the `init` substream of rng.
inline Network make_network(const FeatureMap& fmap, const Architecture& arch, const Rng& rng) {
  require(arch.output_dim >= 1, "make_network: output dimension must be >= 1");
  require(arch.hidden_layers >= 0 && arch.width >= 1, "make_network: bad hidden layout");
  Network net{fmap, {}, {}, arch.output_dim, arch.strict_heads};
  Rng init = rng.substream(StreamTag::init);
  if (arch.head_partition.empty()) {
    require(!arch.strict_heads, "make_network: strict heads need a head partition");
    std::vector<int> all(static_cast<std::size_t>(arch.output_dim));
    for (int i = 0; i < arch.output_dim; ++i) all[static_cast<std::size_t>(i)] = i;
    net.heads = {all};
  } else {
    std::vector<int> seen(static_cast<std::size_t>(arch.output_dim), 0);
    for (const auto& g : arch.head_partition) {
      require(!g.empty(), "make_network: empty head group");
      for (int c : g) {
        require(c >= 0 && c < arch.output_dim, "make_network: head column out of range");
        require(seen[static_cast<std::size_t>(c)]++ == 0, "make_network: head groups overlap");
      }
    }
    for (int s : seen) require(s == 1, "make_network: head groups must cover every output");
    net.heads = arch.head_partition;
  }
  if (arch.strict_heads) {
    for (const auto& g : net.heads)
      net.towers.push_back(
          detail::make_mlp(fmap.width(), arch.hidden_layers, arch.width, static_cast<int>(g.size()), init));
  } else {
    // One trunk; the final layer row c produces output column c. head groups
    // then only record the partition (final rows are disjoint already).
    net.towers.push_back(detail::make_mlp(fmap.width(), arch.hidden_layers, arch.width, arch.output_dim, init));
  }
  return net;
}

/// Output columns of tower t, in the order the tower emits them.
inline const std::vector<int>& tower_columns(const Network& net, std::size_t t, std::vector<int>& scratch) {
  if (net.strict_heads) return net.heads[t];
  scratch.resize(static_cast<std::size_t>(net.output_dim));
  for (int i = 0; i < net.output_dim; ++i) scratch[static_cast<std::size_t>(i)] = i;
  return scratch;
}

inline Gradients zero_gradients(const Network& net) {
  Gradients g;
  for (const auto& t : net.towers) {
    Mlp z;
    for (const auto& l : t.layers) z.layers.push_back({Matrix::Zero(l.W.rows(), l.W.cols()), RowVector::Zero(l.b.size())});
    g.push_back(std::move(z));
  }
  return g;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct Tape {
  Matrix features;
  // per tower, per layer: the layer input and GeLU'(pre-activation)
  std::vector<std::vector<Matrix>> inputs;
  std::vector<std::vector<Matrix>> slope;
  std::vector<bool> stopped;  // output columns whose gradient is blocked
  Eigen::Index batch = 0;

  /// Marks output columns as stop-gradient: they forward their value but
  /// send nothing back to the parameters.
  void stop_gradient(const std::vector<int>& columns) {
    for (int c : columns) {
      require(c >= 0 && static_cast<std::size_t>(c) < stopped.size(), "stop_gradient: column out of range");
      stopped[static_cast<std::size_t>(c)] = true;
    }
  }
};

inline std::pair<Matrix, Tape> forward(const Network& net, const Matrix& points) {
  Tape tape;
  tape.features = net.features(points);
  tape.batch = points.rows();
  tape.stopped.assign(static_cast<std::size_t>(net.output_dim), false);
  Matrix out(points.rows(), net.output_dim);
  std::vector<int> scratch;
  for (std::size_t t = 0; t < net.towers.size(); ++t) {
    const auto& layers = net.towers[t].layers;
    require(layers.front().W.cols() == tape.features.cols(), "forward: feature width does not match network");
    std::vector<Matrix> ins, slopes;
    Matrix x = tape.features;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      Matrix h = x * layers[l].W.transpose();
      h.rowwise() += layers[l].b;
      ins.push_back(std::move(x));
      if (l + 1 < layers.size()) {
        Matrix g(h.rows(), h.cols());
        x.resize(h.rows(), h.cols());
        for (Eigen::Index i = 0; i < h.size(); ++i) {
          const double v = h.data()[i];
          const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
          x.data()[i] = 0.5 * v * (1.0 + t);
          g.data()[i] = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        }
        slopes.push_back(std::move(g));
      } else {
        x = std::move(h);
      }
    }
    const auto& cols = tower_columns(net, t, scratch);
    for (std::size_t c = 0; c < cols.size(); ++c) out.col(cols[c]) = x.col(static_cast<Eigen::Index>(c));
    tape.inputs.push_back(std::move(ins));
    tape.slope.push_back(std::move(slopes));
  }
  return {std::move(out), std::move(tape)};
}

/// Outputs only, without recording a tape.
inline Matrix predict(const Network& net, const Matrix& points) {
  const Matrix features = net.features(points);
  Matrix out(points.rows(), net.output_dim);
  std::vector<int> scratch;
  for (std::size_t t = 0; t < net.towers.size(); ++t) {
    const auto& layers = net.towers[t].layers;
    require(layers.front().W.cols() == features.cols(), "predict: feature width does not match network");
    Matrix x = features;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      Matrix h = x * layers[l].W.transpose();
      h.rowwise() += layers[l].b;
      if (l + 1 < layers.size()) h = h.unaryExpr([](double v) { return gelu(v); });
      x = std::move(h);
    }
    const auto& cols = tower_columns(net, t, scratch);
    for (std::size_t c = 0; c < cols.size(); ++c) out.col(cols[c]) = x.col(static_cast<Eigen::Index>(c));
  }
  return out;
}

/// Exact reverse-mode gradient of sum(grad_out .* outputs) w.r.t. parameters.
inline Gradients backward(const Network& net, const Tape& tape, const Matrix& grad_out) {
  require(grad_out.rows() == tape.batch && grad_out.cols() == net.output_dim,
          "backward: gradient shape does not match the tape");
  Gradients grads = zero_gradients(net);
  std::vector<int> scratch;
  for (std::size_t t = 0; t < net.towers.size(); ++t) {
    const auto& layers = net.towers[t].layers;
    const auto& cols = tower_columns(net, t, scratch);
    Matrix delta(tape.batch, static_cast<Eigen::Index>(cols.size()));
    bool any = false;
    for (std::size_t c = 0; c < cols.size(); ++c) {
      if (tape.stopped[static_cast<std::size_t>(cols[c])]) {
        delta.col(static_cast<Eigen::Index>(c)).setZero();
      } else {
        delta.col(static_cast<Eigen::Index>(c)) = grad_out.col(cols[c]);
        any = true;
      }
    }
    if (!any) continue;
    for (std::size_t l = layers.size(); l-- > 0;) {
      const Matrix& x = tape.inputs[t][l];
      grads[t].layers[l].W.noalias() = delta.transpose() * x;
      grads[t].layers[l].b = delta.colwise().sum();
      if (l == 0) break;
      delta = (delta * layers[l].W).cwiseProduct(tape.slope[t][l - 1]);
    }
  }
  return grads;
}

inline void add_scaled(Gradients& acc, const Gradients& g, double scale = 1.0) {
  for (std::size_t t = 0; t < acc.size(); ++t)
    for (std::size_t l = 0; l < acc[t].layers.size(); ++l) {
      acc[t].layers[l].W += scale * g[t].layers[l].W;
      acc[t].layers[l].b += scale * g[t].layers[l].b;
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  Gradients m, v;
};

inline AdamState make_adam(const Network& net, double lr) {
  AdamState s;
  s.lr = lr;
  s.m = zero_gradients(net);
  s.v = zero_gradients(net);
  return s;
}

/// One bias-corrected Adam update. Throws NonFiniteGradient naming the first
/// offending layer before touching any parameter.
inline void adam_step(Network& net, const Gradients& grads, AdamState& state) {
  require(grads.size() == net.towers.size() && state.m.size() == net.towers.size(), "adam_step: shape mismatch");
  for (std::size_t t = 0; t < grads.size(); ++t) {
    require(grads[t].layers.size() == net.towers[t].layers.size(), "adam_step: shape mismatch");
    for (std::size_t l = 0; l < grads[t].layers.size(); ++l) {
      const auto& g = grads[t].layers[l];
      const auto& w = net.towers[t].layers[l];
      require(g.W.rows() == w.W.rows() && g.W.cols() == w.W.cols() && g.b.size() == w.b.size(),
              "adam_step: shape mismatch");
      if (!g.W.allFinite() || !g.b.allFinite())
        throw NonFiniteGradient("tower " + std::to_string(t) + " layer " + std::to_string(l));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  auto update = [&](auto& param, const auto& grad, auto& m, auto& v) {
    m = state.beta1 * m + (1.0 - state.beta1) * grad;
    v = state.beta2 * v + (1.0 - state.beta2) * grad.cwiseAbs2();
    param.array() -= state.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + state.eps);
  };
  for (std::size_t t = 0; t < grads.size(); ++t)
    for (std::size_t l = 0; l < grads[t].layers.size(); ++l) {
      auto& p = net.towers[t].layers[l];
      const auto& g = grads[t].layers[l];
      update(p.W, g.W, state.m[t].layers[l].W, state.v[t].layers[l].W);
      update(p.b, g.b, state.m[t].layers[l].b, state.v[t].layers[l].b);
    }
}

/// Visits every scalar parameter in declared order: tower, layer, W (row-major), b.
template <typename F>
void for_each_parameter(Network& net, F&& f) {
  for (auto& t : net.towers)
    for (auto& l : t.layers) {
      for (Eigen::Index i = 0; i < l.W.size(); ++i) f(l.W.data()[i]);
      for (Eigen::Index i = 0; i < l.b.size(); ++i) f(l.b.data()[i]);
    }
}

template <typename F>
void for_each_parameter(const Gradients& g, F&& f) {
  for (const auto& t : g)
    for (const auto& l : t.layers) {
      for (Eigen::Index i = 0; i < l.W.size(); ++i) f(l.W.data()[i]);
      for (Eigen::Index i = 0; i < l.b.size(); ++i) f(l.b.data()[i]);
    }
}

inline std::vector<double> flatten(const Gradients& g) {
  std::vector<double> out;
  for_each_parameter(g, [&](double v) { out.push_back(v); });
  return out;
}

}  // namespace spex
