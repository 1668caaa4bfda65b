#pragma once

// Dense-network numerics: flat parameter vectors with a shape manifest,
// MLP forward passes, reverse-mode gradients, the Adam optimizer, and the
// loss kernels (Huber, expectile, squared error) used by every trainer.
//
// Everything is 64-bit and allocation-explicit. A forward pass caches its
// activations in an MlpWorkspace; the backward pass consumes that cache and
// accumulates into a caller-owned gradient, optionally producing the input
// gradient so stacked networks can chain.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tabb/common.hpp"

namespace tabb {

enum class Activation { relu, tanh };

inline std::string to_string(Activation a) {
  return a == Activation::relu ? "relu" : "tanh";
}
inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation: " + s);
}

// Network shape. Hidden layers use `activation`; the output head is identity.
// An empty hidden list describes a single linear map, which trainable
// networks reject but test fixtures may use.
struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden;
  int output_dim = 0;
  Activation activation = Activation::relu;

  std::vector<int> widths() const {
    std::vector<int> w;
    w.reserve(hidden.size() + 2);
    w.push_back(input_dim);
    for (int h : hidden) w.push_back(h);
    w.push_back(output_dim);
    return w;
  }
  int layer_count() const { return static_cast<int>(hidden.size()) + 1; }

  bool operator==(const MlpSpec&) const = default;
};

inline void validate_spec(const MlpSpec& spec, bool require_hidden) {
  if (spec.input_dim < 1 || spec.output_dim < 1)
    throw std::invalid_argument("MlpSpec: input and output dims must be >= 1");
  for (int h : spec.hidden)
    if (h < 1) throw std::invalid_argument("MlpSpec: hidden widths must be >= 1");
  if (require_hidden && spec.hidden.empty())
    throw std::invalid_argument("MlpSpec: trainable network needs at least one hidden layer");
}

// Shape of one dense layer inside a flat parameter vector: a rows x cols
// weight matrix (row-major) followed by `bias` bias entries.
struct LayerShape {
  int layer = 0;
  int rows = 0;
  int cols = 0;
  int bias = 0;

  size_t weight_count() const { return static_cast<size_t>(rows) * cols; }
  size_t total() const { return weight_count() + static_cast<size_t>(bias); }
  bool operator==(const LayerShape&) const = default;
};

// Flat parameter storage plus the manifest describing how the values map
// onto layers. The manifest is fixed at construction; values mutate.
struct ParamVector {
  std::vector<double> values;
  std::vector<LayerShape> manifest;

  size_t size() const { return values.size(); }

  size_t layer_offset(int layer) const {
    size_t off = 0;
    for (int l = 0; l < layer; ++l) off += manifest[l].total();
    return off;
  }
};

inline std::vector<LayerShape> manifest_for(const MlpSpec& spec) {
  const auto w = spec.widths();
  std::vector<LayerShape> m;
  m.reserve(w.size() - 1);
  for (size_t l = 0; l + 1 < w.size(); ++l)
    m.push_back({static_cast<int>(l), w[l + 1], w[l], w[l + 1]});
  return m;
}

inline size_t param_count(const MlpSpec& spec) {
  size_t n = 0;
  for (const auto& s : manifest_for(spec)) n += s.total();
  return n;
}

inline ParamVector zero_params(const MlpSpec& spec) {
  ParamVector p;
  p.manifest = manifest_for(spec);
  p.values.assign(param_count(spec), 0.0);
  return p;
}

// Glorot-uniform weights, zero biases.
inline ParamVector init_params(const MlpSpec& spec, Rng& rng) {
  ParamVector p = zero_params(spec);
  size_t off = 0;
  for (const auto& s : p.manifest) {
    const double bound = std::sqrt(6.0 / (s.cols + s.rows));
    for (size_t i = 0; i < s.weight_count(); ++i)
      p.values[off + i] = rng.uniform(-bound, bound);
    off += s.total();
  }
  return p;
}

inline void check_params_match(const MlpSpec& spec, const ParamVector& params,
                               const char* who) {
  const auto expect = manifest_for(spec);
  if (params.manifest == expect && params.values.size() == param_count(spec)) return;
  for (size_t l = 0; l < expect.size(); ++l) {
    if (l >= params.manifest.size() || !(params.manifest[l] == expect[l]))
      throw std::invalid_argument(std::string(who) + ": parameter manifest mismatch at layer " +
                                  std::to_string(l));
  }
  throw std::invalid_argument(std::string(who) + ": parameter length " +
                              std::to_string(params.values.size()) + ", spec needs " +
                              std::to_string(param_count(spec)));
}

// Cached per-layer pre-activations and activations from one forward pass.
// act[0] is the input copy; act.back() is the network output.
struct MlpWorkspace {
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> act;
};

namespace detail {
inline double activate(Activation a, double x) {
  return a == Activation::relu ? (x > 0.0 ? x : 0.0) : std::tanh(x);
}
inline double activate_grad(Activation a, double pre, double post) {
  return a == Activation::relu ? (pre > 0.0 ? 1.0 : 0.0) : 1.0 - post * post;
}
}  // namespace detail

// Forward pass caching activations for a later backward pass.
inline void mlp_forward(const MlpSpec& spec, const ParamVector& params,
                        std::span<const double> input, MlpWorkspace& ws) {
  validate_spec(spec, /*require_hidden=*/false);
  check_params_match(spec, params, "mlp_forward");
  if (static_cast<int>(input.size()) != spec.input_dim)
    throw std::invalid_argument("mlp_forward: input length " + std::to_string(input.size()) +
                                " != input_dim " + std::to_string(spec.input_dim) +
                                " at layer 0");
  const int layers = spec.layer_count();
  ws.pre.resize(layers);
  ws.act.resize(layers + 1);
  ws.act[0].assign(input.begin(), input.end());

  size_t off = 0;
  for (int l = 0; l < layers; ++l) {
    const LayerShape& s = params.manifest[l];
    const double* w = params.values.data() + off;
    const double* b = w + s.weight_count();
    const std::vector<double>& in = ws.act[l];
    std::vector<double>& pre = ws.pre[l];
    pre.resize(s.rows);
    for (int r = 0; r < s.rows; ++r) {
      const double* wr = w + static_cast<size_t>(r) * s.cols;
      double acc = b[r];
      for (int c = 0; c < s.cols; ++c) acc += wr[c] * in[c];
      pre[r] = acc;
    }
    std::vector<double>& out = ws.act[l + 1];
    out.resize(s.rows);
    const bool last = l + 1 == layers;
    for (int r = 0; r < s.rows; ++r) {
      const double v = last ? pre[r] : detail::activate(spec.activation, pre[r]);
      if (!std::isfinite(v))
        throw std::runtime_error("mlp_forward: non-finite value at layer " + std::to_string(l));
      out[r] = v;
    }
    off += s.total();
  }
}

inline std::vector<double> mlp_apply(const MlpSpec& spec, const ParamVector& params,
                                     std::span<const double> input) {
  MlpWorkspace ws;
  mlp_forward(spec, params, input, ws);
  return ws.act.back();
}

// Reverse pass. `dout` is dL/d(output); gradients accumulate into
// `grad_accum` (same manifest as params). When `dinput` is non-null it
// receives dL/d(input) so encoder gradients can chain through a consumer.
inline void mlp_backward(const MlpSpec& spec, const ParamVector& params,
                         const MlpWorkspace& ws, std::span<const double> dout,
                         ParamVector& grad_accum, std::vector<double>* dinput = nullptr) {
  check_params_match(spec, grad_accum, "mlp_backward");
  if (static_cast<int>(dout.size()) != spec.output_dim)
    throw std::invalid_argument("mlp_backward: dout length != output_dim");
  const int layers = spec.layer_count();

  std::vector<double> delta(dout.begin(), dout.end());
  std::vector<double> prev;
  size_t off = params.values.size();
  for (int l = layers - 1; l >= 0; --l) {
    const LayerShape& s = params.manifest[l];
    off -= s.total();
    const double* w = params.values.data() + off;
    double* gw = grad_accum.values.data() + off;
    double* gb = gw + s.weight_count();
    const std::vector<double>& in = ws.act[l];

    // delta currently holds dL/d(act[l+1]); fold in the activation except
    // on the identity output head.
    if (l + 1 != layers) {
      for (int r = 0; r < s.rows; ++r)
        delta[r] *= detail::activate_grad(spec.activation, ws.pre[l][r], ws.act[l + 1][r]);
    }
    for (int r = 0; r < s.rows; ++r) {
      const double d = delta[r];
      if (!std::isfinite(d))
        throw std::runtime_error("mlp_backward: non-finite gradient at layer " + std::to_string(l));
      double* gwr = gw + static_cast<size_t>(r) * s.cols;
      for (int c = 0; c < s.cols; ++c) gwr[c] += d * in[c];
      gb[r] += d;
    }
    if (l > 0 || dinput != nullptr) {
      prev.assign(s.cols, 0.0);
      for (int r = 0; r < s.rows; ++r) {
        const double d = delta[r];
        const double* wr = w + static_cast<size_t>(r) * s.cols;
        for (int c = 0; c < s.cols; ++c) prev[c] += d * wr[c];
      }
      delta.swap(prev);
    }
  }
  if (dinput != nullptr) *dinput = delta;
}

// Loss head: computes the loss from the network output and fills dL/d(output).
using LossHead = std::function<double(std::span<const double> out, std::span<double> dout)>;

// Full-network gradient of a scalar loss over one forward pass.
inline double grad(const MlpSpec& spec, const ParamVector& params,
                   std::span<const double> input, const LossHead& loss_head,
                   ParamVector& grad_out) {
  MlpWorkspace ws;
  mlp_forward(spec, params, input, ws);
  std::vector<double> dout(spec.output_dim, 0.0);
  const double loss = loss_head(ws.act.back(), dout);
  mlp_backward(spec, params, ws, dout, grad_out);
  return loss;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline AdamState make_adam(size_t n, double lr) {
  AdamState s;
  s.m.assign(n, 0.0);
  s.v.assign(n, 0.0);
  s.lr = lr;
  return s;
}

// Standard bias-corrected Adam update. A non-finite gradient is rejected
// before any state mutation.
inline void adam_step(AdamState& state, ParamVector& params, const ParamVector& grad) {
  const size_t n = params.values.size();
  if (grad.values.size() != n || state.m.size() != n)
    throw std::invalid_argument("adam_step: length mismatch");
  if (!all_finite(grad.values))
    throw std::invalid_argument("adam_step: non-finite gradient rejected");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < n; ++i) {
    const double g = grad.values[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params.values[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

// ---------------------------------------------------------------------------
// Loss kernels

inline double huber(double u, double delta) {
  if (delta <= 0.0) throw std::invalid_argument("huber: delta must be positive");
  const double a = std::abs(u);
  return a <= delta ? 0.5 * u * u : delta * (a - 0.5 * delta);
}

inline double huber_grad(double u, double delta) {
  if (delta <= 0.0) throw std::invalid_argument("huber: delta must be positive");
  if (std::abs(u) <= delta) return u;
  return u > 0.0 ? delta : -delta;
}

inline double expectile_loss(double u, double tau) {
  if (!(tau > 0.0 && tau < 1.0))
    throw std::invalid_argument("expectile_loss: tau must be in (0,1)");
  const double w = u < 0.0 ? 1.0 - tau : tau;
  return w * u * u;
}

inline double expectile_grad(double u, double tau) {
  if (!(tau > 0.0 && tau < 1.0))
    throw std::invalid_argument("expectile_loss: tau must be in (0,1)");
  const double w = u < 0.0 ? 1.0 - tau : tau;
  return 2.0 * w * u;
}

// A trainable network bundled with its optimizer and a freeze flag.
// Applying a gradient to a frozen module throws; freezing is a contract,
// not a silent no-op.
struct MlpModule {
  MlpSpec spec;
  ParamVector params;
  AdamState opt;
  bool frozen = false;

  void apply_grad(const ParamVector& g) {
    if (frozen) throw std::logic_error("MlpModule: gradient applied to frozen module");
    adam_step(opt, params, g);
  }
};

inline MlpModule make_module(const MlpSpec& spec, double lr, Rng& rng,
                             bool require_hidden = true) {
  validate_spec(spec, require_hidden);
  MlpModule m;
  m.spec = spec;
  m.params = init_params(spec, rng);
  m.opt = make_adam(m.params.size(), lr);
  return m;
}

}  // namespace tabb
