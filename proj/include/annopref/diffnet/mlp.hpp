#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "annopref/core/error.hpp"
#include "annopref/core/matrix.hpp"
#include "annopref/core/rng.hpp"
#include "annopref/diffnet/dual.hpp"

namespace annopref::diffnet {

enum class Activation { linear, tanh, relu, leaky_relu };

inline constexpr double kLeakySlope = 0.01;

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::linear: return "linear";
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
  }
  return "linear";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "linear") return Activation::linear;
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "leaky_relu") return Activation::leaky_relu;
  throw InvalidInput("unknown activation '" + std::string(s) + "'");
}

struct MlpSpec {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_layers{300, 300, 300};
  Activation activation = Activation::leaky_relu;
  std::size_t output_dim = 1;
  Activation output_activation = Activation::linear;

  void validate() const {
    detail::require(input_dim >= 1, "MlpSpec: input_dim must be >= 1");
    detail::require(output_dim >= 1, "MlpSpec: output_dim must be >= 1");
    detail::require(!hidden_layers.empty(), "MlpSpec: at least one hidden layer required");
    for (auto w : hidden_layers) detail::require(w >= 1, "MlpSpec: layer widths must be >= 1");
    detail::require(output_activation == Activation::linear || output_activation == Activation::tanh,
                    "MlpSpec: output activation must be linear or tanh");
  }

  std::size_t layer_count() const { return hidden_layers.size() + 1; }
  std::size_t layer_in(std::size_t l) const { return l == 0 ? input_dim : hidden_layers[l - 1]; }
  std::size_t layer_out(std::size_t l) const {
    return l + 1 == layer_count() ? output_dim : hidden_layers[l];
  }
  Activation layer_activation(std::size_t l) const {
    return l + 1 == layer_count() ? output_activation : activation;
  }

  friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

/// Flat parameter storage. Layer l holds a row-major (out x in) weight block
/// followed by its bias vector; gradients and optimizer moments share this
/// layout so they can be handled as plain vectors.
class MlpParams {
 public:
  struct Layer {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t offset = 0;
    std::size_t bias_offset() const { return offset + in * out; }
  };

  MlpParams() = default;

  explicit MlpParams(MlpSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    std::size_t offset = 0;
    for (std::size_t l = 0; l < spec_.layer_count(); ++l) {
      Layer layer{spec_.layer_in(l), spec_.layer_out(l), offset};
      offset = layer.bias_offset() + layer.out;
      layers_.push_back(layer);
    }
    values_.assign(offset, 0.0);
  }

  const MlpSpec& spec() const { return spec_; }
  std::size_t size() const { return values_.size(); }
  std::size_t layer_count() const { return layers_.size(); }
  const Layer& layer(std::size_t l) const { return layers_[l]; }

  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  std::span<double> weights(std::size_t l) {
    return std::span<double>(values_).subspan(layers_[l].offset, layers_[l].in * layers_[l].out);
  }
  std::span<const double> weights(std::size_t l) const {
    return std::span<const double>(values_).subspan(layers_[l].offset, layers_[l].in * layers_[l].out);
  }
  std::span<double> bias(std::size_t l) {
    return std::span<double>(values_).subspan(layers_[l].bias_offset(), layers_[l].out);
  }
  std::span<const double> bias(std::size_t l) const {
    return std::span<const double>(values_).subspan(layers_[l].bias_offset(), layers_[l].out);
  }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const MlpParams& a, const MlpParams& b) {
    return a.spec_ == b.spec_ && a.values_ == b.values_;
  }

 private:
  MlpSpec spec_;
  std::vector<Layer> layers_;
  AlignedVector values_;
};

using Gradient = AlignedVector;

/// Fan-in scaled uniform initialization: U(-1/sqrt(in), 1/sqrt(in)) for
/// weights and biases.
inline MlpParams init_params(const MlpSpec& spec, std::uint64_t seed) {
  MlpParams p(spec);
  Rng rng(seed);
  for (std::size_t l = 0; l < p.layer_count(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(p.layer(l).in));
    for (double& w : p.weights(l)) w = rng.uniform(-bound, bound);
    for (double& b : p.bias(l)) b = rng.uniform(-bound, bound);
  }
  return p;
}

template <class S>
inline S activate(Activation a, const S& z) {
  using std::tanh;
  switch (a) {
    case Activation::linear: return z;
    case Activation::tanh: return tanh(z);
    case Activation::relu: return value_of(z) > 0.0 ? z : S(0.0);
    case Activation::leaky_relu: return value_of(z) > 0.0 ? z : kLeakySlope * z;
  }
  return z;
}

/// First derivative of the activation evaluated at z. For dual z the tangent
/// carries the second derivative, which the double-backward path relies on.
template <class S>
inline S activate_deriv(Activation a, const S& z) {
  using std::tanh;
  switch (a) {
    case Activation::linear: return S(1.0);
    case Activation::tanh: {
      const S t = tanh(z);
      return S(1.0) - t * t;
    }
    case Activation::relu: return S(value_of(z) > 0.0 ? 1.0 : 0.0);
    case Activation::leaky_relu: return S(value_of(z) > 0.0 ? 1.0 : kLeakySlope);
  }
  return S(1.0);
}

/// Cached forward pass: `post[0]` is the input, `pre[l]`/`post[l+1]` the
/// pre-/post-activation of layer l.
template <class S>
struct Tape {
  std::vector<std::vector<S>> pre;
  std::vector<std::vector<S>> post;
  std::vector<S> delta;
  std::vector<S> carry;

  std::span<const S> output() const { return post.back(); }
};

template <class S>
void forward_tape(const MlpParams& p, std::span<const S> x, Tape<S>& tape) {
  const std::size_t n_layers = p.layer_count();
  if (x.size() != p.spec().input_dim) {
    throw InvalidInput("forward: input has " + std::to_string(x.size()) + " entries, expected " +
                       std::to_string(p.spec().input_dim));
  }
  tape.pre.resize(n_layers);
  tape.post.resize(n_layers + 1);
  tape.post[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& shape = p.layer(l);
    const auto w = p.weights(l);
    const auto b = p.bias(l);
    const auto& in = tape.post[l];
    auto& z = tape.pre[l];
    auto& a = tape.post[l + 1];
    z.resize(shape.out);
    a.resize(shape.out);
    const Activation act = p.spec().layer_activation(l);
    for (std::size_t i = 0; i < shape.out; ++i) {
      const double* row = w.data() + i * shape.in;
      S acc(b[i]);
      for (std::size_t j = 0; j < shape.in; ++j) acc += row[j] * in[j];
      if (!is_finite(acc)) throw NumericError("non-finite pre-activation", l);
      z[i] = acc;
      a[i] = activate(act, acc);
    }
  }
}

/// Reverse pass over a tape. Accumulates (+=) parameter gradients into
/// `param_grad` and writes the input gradient into `input_grad`; either span
/// may be empty to skip that output.
template <class S>
void backward(const MlpParams& p, Tape<S>& tape, std::span<const S> upstream, std::span<S> param_grad,
              std::span<S> input_grad) {
  const std::size_t n_layers = p.layer_count();
  if (upstream.size() != p.spec().output_dim) throw InvalidInput("backward: upstream dimension mismatch");
  auto& delta = tape.delta;
  auto& carry = tape.carry;
  delta.assign(upstream.begin(), upstream.end());
  const bool want_params = !param_grad.empty();
  for (std::size_t li = n_layers; li-- > 0;) {
    const auto& shape = p.layer(li);
    const Activation act = p.spec().layer_activation(li);
    const auto& z = tape.pre[li];
    for (std::size_t i = 0; i < shape.out; ++i) {
      delta[i] = delta[i] * activate_deriv(act, z[i]);
      if (!is_finite(delta[i])) throw NumericError("non-finite gradient", li);
    }
    const auto& in = tape.post[li];
    if (want_params) {
      S* gw = param_grad.data() + shape.offset;
      S* gb = param_grad.data() + shape.bias_offset();
      for (std::size_t i = 0; i < shape.out; ++i) {
        const S di = delta[i];
        S* grow = gw + i * shape.in;
        for (std::size_t j = 0; j < shape.in; ++j) grow[j] += di * in[j];
        gb[i] += di;
      }
    }
    if (li == 0 && input_grad.empty()) break;
    const auto w = p.weights(li);
    carry.assign(shape.in, S(0.0));
    for (std::size_t i = 0; i < shape.out; ++i) {
      const double* row = w.data() + i * shape.in;
      const S di = delta[i];
      for (std::size_t j = 0; j < shape.in; ++j) carry[j] += row[j] * di;
    }
    std::swap(delta, carry);
  }
  if (!input_grad.empty()) {
    if (input_grad.size() != p.spec().input_dim) throw InvalidInput("backward: input_grad dimension mismatch");
    std::copy(delta.begin(), delta.begin() + static_cast<std::ptrdiff_t>(input_grad.size()),
              input_grad.begin());
  }
}

inline std::vector<double> forward(const MlpParams& p, std::span<const double> x) {
  Tape<double> tape;
  forward_tape<double>(p, x, tape);
  return tape.post.back();
}

/// Scalar-output convenience used for rewards and critics.
inline double forward_scalar(const MlpParams& p, std::span<const double> x, Tape<double>& tape) {
  forward_tape<double>(p, x, tape);
  return tape.post.back()[0];
}

struct GradRequest {
  std::span<const double> x;
  std::span<const double> upstream;
};

/// Exact reverse-mode parameter gradient summed over the batch.
inline Gradient param_grads(const MlpParams& p, std::span<const GradRequest> batch) {
  detail::require(!batch.empty(), "param_grads: batch must be nonempty");
  Gradient grad(p.size(), 0.0);
  Tape<double> tape;
  for (const auto& req : batch) {
    for (double u : req.upstream) {
      if (!std::isfinite(u)) throw NumericError("non-finite upstream gradient");
    }
    forward_tape<double>(p, req.x, tape);
    backward<double>(p, tape, req.upstream, grad, {});
  }
  return grad;
}

/// Gradient of output component `output_index` with respect to the input.
inline std::vector<double> input_grads(const MlpParams& p, std::span<const double> x, std::size_t output_index,
                                       Tape<double>& tape) {
  if (output_index >= p.spec().output_dim) throw InvalidInput("input_grads: output_index out of range");
  forward_tape<double>(p, x, tape);
  std::vector<double> up(p.spec().output_dim, 0.0);
  up[output_index] = 1.0;
  std::vector<double> gx(p.spec().input_dim);
  backward<double>(p, tape, up, {}, gx);
  return gx;
}

inline std::vector<double> input_grads(const MlpParams& p, std::span<const double> x, std::size_t output_index = 0) {
  Tape<double> tape;
  return input_grads(p, x, output_index, tape);
}

/// Accumulates parameter gradients of `v . grad_x f_k(x)` over many (x, v)
/// pairs, i.e. the backward pass through an input-gradient computation.
/// Implemented as reverse mode over forward-mode duals: seeding the input
/// with tangent v makes the tangent of the parameter gradient equal to the
/// mixed derivative d/dpsi (v . grad_x f).
class InputGradientVjp {
 public:
  explicit InputGradientVjp(const MlpParams& p, std::size_t output_index = 0)
      : params_(&p), output_index_(output_index), accum_(p.size()) {
    if (output_index >= p.spec().output_dim) throw InvalidInput("InputGradientVjp: output_index out of range");
    upstream_.assign(p.spec().output_dim, Dual<double>(0.0));
    upstream_[output_index_] = Dual<double>(1.0);
  }

  void add(std::span<const double> x, std::span<const double> v) {
    if (x.size() != v.size()) throw InvalidInput("InputGradientVjp: x and v dimension mismatch");
    input_.resize(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) input_[j] = Dual<double>(x[j], v[j]);
    forward_tape<Dual<double>>(*params_, input_, tape_);
    backward<Dual<double>>(*params_, tape_, upstream_, accum_, {});
  }

  /// Accumulated d/dpsi sum_i (v_i . grad_x f(x_i)).
  Gradient result() const {
    Gradient g(accum_.size());
    for (std::size_t i = 0; i < accum_.size(); ++i) g[i] = accum_[i].d;
    return g;
  }

  void add_to(std::span<double> grad, double scale = 1.0) const {
    for (std::size_t i = 0; i < accum_.size(); ++i) grad[i] += scale * accum_[i].d;
  }

 private:
  const MlpParams* params_;
  std::size_t output_index_;
  std::vector<Dual<double>> accum_;
  std::vector<Dual<double>> upstream_;
  std::vector<Dual<double>> input_;
  Tape<Dual<double>> tape_;
};

}  // namespace annopref::diffnet
