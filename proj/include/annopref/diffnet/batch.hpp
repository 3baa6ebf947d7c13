#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "annopref/core/matrix.hpp"
#include "annopref/diffnet/mlp.hpp"

namespace annopref::diffnet {

using annopref::RowMatrix;
using ConstWeightMap = Eigen::Map<const RowMatrix>;
using WeightMap = Eigen::Map<RowMatrix>;

/// Batched forward cache; rows are samples.
struct BatchTape {
  std::vector<RowMatrix> pre;
  std::vector<RowMatrix> post;

  const RowMatrix& output() const { return post.back(); }
};

namespace detail {

inline void apply_activation(Activation a, const RowMatrix& z, RowMatrix& out) {
  switch (a) {
    case Activation::linear: out = z; break;
    case Activation::tanh: out = z.array().tanh().matrix(); break;
    case Activation::relu: out = z.array().max(0.0).matrix(); break;
    case Activation::leaky_relu:
      out = z.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
      break;
  }
}

inline void scale_by_activation_deriv(Activation a, const RowMatrix& z, RowMatrix& delta) {
  switch (a) {
    case Activation::linear: break;
    case Activation::tanh: delta.array() *= 1.0 - z.array().tanh().square(); break;
    case Activation::relu: delta.array() *= (z.array() > 0.0).cast<double>(); break;
    case Activation::leaky_relu:
      delta.array() *= z.unaryExpr([](double v) { return v > 0.0 ? 1.0 : kLeakySlope; }).array();
      break;
  }
}

// Elementwise second derivative of the activation.
inline RowMatrix activation_second_deriv(Activation a, const RowMatrix& z) {
  if (a == Activation::tanh) {
    const RowMatrix t = z.array().tanh().matrix();
    return (-2.0 * t.array() * (1.0 - t.array().square())).matrix();
  }
  return RowMatrix::Zero(z.rows(), z.cols());
}

inline RowMatrix activation_deriv(Activation a, const RowMatrix& z) {
  RowMatrix d = RowMatrix::Ones(z.rows(), z.cols());
  scale_by_activation_deriv(a, z, d);
  return d;
}

}  // namespace detail

/// Batched forward pass. Numerically equivalent to the per-sample path up to
/// summation order.
inline void forward_batch(const MlpParams& p, const RowMatrix& x, BatchTape& tape) {
  if (static_cast<std::size_t>(x.cols()) != p.spec().input_dim) {
    throw InvalidInput("forward_batch: input has wrong column count");
  }
  const std::size_t n_layers = p.layer_count();
  tape.pre.resize(n_layers);
  tape.post.resize(n_layers + 1);
  tape.post[0] = x;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& shape = p.layer(l);
    ConstWeightMap w(p.weights(l).data(), static_cast<Eigen::Index>(shape.out), static_cast<Eigen::Index>(shape.in));
    Eigen::Map<const Eigen::RowVectorXd> b(p.bias(l).data(), static_cast<Eigen::Index>(shape.out));
    auto& z = tape.pre[l];
    z.noalias() = tape.post[l] * w.transpose();
    z.rowwise() += b;
    if (!z.allFinite()) throw NumericError("non-finite pre-activation", l);
    detail::apply_activation(p.spec().layer_activation(l), z, tape.post[l + 1]);
  }
}

/// Batched reverse pass. Parameter gradients are summed over rows and added
/// into `grad` (skipped when empty); `dx`, when given, receives the per-row
/// input gradient.
inline void backward_batch(const MlpParams& p, const BatchTape& tape, const RowMatrix& upstream,
                           std::span<double> grad, RowMatrix* dx = nullptr) {
  const std::size_t n_layers = p.layer_count();
  RowMatrix delta = upstream;
  RowMatrix carry;
  for (std::size_t li = n_layers; li-- > 0;) {
    const auto& shape = p.layer(li);
    const auto rows = static_cast<Eigen::Index>(shape.out);
    const auto cols = static_cast<Eigen::Index>(shape.in);
    detail::scale_by_activation_deriv(p.spec().layer_activation(li), tape.pre[li], delta);
    if (!delta.allFinite()) throw NumericError("non-finite gradient", li);
    if (!grad.empty()) {
      WeightMap gw(grad.data() + shape.offset, rows, cols);
      Eigen::Map<Eigen::RowVectorXd> gb(grad.data() + shape.bias_offset(), rows);
      gw.noalias() += delta.transpose() * tape.post[li];
      gb += delta.colwise().sum();
    }
    if (li == 0 && dx == nullptr) break;
    ConstWeightMap w(p.weights(li).data(), rows, cols);
    carry.noalias() = delta * w;
    delta.swap(carry);
  }
  if (dx != nullptr) *dx = std::move(delta);
}

/// Per-row gradient of output `output_index` with respect to the input.
inline RowMatrix input_grads_batch(const MlpParams& p, const RowMatrix& x, std::size_t output_index = 0) {
  if (output_index >= p.spec().output_dim) throw InvalidInput("input_grads_batch: output_index out of range");
  BatchTape tape;
  forward_batch(p, x, tape);
  RowMatrix up = RowMatrix::Zero(x.rows(), static_cast<Eigen::Index>(p.spec().output_dim));
  up.col(static_cast<Eigen::Index>(output_index)).setOnes();
  RowMatrix dx;
  backward_batch(p, tape, up, {}, &dx);
  return dx;
}

/// Adds d/dpsi sum_i v_i . grad_x f_k(x_i) into `grad`: the batched
/// counterpart of InputGradientVjp. Forward pass carries the tangent along
/// v; the reverse pass runs over both primal and tangent.
inline void input_gradient_vjp_batch(const MlpParams& p, const RowMatrix& x, const RowMatrix& v,
                                     std::span<double> grad, std::size_t output_index = 0) {
  if (x.rows() != v.rows() || x.cols() != v.cols()) throw InvalidInput("input_gradient_vjp_batch: shape mismatch");
  if (static_cast<std::size_t>(x.cols()) != p.spec().input_dim) {
    throw InvalidInput("input_gradient_vjp_batch: input has wrong column count");
  }
  if (grad.size() != p.size()) throw InvalidInput("input_gradient_vjp_batch: gradient size mismatch");
  if (output_index >= p.spec().output_dim) throw InvalidInput("input_gradient_vjp_batch: output_index out of range");
  const std::size_t n_layers = p.layer_count();
  std::vector<RowMatrix> z(n_layers), zdot(n_layers), a(n_layers + 1), adot(n_layers + 1);
  a[0] = x;
  adot[0] = v;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const auto& shape = p.layer(l);
    ConstWeightMap w(p.weights(l).data(), static_cast<Eigen::Index>(shape.out), static_cast<Eigen::Index>(shape.in));
    Eigen::Map<const Eigen::RowVectorXd> b(p.bias(l).data(), static_cast<Eigen::Index>(shape.out));
    z[l].noalias() = a[l] * w.transpose();
    z[l].rowwise() += b;
    if (!z[l].allFinite()) throw NumericError("non-finite pre-activation", l);
    zdot[l].noalias() = adot[l] * w.transpose();
    const Activation act = p.spec().layer_activation(l);
    detail::apply_activation(act, z[l], a[l + 1]);
    adot[l + 1] = zdot[l];
    detail::scale_by_activation_deriv(act, z[l], adot[l + 1]);
  }
  // Adjoints of the primal (abar) and tangent (adotbar) activations. The
  // objective is sum of the tangent of the selected output.
  RowMatrix abar = RowMatrix::Zero(x.rows(), static_cast<Eigen::Index>(p.spec().output_dim));
  RowMatrix adotbar = abar;
  adotbar.col(static_cast<Eigen::Index>(output_index)).setOnes();
  for (std::size_t li = n_layers; li-- > 0;) {
    const auto& shape = p.layer(li);
    const auto rows = static_cast<Eigen::Index>(shape.out);
    const auto cols = static_cast<Eigen::Index>(shape.in);
    const Activation act = p.spec().layer_activation(li);
    const RowMatrix d1 = detail::activation_deriv(act, z[li]);
    RowMatrix zdotbar = adotbar.cwiseProduct(d1);
    RowMatrix zbar = abar.cwiseProduct(d1);
    if (act == Activation::tanh) {
      zbar += adotbar.cwiseProduct(detail::activation_second_deriv(act, z[li])).cwiseProduct(zdot[li]);
    }
    if (!zbar.allFinite() || !zdotbar.allFinite()) throw NumericError("non-finite gradient", li);
    WeightMap gw(grad.data() + shape.offset, rows, cols);
    Eigen::Map<Eigen::RowVectorXd> gb(grad.data() + shape.bias_offset(), rows);
    gw.noalias() += zbar.transpose() * a[li];
    gw.noalias() += zdotbar.transpose() * adot[li];
    gb += zbar.colwise().sum();
    if (li == 0) break;
    ConstWeightMap w(p.weights(li).data(), rows, cols);
    abar.noalias() = zbar * w;
    adotbar.noalias() = zdotbar * w;
  }
}

}  // namespace annopref::diffnet
