#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cast/tensor.hpp"

namespace cast {

struct Parameter {
  Tensor value;
  bool trainable = true;
};

/// Named parameter registry. Ordered by name so iteration (checkpoints,
/// optimizer updates, gradient checks) is deterministic.
class ParamStore {
public:
  Tensor& add(const std::string& name, Tensor value, bool trainable = true);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Parameter& at(const std::string& name) const;
  Parameter& at(const std::string& name);
  const Tensor& value(const std::string& name) const { return at(name).value; }
  Tensor& value(const std::string& name) { return at(name).value; }

  std::vector<std::string> names() const;
  std::size_t scalar_count() const;
  /// Marks every parameter whose name matches the ECMAScript regex as
  /// trainable and all others as frozen.
  void set_trainable_only(const std::string& pattern);
  void set_all_trainable(bool trainable);

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  std::size_t size() const { return params_.size(); }

  friend bool operator==(const ParamStore& a, const ParamStore& b);

private:
  std::map<std::string, Parameter> params_;
};

using Gradients = std::map<std::string, Tensor>;

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Records primitive applications in topological order. Confined to one
/// thread; independent tapes may run concurrently.
class Tape {
public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  /// Leaf bound to a stored parameter; repeated calls return the same node.
  Var param(const ParamStore& store, const std::string& name);

  Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  /// Gradient buffer of a node, zero-initialised on first access.
  Tensor& grad(std::size_t id);
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Returns the gradient of every trainable
  /// parameter in `store`; parameters not reached by the loss get zeros.
  Gradients backward(Var loss, const ParamStore& store);
  /// Reverse sweep that leaves gradients on the tape (see grad_of).
  void backward(Var loss);
  const Tensor* grad_of(Var v) const;

private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_ids_;
};

// Differentiable primitives. Every op records itself on the tape of its
// inputs and validates shapes and finiteness of its inputs.
namespace ad {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// a[n x d] + v for v of size d, broadcast over rows.
Var add_rowvec(Var a, Var v);
/// a[n x d] * v for v of size d, broadcast over rows.
Var mul_rowvec(Var a, Var v);
Var scale(Var a, double s);
/// a * s for a scalar variable s.
Var scale_by(Var a, Var s);

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var transpose(Var a);

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
/// Row-wise layer normalisation with affine terms. Rows whose variance is
/// below 1e-12 normalise to zero.
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// tanh approximation.
Var gelu(Var x);

/// Column means, shape [1 x d].
Var mean_rows(Var a);
/// Column sums, shape [1 x d].
Var sum_rows(Var a);
Var sum(Var a);
Var mean(Var a);

Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var a, std::span<const std::size_t> index);
Var slice_rows(Var a, std::size_t begin, std::size_t end);
Var slice_cols(Var a, std::size_t begin, std::size_t end);

/// out[s] = mean of rows r with labels[r] == s. Every segment must be non-empty.
Var segment_mean(Var a, std::span<const std::size_t> labels, std::size_t n_segments);
/// Divides row i of a[m x d] by max(s[i], floor).
Var div_rows(Var a, Var s, double floor = 1e-12);
/// Rows scaled to unit L2 norm, x / (|x| + eps).
Var normalize_rows(Var a, double eps = 1e-12);

/// 2-D convolution on a channels-last image stored as [(h*w) x c_in].
/// weight is [c_out x (k*k*c_in)] with (ky, kx, ci) ordering; bias is [c_out].
Var conv2d(Var x, Var weight, Var bias, std::size_t h, std::size_t w, std::size_t kernel, std::size_t stride,
           std::size_t pad);

/// out[r] = a[r, index[r]], shape [n x 1].
Var pick(Var a, std::span<const std::size_t> index);
/// Mean cross-entropy of logits rows against integer labels.
Var cross_entropy(Var logits, std::span<const std::size_t> labels);
/// Mean over rows of the entropy of softmax(logits).
Var softmax_entropy(Var logits);

}  // namespace ad

}  // namespace cast
