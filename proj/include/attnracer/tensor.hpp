#pragma once

// Dense row-major float64 tensors plus a reverse-mode gradient tape.
//
// A Tape records every operation applied to its Vars in creation order, so
// the node list is already topologically sorted; backward() walks it once in
// reverse. Parameters live outside any tape and are referenced by pointer,
// their gradients accumulate into Parameter::grad when backward() runs. One
// tape per thread; parameters may be shared read-only across tapes.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "attnracer/errors.hpp"

namespace attnracer {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }
  static Tensor vector(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Scalar value of a one-element tensor.
  double item() const;

  /// Same data, new shape with the same element count.
  Tensor reshaped(Shape shape) const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// A named trainable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  std::vector<double> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v);
  void zero_grad();
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
  bool requires_grad() const;
  /// Gradient after Tape::backward; all zeros if the node was not reached.
  std::span<const double> grad() const;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  /// Reads the grad of node `self` and accumulates into its inputs' grads.
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  /// References p.value without copying. Its gradient is added to p.grad by backward().
  Var parameter(Parameter& p);

  /// Records an op output. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);

  /// Reverse sweep from a scalar loss.
  void backward(Var loss);

  const Tensor& value(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  /// Mutable gradient buffer of a node, allocated (zeroed) on first use.
  std::span<double> grad_buffer(int id);
  std::span<const double> grad(int id) { return grad_buffer(id); }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Parameter* param = nullptr;
    std::vector<double> grad;
    BackwardFn backward;
    bool requires_grad = false;
  };
  Var push(Node node);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All inputs must share one tape.

/// 2-D cross-correlation, input [C_in,H,W], kernel [C_out,C_in,kH,kW].
Var conv2d(Var input, Var kernel, int stride, int padding);
/// Adds bias[c] to every element of channel c of a [C,H,W] tensor.
Var add_channel_bias(Var input, Var bias);
/// out = weight * input + bias, input [N], weight [M,N], bias [M].
Var dense(Var input, Var weight, Var bias);
/// Row-wise dense: X [R,N] -> [R,M], each row mapped by weight [M,N] and bias [M].
Var linear_rows(Var rows, Var weight, Var bias);

Var relu(Var x);
Var tanh(Var x);
Var exp(Var x);
Var square(Var x);
/// Elementwise clamp; gradient is zero where the bound is active.
Var clamp(Var x, double lo, double hi);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// Elementwise min; ties route the gradient to `a`.
Var minimum(Var a, Var b);
Var scale(Var x, double factor);
Var add_scalar(Var x, double offset);

Var sum(Var x);
Var mean(Var x);

Var reshape(Var x, Shape shape);
/// [R,C] -> [C,R]
Var transpose(Var x);

/// Softmax over a rank-1 tensor with max subtraction. Rejects NaN input.
Var softmax(Var logits);
Var log_softmax(Var logits);
/// Scalar x[index].
Var pick(Var x, std::size_t index);
/// log p[k] for p = softmax(logits).
Var categorical_log_prob(Var logits, std::size_t k);
/// -sum p log p for p = softmax(logits).
Var categorical_entropy(Var logits);

/// out[r,:] = s[r] * X[r,:], X [R,C], s [R].
Var scale_rows(Var rows, Var s);
/// out = sum_r w[r] X[r,:], w [R], X [R,C] -> [C].
Var weighted_sum(Var weights, Var rows);

// ---------------------------------------------------------------------------
// Plain (tape-free) helpers shared by the renderer, policy and tests.

std::vector<double> softmax_values(std::span<const double> logits);

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of every parameter from its grad.
void adam_step(std::span<Parameter> params, AdamState& state);

// ---------------------------------------------------------------------------
// Checkpoint file: "DACN", u32 version, then records until end of file, each
// u32 name length, UTF-8 name, u32 rank, u64 dims, f64 payload. All
// integers and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void save_checkpoint(const std::string& path, std::span<const NamedTensor> records);
std::vector<NamedTensor> load_checkpoint(const std::string& path);

}  // namespace attnracer
