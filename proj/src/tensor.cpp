#include "attnracer/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

namespace attnracer {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("tensor dims must be positive, got " + shape_string(shape_));
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) throw DimensionError("tensor dims must be positive, got " + shape_string(shape_));
  if (data_.size() != shape_size(shape_))
    throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " +
                         shape_string(shape_));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor(Shape{values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(shape_));
  return shape_[axis];
}

double Tensor::item() const {
  if (data_.size() != 1) throw DimensionError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  return Tensor(std::move(shape), data_);
}

Parameter::Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.size(), 0.0) {}

void Parameter::zero_grad() { grad.assign(value.size(), 0.0); }

// ---------------------------------------------------------------------------

const Tensor& Var::value() const {
  if (!tape_) throw ContractError("value() on an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

std::span<const double> Var::grad() const {
  if (!tape_) throw ContractError("grad() on an unbound Var");
  return tape_->grad(id_);
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::variable(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::parameter(Parameter& p) {
  if (p.grad.size() != p.value.size()) p.zero_grad();
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  Node n;
  n.owned = std::move(value);
  for (const Var& v : inputs) {
    if (v.tape_ != this) throw ContractError("op inputs belong to a different tape");
    if (nodes_[v.id_].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

const Tensor& Tape::value(int id) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(id));
  return n.external ? *n.external : n.owned;
}

std::span<double> Tape::grad_buffer(int id) {
  Node& n = nodes_.at(static_cast<std::size_t>(id));
  const std::size_t len = n.external ? n.external->size() : n.owned.size();
  if (n.grad.size() != len) n.grad.assign(len, 0.0);
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw ContractError("loss is not on this tape");
  if (loss.size() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  if (backward_done_) throw ContractError("backward() already ran on this tape");
  backward_done_ = true;
  if (!nodes_[loss.id_].requires_grad) return;
  grad_buffer(loss.id_)[0] = 1.0;
  for (int id = loss.id_; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward && !n.grad.empty()) n.backward(*this, id);
  }
  for (Node& n : nodes_) {
    if (!n.param || n.grad.empty()) continue;
    auto& g = n.param->grad;
    if (g.size() != n.grad.size()) g.assign(n.grad.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  }
}

// ---------------------------------------------------------------------------

namespace {

Tape& tape_of(Var a) {
  if (!a.tape()) throw ContractError("op on an unbound Var");
  return *a.tape();
}

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
}

void require_rank(Var a, std::size_t rank, const char* op, const char* what) {
  if (a.value().rank() != rank)
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
}

void require_finite(std::span<const double> xs, const char* op) {
  for (double x : xs)
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
}

// Elementwise unary op: forward f(x), backward dx += dy * df(x, y).
template <class F, class DF>
Var unary(Var x, F f, DF df) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  const int xi = x.id();
  return t.record(std::move(out), {x}, [xi, df](Tape& tp, int self) {
    if (!tp.requires_grad(xi)) return;
    auto dy = tp.grad_buffer(self);
    auto dx = tp.grad_buffer(xi);
    const Tensor& xv = tp.value(xi);
    const Tensor& yv = tp.value(self);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * df(xv[i], yv[i]);
  });
}

void im2col(const double* x, std::size_t c_in, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t h_out, std::size_t w_out, double* cols) {
  const std::size_t n = h_out * w_out;
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        double* row = cols + ((c * kh + ki) * kw + kj) * n;
        for (std::size_t oy = 0; oy < h_out; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          for (std::size_t ox = 0; ox < w_out; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            const bool inside = iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(w);
            row[oy * w_out + ox] = inside ? x[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] : 0.0;
          }
        }
      }
}

void col2im_add(const double* cols, std::size_t c_in, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
                std::size_t stride, std::size_t pad, std::size_t h_out, std::size_t w_out, double* dx) {
  const std::size_t n = h_out * w_out;
  for (std::size_t c = 0; c < c_in; ++c)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const double* row = cols + ((c * kh + ki) * kw + kj) * n;
        for (std::size_t oy = 0; oy < h_out; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < w_out; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            dx[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * w_out + ox];
          }
        }
      }
}

}  // namespace

Var conv2d(Var input, Var kernel, int stride, int padding) {
  Tape& t = tape_of(input);
  require_rank(input, 3, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1, got " + std::to_string(stride));
  if (padding < 0) throw DimensionError("conv2d: padding must be >= 0, got " + std::to_string(padding));
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  const std::size_t c_in = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t c_out = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const auto s = static_cast<std::size_t>(stride), p = static_cast<std::size_t>(padding);
  if (k.dim(1) != c_in)
    throw DimensionError("conv2d: input channel axis 0 has " + std::to_string(c_in) + " but kernel axis 1 has " +
                         std::to_string(k.dim(1)));
  if (kh > h + 2 * p || kw > w + 2 * p)
    throw DimensionError("conv2d: kernel axes (2,3) " + std::to_string(kh) + "x" + std::to_string(kw) +
                         " exceed padded input axes (1,2) " + std::to_string(h + 2 * p) + "x" +
                         std::to_string(w + 2 * p));
  const std::size_t h_out = (h + 2 * p - kh) / s + 1;
  const std::size_t w_out = (w + 2 * p - kw) / s + 1;
  const std::size_t kdim = c_in * kh * kw, n = h_out * w_out;

  auto cols = std::make_shared<std::vector<double>>(kdim * n);
  im2col(x.data().data(), c_in, h, w, kh, kw, s, p, h_out, w_out, cols->data());
  Tensor out(Shape{c_out, h_out, w_out});
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(c_out), static_cast<int>(n),
              static_cast<int>(kdim), 1.0, k.data().data(), static_cast<int>(kdim), cols->data(),
              static_cast<int>(n), 0.0, out.data().data(), static_cast<int>(n));

  const int xi = input.id(), ki = kernel.id();
  return t.record(std::move(out), {input, kernel},
                  [=](Tape& tp, int self) {
                    auto dy = tp.grad_buffer(self);
                    if (tp.requires_grad(ki)) {
                      auto dk = tp.grad_buffer(ki);
                      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(c_out),
                                  static_cast<int>(kdim), static_cast<int>(n), 1.0, dy.data(), static_cast<int>(n),
                                  cols->data(), static_cast<int>(n), 1.0, dk.data(), static_cast<int>(kdim));
                    }
                    if (tp.requires_grad(xi)) {
                      std::vector<double> dcols(kdim * n);
                      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(kdim),
                                  static_cast<int>(n), static_cast<int>(c_out), 1.0, tp.value(ki).data().data(),
                                  static_cast<int>(kdim), dy.data(), static_cast<int>(n), 0.0, dcols.data(),
                                  static_cast<int>(n));
                      col2im_add(dcols.data(), c_in, h, w, kh, kw, s, p, h_out, w_out, tp.grad_buffer(xi).data());
                    }
                  });
}

Var add_channel_bias(Var input, Var bias) {
  Tape& t = tape_of(input);
  require_rank(input, 3, "add_channel_bias", "input");
  require_rank(bias, 1, "add_channel_bias", "bias");
  const Tensor& x = input.value();
  const Tensor& b = bias.value();
  if (b.dim(0) != x.dim(0))
    throw DimensionError("add_channel_bias: bias axis 0 has " + std::to_string(b.dim(0)) +
                         " but input axis 0 has " + std::to_string(x.dim(0)));
  const std::size_t plane = x.dim(1) * x.dim(2);
  Tensor out = x;
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] += b[c];
  const int xi = input.id(), bi = bias.id();
  return t.record(std::move(out), {input, bias}, [=](Tape& tp, int self) {
    auto dy = tp.grad_buffer(self);
    if (tp.requires_grad(xi)) {
      auto dx = tp.grad_buffer(xi);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
    }
    if (tp.requires_grad(bi)) {
      auto db = tp.grad_buffer(bi);
      for (std::size_t c = 0; c < db.size(); ++c)
        for (std::size_t i = 0; i < plane; ++i) db[c] += dy[c * plane + i];
    }
  });
}

Var dense(Var input, Var weight, Var bias) {
  Tape& t = tape_of(input);
  require_rank(input, 1, "dense", "input");
  require_rank(weight, 2, "dense", "weight");
  require_rank(bias, 1, "dense", "bias");
  const Tensor& x = input.value();
  const Tensor& wt = weight.value();
  const Tensor& b = bias.value();
  const std::size_t m = wt.dim(0), n = wt.dim(1);
  if (x.dim(0) != n)
    throw DimensionError("dense: input axis 0 has " + std::to_string(x.dim(0)) + " but weight axis 1 has " +
                         std::to_string(n));
  if (b.dim(0) != m)
    throw DimensionError("dense: bias axis 0 has " + std::to_string(b.dim(0)) + " but weight axis 0 has " +
                         std::to_string(m));
  Tensor out = b;
  cblas_dgemv(CblasRowMajor, CblasNoTrans, static_cast<int>(m), static_cast<int>(n), 1.0, wt.data().data(),
              static_cast<int>(n), x.data().data(), 1, 1.0, out.data().data(), 1);
  const int xi = input.id(), wi = weight.id(), bi = bias.id();
  return t.record(std::move(out), {input, weight, bias}, [=](Tape& tp, int self) {
    auto dy = tp.grad_buffer(self);
    if (tp.requires_grad(wi))
      cblas_dger(CblasRowMajor, static_cast<int>(m), static_cast<int>(n), 1.0, dy.data(), 1,
                 tp.value(xi).data().data(), 1, tp.grad_buffer(wi).data(), static_cast<int>(n));
    if (tp.requires_grad(xi))
      cblas_dgemv(CblasRowMajor, CblasTrans, static_cast<int>(m), static_cast<int>(n), 1.0,
                  tp.value(wi).data().data(), static_cast<int>(n), dy.data(), 1, 1.0, tp.grad_buffer(xi).data(), 1);
    if (tp.requires_grad(bi)) {
      auto db = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < m; ++i) db[i] += dy[i];
    }
  });
}

Var linear_rows(Var rows, Var weight, Var bias) {
  Tape& t = tape_of(rows);
  require_rank(rows, 2, "linear_rows", "rows");
  require_rank(weight, 2, "linear_rows", "weight");
  require_rank(bias, 1, "linear_rows", "bias");
  const Tensor& x = rows.value();
  const Tensor& wt = weight.value();
  const Tensor& b = bias.value();
  const std::size_t r = x.dim(0), n = x.dim(1), m = wt.dim(0);
  if (wt.dim(1) != n)
    throw DimensionError("linear_rows: rows axis 1 has " + std::to_string(n) + " but weight axis 1 has " +
                         std::to_string(wt.dim(1)));
  if (b.dim(0) != m)
    throw DimensionError("linear_rows: bias axis 0 has " + std::to_string(b.dim(0)) + " but weight axis 0 has " +
                         std::to_string(m));
  Tensor out(Shape{r, m});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = b[j];
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(r), static_cast<int>(m),
              static_cast<int>(n), 1.0, x.data().data(), static_cast<int>(n), wt.data().data(), static_cast<int>(n),
              1.0, out.data().data(), static_cast<int>(m));
  const int xi = rows.id(), wi = weight.id(), bi = bias.id();
  return t.record(std::move(out), {rows, weight, bias}, [=](Tape& tp, int self) {
    auto dy = tp.grad_buffer(self);
    if (tp.requires_grad(xi))
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(r), static_cast<int>(n),
                  static_cast<int>(m), 1.0, dy.data(), static_cast<int>(m), tp.value(wi).data().data(),
                  static_cast<int>(n), 1.0, tp.grad_buffer(xi).data(), static_cast<int>(n));
    if (tp.requires_grad(wi))
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                  static_cast<int>(r), 1.0, dy.data(), static_cast<int>(m), tp.value(xi).data().data(),
                  static_cast<int>(n), 1.0, tp.grad_buffer(wi).data(), static_cast<int>(n));
    if (tp.requires_grad(bi)) {
      auto db = tp.grad_buffer(bi);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < m; ++j) db[j] += dy[i * m + j];
    }
  });
}

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var square(Var x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var clamp(Var x, double lo, double hi) {
  if (lo > hi) throw ContractError("clamp: lo > hi");
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Var scale(Var x, double factor) {
  return unary(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Var add_scalar(Var x, double offset) {
  return unary(x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

namespace {

// Elementwise binary op with per-element partials (da, db).
template <class F, class DF>
Var binary(Var a, Var b, const char* name, F f, DF df) {
  Tape& t = tape_of(a);
  require_same_shape(a, b, name);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  const int ai = a.id(), bi = b.id();
  return t.record(std::move(out), {a, b}, [ai, bi, df](Tape& tp, int self) {
    auto dy = tp.grad_buffer(self);
    const Tensor& av = tp.value(ai);
    const Tensor& bv = tp.value(bi);
    const bool ga = tp.requires_grad(ai), gb = tp.requires_grad(bi);
    std::span<double> da, db;
    if (ga) da = tp.grad_buffer(ai);
    if (gb) db = tp.grad_buffer(bi);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const auto [pa, pb] = df(av[i], bv[i]);
      if (ga) da[i] += dy[i] * pa;
      if (gb) db[i] += dy[i] * pb;
    }
  });
}

}  // namespace

Var add(Var a, Var b) {
  return binary(a, b, "add", [](double x, double y) { return x + y; },
                [](double, double) { return std::pair{1.0, 1.0}; });
}

Var sub(Var a, Var b) {
  return binary(a, b, "sub", [](double x, double y) { return x - y; },
                [](double, double) { return std::pair{1.0, -1.0}; });
}

Var mul(Var a, Var b) {
  return binary(a, b, "mul", [](double x, double y) { return x * y; },
                [](double x, double y) { return std::pair{y, x}; });
}

Var minimum(Var a, Var b) {
  return binary(a, b, "minimum", [](double x, double y) { return x <= y ? x : y; },
                [](double x, double y) { return x <= y ? std::pair{1.0, 0.0} : std::pair{0.0, 1.0}; });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  const int xi = x.id();
  return t.record(Tensor::scalar(s), {x}, [xi](Tape& tp, int self) {
    const double dy = tp.grad_buffer(self)[0];
    for (double& d : tp.grad_buffer(xi)) d += dy;
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Var reshape(Var x, Shape shape) {
  Tape& t = tape_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  const int xi = x.id();
  return t.record(std::move(out), {x}, [xi](Tape& tp, int self) {
    auto dy = tp.grad_buffer(self);
    auto dx = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
  });
}

Var transpose(Var x) {
  Tape& t = tape_of(x);
  require_rank(x, 2, "transpose", "input");
  const Tensor& xv = x.value();
  const std::size_t r = xv.dim(0), c = xv.dim(1);
  Tensor out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
  const int xi = x.id();
  return t.record(std::move(out), {x}, [xi, r, c](Tape& tp, int self) {
    auto dy = tp.grad_buffer(self);
    auto dx = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += dy[j * r + i];
  });
}

std::vector<double> softmax_values(std::span<const double> logits) {
  for (double v : logits)
    if (std::isnan(v)) throw NumericError("softmax: NaN input");
  if (logits.empty()) return {};
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

Var softmax(Var logits) {
  Tape& t = tape_of(logits);
  require_rank(logits, 1, "softmax", "input");
  require_finite(logits.value().data(), "softmax");
  const auto p = softmax_values(logits.value().data());
  Tensor out(logits.shape(), p);
  const int xi = logits.id();
  return t.record(std::move(out), {logits}, [xi](Tape& tp, int self) {
    auto dy = tp.grad_buffer(self);
    const Tensor& y = tp.value(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < dy.size(); ++i) dot += dy[i] * y[i];
    auto dx = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += y[i] * (dy[i] - dot);
  });
}

Var log_softmax(Var logits) {
  Tape& t = tape_of(logits);
  require_rank(logits, 1, "log_softmax", "input");
  require_finite(logits.value().data(), "log_softmax");
  const auto& x = logits.value();
  const double mx = *std::max_element(x.data().begin(), x.data().end());
  double z = 0.0;
  for (double v : x.data()) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  const int xi = logits.id();
  return t.record(std::move(out), {logits}, [xi](Tape& tp, int self) {
    auto dy = tp.grad_buffer(self);
    const Tensor& y = tp.value(self);
    double total = 0.0;
    for (double d : dy) total += d;
    auto dx = tp.grad_buffer(xi);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] - std::exp(y[i]) * total;
  });
}

Var pick(Var x, std::size_t index) {
  Tape& t = tape_of(x);
  if (index >= x.size())
    throw IndexError("pick: index " + std::to_string(index) + " out of range for " + std::to_string(x.size()) +
                     " elements");
  const int xi = x.id();
  return t.record(Tensor::scalar(x.value()[index]), {x}, [xi, index](Tape& tp, int self) {
    tp.grad_buffer(xi)[index] += tp.grad_buffer(self)[0];
  });
}

Var categorical_log_prob(Var logits, std::size_t k) {
  if (k >= logits.size())
    throw IndexError("categorical_log_prob: category " + std::to_string(k) + " out of range for " +
                     std::to_string(logits.size()) + " categories");
  return pick(log_softmax(logits), k);
}

Var categorical_entropy(Var logits) { return scale(sum(mul(softmax(logits), log_softmax(logits))), -1.0); }

Var scale_rows(Var rows, Var s) {
  Tape& t = tape_of(rows);
  require_rank(rows, 2, "scale_rows", "rows");
  require_rank(s, 1, "scale_rows", "scales");
  const Tensor& x = rows.value();
  const Tensor& sv = s.value();
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (sv.dim(0) != r)
    throw DimensionError("scale_rows: scales axis 0 has " + std::to_string(sv.dim(0)) + " but rows axis 0 has " +
                         std::to_string(r));
  Tensor out(x.shape());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = sv[i] * x[i * c + j];
  const int xi = rows.id(), si = s.id();
  return t.record(std::move(out), {rows, s}, [=](Tape& tp, int self) {
    auto dy = tp.grad_buffer(self);
    const Tensor& x = tp.value(xi);
    const Tensor& sv = tp.value(si);
    if (tp.requires_grad(xi)) {
      auto dx = tp.grad_buffer(xi);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += sv[i] * dy[i * c + j];
    }
    if (tp.requires_grad(si)) {
      auto ds = tp.grad_buffer(si);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ds[i] += x[i * c + j] * dy[i * c + j];
    }
  });
}

Var weighted_sum(Var weights, Var rows) {
  Tape& t = tape_of(weights);
  require_rank(weights, 1, "weighted_sum", "weights");
  require_rank(rows, 2, "weighted_sum", "rows");
  const Tensor& w = weights.value();
  const Tensor& x = rows.value();
  const std::size_t r = x.dim(0), c = x.dim(1);
  if (w.dim(0) != r)
    throw DimensionError("weighted_sum: weights axis 0 has " + std::to_string(w.dim(0)) + " but rows axis 0 has " +
                         std::to_string(r));
  Tensor out(Shape{c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += w[i] * x[i * c + j];
  const int wi = weights.id(), xi = rows.id();
  return t.record(std::move(out), {weights, rows}, [=](Tape& tp, int self) {
    auto dy = tp.grad_buffer(self);
    const Tensor& w = tp.value(wi);
    const Tensor& x = tp.value(xi);
    if (tp.requires_grad(wi)) {
      auto dw = tp.grad_buffer(wi);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dw[i] += dy[j] * x[i * c + j];
    }
    if (tp.requires_grad(xi)) {
      auto dx = tp.grad_buffer(xi);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += w[i] * dy[j];
    }
  });
}

// ---------------------------------------------------------------------------

void adam_step(std::span<Parameter> params, AdamState& state) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.value.size(), 0.0);
      state.second_moment.emplace_back(p.value.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size())
    throw DimensionError("adam_step: state tracks " + std::to_string(state.first_moment.size()) +
                         " parameters, got " + std::to_string(params.size()));
  const auto& cfg = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    auto& m = state.first_moment[k];
    auto& v = state.second_moment[k];
    if (p.grad.size() != p.value.size() || m.size() != p.value.size())
      throw DimensionError("adam_step: size mismatch for parameter '" + p.name + "'");
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double g = p.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p.value[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 8);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return true;
}

bool get_u64(std::istream& is, std::uint64_t& v) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return true;
}

}  // namespace

void save_checkpoint(const std::string& path, std::span<const NamedTensor> records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ConfigError("cannot open checkpoint for writing: " + path);
  os.write("DACN", 4);
  put_u32(os, kCheckpointVersion);
  for (const auto& rec : records) {
    put_u32(os, static_cast<std::uint32_t>(rec.name.size()));
    os.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
    put_u32(os, static_cast<std::uint32_t>(rec.tensor.rank()));
    for (auto d : rec.tensor.shape()) put_u64(os, d);
    for (double v : rec.tensor.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
  if (!os) throw ConfigError("failed writing checkpoint: " + path);
}

std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "DACN") throw ConfigError("not a DACN checkpoint: " + path);
  std::uint32_t version = 0;
  if (!get_u32(is, version) || version != kCheckpointVersion)
    throw ConfigError("unsupported checkpoint version in " + path);
  std::vector<NamedTensor> out;
  std::uint32_t name_len = 0;
  while (get_u32(is, name_len)) {
    NamedTensor rec;
    rec.name.resize(name_len);
    std::uint32_t rank = 0;
    if (!is.read(rec.name.data(), name_len) || !get_u32(is, rank)) throw ConfigError("truncated checkpoint: " + path);
    Shape shape(rank);
    for (auto& d : shape) {
      std::uint64_t dim = 0;
      if (!get_u64(is, dim) || dim == 0) throw ConfigError("truncated or invalid dims in checkpoint: " + path);
      d = static_cast<std::size_t>(dim);
    }
    const std::size_t count = shape_size(shape);
    if (count > (std::size_t{1} << 32)) throw ConfigError("implausible record size in " + path);
    std::vector<double> data(count);
    for (auto& v : data) {
      std::uint64_t bits = 0;
      if (!get_u64(is, bits)) throw ConfigError("truncated checkpoint: " + path);
      v = std::bit_cast<double>(bits);
    }
    rec.tensor = Tensor(std::move(shape), std::move(data));
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace attnracer
