#pragma once

// Test-only reference implementations. Deliberately naive and independent of
// the BLAS-backed production kernels.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "attnracer/tensor.hpp"

namespace oracle {

using attnracer::Shape;
using attnracer::Tensor;

inline Tensor conv2d_naive(const Tensor& x, const Tensor& k, int stride, int pad) {
  const long c_in = static_cast<long>(x.dim(0)), h = static_cast<long>(x.dim(1)), w = static_cast<long>(x.dim(2));
  const long c_out = static_cast<long>(k.dim(0)), kh = static_cast<long>(k.dim(2)), kw = static_cast<long>(k.dim(3));
  const long h_out = (h + 2 * pad - kh) / stride + 1, w_out = (w + 2 * pad - kw) / stride + 1;
  Tensor out(Shape{static_cast<std::size_t>(c_out), static_cast<std::size_t>(h_out), static_cast<std::size_t>(w_out)});
  for (long o = 0; o < c_out; ++o)
    for (long oy = 0; oy < h_out; ++oy)
      for (long ox = 0; ox < w_out; ++ox) {
        double acc = 0.0;
        for (long c = 0; c < c_in; ++c)
          for (long i = 0; i < kh; ++i)
            for (long j = 0; j < kw; ++j) {
              const long iy = oy * stride + i - pad, ix = ox * stride + j - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += x[static_cast<std::size_t>((c * h + iy) * w + ix)] *
                     k[static_cast<std::size_t>(((o * c_in + c) * kh + i) * kw + j)];
            }
        out[static_cast<std::size_t>((o * h_out + oy) * w_out + ox)] = acc;
      }
  return out;
}

inline Tensor dense_naive(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t m = w.dim(0), n = w.dim(1);
  Tensor out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    double acc = b[i];
    for (std::size_t j = 0; j < n; ++j) acc += w[i * n + j] * x[j];
    out[i] = acc;
  }
  return out;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

/// Random tensor whose entries all keep |x - kink| > margin for each kink.
inline Tensor random_away_from(Shape shape, std::mt19937_64& rng, std::vector<double> kinks, double margin = 0.05) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) {
    bool ok = false;
    while (!ok) {
      v = u(rng);
      ok = true;
      for (double k : kinks)
        if (std::abs(v - k) < margin) ok = false;
    }
  }
  return t;
}

/// Builds a scalar loss from variables on a fresh tape.
using LossBuilder = std::function<attnracer::Var(attnracer::Tape&, const std::vector<attnracer::Var>&)>;

struct GradCheckResult {
  double worst_relative_error = 0.0;
};

/// Relative error ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-8)
/// per input tensor, numeric by central differences with step h.
inline GradCheckResult gradient_check(const LossBuilder& build, const std::vector<Tensor>& inputs, double h = 1e-5) {
  using namespace attnracer;
  auto evaluate = [&](const std::vector<Tensor>& xs) {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(tape.constant(x));
    return build(tape, vars).item();
  };
  Tape tape;
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.push_back(tape.variable(x));
  Var loss = build(tape, vars);
  tape.backward(loss);

  GradCheckResult result;
  std::vector<Tensor> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = vars[k].grad();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double x0 = inputs[k][i];
      probe[k][i] = x0 + h;
      const double fp = evaluate(probe);
      probe[k][i] = x0 - h;
      const double fm = evaluate(probe);
      probe[k][i] = x0;
      const double numeric = (fp - fm) / (2.0 * h);
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double rel = std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), 1e-8);
    result.worst_relative_error = std::max(result.worst_relative_error, rel);
  }
  return result;
}

/// Adam on one scalar, written as the plain recurrence.
inline std::vector<double> adam_scalar_recurrence(double x0, const std::vector<double>& grads, double lr, double b1,
                                                  double b2, double eps) {
  std::vector<double> xs;
  double x = x0, m = 0.0, v = 0.0;
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double g = grads[t - 1];
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, static_cast<double>(t)));
    const double vh = v / (1 - std::pow(b2, static_cast<double>(t)));
    x -= lr * mh / (std::sqrt(vh) + eps);
    xs.push_back(x);
  }
  return xs;
}

}  // namespace oracle
