#pragma once

// Randomized finite-difference checks over every differentiable op.

#include <random>
#include <string>
#include <vector>

#include "oracles.hpp"

namespace oracle {

struct OpCheck {
  std::string op;
  double worst_relative_error = 0.0;
  int cases = 0;
};

namespace detail {

// sum(y * c) with a random constant c, so every output element gets a distinct upstream gradient.
inline attnracer::Var project_to_scalar(attnracer::Tape& t, attnracer::Var y, std::mt19937_64& rng) {
  if (y.size() == 1) return y;
  return attnracer::sum(attnracer::mul(y, t.constant(random_tensor(y.shape(), rng))));
}

}  // namespace detail

inline std::vector<OpCheck> run_gradcheck_suite(int cases_per_op, std::uint64_t seed) {
  using namespace attnracer;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> small(1, 4);
  std::vector<OpCheck> report;

  auto run = [&](const std::string& name, auto make_case) {
    OpCheck check{name, 0.0, 0};
    for (int c = 0; c < cases_per_op; ++c) {
      std::vector<Tensor> inputs;
      LossBuilder build;
      make_case(inputs, build);
      const auto r = gradient_check(build, inputs);
      check.worst_relative_error = std::max(check.worst_relative_error, r.worst_relative_error);
      ++check.cases;
    }
    report.push_back(check);
  };

  auto shape2 = [&] { return Shape{static_cast<std::size_t>(small(rng)), static_cast<std::size_t>(small(rng) + 1)}; };
  auto shape1 = [&] { return Shape{static_cast<std::size_t>(small(rng) + 1)}; };

  run("conv2d", [&](std::vector<Tensor>& in, LossBuilder& b) {
    const std::size_t ci = static_cast<std::size_t>(small(rng)), co = static_cast<std::size_t>(small(rng));
    const int stride = std::uniform_int_distribution<int>(1, 2)(rng);
    const int pad = std::uniform_int_distribution<int>(0, 1)(rng);
    const std::size_t k = static_cast<std::size_t>(std::uniform_int_distribution<int>(1, 3)(rng));
    in = {random_tensor({ci, 5, 6}, rng), random_tensor({co, ci, k, k}, rng)};
    auto r = std::make_shared<std::mt19937_64>(rng());
    b = [=](Tape& t, const std::vector<Var>& v) {
      std::mt19937_64 local = *r;
      return detail::project_to_scalar(t, conv2d(v[0], v[1], stride, pad), local);
    };
  });
  run("add_channel_bias", [&](std::vector<Tensor>& in, LossBuilder& b) {
    const std::size_t c = static_cast<std::size_t>(small(rng));
    in = {random_tensor({c, 3, 2}, rng), random_tensor({c}, rng)};
    auto r = std::make_shared<std::mt19937_64>(rng());
    b = [=](Tape& t, const std::vector<Var>& v) {
      std::mt19937_64 local = *r;
      return detail::project_to_scalar(t, add_channel_bias(v[0], v[1]), local);
    };
  });
  run("dense", [&](std::vector<Tensor>& in, LossBuilder& b) {
    const std::size_t m = static_cast<std::size_t>(small(rng)), n = static_cast<std::size_t>(small(rng) + 1);
    in = {random_tensor({n}, rng), random_tensor({m, n}, rng), random_tensor({m}, rng)};
    auto r = std::make_shared<std::mt19937_64>(rng());
    b = [=](Tape& t, const std::vector<Var>& v) {
      std::mt19937_64 local = *r;
      return detail::project_to_scalar(t, dense(v[0], v[1], v[2]), local);
    };
  });
  run("linear_rows", [&](std::vector<Tensor>& in, LossBuilder& b) {
    const std::size_t rr = static_cast<std::size_t>(small(rng)), m = static_cast<std::size_t>(small(rng)),
                      n = static_cast<std::size_t>(small(rng) + 1);
    in = {random_tensor({rr, n}, rng), random_tensor({m, n}, rng), random_tensor({m}, rng)};
    auto r = std::make_shared<std::mt19937_64>(rng());
    b = [=](Tape& t, const std::vector<Var>& v) {
      std::mt19937_64 local = *r;
      return detail::project_to_scalar(t, linear_rows(v[0], v[1], v[2]), local);
    };
  });

  auto unary_case = [&](const std::string& name, auto op, std::vector<double> kinks) {
    run(name, [&, op, kinks](std::vector<Tensor>& in, LossBuilder& b) {
      in = {random_away_from(shape2(), rng, kinks)};
      auto r = std::make_shared<std::mt19937_64>(rng());
      b = [=](Tape& t, const std::vector<Var>& v) {
        std::mt19937_64 local = *r;
        return detail::project_to_scalar(t, op(v[0]), local);
      };
    });
  };
  unary_case("relu", [](Var x) { return relu(x); }, {0.0});
  unary_case("tanh", [](Var x) { return attnracer::tanh(x); }, {});
  unary_case("exp", [](Var x) { return attnracer::exp(x); }, {});
  unary_case("square", [](Var x) { return square(x); }, {});
  unary_case("clamp", [](Var x) { return clamp(x, -0.5, 0.5); }, {-0.5, 0.5});
  unary_case("scale", [](Var x) { return scale(x, -1.7); }, {});
  unary_case("add_scalar", [](Var x) { return add_scalar(x, 0.3); }, {});
  unary_case("sum", [](Var x) { return square(sum(x)); }, {});
  unary_case("mean", [](Var x) { return square(mean(x)); }, {});
  unary_case("reshape", [](Var x) { return reshape(x, Shape{x.size()}); }, {});
  unary_case("transpose", [](Var x) { return transpose(x); }, {});

  auto binary_case = [&](const std::string& name, auto op) {
    run(name, [&, op](std::vector<Tensor>& in, LossBuilder& b) {
      const Shape s = shape2();
      in = {random_tensor(s, rng), random_tensor(s, rng)};
      // Keep operands apart so minimum() never sits on its kink.
      for (std::size_t i = 0; i < in[0].size(); ++i)
        if (std::abs(in[0][i] - in[1][i]) < 0.05) in[1][i] += 0.1;
      auto r = std::make_shared<std::mt19937_64>(rng());
      b = [=](Tape& t, const std::vector<Var>& v) {
        std::mt19937_64 local = *r;
        return detail::project_to_scalar(t, op(v[0], v[1]), local);
      };
    });
  };
  binary_case("add", [](Var a, Var b) { return add(a, b); });
  binary_case("sub", [](Var a, Var b) { return sub(a, b); });
  binary_case("mul", [](Var a, Var b) { return mul(a, b); });
  binary_case("minimum", [](Var a, Var b) { return minimum(a, b); });

  auto vector_case = [&](const std::string& name, auto op) {
    run(name, [&, op](std::vector<Tensor>& in, LossBuilder& b) {
      in = {random_tensor(shape1(), rng, -2.0, 2.0)};
      auto r = std::make_shared<std::mt19937_64>(rng());
      b = [=](Tape& t, const std::vector<Var>& v) {
        std::mt19937_64 local = *r;
        return detail::project_to_scalar(t, op(v[0]), local);
      };
    });
  };
  vector_case("softmax", [](Var x) { return softmax(x); });
  vector_case("log_softmax", [](Var x) { return log_softmax(x); });
  vector_case("pick", [](Var x) { return square(pick(x, x.size() - 1)); });
  vector_case("categorical_log_prob", [](Var x) { return categorical_log_prob(x, 0); });
  vector_case("categorical_entropy", [](Var x) { return categorical_entropy(x); });

  run("scale_rows", [&](std::vector<Tensor>& in, LossBuilder& b) {
    const Shape s = shape2();
    in = {random_tensor(s, rng), random_tensor({s[0]}, rng)};
    auto r = std::make_shared<std::mt19937_64>(rng());
    b = [=](Tape& t, const std::vector<Var>& v) {
      std::mt19937_64 local = *r;
      return detail::project_to_scalar(t, scale_rows(v[0], v[1]), local);
    };
  });
  run("weighted_sum", [&](std::vector<Tensor>& in, LossBuilder& b) {
    const Shape s = shape2();
    in = {random_tensor({s[0]}, rng), random_tensor(s, rng)};
    auto r = std::make_shared<std::mt19937_64>(rng());
    b = [=](Tape& t, const std::vector<Var>& v) {
      std::mt19937_64 local = *r;
      return detail::project_to_scalar(t, weighted_sum(v[0], v[1]), local);
    };
  });
  run("two_conv_net", [&](std::vector<Tensor>& in, LossBuilder& b) {
    in = {random_tensor({2, 7, 7}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng, 0.1, 0.5),
          random_tensor({2, 3, 2, 2}, rng), random_tensor({2}, rng, 0.1, 0.5), random_tensor({4, 8}, rng),
          random_tensor({4}, rng)};
    b = [](Tape&, const std::vector<Var>& v) {
      Var h = relu(add_channel_bias(conv2d(v[0], v[1], 1, 0), v[2]));
      h = tanh(add_channel_bias(conv2d(h, v[3], 2, 0), v[4]));
      Var logits = dense(reshape(h, Shape{h.size()}), v[5], v[6]);
      return scale(categorical_log_prob(logits, 1), -1.0);
    };
  });
  return report;
}

}  // namespace oracle
