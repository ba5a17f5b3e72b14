#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "attnracer/errors.hpp"
#include "attnracer/ppo.hpp"
#include "doctest.h"

using namespace attnracer;

namespace {

NetworkSpec bandit_spec() {
  NetworkSpec s;
  s.height = 12;
  s.width = 16;
  s.conv = {{4, 3, 2, 1}, {8, 3, 2, 0}};
  s.attention = AttentionKind::mlp;
  s.attention_hidden = 8;
  s.head_hidden = 16;
  return s;
}

EnvFactory bandit_factory(const NetworkSpec& s) {
  return [s](int, std::uint64_t seed) -> std::unique_ptr<Environment> {
    return std::make_unique<ColorBanditEnv>(s.in_channels, s.height, s.width, s.action_count(), 3, 11, seed);
  };
}

// A_t summed term by term: sum over k >= t of (g l)^(k-t) delta_k, stopping after a done.
std::vector<double> gae_double_loop(const std::vector<double>& r, const std::vector<double>& v,
                                    const std::vector<double>& nv, const std::vector<std::uint8_t>& d, double g,
                                    double l) {
  std::vector<double> out(r.size());
  for (std::size_t t = 0; t < r.size(); ++t) {
    double acc = 0.0, w = 1.0;
    for (std::size_t k = t; k < r.size(); ++k) {
      acc += w * (r[k] + g * nv[k] - v[k]);
      if (d[k]) break;
      w *= g * l;
    }
    out[t] = acc;
  }
  return out;
}

double optimal_probability(PolicyNetwork& net, const NetworkSpec& s) {
  double p = 0.0;
  for (bool red : {true, false}) {
    const auto out = net.evaluate(ColorBanditEnv::image(s.in_channels, s.height, s.width, red));
    const Tensor logits = out.logits;
    p += softmax_values(logits.data())[red ? 3 : 11];
  }
  return p / 2.0;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("gae: single terminal step and telescoping sum") {
  const std::vector<double> r1{2.0}, v1{0.5}, n1{0.0};
  const std::vector<std::uint8_t> d1{1};
  const auto a1 = gae_advantages(r1, v1, n1, d1, 1, 0.99, 0.95);
  CHECK(a1.advantages[0] == doctest::Approx(1.5));
  CHECK(a1.returns[0] == doctest::Approx(2.0));

  const std::vector<double> r{1.0, 2.0, 3.0, 4.0}, v{0.3, -0.2, 1.1, 0.7};
  std::vector<double> nv{v[1], v[2], v[3], 0.0};
  const std::vector<std::uint8_t> d{0, 0, 0, 1};
  const auto a = gae_advantages(r, v, nv, d, 1, 1.0, 1.0);
  for (std::size_t t = 0; t < 4; ++t) {
    const double tail = std::accumulate(r.begin() + static_cast<long>(t), r.end(), 0.0);
    CHECK(a.advantages[t] == doctest::Approx(tail - v[t]).epsilon(1e-12));
  }
}

TEST_CASE("gae matches a double-loop evaluation on random multi-env batches") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t E = 1 + rng() % 3, T = 10;
    std::vector<double> r(E * T), v(E * T), nv(E * T);
    std::vector<std::uint8_t> d(E * T);
    for (std::size_t i = 0; i < E * T; ++i) {
      r[i] = n(rng);
      v[i] = n(rng);
      d[i] = rng() % 4 == 0;
      nv[i] = (d[i] && rng() % 2) ? 0.0 : n(rng);
    }
    const double g = 0.9 + 0.1 * (rng() % 100) / 100.0, l = (rng() % 100) / 100.0;
    const auto got = gae_advantages(r, v, nv, d, E, g, l);
    for (std::size_t e = 0; e < E; ++e) {
      std::vector<double> re, ve, ne;
      std::vector<std::uint8_t> de;
      for (std::size_t t = 0; t < T; ++t) {
        re.push_back(r[t * E + e]);
        ve.push_back(v[t * E + e]);
        ne.push_back(nv[t * E + e]);
        de.push_back(d[t * E + e]);
      }
      const auto want = gae_double_loop(re, ve, ne, de, g, l);
      for (std::size_t t = 0; t < T; ++t) {
        worst = std::max(worst, std::abs(got.advantages[t * E + e] - want[t]));
        CHECK(got.returns[t * E + e] == doctest::Approx(want[t] + ve[t]).epsilon(1e-12));
      }
    }
  }
  CHECK(worst < 1e-10);
  const std::vector<double> three(3);
  const std::vector<std::uint8_t> dd(2);
  CHECK_THROWS_AS(gae_advantages(three, three, three, dd, 1, 0.9, 0.9), DimensionError);
}

TEST_CASE("clipped surrogate analytic values") {
  const std::vector<double> zero{0.0, 0.0, 0.0}, adv{1.0, -2.0, 4.0};
  CHECK(clipped_surrogate(zero, zero, adv, 0.2) == doctest::Approx(-1.0));
  const std::vector<double> up{std::log(1.5)}, down{std::log(0.5)}, z{0.0}, pos{1.0}, neg{-1.0};
  CHECK(-clipped_surrogate(up, z, pos, 0.2) == doctest::Approx(1.2));
  CHECK(-clipped_surrogate(down, z, neg, 0.2) == doctest::Approx(-0.8));

  Tape tape;
  Var lp = tape.constant(Tensor({1}, std::vector<double>{std::log(1.5)}));
  CHECK(clipped_objective(lp, 0.0, 1.0, 0.2).item() == doctest::Approx(1.2));
  Var lp2 = tape.constant(Tensor({1}, std::vector<double>{std::log(0.5)}));
  CHECK(clipped_objective(lp2, 0.0, -1.0, 0.2).item() == doctest::Approx(-0.8));
}

TEST_CASE("normalize gives zero mean and unit std") {
  std::vector<double> v{1.0, 5.0, -3.0, 2.5, 8.0, 0.0};
  normalize(v);
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / 6.0;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  CHECK(std::abs(mean) < 1e-12);
  CHECK(std::sqrt(var / 6.0) == doctest::Approx(1.0).epsilon(1e-9));
  std::vector<double> one{3.0};
  normalize(one);
  CHECK(one[0] == 3.0);
}

TEST_CASE("categorical sampling follows the softmax") {
  std::mt19937_64 rng(1);
  const std::vector<double> logits{0.0, std::log(3.0), -1e9};
  int hits[3] = {0, 0, 0};
  for (int i = 0; i < 20000; ++i) ++hits[sample_categorical(logits, rng)];
  CHECK(hits[2] == 0);
  CHECK(hits[1] / 20000.0 == doctest::Approx(0.75).epsilon(0.03));
  CHECK(argmax(logits) == 1);
}

TEST_CASE("collector: one-step episodes, bootstraps and determinism") {
  const NetworkSpec s = bandit_spec();
  PolicyNetwork net(s, 3);
  const auto make = bandit_factory(s);
  const auto run = [&] {
    std::vector<std::unique_ptr<Environment>> envs;
    envs.push_back(make(0, 9));
    RolloutCollector c(std::move(envs), 4);
    return c.collect(net, 5);
  };
  const RolloutBatch a = run(), b = run();
  CHECK(a.size() == 5);
  CHECK(a.episodes.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(a.dones[i] == 1);
    CHECK(a.next_values[i] == 0.0);
    CHECK(std::isfinite(a.log_probs[i]));
    CHECK(a.log_probs[i] == doctest::Approx(-std::log(15.0)).epsilon(1e-12));
    CHECK(a.entropies[i] == doctest::Approx(std::log(15.0)).epsilon(1e-12));
  }
  CHECK(a.actions == b.actions);
  CHECK(a.rewards == b.rewards);

  EnvConfig cfg;
  cfg.random_start = false;
  cfg.max_steps = 3;
  std::vector<std::unique_ptr<Environment>> envs;
  envs.push_back(std::make_unique<RacingEnv>(cfg, 1));
  envs.push_back(std::make_unique<RacingEnv>(cfg, 2));
  PolicyNetwork racer(network_preset("shallow"), 1);
  RolloutCollector c(std::move(envs), 7);
  const RolloutBatch r = c.collect(racer, 4);
  CHECK(r.size() == 8);
  for (std::size_t e = 0; e < 2; ++e) {
    // Timeouts at step index 2 are truncations: bootstrap from the last frame.
    CHECK(r.dones[2 * 2 + e] == 1);
    CHECK(r.next_values[2 * 2 + e] != 0.0);
    CHECK(r.next_values[0 * 2 + e] == r.values[1 * 2 + e]);
  }
}

TEST_CASE("collector is worker-count independent") {
  const NetworkSpec s = bandit_spec();
  PolicyNetwork net(s, 3);
  const auto make = bandit_factory(s);
  const auto run = [&](int workers) {
    std::vector<std::unique_ptr<Environment>> envs;
    for (int e = 0; e < 3; ++e) envs.push_back(make(e, 100 + e));
    RolloutCollector c(std::move(envs), 4, workers);
    return c.collect(net, 6);
  };
  const RolloutBatch a = run(1), b = run(3);
  CHECK(a.actions == b.actions);
  CHECK(a.values == b.values);
}

TEST_CASE("update invariants: ratio starts at one, advantages normalized") {
  const NetworkSpec s = bandit_spec();
  PolicyNetwork net(s, 3);
  const auto make = bandit_factory(s);
  std::vector<std::unique_ptr<Environment>> envs;
  for (int e = 0; e < 2; ++e) envs.push_back(make(e, e));
  RolloutCollector c(std::move(envs), 4);
  PPOConfig cfg;
  cfg.minibatch = 8;
  AdamState adam;
  adam.config.learning_rate = 1e-3;
  std::mt19937_64 rng(0);
  for (int it = 0; it < 3; ++it) {
    const RolloutBatch b = c.collect(net, 16);
    const UpdateStats st = ppo_update(net, adam, b, cfg, rng);
    CHECK(st.first_ratio_deviation < 1e-9);
    CHECK(std::abs(st.advantage_mean) < 1e-9);
    CHECK(std::abs(st.advantage_std - 1.0) < 1e-6);
    CHECK(std::isfinite(st.policy_loss));
    CHECK(std::isfinite(st.value_loss));
  }
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  const NetworkSpec s = bandit_spec();
  PPOConfig cfg;
  cfg.iterations = 1;
  cfg.envs = 2;
  cfg.steps_per_env = 8;
  cfg.minibatch = 8;
  cfg.learning_rate = 0.0;
  cfg.seed = 5;
  const TrainResult r = train(cfg, s, bandit_factory(s));
  const PolicyNetwork fresh(s, env_seed(cfg.seed, -1));
  for (std::size_t i = 0; i < fresh.parameters().size(); ++i) {
    const auto& a = fresh.parameters()[i].value;
    const auto& b = r.network.parameters()[i].value;
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  }
  CHECK(r.history.front().entropy == doctest::Approx(std::log(15.0)).epsilon(1e-12));
}

TEST_CASE("metrics CSV bookkeeping, checkpoints and bitwise reproducibility") {
  const NetworkSpec s = bandit_spec();
  const auto dir = std::filesystem::temp_directory_path() / "attnracer_test_ppo";
  std::filesystem::remove_all(dir);
  PPOConfig cfg;
  cfg.iterations = 3;
  cfg.envs = 2;
  cfg.steps_per_env = 8;
  cfg.minibatch = 8;
  cfg.seed = 12;
  const auto run = [&](const std::string& tag) {
    TrainOptions o;
    o.metrics_path = (dir / tag / "metrics.csv").string();
    o.checkpoint_dir = (dir / tag).string();
    return train(cfg, s, bandit_factory(s), o);
  };
  TrainResult a = run("a");
  run("b");
  const std::string csv = slurp(dir / "a" / "metrics.csv");
  CHECK(csv == slurp(dir / "b" / "metrics.csv"));
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  CHECK(line == kMetricsHeader);
  int prev = 0, rows = 0;
  while (std::getline(lines, line)) {
    int it = 0;
    long long steps = 0;
    REQUIRE(std::sscanf(line.c_str(), "%d,%lld", &it, &steps) == 2);
    CHECK(it > prev);
    CHECK(steps == static_cast<long long>(it) * cfg.envs * cfg.steps_per_env);
    prev = it;
    ++rows;
  }
  CHECK(rows == 3);
  for (int it = 1; it <= 3; ++it) CHECK(std::filesystem::exists(dir / "a" / ("ckpt_" + std::to_string(it) + ".dacn")));

  PolicyNetwork loaded = PolicyNetwork::load((dir / "a" / "ckpt_3.dacn").string());
  const Tensor obs = ColorBanditEnv::image(3, s.height, s.width, true);
  const Tensor l1 = a.network.evaluate(obs).logits, l2 = loaded.evaluate(obs).logits;
  CHECK(std::equal(l1.data().begin(), l1.data().end(), l2.data().begin()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("config validation and action mismatch") {
  PPOConfig bad;
  bad.clip = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.minibatch = 5000;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.gamma = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  NetworkSpec s = bandit_spec();
  PPOConfig cfg;
  cfg.iterations = 1;
  cfg.envs = 1;
  cfg.steps_per_env = 4;
  cfg.minibatch = 4;
  const EnvFactory wrong = [&](int, std::uint64_t seed) -> std::unique_ptr<Environment> {
    return std::make_unique<ColorBanditEnv>(3, s.height, s.width, 4, 0, 1, seed);
  };
  CHECK_THROWS_AS(train(cfg, s, wrong), ConfigError);
}

TEST_CASE("bandit: optimal action probability rises above 0.9") {
  const NetworkSpec s = bandit_spec();
  PPOConfig cfg;
  cfg.iterations = 50;
  cfg.envs = 4;
  cfg.steps_per_env = 16;
  cfg.minibatch = 32;
  cfg.learning_rate = 1e-3;
  cfg.seed = 1;
  TrainResult r = train(cfg, s, bandit_factory(s));
  const double p = optimal_probability(r.network, s);
  MESSAGE("bandit optimal-action probability " << p);
  CHECK(p > 0.9);
}
