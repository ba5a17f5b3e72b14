#include "attnracer/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#include "attnracer/errors.hpp"

namespace attnracer {

namespace {

double log_sum_exp(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

double entropy_of(std::span<const double> logits) {
  const double lse = log_sum_exp(logits);
  double h = 0.0;
  for (double v : logits) {
    const double lp = v - lse;
    h -= std::exp(lp) * lp;
  }
  return h;
}

void check_logits(std::span<const double> logits, std::size_t env, std::size_t step) {
  for (double v : logits)
    if (!std::isfinite(v))
      throw NumericError("non-finite policy logits during rollout (env " + std::to_string(env) + ", step " +
                         std::to_string(step) + "); training aborted");
}

}  // namespace

void PPOConfig::validate() const {
  if (!(clip > 0.0 && clip < 1.0)) throw ConfigError("clip must lie in (0, 1)");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
  if (epochs < 1) throw ConfigError("epochs must be positive");
  if (envs < 1 || steps_per_env < 1) throw ConfigError("envs and steps per env must be positive");
  if (minibatch < 1 || minibatch > envs * steps_per_env) throw ConfigError("minibatch must lie in [1, batch size]");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (iterations < 0) throw ConfigError("iterations must be non-negative");
  if (workers < 1) throw ConfigError("workers must be positive");
  if (!(reward_scale > 0.0)) throw ConfigError("reward scale must be positive");
  if (convergence_window < 1) throw ConfigError("convergence window must be positive");
}

std::uint64_t env_seed(std::uint64_t run_seed, int index) {
  std::uint64_t x = run_seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(index) + 1;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

int sample_categorical(std::span<const double> logits, std::mt19937_64& rng) {
  const auto p = softmax_values(logits);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(p.size() - 1);
}

int argmax(std::span<const double> values) {
  return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

RolloutCollector::RolloutCollector(std::vector<std::unique_ptr<Environment>> envs, std::uint64_t seed, int workers)
    : envs_(std::move(envs)), workers_(std::max(1, workers)) {
  for (std::size_t e = 0; e < envs_.size(); ++e) {
    current_.push_back(envs_[e]->reset());
    running_return_.push_back(0.0);
    rngs_.emplace_back(env_seed(seed ^ 0xa5a5a5a5ULL, static_cast<int>(e)));
  }
}

RolloutBatch RolloutCollector::collect(PolicyNetwork& net, int steps) {
  const std::size_t E = envs_.size(), T = static_cast<std::size_t>(steps);
  RolloutBatch b;
  b.envs = E;
  b.steps = T;
  b.observations.resize(E * T);
  b.actions.resize(E * T);
  b.log_probs.resize(E * T);
  b.values.resize(E * T);
  b.rewards.resize(E * T);
  b.dones.resize(E * T);
  b.next_values.resize(E * T);
  b.entropies.resize(E * T);
  b.open_progress.resize(E);
  std::vector<std::vector<EpisodeRecord>> finished(E);

  const auto run_env = [&](std::size_t e) {
    Environment& env = *envs_[e];
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t i = t * E + e;
      const PolicyOutput out = net.evaluate(current_[e]);
      const auto logits = out.logits.data();
      check_logits(logits, e, t);
      const int a = sample_categorical(logits, rngs_[e]);
      b.observations[i] = current_[e];
      b.actions[i] = a;
      b.log_probs[i] = logits[static_cast<std::size_t>(a)] - log_sum_exp(logits);
      b.values[i] = out.value;
      b.entropies[i] = entropy_of(logits);
      if (t > 0 && !b.dones[i - E]) b.next_values[i - E] = out.value;
      StepResult r = env.step(a);
      b.rewards[i] = r.reward;
      running_return_[e] += r.reward;
      if (r.done) {
        b.dones[i] = 1;
        b.next_values[i] = r.terminal ? 0.0 : net.evaluate(r.observation).value;
        const EpisodeOutcome o = env.outcome();
        finished[e].push_back({o.status, o.progress_fraction, running_return_[e], o.steps});
        running_return_[e] = 0.0;
        current_[e] = env.reset();
      } else {
        current_[e] = std::move(r.observation);
      }
    }
    const std::size_t last = (T - 1) * E + e;
    if (!b.dones[last]) b.next_values[last] = net.evaluate(current_[e]).value;
    b.open_progress[e] = env.outcome().progress_fraction;
  };

  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(workers_), E);
  if (workers <= 1) {
    for (std::size_t e = 0; e < E; ++e) run_env(e);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t e = w; e < E; e += workers) run_env(e);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& err : errors)
      if (err) std::rethrow_exception(err);
  }
  for (auto& f : finished) b.episodes.insert(b.episodes.end(), f.begin(), f.end());
  return b;
}

Advantages gae_advantages(std::span<const double> rewards, std::span<const double> values,
                          std::span<const double> next_values, std::span<const std::uint8_t> dones, std::size_t envs,
                          double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || next_values.size() != n || dones.size() != n || envs == 0 || n % envs != 0)
    throw DimensionError("gae_advantages: misaligned batch arrays");
  Advantages out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  const std::size_t T = n / envs;
  for (std::size_t e = 0; e < envs; ++e) {
    double running = 0.0;
    for (std::size_t t = T; t-- > 0;) {
      const std::size_t i = t * envs + e;
      const double delta = rewards[i] + gamma * next_values[i] - values[i];
      running = delta + (dones[i] ? 0.0 : gamma * lambda * running);
      out.advantages[i] = running;
      out.returns[i] = running + values[i];
    }
  }
  return out;
}

Advantages gae_advantages(const RolloutBatch& b, double gamma, double lambda, double reward_scale) {
  if (reward_scale == 1.0) return gae_advantages(b.rewards, b.values, b.next_values, b.dones, b.envs, gamma, lambda);
  std::vector<double> scaled(b.rewards);
  for (double& r : scaled) r *= reward_scale;
  return gae_advantages(scaled, b.values, b.next_values, b.dones, b.envs, gamma, lambda);
}

void normalize(std::span<double> v) {
  if (v.size() < 2) return;
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / static_cast<double>(v.size()));
  for (double& x : v) x = (x - mean) / (sd + 1e-12);
}

double clipped_surrogate(std::span<const double> new_lp, std::span<const double> old_lp, std::span<const double> adv,
                         double eps) {
  if (new_lp.size() != old_lp.size() || new_lp.size() != adv.size() || new_lp.empty())
    throw DimensionError("clipped_surrogate: inputs must share a non-zero length");
  double total = 0.0;
  for (std::size_t i = 0; i < new_lp.size(); ++i) {
    const double r = std::exp(new_lp[i] - old_lp[i]);
    total += std::min(r * adv[i], std::clamp(r, 1.0 - eps, 1.0 + eps) * adv[i]);
  }
  return -total / static_cast<double>(new_lp.size());
}

Var clipped_objective(Var new_log_prob, double old_log_prob, double advantage, double eps) {
  Var ratio = exp(add_scalar(new_log_prob, -old_log_prob));
  return minimum(scale(ratio, advantage), scale(clamp(ratio, 1.0 - eps, 1.0 + eps), advantage));
}

UpdateStats ppo_update(PolicyNetwork& net, AdamState& adam, const RolloutBatch& batch, const PPOConfig& config,
                       std::mt19937_64& rng) {
  Advantages adv = gae_advantages(batch, config.gamma, config.lambda, config.reward_scale);
  normalize(adv.advantages);
  UpdateStats stats;
  {
    const auto& a = adv.advantages;
    stats.advantage_mean = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(a.size());
    double var = 0.0;
    for (double x : a) var += (x - stats.advantage_mean) * (x - stats.advantage_mean);
    stats.advantage_std = std::sqrt(var / static_cast<double>(a.size()));
  }
  const std::size_t n = batch.size(), mb = static_cast<std::size_t>(config.minibatch);
  std::vector<std::size_t> order(n);
  int updates = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < n; start += mb) {
      const std::size_t stop = std::min(n, start + mb);
      const double m = static_cast<double>(stop - start);
      net.zero_grad();
      Tape tape;
      Var total;
      double policy_sum = 0.0, value_sum = 0.0;
      for (std::size_t k = start; k < stop; ++k) {
        const std::size_t i = order[k];
        const auto g = net.forward(tape, batch.observations[i]);
        Var lp = categorical_log_prob(g.logits, static_cast<std::size_t>(batch.actions[i]));
        if (epoch == 0 && start == 0)
          stats.first_ratio_deviation =
              std::max(stats.first_ratio_deviation, std::abs(std::exp(lp.item() - batch.log_probs[i]) - 1.0));
        Var obj = clipped_objective(lp, batch.log_probs[i], adv.advantages[i], config.clip);
        Var vloss = square(add_scalar(g.value, -adv.returns[i]));
        Var ent = categorical_entropy(g.logits);
        policy_sum -= obj.item();
        value_sum += vloss.item();
        Var term = sub(add(scale(obj, -1.0), scale(vloss, config.value_coef)), scale(ent, config.entropy_coef));
        total = total.valid() ? add(total, term) : term;
      }
      Var loss = scale(total, 1.0 / m);
      if (!std::isfinite(loss.item())) throw NumericError("non-finite PPO loss; update aborted");
      tape.backward(loss);
      if (config.max_grad_norm > 0.0) {
        double sq = 0.0;
        for (const auto& p : net.parameters())
          for (double g : p.grad) sq += g * g;
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm; update aborted");
        if (norm > config.max_grad_norm) {
          const double f = config.max_grad_norm / norm;
          for (auto& p : net.parameters())
            for (double& g : p.grad) g *= f;
        }
      }
      adam_step(net.parameters(), adam);
      stats.policy_loss += policy_sum / m;
      stats.value_loss += value_sum / m;
      ++updates;
    }
  }
  stats.policy_loss /= updates;
  stats.value_loss /= updates;
  return stats;
}

std::string metrics_row(const IterationMetrics& m) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%d,%lld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", m.iteration,
                static_cast<long long>(m.env_steps), m.mean_reward, m.mean_progress, m.entropy, m.policy_loss,
                m.value_loss, m.completion_rate);
  return buf;
}

TrainResult train(const PPOConfig& config, const NetworkSpec& spec, const EnvFactory& make_env,
                  const TrainOptions& options) {
  config.validate();
  spec.validate();
  TrainResult result;
  result.network = PolicyNetwork(spec, env_seed(config.seed, -1));
  PolicyNetwork& net = result.network;

  std::vector<std::unique_ptr<Environment>> envs;
  for (int e = 0; e < config.envs; ++e) {
    envs.push_back(make_env(e, env_seed(config.seed, e)));
    if (envs.back()->action_count() != spec.action_count())
      throw ConfigError("environment has " + std::to_string(envs.back()->action_count()) +
                        " actions but the network outputs " + std::to_string(spec.action_count()));
  }
  RolloutCollector collector(std::move(envs), config.seed, config.workers);
  AdamState adam;
  adam.config.learning_rate = config.learning_rate;
  std::mt19937_64 rng(env_seed(config.seed, -2));

  std::ofstream metrics;
  if (!options.metrics_path.empty()) {
    const auto parent = std::filesystem::path(options.metrics_path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    metrics.open(options.metrics_path);
    if (!metrics) throw ConfigError("cannot write metrics to " + options.metrics_path);
    metrics << kMetricsHeader << '\n';
  }
  if (!options.checkpoint_dir.empty()) std::filesystem::create_directories(options.checkpoint_dir);

  int streak = 0;
  std::int64_t env_steps = 0;
  for (int it = 1; it <= config.iterations; ++it) {
    RolloutBatch batch = collector.collect(net, config.steps_per_env);
    UpdateStats stats;
    try {
      stats = ppo_update(net, adam, batch, config, rng);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " at iteration " + std::to_string(it) +
                         (it > 1 && !options.checkpoint_dir.empty()
                              ? "; last good checkpoint ckpt_" + std::to_string(it - 1) + ".dacn"
                              : ""));
    }
    env_steps += static_cast<std::int64_t>(batch.size());

    IterationMetrics m;
    m.iteration = it;
    m.env_steps = env_steps;
    m.mean_reward = std::accumulate(batch.rewards.begin(), batch.rewards.end(), 0.0) / static_cast<double>(batch.size());
    m.entropy = std::accumulate(batch.entropies.begin(), batch.entropies.end(), 0.0) / static_cast<double>(batch.size());
    m.policy_loss = stats.policy_loss;
    m.value_loss = stats.value_loss;
    m.first_ratio_deviation = stats.first_ratio_deviation;
    m.advantage_mean = stats.advantage_mean;
    m.advantage_std = stats.advantage_std;
    m.episodes = static_cast<int>(batch.episodes.size());
    if (!batch.episodes.empty()) {
      int laps = 0;
      double progress = 0.0;
      for (const auto& ep : batch.episodes) {
        laps += ep.status == EpisodeStatus::lap_complete;
        progress += ep.progress_fraction;
      }
      m.completion_rate = static_cast<double>(laps) / static_cast<double>(batch.episodes.size());
      m.mean_progress = progress / static_cast<double>(batch.episodes.size());
    } else {
      m.mean_progress = std::accumulate(batch.open_progress.begin(), batch.open_progress.end(), 0.0) /
                        static_cast<double>(batch.open_progress.size());
    }

    if (metrics.is_open()) metrics << metrics_row(m) << '\n' << std::flush;
    if (!options.checkpoint_dir.empty())
      net.save((std::filesystem::path(options.checkpoint_dir) / ("ckpt_" + std::to_string(it) + ".dacn")).string());
    result.history.push_back(m);
    if (options.on_iteration) options.on_iteration(m);

    streak = m.completion_rate >= config.convergence_threshold ? streak + 1 : 0;
    if (streak >= config.convergence_window && !result.converged_at) result.converged_at = it;
    if (config.stop_after_converged > 0 && streak >= config.stop_after_converged) break;
  }
  return result;
}

TrainResult train(const PPOConfig& config, const NetworkSpec& spec, const EnvConfig& env,
                  const TrainOptions& options) {
  const Track track = resolve_track(env.track);
  return train(
      config, spec,
      [&](int, std::uint64_t seed) -> std::unique_ptr<Environment> { return std::make_unique<RacingEnv>(env, track, seed); },
      options);
}

}  // namespace attnracer
