#pragma once

// Clipped PPO over a categorical action space: rollout collection, GAE,
// minibatch updates, metrics log and per-iteration checkpoints.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "attnracer/env.hpp"
#include "attnracer/policy.hpp"

namespace attnracer {

struct PPOConfig {
  double clip = 0.2;
  double gamma = 0.99;
  double lambda = 0.95;
  int epochs = 4;
  int minibatch = 64;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double learning_rate = 3e-4;
  double max_grad_norm = 0.5;  // <= 0 disables clipping
  /// Multiplies rewards before advantage and return estimation so value
  /// targets stay O(1); logged rewards are unscaled.
  double reward_scale = 0.1;
  int iterations = 300;
  int envs = 4;
  int steps_per_env = 256;
  int workers = 1;
  std::uint64_t seed = 0;
  /// Stop early after this many consecutive iterations at or above the
  /// completion threshold; 0 never stops early.
  int stop_after_converged = 0;
  int convergence_window = 3;
  double convergence_threshold = 0.8;

  void validate() const;
};

struct EpisodeRecord {
  EpisodeStatus status = EpisodeStatus::running;
  double progress_fraction = 0.0;
  double episode_return = 0.0;
  std::int64_t steps = 0;
};

/// Step-major layout: entry t * envs + e is step t of environment e.
struct RolloutBatch {
  std::size_t envs = 0;
  std::size_t steps = 0;
  std::vector<Tensor> observations;
  std::vector<int> actions;
  std::vector<double> log_probs;
  std::vector<double> values;
  std::vector<double> rewards;
  std::vector<std::uint8_t> dones;
  /// Value estimate of the state after each step: 0 after a terminal step,
  /// V(final frame) after a truncated one, V(next) otherwise.
  std::vector<double> next_values;
  std::vector<double> entropies;
  std::vector<EpisodeRecord> episodes;  // episodes that ended during collection
  std::vector<double> open_progress;    // progress of each env's unfinished episode

  std::size_t size() const { return actions.size(); }
};

/// Drives a set of environments with the current policy and remembers each
/// environment's running episode across calls.
class RolloutCollector {
 public:
  RolloutCollector(std::vector<std::unique_ptr<Environment>> envs, std::uint64_t seed, int workers = 1);

  RolloutBatch collect(PolicyNetwork& net, int steps);
  std::size_t env_count() const { return envs_.size(); }
  Environment& env(std::size_t i) { return *envs_[i]; }

 private:
  std::vector<std::unique_ptr<Environment>> envs_;
  std::vector<Tensor> current_;
  std::vector<double> running_return_;
  std::vector<std::mt19937_64> rngs_;
  int workers_;
};

/// Samples an index from softmax(logits) with one uniform draw.
int sample_categorical(std::span<const double> logits, std::mt19937_64& rng);
int argmax(std::span<const double> values);

struct Advantages {
  std::vector<double> advantages;
  std::vector<double> returns;
};

/// GAE over a step-major batch. `next_values` carries the bootstrap for the
/// tail and for truncated episodes; `dones` stops the recursion.
Advantages gae_advantages(std::span<const double> rewards, std::span<const double> values,
                          std::span<const double> next_values, std::span<const std::uint8_t> dones, std::size_t envs,
                          double gamma, double lambda);
Advantages gae_advantages(const RolloutBatch& batch, double gamma, double lambda, double reward_scale = 1.0);

/// In-place (x - mean) / std; leaves a single sample unchanged.
void normalize(std::span<double> values);

/// -mean_t min(r_t A_t, clip(r_t, 1 - eps, 1 + eps) A_t), r_t = exp(new_t - old_t).
double clipped_surrogate(std::span<const double> new_log_probs, std::span<const double> old_log_probs,
                         std::span<const double> advantages, double eps);
/// Un-negated per-sample objective on the tape.
Var clipped_objective(Var new_log_prob, double old_log_prob, double advantage, double eps);

struct IterationMetrics {
  int iteration = 0;
  std::int64_t env_steps = 0;
  double mean_reward = 0.0;
  double mean_progress = 0.0;
  double entropy = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double completion_rate = 0.0;
  int episodes = 0;
  /// Ratio at epoch 0, minibatch 0; equals 1 since parameters are unchanged.
  double first_ratio_deviation = 0.0;
  double advantage_mean = 0.0;
  double advantage_std = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "iteration,env_steps,mean_reward,mean_progress,entropy,policy_loss,value_loss,completion_rate";
std::string metrics_row(const IterationMetrics& m);

struct UpdateStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double first_ratio_deviation = 0.0;
  double advantage_mean = 0.0;
  double advantage_std = 0.0;
};

/// Epochs of shuffled minibatch updates on one batch.
UpdateStats ppo_update(PolicyNetwork& net, AdamState& adam, const RolloutBatch& batch, const PPOConfig& config,
                       std::mt19937_64& rng);

struct TrainOptions {
  std::string metrics_path;    // empty: no CSV
  std::string checkpoint_dir;  // empty: no checkpoints
  std::function<void(const IterationMetrics&)> on_iteration;
};

struct TrainResult {
  PolicyNetwork network;
  std::vector<IterationMetrics> history;
  /// First iteration that closed a window of consecutive iterations at or
  /// above the completion threshold.
  std::optional<int> converged_at;
};

using EnvFactory = std::function<std::unique_ptr<Environment>(int index, std::uint64_t seed)>;

TrainResult train(const PPOConfig& config, const NetworkSpec& spec, const EnvFactory& make_env,
                  const TrainOptions& options = {});
TrainResult train(const PPOConfig& config, const NetworkSpec& spec, const EnvConfig& env,
                  const TrainOptions& options = {});

/// Seed of the environment with the given index under a run seed.
std::uint64_t env_seed(std::uint64_t run_seed, int index);

}  // namespace attnracer
