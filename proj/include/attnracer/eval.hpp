#pragma once

// Greedy evaluation, sim2sim transfer reports and saliency maps.

#include <cstdint>
#include <string>
#include <vector>

#include "attnracer/env.hpp"
#include "attnracer/policy.hpp"

namespace attnracer {

struct EvalMetrics {
  double completion_rate = 0.0;
  double mean_progress = 0.0;
  double mean_speed = 0.0;  // averaged over every step of every episode
  int episodes = 0;
  int off_track_count = 0;
  int crash_count = 0;
  double mean_cars_passed = 0.0;

  bool operator==(const EvalMetrics&) const = default;
};

struct EvalResult {
  EvalMetrics metrics;
  std::vector<EpisodeOutcome> outcomes;
};

/// Runs `episodes` greedy (argmax) episodes in a RacingEnv seeded with `seed`.
/// Throws ConfigError when the network does not fit the camera or action grid.
EvalResult evaluate(PolicyNetwork& net, const EnvConfig& env, int episodes, std::uint64_t seed);
EvalResult evaluate(const std::string& checkpoint, const EnvConfig& env, int episodes, std::uint64_t seed);
/// Aggregates raw outcomes; mean speed is taken as given.
EvalMetrics summarize(std::span<const EpisodeOutcome> outcomes, double mean_speed);

/// One (train domain, eval domain, seed) evaluation.
struct TransferCell {
  std::string train;
  std::string eval;
  std::uint64_t seed = 0;
  EvalMetrics metrics;

  bool operator==(const TransferCell&) const = default;
};

struct TransferReport {
  std::vector<TransferCell> cells;

  /// Cells pooled over seeds per (train, eval) pair, in first-seen order; the
  /// pooled seed field is 0.
  std::vector<TransferCell> pooled() const;
  std::string to_csv() const;
  static TransferReport from_csv(const std::string& text);
  std::string to_json() const;
  /// Fixed-width table of the pooled cells.
  std::string to_table() const;
};

struct TrainedPolicy {
  std::string domain;  // appearance the policy was trained on
  std::uint64_t seed = 0;
  PolicyNetwork* network = nullptr;
};

/// Evaluates every policy on every eval domain with the policy's seed. Each
/// eval domain is an appearance preset name applied to `base`.
TransferReport transfer_matrix(std::span<const TrainedPolicy> policies, std::span<const std::string> eval_domains,
                               const EnvConfig& base, int episodes);

enum class SaliencySource { grad_cam, attention };
enum class SaliencyTarget { action_logit, value };

struct SaliencyMap {
  SaliencySource source = SaliencySource::grad_cam;
  Tensor raw;      // [H', W'] before normalization
  Tensor heatmap;  // [H', W'] in [0, 1]
  Tensor overlay;  // [H, W] bilinear upsample of the heatmap
  bool all_zero = false;
  int action = -1;  // explained action for the logit target
};

/// ReLU(sum_k w_k A^k) with w_k the spatial mean of grad[k]; activations and
/// gradients are [K, H', W'].
Tensor grad_cam_map(const Tensor& activations, const Tensor& gradients);
/// Min-max scaling to [0, 1]. A constant positive map becomes all ones, an
/// all-zero map stays zero and sets `all_zero`.
Tensor normalize_map(const Tensor& map, bool* all_zero = nullptr);
/// Bilinear resize of [h, w] to [H, W] with pixel-center alignment.
Tensor upsample_bilinear(const Tensor& map, std::size_t height, std::size_t width);

/// Grad-CAM over the last conv map. `action` < 0 explains the greedy action.
SaliencyMap grad_cam(PolicyNetwork& net, const Tensor& observation,
                     SaliencyTarget target = SaliencyTarget::action_logit, int action = -1);
/// Attention weights laid out on the final conv grid. Throws
/// UnsupportedOperation for networks without attention.
SaliencyMap attention_heatmap(PolicyNetwork& net, const Tensor& observation);

/// Heatmap blended over the observation with a red-yellow ramp, [3, H, W].
Tensor overlay_image(const Tensor& observation, const SaliencyMap& map, double opacity = 0.5);

}  // namespace attnracer
