#pragma once

// JSON experiment file: world, vehicle, camera, network, PPO and the
// transfer grid in one document. Unknown keys are rejected.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "attnracer/env.hpp"
#include "attnracer/policy.hpp"
#include "attnracer/ppo.hpp"

namespace attnracer {

struct TransferPolicySpec {
  std::string domain;
  std::string checkpoint;
  std::uint64_t seed = 0;
};

struct TransferConfig {
  std::vector<TransferPolicySpec> policies;
  std::vector<std::string> eval_domains{"asphalt", "concrete", "carpet", "wood", "spotlight"};
  int episodes = 5;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::string appearance = "asphalt";
  std::string network_preset = "shallow";
  EnvConfig env;
  NetworkSpec network;  // resolved: preset + overrides, sized to camera and action grid
  PPOConfig ppo;
  TransferConfig transfer;
};

/// Parses and validates; ConfigError names the offending key.
ExperimentConfig parse_experiment(const std::string& json_text);
ExperimentConfig load_experiment(const std::string& path);
/// Fully resolved document; parse_experiment(experiment_to_json(c)) reproduces c.
std::string experiment_to_json(const ExperimentConfig& config);

/// Value of ATTNRACER_SEED, if set. Throws ConfigError when it is not an unsigned integer.
std::optional<std::uint64_t> seed_override();
/// Applies ATTNRACER_SEED to the experiment and PPO seeds.
void apply_seed_override(ExperimentConfig& config);

}  // namespace attnracer
