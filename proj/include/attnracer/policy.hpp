#pragma once

// Attention CNN policy (conv annotations -> per-location MLP scores ->
// softmax weights -> context vector -> policy/value heads) and the plain CNN
// baseline that flattens the same feature map instead of attending.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "attnracer/tensor.hpp"

namespace attnracer {

struct ConvLayerSpec {
  int out_channels = 16;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
};

enum class AttentionKind { none, mlp };

struct NetworkSpec {
  int in_channels = 3;
  int height = 48;
  int width = 64;
  std::vector<ConvLayerSpec> conv;
  AttentionKind attention = AttentionKind::mlp;
  int attention_hidden = 64;
  int attention_depth = 1;  // 1 or 2
  int head_hidden = 64;
  int steer_bins = 5;
  int throttle_bins = 3;

  int action_count() const { return steer_bins * throttle_bins; }
  /// (channels, height, width) of the last conv map. Throws ConfigError if a layer does not fit.
  std::array<int, 3> feature_shape() const;
  int annotation_count() const { auto s = feature_shape(); return s[1] * s[2]; }
  int annotation_dim() const { return feature_shape()[0]; }
  void validate() const;
};

/// Presets: "shallow", "deep" (two scoring layers), "granular" (256 hidden
/// scoring units), "deep-cnn" (five conv layers, no attention), "baseline"
/// (the shallow conv stack flattened, no attention) and "baseline-matched".
NetworkSpec network_preset(const std::string& name);
std::vector<std::string> network_preset_names();
/// Baseline on the same conv stack plus a 1x1 channel-reducing conv layer, its
/// width chosen so the parameter count is closest to that of `reference`.
NetworkSpec parameter_matched_baseline(const NetworkSpec& reference);
std::size_t parameter_count(const NetworkSpec& spec);

struct AttentionOutput {
  Tensor weights;  // [L]
  Tensor context;  // [D]
  Tensor scores;   // [L], scores of the last scoring layer
};

struct PolicyOutput {
  Tensor logits;  // [A]
  double value = 0.0;
};

/// Weights of one per-location scoring MLP D -> hidden -> 1 (tanh hidden).
/// The output layer has no bias: softmax ignores a shift shared by all scores.
struct ScoringMlp {
  Var w1, b1, w2;
};

struct AttentionVars {
  Var scores;   // [L]
  Var weights;  // [L]
  Var context;  // [D]
};

/// Per-location scores, softmax weights and context of annotations [L, D].
/// Each extra layer scores the annotations re-weighted by L * (previous weights).
AttentionVars attend(Var annotations, std::span<const ScoringMlp> layers);

/// Context sum_i alpha_i a_i of annotations [L, D].
Tensor weighted_context(const Tensor& annotations, std::span<const double> alpha);
/// sum_i alpha_i (a_i - target_i). Diagnostic only. Throws DimensionError on
/// shape mismatch and ContractError when alpha is not on the simplex.
Tensor full_image_error(const Tensor& annotations, const Tensor& target, std::span<const double> alpha);

class PolicyNetwork {
 public:
  struct Graph {
    Var feature_map;   // [D, H', W'] last conv output
    Var annotations;   // [L, D]
    std::optional<AttentionVars> attention;
    Var logits;        // [A]
    Var value;         // scalar
  };

  PolicyNetwork() = default;
  PolicyNetwork(NetworkSpec spec, std::uint64_t seed);

  const NetworkSpec& spec() const { return spec_; }
  std::span<Parameter> parameters() { return params_; }
  std::span<const Parameter> parameters() const { return params_; }
  Parameter& parameter(const std::string& name);
  std::size_t parameter_count() const;
  bool has_attention() const { return spec_.attention != AttentionKind::none; }

  /// Records the forward pass of one observation [C, H, W] on `tape`.
  Graph forward(Tape& tape, const Tensor& observation);
  Graph forward(Tape& tape, Var observation);
  /// Forward without keeping the tape.
  PolicyOutput evaluate(const Tensor& observation, AttentionOutput* attention = nullptr);
  /// Final conv map reshaped to [L, D].
  Tensor annotations(const Tensor& observation);

  void zero_grad();
  void save(const std::string& path) const;
  static PolicyNetwork load(const std::string& path);
  /// Copies parameter values from a network with the same spec.
  void copy_from(const PolicyNetwork& other);

 private:
  void add(const std::string& name, Shape shape);
  std::size_t index_of(const std::string& name) const;

  NetworkSpec spec_;
  std::vector<Parameter> params_;
};

Tensor encode_spec(const NetworkSpec& spec);
NetworkSpec decode_spec(const Tensor& t);

}  // namespace attnracer
