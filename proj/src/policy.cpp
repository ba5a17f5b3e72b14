#include "attnracer/policy.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "attnracer/errors.hpp"

namespace attnracer {

namespace {

int conv_out(int n, const ConvLayerSpec& l) { return (n + 2 * l.padding - l.kernel) / l.stride + 1; }

std::vector<ConvLayerSpec> default_conv() { return {{16, 5, 2, 1}, {32, 3, 2, 0}, {64, 3, 2, 0}}; }

// Rows of a [rows, cols] matrix (or columns when rows > cols) made orthonormal
// by Gram-Schmidt on Gaussian draws, then scaled by `gain`.
void orthogonal_init(Tensor& w, double gain, std::mt19937_64& rng) {
  const std::size_t rows = w.dim(0), cols = w.size() / rows;
  const bool by_rows = rows <= cols;
  const std::size_t count = by_rows ? rows : cols, len = by_rows ? cols : rows;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> basis;
  while (basis.size() < count) {
    std::vector<double> v(len);
    for (auto& x : v) x = normal(rng);
    for (const auto& b : basis) {
      double d = 0.0;
      for (std::size_t i = 0; i < len; ++i) d += v[i] * b[i];
      for (std::size_t i = 0; i < len; ++i) v[i] -= d * b[i];
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-6) continue;
    for (auto& x : v) x /= n;
    basis.push_back(std::move(v));
  }
  auto data = w.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) data[r * cols + c] = gain * (by_rows ? basis[r][c] : basis[c][r]);
}

std::size_t head_params(std::size_t features, std::size_t hidden, std::size_t actions) {
  return features * hidden + hidden + actions * hidden + actions + hidden + 1;
}

std::size_t conv_params(const NetworkSpec& s) {
  std::size_t n = 0;
  int c = s.in_channels;
  for (const auto& l : s.conv) {
    n += static_cast<std::size_t>(l.out_channels) * (static_cast<std::size_t>(c * l.kernel * l.kernel) + 1);
    c = l.out_channels;
  }
  return n;
}

}  // namespace

std::array<int, 3> NetworkSpec::feature_shape() const {
  int h = height, w = width, c = in_channels;
  for (std::size_t i = 0; i < conv.size(); ++i) {
    h = conv_out(h, conv[i]);
    w = conv_out(w, conv[i]);
    if (h < 1 || w < 1) throw ConfigError("conv layer " + std::to_string(i) + " leaves no output for the input size");
    c = conv[i].out_channels;
  }
  return {c, h, w};
}

void NetworkSpec::validate() const {
  if (conv.empty()) throw ConfigError("network needs at least one conv layer");
  if (in_channels < 1 || height < 1 || width < 1) throw ConfigError("network input shape must be positive");
  for (const auto& l : conv)
    if (l.out_channels < 1 || l.kernel < 1 || l.stride < 1 || l.padding < 0) throw ConfigError("invalid conv layer");
  if (attention == AttentionKind::mlp && (attention_depth < 1 || attention_depth > 2))
    throw ConfigError("attention depth must be 1 or 2");
  if (attention_hidden < 1 || head_hidden < 1) throw ConfigError("hidden sizes must be positive");
  if (steer_bins < 1 || throttle_bins < 1) throw ConfigError("action bins must be positive");
  feature_shape();
}

NetworkSpec network_preset(const std::string& name) {
  NetworkSpec s;
  s.conv = default_conv();
  if (name == "shallow") return s;
  if (name == "deep") {
    s.attention_depth = 2;
  } else if (name == "granular") {
    s.attention_hidden = 256;
  } else if (name == "deep-cnn") {
    s.conv.push_back({64, 3, 1, 1});
    s.conv.push_back({64, 3, 1, 1});
    s.attention = AttentionKind::none;
  } else if (name == "baseline") {
    s.attention = AttentionKind::none;
  } else if (name == "baseline-matched") {
    return parameter_matched_baseline(s);
  } else {
    throw ConfigError("unknown network preset: " + name);
  }
  return s;
}

std::vector<std::string> network_preset_names() { return {"shallow", "deep", "granular", "deep-cnn", "baseline", "baseline-matched"}; }

std::size_t parameter_count(const NetworkSpec& s) {
  const auto f = s.feature_shape();
  const auto d = static_cast<std::size_t>(f[0]), l = static_cast<std::size_t>(f[1] * f[2]);
  const auto a = static_cast<std::size_t>(s.action_count()), h = static_cast<std::size_t>(s.head_hidden);
  std::size_t n = conv_params(s);
  if (s.attention == AttentionKind::none) return n + head_params(d * l, h, a);
  const auto ah = static_cast<std::size_t>(s.attention_hidden);
  n += static_cast<std::size_t>(s.attention_depth) * (ah * d + ah + ah);
  return n + head_params(d, h, a);
}

NetworkSpec parameter_matched_baseline(const NetworkSpec& reference) {
  NetworkSpec b = reference;
  b.attention = AttentionKind::none;
  b.attention_depth = 1;
  b.conv.push_back({1, 1, 1, 0});
  const std::size_t target = parameter_count(reference);
  std::size_t best_gap = std::numeric_limits<std::size_t>::max();
  int best = 1;
  for (int c = 1; c <= reference.feature_shape()[0]; ++c) {
    b.conv.back().out_channels = c;
    const std::size_t n = parameter_count(b);
    const std::size_t gap = n > target ? n - target : target - n;
    if (gap < best_gap) {
      best_gap = gap;
      best = c;
    }
  }
  b.conv.back().out_channels = best;
  return b;
}

AttentionVars attend(Var annotations, std::span<const ScoringMlp> layers) {
  if (layers.empty()) throw ConfigError("attention needs at least one scoring layer");
  const std::size_t l = annotations.shape()[0];
  Var scored = annotations;
  AttentionVars out;
  for (std::size_t j = 0; j < layers.size(); ++j) {
    const auto& m = layers[j];
    Var hidden = tanh(linear_rows(scored, m.w1, m.b1));
    out.scores = reshape(linear_rows(hidden, m.w2, m.w2.tape()->constant(Tensor({1}))), {l});
    out.weights = softmax(out.scores);
    if (j + 1 < layers.size()) scored = scale_rows(annotations, scale(out.weights, static_cast<double>(l)));
  }
  out.context = weighted_sum(out.weights, annotations);
  return out;
}

Tensor weighted_context(const Tensor& annotations, std::span<const double> alpha) {
  if (annotations.rank() != 2 || annotations.dim(0) != alpha.size())
    throw DimensionError("weighted_context: annotations " + shape_string(annotations.shape()) + " vs " +
                         std::to_string(alpha.size()) + " weights");
  const std::size_t l = annotations.dim(0), d = annotations.dim(1);
  Tensor out({d});
  const auto a = annotations.data();
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t k = 0; k < d; ++k) out[k] += alpha[i] * a[i * d + k];
  return out;
}

Tensor full_image_error(const Tensor& annotations, const Tensor& target, std::span<const double> alpha) {
  if (annotations.shape() != target.shape())
    throw DimensionError("full_image_error: annotations " + shape_string(annotations.shape()) + " vs target " +
                         shape_string(target.shape()));
  if (annotations.rank() != 2 || annotations.dim(0) != alpha.size())
    throw DimensionError("full_image_error: expected " + std::to_string(annotations.dim(0)) + " weights, got " +
                         std::to_string(alpha.size()));
  double total = 0.0;
  for (double a : alpha) {
    if (!(a >= 0.0)) throw ContractError("full_image_error: weights must be non-negative");
    total += a;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("full_image_error: weights must sum to 1");
  const std::size_t l = annotations.dim(0), d = annotations.dim(1);
  Tensor out({d});
  const auto a = annotations.data(), t = target.data();
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t k = 0; k < d; ++k) out[k] += alpha[i] * (a[i * d + k] - t[i * d + k]);
  return out;
}

// ---------------------------------------------------------------------------

PolicyNetwork::PolicyNetwork(NetworkSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  std::mt19937_64 rng(seed);
  const double relu_gain = std::sqrt(2.0);
  int c = spec_.in_channels;
  for (std::size_t i = 0; i < spec_.conv.size(); ++i) {
    const auto& l = spec_.conv[i];
    const auto co = static_cast<std::size_t>(l.out_channels), k = static_cast<std::size_t>(l.kernel);
    add("conv" + std::to_string(i) + ".weight", {co, static_cast<std::size_t>(c), k, k});
    orthogonal_init(params_.back().value, relu_gain, rng);
    add("conv" + std::to_string(i) + ".bias", {co});
    c = l.out_channels;
  }
  const auto f = spec_.feature_shape();
  const auto d = static_cast<std::size_t>(f[0]), l = static_cast<std::size_t>(f[1] * f[2]);
  std::size_t features = d * l;
  if (has_attention()) {
    features = d;
    const auto ah = static_cast<std::size_t>(spec_.attention_hidden);
    for (int j = 0; j < spec_.attention_depth; ++j) {
      const std::string p = "attention" + std::to_string(j);
      add(p + ".w1", {ah, d});
      orthogonal_init(params_.back().value, 1.0, rng);
      add(p + ".b1", {ah});
      add(p + ".w2", {1, ah});
      orthogonal_init(params_.back().value, 0.1, rng);
    }
  }
  const auto h = static_cast<std::size_t>(spec_.head_hidden), a = static_cast<std::size_t>(spec_.action_count());
  add("head.weight", {h, features});
  orthogonal_init(params_.back().value, relu_gain, rng);
  add("head.bias", {h});
  add("policy.weight", {a, h});
  add("policy.bias", {a});
  add("value.weight", {1, h});
  orthogonal_init(params_.back().value, 1.0, rng);
  add("value.bias", {1});
}

void PolicyNetwork::add(const std::string& name, Shape shape) { params_.emplace_back(name, Tensor(std::move(shape))); }

std::size_t PolicyNetwork::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw ConfigError("no parameter named " + name);
}

Parameter& PolicyNetwork::parameter(const std::string& name) { return params_[index_of(name)]; }

std::size_t PolicyNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

PolicyNetwork::Graph PolicyNetwork::forward(Tape& tape, const Tensor& observation) {
  return forward(tape, tape.constant(observation));
}

PolicyNetwork::Graph PolicyNetwork::forward(Tape& tape, Var observation) {
  const Shape expected{static_cast<std::size_t>(spec_.in_channels), static_cast<std::size_t>(spec_.height),
                       static_cast<std::size_t>(spec_.width)};
  if (observation.shape() != expected)
    throw DimensionError("policy expects an observation of shape " + shape_string(expected) + ", got " +
                         shape_string(observation.shape()));
  Graph g;
  std::size_t p = 0;
  Var x = observation;
  for (std::size_t i = 0; i < spec_.conv.size(); ++i) {
    const auto& l = spec_.conv[i];
    Var k = tape.parameter(params_[p++]);
    Var b = tape.parameter(params_[p++]);
    x = add_channel_bias(conv2d(x, k, l.stride, l.padding), b);
    if (i + 1 < spec_.conv.size()) x = relu(x);
  }
  g.feature_map = x;
  const std::size_t d = x.shape()[0], l = x.shape()[1] * x.shape()[2];
  g.annotations = transpose(reshape(x, {d, l}));
  Var features;
  if (has_attention()) {
    std::vector<ScoringMlp> layers;
    for (int j = 0; j < spec_.attention_depth; ++j) {
      ScoringMlp m;
      m.w1 = tape.parameter(params_[p++]);
      m.b1 = tape.parameter(params_[p++]);
      m.w2 = tape.parameter(params_[p++]);
      layers.push_back(m);
    }
    g.attention = attend(g.annotations, layers);
    features = g.attention->context;
  } else {
    features = reshape(x, {d * l});
  }
  Var hw = tape.parameter(params_[p++]);
  Var hb = tape.parameter(params_[p++]);
  Var hidden = relu(dense(features, hw, hb));
  Var pw = tape.parameter(params_[p++]);
  Var pb = tape.parameter(params_[p++]);
  g.logits = dense(hidden, pw, pb);
  Var vw = tape.parameter(params_[p++]);
  Var vb = tape.parameter(params_[p++]);
  g.value = reshape(dense(hidden, vw, vb), {});
  return g;
}

PolicyOutput PolicyNetwork::evaluate(const Tensor& observation, AttentionOutput* attention) {
  Tape tape;
  Graph g = forward(tape, observation);
  if (attention && g.attention)
    *attention = {g.attention->weights.value(), g.attention->context.value(), g.attention->scores.value()};
  return {g.logits.value(), g.value.item()};
}

Tensor PolicyNetwork::annotations(const Tensor& observation) {
  Tape tape;
  return forward(tape, observation).annotations.value();
}

void PolicyNetwork::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void PolicyNetwork::copy_from(const PolicyNetwork& other) {
  if (other.params_.size() != params_.size()) throw ConfigError("copy_from: parameter lists differ");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (other.params_[i].value.shape() != params_[i].value.shape())
      throw ConfigError("copy_from: shape mismatch for " + params_[i].name);
    params_[i].value = other.params_[i].value;
  }
}

Tensor encode_spec(const NetworkSpec& s) {
  std::vector<double> v{static_cast<double>(s.in_channels), static_cast<double>(s.height),
                        static_cast<double>(s.width), static_cast<double>(s.conv.size())};
  for (const auto& l : s.conv) {
    v.push_back(l.out_channels);
    v.push_back(l.kernel);
    v.push_back(l.stride);
    v.push_back(l.padding);
  }
  v.push_back(s.attention == AttentionKind::mlp ? 1.0 : 0.0);
  v.push_back(s.attention_hidden);
  v.push_back(s.attention_depth);
  v.push_back(s.head_hidden);
  v.push_back(s.steer_bins);
  v.push_back(s.throttle_bins);
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

NetworkSpec decode_spec(const Tensor& t) {
  const auto v = t.data();
  std::size_t i = 0;
  const auto next = [&]() -> int {
    if (i >= v.size()) throw ConfigError("network spec record is truncated");
    return static_cast<int>(std::lround(v[i++]));
  };
  NetworkSpec s;
  s.in_channels = next();
  s.height = next();
  s.width = next();
  const int layers = next();
  if (layers < 1 || layers > 64) throw ConfigError("network spec record has a bad layer count");
  for (int k = 0; k < layers; ++k) {
    ConvLayerSpec l;
    l.out_channels = next();
    l.kernel = next();
    l.stride = next();
    l.padding = next();
    s.conv.push_back(l);
  }
  s.attention = next() ? AttentionKind::mlp : AttentionKind::none;
  s.attention_hidden = next();
  s.attention_depth = next();
  s.head_hidden = next();
  s.steer_bins = next();
  s.throttle_bins = next();
  s.validate();
  return s;
}

void PolicyNetwork::save(const std::string& path) const {
  std::vector<NamedTensor> records;
  records.push_back({"@spec", encode_spec(spec_)});
  for (const auto& p : params_) records.push_back({p.name, p.value});
  save_checkpoint(path, records);
}

PolicyNetwork PolicyNetwork::load(const std::string& path) {
  const auto records = load_checkpoint(path);
  const NamedTensor* spec = nullptr;
  for (const auto& r : records)
    if (r.name == "@spec") spec = &r;
  if (!spec) throw ConfigError(path + ": checkpoint has no network spec record");
  PolicyNetwork net(decode_spec(spec->tensor), 0);
  for (auto& p : net.params_) {
    const NamedTensor* found = nullptr;
    for (const auto& r : records)
      if (r.name == p.name) found = &r;
    if (!found) throw ConfigError(path + ": missing parameter " + p.name);
    if (found->tensor.shape() != p.value.shape())
      throw ConfigError(path + ": parameter " + p.name + " has shape " + shape_string(found->tensor.shape()) +
                        ", expected " + shape_string(p.value.shape()));
    p.value = found->tensor;
  }
  return net;
}

}  // namespace attnracer
