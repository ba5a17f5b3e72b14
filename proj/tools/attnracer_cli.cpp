// attnracer: train, evaluate, transfer, saliency and render-demo commands.
// Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "attnracer/config.hpp"
#include "attnracer/errors.hpp"
#include "attnracer/eval.hpp"
#include "attnracer/ppo.hpp"

using namespace attnracer;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << text;
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path)) throw ConfigError(std::string(what) + " not found: " + path);
}

int run_train(const std::string& config_path, int iterations) {
  ExperimentConfig cfg = load_experiment(config_path);
  apply_seed_override(cfg);
  if (iterations > 0) cfg.ppo.iterations = iterations;
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  write_text(out / "config.json", experiment_to_json(cfg));
  TrainOptions opts;
  opts.metrics_path = (out / "metrics.csv").string();
  opts.checkpoint_dir = out.string();
  opts.on_iteration = [](const IterationMetrics& m) {
    std::printf("iter %4d  steps %8lld  reward %.3f  progress %.3f  completion %.2f  entropy %.3f\n", m.iteration,
                static_cast<long long>(m.env_steps), m.mean_reward, m.mean_progress, m.completion_rate, m.entropy);
    std::fflush(stdout);
  };
  const TrainResult r = train(cfg.ppo, cfg.network, cfg.env, opts);
  r.network.save((out / "final.dacn").string());
  if (r.converged_at)
    std::printf("converged at iteration %d\n", *r.converged_at);
  else
    std::printf("did not converge in %zu iterations\n", r.history.size());
  std::printf("checkpoints and metrics in %s\n", out.string().c_str());
  return 0;
}

struct EvalArgs {
  std::string ckpt, track = "loop-A", appearance = "asphalt";
  int episodes = 5, bots = 0, max_steps = 1000;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

int run_eval(const EvalArgs& a) {
  require_file(a.ckpt, "checkpoint");
  EnvConfig env;
  env.track = a.track;
  env.appearance = appearance_preset(a.appearance);
  env.bot_count = a.bots;
  env.max_steps = a.max_steps;
  std::uint64_t seed = a.seed;
  if (!a.seed_given)
    if (const auto s = seed_override()) seed = *s;
  const EvalResult r = evaluate(a.ckpt, env, a.episodes, seed);
  for (std::size_t i = 0; i < r.outcomes.size(); ++i) {
    const auto& o = r.outcomes[i];
    std::printf("episode %zu: %-12s progress %.3f steps %lld cars passed %lld\n", i + 1, to_string(o.status),
                o.progress_fraction, static_cast<long long>(o.steps), static_cast<long long>(o.cars_passed));
  }
  const auto& m = r.metrics;
  std::printf("completion_rate %.3f  mean_progress %.3f  mean_speed %.3f  off_track %d  crashes %d\n",
              m.completion_rate, m.mean_progress, m.mean_speed, m.off_track_count, m.crash_count);
  return 0;
}

int run_transfer(const std::string& config_path) {
  ExperimentConfig cfg = load_experiment(config_path);
  apply_seed_override(cfg);
  if (cfg.transfer.policies.empty()) throw ConfigError("transfer.policies is empty in " + config_path);
  std::vector<PolicyNetwork> nets;
  nets.reserve(cfg.transfer.policies.size());
  std::vector<TrainedPolicy> policies;
  for (const auto& p : cfg.transfer.policies) {
    require_file(p.checkpoint, "checkpoint");
    nets.push_back(PolicyNetwork::load(p.checkpoint));
  }
  for (std::size_t i = 0; i < nets.size(); ++i)
    policies.push_back({cfg.transfer.policies[i].domain, cfg.transfer.policies[i].seed, &nets[i]});
  const TransferReport report = transfer_matrix(policies, cfg.transfer.eval_domains, cfg.env, cfg.transfer.episodes);
  const fs::path out = cfg.output_dir;
  write_text(out / "transfer.csv", report.to_csv());
  write_text(out / "transfer.json", report.to_json());
  std::cout << report.to_table();
  std::printf("report written to %s\n", (out / "transfer.csv").string().c_str());
  return 0;
}

struct SaliencyArgs {
  std::string ckpt, mode = "gradcam", obs = "live", out, target = "logit", track = "loop-A", appearance = "asphalt";
  std::uint64_t seed = 0;
};

int run_saliency(const SaliencyArgs& a) {
  require_file(a.ckpt, "checkpoint");
  PolicyNetwork net = PolicyNetwork::load(a.ckpt);
  Tensor obs;
  if (a.obs == "live") {
    EnvConfig env;
    env.track = a.track;
    env.appearance = appearance_preset(a.appearance);
    env.camera.width = net.spec().width;
    env.camera.height = net.spec().height;
    env.random_start = false;
    obs = RacingEnv(env, a.seed).observe();
  } else {
    require_file(a.obs, "observation");
    obs = read_ppm(a.obs);
    if (obs.dim(1) != static_cast<std::size_t>(net.spec().height) ||
        obs.dim(2) != static_cast<std::size_t>(net.spec().width))
      throw ConfigError(a.obs + " does not match the network input size");
  }
  SaliencyMap m;
  if (a.mode == "gradcam")
    m = grad_cam(net, obs, a.target == "value" ? SaliencyTarget::value : SaliencyTarget::action_logit);
  else
    m = attention_heatmap(net, obs);
  write_ppm(a.out, overlay_image(obs, m));
  std::printf("%s saliency%s written to %s\n", a.mode.c_str(), m.all_zero ? " (all-zero map)" : "", a.out.c_str());
  return 0;
}

struct DemoArgs {
  std::string track = "loop-A", out = "demo";
  std::vector<std::string> appearances;
  int frames = 1, bots = 0;
  std::uint64_t seed = 0;
};

int run_render_demo(const DemoArgs& a) {
  const auto names = a.appearances.empty() ? appearance_names() : a.appearances;
  fs::create_directories(a.out);
  for (const auto& name : names) {
    EnvConfig env;
    env.track = a.track;
    env.appearance = appearance_preset(name);
    env.bot_count = a.bots;
    env.random_start = false;
    RacingEnv world(env, a.seed);
    Tensor frame = world.observe();
    for (int f = 0; f < a.frames; ++f) {
      char numbered[32];
      std::snprintf(numbered, sizeof numbered, "_%04d.ppm", f);
      const std::string file = a.frames == 1 ? name + ".ppm" : name + numbered;
      write_ppm((fs::path(a.out) / file).string(), frame);
      // Drive straight at the middle speed between frames.
      StepResult r = world.step(env.steer_bins / 2 * env.throttle_bins + env.throttle_bins / 2);
      frame = r.done ? world.reset() : std::move(r.observation);
    }
    std::printf("%s: %d frame(s) in %s\n", name.c_str(), a.frames, a.out.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attnracer: attention-based racing policies trained with PPO"};
  app.require_subcommand(1);

  std::string config_path;
  int iterations = 0;
  auto* train_cmd = app.add_subcommand("train", "Train a policy from a JSON experiment config");
  train_cmd->add_option("--config", config_path, "Experiment config (JSON)")->required();
  train_cmd->add_option("--iterations", iterations, "Override ppo.iterations");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Greedy evaluation of a checkpoint");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--track", ev.track, "Built-in track name or track JSON file");
  eval_cmd->add_option("--appearance", ev.appearance, "Appearance preset");
  eval_cmd->add_option("--episodes", ev.episodes, "Number of episodes");
  auto* seed_opt = eval_cmd->add_option("--seed", ev.seed, "World seed");
  eval_cmd->add_option("--bots", ev.bots, "Bot cars (needs a two-lane track)");
  eval_cmd->add_option("--max-steps", ev.max_steps, "Episode step limit");

  std::string transfer_config;
  auto* transfer_cmd = app.add_subcommand("transfer", "Transfer matrix over appearance domains");
  transfer_cmd->add_option("--config", transfer_config, "Experiment config with a transfer section")->required();

  SaliencyArgs sa;
  auto* sal_cmd = app.add_subcommand("saliency", "Grad-CAM or attention overlay for one observation");
  sal_cmd->add_option("--ckpt", sa.ckpt, "Checkpoint file")->required();
  sal_cmd->add_option("--mode", sa.mode, "gradcam or attention")->check(CLI::IsMember({"gradcam", "attention"}));
  sal_cmd->add_option("--obs", sa.obs, "P6 PPM observation, or 'live' to render one");
  sal_cmd->add_option("--out", sa.out, "Output PPM")->required();
  sal_cmd->add_option("--target", sa.target, "logit or value")->check(CLI::IsMember({"logit", "value"}));
  sal_cmd->add_option("--track", sa.track, "Track for live observations");
  sal_cmd->add_option("--appearance", sa.appearance, "Appearance for live observations");
  sal_cmd->add_option("--seed", sa.seed, "World seed for live observations");

  DemoArgs da;
  auto* demo_cmd = app.add_subcommand("render-demo", "Render sample frames for each appearance");
  demo_cmd->add_option("--track", da.track, "Built-in track name or track JSON file");
  demo_cmd->add_option("--appearance", da.appearances, "Appearance preset(s); default all");
  demo_cmd->add_option("--out", da.out, "Output directory");
  demo_cmd->add_option("--frames", da.frames, "Frames per appearance")->check(CLI::PositiveNumber);
  demo_cmd->add_option("--bots", da.bots, "Bot cars (needs a two-lane track)");
  demo_cmd->add_option("--seed", da.seed, "World seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*train_cmd) return run_train(config_path, iterations);
    if (*eval_cmd) {
      ev.seed_given = seed_opt->count() > 0;
      return run_eval(ev);
    }
    if (*transfer_cmd) return run_transfer(transfer_config);
    if (*sal_cmd) return run_saliency(sa);
    if (*demo_cmd) return run_render_demo(da);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  } catch (const UnsupportedOperation& e) {
    std::fprintf(stderr, "unsupported: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
