#include <cstdlib>
#include <filesystem>

#include "attnracer/config.hpp"
#include "attnracer/errors.hpp"
#include "doctest.h"

using namespace attnracer;

TEST_CASE("defaults resolve the network against camera and action grid") {
  const ExperimentConfig c = parse_experiment("{}");
  CHECK(c.network_preset == "shallow");
  CHECK(c.network.height == c.env.camera.height);
  CHECK(c.network.width == c.env.camera.width);
  CHECK(c.network.action_count() == 15);
  CHECK(c.env.track == "loop-A");
  CHECK(c.ppo.seed == c.seed);
}

TEST_CASE("all sections parse and survive a JSON round trip") {
  const char* text = R"({
    "seed": 17,
    "output_dir": "runs/x",
    "env": {"track": "complex-B", "appearance": "wood", "reward": "whiteline", "bot_count": 3,
            "max_steps": 400, "random_start": false, "start_progress": 2.5},
    "vehicle": {"max_speed": 3.5},
    "camera": {"geometry": "pinhole", "width": 32, "height": 24},
    "network": {"preset": "deep", "attention_hidden": 32, "conv": [[8, 5, 2, 1], [16, 3, 2, 0]]},
    "ppo": {"iterations": 7, "envs": 2, "steps_per_env": 32, "minibatch": 32, "learning_rate": 0.001},
    "transfer": {"policies": [{"domain": "asphalt", "checkpoint": "a.dacn", "seed": 4}],
                 "eval_domains": ["asphalt", "carpet"], "episodes": 3}
  })";
  const ExperimentConfig c = parse_experiment(text);
  CHECK(c.seed == 17);
  CHECK(c.ppo.seed == 17);
  CHECK(c.env.reward == RewardKind::whiteline);
  CHECK(c.env.bot_count == 3);
  CHECK(c.env.appearance.surface == Surface::wood);
  CHECK(c.env.vehicle.max_speed == 3.5);
  CHECK(c.env.camera.geometry == CameraGeometry::pinhole);
  CHECK(c.network.width == 32);
  CHECK(c.network.attention_depth == 2);
  CHECK(c.network.attention_hidden == 32);
  REQUIRE(c.network.conv.size() == 2);
  CHECK(c.network.conv[0].out_channels == 8);
  CHECK(c.ppo.learning_rate == 0.001);
  REQUIRE(c.transfer.policies.size() == 1);
  CHECK(c.transfer.policies[0].seed == 4);

  const ExperimentConfig again = parse_experiment(experiment_to_json(c));
  CHECK(experiment_to_json(again) == experiment_to_json(c));
  CHECK(again.env.dt == c.env.dt);
}

TEST_CASE("bad configs fail with ConfigError naming the problem") {
  const auto message = [](const char* text) -> std::string {
    try {
      parse_experiment(text);
    } catch (const ConfigError& e) {
      return e.what();
    }
    return "";
  };
  CHECK(message(R"({"ppo": {"clipp": 0.1}})").find("ppo.clipp") != std::string::npos);
  CHECK(message(R"({"env": {"reward": "speed"}})").find("reward") != std::string::npos);
  CHECK(message(R"({"env": {"max_steps": "many"}})").find("env.max_steps") != std::string::npos);
  CHECK(message(R"({"env": {"appearance": "marble"}})") != "");
  CHECK(message(R"({"ppo": {"clip": 1.5}})") != "");
  CHECK(message(R"({"network": {"preset": "huge"}})") != "");
  CHECK(message("{not json") != "");
  CHECK(message(R"({"transfer": {"policies": [{"domain": "asphalt"}]}})") != "");
  CHECK_THROWS_AS(load_experiment("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("ATTNRACER_SEED overrides the configured seed") {
  ExperimentConfig c = parse_experiment(R"({"seed": 5})");
  ::setenv("ATTNRACER_SEED", "99", 1);
  apply_seed_override(c);
  CHECK(c.seed == 99);
  CHECK(c.ppo.seed == 99);
  ::setenv("ATTNRACER_SEED", "x1", 1);
  CHECK_THROWS_AS(seed_override(), ConfigError);
  ::unsetenv("ATTNRACER_SEED");
  CHECK_FALSE(seed_override().has_value());
}

TEST_CASE("shipped example configs parse") {
  int count = 0;
  for (const auto& entry : std::filesystem::directory_iterator(ATTNRACER_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    INFO(entry.path().string());
    CHECK_NOTHROW(load_experiment(entry.path().string()));
    ++count;
  }
  CHECK(count >= 4);
}
