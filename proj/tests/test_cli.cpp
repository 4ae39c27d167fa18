#include <catch2/catch.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "faug/cli.hpp"

using namespace faug;
namespace fs = std::filesystem;

namespace {

// Small config derived from the default so CLI runs finish in seconds.
json tiny_config_json() {
  json j = json::parse(ExperimentConfig::default_text());
  j["dataset"]["train"] = 800;
  j["dataset"]["test"] = 300;
  j["train"]["epochs"] = 4;
  j["eval"]["attack_count"] = 48;
  j["eval"]["seeds"] = {1001, 1002};
  j["eval"]["cosine_count"] = 128;
  j["sweeps"]["sigma_grid"] = {0.0, 0.3};
  j["sweeps"]["mu_grid"] = {0.0, 0.5};
  j["sweeps"]["musigma_sigma_grid"] = {0.0, 0.3};
  return j;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& sub = "") const { return (path / sub).string(); }
};

int run_cli(const std::vector<std::string>& args) { return cli::run(args); }

}  // namespace

TEST_CASE("missing config path exits 1 with the documented diagnostic", "[cli]") {
  REQUIRE(run_cli({"gen-data", "--config", "does_not_exist.json"}) == 1);

  // through the real binary: exact single-line diagnostic on stderr
  const std::string binary = "build/tools/faug";
  if (fs::exists(binary)) {
    FILE* pipe = popen((binary + " repro --config missing.json 2>&1 >/dev/null").c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[256] = {0};
    REQUIRE(fgets(buf, sizeof(buf), pipe) != nullptr);
    const int rc = pclose(pipe);
    REQUIRE(std::string(buf) == "error: config not found: missing.json\n");
    REQUIRE(WEXITSTATUS(rc) == 1);
  }
}

TEST_CASE("the built-in default configuration parses and matches configs/default.json", "[cli]") {
  ExperimentConfig cfg = ExperimentConfig::from_json(json::parse(ExperimentConfig::default_text()));
  REQUIRE(cfg.models.size() == 4);
  REQUIRE(cfg.victims.size() == 4);
  REQUIRE(cfg.eval_seeds.size() == 5);
  REQUIRE(cfg.attack.epsilon == 16.0f / 255.0f);
  REQUIRE(cfg.attack.alpha == 2.0f / 255.0f);
  REQUIRE(cfg.attack.iterations == 10);
  REQUIRE(cfg.attack.xi == 1.0f);

  // the annotated example in the repo is the same document
  if (fs::exists("configs/default.json")) {
    REQUIRE(json::parse(read_text_file("configs/default.json")) ==
            json::parse(ExperimentConfig::default_text()));
  } else if (fs::exists("../configs/default.json")) {
    REQUIRE(json::parse(read_text_file("../configs/default.json")) ==
            json::parse(ExperimentConfig::default_text()));
  } else {
    REQUIRE(fs::exists("../../configs/default.json"));
    REQUIRE(json::parse(read_text_file("../../configs/default.json")) ==
            json::parse(ExperimentConfig::default_text()));
  }
}

TEST_CASE("config schema violations are rejected", "[cli]") {
  json j = tiny_config_json();
  j["models"][1]["id"] = "mlp";  // duplicate id
  REQUIRE_THROWS_MATCHES(ExperimentConfig::from_json(j), Error,
                         Catch::Matchers::Predicate<Error>(
                             [](const Error& e) { return e.code() == ErrorCode::ConfigInvalid; }));

  json j2 = tiny_config_json();
  j2["hooks"]["unknown_model"] = {{"layer", "conv1"}, {"kind", "normal"}, {"mu", 0.0}, {"sigma", 0.1}};
  REQUIRE_THROWS_AS(ExperimentConfig::from_json(j2), Error);

  json j3 = tiny_config_json();
  j3["outputs"]["formats"] = {"yaml"};
  REQUIRE_THROWS_AS(ExperimentConfig::from_json(j3), Error);

  json j4 = tiny_config_json();
  j4.erase("seed");
  REQUIRE_THROWS_AS(ExperimentConfig::from_json(j4), Error);
}

TEST_CASE("gen-data and attack subcommands produce deterministic artifacts", "[cli][slow]") {
  TempDir dir("faug_cli_test");
  const std::string cfg_path = dir.str("config.json");
  write_text_file(cfg_path, tiny_config_json().dump(2));

  REQUIRE(run_cli({"gen-data", "--config", cfg_path, "--out", dir.str("ws"), "--quiet"}) == 0);
  REQUIRE(fs::exists(dir.str("ws/reports/dataset.json")));

  REQUIRE(run_cli({"train", "--config", cfg_path, "--out", dir.str("ws"), "--no-victims", "--jobs", "2",
                   "--quiet"}) == 0);
  REQUIRE(fs::exists(dir.str("ws/checkpoints/cnn_a.faug")));

  // attack twice with the same seed: identical manifests
  REQUIRE(run_cli({"attack", "--config", cfg_path, "--out", dir.str("ws"), "--surrogate", "cnn_a",
                   "--seed", "7", "--quiet"}) == 0);
  const std::string manifest = dir.str("ws/adv/cnn_a_mifgsm_7.json");
  REQUIRE(fs::exists(manifest));
  const std::string first = read_text_file(manifest);
  REQUIRE(run_cli({"attack", "--config", cfg_path, "--out", dir.str("ws"), "--surrogate", "cnn_a",
                   "--seed", "7", "--quiet"}) == 0);
  REQUIRE(read_text_file(manifest) == first);

  // unknown surrogate id is a validation failure
  REQUIRE(run_cli({"attack", "--config", cfg_path, "--out", dir.str("ws"), "--surrogate", "nope",
                   "--quiet"}) == 3);
}

TEST_CASE("repro detects golden drift and --jobs equivalence", "[cli][slow]") {
  TempDir dir("faug_cli_repro");
  json cfg = tiny_config_json();
  cfg["eval"]["seeds"] = {1001};
  cfg["eval"]["cosine_count"] = 128;
  const std::string cfg_path = dir.str("config.json");
  write_text_file(cfg_path, cfg.dump(2));
  const std::string goldens = dir.str("goldens.json");

  // first run records the goldens
  REQUIRE(run_cli({"repro", "--config", cfg_path, "--out", dir.str("ws1"), "--goldens", goldens,
                   "--update-goldens", "--jobs", "2", "--quiet"}) == 0);
  REQUIRE(fs::exists(goldens));

  // a fresh serial run regenerates them bitwise
  REQUIRE(run_cli({"repro", "--config", cfg_path, "--out", dir.str("ws2"), "--goldens", goldens,
                   "--jobs", "1", "--quiet"}) == 0);

  // tampering with a golden number must be caught (exit 2)
  json tampered = json::parse(read_text_file(goldens));
  tampered["training"]["cnn_a"]["test_accuracy"] = 0.123456;
  write_text_file(goldens, tampered.dump(2) + "\n");
  REQUIRE(run_cli({"repro", "--config", cfg_path, "--out", dir.str("ws3"), "--goldens", goldens,
                   "--jobs", "2", "--quiet"}) == 2);

  // missing goldens file is an io failure (exit 3)
  REQUIRE(run_cli({"repro", "--config", cfg_path, "--out", dir.str("ws4"), "--goldens",
                   dir.str("none.json"), "--quiet"}) == 3);
}
