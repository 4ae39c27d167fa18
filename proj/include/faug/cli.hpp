#pragma once

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "faug/experiment.hpp"

namespace faug::cli {

// exit codes: 0 ok, 1 validation/config, 2 golden mismatch, 3 io,
// 4 checkpoint format, 5 engine/internal
inline int exit_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::ConfigInvalid:
    case ErrorCode::InvalidSpec:
    case ErrorCode::UnknownArchitecture:
    case ErrorCode::UnknownLayer:
    case ErrorCode::UnknownPrimitive:
    case ErrorCode::InvalidNoiseParams:
    case ErrorCode::InvalidSizes:
    case ErrorCode::InvalidKernel:
    case ErrorCode::InvalidGrid:
    case ErrorCode::InvalidLevels:
    case ErrorCode::MissingRng:
    case ErrorCode::EmptySplit:
    case ErrorCode::NoEligibleSamples:
    case ErrorCode::IncompatibleModels:
      return 1;
    case ErrorCode::GoldenMismatch:
      return 2;
    case ErrorCode::IoError:
      return 3;
    case ErrorCode::CorruptCheckpoint:
    case ErrorCode::VersionMismatch:
      return 4;
    default:
      return 5;
  }
}

namespace detail {

struct CommonFlags {
  std::string config_path = "default";
  uint64_t seed = 0;
  bool seed_set = false;
  std::string out_dir;
  std::string format;
  int jobs = 1;
  bool quiet = false;
};

inline void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path,
                  "experiment config path, or 'default' for the built-in configuration");
  cmd->add_option("--seed", flags.seed, "override the master seed")->each([&flags](const std::string&) {
    flags.seed_set = true;
  });
  cmd->add_option("--out", flags.out_dir, "override the workspace directory");
  cmd->add_option("--format", flags.format, "restrict report format (csv|json)");
  cmd->add_option("--jobs", flags.jobs, "parallel cells; any value reproduces --jobs 1 bitwise")
      ->check(CLI::PositiveNumber);
  cmd->add_flag("--quiet", flags.quiet, "suppress progress notes");
}

inline ExperimentConfig load_config(const CommonFlags& flags) {
  json j;
  if (flags.config_path == "default") {
    j = json::parse(ExperimentConfig::default_text());
  } else {
    if (!std::filesystem::exists(flags.config_path)) {
      fail(ErrorCode::ConfigInvalid, "config not found: " + flags.config_path);
    }
    try {
      j = json::parse(read_text_file(flags.config_path));
    } catch (const json::exception& e) {
      fail(ErrorCode::ConfigInvalid, "config is not valid JSON: " + std::string(e.what()));
    }
  }
  ExperimentConfig cfg = ExperimentConfig::from_json(j);
  if (flags.seed_set) cfg.seed = flags.seed;
  if (!flags.out_dir.empty()) cfg.workspace = flags.out_dir;
  if (!flags.format.empty()) {
    if (flags.format != "csv" && flags.format != "json") {
      fail(ErrorCode::ConfigInvalid, "unknown format '" + flags.format + "'");
    }
    cfg.formats = {flags.format};
  }
  return cfg;
}

inline void emit(const json& summary, bool quiet) {
  if (!quiet) std::printf("%s\n", summary.dump().c_str());
}

}  // namespace detail

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"feature-augmentation adversarial transferability lab"};
  app.require_subcommand(1);

  detail::CommonFlags flags;

  auto* gen_data = app.add_subcommand("gen-data", "generate the procedural dataset and report its summary");
  detail::add_common(gen_data, flags);

  auto* train_cmd = app.add_subcommand("train", "train every configured model and write checkpoints");
  detail::add_common(train_cmd, flags);
  bool skip_victims = false;
  train_cmd->add_flag("--no-victims", skip_victims, "train only the primary surrogate set");

  auto* attack_cmd = app.add_subcommand("attack", "craft one adversarial batch and persist it");
  detail::add_common(attack_cmd, flags);
  std::string surrogate_id;
  bool faug_hook = false;
  attack_cmd->add_option("--surrogate", surrogate_id, "surrogate model id (default: first configured)");
  attack_cmd->add_flag("--faug", faug_hook, "attack through the feature-augmented surrogate");

  auto* matrix_cmd = app.add_subcommand("eval-matrix", "transfer matrices over the eval seeds");
  detail::add_common(matrix_cmd, flags);

  auto* ablate_cmd = app.add_subcommand("ablate", "layer/sigma/noise-type ablations");
  detail::add_common(ablate_cmd, flags);
  std::string ablate_surrogate = "cnn_a";
  ablate_cmd->add_option("--surrogate", ablate_surrogate, "surrogate model id");

  auto* cosine_cmd = app.add_subcommand("diag-cosine", "logit cosine-similarity diagnostic");
  detail::add_common(cosine_cmd, flags);
  std::string cosine_surrogate = "cnn_a";
  cosine_cmd->add_option("--surrogate", cosine_surrogate, "surrogate model id");

  auto* musigma_cmd = app.add_subcommand("sweep-musigma", "hooked-accuracy sweep over the mu/sigma grid");
  detail::add_common(musigma_cmd, flags);

  auto* repro_cmd = app.add_subcommand("repro", "run the full pipeline and diff against committed goldens");
  detail::add_common(repro_cmd, flags);
  std::string goldens_path = "goldens/goldens.json";
  bool update_goldens = false;
  repro_cmd->add_option("--goldens", goldens_path, "goldens file to diff against");
  repro_cmd->add_flag("--update-goldens", update_goldens, "rewrite the goldens file from this run");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    std::printf("%s", app.help().c_str());
    return 0;
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }

  try {
    ExperimentConfig cfg = detail::load_config(flags);
    Experiment exp(cfg, flags.jobs, flags.quiet);

    if (gen_data->parsed()) {
      exp.ensure_workspace();
      json summary = exp.gen_data();
      write_text_file(cfg.workspace + "/reports/dataset.json",
                      json{{"context", exp.context()}, {"dataset", summary}}.dump(2) + "\n");
      detail::emit(summary, flags.quiet);
      return 0;
    }
    if (train_cmd->parsed()) {
      json metrics = exp.train_models(!skip_victims);
      write_text_file(cfg.workspace + "/reports/training.json",
                      json{{"context", exp.context()}, {"metrics", metrics}}.dump(2) + "\n");
      detail::emit(metrics, flags.quiet);
      return 0;
    }
    if (attack_cmd->parsed()) {
      exp.ensure_workspace();
      if (surrogate_id.empty()) surrogate_id = cfg.models.front().id;
      const Model& surrogate = exp.model(surrogate_id);
      std::optional<HookConfig> hook;
      if (faug_hook) hook = exp.faug_policy().hook_for(surrogate_id, surrogate.config.architecture);
      RngStream root(cfg.seed);
      auto [batch, labels] =
          faug::detail::attack_window(exp.test_split(), cfg.attack_count, root.split("subset"));
      AdvBatch adv = run_attack(ModelView::single(surrogate, hook), batch, labels, cfg.attack,
                                root.split("attack"));
      const std::string stem = cfg.workspace + "/adv/" + surrogate_id + "_" +
                               attack_variant_name(cfg.attack.variant) + "_" + std::to_string(cfg.seed) +
                               (faug_hook ? "_faug" : "");
      save_adv_batch(adv, stem);
      int wb = 0;
      for (uint8_t f : adv.white_box_success) wb += f;
      detail::emit(json{{"manifest", stem + ".json"},
                        {"count", adv.count()},
                        {"white_box_success", static_cast<double>(wb) / adv.count()}},
                   flags.quiet);
      return 0;
    }
    if (matrix_cmd->parsed()) {
      exp.ensure_workspace();
      json out = exp.matrices(true);
      detail::emit(json{{"reports", cfg.workspace + "/reports"}, {"seeds", cfg.eval_seeds}}, flags.quiet);
      return 0;
    }
    if (ablate_cmd->parsed()) {
      exp.ensure_workspace();
      json out = exp.ablations(ablate_surrogate);
      detail::emit(out, flags.quiet);
      return 0;
    }
    if (cosine_cmd->parsed()) {
      exp.ensure_workspace();
      json out = exp.cosine(cosine_surrogate);
      detail::emit(out, flags.quiet);
      return 0;
    }
    if (musigma_cmd->parsed()) {
      exp.ensure_workspace();
      json out = exp.musigma();
      detail::emit(out, flags.quiet);
      return 0;
    }
    if (repro_cmd->parsed()) {
      json fresh = exp.run_all();
      if (update_goldens) {
        std::error_code ec;
        std::filesystem::create_directories(std::filesystem::path(goldens_path).parent_path(), ec);
        write_text_file(goldens_path, fresh.dump(2) + "\n");
        detail::emit(json{{"goldens", goldens_path}, {"status", "updated"}}, flags.quiet);
        return 0;
      }
      if (!std::filesystem::exists(goldens_path)) {
        fail(ErrorCode::IoError, "goldens not found: " + goldens_path);
      }
      json committed;
      try {
        committed = json::parse(read_text_file(goldens_path));
      } catch (const json::exception&) {
        fail(ErrorCode::CorruptCheckpoint, goldens_path + " is not valid JSON");
      }
      std::vector<std::string> diffs = exp.repro_diff(fresh, committed);
      if (!diffs.empty()) {
        for (const auto& d : diffs) std::fprintf(stderr, "golden diff: %s\n", d.c_str());
        std::fprintf(stderr, "error: golden mismatch (%zu paths shown)\n", diffs.size());
        return 2;
      }
      detail::emit(json{{"goldens", goldens_path}, {"status", "match"}}, flags.quiet);
      return 0;
    }
    return 0;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.message().c_str());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 5;
  }
}

inline int run_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace faug::cli
