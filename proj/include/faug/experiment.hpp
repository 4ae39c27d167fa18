#pragma once

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "faug/attack.hpp"
#include "faug/augment.hpp"
#include "faug/checkpoint.hpp"
#include "faug/data.hpp"
#include "faug/eval.hpp"
#include "faug/model.hpp"
#include "faug/parallel.hpp"
#include "faug/report.hpp"
#include "faug/train.hpp"

namespace faug {

struct ModelSpec {
  std::string id;
  Arch architecture = Arch::cnn_a;
  uint64_t init_seed = 1;
  uint64_t train_seed = 1;
};

struct ExperimentConfig {
  uint64_t seed = 1;
  std::string workspace = "out";
  DatasetSpec dataset;
  uint64_t dataset_seed = 42;
  std::vector<ModelSpec> models;
  std::vector<ModelSpec> victims;
  TrainConfig train;
  AttackConfig attack;
  std::unordered_map<std::string, HookConfig> hooks;  // per-model overrides; registry otherwise
  int attack_count = 192;
  std::vector<uint64_t> eval_seeds = {1001, 1002, 1003, 1004, 1005};
  int cosine_count = 256;
  std::vector<float> sigma_grid = {0.01f, 0.05f, 0.1f, 0.15f, 0.2f, 0.25f, 0.3f};
  std::vector<float> mu_grid = {0.0f, 0.1f, 0.25f, 0.5f};
  std::vector<float> musigma_sigma_grid = {0.0f, 0.1f, 0.3f, 0.6f};
  float dropout_p = 0.3f;
  std::vector<std::string> formats = {"csv", "json"};

  json to_json() const;
  static ExperimentConfig from_json(const json& j);
  static const char* default_text();
};

namespace detail {

inline NoiseKind noise_kind_from_string(const std::string& s) {
  if (s == "normal") return NoiseKind::normal;
  if (s == "uniform") return NoiseKind::uniform;
  if (s == "dropout") return NoiseKind::dropout_mask;
  fail(ErrorCode::ConfigInvalid, "unknown noise kind '" + s + "'");
}

inline const char* noise_kind_name(NoiseKind k) {
  switch (k) {
    case NoiseKind::normal: return "normal";
    case NoiseKind::uniform: return "uniform";
    case NoiseKind::dropout_mask: return "dropout";
  }
  return "normal";
}

inline json hook_to_json(const HookConfig& h) {
  json j = {{"layer", h.layer}, {"kind", noise_kind_name(h.kind)}};
  switch (h.kind) {
    case NoiseKind::normal:
      j["mu"] = h.mu;
      j["sigma"] = h.sigma;
      break;
    case NoiseKind::uniform:
      j["low"] = h.low;
      j["high"] = h.high;
      break;
    case NoiseKind::dropout_mask:
      j["p"] = h.p;
      break;
  }
  return j;
}

inline HookConfig hook_from_json(const json& j) {
  HookConfig h;
  h.layer = j.at("layer").get<std::string>();
  h.kind = noise_kind_from_string(j.at("kind").get<std::string>());
  h.mu = j.value("mu", 0.0f);
  h.sigma = j.value("sigma", 0.0f);
  h.low = j.value("low", 0.0f);
  h.high = j.value("high", 0.0f);
  h.p = j.value("p", 0.0f);
  h.validate();
  return h;
}

}  // namespace detail

inline json ExperimentConfig::to_json() const {
  json model_list = json::array();
  for (const auto& m : models) {
    model_list.push_back({{"id", m.id},
                          {"architecture", arch_name(m.architecture)},
                          {"init_seed", m.init_seed},
                          {"train_seed", m.train_seed}});
  }
  json victim_list = json::array();
  for (const auto& m : victims) {
    victim_list.push_back({{"id", m.id},
                           {"architecture", arch_name(m.architecture)},
                           {"init_seed", m.init_seed},
                           {"train_seed", m.train_seed}});
  }
  json hook_map = json::object();
  for (const auto& [id, h] : hooks) hook_map[id] = detail::hook_to_json(h);
  return json{
      {"seed", seed},
      {"workspace", workspace},
      {"dataset",
       {{"classes", dataset.classes},
        {"train", dataset.train_count},
        {"test", dataset.test_count},
        {"seed", dataset_seed}}},
      {"models", model_list},
      {"victims", victim_list},
      {"train",
       {{"epochs", train.epochs}, {"batch_size", train.batch_size}, {"lr", train.lr}, {"momentum", train.momentum}}},
      {"attack",
       {{"variant", attack_variant_name(attack.variant)},
        {"epsilon", attack.epsilon},
        {"alpha", attack.alpha},
        {"iterations", attack.iterations},
        {"xi", attack.xi},
        {"di_prob", attack.di_prob},
        {"di_low", attack.di_low},
        {"di_high", attack.di_high},
        {"ti_kernel_size", attack.ti_kernel_size},
        {"ti_kernel_sigma", attack.ti_kernel_sigma},
        {"si_scales", attack.si_scales},
        {"vt_samples", attack.vt_samples},
        {"vt_beta", attack.vt_beta}}},
      {"hooks", hook_map},
      {"eval",
       {{"attack_count", attack_count}, {"seeds", eval_seeds}, {"cosine_count", cosine_count}}},
      {"sweeps",
       {{"sigma_grid", sigma_grid},
        {"mu_grid", mu_grid},
        {"musigma_sigma_grid", musigma_sigma_grid},
        {"dropout_p", dropout_p}}},
      {"outputs", {{"formats", formats}}},
  };
}

inline ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  try {
    c.seed = j.at("seed").get<uint64_t>();
    c.workspace = j.value("workspace", std::string("out"));
    const auto& d = j.at("dataset");
    c.dataset.classes = d.at("classes").get<int>();
    c.dataset.train_count = d.at("train").get<int>();
    c.dataset.test_count = d.at("test").get<int>();
    c.dataset_seed = d.at("seed").get<uint64_t>();
    auto parse_models = [](const json& arr) {
      std::vector<ModelSpec> out;
      for (const auto& mj : arr) {
        ModelSpec m;
        m.id = mj.at("id").get<std::string>();
        m.architecture = arch_from_string(mj.at("architecture").get<std::string>());
        m.init_seed = mj.at("init_seed").get<uint64_t>();
        m.train_seed = mj.at("train_seed").get<uint64_t>();
        out.push_back(std::move(m));
      }
      return out;
    };
    c.models = parse_models(j.at("models"));
    if (j.contains("victims")) c.victims = parse_models(j.at("victims"));
    const auto& t = j.at("train");
    c.train.epochs = t.at("epochs").get<int>();
    c.train.batch_size = t.at("batch_size").get<int>();
    c.train.lr = t.at("lr").get<float>();
    c.train.momentum = t.at("momentum").get<float>();
    const auto& a = j.at("attack");
    c.attack.variant = attack_variant_from_string(a.at("variant").get<std::string>());
    c.attack.epsilon = a.at("epsilon").get<float>();
    c.attack.alpha = a.at("alpha").get<float>();
    c.attack.iterations = a.at("iterations").get<int>();
    c.attack.xi = a.at("xi").get<float>();
    c.attack.di_prob = a.value("di_prob", 0.5f);
    c.attack.di_low = a.value("di_low", 13);
    c.attack.di_high = a.value("di_high", 16);
    c.attack.ti_kernel_size = a.value("ti_kernel_size", 5);
    c.attack.ti_kernel_sigma = a.value("ti_kernel_sigma", 1.5f);
    c.attack.si_scales = a.value("si_scales", 5);
    c.attack.vt_samples = a.value("vt_samples", 5);
    c.attack.vt_beta = a.value("vt_beta", 1.5f);
    if (j.contains("hooks")) {
      for (const auto& [id, hj] : j.at("hooks").items()) c.hooks[id] = detail::hook_from_json(hj);
    }
    const auto& e = j.at("eval");
    c.attack_count = e.at("attack_count").get<int>();
    c.eval_seeds = e.at("seeds").get<std::vector<uint64_t>>();
    c.cosine_count = e.value("cosine_count", 256);
    const auto& s = j.at("sweeps");
    c.sigma_grid = s.at("sigma_grid").get<std::vector<float>>();
    c.mu_grid = s.at("mu_grid").get<std::vector<float>>();
    c.musigma_sigma_grid = s.at("musigma_sigma_grid").get<std::vector<float>>();
    c.dropout_p = s.value("dropout_p", 0.3f);
    c.formats = j.at("outputs").at("formats").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigInvalid, std::string("config schema: ") + e.what());
  }
  // semantic validation
  if (c.models.empty()) fail(ErrorCode::ConfigInvalid, "config needs at least one model");
  std::unordered_set<std::string> ids;
  for (const auto& m : c.models) {
    if (!ids.insert(m.id).second) fail(ErrorCode::ConfigInvalid, "duplicate model id '" + m.id + "'");
  }
  for (const auto& m : c.victims) {
    if (!ids.insert(m.id).second) fail(ErrorCode::ConfigInvalid, "duplicate model id '" + m.id + "'");
  }
  for (const auto& [id, h] : c.hooks) {
    if (!ids.count(id)) fail(ErrorCode::ConfigInvalid, "hook override for unknown model '" + id + "'");
  }
  if (c.eval_seeds.empty()) fail(ErrorCode::ConfigInvalid, "eval.seeds must not be empty");
  if (c.attack_count < 1) fail(ErrorCode::ConfigInvalid, "eval.attack_count must be >= 1");
  for (const std::string& f : c.formats) {
    if (f != "csv" && f != "json") fail(ErrorCode::ConfigInvalid, "unknown output format '" + f + "'");
  }
  return c;
}

// The annotated copy of this document lives at configs/default.json; a test
// keeps the two in sync.
inline const char* ExperimentConfig::default_text() {
  return R"JSON({
  "seed": 1,
  "workspace": "out",
  "dataset": { "classes": 10, "train": 5000, "test": 1000, "seed": 42 },
  "models": [
    { "id": "mlp",       "architecture": "mlp",       "init_seed": 1, "train_seed": 1 },
    { "id": "cnn_a",     "architecture": "cnn_a",     "init_seed": 1, "train_seed": 1 },
    { "id": "cnn_b",     "architecture": "cnn_b",     "init_seed": 1, "train_seed": 1 },
    { "id": "tiny_attn", "architecture": "tiny_attn", "init_seed": 1, "train_seed": 1 }
  ],
  "victims": [
    { "id": "mlp_v",       "architecture": "mlp",       "init_seed": 2, "train_seed": 2 },
    { "id": "cnn_a_v",     "architecture": "cnn_a",     "init_seed": 2, "train_seed": 2 },
    { "id": "cnn_b_v",     "architecture": "cnn_b",     "init_seed": 2, "train_seed": 2 },
    { "id": "tiny_attn_v", "architecture": "tiny_attn", "init_seed": 2, "train_seed": 2 }
  ],
  "train": { "epochs": 20, "batch_size": 64, "lr": 0.05, "momentum": 0.9 },
  "attack": {
    "variant": "mifgsm",
    "epsilon": 0.06274509803921569,
    "alpha": 0.00784313725490196,
    "iterations": 10,
    "xi": 1.0,
    "di_prob": 0.5, "di_low": 13, "di_high": 16,
    "ti_kernel_size": 5, "ti_kernel_sigma": 1.5,
    "si_scales": 5,
    "vt_samples": 5, "vt_beta": 1.5
  },
  "hooks": {
    "mlp":       { "layer": "fc2",        "kind": "normal", "mu": 0.0, "sigma": 0.6 },
    "cnn_a":     { "layer": "conv1",      "kind": "normal", "mu": 0.0, "sigma": 0.6 },
    "cnn_b":     { "layer": "conv1",      "kind": "normal", "mu": 0.0, "sigma": 1.0 },
    "tiny_attn": { "layer": "attn_block", "kind": "normal", "mu": 0.0, "sigma": 1.0 }
  },
  "eval": { "attack_count": 192, "seeds": [1001, 1002, 1003, 1004, 1005], "cosine_count": 256 },
  "sweeps": {
    "sigma_grid": [0.01, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
    "mu_grid": [0.0, 0.1, 0.25, 0.5],
    "musigma_sigma_grid": [0.0, 0.1, 0.3, 0.6],
    "dropout_p": 0.3
  },
  "outputs": { "formats": ["csv", "json"] }
}
)JSON";
}

// Orchestrates the pipeline stages behind the CLI. Stages are pure functions
// of (config, seed); the repro payload collects every number the goldens pin.
class Experiment {
 public:
  Experiment(ExperimentConfig cfg, int jobs = 1, bool quiet = false)
      : cfg_(std::move(cfg)), jobs_(jobs < 1 ? 1 : jobs), quiet_(quiet) {}

  const ExperimentConfig& config() const { return cfg_; }

  json context() const {
    return json{{"seed", cfg_.seed}, {"config", cfg_.to_json()}};
  }

  void ensure_workspace() const {
    namespace fs = std::filesystem;
    std::error_code ec;
    for (const char* sub : {"", "/checkpoints", "/adv", "/reports"}) {
      fs::create_directories(cfg_.workspace + sub, ec);
      if (ec) fail(ErrorCode::IoError, "cannot create workspace directory '" + cfg_.workspace + sub + "'");
    }
  }

  const Dataset& train_split() {
    load_dataset();
    return train_ds_;
  }
  const Dataset& test_split() {
    load_dataset();
    return test_ds_;
  }

  json gen_data() {
    load_dataset();
    std::vector<int> counts(static_cast<size_t>(cfg_.dataset.classes), 0);
    for (int l : train_ds_.labels) counts[static_cast<size_t>(l)]++;
    json summary = {
        {"train_count", train_ds_.count()},
        {"test_count", test_ds_.count()},
        {"class_counts", counts},
        {"train_checksum", hex64(tensor_checksum(train_ds_.images))},
        {"test_checksum", hex64(tensor_checksum(test_ds_.images))},
    };
    return summary;
  }

  // Trains every configured model (and victims) deterministically; writes one
  // checkpoint per model under workspace/checkpoints.
  json train_models(bool include_victims = true) {
    load_dataset();
    ensure_workspace();
    std::vector<ModelSpec> specs = cfg_.models;
    if (include_victims) specs.insert(specs.end(), cfg_.victims.begin(), cfg_.victims.end());
    std::vector<Model> trained(specs.size());
    parallel_for(static_cast<int>(specs.size()), jobs_, [&](int i) {
      const ModelSpec& spec = specs[static_cast<size_t>(i)];
      ModelConfig mc;
      mc.architecture = spec.architecture;
      mc.num_classes = cfg_.dataset.classes;
      mc.init_seed = spec.init_seed;
      TrainConfig tc = cfg_.train;
      tc.seed = spec.train_seed;
      trained[static_cast<size_t>(i)] = train(build_model(mc), train_ds_, test_ds_, tc);
    });
    json metrics = json::object();
    for (size_t i = 0; i < specs.size(); ++i) {
      const std::string path = checkpoint_path(specs[i].id);
      save_checkpoint(trained[i], path);
      const std::string blob = serialize_checkpoint(trained[i]);
      metrics[specs[i].id] = {
          {"architecture", arch_name(specs[i].architecture)},
          {"train_accuracy", trained[i].metrics.train_accuracy},
          {"test_accuracy", trained[i].metrics.test_accuracy},
          {"final_loss", trained[i].metrics.final_loss},
          {"checkpoint_checksum", hex64(fnv1a_bytes(blob.data(), blob.size()))},
      };
      cache_[specs[i].id] = std::move(trained[i]);
    }
    return metrics;
  }

  const Model& model(const std::string& id) {
    auto it = cache_.find(id);
    if (it != cache_.end()) return it->second;
    const std::string path = checkpoint_path(id);
    if (!std::filesystem::exists(path)) {
      fail(ErrorCode::IoError, "checkpoint not found: " + path + " (run the train subcommand first)");
    }
    cache_[id] = load_checkpoint(path);
    return cache_[id];
  }

  std::vector<NamedModel> primary_models() {
    std::vector<NamedModel> out;
    for (const auto& spec : cfg_.models) out.push_back({spec.id, &model(spec.id)});
    return out;
  }

  std::vector<NamedModel> victim_models() {
    std::vector<NamedModel> out;
    for (const auto& spec : cfg_.victims) out.push_back({spec.id, &model(spec.id)});
    return out;
  }

  HookPolicy faug_policy() const { return HookPolicy::faug(cfg_.hooks); }

  // Transfer matrices for both hook policies over every eval seed.
  json matrices(bool write_reports = true) {
    load_dataset();
    std::vector<NamedModel> models = primary_models();
    json out = json::object();
    for (const char* policy_name : {"none", "faug"}) {
      const HookPolicy policy =
          std::string(policy_name) == "none" ? HookPolicy::none() : faug_policy();
      json per_seed = json::array();
      for (uint64_t seed : cfg_.eval_seeds) {
        TransferMatrix m =
            transfer_matrix(models, cfg_.attack, policy, test_ds_, seed, cfg_.attack_count, jobs_);
        if (write_reports) write_matrix_reports(m, policy_name, seed);
        per_seed.push_back(matrix_to_json(m));
      }
      out[policy_name] = std::move(per_seed);
    }
    return out;
  }

  json cosine(const std::string& surrogate_id = "cnn_a") {
    load_dataset();
    const Model& m = model(surrogate_id);
    const HookConfig hook = default_hook_for(m.config.architecture);  // registry defaults
    json per_seed = json::array();
    for (uint64_t seed : cfg_.eval_seeds) {
      auto [input_arm, feature_arm] = cosine_diagnostic(m, test_ds_, cfg_.cosine_count, cfg_.attack.di_low,
                                                        cfg_.attack.di_high, hook, seed);
      per_seed.push_back({{"seed", seed},
                          {"input_transform", cosine_to_json(input_arm)},
                          {"feature_hook", cosine_to_json(feature_arm)}});
    }
    json out = {{"surrogate", surrogate_id}, {"hook", detail::hook_to_json(hook)}, {"per_seed", per_seed}};
    if (has_format("json")) {
      write_text_file(report_path("cosine_" + surrogate_id + ".json"),
                      json{{"context", context()}, {"result", out}}.dump(2) + "\n");
    }
    return out;
  }

  json musigma() {
    load_dataset();
    json out = json::object();
    for (const auto& spec : cfg_.models) {
      if (spec.architecture != Arch::cnn_a && spec.architecture != Arch::cnn_b) continue;
      const Model& m = model(spec.id);
      auto cells = mu_sigma_accuracy_sweep(m, test_ds_, cfg_.mu_grid, cfg_.musigma_sigma_grid,
                                           static_cast<int>(cfg_.eval_seeds.size()), cfg_.seed, jobs_);
      out[spec.id] = musigma_to_json(cells);
      if (has_format("csv")) {
        write_text_file(report_path("musigma_" + spec.id + ".csv"), musigma_to_csv(cells, context()));
      }
      if (has_format("json")) {
        write_text_file(report_path("musigma_" + spec.id + ".json"),
                        json{{"context", context()}, {"cells", musigma_to_json(cells)}}.dump(2) + "\n");
      }
    }
    return out;
  }

  json ablations(const std::string& surrogate_id = "cnn_a") {
    load_dataset();
    std::vector<NamedModel> models = primary_models();
    NamedModel surrogate{};
    for (const auto& nm : models) {
      if (nm.id == surrogate_id) surrogate = nm;
    }
    if (surrogate.model == nullptr) fail(ErrorCode::ConfigInvalid, "no model named '" + surrogate_id + "'");

    AblationResult sigma = ablate(AblationDimension::sigma, sigma_grid_points(*surrogate.model, cfg_.sigma_grid),
                                  surrogate, models, cfg_.attack, test_ds_, cfg_.seed, cfg_.attack_count, jobs_);
    const float sigma_star = sigma.points[static_cast<size_t>(sigma.best_index)].hook.sigma;

    AblationResult layers =
        ablate(AblationDimension::layer,
               layer_grid_points(*surrogate.model, layer_registry(surrogate.model->config.architecture)),
               surrogate, models, cfg_.attack, test_ds_, cfg_.seed, cfg_.attack_count, jobs_);

    AblationResult noise =
        ablate(AblationDimension::noise_type, noise_type_points(*surrogate.model, sigma_star, cfg_.dropout_p),
               surrogate, models, cfg_.attack, test_ds_, cfg_.seed, cfg_.attack_count, jobs_);

    json out = {{"surrogate", surrogate_id},
                {"sigma", ablation_to_json(sigma)},
                {"layer", ablation_to_json(layers)},
                {"noise_type", ablation_to_json(noise)},
                {"sigma_star", sigma_star}};
    if (has_format("csv")) {
      write_text_file(report_path("ablate_sigma_" + surrogate_id + ".csv"), ablation_to_csv(sigma, context()));
      write_text_file(report_path("ablate_layer_" + surrogate_id + ".csv"), ablation_to_csv(layers, context()));
      write_text_file(report_path("ablate_noise_type_" + surrogate_id + ".csv"),
                      ablation_to_csv(noise, context()));
    }
    if (has_format("json")) {
      write_text_file(report_path("ablate_" + surrogate_id + ".json"),
                      json{{"context", context()}, {"result", out}}.dump(2) + "\n");
    }
    return out;
  }

  // Logit-average ensembles of all primaries against the held-out victims,
  // plain vs per-member FAUG hooks, per eval seed.
  json ensemble() {
    load_dataset();
    if (cfg_.victims.empty()) fail(ErrorCode::ConfigInvalid, "ensemble stage needs configured victims");
    std::vector<NamedModel> members = primary_models();
    std::vector<NamedModel> victims = victim_models();
    const HookPolicy policy = faug_policy();

    json per_seed = json::array();
    for (uint64_t seed : cfg_.eval_seeds) {
      RngStream root(seed);
      auto [batch, labels] = detail::attack_window(test_ds_, cfg_.attack_count, root.split("subset"));
      json arms = json::object();
      for (const char* arm : {"plain", "faug"}) {
        ModelView view;
        for (const auto& nm : members) {
          std::optional<HookConfig> hook;
          if (std::string(arm) == "faug") hook = policy.hook_for(nm.id, nm.model->config.architecture);
          view.members.push_back({nm.model, hook});
        }
        AdvBatch adv = run_attack(view, batch, labels, cfg_.attack, root.split(arm));
        json rates = json::object();
        double avg = 0.0;
        for (const auto& v : victims) {
          RatePair r = attack_success_rate(*v.model, adv);
          rates[v.id] = rate_to_json(r);
          avg += r.filtered;
        }
        arms[arm] = {{"rates", rates}, {"blackbox_avg", avg / static_cast<double>(victims.size())}};
      }
      per_seed.push_back({{"seed", seed}, {"arms", arms}});
    }
    json out = {{"members", json::array()}, {"victims", json::array()}, {"per_seed", per_seed}};
    for (const auto& nm : members) out["members"].push_back(nm.id);
    for (const auto& nm : victims) out["victims"].push_back(nm.id);
    if (has_format("json")) {
      write_text_file(report_path("ensemble.json"),
                      json{{"context", context()}, {"result", out}}.dump(2) + "\n");
    }
    return out;
  }

  // Simple preprocessing defenses evaluated on cnn_a -> cnn_b batches.
  json defenses(const std::string& surrogate_id = "cnn_a", const std::string& victim_id = "cnn_b") {
    load_dataset();
    const Model& surrogate = model(surrogate_id);
    const Model& victim = model(victim_id);
    json per_seed = json::array();
    for (uint64_t seed : cfg_.eval_seeds) {
      RngStream root(seed);
      auto [batch, labels] = detail::attack_window(test_ds_, cfg_.attack_count, root.split("subset"));
      AdvBatch adv = run_attack(ModelView::single(surrogate), batch, labels, cfg_.attack, root.split("attack"));
      RatePair undefended = attack_success_rate(victim, adv);
      RatePair quantized = defended_success_rate(victim, adv, [](const Tensor& x) {
        return defense_quantize(x, 8);
      });
      RngStream rp_rng = root.split("resize_pad");
      RatePair resized = defended_success_rate(victim, adv, [&](const Tensor& x) {
        return defense_resize_pad(x, rp_rng);
      });
      per_seed.push_back({{"seed", seed},
                          {"undefended", rate_to_json(undefended)},
                          {"quantize_8", rate_to_json(quantized)},
                          {"resize_pad", rate_to_json(resized)},
                          {"avg_over_defenses", (quantized.filtered + resized.filtered) / 2.0}});
    }
    // both aggregations, labeled: per defense over seeds, and per seed over defenses
    json per_defense = json::object();
    for (const char* d : {"undefended", "quantize_8", "resize_pad"}) {
      double sum = 0.0;
      for (const auto& row : per_seed) sum += row.at(d).at("filtered").get<double>();
      per_defense[d] = sum / static_cast<double>(per_seed.size());
    }
    return json{{"surrogate", surrogate_id},
                {"victim", victim_id},
                {"per_seed", per_seed},
                {"mean_over_seeds_per_defense", per_defense}};
  }

  // The full deterministic pipeline; this payload is what goldens pin.
  json run_all() {
    json out = json::object();
    out["format_version"] = 1;
    out["master_seed"] = cfg_.seed;
    note("dataset");
    out["dataset"] = gen_data();
    note("training models");
    out["training"] = train_models(true);
    note("transfer matrices");
    out["matrices"] = matrices(true);
    note("cosine diagnostic");
    out["cosine"] = cosine("cnn_a");
    note("mu/sigma accuracy sweep");
    out["musigma"] = musigma();
    note("ablations");
    out["ablations"] = ablations("cnn_a");
    note("ensemble attacks");
    out["ensemble"] = ensemble();
    note("defenses");
    out["defenses"] = defenses();
    return out;
  }

  void note(const std::string& msg) const {
    if (!quiet_) std::fprintf(stderr, "[faug] %s\n", msg.c_str());
  }

  // exit contract: empty diff == success
  std::vector<std::string> repro_diff(const json& fresh, const json& committed) const {
    std::vector<std::string> diffs;
    diff_json("", committed, fresh, diffs);
    return diffs;
  }

 private:
  static void diff_json(const std::string& path, const json& want, const json& got,
                        std::vector<std::string>& diffs) {
    if (diffs.size() >= 20) return;
    if (want.is_number() && got.is_number()) {
      // signedness of parsed integers is a storage detail, not a diff
      if (want != got) diffs.push_back(path + ": " + want.dump() + " != " + got.dump());
      return;
    }
    if (want.type() != got.type()) {
      diffs.push_back(path + ": type differs");
      return;
    }
    if (want.is_object()) {
      for (const auto& [key, val] : want.items()) {
        if (!got.contains(key)) {
          diffs.push_back(path + "/" + key + ": missing");
          continue;
        }
        diff_json(path + "/" + key, val, got.at(key), diffs);
      }
      for (const auto& [key, val] : got.items()) {
        (void)val;
        if (!want.contains(key)) diffs.push_back(path + "/" + key + ": unexpected");
      }
      return;
    }
    if (want.is_array()) {
      if (want.size() != got.size()) {
        diffs.push_back(path + ": array length " + std::to_string(want.size()) + " vs " +
                        std::to_string(got.size()));
        return;
      }
      for (size_t i = 0; i < want.size(); ++i) {
        diff_json(path + "/" + std::to_string(i), want.at(i), got.at(i), diffs);
      }
      return;
    }
    if (want != got) {
      diffs.push_back(path + ": " + want.dump() + " != " + got.dump());
    }
  }

  void load_dataset() {
    if (dataset_loaded_) return;
    auto [tr, te] = gen_dataset(cfg_.dataset, cfg_.dataset_seed);
    train_ds_ = std::move(tr);
    test_ds_ = std::move(te);
    dataset_loaded_ = true;
  }

  std::string checkpoint_path(const std::string& id) const {
    return cfg_.workspace + "/checkpoints/" + id + ".faug";
  }

  std::string report_path(const std::string& name) const { return cfg_.workspace + "/reports/" + name; }

  bool has_format(const std::string& f) const {
    return std::find(cfg_.formats.begin(), cfg_.formats.end(), f) != cfg_.formats.end();
  }

  void write_matrix_reports(const TransferMatrix& m, const std::string& policy, uint64_t seed) {
    ensure_workspace();
    const std::string stem = "matrix_" + policy + "_" + std::to_string(seed);
    for (const std::string& format : cfg_.formats) {
      emit_report(m, format, report_path(stem + "." + format), context());
    }
  }

  ExperimentConfig cfg_;
  int jobs_;
  bool quiet_;
  bool dataset_loaded_ = false;
  Dataset train_ds_, test_ds_;
  std::unordered_map<std::string, Model> cache_;
};

}  // namespace faug
