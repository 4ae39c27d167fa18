#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "faug/attack.hpp"
#include "faug/error.hpp"
#include "faug/eval.hpp"

namespace faug {

using nlohmann::json;

inline uint64_t fnv1a_bytes(const void* data, size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline uint64_t tensor_checksum(const Tensor& t) {
  return fnv1a_bytes(t.data(), static_cast<size_t>(t.size()) * sizeof(float));
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorCode::IoError, "cannot open '" + path + "' for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) fail(ErrorCode::IoError, "short write to '" + path + "'");
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::IoError, "cannot open '" + path + "'");
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

inline json rate_to_json(const RatePair& r) {
  return json{{"filtered", r.filtered}, {"unfiltered", r.unfiltered}, {"eligible", r.eligible}, {"total", r.total}};
}

inline RatePair rate_from_json(const json& j) {
  RatePair r;
  r.filtered = j.at("filtered").get<double>();
  r.unfiltered = j.at("unfiltered").get<double>();
  r.eligible = j.at("eligible").get<int>();
  r.total = j.at("total").get<int>();
  return r;
}

inline json matrix_to_json(const TransferMatrix& m) {
  json rates = json::array();
  json mask = json::array();
  json avgs = json::array();
  for (size_t s = 0; s < m.surrogates.size(); ++s) {
    json row = json::array();
    json mrow = json::array();
    for (size_t v = 0; v < m.victims.size(); ++v) {
      row.push_back(rate_to_json(m.rates[s][v]));
      mrow.push_back(static_cast<int>(m.white_box[s][v]));
    }
    rates.push_back(std::move(row));
    mask.push_back(std::move(mrow));
    avgs.push_back(json{{"filtered", m.blackbox_avg(s, true)}, {"unfiltered", m.blackbox_avg(s, false)}});
  }
  return json{{"surrogates", m.surrogates}, {"victims", m.victims},     {"rates", rates},
              {"white_box", mask},          {"blackbox_avg", avgs},     {"metadata", m.metadata}};
}

inline TransferMatrix matrix_from_json(const json& j) {
  TransferMatrix m;
  m.surrogates = j.at("surrogates").get<std::vector<std::string>>();
  m.victims = j.at("victims").get<std::vector<std::string>>();
  const auto& rates = j.at("rates");
  const auto& mask = j.at("white_box");
  for (size_t s = 0; s < m.surrogates.size(); ++s) {
    std::vector<RatePair> row;
    std::vector<uint8_t> mrow;
    for (size_t v = 0; v < m.victims.size(); ++v) {
      row.push_back(rate_from_json(rates.at(s).at(v)));
      mrow.push_back(static_cast<uint8_t>(mask.at(s).at(v).get<int>()));
    }
    m.rates.push_back(std::move(row));
    m.white_box.push_back(std::move(mrow));
  }
  m.metadata = j.at("metadata");
  return m;
}

// CSV: one `#` comment line embedding the resolved config context, then the
// pinned header and one row per (surrogate, victim) pair under the matrix's
// primary (filtered) convention. Both rates live in the JSON artifact.
inline std::string matrix_to_csv(const TransferMatrix& m, const json& context = json::object()) {
  std::string out = "# " + json{{"context", context}, {"metadata", m.metadata}}.dump() + "\n";
  out += "surrogate,victim,rate,white_box,filtered\n";
  char buf[64];
  for (size_t s = 0; s < m.surrogates.size(); ++s) {
    for (size_t v = 0; v < m.victims.size(); ++v) {
      std::snprintf(buf, sizeof(buf), "%.17g", m.rates[s][v].filtered);
      out += m.surrogates[s] + "," + m.victims[v] + "," + buf + "," +
             (m.white_box[s][v] ? "1" : "0") + ",1\n";
    }
  }
  return out;
}

// plot-data emission: x,y rows
inline std::string ablation_to_csv(const AblationResult& a, const json& context = json::object()) {
  std::string out = "# " + json{{"context", context}}.dump() + "\n";
  out += "x,y\n";
  char buf[64];
  for (const auto& p : a.points) {
    std::snprintf(buf, sizeof(buf), "%.17g", p.avg_transfer);
    out += p.label + "," + buf + "\n";
  }
  return out;
}

inline json ablation_to_json(const AblationResult& a) {
  const char* dim = a.dimension == AblationDimension::layer    ? "layer"
                    : a.dimension == AblationDimension::sigma ? "sigma"
                                                              : "noise_type";
  json points = json::array();
  for (const auto& p : a.points) {
    points.push_back({{"label", p.label},
                      {"layer", p.hook.layer},
                      {"avg_transfer", p.avg_transfer}});
  }
  return json{{"dimension", dim}, {"points", points}, {"best_index", a.best_index},
              {"best_label", a.points[static_cast<size_t>(a.best_index)].label}};
}

inline std::string musigma_to_csv(const std::vector<MuSigmaCell>& cells, const json& context = json::object()) {
  std::string out = "# " + json{{"context", context}}.dump() + "\n";
  out += "mu,sigma,accuracy\n";
  char buf[96];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g\n", static_cast<double>(c.mu),
                  static_cast<double>(c.sigma), c.mean);
    out += buf;
  }
  return out;
}

inline json musigma_to_json(const std::vector<MuSigmaCell>& cells) {
  json arr = json::array();
  for (const auto& c : cells) {
    arr.push_back({{"mu", c.mu}, {"sigma", c.sigma}, {"mean", c.mean}, {"per_seed", c.per_seed}});
  }
  return arr;
}

inline json cosine_to_json(const CosineStats& s) {
  return json{{"arm", s.arm}, {"mean", s.mean}, {"stddev", s.stddev}, {"count", s.count}};
}

// Matrix report emission under the format the caller picked; the CSV carries
// the pinned schema, the JSON the full metadata with both rate conventions.
inline void emit_report(const TransferMatrix& m, const std::string& format, const std::string& path,
                        const json& context = json::object()) {
  if (format == "csv") {
    write_text_file(path, matrix_to_csv(m, context));
  } else if (format == "json") {
    write_text_file(path, json{{"context", context}, {"matrix", matrix_to_json(m)}}.dump(2) + "\n");
  } else {
    fail(ErrorCode::ConfigInvalid, "unknown report format '" + format + "'");
  }
}

// AdvBatch persistence: JSON manifest plus raw little-endian float32
// payloads for the originals and adversarials.
inline void save_adv_batch(const AdvBatch& adv, const std::string& stem) {
  auto payload = [&](const Tensor& t, const std::string& path) {
    std::string bytes;
    bytes.reserve(static_cast<size_t>(t.size()) * 4);
    for (int64_t i = 0; i < t.size(); ++i) {
      const uint32_t u = std::bit_cast<uint32_t>(t.data()[i]);
      for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((u >> (8 * b)) & 0xff));
    }
    write_text_file(path, bytes);
    return fnv1a_bytes(bytes.data(), bytes.size());
  };
  const uint64_t orig_sum = payload(adv.originals, stem + ".orig.f32");
  const uint64_t adv_sum = payload(adv.adversarials, stem + ".adv.f32");
  json manifest = {
      {"shape", adv.originals.shape()},
      {"labels", adv.labels},
      {"white_box_success", adv.white_box_success},
      {"zero_grad_flagged", adv.zero_grad_flagged},
      {"seed", adv.seed},
      {"config",
       {{"variant", attack_variant_name(adv.config.variant)},
        {"epsilon", adv.config.epsilon},
        {"alpha", adv.config.alpha},
        {"iterations", adv.config.iterations},
        {"xi", adv.config.xi},
        {"di_prob", adv.config.di_prob},
        {"di_low", adv.config.di_low},
        {"di_high", adv.config.di_high},
        {"ti_kernel_size", adv.config.ti_kernel_size},
        {"ti_kernel_sigma", adv.config.ti_kernel_sigma},
        {"si_scales", adv.config.si_scales},
        {"vt_samples", adv.config.vt_samples},
        {"vt_beta", adv.config.vt_beta}}},
      {"files", {{"originals", stem + ".orig.f32"}, {"adversarials", stem + ".adv.f32"}}},
      {"checksums", {{"originals", hex64(orig_sum)}, {"adversarials", hex64(adv_sum)}}},
  };
  write_text_file(stem + ".json", manifest.dump(2) + "\n");
}

inline AdvBatch load_adv_batch(const std::string& stem) {
  json manifest;
  try {
    manifest = json::parse(read_text_file(stem + ".json"));
  } catch (const json::exception&) {
    fail(ErrorCode::CorruptCheckpoint, stem + ".json is not valid JSON");
  }
  AdvBatch adv;
  try {
    const Shape shape = manifest.at("shape").get<Shape>();
    auto read_payload = [&](const std::string& path, const std::string& want_sum) {
      const std::string bytes = read_text_file(path);
      if (hex64(fnv1a_bytes(bytes.data(), bytes.size())) != want_sum) {
        fail(ErrorCode::CorruptCheckpoint, path + ": checksum mismatch");
      }
      if (bytes.size() != static_cast<size_t>(shape_numel(shape)) * 4) {
        fail(ErrorCode::CorruptCheckpoint, path + ": wrong payload size");
      }
      std::vector<float> data(static_cast<size_t>(shape_numel(shape)));
      for (size_t i = 0; i < data.size(); ++i) {
        uint32_t u = 0;
        for (int b = 0; b < 4; ++b) {
          u |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[i * 4 + static_cast<size_t>(b)])) << (8 * b);
        }
        data[i] = std::bit_cast<float>(u);
      }
      return Tensor(shape, std::move(data));
    };
    adv.originals = read_payload(manifest.at("files").at("originals").get<std::string>(),
                                 manifest.at("checksums").at("originals").get<std::string>());
    adv.adversarials = read_payload(manifest.at("files").at("adversarials").get<std::string>(),
                                    manifest.at("checksums").at("adversarials").get<std::string>());
    adv.labels = manifest.at("labels").get<std::vector<int>>();
    adv.white_box_success = manifest.at("white_box_success").get<std::vector<uint8_t>>();
    adv.zero_grad_flagged = manifest.at("zero_grad_flagged").get<std::vector<uint8_t>>();
    adv.seed = manifest.at("seed").get<uint64_t>();
    const auto& c = manifest.at("config");
    adv.config.variant = attack_variant_from_string(c.at("variant").get<std::string>());
    adv.config.epsilon = c.at("epsilon").get<float>();
    adv.config.alpha = c.at("alpha").get<float>();
    adv.config.iterations = c.at("iterations").get<int>();
    adv.config.xi = c.at("xi").get<float>();
    adv.config.di_prob = c.at("di_prob").get<float>();
    adv.config.di_low = c.at("di_low").get<int>();
    adv.config.di_high = c.at("di_high").get<int>();
    adv.config.ti_kernel_size = c.at("ti_kernel_size").get<int>();
    adv.config.ti_kernel_sigma = c.at("ti_kernel_sigma").get<float>();
    adv.config.si_scales = c.at("si_scales").get<int>();
    adv.config.vt_samples = c.at("vt_samples").get<int>();
    adv.config.vt_beta = c.at("vt_beta").get<float>();
  } catch (const json::exception&) {
    fail(ErrorCode::CorruptCheckpoint, stem + ".json: field missing or mistyped");
  }
  return adv;
}

}  // namespace faug
