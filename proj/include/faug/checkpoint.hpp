#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "faug/error.hpp"
#include "faug/model.hpp"

namespace faug {

// Checkpoint file layout:
//   bytes 0..3   magic "FAUG"
//   bytes 4..7   format version, u32 little-endian (currently 1)
//   bytes 8..11  header length in bytes, u32 little-endian
//   header       UTF-8 JSON: architecture, shapes in declaration order,
//                seeds, training metrics
//   payload      parameter values, float32 little-endian, header order
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline uint32_t get_u32(const std::string& buf, size_t at) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) {
  put_u32(out, std::bit_cast<uint32_t>(f));
}

inline float get_f32(const std::string& buf, size_t at) {
  return std::bit_cast<float>(get_u32(buf, at));
}

}  // namespace detail

inline nlohmann::json checkpoint_header(const Model& m) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& name : m.param_order) {
    params.push_back({{"name", name}, {"shape", m.param(name).shape()}});
  }
  return nlohmann::json{
      {"architecture", arch_name(m.config.architecture)},
      {"num_classes", m.config.num_classes},
      {"input_shape", m.config.input_shape},
      {"init_seed", m.config.init_seed},
      {"params", params},
      {"metrics",
       {{"train_accuracy", m.metrics.train_accuracy},
        {"test_accuracy", m.metrics.test_accuracy},
        {"final_loss", m.metrics.final_loss},
        {"epochs", m.metrics.epochs},
        {"train_seed", m.metrics.train_seed},
        {"data_seed", m.metrics.data_seed}}},
  };
}

inline std::string serialize_checkpoint(const Model& m) {
  const std::string header = checkpoint_header(m).dump();
  std::string out;
  out.reserve(12 + header.size());
  out += "FAUG";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<uint32_t>(header.size()));
  out += header;
  for (const auto& name : m.param_order) {
    for (float f : m.param(name).values()) detail::put_f32(out, f);
  }
  return out;
}

inline void save_checkpoint(const Model& m, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorCode::IoError, "cannot open '" + path + "' for writing");
  const std::string blob = serialize_checkpoint(m);
  f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!f) fail(ErrorCode::IoError, "short write to '" + path + "'");
}

inline Model deserialize_checkpoint(const std::string& blob, const std::string& origin = "<memory>") {
  if (blob.size() < 12 || blob.compare(0, 4, "FAUG") != 0) {
    fail(ErrorCode::CorruptCheckpoint, origin + ": bad magic");
  }
  const uint32_t version = detail::get_u32(blob, 4);
  if (version != kCheckpointVersion) {
    fail(ErrorCode::VersionMismatch, origin + ": format version " + std::to_string(version) +
                                         ", expected " + std::to_string(kCheckpointVersion));
  }
  const uint32_t header_len = detail::get_u32(blob, 8);
  if (blob.size() < 12 + static_cast<size_t>(header_len)) {
    fail(ErrorCode::CorruptCheckpoint, origin + ": truncated header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(blob.substr(12, header_len));
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::CorruptCheckpoint, origin + ": header is not valid JSON");
  }

  Model m;
  try {
    m.config.architecture = arch_from_string(header.at("architecture").get<std::string>());
    m.config.num_classes = header.at("num_classes").get<int>();
    m.config.input_shape = header.at("input_shape").get<Shape>();
    m.config.init_seed = header.at("init_seed").get<uint64_t>();
    const auto& metrics = header.at("metrics");
    m.metrics.train_accuracy = metrics.at("train_accuracy").get<double>();
    m.metrics.test_accuracy = metrics.at("test_accuracy").get<double>();
    m.metrics.final_loss = metrics.at("final_loss").get<double>();
    m.metrics.epochs = metrics.at("epochs").get<int>();
    m.metrics.train_seed = metrics.at("train_seed").get<uint64_t>();
    m.metrics.data_seed = metrics.at("data_seed").get<uint64_t>();

    size_t at = 12 + header_len;
    for (const auto& p : header.at("params")) {
      const std::string name = p.at("name").get<std::string>();
      const Shape shape = p.at("shape").get<Shape>();
      const int64_t n = shape_numel(shape);
      if (blob.size() < at + static_cast<size_t>(n) * 4) {
        fail(ErrorCode::CorruptCheckpoint, origin + ": truncated payload at '" + name + "'");
      }
      std::vector<float> data(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) data[static_cast<size_t>(i)] = detail::get_f32(blob, at + static_cast<size_t>(i) * 4);
      at += static_cast<size_t>(n) * 4;
      m.param_order.push_back(name);
      m.params.emplace(name, Tensor(shape, std::move(data), /*requires_grad=*/false));
    }
    if (at != blob.size()) fail(ErrorCode::CorruptCheckpoint, origin + ": trailing bytes after payload");
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::CorruptCheckpoint, origin + ": header field missing or mistyped");
  }
  return m;
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::IoError, "cannot open '" + path + "'");
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(blob, path);
}

}  // namespace faug
