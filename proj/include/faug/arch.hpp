#pragma once

#include <string>

#include "faug/error.hpp"

namespace faug {

enum class Arch { mlp, cnn_a, cnn_b, tiny_attn };

inline const char* arch_name(Arch a) {
  switch (a) {
    case Arch::mlp: return "mlp";
    case Arch::cnn_a: return "cnn_a";
    case Arch::cnn_b: return "cnn_b";
    case Arch::tiny_attn: return "tiny_attn";
  }
  fail(ErrorCode::UnknownArchitecture, "architecture id " + std::to_string(static_cast<int>(a)));
}

inline Arch arch_from_string(const std::string& name) {
  if (name == "mlp") return Arch::mlp;
  if (name == "cnn_a") return Arch::cnn_a;
  if (name == "cnn_b") return Arch::cnn_b;
  if (name == "tiny_attn") return Arch::tiny_attn;
  fail(ErrorCode::UnknownArchitecture, "no architecture named '" + name + "'");
}

}  // namespace faug
