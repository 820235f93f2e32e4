#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>

#include <json.hpp>

#include "fsos/errors.hpp"

namespace fsos {

enum class PositionalEncodingKind { sinusoidal, learned };

inline std::string to_string(PositionalEncodingKind k) {
  return k == PositionalEncodingKind::sinusoidal ? "sinusoidal" : "learned";
}

inline PositionalEncodingKind parse_pe_kind(const std::string& s) {
  if (s == "sinusoidal") return PositionalEncodingKind::sinusoidal;
  if (s == "learned") return PositionalEncodingKind::learned;
  throw ConfigError("unknown positional encoding '" + s + "' (expected sinusoidal|learned)");
}

inline std::size_t pair_count(std::size_t frames) { return frames * (frames - 1) / 2; }

struct ModelConfig {
  std::size_t frames = 16;
  std::size_t joints = 24;
  std::size_t embed_dim = 64;
  std::size_t upsilon_dim = 64;  // query projection
  std::size_t gamma_dim = 64;    // key projection; must equal upsilon_dim
  std::size_t lambda_dim = 64;   // value projection
  std::size_t reduced_dim = 16;  // discriminator per-pair width
  std::array<std::size_t, 3> disc_hidden{0, 0, 0};  // 0 = derive from the pair count
  double tau = 0.5;
  double sigma = 1.0;
  PositionalEncodingKind pe = PositionalEncodingKind::sinusoidal;

  std::size_t pairs() const { return pair_count(frames); }
  std::size_t frame_width() const { return joints * 3; }

  // Hidden widths of the discriminator trunk: a geometric reduction of the flattened input
  // unless set explicitly.
  std::array<std::size_t, 3> resolved_disc_hidden() const {
    if (disc_hidden[0] && disc_hidden[1] && disc_hidden[2]) return disc_hidden;
    const std::size_t h1 = std::max<std::size_t>(4, pairs() * reduced_dim / 4);
    const std::size_t h2 = std::max<std::size_t>(4, h1 / 4);
    const std::size_t h3 = std::max<std::size_t>(4, h1 / 16);
    return {h1, h2, h3};
  }

  void validate() const {
    if (frames < 2) throw ConfigError("frames must be >= 2 so that frame pairs exist");
    if (!joints || !embed_dim || !upsilon_dim || !gamma_dim || !lambda_dim || !reduced_dim) {
      throw ConfigError("all model dimensions must be >= 1");
    }
    if (upsilon_dim != gamma_dim) throw ConfigError("upsilon_dim must equal gamma_dim (attention dot product)");
    if (upsilon_dim < 2 || gamma_dim < 2) throw ConfigError("query/key projections need >= 2 dims for layer norm");
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
    if (!(sigma >= 0.0)) throw ConfigError("sigma must be >= 0");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"frames", c.frames},
                     {"joints", c.joints},
                     {"embed_dim", c.embed_dim},
                     {"upsilon_dim", c.upsilon_dim},
                     {"gamma_dim", c.gamma_dim},
                     {"lambda_dim", c.lambda_dim},
                     {"reduced_dim", c.reduced_dim},
                     {"disc_hidden", c.disc_hidden},
                     {"tau", c.tau},
                     {"sigma", c.sigma},
                     {"pe", to_string(c.pe)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("frames").get_to(c.frames);
  j.at("joints").get_to(c.joints);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("upsilon_dim").get_to(c.upsilon_dim);
  j.at("gamma_dim").get_to(c.gamma_dim);
  j.at("lambda_dim").get_to(c.lambda_dim);
  j.at("reduced_dim").get_to(c.reduced_dim);
  j.at("disc_hidden").get_to(c.disc_hidden);
  j.at("tau").get_to(c.tau);
  j.at("sigma").get_to(c.sigma);
  c.pe = parse_pe_kind(j.at("pe").get<std::string>());
}

}  // namespace fsos
