#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsos/training.hpp"

namespace fsos {

// Binary layout (all integers little-endian):
//   8 bytes  magic "FSOSCKPT"
//   u32      format version (1)
//   u32      reserved (0)
//   u64      header length in bytes
//   header   UTF-8 JSON: config, tensor table, optional training section
//   payload  f64 values, little-endian, tensors back to back at their table offsets
inline constexpr std::array<char, 8> kCheckpointMagic{'F', 'S', 'O', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct LoadedCheckpoint {
  Model model;
  std::optional<OptimizerState> opt;
  std::optional<std::string> rng;
  std::optional<TrainConfig> train;

  bool resumable() const { return opt && rng && train; }

  TrainState resume_state() const {
    if (!resumable()) throw DataError("checkpoint holds no training state");
    return TrainState{model, *opt, rng_from_state(*rng), *train};
  }
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_unsigned_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const unsigned char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

struct NamedTensor {
  std::string name;
  const Tensor* tensor;
};

}  // namespace detail

inline std::string encode_checkpoint(const Model& model, const TrainState* state = nullptr) {
  std::vector<detail::NamedTensor> tensors;
  model.params().for_each([&](const char* n, const Tensor& t) { tensors.push_back({n, &t}); });
  nlohmann::json header;
  header["config"] = model.config();
  if (state) {
    state->opt.m.for_each([&](const char* n, const Tensor& t) { tensors.push_back({std::string("adam_m.") + n, &t}); });
    state->opt.v.for_each([&](const char* n, const Tensor& t) { tensors.push_back({std::string("adam_v.") + n, &t}); });
    header["training"] = {{"step", state->opt.step}, {"rng", rng_state(state->rng)}, {"config", state->train}};
  }
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& nt : tensors) {
    table.push_back({{"name", nt.name}, {"shape", nt.tensor->shape()}, {"offset", offset}, {"count", nt.tensor->size()}});
    offset += nt.tensor->size();
  }
  header["tensors"] = table;
  const std::string h = header.dump();

  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, 0);
  detail::put_le<std::uint64_t>(out, h.size());
  out += h;
  out.reserve(out.size() + 8 * offset);
  for (const auto& nt : tensors)
    for (double v : nt.tensor->storage()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  return out;
}

inline LoadedCheckpoint decode_checkpoint(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kCheckpointMagic.data(), 8) != 0) {
    throw DataError("not a checkpoint (bad magic)");
  }
  const auto version = detail::get_le<std::uint32_t>(p + 8);
  if (version != kCheckpointVersion) throw DataError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = detail::get_le<std::uint64_t>(p + 16);
  if (hlen > bytes.size() - 24) throw DataError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(24, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const std::size_t payload = 24 + hlen;
  const std::size_t values = (bytes.size() - payload) / 8;

  try {
    const ModelConfig cfg = header.at("config").get<ModelConfig>();
    std::map<std::string, Tensor> by_name;
    for (const auto& e : header.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto count = e.at("count").get<std::size_t>();
      if (count != numel(shape) || offset > values || count > values - offset) {
        throw DataError("checkpoint tensor '" + name + "' lies outside the payload");
      }
      Tensor t(shape);
      for (std::size_t i = 0; i < count; ++i) {
        t[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(p + payload + 8 * (offset + i)));
      }
      by_name.emplace(name, std::move(t));
    }
    auto take = [&](const std::string& name) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw DataError("checkpoint is missing tensor '" + name + "'");
      return it->second;
    };
    ModelParams params;
    params.for_each([&](const char* n, Tensor& t) { t = take(n); });
    LoadedCheckpoint ck{Model(cfg, std::move(params)), {}, {}, {}};
    if (header.contains("training")) {
      const auto& tr = header.at("training");
      OptimizerState opt;
      opt.step = tr.at("step").get<std::size_t>();
      opt.m.for_each([&](const char* n, Tensor& t) { t = take(std::string("adam_m.") + n); });
      opt.v.for_each([&](const char* n, Tensor& t) { t = take(std::string("adam_v.") + n); });
      ck.opt = std::move(opt);
      ck.rng = tr.at("rng").get<std::string>();
      ck.train = tr.at("config").get<TrainConfig>();
    }
    return ck;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint holds an invalid configuration: ") + e.what());
  } catch (const DimensionError& e) {
    throw DataError(std::string("checkpoint tensors do not match the configuration: ") + e.what());
  }
}

// Written to a sibling temporary file first so an interrupted save never clobbers the previous one.
inline void save_checkpoint(const std::filesystem::path& path, const Model& model, const TrainState* state = nullptr) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open " + tmp.string() + " for writing");
    const std::string bytes = encode_checkpoint(model, state);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline void save_checkpoint(const std::filesystem::path& path, const TrainState& state) {
  save_checkpoint(path, state.model, &state);
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace fsos
