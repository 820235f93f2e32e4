#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsos/data.hpp"

namespace fsos {

// 24-joint body layout (pelvis first). x is lateral (subject's left is +x), y is up, z is forward.
inline constexpr std::size_t kSynthJoints = 24;

namespace joint {
enum : std::size_t {
  pelvis, l_hip, r_hip, spine1, l_knee, r_knee, spine2, l_ankle, r_ankle, spine3, l_foot, r_foot,
  neck, l_collar, r_collar, head, l_shoulder, r_shoulder, l_elbow, r_elbow, l_wrist, r_wrist, l_hand, r_hand
};
}  // namespace joint

inline constexpr std::array<int, kSynthJoints> kParents{-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8,
                                                        9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21};

// Rest pose with arms hanging, in meters relative to the pelvis.
inline std::array<std::array<double, 3>, kSynthJoints> canonical_skeleton(double scale = 0.85) {
  static constexpr double offsets[kSynthJoints][3] = {
      {0, 0, 0},       {0.09, -0.08, 0}, {-0.09, -0.08, 0}, {0, 0.10, 0},     {0, -0.40, 0},    {0, -0.40, 0},
      {0, 0.13, 0},    {0, -0.40, 0},    {0, -0.40, 0},     {0, 0.05, 0},     {0, -0.05, 0.12}, {0, -0.05, 0.12},
      {0, 0.20, 0},    {0.07, 0.12, 0},  {-0.07, 0.12, 0},  {0, 0.10, 0.02},  {0.10, 0.02, 0},  {-0.10, 0.02, 0},
      {0, -0.27, 0},   {0, -0.27, 0},    {0, -0.25, 0},     {0, -0.25, 0},    {0, -0.08, 0},    {0, -0.08, 0}};
  std::array<std::array<double, 3>, kSynthJoints> pos{};
  for (std::size_t j = 1; j < kSynthJoints; ++j) {
    const auto& p = pos[static_cast<std::size_t>(kParents[j])];
    for (int a = 0; a < 3; ++a) pos[j][a] = p[a] + scale * offsets[j][a];
  }
  return pos;
}

// One rotating limb: the subtree below `pivot` turns about `axis` (0=x, 1=y, 2=z) by
// bias + amplitude * sin(2*pi*frequency*t + phase) radians.
struct LimbMotion {
  std::size_t pivot = 0;
  int axis = 0;
  double bias = 0;
  double amplitude = 0;
  double frequency = 1.0;  // Hz
  double phase = 0;
};

struct SynthActionSpec {
  std::string name;
  Split split = Split::train;
  std::vector<LimbMotion> motions;
  double noise = 0.01;              // std of per-coordinate Gaussian jitter, meters
  bool rotate = true;               // random yaw per sequence
  double max_yaw = 0.5;             // radians
  double instance_variation = 1.0;  // 0 disables per-instance amplitude/speed/phase/body/length jitter
  std::size_t min_length = 32;
  std::size_t max_length = 64;
  double fps = 20.0;
};

inline void to_json(nlohmann::json& j, const LimbMotion& m) {
  j = {{"pivot", m.pivot}, {"axis", m.axis}, {"bias", m.bias}, {"amplitude", m.amplitude},
       {"frequency", m.frequency}, {"phase", m.phase}};
}

inline void from_json(const nlohmann::json& j, LimbMotion& m) {
  j.at("pivot").get_to(m.pivot);
  j.at("axis").get_to(m.axis);
  m.bias = j.value("bias", 0.0);
  j.at("amplitude").get_to(m.amplitude);
  m.frequency = j.value("frequency", 1.0);
  m.phase = j.value("phase", 0.0);
  if (m.pivot >= kSynthJoints || m.pivot == 0) throw DataError("motion pivot must be a joint in 1..23");
  if (m.axis < 0 || m.axis > 2) throw DataError("motion axis must be 0, 1 or 2");
}

inline void to_json(nlohmann::json& j, const SynthActionSpec& s) {
  j = {{"name", s.name},     {"split", to_string(s.split)}, {"motions", s.motions},
       {"noise", s.noise},   {"rotate", s.rotate},          {"max_yaw", s.max_yaw},
       {"instance_variation", s.instance_variation},        {"min_length", s.min_length},
       {"max_length", s.max_length},                        {"fps", s.fps}};
}

inline void from_json(const nlohmann::json& j, SynthActionSpec& s) {
  const SynthActionSpec d;
  j.at("name").get_to(s.name);
  s.split = parse_split(j.value("split", std::string("train")));
  s.motions = j.at("motions").get<std::vector<LimbMotion>>();
  s.noise = j.value("noise", d.noise);
  s.rotate = j.value("rotate", d.rotate);
  s.max_yaw = j.value("max_yaw", d.max_yaw);
  s.instance_variation = j.value("instance_variation", d.instance_variation);
  s.min_length = j.value("min_length", d.min_length);
  s.max_length = j.value("max_length", d.max_length);
  s.fps = j.value("fps", d.fps);
  if (s.name.empty()) throw DataError("action spec needs a name");
  if (s.min_length == 0 || s.min_length > s.max_length) throw DataError("action spec: need 1 <= min_length <= max_length");
  if (!(s.noise >= 0) || !(s.fps > 0) || !(s.instance_variation >= 0)) throw DataError("action spec: bad noise/fps/variation");
}

namespace detail {

using Vec3 = std::array<double, 3>;

inline Vec3 rotate_about(const Vec3& v, int axis, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  switch (axis) {
    case 0: return {v[0], c * v[1] - s * v[2], s * v[1] + c * v[2]};
    case 1: return {c * v[0] + s * v[2], v[1], -s * v[0] + c * v[2]};
    default: return {c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]};
  }
}

inline int joint_depth(std::size_t j) {
  int d = 0;
  for (int p = kParents[j]; p >= 0; p = kParents[static_cast<std::size_t>(p)]) ++d;
  return d;
}

inline bool in_subtree(std::size_t j, std::size_t root) {
  for (int p = static_cast<int>(j); p >= 0; p = kParents[static_cast<std::size_t>(p)])
    if (static_cast<std::size_t>(p) == root) return true;
  return false;
}

}  // namespace detail

// Deterministic given the generator state. Output sequences are pelvis-centered and clamped
// into [-1, 1]; their lengths vary unless instance_variation is 0.
inline std::vector<SkeletonSequence> generate_synthetic(const SynthActionSpec& spec, std::size_t count,
                                                        std::mt19937_64& rng) {
  if (count == 0) throw DomainError("count must be >= 1");
  using detail::Vec3;
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Distal pivots first so parent rotations carry already-posed children.
  std::vector<std::size_t> order(spec.motions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detail::joint_depth(spec.motions[a].pivot) > detail::joint_depth(spec.motions[b].pivot);
  });

  std::vector<SkeletonSequence> out;
  out.reserve(count);
  const double var = spec.instance_variation;
  for (std::size_t n = 0; n < count; ++n) {
    // Draw every per-instance quantity up front so the stream layout does not depend on the flags.
    const double body = 1.0 + var * 0.08 * (2 * unit(rng) - 1);
    const double speed = 1.0 + var * 0.2 * (2 * unit(rng) - 1);
    const double amp = std::clamp(1.0 + var * 0.15 * gauss(rng), 0.6, 1.4);
    const double t0 = var * unit(rng) * 10.0;  // random start time shifts every phase consistently
    const double yaw_draw = 2 * unit(rng) - 1;
    const double len_draw = unit(rng);
    const double yaw = spec.rotate ? spec.max_yaw * yaw_draw : 0.0;
    std::size_t length = spec.max_length;
    if (var > 0) {
      length = spec.min_length + static_cast<std::size_t>(len_draw * static_cast<double>(spec.max_length - spec.min_length + 1));
      length = std::min(length, spec.max_length);
    }

    const auto rest = canonical_skeleton(0.85 * body);
    SkeletonSequence seq;
    seq.class_label = spec.name;
    char id[32];
    std::snprintf(id, sizeof id, "%04zu", n);
    seq.source_id = spec.name + "_" + id;
    seq.frames = Tensor(Shape{length, kSynthJoints, 3});
    for (std::size_t t = 0; t < length; ++t) {
      const double time = t0 + speed * static_cast<double>(t) / spec.fps;
      auto pose = rest;
      for (std::size_t mi : order) {
        const LimbMotion& m = spec.motions[mi];
        const double angle = m.bias + amp * m.amplitude * std::sin(2 * std::numbers::pi * m.frequency * time + m.phase);
        const Vec3 origin = pose[m.pivot];
        for (std::size_t j = 0; j < kSynthJoints; ++j) {
          if (j == m.pivot || !detail::in_subtree(j, m.pivot)) continue;
          const Vec3 rel{pose[j][0] - origin[0], pose[j][1] - origin[1], pose[j][2] - origin[2]};
          const Vec3 r = detail::rotate_about(rel, m.axis, angle);
          pose[j] = {origin[0] + r[0], origin[1] + r[1], origin[2] + r[2]};
        }
      }
      for (std::size_t j = 0; j < kSynthJoints; ++j) {
        const Vec3 p = detail::rotate_about(pose[j], 1, yaw);
        for (int a = 0; a < 3; ++a) {
          double v = p[static_cast<std::size_t>(a)];
          if (spec.noise > 0) v += spec.noise * gauss(rng);
          seq.frames[(t * kSynthJoints + j) * 3 + static_cast<std::size_t>(a)] = v;
        }
      }
    }
    seq.frames = center_pelvis(seq.frames, joint::pelvis);
    clamp_range(seq.frames);
    out.push_back(std::move(seq));
  }
  return out;
}

// Twelve actions: eight for training and four held out, including left/right mirrors of
// training actions and two motions with no training counterpart.
inline std::vector<SynthActionSpec> builtin_suite() {
  constexpr double pi = std::numbers::pi;
  using namespace joint;
  auto spec = [](std::string name, Split split, std::vector<LimbMotion> m) {
    SynthActionSpec s;
    s.name = std::move(name);
    s.split = split;
    s.motions = std::move(m);
    return s;
  };
  // Rotation signs: about z, +angle swings a hanging arm toward +x; about x, -angle swings a
  // hanging limb forward and +angle tips the spine forward.
  return {
      spec("wave_right", Split::train,
           {{r_shoulder, 2, -2.3, 0.0, 1.0, 0}, {r_elbow, 2, 0.0, 0.6, 1.5, 0}}),
      spec("squat", Split::train,
           {{l_hip, 0, -0.7, 0.7, 0.5, -pi / 2}, {r_hip, 0, -0.7, 0.7, 0.5, -pi / 2},
            {l_knee, 0, 1.0, 1.0, 0.5, -pi / 2}, {r_knee, 0, 1.0, 1.0, 0.5, -pi / 2},
            {l_shoulder, 0, -0.6, 0.6, 0.5, -pi / 2}, {r_shoulder, 0, -0.6, 0.6, 0.5, -pi / 2}}),
      spec("point_right", Split::train,
           {{r_shoulder, 0, -1.5, 0.15, 0.5, 0}, {r_elbow, 0, -0.1, 0.1, 0.7, 0}}),
      spec("kick_right", Split::train,
           {{r_hip, 0, -0.6, 0.6, 1.0, 0}, {r_knee, 0, 0.4, 0.4, 1.0, pi}}),
      spec("bow", Split::train, {{spine1, 0, 0.5, 0.5, 0.5, -pi / 2}, {neck, 0, 0.2, 0.2, 0.5, -pi / 2}}),
      spec("clap", Split::train,
           {{l_shoulder, 0, -1.4, 0.0, 1.0, 0}, {r_shoulder, 0, -1.4, 0.0, 1.0, 0},
            {l_shoulder, 1, 0.3, 0.3, 1.5, 0}, {r_shoulder, 1, -0.3, -0.3, 1.5, 0}}),
      spec("jumping_jacks", Split::train,
           {{l_shoulder, 2, 1.4, 1.4, 1.0, -pi / 2}, {r_shoulder, 2, -1.4, -1.4, 1.0, -pi / 2},
            {l_hip, 2, 0.25, 0.25, 1.0, -pi / 2}, {r_hip, 2, -0.25, -0.25, 1.0, -pi / 2}}),
      spec("twist", Split::train,
           {{spine1, 1, 0.0, 0.7, 0.7, 0}, {l_shoulder, 2, 0.6, 0.0, 1.0, 0}, {r_shoulder, 2, -0.6, 0.0, 1.0, 0}}),
      spec("wave_left", Split::test,
           {{l_shoulder, 2, 2.3, 0.0, 1.0, 0}, {l_elbow, 2, 0.0, -0.6, 1.5, 0}}),
      spec("kick_left", Split::test,
           {{l_hip, 0, -0.6, 0.6, 1.0, 0}, {l_knee, 0, 0.4, 0.4, 1.0, pi}}),
      spec("arm_circles", Split::test,
           {{l_shoulder, 2, 1.5, 0.0, 1.0, 0}, {r_shoulder, 2, -1.5, 0.0, 1.0, 0},
            {l_shoulder, 0, 0.0, 0.4, 1.2, 0}, {r_shoulder, 0, 0.0, 0.4, 1.2, 0},
            {l_shoulder, 1, 0.0, 0.4, 1.2, pi / 2}, {r_shoulder, 1, 0.0, -0.4, 1.2, pi / 2}}),
      spec("raise_both", Split::test,
           {{l_shoulder, 0, -1.5, 1.4, 0.6, 0}, {r_shoulder, 0, -1.5, 1.4, 0.6, 0}}),
  };
}

inline constexpr std::size_t kBuiltinPerClass = 50;

// Generates every spec with its own derived seed so adding a spec never perturbs the others.
inline std::vector<std::pair<ManifestClass, std::vector<SkeletonSequence>>> generate_suite(
    const std::vector<SynthActionSpec>& specs, std::size_t per_class, std::uint64_t seed) {
  std::vector<std::pair<ManifestClass, std::vector<SkeletonSequence>>> out;
  std::seed_seq base{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::vector<std::uint64_t> seeds(specs.size());
  {
    std::vector<std::uint32_t> words(2 * specs.size());
    base.generate(words.begin(), words.end());
    for (std::size_t i = 0; i < specs.size(); ++i) seeds[i] = (std::uint64_t{words[2 * i]} << 32) | words[2 * i + 1];
  }
  for (std::size_t i = 0; i < specs.size(); ++i) {
    std::mt19937_64 rng(seeds[i]);
    ManifestClass mc;
    mc.name = specs[i].name;
    mc.split = specs[i].split;
    out.emplace_back(mc, generate_synthetic(specs[i], per_class, rng));
  }
  return out;
}

// In-memory equivalent of writing a generated suite and loading it back.
inline Dataset preprocess_suite(const std::vector<std::pair<ManifestClass, std::vector<SkeletonSequence>>>& suite,
                                std::size_t frames, std::size_t pelvis = 0) {
  Dataset ds;
  for (const auto& [meta, seqs] : suite) {
    ClassSequences c;
    c.name = meta.name;
    c.split = meta.split;
    for (const auto& s : seqs) {
      SkeletonSequence p = s;
      p.frames = preprocess(s.frames, {frames, pelvis}, &ds.warnings, s.source_id);
      c.sequences.push_back(std::move(p));
    }
    std::stable_sort(c.sequences.begin(), c.sequences.end(),
                     [](const SkeletonSequence& a, const SkeletonSequence& b) { return a.source_id < b.source_id; });
    c.exemplar = 0;
    if (!c.sequences.empty()) ds.classes.push_back(std::move(c));
  }
  return ds;
}

}  // namespace fsos
