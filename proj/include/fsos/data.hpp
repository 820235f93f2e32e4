#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fsos/errors.hpp"
#include "fsos/tensor.hpp"

namespace fsos {

// Frames are stored as a T x J x 3 tensor of joint coordinates in meters.
struct SkeletonSequence {
  Tensor frames;
  std::string class_label;
  std::string source_id;

  std::size_t length() const { return frames.rank() == 3 ? frames.dim(0) : 0; }
  std::size_t joints() const { return frames.rank() == 3 ? frames.dim(1) : 0; }
};

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "test";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "' (expected train|val|test)");
}

// ---------------------------------------------------------------------------
// Preprocessing

inline std::vector<std::size_t> subsample_indices(std::size_t length, std::size_t frames) {
  if (length == 0) throw DataError("cannot subsample an empty sequence");
  if (frames == 0) throw DomainError("target frame count must be >= 1");
  std::vector<std::size_t> idx(frames);
  if (frames == 1) return idx;
  for (std::size_t i = 0; i < frames; ++i) {
    // Exact rational rounding of i*(T-1)/(F-1), halves rounded up.
    const std::size_t num = i * (length - 1);
    const std::size_t den = frames - 1;
    idx[i] = (2 * num + den) / (2 * den);
  }
  // Shorter inputs pad by repeating the last frame rather than interpolating.
  if (length < frames) {
    for (std::size_t i = 0; i < frames; ++i) idx[i] = std::min(i, length - 1);
  }
  return idx;
}

inline Tensor subsample_frames(const Tensor& seq, std::size_t frames) {
  if (seq.rank() != 3) throw DimensionError("expected a T x J x 3 sequence, got " + to_string(seq.shape()));
  const std::size_t width = seq.dim(1) * seq.dim(2);
  const auto idx = subsample_indices(seq.dim(0), frames);
  Tensor out(Shape{frames, seq.dim(1), seq.dim(2)});
  for (std::size_t i = 0; i < frames; ++i) {
    std::copy_n(seq.storage().begin() + static_cast<std::ptrdiff_t>(idx[i] * width), width,
                out.storage().begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return out;
}

inline Tensor center_pelvis(const Tensor& seq, std::size_t pelvis) {
  if (seq.rank() != 3 || seq.dim(2) != 3) throw DimensionError("expected a T x J x 3 sequence, got " + to_string(seq.shape()));
  if (pelvis >= seq.dim(1)) {
    throw DomainError("pelvis joint " + std::to_string(pelvis) + " out of range for " + std::to_string(seq.dim(1)) + " joints");
  }
  Tensor out = seq;
  const std::size_t joints = seq.dim(1);
  for (std::size_t t = 0; t < seq.dim(0); ++t) {
    const std::size_t base = t * joints * 3;
    const double origin[3] = {seq[base + pelvis * 3], seq[base + pelvis * 3 + 1], seq[base + pelvis * 3 + 2]};
    for (std::size_t j = 0; j < joints; ++j)
      for (std::size_t a = 0; a < 3; ++a) out[base + j * 3 + a] = seq[base + j * 3 + a] - origin[a];
  }
  return out;
}

// Clamp coordinates into [-1, 1]; returns how many values were changed.
inline std::size_t clamp_range(Tensor& seq) {
  std::size_t changed = 0;
  for (double& v : seq.storage()) {
    if (v > 1.0 || v < -1.0) {
      v = std::clamp(v, -1.0, 1.0);
      ++changed;
    }
  }
  return changed;
}

struct Violation {
  enum class Kind { shape, finite, range, pelvis };
  Kind kind;
  std::size_t frame = 0, joint = 0, axis = 0;
  double value = 0;
  std::string message;
};

inline std::string to_string(Violation::Kind k) {
  switch (k) {
    case Violation::Kind::shape: return "shape";
    case Violation::Kind::finite: return "finite";
    case Violation::Kind::range: return "range";
    case Violation::Kind::pelvis: return "pelvis";
  }
  return "?";
}

struct ValidationOptions {
  std::size_t frames = 0;  // 0 accepts any length
  std::size_t joints = 0;  // 0 accepts any joint count
  std::size_t pelvis = 0;
  bool check_pelvis = true;
};

// Structured check of a preprocessed sequence. Never throws and never alters the data.
inline std::vector<Violation> validate_sequence(const Tensor& seq, const ValidationOptions& opt = {}) {
  std::vector<Violation> out;
  auto shape_violation = [&](std::string msg) {
    out.push_back({Violation::Kind::shape, 0, 0, 0, 0.0, std::move(msg)});
  };
  if (seq.rank() != 3 || seq.dim(2) != 3) {
    shape_violation("expected a F x J x 3 array, got " + to_string(seq.shape()));
    return out;
  }
  if (opt.frames && seq.dim(0) != opt.frames) {
    shape_violation("expected " + std::to_string(opt.frames) + " frames, got " + std::to_string(seq.dim(0)));
  }
  if (opt.joints && seq.dim(1) != opt.joints) {
    shape_violation("expected " + std::to_string(opt.joints) + " joints, got " + std::to_string(seq.dim(1)));
  }
  static constexpr char kAxis[] = "xyz";
  const std::size_t joints = seq.dim(1);
  for (std::size_t t = 0; t < seq.dim(0); ++t) {
    for (std::size_t j = 0; j < joints; ++j) {
      for (std::size_t a = 0; a < 3; ++a) {
        const double v = seq[(t * joints + j) * 3 + a];
        const std::string where =
            "frame " + std::to_string(t) + " joint " + std::to_string(j) + " axis " + kAxis[a];
        if (!std::isfinite(v)) {
          out.push_back({Violation::Kind::finite, t, j, a, v, "non-finite value at " + where});
        } else if (v < -1.0 || v > 1.0) {
          out.push_back({Violation::Kind::range, t, j, a, v, "value " + std::to_string(v) + " outside [-1, 1] at " + where});
        }
      }
    }
    if (opt.check_pelvis && opt.pelvis < joints) {
      for (std::size_t a = 0; a < 3; ++a) {
        const double v = seq[(t * joints + opt.pelvis) * 3 + a];
        if (v != 0.0 && std::isfinite(v)) {
          out.push_back({Violation::Kind::pelvis, t, opt.pelvis, a, v,
                         "pelvis not at origin in frame " + std::to_string(t)});
          break;
        }
      }
    }
  }
  return out;
}

struct PreprocessOptions {
  std::size_t frames = 16;
  std::size_t pelvis = 0;
};

// subsample -> center -> clamp. Clamping is reported through `warnings`.
inline Tensor preprocess(const Tensor& raw, const PreprocessOptions& opt, std::vector<std::string>* warnings = nullptr,
                         std::string_view label = {}) {
  Tensor seq = center_pelvis(subsample_frames(raw, opt.frames), opt.pelvis);
  const std::size_t clamped = clamp_range(seq);
  if (clamped && warnings) {
    warnings->push_back(std::string(label.empty() ? "sequence" : label) + ": clamped " + std::to_string(clamped) +
                        " coordinate(s) into [-1, 1]");
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Sequence files

inline constexpr std::string_view kSequenceMagic = "FSOS-SKELETON";
inline constexpr int kSequenceVersion = 1;

namespace detail {

inline void append_double(std::string& out, double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, res.ptr);
}

inline bool parse_double(std::string_view tok, double& v) {
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  return res.ec == std::errc{} && res.ptr == tok.data() + tok.size();
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> toks;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) toks.push_back(line.substr(start, i - start));
  }
  return toks;
}

inline std::string header_value(std::string_view line, std::string_view key, std::size_t lineno) {
  if (!line.starts_with(key) || line.size() <= key.size() || line[key.size()] != ' ') {
    throw DataError("line " + std::to_string(lineno) + ": expected '" + std::string(key) + " <value>'");
  }
  std::string v(line.substr(key.size() + 1));
  while (!v.empty() && (v.back() == '\r' || v.back() == ' ')) v.pop_back();
  return v;
}

inline std::size_t parse_count(const std::string& s, std::size_t lineno) {
  std::size_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size() || v == 0) {
    throw DataError("line " + std::to_string(lineno) + ": expected a positive integer, got '" + s + "'");
  }
  return v;
}

}  // namespace detail

inline std::string format_sequence(const SkeletonSequence& seq) {
  if (seq.frames.rank() != 3 || seq.frames.dim(2) != 3) {
    throw DimensionError("sequence must be T x J x 3, got " + to_string(seq.frames.shape()));
  }
  if (seq.class_label.find('\n') != std::string::npos || seq.source_id.find('\n') != std::string::npos) {
    throw DataError("class label and source id must be single-line");
  }
  std::string out;
  out += kSequenceMagic;
  out += ' ' + std::to_string(kSequenceVersion) + '\n';
  out += "joints " + std::to_string(seq.joints()) + '\n';
  out += "frames " + std::to_string(seq.length()) + '\n';
  out += "class " + seq.class_label + '\n';
  out += "source_id " + seq.source_id + '\n';
  const std::size_t width = seq.joints() * 3;
  for (std::size_t t = 0; t < seq.length(); ++t) {
    for (std::size_t k = 0; k < width; ++k) {
      if (k) out += ' ';
      detail::append_double(out, seq.frames[t * width + k]);
    }
    out += '\n';
  }
  return out;
}

inline SkeletonSequence parse_sequence(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t nl = text.find('\n', pos);
    const std::size_t end = nl == std::string_view::npos ? text.size() : nl;
    lines.push_back(text.substr(pos, end - pos));
    pos = end + 1;
  }
  while (!lines.empty() && detail::split_ws(lines.back()).empty()) lines.pop_back();
  if (lines.size() < 5) throw DataError("truncated header (need 5 header lines)");

  const auto magic = detail::split_ws(lines[0]);
  if (magic.size() != 2 || magic[0] != kSequenceMagic) throw DataError("line 1: missing FSOS-SKELETON magic");
  if (magic[1] != "1") throw DataError("line 1: unsupported format version " + std::string(magic[1]));

  SkeletonSequence seq;
  const std::size_t joints = detail::parse_count(detail::header_value(lines[1], "joints", 2), 2);
  const std::size_t length = detail::parse_count(detail::header_value(lines[2], "frames", 3), 3);
  seq.class_label = detail::header_value(lines[3], "class", 4);
  seq.source_id = detail::header_value(lines[4], "source_id", 5);
  if (seq.source_id.empty()) throw DataError("line 5: empty source_id");
  if (lines.size() - 5 != length) {
    throw DataError("header declares " + std::to_string(length) + " frames but file has " +
                    std::to_string(lines.size() - 5) + " data rows");
  }
  seq.frames = Tensor(Shape{length, joints, 3});
  const std::size_t width = joints * 3;
  for (std::size_t t = 0; t < length; ++t) {
    const auto toks = detail::split_ws(lines[5 + t]);
    if (toks.size() != width) {
      throw DataError("line " + std::to_string(6 + t) + ": expected " + std::to_string(width) + " values, got " +
                      std::to_string(toks.size()));
    }
    for (std::size_t k = 0; k < width; ++k) {
      if (!detail::parse_double(toks[k], seq.frames[t * width + k])) {
        throw DataError("line " + std::to_string(6 + t) + ": bad number '" + std::string(toks[k]) + "'");
      }
    }
  }
  return seq;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw DataError("write failed for " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_sequence(const std::filesystem::path& path, const SkeletonSequence& seq) {
  write_text_file(path, format_sequence(seq));
}

inline SkeletonSequence read_sequence(const std::filesystem::path& path) {
  try {
    return parse_sequence(read_text_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Dataset manifest and loading

inline constexpr std::string_view kManifestName = "manifest.json";

struct ManifestClass {
  std::string name;
  Split split = Split::test;
  std::string exemplar;            // source_id; empty selects by rule
  std::vector<std::string> files;  // relative to the dataset directory
};

struct Manifest {
  std::size_t joints = 0;
  std::size_t pelvis_joint = 0;
  std::vector<ManifestClass> classes;
};

inline nlohmann::json manifest_to_json(const Manifest& m) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : m.classes) {
    classes.push_back({{"name", c.name}, {"split", to_string(c.split)}, {"exemplar", c.exemplar}, {"files", c.files}});
  }
  return {{"format", "fsos-dataset"}, {"version", 1}, {"joints", m.joints}, {"pelvis_joint", m.pelvis_joint},
          {"classes", classes}};
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "fsos-dataset") throw DataError("manifest: format must be 'fsos-dataset'");
    if (j.at("version") != 1) throw DataError("manifest: unsupported version");
    Manifest m;
    m.joints = j.value("joints", std::size_t{0});
    m.pelvis_joint = j.value("pelvis_joint", std::size_t{0});
    for (const auto& c : j.at("classes")) {
      ManifestClass mc;
      mc.name = c.at("name").get<std::string>();
      mc.split = parse_split(c.value("split", std::string("test")));
      mc.exemplar = c.value("exemplar", std::string());
      mc.files = c.at("files").get<std::vector<std::string>>();
      m.classes.push_back(std::move(mc));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("manifest: ") + e.what());
  }
}

struct ClassSequences {
  std::string name;
  Split split = Split::test;
  std::vector<SkeletonSequence> sequences;  // preprocessed, sorted by source_id
  std::size_t exemplar = 0;                 // index into sequences
};

struct Dataset {
  std::vector<ClassSequences> classes;
  std::vector<std::string> warnings;

  std::vector<std::size_t> classes_in(Split s) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i].split == s) idx.push_back(i);
    return idx;
  }
  const ClassSequences* find(std::string_view name) const {
    for (const auto& c : classes)
      if (c.name == name) return &c;
    return nullptr;
  }
};

struct LoadOptions {
  std::size_t frames = 16;
  std::size_t joints = 0;  // 0 accepts the first joint count seen
  std::optional<std::size_t> pelvis;  // overrides the manifest value
};

// Loads every sequence listed in the manifest (or every *.seq file when there is none),
// preprocesses it, and groups it by class. Bad files are skipped with a warning.
inline Dataset load_dataset(const std::filesystem::path& dir, const LoadOptions& opt = {}) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError(dir.string() + " is not a directory");

  Manifest manifest;
  const fs::path manifest_path = dir / kManifestName;
  const bool has_manifest = fs::exists(manifest_path);
  if (has_manifest) {
    try {
      manifest = manifest_from_json(nlohmann::json::parse(read_text_file(manifest_path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(manifest_path.string() + ": " + e.what());
    }
  } else {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".seq") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    ManifestClass all;
    for (const auto& f : files) all.files.push_back(fs::relative(f, dir).generic_string());
    if (!all.files.empty()) manifest.classes.push_back(std::move(all));
  }

  Dataset ds;
  const std::size_t pelvis = opt.pelvis.value_or(manifest.pelvis_joint);
  std::size_t joints = opt.joints ? opt.joints : manifest.joints;
  std::map<std::string, ClassSequences> by_name;
  std::vector<std::string> order;
  std::map<std::string, std::string> wanted_exemplar;

  for (const auto& mc : manifest.classes) {
    for (const auto& rel : mc.files) {
      SkeletonSequence seq;
      try {
        seq = read_sequence(dir / rel);
      } catch (const DataError& e) {
        ds.warnings.push_back(std::string("skipped ") + e.what());
        continue;
      }
      // Without a manifest the class comes from the file header.
      const std::string name = has_manifest ? mc.name : seq.class_label;
      if (name.empty()) {
        ds.warnings.push_back("skipped " + rel + ": no class label");
        continue;
      }
      if (has_manifest && !seq.class_label.empty() && seq.class_label != mc.name) {
        ds.warnings.push_back(rel + ": header class '" + seq.class_label + "' differs from manifest class '" + mc.name + "'");
      }
      if (!joints) joints = seq.joints();
      if (seq.joints() != joints) {
        ds.warnings.push_back("skipped " + rel + ": " + std::to_string(seq.joints()) + " joints, expected " +
                              std::to_string(joints));
        continue;
      }
      if (pelvis >= joints) throw DataError("pelvis joint " + std::to_string(pelvis) + " out of range");
      const auto bad = std::find_if(seq.frames.storage().begin(), seq.frames.storage().end(),
                                    [](double v) { return !std::isfinite(v); });
      if (bad != seq.frames.storage().end()) {
        ds.warnings.push_back("skipped " + rel + ": non-finite coordinate");
        continue;
      }
      seq.frames = preprocess(seq.frames, {opt.frames, pelvis}, &ds.warnings, rel);
      seq.class_label = name;
      auto [it, inserted] = by_name.try_emplace(name);
      if (inserted) {
        order.push_back(name);
        it->second.name = name;
        it->second.split = mc.split;
        if (has_manifest && !mc.exemplar.empty()) wanted_exemplar[name] = mc.exemplar;
      }
      it->second.sequences.push_back(std::move(seq));
    }
    if (has_manifest && !by_name.count(mc.name)) {
      ds.warnings.push_back("class '" + mc.name + "' has no valid sequences and was excluded");
    }
  }

  for (const auto& name : order) {
    ClassSequences& c = by_name.at(name);
    std::stable_sort(c.sequences.begin(), c.sequences.end(),
                     [](const SkeletonSequence& a, const SkeletonSequence& b) { return a.source_id < b.source_id; });
    c.exemplar = 0;
    if (auto w = wanted_exemplar.find(name); w != wanted_exemplar.end()) {
      auto it = std::find_if(c.sequences.begin(), c.sequences.end(),
                             [&](const SkeletonSequence& s) { return s.source_id == w->second; });
      if (it != c.sequences.end()) {
        c.exemplar = static_cast<std::size_t>(it - c.sequences.begin());
      } else {
        ds.warnings.push_back("class '" + name + "': exemplar '" + w->second + "' not loaded, using '" +
                              c.sequences.front().source_id + "'");
      }
    }
    ds.classes.push_back(std::move(c));
  }
  return ds;
}

// Writes raw sequences grouped by class plus a manifest. Files land in <dir>/<class>/<source_id>.seq.
inline Manifest write_dataset(const std::filesystem::path& dir,
                              const std::vector<std::pair<ManifestClass, std::vector<SkeletonSequence>>>& classes,
                              std::size_t pelvis_joint = 0) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory " + dir.string());
  Manifest m;
  m.pelvis_joint = pelvis_joint;
  for (const auto& [meta, seqs] : classes) {
    ManifestClass mc = meta;
    mc.files.clear();
    fs::create_directories(dir / mc.name, ec);
    if (ec) throw DataError("cannot create directory " + (dir / mc.name).string());
    std::vector<std::string> ids;
    for (const auto& s : seqs) {
      if (!m.joints) m.joints = s.joints();
      const std::string rel = mc.name + "/" + s.source_id + ".seq";
      write_sequence(dir / rel, s);
      mc.files.push_back(rel);
      ids.push_back(s.source_id);
    }
    if (mc.exemplar.empty() && !ids.empty()) mc.exemplar = *std::min_element(ids.begin(), ids.end());
    m.classes.push_back(std::move(mc));
  }
  write_text_file(dir / kManifestName, manifest_to_json(m).dump(2) + "\n");
  return m;
}

}  // namespace fsos
