#pragma once

// Pair-attention few-shot classifier with an open-set discriminator.
//
// Every sequence (F frames of J joints) is embedded frame by frame, shifted by a
// positional encoding and expanded into all ordered frame pairs. A query pair
// attends over all pairs of a support sequence to build a query-specific class
// prototype; the query-to-class distance is the mean gap between prototypes and
// the value-projected query pairs. The discriminator looks at the stacked
// differences for the closest class and decides whether to accept it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsos/autodiff.hpp"
#include "fsos/config.hpp"
#include "fsos/errors.hpp"
#include "fsos/tensor.hpp"

namespace fsos {

// 0-based frame indices with first < second.
struct FramePair {
  std::size_t first = 0;
  std::size_t second = 0;
  friend bool operator==(const FramePair&, const FramePair&) = default;
};

// All ordered frame pairs of a sequence, in lexicographic order.
class PairSet {
 public:
  explicit PairSet(std::size_t frames) : frames_(frames) {
    if (frames < 2) throw ConfigError("a pair set needs at least 2 frames");
    pairs_.reserve(pair_count(frames));
    for (std::size_t a = 0; a < frames; ++a) {
      for (std::size_t b = a + 1; b < frames; ++b) {
        pairs_.push_back({a, b});
        firsts_.push_back(a);
        seconds_.push_back(b);
      }
    }
  }

  std::size_t frames() const noexcept { return frames_; }
  std::size_t size() const noexcept { return pairs_.size(); }
  const std::vector<FramePair>& pairs() const noexcept { return pairs_; }
  const std::vector<std::size_t>& firsts() const noexcept { return firsts_; }
  const std::vector<std::size_t>& seconds() const noexcept { return seconds_; }

 private:
  std::size_t frames_;
  std::vector<FramePair> pairs_;
  std::vector<std::size_t> firsts_, seconds_;
};

// Named weights of the network. Instantiated with Tensor (storage) and Var (bound to a tape).
template <class T>
struct ParamSet {
  T psi_w1, psi_b1, psi_w2, psi_b2;  // frame embedding MLP
  T upsilon, gamma, lambda;          // query / key / value projections of a flattened pair
  T pe_table;                        // F x D positional encodings
  T disc_reduce_w, disc_reduce_b;    // per-pair reduction to reduced_dim
  T disc_fc1_w, disc_fc1_b, disc_fc2_w, disc_fc2_b, disc_fc3_w, disc_fc3_b;
  T disc_out_w, disc_out_b;

  template <class F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

 private:
  template <class Self, class F>
  static void visit(Self& s, F& f) {
    f("psi_w1", s.psi_w1);
    f("psi_b1", s.psi_b1);
    f("psi_w2", s.psi_w2);
    f("psi_b2", s.psi_b2);
    f("upsilon", s.upsilon);
    f("gamma", s.gamma);
    f("lambda", s.lambda);
    f("pe_table", s.pe_table);
    f("disc_reduce_w", s.disc_reduce_w);
    f("disc_reduce_b", s.disc_reduce_b);
    f("disc_fc1_w", s.disc_fc1_w);
    f("disc_fc1_b", s.disc_fc1_b);
    f("disc_fc2_w", s.disc_fc2_w);
    f("disc_fc2_b", s.disc_fc2_b);
    f("disc_fc3_w", s.disc_fc3_w);
    f("disc_fc3_b", s.disc_fc3_b);
    f("disc_out_w", s.disc_out_w);
    f("disc_out_b", s.disc_out_b);
  }
};

using ModelParams = ParamSet<Tensor>;

inline bool is_trainable(std::string_view name, const ModelConfig& cfg) {
  return name != "pe_table" || cfg.pe == PositionalEncodingKind::learned;
}

inline bool is_discriminator(std::string_view name) { return name.starts_with("disc_"); }

// Sinusoidal encoding of a 1-based frame position: sin on even entries, cos on odd entries.
inline Tensor positional_encoding(std::size_t position, std::size_t dim, std::size_t frames) {
  if (position < 1 || position > frames) {
    throw DomainError("positional_encoding: position " + std::to_string(position) + " outside 1.." +
                      std::to_string(frames));
  }
  Tensor pe(Shape{dim});
  const double pos = static_cast<double>(position - 1);
  for (std::size_t i = 0; i < dim; ++i) {
    const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(dim);
    const double angle = pos / std::pow(10000.0, exponent);
    pe[i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
  }
  return pe;
}

inline Tensor sinusoidal_table(std::size_t frames, std::size_t dim) {
  Tensor table(Shape{frames, dim});
  for (std::size_t f = 0; f < frames; ++f) {
    const Tensor row = positional_encoding(f + 1, dim, frames);
    std::copy(row.storage().begin(), row.storage().end(), table.storage().begin() + static_cast<std::ptrdiff_t>(f * dim));
  }
  return table;
}

struct ParamShapes {
  ModelConfig cfg;

  ParamSet<Shape> operator()() const {
    const std::size_t in = cfg.frame_width(), hid = 2 * in, d = cfg.embed_dim, pair = 2 * d;
    const auto [h1, h2, h3] = cfg.resolved_disc_hidden();
    ParamSet<Shape> s;
    s.psi_w1 = {in, hid};
    s.psi_b1 = {hid};
    s.psi_w2 = {hid, d};
    s.psi_b2 = {d};
    s.upsilon = {pair, cfg.upsilon_dim};
    s.gamma = {pair, cfg.gamma_dim};
    s.lambda = {pair, cfg.lambda_dim};
    s.pe_table = {cfg.frames, d};
    s.disc_reduce_w = {cfg.lambda_dim, cfg.reduced_dim};
    s.disc_reduce_b = {cfg.reduced_dim};
    s.disc_fc1_w = {cfg.pairs() * cfg.reduced_dim, h1};
    s.disc_fc1_b = {h1};
    s.disc_fc2_w = {h1, h2};
    s.disc_fc2_b = {h2};
    s.disc_fc3_w = {h2, h3};
    s.disc_fc3_b = {h3};
    s.disc_out_w = {h3, 1};
    s.disc_out_b = {1};
    return s;
  }
};

// Weights uniform in +-sqrt(1/fan_in); the positional table starts sinusoidal.
inline ModelParams init_params(const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const ParamSet<Shape> shapes = ParamShapes{cfg}();
  ModelParams p;
  std::vector<std::pair<std::string, Shape>> order;
  shapes.for_each([&](const char* name, const Shape& s) { order.emplace_back(name, s); });
  std::size_t k = 0;
  p.for_each([&](const char* name, Tensor& t) {
    const Shape& s = order[k++].second;
    if (std::string_view(name) == "pe_table") {
      t = sinusoidal_table(cfg.frames, cfg.embed_dim);
      return;
    }
    const std::size_t fan_in = s[0];
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    t = Tensor(s);
    for (double& v : t.storage()) v = u(rng);
  });
  return p;
}

inline void check_params(const ModelConfig& cfg, const ModelParams& p) {
  const ParamSet<Shape> shapes = ParamShapes{cfg}();
  std::vector<Shape> expected;
  shapes.for_each([&](const char*, const Shape& s) { expected.push_back(s); });
  std::size_t k = 0;
  p.for_each([&](const char* name, const Tensor& t) {
    if (t.shape() != expected[k]) {
      throw DimensionError(std::string("parameter ") + name + " has shape " + to_string(t.shape()) + ", expected " +
                           to_string(expected[k]));
    }
    ++k;
  });
}

// Rows are pairs: attention queries/keys are layer-normalised projections, values are raw projections.
struct QueryEncoding {
  Var queries;  // |P| x D_upsilon
  Var values;   // |P| x D_lambda
};

struct SupportEncoding {
  Var keys;    // |M| x D_gamma
  Var values;  // |M| x D_lambda
};

struct ClassScores {
  std::vector<Var> prototypes;  // per class, |P| x D_lambda
  Var distances;                // K
  std::vector<double> distance_values;
  std::size_t fs_class = 0;
  Var disc_logit;  // scalar, for fs_class
};

inline std::size_t argmin_lowest(std::span<const double> xs) {
  if (xs.empty()) throw ContractError("argmin of an empty list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i] < xs[best]) best = i;
  return best;
}

// The network bound to one tape. Parameters are borrowed, so `params` must outlive the tape.
class Network {
 public:
  Network(Tape& tape, const ModelConfig& cfg, const PairSet& pairs, const ModelParams& params, bool trainable)
      : tape_(tape), cfg_(cfg), pairs_(pairs) {
    ModelParams const& src = params;
    std::vector<const Tensor*> tensors;
    std::vector<std::string> names;
    src.for_each([&](const char* name, const Tensor& t) {
      tensors.push_back(&t);
      names.emplace_back(name);
    });
    std::size_t k = 0;
    vars_.for_each([&](const char*, Var& v) {
      v = tape_.borrow(*tensors[k], trainable && is_trainable(names[k], cfg_));
      ++k;
    });
  }

  // Binds already-recorded variables, e.g. leaves owned by a gradient check.
  Network(Tape& tape, const ModelConfig& cfg, const PairSet& pairs, ParamSet<Var> vars)
      : tape_(tape), cfg_(cfg), pairs_(pairs), vars_(vars) {}

  const ParamSet<Var>& vars() const noexcept { return vars_; }
  Tape& tape() const noexcept { return tape_; }

  // F x J x 3 (or F x J*3) -> F x D.
  Var embed_frames(const Tensor& sequence) const {
    const std::size_t width = cfg_.frame_width();
    if (sequence.rank() == 0 || sequence.size() % width != 0 || sequence.dim(0) * width != sequence.size()) {
      throw DimensionError("embed: sequence " + to_string(sequence.shape()) + " does not hold frames of " +
                           std::to_string(cfg_.joints) + " joints");
    }
    Var x = tape_.constant(sequence.reshaped(Shape{sequence.dim(0), width}));
    Var h = relu(add_bias(matmul(x, vars_.psi_w1), vars_.psi_b1));
    return relu(add_bias(matmul(h, vars_.psi_w2), vars_.psi_b2));
  }

  // Embeddings plus positional encodings, expanded to |P| x 2D (rows [e(p1)+PE(p1), e(p2)+PE(p2)]).
  Var pair_matrix(const Tensor& sequence) const {
    if (sequence.rank() == 0 || sequence.dim(0) != cfg_.frames) {
      throw DimensionError("sequence must have " + std::to_string(cfg_.frames) + " frames, got shape " +
                           to_string(sequence.shape()));
    }
    Var e = add(embed_frames(sequence), vars_.pe_table);
    const Var halves[] = {gather_rows(e, pairs_.firsts()), gather_rows(e, pairs_.seconds())};
    return concat(halves, 1);
  }

  QueryEncoding encode_query_pairs(Var pairs) const {
    return {layer_norm(matmul(pairs, vars_.upsilon)), matmul(pairs, vars_.lambda)};
  }

  SupportEncoding encode_support_pairs(Var pairs) const {
    return {layer_norm(matmul(pairs, vars_.gamma)), matmul(pairs, vars_.lambda)};
  }

  QueryEncoding encode_query(const Tensor& sequence) const { return encode_query_pairs(pair_matrix(sequence)); }
  SupportEncoding encode_support(const Tensor& sequence) const {
    return encode_support_pairs(pair_matrix(sequence));
  }

  // |P| x |M| attention of every query pair over the support pairs (rows sum to one).
  Var attention(const QueryEncoding& q, const SupportEncoding& s) const {
    return softmax(matmul(q.queries, transpose(s.keys)), 1);
  }

  // Query-specific class prototypes, one row per query pair.
  Var prototypes(const QueryEncoding& q, const SupportEncoding& s) const { return matmul(attention(q, s), s.values); }

  // Mean over pairs of the Euclidean gap between prototype and value-projected query pair.
  Var distance(const QueryEncoding& q, Var prototypes) const { return mean(l2_norm(sub(prototypes, q.values))); }

  // Discriminator logit for the stacked difference (query values - prototypes).
  Var disc_logit(const QueryEncoding& q, Var prototypes) const {
    Var diff = sub(q.values, prototypes);
    Var h = relu(add_bias(matmul(diff, vars_.disc_reduce_w), vars_.disc_reduce_b));
    const std::size_t flat = h.value().size();
    h = reshape(h, Shape{1, flat});
    h = relu(add_bias(matmul(h, vars_.disc_fc1_w), vars_.disc_fc1_b));
    h = relu(add_bias(matmul(h, vars_.disc_fc2_w), vars_.disc_fc2_b));
    h = relu(add_bias(matmul(h, vars_.disc_fc3_w), vars_.disc_fc3_b));
    return reshape(add_bias(matmul(h, vars_.disc_out_w), vars_.disc_out_b), Shape{});
  }

  ClassScores score(const QueryEncoding& q, std::span<const SupportEncoding> supports) const {
    if (supports.empty()) throw ContractError("support set is empty");
    ClassScores out;
    std::vector<Var> dists;
    for (const SupportEncoding& s : supports) {
      Var t = prototypes(q, s);
      out.prototypes.push_back(t);
      dists.push_back(distance(q, t));
      out.distance_values.push_back(dists.back().item());
    }
    out.distances = stack(dists);
    out.fs_class = argmin_lowest(out.distance_values);
    out.disc_logit = disc_logit(q, out.prototypes[out.fs_class]);
    return out;
  }

 private:
  Tape& tape_;
  const ModelConfig& cfg_;
  const PairSet& pairs_;
  ParamSet<Var> vars_;
};

// Accept(class) or Reject, with the per-class few-shot scores and the open-set confidence.
struct Prediction {
  std::optional<std::size_t> accepted;  // empty = reject
  std::size_t fs_class = 0;
  std::vector<double> distances;
  std::vector<double> fs_scores;  // softmax over negative distances
  double os_score = 0.0;

  bool rejected() const { return !accepted.has_value(); }
};

enum class Confidence { discriminator, exp };

inline std::vector<double> softmax_neg(std::span<const double> distances) {
  Tensor neg(Shape{distances.size()});
  for (std::size_t i = 0; i < distances.size(); ++i) neg[i] = -distances[i];
  return softmax(neg, 0).storage();
}

// Confidence of the exponential baseline: exp(max_c -T) = exp(-min distance).
inline double exp_confidence(std::span<const double> distances) {
  if (distances.empty()) throw ContractError("exp_confidence: no distances");
  const double dmin = *std::min_element(distances.begin(), distances.end());
  if (dmin < 0.0) throw ContractError("exp_confidence: distances must be >= 0");
  return std::exp(-dmin);
}

// Accept the closest class iff the confidence strictly exceeds tau.
inline Prediction decide(std::vector<double> distances, double os_score, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  Prediction p;
  p.fs_class = argmin_lowest(distances);
  p.fs_scores = softmax_neg(distances);
  p.distances = std::move(distances);
  p.os_score = os_score;
  if (os_score > tau) p.accepted = p.fs_class;
  return p;
}

struct FsResult {
  std::size_t fs_class = 0;
  std::vector<double> distances;
};

struct PairScore {
  double distance = 0.0;
  double os_score = 0.0;
};

// Value-level model: configuration, weights and the derived pair set.
class Model {
 public:
  Model(ModelConfig cfg, ModelParams params) : cfg_(cfg), params_(std::move(params)), pairs_(cfg_.frames) {
    cfg_.validate();
    check_params(cfg_, params_);
  }

  static Model initialize(const ModelConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return Model(cfg, init_params(cfg, rng));
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  const ModelParams& params() const noexcept { return params_; }
  ModelParams& params() noexcept { return params_; }
  const PairSet& pairs() const noexcept { return pairs_; }

  // J x 3 skeleton -> D embedding.
  Tensor embed_frame(const Tensor& skeleton) const {
    if (skeleton.size() != cfg_.frame_width()) {
      throw DimensionError("embed_frame: expected " + std::to_string(cfg_.joints) + " joints, got shape " +
                           to_string(skeleton.shape()));
    }
    Tape tape;
    Network net = network(tape);
    return net.embed_frames(skeleton.reshaped(Shape{1, cfg_.frame_width()})).value().reshaped(Shape{cfg_.embed_dim});
  }

  // F x D embeddings -> 2 x D pair representation with positional encodings.
  Tensor pair_representation(const Tensor& embeddings, FramePair pair) const {
    if (embeddings.rank() != 2 || embeddings.dim(0) != cfg_.frames || embeddings.dim(1) != cfg_.embed_dim) {
      throw DimensionError("pair_representation: embeddings must be F x D, got " + to_string(embeddings.shape()));
    }
    if (pair.first >= pair.second || pair.second >= cfg_.frames) {
      throw DomainError("pair_representation: invalid frame pair");
    }
    const std::size_t d = cfg_.embed_dim;
    Tensor out(Shape{2, d});
    for (std::size_t i = 0; i < d; ++i) {
      out.at(0, i) = embeddings.at(pair.first, i) + params_.pe_table.at(pair.first, i);
      out.at(1, i) = embeddings.at(pair.second, i) + params_.pe_table.at(pair.second, i);
    }
    return out;
  }

  // Query pair (2 x D) attending over support pairs (M x 2 x D) -> D_lambda prototype.
  Tensor attention_prototype(const Tensor& query_pair, const Tensor& support_pairs) const {
    const std::size_t width = 2 * cfg_.embed_dim;
    if (query_pair.size() != width) throw DimensionError("attention_prototype: query pair must be 2 x D");
    if (support_pairs.size() == 0 || support_pairs.size() % width != 0) {
      throw DimensionError("attention_prototype: support pairs must be M x 2 x D");
    }
    Tape tape;
    Network net = network(tape);
    auto q = net.encode_query_pairs(tape.constant(query_pair.reshaped(Shape{1, width})));
    auto s = net.encode_support_pairs(tape.constant(support_pairs.reshaped(Shape{support_pairs.size() / width, width})));
    return net.prototypes(q, s).value().reshaped(Shape{cfg_.lambda_dim});
  }

  double query_class_distance(const Tensor& query, const Tensor& support) const {
    Tape tape;
    Network net = network(tape);
    auto q = net.encode_query(query);
    return net.distance(q, net.prototypes(q, net.encode_support(support))).item();
  }

  FsResult fs_classify(const Tensor& query, std::span<const Tensor> supports) const {
    if (supports.empty()) throw ContractError("fs_classify: support set is empty");
    FsResult r;
    for (const Tensor& s : supports) r.distances.push_back(query_class_distance(query, s));
    r.fs_class = argmin_lowest(r.distances);
    return r;
  }

  // Discriminator confidence that `query` belongs with `support` (the chosen class).
  double discriminator_score(const Tensor& query, const Tensor& support) const { return score_pair(query, support).os_score; }

  PairScore score_pair(const Tensor& query, const Tensor& support) const {
    Tape tape;
    Network net = network(tape);
    auto q = net.encode_query(query);
    Var t = net.prototypes(q, net.encode_support(support));
    return {net.distance(q, t).item(), sigmoid(net.disc_logit(q, t).item())};
  }

  Prediction fsos_classify(const Tensor& query, std::span<const Tensor> supports, double tau,
                           Confidence confidence = Confidence::discriminator) const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
    if (supports.empty()) throw ContractError("fsos_classify: support set is empty");
    Tape tape;
    Network net = network(tape);
    auto q = net.encode_query(query);
    std::vector<SupportEncoding> encoded;
    for (const Tensor& s : supports) encoded.push_back(net.encode_support(s));
    ClassScores scores = net.score(q, encoded);
    const double conf = confidence == Confidence::discriminator ? sigmoid(scores.disc_logit.item())
                                                                : exp_confidence(scores.distance_values);
    return decide(scores.distance_values, conf, tau);
  }

  Network network(Tape& tape, bool trainable = false) const { return Network(tape, cfg_, pairs_, params_, trainable); }

 private:
  ModelConfig cfg_;
  ModelParams params_;
  PairSet pairs_;
};

}  // namespace fsos
