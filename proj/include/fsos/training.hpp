#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fsos/autodiff.hpp"
#include "fsos/data.hpp"
#include "fsos/model.hpp"

namespace fsos {

// How the open-set loss is averaged: over the contributing terms, or over every query in the batch.
enum class OsMean { terms, batch };

inline std::string to_string(OsMean m) { return m == OsMean::terms ? "terms" : "batch"; }

inline OsMean parse_os_mean(const std::string& s) {
  if (s == "terms") return OsMean::terms;
  if (s == "batch") return OsMean::batch;
  throw ConfigError("unknown os_mean '" + s + "' (expected terms|batch)");
}

struct TrainConfig {
  std::size_t way = 5;                // classes per training episode
  std::size_t queries = 4;            // known queries per episode
  std::size_t batch = 1;              // episodes per optimizer step
  std::size_t episodes = 2000;        // optimizer steps
  std::size_t checkpoint_every = 0;   // 0 = only at the end
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  OsMean os_mean = OsMean::terms;
  std::uint64_t seed = 1;

  void validate() const {
    if (way < 1) throw ConfigError("way must be >= 1");
    if (queries < 1) throw ConfigError("queries must be >= 1");
    if (batch < 1) throw ConfigError("batch must be >= 1");
    if (!(lr > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(adam_eps > 0)) {
      throw ConfigError("invalid optimizer settings");
    }
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"way", c.way},     {"queries", c.queries},   {"batch", c.batch}, {"episodes", c.episodes},
       {"checkpoint_every", c.checkpoint_every},     {"lr", c.lr},       {"beta1", c.beta1},
       {"beta2", c.beta2}, {"adam_eps", c.adam_eps}, {"os_mean", to_string(c.os_mean)},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("way").get_to(c.way);
  j.at("queries").get_to(c.queries);
  j.at("batch").get_to(c.batch);
  j.at("episodes").get_to(c.episodes);
  j.at("checkpoint_every").get_to(c.checkpoint_every);
  j.at("lr").get_to(c.lr);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("adam_eps").get_to(c.adam_eps);
  c.os_mean = parse_os_mean(j.at("os_mean").get<std::string>());
  j.at("seed").get_to(c.seed);
}

// ---------------------------------------------------------------------------
// Episodes

struct Sample {
  const Tensor* frames = nullptr;
  std::size_t class_id = 0;  // dataset class index
};

struct Episode {
  std::vector<std::size_t> classes;       // dataset class of each support slot
  std::vector<const Tensor*> support;     // one sequence per slot
  std::vector<Sample> queries;            // known queries
  std::vector<std::size_t> query_labels;  // support slot of each query
  std::vector<Sample> unknown_pool;       // sequences whose class is not in the support set

  void check() const {
    if (classes.size() != support.size() || queries.size() != query_labels.size()) {
      throw ContractError("episode: inconsistent sizes");
    }
    for (std::size_t i = 0; i < classes.size(); ++i)
      for (std::size_t k = i + 1; k < classes.size(); ++k)
        if (classes[i] == classes[k]) throw ContractError("episode: support classes must be distinct");
    for (std::size_t i = 0; i < queries.size(); ++i) {
      if (query_labels[i] >= classes.size() || classes[query_labels[i]] != queries[i].class_id) {
        throw ContractError("episode: query label outside the support set");
      }
    }
    for (const Sample& u : unknown_pool)
      if (std::find(classes.begin(), classes.end(), u.class_id) != classes.end()) {
        throw ContractError("episode: unknown pool overlaps the support classes");
      }
  }
};

// Uniform index in [0, n).
inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// `classes` lists the dataset classes available for training.
inline Episode sample_episode(const Dataset& ds, std::span<const std::size_t> classes, std::size_t way,
                              std::size_t queries, std::mt19937_64& rng) {
  if (classes.size() < way + 1) {
    throw ConfigError("need at least " + std::to_string(way + 1) + " training classes for " + std::to_string(way) +
                      "-way episodes with an unknown pool, have " + std::to_string(classes.size()));
  }
  std::vector<std::size_t> order(classes.begin(), classes.end());
  // Partial Fisher-Yates: the first `way` entries are the support classes.
  for (std::size_t i = 0; i < way; ++i) std::swap(order[i], order[i + uniform_index(rng, order.size() - i)]);

  Episode ep;
  std::vector<std::size_t> support_index(way);
  for (std::size_t slot = 0; slot < way; ++slot) {
    const auto& seqs = ds.classes[order[slot]].sequences;
    if (seqs.size() < 2) throw ConfigError("class '" + ds.classes[order[slot]].name + "' needs >= 2 sequences for training");
    support_index[slot] = uniform_index(rng, seqs.size());
    ep.classes.push_back(order[slot]);
    ep.support.push_back(&seqs[support_index[slot]].frames);
  }
  for (std::size_t q = 0; q < queries; ++q) {
    const std::size_t slot = uniform_index(rng, way);
    const auto& seqs = ds.classes[order[slot]].sequences;
    // Any instance but the one in the support set.
    std::size_t idx = uniform_index(rng, seqs.size() - 1);
    if (idx >= support_index[slot]) ++idx;
    ep.queries.push_back({&seqs[idx].frames, order[slot]});
    ep.query_labels.push_back(slot);
  }
  for (std::size_t i = way; i < order.size(); ++i)
    for (const auto& s : ds.classes[order[i]].sequences) ep.unknown_pool.push_back({&s.frames, order[i]});
  return ep;
}

// Uniform sample of z pool entries without replacement; the whole pool when it is too small.
inline std::vector<Sample> sample_balanced_negatives(std::span<const Sample> pool, std::size_t z, std::mt19937_64& rng,
                                                     std::vector<std::string>* warnings = nullptr) {
  if (z == 0) return {};
  if (pool.empty()) {
    if (warnings) warnings->push_back("unknown pool is empty; no negatives for " + std::to_string(z) + " positives");
    return {};
  }
  if (pool.size() < z && warnings) {
    warnings->push_back("unknown pool holds " + std::to_string(pool.size()) + " sequences, " + std::to_string(z) +
                        " requested");
  }
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t take = std::min(z, pool.size());
  for (std::size_t i = 0; i < take; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < take; ++i) out.push_back(pool[idx[i]]);
  return out;
}

// ---------------------------------------------------------------------------
// Losses

// Mean cross-entropy of softmax(-distances) against the true support slot.
inline Var loss_fs(std::span<const Var> distances, std::span<const std::size_t> labels) {
  if (distances.empty() || distances.size() != labels.size()) throw ContractError("loss_fs: need one label per query");
  std::vector<Var> terms;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    if (labels[i] >= distances[i].value().size()) throw ContractError("loss_fs: label outside the support set");
    terms.push_back(cross_entropy(scale(distances[i], -1.0), labels[i]));
  }
  return mean(stack(terms));
}

// Open-set loss from the discriminator logits of FS-correct known queries (target 1) and sampled
// unknowns (target 0). FS-wrong known queries contribute nothing but count toward `batch_size`.
inline Var loss_os(Tape& tape, std::span<const Var> positive_logits, std::span<const Var> negative_logits,
                   OsMean mode, std::size_t batch_size) {
  std::vector<Var> terms;
  for (Var l : positive_logits) terms.push_back(bce_with_logits(l, 1.0));
  for (Var l : negative_logits) terms.push_back(bce_with_logits(l, 0.0));
  if (terms.empty()) return tape.constant(Tensor::scalar(0.0));
  const double denom = mode == OsMean::terms ? static_cast<double>(terms.size()) : static_cast<double>(batch_size);
  if (denom <= 0) throw ContractError("loss_os: empty batch");
  return scale(sum(stack(terms)), 1.0 / denom);
}

struct EpisodeLosses {
  Var fs, os, total;
  std::size_t known = 0;       // known queries
  std::size_t z = 0;           // FS-correct known queries (positive terms)
  std::size_t negatives = 0;   // sampled unknowns (negative terms)
  std::vector<bool> positive;  // per known query: contributed BCE(., 1)
  std::vector<std::size_t> negative_classes;
};

// Forward pass of a batch of episodes on one tape: total = fs + sigma * os.
inline EpisodeLosses batch_losses(const Network& net, std::span<const Episode> batch, double sigma, OsMean os_mean,
                                  std::mt19937_64& rng, std::vector<std::string>* warnings = nullptr) {
  if (batch.empty()) throw ContractError("batch_losses: empty batch");
  if (!(sigma >= 0)) throw ConfigError("sigma must be >= 0");
  EpisodeLosses out;
  std::vector<Var> dists, pos, neg;
  std::vector<std::size_t> labels;
  for (const Episode& ep : batch) {
    ep.check();
    std::vector<SupportEncoding> support;
    for (const Tensor* s : ep.support) support.push_back(net.encode_support(*s));
    std::size_t z = 0;
    for (std::size_t i = 0; i < ep.queries.size(); ++i) {
      const ClassScores sc = net.score(net.encode_query(*ep.queries[i].frames), support);
      dists.push_back(sc.distances);
      labels.push_back(ep.query_labels[i]);
      const bool correct = sc.fs_class == ep.query_labels[i];
      out.positive.push_back(correct);
      if (correct) {
        pos.push_back(sc.disc_logit);
        ++z;
      }
    }
    out.known += ep.queries.size();
    out.z += z;
    for (const Sample& u : sample_balanced_negatives(ep.unknown_pool, z, rng, warnings)) {
      neg.push_back(net.score(net.encode_query(*u.frames), support).disc_logit);
      out.negative_classes.push_back(u.class_id);
    }
  }
  out.negatives = neg.size();
  out.fs = loss_fs(dists, labels);
  out.os = loss_os(net.tape(), pos, neg, os_mean, out.known + out.negatives);
  out.total = add(out.fs, scale(out.os, sigma));
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerState {
  std::size_t step = 0;
  ModelParams m, v;  // first and second moments, shaped like the parameters
};

inline OptimizerState make_optimizer_state(const ModelParams& params) {
  OptimizerState s;
  auto zeros = [](ModelParams p) {
    p.for_each([](const char*, Tensor& t) { std::fill(t.storage().begin(), t.storage().end(), 0.0); });
    return p;
  };
  s.m = zeros(params);
  s.v = zeros(params);
  return s;
}

inline void adam_update(ModelParams& params, const ModelParams& grads, OptimizerState& st, const TrainConfig& cfg,
                        const ModelConfig& mcfg) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  std::vector<Tensor*> ps, ms, vs;
  std::vector<const Tensor*> gs;
  std::vector<std::string> names;
  params.for_each([&](const char* n, Tensor& t) {
    ps.push_back(&t);
    names.emplace_back(n);
  });
  st.m.for_each([&](const char*, Tensor& t) { ms.push_back(&t); });
  st.v.for_each([&](const char*, Tensor& t) { vs.push_back(&t); });
  grads.for_each([&](const char*, const Tensor& t) { gs.push_back(&t); });
  for (std::size_t k = 0; k < ps.size(); ++k) {
    if (!is_trainable(names[k], mcfg)) continue;
    auto& p = ps[k]->storage();
    auto& m = ms[k]->storage();
    auto& v = vs[k]->storage();
    const auto& g = gs[k]->storage();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
      p[i] -= cfg.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.adam_eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training

struct StepReport {
  std::size_t step = 0;
  double loss_fs = 0, loss_os = 0, loss_total = 0;
  std::size_t z = 0;
  double fs_acc = 0;

  friend bool operator==(const StepReport&, const StepReport&) = default;
};

inline constexpr std::string_view kReportHeader = "step,loss_fs,loss_os,loss_total,z,fs_acc";

inline std::string format_report_row(const StepReport& r) {
  std::string out = std::to_string(r.step);
  for (double v : {r.loss_fs, r.loss_os, r.loss_total}) {
    out += ',';
    detail::append_double(out, v);
  }
  out += ',' + std::to_string(r.z) + ',';
  detail::append_double(out, r.fs_acc);
  return out;
}

inline ModelParams collect_grads(const Tape& tape, const Network& net) {
  ModelParams g;
  std::vector<Var> vars;
  net.vars().for_each([&](const char*, const Var& v) { vars.push_back(v); });
  std::size_t k = 0;
  g.for_each([&](const char*, Tensor& t) { t = tape.grad(vars[k++]); });
  return g;
}

// One forward/backward/update cycle over `batch`. Throws NumericError on a non-finite loss.
inline StepReport train_step(Model& model, std::span<const Episode> batch, OptimizerState& opt, const TrainConfig& cfg,
                             std::mt19937_64& rng, std::vector<std::string>* warnings = nullptr) {
  StepReport r;
  ModelParams grads;
  {
    Tape tape;
    Network net = model.network(tape, true);
    const EpisodeLosses l = batch_losses(net, batch, model.config().sigma, cfg.os_mean, rng, warnings);
    r.loss_fs = l.fs.item();
    r.loss_os = l.os.item();
    r.loss_total = l.total.item();
    r.z = l.z;
    r.fs_acc = static_cast<double>(l.z) / static_cast<double>(l.known);
    if (!std::isfinite(r.loss_total)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << opt.step + 1 << " (fs=" << r.loss_fs << ", os=" << r.loss_os
          << ", z=" << r.z << ")";
      throw NumericError(msg.str());
    }
    tape.backward(l.total);
    grads = collect_grads(tape, net);
  }
  bool finite = true;
  grads.for_each([&](const char*, const Tensor& t) { finite = finite && t.all_finite(); });
  if (!finite) throw NumericError("non-finite gradient at step " + std::to_string(opt.step + 1));
  adam_update(model.params(), grads, opt, cfg, model.config());
  r.step = opt.step;
  return r;
}

struct TrainState {
  Model model;
  OptimizerState opt;
  std::mt19937_64 rng;
  TrainConfig train;
};

inline std::string rng_state(const std::mt19937_64& rng) {
  std::ostringstream ss;
  ss << rng;
  return ss.str();
}

inline std::mt19937_64 rng_from_state(const std::string& s) {
  std::mt19937_64 rng;
  std::istringstream ss(s);
  ss >> rng;
  if (!ss) throw DataError("corrupt random generator state");
  return rng;
}

inline TrainState init_training(const ModelConfig& mcfg, const TrainConfig& tcfg) {
  mcfg.validate();
  tcfg.validate();
  std::mt19937_64 rng(tcfg.seed);
  Model model(mcfg, init_params(mcfg, rng));
  OptimizerState opt = make_optimizer_state(model.params());
  return TrainState{std::move(model), std::move(opt), rng, tcfg};
}

struct TrainHooks {
  std::function<void(const StepReport&)> on_step;
  std::function<void(const TrainState&)> on_checkpoint;
  std::vector<std::string>* warnings = nullptr;
};

inline std::vector<std::size_t> training_classes(const Dataset& ds) {
  std::vector<std::size_t> classes = ds.classes_in(Split::train);
  for (std::size_t i : classes)
    for (std::size_t k : ds.classes_in(Split::test))
      if (ds.classes[i].name == ds.classes[k].name) throw ConfigError("class '" + ds.classes[i].name + "' is in both splits");
  return classes;
}

// Continues `state` until state.train.episodes steps have run. Checkpoint hooks fire every
// checkpoint_every steps and after the final step.
inline void train_loop(const Dataset& ds, TrainState& state, const TrainHooks& hooks = {}) {
  const TrainConfig& cfg = state.train;
  cfg.validate();
  const std::vector<std::size_t> classes = training_classes(ds);
  if (classes.size() < cfg.way + 1) {
    throw ConfigError("need at least " + std::to_string(cfg.way + 1) + " training classes for way=" +
                      std::to_string(cfg.way) + ", have " + std::to_string(classes.size()));
  }
  while (state.opt.step < cfg.episodes) {
    std::vector<Episode> batch;
    for (std::size_t b = 0; b < cfg.batch; ++b) batch.push_back(sample_episode(ds, classes, cfg.way, cfg.queries, state.rng));
    const StepReport r = train_step(state.model, batch, state.opt, cfg, state.rng, hooks.warnings);
    if (hooks.on_step) hooks.on_step(r);
    const bool periodic = cfg.checkpoint_every && state.opt.step % cfg.checkpoint_every == 0;
    if (hooks.on_checkpoint && (periodic || state.opt.step == cfg.episodes)) hooks.on_checkpoint(state);
  }
}

}  // namespace fsos
