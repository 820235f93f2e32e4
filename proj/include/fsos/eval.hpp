#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fsos/data.hpp"
#include "fsos/model.hpp"

namespace fsos {

// Label meaning "not one of the support classes".
inline constexpr std::size_t kReject = std::numeric_limits<std::size_t>::max();

inline double fsos_acc(std::span<const std::size_t> predictions, std::span<const std::size_t> targets) {
  if (predictions.size() != targets.size()) {
    throw ContractError("fsos_acc: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(targets.size()) + " targets");
  }
  if (predictions.empty()) throw ContractError("fsos_acc: no predictions");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == targets[i];
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

enum class Method { trxos, exp, random };

inline std::string display_name(Method m) {
  switch (m) {
    case Method::trxos: return "TRX-OS";
    case Method::exp: return "EXP";
    case Method::random: return "RANDOM";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "trxos") return Method::trxos;
  if (s == "exp") return Method::exp;
  if (s == "random") return Method::random;
  throw ConfigError("unknown method '" + s + "' (expected trxos|exp|random)");
}

// Expected FSOS-ACC of a predictor choosing uniformly among the k classes and Reject: every query
// is hit with probability 1/(k+1) whatever its label, so the task's label frequencies cancel.
inline double random_baseline(std::size_t k) { return 1.0 / static_cast<double>(k + 1); }

// Query-to-exemplar distances and discriminator scores for every (test sequence, test class) pair.
// Prototypes depend only on the query and one support sequence, so any k-way task over these
// classes can be scored from this table without touching the network again.
struct ScoreTable {
  std::vector<std::string> class_names;
  std::vector<std::size_t> query_class;  // class column of each query
  std::vector<std::string> query_ids;
  std::size_t classes = 0;
  std::vector<double> distance;  // queries x classes
  std::vector<double> os_score;  // queries x classes

  std::size_t queries() const { return query_class.size(); }
  double dist(std::size_t q, std::size_t c) const { return distance[q * classes + c]; }
  double score(std::size_t q, std::size_t c) const { return os_score[q * classes + c]; }
};

inline ScoreTable build_score_table(const Model& model, const Dataset& ds, std::span<const std::size_t> class_ids) {
  ScoreTable t;
  t.classes = class_ids.size();
  if (!t.classes) throw ConfigError("no classes to evaluate");

  // Exemplar keys/values are computed once and reused for every query.
  std::vector<std::pair<Tensor, Tensor>> exemplars;
  for (std::size_t c : class_ids) {
    const ClassSequences& cls = ds.classes.at(c);
    t.class_names.push_back(cls.name);
    Tape tape;
    const SupportEncoding s = model.network(tape).encode_support(cls.sequences.at(cls.exemplar).frames);
    exemplars.emplace_back(s.keys.value(), s.values.value());
  }
  for (std::size_t col = 0; col < class_ids.size(); ++col) {
    for (const SkeletonSequence& seq : ds.classes[class_ids[col]].sequences) {
      Tape tape;
      Network net = model.network(tape);
      const QueryEncoding q = net.encode_query(seq.frames);
      for (const auto& [keys, values] : exemplars) {
        const SupportEncoding s{tape.borrow(keys, false), tape.borrow(values, false)};
        const Var proto = net.prototypes(q, s);
        t.distance.push_back(net.distance(q, proto).item());
        t.os_score.push_back(sigmoid(net.disc_logit(q, proto).item()));
      }
      t.query_class.push_back(col);
      t.query_ids.push_back(seq.source_id);
    }
  }
  return t;
}

struct TaskOutcome {
  std::vector<std::size_t> support;      // table columns, in support order
  std::vector<std::size_t> fs_class;     // per query: support position of the closest class
  std::vector<std::size_t> predictions;  // per query: support position or kReject
  std::vector<std::size_t> targets;
  double acc = 0;
};

// Scores every query of the table against the k exemplars in `support`.
inline TaskOutcome run_task(const ScoreTable& t, std::span<const std::size_t> support, Method method, double tau,
                            std::mt19937_64* rng = nullptr) {
  if (!(tau >= 0 && tau <= 1)) throw ConfigError("tau must lie in [0, 1]");
  if (support.empty()) throw ContractError("run_task: empty support set");
  TaskOutcome out;
  out.support.assign(support.begin(), support.end());
  std::vector<double> d(support.size());
  for (std::size_t q = 0; q < t.queries(); ++q) {
    for (std::size_t j = 0; j < support.size(); ++j) d[j] = t.dist(q, support[j]);
    const std::size_t c = argmin_lowest(d);
    std::size_t pred = kReject;
    switch (method) {
      case Method::trxos:
        if (t.score(q, support[c]) > tau) pred = c;
        break;
      case Method::exp:
        if (std::exp(-d[c]) > tau) pred = c;
        break;
      case Method::random: {
        if (!rng) throw ContractError("run_task: random method needs a generator");
        const std::size_t draw = std::uniform_int_distribution<std::size_t>(0, support.size())(*rng);
        pred = draw == support.size() ? kReject : draw;
        break;
      }
    }
    const auto it = std::find(support.begin(), support.end(), t.query_class[q]);
    out.fs_class.push_back(c);
    out.predictions.push_back(pred);
    out.targets.push_back(it == support.end() ? kReject : static_cast<std::size_t>(it - support.begin()));
  }
  out.acc = fsos_acc(out.predictions, out.targets);
  return out;
}

// k distinct table columns chosen uniformly, in random order.
inline std::vector<std::size_t> sample_support(std::size_t classes, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> cols(classes);
  std::iota(cols.begin(), cols.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(cols[i], cols[i + std::uniform_int_distribution<std::size_t>(0, classes - 1 - i)(rng)]);
  }
  cols.resize(k);
  return cols;
}

struct EvalResult {
  Method method = Method::trxos;
  std::size_t k = 0;
  double mean = 0, std = 0;
  std::vector<double> per_rep;
  std::vector<double> accept_rate;  // per class: fraction of its queries accepted, over all repetitions
};

inline void summarize(EvalResult& r) {
  const double n = static_cast<double>(r.per_rep.size());
  r.mean = std::accumulate(r.per_rep.begin(), r.per_rep.end(), 0.0) / n;
  double ss = 0;
  for (double a : r.per_rep) ss += (a - r.mean) * (a - r.mean);
  r.std = r.per_rep.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
}

inline void check_protocol_args(std::size_t classes, std::size_t k, std::size_t reps) {
  if (k == 0) throw ConfigError("k must be >= 1");
  if (k >= classes) {
    throw ConfigError("k=" + std::to_string(k) + " needs more than k test classes so that unknown queries exist; have " +
                      std::to_string(classes));
  }
  if (reps == 0) throw ConfigError("repetitions must be >= 1");
}

// FSOS-ACC mean and sample standard deviation over `reps` random k-way tasks.
inline EvalResult run_protocol(const ScoreTable& t, Method method, std::size_t k, std::size_t reps, double tau,
                               std::mt19937_64& rng) {
  check_protocol_args(t.classes, k, reps);
  EvalResult r;
  r.method = method;
  r.k = k;
  std::vector<std::size_t> accepted(t.classes, 0), seen(t.classes, 0);
  for (std::size_t rep = 0; rep < reps; ++rep) {
    const auto support = sample_support(t.classes, k, rng);
    const TaskOutcome o = run_task(t, support, method, tau, &rng);
    r.per_rep.push_back(o.acc);
    for (std::size_t q = 0; q < t.queries(); ++q) {
      ++seen[t.query_class[q]];
      accepted[t.query_class[q]] += o.predictions[q] != kReject;
    }
  }
  for (std::size_t c = 0; c < t.classes; ++c) {
    r.accept_rate.push_back(seen[c] ? static_cast<double>(accepted[c]) / static_cast<double>(seen[c]) : 0.0);
  }
  summarize(r);
  return r;
}

// Same protocol with a freshly built table (e.g. a retrained model) for every repetition.
inline EvalResult run_protocol_retrain(const std::function<ScoreTable(std::size_t rep)>& build, Method method,
                                       std::size_t k, std::size_t reps, double tau, std::mt19937_64& rng) {
  if (reps == 0) throw ConfigError("repetitions must be >= 1");
  EvalResult r;
  r.method = method;
  r.k = k;
  for (std::size_t rep = 0; rep < reps; ++rep) {
    const ScoreTable t = build(rep);
    check_protocol_args(t.classes, k, reps);
    r.per_rep.push_back(run_task(t, sample_support(t.classes, k, rng), method, tau, &rng).acc);
  }
  summarize(r);
  return r;
}

// Closed-set accuracy of the nearest exemplar over k-way tasks whose queries are the sequences
// of the k chosen classes.
inline EvalResult run_fs_protocol(const ScoreTable& t, std::size_t k, std::size_t reps, std::mt19937_64& rng) {
  if (k == 0 || k > t.classes) throw ConfigError("k must lie in 1..classes");
  if (reps == 0) throw ConfigError("repetitions must be >= 1");
  EvalResult r;
  r.k = k;
  std::vector<double> d(k);
  for (std::size_t rep = 0; rep < reps; ++rep) {
    const auto support = sample_support(t.classes, k, rng);
    std::size_t hits = 0, total = 0;
    for (std::size_t q = 0; q < t.queries(); ++q) {
      const auto it = std::find(support.begin(), support.end(), t.query_class[q]);
      if (it == support.end()) continue;
      for (std::size_t j = 0; j < k; ++j) d[j] = t.dist(q, support[j]);
      hits += argmin_lowest(d) == static_cast<std::size_t>(it - support.begin());
      ++total;
    }
    r.per_rep.push_back(static_cast<double>(hits) / static_cast<double>(total));
  }
  summarize(r);
  return r;
}

// Entry (r, c): fraction of class-c sequences accepted when the support set is the exemplar of
// class r alone.
struct ConfusionMatrix {
  std::vector<std::string> classes;
  std::vector<double> rates;  // row-major, support class x tested class

  double at(std::size_t r, std::size_t c) const { return rates[r * classes.size() + c]; }
};

inline ConfusionMatrix os_confusion_matrix(const ScoreTable& t, double tau) {
  if (!(tau >= 0 && tau <= 1)) throw ConfigError("tau must lie in [0, 1]");
  ConfusionMatrix m;
  m.classes = t.class_names;
  m.rates.assign(t.classes * t.classes, 0.0);
  std::vector<std::size_t> count(t.classes, 0);
  for (std::size_t q = 0; q < t.queries(); ++q) {
    ++count[t.query_class[q]];
    for (std::size_t r = 0; r < t.classes; ++r) {
      if (t.score(q, r) > tau) m.rates[r * t.classes + t.query_class[q]] += 1.0;
    }
  }
  for (std::size_t r = 0; r < t.classes; ++r)
    for (std::size_t c = 0; c < t.classes; ++c)
      if (count[c]) m.rates[r * t.classes + c] /= static_cast<double>(count[c]);
  return m;
}

namespace detail {

inline std::string fmt_double(double v) {
  std::string s;
  append_double(s, v);
  return s;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + '"';
}

}  // namespace detail

inline std::string confusion_csv(const ConfusionMatrix& m) {
  std::string out = "support";
  for (const auto& c : m.classes) out += ',' + detail::csv_field(c);
  out += '\n';
  for (std::size_t r = 0; r < m.classes.size(); ++r) {
    out += detail::csv_field(m.classes[r]);
    for (std::size_t c = 0; c < m.classes.size(); ++c) out += ',' + detail::fmt_double(m.at(r, c));
    out += '\n';
  }
  return out;
}

struct ComparisonRow {
  std::size_t k = 0;
  Method method = Method::trxos;
  double mean = 0, std = 0;
  std::size_t reps = 0;
  std::uint64_t seed = 0;

  friend bool operator==(const ComparisonRow&, const ComparisonRow&) = default;
};

// Generator for the tasks of one k; every method evaluated at that k sees the same task sequence.
inline std::mt19937_64 task_rng(std::uint64_t seed, std::size_t k) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(k)};
  return std::mt19937_64(seq);
}

// Rows per k in the order TRX-OS, EXP, RANDOM (restricted to `methods`). The random row is the
// analytic expectation, so its standard deviation is zero. A null table allows random only.
inline std::vector<ComparisonRow> compare_baseline(const ScoreTable* t, std::size_t class_count,
                                                   std::span<const std::size_t> ks, std::size_t reps, double tau,
                                                   std::uint64_t seed, std::span<const Method> methods) {
  std::vector<ComparisonRow> rows;
  for (std::size_t k : ks) check_protocol_args(class_count, k, reps);
  for (std::size_t k : ks) {
    for (Method m : {Method::trxos, Method::exp, Method::random}) {
      if (std::find(methods.begin(), methods.end(), m) == methods.end()) continue;
      ComparisonRow row{k, m, 0, 0, reps, seed};
      if (m == Method::random) {
        row.mean = random_baseline(k);
      } else {
        if (!t) throw ContractError("compare_baseline: " + display_name(m) + " needs a trained model");
        std::mt19937_64 rng = task_rng(seed, k);
        const EvalResult r = run_protocol(*t, m, k, reps, tau, rng);
        row.mean = r.mean;
        row.std = r.std;
      }
      rows.push_back(row);
    }
  }
  return rows;
}

inline constexpr std::string_view kResultsHeader = "k,method,mean,std,reps,seed";

inline std::string results_csv(std::span<const ComparisonRow> rows) {
  std::string out(kResultsHeader);
  out += '\n';
  for (const auto& r : rows) {
    out += std::to_string(r.k) + ',' + display_name(r.method) + ',' + detail::fmt_double(r.mean) + ',' +
           detail::fmt_double(r.std) + ',' + std::to_string(r.reps) + ',' + std::to_string(r.seed) + '\n';
  }
  return out;
}

// Methods as rows and k as columns, "mean +- std" cells.
inline std::string results_table(std::span<const ComparisonRow> rows) {
  std::vector<std::size_t> ks;
  std::vector<Method> methods;
  for (const auto& r : rows) {
    if (std::find(ks.begin(), ks.end(), r.k) == ks.end()) ks.push_back(r.k);
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
  }
  auto cell = [](const ComparisonRow& r) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f +- %.2f", r.mean, r.std);
    return std::string(buf);
  };
  std::ostringstream out;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-8s", "method");
  out << buf;
  for (std::size_t k : ks) {
    std::snprintf(buf, sizeof buf, "  %-14s", ("k=" + std::to_string(k)).c_str());
    out << buf;
  }
  out << '\n';
  for (Method m : methods) {
    std::snprintf(buf, sizeof buf, "%-8s", display_name(m).c_str());
    out << buf;
    for (std::size_t k : ks) {
      std::string c = "-";
      for (const auto& r : rows)
        if (r.k == k && r.method == m) c = cell(r);
      std::snprintf(buf, sizeof buf, "  %-14s", c.c_str());
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace fsos
