#include <random>

#include <gtest/gtest.h>

#include "fsos/eval.hpp"
#include "fsos/synth.hpp"

using namespace fsos;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.frames = 4;
  cfg.joints = kSynthJoints;
  cfg.embed_dim = 8;
  cfg.upsilon_dim = cfg.gamma_dim = 8;
  cfg.lambda_dim = 6;
  cfg.reduced_dim = 4;
  return cfg;
}

const Dataset& small_suite() {
  static const Dataset ds = preprocess_suite(generate_suite(builtin_suite(), 5, 11), 4);
  return ds;
}

const ScoreTable& small_table() {
  static const Model m = Model::initialize(small_config(), 7);
  static const ScoreTable t = [] {
    const auto cls = small_suite().classes_in(Split::test);
    return build_score_table(m, small_suite(), cls);
  }();
  return t;
}

// Synthetic table with chosen distances and scores, one query per entry of `labels`.
ScoreTable make_table(std::size_t classes, const std::vector<std::size_t>& labels, std::mt19937_64& rng) {
  ScoreTable t;
  t.classes = classes;
  for (std::size_t c = 0; c < classes; ++c) t.class_names.push_back("c" + std::to_string(c));
  std::uniform_real_distribution<double> u(0, 1);
  for (std::size_t q = 0; q < labels.size(); ++q) {
    t.query_class.push_back(labels[q]);
    t.query_ids.push_back("q" + std::to_string(q));
    for (std::size_t c = 0; c < classes; ++c) {
      t.distance.push_back(u(rng) * 2);
      t.os_score.push_back(u(rng));
    }
  }
  return t;
}

}  // namespace

TEST(FsosAcc, Examples) {
  const std::vector<std::size_t> t{0, 1, 2, kReject, kReject};
  EXPECT_EQ(fsos_acc(t, t), 1.0);
  const std::vector<std::size_t> rej(5, kReject);
  EXPECT_DOUBLE_EQ(fsos_acc(rej, t), 0.4);
  const std::vector<std::size_t> three{0, 1, 2};
  EXPECT_THROW(fsos_acc(three, t), ContractError);
  EXPECT_THROW(fsos_acc(std::vector<std::size_t>{}, std::vector<std::size_t>{}), ContractError);
}

TEST(FsosAcc, UniformRandomPredictorNearOneSixthAtFive) {
  std::mt19937_64 rng(3);
  std::vector<std::size_t> targets, preds;
  for (std::size_t i = 0; i < 60000; ++i) targets.push_back(i % 6 == 5 ? kReject : i % 6);
  std::uniform_int_distribution<std::size_t> pick(0, 5);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const std::size_t d = pick(rng);
    preds.push_back(d == 5 ? kReject : d);
  }
  EXPECT_NEAR(fsos_acc(preds, targets), 1.0 / 6.0, 0.01);
  EXPECT_NEAR(random_baseline(5), 0.17, 0.005);
}

TEST(RandomBaseline, MatchesCountingOverAllPredictionsAndTasks) {
  // Average accuracy of a uniform predictor, enumerated exactly over all k+1 outcomes per query,
  // for tasks with skewed label frequencies.
  for (std::size_t k = 1; k <= 6; ++k) {
    for (std::size_t unknown : {0u, 3u, 17u}) {
      std::vector<std::size_t> targets;
      for (std::size_t c = 0; c < k; ++c)
        for (std::size_t i = 0; i <= c; ++i) targets.push_back(c);
      targets.insert(targets.end(), unknown, kReject);
      double expected = 0;
      for (std::size_t t : targets) {
        std::size_t hits = 0;
        for (std::size_t o = 0; o <= k; ++o) hits += (o == k ? kReject : o) == t;
        expected += static_cast<double>(hits) / static_cast<double>(k + 1);
      }
      expected /= static_cast<double>(targets.size());
      EXPECT_NEAR(random_baseline(k), expected, 1e-15);
    }
  }
}

TEST(ScoreTable, MatchesDirectClassification) {
  const Dataset& ds = small_suite();
  const ScoreTable& t = small_table();
  const Model m = Model::initialize(small_config(), 7);
  const auto cls = ds.classes_in(Split::test);
  ASSERT_EQ(t.classes, 4u);
  ASSERT_EQ(t.queries(), 20u);

  std::vector<Tensor> support;
  for (std::size_t c : cls) support.push_back(ds.classes[c].sequences[ds.classes[c].exemplar].frames);
  const std::vector<std::size_t> all{0, 1, 2, 3};
  const TaskOutcome tr = run_task(t, all, Method::trxos, 0.5);
  const TaskOutcome ex = run_task(t, all, Method::exp, 0.5);
  std::size_t q = 0;
  for (std::size_t col = 0; col < cls.size(); ++col) {
    for (const auto& seq : ds.classes[cls[col]].sequences) {
      const Prediction p = m.fsos_classify(seq.frames, support, 0.5);
      for (std::size_t j = 0; j < support.size(); ++j) EXPECT_EQ(t.dist(q, j), p.distances[j]);
      EXPECT_EQ(t.score(q, p.fs_class), p.os_score);
      const Prediction e = m.fsos_classify(seq.frames, support, 0.5, Confidence::exp);
      EXPECT_EQ(tr.predictions[q], p.accepted.value_or(kReject));
      EXPECT_EQ(ex.predictions[q], e.accepted.value_or(kReject));
      EXPECT_EQ(t.query_class[q], col);
      ++q;
    }
  }
}

TEST(RunTask, TargetsAndEveryQueryOnce) {
  const ScoreTable& t = small_table();
  const std::vector<std::size_t> support{2, 0};
  const TaskOutcome o = run_task(t, support, Method::trxos, 0.5);
  ASSERT_EQ(o.targets.size(), t.queries());
  std::size_t known = 0;
  for (std::size_t q = 0; q < t.queries(); ++q) {
    const std::size_t c = t.query_class[q];
    const std::size_t want = c == 2 ? 0 : c == 0 ? 1 : kReject;
    EXPECT_EQ(o.targets[q], want);
    known += want != kReject;
  }
  EXPECT_EQ(known, 10u);
}

TEST(RunTask, DecisionSemantics) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < 30; ++i) labels.push_back(i % 5);
    const ScoreTable t = make_table(5, labels, rng);
    const auto support = sample_support(5, 3, rng);
    for (double tau : {0.0, 0.3, 0.5, 0.9}) {
      const TaskOutcome tr = run_task(t, support, Method::trxos, tau);
      const TaskOutcome ex = run_task(t, support, Method::exp, tau);
      EXPECT_EQ(tr.fs_class, ex.fs_class);
      for (std::size_t q = 0; q < t.queries(); ++q) {
        const double s = t.score(q, support[tr.fs_class[q]]);
        EXPECT_EQ(tr.predictions[q] != kReject, s > tau);
        if (tr.predictions[q] != kReject) {
          EXPECT_EQ(tr.predictions[q], tr.fs_class[q]);
        }
        const double e = std::exp(-t.dist(q, support[ex.fs_class[q]]));
        EXPECT_EQ(ex.predictions[q] != kReject, e > tau);
      }
    }
    for (Method m : {Method::trxos, Method::exp}) {
      for (std::size_t p : run_task(t, support, m, 1.0).predictions) EXPECT_EQ(p, kReject);
    }
  }
  // Score equal to tau is rejected.
  ScoreTable t = make_table(2, {0}, rng);
  t.distance = {0.1, 0.9};
  t.os_score = {0.5, 0.9};
  EXPECT_EQ(run_task(t, std::vector<std::size_t>{0, 1}, Method::trxos, 0.5).predictions[0], kReject);
  EXPECT_EQ(run_task(t, std::vector<std::size_t>{0, 1}, Method::trxos, 0.49).predictions[0], 0u);
}

TEST(Protocol, ErrorsAndReproducibility) {
  const ScoreTable& t = small_table();
  std::mt19937_64 rng(1);
  EXPECT_THROW(run_protocol(t, Method::trxos, 4, 10, 0.5, rng), ConfigError);
  EXPECT_THROW(run_protocol(t, Method::trxos, 0, 10, 0.5, rng), ConfigError);
  EXPECT_THROW(run_protocol(t, Method::trxos, 2, 0, 0.5, rng), ConfigError);

  std::mt19937_64 a(9), b(9);
  const EvalResult ra = run_protocol(t, Method::trxos, 2, 1, 0.5, a);
  const EvalResult rb = run_protocol(t, Method::trxos, 2, 1, 0.5, b);
  EXPECT_EQ(ra.mean, rb.mean);
  EXPECT_EQ(ra.std, 0.0);
  EXPECT_GE(ra.mean, 0.0);
  EXPECT_LE(ra.mean, 1.0);
  ASSERT_EQ(ra.accept_rate.size(), 4u);
}

TEST(Protocol, IdenticalTasksGiveZeroStd) {
  const ScoreTable& t = small_table();
  // Same model, same task every repetition.
  EvalResult r;
  for (int rep = 0; rep < 5; ++rep) {
    std::mt19937_64 g(4);
    r.per_rep.push_back(run_task(t, sample_support(t.classes, 3, g), Method::trxos, 0.5).acc);
  }
  summarize(r);
  EXPECT_EQ(r.std, 0.0);
  EXPECT_EQ(r.mean, r.per_rep[0]);
}

TEST(Protocol, RetrainPerRepCallsBuilderEachRepetition) {
  const ScoreTable& t = small_table();
  std::vector<std::size_t> calls;
  std::mt19937_64 a(6), b(6);
  const EvalResult r = run_protocol_retrain(
      [&](std::size_t rep) {
        calls.push_back(rep);
        return t;
      },
      Method::exp, 2, 4, 0.5, a);
  EXPECT_EQ(calls, (std::vector<std::size_t>{0, 1, 2, 3}));
  // A constant builder is equivalent to resampling tasks on one table.
  EXPECT_EQ(r.per_rep, run_protocol(t, Method::exp, 2, 4, 0.5, b).per_rep);
}

TEST(Protocol, ShuffledPredictionsDoNotBeatTheModel) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    // Informative table: distance and score favour the true class.
    std::vector<std::size_t> labels;
    for (std::size_t i = 0; i < 40; ++i) labels.push_back(i % 5);
    ScoreTable t = make_table(5, labels, rng);
    for (std::size_t q = 0; q < t.queries(); ++q) {
      t.distance[q * 5 + labels[q]] *= 0.3;
      t.os_score[q * 5 + labels[q]] = 0.5 + 0.5 * t.os_score[q * 5 + labels[q]];
    }
    const auto support = sample_support(5, 3, rng);
    const TaskOutcome o = run_task(t, support, Method::trxos, 0.5);
    double shuffled = 0;
    for (int s = 0; s < 100; ++s) {
      auto p = o.predictions;
      std::shuffle(p.begin(), p.end(), rng);
      shuffled += fsos_acc(p, o.targets);
    }
    EXPECT_GE(o.acc, shuffled / 100);
  }
}

TEST(Confusion, EntriesAndDiagonalRestriction) {
  const ScoreTable& t = small_table();
  const ConfusionMatrix m = os_confusion_matrix(t, 0.5);
  ASSERT_EQ(m.rates.size(), 16u);
  for (double v : m.rates) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  for (std::size_t r = 0; r < t.classes; ++r) {
    // Support = exemplar r alone, queries = class r's own sequences.
    std::size_t acc = 0, n = 0;
    const TaskOutcome o = run_task(t, std::vector<std::size_t>{r}, Method::trxos, 0.5);
    for (std::size_t q = 0; q < t.queries(); ++q) {
      if (t.query_class[q] != r) continue;
      acc += o.predictions[q] == 0;
      ++n;
    }
    EXPECT_EQ(m.at(r, r), static_cast<double>(acc) / static_cast<double>(n));
  }
}

TEST(Confusion, PerfectlyDiscriminativeTableIsIdentity) {
  std::mt19937_64 rng(1);
  std::vector<std::size_t> labels{0, 0, 1, 1, 2, 2};
  ScoreTable t = make_table(3, labels, rng);
  for (std::size_t q = 0; q < labels.size(); ++q)
    for (std::size_t c = 0; c < 3; ++c) t.os_score[q * 3 + c] = c == labels[q] ? 0.99 : 0.01;
  const ConfusionMatrix m = os_confusion_matrix(t, 0.5);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(m.at(r, c), r == c ? 1.0 : 0.0);
  EXPECT_EQ(confusion_csv(m), "support,c0,c1,c2\nc0,1,0,0\nc1,0,1,0\nc2,0,0,1\n");
}

TEST(Compare, RowOrderCsvAndDeterminism) {
  const ScoreTable& t = small_table();
  const std::vector<std::size_t> ks{1, 2, 3};
  const std::vector<Method> all{Method::random, Method::exp, Method::trxos};
  const auto rows = compare_baseline(&t, t.classes, ks, 10, 0.5, 42, all);
  ASSERT_EQ(rows.size(), 9u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(rows[3 * i].method, Method::trxos);
    EXPECT_EQ(rows[3 * i + 1].method, Method::exp);
    EXPECT_EQ(rows[3 * i + 2].method, Method::random);
    EXPECT_EQ(rows[3 * i + 2].mean, 1.0 / static_cast<double>(ks[i] + 1));
    EXPECT_EQ(rows[3 * i + 2].std, 0.0);
  }
  EXPECT_EQ(rows, compare_baseline(&t, t.classes, ks, 10, 0.5, 42, all));
  const std::string csv = results_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "k,method,mean,std,reps,seed");
  EXPECT_NE(csv.find("\n1,RANDOM,0.5,0,10,42\n"), std::string::npos);
  const std::string table = results_table(rows);
  EXPECT_NE(table.find("TRX-OS"), std::string::npos);
  EXPECT_LT(table.find("TRX-OS"), table.find("EXP"));
  EXPECT_LT(table.find("EXP"), table.find("RANDOM"));

  // Both learned methods see the same task sequence at each k.
  std::mt19937_64 g1 = task_rng(42, 2), g2 = task_rng(42, 2);
  for (int i = 0; i < 10; ++i) EXPECT_EQ(sample_support(4, 2, g1), sample_support(4, 2, g2));

  EXPECT_THROW(compare_baseline(&t, t.classes, std::vector<std::size_t>{4}, 10, 0.5, 1, all), ConfigError);
  const std::vector<Method> rnd{Method::random};
  EXPECT_EQ(compare_baseline(nullptr, 4, ks, 10, 0.5, 1, rnd).size(), 3u);
  EXPECT_THROW(compare_baseline(nullptr, 4, ks, 10, 0.5, 1, all), ContractError);
}

TEST(Compare, ParseMethod) {
  EXPECT_EQ(parse_method("trxos"), Method::trxos);
  EXPECT_EQ(parse_method("exp"), Method::exp);
  EXPECT_EQ(parse_method("random"), Method::random);
  EXPECT_THROW(parse_method("RANDOM"), ConfigError);
}
