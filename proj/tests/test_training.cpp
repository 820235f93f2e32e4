#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "fsos/gradcheck.hpp"
#include "fsos/synth.hpp"
#include "fsos/training.hpp"

using namespace fsos;

namespace {

ModelConfig small_config(std::size_t frames = 4) {
  ModelConfig cfg;
  cfg.frames = frames;
  cfg.joints = kSynthJoints;
  cfg.embed_dim = 8;
  cfg.upsilon_dim = cfg.gamma_dim = 8;
  cfg.lambda_dim = 8;
  cfg.reduced_dim = 4;
  return cfg;
}

const Dataset& small_suite() {
  static const Dataset ds = preprocess_suite(generate_suite(builtin_suite(), 6, 77), 4);
  return ds;
}

Tensor random_tensor(Shape s, std::mt19937_64& rng, double spread = 0.5) {
  std::uniform_real_distribution<double> u(-spread, spread);
  Tensor t(std::move(s));
  for (double& v : t.storage()) v = u(rng);
  return t;
}

// -log softmax(-d)[y] computed directly in long double.
double ce_oracle(const std::vector<double>& d, std::size_t y) {
  long double mx = -d[0];
  for (double x : d) mx = std::max<long double>(mx, -x);
  long double z = 0;
  for (double x : d) z += std::exp(static_cast<long double>(-x) - mx);
  return static_cast<double>(-(static_cast<long double>(-d[y]) - mx - std::log(z)));
}

double bce_oracle(double score, double target) {
  return -(target * std::log(score) + (1 - target) * std::log(1 - score));
}

}  // namespace

TEST(EpisodeSampler, PropertiesOverManyEpisodes) {
  const Dataset& ds = small_suite();
  const auto classes = ds.classes_in(Split::train);
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const Episode ep = sample_episode(ds, classes, 5, 4, rng);
    ASSERT_NO_THROW(ep.check());
    ASSERT_EQ(ep.classes.size(), 5u);
    ASSERT_EQ(std::set<std::size_t>(ep.classes.begin(), ep.classes.end()).size(), 5u);
    for (std::size_t i = 0; i < ep.queries.size(); ++i) {
      ASSERT_EQ(ep.classes[ep.query_labels[i]], ep.queries[i].class_id);
      ASSERT_NE(ep.queries[i].frames, ep.support[ep.query_labels[i]]);
    }
    ASSERT_EQ(ep.unknown_pool.size(), 3u * 6u);
    for (const Sample& u : ep.unknown_pool) {
      ASSERT_EQ(std::count(ep.classes.begin(), ep.classes.end(), u.class_id), 0);
      ASSERT_EQ(ds.classes[u.class_id].split, Split::train);
    }
  }
}

TEST(EpisodeSampler, TooFewClassesIsConfigError) {
  const Dataset& ds = small_suite();
  const auto classes = ds.classes_in(Split::train);
  std::mt19937_64 rng(2);
  EXPECT_THROW((void)sample_episode(ds, classes, 8, 4, rng), ConfigError);
  EXPECT_NO_THROW((void)sample_episode(ds, classes, 7, 4, rng));
}

TEST(BalancedNegatives, EdgeCases) {
  std::vector<Tensor> storage(5);
  std::vector<Sample> pool;
  for (std::size_t i = 0; i < 5; ++i) pool.push_back({&storage[i], 10 + i});
  std::mt19937_64 rng(3);
  EXPECT_TRUE(sample_balanced_negatives(pool, 0, rng).empty());
  auto all = sample_balanced_negatives(pool, 5, rng);
  std::set<const Tensor*> seen;
  for (const auto& s : all) seen.insert(s.frames);
  EXPECT_EQ(seen.size(), 5u);
  std::vector<std::string> warnings;
  EXPECT_EQ(sample_balanced_negatives(pool, 9, rng, &warnings).size(), 5u);
  EXPECT_EQ(warnings.size(), 1u);
  EXPECT_TRUE(sample_balanced_negatives({}, 3, rng, &warnings).empty());
  EXPECT_EQ(warnings.size(), 2u);
}

TEST(BalancedNegatives, NeverDrawsSupportClassesAndNoRepeats) {
  const Dataset& ds = small_suite();
  const auto classes = ds.classes_in(Split::train);
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const Episode ep = sample_episode(ds, classes, 4, 4, rng);
    const std::size_t z = uniform_index(rng, 6);
    const auto neg = sample_balanced_negatives(ep.unknown_pool, z, rng);
    ASSERT_EQ(neg.size(), std::min(z, ep.unknown_pool.size()));
    std::set<const Tensor*> seen;
    for (const Sample& s : neg) {
      ASSERT_EQ(std::count(ep.classes.begin(), ep.classes.end(), s.class_id), 0);
      seen.insert(s.frames);
    }
    ASSERT_EQ(seen.size(), neg.size());
  }
}

TEST(LossFs, UniformDistancesGiveLogK) {
  Tape tape;
  const Var d = tape.constant(Tensor::vector({0.7, 0.7, 0.7, 0.7, 0.7}));
  const std::vector<Var> ds{d};
  const std::vector<std::size_t> y{2};
  EXPECT_NEAR(loss_fs(ds, y).item(), std::log(5.0), 1e-14);
}

TEST(LossFs, ConfidentCorrectClassApproachesZero) {
  Tape tape;
  const std::vector<Var> ds{tape.constant(Tensor::vector({0.0, 50.0, 60.0}))};
  const std::vector<std::size_t> y{0};
  const double l = loss_fs(ds, y).item();
  EXPECT_GE(l, 0.0);
  EXPECT_LT(l, 1e-20);
}

TEST(LossFs, MatchesScalarOracleOnRandomVectors) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 6.0);
  for (int trial = 0; trial < 500; ++trial) {
    Tape tape;
    const std::size_t batch = 1 + uniform_index(rng, 4);
    std::vector<Var> ds;
    std::vector<std::size_t> ys;
    double expected = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t k = 1 + uniform_index(rng, 5);
      std::vector<double> d(k);
      for (double& x : d) x = u(rng);
      ys.push_back(uniform_index(rng, k));
      ds.push_back(tape.constant(Tensor(Shape{k}, d)));
      expected += ce_oracle(d, ys.back());
    }
    const double l = loss_fs(ds, ys).item();
    ASSERT_NEAR(l, expected / static_cast<double>(batch), 1e-10);
    ASSERT_GE(l, 0.0);
  }
}

TEST(LossFs, LabelOutsideSupportIsContractError) {
  Tape tape;
  const std::vector<Var> ds{tape.constant(Tensor::vector({1.0, 2.0}))};
  const std::vector<std::size_t> y{2};
  EXPECT_THROW((void)loss_fs(ds, y), ContractError);
}

TEST(LossOs, HalfScoresGiveLn2) {
  Tape tape;
  const std::vector<Var> pos{tape.constant(Tensor::scalar(0.0))};
  const std::vector<Var> neg{tape.constant(Tensor::scalar(0.0))};
  EXPECT_NEAR(loss_os(tape, pos, neg, OsMean::terms, 2).item(), std::log(2.0), 1e-15);
  EXPECT_NEAR(loss_os(tape, pos, neg, OsMean::batch, 4).item(), std::log(2.0) / 2, 1e-15);
}

TEST(LossOs, NoTermsIsZero) {
  Tape tape;
  EXPECT_EQ(loss_os(tape, {}, {}, OsMean::terms, 4).item(), 0.0);
}

TEST(LossOs, MatchesBceOracle) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g(0.0, 3.0);
  for (int trial = 0; trial < 200; ++trial) {
    Tape tape;
    std::vector<Var> pos, neg;
    double expected = 0;
    const std::size_t np = uniform_index(rng, 5), nn = uniform_index(rng, 5);
    for (std::size_t i = 0; i < np; ++i) {
      const double x = g(rng);
      pos.push_back(tape.constant(Tensor::scalar(x)));
      expected += bce_oracle(sigmoid(x), 1.0);
    }
    for (std::size_t i = 0; i < nn; ++i) {
      const double x = g(rng);
      neg.push_back(tape.constant(Tensor::scalar(x)));
      expected += bce_oracle(sigmoid(x), 0.0);
    }
    const double got = loss_os(tape, pos, neg, OsMean::terms, 8).item();
    ASSERT_NEAR(got, np + nn ? expected / static_cast<double>(np + nn) : 0.0, 1e-9);
  }
}

// Two frames make the distance of a query to an identical support sequence exactly zero, so
// which known queries are FS-correct is fixed by construction.
class GatingEpisode : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg = small_config(2);
    model = std::make_unique<Model>(Model::initialize(cfg, 11));
    std::mt19937_64 rng(12);
    for (int i = 0; i < 3; ++i) seqs.push_back(random_tensor({2, cfg.joints, 3}, rng));
    for (int i = 0; i < 2; ++i) unknowns.push_back(random_tensor({2, cfg.joints, 3}, rng));
    ep.classes = {100, 101, 102};
    ep.support = {&seqs[0], &seqs[1], &seqs[2]};
    for (std::size_t i = 0; i < 2; ++i) ep.unknown_pool.push_back({&unknowns[i], 200 + i});
  }

  void add_query(const Tensor& frames, std::size_t label) {
    ep.queries.push_back({&frames, ep.classes[label]});
    ep.query_labels.push_back(label);
  }

  ModelConfig cfg;
  std::unique_ptr<Model> model;
  std::vector<Tensor> seqs, unknowns;
  Episode ep;
};

TEST_F(GatingEpisode, ThreeCaseContributions) {
  add_query(seqs[0], 0);  // correct
  add_query(seqs[2], 2);  // correct
  add_query(seqs[1], 0);  // known but classified as slot 1
  const std::vector<Tensor> support{seqs[0], seqs[1], seqs[2]};
  ASSERT_EQ(model->fs_classify(seqs[1], support).fs_class, 1u);

  Tape tape;
  Network net = model->network(tape, true);
  std::mt19937_64 rng(13);
  const EpisodeLosses l = batch_losses(net, std::span(&ep, 1), 1.0, OsMean::terms, rng);
  EXPECT_EQ(l.positive, (std::vector<bool>{true, true, false}));
  EXPECT_EQ(l.z, 2u);
  EXPECT_EQ(l.negatives, 2u);

  // BCE(., 1) for the two correct queries, BCE(., 0) for both unknowns, nothing for the third.
  double expected = bce_oracle(model->discriminator_score(seqs[0], seqs[0]), 1) +
                    bce_oracle(model->discriminator_score(seqs[2], seqs[2]), 1);
  for (const Tensor& u : unknowns) {
    const std::size_t c = model->fs_classify(u, support).fs_class;
    expected += bce_oracle(model->discriminator_score(u, support[c]), 0);
  }
  EXPECT_NEAR(l.os.item(), expected / 4, 1e-12);

  double fs = 0;
  for (std::size_t i = 0; i < 3; ++i) fs += ce_oracle(model->fs_classify(*ep.queries[i].frames, support).distances, ep.query_labels[i]);
  EXPECT_NEAR(l.fs.item(), fs / 3, 1e-10);
  EXPECT_NEAR(l.total.item(), l.fs.item() + l.os.item(), 1e-15);
}

TEST_F(GatingEpisode, AllMisclassifiedGivesZeroOpenSetLoss) {
  add_query(seqs[1], 0);
  add_query(seqs[2], 1);
  Tape tape;
  Network net = model->network(tape, true);
  std::mt19937_64 rng(14);
  const EpisodeLosses l = batch_losses(net, std::span(&ep, 1), 1.0, OsMean::terms, rng);
  EXPECT_EQ(l.z, 0u);
  EXPECT_EQ(l.negatives, 0u);
  EXPECT_EQ(l.os.item(), 0.0);
  EXPECT_EQ(l.total.item(), l.fs.item());
}

TEST_F(GatingEpisode, MisclassifiedQueryAddsNothingToOpenSetLoss) {
  add_query(seqs[0], 0);
  Tape tape_a;
  std::mt19937_64 rng_a(15);
  const double base = batch_losses(model->network(tape_a, true), std::span(&ep, 1), 1.0, OsMean::terms, rng_a).os.item();
  add_query(seqs[2], 1);  // misclassified, must not change the open-set loss
  Tape tape_b;
  std::mt19937_64 rng_b(15);
  const double with = batch_losses(model->network(tape_b, true), std::span(&ep, 1), 1.0, OsMean::terms, rng_b).os.item();
  EXPECT_EQ(base, with);
}

TEST_F(GatingEpisode, ContractViolationsAreRejected) {
  add_query(seqs[0], 0);
  ep.unknown_pool.push_back({&seqs[1], 101});
  Tape tape;
  std::mt19937_64 rng(16);
  EXPECT_THROW((void)batch_losses(model->network(tape, true), std::span(&ep, 1), 1.0, OsMean::terms, rng), ContractError);
}

TEST(BalancedCounts, PositivesEqualNegativesWhenPoolSuffices) {
  const Dataset& ds = small_suite();
  const auto classes = ds.classes_in(Split::train);
  Model model = Model::initialize(small_config(), 17);
  std::mt19937_64 rng(18);
  std::size_t total_z = 0;
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<Episode> batch{sample_episode(ds, classes, 3, 6, rng), sample_episode(ds, classes, 3, 6, rng)};
    Tape tape;
    const EpisodeLosses l = batch_losses(model.network(tape, true), batch, 1.0, OsMean::terms, rng);
    ASSERT_LE(l.z, l.known);
    ASSERT_EQ(l.negatives, l.z);
    ASSERT_EQ(static_cast<std::size_t>(std::count(l.positive.begin(), l.positive.end(), true)), l.z);
    total_z += l.z;
  }
  EXPECT_GT(total_z, 0u);
}

TEST(LossTotal, SigmaZeroGivesZeroDiscriminatorGradient) {
  const Dataset& ds = small_suite();
  const auto classes = ds.classes_in(Split::train);
  Model model = Model::initialize(small_config(), 19);
  std::mt19937_64 rng(20);
  for (int trial = 0; trial < 10; ++trial) {
    const Episode ep = sample_episode(ds, classes, 3, 6, rng);
    Tape tape;
    Network net = model.network(tape, true);
    const EpisodeLosses l = batch_losses(net, std::span(&ep, 1), 0.0, OsMean::terms, rng);
    EXPECT_EQ(l.total.item(), l.fs.item());
    tape.backward(l.total);
    const ModelParams g = collect_grads(tape, net);
    g.for_each([&](const char* name, const Tensor& t) {
      if (!is_discriminator(name)) return;
      for (double v : t.storage()) ASSERT_EQ(v, 0.0) << name;
    });
  }
}

TEST(LossTotal, WeightedSum) {
  Tape tape;
  const Var fs = tape.constant(Tensor::scalar(0.3));
  const Var os = tape.constant(Tensor::scalar(0.2));
  EXPECT_NEAR(add(fs, scale(os, 1.0)).item(), 0.5, 1e-15);
}

// Full combined loss on a tiny episode against central differences.
TEST(LossTotal, GradientMatchesFiniteDifferences) {
  ModelConfig cfg;
  cfg.frames = 3;
  cfg.joints = 4;
  cfg.embed_dim = 8;
  cfg.upsilon_dim = cfg.gamma_dim = 6;
  cfg.lambda_dim = 5;
  cfg.reduced_dim = 4;
  cfg.disc_hidden = {8, 6, 4};
  std::mt19937_64 rng(21);
  Model model = Model::initialize(cfg, 22);
  std::vector<Tensor> seqs;
  for (int i = 0; i < 6; ++i) seqs.push_back(random_tensor({3, 4, 3}, rng));
  Episode ep;
  ep.classes = {0, 1};
  ep.support = {&seqs[0], &seqs[1]};
  ep.queries = {{&seqs[2], 0}, {&seqs[3], 1}};
  ep.query_labels = {0, 1};
  ep.unknown_pool = {{&seqs[4], 2}, {&seqs[5], 3}};
  // Nudge each query toward its support so at least one is FS-correct.
  for (std::size_t i = 0; i < seqs[2].size(); ++i) seqs[2][i] = seqs[0][i] + 0.05 * seqs[2][i];

  std::vector<Tensor> params;
  std::vector<std::string> names;
  model.params().for_each([&](const char* n, const Tensor& t) {
    if (!is_trainable(n, cfg)) return;
    params.push_back(t);
    names.emplace_back(n);
  });
  std::size_t z = 0;
  const ScalarFn f = [&](Tape& tape, std::span<const Var> leaves) {
    ParamSet<Var> vars;
    std::size_t k = 0;
    vars.for_each([&](const char* n, Var& v) {
      v = is_trainable(n, cfg) ? leaves[k++] : tape.constant(model.params().pe_table);
    });
    Network net(tape, cfg, model.pairs(), vars);
    std::mt19937_64 local(23);
    const EpisodeLosses l = batch_losses(net, std::span(&ep, 1), 0.7, OsMean::terms, local);
    z = l.z;
    return l.total;
  };
  const GradCheckResult r = gradient_check(f, params, 1e-6);
  ASSERT_GE(z, 1u);
  EXPECT_LE(r.max_rel_error, 1e-4) << names[r.worst_param] << "[" << r.worst_index << "] analytic " << r.analytic
                                   << " numeric " << r.numeric;

  // The open-set term reaches the embedding weights.
  Tape tape;
  Network net = model.network(tape, true);
  std::mt19937_64 local(23);
  const EpisodeLosses l = batch_losses(net, std::span(&ep, 1), 1.0, OsMean::terms, local);
  tape.backward(l.os);
  const Tensor g = tape.grad(net.vars().psi_w1);
  double norm = 0;
  for (double v : g.storage()) norm += v * v;
  EXPECT_GT(norm, 0.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ModelConfig cfg = small_config();
  Model model = Model::initialize(cfg, 24);
  OptimizerState st = make_optimizer_state(model.params());
  ModelParams grads = st.m;
  std::mt19937_64 rng(25);
  grads.for_each([&](const char*, Tensor& t) { t = random_tensor(t.shape(), rng, 2.0); });
  const ModelParams before = model.params();
  TrainConfig tc;
  adam_update(model.params(), grads, st, tc, cfg);
  EXPECT_EQ(st.step, 1u);
  std::vector<const Tensor*> b, g;
  std::vector<std::string> names;
  before.for_each([&](const char* n, const Tensor& t) {
    b.push_back(&t);
    names.emplace_back(n);
  });
  grads.for_each([&](const char*, const Tensor& t) { g.push_back(&t); });
  std::size_t k = 0;
  model.params().for_each([&](const char*, const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double gi = (*g[k])[i];
      const double expected = names[k] == "pe_table" ? (*b[k])[i] : (*b[k])[i] - tc.lr * gi / (std::abs(gi) + tc.adam_eps);
      ASSERT_NEAR(t[i], expected, 1e-15) << names[k];
    }
    ++k;
  });
}

TEST(TrainStep, DeterministicGivenSeed) {
  const Dataset& ds = small_suite();
  TrainConfig tc;
  tc.way = 3;
  tc.episodes = 6;
  tc.seed = 26;
  auto run = [&] {
    TrainState st = init_training(small_config(), tc);
    std::vector<StepReport> reports;
    train_loop(ds, st, {.on_step = [&](const StepReport& r) { reports.push_back(r); }});
    return std::pair(reports, st.model.params());
  };
  const auto [a, pa] = run();
  const auto [b, pb] = run();
  ASSERT_EQ(a.size(), 6u);
  EXPECT_EQ(a, b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].step, i + 1);
    EXPECT_LE(a[i].z, tc.queries);
    EXPECT_EQ(format_report_row(a[i]), format_report_row(b[i]));
  }
  std::vector<Tensor> ta, tb;
  pa.for_each([&](const char*, const Tensor& t) { ta.push_back(t); });
  pb.for_each([&](const char*, const Tensor& t) { tb.push_back(t); });
  EXPECT_EQ(ta, tb);
}

TEST(TrainStep, NonFiniteLossAborts) {
  const Dataset& ds = small_suite();
  TrainState st = init_training(small_config(), TrainConfig{.way = 3});
  st.model.params().lambda[0] = std::numeric_limits<double>::quiet_NaN();
  const auto classes = ds.classes_in(Split::train);
  const std::vector<Episode> batch{sample_episode(ds, classes, 3, 4, st.rng)};
  EXPECT_THROW((void)train_step(st.model, batch, st.opt, st.train, st.rng), NumericError);
}

// Two classes that differ by a constant offset of one joint: the loss must fall.
TEST(TrainStep, LossDecreasesOnSeparableTwoClassTask) {
  ModelConfig cfg = small_config(4);
  cfg.joints = 4;
  std::mt19937_64 rng(27);
  Dataset ds;
  for (int c = 0; c < 2; ++c) {
    ClassSequences cls;
    cls.name = c ? "up" : "down";
    cls.split = Split::train;
    for (int i = 0; i < 20; ++i) {
      Tensor t = random_tensor({4, 4, 3}, rng, 0.2);
      for (std::size_t f = 0; f < 4; ++f) t[(f * 4 + 1) * 3 + 1] += c ? 0.6 : -0.6;
      cls.sequences.push_back({t, cls.name, std::to_string(i)});
    }
    ds.classes.push_back(std::move(cls));
  }
  TrainConfig tc;
  tc.way = 2;
  tc.seed = 28;
  TrainState st = init_training(cfg, tc);
  std::vector<double> losses;
  for (int step = 0; step < 200; ++step) {
    Episode ep;
    ep.classes = {0, 1};
    std::vector<std::size_t> pick(2);
    for (std::size_t s = 0; s < 2; ++s) {
      pick[s] = uniform_index(st.rng, 20);
      ep.support.push_back(&ds.classes[s].sequences[pick[s]].frames);
    }
    for (int q = 0; q < 4; ++q) {
      const std::size_t s = uniform_index(st.rng, 2);
      const std::size_t i = (pick[s] + 1 + uniform_index(st.rng, 19)) % 20;
      ep.queries.push_back({&ds.classes[s].sequences[i].frames, s});
      ep.query_labels.push_back(s);
    }
    losses.push_back(train_step(st.model, std::span(&ep, 1), st.opt, tc, st.rng).loss_fs);
  }
  double head = 0, tail = 0;
  for (int i = 0; i < 40; ++i) {
    head += losses[static_cast<std::size_t>(i)];
    tail += losses[losses.size() - 1 - static_cast<std::size_t>(i)];
  }
  EXPECT_LT(tail, 0.5 * head);
}

TEST(TrainLoop, CheckpointHookAndClassChecks) {
  const Dataset& ds = small_suite();
  TrainConfig tc;
  tc.way = 3;
  tc.episodes = 7;
  tc.checkpoint_every = 3;
  TrainState st = init_training(small_config(), tc);
  std::vector<std::size_t> at;
  train_loop(ds, st, {.on_checkpoint = [&](const TrainState& s) { at.push_back(s.opt.step); }});
  EXPECT_EQ(at, (std::vector<std::size_t>{3, 6, 7}));

  TrainConfig wide = tc;
  wide.way = 8;
  TrainState st2 = init_training(small_config(), wide);
  EXPECT_THROW(train_loop(ds, st2), ConfigError);
}

TEST(TrainReport, CsvRow) {
  StepReport r{3, 0.5, 0.25, 0.75, 2, 0.5};
  EXPECT_EQ(format_report_row(r), "3,0.5,0.25,0.75,2,0.5");
  EXPECT_EQ(kReportHeader, "step,loss_fs,loss_os,loss_total,z,fs_acc");
}
