#include <cstring>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "fsos/checkpoint.hpp"
#include "fsos/synth.hpp"

using namespace fsos;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.frames = 4;
  cfg.joints = kSynthJoints;
  cfg.embed_dim = 8;
  cfg.upsilon_dim = cfg.gamma_dim = 8;
  cfg.lambda_dim = 6;
  cfg.reduced_dim = 4;
  cfg.tau = 0.4;
  cfg.sigma = 0.5;
  return cfg;
}

const Dataset& small_suite() {
  static const Dataset ds = preprocess_suite(generate_suite(builtin_suite(), 6, 5), 4);
  return ds;
}

std::vector<Tensor> flatten(const ModelParams& p) {
  std::vector<Tensor> out;
  p.for_each([&](const char*, const Tensor& t) { out.push_back(t); });
  return out;
}

bool bit_equal(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].shape() != b[i].shape()) return false;
    if (std::memcmp(a[i].storage().data(), b[i].storage().data(), a[i].size() * sizeof(double)) != 0) return false;
  }
  return true;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("fsos_ckpt_" + std::to_string(::getpid()) + "_" + name);
}

}  // namespace

TEST(Checkpoint, LayoutHeader) {
  const Model m = Model::initialize(small_config(), 1);
  const std::string bytes = encode_checkpoint(m);
  ASSERT_GE(bytes.size(), 24u);
  EXPECT_EQ(bytes.substr(0, 8), "FSOSCKPT");
  std::uint32_t version = 0, reserved = 1;
  std::uint64_t hlen = 0;
  std::memcpy(&version, bytes.data() + 8, 4);
  std::memcpy(&reserved, bytes.data() + 12, 4);
  std::memcpy(&hlen, bytes.data() + 16, 8);
  EXPECT_EQ(version, 1u);
  EXPECT_EQ(reserved, 0u);
  const auto header = nlohmann::json::parse(bytes.substr(24, hlen));
  std::size_t values = 0;
  for (const auto& t : header.at("tensors")) values += t.at("count").get<std::size_t>();
  EXPECT_EQ(bytes.size(), 24 + hlen + 8 * values);
  EXPECT_EQ(header.at("config").get<ModelConfig>(), m.config());
  EXPECT_FALSE(header.contains("training"));
  // First payload value is the first weight, little-endian.
  double first = 0;
  std::memcpy(&first, bytes.data() + 24 + hlen, 8);
  EXPECT_EQ(first, m.params().psi_w1[0]);
}

TEST(Checkpoint, RoundTripReproducesInference) {
  const Model m = Model::initialize(small_config(), 2);
  const auto path = temp_path("model.ckpt");
  save_checkpoint(path, m);
  const LoadedCheckpoint ck = load_checkpoint(path);
  fs::remove(path);
  EXPECT_FALSE(ck.resumable());
  EXPECT_EQ(ck.model.config(), m.config());
  EXPECT_TRUE(bit_equal(flatten(ck.model.params()), flatten(m.params())));

  const Dataset& ds = small_suite();
  std::vector<Tensor> support;
  for (std::size_t c : ds.classes_in(Split::test)) support.push_back(ds.classes[c].sequences[0].frames);
  for (const auto& c : ds.classes) {
    const Prediction a = m.fsos_classify(c.sequences[1].frames, support, 0.5);
    const Prediction b = ck.model.fsos_classify(c.sequences[1].frames, support, 0.5);
    EXPECT_EQ(a.distances, b.distances);
    EXPECT_EQ(a.os_score, b.os_score);
    EXPECT_EQ(a.accepted, b.accepted);
  }
}

TEST(Checkpoint, ResumeContinuesBitIdentically) {
  const Dataset& ds = small_suite();
  TrainConfig tc;
  tc.way = 3;
  tc.episodes = 10;
  tc.seed = 3;

  TrainState straight = init_training(small_config(), tc);
  std::vector<StepReport> a;
  train_loop(ds, straight, {.on_step = [&](const StepReport& r) { a.push_back(r); }});

  TrainConfig half = tc;
  half.episodes = 5;
  TrainState first = init_training(small_config(), half);
  std::vector<StepReport> b;
  train_loop(ds, first, {.on_step = [&](const StepReport& r) { b.push_back(r); }});
  const auto path = temp_path("resume.ckpt");
  save_checkpoint(path, first);
  const LoadedCheckpoint ck = load_checkpoint(path);
  fs::remove(path);
  ASSERT_TRUE(ck.resumable());
  EXPECT_EQ(ck.opt->step, 5u);
  TrainState resumed = ck.resume_state();
  EXPECT_EQ(rng_state(resumed.rng), rng_state(first.rng));
  resumed.train.episodes = 10;
  train_loop(ds, resumed, {.on_step = [&](const StepReport& r) { b.push_back(r); }});

  EXPECT_EQ(a, b);
  EXPECT_TRUE(bit_equal(flatten(straight.model.params()), flatten(resumed.model.params())));
  EXPECT_TRUE(bit_equal(flatten(straight.opt.m), flatten(resumed.opt.m)));
  EXPECT_TRUE(bit_equal(flatten(straight.opt.v), flatten(resumed.opt.v)));
}

TEST(Checkpoint, CorruptInputsAreDataErrors) {
  const Model m = Model::initialize(small_config(), 4);
  const std::string good = encode_checkpoint(m);
  EXPECT_NO_THROW((void)decode_checkpoint(good));
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_THROW((void)decode_checkpoint(bad), DataError);
  bad = good;
  bad[8] = 2;
  EXPECT_THROW((void)decode_checkpoint(bad), DataError);
  EXPECT_THROW((void)decode_checkpoint(good.substr(0, good.size() - 8)), DataError);
  EXPECT_THROW((void)decode_checkpoint(good.substr(0, 30)), DataError);
  EXPECT_THROW((void)decode_checkpoint("short"), DataError);
  EXPECT_THROW((void)load_checkpoint("/nonexistent/x.ckpt"), DataError);
  EXPECT_THROW(save_checkpoint("/nonexistent/dir/x.ckpt", m), DataError);

  // Header config that disagrees with the stored tensor shapes.
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, good.data() + 16, 8);
  auto header = nlohmann::json::parse(good.substr(24, hlen));
  header["config"]["embed_dim"] = 9;
  const std::string h = header.dump();
  std::string edited = good.substr(0, 16);
  const std::uint64_t n = h.size();
  edited.append(reinterpret_cast<const char*>(&n), 8);
  edited += h + good.substr(24 + hlen);
  EXPECT_THROW((void)decode_checkpoint(edited), DataError);
}
