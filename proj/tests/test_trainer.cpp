#include "ffact/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace ffact;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("ffact_trainer_" + name)).string();
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.n_train = 16;
  c.n_test = 6;
  c.channels = {4, 4, 8, 8};
  c.hidden = {16};
  c.embedding_dim = 4;
  c.latent_dim = 4;
  c.steps = 4;
  c.batch = 4;
  c.iterations = 6;
  c.precision = "float64";
  return c;
}

template <class Real>
bool same_parameters(TrainState<Real>& a, TrainState<Real>& b) {
  auto pa = named_parameters(a), pb = named_parameters(b);
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i].first != pb[i].first || *pa[i].second != *pb[i].second) return false;
  for (std::size_t i = 0; i < a.adam.m.size(); ++i)
    if (a.adam.m[i] != b.adam.m[i] || a.adam.v[i] != b.adam.v[i]) return false;
  return a.adam.step == b.adam.step && a.iteration == b.iteration;
}

std::vector<std::uint8_t> file_bytes(const std::string& path) { return read_file(path); }

}  // namespace

TEST(Config, ParsesKeyValueLinesWithComments) {
  const auto c = parse_config("# toy run\nK = 3\nlr = 0.002  \nmode = weak\ntransforms = scale, rotate, hue\n\n");
  EXPECT_EQ(c.num_k, 3);
  EXPECT_DOUBLE_EQ(c.lr, 0.002);
  EXPECT_TRUE(c.weak());
  EXPECT_EQ(c.transforms, (std::vector<std::string>{"scale", "rotate", "hue"}));
}

TEST(Config, PresetAppliesBeforeOtherKeys) {
  const auto c = parse_config("batch = 7\ndata_path = /data/mnist\npreset = mnist\n");
  EXPECT_EQ(c.image_size, 32);
  EXPECT_EQ(c.batch, 7);
  EXPECT_DOUBLE_EQ(c.lr, 1e-4);
}

TEST(Config, UnknownKeyIsAnErrorNamingTheLine) {
  try {
    parse_config("K = 3\nlearning_rate = 1\n");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos) << e.what();
  }
}

TEST(Config, InvalidValuesAreRejected) {
  EXPECT_THROW(parse_config("lr = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("mode = unsure\n"), ConfigError);
  EXPECT_THROW(parse_config("K = 2\n"), ConfigError);  // three transforms listed
  EXPECT_THROW(parse_config("batch = many\n"), ConfigError);
  EXPECT_THROW(parse_config("no equals sign\n"), ConfigError);
  EXPECT_THROW(parse_config("dataset = mnist\n"), ConfigError);
  EXPECT_THROW(parse_config("preset = huge\n"), ConfigError);
}

TEST(Config, TextRoundTripIsExact) {
  auto c = tiny_config();
  c.lr = 0.1 + 0.2;
  c.mode = "weak";
  c.out = "/tmp/x.ckpt";
  const auto text = to_text(c);
  EXPECT_EQ(to_text(parse_config(text)), text);
  EXPECT_EQ(parse_config(text).lr, c.lr);
}

TEST(Adam, ZeroGradientLeavesParametersAndCountsStep) {
  Matrix<double> p(2, 2);
  p << 1, -2, 3, 4;
  const Matrix<double> before = p;
  auto s = make_adam<double>({&p});
  adam_step(s, {&p}, {Matrix<double>::Zero(2, 2)}, 0.1);
  EXPECT_EQ(p, before);
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Matrix<double> p = Matrix<double>::Constant(1, 1, 0.5);
  auto s = make_adam<double>({&p});
  adam_step(s, {&p}, {Matrix<double>::Constant(1, 1, 1.0)}, 1e-3);
  EXPECT_NEAR(p(0, 0) - 0.5, -1e-3 / (1 + 1e-8), 1e-15);
}

TEST(Adam, TenStepTraceMatchesManualRecurrence) {
  const double g[10] = {0.3, -1.2, 2.5, 0.0, 0.7, -0.4, 1.1, -2.2, 0.05, 0.9};
  const double lr = 0.01;
  Matrix<double> p = Matrix<double>::Constant(1, 1, 1.0);
  auto s = make_adam<double>({&p});
  double x = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 10; ++t) {
    adam_step(s, {&p}, {Matrix<double>::Constant(1, 1, g[t - 1])}, lr);
    m = 0.9 * m + 0.1 * g[t - 1];
    v = 0.999 * v + 0.001 * g[t - 1] * g[t - 1];
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    x -= lr * mh / (std::sqrt(vh) + 1e-8);
    EXPECT_NEAR(p(0, 0), x, 1e-12) << "step " << t;
  }
}

TEST(Adam, ShapeMismatchThrows) {
  Matrix<double> p = Matrix<double>::Zero(2, 3);
  auto s = make_adam<double>({&p});
  EXPECT_THROW(adam_step(s, {&p}, {Matrix<double>::Zero(3, 2)}, 0.1), DimensionError);
  EXPECT_THROW(adam_step(s, {&p}, {}, 0.1), DimensionError);
}

TEST(Checkpoint, ArrayContainerStartsWithMagicAndRoundTrips) {
  const auto path = temp_path("arrays.bin");
  ArrayMap a;
  Matrix<float> f(2, 3);
  f << 1, 2, 3, 4, 5, 6.5f;
  a.emplace_back("f", detail::pack(f));
  a.emplace_back("n", detail::pack_i64(-42));
  write_arrays(path, a);
  const auto bytes = file_bytes(path);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "FFCKPT01");
  const auto b = read_arrays(path);
  Matrix<float> g(2, 3);
  detail::unpack(detail::find_array(b, "f"), "f", g);
  EXPECT_EQ(f, g);
  EXPECT_EQ(detail::unpack_i64(detail::find_array(b, "n"), "n"), -42);
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptOrMissingFilesAreReported) {
  EXPECT_THROW(read_arrays(temp_path("missing.bin")), Error);
  const auto path = temp_path("corrupt.bin");
  std::ofstream(path, std::ios::binary) << "FFCKPT02garbage";
  EXPECT_THROW(read_arrays(path), FormatError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, SaveLoadIsBitExact) {
  auto c = tiny_config();
  c.iterations = 3;
  const auto data = load_dataset(c);
  auto s = init_state<double>(c);
  train(s, data);
  const auto p1 = temp_path("a.ckpt"), p2 = temp_path("b.ckpt");
  save_checkpoint(p1, s);
  auto r = load_checkpoint<double>(p1);
  EXPECT_TRUE(same_parameters(s, r));
  save_checkpoint(p2, r);
  EXPECT_EQ(file_bytes(p1), file_bytes(p2));
  EXPECT_EQ(to_text(checkpoint_config(p1)), to_text(c));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST(Checkpoint, WrongPrecisionIsRejected) {
  auto c = tiny_config();
  const auto path = temp_path("prec.ckpt");
  auto s = init_state<double>(c);
  save_checkpoint(path, s);
  EXPECT_THROW(load_checkpoint<float>(path), FormatError);
  std::filesystem::remove(path);
}

TEST(Train, ZeroIterationsEqualsInitialisation) {
  auto c = tiny_config();
  c.iterations = 0;
  c.out = temp_path("zero.ckpt");
  const auto data = load_dataset(c);
  auto s = init_state<double>(c);
  train(s, data);
  auto fresh = init_state<double>(c);
  auto loaded = load_checkpoint<double>(c.out);
  EXPECT_TRUE(same_parameters(fresh, loaded));
  std::filesystem::remove(c.out);
}

TEST(Train, IdenticalConfigsGiveIdenticalCheckpoints) {
  for (const char* mode : {"supervised", "weak"}) {
    auto c = tiny_config();
    c.mode = mode;
    const auto data = load_dataset(c);
    std::vector<std::vector<std::uint8_t>> bytes;
    for (int run = 0; run < 2; ++run) {
      c.out = temp_path("det.ckpt");
      auto s = init_state<double>(c);
      train(s, data);
      bytes.push_back(file_bytes(c.out));
      std::filesystem::remove(c.out);
    }
    EXPECT_EQ(bytes[0], bytes[1]) << mode;
  }
}

TEST(Train, ResumingMatchesAnUninterruptedRun) {
  auto c = tiny_config();
  const auto data = load_dataset(c);
  auto full = init_state<double>(c);
  train(full, data);

  auto half_cfg = c;
  half_cfg.iterations = 3;
  auto half = init_state<double>(half_cfg);
  train(half, data);
  const auto path = temp_path("resume.ckpt");
  save_checkpoint(path, half);
  auto resumed = load_checkpoint<double>(path);
  resumed.config.iterations = c.iterations;
  train(resumed, data);
  EXPECT_TRUE(same_parameters(full, resumed));
  std::filesystem::remove(path);
}

TEST(Train, LoggedLossIsTheSumOfItsComponents) {
  for (const char* mode : {"supervised", "weak"}) {
    auto c = tiny_config();
    c.mode = mode;
    c.lambda_hj = 0.7;
    const auto data = load_dataset(c);
    auto s = init_state<double>(c);
    for (const auto& r : train(s, data)) {
      if (r.skipped) continue;
      const double sum = r.recon + r.kl0 + r.kl_steps + c.lambda_hj * r.hj + r.cat_kl;
      EXPECT_NEAR(r.loss, sum, 1e-10 * std::max(1.0, std::abs(sum)));
      if (!c.weak()) {
        EXPECT_EQ(r.cat_kl, 0.0);
      }
    }
  }
}

TEST(Train, MetricsCsvHasHeaderAndLoggedRows) {
  auto c = tiny_config();
  c.iterations = 5;
  c.log_every = 2;
  c.metrics = temp_path("metrics.csv");
  const auto data = load_dataset(c);
  auto s = init_state<double>(c);
  const auto rows = train(s, data);
  std::ifstream in(c.metrics);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kMetricsHeader);
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  std::vector<std::string> expected;
  for (const auto& r : rows)
    if (!r.skipped && (r.iteration % 2 == 0 || r.iteration == 4)) expected.push_back(to_csv(r));
  EXPECT_EQ(lines, expected);
  std::filesystem::remove(c.metrics);
}

TEST(Train, NonFiniteLossAbortsWithIteration) {
  auto c = tiny_config();
  const auto data = load_dataset(c);
  auto s = init_state<double>(c);
  s.iteration = 2;
  s.model.decoder.biases.back()(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    train_step(s, data);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("iteration 2"), std::string::npos) << e.what();
  }
}

TEST(Train, SmokeRunImprovesTheMovingAverage) {
  auto c = preset_config("toy");
  c.iterations = 200;
  c.n_train = 200;
  c.n_test = 10;
  const auto data = load_dataset(c);
  auto s = init_state<float>(c);
  const auto rows = train(s, data);
  const auto ma = moving_average(rows, 20);
  ASSERT_GE(ma.size(), 40u);
  EXPECT_LT(ma.back(), ma[19]);
}

TEST(Train, KlWarmupRampsLinearly) {
  auto c = tiny_config();
  EXPECT_EQ(kl_weight(c, 0), 1.0);
  c.kl_warmup = 4;
  EXPECT_EQ(kl_weight(c, 0), 0.0);
  EXPECT_EQ(kl_weight(c, 2), 0.5);
  EXPECT_EQ(kl_weight(c, 9), 1.0);
}

TEST(Train, TauFollowsTheAnnealingSchedule) {
  auto c = tiny_config();
  EXPECT_EQ(tau_at(c, 0), 1.0);
  EXPECT_NEAR(tau_at(c, 1000000), c.tau_floor, 1e-12);
}

TEST(Data, ToyTestSetCyclesLabels) {
  auto c = tiny_config();
  const auto data = load_dataset(c);
  EXPECT_EQ(data.train.size(), 16u);
  EXPECT_EQ(data.test.size(), 6u);
  const auto t = make_test_set(c, data);
  ASSERT_EQ(t.sequences.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(t.labels[i], static_cast<int>(i % 3));
    EXPECT_EQ(t.sequences[i].cols(), c.steps + 1);
  }
}

TEST(Data, CacheDatasetNeedsAnExistingFile) {
  auto c = tiny_config();
  c.dataset = "cache";
  c.data_path = temp_path("none.ffds");
  EXPECT_THROW(load_dataset(c), Error);
}
