#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "oracle_utils.hpp"
#include "tabb/checkpoint.hpp"
#include "tabb/numerics.hpp"

using namespace tabb;
using testutil::catch_message;
using testutil::contains;

namespace {

ParamVector params_from(const MlpSpec& spec, std::vector<double> values) {
  ParamVector p = zero_params(spec);
  EXPECT_EQ(p.values.size(), values.size());
  p.values = std::move(values);
  return p;
}

}  // namespace

TEST(MlpForward, ZeroWeightsGiveZeroOutput) {
  MlpSpec spec{3, {4}, 2, Activation::relu};
  ParamVector p = zero_params(spec);
  std::vector<double> out = mlp_apply(spec, p, std::vector<double>{0.3, -1.2, 5.0});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0], 0.0);
  EXPECT_EQ(out[1], 0.0);
}

TEST(MlpForward, HandComputedTwoLayerRelu) {
  // 1 -> (2 hidden, relu) -> 1, all weights 1, all biases 0.
  MlpSpec spec{1, {2}, 1, Activation::relu};
  // layer 0: w(2x1) then b(2); layer 1: w(1x2) then b(1)
  ParamVector p = params_from(spec, {1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0});
  EXPECT_DOUBLE_EQ(mlp_apply(spec, p, std::vector<double>{1.0})[0], 2.0);
  EXPECT_DOUBLE_EQ(mlp_apply(spec, p, std::vector<double>{-1.0})[0], 0.0);
}

TEST(MlpForward, TanhHiddenMatchesClosedForm) {
  MlpSpec spec{1, {1}, 1, Activation::tanh};
  ParamVector p = params_from(spec, {0.7, 0.1, 2.0, -0.3});
  double expect = 2.0 * std::tanh(0.7 * 0.5 + 0.1) - 0.3;
  EXPECT_NEAR(mlp_apply(spec, p, std::vector<double>{0.5})[0], expect, 1e-15);
}

TEST(MlpForward, RepeatedCallsAreBitIdentical) {
  Rng rng(7);
  MlpSpec spec{5, {8, 8}, 3, Activation::tanh};
  ParamVector p = init_params(spec, rng);
  std::vector<double> in{0.1, -0.2, 0.3, -0.4, 0.5};
  std::vector<double> a = mlp_apply(spec, p, in);
  std::vector<double> b = mlp_apply(spec, p, in);
  EXPECT_EQ(a, b);
}

TEST(MlpForward, InputLengthErrorNamesLayer) {
  MlpSpec spec{3, {4}, 2, Activation::relu};
  ParamVector p = zero_params(spec);
  std::string msg =
      catch_message([&] { mlp_apply(spec, p, std::vector<double>{1.0, 2.0}); });
  EXPECT_TRUE(contains(msg, "layer 0")) << msg;
}

TEST(MlpForward, ManifestMismatchNamesLayer) {
  MlpSpec spec{3, {4}, 2, Activation::relu};
  MlpSpec other{3, {5}, 2, Activation::relu};
  ParamVector p = zero_params(other);
  std::string msg = catch_message([&] { mlp_apply(spec, p, std::vector<double>{1, 2, 3}); });
  EXPECT_TRUE(contains(msg, "layer")) << msg;
}

TEST(MlpForward, NonFiniteIntermediateNamesLayer) {
  MlpSpec spec{1, {1}, 1, Activation::relu};
  ParamVector p = params_from(spec, {1e308, 0.0, 1e308, 0.0});
  std::string msg = catch_message([&] { mlp_apply(spec, p, std::vector<double>{1e10}); });
  EXPECT_TRUE(contains(msg, "non-finite")) << msg;
  EXPECT_TRUE(contains(msg, "layer")) << msg;
}

TEST(ParamVector, ManifestAccountsForEveryValue) {
  MlpSpec spec{3, {5, 7}, 2, Activation::relu};
  ParamVector p = zero_params(spec);
  size_t total = 0;
  for (const auto& s : p.manifest) total += s.total();
  EXPECT_EQ(total, p.values.size());
  EXPECT_EQ(total, param_count(spec));
  // layer 1 offset skips exactly layer 0's block
  EXPECT_EQ(p.layer_offset(1), p.manifest[0].total());
}

TEST(Gradients, ConstantLossHasZeroGradient) {
  Rng rng(11);
  MlpSpec spec{4, {6}, 3, Activation::tanh};
  ParamVector p = init_params(spec, rng);
  ParamVector g = zero_params(spec);
  LossHead head = [](std::span<const double>, std::span<double> dout) {
    for (double& d : dout) d = 0.0;
    return 42.0;
  };
  double loss = grad(spec, p, std::vector<double>{0.1, 0.2, 0.3, 0.4}, head, g);
  EXPECT_DOUBLE_EQ(loss, 42.0);
  for (double v : g.values) EXPECT_EQ(v, 0.0);
}

TEST(Gradients, LinearNetClosedFormChainRule) {
  // Single linear map out = w*x + b with w=2, b=0, x=3, loss = out^2.
  // d(loss)/dw = 2*out*x = 36; d(loss)/dx = 2*out*w = 24.
  MlpSpec spec{1, {}, 1, Activation::relu};
  ParamVector p = params_from(spec, {2.0, 0.0});
  std::vector<double> input{3.0};

  MlpWorkspace ws;
  mlp_forward(spec, p, input, ws);
  ParamVector g = zero_params(spec);
  std::vector<double> dinput;
  std::vector<double> dout{2.0 * ws.act.back()[0]};
  mlp_backward(spec, p, ws, dout, g, &dinput);
  EXPECT_DOUBLE_EQ(g.values[0], 36.0);  // weight
  EXPECT_DOUBLE_EQ(g.values[1], 12.0);  // bias: 2*out
  ASSERT_EQ(dinput.size(), 1u);
  EXPECT_DOUBLE_EQ(dinput[0], 24.0);

  testutil::LossValue sq = [](std::span<const double> out) { return out[0] * out[0]; };
  std::vector<double> fdp = testutil::fd_param_grad(spec, p, input, sq);
  EXPECT_NEAR(fdp[0], 36.0, 1e-6);
  std::vector<double> fdi = testutil::fd_input_grad(spec, p, input, sq);
  EXPECT_NEAR(fdi[0], 24.0, 1e-6);
}

TEST(Gradients, RandomNetMatchesFiniteDifferences) {
  Rng rng(23);
  MlpSpec spec{4, {8}, 2, Activation::tanh};
  ParamVector p = init_params(spec, rng);
  std::vector<double> input{0.3, -0.7, 0.2, 0.9};
  std::vector<double> target{0.5, -0.5};
  LossHead head = [&](std::span<const double> out, std::span<double> dout) {
    double loss = 0.0;
    for (size_t k = 0; k < out.size(); ++k) {
      double e = out[k] - target[k];
      loss += e * e;
      dout[k] = 2.0 * e;
    }
    return loss;
  };
  ParamVector g = zero_params(spec);
  grad(spec, p, input, head, g);
  testutil::LossValue value = [&](std::span<const double> out) {
    double loss = 0.0;
    for (size_t k = 0; k < out.size(); ++k) {
      double e = out[k] - target[k];
      loss += e * e;
    }
    return loss;
  };
  std::vector<double> fd = testutil::fd_param_grad(spec, p, input, value);
  ASSERT_EQ(fd.size(), g.values.size());
  for (size_t i = 0; i < fd.size(); ++i) EXPECT_NEAR(g.values[i], fd[i], 1e-4);
}

TEST(Gradients, HundredRandomConfigsStayWithinTolerance) {
  testutil::GradCheckResult res = testutil::grad_check_many(100, 20240817ull);
  EXPECT_EQ(res.configs, 100);
  EXPECT_LE(res.max_abs_err, 1e-4) << "worst gradient error " << res.max_abs_err;
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  MlpSpec spec{2, {3}, 1, Activation::relu};
  Rng rng(3);
  ParamVector p = init_params(spec, rng);
  std::vector<double> before = p.values;
  AdamState st = make_adam(p.size(), 0.1);
  adam_step(st, p, zero_params(spec));
  EXPECT_EQ(p.values, before);
}

TEST(Adam, FirstStepMovesByRoughlyLearningRate) {
  MlpSpec spec{1, {}, 1, Activation::relu};
  ParamVector p = params_from(spec, {1.0, 1.0});
  ParamVector g = params_from(spec, {1.0, 1.0});
  AdamState st = make_adam(p.size(), 0.1);
  adam_step(st, p, g);
  // bias-corrected first step: lr * g / (|g| + eps)
  EXPECT_NEAR(p.values[0], 1.0 - 0.1, 1e-8);
  EXPECT_NEAR(p.values[1], 1.0 - 0.1, 1e-8);
}

TEST(Adam, IdenticalSequencesAreBitIdentical) {
  MlpSpec spec{3, {4}, 2, Activation::tanh};
  Rng rng(99);
  ParamVector p1 = init_params(spec, rng);
  ParamVector p2 = p1;
  AdamState s1 = make_adam(p1.size(), 3e-4);
  AdamState s2 = make_adam(p2.size(), 3e-4);
  Rng gr(123);
  for (int step = 0; step < 25; ++step) {
    ParamVector g = zero_params(spec);
    for (double& v : g.values) v = gr.uniform(-1.0, 1.0);
    adam_step(s1, p1, g);
    adam_step(s2, p2, g);
  }
  EXPECT_EQ(p1.values, p2.values);
}

TEST(Adam, NonFiniteGradientRejectedBeforeMutation) {
  MlpSpec spec{1, {}, 1, Activation::relu};
  ParamVector p = params_from(spec, {0.5, -0.5});
  AdamState st = make_adam(p.size(), 0.1);
  ParamVector g = params_from(spec, {1.0, std::nan("")});
  std::vector<double> before = p.values;
  EXPECT_THROW(adam_step(st, p, g), std::invalid_argument);
  EXPECT_EQ(p.values, before);
  EXPECT_EQ(st.step, 0);
  EXPECT_EQ(st.m[0], 0.0);
}

TEST(Adam, LengthMismatchRejected) {
  MlpSpec spec{2, {}, 1, Activation::relu};
  ParamVector p = zero_params(spec);
  AdamState st = make_adam(p.size(), 0.1);
  ParamVector g = zero_params(MlpSpec{3, {}, 1, Activation::relu});
  EXPECT_THROW(adam_step(st, p, g), std::invalid_argument);
}

TEST(Huber, ClosedFormValues) {
  EXPECT_DOUBLE_EQ(huber(0.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(huber(0.5, 1.0), 0.125);
  EXPECT_DOUBLE_EQ(huber(3.0, 1.0), 2.5);
  EXPECT_DOUBLE_EQ(huber(-3.0, 1.0), 2.5);  // even function
  EXPECT_DOUBLE_EQ(huber(0.25, 2.0), 0.5 * 0.25 * 0.25);
  EXPECT_DOUBLE_EQ(huber(5.0, 2.0), 2.0 * (5.0 - 1.0));
}

TEST(Huber, ContinuousAtTheKnee) {
  for (double delta : {0.5, 1.0, 2.0}) {
    double inside = huber(delta, delta);
    double outside = huber(delta + 1e-12, delta);
    EXPECT_NEAR(inside, outside, 1e-11);
    EXPECT_NEAR(inside, 0.5 * delta * delta, 1e-15);
  }
}

TEST(Huber, GradientBranches) {
  EXPECT_DOUBLE_EQ(huber_grad(0.5, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(huber_grad(-0.5, 1.0), -0.5);
  EXPECT_DOUBLE_EQ(huber_grad(3.0, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(huber_grad(-3.0, 1.0), -1.0);
  // gradient matches central differences away from the knee
  for (double u : {-2.7, -0.3, 0.0, 0.4, 1.9}) {
    double fd = (huber(u + 1e-7, 1.0) - huber(u - 1e-7, 1.0)) / 2e-7;
    EXPECT_NEAR(huber_grad(u, 1.0), fd, 1e-6);
  }
}

TEST(Huber, NonPositiveDeltaRejected) {
  EXPECT_THROW(huber(1.0, 0.0), std::invalid_argument);
  EXPECT_THROW(huber(1.0, -1.0), std::invalid_argument);
  EXPECT_THROW(huber_grad(1.0, 0.0), std::invalid_argument);
}

TEST(Expectile, AsymmetricWeighting) {
  EXPECT_DOUBLE_EQ(expectile_loss(1.0, 0.7), 0.7);
  EXPECT_DOUBLE_EQ(expectile_loss(-1.0, 0.7), 0.3);
  EXPECT_DOUBLE_EQ(expectile_loss(2.0, 0.9), 0.9 * 4.0);
  EXPECT_DOUBLE_EQ(expectile_loss(-2.0, 0.9), 0.1 * 4.0);
}

TEST(Expectile, HalfTauIsExactlyHalfSquared) {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    double u = rng.uniform(-10.0, 10.0);
    EXPECT_EQ(expectile_loss(u, 0.5), 0.5 * u * u);
  }
}

TEST(Expectile, GradientMatchesFiniteDifferences) {
  for (double tau : {0.3, 0.5, 0.7, 0.9}) {
    for (double u : {-1.5, -0.2, 0.2, 1.5}) {
      double fd = (expectile_loss(u + 1e-7, tau) - expectile_loss(u - 1e-7, tau)) / 2e-7;
      EXPECT_NEAR(expectile_grad(u, tau), fd, 1e-6);
    }
  }
}

TEST(Expectile, TauOutsideOpenIntervalRejected) {
  EXPECT_THROW(expectile_loss(1.0, 0.0), std::invalid_argument);
  EXPECT_THROW(expectile_loss(1.0, 1.0), std::invalid_argument);
  EXPECT_THROW(expectile_grad(1.0, -0.1), std::invalid_argument);
  EXPECT_THROW(expectile_grad(1.0, 1.1), std::invalid_argument);
}

TEST(Module, FrozenModuleRejectsGradients) {
  Rng rng(1);
  MlpModule m = make_module({2, {4}, 1, Activation::relu}, 1e-3, rng);
  m.frozen = true;
  ParamVector g = zero_params(m.spec);
  EXPECT_THROW(m.apply_grad(g), std::logic_error);
}

TEST(Module, TrainableNetworksRequireHiddenLayers) {
  Rng rng(1);
  EXPECT_THROW(make_module({2, {}, 1, Activation::relu}, 1e-3, rng), std::invalid_argument);
  EXPECT_NO_THROW(make_module({2, {}, 1, Activation::relu}, 1e-3, rng, false));
}

TEST(Module, GlorotInitZeroesBiases) {
  Rng rng(42);
  MlpSpec spec{3, {4}, 2, Activation::relu};
  ParamVector p = init_params(spec, rng);
  for (size_t l = 0; l < p.manifest.size(); ++l) {
    const LayerShape& s = p.manifest[l];
    size_t off = p.layer_offset(static_cast<int>(l));
    double bound = std::sqrt(6.0 / (s.rows + s.cols));
    for (size_t i = 0; i < s.weight_count(); ++i) {
      EXPECT_LE(std::abs(p.values[off + i]), bound);
      EXPECT_NE(p.values[off + i], 0.0);
    }
    for (int b = 0; b < s.bias; ++b) EXPECT_EQ(p.values[off + s.weight_count() + b], 0.0);
  }
}

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("tabb_num_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

Checkpoint sample_checkpoint() {
  Rng rng(77);
  Checkpoint ck;
  CheckpointComponent a;
  a.name = "net";
  a.spec = {3, {5}, 2, Activation::tanh};
  a.params = init_params(a.spec, rng);
  a.params.values[0] = 1e300;  // extremes must survive the round trip
  a.params.values[1] = -0.0;
  a.params.values[2] = 5e-324;
  ck.components.push_back(a);
  CheckpointComponent b;
  b.name = "head";
  b.spec = {2, {}, 1, Activation::relu};
  b.params = init_params(b.spec, rng);
  ck.components.push_back(b);
  ck.meta = {{"kind", "test"}, {"seed", 7}};
  return ck;
}

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(Checkpoint, RoundTripIsLossless) {
  TempDir dir;
  Checkpoint ck = sample_checkpoint();
  std::string path = dir.file("model.ck");
  save_checkpoint(ck, path);
  Checkpoint back = load_checkpoint(path);
  ASSERT_EQ(back.components.size(), ck.components.size());
  for (size_t i = 0; i < ck.components.size(); ++i) {
    EXPECT_EQ(back.components[i].name, ck.components[i].name);
    EXPECT_TRUE(back.components[i].spec == ck.components[i].spec);
    EXPECT_EQ(back.components[i].params.values, ck.components[i].params.values);
  }
  EXPECT_EQ(back.meta.at("seed").get<int>(), 7);
  // a second save of the loaded checkpoint is byte-identical
  std::string again = dir.file("model2.ck");
  save_checkpoint(back, again);
  EXPECT_EQ(slurp(path), slurp(again));
  // the sidecar manifest exists and names the components
  std::vector<char> man = slurp(path + ".manifest");
  std::string man_text(man.begin(), man.end());
  EXPECT_TRUE(contains(man_text, "net"));
  EXPECT_TRUE(contains(man_text, "crc32"));
}

TEST(Checkpoint, CorruptedPayloadFailsChecksum) {
  TempDir dir;
  std::string path = dir.file("model.ck");
  save_checkpoint(sample_checkpoint(), path);
  std::vector<char> bytes = slurp(path);
  bytes[bytes.size() / 2] ^= 0x40;
  spit(path, bytes);
  std::string msg = catch_message([&] { load_checkpoint(path); });
  EXPECT_TRUE(contains(msg, "checksum") || contains(msg, "crc")) << msg;
}

TEST(Checkpoint, TruncationRejected) {
  TempDir dir;
  std::string path = dir.file("model.ck");
  save_checkpoint(sample_checkpoint(), path);
  std::vector<char> bytes = slurp(path);
  bytes.resize(bytes.size() / 2);
  spit(path, bytes);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(Checkpoint, BadMagicRejected) {
  TempDir dir;
  std::string path = dir.file("model.ck");
  save_checkpoint(sample_checkpoint(), path);
  std::vector<char> bytes = slurp(path);
  bytes[0] = 'X';
  spit(path, bytes);
  std::string msg = catch_message([&] { load_checkpoint(path); });
  EXPECT_TRUE(contains(msg, "magic")) << msg;
}

TEST(Checkpoint, TrailingBytesRejected) {
  TempDir dir;
  std::string path = dir.file("model.ck");
  save_checkpoint(sample_checkpoint(), path);
  std::vector<char> bytes = slurp(path);
  // splice junk between payload and crc, then fix up the crc so only the
  // length check can object
  std::vector<char> junk{bytes.begin(), bytes.end() - 4};
  junk.insert(junk.end(), {0, 0, 0, 0, 0, 0, 0, 0});
  std::uint32_t crc = crc32(junk.data(), junk.size());
  std::string tail;
  put_u32_le(tail, crc);
  junk.insert(junk.end(), tail.begin(), tail.end());
  spit(path, junk);
  EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(Checkpoint, MissingFileRejected) {
  EXPECT_THROW(load_checkpoint("/nonexistent/nowhere.ck"), std::runtime_error);
}
