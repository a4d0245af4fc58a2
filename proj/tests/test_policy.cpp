#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "racemop/network.hpp"
#include "racemop/observation.hpp"
#include "racemop/rng.hpp"

namespace racemop {
namespace {

template <class T>
void random_inputs(const NetworkSpec& spec, int batch, Rng& rng, std::vector<T>& lidar, std::vector<T>& proprio) {
  lidar.resize(static_cast<std::size_t>(spec.in_length) * spec.in_channels * batch);
  proprio.resize(static_cast<std::size_t>(spec.proprio) * batch);
  for (auto& x : lidar) x = static_cast<T>(uniform(rng, -2, 2));
  for (auto& x : proprio) x = static_cast<T>(uniform(rng, -2, 2));
}

TEST(NetworkSpec, ParameterCountIsExact) {
  const NetworkSpec spec;
  EXPECT_EQ(spec.parameter_count(), 828293u);
  EXPECT_EQ(spec.conv_parameter_count(), 765568u);
  EXPECT_EQ(spec.head_parameter_count(), 62723u);
  EXPECT_EQ(ResidualNetwork<float>(spec).size(), 828293u);
}

TEST(NetworkSpec, ConvLengthsAndCountFromFirstPrinciples) {
  const NetworkSpec spec;
  EXPECT_EQ(spec.conv_lengths(), (std::vector<int>{1080, 269, 134, 66, 32, 15}));
  // Independent count: weights + biases of every layer.
  std::size_t n = 0;
  int channels = spec.in_channels, length = spec.in_length;
  for (const auto& c : spec.conv) {
    n += static_cast<std::size_t>(c.filters) * channels * c.kernel + c.filters;
    length = (length - c.kernel) / c.stride + 1;
    channels = c.filters;
  }
  n += static_cast<std::size_t>(channels) * length * spec.projection + spec.projection;
  const int joint = spec.projection + spec.proprio;
  EXPECT_EQ(joint, 120);
  n += 2 * (static_cast<std::size_t>(joint) * spec.hidden + spec.hidden);
  n += static_cast<std::size_t>(spec.hidden) * spec.action_dim + spec.action_dim;
  n += static_cast<std::size_t>(spec.hidden) + 1;
  n += spec.action_dim;
  EXPECT_EQ(n, 828293u);
}

TEST(NetworkSpec, JsonRoundTripAndValidation) {
  NetworkSpec spec;
  EXPECT_EQ(NetworkSpec::from_json(spec.to_json()), spec);
  spec.conv.push_back({256, 20, 2});
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(ResidualNetwork, ZeroWeightsGiveZeroResidual) {
  const NetworkSpec spec;
  ResidualNetwork<float> net(spec);
  net.params().setZero();
  Rng rng(1);
  std::vector<float> lidar, proprio;
  random_inputs(spec, 3, rng, lidar, proprio);
  ResidualNetwork<float>::Output out;
  net.forward(lidar.data(), proprio.data(), 3, out);
  EXPECT_TRUE((out.mu.array() == 0.0f).all());
  EXPECT_TRUE((out.value.array() == 0.0f).all());
}

TEST(ResidualNetwork, InitializationTracksBase) {
  const NetworkSpec spec;
  ResidualNetwork<float> net(spec);
  Rng rng(2);
  net.initialize(rng, 0.01, -0.7);
  EXPECT_FLOAT_EQ(net.log_sigma(0), -0.7f);
  EXPECT_FLOAT_EQ(net.log_sigma(1), -0.7f);
  std::vector<float> lidar, proprio;
  random_inputs(spec, 4, rng, lidar, proprio);
  ResidualNetwork<float>::Output out;
  net.forward(lidar.data(), proprio.data(), 4, out);
  EXPECT_LT(out.mu.cwiseAbs().maxCoeff(), 0.2f);
}

TEST(ResidualNetwork, DeterministicBatchInvariantAndBounded) {
  const NetworkSpec spec;
  ResidualNetwork<float> net(spec);
  Rng rng(3);
  net.initialize(rng, 1.0, -0.7);  // large policy gain to exercise the tanh
  const int batch = 5;
  std::vector<float> lidar, proprio;
  random_inputs(spec, batch, rng, lidar, proprio);
  ResidualNetwork<float>::Output all, again, one;
  net.forward(lidar.data(), proprio.data(), batch, all);
  net.forward(lidar.data(), proprio.data(), batch, again);
  EXPECT_TRUE(all.mu == again.mu && all.value == again.value);
  const std::size_t lsz = static_cast<std::size_t>(spec.in_length) * spec.in_channels;
  for (int b = 0; b < batch; ++b) {
    net.forward(lidar.data() + b * lsz, proprio.data() + b * spec.proprio, 1, one);
    for (int k = 0; k < 2; ++k) {
      EXPECT_NEAR(one.mu(k, 0), all.mu(k, b), 1e-6);
      EXPECT_GT(all.mu(k, b), -1.0f);
      EXPECT_LT(all.mu(k, b), 1.0f);
    }
    EXPECT_NEAR(one.value(0, 0), all.value(0, b), 1e-6 * std::max(1.0f, std::abs(all.value(0, b))));
  }
}

TEST(ResidualNetwork, BackwardMatchesFiniteDifferences) {
  const NetworkSpec spec;
  ResidualNetwork<double> net(spec);
  Rng rng(4);
  net.initialize(rng, 1.0, -0.7);
  const int batch = 2;
  std::vector<double> lidar, proprio;
  random_inputs(spec, batch, rng, lidar, proprio);
  ResidualNetwork<double>::Mat c_mu(2, batch), c_v(1, batch);
  for (int b = 0; b < batch; ++b) {
    c_mu(0, b) = uniform(rng, -1, 1);
    c_mu(1, b) = uniform(rng, -1, 1);
    c_v(0, b) = uniform(rng, -1, 1);
  }
  ResidualNetwork<double>::Output out;
  auto loss = [&]() {
    net.forward(lidar.data(), proprio.data(), batch, out);
    return (c_mu.array() * out.mu.array()).sum() + (c_v.array() * out.value.array()).sum();
  };
  net.zero_grad();
  net.forward(lidar.data(), proprio.data(), batch, out, true);
  net.backward(c_mu, c_v);
  const auto grads = net.grads();

  // Probe every layer block, not just the huge projection.
  const std::size_t n = net.log_sigma_offset();
  std::set<std::size_t> probes;
  while (probes.size() < 800) probes.insert(uniform_index(rng, n));
  for (std::size_t i = n - 3000; probes.size() < 1100; ++i) probes.insert(i);
  int checked = 0;
  for (std::size_t i : probes) {
    const double keep = net.params()[i];
    const double h = 1e-6;
    net.params()[i] = keep + h;
    const double up = loss();
    net.params()[i] = keep - h;
    const double down = loss();
    net.params()[i] = keep;
    const double fd = (up - down) / (2 * h);
    EXPECT_LE(std::abs(grads[i] - fd), 1e-4 * std::max({std::abs(fd), std::abs(grads[i]), 1e-6})) << "param " << i;
    ++checked;
  }
  EXPECT_GE(checked, 1000);
  EXPECT_EQ(grads[n], 0.0);  // log sigma is the caller's
}

TEST(ResidualNetwork, ShapeMismatchRejected) {
  NetworkSpec bad;
  bad.in_length = 10;
  EXPECT_THROW(ResidualNetwork<float>{bad}, std::invalid_argument);
}

TEST(StackIndices, PaperOffsets) {
  EXPECT_EQ(stack_indices(100, 6, 2), (std::vector<long>{82, 85, 88, 91, 94, 97, 100}));
  EXPECT_EQ(stack_indices(100, 0, 2), (std::vector<long>{100}));
  EXPECT_EQ(stack_indices(2, 6, 2), (std::vector<long>{0, 0, 0, 0, 0, 0, 2}));
  EXPECT_EQ(stack_indices(45, 6, 2, 40), (std::vector<long>{40, 40, 40, 40, 40, 42, 45}));
}

TEST(FrameHistory, MatchesStackIndices) {
  const int frame = 3;
  FrameHistory h(frame, 6, 2);
  EXPECT_EQ(h.span(), 18);
  std::vector<float> f(frame);
  auto fill = [&](int t) {
    for (int k = 0; k < frame; ++k) f[k] = static_cast<float>(t * 10 + k);
  };
  fill(0);
  h.reset(f.data());
  for (int t = 0; t <= 60; ++t) {
    if (t > 0) {
      fill(t);
      h.push(f.data());
    }
    const auto frames = h.stacked();
    const auto idx = stack_indices(t, 6, 2);
    ASSERT_EQ(frames.size(), idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      ASSERT_EQ(frames[i][0], static_cast<float>(idx[i] * 10)) << "t=" << t;
      ASSERT_EQ(frames[i][2], static_cast<float>(idx[i] * 10 + 2));
    }
  }
}

TEST(FrameHistory, ExportImportRoundTrip) {
  FrameHistory a(2, 6, 2), b(2, 6, 2);
  float f[2] = {0, 0};
  a.reset(f);
  for (int t = 1; t < 25; ++t) {
    f[0] = static_cast<float>(t);
    a.push(f);
  }
  b.import_frames(a.to_json_meta(), a.export_frames());
  const auto sa = a.stacked(), sb = b.stacked();
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_EQ(sa[i][0], sb[i][0]);
}

TEST(StackFrames, ChannelLayout) {
  const int beams = 4, proprio = 8;
  std::vector<std::vector<float>> frames(3, std::vector<float>(beams + proprio));
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < beams + proprio; ++k) frames[c][k] = static_cast<float>(100 * c + k);
  std::vector<const float*> ptrs;
  for (const auto& fr : frames) ptrs.push_back(fr.data());
  std::vector<float> lidar(beams * 3), prop(proprio * 3);
  stack_frames(ptrs, beams, proprio, lidar.data(), prop.data());
  for (int pos = 0; pos < beams; ++pos)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(lidar[pos * 3 + c], 100.0f * c + pos);
  for (int c = 0; c < 3; ++c)
    for (int k = 0; k < proprio; ++k) EXPECT_EQ(prop[c * proprio + k], 100.0f * c + beams + k);
}

TEST(RunningMeanStd, FirstObservationNormalizesToZero) {
  RunningMeanStd s(3);
  const double x[3] = {4.0, -2.0, 1e3};
  s.update(x);
  float out[3];
  s.normalize(x, out);
  for (float v : out) EXPECT_EQ(v, 0.0f);
}

TEST(RunningMeanStd, ConstantStreamAndClip) {
  RunningMeanStd s(1);
  const double c = 7.5;
  for (int i = 0; i < 100; ++i) s.update(&c);
  float out;
  s.normalize(&c, &out);
  EXPECT_EQ(out, 0.0f);
  const double far = 1e9;
  s.normalize(&far, &out);
  EXPECT_EQ(out, 10.0f);
}

TEST(RunningMeanStd, GaussianStreamMatchesPopulation) {
  RunningMeanStd s(1);
  Rng rng(5);
  const int n = 10000;
  const double mu = 3.0, sigma = 2.0;
  for (int i = 0; i < n; ++i) {
    const double x = mu + sigma * standard_normal(rng);
    s.update(&x);
  }
  EXPECT_EQ(s.count(), n);
  EXPECT_NEAR(s.mean()[0], mu, 3 * sigma / std::sqrt(n));
  EXPECT_NEAR(s.variance(0), sigma * sigma, 3 * sigma * sigma * std::sqrt(2.0 / n));
}

TEST(RunningMeanStd, JsonRoundTrip) {
  RunningMeanStd s(2);
  const double a[2] = {1, 2}, b[2] = {3, -5};
  s.update(a);
  s.update(b);
  const RunningMeanStd t = RunningMeanStd::from_json(s.to_json());
  EXPECT_EQ(t.mean(), s.mean());
  EXPECT_EQ(t.variance(), s.variance());
  EXPECT_EQ(t.count(), s.count());
}

}  // namespace
}  // namespace racemop
