// Copyright 2026 The natpatch Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "natpatch/diffusion.hpp"

#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

namespace natpatch::diffusion {
namespace {

DiffusionSchedule default_schedule() {
  return build_schedule(1000, {"linear", {1e-4, 0.02}}, 100, 200);
}

// Predicts the exact noise that produced x_t from a known x0.
class OraclePredictor final : public NoisePredictor {
 public:
  OraclePredictor(ad::Tensor x0, const DiffusionSchedule& s) : x0_(std::move(x0)), s_(s) {
    desc_.id = "oracle";
  }
  const PredictorDescriptor& descriptor() const override { return desc_; }
  ad::Tensor predict(const ad::Tensor& x_t, int t) const override {
    const double ab = s_.alpha_bar(t);
    return ad::mul_scalar(ad::sub(x_t, ad::mul_scalar(x0_, std::sqrt(ab))), 1.0 / std::sqrt(1 - ab));
  }

 private:
  ad::Tensor x0_;
  DiffusionSchedule s_;
  PredictorDescriptor desc_;
};

// Smooth analytic predictor: eps = 0.3 * tanh(x) + 0.01 * t / 100.
class TanhPredictor final : public NoisePredictor {
 public:
  TanhPredictor() { desc_.id = "tanh"; }
  const PredictorDescriptor& descriptor() const override { return desc_; }
  ad::Tensor predict(const ad::Tensor& x_t, int t) const override {
    return ad::add_scalar(ad::mul_scalar(ad::tanh(x_t), 0.3), 0.01 * t / 100.0);
  }

 private:
  PredictorDescriptor desc_;
};

class ConstantPredictor final : public NoisePredictor {
 public:
  explicit ConstantPredictor(double v) : v_(v) { desc_.id = "constant"; }
  const PredictorDescriptor& descriptor() const override { return desc_; }
  ad::Tensor predict(const ad::Tensor& x_t, int) const override {
    return ad::Tensor::constant(x_t.shape(), v_);
  }

 private:
  double v_;
  PredictorDescriptor desc_;
};

std::vector<double> uniform(size_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

TEST(ScheduleTest, LadderForDefaultSchedule) {
  const auto s = default_schedule();
  EXPECT_EQ(s.ladder(), (std::vector<int>{200, 100}));
}

TEST(ScheduleTest, ConstantAlphaCumulativeProduct) {
  const auto s = build_schedule(10, {"constant_alpha", {0.9}}, 1, 3);
  EXPECT_NEAR(s.alpha_bar(1), 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar(2), 0.81, 1e-15);
  EXPECT_NEAR(s.alpha_bar(3), 0.729, 1e-15);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(ScheduleTest, RejectsBadArguments) {
  EXPECT_THROW(build_schedule(1000, {"linear", {1e-4, 0.02}}, 1001, 500), std::invalid_argument);
  EXPECT_THROW(build_schedule(1000, {"linear", {1e-4, 0.02}}, 0, 500), std::invalid_argument);
  EXPECT_THROW(build_schedule(1000, {"linear", {1e-4, 0.02}}, 100, 1001), std::invalid_argument);
  EXPECT_THROW(build_schedule(10, {"nonsense", {}}, 1, 3), std::invalid_argument);
}

TEST(ScheduleTest, InvariantsHoldForEveryCurve) {
  for (const BetaCurve& curve : {BetaCurve{"linear", {1e-4, 0.02}}, BetaCurve{"cosine", {0.008}},
                                 BetaCurve{"constant_alpha", {0.97}}}) {
    const auto s = build_schedule(1000, curve, 37, 250);
    for (int t = 1; t <= s.total_steps; ++t) {
      EXPECT_GT(s.alpha_bar(t), 0.0) << curve.name;
      EXPECT_LE(s.alpha_bar(t), 1.0) << curve.name;
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1)) << curve.name << " t=" << t;
      EXPECT_EQ(s.alpha_bars[t - 1], (t == 1 ? 1.0 : s.alpha_bars[t - 2]) * s.alphas[t - 1]);
    }
    for (int t : s.ladder()) {
      EXPECT_GE(t, 1);
      EXPECT_LE(t, s.total_steps);
    }
  }
}

TEST(ScheduleTest, JsonRoundTrip) {
  const auto s = build_schedule(1000, {"cosine", {0.008}}, 50, 150);
  const auto back = DiffusionSchedule::from_json(s.to_json());
  EXPECT_EQ(back.alpha_bars, s.alpha_bars);
  EXPECT_EQ(back.ladder(), s.ladder());
}

TEST(ForwardNoiseTest, UnitAlphaBarReturnsInput) {
  const auto s = build_schedule(4, {"alphas", {1.0, 0.5, 0.5, 0.5}}, 1, 2);
  const auto x0 = ad::Tensor::constant({2, 2, 1}, uniform(4, 1));
  const auto z = ad::Tensor::constant({2, 2, 1}, uniform(4, 2));
  const auto x = forward_noise(x0, 1, z, s);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(x.at(i), x0.at(i));
}

TEST(ForwardNoiseTest, HandValue) {
  const auto s = build_schedule(2, {"alphas", {0.5, 0.5}}, 1, 2);  // alpha_bar(2) = 0.25
  const auto x = forward_noise(ad::Tensor::constant({2, 2, 1}, 0.0), 2,
                               ad::Tensor::constant({2, 2, 1}, 1.0), s);
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(x.at(i), std::sqrt(0.75), 1e-15);
}

TEST(ForwardNoiseTest, ShapeMismatchThrows) {
  const auto s = default_schedule();
  EXPECT_THROW(forward_noise(ad::Tensor::constant({2, 2, 1}, 0.0), 10,
                             ad::Tensor::constant({2, 2, 3}, 0.0), s),
               std::invalid_argument);
}

TEST(ForwardNoiseTest, MonteCarloMomentsWithinThreeStandardErrors) {
  const auto s = default_schedule();
  const int t = 200, draws = 10000;
  const double ab = s.alpha_bar(t);
  const auto x0 = ad::Tensor::constant({2, 2, 1}, {0.1, 0.4, 0.7, 1.0});
  std::vector<double> sum(4, 0.0), sumsq(4, 0.0);
  for (int d = 0; d < draws; ++d) {
    const auto x = forward_noise(x0, t, sample_noise({2, 2, 1}, 1000 + d), s);
    for (int i = 0; i < 4; ++i) {
      sum[i] += x.at(i);
      sumsq[i] += x.at(i) * x.at(i);
    }
  }
  const double var = 1.0 - ab;
  for (int i = 0; i < 4; ++i) {
    const double mean = sum[i] / draws;
    const double sample_var = (sumsq[i] - draws * mean * mean) / (draws - 1);
    EXPECT_NEAR(mean, std::sqrt(ab) * x0.at(i), 3.0 * std::sqrt(var / draws));
    // Standard error of a Gaussian sample variance: var * sqrt(2 / (n - 1)).
    EXPECT_NEAR(sample_var, var, 3.0 * var * std::sqrt(2.0 / (draws - 1)));
  }
}

TEST(DdimStepTest, HandValue) {
  const auto s = build_schedule(2, {"alphas", {0.8, 0.625}}, 1, 2);  // abar: 0.8, 0.5
  const auto x = ddim_step(ad::Tensor::constant({2, 2, 1}, 1.0), 2, 1, ConstantPredictor(0.1), s);
  const double expected =
      std::sqrt(0.8) * ((1.0 - std::sqrt(0.5) * 0.1) / std::sqrt(0.5)) + std::sqrt(0.2) * 0.1;
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(x.at(i), expected, 1e-14);
}

TEST(DdimStepTest, PerfectPredictorRecoversInput) {
  const auto s = default_schedule();
  const auto x0 = ad::Tensor::constant({4, 4, 3}, uniform(48, 3));
  OraclePredictor oracle(x0, s);
  const auto xt = forward_noise(x0, 200, sample_noise({4, 4, 3}, 4), s);
  const auto back = ddim_step(xt, 200, 0, oracle, s);
  for (int i = 0; i < 48; ++i) EXPECT_NEAR(back.at(i), x0.at(i), 1e-5 * std::abs(x0.at(i)) + 1e-12);
}

TEST(DdimStepTest, RejectsNonDecreasingStep) {
  const auto s = default_schedule();
  EXPECT_THROW(ddim_step(ad::Tensor::constant({2, 2, 1}, 0.0), 100, 100, ZeroPredictor(), s),
               std::invalid_argument);
}

TEST(DdimStepTest, Deterministic) {
  const auto s = default_schedule();
  const auto x = ad::Tensor::constant({3, 3, 3}, uniform(27, 5));
  const auto a = ddim_step(x, 200, 100, TanhPredictor(), s);
  const auto b = ddim_step(x, 200, 100, TanhPredictor(), s);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
}

TEST(PurifyTest, DegenerateChainIsClampedSum) {
  const auto s = build_schedule(2, {"alphas", {1.0, 1.0}}, 1, 2);
  const auto seed = ad::Tensor::constant({2, 2, 3}, uniform(12, 6));
  std::vector<double> d(12);
  for (int i = 0; i < 12; ++i) d[i] = (i % 3 - 1) * 0.8;
  const auto r = purify(seed, ad::Tensor::constant({2, 2, 3}, d), sample_noise({2, 2, 3}, 7),
                        ZeroPredictor(), s);
  for (int i = 0; i < 12; ++i) {
    EXPECT_NEAR(r.final_patch.at(i), std::clamp(seed.at(i) + d[i], 0.0, 1.0), 1e-15);
  }
}

TEST(PurifyTest, MatchesIndependentComposition) {
  const auto s = default_schedule();
  const auto seed = ad::Tensor::constant({8, 8, 3}, uniform(192, 8));
  const auto d = ad::Tensor::constant({8, 8, 3}, 0.0);
  const auto z = sample_noise({8, 8, 3}, 9);
  const TanhPredictor p;
  const auto r = purify(seed, d, z, p, s, true);

  // Independent evaluation of the same chain from the closed forms.
  const double a200 = s.alpha_bar(200), a100 = s.alpha_bar(100);
  std::vector<double> x(192);
  for (int i = 0; i < 192; ++i) x[i] = std::sqrt(a200) * seed.at(i) + std::sqrt(1 - a200) * z.at(i);
  auto step = [](std::vector<double>& v, double at, double ap, int t) {
    for (auto& xi : v) {
      const double eps = 0.3 * std::tanh(xi) + 0.01 * t / 100.0;
      xi = std::sqrt(ap) * (xi - std::sqrt(1 - at) * eps) / std::sqrt(at) + std::sqrt(1 - ap) * eps;
    }
  };
  step(x, a200, a100, 200);
  step(x, a100, 1.0, 100);
  for (int i = 0; i < 192; ++i) EXPECT_NEAR(r.final_patch.at(i), std::clamp(x[i], 0.0, 1.0), 1e-12);
  EXPECT_EQ(r.timesteps_visited, (std::vector<int>{200, 100, 0}));
  EXPECT_EQ(r.trajectory.size(), 3u);
}

TEST(PurifyTest, TimestepsStrictlyDecreaseAndEndBelowStride) {
  for (auto [t0, stride] : {std::pair{200, 100}, {250, 100}, {7, 3}, {1, 1}}) {
    const auto s = build_schedule(1000, {"linear", {1e-4, 0.02}}, stride, t0);
    const auto r = purify(ad::Tensor::constant({2, 2, 3}, 0.5), ad::Tensor::constant({2, 2, 3}, 0.0),
                          sample_noise({2, 2, 3}, 1), ZeroPredictor(), s);
    const auto& v = r.timesteps_visited;
    for (size_t i = 1; i < v.size(); ++i) EXPECT_LT(v[i], v[i - 1]);
    EXPECT_LT(v.back(), stride);
    EXPECT_EQ(v.front(), t0);
  }
}

TEST(PurifyTest, GradientMatchesFiniteDifferences) {
  const auto s = default_schedule();
  const auto seed = ad::Tensor::constant({8, 8, 3}, uniform(192, 10));
  const auto z = sample_noise({8, 8, 3}, 11);
  const auto weights = ad::Tensor::constant({8, 8, 3}, uniform(192, 12));
  const TanhPredictor p;
  auto objective = [&](const ad::Tensor& d) {
    return ad::sum(ad::mul(purify(seed, d, z, p, s).final_patch, weights));
  };
  std::vector<double> d0(192);
  for (int i = 0; i < 192; ++i) d0[i] = 0.05 * std::sin(i);
  auto d = ad::Tensor::parameter({8, 8, 3}, d0);
  objective(d).backward();
  const auto g = d.grad();
  const double h = 1e-6;
  for (int i = 0; i < 192; i += 7) {
    auto plus = d0, minus = d0;
    plus[i] += h;
    minus[i] -= h;
    const double fd = (objective(ad::Tensor::constant({8, 8, 3}, plus)).item() -
                       objective(ad::Tensor::constant({8, 8, 3}, minus)).item()) /
                      (2 * h);
    EXPECT_NEAR(g[i], fd, 1e-3 * std::max(std::abs(fd), 1e-3)) << i;
  }
}

TEST(PurifyTest, RejectsSizeMismatchWithPredictor) {
  class Fixed final : public NoisePredictor {
   public:
    Fixed() { desc_ = {"fixed8", 8, 3, true}; }
    const PredictorDescriptor& descriptor() const override { return desc_; }
    ad::Tensor predict(const ad::Tensor& x, int) const override { return x; }

   private:
    PredictorDescriptor desc_;
  };
  EXPECT_THROW(purify(ad::Tensor::constant({4, 4, 3}, 0.5), ad::Tensor::constant({4, 4, 3}, 0.0),
                      sample_noise({4, 4, 3}, 1), Fixed(), default_schedule()),
               std::invalid_argument);
  EXPECT_THROW(purify(ad::Tensor::constant({4, 4, 3}, 0.5), ad::Tensor::constant({4, 4, 1}, 0.0),
                      sample_noise({4, 4, 3}, 1), ZeroPredictor(), default_schedule()),
               std::invalid_argument);
}

TEST(ConvDenoiserTest, ShapeDeterminismAndRoundTrip) {
  ConvDenoiser net(1000, 8, 3, 42);
  const auto x = ad::Tensor::constant({5, 5, 3}, uniform(75, 13));
  const auto a = net.predict(x, 300);
  EXPECT_EQ(a.shape(), x.shape());
  const auto b = net.predict(x, 300);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));

  const auto path = std::filesystem::temp_directory_path() / "natpatch_denoiser_test.ckpt";
  net.save(path);
  const auto loaded = ConvDenoiser::load(path);
  const auto c = loaded->predict(x, 300);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), c.values().begin()));
  std::filesystem::remove(path);
}

TEST(ConvDenoiserTest, TrainingReducesLoss) {
  std::vector<Image> corpus;
  for (int k = 0; k < 4; ++k) {
    Image img(16, 16, 3);
    for (int64_t r = 0; r < 16; ++r)
      for (int64_t c = 0; c < 16; ++c)
        for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = ((r / 4 + c / 4 + k + ch) % 2) * 0.8 + 0.1;
    corpus.push_back(img);
  }
  DenoiserConfig cfg;
  cfg.steps = 150;
  cfg.hidden_channels = 8;
  DenoiserTrainingReport report;
  train_denoiser(corpus, default_schedule(), cfg, 3, &report);
  EXPECT_LT(report.final_loss, report.initial_loss);
}

}  // namespace
}  // namespace natpatch::diffusion
