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

#pragma once

// Diffusion purification of patches: closed-form forward noising, the
// deterministic (eta = 0) respaced DDIM chain, and the purify operator that
// maps a perturbed seed patch to a denoised patch. Everything here is built on
// ad::Tensor so the whole chain is differentiable with respect to the
// perturbation.

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "natpatch/autograd.hpp"
#include "natpatch/image.hpp"

namespace natpatch::diffusion {

// Named beta/alpha curve.
//   "linear"          params = {beta_start, beta_end}
//   "cosine"          params = {offset}            (Nichol & Dhariwal form)
//   "constant_alpha"  params = {alpha}
//   "alphas"          params = explicit per-step alphas, length T
struct BetaCurve {
  std::string name = "linear";
  std::vector<double> params = {1e-4, 0.02};
};

class DiffusionSchedule {
 public:
  int total_steps = 0;
  int respaced_stride = 0;
  int entry_timestep = 0;
  BetaCurve curve;
  // Index t-1 holds the value for timestep t.
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  // Cumulative product at timestep t; alpha_bar(0) == 1.
  double alpha_bar(int t) const;
  // Timesteps at which a denoising step starts: t0, t0-s, ... while >= s.
  std::vector<int> ladder() const;

  nlohmann::json to_json() const;
  static DiffusionSchedule from_json(const nlohmann::json& doc);
};

DiffusionSchedule build_schedule(int total_steps, const BetaCurve& curve, int respaced_stride,
                                 int entry_timestep);

struct PredictorDescriptor {
  std::string id;
  int64_t spatial_size = 0;  // 0 accepts any square size
  int64_t channels = 3;
  bool differentiable = true;
};

// eps_theta(x_t, t). Implementations must be deterministic and safe to call
// concurrently through a const reference.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual const PredictorDescriptor& descriptor() const = 0;
  // x_t is [s, s, C]; the result has the same shape.
  virtual ad::Tensor predict(const ad::Tensor& x_t, int timestep) const = 0;
};

class ZeroPredictor final : public NoisePredictor {
 public:
  ZeroPredictor();
  const PredictorDescriptor& descriptor() const override { return descriptor_; }
  ad::Tensor predict(const ad::Tensor& x_t, int timestep) const override;

 private:
  PredictorDescriptor descriptor_;
};

struct DenoiserConfig {
  int hidden_channels = 16;
  int layers = 3;
  int crop_size = 8;
  int batch_size = 32;
  int steps = 600;
  double learning_rate = 3e-3;
  // Training timesteps are drawn uniformly from [1, max_timestep].
  int max_timestep = 400;
};

// Small fully convolutional epsilon-predictor. The normalized timestep t/T
// enters as a constant extra input channel.
class ConvDenoiser final : public NoisePredictor {
 public:
  ConvDenoiser(int total_steps, int hidden_channels, int layers, uint64_t seed);

  const PredictorDescriptor& descriptor() const override { return descriptor_; }
  ad::Tensor predict(const ad::Tensor& x_t, int timestep) const override;
  // Batched [N,s,s,C] variant used during training.
  ad::Tensor predict_batch(const ad::Tensor& x_t, const std::vector<int>& timesteps) const;

  std::vector<ad::Tensor> parameters() const;
  void set_trainable(bool flag);

  void save(const std::filesystem::path& path) const;
  static std::unique_ptr<ConvDenoiser> load(const std::filesystem::path& path);

  int total_steps() const { return total_steps_; }

 private:
  ConvDenoiser() = default;

  PredictorDescriptor descriptor_;
  int total_steps_ = 0;
  std::vector<ad::Tensor> weights_;
  std::vector<ad::Tensor> biases_;
};

struct DenoiserTrainingReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

// Trains on random crops of randomly down-scaled corpus images with the
// standard epsilon-matching objective.
std::unique_ptr<ConvDenoiser> train_denoiser(const std::vector<Image>& corpus,
                                             const DiffusionSchedule& schedule,
                                             const DenoiserConfig& config, uint64_t seed,
                                             DenoiserTrainingReport* report = nullptr);

// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * z
ad::Tensor forward_noise(const ad::Tensor& x0, int t, const ad::Tensor& z,
                         const DiffusionSchedule& schedule);

// Deterministic DDIM update from t to t_prev (t_prev == 0 is a full denoise).
ad::Tensor ddim_step(const ad::Tensor& x_t, int t, int t_prev, const NoisePredictor& predictor,
                     const DiffusionSchedule& schedule);

struct PurifyResult {
  ad::Tensor final_patch;
  std::vector<ad::Tensor> trajectory;  // filled only on request
  std::vector<int> timesteps_visited;
};

PurifyResult purify(const ad::Tensor& seed, const ad::Tensor& perturbation, const ad::Tensor& z,
                    const NoisePredictor& predictor, const DiffusionSchedule& schedule,
                    bool keep_trajectory = false);

// Standard-normal sample shaped like a [s, s, C] patch.
ad::Tensor sample_noise(const ad::Shape& shape, uint64_t seed);

}  // namespace natpatch::diffusion
