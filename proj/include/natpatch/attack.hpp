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

// Patch optimization against a retrieval surrogate. The perturbation d_p is
// added to a seed patch, optionally purified by the diffusion chain, pasted
// at a fixed location and pushed down the text ranking by gradient descent.

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "natpatch/autograd.hpp"
#include "natpatch/diffusion.hpp"
#include "natpatch/image.hpp"
#include "natpatch/placement.hpp"
#include "natpatch/surrogate.hpp"

namespace natpatch::attack {

enum class PlacementStrategy { kAttention, kRandom };
enum class PatchOptimizer { kDiffusion, kDirect };

std::string to_string(PlacementStrategy s);
std::string to_string(PatchOptimizer o);
PlacementStrategy placement_strategy_from(const std::string& name);
PatchOptimizer patch_optimizer_from(const std::string& name);

struct AttackConfig {
  int max_iterations = 300;
  double learning_rate = 0.01;
  double lambda_tv = 0.1;
  int top_k = 15;
  double clip_max = 1.0;
  double patch_ratio = 0.15;
  // Diffusion schedule.
  int total_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int entry_timestep = 200;
  int stride = 100;
  // Success means no matched text ranks within the top success_rank.
  int success_rank = 10;
  double margin_floor = 1.0;
  uint64_t seed = 0;
  PlacementStrategy placement = PlacementStrategy::kAttention;
  PatchOptimizer optimizer = PatchOptimizer::kDiffusion;
  bool recompute_placement = false;
  // Std-dev of Gaussian pixel noise added to the composed image before
  // scoring; 0 disables it.
  double robustness_noise = 0.0;

  // Throws std::invalid_argument naming the offending field.
  void validate(size_t pool_size) const;
  diffusion::DiffusionSchedule schedule() const;

  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static AttackConfig from_json(const nlohmann::json& doc);
};

struct AttackResult {
  Patch final_patch;
  Image perturbation;  // d_p, patch-shaped
  placement::Placement placement;
  int iterations_used = 0;
  std::vector<double> loss_trace;
  bool broken_at_1 = false;
  bool broken_at_5 = false;
  bool broken_at_10 = false;
  bool success = false;  // the configured criterion
  double final_score_loss = 0.0;
  double final_tv_loss = 0.0;
  std::vector<double> final_scores;  // adversarial image vs. every text
  double wall_seconds = 0.0;
};

// Pointwise clamp to [0, tau].
std::vector<double> clip_perturbed(const std::vector<double>& values, double tau);

// max over matched texts in the top-K minus min over unmatched ones; returns
// -margin_floor when no matched text is in the top-K. Ranks break ties by the
// smaller index.
double score_loss(const std::vector<double>& scores, const std::set<int>& matched_ids, int k,
                  double margin_floor = 1.0);
ad::Tensor score_loss(const ad::Tensor& scores, const std::set<int>& matched_ids, int k,
                      double margin_floor = 1.0);

// sqrt(sum of squared right/down neighbour differences over all channels)
// divided by the pixel count.
double tv_loss(const Patch& patch);
ad::Tensor tv_loss(const ad::Tensor& patch);

double total_loss(double score_part, double tv_part, double lambda_tv);

// 0-based rank of every entry under descending order, ties to the smaller
// index.
std::vector<int> descending_ranks(const std::vector<double>& scores);
// True when no matched text ranks within the first n.
bool matched_out_of_top(const std::vector<double>& scores, const std::set<int>& matched_ids,
                        int n);

// Everything the objective depends on for one example, with the placement
// already fixed.
struct AttackProblem {
  const surrogate::SurrogateModel* model = nullptr;
  const diffusion::NoisePredictor* predictor = nullptr;
  const surrogate::TextEncoding* texts = nullptr;
  ad::Tensor image;  // [H,W,3]
  ad::Tensor seed;   // [s,s,3]
  ad::Tensor z;      // [s,s,3]
  std::set<int> matched_ids;
  placement::Placement placement;
  placement::Mask mask;
  diffusion::DiffusionSchedule schedule;
  AttackConfig config;
};

struct ObjectiveTerms {
  ad::Tensor total;
  ad::Tensor score_part;
  ad::Tensor tv_part;
  ad::Tensor scores;
  ad::Tensor patch;
  ad::Tensor composed;
};

// L_p at perturbation d_p. `pixel_noise`, when defined, is added to the
// composed image before scoring.
ObjectiveTerms evaluate_objective(const AttackProblem& problem, const ad::Tensor& d_p,
                                  const ad::Tensor& pixel_noise = {});

struct AttackInputs {
  const surrogate::SurrogateModel& model;
  const diffusion::NoisePredictor& predictor;
  const Image& image;
  const std::set<int>& matched_ids;
  const surrogate::TextBatch& text_pool;
  // Encoding of text_pool; computed on the fly when null.
  const surrogate::TextEncoding* encoded_pool = nullptr;
  const Patch& seed_patch;
};

// The optimization loop. The placement strategy and optimizer come from the
// config.
AttackResult run_attack(const AttackInputs& inputs, const AttackConfig& config);

AttackResult run_attack(const surrogate::SurrogateModel& model,
                        const diffusion::NoisePredictor& predictor, const Image& image,
                        const std::set<int>& matched_ids, const surrogate::TextBatch& text_pool,
                        const Patch& seed_patch, const AttackConfig& config);

// Placement the loop would use for this example.
placement::Placement choose_placement(const AttackInputs& inputs, const AttackConfig& config,
                                      int64_t patch_side);

}  // namespace natpatch::attack
