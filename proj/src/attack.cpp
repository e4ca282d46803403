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

#include "natpatch/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>

namespace natpatch::attack {

namespace {

uint64_t mix(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

constexpr uint64_t kNoiseStream = 1;
constexpr uint64_t kPlacementStream = 2;
constexpr uint64_t kRobustnessStream = 3;

void require_field(bool ok, const std::string& message) {
  if (!ok) throw std::invalid_argument("attack config: " + message);
}

}  // namespace

std::string to_string(PlacementStrategy s) {
  return s == PlacementStrategy::kAttention ? "attention" : "random";
}

std::string to_string(PatchOptimizer o) {
  return o == PatchOptimizer::kDiffusion ? "diffusion" : "direct";
}

PlacementStrategy placement_strategy_from(const std::string& name) {
  if (name == "attention") return PlacementStrategy::kAttention;
  if (name == "random") return PlacementStrategy::kRandom;
  throw std::invalid_argument("unknown placement strategy '" + name + "'");
}

PatchOptimizer patch_optimizer_from(const std::string& name) {
  if (name == "diffusion") return PatchOptimizer::kDiffusion;
  if (name == "direct") return PatchOptimizer::kDirect;
  throw std::invalid_argument("unknown optimizer '" + name + "'");
}

void AttackConfig::validate(size_t pool_size) const {
  require_field(max_iterations >= 1, "max_iterations must be >= 1");
  require_field(std::isfinite(learning_rate) && learning_rate >= 0.0,
                "learning_rate must be finite and >= 0");
  require_field(std::isfinite(lambda_tv) && lambda_tv >= 0.0, "lambda_tv must be >= 0");
  require_field(top_k >= 1, "top_k must be >= 1");
  require_field(pool_size == 0 || static_cast<size_t>(top_k) <= pool_size,
                "top_k " + std::to_string(top_k) + " exceeds the text pool of " +
                    std::to_string(pool_size));
  require_field(clip_max > 0.0 && clip_max <= 1.0, "clip_max must be in (0, 1]");
  require_field(patch_ratio > 0.0 && patch_ratio <= 1.0, "patch_ratio must be in (0, 1]");
  require_field(success_rank >= 1, "success_rank must be >= 1");
  require_field(pool_size == 0 || static_cast<size_t>(success_rank) <= pool_size,
                "success_rank exceeds the text pool");
  require_field(margin_floor >= 0.0, "margin_floor must be >= 0");
  require_field(robustness_noise >= 0.0, "robustness_noise must be >= 0");
}

diffusion::DiffusionSchedule AttackConfig::schedule() const {
  return diffusion::build_schedule(total_steps, {"linear", {beta_start, beta_end}}, stride,
                                   entry_timestep);
}

nlohmann::json AttackConfig::to_json() const {
  return {{"max_iterations", max_iterations},
          {"learning_rate", learning_rate},
          {"lambda_tv", lambda_tv},
          {"top_k", top_k},
          {"clip_max", clip_max},
          {"patch_ratio", patch_ratio},
          {"total_steps", total_steps},
          {"beta_start", beta_start},
          {"beta_end", beta_end},
          {"entry_timestep", entry_timestep},
          {"stride", stride},
          {"success_rank", success_rank},
          {"margin_floor", margin_floor},
          {"seed", seed},
          {"placement", to_string(placement)},
          {"optimizer", to_string(optimizer)},
          {"recompute_placement", recompute_placement},
          {"robustness_noise", robustness_noise}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw std::invalid_argument("attack config must be a JSON object");
  AttackConfig c;
  const auto known = c.to_json();
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw std::invalid_argument("unknown attack config key '" + key + "'");
  }
  try {
    c.max_iterations = doc.value("max_iterations", c.max_iterations);
    c.learning_rate = doc.value("learning_rate", c.learning_rate);
    c.lambda_tv = doc.value("lambda_tv", c.lambda_tv);
    c.top_k = doc.value("top_k", c.top_k);
    c.clip_max = doc.value("clip_max", c.clip_max);
    c.patch_ratio = doc.value("patch_ratio", c.patch_ratio);
    c.total_steps = doc.value("total_steps", c.total_steps);
    c.beta_start = doc.value("beta_start", c.beta_start);
    c.beta_end = doc.value("beta_end", c.beta_end);
    c.entry_timestep = doc.value("entry_timestep", c.entry_timestep);
    c.stride = doc.value("stride", c.stride);
    c.success_rank = doc.value("success_rank", c.success_rank);
    c.margin_floor = doc.value("margin_floor", c.margin_floor);
    c.seed = doc.value("seed", c.seed);
    c.placement = placement_strategy_from(doc.value("placement", to_string(c.placement)));
    c.optimizer = patch_optimizer_from(doc.value("optimizer", to_string(c.optimizer)));
    c.recompute_placement = doc.value("recompute_placement", c.recompute_placement);
    c.robustness_noise = doc.value("robustness_noise", c.robustness_noise);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("attack config: ") + e.what());
  }
  return c;
}

std::vector<double> clip_perturbed(const std::vector<double>& values, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw std::invalid_argument("clip bound must be in (0, 1]");
  std::vector<double> out(values.size());
  std::transform(values.begin(), values.end(), out.begin(),
                 [tau](double v) { return std::clamp(v, 0.0, tau); });
  return out;
}

std::vector<int> descending_ranks(const std::vector<double>& scores) {
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> rank(scores.size());
  for (size_t r = 0; r < order.size(); ++r) rank[order[r]] = static_cast<int>(r);
  return rank;
}

bool matched_out_of_top(const std::vector<double>& scores, const std::set<int>& matched_ids,
                        int n) {
  const auto rank = descending_ranks(scores);
  return std::none_of(matched_ids.begin(), matched_ids.end(),
                      [&](int id) { return rank.at(id) < n; });
}

namespace {

// Indices of the extreme pair, or nullopt when S1 is empty.
std::optional<std::pair<int, int>> extreme_pair(const std::vector<double>& scores,
                                                const std::set<int>& matched_ids, int k) {
  const int n = static_cast<int>(scores.size());
  if (n == 0) throw std::invalid_argument("score_loss: no texts");
  if (k < 1 || k > n) {
    throw std::invalid_argument("score_loss: K=" + std::to_string(k) + " outside [1, " +
                                std::to_string(n) + "]");
  }
  if (matched_ids.empty()) throw std::invalid_argument("score_loss: no matched texts");
  for (int id : matched_ids) {
    if (id < 0 || id >= n) throw std::invalid_argument("score_loss: matched id out of range");
  }
  const auto rank = descending_ranks(scores);
  int best_matched = -1, worst_other = -1, best_outside = -1;
  for (int i = 0; i < n; ++i) {
    const bool matched = matched_ids.count(i) > 0;
    if (rank[i] < k) {
      if (matched && (best_matched < 0 || rank[i] < rank[best_matched])) best_matched = i;
      if (!matched && (worst_other < 0 || rank[i] > rank[worst_other])) worst_other = i;
    } else if (!matched && (best_outside < 0 || rank[i] < rank[best_outside])) {
      best_outside = i;
    }
  }
  if (best_matched < 0) return std::nullopt;
  // Every top-K entry is matched: compare against the strongest unmatched text.
  if (worst_other < 0) worst_other = best_outside;
  if (worst_other < 0) throw std::invalid_argument("score_loss: every text is matched");
  return std::make_pair(best_matched, worst_other);
}

}  // namespace

double score_loss(const std::vector<double>& scores, const std::set<int>& matched_ids, int k,
                  double margin_floor) {
  const auto pair = extreme_pair(scores, matched_ids, k);
  if (!pair) return -margin_floor;
  return scores[pair->first] - scores[pair->second];
}

ad::Tensor score_loss(const ad::Tensor& scores, const std::set<int>& matched_ids, int k,
                      double margin_floor) {
  if (scores.rank() != 1) throw std::invalid_argument("score_loss expects a score vector");
  const std::vector<double> values(scores.values().begin(), scores.values().end());
  const auto pair = extreme_pair(values, matched_ids, k);
  if (!pair) return ad::Tensor::scalar(-margin_floor);
  return ad::sub(ad::pick(scores, pair->first), ad::pick(scores, pair->second));
}

double tv_loss(const Patch& patch) { return tv_loss(to_tensor(patch)).item(); }

ad::Tensor tv_loss(const ad::Tensor& patch) {
  if (patch.rank() != 3) throw std::invalid_argument("tv_loss expects [h,w,C]");
  const int64_t h = patch.dim(0), w = patch.dim(1), ch = patch.dim(2);
  if (h < 1 || w < 1) throw std::invalid_argument("tv_loss: empty patch");
  std::vector<int64_t> here, there;
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c)
      for (int64_t k = 0; k < ch; ++k) {
        const int64_t self = (r * w + c) * ch + k;
        if (r + 1 < h) {
          here.push_back(self);
          there.push_back(((r + 1) * w + c) * ch + k);
        }
        if (c + 1 < w) {
          here.push_back(self);
          there.push_back((r * w + c + 1) * ch + k);
        }
      }
  if (here.empty()) return ad::Tensor::scalar(0.0);
  const int64_t pairs = static_cast<int64_t>(here.size());
  auto diff = ad::sub(ad::gather(patch, std::move(here), {pairs}),
                      ad::gather(patch, std::move(there), {pairs}));
  return ad::mul_scalar(ad::sqrt(ad::sum(ad::square(diff))), 1.0 / static_cast<double>(h * w));
}

double total_loss(double score_part, double tv_part, double lambda_tv) {
  if (lambda_tv < 0.0) throw std::invalid_argument("lambda_tv must be >= 0");
  return score_part + lambda_tv * tv_part;
}

ObjectiveTerms evaluate_objective(const AttackProblem& problem, const ad::Tensor& d_p,
                                  const ad::Tensor& pixel_noise) {
  ObjectiveTerms terms;
  if (problem.config.optimizer == PatchOptimizer::kDiffusion) {
    terms.patch = diffusion::purify(problem.seed, d_p, problem.z, *problem.predictor,
                                    problem.schedule)
                      .final_patch;
  } else {
    terms.patch = ad::add(problem.seed, d_p);
  }
  terms.composed = placement::compose(problem.image, terms.patch, problem.mask, problem.placement);
  auto scored = terms.composed;
  if (pixel_noise.defined()) scored = ad::clamp(ad::add(scored, pixel_noise), 0.0, 1.0);
  terms.scores = problem.model->score_image(scored, *problem.texts);
  terms.score_part = score_loss(terms.scores, problem.matched_ids, problem.config.top_k,
                                problem.config.margin_floor);
  terms.tv_part = tv_loss(terms.patch);
  terms.total = ad::add(terms.score_part, ad::mul_scalar(terms.tv_part, problem.config.lambda_tv));
  return terms;
}

namespace {

std::vector<int> caption_for_map(const AttackInputs& inputs) {
  const int first = *inputs.matched_ids.begin();
  return inputs.text_pool.ids.at(first);
}

placement::Placement attention_placement(const AttackInputs& inputs, const Image& image,
                                         int64_t patch_side) {
  const auto map = surrogate::cross_attention_map(inputs.model, image, caption_for_map(inputs));
  const auto raster = placement::upsample_map(map, image.height, image.width);
  return placement::select_center(raster, patch_side);
}

}  // namespace

placement::Placement choose_placement(const AttackInputs& inputs, const AttackConfig& config,
                                      int64_t patch_side) {
  if (config.placement == PlacementStrategy::kAttention) {
    return attention_placement(inputs, inputs.image, patch_side);
  }
  std::mt19937_64 rng(mix(config.seed, kPlacementStream));
  return placement::random_placement(inputs.image.height, inputs.image.width, patch_side, rng);
}

AttackResult run_attack(const AttackInputs& inputs, const AttackConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  config.validate(inputs.text_pool.size());
  if (inputs.matched_ids.empty()) throw std::invalid_argument("run_attack: no matched texts");
  for (int id : inputs.matched_ids) {
    if (id < 0 || static_cast<size_t>(id) >= inputs.text_pool.size()) {
      throw std::invalid_argument("run_attack: matched id " + std::to_string(id) +
                                  " outside the text pool");
    }
  }
  const int64_t side = placement::patch_side_for(config.patch_ratio, inputs.image.height,
                                                 inputs.image.width);
  if (inputs.seed_patch.height != side || inputs.seed_patch.width != side ||
      inputs.seed_patch.channels != inputs.image.channels) {
    throw std::invalid_argument("seed patch must be " + std::to_string(side) + "x" +
                                std::to_string(side) + " for patch_ratio " +
                                std::to_string(config.patch_ratio));
  }

  surrogate::TextEncoding local_encoding;
  const surrogate::TextEncoding* texts = inputs.encoded_pool;
  if (texts == nullptr) {
    local_encoding = inputs.model.encode_texts(inputs.text_pool);
    texts = &local_encoding;
  }

  AttackProblem problem;
  problem.model = &inputs.model;
  problem.predictor = &inputs.predictor;
  problem.texts = texts;
  problem.image = to_tensor(inputs.image);
  problem.seed = to_tensor(inputs.seed_patch);
  problem.z = diffusion::sample_noise(problem.seed.shape(), mix(config.seed, kNoiseStream));
  problem.matched_ids = inputs.matched_ids;
  problem.placement = choose_placement(inputs, config, side);
  problem.mask = placement::make_mask(problem.placement);
  problem.schedule = config.schedule();
  problem.config = config;

  std::mt19937_64 noise_rng(mix(config.seed, kRobustnessStream));
  std::normal_distribution<double> normal(0.0, config.robustness_noise);

  const auto seed_values = problem.seed.values();
  std::vector<double> d(seed_values.size(), 0.0);

  AttackResult result;
  for (int it = 0; it < config.max_iterations; ++it) {
    auto d_p = ad::Tensor::parameter(problem.seed.shape(), d);
    ad::Tensor noise;
    if (config.robustness_noise > 0.0) {
      std::vector<double> v(problem.image.size());
      for (auto& x : v) x = normal(noise_rng);
      noise = ad::Tensor::constant(problem.image.shape(), std::move(v));
    }
    const auto terms = evaluate_objective(problem, d_p, noise);
    const double loss = terms.total.item();
    if (!std::isfinite(loss)) {
      throw std::runtime_error("non-finite attack loss at iteration " + std::to_string(it));
    }
    result.loss_trace.push_back(loss);
    result.iterations_used = it + 1;

    const std::vector<double> scores(terms.scores.values().begin(), terms.scores.values().end());
    result.final_scores = scores;
    result.final_score_loss = terms.score_part.item();
    result.final_tv_loss = terms.tv_part.item();
    result.final_patch = from_tensor(terms.patch);
    result.success = matched_out_of_top(scores, inputs.matched_ids, config.success_rank);
    if (result.success || it + 1 == config.max_iterations) {
      result.perturbation = from_tensor(d_p);
      break;
    }

    terms.total.backward();
    const auto grad = d_p.grad();
    for (size_t i = 0; i < d.size(); ++i) {
      // Keep seed + d_p inside [0, tau] by folding the clip back into d_p.
      const double next = seed_values[i] + d[i] - config.learning_rate * grad[i];
      d[i] = std::clamp(next, 0.0, config.clip_max) - seed_values[i];
    }

    if (config.recompute_placement && config.placement == PlacementStrategy::kAttention) {
      problem.placement = attention_placement(inputs, from_tensor(terms.composed), side);
      problem.mask = placement::make_mask(problem.placement);
    }
  }
  result.placement = problem.placement;
  result.broken_at_1 = matched_out_of_top(result.final_scores, inputs.matched_ids, 1);
  result.broken_at_5 = matched_out_of_top(result.final_scores, inputs.matched_ids,
                                          std::min<int>(5, result.final_scores.size()));
  result.broken_at_10 = matched_out_of_top(result.final_scores, inputs.matched_ids,
                                           std::min<int>(10, result.final_scores.size()));
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

AttackResult run_attack(const surrogate::SurrogateModel& model,
                        const diffusion::NoisePredictor& predictor, const Image& image,
                        const std::set<int>& matched_ids, const surrogate::TextBatch& text_pool,
                        const Patch& seed_patch, const AttackConfig& config) {
  return run_attack(AttackInputs{model, predictor, image, matched_ids, text_pool, nullptr,
                                 seed_patch},
                    config);
}

}  // namespace natpatch::attack
