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
#include <numbers>
#include <random>
#include <stdexcept>

#include "natpatch/archive.hpp"

namespace natpatch::diffusion {

namespace {

std::vector<double> alphas_for(int total_steps, const BetaCurve& curve) {
  std::vector<double> alphas(total_steps);
  const auto& p = curve.params;
  if (curve.name == "linear") {
    if (p.size() != 2) throw std::invalid_argument("linear curve needs {beta_start, beta_end}");
    for (int i = 0; i < total_steps; ++i) {
      const double frac = total_steps == 1 ? 0.0 : static_cast<double>(i) / (total_steps - 1);
      alphas[i] = 1.0 - (p[0] + frac * (p[1] - p[0]));
    }
  } else if (curve.name == "cosine") {
    const double s = p.empty() ? 0.008 : p[0];
    auto f = [&](double t) {
      const double c = std::cos((t / total_steps + s) / (1.0 + s) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int i = 0; i < total_steps; ++i) {
      const double beta = std::min(1.0 - f(i + 1) / f(i), 0.999);
      alphas[i] = 1.0 - beta;
    }
  } else if (curve.name == "constant_alpha") {
    if (p.size() != 1) throw std::invalid_argument("constant_alpha curve needs {alpha}");
    alphas.assign(total_steps, p[0]);
  } else if (curve.name == "alphas") {
    if (static_cast<int>(p.size()) != total_steps) {
      throw std::invalid_argument("explicit alphas curve needs exactly total_steps values");
    }
    alphas = p;
  } else {
    throw std::invalid_argument("unknown beta curve '" + curve.name + "'");
  }
  for (double a : alphas) {
    if (!(a > 0.0 && a <= 1.0)) throw std::invalid_argument("alpha outside (0,1]");
  }
  return alphas;
}

void check_timestep(const DiffusionSchedule& schedule, int t, bool allow_zero) {
  if (t < (allow_zero ? 0 : 1) || t > schedule.total_steps) {
    throw std::invalid_argument("timestep " + std::to_string(t) + " outside schedule range [" +
                                (allow_zero ? "0" : "1") + ", " +
                                std::to_string(schedule.total_steps) + "]");
  }
}

}  // namespace

double DiffusionSchedule::alpha_bar(int t) const {
  if (t == 0) return 1.0;
  if (t < 0 || t > total_steps) throw std::out_of_range("alpha_bar timestep out of range");
  return alpha_bars[t - 1];
}

std::vector<int> DiffusionSchedule::ladder() const {
  std::vector<int> steps;
  for (int t = entry_timestep; t >= respaced_stride; t -= respaced_stride) steps.push_back(t);
  return steps;
}

nlohmann::json DiffusionSchedule::to_json() const {
  return {{"total_steps", total_steps},
          {"beta_curve", {{"name", curve.name}, {"params", curve.params}}},
          {"respaced_stride", respaced_stride},
          {"entry_timestep", entry_timestep}};
}

DiffusionSchedule DiffusionSchedule::from_json(const nlohmann::json& doc) {
  BetaCurve curve;
  if (doc.contains("beta_curve")) {
    curve.name = doc["beta_curve"].value("name", curve.name);
    curve.params = doc["beta_curve"].value("params", curve.params);
  }
  return build_schedule(doc.at("total_steps").get<int>(), curve,
                        doc.at("respaced_stride").get<int>(), doc.at("entry_timestep").get<int>());
}

DiffusionSchedule build_schedule(int total_steps, const BetaCurve& curve, int respaced_stride,
                                 int entry_timestep) {
  if (total_steps <= 0) throw std::invalid_argument("total_steps must be positive");
  if (respaced_stride <= 0) throw std::invalid_argument("respaced_stride must be positive");
  if (entry_timestep <= 0 || entry_timestep > total_steps) {
    throw std::invalid_argument("entry_timestep " + std::to_string(entry_timestep) +
                                " outside [1, " + std::to_string(total_steps) + "]");
  }
  if (respaced_stride > entry_timestep) {
    throw std::invalid_argument("respaced_stride exceeds entry_timestep");
  }
  DiffusionSchedule s;
  s.total_steps = total_steps;
  s.respaced_stride = respaced_stride;
  s.entry_timestep = entry_timestep;
  s.curve = curve;
  s.alphas = alphas_for(total_steps, curve);
  s.alpha_bars.resize(total_steps);
  double prod = 1.0;
  for (int i = 0; i < total_steps; ++i) {
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
  if (!(s.alpha_bars.back() > 0.0)) throw std::invalid_argument("alpha_bar underflows to zero");
  return s;
}

// ---------------------------------------------------------------------------

ZeroPredictor::ZeroPredictor() { descriptor_ = {"zero", 0, 3, true}; }

ad::Tensor ZeroPredictor::predict(const ad::Tensor& x_t, int) const {
  return ad::Tensor::constant(x_t.shape(), 0.0);
}

ConvDenoiser::ConvDenoiser(int total_steps, int hidden_channels, int layers, uint64_t seed)
    : total_steps_(total_steps) {
  if (layers < 2) throw std::invalid_argument("denoiser needs at least 2 layers");
  descriptor_ = {"conv-denoiser", 0, 3, true};
  std::mt19937_64 rng(seed);
  auto init = [&](ad::Shape shape, double fan_in, double gain) {
    std::normal_distribution<double> dist(0.0, gain / std::sqrt(fan_in));
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = dist(rng);
    return ad::Tensor::constant(std::move(shape), std::move(v));
  };
  constexpr int k = 3;
  // Layer 0 is split into image and timestep weights so no concat is needed.
  weights_.push_back(init({k, k, 3, hidden_channels}, k * k * 4, 1.0));
  weights_.push_back(init({k, k, 1, hidden_channels}, k * k * 4, 1.0));
  biases_.push_back(ad::Tensor::constant({hidden_channels}, 0.0));
  for (int l = 1; l < layers - 1; ++l) {
    weights_.push_back(init({k, k, hidden_channels, hidden_channels}, k * k * hidden_channels, 1.0));
    biases_.push_back(ad::Tensor::constant({hidden_channels}, 0.0));
  }
  weights_.push_back(init({k, k, hidden_channels, 3}, k * k * hidden_channels, 0.1));
  biases_.push_back(ad::Tensor::constant({3}, 0.0));
}

ad::Tensor ConvDenoiser::predict_batch(const ad::Tensor& x_t,
                                       const std::vector<int>& timesteps) const {
  const int64_t n = x_t.dim(0), h = x_t.dim(1), w = x_t.dim(2);
  if (x_t.dim(3) != 3) throw std::invalid_argument("denoiser expects 3 channels");
  if (static_cast<int64_t>(timesteps.size()) != n) {
    throw std::invalid_argument("one timestep per batch entry required");
  }
  std::vector<double> tmap(n * h * w);
  for (int64_t b = 0; b < n; ++b) {
    const double v = static_cast<double>(timesteps[b]) / total_steps_;
    std::fill(tmap.begin() + b * h * w, tmap.begin() + (b + 1) * h * w, v);
  }
  const auto tmap_t = ad::Tensor::constant({n, h, w, 1}, std::move(tmap));
  const auto no_bias = ad::Tensor::constant({weights_[1].dim(3)}, 0.0);
  ad::Tensor hcur = ad::add(ad::conv2d(x_t, weights_[0], biases_[0]),
                            ad::conv2d(tmap_t, weights_[1], no_bias));
  hcur = ad::silu(hcur);
  for (size_t l = 2; l < weights_.size(); ++l) {
    hcur = ad::conv2d(hcur, weights_[l], biases_[l - 1]);
    if (l + 1 < weights_.size()) hcur = ad::silu(hcur);
  }
  return hcur;
}

ad::Tensor ConvDenoiser::predict(const ad::Tensor& x_t, int timestep) const {
  if (x_t.rank() != 3) throw std::invalid_argument("predict expects [s,s,C]");
  auto batched = ad::reshape(x_t, {1, x_t.dim(0), x_t.dim(1), x_t.dim(2)});
  return ad::reshape(predict_batch(batched, {timestep}), x_t.shape());
}

std::vector<ad::Tensor> ConvDenoiser::parameters() const {
  std::vector<ad::Tensor> out = weights_;
  out.insert(out.end(), biases_.begin(), biases_.end());
  return out;
}

void ConvDenoiser::set_trainable(bool flag) {
  for (auto& t : weights_) t.set_requires_grad(flag);
  for (auto& t : biases_) t.set_requires_grad(flag);
}

void ConvDenoiser::save(const std::filesystem::path& path) const {
  Archive ar;
  ar.descriptor = {{"kind", "conv-denoiser"},
                   {"id", descriptor_.id},
                   {"total_steps", total_steps_},
                   {"layers", weights_.size() - 1},
                   {"hidden_channels", weights_[0].dim(3)},
                   {"channels", descriptor_.channels}};
  for (size_t i = 0; i < weights_.size(); ++i) ar.tensors["w" + std::to_string(i)] = weights_[i].detach();
  for (size_t i = 0; i < biases_.size(); ++i) ar.tensors["b" + std::to_string(i)] = biases_[i].detach();
  save_archive(ar, path);
}

std::unique_ptr<ConvDenoiser> ConvDenoiser::load(const std::filesystem::path& path) {
  Archive ar = load_archive(path);
  if (ar.descriptor.value("kind", "") != "conv-denoiser") {
    throw std::runtime_error(path.string() + " does not hold a conv-denoiser");
  }
  const int layers = ar.descriptor.at("layers").get<int>();
  const int64_t hidden = ar.descriptor.at("hidden_channels").get<int64_t>();
  std::unique_ptr<ConvDenoiser> d(new ConvDenoiser());
  d->total_steps_ = ar.descriptor.at("total_steps").get<int>();
  d->descriptor_ = {ar.descriptor.value("id", "conv-denoiser"), 0, 3, true};
  d->weights_.push_back(ar.get("w0", {3, 3, 3, hidden}));
  d->weights_.push_back(ar.get("w1", {3, 3, 1, hidden}));
  d->biases_.push_back(ar.get("b0", {hidden}));
  for (int l = 1; l < layers - 1; ++l) {
    d->weights_.push_back(ar.get("w" + std::to_string(l + 1), {3, 3, hidden, hidden}));
    d->biases_.push_back(ar.get("b" + std::to_string(l), {hidden}));
  }
  d->weights_.push_back(ar.get("w" + std::to_string(layers), {3, 3, hidden, 3}));
  d->biases_.push_back(ar.get("b" + std::to_string(layers - 1), {3}));
  return d;
}

std::unique_ptr<ConvDenoiser> train_denoiser(const std::vector<Image>& corpus,
                                             const DiffusionSchedule& schedule,
                                             const DenoiserConfig& config, uint64_t seed,
                                             DenoiserTrainingReport* report) {
  if (corpus.empty()) throw std::invalid_argument("denoiser training needs images");
  const int crop = config.crop_size;
  // Patch seeds are whole-image thumbnails, so train on several down-scalings.
  std::vector<Image> pyramid;
  for (const auto& img : corpus) {
    for (int64_t size : {crop, crop * 3 / 2, crop * 2, crop * 3}) {
      if (size <= img.height && size <= img.width) pyramid.push_back(resize_area(img, size, size));
    }
  }
  if (pyramid.empty()) throw std::invalid_argument("corpus images smaller than the crop size");

  auto model = std::make_unique<ConvDenoiser>(schedule.total_steps, config.hidden_channels,
                                              config.layers, seed);
  model->set_trainable(true);
  ad::Adam opt(model->parameters(), config.learning_rate);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int max_t = std::min(config.max_timestep, schedule.total_steps);
  std::uniform_int_distribution<int> pick_t(1, max_t);
  std::uniform_int_distribution<size_t> pick_img(0, pyramid.size() - 1);

  const int64_t n = config.batch_size;
  double ema = 0.0;
  for (int step = 0; step < config.steps; ++step) {
    std::vector<double> xt(n * crop * crop * 3), eps(xt.size());
    std::vector<int> ts(n);
    for (int64_t b = 0; b < n; ++b) {
      const Image& src = pyramid[pick_img(rng)];
      std::uniform_int_distribution<int64_t> oy(0, src.height - crop), ox(0, src.width - crop);
      const int64_t y0 = oy(rng), x0 = ox(rng);
      ts[b] = pick_t(rng);
      const double ab = schedule.alpha_bar(ts[b]);
      const double ca = std::sqrt(ab), cn = std::sqrt(1.0 - ab);
      for (int64_t i = 0; i < crop; ++i)
        for (int64_t j = 0; j < crop; ++j)
          for (int64_t c = 0; c < 3; ++c) {
            const int64_t idx = ((b * crop + i) * crop + j) * 3 + c;
            eps[idx] = normal(rng);
            xt[idx] = ca * src.at(y0 + i, x0 + j, c) + cn * eps[idx];
          }
    }
    auto x = ad::Tensor::constant({n, crop, crop, 3}, std::move(xt));
    auto target = ad::Tensor::constant({n, crop, crop, 3}, std::move(eps));
    auto loss = ad::mean(ad::square(ad::sub(model->predict_batch(x, ts), target)));
    opt.zero_grad();
    loss.backward();
    opt.step();
    const double l = loss.item();
    ema = step == 0 ? l : 0.95 * ema + 0.05 * l;
    if (report && step == 0) report->initial_loss = l;
  }
  if (report) report->final_loss = ema;
  model->set_trainable(false);
  return model;
}

// ---------------------------------------------------------------------------

ad::Tensor forward_noise(const ad::Tensor& x0, int t, const ad::Tensor& z,
                         const DiffusionSchedule& schedule) {
  check_timestep(schedule, t, false);
  if (x0.shape() != z.shape()) {
    throw std::invalid_argument("forward_noise: x0 " + ad::shape_string(x0.shape()) +
                                " and z " + ad::shape_string(z.shape()) + " differ");
  }
  const double ab = schedule.alpha_bar(t);
  return ad::add(ad::mul_scalar(x0, std::sqrt(ab)), ad::mul_scalar(z, std::sqrt(1.0 - ab)));
}

ad::Tensor ddim_step(const ad::Tensor& x_t, int t, int t_prev, const NoisePredictor& predictor,
                     const DiffusionSchedule& schedule) {
  if (t_prev >= t) throw std::invalid_argument("ddim_step needs t_prev < t");
  check_timestep(schedule, t, false);
  check_timestep(schedule, t_prev, true);
  const ad::Tensor eps = predictor.predict(x_t, t);
  if (eps.shape() != x_t.shape()) throw std::runtime_error("predictor changed the patch shape");
  const double ab_t = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t_prev);
  const auto x0_hat =
      ad::mul_scalar(ad::sub(x_t, ad::mul_scalar(eps, std::sqrt(1.0 - ab_t))), 1.0 / std::sqrt(ab_t));
  return ad::add(ad::mul_scalar(x0_hat, std::sqrt(ab_prev)),
                 ad::mul_scalar(eps, std::sqrt(1.0 - ab_prev)));
}

PurifyResult purify(const ad::Tensor& seed, const ad::Tensor& perturbation, const ad::Tensor& z,
                    const NoisePredictor& predictor, const DiffusionSchedule& schedule,
                    bool keep_trajectory) {
  if (seed.shape() != perturbation.shape()) {
    throw std::invalid_argument("purify: seed and perturbation shapes differ");
  }
  if (seed.rank() != 3 || seed.dim(0) != seed.dim(1)) {
    throw std::invalid_argument("purify: patch must be [s,s,C]");
  }
  const auto& desc = predictor.descriptor();
  if (desc.spatial_size != 0 && desc.spatial_size != seed.dim(0)) {
    throw std::invalid_argument("predictor '" + desc.id + "' expects " +
                                std::to_string(desc.spatial_size) + "px patches, got " +
                                std::to_string(seed.dim(0)));
  }
  if (desc.channels != seed.dim(2)) {
    throw std::invalid_argument("predictor channel count does not match the patch");
  }

  PurifyResult result;
  int t = schedule.entry_timestep;
  ad::Tensor x = forward_noise(ad::add(seed, perturbation), t, z, schedule);
  result.timesteps_visited.push_back(t);
  if (keep_trajectory) result.trajectory.push_back(x.detach());
  do {
    const int t_prev = t - schedule.respaced_stride;
    x = ddim_step(x, t, t_prev, predictor, schedule);
    t = t_prev;
    result.timesteps_visited.push_back(t);
    if (keep_trajectory) result.trajectory.push_back(x.detach());
  } while (t >= schedule.respaced_stride);
  result.final_patch = ad::clamp(x, 0.0, 1.0);
  return result;
}

ad::Tensor sample_noise(const ad::Shape& shape, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = normal(rng);
  return ad::Tensor::constant(shape, std::move(v));
}

}  // namespace natpatch::diffusion
