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

#include "natpatch/surrogate.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>

#include "natpatch/archive.hpp"

namespace natpatch::surrogate {

// ---------------------------------------------------------------------------
// Tokenizer

Tokenizer::Tokenizer() : Tokenizer(std::vector<std::string>{"[pad]", "[unk]"}) {}

Tokenizer::Tokenizer(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 2 || tokens_[kPad] != "[pad]" || tokens_[kUnk] != "[unk]") {
    throw std::invalid_argument("vocabulary must start with [pad] and [unk]");
  }
  for (size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<int>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

namespace {
std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) {
    std::transform(w.begin(), w.end(), w.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    words.push_back(std::move(w));
  }
  return words;
}
}  // namespace

Tokenizer Tokenizer::from_captions(const std::vector<std::string>& captions) {
  std::vector<std::string> tokens{"[pad]", "[unk]"};
  std::map<std::string, int> seen;
  for (const auto& caption : captions) {
    for (auto& w : split_words(caption)) {
      if (seen.emplace(w, 0).second) tokens.push_back(w);
    }
  }
  return Tokenizer(std::move(tokens));
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary " + path.string());
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) tokens.push_back(line);
  }
  return Tokenizer(std::move(tokens));
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (const auto& t : tokens_) out << t << "\n";
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) {
    auto it = index_.find(w);
    ids.push_back(it == index_.end() ? kUnk : it->second);
  }
  return ids;
}

void TextBatch::validate() const {
  if (ids.empty()) throw std::invalid_argument("empty text batch");
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i].empty()) throw std::invalid_argument("text " + std::to_string(i) + " is empty");
    if (static_cast<int>(ids[i].size()) > max_length) {
      throw std::invalid_argument("text " + std::to_string(i) + " exceeds max length");
    }
    for (int id : ids[i]) {
      if (id < 0 || id >= vocab_size) {
        throw std::invalid_argument("token id " + std::to_string(id) + " outside vocabulary");
      }
    }
  }
}

TextBatch tokenize(const Tokenizer& tokenizer, const std::vector<std::string>& captions,
                   int max_length) {
  TextBatch batch;
  batch.vocab_size = tokenizer.vocab_size();
  batch.max_length = max_length;
  for (const auto& c : captions) {
    auto ids = tokenizer.encode(c);
    if (static_cast<int>(ids.size()) > max_length) ids.resize(max_length);
    batch.ids.push_back(std::move(ids));
  }
  return batch;
}

TextEncoding TextEncoding::select(size_t index) const {
  if (index >= size()) throw std::out_of_range("text index out of range");
  const int64_t len = tokens.dim(1), d = tokens.dim(2);
  std::vector<int64_t> tok_idx(len * d), valid_idx(len);
  for (int64_t i = 0; i < len * d; ++i) tok_idx[i] = static_cast<int64_t>(index) * len * d + i;
  for (int64_t i = 0; i < len; ++i) valid_idx[i] = static_cast<int64_t>(index) * len + i;
  TextEncoding out;
  out.tokens = ad::gather(tokens, std::move(tok_idx), {1, len, d});
  out.valid = ad::gather(valid, std::move(valid_idx), {1, len});
  out.lengths = {lengths[index]};
  return out;
}

// ---------------------------------------------------------------------------
// Toy dual encoder

namespace {

constexpr double kMaskedLogit = -1e9;

// [T, L] validity mask -> [T, L*T... ] pooling matrix mapping flattened token
// scores [*, T*L] to per-text means [*, T].
ad::Tensor token_pooling(const TextEncoding& texts) {
  const int64_t t = texts.tokens.dim(0), len = texts.tokens.dim(1);
  std::vector<double> pool(t * len * t, 0.0);
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t l = 0; l < len; ++l) {
      if (texts.valid.at(i * len + l) > 0.5) pool[(i * len + l) * t + i] = 1.0 / texts.lengths[i];
    }
  }
  return ad::Tensor::constant({t * len, t}, std::move(pool));
}

}  // namespace

ToyDualEncoder::ToyDualEncoder(const ToyModelConfig& config, Tokenizer tokenizer, uint64_t seed)
    : config_(config), tokenizer_(std::move(tokenizer)) {
  if (config.image_size % config.patch_pixels != 0) {
    throw std::invalid_argument("image size must be a multiple of the patch size");
  }
  if (config.d_model % config.heads != 0) {
    throw std::invalid_argument("d_model must be divisible by heads");
  }
  const int64_t g = config.image_size / config.patch_pixels;
  const int64_t d = config.d_model, dh = d / config.heads;
  descriptor_ = {config.fusion ? "toy-fusion" : "toy-dual", config.image_size, g, d,
                 config.heads, config.max_text_length, config.fusion};

  std::mt19937_64 rng(seed);
  auto init = [&](ad::Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = dist(rng);
    return ad::Tensor::constant(std::move(shape), std::move(v));
  };
  auto zeros = [](ad::Shape shape) { return ad::Tensor::constant(std::move(shape), 0.0); };
  auto init_block = [&](Block& b) {
    for (int64_t h = 0; h < config.heads; ++h) {
      b.wq.push_back(init({d, dh}, 1.0 / std::sqrt(d)));
      b.wk.push_back(init({d, dh}, 1.0 / std::sqrt(d)));
      b.wv.push_back(init({d, dh}, 1.0 / std::sqrt(d)));
      b.wo.push_back(init({dh, d}, 0.5 / std::sqrt(dh)));
    }
    b.w1 = init({d, config.mlp_hidden}, 1.0 / std::sqrt(d));
    b.b1 = zeros({config.mlp_hidden});
    b.w2 = init({config.mlp_hidden, d}, 0.5 / std::sqrt(config.mlp_hidden));
    b.b2 = zeros({d});
  };

  const int64_t patch_dim = config.patch_pixels * config.patch_pixels * 3;
  patch_w_ = init({patch_dim, d}, 1.0 / std::sqrt(patch_dim));
  patch_b_ = zeros({d});
  image_pos_ = init({g * g, d}, 0.1);
  init_block(image_block_);
  token_embed_ = init({tokenizer_.vocab_size(), d}, 1.0);
  text_pos_ = init({config.max_text_length, d}, 0.1);
  init_block(text_block_);
  for (int64_t h = 0; h < config.heads; ++h) {
    xq_.push_back(init({d, dh}, 1.0 / std::sqrt(d)));
    xk_.push_back(init({d, dh}, 1.0 / std::sqrt(d)));
    xv_.push_back(init({d, dh}, 1.0 / std::sqrt(d)));
    xo_.push_back(init({dh, d}, 1.0 / std::sqrt(dh)));
  }
  score_w_ = init({d, d}, 1.0 / std::sqrt(d));
  image_proj_ = init({d, d}, 1.0 / std::sqrt(d));
  text_proj_ = init({d, d}, 1.0 / std::sqrt(d));
  logit_scale_ = ad::Tensor::constant({}, std::log(config.fusion ? 1.0 : 10.0));
  register_params();
}

void ToyDualEncoder::register_params() {
  named_.clear();
  named_.emplace_back("patch_w", &patch_w_);
  named_.emplace_back("patch_b", &patch_b_);
  named_.emplace_back("image_pos", &image_pos_);
  named_.emplace_back("token_embed", &token_embed_);
  named_.emplace_back("text_pos", &text_pos_);
  auto add_block = [&](const std::string& prefix, Block& b) {
    for (size_t h = 0; h < b.wq.size(); ++h) {
      const std::string hs = std::to_string(h);
      named_.emplace_back(prefix + ".wq" + hs, &b.wq[h]);
      named_.emplace_back(prefix + ".wk" + hs, &b.wk[h]);
      named_.emplace_back(prefix + ".wv" + hs, &b.wv[h]);
      named_.emplace_back(prefix + ".wo" + hs, &b.wo[h]);
    }
    named_.emplace_back(prefix + ".w1", &b.w1);
    named_.emplace_back(prefix + ".b1", &b.b1);
    named_.emplace_back(prefix + ".w2", &b.w2);
    named_.emplace_back(prefix + ".b2", &b.b2);
  };
  add_block("image_block", image_block_);
  if (config_.text_context) add_block("text_block", text_block_);
  if (config_.fusion) {
    for (size_t h = 0; h < xq_.size(); ++h) {
      const std::string hs = std::to_string(h);
      named_.emplace_back("fusion.wq" + hs, &xq_[h]);
      named_.emplace_back("fusion.wk" + hs, &xk_[h]);
      named_.emplace_back("fusion.wv" + hs, &xv_[h]);
      named_.emplace_back("fusion.wo" + hs, &xo_[h]);
    }
    named_.emplace_back("score_w", &score_w_);
  } else {
    named_.emplace_back("image_proj", &image_proj_);
    named_.emplace_back("text_proj", &text_proj_);
  }
  named_.emplace_back("logit_scale", &logit_scale_);
}

std::vector<ad::Tensor> ToyDualEncoder::parameters() const {
  std::vector<ad::Tensor> out;
  for (const auto& [name, t] : named_) out.push_back(*t);
  return out;
}

void ToyDualEncoder::set_trainable(bool flag) {
  for (auto& [name, t] : named_) t->set_requires_grad(flag);
}

ad::Tensor ToyDualEncoder::run_block(const Block& block, const ad::Tensor& x,
                                     const ad::Tensor* key_bias) const {
  const double scale = 1.0 / std::sqrt(static_cast<double>(config_.d_model / config_.heads));
  const ad::Tensor h = ad::layer_norm_last(x);
  ad::Tensor attn_out;
  for (size_t head = 0; head < block.wq.size(); ++head) {
    auto q = ad::matmul(h, block.wq[head]);
    auto k = ad::matmul(h, block.wk[head]);
    auto v = ad::matmul(h, block.wv[head]);
    auto logits = ad::mul_scalar(ad::matmul(q, k, true), scale);
    if (key_bias) logits = ad::add(logits, *key_bias);
    auto o = ad::matmul(ad::matmul(ad::softmax_last(logits), v), block.wo[head]);
    attn_out = attn_out.defined() ? ad::add(attn_out, o) : o;
  }
  auto y = ad::add(x, attn_out);
  auto m = ad::gelu(ad::add(ad::matmul(ad::layer_norm_last(y), block.w1), block.b1));
  return ad::add(y, ad::add(ad::matmul(m, block.w2), block.b2));
}

ad::Tensor ToyDualEncoder::encode_images(const ad::Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != config_.image_size ||
      images.dim(2) != config_.image_size || images.dim(3) != 3) {
    throw std::invalid_argument("model expects images of " + std::to_string(config_.image_size) +
                                "x" + std::to_string(config_.image_size) + "x3, got " +
                                ad::shape_string(images.shape()));
  }
  const int64_t n = images.dim(0), s = config_.image_size, p = config_.patch_pixels;
  const int64_t g = s / p, pd = p * p * 3;
  std::vector<int64_t> index(n * g * g * pd);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t gy = 0; gy < g; ++gy)
      for (int64_t gx = 0; gx < g; ++gx)
        for (int64_t py = 0; py < p; ++py)
          for (int64_t px = 0; px < p; ++px)
            for (int64_t c = 0; c < 3; ++c) {
              const int64_t dst = ((b * g * g + gy * g + gx) * p + py) * p * 3 + px * 3 + c;
              index[dst] = ((b * s + gy * p + py) * s + gx * p + px) * 3 + c;
            }
  auto patches = ad::gather(images, std::move(index), {n, g * g, pd});
  auto x = ad::add(ad::add(ad::matmul(patches, patch_w_), patch_b_), image_pos_);
  return ad::layer_norm_last(run_block(image_block_, x, nullptr));
}

ad::Tensor ToyDualEncoder::encode_image(const ad::Tensor& image) const {
  if (image.rank() != 3) throw std::invalid_argument("encode_image expects [H,W,3]");
  auto batched = ad::reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  auto tokens = encode_images(batched);
  return ad::reshape(tokens, {tokens.dim(1), tokens.dim(2)});
}

TextEncoding ToyDualEncoder::encode_texts(const TextBatch& texts) const {
  texts.validate();
  if (texts.vocab_size != tokenizer_.vocab_size()) {
    throw std::invalid_argument("text batch was tokenized with a different vocabulary");
  }
  const int64_t t = static_cast<int64_t>(texts.size());
  int64_t len = 0;
  for (const auto& ids : texts.ids) len = std::max<int64_t>(len, ids.size());
  if (len > config_.max_text_length) throw std::invalid_argument("text longer than model limit");
  const int64_t d = config_.d_model;

  std::vector<int64_t> emb_idx(t * len * d);
  std::vector<double> valid(t * len, 0.0), bias(t * len * len, 0.0);
  TextEncoding enc;
  for (int64_t i = 0; i < t; ++i) {
    const auto& ids = texts.ids[i];
    enc.lengths.push_back(static_cast<int>(ids.size()));
    for (int64_t l = 0; l < len; ++l) {
      const bool ok = l < static_cast<int64_t>(ids.size());
      const int64_t id = ok ? ids[l] : Tokenizer::kPad;
      for (int64_t j = 0; j < d; ++j) emb_idx[(i * len + l) * d + j] = id * d + j;
      valid[i * len + l] = ok ? 1.0 : 0.0;
      if (!ok) {
        for (int64_t q = 0; q < len; ++q) bias[(i * len + q) * len + l] = kMaskedLogit;
      }
    }
  }
  std::vector<int64_t> pos_idx(len * d);
  for (int64_t i = 0; i < len * d; ++i) pos_idx[i] = i;
  auto x = ad::add(ad::gather(token_embed_, std::move(emb_idx), {t, len, d}),
                   ad::gather(text_pos_, std::move(pos_idx), {len, d}));
  auto key_bias = ad::Tensor::constant({t, len, len}, std::move(bias));
  enc.tokens = ad::layer_norm_last(config_.text_context ? run_block(text_block_, x, &key_bias) : x);
  enc.valid = ad::Tensor::constant({t, len}, std::move(valid));
  return enc;
}

ad::Tensor ToyDualEncoder::pooled_texts(const TextEncoding& texts) const {
  const int64_t t = texts.tokens.dim(0), len = texts.tokens.dim(1), d = texts.tokens.dim(2);
  std::vector<double> w(t * len);
  for (int64_t i = 0; i < t; ++i)
    for (int64_t l = 0; l < len; ++l) w[i * len + l] = texts.valid.at(i * len + l) / texts.lengths[i];
  auto weights = ad::Tensor::constant({t, len, 1}, std::move(w));
  auto pooled = ad::reshape(ad::matmul(ad::transpose_last(texts.tokens), weights), {t, d});
  return ad::layer_norm_last(ad::matmul(pooled, text_proj_));
}

ad::Tensor ToyDualEncoder::score_tokens(const ad::Tensor& image_tokens,
                                        const TextEncoding& texts) const {
  const int64_t g = image_tokens.dim(1), d = config_.d_model;
  const int64_t t = texts.tokens.dim(0), len = texts.tokens.dim(1);
  if (!config_.fusion) {
    auto pooled = ad::mul_scalar(ad::sum_last(ad::transpose_last(image_tokens)), 1.0 / g);
    auto img = ad::layer_norm_last(ad::matmul(pooled, image_proj_));
    return ad::mul_scalar(ad::matmul(img, pooled_texts(texts), true), 1.0 / d);
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d / config_.heads));
  auto text_flat = ad::reshape(texts.tokens, {t * len, d});
  ad::Tensor fused;
  for (size_t h = 0; h < xq_.size(); ++h) {
    auto q = ad::matmul(text_flat, xq_[h]);                          // [TL, dh]
    auto k = ad::matmul(image_tokens, xk_[h]);                       // [I, G, dh]
    auto v = ad::matmul(image_tokens, xv_[h]);                       // [I, G, dh]
    auto a = ad::softmax_last(ad::mul_scalar(ad::matmul(q, k, true), scale));  // [I, TL, G]
    auto o = ad::matmul(ad::matmul(a, v), xo_[h]);                   // [I, TL, d]
    fused = fused.defined() ? ad::add(fused, o) : o;
  }
  auto match = ad::sum_last(ad::mul(fused, ad::matmul(text_flat, score_w_)));  // [I, TL]
  return ad::mul_scalar(ad::matmul(match, token_pooling(texts)), 1.0 / std::sqrt(d));
}

ad::Tensor ToyDualEncoder::score_image(const ad::Tensor& image, const TextEncoding& texts) const {
  auto tokens = encode_image(image);
  auto scores = score_tokens(ad::reshape(tokens, {1, tokens.dim(0), tokens.dim(1)}), texts);
  return ad::reshape(scores, {static_cast<int64_t>(texts.size())});
}

std::optional<ad::Tensor> ToyDualEncoder::attention_weights(const ad::Tensor& image,
                                                            const TextEncoding& caption) const {
  if (!config_.fusion) return std::nullopt;
  if (caption.size() != 1) throw std::invalid_argument("attention_weights takes one caption");
  const double scale = 1.0 / std::sqrt(static_cast<double>(config_.d_model / config_.heads));
  auto tokens = encode_image(image);
  auto text = ad::reshape(caption.tokens, {caption.tokens.dim(1), caption.tokens.dim(2)});
  std::vector<ad::Tensor> heads;
  for (size_t h = 0; h < xq_.size(); ++h) {
    auto q = ad::matmul(text, xq_[h]);
    auto k = ad::matmul(tokens, xk_[h]);
    heads.push_back(ad::softmax_last(ad::mul_scalar(ad::matmul(q, k, true), scale)));
  }
  return ad::stack(heads);
}

ad::Tensor ToyDualEncoder::pooled_text(const TextEncoding& texts, size_t index) const {
  auto one = texts.select(index);
  auto pooled = pooled_texts(one);
  return ad::reshape(pooled, {config_.d_model});
}

ad::Tensor ToyDualEncoder::joint_visual_tokens(const ad::Tensor& image) const {
  return ad::layer_norm_last(ad::matmul(encode_image(image), image_proj_));
}

void ToyDualEncoder::save(const std::filesystem::path& path) const {
  Archive ar;
  ar.descriptor = {{"kind", "toy-dual-encoder"},
                   {"id", descriptor_.id},
                   {"image_size", config_.image_size},
                   {"patch_pixels", config_.patch_pixels},
                   {"d_model", config_.d_model},
                   {"heads", config_.heads},
                   {"mlp_hidden", config_.mlp_hidden},
                   {"max_text_length", config_.max_text_length},
                   {"fusion", config_.fusion},
                   {"text_context", config_.text_context},
                   {"vocabulary", tokenizer_.tokens()}};
  for (const auto& [name, t] : named_) ar.tensors[name] = t->detach();
  save_archive(ar, path);
}

std::unique_ptr<ToyDualEncoder> ToyDualEncoder::load(const std::filesystem::path& path) {
  Archive ar = load_archive(path);
  const auto& d = ar.descriptor;
  if (d.value("kind", "") != "toy-dual-encoder") {
    throw std::runtime_error(path.string() + " does not hold a toy dual encoder");
  }
  ToyModelConfig cfg;
  cfg.image_size = d.at("image_size").get<int64_t>();
  cfg.patch_pixels = d.at("patch_pixels").get<int64_t>();
  cfg.d_model = d.at("d_model").get<int64_t>();
  cfg.heads = d.at("heads").get<int64_t>();
  cfg.mlp_hidden = d.at("mlp_hidden").get<int64_t>();
  cfg.max_text_length = d.at("max_text_length").get<int>();
  cfg.fusion = d.at("fusion").get<bool>();
  cfg.text_context = d.value("text_context", true);
  auto model = std::make_unique<ToyDualEncoder>(
      cfg, Tokenizer(d.at("vocabulary").get<std::vector<std::string>>()), 0);
  for (auto& [name, t] : model->named_) *t = ar.get(name, t->shape());
  return model;
}

// ---------------------------------------------------------------------------

ad::Tensor attention_weights_of(const ad::Tensor& queries, const ad::Tensor& keys) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(queries.dim(-1)));
  return ad::softmax_last(ad::mul_scalar(ad::matmul(queries, keys, true), scale));
}

std::vector<double> score_pairs(const SurrogateModel& model, const std::vector<Image>& images,
                                const TextBatch& texts) {
  if (images.empty()) throw std::invalid_argument("score_pairs: no images");
  const auto enc = model.encode_texts(texts);
  std::vector<double> out;
  out.reserve(images.size() * texts.size());
  for (const auto& img : images) {
    if (img.height != model.descriptor().image_size || img.width != model.descriptor().image_size) {
      throw std::invalid_argument("image size does not match the model");
    }
    auto row = model.score_image(to_tensor(img), enc);
    out.insert(out.end(), row.values().begin(), row.values().end());
  }
  return out;
}

AttentionMap cross_attention_map(const SurrogateModel& model, const Image& image,
                                 const std::vector<int>& caption_ids, bool allow_pseudo) {
  TextBatch batch;
  batch.ids = {caption_ids};
  batch.vocab_size = model.tokenizer().vocab_size();
  batch.max_length = model.descriptor().max_text_length;
  const auto enc = model.encode_texts(batch);
  const auto img = to_tensor(image);
  const int64_t g = model.descriptor().grid;

  AttentionMap map;
  map.grid = g;
  map.raw.assign(g * g, 0.0);
  if (auto weights = model.attention_weights(img, enc)) {
    const int64_t heads = weights->dim(0), len = weights->dim(1), cells = weights->dim(2);
    if (cells != g * g) throw std::runtime_error("attention width does not match the grid");
    int64_t rows = 0;
    for (int64_t h = 0; h < heads; ++h) {
      for (int64_t l = 0; l < len; ++l) {
        if (enc.valid.at(l) < 0.5) continue;
        ++rows;
        for (int64_t c = 0; c < cells; ++c) map.raw[c] += weights->at((h * len + l) * cells + c);
      }
    }
    for (auto& v : map.raw) v /= static_cast<double>(rows);
    map.source = "fusion cross-attention: mean over heads and text tokens";
    return map;
  }
  if (!allow_pseudo) {
    throw std::runtime_error("model '" + model.descriptor().id +
                             "' has no fusion block and pseudo-attention is disabled");
  }
  auto visual = model.joint_visual_tokens(img);                        // [G, d]
  auto text = ad::reshape(model.pooled_text(enc, 0), {1, visual.dim(1)});  // [1, d]
  auto weights = attention_weights_of(text, visual);                   // [1, G]
  std::copy(weights.values().begin(), weights.values().end(), map.raw.begin());
  map.source = "pseudo-attention: softmax(visual . pooled_text / sqrt(d))";
  return map;
}

// ---------------------------------------------------------------------------
// Training

namespace {

Image shifted(const Image& img, int dy, int dx) {
  Image out(img.height, img.width, img.channels);
  for (int64_t r = 0; r < img.height; ++r)
    for (int64_t c = 0; c < img.width; ++c) {
      const int64_t sr = std::clamp<int64_t>(r - dy, 0, img.height - 1);
      const int64_t sc = std::clamp<int64_t>(c - dx, 0, img.width - 1);
      for (int64_t ch = 0; ch < img.channels; ++ch) out.at(r, c, ch) = img.at(sr, sc, ch);
    }
  return out;
}

ad::Tensor batch_images(const std::vector<const Image*>& images) {
  const int64_t n = static_cast<int64_t>(images.size());
  const Image& first = *images.front();
  std::vector<double> data;
  data.reserve(n * first.pixels.size());
  for (const auto* img : images) data.insert(data.end(), img->pixels.begin(), img->pixels.end());
  return ad::Tensor::constant({n, first.height, first.width, first.channels}, std::move(data));
}

// Fraction of images whose own (first) caption is the row argmax; ties go to
// the smaller index.
double recall_at_1(const ToyDualEncoder& model, const std::vector<const TrainingExample*>& set) {
  if (set.empty()) return 0.0;
  std::vector<std::string> captions;
  std::vector<const Image*> images;
  for (const auto* ex : set) {
    captions.push_back(ex->captions.front());
    images.push_back(&ex->image);
  }
  const auto enc = model.encode_texts(
      tokenize(model.tokenizer(), captions, model.descriptor().max_text_length));
  const auto scores = model.score_tokens(model.encode_images(batch_images(images)), enc);
  const int64_t n = static_cast<int64_t>(set.size());
  int hits = 0;
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < n; ++j) {
      if (scores.at(i * n + j) > scores.at(i * n + best)) best = j;
    }
    hits += best == i;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace

std::unique_ptr<ToyDualEncoder> train_toy_model(const std::vector<TrainingExample>& corpus,
                                                const ToyTrainingConfig& config, uint64_t seed,
                                                ToyTrainingReport* report) {
  if (corpus.size() < 2) throw std::invalid_argument("toy training needs at least 2 images");
  std::vector<std::string> all_captions;
  for (const auto& ex : corpus) {
    if (ex.captions.empty()) throw std::invalid_argument("every training image needs a caption");
    all_captions.insert(all_captions.end(), ex.captions.begin(), ex.captions.end());
  }
  std::vector<const TrainingExample*> train, held_out;
  for (const auto& ex : corpus) (ex.held_out ? held_out : train).push_back(&ex);
  if (train.size() < 2) throw std::invalid_argument("toy training needs at least 2 training images");
  if (held_out.empty()) held_out = train;

  auto model = std::make_unique<ToyDualEncoder>(config.model, Tokenizer::from_captions(all_captions),
                                                seed);
  model->set_trainable(true);
  ad::Adam opt(model->parameters(), config.learning_rate);
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  std::uniform_int_distribution<int> shift(-config.max_shift, config.max_shift);
  const int64_t n = static_cast<int64_t>(train.size());

  ToyTrainingReport rep;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<Image> augmented;
    augmented.reserve(n);
    std::vector<std::string> captions;
    for (const auto* ex : train) {
      augmented.push_back(shifted(ex->image, shift(rng), shift(rng)));
      std::uniform_int_distribution<size_t> pick(0, ex->captions.size() - 1);
      captions.push_back(ex->captions[pick(rng)]);
    }
    std::vector<const Image*> ptrs;
    for (const auto& img : augmented) ptrs.push_back(&img);

    const auto enc = model->encode_texts(
        tokenize(model->tokenizer(), captions, config.model.max_text_length));
    auto scores = model->score_tokens(model->encode_images(batch_images(ptrs)), enc);
    auto logits = ad::mul(scores, ad::exp(model->logit_scale()));
    std::vector<int64_t> diag(n);
    for (int64_t i = 0; i < n; ++i) diag[i] = i * n + i;
    auto rows = ad::gather(ad::log_softmax_last(logits), diag, {n});
    auto cols = ad::gather(ad::log_softmax_last(ad::transpose_last(logits)), diag, {n});
    auto loss = ad::mul_scalar(ad::add(ad::sum(rows), ad::sum(cols)), -0.5 / n);

    opt.zero_grad();
    loss.backward();
    opt.step();
    rep.final_loss = loss.item();
    rep.epochs_run = epoch;

    if (epoch % config.eval_every == 0 || epoch == config.epochs) {
      rep.held_out_recall_at_1 = recall_at_1(*model, held_out);
      rep.train_recall_at_1 = recall_at_1(*model, train);
      if (config.early_stop && rep.held_out_recall_at_1 >= config.recall_floor &&
          rep.train_recall_at_1 >= 1.0) {
        break;
      }
    }
  }
  model->set_trainable(false);
  if (report) *report = rep;
  if (rep.held_out_recall_at_1 < config.recall_floor) {
    throw std::runtime_error("toy model reached held-out R@1 " +
                             std::to_string(rep.held_out_recall_at_1) + " after " +
                             std::to_string(rep.epochs_run) + " epochs, below the floor " +
                             std::to_string(config.recall_floor));
  }
  return model;
}

// ---------------------------------------------------------------------------
// Adapters

namespace {

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, AdapterLoader>& registry() {
  static std::map<std::string, AdapterLoader> r = {
      {"toy", [](const std::filesystem::path& p) -> std::shared_ptr<const SurrogateModel> {
         return ToyDualEncoder::load(p);
       }}};
  return r;
}

}  // namespace

void register_adapter(const std::string& name, AdapterLoader loader) {
  std::lock_guard lock(registry_mutex());
  registry()[name] = std::move(loader);
}

std::vector<std::string> available_adapters() {
  std::lock_guard lock(registry_mutex());
  std::vector<std::string> names;
  for (const auto& [name, loader] : registry()) names.push_back(name);
  return names;
}

void verify_model_contract(const SurrogateModel& model) {
  const auto& desc = model.descriptor();
  Image probe(desc.image_size, desc.image_size, 3);
  for (int64_t r = 0; r < probe.height; ++r)
    for (int64_t c = 0; c < probe.width; ++c)
      for (int64_t ch = 0; ch < 3; ++ch)
        probe.at(r, c, ch) = 0.25 + 0.5 * static_cast<double>((r + c + ch) % 7) / 6.0;
  const auto& vocab = model.tokenizer().tokens();
  std::vector<int> ids;
  for (int i = 2; i < static_cast<int>(vocab.size()) && static_cast<int>(ids.size()) < 3; ++i) {
    ids.push_back(i);
  }
  if (ids.empty()) ids.push_back(Tokenizer::kUnk);
  TextBatch batch{{ids}, model.tokenizer().vocab_size(), desc.max_text_length};
  const auto enc = model.encode_texts(batch);
  const auto scores = model.score_image(to_tensor(probe), enc);
  for (double s : scores.values()) {
    if (!std::isfinite(s)) {
      throw std::runtime_error("contract violation: model '" + desc.id +
                               "' produced a non-finite score on the probe image");
    }
  }
  if (auto weights = model.attention_weights(to_tensor(probe), enc)) {
    const int64_t width = weights->dim(-1);
    for (int64_t r = 0; r < weights->size() / width; ++r) {
      double s = 0.0;
      for (int64_t c = 0; c < width; ++c) {
        const double w = weights->at(r * width + c);
        if (!(w >= 0.0)) throw std::runtime_error("contract violation: negative attention weight");
        s += w;
      }
      if (std::abs(s - 1.0) > 1e-5) {
        throw std::runtime_error("contract violation: attention row does not sum to 1");
      }
    }
  }
}

std::shared_ptr<const SurrogateModel> load_external_model(const AdapterSpec& spec) {
  AdapterLoader loader;
  {
    std::lock_guard lock(registry_mutex());
    auto it = registry().find(spec.adapter);
    if (it == registry().end()) {
      std::string names;
      for (const auto& [name, l] : registry()) names += (names.empty() ? "" : ", ") + name;
      throw std::invalid_argument("unknown adapter '" + spec.adapter + "'; available: " + names);
    }
    loader = it->second;
  }
  std::shared_ptr<const SurrogateModel> model;
  try {
    model = loader(spec.checkpoint);
  } catch (const std::exception& e) {
    throw std::runtime_error("adapter '" + spec.adapter + "' failed to load " +
                             spec.checkpoint.string() + ": " + e.what());
  }
  verify_model_contract(*model);
  return model;
}

}  // namespace natpatch::surrogate
