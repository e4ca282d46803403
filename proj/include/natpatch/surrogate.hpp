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

// Vision-language surrogate models: a closed-vocabulary tokenizer, the model
// interface the attack differentiates through, a trainable toy dual encoder
// with a cross-attention fusion block, and the adapter registry used to load
// checkpoints.

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "natpatch/autograd.hpp"
#include "natpatch/image.hpp"

namespace natpatch::surrogate {

class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Tokenizer();
  explicit Tokenizer(std::vector<std::string> tokens);
  // Builds a vocabulary from whitespace-split, lower-cased captions; token
  // order is first occurrence after the two reserved entries.
  static Tokenizer from_captions(const std::vector<std::string>& captions);
  // One token per line.
  static Tokenizer load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::vector<int> encode(const std::string& text) const;
  int vocab_size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

struct TextBatch {
  std::vector<std::vector<int>> ids;
  int vocab_size = 0;
  int max_length = 0;

  size_t size() const { return ids.size(); }
  // Throws if an id is out of vocabulary, a sequence is empty or too long.
  void validate() const;
};

TextBatch tokenize(const Tokenizer& tokenizer, const std::vector<std::string>& captions,
                   int max_length);

struct ModelDescriptor {
  std::string id;
  int64_t image_size = 0;
  int64_t grid = 0;  // visual tokens form a grid x grid lattice
  int64_t d_model = 0;
  int64_t heads = 0;
  int max_text_length = 0;
  bool has_fusion = false;
};

// Text side of the model, computed once per text pool. Opaque to callers.
struct TextEncoding {
  ad::Tensor tokens;        // [T, L, d]
  ad::Tensor valid;         // [T, L] of 0/1
  std::vector<int> lengths;
  size_t size() const { return lengths.size(); }
  TextEncoding select(size_t index) const;
};

class SurrogateModel {
 public:
  virtual ~SurrogateModel() = default;

  virtual const ModelDescriptor& descriptor() const = 0;
  virtual const Tokenizer& tokenizer() const = 0;

  virtual TextEncoding encode_texts(const TextBatch& texts) const = 0;
  // image: [H,W,3] -> visual tokens [G, d]
  virtual ad::Tensor encode_image(const ad::Tensor& image) const = 0;
  // Match scores of one image against every encoded text: [T].
  virtual ad::Tensor score_image(const ad::Tensor& image, const TextEncoding& texts) const = 0;
  // Softmax weights of the fusion block for one caption, [heads, L, G], or
  // nullopt when the model has no fusion block.
  virtual std::optional<ad::Tensor> attention_weights(const ad::Tensor& image,
                                                      const TextEncoding& caption) const = 0;
  // Joint-space embeddings used by the pseudo-attention fallback: pooled text
  // [d] of caption `index` and per-token visual embeddings [G, d].
  virtual ad::Tensor pooled_text(const TextEncoding& texts, size_t index) const = 0;
  virtual ad::Tensor joint_visual_tokens(const ad::Tensor& image) const = 0;
};

struct ToyModelConfig {
  int64_t image_size = 32;
  int64_t patch_pixels = 4;
  int64_t d_model = 32;
  int64_t heads = 2;
  int64_t mlp_hidden = 64;
  int max_text_length = 8;
  bool fusion = true;  // false gives a CLIP-style dual encoder scored by cosine
  // Self-attention over caption tokens. Without it each word keeps its own
  // embedding, which generalizes better to unseen word combinations.
  bool text_context = true;
};

class ToyDualEncoder final : public SurrogateModel {
 public:
  ToyDualEncoder(const ToyModelConfig& config, Tokenizer tokenizer, uint64_t seed);
  ToyDualEncoder(const ToyDualEncoder&) = delete;
  ToyDualEncoder& operator=(const ToyDualEncoder&) = delete;

  const ModelDescriptor& descriptor() const override { return descriptor_; }
  const Tokenizer& tokenizer() const override { return tokenizer_; }
  const ToyModelConfig& config() const { return config_; }

  TextEncoding encode_texts(const TextBatch& texts) const override;
  ad::Tensor encode_image(const ad::Tensor& image) const override;
  ad::Tensor score_image(const ad::Tensor& image, const TextEncoding& texts) const override;
  std::optional<ad::Tensor> attention_weights(const ad::Tensor& image,
                                              const TextEncoding& caption) const override;
  ad::Tensor pooled_text(const TextEncoding& texts, size_t index) const override;
  ad::Tensor joint_visual_tokens(const ad::Tensor& image) const override;

  // Batched paths used by training: images [I,H,W,3] -> tokens [I,G,d];
  // scores [I,T].
  ad::Tensor encode_images(const ad::Tensor& images) const;
  ad::Tensor score_tokens(const ad::Tensor& image_tokens, const TextEncoding& texts) const;

  std::vector<ad::Tensor> parameters() const;
  // Learned log-temperature for contrastive training.
  const ad::Tensor& logit_scale() const { return logit_scale_; }
  void set_trainable(bool flag);
  void save(const std::filesystem::path& path) const;
  static std::unique_ptr<ToyDualEncoder> load(const std::filesystem::path& path);

 private:
  struct Block {
    std::vector<ad::Tensor> wq, wk, wv, wo;  // per head
    ad::Tensor w1, b1, w2, b2;
  };

  ad::Tensor run_block(const Block& block, const ad::Tensor& x, const ad::Tensor* key_bias) const;
  void register_params();
  ad::Tensor pooled_texts(const TextEncoding& texts) const;  // [T, d], joint space

  ToyModelConfig config_;
  ModelDescriptor descriptor_;
  Tokenizer tokenizer_;

  ad::Tensor patch_w_, patch_b_, image_pos_;
  Block image_block_;
  ad::Tensor token_embed_, text_pos_;
  Block text_block_;
  // Fusion (cross-attention, text queries over visual keys/values) and head.
  std::vector<ad::Tensor> xq_, xk_, xv_, xo_;
  ad::Tensor score_w_;
  // Dual-encoder projections when fusion is disabled.
  ad::Tensor image_proj_, text_proj_;
  ad::Tensor logit_scale_;

  std::vector<std::pair<std::string, ad::Tensor*>> named_;
};

// Softmax(Q K^T / sqrt(d)) for Q [L,d], K [G,d]; exposed for oracle tests.
ad::Tensor attention_weights_of(const ad::Tensor& queries, const ad::Tensor& keys);

// Scores every image against every text: values [num_images x num_texts].
std::vector<double> score_pairs(const SurrogateModel& model, const std::vector<Image>& images,
                                const TextBatch& texts);

struct AttentionMap {
  int64_t grid = 0;
  std::vector<double> raw;  // grid x grid, row-major
  std::string source;
};

// Text-to-image attention mass per visual token: mean over heads and over
// the caption's tokens. Models without a fusion block fall back to
// softmax(visual_token . pooled_text / sqrt(d)) when allow_pseudo is set.
AttentionMap cross_attention_map(const SurrogateModel& model, const Image& image,
                                 const std::vector<int>& caption_ids, bool allow_pseudo = true);

struct TrainingExample {
  Image image;
  std::vector<std::string> captions;
  bool held_out = false;
};

struct ToyTrainingConfig {
  ToyModelConfig model;
  int epochs = 400;
  double learning_rate = 3e-3;
  double recall_floor = 0.9;
  int eval_every = 25;
  // Stop once the held-out floor is met and the training set is retrieved
  // perfectly.
  bool early_stop = true;
  // Seeded pixel shifts of up to this many pixels during training.
  int max_shift = 2;
};

struct ToyTrainingReport {
  double train_recall_at_1 = 0.0;
  double held_out_recall_at_1 = 0.0;
  int epochs_run = 0;
  double final_loss = 0.0;
};

// Contrastive training of the toy model. Throws if the held-out R@1 stays
// below the configured floor.
std::unique_ptr<ToyDualEncoder> train_toy_model(const std::vector<TrainingExample>& corpus,
                                                const ToyTrainingConfig& config, uint64_t seed,
                                                ToyTrainingReport* report = nullptr);

// Adapter registry: name -> loader(checkpoint path). "toy" is built in.
using AdapterLoader =
    std::function<std::shared_ptr<const SurrogateModel>(const std::filesystem::path&)>;

struct AdapterSpec {
  std::string adapter;
  std::filesystem::path checkpoint;
};

void register_adapter(const std::string& name, AdapterLoader loader);
std::vector<std::string> available_adapters();
// Loads and probes the model: non-finite probe scores or malformed attention
// rows raise a contract-violation error.
std::shared_ptr<const SurrogateModel> load_external_model(const AdapterSpec& spec);
void verify_model_contract(const SurrogateModel& model);

}  // namespace natpatch::surrogate
