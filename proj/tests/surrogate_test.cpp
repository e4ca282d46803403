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

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include <gtest/gtest.h>

namespace natpatch::surrogate {
namespace {

namespace fs = std::filesystem;

Image random_image(int64_t size, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(size, size, 3);
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

// Quadrant-colored image; `k` picks which quadrant is bright.
Image quadrant_image(int k) {
  Image img(32, 32, 3, 0.1);
  for (int64_t r = 0; r < 32; ++r)
    for (int64_t c = 0; c < 32; ++c)
      if ((r / 16) * 2 + c / 16 == k) img.at(r, c, k % 3) = 0.9;
  return img;
}

ToyModelConfig small_config() {
  ToyModelConfig cfg;
  cfg.d_model = 16;
  cfg.mlp_hidden = 32;
  return cfg;
}

Tokenizer toy_tokenizer() {
  return Tokenizer::from_captions({"a red circle on white", "a blue square on black"});
}

TEST(AttentionTest, HandSoftmaxValue) {
  // One query, two keys: scores 0 and log(2) after the 1/sqrt(d) scaling.
  const double d = 4.0;
  const double scale = std::log(2.0) * std::sqrt(d);
  const auto q = ad::Tensor::constant({1, 4}, {1.0, 0.0, 0.0, 0.0});
  const auto k = ad::Tensor::constant({2, 4}, {0.0, 0.0, 0.0, 0.0, scale, 0.0, 0.0, 0.0});
  const auto w = attention_weights_of(q, k);
  EXPECT_NEAR(w.at(0), 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(w.at(1), 2.0 / 3.0, 1e-12);
}

TEST(AttentionTest, RowsAreDistributions) {
  ToyDualEncoder model(small_config(), toy_tokenizer(), 1);
  const auto enc = model.encode_texts(tokenize(model.tokenizer(), {"a red circle on white"}, 8));
  const auto w = model.attention_weights(to_tensor(random_image(32, 2)), enc);
  ASSERT_TRUE(w.has_value());
  const int64_t g = w->dim(-1);
  EXPECT_EQ(g, 64);
  for (int64_t r = 0; r < w->size() / g; ++r) {
    double s = 0.0;
    for (int64_t c = 0; c < g; ++c) {
      EXPECT_GE(w->at(r * g + c), 0.0);
      s += w->at(r * g + c);
    }
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(AttentionTest, KeyPermutationPermutesWeights) {
  const std::vector<double> qv = {0.3, -0.2, 0.5, 0.1, -0.4, 0.7};
  const std::vector<double> kv = {0.1, 0.2, 0.3, -0.1, 0.4, -0.5, 0.9, 0.0, 0.2};
  const auto w = attention_weights_of(ad::Tensor::constant({2, 3}, qv), ad::Tensor::constant({3, 3}, kv));
  const std::vector<int> perm = {2, 0, 1};
  std::vector<double> permuted(9);
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < 3; ++c) permuted[i * 3 + c] = kv[perm[i] * 3 + c];
  const auto wp =
      attention_weights_of(ad::Tensor::constant({2, 3}, qv), ad::Tensor::constant({3, 3}, permuted));
  for (int r = 0; r < 2; ++r)
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(wp.at(r * 3 + i), w.at(r * 3 + perm[i]), 1e-14);
}

TEST(AttentionMapTest, FusionMapIsNormalizedOverTheGrid) {
  ToyDualEncoder model(small_config(), toy_tokenizer(), 3);
  const auto ids = model.tokenizer().encode("a blue square on black");
  const auto map = cross_attention_map(model, random_image(32, 4), ids);
  EXPECT_EQ(map.grid, 8);
  ASSERT_EQ(map.raw.size(), 64u);
  double s = 0.0;
  for (double v : map.raw) s += v;
  EXPECT_NEAR(s, 1.0, 1e-9);
  EXPECT_NE(map.source.find("fusion"), std::string::npos);
}

TEST(AttentionMapTest, PseudoAttentionFallbackWithoutFusion) {
  auto cfg = small_config();
  cfg.fusion = false;
  ToyDualEncoder model(cfg, toy_tokenizer(), 5);
  const auto ids = model.tokenizer().encode("a red circle on white");
  EXPECT_FALSE(model.attention_weights(to_tensor(random_image(32, 6)),
                                       model.encode_texts(tokenize(model.tokenizer(), {"a red circle on white"}, 8)))
                   .has_value());
  const auto map = cross_attention_map(model, random_image(32, 6), ids);
  EXPECT_NE(map.source.find("pseudo"), std::string::npos);
  double s = 0.0;
  for (double v : map.raw) s += v;
  EXPECT_NEAR(s, 1.0, 1e-9);
  EXPECT_THROW(cross_attention_map(model, random_image(32, 6), ids, false), std::runtime_error);
}

TEST(ToyModelTest, ScoreGradientReachesPixels) {
  ToyDualEncoder model(small_config(), toy_tokenizer(), 7);
  const auto enc =
      model.encode_texts(tokenize(model.tokenizer(), {"a red circle on white", "a blue square on black"}, 8));
  auto img = random_image(32, 8);
  auto x = ad::Tensor::parameter({32, 32, 3}, img.pixels);
  ad::sum(model.score_image(x, enc)).backward();
  double norm = 0.0;
  for (double g : x.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(ToyModelTest, SaveLoadReproducesScores) {
  ToyDualEncoder model(small_config(), toy_tokenizer(), 9);
  const auto texts = tokenize(model.tokenizer(), {"a red circle on white", "a blue square on black"}, 8);
  const auto img = to_tensor(random_image(32, 10));
  const auto path = fs::temp_directory_path() / "natpatch_surrogate_test.ckpt";
  model.save(path);
  const auto loaded = ToyDualEncoder::load(path);
  fs::remove(path);
  const auto a = model.score_image(img, model.encode_texts(texts));
  const auto b = loaded->score_image(img, loaded->encode_texts(texts));
  ASSERT_EQ(a.size(), b.size());
  for (int64_t i = 0; i < a.size(); ++i) EXPECT_EQ(a.at(i), b.at(i));
  EXPECT_EQ(loaded->tokenizer().tokens(), model.tokenizer().tokens());
}

TEST(TokenizerTest, EncodesKnownAndUnknownWords) {
  const auto tok = toy_tokenizer();
  const auto ids = tok.encode("A Red zebra");
  ASSERT_EQ(ids.size(), 3u);
  EXPECT_GE(ids[0], 2);
  EXPECT_GE(ids[1], 2);
  EXPECT_EQ(ids[2], Tokenizer::kUnk);
  const auto batch = tokenize(tok, {"a red circle on white with extra words here"}, 4);
  EXPECT_EQ(batch.ids[0].size(), 4u);
  TextBatch bad{{{2, 999}}, tok.vocab_size(), 8};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

std::vector<TrainingExample> four_image_corpus() {
  const std::vector<std::string> captions = {"a red circle on white", "a green square on white",
                                             "a blue circle on black", "a red square on black"};
  std::vector<TrainingExample> corpus;
  for (int k = 0; k < 4; ++k) corpus.push_back({quadrant_image(k), {captions[k]}, false});
  return corpus;
}

ToyTrainingConfig quick_training() {
  ToyTrainingConfig cfg;
  cfg.model = small_config();
  cfg.epochs = 200;
  cfg.eval_every = 10;
  cfg.max_shift = 0;
  return cfg;
}

TEST(ToyTrainingTest, FourImageCorpusScoresDiagonalHighest) {
  const auto corpus = four_image_corpus();
  ToyTrainingReport report;
  const auto model = train_toy_model(corpus, quick_training(), 11, &report);
  std::vector<Image> images;
  std::vector<std::string> captions;
  for (const auto& ex : corpus) {
    images.push_back(ex.image);
    captions.push_back(ex.captions[0]);
  }
  const auto scores = score_pairs(*model, images, tokenize(model->tokenizer(), captions, 8));
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      if (j != i) EXPECT_GT(scores[i * 4 + i], scores[i * 4 + j]) << i << "," << j;
  EXPECT_EQ(report.train_recall_at_1, 1.0);
}

TEST(ToyTrainingTest, SeededTrainingIsReproducible) {
  const auto corpus = four_image_corpus();
  auto cfg = quick_training();
  cfg.epochs = 20;
  cfg.early_stop = false;
  cfg.recall_floor = 0.0;
  const auto a = train_toy_model(corpus, cfg, 12);
  const auto b = train_toy_model(corpus, cfg, 12);
  const auto texts = tokenize(a->tokenizer(), {"a red circle on white"}, 8);
  const auto img = to_tensor(corpus[1].image);
  EXPECT_EQ(a->score_image(img, a->encode_texts(texts)).item(),
            b->score_image(img, b->encode_texts(texts)).item());
}

TEST(ToyTrainingTest, RejectsSingleImageCorpus) {
  EXPECT_THROW(train_toy_model({{quadrant_image(0), {"a red circle on white"}, false}}, quick_training(), 1),
               std::invalid_argument);
}

TEST(ToyTrainingTest, UnreachableFloorThrows) {
  auto cfg = quick_training();
  cfg.epochs = 1;
  cfg.eval_every = 1;
  cfg.recall_floor = 1.01;
  EXPECT_THROW(train_toy_model(four_image_corpus(), cfg, 1), std::runtime_error);
}

// Returns NaN scores so the load-time probe rejects it.
class BrokenModel final : public SurrogateModel {
 public:
  BrokenModel() : tokenizer_(toy_tokenizer()) {
    desc_.id = "broken";
    desc_.image_size = 8;
    desc_.grid = 2;
    desc_.d_model = 2;
    desc_.heads = 1;
    desc_.max_text_length = 8;
  }
  const ModelDescriptor& descriptor() const override { return desc_; }
  const Tokenizer& tokenizer() const override { return tokenizer_; }
  TextEncoding encode_texts(const TextBatch& texts) const override {
    TextEncoding e;
    e.lengths.assign(texts.size(), 1);
    return e;
  }
  ad::Tensor encode_image(const ad::Tensor&) const override { return ad::Tensor::constant({4, 2}, 0.0); }
  ad::Tensor score_image(const ad::Tensor&, const TextEncoding& texts) const override {
    return ad::Tensor::constant({static_cast<int64_t>(texts.size())},
                                std::numeric_limits<double>::quiet_NaN());
  }
  std::optional<ad::Tensor> attention_weights(const ad::Tensor&, const TextEncoding&) const override {
    return std::nullopt;
  }
  ad::Tensor pooled_text(const TextEncoding&, size_t) const override { return ad::Tensor::constant({2}, 0.0); }
  ad::Tensor joint_visual_tokens(const ad::Tensor&) const override {
    return ad::Tensor::constant({4, 2}, 0.0);
  }

 private:
  ModelDescriptor desc_;
  Tokenizer tokenizer_;
};

TEST(AdapterTest, NonFiniteProbeIsAContractViolation) {
  register_adapter("broken-for-test", [](const fs::path&) { return std::make_shared<BrokenModel>(); });
  try {
    load_external_model({"broken-for-test", "unused"});
    FAIL() << "expected a contract violation";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("contract violation"), std::string::npos);
  }
}

TEST(AdapterTest, UnknownAdapterListsAvailableOnes) {
  try {
    load_external_model({"no-such-adapter", "x"});
    FAIL() << "expected an error";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("toy"), std::string::npos);
  }
}

TEST(AdapterTest, ToyAdapterLoadsSavedCheckpoint) {
  ToyDualEncoder model(small_config(), toy_tokenizer(), 13);
  const auto path = fs::temp_directory_path() / "natpatch_adapter_test.ckpt";
  model.save(path);
  const auto loaded = load_external_model({"toy", path});
  fs::remove(path);
  EXPECT_EQ(loaded->descriptor().grid, 8);
}

}  // namespace
}  // namespace natpatch::surrogate
