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

// Batch orchestration: dataset manifests, the toy corpus, model training and
// loading, seeded attack runs over a worker pool, ablations and summaries.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "natpatch/attack.hpp"
#include "natpatch/diffusion.hpp"
#include "natpatch/retrieval.hpp"
#include "natpatch/surrogate.hpp"

namespace natpatch::experiment {

struct DatasetRecord {
  std::string id;
  std::filesystem::path image;  // absolute after ingestion
  std::vector<std::string> captions;
  std::string split = "test";
};

struct DatasetManifest {
  std::vector<DatasetRecord> records;
  std::filesystem::path source;
  std::string provenance;

  std::vector<size_t> indices_of(const std::string& split) const;  // "all" selects everything
};

// Line-delimited JSON: {"id", "image", "captions", "split"?}. Relative image
// paths resolve against the manifest's directory.
DatasetManifest ingest_manifest(const std::filesystem::path& path);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

inline constexpr int kToyImageSize = 32;
// Distinct (color, shape, background) combinations available.
int toy_corpus_capacity();

// Renders `count` 32x32 shape images with unique template captions, writes
// them as PPM next to manifest.jsonl and returns the ingested manifest. Every
// fourth record is held out as "test".
DatasetManifest generate_toy_corpus(const std::filesystem::path& out_dir, int count,
                                    uint64_t seed);

std::vector<Image> load_images(const DatasetManifest& manifest);

struct ExperimentConfig {
  attack::AttackConfig attack;
  int batch_size = 20;
  int workers = 0;  // 0 uses the hardware concurrency
  std::string eval_split = "all";
  std::string method = "natpatch";

  void validate() const;
  // Flat key-value document: attack fields plus the keys above.
  nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& doc);
  static ExperimentConfig load(const std::filesystem::path& path);
};

// FNV-1a over the canonical (key-sorted) serialization, as 16 hex digits.
std::string config_hash(const nlohmann::json& doc);
// Per-example seed derived from the global seed and the example id.
uint64_t example_seed(uint64_t global_seed, const std::string& example_id);

struct ModelBundle {
  std::shared_ptr<const surrogate::SurrogateModel> model;
  std::shared_ptr<const diffusion::NoisePredictor> predictor;
  int predictor_total_steps = 0;
};

struct TrainingOptions {
  surrogate::ToyTrainingConfig surrogate;
  diffusion::DenoiserConfig denoiser;
  attack::AttackConfig schedule_source;  // supplies T and the beta curve
  uint64_t seed = 0;
  // Keep "test" records out of surrogate training and apply the recall floor
  // to them. Off by default: the surrogate is fitted to the retrieval corpus.
  bool hold_out_test_split = false;
};

struct TrainingSummary {
  surrogate::ToyTrainingReport surrogate;
  diffusion::DenoiserTrainingReport denoiser;
  nlohmann::json to_json() const;
};

// Trains the toy surrogate and denoiser and writes surrogate.ckpt,
// denoiser.ckpt, vocab.txt and training.json into out_dir.
ModelBundle train_models(const DatasetManifest& manifest, const std::filesystem::path& out_dir,
                         const TrainingOptions& options, TrainingSummary* summary = nullptr);
ModelBundle load_models(const std::filesystem::path& model_dir,
                        const std::string& adapter = "toy");

// Image/text pool of a manifest: every caption becomes one text.
struct RetrievalPool {
  std::vector<Image> images;
  std::vector<std::string> captions;
  std::vector<std::set<int>> image_to_texts;
  surrogate::TextBatch texts;
};

RetrievalPool build_pool(const DatasetManifest& manifest, const surrogate::SurrogateModel& model);
retrieval::ScoreMatrix clean_scores(const RetrievalPool& pool,
                                    const surrogate::SurrogateModel& model);

struct ExampleOutcome {
  size_t index = 0;  // position in the manifest
  std::string id;
  attack::AttackResult result;
};

struct ExperimentSummary {
  std::string method;
  std::string config_hash;
  retrieval::RetrievalReport report;
  std::vector<ExampleOutcome> outcomes;  // manifest order
  double success_rate = 0.0;             // configured criterion
  double mean_iterations = 0.0;
  double mean_tv = 0.0;
  double clean_tr_recall_at_1 = 0.0;

  nlohmann::json to_json() const;
};

// Attacks the first batch_size records of the eval split and writes
// records.jsonl, patches/, adversarial/, summary.csv and summary.json.
ExperimentSummary run_experiment(const DatasetManifest& manifest, const ModelBundle& models,
                                 const ExperimentConfig& config,
                                 const std::filesystem::path& out_dir);

enum class AblationKind { kTopK, kSize, kLocation };
AblationKind ablation_kind_from(const std::string& name);
std::string to_string(AblationKind kind);

struct AblationRow {
  std::string value;
  std::optional<double> metric;
};

struct AblationTable {
  AblationKind kind = AblationKind::kTopK;
  std::string metric_name;
  std::vector<AblationRow> rows;

  std::string to_csv() const;
};

// Grid used when none is given: topk {5, 10, pool-1}, size {0.05, 0.1, 0.15,
// 0.2}, location {diffusion,direct} x {attention,random}.
std::vector<std::string> default_grid(AblationKind kind, size_t pool_size);

// One batch per grid value with everything else fixed. The metric is the TR
// attack success rate at the success rank for topk/size and the mean
// iteration count for location. Writes <out_dir>/ablation_<kind>.csv.
AblationTable run_ablation(AblationKind kind, const std::vector<std::string>& grid,
                           const ExperimentConfig& base, const DatasetManifest& manifest,
                           const ModelBundle& models, const std::filesystem::path& out_dir);

// Resolves relative paths against $NATPATCH_OUTPUT_ROOT when it is set.
std::filesystem::path resolve_output(const std::filesystem::path& path);
inline constexpr const char* kOutputRootEnv = "NATPATCH_OUTPUT_ROOT";

}  // namespace natpatch::experiment
