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

#include <array>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "natpatch/attack.hpp"

namespace natpatch::retrieval {

// TR: image queries ranking texts. IR: text queries ranking images.
enum class Direction { kTR, kIR };

std::string to_string(Direction d);

class ScoreMatrix {
 public:
  ScoreMatrix() = default;
  // scores is row-major [num_images x num_texts]; image_to_texts[i] lists the
  // texts matched to image i.
  ScoreMatrix(int64_t num_images, int64_t num_texts, std::vector<double> scores,
              std::vector<std::set<int>> image_to_texts);

  int64_t num_images() const { return num_images_; }
  int64_t num_texts() const { return num_texts_; }
  double at(int64_t image, int64_t text) const { return scores_[image * num_texts_ + text]; }
  const std::vector<double>& scores() const { return scores_; }
  const std::vector<std::set<int>>& image_to_texts() const { return image_to_texts_; }
  const std::vector<std::set<int>>& text_to_images() const { return text_to_images_; }

  int64_t num_queries(Direction d) const { return d == Direction::kTR ? num_images_ : num_texts_; }
  int64_t pool_size(Direction d) const { return d == Direction::kTR ? num_texts_ : num_images_; }

  // Copy with the row of `image` replaced.
  ScoreMatrix with_row(int64_t image, const std::vector<double>& row) const;
  bool same_layout(const ScoreMatrix& other) const;

 private:
  int64_t num_images_ = 0;
  int64_t num_texts_ = 0;
  std::vector<double> scores_;
  std::vector<std::set<int>> image_to_texts_;
  std::vector<std::set<int>> text_to_images_;
};

struct RecallResult {
  double rate = 0.0;
  std::vector<bool> hits;  // per query
};

// A query hits when any of its matches ranks within the first n; ties go to
// the smaller index.
RecallResult recall_at_n(const ScoreMatrix& scores, Direction direction, int n);

struct AsrCounts {
  int64_t clean_correct = 0;
  int64_t broken = 0;
  std::optional<double> rate() const;
};

// Restricted to `queries` when given (indices in the direction's query space).
AsrCounts attack_success_counts(const ScoreMatrix& clean, const ScoreMatrix& attacked,
                                Direction direction, int n,
                                const std::vector<int64_t>* queries = nullptr);
// nullopt when no query was correct on clean inputs.
std::optional<double> attack_success_rate(const ScoreMatrix& clean, const ScoreMatrix& attacked,
                                          Direction direction, int n,
                                          const std::vector<int64_t>* queries = nullptr);

inline constexpr std::array<int, 3> kRecallLevels = {1, 5, 10};

struct DirectionReport {
  std::array<double, 3> clean_recall{};
  std::array<AsrCounts, 3> asr{};
};

struct RetrievalReport {
  std::string method;
  DirectionReport tr;
  DirectionReport ir;
  int64_t attacked_images = 0;

  nlohmann::json to_json() const;
};

// Builds the report for an attack that replaced the rows of `attacked_images`.
// TR queries are those images; IR queries are the texts matched to them.
RetrievalReport build_report(const std::string& method, const ScoreMatrix& clean,
                             const ScoreMatrix& attacked,
                             const std::vector<int64_t>& attacked_images);

// One row of a Table-2-shaped summary: ASR percentages for TR and IR at
// R@1/5/10; nullopt renders as "NA".
struct SummaryRow {
  std::string method;
  std::array<std::optional<double>, 6> percent{};
};

SummaryRow summary_row(const RetrievalReport& report);
std::string summary_csv_header();
std::string render_summary_csv(const std::vector<SummaryRow>& rows);

struct ReferenceRow {
  std::string model;
  std::string dataset;
  SummaryRow row;
};

// Reads the comma-separated reference table; '#' lines are comments.
std::vector<ReferenceRow> load_reference_table(const std::filesystem::path& path);
std::vector<SummaryRow> select_reference(const std::vector<ReferenceRow>& table,
                                         const std::string& model, const std::string& dataset);

// run_attack with the placement drawn uniformly over valid centers.
attack::AttackResult baseline_random_location(const attack::AttackInputs& inputs,
                                              attack::AttackConfig config);
// run_attack without purification: the gradient moves patch pixels directly.
attack::AttackResult baseline_direct_pixel(const attack::AttackInputs& inputs,
                                           attack::AttackConfig config);

}  // namespace natpatch::retrieval
