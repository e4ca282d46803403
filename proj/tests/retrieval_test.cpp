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

#include "natpatch/retrieval.hpp"

#include <cmath>
#include <random>

#include <gtest/gtest.h>

namespace natpatch::retrieval {
namespace {

ScoreMatrix diagonal(int64_t n, const std::vector<double>& scores) {
  std::vector<std::set<int>> gt(n);
  for (int64_t i = 0; i < n; ++i) gt[i] = {static_cast<int>(i)};
  return ScoreMatrix(n, n, scores, gt);
}

// Two images, four texts; image 0 matches texts {0, 3}, image 1 matches {1, 2}.
ScoreMatrix two_by_four() {
  return ScoreMatrix(2, 4, {0.1, 0.7, 0.3, 0.7, 0.5, 0.2, 0.9, 0.4}, {{0, 3}, {1, 2}});
}

ScoreMatrix random_matrix(int64_t images, int texts_per_image, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int64_t texts = images * texts_per_image;
  std::vector<double> s(images * texts);
  for (auto& v : s) v = u(rng);
  std::vector<std::set<int>> gt(images);
  for (int64_t t = 0; t < texts; ++t) gt[t / texts_per_image].insert(static_cast<int>(t));
  return ScoreMatrix(images, texts, s, gt);
}

TEST(RecallTest, IdentityMatrix) {
  const auto m = diagonal(3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_EQ(recall_at_n(m, Direction::kTR, 1).rate, 1.0);
  EXPECT_EQ(recall_at_n(m, Direction::kIR, 1).rate, 1.0);
}

TEST(RecallTest, NthRankCountsAsHit) {
  // The match of image 0 ranks third.
  const auto m = diagonal(3, {0.1, 0.5, 0.3, 0, 1, 0, 0, 0, 1});
  EXPECT_FALSE(recall_at_n(m, Direction::kTR, 2).hits[0]);
  EXPECT_TRUE(recall_at_n(m, Direction::kTR, 3).hits[0]);
}

TEST(RecallTest, HandEnumeratedTwoByFour) {
  const auto m = two_by_four();
  // TR: image 0 orders texts 1, 3, 2, 0 (tie between 1 and 3 goes to 1), so
  // its best match is second; image 1 orders 2, 0, 3, 1.
  const auto tr1 = recall_at_n(m, Direction::kTR, 1);
  EXPECT_EQ(tr1.hits, (std::vector<bool>{false, true}));
  EXPECT_EQ(tr1.rate, 0.5);
  EXPECT_EQ(recall_at_n(m, Direction::kTR, 2).rate, 1.0);
  // IR: text 0 prefers image 1 (miss), text 1 prefers image 0 (miss), text 2
  // prefers image 1 (hit), text 3 prefers image 0 (hit).
  const auto ir1 = recall_at_n(m, Direction::kIR, 1);
  EXPECT_EQ(ir1.hits, (std::vector<bool>{false, false, true, true}));
  EXPECT_EQ(ir1.rate, 0.5);
  EXPECT_EQ(recall_at_n(m, Direction::kIR, 2).rate, 1.0);
}

TEST(RecallTest, RejectsOutOfRangeN) {
  const auto m = two_by_four();
  EXPECT_THROW(recall_at_n(m, Direction::kTR, 5), std::invalid_argument);
  EXPECT_THROW(recall_at_n(m, Direction::kIR, 3), std::invalid_argument);
  EXPECT_THROW(recall_at_n(m, Direction::kTR, 0), std::invalid_argument);
}

TEST(RecallTest, MonotoneInN) {
  const auto m = random_matrix(6, 2, 1);
  for (auto d : {Direction::kTR, Direction::kIR}) {
    double prev = 0.0;
    for (int n = 1; n <= m.pool_size(d); ++n) {
      const double r = recall_at_n(m, d, n).rate;
      EXPECT_GE(r, prev);
      prev = r;
    }
    EXPECT_EQ(prev, 1.0);
  }
}

TEST(ScoreMatrixTest, RejectsMalformedInput) {
  EXPECT_THROW(ScoreMatrix(2, 2, {0, 1, 2}, {{0}, {1}}), std::invalid_argument);
  EXPECT_THROW(ScoreMatrix(2, 2, {0, 1, 2, 3}, {{0}, {}}), std::invalid_argument);
  EXPECT_THROW(ScoreMatrix(2, 2, {0, 1, 2, NAN}, {{0}, {1}}), std::invalid_argument);
}

TEST(AsrTest, UnchangedScoresGiveZero) {
  const auto m = random_matrix(5, 2, 2);
  for (int n : {1, 5}) {
    const auto rate = attack_success_rate(m, m, Direction::kTR, n);
    ASSERT_TRUE(rate.has_value());
    EXPECT_EQ(*rate, 0.0);
  }
}

TEST(AsrTest, AllBrokenGivesOne) {
  const auto clean = diagonal(3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto attacked = diagonal(3, {0, 1, 0, 0, 0, 1, 1, 0, 0});
  EXPECT_EQ(*attack_success_rate(clean, attacked, Direction::kTR, 1), 1.0);
}

TEST(AsrTest, MixedHandCase) {
  // Clean: images 0-2 retrieve their text first, image 3 does not.
  const auto clean = diagonal(4, {0.9, 0.1, 0.1, 0.1,  //
                                  0.1, 0.9, 0.1, 0.1,  //
                                  0.1, 0.1, 0.9, 0.1,  //
                                  0.1, 0.1, 0.9, 0.5});
  // Attacked: images 0 and 2 lose their match, image 1 keeps it, image 3 now
  // retrieves correctly but was never clean-correct.
  const auto attacked = diagonal(4, {0.1, 0.9, 0.1, 0.1,  //
                                     0.1, 0.9, 0.1, 0.1,  //
                                     0.9, 0.1, 0.1, 0.1,  //
                                     0.1, 0.1, 0.1, 0.9});
  const auto counts = attack_success_counts(clean, attacked, Direction::kTR, 1);
  EXPECT_EQ(counts.clean_correct, 3);
  EXPECT_EQ(counts.broken, 2);
  EXPECT_NEAR(*counts.rate(), 2.0 / 3.0, 1e-15);
  const std::vector<int64_t> subset = {1, 2};
  EXPECT_EQ(*attack_success_rate(clean, attacked, Direction::kTR, 1, &subset), 0.5);
}

TEST(AsrTest, UndefinedWithoutCleanCorrectQueries) {
  const auto clean = diagonal(2, {0.1, 0.9, 0.9, 0.1});
  EXPECT_FALSE(attack_success_rate(clean, clean, Direction::kTR, 1).has_value());
}

TEST(AsrTest, InvariantUnderMonotoneTransform) {
  const auto clean = random_matrix(6, 2, 3);
  auto attacked = clean;
  for (int64_t i = 0; i < 6; i += 2) {
    std::vector<double> row(12);
    for (int t = 0; t < 12; ++t) row[t] = clean.at(i, (t + 5) % 12);
    attacked = attacked.with_row(i, row);
  }
  auto transform = [](const ScoreMatrix& m) {
    auto s = m.scores();
    for (auto& v : s) v = std::exp(4.0 * v) + 3.0;
    return ScoreMatrix(m.num_images(), m.num_texts(), s, m.image_to_texts());
  };
  for (auto d : {Direction::kTR, Direction::kIR})
    for (int n : {1, 3, 5}) {
      EXPECT_EQ(attack_success_rate(clean, attacked, d, n),
                attack_success_rate(transform(clean), transform(attacked), d, n));
    }
}

TEST(AsrTest, InvariantUnderTextRelabeling) {
  const auto clean = random_matrix(5, 2, 4);
  const auto attacked =
      clean.with_row(1, {0.91, 0.12, 0.33, 0.44, 0.05, 0.66, 0.77, 0.28, 0.59, 0.8});
  const std::vector<int> perm = {3, 7, 0, 9, 1, 5, 8, 2, 6, 4};  // new index of text t
  auto relabel = [&](const ScoreMatrix& m) {
    std::vector<double> s(m.scores().size());
    std::vector<std::set<int>> gt(m.num_images());
    for (int64_t i = 0; i < m.num_images(); ++i) {
      for (int t = 0; t < 10; ++t) s[i * 10 + perm[t]] = m.at(i, t);
      for (int t : m.image_to_texts()[i]) gt[i].insert(perm[t]);
    }
    return ScoreMatrix(m.num_images(), m.num_texts(), s, gt);
  };
  // Both matrices are tie-free, so the tie rule cannot depend on labels.
  for (auto d : {Direction::kTR, Direction::kIR})
    for (int n : {1, 2, 4}) {
      EXPECT_EQ(recall_at_n(clean, d, n).rate, recall_at_n(relabel(clean), d, n).rate);
      EXPECT_EQ(attack_success_rate(clean, attacked, d, n),
                attack_success_rate(relabel(clean), relabel(attacked), d, n));
    }
}

TEST(ReportTest, QueriesFollowAttackedImages) {
  const auto clean = diagonal(3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const auto attacked = clean.with_row(0, {0.0, 1.0, 0.5});
  const auto report = build_report("m", clean, attacked, {0});
  EXPECT_EQ(report.tr.asr[0].clean_correct, 1);
  EXPECT_EQ(report.tr.asr[0].broken, 1);
  // Column 0 is now all zeros; the tie goes to image 0, so the IR query for
  // text 0 stays correct.
  EXPECT_EQ(report.ir.asr[0].clean_correct, 1);
  EXPECT_EQ(report.ir.asr[0].broken, 0);
  EXPECT_EQ(report.tr.clean_recall[0], 1.0);
}

TEST(SummaryCsvTest, RendersTwoDecimalsAndNa) {
  SummaryRow row{"natpatch", {100.0, 95.0, std::nullopt, 12.345, 0.0, 50.0}};
  EXPECT_EQ(render_summary_csv({row}),
            "method,TR@1,TR@5,TR@10,IR@1,IR@5,IR@10\n"
            "natpatch,100.00,95.00,NA,12.35,0.00,50.00\n");
}

TEST(SummaryCsvTest, ReferenceFixtureRow) {
  const auto table =
      load_reference_table(std::string(NATPATCH_SOURCE_DIR) + "/data/fixtures/reference_table.csv");
  EXPECT_EQ(table.size(), 24u);
  const auto rows = select_reference(table, "ALBEF", "MSCOCO");
  ASSERT_EQ(rows.size(), 6u);
  EXPECT_EQ(render_summary_csv({rows.back()}),
            "method,TR@1,TR@5,TR@10,IR@1,IR@5,IR@10\n"
            "Ours,99.90,99.69,99.69,99.90,99.49,98.97\n");
}

}  // namespace
}  // namespace natpatch::retrieval
