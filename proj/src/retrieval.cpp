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
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

namespace natpatch::retrieval {

std::string to_string(Direction d) { return d == Direction::kTR ? "TR" : "IR"; }

ScoreMatrix::ScoreMatrix(int64_t num_images, int64_t num_texts, std::vector<double> scores,
                         std::vector<std::set<int>> image_to_texts)
    : num_images_(num_images),
      num_texts_(num_texts),
      scores_(std::move(scores)),
      image_to_texts_(std::move(image_to_texts)) {
  if (num_images < 1 || num_texts < 1) throw std::invalid_argument("empty score matrix");
  if (static_cast<int64_t>(scores_.size()) != num_images * num_texts) {
    throw std::invalid_argument("score count does not match the matrix shape");
  }
  if (static_cast<int64_t>(image_to_texts_.size()) != num_images) {
    throw std::invalid_argument("ground truth must list matches for every image");
  }
  for (double s : scores_) {
    if (!std::isfinite(s)) throw std::invalid_argument("score matrix holds a non-finite value");
  }
  text_to_images_.assign(num_texts, {});
  for (int64_t i = 0; i < num_images; ++i) {
    if (image_to_texts_[i].empty()) {
      throw std::invalid_argument("image " + std::to_string(i) + " has no matched text");
    }
    for (int t : image_to_texts_[i]) {
      if (t < 0 || t >= num_texts) throw std::invalid_argument("matched text index out of range");
      text_to_images_[t].insert(static_cast<int>(i));
    }
  }
}

ScoreMatrix ScoreMatrix::with_row(int64_t image, const std::vector<double>& row) const {
  if (image < 0 || image >= num_images_ || static_cast<int64_t>(row.size()) != num_texts_) {
    throw std::invalid_argument("replacement row does not fit the matrix");
  }
  auto scores = scores_;
  std::copy(row.begin(), row.end(), scores.begin() + image * num_texts_);
  return ScoreMatrix(num_images_, num_texts_, std::move(scores), image_to_texts_);
}

bool ScoreMatrix::same_layout(const ScoreMatrix& other) const {
  return num_images_ == other.num_images_ && num_texts_ == other.num_texts_ &&
         image_to_texts_ == other.image_to_texts_;
}

namespace {

// Hit test for one query: count candidates that outrank the best match.
bool query_hit(const ScoreMatrix& m, Direction d, int64_t q, int n) {
  const bool tr = d == Direction::kTR;
  const int64_t pool = m.pool_size(d);
  const auto& matches = tr ? m.image_to_texts()[q] : m.text_to_images()[q];
  if (matches.empty()) return false;
  auto score = [&](int64_t c) { return tr ? m.at(q, c) : m.at(c, q); };
  for (int c : matches) {
    const double sc = score(c);
    int64_t ahead = 0;
    for (int64_t o = 0; o < pool && ahead < n; ++o) {
      const double so = score(o);
      if (so > sc || (so == sc && o < c)) ++ahead;
    }
    if (ahead < n) return true;
  }
  return false;
}

void check_n(const ScoreMatrix& m, Direction d, int n) {
  if (n < 1 || n > m.pool_size(d)) {
    throw std::invalid_argument(fmt::format("R@{} outside [1, {}] for {}", n, m.pool_size(d),
                                            to_string(d)));
  }
}

}  // namespace

RecallResult recall_at_n(const ScoreMatrix& scores, Direction direction, int n) {
  check_n(scores, direction, n);
  RecallResult r;
  const int64_t queries = scores.num_queries(direction);
  int64_t counted = 0, hits = 0;
  r.hits.resize(queries);
  for (int64_t q = 0; q < queries; ++q) {
    r.hits[q] = query_hit(scores, direction, q, n);
    // Texts matched to no image cannot be retrieved correctly; skip them.
    if (direction == Direction::kIR && scores.text_to_images()[q].empty()) continue;
    ++counted;
    hits += r.hits[q];
  }
  r.rate = counted ? static_cast<double>(hits) / counted : 0.0;
  return r;
}

std::optional<double> AsrCounts::rate() const {
  if (clean_correct == 0) return std::nullopt;
  return static_cast<double>(broken) / static_cast<double>(clean_correct);
}

AsrCounts attack_success_counts(const ScoreMatrix& clean, const ScoreMatrix& attacked,
                                Direction direction, int n, const std::vector<int64_t>* queries) {
  if (!clean.same_layout(attacked)) {
    throw std::invalid_argument("clean and attacked matrices differ in shape or ground truth");
  }
  check_n(clean, direction, n);
  std::vector<int64_t> all;
  if (queries == nullptr) {
    all.resize(clean.num_queries(direction));
    for (int64_t q = 0; q < static_cast<int64_t>(all.size()); ++q) all[q] = q;
    queries = &all;
  }
  AsrCounts counts;
  for (int64_t q : *queries) {
    if (q < 0 || q >= clean.num_queries(direction)) {
      throw std::invalid_argument("query index out of range");
    }
    if (!query_hit(clean, direction, q, n)) continue;
    ++counts.clean_correct;
    if (!query_hit(attacked, direction, q, n)) ++counts.broken;
  }
  return counts;
}

std::optional<double> attack_success_rate(const ScoreMatrix& clean, const ScoreMatrix& attacked,
                                          Direction direction, int n,
                                          const std::vector<int64_t>* queries) {
  return attack_success_counts(clean, attacked, direction, n, queries).rate();
}

namespace {

nlohmann::json direction_json(const DirectionReport& d) {
  nlohmann::json out = nlohmann::json::object();
  for (size_t i = 0; i < kRecallLevels.size(); ++i) {
    const auto key = "R@" + std::to_string(kRecallLevels[i]);
    const auto rate = d.asr[i].rate();
    out[key] = {{"clean_recall", d.clean_recall[i]},
                {"clean_correct", d.asr[i].clean_correct},
                {"broken", d.asr[i].broken},
                {"asr", rate ? nlohmann::json(*rate) : nlohmann::json(nullptr)}};
  }
  return out;
}

DirectionReport direction_report(const ScoreMatrix& clean, const ScoreMatrix& attacked,
                                 Direction d, const std::vector<int64_t>& queries) {
  DirectionReport out;
  for (size_t i = 0; i < kRecallLevels.size(); ++i) {
    const int n = std::min<int>(kRecallLevels[i], static_cast<int>(clean.pool_size(d)));
    out.clean_recall[i] = recall_at_n(clean, d, n).rate;
    out.asr[i] = attack_success_counts(clean, attacked, d, n, &queries);
  }
  return out;
}

}  // namespace

nlohmann::json RetrievalReport::to_json() const {
  return {{"method", method},
          {"attacked_images", attacked_images},
          {"TR", direction_json(tr)},
          {"IR", direction_json(ir)}};
}

RetrievalReport build_report(const std::string& method, const ScoreMatrix& clean,
                             const ScoreMatrix& attacked,
                             const std::vector<int64_t>& attacked_images) {
  std::set<int64_t> texts;
  for (int64_t i : attacked_images) {
    if (i < 0 || i >= clean.num_images()) throw std::invalid_argument("attacked image out of range");
    for (int t : clean.image_to_texts()[i]) texts.insert(t);
  }
  const std::vector<int64_t> text_queries(texts.begin(), texts.end());
  RetrievalReport r;
  r.method = method;
  r.attacked_images = static_cast<int64_t>(attacked_images.size());
  r.tr = direction_report(clean, attacked, Direction::kTR, attacked_images);
  r.ir = direction_report(clean, attacked, Direction::kIR, text_queries);
  return r;
}

SummaryRow summary_row(const RetrievalReport& report) {
  SummaryRow row;
  row.method = report.method;
  for (size_t i = 0; i < 3; ++i) {
    const auto tr = report.tr.asr[i].rate();
    const auto ir = report.ir.asr[i].rate();
    if (tr) row.percent[i] = 100.0 * *tr;
    if (ir) row.percent[3 + i] = 100.0 * *ir;
  }
  return row;
}

std::string summary_csv_header() { return "method,TR@1,TR@5,TR@10,IR@1,IR@5,IR@10"; }

std::string render_summary_csv(const std::vector<SummaryRow>& rows) {
  std::string out = summary_csv_header() + "\n";
  for (const auto& row : rows) {
    if (row.method.find_first_of(",\n\"") != std::string::npos) {
      throw std::invalid_argument("method name must not contain commas, quotes or newlines");
    }
    out += row.method;
    for (const auto& v : row.percent) out += v ? fmt::format(",{:.2f}", *v) : std::string(",NA");
    out += "\n";
  }
  return out;
}

std::vector<ReferenceRow> load_reference_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open reference table " + path.string());
  std::vector<ReferenceRow> rows;
  std::string line;
  bool header_seen = false;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (!header_seen) {
      header_seen = true;
      if (cells.size() != 9 || cells[0] != "model") {
        throw std::runtime_error(fmt::format("{}:{}: unexpected header", path.string(), line_no));
      }
      continue;
    }
    if (cells.size() != 9) {
      throw std::runtime_error(fmt::format("{}:{}: expected 9 fields", path.string(), line_no));
    }
    ReferenceRow r{cells[0], cells[1], {cells[2], {}}};
    for (size_t i = 0; i < 6; ++i) {
      try {
        r.row.percent[i] = std::stod(cells[3 + i]);
      } catch (const std::exception&) {
        throw std::runtime_error(
            fmt::format("{}:{}: bad number '{}'", path.string(), line_no, cells[3 + i]));
      }
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<SummaryRow> select_reference(const std::vector<ReferenceRow>& table,
                                         const std::string& model, const std::string& dataset) {
  std::vector<SummaryRow> out;
  for (const auto& r : table) {
    if (r.model == model && r.dataset == dataset) out.push_back(r.row);
  }
  return out;
}

attack::AttackResult baseline_random_location(const attack::AttackInputs& inputs,
                                              attack::AttackConfig config) {
  config.placement = attack::PlacementStrategy::kRandom;
  config.recompute_placement = false;
  return attack::run_attack(inputs, config);
}

attack::AttackResult baseline_direct_pixel(const attack::AttackInputs& inputs,
                                           attack::AttackConfig config) {
  config.optimizer = attack::PatchOptimizer::kDirect;
  return attack::run_attack(inputs, config);
}

}  // namespace natpatch::retrieval
