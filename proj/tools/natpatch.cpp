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

// Command-line front end. Exit status: 0 success, 1 usage error, 2 runtime
// failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "natpatch/experiment.hpp"
#include "natpatch/retrieval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
namespace ex = natpatch::experiment;
namespace rt = natpatch::retrieval;

namespace {

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Applies key=value overrides; values parse as JSON and fall back to strings.
ex::ExperimentConfig make_config(const std::string& path, const std::vector<std::string>& sets) {
  json doc = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config " + path);
    try {
      doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw UsageError(path + ": " + e.what());
    }
  }
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got " + kv);
    const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
    try {
      doc[key] = json::parse(value);
    } catch (const json::parse_error&) {
      doc[key] = value;
    }
  }
  try {
    return ex::ExperimentConfig::from_json(doc);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

void write_or_print(const std::string& out, const std::string& text) {
  if (out.empty()) {
    std::fputs(text.c_str(), stdout);
    return;
  }
  const auto path = ex::resolve_output(out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto piece = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!piece.empty()) out.push_back(piece);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-guided adversarial patches against image-text retrieval"};
  app.require_subcommand(1);

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "Render the synthetic shapes corpus");
  std::string gen_out;
  int gen_count = 64;
  uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of images")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Seed")->capture_default_str();

  // train-toy
  auto* train = app.add_subcommand("train-toy", "Train the toy surrogate and denoiser");
  std::string train_manifest, train_out, train_config;
  uint64_t train_seed = 0;
  int train_epochs = 400, denoiser_steps = 600;
  train->add_option("--manifest", train_manifest)->required();
  train->add_option("--out", train_out, "Model directory")->required();
  train->add_option("--config", train_config, "Config whose schedule the denoiser is trained for");
  train->add_option("--seed", train_seed)->capture_default_str();
  train->add_option("--epochs", train_epochs, "Surrogate epoch cap")->capture_default_str();
  train->add_option("--denoiser-steps", denoiser_steps)->capture_default_str();

  // attack
  auto* atk = app.add_subcommand("attack", "Attack a batch and write records and a summary");
  std::string atk_manifest, atk_models, atk_config, atk_out, atk_adapter = "toy";
  std::vector<std::string> atk_sets;
  atk->add_option("--manifest", atk_manifest)->required();
  atk->add_option("--models", atk_models, "Directory with surrogate.ckpt and denoiser.ckpt")
      ->required();
  atk->add_option("--adapter", atk_adapter)->capture_default_str();
  atk->add_option("--config", atk_config, "JSON key-value config");
  atk->add_option("--set", atk_sets, "Override a config key (key=value)");
  atk->add_option("--out", atk_out, "Run directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Clean retrieval recall of a model on a manifest");
  std::string ev_manifest, ev_models, ev_out, ev_adapter = "toy";
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--models", ev_models)->required();
  ev->add_option("--adapter", ev_adapter)->capture_default_str();
  ev->add_option("--out", ev_out, "Write JSON here instead of stdout");

  // ablate
  auto* abl = app.add_subcommand("ablate", "Run an ablation grid");
  std::string abl_kind, abl_manifest, abl_models, abl_config, abl_out, abl_grid,
      abl_adapter = "toy";
  std::vector<std::string> abl_sets;
  abl->add_option("kind", abl_kind, "topk | size | location")
      ->required()
      ->check(CLI::IsMember({"topk", "size", "location"}));
  abl->add_option("--manifest", abl_manifest)->required();
  abl->add_option("--models", abl_models)->required();
  abl->add_option("--adapter", abl_adapter)->capture_default_str();
  abl->add_option("--config", abl_config);
  abl->add_option("--set", abl_sets);
  abl->add_option("--grid", abl_grid, "Comma-separated values; defaults per kind");
  abl->add_option("--out", abl_out)->required();

  // report
  auto* rep = app.add_subcommand("report", "Render a summary table");
  std::vector<std::string> rep_summaries;
  std::string rep_fixture, rep_model = "ALBEF", rep_dataset = "MSCOCO", rep_out;
  rep->add_option("--summary", rep_summaries, "summary.json files to tabulate");
  rep->add_option("--fixture", rep_fixture, "Reference table CSV");
  rep->add_option("--model", rep_model)->capture_default_str();
  rep->add_option("--dataset", rep_dataset)->capture_default_str();
  rep->add_option("--out", rep_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (gen->parsed()) {
      const auto out = ex::resolve_output(gen_out);
      const auto m = ex::generate_toy_corpus(out, gen_count, gen_seed);
      fmt::print("wrote {} records to {}\n", m.records.size(), (out / "manifest.jsonl").string());
    } else if (train->parsed()) {
      ex::TrainingOptions opts;
      opts.seed = train_seed;
      opts.surrogate.epochs = train_epochs;
      opts.denoiser.steps = denoiser_steps;
      if (!train_config.empty()) opts.schedule_source = make_config(train_config, {}).attack;
      ex::TrainingSummary summary;
      const auto out = ex::resolve_output(train_out);
      ex::train_models(ex::ingest_manifest(train_manifest), out, opts, &summary);
      fmt::print("{}\n", summary.to_json().dump(2));
    } else if (atk->parsed()) {
      const auto cfg = make_config(atk_config, atk_sets);
      const auto models = ex::load_models(atk_models, atk_adapter);
      const auto out = ex::resolve_output(atk_out);
      const auto s = ex::run_experiment(ex::ingest_manifest(atk_manifest), models, cfg, out);
      fmt::print("{}", rt::render_summary_csv({rt::summary_row(s.report)}));
      fmt::print("success {:.3f}  mean iterations {:.1f}  mean tv {:.5f}  -> {}\n", s.success_rate,
                 s.mean_iterations, s.mean_tv, out.string());
    } else if (ev->parsed()) {
      const auto models = ex::load_models(ev_models, ev_adapter);
      const auto pool = ex::build_pool(ex::ingest_manifest(ev_manifest), *models.model);
      const auto scores = ex::clean_scores(pool, *models.model);
      json doc = json::object();
      for (auto d : {rt::Direction::kTR, rt::Direction::kIR}) {
        for (int n : rt::kRecallLevels) {
          if (n > scores.pool_size(d)) continue;
          doc[rt::to_string(d)]["R@" + std::to_string(n)] = rt::recall_at_n(scores, d, n).rate;
        }
      }
      write_or_print(ev_out, doc.dump(2) + "\n");
    } else if (abl->parsed()) {
      const auto cfg = make_config(abl_config, abl_sets);
      const auto kind = ex::ablation_kind_from(abl_kind);
      const auto manifest = ex::ingest_manifest(abl_manifest);
      const auto models = ex::load_models(abl_models, abl_adapter);
      size_t pool = 0;
      for (const auto& r : manifest.records) pool += r.captions.size();
      const auto grid = abl_grid.empty() ? ex::default_grid(kind, pool) : split_csv(abl_grid);
      const auto table = ex::run_ablation(kind, grid, cfg, manifest, models,
                                          ex::resolve_output(abl_out));
      fmt::print("{}", table.to_csv());
    } else if (rep->parsed()) {
      if (rep_summaries.empty() == rep_fixture.empty()) {
        throw UsageError("report needs either --summary files or --fixture");
      }
      std::vector<rt::SummaryRow> rows;
      if (!rep_fixture.empty()) {
        rows = rt::select_reference(rt::load_reference_table(rep_fixture), rep_model, rep_dataset);
        if (rows.empty()) throw UsageError("no fixture rows for " + rep_model + "/" + rep_dataset);
      }
      for (const auto& path : rep_summaries) {
        std::ifstream in(path);
        if (!in) throw UsageError("cannot open " + path);
        const auto doc = json::parse(in);
        rt::SummaryRow row;
        row.method = doc.at("method").get<std::string>();
        const auto& report = doc.at("report");
        size_t col = 0;
        for (const char* dir : {"TR", "IR"}) {
          for (int n : rt::kRecallLevels) {
            const auto& asr = report.at(dir).at("R@" + std::to_string(n)).at("asr");
            if (!asr.is_null()) row.percent[col] = 100.0 * asr.get<double>();
            ++col;
          }
        }
        rows.push_back(std::move(row));
      }
      write_or_print(rep_out, rt::render_summary_csv(rows));
    }
  } catch (const UsageError& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return kUsageError;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kRuntimeError;
  }
  return 0;
}
