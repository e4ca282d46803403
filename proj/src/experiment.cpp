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

#include "natpatch/experiment.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

namespace natpatch::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Manifests

std::vector<size_t> DatasetManifest::indices_of(const std::string& split) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < records.size(); ++i) {
    if (split == "all" || records[i].split == split) out.push_back(i);
  }
  return out;
}

DatasetManifest ingest_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  DatasetManifest manifest;
  manifest.source = fs::absolute(path);
  const fs::path base = manifest.source.parent_path();
  std::map<std::string, int> seen;
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& what) {
    throw std::runtime_error(fmt::format("{}:{}: {}", path.string(), line_no, what));
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json doc;
    try {
      doc = json::parse(line);
    } catch (const json::parse_error& e) {
      fail(std::string("parse error: ") + e.what());
    }
    if (!doc.is_object()) fail("record must be a JSON object");
    if (doc.contains("provenance") && doc.size() == 1) {
      manifest.provenance = doc["provenance"].get<std::string>();
      continue;
    }
    DatasetRecord rec;
    try {
      rec.id = doc.at("id").get<std::string>();
      rec.image = doc.at("image").get<std::string>();
      rec.captions = doc.at("captions").get<std::vector<std::string>>();
      rec.split = doc.value("split", std::string("test"));
    } catch (const json::exception& e) {
      fail(std::string("malformed record: ") + e.what());
    }
    if (rec.id.empty()) fail("empty id");
    if (rec.captions.empty()) fail("record '" + rec.id + "' has no captions");
    for (const auto& c : rec.captions) {
      if (c.find_first_not_of(" \t") == std::string::npos) {
        fail("record '" + rec.id + "' has an empty caption");
      }
    }
    if (auto [it, fresh] = seen.emplace(rec.id, line_no); !fresh) {
      fail(fmt::format("duplicate id '{}' (first seen on line {})", rec.id, it->second));
    }
    if (rec.image.is_relative()) rec.image = base / rec.image;
    if (!fs::is_regular_file(rec.image)) {
      fail("image for '" + rec.id + "' not found: " + rec.image.string());
    }
    manifest.records.push_back(std::move(rec));
  }
  if (manifest.records.empty()) throw std::runtime_error(path.string() + ": no records");
  return manifest;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path.string());
  const fs::path base = fs::absolute(path).parent_path();
  if (!manifest.provenance.empty()) out << json{{"provenance", manifest.provenance}}.dump() << "\n";
  for (const auto& r : manifest.records) {
    auto image = r.image.is_absolute() ? r.image.lexically_relative(base) : r.image;
    out << json{{"id", r.id},
                {"image", image.generic_string()},
                {"captions", r.captions},
                {"split", r.split}}
               .dump()
        << "\n";
  }
  if (!out) throw std::runtime_error("failed writing manifest " + path.string());
}

// ---------------------------------------------------------------------------
// Toy corpus

namespace {

struct Color {
  const char* name;
  std::array<double, 3> rgb;
};

constexpr std::array<Color, 8> kColors = {{
    {"red", {0.90, 0.10, 0.10}},
    {"green", {0.10, 0.70, 0.20}},
    {"blue", {0.15, 0.25, 0.90}},
    {"yellow", {0.95, 0.90, 0.10}},
    {"cyan", {0.10, 0.85, 0.90}},
    {"magenta", {0.85, 0.15, 0.80}},
    {"orange", {0.95, 0.55, 0.10}},
    {"purple", {0.50, 0.20, 0.70}},
}};
constexpr std::array<const char*, 4> kShapes = {"circle", "square", "triangle", "cross"};
constexpr std::array<Color, 2> kBackgrounds = {{{"white", {0.95, 0.95, 0.95}},
                                                {"black", {0.05, 0.05, 0.05}}}};

bool inside(int shape, double dy, double dx, double r) {
  switch (shape) {
    case 0:
      return dy * dy + dx * dx <= r * r;
    case 1:
      return std::abs(dy) <= 0.8 * r && std::abs(dx) <= 0.8 * r;
    case 2: {
      const double t = (dy + r) / (2.0 * r);  // apex on top
      return t >= 0.0 && t <= 1.0 && std::abs(dx) <= t * r;
    }
    default:
      return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) ||
             (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
  }
}

Image render_shape(int color, int shape, int background, std::mt19937_64& rng) {
  const int n = kToyImageSize;
  std::uniform_real_distribution<double> jitter(-3.0, 3.0);
  std::uniform_real_distribution<double> radius(8.0, 11.0);
  std::normal_distribution<double> noise(0.0, 0.02);
  const double cy = n / 2.0 + jitter(rng), cx = n / 2.0 + jitter(rng), r = radius(rng);
  const auto& fg = kColors[color].rgb;
  const auto& bg = kBackgrounds[background].rgb;
  Image img(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      // 2x2 supersampling for soft edges.
      double cover = 0.0;
      for (double oy : {0.25, 0.75})
        for (double ox : {0.25, 0.75}) cover += inside(shape, y + oy - cy, x + ox - cx, r) ? 0.25 : 0.0;
      for (int c = 0; c < 3; ++c) {
        const double v = cover * fg[c] + (1.0 - cover) * bg[c] + noise(rng);
        img.at(y, x, c) = std::clamp(v, 0.0, 1.0);
      }
    }
  return img;
}

}  // namespace

int toy_corpus_capacity() {
  return static_cast<int>(kColors.size() * kShapes.size() * kBackgrounds.size());
}

DatasetManifest generate_toy_corpus(const fs::path& out_dir, int count, uint64_t seed) {
  if (count < 4) throw std::invalid_argument("toy corpus needs at least 4 images");
  if (count > toy_corpus_capacity()) {
    throw std::invalid_argument(fmt::format("toy corpus holds at most {} distinctly captioned images",
                                            toy_corpus_capacity()));
  }
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<std::array<int, 3>> combos;
  for (int c = 0; c < static_cast<int>(kColors.size()); ++c)
    for (int s = 0; s < static_cast<int>(kShapes.size()); ++s)
      for (int b = 0; b < static_cast<int>(kBackgrounds.size()); ++b) combos.push_back({c, s, b});
  std::mt19937_64 rng(seed);
  std::shuffle(combos.begin(), combos.end(), rng);

  DatasetManifest manifest;
  manifest.provenance = fmt::format("synthetic shapes corpus, count={}, seed={}", count, seed);
  for (int i = 0; i < count; ++i) {
    const auto [c, s, b] = combos[i];
    DatasetRecord rec;
    rec.id = fmt::format("toy{:03d}", i);
    rec.image = fs::absolute(out_dir / "images" / (rec.id + ".ppm"));
    rec.captions = {fmt::format("a {} {} on {}", kColors[c].name, kShapes[s], kBackgrounds[b].name)};
    rec.split = i % 4 == 3 ? "test" : "train";
    write_ppm(render_shape(c, s, b, rng), rec.image);
    manifest.records.push_back(std::move(rec));
  }
  write_manifest(manifest, out_dir / "manifest.jsonl");
  return ingest_manifest(out_dir / "manifest.jsonl");
}

std::vector<Image> load_images(const DatasetManifest& manifest) {
  std::vector<Image> images;
  images.reserve(manifest.records.size());
  for (const auto& r : manifest.records) images.push_back(read_ppm(r.image));
  return images;
}

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (workers < 0) throw std::invalid_argument("workers must be >= 0");
  if (eval_split.empty()) throw std::invalid_argument("eval_split must be non-empty");
  if (method.empty() || method.find_first_of(",\n\"") != std::string::npos) {
    throw std::invalid_argument("method must be non-empty without commas or quotes");
  }
  attack.validate(0);
}

json ExperimentConfig::to_json() const {
  json doc = attack.to_json();
  doc["batch_size"] = batch_size;
  doc["workers"] = workers;
  doc["eval_split"] = eval_split;
  doc["method"] = method;
  return doc;
}

ExperimentConfig ExperimentConfig::from_json(const json& doc) {
  if (!doc.is_object()) throw std::invalid_argument("config must be a JSON object");
  ExperimentConfig c;
  json attack_part = json::object();
  try {
    for (const auto& [key, value] : doc.items()) {
      if (key == "batch_size") {
        c.batch_size = value.get<int>();
      } else if (key == "workers") {
        c.workers = value.get<int>();
      } else if (key == "eval_split") {
        c.eval_split = value.get<std::string>();
      } else if (key == "method") {
        c.method = value.get<std::string>();
      } else {
        attack_part[key] = value;
      }
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  c.attack = attack::AttackConfig::from_json(attack_part);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return from_json(doc);
}

namespace {

uint64_t fnv1a(std::string_view bytes, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t splitmix(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

std::string config_hash(const json& doc) { return fmt::format("{:016x}", fnv1a(doc.dump())); }

uint64_t example_seed(uint64_t global_seed, const std::string& example_id) {
  return splitmix(splitmix(global_seed) ^ fnv1a(example_id));
}

// ---------------------------------------------------------------------------
// Models

json TrainingSummary::to_json() const {
  return {{"surrogate",
           {{"train_recall_at_1", surrogate.train_recall_at_1},
            {"held_out_recall_at_1", surrogate.held_out_recall_at_1},
            {"epochs_run", surrogate.epochs_run},
            {"final_loss", surrogate.final_loss}}},
          {"denoiser",
           {{"initial_loss", denoiser.initial_loss}, {"final_loss", denoiser.final_loss}}}};
}

ModelBundle train_models(const DatasetManifest& manifest, const fs::path& out_dir,
                         const TrainingOptions& options, TrainingSummary* summary) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());

  const auto images = load_images(manifest);
  std::vector<surrogate::TrainingExample> corpus;
  for (size_t i = 0; i < images.size(); ++i) {
    corpus.push_back({images[i], manifest.records[i].captions,
                      options.hold_out_test_split && manifest.records[i].split == "test"});
  }
  TrainingSummary local;
  auto model = surrogate::train_toy_model(corpus, options.surrogate, options.seed, &local.surrogate);
  const auto schedule = options.schedule_source.schedule();
  auto denoiser = diffusion::train_denoiser(images, schedule, options.denoiser,
                                            splitmix(options.seed ^ 0xd1ffULL), &local.denoiser);

  model->save(out_dir / "surrogate.ckpt");
  model->tokenizer().save(out_dir / "vocab.txt");
  denoiser->save(out_dir / "denoiser.ckpt");
  std::ofstream(out_dir / "training.json") << local.to_json().dump(2) << "\n";
  if (summary) *summary = local;

  ModelBundle bundle;
  bundle.predictor_total_steps = denoiser->total_steps();
  bundle.model = std::move(model);
  bundle.predictor = std::move(denoiser);
  return bundle;
}

ModelBundle load_models(const fs::path& model_dir, const std::string& adapter) {
  ModelBundle bundle;
  bundle.model = surrogate::load_external_model({adapter, model_dir / "surrogate.ckpt"});
  auto denoiser = diffusion::ConvDenoiser::load(model_dir / "denoiser.ckpt");
  bundle.predictor_total_steps = denoiser->total_steps();
  bundle.predictor = std::move(denoiser);
  return bundle;
}

// ---------------------------------------------------------------------------
// Runs

RetrievalPool build_pool(const DatasetManifest& manifest, const surrogate::SurrogateModel& model) {
  RetrievalPool pool;
  pool.images = load_images(manifest);
  for (const auto& r : manifest.records) {
    std::set<int> ids;
    for (const auto& c : r.captions) {
      ids.insert(static_cast<int>(pool.captions.size()));
      pool.captions.push_back(c);
    }
    pool.image_to_texts.push_back(std::move(ids));
  }
  pool.texts = surrogate::tokenize(model.tokenizer(), pool.captions,
                                   model.descriptor().max_text_length);
  return pool;
}

retrieval::ScoreMatrix clean_scores(const RetrievalPool& pool,
                                    const surrogate::SurrogateModel& model) {
  return retrieval::ScoreMatrix(static_cast<int64_t>(pool.images.size()),
                                static_cast<int64_t>(pool.captions.size()),
                                surrogate::score_pairs(model, pool.images, pool.texts),
                                pool.image_to_texts);
}

json ExperimentSummary::to_json() const {
  return {{"method", method},
          {"config_hash", config_hash},
          {"examples", outcomes.size()},
          {"success_rate", success_rate},
          {"mean_iterations", mean_iterations},
          {"mean_tv", mean_tv},
          {"clean_tr_recall_at_1", clean_tr_recall_at_1},
          {"report", report.to_json()}};
}

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Serialized append-only JSONL writer shared by the workers.
class RecordSink {
 public:
  explicit RecordSink(const fs::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }
  void append(const json& record) {
    std::lock_guard lock(mutex_);
    out_ << record.dump() << "\n";
    out_.flush();
  }

 private:
  std::mutex mutex_;
  std::ofstream out_;
};

// Runs fn(i) for i in [0, n) on up to `workers` threads. Stops handing out
// work after the first failure and rethrows it.
template <typename Fn>
void parallel_for(size_t n, int workers, Fn fn) {
  const size_t threads =
      std::min<size_t>(n, workers > 0 ? workers : std::max(1u, std::thread::hardware_concurrency()));
  std::atomic<size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (size_t i; !failed && (i = next++) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        failed = true;
      }
    }
  };
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

ExperimentSummary run_experiment(const DatasetManifest& manifest, const ModelBundle& models,
                                 const ExperimentConfig& config, const fs::path& out_dir) {
  config.validate();
  if (!models.model || !models.predictor) throw std::invalid_argument("models are not loaded");
  if (models.predictor_total_steps != 0 &&
      models.predictor_total_steps != config.attack.total_steps) {
    throw std::invalid_argument(fmt::format("denoiser was trained for T={} but the config uses T={}",
                                            models.predictor_total_steps,
                                            config.attack.total_steps));
  }
  const auto& model = *models.model;
  const auto pool = build_pool(manifest, model);
  config.attack.validate(pool.captions.size());
  const auto clean = clean_scores(pool, model);
  const auto encoded = model.encode_texts(pool.texts);

  auto eval = manifest.indices_of(config.eval_split);
  if (eval.empty()) throw std::invalid_argument("eval split '" + config.eval_split + "' is empty");
  if (eval.size() > static_cast<size_t>(config.batch_size)) eval.resize(config.batch_size);

  ensure_dir(out_dir / "patches");
  ensure_dir(out_dir / "adversarial");
  const std::string hash = config_hash(config.to_json());
  write_text(out_dir / "config.json", config.to_json().dump(2) + "\n");
  RecordSink sink(out_dir / "records.jsonl");

  const int64_t side = placement::patch_side_for(config.attack.patch_ratio, pool.images[0].height,
                                                 pool.images[0].width);
  std::vector<std::optional<ExampleOutcome>> outcomes(eval.size());
  try {
    parallel_for(eval.size(), config.workers, [&](size_t slot) {
      const size_t idx = eval[slot];
      const auto& rec = manifest.records[idx];
      const std::string started = utc_now();
      try {
        auto cfg = config.attack;
        cfg.seed = example_seed(config.attack.seed, rec.id);
        // Seed patch: thumbnail of the next image in the pool.
        const auto seed_patch =
            resize_area(pool.images[(idx + 1) % pool.images.size()], side, side);
        attack::AttackInputs inputs{model, *models.predictor, pool.images[idx],
                                    pool.image_to_texts[idx], pool.texts, &encoded, seed_patch};
        auto result = attack::run_attack(inputs, cfg);

        const fs::path patch_path = out_dir / "patches" / (rec.id + ".ppm");
        const fs::path adv_path = out_dir / "adversarial" / (rec.id + ".ppm");
        write_ppm(result.final_patch, patch_path);
        write_ppm(placement::compose(pool.images[idx], result.final_patch,
                                     placement::make_mask(result.placement), result.placement),
                  adv_path);
        sink.append({{"example_id", rec.id},
                     {"config_hash", hash},
                     {"iterations_used", result.iterations_used},
                     {"success", result.success},
                     {"broken_at", {{"R@1", result.broken_at_1},
                                    {"R@5", result.broken_at_5},
                                    {"R@10", result.broken_at_10}}},
                     {"final_loss", result.loss_trace.back()},
                     {"final_score_loss", result.final_score_loss},
                     {"final_tv_loss", result.final_tv_loss},
                     {"placement", result.placement.to_json()},
                     {"patch_path", fs::relative(patch_path, out_dir).generic_string()},
                     {"adversarial_path", fs::relative(adv_path, out_dir).generic_string()},
                     {"started_at", started},
                     {"finished_at", utc_now()},
                     {"wall_seconds", result.wall_seconds}});
        outcomes[slot] = ExampleOutcome{idx, rec.id, std::move(result)};
      } catch (const std::exception& e) {
        sink.append({{"example_id", rec.id},
                     {"config_hash", hash},
                     {"error", e.what()},
                     {"started_at", started},
                     {"finished_at", utc_now()}});
        throw std::runtime_error("example '" + rec.id + "': " + e.what());
      }
    });
  } catch (const std::exception& e) {
    write_text(out_dir / "error.json",
               json{{"error", e.what()}, {"config_hash", hash}}.dump(2) + "\n");
    throw;
  }

  ExperimentSummary summary;
  summary.method = config.method;
  summary.config_hash = hash;
  auto attacked = clean;
  std::vector<int64_t> attacked_images;
  double successes = 0.0, iterations = 0.0, tv = 0.0;
  for (auto& o : outcomes) {
    attacked = attacked.with_row(static_cast<int64_t>(o->index), o->result.final_scores);
    attacked_images.push_back(static_cast<int64_t>(o->index));
    successes += o->result.success;
    iterations += o->result.iterations_used;
    tv += o->result.final_tv_loss;
    summary.outcomes.push_back(std::move(*o));
  }
  const double n = static_cast<double>(summary.outcomes.size());
  summary.success_rate = successes / n;
  summary.mean_iterations = iterations / n;
  summary.mean_tv = tv / n;
  summary.clean_tr_recall_at_1 = retrieval::recall_at_n(clean, retrieval::Direction::kTR, 1).rate;
  summary.report = retrieval::build_report(config.method, clean, attacked, attacked_images);

  write_text(out_dir / "summary.csv",
             retrieval::render_summary_csv({retrieval::summary_row(summary.report)}));
  write_text(out_dir / "summary.json", summary.to_json().dump(2) + "\n");
  return summary;
}

// ---------------------------------------------------------------------------
// Ablations

AblationKind ablation_kind_from(const std::string& name) {
  if (name == "topk") return AblationKind::kTopK;
  if (name == "size") return AblationKind::kSize;
  if (name == "location") return AblationKind::kLocation;
  throw std::invalid_argument("unknown ablation '" + name + "' (expected topk, size or location)");
}

std::string to_string(AblationKind kind) {
  switch (kind) {
    case AblationKind::kTopK:
      return "topk";
    case AblationKind::kSize:
      return "size";
    default:
      return "location";
  }
}

std::string AblationTable::to_csv() const {
  std::string out = "value," + metric_name + "\n";
  for (const auto& r : rows) {
    out += r.value + "," + (r.metric ? fmt::format("{:.4f}", *r.metric) : std::string("NA")) + "\n";
  }
  return out;
}

std::vector<std::string> default_grid(AblationKind kind, size_t pool_size) {
  switch (kind) {
    case AblationKind::kTopK:
      return {"5", "10", std::to_string(pool_size - 1)};
    case AblationKind::kSize:
      return {"0.05", "0.1", "0.15", "0.2"};
    default:
      return {"diffusion:attention", "diffusion:random", "direct:attention", "direct:random"};
  }
}

AblationTable run_ablation(AblationKind kind, const std::vector<std::string>& grid,
                           const ExperimentConfig& base, const DatasetManifest& manifest,
                           const ModelBundle& models, const fs::path& out_dir) {
  if (grid.empty()) throw std::invalid_argument("ablation grid is empty");
  const auto& levels = retrieval::kRecallLevels;
  if (kind != AblationKind::kLocation &&
      std::find(levels.begin(), levels.end(), base.attack.success_rank) == levels.end()) {
    throw std::invalid_argument("ablation success_rank must be one of 1, 5, 10");
  }
  AblationTable table;
  table.kind = kind;
  table.metric_name = kind == AblationKind::kLocation
                          ? "mean_iterations"
                          : fmt::format("asr_tr_r{}", base.attack.success_rank);
  ensure_dir(out_dir);
  for (const auto& value : grid) {
    ExperimentConfig cfg = base;
    std::string tag = value;
    try {
      switch (kind) {
        case AblationKind::kTopK:
          cfg.attack.top_k = std::stoi(value);
          break;
        case AblationKind::kSize:
          cfg.attack.patch_ratio = std::stod(value);
          break;
        case AblationKind::kLocation: {
          const auto colon = value.find(':');
          if (colon == std::string::npos) throw std::invalid_argument("expected optimizer:placement");
          cfg.attack.optimizer = attack::patch_optimizer_from(value.substr(0, colon));
          cfg.attack.placement = attack::placement_strategy_from(value.substr(colon + 1));
          std::replace(tag.begin(), tag.end(), ':', '_');
          break;
        }
      }
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(fmt::format("bad {} grid value '{}': {}", to_string(kind), value,
                                              e.what()));
    }
    cfg.method = fmt::format("{}-{}", to_string(kind), tag);
    const auto summary =
        run_experiment(manifest, models, cfg, out_dir / fmt::format("{}_{}", to_string(kind), tag));
    AblationRow row{value, {}};
    if (kind == AblationKind::kLocation) {
      row.metric = summary.mean_iterations;
    } else {
      // Reported at the success rank, the criterion the attack optimizes for.
      const auto& tr = summary.report.tr;
      for (size_t i = 0; i < retrieval::kRecallLevels.size(); ++i) {
        if (retrieval::kRecallLevels[i] == cfg.attack.success_rank) row.metric = tr.asr[i].rate();
      }
    }
    table.rows.push_back(std::move(row));
  }
  write_text(out_dir / fmt::format("ablation_{}.csv", to_string(kind)), table.to_csv());
  return table;
}

fs::path resolve_output(const fs::path& path) {
  const char* root = std::getenv(kOutputRootEnv);
  if (root == nullptr || *root == '\0' || path.is_absolute()) return path;
  return fs::path(root) / path;
}

}  // namespace natpatch::experiment
