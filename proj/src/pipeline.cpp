#include "minutiae/pipeline.hpp"

#include "minutiae/error.hpp"
#include "minutiae/nn/checkpoint.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>
#include <stdexcept>

#ifndef MINUTIAE_VERSION
#define MINUTIAE_VERSION "unknown"
#endif

namespace minutiae {

namespace fs = std::filesystem;

const char* version_string() { return MINUTIAE_VERSION; }

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

PipelineConfig PipelineConfig::desk_scale() {
  PipelineConfig c;
  c.synth.width = c.synth.height = 128;
  c.coarse_train.steps = 2000;
  c.coarse_train.batch = 8;
  c.coarse_train.crop = 64;
  c.coarse_train.schedule.total_steps = 2000;
  c.fine.t2 = 64;
  c.fine.widths = {8, 16, 32};
  c.fine_train.steps = 1200;
  c.fine_train.schedule.total_steps = 1200;
  return c;
}

PipelineConfig PipelineConfig::paper_scale() {
  PipelineConfig c;
  c.coarse_train.steps = 200000;
  c.coarse_train.crop = 0;
  c.coarse_train.schedule.total_steps = 200000;
  c.fine_train.steps = 200000;
  c.fine_train.schedule.total_steps = 200000;
  return c;
}

void PipelineConfig::set_seed(std::uint64_t seed) {
  synth.seed = seed;
  coarse.seed = seed;
  coarse_train.seed = seed;
  fine.seed = seed;
  fine_train.seed = seed;
}

std::vector<std::pair<std::string, std::string>> PipelineConfig::describe() const {
  auto num = [](double v) { return nn::format_double(v); };
  auto ints = [](const auto& a) {
    std::string s;
    for (int v : a) s += (s.empty() ? "" : ",") + std::to_string(v);
    return s;
  };
  return {
      {"corpus.train", std::to_string(train_count)},
      {"corpus.test", std::to_string(test_count)},
      {"synth.seed", std::to_string(synth.seed)},
      {"synth.size", std::to_string(synth.width) + "x" + std::to_string(synth.height)},
      {"synth.noise_level", num(synth.noise_level)},
      {"synth.distortion", num(synth.distortion)},
      {"synth.creases_max", std::to_string(synth.creases_max)},
      {"coarse.widths", ints(coarse.widths)},
      {"coarse.blocks_per_stage", std::to_string(coarse.blocks_per_stage)},
      {"coarse.aspp_rates", ints(coarse.aspp_rates)},
      {"coarse.seed", std::to_string(coarse.seed)},
      {"coarse_train.steps", std::to_string(coarse_train.steps)},
      {"coarse_train.batch", std::to_string(coarse_train.batch)},
      {"coarse_train.crop", std::to_string(coarse_train.crop)},
      {"coarse_train.lr", num(coarse_train.schedule.initial_lr)},
      {"coarse_train.momentum", num(coarse_train.momentum)},
      {"coarse_train.weight_decay", num(coarse_train.weight_decay)},
      {"coarse_train.positive_weight", num(coarse_train.weights.positive_weight)},
      {"fine.t1", std::to_string(fine.t1)},
      {"fine.t2", std::to_string(fine.t2)},
      {"fine.widths", ints(fine.widths)},
      {"fine.embedding", std::to_string(fine.embedding)},
      {"fine.alpha", num(fine.alpha)},
      {"fine.beta", num(fine.beta)},
      {"fine.batch", std::to_string(fine.batch)},
      {"fine.threshold", num(fine.threshold)},
      {"fine.coarse_weight", num(fine.coarse_weight)},
      {"fine.seed", std::to_string(fine.seed)},
      {"fine_train.steps", std::to_string(fine_train.steps)},
      {"fine_train.lr", num(fine_train.schedule.initial_lr)},
      {"fine_train.augment", fine_train.augment ? "true" : "false"},
      {"fine_rounds", std::to_string(fine_rounds)},
      {"extract.threshold", num(extract.threshold)},
      {"extract.nms", extract.nms == NmsKind::iou ? "iou" : "distance"},
      {"extract.nms_overlap", num(extract.nms_overlap)},
      {"extract.nms_dist", num(extract.nms_dist)},
      {"extract.nms_orient", num(extract.nms_orient)},
      {"skip_finenet", skip_fine ? "true" : "false"},
  };
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

int log_level() {
  const char* v = std::getenv("MINUTIAE_LOG");
  if (!v) return 1;
  const std::string s(v);
  if (s == "0" || s == "quiet" || s == "error") return 0;
  if (s == "2" || s == "debug") return 2;
  return 1;
}

void log_info(const std::string& message) {
  if (log_level() >= 1) std::cerr << "[minutiae] " << message << '\n';
}

void log_debug(const std::string& message) {
  if (log_level() >= 2) std::cerr << "[minutiae:debug] " << message << '\n';
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

std::vector<Patch> build_patch_set(const std::vector<CorpusItem>& items, const FineConfig& cfg, int rounds,
                                   std::uint64_t seed) {
  require(rounds >= 1, "build_patch_set: rounds must be positive");
  std::vector<Patch> out;
  int short_samples = 0;
  for (int r = 0; r < rounds; ++r) {
    for (size_t i = 0; i < items.size(); ++i) {
      const CorpusItem& it = items[i];
      if (it.gt.size() == 0) continue;
      std::mt19937_64 rng(derive_seed(seed, "fine-patches-" + std::to_string(r), static_cast<int>(i)));
      PatchSample s = sample_training_patches(it.image, it.gt, 2 * static_cast<int>(it.gt.size()), cfg, rng,
                                              &it.gt_mask);
      short_samples += s.short_sample ? 1 : 0;
      std::move(s.patches.begin(), s.patches.end(), std::back_inserter(out));
    }
  }
  if (short_samples > 0) log_info(std::to_string(short_samples) + " prints gave short patch samples");
  return out;
}

namespace {

std::ofstream open_csv(const fs::path& path, bool append, const std::string& header) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (!append) out << header << '\n';
  return out;
}

}  // namespace

StageOutput train_coarse_stage(const std::vector<CorpusItem>& train, const PipelineConfig& cfg, const fs::path& out_dir,
                               const std::optional<fs::path>& resume, std::int64_t until) {
  require(!train.empty(), "train_coarse_stage: empty training split");
  fs::create_directories(out_dir);
  std::vector<CoarseSample> samples;
  samples.reserve(train.size());
  for (const CorpusItem& it : train) samples.push_back(make_coarse_sample(it));

  CoarseTrainer trainer(cfg.coarse, cfg.coarse_train);
  if (resume) {
    trainer.model = coarse_from_checkpoint(nn::read_checkpoint(*resume), &trainer.optim);
    log_info("resuming coarse training at step " + std::to_string(trainer.optim.step));
  }
  StageOutput out;
  out.checkpoint = out_dir / "coarse.ckpt";
  out.loss_csv = out_dir / "loss_coarse.csv";
  std::ofstream csv = open_csv(out.loss_csv, resume.has_value(), "step,loss,learning_rate");
  const std::int64_t every = std::max<std::int64_t>(1, cfg.coarse_train.steps / 20);
  trainer.run(samples, until < 0 ? cfg.coarse_train.steps : until, [&](const TrainLogEntry& e) {
    csv << e.step << ',' << nn::format_double(e.loss) << ',' << nn::format_double(e.learning_rate) << '\n';
    out.final_loss = e.loss;
    if ((e.step + 1) % every == 0) log_info("coarse step " + std::to_string(e.step + 1) + " loss " + std::to_string(e.loss));
  });
  out.steps = trainer.optim.step;
  nn::write_checkpoint(out.checkpoint, coarse_checkpoint(trainer.model, &trainer.optim));
  return out;
}

StageOutput train_fine_stage(const std::vector<Patch>& patches, const PipelineConfig& cfg, const fs::path& out_dir,
                             const std::optional<fs::path>& resume, std::int64_t until) {
  require(!patches.empty(), "train_fine_stage: empty patch set");
  fs::create_directories(out_dir);
  FineTrainer trainer(cfg.fine, cfg.fine_train);
  if (resume) {
    trainer.model = fine_from_checkpoint(nn::read_checkpoint(*resume), &trainer.optim);
    log_info("resuming fine training at step " + std::to_string(trainer.optim.step));
  }
  StageOutput out;
  out.checkpoint = out_dir / "fine.ckpt";
  out.loss_csv = out_dir / "loss_fine.csv";
  std::ofstream csv = open_csv(out.loss_csv, resume.has_value(), "step,loss,accuracy,learning_rate,center_shift");
  const std::int64_t every = std::max<std::int64_t>(1, cfg.fine_train.steps / 20);
  trainer.run(patches, until < 0 ? cfg.fine_train.steps : until, [&](const FineLogEntry& e) {
    csv << e.step << ',' << nn::format_double(e.loss) << ',' << nn::format_double(e.accuracy) << ','
        << nn::format_double(e.learning_rate) << ',' << nn::format_double(e.center_shift) << '\n';
    out.final_loss = e.loss;
    if ((e.step + 1) % every == 0) {
      log_info("fine step " + std::to_string(e.step + 1) + " loss " + std::to_string(e.loss) + " accuracy " +
               std::to_string(e.accuracy));
    }
  });
  out.steps = trainer.optim.step;
  nn::write_checkpoint(out.checkpoint, fine_checkpoint(trainer.model, &trainer.optim));
  return out;
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

Models load_models(const fs::path& coarse_path, const std::optional<fs::path>& fine_path) {
  Models m;
  m.coarse = std::make_unique<CoarseNet>(coarse_from_checkpoint(nn::read_checkpoint(coarse_path)));
  if (fine_path) m.fine = std::make_unique<FineNet>(fine_from_checkpoint(nn::read_checkpoint(*fine_path)));
  return m;
}

Extraction extract_image(const GrayImage& image, Models& models, const ExtractOptions& opts, bool skip_fine,
                         double fine_threshold) {
  require(models.coarse != nullptr, "extract_image: coarse model missing");
  CoarseExtraction ce = extract_coarse_detailed(image, *models.coarse, opts);
  Extraction out;
  out.coarse = ce.minutiae;
  out.fused = std::move(ce.fused);
  out.minutiae = (models.fine && !skip_fine) ? refine_minutiae(out.coarse, image, *models.fine, fine_threshold)
                                             : out.coarse;
  return out;
}

void write_templates(const fs::path& dir, const std::vector<std::string>& ids, const std::vector<MinutiaSet>& sets) {
  require(ids.size() == sets.size(), "write_templates: ids and sets differ in length");
  fs::create_directories(dir);
  for (size_t i = 0; i < ids.size(); ++i) write_template(dir / (ids[i] + ".min"), sets[i]);
}

std::vector<MinutiaSet> read_templates(const fs::path& dir, const std::vector<std::string>& ids) {
  std::vector<std::string> missing;
  for (const std::string& id : ids)
    if (!fs::exists(dir / (id + ".min"))) missing.push_back(id);
  if (!missing.empty()) {
    std::string list;
    for (const std::string& id : missing) list += (list.empty() ? "" : ", ") + id;
    throw std::runtime_error("predictions missing for " + std::to_string(missing.size()) + " image(s): " + list);
  }
  std::vector<MinutiaSet> out;
  for (const std::string& id : ids) out.push_back(read_template(dir / (id + ".min")));
  return out;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

namespace {

void put(Plane& p, int x, int y, float v) {
  if (x >= 0 && y >= 0 && x < p.cols() && y < p.rows()) p(y, x) = v;
}

}  // namespace

GrayImage render_overlay(const GrayImage& image, const MinutiaSet& detected, const MinutiaSet* truth) {
  Plane p = image.pixels();
  if (truth) {
    for (const Minutia& m : truth->minutiae) {
      const int x = static_cast<int>(std::lround(m.x)), y = static_cast<int>(std::lround(m.y));
      for (int d = -3; d <= 3; ++d) {
        put(p, x + d, y, 0.0f);
        put(p, x, y + d, 0.0f);
      }
    }
  }
  for (const Minutia& m : detected.minutiae) {
    const int x = static_cast<int>(std::lround(m.x)), y = static_cast<int>(std::lround(m.y));
    for (int d = -3; d <= 3; ++d) {
      put(p, x + d, y - 3, 1.0f);
      put(p, x + d, y + 3, 1.0f);
      put(p, x - 3, y + d, 1.0f);
      put(p, x + 3, y + d, 1.0f);
    }
    const double r = m.direction.radians();
    for (int t = 4; t <= 10; ++t) {
      put(p, static_cast<int>(std::lround(m.x + t * std::cos(r))), static_cast<int>(std::lround(m.y + t * std::sin(r))),
          1.0f);
    }
  }
  return GrayImage(std::move(p));
}

GrayImage render_score_map(const Plane& fused, int width, int height) {
  require(fused.size() > 0 && width > 0 && height > 0, "render_score_map: empty input");
  Plane out(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      out(y, x) = sample_clamped(fused, (x + 0.5) / 16.0 - 0.5, (y + 0.5) / 16.0 - 0.5);
    }
  }
  return GrayImage::clipped(std::move(out));
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

RunArtifacts run_pipeline(const fs::path& corpus, const fs::path& out_dir, const PipelineConfig& cfg) {
  const std::vector<CorpusItem> train = load_split(corpus, "train");
  const std::vector<CorpusItem> test = load_split(corpus, "test");
  require(!train.empty() && !test.empty(), "run_pipeline: corpus needs train and test prints");
  fs::create_directories(out_dir);
  RunArtifacts art;

  log_info("training coarse network on " + std::to_string(train.size()) + " prints");
  art.coarse_checkpoint = train_coarse_stage(train, cfg, out_dir).checkpoint;
  const std::vector<Patch> patches = build_patch_set(train, cfg.fine, cfg.fine_rounds, cfg.fine_train.seed);
  log_info("training fine network on " + std::to_string(patches.size()) + " patches");
  art.fine_checkpoint = train_fine_stage(patches, cfg, out_dir).checkpoint;

  Models models = load_models(art.coarse_checkpoint, art.fine_checkpoint);
  ExtractOptions distance = cfg.extract;
  distance.nms = NmsKind::distance;
  std::vector<std::string> ids;
  std::vector<MinutiaSet> gts, refined, coarse, by_distance;
  for (const CorpusItem& it : test) {
    ids.push_back(it.id);
    gts.push_back(it.gt);
    Extraction e = extract_image(it.image, models, cfg.extract, cfg.skip_fine, cfg.fine.threshold);
    refined.push_back(std::move(e.minutiae));
    coarse.push_back(std::move(e.coarse));
    by_distance.push_back(extract_image(it.image, models, distance, cfg.skip_fine, cfg.fine.threshold).minutiae);
  }
  write_templates(out_dir / "templates" / "refined", ids, refined);
  write_templates(out_dir / "templates" / "coarse", ids, coarse);
  write_templates(out_dir / "templates" / "nms_distance", ids, by_distance);

  const std::vector<EvalSetting> settings = standard_settings();
  art.refined = evaluate_corpus(refined, gts, settings, ids);
  art.coarse_only = evaluate_corpus(coarse, gts, settings, ids);
  art.nms_distance = evaluate_corpus(by_distance, gts, settings, ids);
  art.report = out_dir / "report.txt";
  art.coarse_report = out_dir / "report_skip_finenet.txt";
  art.ablation_report = out_dir / "report_nms_ablation.txt";
  write_text_file(art.report, encode_report(art.refined));
  write_text_file(art.coarse_report, encode_report(art.coarse_only));
  write_text_file(art.ablation_report,
                  encode_report(art.refined, {{"nms_iou", art.refined}, {"nms_distance", art.nms_distance}}));
  write_text_file(out_dir / "pr_curve.csv", encode_pr_csv(pr_curve(refined, gts, standard_setting(3))));

  art.files = {art.coarse_checkpoint, art.fine_checkpoint, out_dir / "loss_coarse.csv", out_dir / "loss_fine.csv",
               art.report, art.coarse_report, art.ablation_report, out_dir / "pr_curve.csv"};
  for (const char* kind : {"refined", "coarse", "nms_distance"})
    for (const std::string& id : ids) art.files.push_back(out_dir / "templates" / kind / (id + ".min"));
  return art;
}

void write_run_log(const fs::path& path, const std::string& command,
                   const std::vector<std::pair<std::string, std::string>>& fields, double seconds) {
  std::string text = "#minutiae-run-v1\nversion=" + std::string(version_string()) + "\ncommand=" + command + '\n';
  for (const auto& [k, v] : fields) text += k + '=' + v + '\n';
  text += "duration_s=" + nn::format_double(seconds) + '\n';
  write_text_file(path, text);
}

std::string file_checksum(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv1a64(bytes));
}

}  // namespace minutiae
