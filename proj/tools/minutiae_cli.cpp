#include "minutiae/pipeline.hpp"

#include "CLI11.hpp"

#include <chrono>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <sstream>

using namespace minutiae;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string corpus;
  std::string out;
  std::string model_coarse;
  std::string model_fine;
  std::vector<std::string> setting;
  double threshold = 0.5;
  double fine_threshold = 0.5;
  std::string nms = "iou";
  bool skip_finenet = false;
  std::uint64_t seed = 1;
  bool paper_scale = false;
  // synth
  int train = 64;
  int test = 16;
  int size = 128;
  double noise = -1.0;
  // train
  std::string stage = "both";
  std::int64_t steps = 0;
  std::int64_t until = -1;
  std::string resume;
  std::string patches;
  // extract / eval / render
  std::string split = "test";
  std::vector<std::string> images;
  bool render = false;
  std::string pred;
  std::string ablation;
  std::string pr_curve;
  std::string image;
  std::string template_path;
  std::string gt;
};

PipelineConfig resolve(const Options& o) {
  PipelineConfig c = o.paper_scale ? PipelineConfig::paper_scale() : PipelineConfig::desk_scale();
  c.set_seed(o.seed);
  c.train_count = o.train;
  c.test_count = o.test;
  c.synth.width = c.synth.height = o.size;
  if (o.noise >= 0.0) c.synth.noise_level = o.noise;
  c.extract.threshold = o.threshold;
  c.fine.threshold = o.fine_threshold;
  if (o.nms == "iou") c.extract.nms = NmsKind::iou;
  else if (o.nms == "distance") c.extract.nms = NmsKind::distance;
  else throw UsageError("--nms must be iou or distance");
  c.skip_fine = o.skip_finenet;
  return c;
}

std::vector<EvalSetting> resolve_settings(const std::vector<std::string>& s) {
  if (s.empty()) return standard_settings();
  if (s.size() == 1) {
    if (s[0] == "1" || s[0] == "2" || s[0] == "3") return {standard_setting(std::stoi(s[0]))};
    throw UsageError("--setting takes 1, 2, 3 or 'custom D O'");
  }
  if (s.size() == 3 && s[0] == "custom") {
    try {
      return {EvalSetting("custom", std::stod(s[1]), std::stod(s[2]))};
    } catch (const std::invalid_argument&) {
      throw UsageError("--setting custom needs numeric D and O");
    }
  }
  throw UsageError("--setting takes 1, 2, 3 or 'custom D O'");
}

void require_dir(const std::string& path, const char* flag) {
  if (!fs::is_directory(path)) throw std::runtime_error(std::string(flag) + ": no such directory: " + path);
}

void require_file(const std::string& path, const char* flag) {
  if (!fs::is_regular_file(path)) throw std::runtime_error(std::string(flag) + ": no such file: " + path);
}

std::string table(const CorpusReport& report, const std::vector<AblationRow>& ablation = {}) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(3);
  out << std::left << std::setw(16) << "row" << std::setw(24) << "setting" << std::right << std::setw(8) << "P"
      << std::setw(8) << "R" << std::setw(8) << "F1" << '\n';
  auto rows = [&](const std::string& name, const CorpusReport& r) {
    for (const SettingResult& s : r.settings) {
      std::ostringstream label;
      label << s.setting.name << " (D=" << s.setting.D << ",O=" << s.setting.O << ")";
      out << std::left << std::setw(16) << name << std::setw(24) << label.str() << std::right << std::setw(8)
          << s.metrics.precision << std::setw(8) << s.metrics.recall << std::setw(8) << s.metrics.f1 << '\n';
    }
  };
  if (ablation.empty()) rows("pipeline", report);
  for (const AblationRow& a : ablation) rows(a.name, a.report);
  return out.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<std::pair<std::string, std::string>> with(std::vector<std::pair<std::string, std::string>> base,
                                                      std::vector<std::pair<std::string, std::string>> extra) {
  base.insert(base.end(), extra.begin(), extra.end());
  return base;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_synth(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const PipelineConfig c = resolve(o);
  if (o.train < 0 || o.test < 0 || o.train + o.test == 0) throw UsageError("--train and --test must give prints");
  const auto entries = build_corpus(o.out, o.train, o.test, c.synth);
  std::cout << "wrote " << entries.size() << " prints to " << o.out << '\n';
  write_run_log(fs::path(o.out) / "run.log", "synth", c.describe(), seconds_since(t0));
  return 0;
}

int cmd_train(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  PipelineConfig c = resolve(o);
  if (o.stage != "coarse" && o.stage != "fine" && o.stage != "both") throw UsageError("--stage must be coarse, fine or both");
  if (!o.resume.empty() && o.stage == "both") throw UsageError("--resume needs --stage coarse or --stage fine");
  if (o.steps < 0) throw UsageError("--steps must be positive");
  if (o.steps > 0) {
    c.coarse_train.steps = c.coarse_train.schedule.total_steps = o.steps;
    c.fine_train.steps = c.fine_train.schedule.total_steps = o.steps;
  }
  require_dir(o.corpus, "--corpus");
  std::optional<fs::path> resume;
  if (!o.resume.empty()) {
    require_file(o.resume, "--resume");
    resume = o.resume;
  }
  const std::vector<CorpusItem> train = load_split(o.corpus, "train");
  if (train.empty()) throw std::runtime_error("corpus has no training prints: " + o.corpus);
  c.train_count = static_cast<int>(train.size());
  c.test_count = static_cast<int>(load_split(o.corpus, "test").size());
  std::vector<std::pair<std::string, std::string>> fields = c.describe();
  fields.emplace_back("stage", o.stage);

  if (o.stage != "fine") {
    const StageOutput s = train_coarse_stage(train, c, o.out, resume, o.until);
    std::cout << "coarse: " << s.steps << " steps, final loss " << s.final_loss << ", checkpoint " << s.checkpoint.string()
              << '\n';
    fields.emplace_back("coarse.final_loss", nn::format_double(s.final_loss));
  }
  if (o.stage != "coarse") {
    std::vector<Patch> patches;
    if (!o.patches.empty()) {
      require_dir(o.patches, "--patches");
      patches = read_patch_dataset(o.patches);
      for (const Patch& p : patches) {
        if (p.size() != c.fine.t2) throw std::runtime_error("patch dataset size does not match t2");
      }
    } else {
      patches = build_patch_set(train, c.fine, c.fine_rounds, c.fine_train.seed);
      write_patch_dataset(fs::path(o.out) / "patches", patches);
      log_info("wrote patch dataset to " + (fs::path(o.out) / "patches").string());
    }
    const StageOutput s = train_fine_stage(patches, c, o.out, resume, o.until);
    std::cout << "fine: " << s.steps << " steps, final loss " << s.final_loss << ", checkpoint " << s.checkpoint.string()
              << '\n';
    fields.emplace_back("fine.final_loss", nn::format_double(s.final_loss));
  }
  write_run_log(fs::path(o.out) / "run_train.log", "train", fields, seconds_since(t0));
  return 0;
}

Models models_for(const Options& o) {
  if (o.model_coarse.empty()) throw UsageError("--model-coarse is required");
  if (o.model_fine.empty() && !o.skip_finenet) throw UsageError("--model-fine is required unless --skip-finenet is set");
  require_file(o.model_coarse, "--model-coarse");
  std::optional<fs::path> fine;
  if (!o.skip_finenet) {
    require_file(o.model_fine, "--model-fine");
    fine = o.model_fine;
  }
  return load_models(o.model_coarse, fine);
}

struct Inputs {
  std::vector<std::string> ids;
  std::vector<GrayImage> images;
  std::vector<MinutiaSet> truth;  // empty for bare images
};

Inputs inputs_for(const Options& o) {
  Inputs in;
  if (!o.corpus.empty()) {
    require_dir(o.corpus, "--corpus");
    for (CorpusItem& it : load_split(o.corpus, o.split)) {
      in.ids.push_back(it.id);
      in.images.push_back(std::move(it.image));
      in.truth.push_back(std::move(it.gt));
    }
  }
  for (const std::string& path : o.images) {
    require_file(path, "--image");
    in.ids.push_back(fs::path(path).stem().string());
    in.images.push_back(read_pgm(path));
  }
  if (in.ids.empty()) throw UsageError("give --corpus or at least one --image");
  return in;
}

int cmd_extract(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const PipelineConfig c = resolve(o);
  Models models = models_for(o);
  const Inputs in = inputs_for(o);
  fs::create_directories(o.out);
  std::vector<MinutiaSet> sets;
  for (size_t i = 0; i < in.ids.size(); ++i) {
    Extraction e = extract_image(in.images[i], models, c.extract, c.skip_fine, c.fine.threshold);
    if (o.render) {
      const MinutiaSet* truth = in.truth.size() > i ? &in.truth[i] : nullptr;
      write_pgm(fs::path(o.out) / (in.ids[i] + "_overlay.pgm"), render_overlay(in.images[i], e.minutiae, truth));
      write_pgm(fs::path(o.out) / (in.ids[i] + "_score.pgm"),
                render_score_map(e.fused, in.images[i].width(), in.images[i].height()));
    }
    log_debug(in.ids[i] + ": " + std::to_string(e.coarse.size()) + " coarse, " + std::to_string(e.minutiae.size()) +
              " kept");
    sets.push_back(std::move(e.minutiae));
  }
  write_templates(o.out, in.ids, sets);
  std::cout << "wrote " << sets.size() << " templates to " << o.out << '\n';
  write_run_log(fs::path(o.out) / "run_extract.log", "extract",
                with(c.describe(), {{"model_coarse", o.model_coarse}, {"model_fine", o.model_fine}}), seconds_since(t0));
  return 0;
}

int cmd_eval(const Options& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const PipelineConfig c = resolve(o);
  const std::vector<EvalSetting> settings = resolve_settings(o.setting);
  if (!o.ablation.empty() && o.ablation != "nms") throw UsageError("--ablation supports only 'nms'");
  if (o.corpus.empty()) throw UsageError("--corpus is required");
  if (o.pred.empty() && o.model_coarse.empty()) throw UsageError("give --pred or --model-coarse");
  if (!o.ablation.empty() && o.model_coarse.empty()) throw UsageError("--ablation nms needs --model-coarse");
  require_dir(o.corpus, "--corpus");
  const std::vector<CorpusItem> items = load_split(o.corpus, o.split);
  std::vector<std::string> ids;
  std::vector<MinutiaSet> gts;
  for (const CorpusItem& it : items) {
    ids.push_back(it.id);
    gts.push_back(it.gt);
  }

  std::vector<MinutiaSet> preds;
  std::vector<AblationRow> ablation;
  if (!o.pred.empty()) {
    require_dir(o.pred, "--pred");
    preds = read_templates(o.pred, ids);
  } else {
    Models models = models_for(o);
    for (const CorpusItem& it : items)
      preds.push_back(extract_image(it.image, models, c.extract, c.skip_fine, c.fine.threshold).minutiae);
    if (!o.ablation.empty()) {
      for (NmsKind kind : {NmsKind::iou, NmsKind::distance}) {
        ExtractOptions opts = c.extract;
        opts.nms = kind;
        std::vector<MinutiaSet> variant;
        for (const CorpusItem& it : items)
          variant.push_back(extract_image(it.image, models, opts, c.skip_fine, c.fine.threshold).minutiae);
        ablation.push_back({kind == NmsKind::iou ? "nms_iou" : "nms_distance", evaluate_corpus(variant, gts, settings, ids)});
      }
    }
  }
  const CorpusReport report = evaluate_corpus(preds, gts, settings, ids);
  std::cout << table(report, ablation);
  if (!o.out.empty()) {
    const fs::path out(o.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_text_file(out, encode_report(report, ablation));
    write_run_log(out.string() + ".log", "eval", with(c.describe(), {{"pred", o.pred}}), seconds_since(t0));
  }
  if (!o.pr_curve.empty()) write_text_file(o.pr_curve, encode_pr_csv(pr_curve(preds, gts, settings.back())));
  return 0;
}

int cmd_render(const Options& o) {
  require_file(o.image, "--image");
  const GrayImage image = read_pgm(o.image);
  MinutiaSet detected;
  detected.width = image.width();
  detected.height = image.height();
  if (!o.template_path.empty()) {
    require_file(o.template_path, "--template");
    detected = read_template(o.template_path);
  }
  std::optional<MinutiaSet> truth;
  if (!o.gt.empty()) {
    require_file(o.gt, "--gt");
    truth = read_template(o.gt);
  }
  const fs::path out(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_pgm(out.string() + "_overlay.pgm", render_overlay(image, detected, truth ? &*truth : nullptr));
  if (!o.model_coarse.empty()) {
    require_file(o.model_coarse, "--model-coarse");
    Models models = load_models(o.model_coarse, std::nullopt);
    const Extraction e = extract_image(image, models, resolve(o).extract, true, 0.5);
    write_pgm(out.string() + "_score.pgm", render_score_map(e.fused, image.width(), image.height()));
  }
  std::cout << "wrote " << out.string() << "_overlay.pgm\n";
  return 0;
}

void common_flags(CLI::App* sub, Options& o) {
  sub->add_option("--seed", o.seed, "Master seed");
  sub->add_flag("--paper-scale", o.paper_scale, "Use full-size training schedules");
}

void extract_flags(CLI::App* sub, Options& o) {
  sub->add_option("--model-coarse", o.model_coarse, "CoarseNet checkpoint");
  sub->add_option("--model-fine", o.model_fine, "FineNet checkpoint");
  sub->add_option("--threshold", o.threshold, "Candidate score threshold")->check(CLI::Range(0.0, 1.0));
  sub->add_option("--fine-threshold", o.fine_threshold, "FineNet acceptance threshold")->check(CLI::Range(0.0, 1.0));
  sub->add_option("--nms", o.nms, "Suppression rule")->check(CLI::IsMember({"iou", "distance"}));
  sub->add_flag("--skip-finenet", o.skip_finenet, "Coarse-only output");
  sub->add_option("--split", o.split, "Corpus split")->check(CLI::IsMember({"train", "test"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fingerprint minutiae extraction toolkit"};
  app.set_version_flag("--version", std::string(version_string()));
  app.require_subcommand(1);
  Options o;

  auto* synth = app.add_subcommand("synth", "Write a synthetic labelled corpus");
  synth->add_option("--out", o.out, "Corpus directory")->required();
  synth->add_option("--train", o.train, "Training prints");
  synth->add_option("--test", o.test, "Test prints");
  synth->add_option("--size", o.size, "Image side in pixels")->check(CLI::Range(32, 4096));
  synth->add_option("--noise", o.noise, "Upper bound of the noise stddev")->check(CLI::Range(0.0, 1.0));
  common_flags(synth, o);

  auto* train = app.add_subcommand("train", "Train CoarseNet and/or FineNet");
  train->add_option("--corpus", o.corpus, "Corpus directory")->required();
  train->add_option("--out", o.out, "Output directory")->required();
  train->add_option("--stage", o.stage, "coarse, fine or both")->check(CLI::IsMember({"coarse", "fine", "both"}));
  train->add_option("--steps", o.steps, "Training steps per stage");
  train->add_option("--resume", o.resume, "Checkpoint to continue from");
  train->add_option("--until", o.until, "Stop after this many completed steps");
  train->add_option("--patches", o.patches, "Patch dataset for the fine stage");
  common_flags(train, o);

  auto* extract = app.add_subcommand("extract", "Extract minutiae templates");
  extract->add_option("--corpus", o.corpus, "Corpus directory");
  extract->add_option("--image", o.images, "PGM image(s)");
  extract->add_option("--out", o.out, "Template directory")->required();
  extract->add_flag("--render", o.render, "Also write overlays and score maps");
  extract_flags(extract, o);
  common_flags(extract, o);

  auto* eval = app.add_subcommand("eval", "Evaluate templates against ground truth");
  eval->add_option("--corpus", o.corpus, "Corpus directory")->required();
  eval->add_option("--pred", o.pred, "Directory of predicted templates");
  eval->add_option("--out", o.out, "Report file");
  eval->add_option("--setting", o.setting, "1, 2, 3 or 'custom D O'")->expected(1, 3);
  eval->add_option("--ablation", o.ablation, "Ablation to run (nms)");
  eval->add_option("--pr-curve", o.pr_curve, "PR-curve CSV for the last setting");
  extract_flags(eval, o);
  common_flags(eval, o);

  auto* render = app.add_subcommand("render", "Draw a template over its image");
  render->add_option("--image", o.image, "PGM image")->required();
  render->add_option("--template", o.template_path, "Detected minutiae");
  render->add_option("--gt", o.gt, "Ground-truth minutiae");
  render->add_option("--model-coarse", o.model_coarse, "CoarseNet checkpoint for the score map");
  render->add_option("--out", o.out, "Output prefix")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) return cmd_synth(o);
    if (*train) return cmd_train(o);
    if (*extract) return cmd_extract(o);
    if (*eval) return cmd_eval(o);
    if (*render) return cmd_render(o);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
