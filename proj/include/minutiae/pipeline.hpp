#ifndef MINUTIAE_PIPELINE_HPP_
#define MINUTIAE_PIPELINE_HPP_

#include "minutiae/coarsenet.hpp"
#include "minutiae/evaluation.hpp"
#include "minutiae/finenet.hpp"
#include "minutiae/synth.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace minutiae {

/// git-describe style version baked in at build time.
const char* version_string();

/// Every tunable of a full run. Desk-scale values live here so the core
/// modules keep their full-size defaults.
struct PipelineConfig {
  int train_count = 64;
  int test_count = 16;
  SynthParams synth;
  CoarseConfig coarse;
  CoarseTrainConfig coarse_train;
  FineConfig fine;
  FineTrainConfig fine_train;
  int fine_rounds = 4;  // patch-sampling passes over each training print
  ExtractOptions extract;
  bool skip_fine = false;

  static PipelineConfig desk_scale();
  static PipelineConfig paper_scale();
  /// Re-seeds every stage from one master seed.
  void set_seed(std::uint64_t seed);
  /// Resolved settings as ordered key/value pairs for run logs.
  std::vector<std::pair<std::string, std::string>> describe() const;
};

/// Log verbosity from MINUTIAE_LOG: 0 quiet, 1 info (default), 2 debug.
int log_level();
void log_info(const std::string& message);
void log_debug(const std::string& message);

/// Balanced training patches from `rounds` independent sampling passes.
std::vector<Patch> build_patch_set(const std::vector<CorpusItem>& items, const FineConfig& cfg, int rounds,
                                   std::uint64_t seed);

struct StageOutput {
  std::filesystem::path checkpoint;
  std::filesystem::path loss_csv;
  std::int64_t steps = 0;
  double final_loss = 0.0;
};

/// Trains CoarseNet on the training split; writes out_dir/coarse.ckpt and
/// out_dir/loss_coarse.csv. A resume checkpoint continues its run; `until`
/// stops early (at that completed-step count) without changing the schedule.
StageOutput train_coarse_stage(const std::vector<CorpusItem>& train, const PipelineConfig& cfg,
                               const std::filesystem::path& out_dir,
                               const std::optional<std::filesystem::path>& resume = std::nullopt,
                               std::int64_t until = -1);

/// Trains FineNet on `patches`; writes out_dir/fine.ckpt and out_dir/loss_fine.csv.
StageOutput train_fine_stage(const std::vector<Patch>& patches, const PipelineConfig& cfg,
                             const std::filesystem::path& out_dir,
                             const std::optional<std::filesystem::path>& resume = std::nullopt,
                             std::int64_t until = -1);

struct Models {
  std::unique_ptr<CoarseNet> coarse;
  std::unique_ptr<FineNet> fine;  // null for coarse-only extraction
};

Models load_models(const std::filesystem::path& coarse_path, const std::optional<std::filesystem::path>& fine_path);

struct Extraction {
  MinutiaSet minutiae;
  MinutiaSet coarse;  // before refinement
  Plane fused;        // fused score map on the 16 px grid
};

/// Coarse extraction followed by FineNet refinement unless the fine model
/// is absent or `skip_fine` is set.
Extraction extract_image(const GrayImage& image, Models& models, const ExtractOptions& opts, bool skip_fine,
                         double fine_threshold);

/// dir/<id>.min for every set.
void write_templates(const std::filesystem::path& dir, const std::vector<std::string>& ids,
                     const std::vector<MinutiaSet>& sets);
/// Reads dir/<id>.min for every id; throws listing every missing id.
std::vector<MinutiaSet> read_templates(const std::filesystem::path& dir, const std::vector<std::string>& ids);

/// PGM overlay: detections as white squares with a direction tick, ground
/// truth as black crosses.
GrayImage render_overlay(const GrayImage& image, const MinutiaSet& detected, const MinutiaSet* truth = nullptr);
/// Score map bilinearly upsampled to width x height.
GrayImage render_score_map(const Plane& fused, int width, int height);

/// Artifacts of a complete synth-free run over an existing corpus.
struct RunArtifacts {
  std::filesystem::path coarse_checkpoint;
  std::filesystem::path fine_checkpoint;
  std::filesystem::path report;          // refined pipeline
  std::filesystem::path coarse_report;   // skip-finenet ablation
  std::filesystem::path ablation_report; // IoU vs distance NMS
  CorpusReport refined;
  CorpusReport coarse_only;
  CorpusReport nms_distance;
  std::vector<std::filesystem::path> files;  // every deterministic artifact
};

/// Trains both stages, extracts the test split with and without FineNet
/// and with both NMS variants, and writes templates plus reports.
RunArtifacts run_pipeline(const std::filesystem::path& corpus, const std::filesystem::path& out_dir,
                          const PipelineConfig& cfg);

/// Key=value run log with version, resolved config, extra fields and duration.
void write_run_log(const std::filesystem::path& path, const std::string& command,
                   const std::vector<std::pair<std::string, std::string>>& fields, double seconds);

/// fnv1a64 of a file's bytes as 16 hex digits.
std::string file_checksum(const std::filesystem::path& path);

}  // namespace minutiae

#endif  // MINUTIAE_PIPELINE_HPP_
