#ifndef MINUTIAE_COARSENET_HPP_
#define MINUTIAE_COARSENET_HPP_

#include "minutiae/domain.hpp"
#include "minutiae/minutia.hpp"
#include "minutiae/nn/checkpoint.hpp"
#include "minutiae/nn/layers.hpp"
#include "minutiae/nn/optim.hpp"
#include "minutiae/synth.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <vector>

namespace minutiae {

inline constexpr std::array<int, 3> kScoreLevels = {2, 3, 4};

/// One score-map level: cell (r, c) covers [c*2^j, (c+1)*2^j) x [r*2^j, (r+1)*2^j).
struct ScoreLevel {
  int level = 0;
  Plane score;          // probabilities in [0,1]
  Plane dir_cos;        // direction channels, unnormalized
  Plane dir_sin;

  int cell_size() const { return 1 << level; }
  int rows() const { return static_cast<int>(score.rows()); }
  int cols() const { return static_cast<int>(score.cols()); }
  Rect cell_region(int row, int col) const;
};

struct ScorePyramid {
  int width = 0;
  int height = 0;
  std::map<int, ScoreLevel> levels;

  const ScoreLevel& at(int level) const { return levels.at(level); }
  /// A pyramid with zero-valued grids of the right geometry.
  static ScorePyramid empty(int width, int height);
};

/// Grid dimension of level j for an input extent: ceil(extent / 2^j).
int level_extent(int extent, int level);

struct Candidate {
  double x = 0.0;
  double y = 0.0;
  Angle direction = Angle::direction(0.0);
  double score = 0.0;
  int source_level = 2;
  Rect region;  // 16x16 square centred at the location; NMS operates on it
  Rect cell;    // the source-level cell the location was refined in
  bool low_confidence = false;  // direction projection was exactly zero
};

struct CoarseConfig {
  std::array<int, 4> widths = {16, 32, 64, 128};
  int blocks_per_stage = 2;
  std::array<int, 3> aspp_rates = {1, 2, 4};
  int aspp_width = 32;
  double score_threshold = 0.5;
  double nms_overlap = 0.5;
  double region_side = 16.0;
  std::uint64_t seed = 1;
  double init_stddev = 0.01;

  void validate() const;
};

/// Raw head outputs for a batch.
struct CoarseOutputs {
  // (N, 3, h_j, w_j): score logit, direction cos, direction sin
  std::array<nn::Tensor<float>, 3> levels;
  // (N, 3, h_4, w_4): segmentation logit, cos 2theta, sin 2theta
  nn::Tensor<float> field;
};

class CoarseNet {
 public:
  explicit CoarseNet(const CoarseConfig& cfg);
  ~CoarseNet();
  CoarseNet(CoarseNet&&) noexcept;
  CoarseNet& operator=(CoarseNet&&) noexcept;

  const CoarseConfig& config() const { return cfg_; }

  /// Input (N, 5, H, W) with H and W multiples of 16.
  CoarseOutputs forward(const nn::Tensor<float>& input, nn::Mode mode);
  /// Gradients w.r.t. every head output of the latest forward call.
  void backward(const CoarseOutputs& grads);

  std::vector<nn::Parameter<float>*> parameters();
  std::size_t parameter_count();
  nn::Layer<float>& root();

 private:
  struct Impl;
  CoarseConfig cfg_;
  std::unique_ptr<Impl> impl_;
};

CoarseNet build_coarsenet(const CoarseConfig& cfg);

/// Stack as a (1, 5, H', W') tensor, reflect-padded up to multiples of 16.
nn::Tensor<float> stack_tensor(const EnhancementStack& stack);

struct CoarseForward {
  ScorePyramid pyramid;
  OrientationField orientation;  // network estimate, 16 px blocks
  SegmentationMask mask;         // network estimate, 16 px blocks
};

CoarseForward forward_scores(CoarseNet& model, const EnhancementStack& stack);

/// Levels 2 and 3 max-pooled to the level-4 grid and averaged with level 4.
Plane fuse_levels(const ScorePyramid& pyramid);

/// Coarse-to-fine descent from every fused cell >= threshold. Directions are
/// left at zero; see assign_direction.
std::vector<Candidate> localize(const ScorePyramid& pyramid, const Plane& fused, double threshold,
                                double region_side = 16.0);

struct DirectionChoice {
  Angle direction = Angle::direction(0.0);
  bool low_confidence = false;
};

/// Picks theta or theta+180 by the sign of the direction vector's projection
/// onto the ridge orientation at the candidate.
DirectionChoice assign_direction(const Candidate& cand, const OrientationField& orientation, double dir_cos,
                                 double dir_sin);

/// Score-descending order with ties broken by (y, x).
void sort_candidates(std::vector<Candidate>& cands);

std::vector<Candidate> nms_iou(std::vector<Candidate> cands, double overlap = 0.5);
std::vector<Candidate> nms_distance(std::vector<Candidate> cands, double dist_thresh, double orient_thresh);

enum class NmsKind { iou, distance };

struct ExtractOptions {
  double threshold = 0.5;
  NmsKind nms = NmsKind::iou;
  double nms_overlap = 0.5;
  double nms_dist = 16.0;
  double nms_orient = 30.0;
};

struct CoarseExtraction {
  MinutiaSet minutiae;
  std::vector<Candidate> candidates;  // after NMS, same order as minutiae
  Plane fused;
  OrientationField orientation;  // 1:3 handcrafted/network fusion
  SegmentationMask mask;
};

CoarseExtraction extract_coarse_detailed(const GrayImage& image, CoarseNet& model, const ExtractOptions& opts = {});
MinutiaSet extract_coarse(const GrayImage& image, CoarseNet& model, const ExtractOptions& opts = {});

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct CoarseLossWeights {
  double score = 1.0;
  double direction = 0.5;
  double segmentation = 0.5;
  double orientation = 0.5;
  double positive_weight = 8.0;  // per-cell BCE weight of positive score cells
};

/// One preprocessed training image with its ground truth.
struct CoarseSample {
  EnhancementStack stack;
  MinutiaSet gt;
  OrientationField gt_orientation;
  SegmentationMask gt_mask;
};

CoarseSample make_coarse_sample(const CorpusItem& item);

/// Per-level targets for a crop of a sample, in output-grid coordinates.
struct CoarseTargets {
  std::array<nn::Tensor<float>, 3> score;      // (N, 1, h, w) in {0,1}
  std::array<nn::Tensor<float>, 3> score_w;    // BCE weights
  std::array<nn::Tensor<float>, 3> direction;  // (N, 2, h, w): cos, sin
  std::array<nn::Tensor<float>, 3> dir_mask;   // (N, 1, h, w)
  nn::Tensor<float> seg;                       // (N, 1, h4, w4)
  nn::Tensor<float> seg_w;
  nn::Tensor<float> orient;                    // (N, 2, h4, w4): cos 2t, sin 2t
  nn::Tensor<float> orient_mask;
};

struct Crop {
  int sample = 0;
  int x0 = 0;  // multiples of 16
  int y0 = 0;
  bool flip = false;  // horizontal mirror
};

/// Assembles network input and targets for a batch of crops of `size` px.
std::pair<nn::Tensor<float>, CoarseTargets> make_batch(const std::vector<CoarseSample>& samples,
                                                       const std::vector<Crop>& crops, int size,
                                                       const CoarseLossWeights& weights);

struct LossBreakdown {
  double total = 0.0;
  double score = 0.0;
  double direction = 0.0;
  double segmentation = 0.0;
  double orientation = 0.0;
};

/// Multi-task loss and its gradient w.r.t. the head outputs.
LossBreakdown coarse_loss(const CoarseOutputs& out, const CoarseTargets& targets, const CoarseLossWeights& weights,
                          CoarseOutputs* grads);

struct CoarseTrainConfig {
  std::int64_t steps = 2000;
  int batch = 4;
  int crop = 64;  // 0 trains on full images
  bool flips = true;
  std::uint64_t seed = 1;
  CoarseLossWeights weights;
  nn::LearningRateSchedule schedule{0.01, 0.25, 10.0, 2000};
  double momentum = 0.9;
  double weight_decay = 0.0004;
};

struct TrainLogEntry {
  std::int64_t step = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
};

using TrainCallback = std::function<void(const TrainLogEntry&)>;

/// Model plus optimizer state; `steps` counts completed steps.
struct CoarseTrainer {
  CoarseNet model;
  nn::OptimState<float> optim;
  CoarseTrainConfig train;

  CoarseTrainer(const CoarseConfig& cfg, const CoarseTrainConfig& train_cfg);
  /// Crops for step `step`, drawn from an RNG seeded by (seed, step).
  std::vector<Crop> crops_for_step(std::int64_t step, const std::vector<CoarseSample>& samples) const;
  /// Runs one SGD step and returns its loss.
  LossBreakdown step(const std::vector<CoarseSample>& samples);
  /// Runs until `optim.step == until` (capped by the schedule's total).
  std::vector<TrainLogEntry> run(const std::vector<CoarseSample>& samples, std::int64_t until,
                                 const TrainCallback& cb = {});
};

/// Trains from scratch for `train.steps` steps.
CoarseNet train_coarsenet(const std::vector<CoarseSample>& samples, const CoarseConfig& cfg,
                          const CoarseTrainConfig& train, std::vector<TrainLogEntry>* log = nullptr);

nn::Checkpoint coarse_checkpoint(CoarseNet& model, const nn::OptimState<float>* optim = nullptr);
CoarseNet coarse_from_checkpoint(const nn::Checkpoint& ckpt, nn::OptimState<float>* optim = nullptr);

}  // namespace minutiae

#endif  // MINUTIAE_COARSENET_HPP_
