#ifndef MINUTIAE_FINENET_HPP_
#define MINUTIAE_FINENET_HPP_

#include "minutiae/domain.hpp"
#include "minutiae/minutia.hpp"
#include "minutiae/nn/checkpoint.hpp"
#include "minutiae/nn/losses.hpp"
#include "minutiae/nn/optim.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <vector>

namespace minutiae {

enum class PatchLabel { non_minutia = 0, minutia = 1, unknown = 2 };

/// A t1 x t1 crop resampled to t2 x t2. Pixels are unconstrained floats so
/// that mean subtraction can be represented.
struct Patch {
  Plane pixels;
  double cx = 0.0;  // crop centre in source image coordinates
  double cy = 0.0;
  PatchLabel label = PatchLabel::unknown;
  std::optional<Angle> gt_direction;

  int size() const { return static_cast<int>(pixels.rows()); }
};

struct AugmentToggles {
  bool rotation = true;
  bool flips = true;
  bool scale = true;
  bool brightness = true;
  bool crop = true;           // small translation of positive patches
  bool boundary_blur = true;  // Gaussian fade of the outer 4 px
  bool mean_subtract = true;

  static AugmentToggles none() { return {false, false, false, false, false, false, false}; }
};

struct FineConfig {
  double alpha = 0.5;  // center-loss share of the classification terms
  double beta = 2.0;   // orientation-loss weight
  int batch = 100;
  double threshold = 0.5;
  double coarse_weight = 0.5;  // final score = w * coarse + (1 - w) * fine
  int t1 = 45;
  int t2 = 160;
  std::array<int, 3> widths = {16, 32, 64};
  int embedding = 64;
  double center_rate = 0.5;
  double init_stddev = 0.01;
  std::uint64_t seed = 1;
  AugmentToggles augment;
  double max_scale = 0.1;     // scale drawn from [1 - s, 1 + s]
  double max_shift = 2.0;     // source pixels, positives only
  double max_brightness = 0.1;

  void validate() const;
};

/// t1 x t1 crop centred at (cx, cy), bilinearly resampled to t2 x t2 with
/// reflected borders. With t1 == t2 and an integral centre the crop is exact.
Patch extract_patch(const GrayImage& image, double cx, double cy, int t1, int t2);

struct PatchSample {
  std::vector<Patch> patches;  // positives first, then negatives
  int positives = 0;
  int negatives = 0;
  bool short_sample = false;   // fewer than requested could be drawn
};

/// True when no ground-truth minutia lies in the central 10 x 10 source
/// pixels of a patch centred at (cx, cy).
bool core_is_clear(const MinutiaSet& gt, double cx, double cy);

/// Balanced positives (centred on ground-truth minutiae) and negatives whose
/// central 10 x 10 region holds no minutia. Negatives favour the foreground
/// when a mask is given.
PatchSample sample_training_patches(const GrayImage& image, const MinutiaSet& gt, int count, const FineConfig& cfg,
                                    std::mt19937_64& rng, const SegmentationMask* mask = nullptr);

/// Geometric and photometric transform of a patch about its centre.
struct AugmentTransform {
  double rotation = 0.0;  // degrees, pixel coordinates
  bool hflip = false;     // applied before rotation
  bool vflip = false;
  double scale = 1.0;
  double dx = 0.0;        // patch pixels, applied last
  double dy = 0.0;
  double brightness = 0.0;
  bool blur = false;
  bool mean_subtract = false;

  /// Linear part: R(rotation) * scale * F(flips).
  Eigen::Matrix2d linear() const;
};

Angle transform_direction(const Angle& direction, const AugmentTransform& t);
/// Direction under the inverse of the linear part.
Angle inverse_direction(const Angle& direction, const AugmentTransform& t);
Patch apply_transform(const Patch& patch, const AugmentTransform& t);
AugmentTransform random_transform(const Patch& patch, const FineConfig& cfg, std::mt19937_64& rng);
Patch augment(const Patch& patch, const FineConfig& cfg, std::mt19937_64& rng);

struct FineOutputs {
  nn::Tensor<float> embedding;  // (N, D, 1, 1)
  nn::Tensor<float> logits;     // (N, 2, 1, 1)
  nn::Tensor<float> direction;  // (N, 2, 1, 1): sin, cos
};

class FineNet {
 public:
  explicit FineNet(const FineConfig& cfg);
  ~FineNet();
  FineNet(FineNet&&) noexcept;
  FineNet& operator=(FineNet&&) noexcept;

  const FineConfig& config() const { return cfg_; }
  nn::CenterBank<float>& centers() { return centers_; }

  /// Input (N, 1, t2, t2).
  FineOutputs forward(const nn::Tensor<float>& input, nn::Mode mode);
  /// Gradients w.r.t. embedding, logits and direction outputs.
  void backward(const FineOutputs& grads);

  std::vector<nn::Parameter<float>*> parameters();
  nn::Layer<float>& root();

 private:
  struct Impl;
  FineConfig cfg_;
  std::unique_ptr<Impl> impl_;
  nn::CenterBank<float> centers_;
};

FineNet build_finenet(const FineConfig& cfg);

/// Mean-subtracted patches as an (N, 1, t2, t2) tensor.
nn::Tensor<float> patch_tensor(const std::vector<Patch>& patches);

struct Classification {
  double prob = 0.0;  // probability of the minutia class
  Angle direction = Angle::direction(0.0);
};

Classification classify_patch(FineNet& model, const Patch& patch);
std::vector<Classification> classify_patches(FineNet& model, const std::vector<Patch>& patches);
/// atan2 of a (sin, cos) direction pair, in degrees.
Angle direction_from_head(double s, double c);

struct FineLoss {
  double total = 0.0;
  double center = 0.0;
  double softmax = 0.0;
  double orientation = 0.0;
  double accuracy = 0.0;
};

/// Objective alpha Lc + (1 - alpha) Ls + beta Lo with Lo masked to
/// positive patches; fills gradients and the center update when requested.
FineLoss fine_loss(const FineOutputs& out, const std::vector<Patch>& batch, const FineConfig& cfg,
                   const nn::CenterBank<float>& bank, FineOutputs* grads = nullptr,
                   nn::CenterBank<float>::Matrix* center_delta = nullptr);

struct FineTrainConfig {
  std::int64_t steps = 2000;
  std::uint64_t seed = 1;
  nn::LearningRateSchedule schedule{0.01, 0.25, 10.0, 2000};
  double momentum = 0.9;
  double weight_decay = 0.0004;
  bool augment = true;
};

struct FineLogEntry {
  std::int64_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double learning_rate = 0.0;
  double center_shift = 0.0;  // mean L2 movement of the class centers
};

struct FineTrainer {
  FineNet model;
  nn::OptimState<float> optim;
  FineTrainConfig train;

  FineTrainer(const FineConfig& cfg, const FineTrainConfig& train_cfg);
  /// Batch indices for step `step`, from an RNG seeded by (seed, step).
  std::vector<int> batch_for_step(std::int64_t step, int dataset_size) const;
  FineLogEntry step(const std::vector<Patch>& patches);
  std::vector<FineLogEntry> run(const std::vector<Patch>& patches, std::int64_t until,
                                const std::function<void(const FineLogEntry&)>& cb = {});
};

FineNet train_finenet(const std::vector<Patch>& patches, const FineConfig& cfg, const FineTrainConfig& train,
                      std::vector<FineLogEntry>* log = nullptr);

/// Keeps coarse minutiae whose patch probability reaches `threshold`; the
/// score becomes the weighted coarse/fine mean and the direction FineNet's.
MinutiaSet refine_minutiae(const MinutiaSet& coarse, const GrayImage& image, FineNet& model, double threshold);
MinutiaSet refine_minutiae(const MinutiaSet& coarse, const GrayImage& image, FineNet& model);

nn::Checkpoint fine_checkpoint(FineNet& model, const nn::OptimState<float>* optim = nullptr);
FineNet fine_from_checkpoint(const nn::Checkpoint& ckpt, nn::OptimState<float>* optim = nullptr);

/// Directory of PGM patches plus manifest.tsv with "path label direction"
/// rows; direction is "-" when absent. Pixels must lie in [0,1].
void write_patch_dataset(const std::filesystem::path& dir, const std::vector<Patch>& patches);
std::vector<Patch> read_patch_dataset(const std::filesystem::path& dir);

}  // namespace minutiae

#endif  // MINUTIAE_FINENET_HPP_
