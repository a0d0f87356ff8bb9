#include "minutiae/finenet.hpp"

#include "minutiae/error.hpp"
#include "minutiae/nn/layers.hpp"
#include "minutiae/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace minutiae {

using nn::Mode;
using Tensor = nn::Tensor<float>;

namespace {

constexpr double kDeg = 180.0 / std::numbers::pi;

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

float sample_reflect(const Plane& p, double x, double y) {
  const int w = static_cast<int>(p.cols()), h = static_cast<int>(p.rows());
  const double fx = std::floor(x), fy = std::floor(y);
  const double ax = x - fx, ay = y - fy;
  const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
  const int xa = reflect_index(x0, w), xb = reflect_index(x0 + 1, w);
  const int ya = reflect_index(y0, h), yb = reflect_index(y0 + 1, h);
  const double top = (1 - ax) * p(ya, xa) + ax * p(ya, xb);
  const double bottom = (1 - ax) * p(yb, xa) + ax * p(yb, xb);
  return static_cast<float>((1 - ay) * top + ay * bottom);
}

std::string join_ints(const std::array<int, 3>& values) {
  std::string s;
  for (int v : values) s += (s.empty() ? "" : ",") + std::to_string(v);
  return s;
}

}  // namespace

void FineConfig::validate() const {
  require(alpha >= 0.0 && alpha <= 1.0, "FineConfig: alpha must lie in [0,1]");
  require(beta >= 0.0, "FineConfig: beta must be nonnegative");
  require(batch >= 2, "FineConfig: batch must be at least 2");
  require(threshold >= 0.0 && threshold <= 1.0, "FineConfig: threshold must lie in [0,1]");
  require(coarse_weight >= 0.0 && coarse_weight <= 1.0, "FineConfig: coarse weight must lie in [0,1]");
  require(t1 >= 10 && t2 >= t1 && t2 % 16 == 0, "FineConfig: need t1 >= 10, t2 >= t1 and t2 a multiple of 16");
  for (int w : widths) require(w > 0, "FineConfig: widths must be positive");
  require(embedding > 0, "FineConfig: embedding must be positive");
  require(center_rate > 0.0 && center_rate <= 1.0, "FineConfig: center rate must lie in (0,1]");
  require(init_stddev > 0.0, "FineConfig: init stddev must be positive");
  require(max_scale >= 0.0 && max_scale < 0.5 && max_shift >= 0.0 && max_brightness >= 0.0,
          "FineConfig: augmentation ranges out of bounds");
}

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

Patch extract_patch(const GrayImage& image, double cx, double cy, int t1, int t2) {
  require(t1 > 0 && t2 >= t1, "extract_patch: need 0 < t1 <= t2");
  const Plane& src = image.pixels();
  const double step = static_cast<double>(t1) / t2;
  const double x0 = cx - t1 / 2, y0 = cy - t1 / 2;
  Patch p;
  p.cx = cx;
  p.cy = cy;
  p.pixels.resize(t2, t2);
  for (int i = 0; i < t2; ++i) {
    const double y = y0 + (i + 0.5) * step - 0.5;
    for (int j = 0; j < t2; ++j) p.pixels(i, j) = sample_reflect(src, x0 + (j + 0.5) * step - 0.5, y);
  }
  return p;
}

bool core_is_clear(const MinutiaSet& gt, double cx, double cy) {
  return std::none_of(gt.minutiae.begin(), gt.minutiae.end(),
                      [&](const Minutia& m) { return std::abs(m.x - cx) <= 5.0 && std::abs(m.y - cy) <= 5.0; });
}

PatchSample sample_training_patches(const GrayImage& image, const MinutiaSet& gt, int count, const FineConfig& cfg,
                                    std::mt19937_64& rng, const SegmentationMask* mask) {
  require(gt.size() >= 1, "sample_training_patches: image needs at least one ground-truth minutia");
  require(count >= 2, "sample_training_patches: count must be at least 2");
  PatchSample out;
  std::vector<size_t> order(gt.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const int want = count / 2;
  const int pos = std::min(want, static_cast<int>(gt.size()));

  std::vector<Patch> negatives;
  std::uniform_int_distribution<int> ux(0, image.width() - 1), uy(0, image.height() - 1);
  for (int attempt = 0; attempt < 200 * pos && static_cast<int>(negatives.size()) < pos; ++attempt) {
    const double x = ux(rng), y = uy(rng);
    const bool want_fg = mask && uniform(rng, 0, 1) < 0.75;
    if (want_fg && !mask->foreground_at_pixel(x, y)) continue;
    if (!core_is_clear(gt, x, y)) continue;
    Patch p = extract_patch(image, x, y, cfg.t1, cfg.t2);
    p.label = PatchLabel::non_minutia;
    negatives.push_back(std::move(p));
  }
  const int n = std::min(pos, static_cast<int>(negatives.size()));
  out.short_sample = n < want;
  for (int i = 0; i < n; ++i) {
    const Minutia& m = gt.minutiae[order[static_cast<size_t>(i)]];
    Patch p = extract_patch(image, m.x, m.y, cfg.t1, cfg.t2);
    p.label = PatchLabel::minutia;
    p.gt_direction = m.direction;
    out.patches.push_back(std::move(p));
  }
  for (int i = 0; i < n; ++i) out.patches.push_back(std::move(negatives[static_cast<size_t>(i)]));
  out.positives = out.negatives = n;
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

Eigen::Matrix2d AugmentTransform::linear() const {
  const double r = rotation / kDeg;
  Eigen::Matrix2d rot;
  rot << std::cos(r), -std::sin(r), std::sin(r), std::cos(r);
  const Eigen::Matrix2d flip = Eigen::Vector2d(hflip ? -1.0 : 1.0, vflip ? -1.0 : 1.0).asDiagonal();
  return rot * scale * flip;
}

Angle transform_direction(const Angle& direction, const AugmentTransform& t) {
  const Eigen::Vector2d v = t.linear() * Eigen::Vector2d(std::cos(direction.radians()), std::sin(direction.radians()));
  return Angle::direction(std::atan2(v.y(), v.x()) * kDeg);
}

Angle inverse_direction(const Angle& direction, const AugmentTransform& t) {
  const Eigen::Vector2d v =
      t.linear().inverse() * Eigen::Vector2d(std::cos(direction.radians()), std::sin(direction.radians()));
  return Angle::direction(std::atan2(v.y(), v.x()) * kDeg);
}

Patch apply_transform(const Patch& patch, const AugmentTransform& t) {
  Patch out = patch;
  const int n = patch.size();
  const double c = (n - 1) / 2.0;
  const Eigen::Matrix2d inv = t.linear().inverse();
  const bool identity_geometry = t.rotation == 0.0 && !t.hflip && !t.vflip && t.scale == 1.0 && t.dx == 0.0 && t.dy == 0.0;
  if (!identity_geometry) {
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const Eigen::Vector2d q = inv * Eigen::Vector2d(j - c - t.dx, i - c - t.dy);
        out.pixels(i, j) = sample_reflect(patch.pixels, c + q.x(), c + q.y());
      }
    }
  }
  if (t.brightness != 0.0) out.pixels += static_cast<float>(t.brightness);
  if (t.blur) {
    const float mean = out.pixels.mean();
    constexpr double kBand = 4.0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const double d = std::min({i, j, n - 1 - i, n - 1 - j}) + 0.5;
        if (d >= kBand) continue;
        const double keep = 1.0 - std::exp(-d * d / (2.0 * 2.0 * 2.0));
        out.pixels(i, j) = static_cast<float>(mean + keep * (out.pixels(i, j) - mean));
      }
    }
  }
  if (t.mean_subtract) out.pixels -= out.pixels.mean();
  if (patch.gt_direction) out.gt_direction = transform_direction(*patch.gt_direction, t);
  return out;
}

AugmentTransform random_transform(const Patch& patch, const FineConfig& cfg, std::mt19937_64& rng) {
  const AugmentToggles& a = cfg.augment;
  AugmentTransform t;
  // every draw happens regardless of the toggles so streams stay aligned
  const double rotation = uniform(rng, 0.0, 360.0);
  const bool hflip = uniform(rng, 0, 1) < 0.5, vflip = uniform(rng, 0, 1) < 0.5;
  const double scale = uniform(rng, 1.0 - cfg.max_scale, 1.0 + cfg.max_scale);
  const double to_patch = static_cast<double>(patch.size()) / cfg.t1;
  const double dx = uniform(rng, -cfg.max_shift, cfg.max_shift) * to_patch;
  const double dy = uniform(rng, -cfg.max_shift, cfg.max_shift) * to_patch;
  const double brightness = uniform(rng, -cfg.max_brightness, cfg.max_brightness);
  const bool blur = uniform(rng, 0, 1) < 0.5;
  if (a.rotation) t.rotation = rotation;
  if (a.flips) {
    t.hflip = hflip;
    t.vflip = vflip;
  }
  if (a.scale) t.scale = scale;
  if (a.crop && patch.label == PatchLabel::minutia) {
    t.dx = dx;
    t.dy = dy;
  }
  if (a.brightness) t.brightness = brightness;
  t.blur = a.boundary_blur && blur;
  t.mean_subtract = a.mean_subtract;
  return t;
}

Patch augment(const Patch& patch, const FineConfig& cfg, std::mt19937_64& rng) {
  return apply_transform(patch, random_transform(patch, cfg, rng));
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace {

/// Identity scaled by 1/side, so the flattened side x side map feeding the
/// embedding has the energy of a single pooled vector.
class Rescale final : public nn::Layer<float> {
 public:
  explicit Rescale(float factor) : factor_(factor) {}
  Tensor forward(const Tensor& x, Mode) override {
    Tensor out = x;
    out.values() *= factor_;
    return out;
  }
  Tensor backward(const Tensor& g) override {
    Tensor out = g;
    out.values() *= factor_;
    return out;
  }

 private:
  float factor_;
};

}  // namespace

struct FineNet::Impl {
  nn::Sequential<float> trunk;
  nn::Dense<float>* embed = nullptr;
  nn::Dense<float> cls;
  nn::Dense<float> dir;
  nn::Sequential<float> root;  // persistence order: trunk, heads

  Impl(const FineConfig& cfg, int side)
      : cls(cfg.embedding, 2), dir(cfg.embedding, 2) {
    std::mt19937_64 rng(cfg.seed);
    const double sd = cfg.init_stddev;
    const auto& w = cfg.widths;
    trunk.add<nn::Conv2d<float>>(nn::ConvGeometry{1, w[0], 3, 1, 1, 1}).init(rng, sd);
    trunk.add<nn::MaxPool2<float>>();
    for (int s = 0; s < 3; ++s) {
      const int c = w[static_cast<size_t>(s)];
      trunk.add<nn::ResidualBlock<float>>(c).init(rng, sd);
      trunk.add<nn::BatchNorm<float>>(c);
      trunk.add<nn::ReLU<float>>();
      if (s < 2) trunk.add<nn::Conv2d<float>>(nn::ConvGeometry{c, w[static_cast<size_t>(s) + 1], 3, 1, 1, 1}).init(rng, sd);
      trunk.add<nn::MaxPool2<float>>();
    }
    trunk.add<Rescale>(1.0f / static_cast<float>(side));
    embed = &trunk.add<nn::Dense<float>>(w[2] * side * side, cfg.embedding);
    embed->init(rng, sd);
    cls.init(rng, sd);
    dir.init(rng, sd);
  }
};

namespace {

/// Persistence view over trunk and heads.
class FineRoot final : public nn::Layer<float> {
 public:
  FineRoot(nn::Layer<float>& trunk, nn::Layer<float>& cls, nn::Layer<float>& dir) : parts_{&trunk, &cls, &dir} {}
  Tensor forward(const Tensor&, Mode) override { throw std::logic_error("FineRoot: not callable"); }
  Tensor backward(const Tensor&) override { throw std::logic_error("FineRoot: not callable"); }
  std::vector<nn::Parameter<float>*> parameters() override {
    std::vector<nn::Parameter<float>*> out;
    for (auto* p : parts_) {
      auto v = p->parameters();
      out.insert(out.end(), v.begin(), v.end());
    }
    return out;
  }
  void visit(const std::function<void(nn::Layer<float>&)>& fn) override {
    for (auto* p : parts_) p->visit(fn);
  }

 private:
  std::array<nn::Layer<float>*, 3> parts_;
};

}  // namespace

FineNet::FineNet(const FineConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  impl_ = std::make_unique<Impl>(cfg_, cfg_.t2 / 16);
  impl_->root.add<FineRoot>(impl_->trunk, impl_->cls, impl_->dir);
  centers_ = nn::CenterBank<float>(2, cfg_.embedding, cfg_.center_rate);
}
FineNet::~FineNet() = default;
FineNet::FineNet(FineNet&&) noexcept = default;
FineNet& FineNet::operator=(FineNet&&) noexcept = default;

FineOutputs FineNet::forward(const Tensor& input, Mode mode) {
  require(input.c() == 1 && input.h() == cfg_.t2 && input.w() == cfg_.t2, "FineNet: expects (N, 1, t2, t2) input");
  FineOutputs out;
  out.embedding = impl_->trunk.forward(input, mode);
  out.logits = impl_->cls.forward(out.embedding, mode);
  out.direction = impl_->dir.forward(out.embedding, mode);
  return out;
}

void FineNet::backward(const FineOutputs& grads) {
  Tensor g = impl_->cls.backward(grads.logits);
  g.values() += impl_->dir.backward(grads.direction).values();
  if (grads.embedding.size() > 0) g.values() += grads.embedding.values();
  impl_->trunk.backward(g);
}

std::vector<nn::Parameter<float>*> FineNet::parameters() { return impl_->root.parameters(); }
nn::Layer<float>& FineNet::root() { return impl_->root; }

FineNet build_finenet(const FineConfig& cfg) { return FineNet(cfg); }

Tensor patch_tensor(const std::vector<Patch>& patches) {
  require(!patches.empty(), "patch_tensor: empty batch");
  const int n = patches.front().size();
  Tensor t(static_cast<int>(patches.size()), 1, n, n);
  for (size_t i = 0; i < patches.size(); ++i) {
    const Plane& p = patches[i].pixels;
    require(p.rows() == n && p.cols() == n, "patch_tensor: mixed patch sizes");
    const float mean = p.mean();
    auto dst = t.plane(static_cast<int>(i), 0);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) dst(y, x) = p(y, x) - mean;
  }
  return t;
}

Angle direction_from_head(double s, double c) { return Angle::direction(std::atan2(s, c) * kDeg); }

std::vector<Classification> classify_patches(FineNet& model, const std::vector<Patch>& patches) {
  std::vector<Classification> out;
  constexpr size_t kChunk = 64;
  for (size_t first = 0; first < patches.size(); first += kChunk) {
    const std::vector<Patch> chunk(patches.begin() + static_cast<long>(first),
                                   patches.begin() + static_cast<long>(std::min(patches.size(), first + kChunk)));
    const FineOutputs o = model.forward(patch_tensor(chunk), Mode::infer);
    for (int i = 0; i < static_cast<int>(chunk.size()); ++i) {
      const double z0 = o.logits(i, 0, 0, 0), z1 = o.logits(i, 1, 0, 0);
      Classification c;
      c.prob = 1.0 / (1.0 + std::exp(z0 - z1));
      c.direction = direction_from_head(o.direction(i, 0, 0, 0), o.direction(i, 1, 0, 0));
      out.push_back(c);
    }
  }
  return out;
}

Classification classify_patch(FineNet& model, const Patch& patch) { return classify_patches(model, {patch}).front(); }

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

FineLoss fine_loss(const FineOutputs& out, const std::vector<Patch>& batch, const FineConfig& cfg,
                   const nn::CenterBank<float>& bank, FineOutputs* grads, nn::CenterBank<float>::Matrix* center_delta) {
  const int n = static_cast<int>(batch.size());
  require(n == out.logits.n(), "fine_loss: batch size mismatch");
  std::vector<int> labels;
  std::vector<double> dirs;
  std::vector<float> mask;
  for (const Patch& p : batch) {
    require(p.label != PatchLabel::unknown, "fine_loss: training patches need a label");
    const bool pos = p.label == PatchLabel::minutia;
    require(!pos || p.gt_direction.has_value(), "fine_loss: minutia patches need a direction");
    labels.push_back(pos ? 1 : 0);
    dirs.push_back(pos ? p.gt_direction->degrees() : 0.0);
    mask.push_back(pos ? 1.0f : 0.0f);
  }
  const auto sm = nn::softmax_xent(out.logits, std::span<const int>(labels));
  const auto cl = nn::center_loss(out.embedding, std::span<const int>(labels), bank);
  const auto ol = nn::orientation_loss(out.direction, std::span<const double>(dirs), std::span<const float>(mask));
  // per embedding dimension, so the term does not scale with the width
  const double per_dim = 1.0 / bank.dim();
  FineLoss l;
  l.center = cl.loss * per_dim;
  l.softmax = sm.loss;
  l.orientation = ol.loss;
  l.total = nn::total_loss(l.center, sm.loss, ol.loss, cfg.alpha, cfg.beta);
  int correct = 0;
  for (int i = 0; i < n; ++i) correct += ((out.logits(i, 1, 0, 0) > out.logits(i, 0, 0, 0)) ? 1 : 0) == labels[static_cast<size_t>(i)];
  l.accuracy = static_cast<double>(correct) / n;
  if (grads) {
    grads->logits = sm.grad;
    grads->logits.values() *= static_cast<float>(1.0 - cfg.alpha);
    grads->embedding = cl.grad;
    grads->embedding.values() *= static_cast<float>(cfg.alpha * per_dim);
    grads->direction = ol.grad;
    grads->direction.values() *= static_cast<float>(cfg.beta);
  }
  if (center_delta) *center_delta = cl.center_delta;
  return l;
}

FineTrainer::FineTrainer(const FineConfig& cfg, const FineTrainConfig& train_cfg) : model(cfg), train(train_cfg) {
  require(train.steps > 0, "FineTrainer: steps must be positive");
  optim.schedule = train.schedule;
  optim.schedule.total_steps = train.steps;
  optim.momentum = train.momentum;
  optim.weight_decay = train.weight_decay;
}

std::vector<int> FineTrainer::batch_for_step(std::int64_t step, int dataset_size) const {
  require(dataset_size > 0, "train_finenet: empty patch set");
  std::mt19937_64 rng(derive_seed(train.seed, "fine-step", static_cast<int>(step)));
  std::uniform_int_distribution<int> pick(0, dataset_size - 1);
  std::vector<int> idx(static_cast<size_t>(model.config().batch));
  for (int& i : idx) i = pick(rng);
  return idx;
}

FineLogEntry FineTrainer::step(const std::vector<Patch>& patches) {
  const std::int64_t s = optim.step;
  const std::vector<int> idx = batch_for_step(s, static_cast<int>(patches.size()));
  std::mt19937_64 aug(derive_seed(train.seed, "fine-augment", static_cast<int>(s)));
  std::vector<Patch> batch;
  batch.reserve(idx.size());
  for (int i : idx) {
    const Patch& p = patches[static_cast<size_t>(i)];
    batch.push_back(train.augment ? augment(p, model.config(), aug) : p);
  }
  const double lr = optim.learning_rate();
  const FineOutputs out = model.forward(patch_tensor(batch), Mode::train);
  FineOutputs grads;
  nn::CenterBank<float>::Matrix delta;
  const FineLoss l = fine_loss(out, batch, model.config(), model.centers(), &grads, &delta);
  auto params = model.parameters();
  nn::zero_grads<float>(params);
  model.backward(grads);
  nn::sgd_step<float>(params, optim);
  model.centers().apply(delta);
  const double shift = (model.centers().rate() * delta).rowwise().norm().mean();
  return FineLogEntry{s, l.total, l.accuracy, lr, shift};
}

std::vector<FineLogEntry> FineTrainer::run(const std::vector<Patch>& patches, std::int64_t until,
                                           const std::function<void(const FineLogEntry&)>& cb) {
  require(!patches.empty(), "train_finenet: empty patch set");
  std::vector<FineLogEntry> log;
  until = std::min(until, optim.schedule.total_steps);
  while (optim.step < until) {
    log.push_back(step(patches));
    if (cb) cb(log.back());
  }
  return log;
}

FineNet train_finenet(const std::vector<Patch>& patches, const FineConfig& cfg, const FineTrainConfig& train,
                      std::vector<FineLogEntry>* log) {
  require(!patches.empty(), "train_finenet: empty patch set");
  FineTrainer trainer(cfg, train);
  auto entries = trainer.run(patches, train.steps);
  if (log) *log = std::move(entries);
  return std::move(trainer.model);
}

// ---------------------------------------------------------------------------
// Refinement
// ---------------------------------------------------------------------------

MinutiaSet refine_minutiae(const MinutiaSet& coarse, const GrayImage& image, FineNet& model, double threshold) {
  require(threshold >= 0.0 && threshold <= 1.0, "refine_minutiae: threshold must lie in [0,1]");
  MinutiaSet out;
  out.width = coarse.width;
  out.height = coarse.height;
  if (coarse.size() == 0) return out;
  const FineConfig& cfg = model.config();
  std::vector<Patch> patches;
  for (const Minutia& m : coarse.minutiae) patches.push_back(extract_patch(image, m.x, m.y, cfg.t1, cfg.t2));
  const std::vector<Classification> cls = classify_patches(model, patches);
  for (size_t i = 0; i < coarse.size(); ++i) {
    if (cls[i].prob < threshold) continue;
    Minutia m = coarse.minutiae[i];
    m.score = std::clamp(cfg.coarse_weight * m.score + (1.0 - cfg.coarse_weight) * cls[i].prob, 0.0, 1.0);
    m.direction = cls[i].direction;
    m.provenance = Provenance::fine;
    out.minutiae.push_back(m);
  }
  return out;
}

MinutiaSet refine_minutiae(const MinutiaSet& coarse, const GrayImage& image, FineNet& model) {
  return refine_minutiae(coarse, image, model, model.config().threshold);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

nn::Checkpoint fine_checkpoint(FineNet& model, const nn::OptimState<float>* optim) {
  const FineConfig& c = model.config();
  nn::Checkpoint ck;
  ck.model = "finenet";
  ck.meta["fine.alpha"] = nn::format_double(c.alpha);
  ck.meta["fine.beta"] = nn::format_double(c.beta);
  ck.meta["fine.batch"] = std::to_string(c.batch);
  ck.meta["fine.threshold"] = nn::format_double(c.threshold);
  ck.meta["fine.coarse_weight"] = nn::format_double(c.coarse_weight);
  ck.meta["fine.t1"] = std::to_string(c.t1);
  ck.meta["fine.t2"] = std::to_string(c.t2);
  ck.meta["fine.widths"] = join_ints(c.widths);
  ck.meta["fine.embedding"] = std::to_string(c.embedding);
  ck.meta["fine.center_rate"] = nn::format_double(c.center_rate);
  ck.meta["fine.init_stddev"] = nn::format_double(c.init_stddev);
  ck.meta["fine.seed"] = std::to_string(c.seed);
  nn::capture_layers(model.root(), ck);
  Tensor centers(1, model.centers().classes(), model.centers().dim(), 1);
  std::copy(model.centers().centers().data(), model.centers().centers().data() + centers.size(), centers.data());
  ck.manifest.push_back(nn::CheckpointEntry{nn::kCenterEntry, {centers.shape()}});
  ck.tensors.push_back(std::move(centers));
  if (optim) nn::capture_optimizer(*optim, ck);
  return ck;
}

FineNet fine_from_checkpoint(const nn::Checkpoint& ckpt, nn::OptimState<float>* optim) {
  if (ckpt.model != "finenet") throw std::runtime_error("checkpoint holds '" + ckpt.model + "', not finenet");
  FineConfig c;
  c.alpha = nn::parse_double(nn::meta_at(ckpt, "fine.alpha"));
  c.beta = nn::parse_double(nn::meta_at(ckpt, "fine.beta"));
  c.batch = std::stoi(nn::meta_at(ckpt, "fine.batch"));
  c.threshold = nn::parse_double(nn::meta_at(ckpt, "fine.threshold"));
  c.coarse_weight = nn::parse_double(nn::meta_at(ckpt, "fine.coarse_weight"));
  c.t1 = std::stoi(nn::meta_at(ckpt, "fine.t1"));
  c.t2 = std::stoi(nn::meta_at(ckpt, "fine.t2"));
  int w0 = 0, w1 = 0, w2 = 0;
  if (std::sscanf(nn::meta_at(ckpt, "fine.widths").c_str(), "%d,%d,%d", &w0, &w1, &w2) != 3) {
    throw std::runtime_error("checkpoint: malformed fine widths");
  }
  c.widths = {w0, w1, w2};
  c.embedding = std::stoi(nn::meta_at(ckpt, "fine.embedding"));
  c.center_rate = nn::parse_double(nn::meta_at(ckpt, "fine.center_rate"));
  c.init_stddev = nn::parse_double(nn::meta_at(ckpt, "fine.init_stddev"));
  c.seed = std::stoull(nn::meta_at(ckpt, "fine.seed"));
  FineNet model(c);
  nn::restore_layers(model.root(), ckpt, 0);
  size_t tensor_index = 0;
  bool found = false;
  for (const nn::CheckpointEntry& e : ckpt.manifest) {
    if (e.kind == nn::kCenterEntry) {
      const Tensor& t = ckpt.tensors.at(tensor_index);
      if (t.size() != static_cast<Eigen::Index>(model.centers().classes()) * model.centers().dim()) {
        throw std::runtime_error("checkpoint: center bank shape mismatch");
      }
      std::copy(t.data(), t.data() + t.size(), model.centers().centers().data());
      found = true;
    }
    tensor_index += e.shapes.size();
  }
  if (!found) throw std::runtime_error("checkpoint: missing center bank");
  if (optim) nn::restore_optimizer(ckpt, *optim);
  return model;
}

void write_patch_dataset(const std::filesystem::path& dir, const std::vector<Patch>& patches) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.tsv").string());
  manifest << "path\tlabel\tdirection\n";
  for (size_t i = 0; i < patches.size(); ++i) {
    const Patch& p = patches[i];
    char name[32];
    std::snprintf(name, sizeof(name), "patch_%06zu.pgm", i);
    write_pgm(dir / name, GrayImage(p.pixels));
    manifest << name << '\t' << static_cast<int>(p.label) << '\t'
             << (p.gt_direction ? nn::format_double(p.gt_direction->degrees()) : std::string("-")) << '\n';
  }
  if (!manifest) throw std::runtime_error("write failed for " + (dir / "manifest.tsv").string());
}

std::vector<Patch> read_patch_dataset(const std::filesystem::path& dir) {
  const std::filesystem::path path = dir / "manifest.tsv";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "path\tlabel\tdirection") {
    throw std::runtime_error(path.string() + ": missing patch manifest header");
  }
  std::vector<Patch> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string name, dir_text;
    int label = -1;
    if (!(fields >> name >> label >> dir_text) || label < 0 || label > 2) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": malformed patch row");
    }
    Patch p;
    p.pixels = read_pgm(dir / name).pixels();
    p.label = static_cast<PatchLabel>(label);
    if (dir_text != "-") p.gt_direction = Angle::direction(nn::parse_double(dir_text));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace minutiae
