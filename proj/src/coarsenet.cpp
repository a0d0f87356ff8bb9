#include "minutiae/coarsenet.hpp"

#include "minutiae/error.hpp"
#include "minutiae/nn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace minutiae {

using nn::Mode;
using Tensor = nn::Tensor<float>;

namespace {

constexpr double kDeg = 180.0 / std::numbers::pi;

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Parallel dilated 3x3 convolutions whose outputs are summed.
class Aspp final : public nn::Layer<float> {
 public:
  Aspp(int in, int out, const std::array<int, 3>& rates) {
    for (int r : rates) {
      branches_.push_back(std::make_unique<nn::Conv2d<float>>(
          nn::ConvGeometry{in, out, 3, 1, r, nn::ConvGeometry::same_pad(3, r)}, true));
    }
  }

  void init(std::mt19937_64& rng, double stddev) {
    for (auto& b : branches_) b->init(rng, stddev);
  }

  Tensor forward(const Tensor& x, Mode mode) override {
    Tensor out = branches_.front()->forward(x, mode);
    for (size_t i = 1; i < branches_.size(); ++i) out.values() += branches_[i]->forward(x, mode).values();
    return out;
  }
  Tensor backward(const Tensor& grad_out) override {
    Tensor g = branches_.front()->backward(grad_out);
    for (size_t i = 1; i < branches_.size(); ++i) g.values() += branches_[i]->backward(grad_out).values();
    return g;
  }
  std::vector<nn::Parameter<float>*> parameters() override {
    std::vector<nn::Parameter<float>*> out;
    for (auto& b : branches_) {
      auto p = b->parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }
  void visit(const std::function<void(nn::Layer<float>&)>& fn) override {
    for (auto& b : branches_) fn(*b);
  }

 private:
  std::vector<std::unique_ptr<nn::Conv2d<float>>> branches_;
};

/// Visits a fixed list of child layers; used only for persistence.
class Bundle final : public nn::Layer<float> {
 public:
  explicit Bundle(std::vector<nn::Layer<float>*> children) : children_(std::move(children)) {}
  Tensor forward(const Tensor&, Mode) override { throw std::logic_error("Bundle: not callable"); }
  Tensor backward(const Tensor&) override { throw std::logic_error("Bundle: not callable"); }
  std::vector<nn::Parameter<float>*> parameters() override {
    std::vector<nn::Parameter<float>*> out;
    for (auto* c : children_) {
      auto p = c->parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }
  void visit(const std::function<void(nn::Layer<float>&)>& fn) override {
    for (auto* c : children_) c->visit(fn);
  }

 private:
  std::vector<nn::Layer<float>*> children_;
};

Tensor slice_channels(const Tensor& t, int first, int count) {
  Tensor out(t.n(), count, t.h(), t.w());
  for (int n = 0; n < t.n(); ++n)
    for (int c = 0; c < count; ++c) out.plane(n, c) = t.plane(n, first + c);
  return out;
}

void put_channels(Tensor& dst, const Tensor& src, int first) {
  for (int n = 0; n < src.n(); ++n)
    for (int c = 0; c < src.c(); ++c) dst.plane(n, first + c) = src.plane(n, c);
}

std::string join_ints(const auto& values) {
  std::string s;
  for (int v : values) s += (s.empty() ? "" : ",") + std::to_string(v);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::istringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

int level_extent(int extent, int level) {
  require(extent > 0 && level >= 0, "level_extent: invalid arguments");
  const int cell = 1 << level;
  return (extent + cell - 1) / cell;
}

Rect ScoreLevel::cell_region(int row, int col) const {
  const double s = cell_size();
  return Rect(col * s, row * s, s);
}

ScorePyramid ScorePyramid::empty(int width, int height) {
  ScorePyramid p;
  p.width = width;
  p.height = height;
  for (int j : kScoreLevels) {
    ScoreLevel l;
    l.level = j;
    const int h = level_extent(height, j), w = level_extent(width, j);
    l.score = Plane::Zero(h, w);
    l.dir_cos = Plane::Zero(h, w);
    l.dir_sin = Plane::Zero(h, w);
    p.levels[j] = std::move(l);
  }
  return p;
}

void CoarseConfig::validate() const {
  for (int w : widths) require(w > 0, "CoarseConfig: channel widths must be positive");
  require(blocks_per_stage >= 0, "CoarseConfig: negative block count");
  for (int r : aspp_rates) require(r >= 1, "CoarseConfig: ASPP rates must be >= 1");
  require(aspp_width > 0, "CoarseConfig: ASPP width must be positive");
  require(score_threshold > 0.0 && score_threshold < 1.0, "CoarseConfig: score threshold must be in (0,1)");
  require(nms_overlap > 0.0 && nms_overlap < 1.0, "CoarseConfig: NMS overlap must be in (0,1)");
  require(region_side > 0.0, "CoarseConfig: region side must be positive");
  require(init_stddev > 0.0, "CoarseConfig: init stddev must be positive");
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct CoarseNet::Impl {
  nn::Sequential<float> stem;                 // conv, pool -> 1/2
  nn::Sequential<float> stage1;               // blocks, pool -> 1/4
  nn::Sequential<float> stage2;               // level 2 features
  nn::MaxPool2<float> pool3;
  nn::Sequential<float> stage3;               // level 3 features
  nn::MaxPool2<float> pool4;
  nn::Sequential<float> stage4;               // level 4 features
  std::array<nn::Sequential<float>, 3> heads;
  std::unique_ptr<Bundle> root;

  explicit Impl(const CoarseConfig& cfg) {
    std::mt19937_64 rng(cfg.seed);
    const double sd = cfg.init_stddev;
    const auto& w = cfg.widths;

    stem.add<nn::Conv2d<float>>(nn::ConvGeometry{EnhancementStack::kChannels, w[0], 3, 1, 1, 1}).init(rng, sd);
    stem.add<nn::MaxPool2<float>>();
    add_blocks(stage1, w[0], cfg.blocks_per_stage, rng, sd);
    stage1.add<nn::MaxPool2<float>>();
    build_stage(stage2, w[0], w[1], cfg.blocks_per_stage, rng, sd);
    build_stage(stage3, w[1], w[2], cfg.blocks_per_stage, rng, sd);
    build_stage(stage4, w[2], w[3], cfg.blocks_per_stage, rng, sd);
    for (int i = 0; i < 3; ++i) {
      auto& h = heads[static_cast<size_t>(i)];
      const int in = w[static_cast<size_t>(i) + 1];
      h.add<nn::BatchNorm<float>>(in);
      h.add<nn::ReLU<float>>();
      h.add<Aspp>(in, cfg.aspp_width, cfg.aspp_rates).init(rng, sd);
      h.add<nn::ReLU<float>>();
      h.add<nn::Conv2d<float>>(nn::ConvGeometry{cfg.aspp_width, i == 2 ? 6 : 3, 1, 1, 1, 0}).init(rng, sd);
    }
    root = std::make_unique<Bundle>(std::vector<nn::Layer<float>*>{&stem, &stage1, &stage2, &stage3, &stage4,
                                                                    &heads[0], &heads[1], &heads[2]});
  }

  static void add_blocks(nn::Sequential<float>& seq, int channels, int count, std::mt19937_64& rng, double sd) {
    for (int b = 0; b < count; ++b) seq.add<nn::ResidualBlock<float>>(channels).init(rng, sd);
  }

  static void build_stage(nn::Sequential<float>& seq, int in, int out, int blocks, std::mt19937_64& rng,
                          double sd) {
    seq.add<nn::BatchNorm<float>>(in);
    seq.add<nn::ReLU<float>>();
    seq.add<nn::Conv2d<float>>(nn::ConvGeometry{in, out, 3, 1, 1, 1}).init(rng, sd);
    add_blocks(seq, out, blocks, rng, sd);
  }
};

CoarseNet::CoarseNet(const CoarseConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  impl_ = std::make_unique<Impl>(cfg_);
}
CoarseNet::~CoarseNet() = default;
CoarseNet::CoarseNet(CoarseNet&&) noexcept = default;
CoarseNet& CoarseNet::operator=(CoarseNet&&) noexcept = default;

CoarseOutputs CoarseNet::forward(const Tensor& input, Mode mode) {
  require(input.c() == EnhancementStack::kChannels, "CoarseNet: expects a 5-channel stack");
  require(input.h() % 16 == 0 && input.w() % 16 == 0 && input.h() > 0 && input.w() > 0,
          "CoarseNet: input dims must be positive multiples of 16");
  Impl& m = *impl_;
  Tensor h = m.stem.forward(input, mode);
  h = m.stage1.forward(h, mode);
  const Tensor f2 = m.stage2.forward(h, mode);
  const Tensor f3 = m.stage3.forward(m.pool3.forward(f2, mode), mode);
  const Tensor f4 = m.stage4.forward(m.pool4.forward(f3, mode), mode);

  CoarseOutputs out;
  out.levels[0] = m.heads[0].forward(f2, mode);
  out.levels[1] = m.heads[1].forward(f3, mode);
  const Tensor h4 = m.heads[2].forward(f4, mode);
  out.levels[2] = slice_channels(h4, 0, 3);
  out.field = slice_channels(h4, 3, 3);
  return out;
}

void CoarseNet::backward(const CoarseOutputs& grads) {
  Impl& m = *impl_;
  Tensor g4(grads.levels[2].n(), 6, grads.levels[2].h(), grads.levels[2].w());
  put_channels(g4, grads.levels[2], 0);
  put_channels(g4, grads.field, 3);
  Tensor g = m.stage4.backward(m.heads[2].backward(g4));
  g = m.pool4.backward(g);
  g.values() += m.heads[1].backward(grads.levels[1]).values();
  g = m.pool3.backward(m.stage3.backward(g));
  g.values() += m.heads[0].backward(grads.levels[0]).values();
  g = m.stage2.backward(g);
  g = m.stage1.backward(g);
  m.stem.backward(g);
}

std::vector<nn::Parameter<float>*> CoarseNet::parameters() { return impl_->root->parameters(); }

std::size_t CoarseNet::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

nn::Layer<float>& CoarseNet::root() { return *impl_->root; }

CoarseNet build_coarsenet(const CoarseConfig& cfg) { return CoarseNet(cfg); }

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

Tensor stack_tensor(const EnhancementStack& stack) {
  require(stack.width > 0 && stack.height > 0, "stack_tensor: empty stack");
  const int w = level_extent(stack.width, 4) * 16, h = level_extent(stack.height, 4) * 16;
  Tensor t(1, EnhancementStack::kChannels, h, w);
  for (int c = 0; c < EnhancementStack::kChannels; ++c) {
    const Plane& src = stack.channels[static_cast<size_t>(c)];
    for (int y = 0; y < h; ++y) {
      const int sy = reflect_index(y, stack.height);
      for (int x = 0; x < w; ++x) t(0, c, y, x) = src(sy, reflect_index(x, stack.width));
    }
  }
  return t;
}

CoarseForward forward_scores(CoarseNet& model, const EnhancementStack& stack) {
  const CoarseOutputs out = model.forward(stack_tensor(stack), Mode::infer);
  CoarseForward f;
  f.pyramid = ScorePyramid::empty(stack.width, stack.height);
  for (size_t i = 0; i < kScoreLevels.size(); ++i) {
    ScoreLevel& l = f.pyramid.levels[kScoreLevels[i]];
    const Tensor& o = out.levels[i];
    for (int r = 0; r < l.rows(); ++r) {
      for (int c = 0; c < l.cols(); ++c) {
        l.score(r, c) = static_cast<float>(sigmoid(o(0, 0, r, c)));
        l.dir_cos(r, c) = o(0, 1, r, c);
        l.dir_sin(r, c) = o(0, 2, r, c);
      }
    }
  }
  const BlockGrid grid = BlockGrid::covering(stack.width, stack.height, 16);
  f.orientation.grid = grid;
  f.mask.grid = grid;
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) {
      const double c2 = out.field(0, 1, r, c), s2 = out.field(0, 2, r, c);
      f.orientation.theta.push_back(wrap_degrees(0.5 * std::atan2(s2, c2) * kDeg, 180.0));
      f.orientation.coherence.push_back(std::min(1.0, std::hypot(c2, s2)));
      f.mask.prob.push_back(sigmoid(out.field(0, 0, r, c)));
    }
  }
  return f;
}

Plane fuse_levels(const ScorePyramid& pyramid) {
  const ScoreLevel& l2 = pyramid.at(2);
  const ScoreLevel& l3 = pyramid.at(3);
  const ScoreLevel& l4 = pyramid.at(4);
  Plane fused(l4.rows(), l4.cols());
  auto pooled = [](const ScoreLevel& l, int r, int c, int k) {
    float m = 0.0f;
    for (int y = r * k; y < std::min((r + 1) * k, l.rows()); ++y)
      for (int x = c * k; x < std::min((c + 1) * k, l.cols()); ++x) m = std::max(m, l.score(y, x));
    return m;
  };
  for (int r = 0; r < l4.rows(); ++r)
    for (int c = 0; c < l4.cols(); ++c) fused(r, c) = (pooled(l2, r, c, 4) + pooled(l3, r, c, 2) + l4.score(r, c)) / 3.0f;
  return fused;
}

namespace {

/// Highest-scoring child of (r, c) one level down; ties go to row-major first.
std::pair<int, int> best_child(const ScoreLevel& child, int r, int c) {
  std::pair<int, int> best{-1, -1};
  float top = -1.0f;
  for (int y = 2 * r; y < std::min(2 * r + 2, child.rows()); ++y) {
    for (int x = 2 * c; x < std::min(2 * c + 2, child.cols()); ++x) {
      if (child.score(y, x) > top) {
        top = child.score(y, x);
        best = {y, x};
      }
    }
  }
  return best;
}

double peak_offset(double left, double mid, double right) {
  const double denom = left - 2.0 * mid + right;
  if (denom >= 0.0) return 0.0;
  return std::clamp(0.5 * (left - right) / denom, -0.5, 0.5);
}

}  // namespace

std::vector<Candidate> localize(const ScorePyramid& pyramid, const Plane& fused, double threshold,
                                double region_side) {
  require(threshold > 0.0 && threshold < 1.0, "localize: threshold must be in (0,1)");
  const ScoreLevel& l2 = pyramid.at(2);
  const ScoreLevel& l3 = pyramid.at(3);
  std::vector<Candidate> out;
  for (int r = 0; r < fused.rows(); ++r) {
    for (int c = 0; c < fused.cols(); ++c) {
      if (fused(r, c) < threshold) continue;
      const auto [r3, c3] = best_child(l3, r, c);
      const auto [r2, c2] = best_child(l2, r3, c3);
      const Plane& s = l2.score;
      const double dx = (c2 > 0 && c2 + 1 < l2.cols()) ? peak_offset(s(r2, c2 - 1), s(r2, c2), s(r2, c2 + 1)) : 0.0;
      const double dy = (r2 > 0 && r2 + 1 < l2.rows()) ? peak_offset(s(r2 - 1, c2), s(r2, c2), s(r2 + 1, c2)) : 0.0;
      const Rect cell = l2.cell_region(r2, c2);
      Candidate cand;
      // stay inside the cell and the image (half-open upper bounds)
      cand.x = std::clamp(cell.x0 + (0.5 + dx) * cell.side, cell.x0,
                          std::nextafter(std::min(cell.x1(), static_cast<double>(pyramid.width)), 0.0));
      cand.y = std::clamp(cell.y0 + (0.5 + dy) * cell.side, cell.y0,
                          std::nextafter(std::min(cell.y1(), static_cast<double>(pyramid.height)), 0.0));
      cand.score = std::clamp(static_cast<double>(fused(r, c)), 0.0, 1.0);
      cand.source_level = 2;
      cand.cell = cell;
      cand.region = Rect::centered(cand.x, cand.y, region_side);
      out.push_back(cand);
    }
  }
  return out;
}

DirectionChoice assign_direction(const Candidate& cand, const OrientationField& orientation, double dir_cos,
                                 double dir_sin) {
  const double theta = orientation.at_pixel(cand.x, cand.y).degrees();
  const double t = theta / kDeg;
  const double proj = std::cos(t) * dir_cos + std::sin(t) * dir_sin;
  DirectionChoice d;
  d.direction = Angle::direction(proj < 0.0 ? theta + 180.0 : theta);
  d.low_confidence = proj == 0.0;
  return d;
}

void sort_candidates(std::vector<Candidate>& cands) {
  std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
}

std::vector<Candidate> nms_iou(std::vector<Candidate> cands, double overlap) {
  require(overlap > 0.0 && overlap <= 1.0, "nms_iou: overlap must be in (0,1]");
  sort_candidates(cands);
  std::vector<Candidate> kept;
  for (const Candidate& c : cands) {
    require(c.region.side > 0.0, "nms_iou: invalid region");
    const bool clear = std::all_of(kept.begin(), kept.end(),
                                   [&](const Candidate& k) { return iou(c.region, k.region) < overlap; });
    if (clear) kept.push_back(c);
  }
  return kept;
}

std::vector<Candidate> nms_distance(std::vector<Candidate> cands, double dist_thresh, double orient_thresh) {
  require(dist_thresh > 0.0 && orient_thresh > 0.0, "nms_distance: thresholds must be positive");
  sort_candidates(cands);
  std::vector<Candidate> kept;
  for (const Candidate& c : cands) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Candidate& k) {
      return std::hypot(c.x - k.x, c.y - k.y) <= dist_thresh && angular_diff(c.direction, k.direction) < orient_thresh;
    });
    if (!suppressed) kept.push_back(c);
  }
  return kept;
}

CoarseExtraction extract_coarse_detailed(const GrayImage& image, CoarseNet& model, const ExtractOptions& opts) {
  const Preprocessed pre = preprocess(image, 16);
  const CoarseForward fwd = forward_scores(model, pre.stack);

  CoarseExtraction ex;
  ex.fused = fuse_levels(fwd.pyramid);
  ex.orientation = fuse_orientation(pre.orientation, fwd.orientation, 1.0, 3.0);
  ex.mask = fwd.mask;
  for (size_t i = 0; i < ex.mask.prob.size(); ++i) ex.mask.prob[i] = (pre.mask.prob[i] + 3.0 * fwd.mask.prob[i]) / 4.0;

  std::vector<Candidate> cands = localize(fwd.pyramid, ex.fused, opts.threshold, model.config().region_side);
  const ScoreLevel& l2 = fwd.pyramid.at(2);
  std::vector<Candidate> inside;
  for (Candidate& c : cands) {
    if (!ex.mask.foreground_at_pixel(c.x, c.y)) continue;
    const int r2 = static_cast<int>(c.cell.y0) / l2.cell_size(), c2 = static_cast<int>(c.cell.x0) / l2.cell_size();
    const DirectionChoice d = assign_direction(c, ex.orientation, l2.dir_cos(r2, c2), l2.dir_sin(r2, c2));
    c.direction = d.direction;
    c.low_confidence = d.low_confidence;
    inside.push_back(c);
  }
  ex.candidates = opts.nms == NmsKind::iou ? nms_iou(std::move(inside), opts.nms_overlap)
                                           : nms_distance(std::move(inside), opts.nms_dist, opts.nms_orient);
  ex.minutiae.width = image.width();
  ex.minutiae.height = image.height();
  for (const Candidate& c : ex.candidates)
    ex.minutiae.minutiae.push_back(Minutia{c.x, c.y, c.direction, c.score, Provenance::coarse});
  return ex;
}

MinutiaSet extract_coarse(const GrayImage& image, CoarseNet& model, const ExtractOptions& opts) {
  return extract_coarse_detailed(image, model, opts).minutiae;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

CoarseSample make_coarse_sample(const CorpusItem& item) {
  CoarseSample s;
  s.stack = preprocess(item.image, 16).stack;
  s.gt = item.gt;
  s.gt_orientation = item.gt_orientation;
  s.gt_mask = item.gt_mask;
  require(s.gt_orientation.grid.block_size == 16 && s.gt_mask.grid.block_size == 16,
          "make_coarse_sample: ground-truth grids must use 16 px blocks");
  return s;
}

std::pair<Tensor, CoarseTargets> make_batch(const std::vector<CoarseSample>& samples, const std::vector<Crop>& crops,
                                            int size, const CoarseLossWeights& weights) {
  require(!crops.empty(), "make_batch: empty batch");
  require(size > 0 && size % 16 == 0, "make_batch: crop size must be a positive multiple of 16");
  const int n = static_cast<int>(crops.size());
  Tensor input(n, EnhancementStack::kChannels, size, size);
  CoarseTargets t;
  for (size_t i = 0; i < 3; ++i) {
    const int e = size >> kScoreLevels[i];
    t.score[i] = Tensor(n, 1, e, e);
    t.score_w[i] = Tensor(n, 1, e, e, 1.0f);
    t.direction[i] = Tensor(n, 2, e, e);
    t.dir_mask[i] = Tensor(n, 1, e, e);
  }
  const int e4 = size / 16;
  t.seg = Tensor(n, 1, e4, e4);
  t.seg_w = Tensor(n, 1, e4, e4, 1.0f);
  t.orient = Tensor(n, 2, e4, e4);
  t.orient_mask = Tensor(n, 1, e4, e4);

  for (int b = 0; b < n; ++b) {
    const Crop& crop = crops[static_cast<size_t>(b)];
    require(crop.sample >= 0 && crop.sample < static_cast<int>(samples.size()), "make_batch: sample out of range");
    const CoarseSample& s = samples[static_cast<size_t>(crop.sample)];
    require(crop.x0 % 16 == 0 && crop.y0 % 16 == 0 && crop.x0 >= 0 && crop.y0 >= 0 &&
                crop.x0 + size <= s.stack.width && crop.y0 + size <= s.stack.height,
            "make_batch: crop outside the image or off the block grid");
    for (int c = 0; c < EnhancementStack::kChannels; ++c) {
      const Plane& src = s.stack.channels[static_cast<size_t>(c)];
      const bool negate = crop.flip && c == EnhancementStack::orientation_sin;
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const float v = src(crop.y0 + y, crop.x0 + (crop.flip ? size - 1 - x : x));
          input(b, c, y, x) = negate ? 1.0f - v : v;
        }
      }
    }
    for (const Minutia& m : s.gt.minutiae) {
      double u = m.x - crop.x0;
      const double v = m.y - crop.y0;
      if (u < 0 || v < 0 || u >= size || v >= size) continue;
      double dir = m.direction.degrees();
      if (crop.flip) {
        u = size - 1 - u;
        dir = 180.0 - dir;
        if (u < 0) continue;
      }
      const double rad = dir / kDeg;
      for (size_t i = 0; i < 3; ++i) {
        const int cell = 1 << kScoreLevels[i];
        const int cx = static_cast<int>(std::floor(u / cell)), cy = static_cast<int>(std::floor(v / cell));
        if (t.score[i](b, 0, cy, cx) > 0.0f) continue;
        t.score[i](b, 0, cy, cx) = 1.0f;
        t.score_w[i](b, 0, cy, cx) = static_cast<float>(weights.positive_weight);
        t.direction[i](b, 0, cy, cx) = static_cast<float>(std::cos(rad));
        t.direction[i](b, 1, cy, cx) = static_cast<float>(std::sin(rad));
        t.dir_mask[i](b, 0, cy, cx) = 1.0f;
      }
    }
    for (int r = 0; r < e4; ++r) {
      for (int c = 0; c < e4; ++c) {
        const int bc = crop.x0 / 16 + (crop.flip ? e4 - 1 - c : c), br = crop.y0 / 16 + r;
        const size_t k = static_cast<size_t>(s.gt_mask.grid.index(bc, br));
        const bool fg = s.gt_mask.prob[k] >= 0.5;
        t.seg(b, 0, r, c) = fg ? 1.0f : 0.0f;
        double theta = s.gt_orientation.theta[static_cast<size_t>(s.gt_orientation.grid.index(bc, br))];
        if (crop.flip) theta = 180.0 - theta;
        t.orient(b, 0, r, c) = static_cast<float>(std::cos(2.0 * theta / kDeg));
        t.orient(b, 1, r, c) = static_cast<float>(std::sin(2.0 * theta / kDeg));
        t.orient_mask(b, 0, r, c) = fg ? 1.0f : 0.0f;
      }
    }
  }
  return {std::move(input), std::move(t)};
}

LossBreakdown coarse_loss(const CoarseOutputs& out, const CoarseTargets& targets, const CoarseLossWeights& weights,
                          CoarseOutputs* grads) {
  LossBreakdown l;
  if (grads) {
    for (size_t i = 0; i < 3; ++i) grads->levels[i] = Tensor::zeros_like(out.levels[i]);
    grads->field = Tensor::zeros_like(out.field);
  }
  const double per_level = 1.0 / 3.0;
  for (size_t i = 0; i < 3; ++i) {
    const auto s = nn::sigmoid_bce(slice_channels(out.levels[i], 0, 1), targets.score[i], targets.score_w[i]);
    const auto d = nn::masked_l2(slice_channels(out.levels[i], 1, 2), targets.direction[i], targets.dir_mask[i]);
    l.score += per_level * s.loss;
    l.direction += per_level * d.loss;
    if (grads) {
      Tensor gs = s.grad, gd = d.grad;
      gs.values() *= static_cast<float>(per_level * weights.score);
      gd.values() *= static_cast<float>(per_level * weights.direction);
      put_channels(grads->levels[i], gs, 0);
      put_channels(grads->levels[i], gd, 1);
    }
  }
  const auto seg = nn::sigmoid_bce(slice_channels(out.field, 0, 1), targets.seg, targets.seg_w);
  const auto ori = nn::masked_l2(slice_channels(out.field, 1, 2), targets.orient, targets.orient_mask);
  l.segmentation = seg.loss;
  l.orientation = ori.loss;
  if (grads) {
    Tensor gs = seg.grad, go = ori.grad;
    gs.values() *= static_cast<float>(weights.segmentation);
    go.values() *= static_cast<float>(weights.orientation);
    put_channels(grads->field, gs, 0);
    put_channels(grads->field, go, 1);
  }
  l.total = weights.score * l.score + weights.direction * l.direction + weights.segmentation * l.segmentation +
            weights.orientation * l.orientation;
  return l;
}

CoarseTrainer::CoarseTrainer(const CoarseConfig& cfg, const CoarseTrainConfig& train_cfg)
    : model(cfg), train(train_cfg) {
  require(train.steps > 0 && train.batch > 0, "CoarseTrainer: steps and batch must be positive");
  optim.schedule = train.schedule;
  optim.schedule.total_steps = train.steps;
  optim.momentum = train.momentum;
  optim.weight_decay = train.weight_decay;
}

std::vector<Crop> CoarseTrainer::crops_for_step(std::int64_t step, const std::vector<CoarseSample>& samples) const {
  require(!samples.empty(), "train_coarsenet: empty dataset");
  std::mt19937_64 rng(derive_seed(train.seed, "coarse-step", static_cast<int>(step)));
  std::vector<Crop> crops;
  for (int b = 0; b < train.batch; ++b) {
    Crop c;
    c.sample = std::uniform_int_distribution<int>(0, static_cast<int>(samples.size()) - 1)(rng);
    const EnhancementStack& st = samples[static_cast<size_t>(c.sample)].stack;
    if (train.crop > 0) {
      require(st.width >= train.crop && st.height >= train.crop, "train_coarsenet: image smaller than crop");
      c.x0 = 16 * std::uniform_int_distribution<int>(0, (st.width - train.crop) / 16)(rng);
      c.y0 = 16 * std::uniform_int_distribution<int>(0, (st.height - train.crop) / 16)(rng);
    }
    c.flip = train.flips && std::uniform_int_distribution<int>(0, 1)(rng) == 1;
    crops.push_back(c);
  }
  return crops;
}

LossBreakdown CoarseTrainer::step(const std::vector<CoarseSample>& samples) {
  const std::vector<Crop> crops = crops_for_step(optim.step, samples);
  const EnhancementStack& first = samples[static_cast<size_t>(crops.front().sample)].stack;
  const int size = train.crop > 0 ? train.crop : first.width;
  if (train.crop == 0) {
    for (const Crop& c : crops) {
      const EnhancementStack& st = samples[static_cast<size_t>(c.sample)].stack;
      require(st.width == size && st.height == size, "train_coarsenet: full-image training needs square images of one size");
    }
  }
  auto [input, targets] = make_batch(samples, crops, size, train.weights);
  const CoarseOutputs out = model.forward(input, Mode::train);
  CoarseOutputs grads;
  const LossBreakdown l = coarse_loss(out, targets, train.weights, &grads);
  auto params = model.parameters();
  nn::zero_grads<float>(params);
  model.backward(grads);
  nn::sgd_step<float>(params, optim);
  return l;
}

std::vector<TrainLogEntry> CoarseTrainer::run(const std::vector<CoarseSample>& samples, std::int64_t until,
                                              const TrainCallback& cb) {
  require(!samples.empty(), "train_coarsenet: empty dataset");
  std::vector<TrainLogEntry> log;
  until = std::min(until, optim.schedule.total_steps);
  while (optim.step < until) {
    const double lr = optim.learning_rate();
    const std::int64_t s = optim.step;
    const LossBreakdown l = step(samples);
    log.push_back(TrainLogEntry{s, l.total, lr});
    if (cb) cb(log.back());
  }
  return log;
}

CoarseNet train_coarsenet(const std::vector<CoarseSample>& samples, const CoarseConfig& cfg,
                          const CoarseTrainConfig& train, std::vector<TrainLogEntry>* log) {
  require(!samples.empty(), "train_coarsenet: empty dataset");
  CoarseTrainer trainer(cfg, train);
  auto entries = trainer.run(samples, train.steps);
  if (log) *log = std::move(entries);
  return std::move(trainer.model);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

nn::Checkpoint coarse_checkpoint(CoarseNet& model, const nn::OptimState<float>* optim) {
  const CoarseConfig& c = model.config();
  nn::Checkpoint ck;
  ck.model = "coarsenet";
  ck.meta["coarse.widths"] = join_ints(c.widths);
  ck.meta["coarse.blocks_per_stage"] = std::to_string(c.blocks_per_stage);
  ck.meta["coarse.aspp_rates"] = join_ints(c.aspp_rates);
  ck.meta["coarse.aspp_width"] = std::to_string(c.aspp_width);
  ck.meta["coarse.score_threshold"] = nn::format_double(c.score_threshold);
  ck.meta["coarse.nms_overlap"] = nn::format_double(c.nms_overlap);
  ck.meta["coarse.region_side"] = nn::format_double(c.region_side);
  ck.meta["coarse.seed"] = std::to_string(c.seed);
  ck.meta["coarse.init_stddev"] = nn::format_double(c.init_stddev);
  nn::capture_layers(model.root(), ck);
  if (optim) nn::capture_optimizer(*optim, ck);
  return ck;
}

CoarseNet coarse_from_checkpoint(const nn::Checkpoint& ckpt, nn::OptimState<float>* optim) {
  if (ckpt.model != "coarsenet") throw std::runtime_error("checkpoint holds '" + ckpt.model + "', not coarsenet");
  CoarseConfig c;
  const auto widths = split_ints(nn::meta_at(ckpt, "coarse.widths"));
  const auto rates = split_ints(nn::meta_at(ckpt, "coarse.aspp_rates"));
  if (widths.size() != 4 || rates.size() != 3) throw std::runtime_error("checkpoint: malformed coarse geometry");
  std::copy(widths.begin(), widths.end(), c.widths.begin());
  std::copy(rates.begin(), rates.end(), c.aspp_rates.begin());
  c.blocks_per_stage = std::stoi(nn::meta_at(ckpt, "coarse.blocks_per_stage"));
  c.aspp_width = std::stoi(nn::meta_at(ckpt, "coarse.aspp_width"));
  c.score_threshold = nn::parse_double(nn::meta_at(ckpt, "coarse.score_threshold"));
  c.nms_overlap = nn::parse_double(nn::meta_at(ckpt, "coarse.nms_overlap"));
  c.region_side = nn::parse_double(nn::meta_at(ckpt, "coarse.region_side"));
  c.seed = std::stoull(nn::meta_at(ckpt, "coarse.seed"));
  c.init_stddev = nn::parse_double(nn::meta_at(ckpt, "coarse.init_stddev"));
  CoarseNet model(c);
  nn::restore_layers(model.root(), ckpt, 0);
  if (optim) nn::restore_optimizer(ckpt, *optim);
  return model;
}

}  // namespace minutiae
