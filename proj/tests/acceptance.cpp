// Acceptance gate: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria (0 when everything passes).

#include "minutiae/coarsenet.hpp"
#include "minutiae/domain.hpp"
#include "minutiae/evaluation.hpp"
#include "minutiae/nn/gradcheck.hpp"
#include "minutiae/nn/layers.hpp"
#include "minutiae/nn/losses.hpp"
#include "minutiae/pipeline.hpp"
#include "minutiae/synth.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

using namespace minutiae;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kF1Tol = 1e-3;
constexpr double kGradTol = 1e-4;
constexpr double kBatchNormGradTol = 1e-3;
constexpr int kGradSeeds = 10;
constexpr int kOracleTrials = 1000;
constexpr double kMinF1 = 0.60;
constexpr double kMaxOrientError = 6.0;
constexpr double kMinSegAccuracy = 0.9;
constexpr std::uint64_t kCorpusSeed = 20180101;
constexpr std::uint64_t kRunSeed = 7;

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// ---------------------------------------------------------------------------
// 1. F1 arithmetic
// ---------------------------------------------------------------------------

struct TableRow {
  const char* name;
  double precision_pct;
  double recall_pct;
  double f1;
};

// Every (precision, recall, F1) triple of the published comparison table.
const std::vector<TableRow> kTable = {
    {"NIST SD27 MINDTCT s1", 8.3, 14.7, 0.106},      {"NIST SD27 MINDTCT s2", 10.0, 16.4, 0.124},
    {"NIST SD27 MINDTCT s3", 11.2, 18.9, 0.141},     {"NIST SD27 VeriFinger s1", 3.6, 40.1, 0.066},
    {"NIST SD27 VeriFinger s2", 5.3, 47.9, 0.095},   {"NIST SD27 VeriFinger s3", 7.6, 58.3, 0.134},
    {"NIST SD27 Gao s3", 23.5, 8.7, 0.127},          {"NIST SD27 Sankaran s3", 26.4, 63.1, 0.372},
    {"NIST SD27 Tang s3", 53.0, 53.4, 0.532},        {"NIST SD27 FingerNet s1", 53.2, 49.5, 0.513},
    {"NIST SD27 FingerNet s2", 58.0, 58.1, 0.58},    {"NIST SD27 FingerNet s3", 63.0, 63.2, 0.631},
    {"NIST SD27 proposed s1", 69.2, 67.7, 0.684},    {"NIST SD27 proposed s2", 70.5, 72.3, 0.714},
    {"NIST SD27 proposed s3", 71.2, 75.7, 0.734},    {"FVC 2004 MINDTCT s1", 30.8, 64.3, 0.416},
    {"FVC 2004 MINDTCT s2", 37.7, 72.1, 0.495},      {"FVC 2004 MINDTCT s3", 42.1, 79.8, 0.551},
    {"FVC 2004 VeriFinger s1", 39.8, 69.2, 0.505},   {"FVC 2004 VeriFinger s2", 45.6, 77.5, 0.574},
    {"FVC 2004 VeriFinger s3", 51.8, 81.9, 0.635},   {"FVC 2004 Gao s3", 48.8, 82.7, 0.614},
    {"FVC 2004 FingerNet s1", 68.7, 62.1, 0.643},    {"FVC 2004 FingerNet s2", 72.9, 70.4, 0.716},
    {"FVC 2004 FingerNet s3", 76.0, 80.0, 0.779},    {"FVC 2004 proposed s1", 79.0, 80.1, 0.795},
    {"FVC 2004 proposed s2", 83.6, 83.9, 0.837},     {"FVC 2004 proposed s3", 85.9, 84.8, 0.853},
};

Outcome criterion_f1() {
  const auto t0 = Clock::now();
  // Counts with the published precision and recall: tp fixed, fp and fn solved for.
  const long tp = 1000000;
  std::vector<std::string> misses;
  for (const TableRow& row : kTable) {
    const double p = row.precision_pct / 100.0, r = row.recall_pct / 100.0;
    const long fp = std::lround(tp * (1.0 - p) / p);
    const long fn = std::lround(tp * (1.0 - r) / r);
    const Prf v = prf(tp, fp, fn);
    if (std::abs(v.f1 - row.f1) > kF1Tol) misses.push_back(std::string(row.name) + " gives " + fmt(v.f1));
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = misses.empty() && t < 1.0;
  o.detail = std::to_string(kTable.size() - misses.size()) + "/" + std::to_string(kTable.size()) +
             " triples within " + fmt(kF1Tol, 3);
  for (const auto& m : misses) o.detail += "; " + m;
  return o;
}

// ---------------------------------------------------------------------------
// 2. Gradients
// ---------------------------------------------------------------------------

nn::Tensor<double> normal(std::array<int, 4> shape, std::mt19937_64& rng, double sd = 1.0) {
  nn::Tensor<double> t(shape);
  t.fill_normal(rng, sd);
  return t;
}

Outcome criterion_gradients() {
  using namespace minutiae::nn;
  const auto t0 = Clock::now();
  std::map<std::string, double> worst;
  auto note = [&](const std::string& name, double err) { worst[name] = std::max(worst[name], err); };

  for (int seed = 0; seed < kGradSeeds; ++seed) {
    std::mt19937_64 rng(0xACCE55 + static_cast<std::uint64_t>(seed));
    {
      Conv2d<double> l(ConvGeometry{2, 3, 3, 1, 1, 1});
      l.init(rng, 0.5);
      note("conv2d", grad_check_layer(l, normal({2, 2, 6, 5}, rng), Mode::train, rng));
    }
    {
      Conv2d<double> l(ConvGeometry{3, 2, 3, 2, 2, 2});
      l.init(rng, 0.5);
      note("conv2d strided dilated", grad_check_layer(l, normal({1, 3, 9, 8}, rng), Mode::train, rng));
    }
    {
      BatchNorm<double> l(3);
      l.gamma().value.fill_normal(rng, 1.0);
      l.beta().value.fill_normal(rng, 1.0);
      note("batchnorm train", grad_check_layer(l, normal({4, 3, 3, 2}, rng, 2.0), Mode::train, rng));
      note("batchnorm infer", grad_check_layer(l, normal({4, 3, 3, 2}, rng, 2.0), Mode::infer, rng));
    }
    {
      ReLU<double> l;
      note("relu", grad_check_layer(l, normal({2, 3, 4, 3}, rng), Mode::train, rng));
    }
    {
      MaxPool2<double> l;
      note("maxpool2", grad_check_layer(l, normal({2, 2, 7, 6}, rng), Mode::train, rng));
    }
    {
      UpsampleBilinear<double> l(2);
      note("upsample", grad_check_layer(l, normal({1, 2, 3, 5}, rng), Mode::train, rng));
    }
    {
      Dense<double> l(18, 5);
      l.init(rng, 0.5);
      note("dense", grad_check_layer(l, normal({3, 2, 3, 3}, rng), Mode::train, rng));
    }
    {
      ResidualBlock<double> l(2);
      l.init(rng, 0.5);
      note("residual (batchnorm)", grad_check_layer(l, normal({3, 2, 4, 4}, rng), Mode::train, rng));
    }
    {
      Sequential<double> l;
      l.add<Conv2d<double>>(ConvGeometry{1, 2, 3, 1, 1, 1}).init(rng, 0.5);
      l.add<ReLU<double>>();
      l.add<MaxPool2<double>>();
      l.add<Dense<double>>(8, 3).init(rng, 0.5);
      note("sequential", grad_check_layer(l, normal({2, 1, 4, 4}, rng), Mode::train, rng));
    }
    {
      auto z = normal({5, 3, 1, 1}, rng, 2.0);
      const std::vector<int> labels{0, 2, 1, 1, 2};
      const auto g = softmax_xent(z, std::span<const int>(labels)).grad;
      const std::vector<GradCheckTarget> t{{&z, &g}};
      note("softmax_xent", grad_check([&] { return softmax_xent(z, std::span<const int>(labels)).loss; }, t));
    }
    {
      auto z = normal({2, 1, 3, 4}, rng, 2.0);
      nn::Tensor<double> target(2, 1, 3, 4), weight(2, 1, 3, 4);
      std::uniform_real_distribution<double> u(0, 1);
      for (Eigen::Index i = 0; i < z.size(); ++i) {
        target.data()[i] = u(rng) < 0.4 ? 1.0 : 0.0;
        weight.data()[i] = 0.25 + u(rng);
      }
      const auto g = sigmoid_bce(z, target, weight).grad;
      const std::vector<GradCheckTarget> t{{&z, &g}};
      note("sigmoid_bce", grad_check([&] { return sigmoid_bce(z, target, weight).loss; }, t));
    }
    {
      auto pred = normal({2, 2, 3, 3}, rng);
      const auto target = normal({2, 2, 3, 3}, rng);
      nn::Tensor<double> mask(2, 1, 3, 3);
      std::uniform_real_distribution<double> u(0, 1);
      for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = u(rng) < 0.6 ? 1.0 : 0.0;
      mask.data()[0] = 1.0;
      const auto g = masked_l2(pred, target, mask).grad;
      const std::vector<GradCheckTarget> t{{&pred, &g}};
      note("masked_l2", grad_check([&] { return masked_l2(pred, target, mask).loss; }, t));
    }

    // Composite objective over a shared embedding with softmax, center and
    // direction heads: alpha*Lc + (1-alpha)*Ls + beta*Lo.
    const int n = 7, dim = 6;
    auto features = normal({n, dim, 1, 1}, rng);
    Dense<double> cls(dim, 2), dir(dim, 2);
    cls.init(rng, 0.5);
    dir.init(rng, 0.5);
    CenterBank<double> bank(2, dim, 0.5);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (Eigen::Index i = 0; i < bank.centers().size(); ++i) bank.centers().data()[i] = nd(rng);
    std::uniform_int_distribution<int> coin(0, 1);
    std::uniform_real_distribution<double> deg(0.0, 360.0);
    std::vector<int> labels(n);
    std::vector<double> dirs(n), positive(n);
    for (int i = 0; i < n; ++i) {
      labels[static_cast<size_t>(i)] = coin(rng);
      positive[static_cast<size_t>(i)] = labels[static_cast<size_t>(i)];
      dirs[static_cast<size_t>(i)] = deg(rng);
    }
    labels[0] = 1;
    positive[0] = 1;
    const double alpha = 0.5, beta = 2.0;
    auto objective = [&] {
      const double lc = center_loss(features, std::span<const int>(labels), bank).loss;
      const double ls = softmax_xent(cls.forward(features, Mode::train), std::span<const int>(labels)).loss;
      const double lo =
          orientation_loss(dir.forward(features, Mode::train), std::span<const double>(dirs), std::span<const double>(positive))
              .loss;
      return total_loss(lc, ls, lo, alpha, beta);
    };
    const double direct = objective();
    const double expected =
        alpha * center_loss(features, std::span<const int>(labels), bank).loss +
        (1 - alpha) * softmax_xent(cls.forward(features, Mode::train), std::span<const int>(labels)).loss +
        beta * orientation_loss(dir.forward(features, Mode::train), std::span<const double>(dirs),
                                std::span<const double>(positive))
                   .loss;
    note("composite value", std::abs(direct - expected) / std::max(1e-8, std::abs(expected)));

    for (auto* p : cls.parameters()) p->zero_grad();
    for (auto* p : dir.parameters()) p->zero_grad();
    const auto c = center_loss(features, std::span<const int>(labels), bank);
    auto s = softmax_xent(cls.forward(features, Mode::train), std::span<const int>(labels));
    auto o = orientation_loss(dir.forward(features, Mode::train), std::span<const double>(dirs),
                              std::span<const double>(positive));
    s.grad.values() *= (1 - alpha);
    o.grad.values() *= beta;
    nn::Tensor<double> gf = cls.backward(s.grad);
    gf.values() += dir.backward(o.grad).values() + alpha * c.grad.values();
    const auto gcw = cls.weight().grad, gcb = cls.bias().grad, gdw = dir.weight().grad, gdb = dir.bias().grad;
    const std::vector<GradCheckTarget> t{{&features, &gf},
                                         {&cls.weight().value, &gcw},
                                         {&cls.bias().value, &gcb},
                                         {&dir.weight().value, &gdw},
                                         {&dir.bias().value, &gdb}};
    note("composite objective", grad_check(objective, t));
  }

  const double t = seconds_since(t0);
  Outcome out;
  out.pass = t < 60.0;
  std::string bad;
  double overall = 0.0;
  for (const auto& [name, err] : worst) {
    const double tol = name.find("batchnorm") != std::string::npos ? kBatchNormGradTol : kGradTol;
    overall = std::max(overall, err);
    if (!(err < tol)) {
      out.pass = false;
      bad += "; " + name + " " + std::to_string(err);
    }
  }
  out.detail = std::to_string(worst.size()) + " checks x " + std::to_string(kGradSeeds) + " seeds, worst rel err " +
               std::to_string(overall) + ", " + fmt(t, 1) + " s" + bad;
  return out;
}

// ---------------------------------------------------------------------------
// 3. NMS oracle
// ---------------------------------------------------------------------------

// Overlap of two axis-aligned squares computed from their corners.
double square_iou(double ax, double ay, double as, double bx, double by, double bs) {
  const double w = std::max(0.0, std::min(ax + as, bx + bs) - std::max(ax, bx));
  const double h = std::max(0.0, std::min(ay + as, by + bs) - std::max(ay, by));
  const double inter = w * h;
  return inter / (as * as + bs * bs - inter);
}

// Brute force: keep the best remaining candidate (score desc, then y, then x),
// drop everything it overlaps, repeat.
std::vector<Candidate> brute_nms(std::vector<Candidate> rest, double overlap) {
  std::vector<Candidate> kept;
  while (!rest.empty()) {
    auto best = std::min_element(rest.begin(), rest.end(), [](const Candidate& a, const Candidate& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.y != b.y) return a.y < b.y;
      return a.x < b.x;
    });
    const Candidate top = *best;
    rest.erase(best);
    kept.push_back(top);
    std::erase_if(rest, [&](const Candidate& c) {
      return square_iou(c.region.x0, c.region.y0, c.region.side, top.region.x0, top.region.y0, top.region.side) >= overlap;
    });
  }
  return kept;
}

bool identical(const std::vector<Candidate>& a, const std::vector<Candidate>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].x != b[i].x || a[i].y != b[i].y || a[i].score != b[i].score ||
        a[i].direction.degrees() != b[i].direction.degrees())
      return false;
  }
  return true;
}

std::vector<Candidate> random_candidates(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(0, 20), score(1, 8);
  std::uniform_real_distribution<double> pos(0.0, 64.0), dir(0.0, 360.0);
  std::vector<Candidate> out(static_cast<size_t>(count(rng)));
  for (Candidate& c : out) {
    c.x = pos(rng);
    c.y = pos(rng);
    c.score = score(rng) / 8.0;
    c.direction = Angle::direction(dir(rng));
    c.region = Rect::centered(c.x, c.y, 16.0);
    c.cell = c.region;
  }
  return out;
}

Outcome criterion_nms() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(31337);
  int mismatches = 0, unstable = 0;
  for (int trial = 0; trial < kOracleTrials; ++trial) {
    const auto cands = random_candidates(rng);
    const auto kept = nms_iou(cands, 0.5);
    if (!identical(kept, brute_nms(cands, 0.5))) ++mismatches;
    if (!identical(nms_iou(kept, 0.5), kept)) ++unstable;
    const auto spaced = nms_distance(cands, 16.0, 30.0);
    if (!identical(nms_distance(spaced, 16.0, 30.0), spaced)) ++unstable;
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = mismatches == 0 && unstable == 0 && t < 10.0;
  o.detail = std::to_string(kOracleTrials) + " sets, " + std::to_string(mismatches) + " oracle mismatches, " +
             std::to_string(unstable) + " non-idempotent, " + fmt(t, 2) + " s";
  return o;
}

// ---------------------------------------------------------------------------
// 4. Matching oracle
// ---------------------------------------------------------------------------

// Optimal tp by exhaustive search over assignments (sides are at most 8).
long exhaustive_tp(const std::vector<std::vector<bool>>& ok, size_t p, std::vector<bool>& used) {
  if (p == ok.size()) return 0;
  long best = exhaustive_tp(ok, p + 1, used);
  for (size_t g = 0; g < used.size(); ++g) {
    if (!ok[p][g] || used[g]) continue;
    used[g] = true;
    best = std::max(best, 1 + exhaustive_tp(ok, p + 1, used));
    used[g] = false;
  }
  return best;
}

double direction_gap(double a, double b) {
  const double d = std::fmod(std::abs(a - b), 360.0);
  return std::min(d, 360.0 - d);
}

Outcome criterion_matching() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(4242);
  std::uniform_int_distribution<int> count(0, 8), setting(1, 3);
  std::uniform_real_distribution<double> pos(0.0, 48.0), deg(0.0, 360.0);
  int above = 0, not_equal_sparse = 0, sparse_cases = 0;
  auto random_set = [&](int n) {
    MinutiaSet s{64, 64, {}};
    for (int i = 0; i < n; ++i)
      s.minutiae.push_back(Minutia{pos(rng), pos(rng), Angle::direction(deg(rng)), 0.5, Provenance::coarse});
    return s;
  };
  for (int trial = 0; trial < kOracleTrials; ++trial) {
    const EvalSetting s = standard_setting(setting(rng));
    const MinutiaSet pred = random_set(count(rng)), gt = random_set(count(rng));
    std::vector<std::vector<bool>> ok(pred.size(), std::vector<bool>(gt.size()));
    for (size_t p = 0; p < pred.size(); ++p)
      for (size_t g = 0; g < gt.size(); ++g) {
        const Minutia &a = pred.minutiae[p], &b = gt.minutiae[g];
        ok[p][g] = std::hypot(a.x - b.x, a.y - b.y) <= s.D &&
                   direction_gap(a.direction.degrees(), b.direction.degrees()) <= s.O;
      }
    std::vector<bool> used(gt.size(), false);
    const long best = exhaustive_tp(ok, 0, used);
    const long greedy = match(pred, gt, s).tp;
    if (greedy > best) ++above;
    bool sparse = true;
    for (size_t i = 0; i < gt.size(); ++i)
      for (size_t j = i + 1; j < gt.size(); ++j)
        sparse = sparse && std::hypot(gt.minutiae[i].x - gt.minutiae[j].x, gt.minutiae[i].y - gt.minutiae[j].y) > 2 * s.D;
    if (sparse) {
      ++sparse_cases;
      if (greedy != best) ++not_equal_sparse;
    }
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = above == 0 && not_equal_sparse == 0 && t < 30.0;
  o.detail = std::to_string(kOracleTrials) + " instances, greedy>optimal " + std::to_string(above) + ", sparse " +
             std::to_string(sparse_cases) + " with " + std::to_string(not_equal_sparse) + " unequal, " + fmt(t, 2) + " s";
  return o;
}

// ---------------------------------------------------------------------------
// 5. Level geometry
// ---------------------------------------------------------------------------

Outcome criterion_levels() {
  const auto t0 = Clock::now();
  const int size = 128;
  const ScorePyramid base = ScorePyramid::empty(size, size);
  long tiling_errors = 0, descent_errors = 0, descents = 0;
  for (int j : kScoreLevels) {
    const ScoreLevel& l = base.at(j);
    const int side = 1 << j;
    if (l.rows() != size / side || l.cols() != size / side) ++tiling_errors;
    std::vector<int> cover(static_cast<size_t>(size * size), 0);
    for (int r = 0; r < l.rows(); ++r)
      for (int c = 0; c < l.cols(); ++c) {
        const Rect cell = l.cell_region(r, c);
        if (cell.x0 != c * side || cell.y0 != r * side || cell.side != side) ++tiling_errors;
        for (int y = r * side; y < (r + 1) * side; ++y)
          for (int x = c * side; x < (c + 1) * side; ++x) ++cover[static_cast<size_t>(y * size + x)];
      }
    tiling_errors += std::count_if(cover.begin(), cover.end(), [](int v) { return v != 1; });
  }
  // Light one level-2 cell and its ancestors; the descent must land inside
  // all three cells and nowhere else.
  const int n2 = size / 4;
  for (int r = 0; r < n2; ++r)
    for (int c = 0; c < n2; ++c) {
      ScorePyramid p = base;
      p.levels[4].score(r / 4, c / 4) = 1.0f;
      p.levels[3].score(r / 2, c / 2) = 1.0f;
      p.levels[2].score(r, c) = 1.0f;
      Plane fused = Plane::Zero(size / 16, size / 16);
      fused(r / 4, c / 4) = 1.0f;
      const auto cands = localize(p, fused, 0.5);
      ++descents;
      if (cands.size() != 1) {
        ++descent_errors;
        continue;
      }
      const Candidate& k = cands[0];
      const bool in2 = k.x >= c * 4 && k.x <= c * 4 + 4 && k.y >= r * 4 && k.y <= r * 4 + 4;
      const bool in3 = k.x >= (c / 2) * 8 && k.x <= (c / 2) * 8 + 8 && k.y >= (r / 2) * 8 && k.y <= (r / 2) * 8 + 8;
      const bool in4 = k.x >= (c / 4) * 16 && k.x <= (c / 4) * 16 + 16 && k.y >= (r / 4) * 16 && k.y <= (r / 4) * 16 + 16;
      if (!(in2 && in3 && in4) || !(k.cell == Rect(c * 4, r * 4, 4))) ++descent_errors;
    }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = tiling_errors == 0 && descent_errors == 0 && t < 5.0;
  o.detail = "levels 2/3/4 at 128x128: " + std::to_string(tiling_errors) + " tiling errors, " +
             std::to_string(descent_errors) + "/" + std::to_string(descents) + " bad descents, " + fmt(t, 2) + " s";
  return o;
}

// ---------------------------------------------------------------------------
// 6-8. Full pipeline runs
// ---------------------------------------------------------------------------

struct FullRun {
  RunArtifacts art;
  double seconds = 0.0;
  std::vector<std::pair<std::string, std::string>> checksums;  // relative path, fnv1a64
};

FullRun full_run(const fs::path& root) {
  const auto t0 = Clock::now();
  fs::remove_all(root);
  PipelineConfig cfg = PipelineConfig::desk_scale();
  cfg.set_seed(kRunSeed);
  SynthParams synth = cfg.synth;
  synth.seed = kCorpusSeed;
  build_corpus(root / "corpus", 64, 16, synth);
  FullRun run;
  run.art = run_pipeline(root / "corpus", root / "run", cfg);
  run.seconds = seconds_since(t0);
  std::vector<fs::path> files = run.art.files;
  files.push_back(root / "corpus" / "manifest.tsv");
  for (const auto& f : files) run.checksums.emplace_back(fs::relative(f, root).string(), file_checksum(f));
  return run;
}

const SettingResult& setting3(const CorpusReport& r) { return r.settings.at(2); }

std::string prf_text(const SettingResult& s) {
  return "P=" + fmt(s.metrics.precision, 3) + " R=" + fmt(s.metrics.recall, 3) + " F1=" + fmt(s.metrics.f1, 3);
}

Outcome criterion_pipeline(const FullRun& run) {
  const SettingResult &fine = setting3(run.art.refined), &coarse = setting3(run.art.coarse_only);
  Outcome o;
  o.pass = fine.metrics.f1 >= kMinF1 && fine.metrics.precision > coarse.metrics.precision && run.seconds < 1800.0;
  o.detail = "Setting 3 refined " + prf_text(fine) + " vs skip-finenet " + prf_text(coarse) + ", " +
             fmt(run.seconds, 0) + " s";
  return o;
}

Outcome criterion_nms_ablation(const FullRun& run) {
  const SettingResult &iou = setting3(run.art.refined), &dist = setting3(run.art.nms_distance);
  Outcome o;
  o.pass = iou.metrics.f1 >= dist.metrics.f1;
  o.detail = "Setting 3 nms_iou F1=" + fmt(iou.metrics.f1, 3) + " vs nms_distance F1=" + fmt(dist.metrics.f1, 3);
  return o;
}

Outcome criterion_determinism(const FullRun& a, const FullRun& b) {
  size_t differ = 0;
  std::string first;
  if (a.checksums.size() != b.checksums.size()) differ = std::max(a.checksums.size(), b.checksums.size());
  for (size_t i = 0; i < std::min(a.checksums.size(), b.checksums.size()); ++i) {
    if (a.checksums[i] != b.checksums[i]) {
      if (differ++ == 0) first = "; first difference " + a.checksums[i].first;
    }
  }
  Outcome o;
  o.pass = differ == 0 && !a.checksums.empty();
  o.detail = std::to_string(a.checksums.size()) + " artifacts compared, " + std::to_string(differ) + " differ" + first;
  return o;
}

// ---------------------------------------------------------------------------
// 9. Domain knowledge on synthetic prints
// ---------------------------------------------------------------------------

Outcome criterion_domain() {
  const auto t0 = Clock::now();
  double err_sum = 0.0;
  long err_n = 0, seg_ok = 0, seg_n = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SynthParams p;
    p.seed = seed;
    const LabeledPrint lp = generate(p);
    const OrientationField est = estimate_orientation(lp.image, 16);
    const SegmentationMask seg = segment(lp.image, 16);
    for (size_t i = 0; i < lp.gt_mask.prob.size(); ++i) {
      const bool truth = lp.gt_mask.prob[i] >= 0.5;
      seg_ok += (seg.prob[i] >= 0.5) == truth;
      ++seg_n;
      if (!truth) continue;
      const double d = std::fmod(std::abs(est.theta[i] - lp.gt_orientation.theta[i]), 180.0);
      err_sum += std::min(d, 180.0 - d);
      ++err_n;
    }
  }
  const double err = err_sum / static_cast<double>(err_n);
  const double acc = static_cast<double>(seg_ok) / static_cast<double>(seg_n);
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = err < kMaxOrientError && acc >= kMinSegAccuracy && t < 60.0;
  o.detail = "20 prints: orientation error " + fmt(err, 2) + " deg on foreground, segmentation accuracy " + fmt(acc, 3) +
             ", " + fmt(t, 1) + " s";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the minutiae toolkit"};
  std::string work = (fs::temp_directory_path() / "minutiae_acceptance").string();
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory for the pipeline runs");
  app.add_option("--only", only, "Run just these criteria (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const auto wanted = [&](int k) { return only.empty() || std::find(only.begin(), only.end(), k) != only.end(); };
  int failed = 0;
  const auto report = [&](int k, const std::string& title, const Outcome& o) {
    std::printf("criterion %d %-28s %s  %s\n", k, title.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  };

  try {
    if (wanted(1)) report(1, "F1 arithmetic", criterion_f1());
    if (wanted(2)) report(2, "gradient checks", criterion_gradients());
    if (wanted(3)) report(3, "NMS oracle", criterion_nms());
    if (wanted(4)) report(4, "matching oracle", criterion_matching());
    if (wanted(5)) report(5, "level geometry", criterion_levels());
    if (wanted(6) || wanted(7) || wanted(8)) {
      const FullRun first = full_run(fs::path(work) / "run_a");
      if (wanted(6)) report(6, "end-to-end pipeline", criterion_pipeline(first));
      if (wanted(7)) report(7, "NMS ablation ordering", criterion_nms_ablation(first));
      if (wanted(8)) report(8, "determinism", criterion_determinism(first, full_run(fs::path(work) / "run_b")));
    }
    if (wanted(9)) report(9, "domain self-consistency", criterion_domain());
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 100;
  }
  std::printf("%d criteria failed\n", failed);
  return failed;
}
