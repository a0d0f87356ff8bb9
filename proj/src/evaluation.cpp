#include "minutiae/evaluation.hpp"

#include "minutiae/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <tuple>

namespace minutiae {
namespace {

std::string number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

MinutiaSet keep_at_least(const MinutiaSet& set, double threshold) {
  MinutiaSet out{set.width, set.height, {}};
  for (const Minutia& m : set.minutiae)
    if (m.score >= threshold) out.minutiae.push_back(m);
  return out;
}

}  // namespace

EvalSetting::EvalSetting(std::string n, double d, double o) : name(std::move(n)), D(d), O(o) {
  require(D > 0 && O > 0, "EvalSetting: D and O must be positive");
}

std::vector<EvalSetting> standard_settings() {
  return {EvalSetting("Setting 1", 8, 10), EvalSetting("Setting 2", 12, 20), EvalSetting("Setting 3", 16, 30)};
}

EvalSetting standard_setting(int index) {
  require(index >= 1 && index <= 3, "standard_setting: index must be 1, 2 or 3");
  return standard_settings()[static_cast<size_t>(index - 1)];
}

MatchResult match(const MinutiaSet& pred, const MinutiaSet& gt, const EvalSetting& s) {
  require(pred.width == gt.width && pred.height == gt.height, "match: image dimensions differ");
  struct Edge {
    double dist, angle;
    int p, g;
  };
  std::vector<Edge> edges;
  for (int p = 0; p < static_cast<int>(pred.size()); ++p) {
    const Minutia& a = pred.minutiae[static_cast<size_t>(p)];
    for (int g = 0; g < static_cast<int>(gt.size()); ++g) {
      const Minutia& b = gt.minutiae[static_cast<size_t>(g)];
      const double dist = std::hypot(a.x - b.x, a.y - b.y);
      const double angle = angular_diff(a.direction, b.direction);
      if (dist <= s.D && angle <= s.O) edges.push_back({dist, angle, p, g});
    }
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return std::tie(a.dist, a.angle, a.p, a.g) < std::tie(b.dist, b.angle, b.p, b.g);
  });
  std::vector<bool> used_p(pred.size()), used_g(gt.size());
  MatchResult r;
  for (const Edge& e : edges) {
    if (used_p[static_cast<size_t>(e.p)] || used_g[static_cast<size_t>(e.g)]) continue;
    used_p[static_cast<size_t>(e.p)] = used_g[static_cast<size_t>(e.g)] = true;
    r.pairs.emplace_back(e.p, e.g);
  }
  r.tp = static_cast<long>(r.pairs.size());
  r.fp = static_cast<long>(pred.size()) - r.tp;
  r.fn = static_cast<long>(gt.size()) - r.tp;
  return r;
}

double f1_score(double precision, double recall) {
  return precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
}

Prf prf(long tp, long fp, long fn) {
  Prf out;
  out.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  out.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  out.f1 = f1_score(out.precision, out.recall);
  return out;
}

std::vector<PrPoint> pr_curve(const std::vector<MinutiaSet>& preds, const std::vector<MinutiaSet>& gts,
                              const EvalSetting& s) {
  require(preds.size() == gts.size(), "pr_curve: corpus sizes differ");
  std::vector<double> scores;
  for (const MinutiaSet& p : preds)
    for (const Minutia& m : p.minutiae) scores.push_back(m.score);
  std::sort(scores.begin(), scores.end(), std::greater<>());
  scores.erase(std::unique(scores.begin(), scores.end()), scores.end());

  const double top = scores.empty() ? 1.0 : scores.front();
  std::vector<PrPoint> curve{{std::nextafter(std::max(top, 1.0), 2.0), 0.0, 0.0}};
  for (double t : scores) {
    long tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < preds.size(); ++i) {
      const MatchResult m = match(keep_at_least(preds[i], t), gts[i], s);
      tp += m.tp;
      fp += m.fp;
      fn += m.fn;
    }
    const Prf v = prf(tp, fp, fn);
    curve.push_back({t, v.precision, v.recall});
  }
  return curve;
}

std::vector<PrPoint> pr_curve(const MinutiaSet& pred, const MinutiaSet& gt, const EvalSetting& s) {
  return pr_curve(std::vector<MinutiaSet>{pred}, std::vector<MinutiaSet>{gt}, s);
}

std::string encode_pr_csv(const std::vector<PrPoint>& curve) {
  std::string out = "threshold,precision,recall\n";
  for (const PrPoint& p : curve) out += number(p.threshold) + ',' + number(p.precision) + ',' + number(p.recall) + '\n';
  return out;
}

CorpusReport evaluate_corpus(const std::vector<MinutiaSet>& preds, const std::vector<MinutiaSet>& gts,
                             const std::vector<EvalSetting>& settings, std::vector<std::string> ids) {
  require(preds.size() == gts.size(), "evaluate_corpus: prediction and ground-truth corpora differ in size");
  if (ids.empty()) {
    for (size_t i = 0; i < preds.size(); ++i) ids.push_back(std::to_string(i));
  }
  require(ids.size() == preds.size(), "evaluate_corpus: id list does not match corpus size");
  CorpusReport report;
  report.ids = std::move(ids);
  for (const EvalSetting& s : settings) {
    SettingResult row;
    row.setting = s;
    for (size_t i = 0; i < preds.size(); ++i) {
      MatchResult m = match(preds[i], gts[i], s);
      row.tp += m.tp;
      row.fp += m.fp;
      row.fn += m.fn;
      row.per_image.push_back(std::move(m));
    }
    row.metrics = prf(row.tp, row.fp, row.fn);
    report.settings.push_back(std::move(row));
  }
  return report;
}

std::string encode_report(const CorpusReport& report, const std::vector<AblationRow>& ablation) {
  std::string out = "#minutiae-report-v1\naveraging=micro\nimages=" + std::to_string(report.ids.size()) + '\n';
  auto emit_rows = [&out](const std::string& prefix, const CorpusReport& r) {
    for (size_t k = 0; k < r.settings.size(); ++k) {
      const SettingResult& row = r.settings[k];
      const std::string key = prefix + "setting." + std::to_string(k + 1) + '.';
      out += key + "name=" + row.setting.name + '\n';
      out += key + "D=" + number(row.setting.D) + '\n';
      out += key + "O=" + number(row.setting.O) + '\n';
      out += key + "tp=" + std::to_string(row.tp) + '\n';
      out += key + "fp=" + std::to_string(row.fp) + '\n';
      out += key + "fn=" + std::to_string(row.fn) + '\n';
      out += key + "precision=" + number(row.metrics.precision) + '\n';
      out += key + "recall=" + number(row.metrics.recall) + '\n';
      out += key + "f1=" + number(row.metrics.f1) + '\n';
    }
  };
  emit_rows("", report);
  for (const AblationRow& row : ablation) emit_rows("ablation." + row.name + '.', row.report);
  for (size_t k = 0; k < report.settings.size(); ++k) {
    for (size_t i = 0; i < report.ids.size(); ++i) {
      const MatchResult& m = report.settings[k].per_image[i];
      out += "image." + report.ids[i] + ".setting." + std::to_string(k + 1) + ".counts=" + std::to_string(m.tp) +
             ' ' + std::to_string(m.fp) + ' ' + std::to_string(m.fn) + '\n';
    }
  }
  return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace minutiae
