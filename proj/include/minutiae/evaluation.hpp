#ifndef MINUTIAE_EVALUATION_HPP_
#define MINUTIAE_EVALUATION_HPP_

#include "minutiae/minutia.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace minutiae {

struct EvalSetting {
  std::string name;
  double D = 8.0;   // pixels
  double O = 10.0;  // degrees

  EvalSetting() = default;
  EvalSetting(std::string name, double d, double o);
};

/// The three standard settings: (8,10), (12,20), (16,30).
std::vector<EvalSetting> standard_settings();
EvalSetting standard_setting(int index);  // 1, 2 or 3

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (pred index, gt index)
  long tp = 0;
  long fp = 0;
  long fn = 0;
};

/// Greedy one-to-one matching. A pair is eligible when its distance is at
/// most D and its direction difference at most O; eligible pairs are taken
/// in order of distance, then angular difference, then prediction index.
MatchResult match(const MinutiaSet& pred, const MinutiaSet& gt, const EvalSetting& s);

struct Prf {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

double f1_score(double precision, double recall);
Prf prf(long tp, long fp, long fn);
inline Prf prf(const MatchResult& m) { return prf(m.tp, m.fp, m.fn); }

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

/// Points for every distinct score, descending, after a leading point with
/// a threshold above all scores (nothing kept). Predictions with
/// score >= threshold are kept. Counts are summed over all images.
std::vector<PrPoint> pr_curve(const std::vector<MinutiaSet>& preds, const std::vector<MinutiaSet>& gts,
                              const EvalSetting& s);
std::vector<PrPoint> pr_curve(const MinutiaSet& pred, const MinutiaSet& gt, const EvalSetting& s);
std::string encode_pr_csv(const std::vector<PrPoint>& curve);

struct SettingResult {
  EvalSetting setting;
  long tp = 0;
  long fp = 0;
  long fn = 0;
  Prf metrics;
  std::vector<MatchResult> per_image;
};

struct CorpusReport {
  std::vector<std::string> ids;
  std::vector<SettingResult> settings;
};

/// Micro-averaged evaluation: counts are summed over images before dividing.
CorpusReport evaluate_corpus(const std::vector<MinutiaSet>& preds, const std::vector<MinutiaSet>& gts,
                             const std::vector<EvalSetting>& settings, std::vector<std::string> ids = {});

struct AblationRow {
  std::string name;  // e.g. nms_iou, nms_distance
  CorpusReport report;
};

/// Machine-parseable key=value report.
std::string encode_report(const CorpusReport& report, const std::vector<AblationRow>& ablation = {});
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace minutiae

#endif  // MINUTIAE_EVALUATION_HPP_
