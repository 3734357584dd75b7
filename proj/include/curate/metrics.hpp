#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "curate/embedding_store.hpp"

namespace curate {

using BinaryMask = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---- classification --------------------------------------------------------

/// counts(t, p) = items of true class t predicted as p.
struct ConfusionMatrix {
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;

  std::size_t classes() const { return static_cast<std::size_t>(counts.rows()); }
  std::int64_t total() const { return counts.sum(); }
  std::int64_t correct() const { return counts.diagonal().sum(); }
};

ConfusionMatrix confusion(std::span<const std::uint32_t> y_true, std::span<const std::uint32_t> y_pred,
                          std::size_t num_classes);

struct F1Scores {
  double macro_f1 = 0.0;
  double micro_f1 = 0.0;
  std::vector<double> per_class_f1;
  /// false for classes with tp + fp + fn = 0; they are left out of the macro mean
  std::vector<bool> counted;
};

F1Scores f1_scores(const ConfusionMatrix& cm);

/// Rank-sum AUROC with midranks for ties. `positive[i]` != 0 marks positives.
double binary_auroc(std::span<const double> scores, std::span<const std::uint8_t> positive);

struct AurocResult {
  double macro = 0.0;
  std::vector<double> per_class;  // NaN where the class was skipped
  std::vector<std::string> warnings;
};

/// One-vs-rest AUROC per column of `scores` (n x C), unweighted mean over
/// classes that have both positives and negatives.
AurocResult auroc_ovr_macro(std::span<const std::uint32_t> y_true, const RowMatrixXd& scores);

// ---- segmentation ----------------------------------------------------------

struct SegScores {
  double dice = 0.0;
  double iou = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

/// Per-image scores. Two empty masks score 1 everywhere; a 0/0 precision or
/// recall otherwise scores 0.
SegScores image_seg_scores(const BinaryMask& pred, const BinaryMask& gt);

/// Unweighted means over images (mDice, mIoU, mPrec, mRec).
SegScores seg_metrics(std::span<const BinaryMask> pred_masks, std::span<const BinaryMask> gt_masks);

// ---- cross-validation reports ----------------------------------------------

struct MetricSummary {
  std::string name;
  std::vector<double> per_fold;
  double mean = 0.0;
  double stddev = 0.0;  // population
};

MetricSummary aggregate_cv(std::string name, std::span<const double> per_fold);

struct EvalReport {
  std::string task;
  std::string split_name;
  std::uint64_t seed = 0;
  std::vector<MetricSummary> metrics;
  /// Secondary fields, e.g. micro F1 pooled over all folds' predictions.
  std::map<std::string, double> pooled;
  std::vector<std::string> warnings;

  const MetricSummary& metric(const std::string& name) const;
};

std::string format_eval_report(const EvalReport& report);
EvalReport parse_eval_report(const std::string& text);

/// Tab-separated `backbone, pretrain_data, <metric means...>` in report order,
/// values printed with three decimals as in published result tables.
std::string eval_table_header(const EvalReport& report);
std::string eval_table_row(const EvalReport& report, const std::string& backbone, const std::string& pretrain_tag);

// ---- checkpoint selection --------------------------------------------------

struct CheckpointEntry {
  std::int64_t step = 0;
  double ssl_loss = 0.0;
  double downstream_metric = 0.0;
};

struct CheckpointSelection {
  std::int64_t best_step = 0;
  double best_metric = 0.0;
  std::int64_t loss_argmin_step = 0;
  double min_loss = 0.0;
  std::vector<std::string> warnings;
};

/// Argmax of the downstream metric and argmin of the SSL loss, earliest step
/// on ties. Rows with a NaN metric are skipped with a warning.
CheckpointSelection select_checkpoint(std::span<const CheckpointEntry> series);

/// `step,ssl_loss,downstream_metric` per line; a non-numeric first line is a header.
std::vector<CheckpointEntry> read_checkpoint_series(const std::filesystem::path& source);

}  // namespace curate
