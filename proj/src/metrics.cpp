#include "curate/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "curate/errors.hpp"

namespace curate {

ConfusionMatrix confusion(std::span<const std::uint32_t> y_true, std::span<const std::uint32_t> y_pred,
                          std::size_t num_classes) {
  if (y_true.size() != y_pred.size()) {
    throw InvalidArgument("y_true has " + std::to_string(y_true.size()) + " items, y_pred " +
                          std::to_string(y_pred.size()));
  }
  if (num_classes == 0) throw InvalidArgument("num_classes must be positive");
  ConfusionMatrix cm;
  const auto c = static_cast<Eigen::Index>(num_classes);
  cm.counts.setZero(c, c);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (y_true[i] >= num_classes || y_pred[i] >= num_classes) {
      throw InvalidArgument("label out of range at index " + std::to_string(i));
    }
    ++cm.counts(y_true[i], y_pred[i]);
  }
  return cm;
}

F1Scores f1_scores(const ConfusionMatrix& cm) {
  if (cm.classes() == 0 || cm.total() == 0) throw ValidationError("f1_scores on an empty confusion matrix");
  F1Scores out;
  const auto c = cm.counts.rows();
  double macro_sum = 0.0;
  std::size_t macro_n = 0;
  std::int64_t tp_all = 0, fp_all = 0, fn_all = 0;
  for (Eigen::Index k = 0; k < c; ++k) {
    const std::int64_t tp = cm.counts(k, k);
    const std::int64_t fp = cm.counts.col(k).sum() - tp;
    const std::int64_t fn = cm.counts.row(k).sum() - tp;
    tp_all += tp;
    fp_all += fp;
    fn_all += fn;
    const bool counted = tp + fp + fn > 0;
    double f1 = 0.0;
    if (tp > 0) {
      const double p = static_cast<double>(tp) / static_cast<double>(tp + fp);
      const double r = static_cast<double>(tp) / static_cast<double>(tp + fn);
      f1 = 2.0 * p * r / (p + r);
    }
    out.per_class_f1.push_back(f1);
    out.counted.push_back(counted);
    if (counted) {
      macro_sum += f1;
      ++macro_n;
    }
  }
  out.macro_f1 = macro_sum / static_cast<double>(macro_n);
  out.micro_f1 = static_cast<double>(tp_all) / (static_cast<double>(tp_all) + 0.5 * static_cast<double>(fp_all + fn_all));
  return out;
}

double binary_auroc(std::span<const double> scores, std::span<const std::uint8_t> positive) {
  if (scores.size() != positive.size()) throw InvalidArgument("scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw ValidationError("non-finite score at index " + std::to_string(i));
  }
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (positive[order[t]]) {
        rank_sum += midrank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("AUROC needs both positives and negatives");
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

AurocResult auroc_ovr_macro(std::span<const std::uint32_t> y_true, const RowMatrixXd& scores) {
  if (static_cast<std::size_t>(scores.rows()) != y_true.size()) {
    throw InvalidArgument("score matrix has " + std::to_string(scores.rows()) + " rows for " +
                          std::to_string(y_true.size()) + " labels");
  }
  if (!scores.allFinite()) throw ValidationError("non-finite score");
  const auto c = static_cast<std::size_t>(scores.cols());
  AurocResult out;
  out.per_class.assign(c, std::numeric_limits<double>::quiet_NaN());
  std::vector<double> column(y_true.size());
  std::vector<std::uint8_t> positive(y_true.size());
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < y_true.size(); ++i) {
      if (y_true[i] >= c) throw InvalidArgument("label out of range at index " + std::to_string(i));
      column[i] = scores(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
      positive[i] = y_true[i] == k ? 1 : 0;
      n_pos += positive[i];
    }
    if (n_pos == 0 || n_pos == y_true.size()) {
      out.warnings.push_back("class " + std::to_string(k) + (n_pos == 0 ? " absent" : " is the only class") +
                             "; skipped in macro AUROC");
      continue;
    }
    out.per_class[k] = binary_auroc(column, positive);
    sum += out.per_class[k];
    ++used;
  }
  if (used == 0) throw ValidationError("AUROC undefined: fewer than two classes present");
  out.macro = sum / static_cast<double>(used);
  return out;
}

SegScores image_seg_scores(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw InvalidArgument("mask dimensions differ");
  const double p = static_cast<double>((pred != 0).count());
  const double g = static_cast<double>((gt != 0).count());
  const double inter = static_cast<double>(((pred != 0) && (gt != 0)).count());
  if (p == 0.0 && g == 0.0) return {1.0, 1.0, 1.0, 1.0};
  SegScores s;
  s.dice = 2.0 * inter / (p + g);
  s.iou = inter / (p + g - inter);
  s.precision = p > 0.0 ? inter / p : 0.0;
  s.recall = g > 0.0 ? inter / g : 0.0;
  return s;
}

SegScores seg_metrics(std::span<const BinaryMask> pred_masks, std::span<const BinaryMask> gt_masks) {
  if (pred_masks.size() != gt_masks.size()) throw InvalidArgument("prediction and ground-truth counts differ");
  if (pred_masks.empty()) throw InvalidArgument("seg_metrics needs at least one image");
  SegScores mean;
  for (std::size_t i = 0; i < pred_masks.size(); ++i) {
    if (pred_masks[i].rows() != gt_masks[i].rows() || pred_masks[i].cols() != gt_masks[i].cols()) {
      throw InvalidArgument("mask dimensions differ at image " + std::to_string(i));
    }
    const auto s = image_seg_scores(pred_masks[i], gt_masks[i]);
    mean.dice += s.dice;
    mean.iou += s.iou;
    mean.precision += s.precision;
    mean.recall += s.recall;
  }
  const double n = static_cast<double>(pred_masks.size());
  mean.dice /= n;
  mean.iou /= n;
  mean.precision /= n;
  mean.recall /= n;
  return mean;
}

MetricSummary aggregate_cv(std::string name, std::span<const double> per_fold) {
  if (per_fold.empty()) throw InvalidArgument("aggregate_cv needs at least one fold");
  MetricSummary s;
  s.name = std::move(name);
  s.per_fold.assign(per_fold.begin(), per_fold.end());
  const double n = static_cast<double>(per_fold.size());
  s.mean = std::accumulate(per_fold.begin(), per_fold.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : per_fold) ss += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(ss / n);
  return s;
}

const MetricSummary& EvalReport::metric(const std::string& name) const {
  for (const auto& m : metrics) {
    if (m.name == name) return m;
  }
  throw InvalidArgument("report has no metric '" + name + "'");
}

std::string format_eval_report(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["task"] = report.task;
  j["protocol"] = {{"split", report.split_name}, {"seed", report.seed}};
  j["metrics"] = nlohmann::ordered_json::array();
  for (const auto& m : report.metrics) {
    j["metrics"].push_back({{"name", m.name}, {"per_fold", m.per_fold}, {"mean", m.mean}, {"stddev", m.stddev}});
  }
  j["pooled"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : report.pooled) j["pooled"][k] = v;
  j["warnings"] = report.warnings;
  return j.dump(2) + "\n";
}

EvalReport parse_eval_report(const std::string& text) {
  EvalReport r;
  try {
    const auto j = nlohmann::json::parse(text);
    r.task = j.at("task").get<std::string>();
    r.split_name = j.at("protocol").at("split").get<std::string>();
    r.seed = j.at("protocol").at("seed").get<std::uint64_t>();
    for (const auto& m : j.at("metrics")) {
      r.metrics.push_back({m.at("name").get<std::string>(), m.at("per_fold").get<std::vector<double>>(),
                           m.at("mean").get<double>(), m.at("stddev").get<double>()});
    }
    for (const auto& [k, v] : j.at("pooled").items()) r.pooled[k] = v.get<double>();
    r.warnings = j.value("warnings", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("eval report: ") + e.what());
  }
  return r;
}

std::string eval_table_header(const EvalReport& report) {
  std::string out = "backbone\tpretrain_data";
  for (const auto& m : report.metrics) out += "\t" + m.name;
  return out;
}

std::string eval_table_row(const EvalReport& report, const std::string& backbone, const std::string& pretrain_tag) {
  std::ostringstream out;
  out << backbone << '\t' << pretrain_tag << std::fixed << std::setprecision(3);
  for (const auto& m : report.metrics) out << '\t' << m.mean;
  return out.str();
}

CheckpointSelection select_checkpoint(std::span<const CheckpointEntry> series) {
  if (series.empty()) throw InvalidArgument("checkpoint series is empty");
  for (std::size_t i = 1; i < series.size(); ++i) {
    if (series[i].step <= series[i - 1].step) {
      throw InvalidArgument("checkpoint steps must be strictly increasing (row " + std::to_string(i) + ")");
    }
  }
  CheckpointSelection sel;
  bool have_metric = false;
  bool have_loss = false;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& e = series[i];
    if (std::isnan(e.downstream_metric)) {
      sel.warnings.push_back("step " + std::to_string(e.step) + ": NaN downstream metric skipped");
    } else if (!have_metric || e.downstream_metric > sel.best_metric) {
      sel.best_metric = e.downstream_metric;
      sel.best_step = e.step;
      have_metric = true;
    }
    if (!std::isnan(e.ssl_loss) && (!have_loss || e.ssl_loss < sel.min_loss)) {
      sel.min_loss = e.ssl_loss;
      sel.loss_argmin_step = e.step;
      have_loss = true;
    }
  }
  if (!have_metric) throw ValidationError("every downstream metric in the series is NaN");
  if (!have_loss) sel.warnings.push_back("no finite ssl_loss; loss_argmin_step undefined");
  return sel;
}

std::vector<CheckpointEntry> read_checkpoint_series(const std::filesystem::path& source) {
  std::ifstream in(source);
  if (!in) throw StorageError("cannot open checkpoint series: " + source.string());
  std::vector<CheckpointEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::replace(line.begin(), line.end(), '\t', ',');
    std::stringstream ss(line);
    std::string a, b, c;
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    std::getline(ss, c, ',');
    try {
      out.push_back({std::stoll(a), std::stod(b), std::stod(c)});
    } catch (const std::exception&) {
      if (out.empty() && lineno == 1) continue;  // header
      throw FormatError(source.string() + ":" + std::to_string(lineno) + ": expected step,ssl_loss,metric");
    }
  }
  return out;
}

}  // namespace curate
