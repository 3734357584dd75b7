#include "curate/probe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "curate/errors.hpp"
#include "curate/parallel.hpp"

namespace curate {
namespace {

using Objective = std::function<std::pair<double, Eigen::VectorXd>(const Eigen::VectorXd&)>;

struct Descent {
  Eigen::VectorXd theta;
  std::vector<double> log;
};

constexpr int kMaxHalvings = 60;

// Full-batch descent with step halving. A step is accepted only if it does
// not raise the objective, so the log is non-increasing.
Descent gradient_descent(Eigen::VectorXd theta, double rate, int epochs, const Objective& f) {
  if (!(rate > 0.0)) throw InvalidArgument("learning rate must be positive");
  if (epochs < 0) throw InvalidArgument("epochs must be non-negative");
  auto [loss, grad] = f(theta);
  if (!std::isfinite(loss)) throw TrainingError("initial loss is not finite; check feature scale");
  const double initial = loss;
  Descent out;
  out.log.push_back(loss);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    if (grad.squaredNorm() == 0.0) {
      out.log.push_back(loss);
      continue;
    }
    bool accepted = false;
    bool diverging = true;
    for (int h = 0; h < kMaxHalvings; ++h) {
      Eigen::VectorXd candidate = theta - rate * grad;
      auto [cand_loss, cand_grad] = f(candidate);
      if (std::isfinite(cand_loss) && cand_loss <= initial * 10.0) diverging = false;
      if (std::isfinite(cand_loss) && cand_loss <= loss) {
        theta = std::move(candidate);
        loss = cand_loss;
        grad = std::move(cand_grad);
        accepted = true;
        break;
      }
      rate *= 0.5;
    }
    if (!accepted) {
      if (diverging) {
        throw TrainingError("training diverged (loss above 10x initial " + std::to_string(initial) +
                            "); lower the learning rate");
      }
      break;  // no descending step at machine precision: converged
    }
    out.log.push_back(loss);
  }
  out.theta = std::move(theta);
  return out;
}

void check_features(const FeatureMatrix& features) {
  if (!features.values.allFinite()) {
    for (Eigen::Index r = 0; r < features.values.rows(); ++r) {
      if (!features.values.row(r).allFinite()) throw ValidationError("non-finite feature at row " + std::to_string(r));
    }
  }
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

RowMatrixXd logits_of(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias, const RowMatrixXd& x) {
  RowMatrixXd z = x * weights.transpose();
  z.rowwise() += bias.transpose();
  return z;
}

void write_weight_rows(const Eigen::MatrixXd& rows, const std::string& tag, const std::filesystem::path& path) {
  EmbeddingMatrix m;
  m.dim = static_cast<std::uint32_t>(rows.cols());
  m.values = rows.cast<float>();
  for (Eigen::Index r = 0; r < rows.rows(); ++r) m.frames.push_back({tag, static_cast<std::uint64_t>(r), 0});
  write_embeddings(m, path);
}

nlohmann::ordered_json hyper_json(const ProbeHyper& h) {
  return {{"l2", h.l2},
          {"learning_rate", h.learning_rate},
          {"epochs", h.epochs},
          {"seed", h.seed},
          {"class_balanced", h.class_balanced}};
}

ProbeHyper hyper_from_json(const nlohmann::json& j) {
  ProbeHyper h;
  h.l2 = j.at("l2").get<double>();
  h.learning_rate = j.at("learning_rate").get<double>();
  h.epochs = j.at("epochs").get<int>();
  h.seed = j.at("seed").get<std::uint64_t>();
  h.class_balanced = j.at("class_balanced").get<bool>();
  return h;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw StorageError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace

const char* to_string(AssemblyMode mode) {
  switch (mode) {
    case AssemblyMode::kClsLast:
      return "cls_last";
    case AssemblyMode::kBoostedConcat4:
      return "boosted_concat4";
    case AssemblyMode::kPatchGrid:
      return "patch_grid";
  }
  return "?";
}

AssemblyMode assembly_mode_from_string(const std::string& name) {
  if (name == "cls_last") return AssemblyMode::kClsLast;
  if (name == "boosted_concat4") return AssemblyMode::kBoostedConcat4;
  if (name == "patch_grid") return AssemblyMode::kPatchGrid;
  throw InvalidArgument("unknown assembly mode '" + name + "'");
}

FeatureMatrix assemble_features(std::span<const LayerTokenSet> tokens, AssemblyMode mode) {
  FeatureMatrix out;
  out.mode = mode;
  if (tokens.empty()) return out;
  const std::size_t need = mode == AssemblyMode::kBoostedConcat4 ? 4 : 1;
  for (const auto& t : tokens) t.validate(need);
  const auto d = static_cast<Eigen::Index>(tokens.front().dim());
  out.layer_dim = static_cast<std::size_t>(d);
  for (const auto& t : tokens) {
    if (t.dim() != d) throw InvalidArgument("token sets disagree on token width");
  }

  if (mode == AssemblyMode::kClsLast) {
    out.values.resize(static_cast<Eigen::Index>(tokens.size()), d);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      out.values.row(static_cast<Eigen::Index>(i)) = tokens[i].layers.back().cls.cast<double>().transpose();
    }
    return out;
  }

  Eigen::Index rows = 0;
  for (const auto& t : tokens) rows += t.grid_h * t.grid_w;
  const Eigen::Index width = mode == AssemblyMode::kBoostedConcat4 ? 4 * d : d;
  out.values.resize(rows, width);
  Eigen::Index r = 0;
  for (const auto& t : tokens) {
    const Eigen::Index patches = t.grid_h * t.grid_w;
    if (mode == AssemblyMode::kPatchGrid) {
      out.values.middleRows(r, patches) = t.layers.back().patches.cast<double>();
    } else {
      const std::size_t first = t.layers.size() - 4;
      for (std::size_t l = 0; l < 4; ++l) {
        out.values.block(r, static_cast<Eigen::Index>(l) * d, patches, d) = t.layers[first + l].patches.cast<double>();
      }
    }
    r += patches;
  }
  return out;
}

FeatureMatrix features_from_embeddings(const EmbeddingMatrix& matrix) {
  FeatureMatrix out;
  out.mode = AssemblyMode::kClsLast;
  out.layer_dim = matrix.dim;
  out.values = matrix.values.cast<double>();
  return out;
}

SoftmaxObjective softmax_objective(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias,
                                   const RowMatrixXd& features, std::span<const std::uint32_t> labels, double l2,
                                   std::span<const double> sample_weights) {
  const Eigen::Index n = features.rows();
  const Eigen::Index c = weights.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw InvalidArgument("one label per feature row required");
  if (!sample_weights.empty() && static_cast<Eigen::Index>(sample_weights.size()) != n) {
    throw InvalidArgument("one sample weight per row required");
  }
  RowMatrixXd z = logits_of(weights, bias, features);
  double total_w = 0.0;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = sample_weights.empty() ? 1.0 : sample_weights[static_cast<std::size_t>(i)];
    const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
    if (y >= c) throw InvalidArgument("label out of range at row " + std::to_string(i));
    auto row = z.row(i);
    const double m = row.maxCoeff();
    const double true_logit = row(y);
    row.array() = (row.array() - m).exp();
    const double s = row.sum();
    loss += w * (std::log(s) + m - true_logit);
    // row becomes w * (softmax - onehot), the per-sample logit gradient
    row /= s;
    row(y) -= 1.0;
    row *= w;
    total_w += w;
  }
  SoftmaxObjective out;
  out.loss = loss / total_w + 0.5 * l2 * weights.squaredNorm();
  out.grad_weights = (z.transpose() * features) / total_w + l2 * weights;
  out.grad_bias = z.colwise().sum().transpose() / total_w;
  return out;
}

ProbeModel train_linear_probe(const FeatureMatrix& features, std::span<const std::uint32_t> labels,
                              const ProbeHyper& hyper, std::size_t num_classes) {
  check_features(features);
  if (labels.size() != features.rows()) throw InvalidArgument("one label per feature row required");
  if (labels.empty()) throw InvalidArgument("cannot train a probe on zero rows");
  const std::uint32_t max_label = *std::max_element(labels.begin(), labels.end());
  if (num_classes == 0) num_classes = max_label + 1;
  if (max_label >= num_classes) throw InvalidArgument("label " + std::to_string(max_label) + " out of range");
  if (labels.size() < num_classes) throw InvalidArgument("need at least one row per class (n >= C)");
  if (hyper.l2 < 0.0) throw InvalidArgument("l2 must be non-negative");

  const auto c = static_cast<Eigen::Index>(num_classes);
  const auto d = static_cast<Eigen::Index>(features.dim());
  std::vector<double> sample_weights;
  if (hyper.class_balanced) {
    std::vector<double> counts(num_classes, 0.0);
    for (auto y : labels) counts[y] += 1.0;
    for (auto y : labels) {
      sample_weights.push_back(static_cast<double>(labels.size()) / (static_cast<double>(num_classes) * counts[y]));
    }
  }

  const Objective f = [&](const Eigen::VectorXd& theta) {
    const Eigen::Map<const Eigen::MatrixXd> w(theta.data(), c, d);
    const Eigen::Map<const Eigen::VectorXd> b(theta.data() + c * d, c);
    const auto obj = softmax_objective(w, b, features.values, labels, hyper.l2, sample_weights);
    Eigen::VectorXd grad(c * d + c);
    grad.head(c * d) = Eigen::Map<const Eigen::VectorXd>(obj.grad_weights.data(), c * d);
    grad.tail(c) = obj.grad_bias;
    return std::make_pair(obj.loss, grad);
  };
  auto result = gradient_descent(Eigen::VectorXd::Zero(c * d + c), hyper.learning_rate, hyper.epochs, f);

  ProbeModel model;
  model.classes = num_classes;
  model.hyper = hyper;
  model.weights = Eigen::Map<const Eigen::MatrixXd>(result.theta.data(), c, d);
  model.bias = result.theta.tail(c);
  model.training_log = std::move(result.log);
  return model;
}

RowMatrixXd predict_proba(const ProbeModel& model, const FeatureMatrix& features) {
  if (features.dim() != model.dim()) {
    throw InvalidArgument("feature dim " + std::to_string(features.dim()) + " does not match model dim " +
                          std::to_string(model.dim()));
  }
  RowMatrixXd z = logits_of(model.weights, model.bias, features.values);
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    auto row = z.row(i);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  return z;
}

std::vector<std::uint32_t> argmax_rows(const RowMatrixXd& scores) {
  std::vector<std::uint32_t> out(static_cast<std::size_t>(scores.rows()));
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < scores.cols(); ++j) {
      if (scores(i, j) > scores(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(best);
  }
  return out;
}

std::vector<double> default_l2_grid() { return {1e-5, 1e-4, 1e-3, 1e-2, 1e-1}; }

SweepResult sweep_l2(const FeatureMatrix& train, std::span<const std::uint32_t> train_labels,
                     const FeatureMatrix& val, std::span<const std::uint32_t> val_labels,
                     std::span<const double> l2_values, const ProbeHyper& base, std::size_t num_classes,
                     const std::function<double(std::span<const std::uint32_t>, const RowMatrixXd&)>& score) {
  if (l2_values.empty()) throw InvalidArgument("l2 sweep needs at least one value");
  std::vector<ProbeModel> models(l2_values.size());
  std::vector<double> scores(l2_values.size());
  parallel_chunks(l2_values.size(), 1, [&](std::size_t i, std::size_t, std::size_t) {
    ProbeHyper h = base;
    h.l2 = l2_values[i];
    models[i] = train_linear_probe(train, train_labels, h, num_classes);
    scores[i] = score(val_labels, predict_proba(models[i], val));
  });
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return {std::move(models[best]), {l2_values.begin(), l2_values.end()}, std::move(scores)};
}

LogisticObjective logistic_objective(const Eigen::VectorXd& weights, double bias, const RowMatrixXd& features,
                                     std::span<const std::uint8_t> labels, double l2) {
  const Eigen::Index n = features.rows();
  if (static_cast<Eigen::Index>(labels.size()) != n) throw InvalidArgument("one label per patch row required");
  const Eigen::VectorXd z = (features * weights).array() + bias;
  Eigen::VectorXd residual(n);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double y = labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    loss += softplus(z(i)) - y * z(i);
    residual(i) = sigmoid(z(i)) - y;
  }
  const double nd = static_cast<double>(n);
  LogisticObjective out;
  out.loss = loss / nd + 0.5 * l2 * weights.squaredNorm();
  out.grad_weights = features.transpose() * residual / nd + l2 * weights;
  out.grad_bias = residual.sum() / nd;
  return out;
}

SegHead train_seg_head(const FeatureMatrix& patch_features, std::span<const std::uint8_t> patch_labels,
                       const ProbeHyper& hyper) {
  check_features(patch_features);
  if (patch_labels.size() != patch_features.rows()) throw InvalidArgument("one label per patch row required");
  if (patch_labels.empty()) throw InvalidArgument("cannot train a head on zero patches");
  const auto d = static_cast<Eigen::Index>(patch_features.dim());
  SegHead head;
  head.mode = patch_features.mode;
  head.hyper = hyper;
  head.weights = Eigen::VectorXd::Zero(d);

  std::size_t positives = 0;
  for (auto y : patch_labels) positives += y ? 1 : 0;
  if (positives == 0 || positives == patch_labels.size()) {
    const double p = std::clamp(static_cast<double>(positives) / static_cast<double>(patch_labels.size()), 1e-6, 1 - 1e-6);
    head.bias = std::log(p / (1.0 - p));
    head.warnings.push_back(positives == 0 ? "all patches are background; prior-only head"
                                           : "all patches are foreground; prior-only head");
    return head;
  }

  const Objective f = [&](const Eigen::VectorXd& theta) {
    const auto obj = logistic_objective(theta.head(d), theta(d), patch_features.values, patch_labels, hyper.l2);
    Eigen::VectorXd grad(d + 1);
    grad.head(d) = obj.grad_weights;
    grad(d) = obj.grad_bias;
    return std::make_pair(obj.loss, grad);
  };
  auto result = gradient_descent(Eigen::VectorXd::Zero(d + 1), hyper.learning_rate, hyper.epochs, f);
  head.weights = result.theta.head(d);
  head.bias = result.theta(d);
  head.training_log = std::move(result.log);
  return head;
}

Eigen::MatrixXd patch_logits(const SegHead& head, const LayerTokenSet& tokens) {
  if (head.mode == AssemblyMode::kClsLast) throw InvalidArgument("segmentation head needs per-patch features");
  const auto features = assemble_features(std::span(&tokens, 1), head.mode);
  if (features.dim() != static_cast<std::size_t>(head.weights.size())) {
    throw InvalidArgument("token features have dim " + std::to_string(features.dim()) + ", head expects " +
                          std::to_string(head.weights.size()));
  }
  const Eigen::VectorXd z = (features.values * head.weights).array() + head.bias;
  Eigen::MatrixXd grid(tokens.grid_h, tokens.grid_w);
  for (int r = 0; r < tokens.grid_h; ++r) {
    for (int c = 0; c < tokens.grid_w; ++c) grid(r, c) = z(r * tokens.grid_w + c);
  }
  return grid;
}

Eigen::MatrixXd upsample_bilinear(const Eigen::MatrixXd& grid, int out_h, int out_w) {
  const auto in_h = static_cast<int>(grid.rows());
  const auto in_w = static_cast<int>(grid.cols());
  if (in_h == 0 || in_w == 0) throw InvalidArgument("cannot resize an empty grid");
  if (out_h < in_h || out_w < in_w) throw InvalidArgument("output size smaller than the patch grid");
  auto source = [](int dst, int in, int out) {
    const double s = (dst + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in - 1));
  };
  Eigen::MatrixXd out(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const double sy = source(y, in_h, out_h);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, in_h - 1);
    const double wy = sy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double sx = source(x, in_w, out_w);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, in_w - 1);
      const double wx = sx - x0;
      out(y, x) = (1 - wy) * ((1 - wx) * grid(y0, x0) + wx * grid(y0, x1)) +
                  wy * ((1 - wx) * grid(y1, x0) + wx * grid(y1, x1));
    }
  }
  return out;
}

BinaryMask predict_mask(const SegHead& head, const LayerTokenSet& tokens, int out_h, int out_w) {
  if (!(head.threshold > 0.0 && head.threshold < 1.0)) throw InvalidArgument("threshold must be in (0, 1)");
  const auto logits = upsample_bilinear(patch_logits(head, tokens), out_h, out_w);
  const double cut = std::log(head.threshold / (1.0 - head.threshold));
  return (logits.array() > cut).cast<std::uint8_t>();
}

void write_probe_model(const ProbeModel& model, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  Eigen::MatrixXd rows(model.weights.rows(), model.weights.cols() + 1);
  rows << model.weights, model.bias;
  write_weight_rows(rows, "class", directory / "weights.emb1");
  nlohmann::ordered_json j;
  j["kind"] = "linear_probe";
  j["classes"] = model.classes;
  j["dim"] = model.dim();
  j["hyper"] = hyper_json(model.hyper);
  j["final_loss"] = model.training_log.empty() ? 0.0 : model.training_log.back();
  j["training_log"] = model.training_log;
  write_text_atomic(directory / "model.json", j.dump(2) + "\n");
}

ProbeModel read_probe_model(const std::filesystem::path& directory) {
  const auto j = read_json(directory / "model.json");
  const Eigen::MatrixXd rows = read_embeddings(directory / "weights.emb1").values.cast<double>();
  ProbeModel model;
  model.classes = j.at("classes").get<std::size_t>();
  const auto d = j.at("dim").get<Eigen::Index>();
  if (rows.rows() != static_cast<Eigen::Index>(model.classes) || rows.cols() != d + 1) {
    throw FormatError(directory.string() + ": weights shape does not match model.json");
  }
  model.weights = rows.leftCols(d);
  model.bias = rows.col(d);
  model.hyper = hyper_from_json(j.at("hyper"));
  model.training_log = j.at("training_log").get<std::vector<double>>();
  return model;
}

void write_seg_head(const SegHead& head, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  Eigen::MatrixXd row(1, head.weights.size() + 1);
  row << head.weights.transpose(), head.bias;
  write_weight_rows(row, "seghead", directory / "weights.emb1");
  nlohmann::ordered_json j;
  j["kind"] = "seg_head";
  j["dim"] = head.weights.size();
  j["parameters"] = head.parameter_count();
  j["threshold"] = head.threshold;
  j["mode"] = to_string(head.mode);
  j["upsample"] = "bilinear";
  j["hyper"] = hyper_json(head.hyper);
  j["training_log"] = head.training_log;
  j["warnings"] = head.warnings;
  write_text_atomic(directory / "model.json", j.dump(2) + "\n");
}

SegHead read_seg_head(const std::filesystem::path& directory) {
  const auto j = read_json(directory / "model.json");
  const Eigen::MatrixXd row = read_embeddings(directory / "weights.emb1").values.cast<double>();
  const auto d = j.at("dim").get<Eigen::Index>();
  if (row.rows() != 1 || row.cols() != d + 1) throw FormatError(directory.string() + ": weights shape mismatch");
  SegHead head;
  head.weights = row.row(0).head(d).transpose();
  head.bias = row(0, d);
  head.threshold = j.at("threshold").get<double>();
  head.mode = assembly_mode_from_string(j.at("mode").get<std::string>());
  head.hyper = hyper_from_json(j.at("hyper"));
  head.training_log = j.at("training_log").get<std::vector<double>>();
  head.warnings = j.value("warnings", std::vector<std::string>{});
  return head;
}

}  // namespace curate
