#pragma once

// Frozen-feature heads: multinomial linear probes for image classification
// and per-patch logistic heads for binary segmentation.

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "curate/embedding_store.hpp"
#include "curate/metrics.hpp"

namespace curate {

enum class AssemblyMode {
  kClsLast,         // final-layer CLS token, one row per image
  kBoostedConcat4,  // per patch: last four layers concatenated, deepest last
  kPatchGrid,       // per patch: final-layer token, row-major over the grid
};

const char* to_string(AssemblyMode mode);
AssemblyMode assembly_mode_from_string(const std::string& name);

struct FeatureMatrix {
  RowMatrixXd values;
  AssemblyMode mode = AssemblyMode::kClsLast;
  /// token width of the encoder layer(s) the features came from
  std::size_t layer_dim = 0;

  std::size_t rows() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(values.cols()); }
};

FeatureMatrix assemble_features(std::span<const LayerTokenSet> tokens, AssemblyMode mode);

/// Embedding rows used directly as CLS features.
FeatureMatrix features_from_embeddings(const EmbeddingMatrix& matrix);

struct ProbeHyper {
  double l2 = 1e-4;
  double learning_rate = 1.0;
  int epochs = 300;
  std::uint64_t seed = 0;
  /// weight each sample by n / (C * n_class)
  bool class_balanced = false;
};

struct ProbeModel {
  Eigen::MatrixXd weights;  // C x d
  Eigen::VectorXd bias;     // C
  std::size_t classes = 0;
  ProbeHyper hyper;
  /// full-batch objective after each accepted step; entry 0 is the initial loss
  std::vector<double> training_log;

  std::size_t dim() const { return static_cast<std::size_t>(weights.cols()); }
};

struct SoftmaxObjective {
  double loss = 0.0;
  Eigen::MatrixXd grad_weights;
  Eigen::VectorXd grad_bias;
};

/// Mean (optionally sample-weighted) softmax cross-entropy plus l2/2 |W|^2,
/// with analytic gradients. The bias is not regularised.
SoftmaxObjective softmax_objective(const Eigen::MatrixXd& weights, const Eigen::VectorXd& bias,
                                   const RowMatrixXd& features, std::span<const std::uint32_t> labels, double l2,
                                   std::span<const double> sample_weights = {});

/// Full-batch gradient descent from zero, halving the step whenever it would
/// raise the objective (the halved rate is kept for later epochs).
/// `num_classes` = 0 infers C from the largest label.
ProbeModel train_linear_probe(const FeatureMatrix& features, std::span<const std::uint32_t> labels,
                              const ProbeHyper& hyper, std::size_t num_classes = 0);

/// softmax(W x + b) per row.
RowMatrixXd predict_proba(const ProbeModel& model, const FeatureMatrix& features);

/// Row-wise argmax, lowest class index on ties.
std::vector<std::uint32_t> argmax_rows(const RowMatrixXd& scores);

struct SweepResult {
  ProbeModel best;
  std::vector<double> l2_values;
  std::vector<double> scores;
};

/// Trains one probe per l2 value (in parallel) and keeps the one whose
/// validation score is highest (first on ties). `score` receives the
/// validation probabilities.
SweepResult sweep_l2(const FeatureMatrix& train, std::span<const std::uint32_t> train_labels,
                     const FeatureMatrix& val, std::span<const std::uint32_t> val_labels,
                     std::span<const double> l2_values, const ProbeHyper& base, std::size_t num_classes,
                     const std::function<double(std::span<const std::uint32_t>, const RowMatrixXd&)>& score);

/// log-spaced 1e-5 .. 1e-1
std::vector<double> default_l2_grid();

// ---- segmentation head -----------------------------------------------------

struct SegHead {
  Eigen::VectorXd weights;
  double bias = 0.0;
  double threshold = 0.5;
  AssemblyMode mode = AssemblyMode::kPatchGrid;
  ProbeHyper hyper;
  std::vector<double> training_log;
  std::vector<std::string> warnings;

  std::size_t parameter_count() const { return static_cast<std::size_t>(weights.size()) + 1; }
};

struct LogisticObjective {
  double loss = 0.0;
  Eigen::VectorXd grad_weights;
  double grad_bias = 0.0;
};

LogisticObjective logistic_objective(const Eigen::VectorXd& weights, double bias, const RowMatrixXd& features,
                                     std::span<const std::uint8_t> labels, double l2);

/// Binary logistic regression over patch rows with the probe optimiser.
/// Single-class labels give a prior-only head (zero weights) and a warning.
SegHead train_seg_head(const FeatureMatrix& patch_features, std::span<const std::uint8_t> patch_labels,
                       const ProbeHyper& hyper);

/// Per-patch logits on the token grid (grid_h x grid_w).
Eigen::MatrixXd patch_logits(const SegHead& head, const LayerTokenSet& tokens);

/// Bilinear resize with half-pixel centres and edge clamping.
Eigen::MatrixXd upsample_bilinear(const Eigen::MatrixXd& grid, int out_h, int out_w);

/// Logits upsampled to out_h x out_w, then thresholded in probability space.
BinaryMask predict_mask(const SegHead& head, const LayerTokenSet& tokens, int out_h, int out_w);

// ---- persistence -----------------------------------------------------------
// <dir>/weights.emb1 holds one f32 row per class: weights followed by bias.
// <dir>/model.json records hyperparameters, seed and the training log tail.

void write_probe_model(const ProbeModel& model, const std::filesystem::path& directory);
ProbeModel read_probe_model(const std::filesystem::path& directory);
void write_seg_head(const SegHead& head, const std::filesystem::path& directory);
SegHead read_seg_head(const std::filesystem::path& directory);

}  // namespace curate
