#pragma once

// Hand-rolled generators shared by the unit and acceptance tests.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <algorithm>
#include <deque>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <unistd.h>

#include "curate/dedup.hpp"
#include "curate/embedding_store.hpp"
#include "curate/metrics.hpp"
#include "curate/probe.hpp"
#include "curate/random.hpp"

namespace curate::testing {

inline double gaussian(Rng& rng) {
  const double u1 = 1.0 - rng.uniform();
  const double u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

inline RowMatrixXd gaussian_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  RowMatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * gaussian(rng);
  return m;
}

/// Random matrix with `videos` distinct ids and increasing frame numbers per video.
inline EmbeddingMatrix random_embeddings(Rng& rng, std::size_t rows, std::uint32_t dim, std::size_t videos = 3) {
  EmbeddingMatrix m;
  m.dim = dim;
  m.values.resize(static_cast<Eigen::Index>(rows), dim);
  std::vector<std::uint64_t> next(videos, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t v = videos == 0 ? 0 : static_cast<std::size_t>(rng.below(videos));
    next[v] += 1 + rng.below(4);
    std::string id = "v" + std::to_string(v);
    if (rng.below(4) == 0) id += "-\xc3\xa9t\xc3\xa9";  // multi-byte UTF-8
    m.frames.push_back({id, next[v], next[v] * 33});
    for (std::uint32_t c = 0; c < dim; ++c) m.values(static_cast<Eigen::Index>(r), c) = static_cast<float>(gaussian(rng));
  }
  return m;
}

/// Every pair with cosine >= threshold by an explicit double loop in long double.
inline std::vector<SimilarityPair> brute_force_pairs(const EmbeddingMatrix& m, double threshold, bool per_video) {
  std::vector<SimilarityPair> out;
  const auto n = static_cast<Eigen::Index>(m.rows());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      if (per_video && m.frames[static_cast<std::size_t>(i)].video_id != m.frames[static_cast<std::size_t>(j)].video_id) {
        continue;
      }
      long double dot = 0, ni = 0, nj = 0;
      for (Eigen::Index c = 0; c < m.values.cols(); ++c) {
        const long double a = m.values(i, c), b = m.values(j, c);
        dot += a * b;
        ni += a * a;
        nj += b * b;
      }
      const long double cos = dot / std::sqrt(ni * nj);
      if (cos >= threshold) out.emplace_back(static_cast<std::size_t>(i), static_cast<std::size_t>(j), static_cast<double>(cos));
    }
  }
  return out;
}

/// Connected components by breadth-first search, each sorted, ordered by smallest member.
/// Isolated nodes are left out.
inline std::vector<std::vector<std::size_t>> bfs_components(std::size_t n,
                                                            const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
  std::vector<std::vector<std::size_t>> adj(n);
  for (const auto& [a, b] : edges) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  std::vector<bool> seen(n, false);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; ++s) {
    if (seen[s] || adj[s].empty()) continue;
    std::vector<std::size_t> comp;
    std::deque<std::size_t> queue{s};
    seen[s] = true;
    while (!queue.empty()) {
      const auto u = queue.front();
      queue.pop_front();
      comp.push_back(u);
      for (auto v : adj[u]) {
        if (!seen[v]) {
          seen[v] = true;
          queue.push_back(v);
        }
      }
    }
    std::sort(comp.begin(), comp.end());
    out.push_back(std::move(comp));
  }
  return out;
}

/// Sum of squared distances to the member means of the given partition.
inline double partition_inertia(const RowMatrixXd& x, const std::vector<std::uint32_t>& assign, std::size_t k) {
  RowMatrixXd sums = RowMatrixXd::Zero(static_cast<Eigen::Index>(k), x.cols());
  std::vector<double> counts(k, 0.0);
  for (std::size_t i = 0; i < assign.size(); ++i) {
    sums.row(assign[i]) += x.row(static_cast<Eigen::Index>(i));
    counts[assign[i]] += 1.0;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < assign.size(); ++i) {
    const Eigen::RowVectorXd mean = sums.row(assign[i]) / counts[assign[i]];
    total += (x.row(static_cast<Eigen::Index>(i)) - mean).squaredNorm();
  }
  return total;
}

/// Global optimum of the 2-means objective by enumerating every split into two non-empty parts.
inline double exhaustive_two_means(const RowMatrixXd& x) {
  const auto n = static_cast<std::size_t>(x.rows());
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::uint32_t> assign(n);
  for (std::uint64_t mask = 1; mask + 1 < (std::uint64_t{1} << n); ++mask) {
    for (std::size_t i = 0; i < n; ++i) assign[i] = static_cast<std::uint32_t>((mask >> i) & 1u);
    best = std::min(best, partition_inertia(x, assign, 2));
  }
  return best;
}

/// Largest inertia decrease achievable by moving one point to another cluster
/// without emptying its own (0 if none), recomputing means from scratch.
inline double best_single_move_gain(const RowMatrixXd& x, std::vector<std::uint32_t> assign, std::size_t k) {
  std::vector<std::size_t> sizes(k, 0);
  for (auto a : assign) ++sizes[a];
  const double base = partition_inertia(x, assign, k);
  double gain = 0.0;
  for (std::size_t i = 0; i < assign.size(); ++i) {
    const auto a = assign[i];
    if (sizes[a] <= 1) continue;
    for (std::uint32_t b = 0; b < k; ++b) {
      if (b == a) continue;
      assign[i] = b;
      gain = std::max(gain, base - partition_inertia(x, assign, k));
      assign[i] = a;
    }
  }
  return gain;
}

/// Two blobs centred at (0,0) and (10,0) with spread 0.1; label = blob.
inline RowMatrixXd two_blobs(Rng& rng, std::size_t per_blob, std::vector<std::uint32_t>& truth) {
  RowMatrixXd x(static_cast<Eigen::Index>(2 * per_blob), 2);
  truth.clear();
  for (std::size_t i = 0; i < 2 * per_blob; ++i) {
    const std::uint32_t blob = i < per_blob ? 0u : 1u;
    x(static_cast<Eigen::Index>(i), 0) = 10.0 * blob + 0.1 * gaussian(rng);
    x(static_cast<Eigen::Index>(i), 1) = 0.1 * gaussian(rng);
    truth.push_back(blob);
  }
  return x;
}

/// True when `found` equals `truth` up to swapping the two labels.
inline bool same_two_partition(const std::vector<std::uint32_t>& found, const std::vector<std::uint32_t>& truth) {
  bool same = true, swapped = true;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    same = same && found[i] == truth[i];
    swapped = swapped && found[i] != truth[i];
  }
  return same || swapped;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::hash<std::string>{}(tag) ^ static_cast<std::uint64_t>(::getpid()));
    path_ = std::filesystem::temp_directory_path() / ("curate-" + tag + "-" + std::to_string(rng.next() % 1000000007));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// Central-difference check of the softmax objective on a random instance.
/// Returns |analytic - numeric| / max(|analytic|, |numeric|) over the full
/// parameter vector (weights then bias).
inline double softmax_gradient_error(Rng& rng, double h = 1e-5) {
  const Eigen::Index n = 5 + static_cast<Eigen::Index>(rng.below(20));
  const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng.below(6));
  const Eigen::Index c = 2 + static_cast<Eigen::Index>(rng.below(4));
  const RowMatrixXd x = gaussian_matrix(rng, n, d);
  std::vector<std::uint32_t> y(static_cast<std::size_t>(n));
  for (auto& v : y) v = static_cast<std::uint32_t>(rng.below(static_cast<std::uint64_t>(c)));
  std::vector<double> w;
  if (rng.below(2) == 0) {
    for (Eigen::Index i = 0; i < n; ++i) w.push_back(0.2 + rng.uniform());
  }
  const double l2 = rng.uniform() * 0.1;
  Eigen::MatrixXd weights(c, d);
  for (Eigen::Index i = 0; i < weights.size(); ++i) weights.data()[i] = gaussian(rng);
  Eigen::VectorXd bias(c);
  for (Eigen::Index i = 0; i < c; ++i) bias(i) = gaussian(rng);

  const auto obj = softmax_objective(weights, bias, x, y, l2, w);
  Eigen::VectorXd analytic(c * d + c), numeric(c * d + c);
  for (Eigen::Index i = 0; i < c * d; ++i) {
    Eigen::MatrixXd plus = weights, minus = weights;
    plus.data()[i] += h;
    minus.data()[i] -= h;
    numeric(i) = (softmax_objective(plus, bias, x, y, l2, w).loss - softmax_objective(minus, bias, x, y, l2, w).loss) /
                 (2 * h);
    analytic(i) = obj.grad_weights.data()[i];
  }
  for (Eigen::Index i = 0; i < c; ++i) {
    Eigen::VectorXd plus = bias, minus = bias;
    plus(i) += h;
    minus(i) -= h;
    numeric(c * d + i) =
        (softmax_objective(weights, plus, x, y, l2, w).loss - softmax_objective(weights, minus, x, y, l2, w).loss) /
        (2 * h);
    analytic(c * d + i) = obj.grad_bias(i);
  }
  const double scale = std::max(analytic.norm(), numeric.norm());
  return scale == 0.0 ? 0.0 : (analytic - numeric).norm() / scale;
}

/// AUROC as the Mann-Whitney probability P(s+ > s-) + 0.5 P(s+ = s-), by
/// counting every positive/negative pair.
inline double mann_whitney_auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& positive) {
  long double wins = 0;
  std::size_t pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!positive[i]) continue;
    ++pos;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (positive[j]) continue;
      if (scores[i] > scores[j]) wins += 1;
      else if (scores[i] == scores[j]) wins += 0.5L;
    }
  }
  for (auto p : positive) neg += p ? 0 : 1;
  return static_cast<double>(wins / (static_cast<long double>(pos) * static_cast<long double>(neg)));
}

/// h x w mask with each pixel set with probability `density`.
inline BinaryMask random_mask(Rng& rng, int h, int w, double density) {
  BinaryMask m(h, w);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() < density ? 1 : 0;
  return m;
}

// Random hierarchy over n points: every level-m cluster maps to a random parent.
inline std::vector<std::vector<std::uint32_t>> random_tree(Rng& rng, std::size_t n, const std::vector<std::size_t>& ks) {
  std::vector<std::vector<std::uint32_t>> levels;
  std::vector<std::uint32_t> leaf(n);
  for (auto& a : leaf) a = static_cast<std::uint32_t>(rng.below(ks[0]));
  levels.push_back(leaf);
  for (std::size_t m = 1; m < ks.size(); ++m) {
    std::vector<std::uint32_t> up(ks[m - 1]);
    for (auto& a : up) a = static_cast<std::uint32_t>(rng.below(ks[m]));
    levels.push_back(up);
  }
  return levels;
}

}  // namespace curate::testing
