#pragma once

// Exact k-means, its hierarchical extension and balanced sampling over the
// resulting cluster tree.
//
// Points are rows of a dense row-major matrix. All arithmetic on distances
// and means runs in double regardless of the input scalar; centroids are
// returned in the input scalar type.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "curate/embedding_store.hpp"

namespace curate {

struct KMeansOptions {
  int max_iters = 100;
  /// Stop when the relative inertia improvement of one Lloyd iteration drops below this.
  double tol = 1e-4;
  /// After Lloyd's converges, run single-point-transfer sweeps (moving a point
  /// and updating both affected means) until no transfer lowers inertia.
  bool polish = true;
  int max_polish_sweeps = 20;
};

template <typename Scalar>
struct Clustering {
  std::size_t k = 0;
  RowMatrix<Scalar> centroids;
  std::vector<std::uint32_t> assignments;
  double inertia = 0.0;
  int iterations_run = 0;
  int polish_moves = 0;
  std::uint64_t seed = 0;
  /// inertia after every Lloyd iteration; non-increasing
  std::vector<double> inertia_trace;

  std::vector<std::size_t> cluster_sizes() const;
};

/// Number of pairwise-distinct rows.
template <typename Scalar>
std::size_t count_distinct_rows(const RowMatrix<Scalar>& points);

/// k-means++ seeding: first centre uniform, each further centre drawn with
/// probability proportional to its squared distance to the nearest chosen
/// centre. Returns the chosen row indices in draw order.
template <typename Scalar>
std::vector<std::size_t> kmeanspp_indices(const RowMatrix<Scalar>& points, std::size_t k, std::uint64_t seed);

template <typename Scalar>
RowMatrix<Scalar> kmeanspp_init(const RowMatrix<Scalar>& points, std::size_t k, std::uint64_t seed);

/// Lloyd's iterations from k-means++ seeds. Ties go to the lowest cluster
/// index; an emptied cluster is re-seeded with the point farthest from its
/// centroid (taken from a cluster with more than one member).
template <typename Scalar>
Clustering<Scalar> kmeans(const RowMatrix<Scalar>& points, std::size_t k, std::uint64_t seed,
                          const KMeansOptions& options = {});

/// Sum of squared distances of points to their assigned centroids.
template <typename Scalar>
double inertia_of(const RowMatrix<Scalar>& points, const RowMatrix<Scalar>& centroids,
                  std::span<const std::uint32_t> assignments);

// ---- hierarchy -------------------------------------------------------------

template <typename Scalar>
struct ClusterTree {
  std::vector<std::size_t> level_ks;          // finest first, strictly decreasing
  std::vector<Clustering<Scalar>> levels;     // level m clusters the centroids of level m - 1
  std::vector<std::uint32_t> top_assignment;  // raw point -> coarsest cluster
  std::uint64_t seed = 0;

  std::size_t num_points() const { return levels.empty() ? 0 : levels.front().assignments.size(); }
  /// raw point -> cluster at `level`, by composing the per-level maps.
  std::vector<std::uint32_t> compose(std::size_t level) const;
};

/// Seed for level m: derive_seed(seed, m).
template <typename Scalar>
ClusterTree<Scalar> hierarchical_kmeans(const RowMatrix<Scalar>& points, std::span<const std::size_t> level_ks,
                                        std::uint64_t seed, const KMeansOptions& options = {});

// ---- balanced sampling -----------------------------------------------------

struct SampleAllocation {
  std::size_t target_n = 0;
  std::size_t population = 0;
  bool saturated = false;  // target_n > population
  /// quota per cluster, per level (same layout as the tree levels)
  std::vector<std::vector<std::size_t>> level_quotas;
  /// drawn raw point indices, ascending
  std::vector<std::size_t> drawn;

  const std::vector<std::size_t>& top_quotas() const { return level_quotas.back(); }
};

/// Splits `quota` across children as evenly as their populations allow:
/// children whose population is at most the current equal share are filled
/// completely and the rest is re-shared among the others until stable; the
/// integer remainder goes one unit each to unsaturated children in a random
/// order drawn from `seed`. Sum of the result is min(quota, sum(populations)).
std::vector<std::size_t> water_fill(std::span<const std::size_t> populations, std::size_t quota, std::uint64_t seed);

/// Top-down water-filling through the hierarchy followed by uniform draws
/// without replacement inside each finest cluster. `level_assignments[0]`
/// maps raw points to finest clusters, `level_assignments[m]` maps level m-1
/// clusters to level m clusters.
SampleAllocation balanced_sample(std::span<const std::vector<std::uint32_t>> level_assignments,
                                 std::span<const std::size_t> level_ks, std::size_t target_n, std::uint64_t seed);

template <typename Scalar>
SampleAllocation balanced_sample(const ClusterTree<Scalar>& tree, std::size_t matrix_size, std::size_t target_n,
                                 std::uint64_t seed);

// ---- serialization ---------------------------------------------------------

/// ASG1: magic "ASG1", count u32, then count u32 indices (little-endian).
std::vector<std::uint8_t> encode_assignments(std::span<const std::uint32_t> assignments);
std::vector<std::uint32_t> decode_assignments(std::span<const std::uint8_t> bytes, const std::string& locator = "<memory>");
void write_assignments(std::span<const std::uint32_t> assignments, const std::filesystem::path& destination);
std::vector<std::uint32_t> read_assignments(const std::filesystem::path& source);

/// Directory layout: level_<m>_centroids.emb1, level_<m>_assign.asg1 and tree.json.
void write_cluster_tree(const ClusterTree<float>& tree, const std::filesystem::path& directory);
ClusterTree<float> read_cluster_tree(const std::filesystem::path& directory);

}  // namespace curate
