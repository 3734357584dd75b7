#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "curate/embedding_store.hpp"

namespace curate {

struct SimilarityPair {
  std::size_t i = 0;
  std::size_t j = 0;
  double cosine = 0.0;

  SimilarityPair() = default;
  /// Orders (i, j) so that i < j and clamps cosine into [-1, 1].
  SimilarityPair(std::size_t a, std::size_t b, double cos);

  friend bool operator==(const SimilarityPair&, const SimilarityPair&) = default;
};

struct DedupReport {
  double threshold = 0.0;  // set by deduplicate(); collapse alone leaves it 0
  std::size_t total_rows = 0;
  std::vector<std::vector<std::size_t>> components;  // each sorted ascending, ordered by representative
  std::vector<std::size_t> representatives;          // lowest index of each component
  std::vector<std::size_t> kept;                     // sorted
  std::size_t removed_count = 0;

  /// component size -> number of components of that size
  std::vector<std::pair<std::size_t, std::size_t>> size_histogram() const;
};

inline constexpr double kDefaultDedupThreshold = 0.98;

enum class Blocking { kGlobal, kPerVideo };

/// Every pair with cosine >= threshold, sorted by (i, j). With kPerVideo only
/// rows sharing a video_id are compared. Cosines are computed in double.
/// Throws ValidationError naming the first zero-norm row.
std::vector<SimilarityPair> find_near_duplicates(const EmbeddingMatrix& matrix, double threshold,
                                                 Blocking blocking = Blocking::kPerVideo);

/// Connected components of the pair graph (disjoint-set union); the lowest
/// row index represents each component. Independent of pair order.
DedupReport collapse_duplicates(std::size_t total_rows, std::span<const SimilarityPair> pairs);

inline DedupReport collapse_duplicates(const EmbeddingMatrix& matrix, std::span<const SimilarityPair> pairs) {
  return collapse_duplicates(matrix.rows(), pairs);
}

/// find_near_duplicates + collapse_duplicates, with the threshold recorded.
DedupReport deduplicate(const EmbeddingMatrix& matrix, double threshold = kDefaultDedupThreshold,
                        Blocking blocking = Blocking::kPerVideo);

/// Disjoint-set forest with path halving and union by size.
class DisjointSet {
 public:
  explicit DisjointSet(std::size_t n);
  std::size_t find(std::size_t x);
  bool unite(std::size_t a, std::size_t b);
  std::size_t size() const { return parent_.size(); }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::size_t> rank_size_;
};

}  // namespace curate
