#include "curate/dedup.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <string>

#include "curate/errors.hpp"
#include "curate/parallel.hpp"

namespace curate {

SimilarityPair::SimilarityPair(std::size_t a, std::size_t b, double cos)
    : i(std::min(a, b)), j(std::max(a, b)), cosine(std::clamp(cos, -1.0, 1.0)) {
  if (a == b) throw InvalidArgument("similarity pair needs two distinct rows, got " + std::to_string(a) + " twice");
}

std::vector<std::pair<std::size_t, std::size_t>> DedupReport::size_histogram() const {
  std::map<std::size_t, std::size_t> hist;
  for (const auto& c : components) ++hist[c.size()];
  return {hist.begin(), hist.end()};
}

DisjointSet::DisjointSet(std::size_t n) : parent_(n), rank_size_(n, 1) {
  std::iota(parent_.begin(), parent_.end(), std::size_t{0});
}

std::size_t DisjointSet::find(std::size_t x) {
  while (parent_[x] != x) {
    parent_[x] = parent_[parent_[x]];
    x = parent_[x];
  }
  return x;
}

bool DisjointSet::unite(std::size_t a, std::size_t b) {
  a = find(a);
  b = find(b);
  if (a == b) return false;
  if (rank_size_[a] < rank_size_[b]) std::swap(a, b);
  parent_[b] = a;
  rank_size_[a] += rank_size_[b];
  return true;
}

std::vector<SimilarityPair> find_near_duplicates(const EmbeddingMatrix& matrix, double threshold, Blocking blocking) {
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw InvalidArgument("dedup threshold must be in (0, 1], got " + std::to_string(threshold));
  }
  if (matrix.rows() == 0) throw InvalidArgument("find_near_duplicates on an empty matrix");

  RowMatrixXd unit = matrix.values.cast<double>();
  for (Eigen::Index r = 0; r < unit.rows(); ++r) {
    const double norm = unit.row(r).norm();
    if (!(norm > 0.0)) throw ValidationError("zero-norm embedding at row " + std::to_string(r));
    unit.row(r) /= norm;
  }

  std::vector<std::vector<std::size_t>> blocks;
  if (blocking == Blocking::kPerVideo) {
    std::map<std::string_view, std::size_t> block_of;
    for (std::size_t r = 0; r < matrix.rows(); ++r) {
      auto [it, inserted] = block_of.emplace(matrix.frames[r].video_id, blocks.size());
      if (inserted) blocks.emplace_back();
      blocks[it->second].push_back(r);
    }
  } else {
    blocks.emplace_back(matrix.rows());
    std::iota(blocks[0].begin(), blocks[0].end(), std::size_t{0});
  }

  // Tiles of at most kTile rows keep the Gram blocks cache-sized.
  constexpr std::size_t kTile = 512;
  struct Task {
    std::size_t block, a0, b0;
  };
  std::vector<Task> tasks;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t a0 = 0; a0 < blocks[b].size(); a0 += kTile) {
      for (std::size_t b0 = a0; b0 < blocks[b].size(); b0 += kTile) tasks.push_back({b, a0, b0});
    }
  }

  std::vector<std::vector<SimilarityPair>> found(tasks.size());
  parallel_chunks(tasks.size(), 1, [&](std::size_t t, std::size_t, std::size_t) {
    const auto& task = tasks[t];
    const auto& rows = blocks[task.block];
    const std::size_t na = std::min(kTile, rows.size() - task.a0);
    const std::size_t nb = std::min(kTile, rows.size() - task.b0);
    RowMatrixXd left(static_cast<Eigen::Index>(na), unit.cols());
    RowMatrixXd right(static_cast<Eigen::Index>(nb), unit.cols());
    for (std::size_t x = 0; x < na; ++x) left.row(static_cast<Eigen::Index>(x)) = unit.row(static_cast<Eigen::Index>(rows[task.a0 + x]));
    for (std::size_t y = 0; y < nb; ++y) right.row(static_cast<Eigen::Index>(y)) = unit.row(static_cast<Eigen::Index>(rows[task.b0 + y]));
    const Eigen::MatrixXd gram = left * right.transpose();
    const bool diagonal = task.a0 == task.b0;
    for (std::size_t x = 0; x < na; ++x) {
      for (std::size_t y = diagonal ? x + 1 : 0; y < nb; ++y) {
        const double c = gram(static_cast<Eigen::Index>(x), static_cast<Eigen::Index>(y));
        if (c >= threshold) found[t].emplace_back(rows[task.a0 + x], rows[task.b0 + y], c);
      }
    }
  });

  std::vector<SimilarityPair> pairs;
  for (auto& f : found) pairs.insert(pairs.end(), f.begin(), f.end());
  std::sort(pairs.begin(), pairs.end(), [](const auto& l, const auto& r) { return std::tie(l.i, l.j) < std::tie(r.i, r.j); });
  return pairs;
}

DedupReport collapse_duplicates(std::size_t total_rows, std::span<const SimilarityPair> pairs) {
  DisjointSet dsu(total_rows);
  std::vector<bool> touched(total_rows, false);
  for (const auto& p : pairs) {
    if (p.i >= total_rows || p.j >= total_rows) {
      throw InvalidArgument("pair (" + std::to_string(p.i) + ", " + std::to_string(p.j) + ") out of range for " +
                            std::to_string(total_rows) + " rows");
    }
    touched[p.i] = touched[p.j] = true;
    dsu.unite(p.i, p.j);
  }

  DedupReport report;
  report.total_rows = total_rows;
  // Scanning rows in ascending order makes the first member seen the lowest index.
  std::vector<std::size_t> slot(total_rows, SIZE_MAX);
  for (std::size_t r = 0; r < total_rows; ++r) {
    if (!touched[r]) {
      report.kept.push_back(r);
      continue;
    }
    const std::size_t root = dsu.find(r);
    if (slot[root] == SIZE_MAX) {
      slot[root] = report.components.size();
      report.components.emplace_back();
      report.representatives.push_back(r);
      report.kept.push_back(r);
    }
    report.components[slot[root]].push_back(r);
  }
  report.removed_count = total_rows - report.kept.size();
  return report;
}

DedupReport deduplicate(const EmbeddingMatrix& matrix, double threshold, Blocking blocking) {
  const auto pairs = find_near_duplicates(matrix, threshold, blocking);
  auto report = collapse_duplicates(matrix, pairs);
  report.threshold = threshold;
  return report;
}

}  // namespace curate
