#include "curate/hkmeans.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "curate/errors.hpp"
#include "curate/parallel.hpp"
#include "curate/random.hpp"

namespace curate {
namespace {

// Rows per work unit for the assignment step; fixed so results do not depend
// on the worker count.
constexpr std::size_t kAssignChunk = 256;
constexpr std::size_t kRowChunk = 4096;
constexpr std::size_t kPolishBlock = 128;

template <typename Scalar>
void check_points(const RowMatrix<Scalar>& points) {
  if (points.rows() == 0 || points.cols() == 0) throw InvalidArgument("k-means needs a non-empty point matrix");
  for (Eigen::Index r = 0; r < points.rows(); ++r) {
    if (!points.row(r).allFinite()) throw ValidationError("non-finite point at row " + std::to_string(r));
  }
}

double exact_inertia(const RowMatrixXd& x, const RowMatrixXd& c, std::span<const std::uint32_t> assign) {
  const std::size_t n = static_cast<std::size_t>(x.rows());
  const std::size_t chunks = (n + kRowChunk - 1) / kRowChunk;
  std::vector<double> partial(chunks, 0.0);
  parallel_chunks(n, kRowChunk, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) {
      s += (x.row(static_cast<Eigen::Index>(i)) - c.row(assign[i])).squaredNorm();
    }
    partial[chunk] = s;
  });
  return std::accumulate(partial.begin(), partial.end(), 0.0);
}

// Nearest centroid per row via |x|^2 - 2 x.c + |c|^2, lowest index on ties.
void assign_nearest(const RowMatrixXd& x, const Eigen::VectorXd& xnorm, const RowMatrixXd& c,
                    std::vector<std::uint32_t>& assign, std::vector<double>& best) {
  const std::size_t n = static_cast<std::size_t>(x.rows());
  const Eigen::Index k = c.rows();
  const Eigen::RowVectorXd cnorm = c.rowwise().squaredNorm().transpose();
  const Eigen::MatrixXd ct = c.transpose();
  parallel_chunks(n, kAssignChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
    const auto rows = static_cast<Eigen::Index>(end - begin);
    Eigen::MatrixXd g = x.middleRows(static_cast<Eigen::Index>(begin), rows) * ct;
    for (Eigen::Index r = 0; r < rows; ++r) {
      const std::size_t i = begin + static_cast<std::size_t>(r);
      double best_d = std::numeric_limits<double>::infinity();
      Eigen::Index best_j = 0;
      for (Eigen::Index j = 0; j < k; ++j) {
        const double d = cnorm(j) - 2.0 * g(r, j);
        if (d < best_d) {
          best_d = d;
          best_j = j;
        }
      }
      assign[i] = static_cast<std::uint32_t>(best_j);
      best[i] = std::max(0.0, best_d + xnorm(static_cast<Eigen::Index>(i)));
    }
  });
}

// Serial in index order: bitwise stable.
RowMatrixXd means_of(const RowMatrixXd& x, std::span<const std::uint32_t> assign, std::size_t k,
                     std::vector<std::size_t>& sizes) {
  RowMatrixXd sums = RowMatrixXd::Zero(static_cast<Eigen::Index>(k), x.cols());
  sizes.assign(k, 0);
  for (std::size_t i = 0; i < assign.size(); ++i) {
    sums.row(assign[i]) += x.row(static_cast<Eigen::Index>(i));
    ++sizes[assign[i]];
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (sizes[j] > 0) sums.row(static_cast<Eigen::Index>(j)) /= static_cast<double>(sizes[j]);
  }
  return sums;
}

// Moves the farthest point (from a cluster with >1 member) into each empty cluster.
void repair_empty(std::vector<std::uint32_t>& assign, std::vector<double>& best, std::size_t k) {
  std::vector<std::size_t> sizes(k, 0);
  for (auto a : assign) ++sizes[a];
  for (std::size_t j = 0; j < k; ++j) {
    if (sizes[j] > 0) continue;
    std::size_t far = SIZE_MAX;
    for (std::size_t i = 0; i < assign.size(); ++i) {
      if (sizes[assign[i]] > 1 && (far == SIZE_MAX || best[i] > best[far])) far = i;
    }
    if (far == SIZE_MAX) throw std::logic_error("k-means: no point available to re-seed an empty cluster");
    --sizes[assign[far]];
    assign[far] = static_cast<std::uint32_t>(j);
    sizes[j] = 1;
    best[far] = 0.0;
  }
}

// Single-point transfers: moving x from a to b changes the objective by
// n_b/(n_b+1)|x-c_b|^2 - n_a/(n_a-1)|x-c_a|^2.
// Candidate distances come from one Gram block per kPolishBlock rows taken at
// the start of the block; centroids moved since then are recomputed exactly,
// and every accepted move is re-checked with exact distances.
int polish_transfers(const RowMatrixXd& x, const Eigen::VectorXd& xnorm, RowMatrixXd& c,
                     std::vector<std::uint32_t>& assign, std::vector<std::size_t>& sizes, int max_sweeps) {
  int moves = 0;
  const Eigen::Index k = c.rows();
  const std::size_t n = assign.size();
  std::vector<char> dirty(static_cast<std::size_t>(k), 0);
  std::vector<Eigen::Index> dirty_list;
  Eigen::VectorXd d(k);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    int sweep_moves = 0;
    for (std::size_t begin = 0; begin < n; begin += kPolishBlock) {
      const auto rows = static_cast<Eigen::Index>(std::min(kPolishBlock, n - begin));
      const Eigen::VectorXd cnorm = c.rowwise().squaredNorm();
      const Eigen::MatrixXd g = x.middleRows(static_cast<Eigen::Index>(begin), rows) * c.transpose();
      for (auto j : dirty_list) dirty[static_cast<std::size_t>(j)] = 0;
      dirty_list.clear();
      for (Eigen::Index r = 0; r < rows; ++r) {
        const std::size_t i = begin + static_cast<std::size_t>(r);
        const std::uint32_t a = assign[i];
        if (sizes[a] <= 1) continue;
        const auto xi = x.row(static_cast<Eigen::Index>(i));
        d = (xnorm(static_cast<Eigen::Index>(i)) - 2.0 * g.row(r).transpose().array() + cnorm.array()).matrix();
        for (auto j : dirty_list) d(j) = (xi - c.row(j)).squaredNorm();
        const double na = static_cast<double>(sizes[a]);
        const double remove_gain = (xi - c.row(a)).squaredNorm() * na / (na - 1.0);
        double best_cost = std::numeric_limits<double>::infinity();
        Eigen::Index best_b = -1;
        for (Eigen::Index b = 0; b < k; ++b) {
          if (b == a) continue;
          const double nb = static_cast<double>(sizes[static_cast<std::size_t>(b)]);
          const double cost = d(b) * nb / (nb + 1.0);
          if (cost < best_cost) {
            best_cost = cost;
            best_b = b;
          }
        }
        if (best_b < 0) continue;
        const auto b = static_cast<std::uint32_t>(best_b);
        const double nb = static_cast<double>(sizes[b]);
        const double exact_cost = (xi - c.row(b)).squaredNorm() * nb / (nb + 1.0);
        if (!(exact_cost < remove_gain * (1.0 - 1e-12))) continue;
        c.row(a) = (c.row(a) * na - xi) / (na - 1.0);
        c.row(b) = (c.row(b) * nb + xi) / (nb + 1.0);
        --sizes[a];
        ++sizes[b];
        assign[i] = b;
        ++sweep_moves;
        for (Eigen::Index j : {static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)}) {
          if (!dirty[static_cast<std::size_t>(j)]) {
            dirty[static_cast<std::size_t>(j)] = 1;
            dirty_list.push_back(j);
          }
        }
      }
    }
    moves += sweep_moves;
    if (sweep_moves == 0) break;
  }
  return moves;
}

void check_level_ks(std::span<const std::size_t> level_ks) {
  if (level_ks.empty()) throw InvalidArgument("level_ks must be non-empty");
  for (std::size_t m = 0; m < level_ks.size(); ++m) {
    if (level_ks[m] == 0) throw InvalidArgument("level " + std::to_string(m) + ": k must be positive");
    if (m > 0 && level_ks[m] >= level_ks[m - 1]) {
      throw InvalidArgument("level_ks not strictly decreasing at level " + std::to_string(m));
    }
  }
}

std::uint32_t get_u32(std::span<const std::uint8_t> b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) | (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

}  // namespace

template <typename Scalar>
std::vector<std::size_t> Clustering<Scalar>::cluster_sizes() const {
  std::vector<std::size_t> sizes(k, 0);
  for (auto a : assignments) ++sizes[a];
  return sizes;
}

template <typename Scalar>
std::size_t count_distinct_rows(const RowMatrix<Scalar>& points) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(points.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  auto less = [&](Eigen::Index a, Eigen::Index b) {
    for (Eigen::Index c = 0; c < points.cols(); ++c) {
      if (points(a, c) < points(b, c)) return true;
      if (points(b, c) < points(a, c)) return false;
    }
    return false;
  };
  std::sort(order.begin(), order.end(), less);
  std::size_t distinct = order.empty() ? 0 : 1;
  for (std::size_t i = 1; i < order.size(); ++i) {
    if (less(order[i - 1], order[i])) ++distinct;
  }
  return distinct;
}

template <typename Scalar>
std::vector<std::size_t> kmeanspp_indices(const RowMatrix<Scalar>& points, std::size_t k, std::uint64_t seed) {
  check_points(points);
  const std::size_t n = static_cast<std::size_t>(points.rows());
  if (k == 0) throw InvalidArgument("k must be positive");
  if (k > n || k > count_distinct_rows(points)) {
    throw InvalidArgument("k = " + std::to_string(k) + " exceeds the number of distinct points");
  }
  const RowMatrixXd x = points.template cast<double>();
  Rng rng(seed);
  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  chosen.push_back(static_cast<std::size_t>(rng.below(n)));

  std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
  auto absorb = [&](std::size_t centre) {
    const Eigen::RowVectorXd c = x.row(static_cast<Eigen::Index>(centre));
    parallel_chunks(n, kRowChunk, [&](std::size_t, std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        min_d2[i] = std::min(min_d2[i], (x.row(static_cast<Eigen::Index>(i)) - c).squaredNorm());
      }
    });
  };
  absorb(chosen.back());

  while (chosen.size() < k) {
    const double total = std::accumulate(min_d2.begin(), min_d2.end(), 0.0);
    if (!(total > 0.0)) throw InvalidArgument("k-means++ ran out of distinct points");
    const double target = rng.uniform() * total;
    double acc = 0.0;
    std::size_t pick = SIZE_MAX;
    std::size_t last_positive = SIZE_MAX;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_d2[i] <= 0.0) continue;
      last_positive = i;
      acc += min_d2[i];
      if (acc > target) {
        pick = i;
        break;
      }
    }
    if (pick == SIZE_MAX) pick = last_positive;  // rounding at the top end
    chosen.push_back(pick);
    absorb(pick);
  }
  return chosen;
}

template <typename Scalar>
RowMatrix<Scalar> kmeanspp_init(const RowMatrix<Scalar>& points, std::size_t k, std::uint64_t seed) {
  const auto idx = kmeanspp_indices(points, k, seed);
  RowMatrix<Scalar> c(static_cast<Eigen::Index>(k), points.cols());
  for (std::size_t j = 0; j < k; ++j) c.row(static_cast<Eigen::Index>(j)) = points.row(static_cast<Eigen::Index>(idx[j]));
  return c;
}

template <typename Scalar>
double inertia_of(const RowMatrix<Scalar>& points, const RowMatrix<Scalar>& centroids,
                  std::span<const std::uint32_t> assignments) {
  if (assignments.size() != static_cast<std::size_t>(points.rows())) {
    throw InvalidArgument("assignment count does not match point count");
  }
  for (auto a : assignments) {
    if (a >= centroids.rows()) throw InvalidArgument("assignment out of range");
  }
  return exact_inertia(points.template cast<double>(), centroids.template cast<double>(), assignments);
}

template <typename Scalar>
Clustering<Scalar> kmeans(const RowMatrix<Scalar>& points, std::size_t k, std::uint64_t seed,
                          const KMeansOptions& options) {
  if (options.max_iters < 1) throw InvalidArgument("max_iters must be at least 1");
  if (!(options.tol >= 0.0)) throw InvalidArgument("tol must be non-negative");
  const auto init = kmeanspp_indices(points, k, seed);

  const RowMatrixXd x = points.template cast<double>();
  const std::size_t n = static_cast<std::size_t>(x.rows());
  const Eigen::VectorXd xnorm = x.rowwise().squaredNorm();
  RowMatrixXd c(static_cast<Eigen::Index>(k), x.cols());
  for (std::size_t j = 0; j < k; ++j) c.row(static_cast<Eigen::Index>(j)) = x.row(static_cast<Eigen::Index>(init[j]));

  Clustering<Scalar> out;
  out.k = k;
  out.seed = seed;
  std::vector<std::uint32_t> assign;
  std::vector<std::uint32_t> next(n);
  std::vector<double> best(n);
  std::vector<std::size_t> sizes;
  double inertia = std::numeric_limits<double>::infinity();

  for (int it = 0; it < options.max_iters; ++it) {
    assign_nearest(x, xnorm, c, next, best);
    repair_empty(next, best, k);
    if (next == assign) break;
    assign = next;
    c = means_of(x, assign, k, sizes);
    const double updated = exact_inertia(x, c, assign);
    if (!out.inertia_trace.empty() && updated > inertia * (1.0 + 1e-9) + 1e-300) {
      throw std::logic_error("k-means inertia increased from " + std::to_string(inertia) + " to " +
                             std::to_string(updated));
    }
    out.inertia_trace.push_back(updated);
    ++out.iterations_run;
    const double previous = inertia;
    inertia = updated;
    if (std::isfinite(previous) && previous - updated < options.tol * previous) break;
  }

  if (options.polish && k > 1) {
    out.polish_moves = polish_transfers(x, xnorm, c, assign, sizes, options.max_polish_sweeps);
    if (out.polish_moves > 0) c = means_of(x, assign, k, sizes);
  }

  out.inertia = exact_inertia(x, c, assign);
  out.centroids = c.template cast<Scalar>();
  out.assignments = std::move(assign);
  return out;
}

template <typename Scalar>
std::vector<std::uint32_t> ClusterTree<Scalar>::compose(std::size_t level) const {
  if (level >= levels.size()) throw InvalidArgument("level " + std::to_string(level) + " out of range");
  std::vector<std::uint32_t> map = levels.front().assignments;
  for (std::size_t m = 1; m <= level; ++m) {
    for (auto& a : map) a = levels[m].assignments[a];
  }
  return map;
}

template <typename Scalar>
ClusterTree<Scalar> hierarchical_kmeans(const RowMatrix<Scalar>& points, std::span<const std::size_t> level_ks,
                                        std::uint64_t seed, const KMeansOptions& options) {
  check_level_ks(level_ks);
  if (level_ks[0] > static_cast<std::size_t>(points.rows())) {
    throw InvalidArgument("level 0: k = " + std::to_string(level_ks[0]) + " exceeds " +
                          std::to_string(points.rows()) + " points");
  }
  ClusterTree<Scalar> tree;
  tree.seed = seed;
  tree.level_ks.assign(level_ks.begin(), level_ks.end());
  const RowMatrix<Scalar>* current = &points;
  for (std::size_t m = 0; m < level_ks.size(); ++m) {
    if (level_ks[m] > static_cast<std::size_t>(current->rows())) {
      throw InvalidArgument("level " + std::to_string(m) + ": k = " + std::to_string(level_ks[m]) + " exceeds " +
                            std::to_string(current->rows()) + " points");
    }
    try {
      tree.levels.push_back(kmeans(*current, level_ks[m], derive_seed(seed, static_cast<std::uint64_t>(m)), options));
    } catch (const InvalidArgument& e) {
      throw InvalidArgument("level " + std::to_string(m) + ": " + e.what());
    }
    current = &tree.levels.back().centroids;
  }
  tree.top_assignment = tree.compose(level_ks.size() - 1);
  return tree;
}

std::vector<std::size_t> water_fill(std::span<const std::size_t> populations, std::size_t quota, std::uint64_t seed) {
  std::vector<std::size_t> out(populations.size(), 0);
  std::vector<std::size_t> active(populations.size());
  std::iota(active.begin(), active.end(), std::size_t{0});
  const std::size_t total = std::accumulate(populations.begin(), populations.end(), std::size_t{0});
  std::size_t remaining = std::min(quota, total);

  while (!active.empty() && remaining > 0) {
    const std::size_t share = remaining / active.size();
    std::vector<std::size_t> still;
    for (std::size_t c : active) {
      if (populations[c] <= share) {
        out[c] = populations[c];
        remaining -= populations[c];
      } else {
        still.push_back(c);
      }
    }
    if (still.size() == active.size()) {
      // Nobody saturates: everyone takes the share, and since each population
      // exceeds it every child can absorb one unit of the remainder.
      std::size_t rest = remaining - share * active.size();
      for (std::size_t c : active) out[c] = share;
      Rng rng(seed);
      rng.shuffle(std::span(active));
      for (std::size_t i = 0; i < rest; ++i) ++out[active[i]];
      remaining = 0;
      break;
    }
    active.swap(still);
  }
  return out;
}

SampleAllocation balanced_sample(std::span<const std::vector<std::uint32_t>> level_assignments,
                                 std::span<const std::size_t> level_ks, std::size_t target_n, std::uint64_t seed) {
  if (target_n == 0) throw InvalidArgument("target_n must be positive");
  check_level_ks(level_ks);
  if (level_assignments.size() != level_ks.size()) throw InvalidArgument("one assignment array per level required");
  const std::size_t levels = level_ks.size();
  for (std::size_t m = 0; m < levels; ++m) {
    if (m > 0 && level_assignments[m].size() != level_ks[m - 1]) {
      throw InvalidArgument("level " + std::to_string(m) + " must assign exactly " + std::to_string(level_ks[m - 1]) +
                            " clusters");
    }
    for (auto a : level_assignments[m]) {
      if (a >= level_ks[m]) throw InvalidArgument("level " + std::to_string(m) + ": assignment out of range");
    }
  }

  // children[m][c]: members of cluster c at level m (raw points at m = 0).
  std::vector<std::vector<std::vector<std::size_t>>> children(levels);
  std::vector<std::vector<std::size_t>> population(levels);
  for (std::size_t m = 0; m < levels; ++m) {
    children[m].resize(level_ks[m]);
    population[m].assign(level_ks[m], 0);
    for (std::size_t i = 0; i < level_assignments[m].size(); ++i) {
      const auto c = level_assignments[m][i];
      children[m][c].push_back(i);
      population[m][c] += m == 0 ? 1 : population[m - 1][i];
    }
  }

  SampleAllocation alloc;
  alloc.target_n = target_n;
  alloc.population = level_assignments[0].size();
  alloc.saturated = target_n > alloc.population;
  alloc.level_quotas.resize(levels);
  for (std::size_t m = 0; m < levels; ++m) alloc.level_quotas[m].assign(level_ks[m], 0);

  alloc.level_quotas[levels - 1] = water_fill(population[levels - 1], target_n, derive_seed(seed, "root"));
  for (std::size_t m = levels - 1; m >= 1; --m) {
    for (std::size_t c = 0; c < level_ks[m]; ++c) {
      const std::size_t q = alloc.level_quotas[m][c];
      if (q == 0) continue;
      const auto& kids = children[m][c];
      std::vector<std::size_t> pops;
      pops.reserve(kids.size());
      for (auto kid : kids) pops.push_back(population[m - 1][kid]);
      const auto node_seed = derive_seed(derive_seed(seed, static_cast<std::uint64_t>(m)), static_cast<std::uint64_t>(c));
      const auto split = water_fill(pops, q, node_seed);
      for (std::size_t i = 0; i < kids.size(); ++i) alloc.level_quotas[m - 1][kids[i]] = split[i];
    }
  }

  const auto leaf_seed = derive_seed(seed, "leaf");
  for (std::size_t c = 0; c < level_ks[0]; ++c) {
    const std::size_t q = alloc.level_quotas[0][c];
    if (q == 0) continue;
    auto members = children[0][c];
    Rng rng(derive_seed(leaf_seed, static_cast<std::uint64_t>(c)));
    // partial Fisher-Yates: the first q slots are a uniform draw without replacement
    for (std::size_t i = 0; i < q; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(members.size() - i));
      std::swap(members[i], members[j]);
    }
    alloc.drawn.insert(alloc.drawn.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(q));
  }
  std::sort(alloc.drawn.begin(), alloc.drawn.end());
  return alloc;
}

template <typename Scalar>
SampleAllocation balanced_sample(const ClusterTree<Scalar>& tree, std::size_t matrix_size, std::size_t target_n,
                                 std::uint64_t seed) {
  if (matrix_size != tree.num_points()) {
    throw InvalidArgument("tree covers " + std::to_string(tree.num_points()) + " points, matrix has " +
                          std::to_string(matrix_size));
  }
  std::vector<std::vector<std::uint32_t>> maps;
  for (const auto& level : tree.levels) maps.push_back(level.assignments);
  return balanced_sample(maps, tree.level_ks, target_n, seed);
}

std::vector<std::uint8_t> encode_assignments(std::span<const std::uint32_t> assignments) {
  if (assignments.size() > std::numeric_limits<std::uint32_t>::max()) throw InvalidArgument("too many assignments for ASG1");
  std::vector<std::uint8_t> out{'A', 'S', 'G', '1'};
  out.reserve(8 + assignments.size() * 4);
  put_u32(out, static_cast<std::uint32_t>(assignments.size()));
  for (auto a : assignments) put_u32(out, a);
  return out;
}

std::vector<std::uint32_t> decode_assignments(std::span<const std::uint8_t> bytes, const std::string& locator) {
  if (bytes.size() < 8) {
    throw FormatError(locator + ": truncated ASG1 header (expected 8 bytes, actual " + std::to_string(bytes.size()) + ")");
  }
  if (std::memcmp(bytes.data(), "ASG1", 4) != 0) throw FormatError(locator + ": bad magic, not an ASG1 file");
  const std::uint32_t count = get_u32(bytes, 4);
  const std::size_t expected = 8 + static_cast<std::size_t>(count) * 4;
  if (bytes.size() != expected) {
    throw FormatError(locator + ": ASG1 length mismatch (expected " + std::to_string(expected) + " bytes, actual " +
                      std::to_string(bytes.size()) + ")");
  }
  std::vector<std::uint32_t> out(count);
  for (std::uint32_t i = 0; i < count; ++i) out[i] = get_u32(bytes, 8 + 4 * static_cast<std::size_t>(i));
  return out;
}

void write_assignments(std::span<const std::uint32_t> assignments, const std::filesystem::path& destination) {
  write_file_atomic(destination, encode_assignments(assignments));
}

std::vector<std::uint32_t> read_assignments(const std::filesystem::path& source) {
  return decode_assignments(read_file_bytes(source), source.string());
}

void write_cluster_tree(const ClusterTree<float>& tree, const std::filesystem::path& directory) {
  std::filesystem::create_directories(directory);
  nlohmann::ordered_json meta;
  meta["format"] = "cluster-tree/1";
  meta["seed"] = tree.seed;
  meta["level_ks"] = tree.level_ks;
  meta["levels"] = nlohmann::ordered_json::array();
  for (std::size_t m = 0; m < tree.levels.size(); ++m) {
    const auto& level = tree.levels[m];
    EmbeddingMatrix centroids;
    centroids.dim = static_cast<std::uint32_t>(level.centroids.cols());
    centroids.values = level.centroids;
    for (std::size_t j = 0; j < level.k; ++j) centroids.frames.push_back({"level" + std::to_string(m), j, 0});
    const auto stem = "level_" + std::to_string(m);
    write_embeddings(centroids, directory / (stem + "_centroids.emb1"));
    write_assignments(level.assignments, directory / (stem + "_assign.asg1"));
    meta["levels"].push_back({{"k", level.k},
                              {"seed", level.seed},
                              {"inertia", level.inertia},
                              {"iterations", level.iterations_run},
                              {"polish_moves", level.polish_moves}});
  }
  write_text_atomic(directory / "tree.json", meta.dump(2) + "\n");
}

ClusterTree<float> read_cluster_tree(const std::filesystem::path& directory) {
  std::ifstream in(directory / "tree.json");
  if (!in) throw StorageError("cannot open " + (directory / "tree.json").string());
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError((directory / "tree.json").string() + ": " + e.what());
  }
  ClusterTree<float> tree;
  tree.seed = meta.at("seed").get<std::uint64_t>();
  tree.level_ks = meta.at("level_ks").get<std::vector<std::size_t>>();
  for (std::size_t m = 0; m < tree.level_ks.size(); ++m) {
    const auto stem = "level_" + std::to_string(m);
    Clustering<float> level;
    const auto& lm = meta.at("levels").at(m);
    level.k = tree.level_ks[m];
    level.seed = lm.at("seed").get<std::uint64_t>();
    level.inertia = lm.at("inertia").get<double>();
    level.iterations_run = lm.at("iterations").get<int>();
    level.polish_moves = lm.value("polish_moves", 0);
    level.centroids = read_embeddings(directory / (stem + "_centroids.emb1")).values;
    level.assignments = read_assignments(directory / (stem + "_assign.asg1"));
    if (static_cast<std::size_t>(level.centroids.rows()) != level.k) {
      throw FormatError(stem + ": centroid count does not match level_ks");
    }
    tree.levels.push_back(std::move(level));
  }
  if (!tree.levels.empty()) tree.top_assignment = tree.compose(tree.levels.size() - 1);
  return tree;
}

#define CURATE_INSTANTIATE(Scalar)                                                                                  \
  template struct Clustering<Scalar>;                                                                               \
  template struct ClusterTree<Scalar>;                                                                              \
  template std::size_t count_distinct_rows<Scalar>(const RowMatrix<Scalar>&);                                      \
  template std::vector<std::size_t> kmeanspp_indices<Scalar>(const RowMatrix<Scalar>&, std::size_t, std::uint64_t); \
  template RowMatrix<Scalar> kmeanspp_init<Scalar>(const RowMatrix<Scalar>&, std::size_t, std::uint64_t);          \
  template Clustering<Scalar> kmeans<Scalar>(const RowMatrix<Scalar>&, std::size_t, std::uint64_t,                 \
                                             const KMeansOptions&);                                                \
  template double inertia_of<Scalar>(const RowMatrix<Scalar>&, const RowMatrix<Scalar>&,                           \
                                     std::span<const std::uint32_t>);                                              \
  template ClusterTree<Scalar> hierarchical_kmeans<Scalar>(const RowMatrix<Scalar>&, std::span<const std::size_t>, \
                                                           std::uint64_t, const KMeansOptions&);                   \
  template SampleAllocation balanced_sample<Scalar>(const ClusterTree<Scalar>&, std::size_t, std::size_t,          \
                                                    std::uint64_t);

CURATE_INSTANTIATE(float)
CURATE_INSTANTIATE(double)

#undef CURATE_INSTANTIATE

}  // namespace curate
