#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace curate {

struct LabeledIndex {
  std::size_t index = 0;
  std::uint32_t label = 0;
  std::optional<std::string> group;

  friend bool operator==(const LabeledIndex&, const LabeledIndex&) = default;
};

struct SplitPart {
  std::string name;
  std::vector<LabeledIndex> items;

  friend bool operator==(const SplitPart&, const SplitPart&) = default;
};

struct DatasetSplit {
  std::string name;
  std::vector<SplitPart> parts;
  std::uint64_t seed = 0;
  std::vector<double> fractions;
  std::vector<std::string> warnings;

  const SplitPart& part(std::string_view part_name) const;
  bool has_part(std::string_view part_name) const;
  std::vector<std::size_t> indices(std::string_view part_name) const;
  std::size_t total_items() const;

  /// Throws ValidationError if an index appears in two parts (or twice in one).
  void check_disjoint() const;

  friend bool operator==(const DatasetSplit& a, const DatasetSplit& b) {
    return a.name == b.name && a.parts == b.parts && a.seed == b.seed && a.fractions == b.fractions;
  }
};

/// Hamilton apportionment of `total` in proportion to `weights` (need not be
/// normalised). Ties on the remainder go to the lower index.
std::vector<std::size_t> largest_remainder(std::span<const double> weights, std::size_t total);

/// Per class: shuffle (seeded) and cut so every part's class count is the
/// floor or ceiling of fraction * class size and part totals follow
/// largest-remainder rounding of the overall size. When every item carries a
/// group, whole groups are the units (a group's label is its majority label).
/// Part names default to train/val/test for three fractions, part_<i> otherwise.
DatasetSplit stratified_split(std::span<const LabeledIndex> items, std::span<const double> fractions,
                              std::uint64_t seed, std::vector<std::string> part_names = {});

/// Replaces `train` by a stratified subsample of ceil(fraction * |train|)
/// items apportioned over classes by largest remainder, at least one per
/// class, then capped at `per_class_cap`. Other parts are untouched.
DatasetSplit few_shot_subset(const DatasetSplit& split, double train_fraction,
                             std::optional<std::size_t> per_class_cap, std::uint64_t seed);

/// Stratified holdout `test` part followed by `k` stratified folds
/// `fold_0..fold_{k-1}` over the remainder.
DatasetSplit holdout_kfold(std::span<const LabeledIndex> items, double holdout_fraction, std::size_t k,
                           std::uint64_t seed);

/// Train/val/test view of fold `fold` of a holdout_kfold split: val is the
/// fold, train the other folds, test the holdout.
DatasetSplit cv_fold(const DatasetSplit& folds, std::size_t fold);

/// Number of `fold_<i>` parts.
std::size_t fold_count(const DatasetSplit& split);

/// Text form: one `part,index,label[,group]` record per line.
std::string format_split(const DatasetSplit& split);
DatasetSplit parse_split(std::string_view text, const std::string& locator = "<memory>");
void write_split_file(const DatasetSplit& split, const std::filesystem::path& destination);
/// Ingests an externally supplied split (e.g. published folds) after checking disjointness.
DatasetSplit read_split_file(const std::filesystem::path& source);

}  // namespace curate
