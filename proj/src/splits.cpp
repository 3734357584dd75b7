#include "curate/splits.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>

#include "curate/embedding_store.hpp"
#include "curate/errors.hpp"
#include "curate/random.hpp"

namespace curate {
namespace {

// A stratification unit: one item, or every item of one group.
struct Unit {
  std::uint32_t label = 0;
  std::vector<LabeledIndex> items;
};

std::vector<Unit> make_units(std::span<const LabeledIndex> items) {
  std::vector<Unit> units;
  std::map<std::string, std::size_t> by_group;
  for (const auto& item : items) {
    if (!item.group) {
      units.push_back({item.label, {item}});
      continue;
    }
    auto [it, inserted] = by_group.emplace(*item.group, units.size());
    if (inserted) units.emplace_back();
    units[it->second].items.push_back(item);
  }
  for (auto& u : units) {
    if (u.items.size() == 1) {
      u.label = u.items[0].label;
      continue;
    }
    std::map<std::uint32_t, std::size_t> votes;
    for (const auto& item : u.items) ++votes[item.label];
    u.label = std::max_element(votes.begin(), votes.end(), [](auto& a, auto& b) { return a.second < b.second; })->first;
  }
  return units;
}

void check_fractions(std::span<const double> fractions) {
  if (fractions.empty()) throw InvalidArgument("at least one fraction required");
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw InvalidArgument("fractions must be positive");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument("fractions must sum to 1, got " + std::to_string(sum));
}

// Classes 0..C-1 with their units in input order; every class must be present.
std::vector<std::vector<std::size_t>> units_by_class(const std::vector<Unit>& units) {
  std::uint32_t max_label = 0;
  for (const auto& u : units) max_label = std::max(max_label, u.label);
  std::vector<std::vector<std::size_t>> classes(units.empty() ? 0 : max_label + 1);
  for (std::size_t i = 0; i < units.size(); ++i) classes[units[i].label].push_back(i);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    if (classes[c].empty()) throw ValidationError("class " + std::to_string(c) + " has no items");
  }
  return classes;
}

// Cell counts with row sums = class sizes, every cell floor or ceil of
// fraction * class size, column sums = largest-remainder part totals when
// such a rounding exists (max-flow over the fractional cells), otherwise the
// per-class largest-remainder rounding.
std::vector<std::vector<std::size_t>> controlled_rounding(std::span<const std::size_t> class_sizes,
                                                          std::span<const double> fractions) {
  const std::size_t nc = class_sizes.size();
  const std::size_t np = fractions.size();
  const std::size_t total = std::accumulate(class_sizes.begin(), class_sizes.end(), std::size_t{0});
  const auto targets = largest_remainder(fractions, total);

  std::vector<std::vector<std::size_t>> cells(nc, std::vector<std::size_t>(np));
  std::vector<std::vector<double>> rem(nc, std::vector<double>(np));
  std::vector<std::size_t> row_need(nc);
  std::vector<std::ptrdiff_t> col_need(np);
  for (std::size_t p = 0; p < np; ++p) col_need[p] = static_cast<std::ptrdiff_t>(targets[p]);
  for (std::size_t c = 0; c < nc; ++c) {
    std::size_t used = 0;
    for (std::size_t p = 0; p < np; ++p) {
      const double exact = fractions[p] * static_cast<double>(class_sizes[c]);
      cells[c][p] = static_cast<std::size_t>(std::floor(exact + 1e-9));
      rem[c][p] = std::max(0.0, exact - static_cast<double>(cells[c][p]));
      used += cells[c][p];
      col_need[p] -= static_cast<std::ptrdiff_t>(cells[c][p]);
    }
    row_need[c] = class_sizes[c] - used;
  }

  // Choose which cells round up: each class needs row_need[c] extra units,
  // each part can take col_need[p], a cell takes at most one and only if its
  // remainder is positive. Among feasible choices take the one with the
  // largest total remainder (least total deviation from the exact counts):
  // min-cost flow with successive Bellman-Ford shortest paths over
  // source -> class -> part -> sink. Costs are integers so ties resolve the
  // same way everywhere.
  std::vector<std::vector<bool>> extra(nc, std::vector<bool>(np, false));
  bool feasible = std::all_of(col_need.begin(), col_need.end(), [](auto v) { return v >= 0; });
  if (feasible) {
    struct Edge {
      std::size_t to;
      std::int64_t cap;
      std::int64_t cost;
    };
    const std::size_t source = nc + np, sink = nc + np + 1, nodes = nc + np + 2;
    std::vector<Edge> edges;
    std::vector<std::vector<std::size_t>> out(nodes);
    auto add_edge = [&](std::size_t u, std::size_t v, std::int64_t cap, std::int64_t cost) {
      out[u].push_back(edges.size());
      edges.push_back({v, cap, cost});
      out[v].push_back(edges.size());
      edges.push_back({u, 0, -cost});
    };
    std::vector<std::vector<std::size_t>> cell_edge(nc, std::vector<std::size_t>(np, SIZE_MAX));
    for (std::size_t c = 0; c < nc; ++c) add_edge(source, c, static_cast<std::int64_t>(row_need[c]), 0);
    for (std::size_t c = 0; c < nc; ++c) {
      for (std::size_t p = 0; p < np; ++p) {
        if (rem[c][p] <= 1e-9) continue;
        cell_edge[c][p] = edges.size();
        add_edge(c, nc + p, 1, -static_cast<std::int64_t>(std::llround(rem[c][p] * 1e9)));
      }
    }
    for (std::size_t p = 0; p < np; ++p) add_edge(nc + p, sink, col_need[p], 0);

    std::size_t needed = std::accumulate(row_need.begin(), row_need.end(), std::size_t{0});
    constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
    while (needed > 0) {
      std::vector<std::int64_t> dist(nodes, kInf);
      std::vector<std::size_t> via(nodes, SIZE_MAX);
      dist[source] = 0;
      for (std::size_t round = 0; round + 1 < nodes; ++round) {
        bool changed = false;
        for (std::size_t u = 0; u < nodes; ++u) {
          if (dist[u] == kInf) continue;
          for (auto e : out[u]) {
            if (edges[e].cap > 0 && dist[u] + edges[e].cost < dist[edges[e].to]) {
              dist[edges[e].to] = dist[u] + edges[e].cost;
              via[edges[e].to] = e;
              changed = true;
            }
          }
        }
        if (!changed) break;
      }
      if (dist[sink] == kInf) {
        feasible = false;
        break;
      }
      for (std::size_t v = sink; v != source; v = edges[via[v] ^ 1].to) {
        edges[via[v]].cap -= 1;
        edges[via[v] ^ 1].cap += 1;
      }
      --needed;
    }
    for (std::size_t c = 0; c < nc && feasible; ++c) {
      for (std::size_t p = 0; p < np; ++p) extra[c][p] = cell_edge[c][p] != SIZE_MAX && edges[cell_edge[c][p]].cap == 0;
    }
  }

  if (feasible) {
    for (std::size_t c = 0; c < nc; ++c) {
      for (std::size_t p = 0; p < np; ++p) cells[c][p] += extra[c][p] ? 1 : 0;
    }
  } else {
    for (std::size_t c = 0; c < nc; ++c) cells[c] = largest_remainder(fractions, class_sizes[c]);
  }
  return cells;
}

// Shuffles each class's units and cuts them by the cell counts.
std::vector<SplitPart> cut_units(const std::vector<Unit>& units, const std::vector<std::vector<std::size_t>>& classes,
                                 const std::vector<std::vector<std::size_t>>& cells,
                                 const std::vector<std::string>& names, std::uint64_t seed) {
  std::vector<SplitPart> parts(names.size());
  for (std::size_t p = 0; p < names.size(); ++p) parts[p].name = names[p];
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto members = classes[c];
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
    rng.shuffle(std::span(members));
    std::size_t pos = 0;
    for (std::size_t p = 0; p < names.size(); ++p) {
      for (std::size_t i = 0; i < cells[c][p]; ++i, ++pos) {
        const auto& u = units[members[pos]];
        parts[p].items.insert(parts[p].items.end(), u.items.begin(), u.items.end());
      }
    }
  }
  for (auto& part : parts) {
    std::sort(part.items.begin(), part.items.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  }
  return parts;
}

std::vector<std::string> default_names(std::size_t n) {
  if (n == 3) return {"train", "val", "test"};
  if (n == 1) return {"all"};
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.push_back("part_" + std::to_string(i));
  return names;
}

std::vector<std::size_t> class_sizes_of(const std::vector<std::vector<std::size_t>>& classes) {
  std::vector<std::size_t> sizes;
  for (const auto& c : classes) sizes.push_back(c.size());
  return sizes;
}

}  // namespace

const SplitPart& DatasetSplit::part(std::string_view part_name) const {
  for (const auto& p : parts) {
    if (p.name == part_name) return p;
  }
  throw InvalidArgument("split '" + name + "' has no part '" + std::string(part_name) + "'");
}

bool DatasetSplit::has_part(std::string_view part_name) const {
  return std::any_of(parts.begin(), parts.end(), [&](const auto& p) { return p.name == part_name; });
}

std::vector<std::size_t> DatasetSplit::indices(std::string_view part_name) const {
  std::vector<std::size_t> out;
  for (const auto& item : part(part_name).items) out.push_back(item.index);
  return out;
}

std::size_t DatasetSplit::total_items() const {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.items.size();
  return n;
}

void DatasetSplit::check_disjoint() const {
  std::unordered_map<std::size_t, std::string_view> owner;
  for (const auto& p : parts) {
    for (const auto& item : p.items) {
      auto [it, inserted] = owner.emplace(item.index, p.name);
      if (!inserted) {
        throw ValidationError("index " + std::to_string(item.index) + " appears in both '" + std::string(it->second) +
                              "' and '" + p.name + "'");
      }
    }
  }
}

std::vector<std::size_t> largest_remainder(std::span<const double> weights, std::size_t total) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> out(weights.size(), 0);
  if (weights.empty() || total == 0) return out;
  if (!(sum > 0.0)) throw InvalidArgument("largest_remainder needs positive total weight");
  std::vector<double> rem(weights.size());
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = weights[i] / sum * static_cast<double>(total);
    out[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(out[i]);
    used += out[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; used < total; ++i, ++used) ++out[order[i % order.size()]];
  return out;
}

DatasetSplit stratified_split(std::span<const LabeledIndex> items, std::span<const double> fractions,
                              std::uint64_t seed, std::vector<std::string> part_names) {
  check_fractions(fractions);
  if (part_names.empty()) part_names = default_names(fractions.size());
  if (part_names.size() != fractions.size()) throw InvalidArgument("one part name per fraction required");
  if (items.empty()) throw ValidationError("cannot split an empty item list");

  const auto units = make_units(items);
  const auto classes = units_by_class(units);
  const auto cells = controlled_rounding(class_sizes_of(classes), fractions);

  DatasetSplit split;
  split.name = "stratified";
  split.seed = seed;
  split.fractions.assign(fractions.begin(), fractions.end());
  split.parts = cut_units(units, classes, cells, part_names, seed);
  split.check_disjoint();
  return split;
}

DatasetSplit few_shot_subset(const DatasetSplit& split, double train_fraction,
                             std::optional<std::size_t> per_class_cap, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw InvalidArgument("train_fraction must be in (0, 1]");
  if (per_class_cap && *per_class_cap < 1) throw InvalidArgument("per_class_cap must be at least 1");

  DatasetSplit out = split;
  out.name = split.name + "+fewshot";
  out.warnings = split.warnings;
  auto it = std::find_if(out.parts.begin(), out.parts.end(), [](const auto& p) { return p.name == "train"; });
  if (it == out.parts.end()) throw InvalidArgument("split has no train part");
  const auto& train = it->items;
  if (train.empty()) return out;

  std::map<std::uint32_t, std::vector<std::size_t>> by_class;  // label -> positions in train
  for (std::size_t i = 0; i < train.size(); ++i) by_class[train[i].label].push_back(i);
  std::vector<double> weights;
  for (const auto& [label, pos] : by_class) weights.push_back(static_cast<double>(pos.size()));
  const auto total = static_cast<std::size_t>(std::ceil(train_fraction * static_cast<double>(train.size()) - 1e-9));
  const auto quotas = largest_remainder(weights, total);

  std::vector<std::size_t> keep;
  std::size_t c = 0;
  for (auto& [label, positions] : by_class) {
    std::size_t q = std::max<std::size_t>(quotas[c++], 1);
    if (per_class_cap) q = std::min(q, *per_class_cap);
    q = std::min(q, positions.size());
    if (q < positions.size()) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(label)));
      rng.shuffle(std::span(positions));
    }
    keep.insert(keep.end(), positions.begin(), positions.begin() + static_cast<std::ptrdiff_t>(q));
  }
  std::sort(keep.begin(), keep.end());
  std::vector<LabeledIndex> subset;
  subset.reserve(keep.size());
  for (auto pos : keep) subset.push_back(train[pos]);
  it->items = std::move(subset);
  return out;
}

DatasetSplit holdout_kfold(std::span<const LabeledIndex> items, double holdout_fraction, std::size_t k,
                           std::uint64_t seed) {
  if (k < 2) throw InvalidArgument("k must be at least 2");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw InvalidArgument("holdout_fraction must be in [0, 1)");
  if (items.empty()) throw ValidationError("cannot split an empty item list");

  DatasetSplit split;
  split.name = "holdout_kfold";
  split.seed = seed;
  split.fractions.push_back(holdout_fraction);
  for (std::size_t f = 0; f < k; ++f) split.fractions.push_back((1.0 - holdout_fraction) / static_cast<double>(k));

  const auto units = make_units(items);
  const auto classes = units_by_class(units);
  std::vector<LabeledIndex> rest;
  SplitPart test{"test", {}};
  if (holdout_fraction > 0.0) {
    const std::vector<double> fr{1.0 - holdout_fraction, holdout_fraction};
    const auto cells = controlled_rounding(class_sizes_of(classes), fr);
    auto parts = cut_units(units, classes, cells, {"rest", "test"}, derive_seed(seed, "holdout"));
    rest = std::move(parts[0].items);
    test = std::move(parts[1]);
  } else {
    rest.assign(items.begin(), items.end());
  }

  const auto rest_units = make_units(rest);
  const auto rest_classes = units_by_class(rest_units);
  for (std::size_t c = 0; c < rest_classes.size(); ++c) {
    if (rest_classes[c].size() < k) {
      split.warnings.push_back("class " + std::to_string(c) + " has " + std::to_string(rest_classes[c].size()) +
                               " units for " + std::to_string(k) + " folds; distributed round-robin");
    }
  }
  std::vector<std::string> names;
  for (std::size_t f = 0; f < k; ++f) names.push_back("fold_" + std::to_string(f));
  const std::vector<double> equal(k, 1.0 / static_cast<double>(k));
  const auto cells = controlled_rounding(class_sizes_of(rest_classes), equal);
  auto folds = cut_units(rest_units, rest_classes, cells, names, derive_seed(seed, "folds"));

  split.parts.push_back(std::move(test));
  for (auto& f : folds) split.parts.push_back(std::move(f));
  split.check_disjoint();
  return split;
}

std::size_t fold_count(const DatasetSplit& split) {
  std::size_t k = 0;
  while (split.has_part("fold_" + std::to_string(k))) ++k;
  return k;
}

DatasetSplit cv_fold(const DatasetSplit& folds, std::size_t fold) {
  const std::size_t k = fold_count(folds);
  if (fold >= k) throw InvalidArgument("fold " + std::to_string(fold) + " out of range for " + std::to_string(k) + " folds");
  DatasetSplit out;
  out.name = folds.name + "/fold_" + std::to_string(fold);
  out.seed = folds.seed;
  out.warnings = folds.warnings;
  SplitPart train{"train", {}};
  for (std::size_t f = 0; f < k; ++f) {
    if (f == fold) continue;
    const auto& items = folds.part("fold_" + std::to_string(f)).items;
    train.items.insert(train.items.end(), items.begin(), items.end());
  }
  std::sort(train.items.begin(), train.items.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  out.parts.push_back(std::move(train));
  out.parts.push_back({"val", folds.part("fold_" + std::to_string(fold)).items});
  if (folds.has_part("test")) out.parts.push_back({"test", folds.part("test").items});
  return out;
}

std::string format_split(const DatasetSplit& split) {
  std::ostringstream out;
  for (const auto& part : split.parts) {
    for (const auto& item : part.items) {
      out << part.name << ',' << item.index << ',' << item.label;
      if (item.group) out << ',' << *item.group;
      out << '\n';
    }
  }
  return out.str();
}

DatasetSplit parse_split(std::string_view text, const std::string& locator) {
  DatasetSplit split;
  split.name = locator;
  std::map<std::string, std::size_t> part_slot;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    const char delim = line.find('\t') != std::string::npos ? '\t' : ',';
    while (std::getline(ss, f, delim)) fields.push_back(f);
    const std::string ctx = locator + ":" + std::to_string(lineno);
    if (fields.size() < 3 || fields.size() > 4) throw FormatError(ctx + ": expected part,index,label[,group]");
    LabeledIndex item;
    try {
      std::size_t used = 0;
      item.index = std::stoull(fields[1], &used);
      if (used != fields[1].size() || fields[1][0] == '-') throw std::invalid_argument("index");
      const auto label = std::stoull(fields[2], &used);
      if (used != fields[2].size() || fields[2][0] == '-' || label > UINT32_MAX) throw std::invalid_argument("label");
      item.label = static_cast<std::uint32_t>(label);
    } catch (const std::exception&) {
      throw FormatError(ctx + ": malformed index or label");
    }
    if (fields.size() == 4) item.group = fields[3];
    auto [it, inserted] = part_slot.emplace(fields[0], split.parts.size());
    if (inserted) split.parts.push_back({fields[0], {}});
    split.parts[it->second].items.push_back(std::move(item));
  }
  split.check_disjoint();
  return split;
}

void write_split_file(const DatasetSplit& split, const std::filesystem::path& destination) {
  write_text_atomic(destination, format_split(split));
}

DatasetSplit read_split_file(const std::filesystem::path& source) {
  const auto bytes = read_file_bytes(source);
  return parse_split(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), source.string());
}

}  // namespace curate
