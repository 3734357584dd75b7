#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "curate/embedding_store.hpp"

namespace curate {

/// Desk-scale stand-in for encoder output: videos drawn around planted modes,
/// with a fraction of frames repeated almost verbatim (near-duplicates).
struct SyntheticSpec {
  std::size_t rows = 100000;
  std::uint32_t dim = 64;
  std::size_t videos = 200;
  std::size_t modes = 64;
  std::size_t classes = 4;
  double duplicate_fraction = 0.05;
  /// per-coordinate spread of frames around their video centre
  double frame_noise = 1.0;
  /// stride between stored frame numbers (6 = 30 fps source kept at 5 fps)
  std::uint64_t frame_stride = 6;
  std::uint64_t seed = 1;
};

struct SyntheticDataset {
  EmbeddingMatrix matrix;
  std::vector<std::uint32_t> labels;  // per row
};

SyntheticDataset make_synthetic(const SyntheticSpec& spec);

using FrameKey = std::pair<std::string, std::uint64_t>;
using LabelMap = std::map<FrameKey, std::uint32_t>;

/// `video_id,frame_number,label` per line.
void write_labels(std::span<const FrameRecord> frames, std::span<const std::uint32_t> labels,
                  const std::filesystem::path& destination);
LabelMap read_labels(const std::filesystem::path& source);

}  // namespace curate
