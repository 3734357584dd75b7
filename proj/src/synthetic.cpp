#include "curate/synthetic.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "curate/errors.hpp"
#include "curate/random.hpp"

namespace curate {
namespace {

// Box-Muller on the portable uniform source.
double normal(Rng& rng) {
  const double u1 = 1.0 - rng.uniform();
  const double u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

SyntheticDataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.rows == 0 || spec.dim == 0 || spec.videos == 0 || spec.modes == 0 || spec.classes == 0) {
    throw InvalidArgument("synthetic spec sizes must be positive");
  }
  Rng rng(spec.seed);
  const auto d = static_cast<Eigen::Index>(spec.dim);
  RowMatrixXd modes(static_cast<Eigen::Index>(spec.modes), d);
  for (Eigen::Index i = 0; i < modes.size(); ++i) modes.data()[i] = 2.0 * normal(rng);

  SyntheticDataset out;
  out.matrix.dim = spec.dim;
  out.matrix.source_tag = "synthetic";
  out.matrix.values.resize(static_cast<Eigen::Index>(spec.rows), d);
  out.matrix.frames.reserve(spec.rows);
  out.labels.reserve(spec.rows);

  const std::size_t per_video = (spec.rows + spec.videos - 1) / spec.videos;
  std::size_t row = 0;
  for (std::size_t v = 0; v < spec.videos && row < spec.rows; ++v) {
    const std::size_t mode = static_cast<std::size_t>(rng.below(spec.modes));
    Eigen::RowVectorXd centre = modes.row(static_cast<Eigen::Index>(mode));
    for (Eigen::Index c = 0; c < d; ++c) centre(c) += 0.5 * normal(rng);
    char id[32];
    std::snprintf(id, sizeof id, "vid%05zu", v);
    for (std::size_t f = 0; f < per_video && row < spec.rows; ++f, ++row) {
      const auto r = static_cast<Eigen::Index>(row);
      if (f > 0 && rng.uniform() < spec.duplicate_fraction) {
        for (Eigen::Index c = 0; c < d; ++c) {
          out.matrix.values(r, c) = out.matrix.values(r - 1, c) + static_cast<float>(1e-3 * normal(rng));
        }
      } else {
        for (Eigen::Index c = 0; c < d; ++c) {
          out.matrix.values(r, c) = static_cast<float>(centre(c) + spec.frame_noise * normal(rng));
        }
      }
      const std::uint64_t fn = f * spec.frame_stride;
      out.matrix.frames.push_back({id, fn, fn * 1000 / 30});
      out.labels.push_back(static_cast<std::uint32_t>(mode % spec.classes));
    }
  }
  return out;
}

void write_labels(std::span<const FrameRecord> frames, std::span<const std::uint32_t> labels,
                  const std::filesystem::path& destination) {
  if (frames.size() != labels.size()) throw InvalidArgument("one label per frame required");
  std::ostringstream out;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    out << frames[i].video_id << ',' << frames[i].frame_number << ',' << labels[i] << '\n';
  }
  write_text_atomic(destination, out.str());
}

LabelMap read_labels(const std::filesystem::path& source) {
  std::ifstream in(source);
  if (!in) throw StorageError("cannot open labels: " + source.string());
  LabelMap out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string video, frame, label;
    std::getline(ss, video, ',');
    std::getline(ss, frame, ',');
    std::getline(ss, label, ',');
    try {
      out[{video, std::stoull(frame)}] = static_cast<std::uint32_t>(std::stoul(label));
    } catch (const std::exception&) {
      throw FormatError(source.string() + ":" + std::to_string(lineno) + ": expected video_id,frame_number,label");
    }
  }
  return out;
}

}  // namespace curate
