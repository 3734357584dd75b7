#pragma once

#include <Eigen/Core>

#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace curate {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXf = RowMatrix<float>;
using RowMatrixXd = RowMatrix<double>;

struct FrameRecord {
  std::string video_id;
  std::uint64_t frame_number = 0;
  std::uint64_t timestamp_ms = 0;

  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
  friend auto operator<=>(const FrameRecord&, const FrameRecord&) = default;
};

/// Positive rational frame rate, e.g. {30000, 1001} for NTSC.
struct Fps {
  std::int64_t num = 0;
  std::int64_t den = 1;

  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

/// Frame embeddings, one row per frame. `source_tag` is provenance only: it
/// is not persisted in EMB1 and does not take part in equality.
struct EmbeddingMatrix {
  std::uint32_t dim = 0;
  std::vector<FrameRecord> frames;
  RowMatrixXf values;
  std::string source_tag;

  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::uint32_t d, std::vector<FrameRecord> f, RowMatrixXf v, std::string tag = {});

  std::size_t rows() const { return frames.size(); }

  /// Throws ValidationError on: shape mismatch, duplicate (video_id, frame_number),
  /// non-finite value (message names the row).
  void validate() const;

  /// Rows in the given order.
  EmbeddingMatrix select(std::span<const std::size_t> rows) const;

  friend bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
    return a.dim == b.dim && a.frames == b.frames && a.values == b.values;
  }
};

// ---- temporal downsampling -------------------------------------------------

/// Indices of the frames kept when resampling from `source` to `target` fps.
/// A frame is kept when floor(frame_number * target / source) differs from the
/// previous frame of the same video (the first frame of a video is always
/// kept). Videos are independent; input order is preserved.
std::vector<std::size_t> temporal_downsample_indices(std::span<const FrameRecord> frames, Fps source,
                                                     Fps target);

std::vector<FrameRecord> temporal_downsample(std::span<const FrameRecord> frames, Fps source, Fps target);

/// First frame whose timestamp disagrees with frame_number * 1000 / fps by
/// more than 1 ms, if any.
std::optional<std::size_t> find_timestamp_mismatch(std::span<const FrameRecord> frames, Fps source);

// ---- EMB1 ------------------------------------------------------------------

inline constexpr std::size_t kEmb1HeaderBytes = 28;

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& matrix);
EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes, const std::string& locator = "<memory>");

/// Writes EMB1 (temp file + rename). Returns bytes written.
std::uint64_t write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& destination);
EmbeddingMatrix read_embeddings(const std::filesystem::path& source);

// ---- frame lists -----------------------------------------------------------

/// One `video_id,frame_number,timestamp_ms` record per line. Tabs are also
/// accepted as the delimiter; blank lines and `#` comments are skipped.
std::vector<FrameRecord> read_frame_list(const std::filesystem::path& source);
void write_frame_list(std::span<const FrameRecord> frames, const std::filesystem::path& destination);

// ---- raw byte helpers ------------------------------------------------------

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& source);
void write_file_atomic(const std::filesystem::path& destination, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& destination, const std::string& text);

// ---- per-image encoder tokens ----------------------------------------------

struct TokenLayer {
  Eigen::VectorXf cls;
  RowMatrixXf patches;  // (grid_h * grid_w) x dim, row-major over the grid
};

/// Tokens recorded from the last layers of a frozen encoder for one image.
/// `layers` is ordered shallow to deep; the last entry is the final layer.
struct LayerTokenSet {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<TokenLayer> layers;

  int dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().cls.size()); }
  /// Throws InvalidArgument if layer shapes disagree or fewer than
  /// `min_layers` layers are present.
  void validate(std::size_t min_layers = 1) const;
};

}  // namespace curate
