#include "curate/embedding_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unistd.h>

#include "curate/errors.hpp"

namespace curate {
namespace {

constexpr char kMagic[4] = {'E', 'M', 'B', '1'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 1;

class ByteWriter {
 public:
  explicit ByteWriter(std::vector<std::uint8_t>& out) : out_(out) {}

  template <typename T>
  void put(T value) {
    static_assert(std::is_integral_v<T>);
    using U = std::make_unsigned_t<T>;
    U u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<std::uint8_t>(u & 0xFF));
      u = static_cast<U>(u >> 8);
    }
  }
  void put_f32(float value) { put(std::bit_cast<std::uint32_t>(value)); }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }

 private:
  std::vector<std::uint8_t>& out_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, const std::string& locator) : bytes_(bytes), locator_(locator) {}

  void need(std::size_t n, const char* what) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError(locator_ + ": truncated EMB1 while reading " + what + " (expected at least " +
                        std::to_string(pos_ + n) + " bytes, actual " + std::to_string(bytes_.size()) + ")");
    }
  }
  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<std::make_unsigned_t<T>>(static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i]) << (8 * i));
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  const std::string& locator_;
  std::size_t pos_ = 0;
};

// floor(frame * target / source) in exact integer arithmetic.
__int128 bucket_of(std::uint64_t frame, Fps source, Fps target) {
  const __int128 numer = static_cast<__int128>(frame) * target.num * source.den;
  const __int128 denom = static_cast<__int128>(target.den) * source.num;
  return numer / denom;  // both non-negative
}

void check_fps(Fps fps, const char* which) {
  if (fps.num <= 0 || fps.den <= 0) {
    throw InvalidArgument(std::string(which) + " fps must be positive, got " + std::to_string(fps.num) + "/" +
                          std::to_string(fps.den));
  }
}

std::vector<std::string> split_fields(const std::string& line) {
  const char delim = line.find('\t') != std::string::npos ? '\t' : ',';
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, delim)) {
    const auto b = field.find_first_not_of(" \r");
    const auto e = field.find_last_not_of(" \r");
    fields.push_back(b == std::string::npos ? std::string{} : field.substr(b, e - b + 1));
  }
  return fields;
}

std::uint64_t parse_u64(const std::string& s, const std::string& context) {
  std::size_t used = 0;
  try {
    if (!s.empty() && s[0] == '-') throw std::invalid_argument("negative");
    const auto v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw FormatError(context + ": expected non-negative integer, got '" + s + "'");
  }
}

}  // namespace

EmbeddingMatrix::EmbeddingMatrix(std::uint32_t d, std::vector<FrameRecord> f, RowMatrixXf v, std::string tag)
    : dim(d), frames(std::move(f)), values(std::move(v)), source_tag(std::move(tag)) {}

void EmbeddingMatrix::validate() const {
  if (static_cast<std::size_t>(values.rows()) != frames.size() ||
      (values.rows() > 0 && values.cols() != static_cast<Eigen::Index>(dim))) {
    throw ValidationError("embedding matrix shape " + std::to_string(values.rows()) + "x" +
                          std::to_string(values.cols()) + " does not match " + std::to_string(frames.size()) +
                          " frames of dim " + std::to_string(dim));
  }
  if (dim == 0) throw ValidationError("embedding dim must be positive");
  std::set<std::pair<std::string_view, std::uint64_t>> seen;
  for (std::size_t r = 0; r < frames.size(); ++r) {
    if (!seen.emplace(frames[r].video_id, frames[r].frame_number).second) {
      throw ValidationError("duplicate frame identity (" + frames[r].video_id + ", " +
                            std::to_string(frames[r].frame_number) + ") at row " + std::to_string(r));
    }
    if (!values.row(static_cast<Eigen::Index>(r)).allFinite()) {
      throw ValidationError("non-finite embedding value at row " + std::to_string(r));
    }
  }
}

EmbeddingMatrix EmbeddingMatrix::select(std::span<const std::size_t> rows) const {
  EmbeddingMatrix out;
  out.dim = dim;
  out.source_tag = source_tag;
  out.frames.reserve(rows.size());
  out.values.resize(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= frames.size()) throw InvalidArgument("row " + std::to_string(rows[i]) + " out of range");
    out.frames.push_back(frames[rows[i]]);
    out.values.row(static_cast<Eigen::Index>(i)) = values.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

std::vector<std::size_t> temporal_downsample_indices(std::span<const FrameRecord> frames, Fps source, Fps target) {
  check_fps(source, "source");
  check_fps(target, "target");
  if (static_cast<__int128>(target.num) * source.den > static_cast<__int128>(source.num) * target.den) {
    throw InvalidArgument("target fps exceeds source fps");
  }
  struct Last {
    std::uint64_t frame;
    __int128 bucket;
  };
  std::map<std::string_view, Last> last;
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& f = frames[i];
    const __int128 bucket = bucket_of(f.frame_number, source, target);
    auto it = last.find(f.video_id);
    if (it == last.end()) {
      last.emplace(f.video_id, Last{f.frame_number, bucket});
      kept.push_back(i);
      continue;
    }
    if (f.frame_number <= it->second.frame) {
      throw InvalidArgument("frames of video '" + f.video_id + "' are not strictly increasing at position " +
                            std::to_string(i));
    }
    if (bucket != it->second.bucket) kept.push_back(i);
    it->second = {f.frame_number, bucket};
  }
  return kept;
}

std::vector<FrameRecord> temporal_downsample(std::span<const FrameRecord> frames, Fps source, Fps target) {
  std::vector<FrameRecord> out;
  for (std::size_t i : temporal_downsample_indices(frames, source, target)) out.push_back(frames[i]);
  return out;
}

std::optional<std::size_t> find_timestamp_mismatch(std::span<const FrameRecord> frames, Fps source) {
  check_fps(source, "source");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    // frame_number * 1000 * den / num, compared in exact integers scaled by num.
    const __int128 ideal_scaled = static_cast<__int128>(frames[i].frame_number) * 1000 * source.den;
    const __int128 ts_scaled = static_cast<__int128>(frames[i].timestamp_ms) * source.num;
    __int128 diff = ideal_scaled - ts_scaled;
    if (diff < 0) diff = -diff;
    if (diff > source.num) return i;
  }
  return std::nullopt;
}

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& matrix) {
  if (matrix.rows() > 0 || matrix.values.size() > 0) matrix.validate();
  if (matrix.dim == 0) throw ValidationError("embedding dim must be positive");
  std::vector<std::uint8_t> out;
  std::size_t index_bytes = 0;
  for (const auto& f : matrix.frames) index_bytes += 2 + f.video_id.size() + 16;
  out.reserve(kEmb1HeaderBytes + index_bytes + matrix.rows() * matrix.dim * 4);
  ByteWriter w(out);
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kVersion);
  w.put<std::uint64_t>(matrix.rows());
  w.put<std::uint32_t>(matrix.dim);
  w.put<std::uint8_t>(kDtypeF32);
  for (int i = 0; i < 7; ++i) w.put<std::uint8_t>(0);
  for (const auto& f : matrix.frames) {
    if (f.video_id.size() > 0xFFFF) throw ValidationError("video_id longer than 65535 bytes: " + f.video_id.substr(0, 32));
    w.put<std::uint16_t>(static_cast<std::uint16_t>(f.video_id.size()));
    w.put_bytes(f.video_id.data(), f.video_id.size());
    w.put<std::uint64_t>(f.frame_number);
    w.put<std::uint64_t>(f.timestamp_ms);
  }
  for (Eigen::Index r = 0; r < matrix.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < matrix.values.cols(); ++c) w.put_f32(matrix.values(r, c));
  }
  return out;
}

EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> bytes, const std::string& locator) {
  ByteReader r(bytes, locator);
  const auto magic = r.take(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError(locator + ": bad magic, not an EMB1 file");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) throw FormatError(locator + ": unsupported EMB1 version " + std::to_string(version));
  const auto rows = r.get<std::uint64_t>("row count");
  const auto dim = r.get<std::uint32_t>("dim");
  if (dim == 0) throw FormatError(locator + ": dim must be positive");
  const auto dtype = r.get<std::uint8_t>("dtype");
  if (dtype != kDtypeF32) throw FormatError(locator + ": unsupported dtype code " + std::to_string(dtype));
  for (auto b : r.take(7, "reserved")) {
    if (b != 0) throw FormatError(locator + ": reserved header bytes must be zero");
  }
  // Each index entry is at least 18 bytes; reject absurd counts before allocating.
  const std::uint64_t per_row_min = 18 + 4 * static_cast<std::uint64_t>(dim);
  if (rows > (r.size() - r.pos()) / per_row_min) {
    const std::string need = rows > (UINT64_MAX - kEmb1HeaderBytes) / per_row_min
                                 ? std::string("more than 2^64")
                                 : std::to_string(kEmb1HeaderBytes + rows * per_row_min);
    throw FormatError(locator + ": truncated EMB1 with " + std::to_string(rows) + " rows (expected at least " +
                      need + " bytes, actual " + std::to_string(r.size()) + ")");
  }

  EmbeddingMatrix m;
  m.dim = dim;
  m.source_tag = locator;
  m.frames.reserve(rows);
  for (std::uint64_t i = 0; i < rows; ++i) {
    FrameRecord f;
    const auto len = r.get<std::uint16_t>("index entry");
    const auto id = r.take(len, "video_id");
    f.video_id.assign(reinterpret_cast<const char*>(id.data()), id.size());
    f.frame_number = r.get<std::uint64_t>("frame_number");
    f.timestamp_ms = r.get<std::uint64_t>("timestamp_ms");
    m.frames.push_back(std::move(f));
  }
  const std::size_t expected = r.pos() + rows * static_cast<std::size_t>(dim) * 4;
  if (bytes.size() != expected) {
    throw FormatError(locator + ": EMB1 length mismatch (expected " + std::to_string(expected) + " bytes, actual " +
                      std::to_string(bytes.size()) + ")");
  }
  m.values.resize(static_cast<Eigen::Index>(rows), dim);
  const auto payload = bytes.subspan(r.pos());
  for (std::uint64_t i = 0; i < rows; ++i) {
    for (std::uint32_t c = 0; c < dim; ++c) {
      const std::size_t off = (i * dim + c) * 4;
      const std::uint32_t u = static_cast<std::uint32_t>(payload[off]) | (static_cast<std::uint32_t>(payload[off + 1]) << 8) |
                              (static_cast<std::uint32_t>(payload[off + 2]) << 16) |
                              (static_cast<std::uint32_t>(payload[off + 3]) << 24);
      const float v = std::bit_cast<float>(u);
      if (!std::isfinite(v)) {
        throw ValidationError(locator + ": non-finite value at row " + std::to_string(i) + ", column " +
                              std::to_string(c));
      }
      m.values(static_cast<Eigen::Index>(i), c) = v;
    }
  }
  m.validate();
  return m;
}

std::uint64_t write_embeddings(const EmbeddingMatrix& matrix, const std::filesystem::path& destination) {
  const auto bytes = encode_embeddings(matrix);
  write_file_atomic(destination, bytes);
  return bytes.size();
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& source) {
  const auto bytes = read_file_bytes(source);
  return decode_embeddings(bytes, source.string());
}

std::vector<FrameRecord> read_frame_list(const std::filesystem::path& source) {
  std::ifstream in(source);
  if (!in) throw StorageError("cannot open frame list: " + source.string());
  std::vector<FrameRecord> frames;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#' || line.find_first_not_of(" \r\t") == std::string::npos) continue;
    const auto fields = split_fields(line);
    const std::string ctx = source.string() + ":" + std::to_string(lineno);
    if (fields.size() != 3) throw FormatError(ctx + ": expected 3 fields, got " + std::to_string(fields.size()));
    frames.push_back({fields[0], parse_u64(fields[1], ctx), parse_u64(fields[2], ctx)});
  }
  return frames;
}

void write_frame_list(std::span<const FrameRecord> frames, const std::filesystem::path& destination) {
  std::ostringstream out;
  for (const auto& f : frames) out << f.video_id << ',' << f.frame_number << ',' << f.timestamp_ms << '\n';
  write_text_atomic(destination, out.str());
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& source) {
  std::ifstream in(source, std::ios::binary | std::ios::ate);
  if (!in) throw StorageError("cannot open for reading: " + source.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<std::uint8_t> bytes(size);
  in.seekg(0);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size))) {
    throw StorageError("read failed: " + source.string());
  }
  return bytes;
}

void write_file_atomic(const std::filesystem::path& destination, std::span<const std::uint8_t> bytes) {
  auto tmp = destination;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("cannot open for writing: " + destination.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw StorageError("write failed: " + destination.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, destination, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw StorageError("cannot move into place: " + destination.string());
  }
}

void write_text_atomic(const std::filesystem::path& destination, const std::string& text) {
  write_file_atomic(destination,
                    std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void LayerTokenSet::validate(std::size_t min_layers) const {
  if (layers.size() < min_layers) {
    throw InvalidArgument("token set has " + std::to_string(layers.size()) + " layers, need at least " +
                          std::to_string(min_layers));
  }
  if (grid_h <= 0 || grid_w <= 0) throw InvalidArgument("token grid must be non-empty");
  const auto d = layers.front().cls.size();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.cls.size() != d || layer.patches.cols() != d || layer.patches.rows() != grid_h * grid_w) {
      throw InvalidArgument("token layer " + std::to_string(l) + " shape disagrees with layer 0");
    }
  }
}

}  // namespace curate
