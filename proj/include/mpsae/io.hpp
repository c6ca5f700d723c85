#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mpsae/matrix.hpp"

namespace mpsae {

std::uint32_t crc32(std::span<const unsigned char> bytes);

// Append-only little-endian byte buffer.
class ByteWriter {
 public:
  void bytes(std::span<const unsigned char> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void text(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  std::vector<unsigned char>& buffer() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

// Bounds-checked little-endian reader; throws FormatError on truncation.
class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> b) : b_(b) {}
  std::span<const unsigned char> bytes(std::size_t n);
  std::string text(std::size_t n);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  std::span<const unsigned char> b_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path);
// Writes through a temporary file and renames, so readers never see a
// partially written file.
void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

// Row-major matrix container: "SAEEMB", u32 version, u64 n, u32 m,
// u8 scalar width (4 = float32, 8 = float64), payload, CRC32 of everything
// before the trailer.
inline constexpr std::uint32_t kEmbeddingVersion = 1;

enum class Modality : std::uint8_t { kText = 0, kImage = 1 };

struct EmbeddingFile {
  Matrix data;
  int scalar_width = 4;
  // Optional sidecar: one byte per row, 0 = text, 1 = image.
  std::optional<std::vector<Modality>> labels;
};

std::vector<unsigned char> encode_embedding(const Matrix& data, int scalar_width);
Matrix decode_embedding(std::span<const unsigned char> bytes, int* scalar_width = nullptr);

void write_embedding_file(const std::filesystem::path& path, const Matrix& data, int scalar_width = 4);
// Loads the matrix and, if present, the sidecar "<path>.labels".
EmbeddingFile read_embedding_file(const std::filesystem::path& path);
void write_labels_file(const std::filesystem::path& path, std::span<const Modality> labels);
std::vector<Modality> read_labels_file(const std::filesystem::path& path, std::size_t expected_rows);
std::filesystem::path labels_path_for(const std::filesystem::path& embedding_path);

}  // namespace mpsae
