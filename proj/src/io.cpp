#include "mpsae/io.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "mpsae/errors.hpp"

namespace mpsae {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::uint32_t crc32(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded pieces.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

std::span<const unsigned char> ByteReader::bytes(std::size_t n) {
  if (n > remaining()) throw FormatError("truncated input");
  auto out = b_.subspan(pos_, n);
  pos_ += n;
  return out;
}

std::string ByteReader::text(std::size_t n) {
  auto b = bytes(n);
  return std::string(b.begin(), b.end());
}

std::uint8_t ByteReader::u8() { return bytes(1)[0]; }

std::uint32_t ByteReader::u32() {
  auto b = bytes(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  auto b = bytes(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

namespace {
constexpr std::string_view kEmbMagic = "SAEEMB";
}

std::vector<unsigned char> encode_embedding(const Matrix& data, int scalar_width) {
  if (scalar_width != 4 && scalar_width != 8) throw DomainError("embedding: scalar width must be 4 or 8");
  ByteWriter w;
  w.text(kEmbMagic);
  w.u32(kEmbeddingVersion);
  w.u64(data.rows());
  w.u32(static_cast<std::uint32_t>(data.cols()));
  w.u8(static_cast<std::uint8_t>(scalar_width));
  for (double v : data.data()) {
    if (scalar_width == 4)
      w.f32(static_cast<float>(v));
    else
      w.f64(v);
  }
  w.u32(crc32(w.buffer()));
  return std::move(w.buffer());
}

Matrix decode_embedding(std::span<const unsigned char> bytes, int* scalar_width) {
  ByteReader r(bytes);
  if (r.text(kEmbMagic.size()) != kEmbMagic) throw FormatError("embedding: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kEmbeddingVersion) throw VersionError("embedding: unsupported version " + std::to_string(version));
  const std::uint64_t n = r.u64();
  const std::uint32_t m = r.u32();
  const int width = r.u8();
  if (width != 4 && width != 8) throw FormatError("embedding: bad scalar width");
  const std::size_t header = r.offset();
  // Exact payload length check before touching any values.
  if (m != 0 && n > (bytes.size() / m)) throw FormatError("embedding: truncated payload");
  const std::size_t payload = static_cast<std::size_t>(n) * m * static_cast<std::size_t>(width);
  if (bytes.size() != header + payload + 4) throw FormatError("embedding: payload length does not match header");
  const std::uint32_t stored = ByteReader(bytes.subspan(header + payload)).u32();
  if (stored != crc32(bytes.subspan(0, header + payload))) throw ChecksumError("embedding: checksum mismatch");
  Matrix out(static_cast<std::size_t>(n), m);
  for (auto& v : out.data()) v = width == 4 ? static_cast<double>(r.f32()) : r.f64();
  if (scalar_width) *scalar_width = width;
  return out;
}

void write_embedding_file(const std::filesystem::path& path, const Matrix& data, int scalar_width) {
  write_file_atomic(path, encode_embedding(data, scalar_width));
}

std::filesystem::path labels_path_for(const std::filesystem::path& embedding_path) {
  return std::filesystem::path(embedding_path.string() + ".labels");
}

EmbeddingFile read_embedding_file(const std::filesystem::path& path) {
  EmbeddingFile f;
  f.data = decode_embedding(read_file(path), &f.scalar_width);
  const auto lp = labels_path_for(path);
  if (std::filesystem::exists(lp)) f.labels = read_labels_file(lp, f.data.rows());
  return f;
}

void write_labels_file(const std::filesystem::path& path, std::span<const Modality> labels) {
  std::vector<unsigned char> b(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) b[i] = static_cast<unsigned char>(labels[i]);
  write_file_atomic(path, b);
}

std::vector<Modality> read_labels_file(const std::filesystem::path& path, std::size_t expected_rows) {
  const auto b = read_file(path);
  if (b.size() != expected_rows) throw FormatError("labels: expected one byte per row");
  std::vector<Modality> out(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] > 1) throw FormatError("labels: values must be 0 (text) or 1 (image)");
    out[i] = static_cast<Modality>(b[i]);
  }
  return out;
}

}  // namespace mpsae
