#include <string_view>

#include "mpsae/errors.hpp"
#include "mpsae/io.hpp"
#include "mpsae/serialize.hpp"
#include "mpsae/training.hpp"

namespace mpsae {

namespace {

constexpr std::string_view kMagic = "MPSAECKPT";

struct Blob {
  std::string name;
  std::size_t rows;
  std::size_t cols;
};

void put_matrix(ByteWriter& w, Json& order, const std::string& name, const Matrix& m) {
  order.push_back(Json{{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  for (double v : m.data()) w.f64(v);
}

void put_vector(ByteWriter& w, Json& order, const std::string& name, const Vector& v) {
  order.push_back(Json{{"name", name}, {"rows", 1}, {"cols", v.size()}});
  for (double x : v) w.f64(x);
}

void put_gradients(ByteWriter& w, Json& order, const std::string& prefix, const Gradients& g) {
  put_matrix(w, order, prefix + ".atoms", g.atoms);
  put_matrix(w, order, prefix + ".encoder_rows", g.encoder_rows);
  put_vector(w, order, prefix + ".encoder_bias", g.encoder_bias);
  put_vector(w, order, prefix + ".pre_bias", g.pre_bias);
}

class BlobReader {
 public:
  BlobReader(ByteReader& r, const Json& order) : r_(r), order_(order) {}

  Matrix matrix(const std::string& name) {
    const Blob b = next(name);
    Matrix m(b.rows, b.cols);
    for (auto& v : m.data()) v = r_.f64();
    return m;
  }

  Vector vector(const std::string& name) {
    const Blob b = next(name);
    if (b.rows != 1) throw FormatError("checkpoint: blob '" + name + "' is not a vector");
    Vector v(b.cols);
    for (auto& x : v) x = r_.f64();
    return v;
  }

  Gradients gradients(const std::string& prefix) {
    Gradients g;
    g.atoms = matrix(prefix + ".atoms");
    g.encoder_rows = matrix(prefix + ".encoder_rows");
    g.encoder_bias = vector(prefix + ".encoder_bias");
    g.pre_bias = vector(prefix + ".pre_bias");
    return g;
  }

  void done() const {
    if (i_ != order_.size()) throw FormatError("checkpoint: unread blobs remain");
  }

 private:
  Blob next(const std::string& name) {
    if (i_ >= order_.size()) throw FormatError("checkpoint: missing blob '" + name + "'");
    const Json& e = order_[i_++];
    Blob b{e.at("name").get<std::string>(), e.at("rows").get<std::size_t>(), e.at("cols").get<std::size_t>()};
    if (b.name != name) throw FormatError("checkpoint: expected blob '" + name + "', found '" + b.name + "'");
    if (b.cols != 0 && b.rows > r_.remaining() / 8 / b.cols) throw FormatError("checkpoint: truncated blob");
    return b;
  }

  ByteReader& r_;
  const Json& order_;
  std::size_t i_ = 0;
};

}  // namespace

std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ckpt) {
  const TrainState& s = ckpt.state;
  const EncoderModel& model = s.model;

  ByteWriter blobs;
  Json order = Json::array();
  put_matrix(blobs, order, "atoms", model.dictionary.atom_rows());
  put_vector(blobs, order, "pre_bias", model.dictionary.pre_bias());
  put_matrix(blobs, order, "encoder_rows", model.encoder_rows);
  put_vector(blobs, order, "encoder_bias", model.encoder_bias);
  put_gradients(blobs, order, "adam.m", s.adam.m);
  put_gradients(blobs, order, "adam.v", s.adam.v);
  Matrix hist(s.history.size(), 4);
  for (std::size_t i = 0; i < s.history.size(); ++i) {
    const auto& h = s.history[i];
    hist(i, 0) = h.loss;
    hist(i, 1) = h.mse;
    hist(i, 2) = h.mean_l0;
    hist(i, 3) = h.l1_weight;
  }
  put_matrix(blobs, order, "history", hist);

  Json manifest;
  manifest["config"] = to_json(ckpt.config);
  manifest["variant"] = to_string(model.variant);
  manifest["shapes"] = Json{{"dim", model.dim()}, {"latents", model.latents()}};
  manifest["norm_mode"] = model.dictionary.norm_mode() == NormMode::kExactUnit ? "exact-unit" : "unit-ball";
  manifest["tied"] = model.tied;
  manifest["k"] = model.k;
  manifest["prefixes"] = model.prefixes;
  manifest["stop"] = to_json(model.stop);
  // Batches are a pure function of (seed, step), so this pins the data stream.
  manifest["rng"] = Json{{"algorithm", RngStream::kAlgorithm}, {"seed", ckpt.config.seed}, {"position", s.step}};
  manifest["step"] = s.step;
  manifest["adam_step"] = s.adam.step;
  manifest["l1_weight"] = s.l1_weight;
  manifest["usage"] = s.usage;
  manifest["blobs"] = std::move(order);
  const std::string text = manifest.dump();

  ByteWriter w;
  w.text(kMagic);
  w.u32(kCheckpointVersion);
  w.u64(text.size());
  w.text(text);
  w.bytes(blobs.buffer());
  w.u32(crc32(w.buffer()));
  return std::move(w.buffer());
}

Checkpoint deserialize_checkpoint(std::span<const unsigned char> bytes) {
  ByteReader r(bytes);
  if (r.text(kMagic.size()) != kMagic) throw FormatError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint64_t len = r.u64();
  if (len > r.remaining()) throw FormatError("checkpoint: truncated manifest");
  Json manifest;
  try {
    manifest = Json::parse(r.text(static_cast<std::size_t>(len)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  // Length check against the declared blobs before verifying the checksum,
  // so a short file reports truncation rather than corruption.
  std::size_t payload = 0;
  try {
    for (const auto& b : manifest.at("blobs")) payload += 8 * b.at("rows").get<std::size_t>() * b.at("cols").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad blob table: ") + e.what());
  }
  if (bytes.size() < r.offset() + payload + 4) throw FormatError("checkpoint: truncated file");
  if (bytes.size() > r.offset() + payload + 4) throw FormatError("checkpoint: trailing bytes");
  const std::size_t body = bytes.size() - 4;
  const std::uint32_t stored = ByteReader(bytes.subspan(body)).u32();
  if (stored != crc32(bytes.subspan(0, body))) throw ChecksumError("checkpoint: checksum mismatch");

  Checkpoint ck;
  try {
    from_json(manifest.at("config"), ck.config, "checkpoint.config");
    TrainState& s = ck.state;
    EncoderModel& model = s.model;
    model.variant = variant_from_string(manifest.at("variant").get<std::string>());
    const auto mode = manifest.at("norm_mode").get<std::string>() == "exact-unit" ? NormMode::kExactUnit
                                                                                  : NormMode::kUnitBall;
    model.tied = manifest.at("tied").get<bool>();
    model.k = manifest.at("k").get<double>();
    model.prefixes = manifest.at("prefixes").get<std::vector<std::size_t>>();
    from_json(manifest.at("stop"), model.stop, "checkpoint.stop");
    s.step = manifest.at("step").get<std::size_t>();
    s.adam.step = manifest.at("adam_step").get<std::uint64_t>();
    s.l1_weight = manifest.at("l1_weight").get<double>();
    s.usage = manifest.at("usage").get<std::vector<std::size_t>>();

    BlobReader blobs(r, manifest.at("blobs"));
    Matrix atoms = blobs.matrix("atoms");
    Vector pre_bias = blobs.vector("pre_bias");
    model.dictionary = Dictionary::from_atom_rows(std::move(atoms), std::move(pre_bias), mode);
    model.encoder_rows = blobs.matrix("encoder_rows");
    model.encoder_bias = blobs.vector("encoder_bias");
    s.adam.m = blobs.gradients("adam.m");
    s.adam.v = blobs.gradients("adam.v");
    const Matrix hist = blobs.matrix("history");
    blobs.done();
    for (std::size_t i = 0; i < hist.rows(); ++i)
      s.history.push_back({hist(i, 0), hist(i, 1), hist(i, 2), hist(i, 3)});

    const auto& shapes = manifest.at("shapes");
    if (shapes.at("dim").get<std::size_t>() != model.dim() ||
        shapes.at("latents").get<std::size_t>() != model.latents())
      throw FormatError("checkpoint: shape mismatch between manifest and blobs");
    model.validate();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace mpsae
