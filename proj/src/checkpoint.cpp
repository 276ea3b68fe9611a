#include "ddl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ddl {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'D', 'D', 'L', '1'};

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::size_t scalar_size(DType t) { return t == DType::f32 ? 4 : 8; }

}  // namespace

template <typename S>
CheckpointBlob CheckpointBlob::from(const std::string& name, const Shape& shape,
                                   const Eigen::Array<S, Eigen::Dynamic, 1>& data) {
  CheckpointBlob b;
  b.name = name;
  b.dtype = sizeof(S) == 4 ? DType::f32 : DType::f64;
  b.shape = shape;
  b.bytes.resize(static_cast<std::size_t>(data.size()) * sizeof(S));
  if (!b.bytes.empty()) std::memcpy(b.bytes.data(), data.data(), b.bytes.size());
  return b;
}

template <typename S>
Eigen::Array<S, Eigen::Dynamic, 1> CheckpointBlob::values() const {
  const std::size_t n = static_cast<std::size_t>(numel(shape));
  if (dtype == DType::f32) {
    Eigen::Array<float, Eigen::Dynamic, 1> v(static_cast<Index>(n));
    if (n) std::memcpy(v.data(), bytes.data(), n * 4);
    return v.template cast<S>();
  }
  Eigen::Array<double, Eigen::Dynamic, 1> v(static_cast<Index>(n));
  if (n) std::memcpy(v.data(), bytes.data(), n * 8);
  return v.template cast<S>();
}

const CheckpointBlob& Checkpoint::blob(const std::string& name) const {
  for (const auto& b : blobs)
    if (b.name == name) return b;
  throw CheckpointError("checkpoint has no tensor named '" + name + "'");
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  const std::string header = ckpt.header.dump();
  put<std::uint64_t>(out, header.size());
  out += header;
  for (const auto& b : ckpt.blobs) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(b.name.size()));
    out += b.name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(b.dtype));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(b.shape.size()));
    for (Index d : b.shape) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    out.append(reinterpret_cast<const char*>(b.bytes.data()), b.bytes.size());
  }
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != std::string(kMagic, 4)) throw CheckpointError("not a checkpoint: bad magic bytes");
  const auto header_len = r.get<std::uint64_t>("header length");
  if (header_len > bytes.size()) throw CheckpointError("truncated checkpoint while reading header");
  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(r.take(static_cast<std::size_t>(header_len), "header"));
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const int version = ckpt.header.value("format_version", -1);
  if (version != kCheckpointFormatVersion)
    throw CheckpointError("unsupported checkpoint format version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointFormatVersion) + ")");
  while (!r.done()) {
    CheckpointBlob b;
    b.name = r.take(r.get<std::uint32_t>("tensor name length"), "tensor name");
    const auto dtype = r.get<std::uint8_t>("tensor dtype");
    if (dtype > 1) throw CheckpointError("unknown dtype in tensor '" + b.name + "'");
    b.dtype = static_cast<DType>(dtype);
    const auto ndim = r.get<std::uint32_t>("tensor rank");
    if (ndim > 16) throw CheckpointError("implausible rank in tensor '" + b.name + "'");
    std::size_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
      const auto d = r.get<std::uint64_t>("tensor shape");
      if (d > bytes.size()) throw CheckpointError("truncated checkpoint while reading tensor '" + b.name + "'");
      b.shape.push_back(static_cast<Index>(d));
      count *= static_cast<std::size_t>(d);
    }
    const std::size_t n = count * scalar_size(b.dtype);
    if (n > bytes.size()) throw CheckpointError("truncated checkpoint while reading tensor '" + b.name + "'");
    const std::string raw = r.take(n, "tensor data");
    b.bytes.assign(raw.begin(), raw.end());
    ckpt.blobs.push_back(std::move(b));
  }
  return ckpt;
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

template CheckpointBlob CheckpointBlob::from(const std::string&, const Shape&, const Eigen::Array<float, Eigen::Dynamic, 1>&);
template CheckpointBlob CheckpointBlob::from(const std::string&, const Shape&, const Eigen::Array<double, Eigen::Dynamic, 1>&);
template Eigen::Array<float, Eigen::Dynamic, 1> CheckpointBlob::values() const;
template Eigen::Array<double, Eigen::Dynamic, 1> CheckpointBlob::values() const;

}  // namespace ddl
