#pragma once

#include "ddl/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddl {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointFormatVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct CheckpointBlob {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<unsigned char> bytes;  // little-endian scalars

  template <typename Scalar>
  static CheckpointBlob from(const std::string& name, const Shape& shape,
                             const Eigen::Array<Scalar, Eigen::Dynamic, 1>& data);
  template <typename Scalar>
  Eigen::Array<Scalar, Eigen::Dynamic, 1> values() const;
};

/// File layout: "DDL1", u64 header length, JSON header, then blobs of
/// (u32 name length, name, u8 dtype, u32 ndim, u64 dims..., raw data).
struct Checkpoint {
  nlohmann::json header;  // carries format_version
  std::vector<CheckpointBlob> blobs;

  const CheckpointBlob& blob(const std::string& name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes);
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace ddl
