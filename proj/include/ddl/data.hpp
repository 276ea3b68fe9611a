#pragma once

#include "ddl/tensor.hpp"

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ddl {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Byte-level tokens of a file (vocabulary 256).
std::vector<std::int32_t> ingest_corpus(const std::string& path);
std::vector<std::int32_t> tokenize_bytes(std::string_view bytes);

struct Corpus {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> val;
};

/// The last floor(n * val_fraction) tokens form the validation stream.
Corpus split_corpus(std::vector<std::int32_t> tokens, double val_fraction = 0.05);

struct Batch {
  Index batch = 0;
  Index steps = 0;
  std::vector<std::int32_t> inputs;   // (batch, steps)
  std::vector<std::int32_t> targets;  // inputs shifted by one token
};

/// Uniformly placed training windows from a seeded generator.
class BatchSampler {
 public:
  explicit BatchSampler(std::uint64_t seed) : rng_(seed) {}

  Batch sample(std::span<const std::int32_t> stream, Index batch, Index steps);

  /// Textual generator state, restorable with set_state().
  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::mt19937_64 rng_;
};

/// `count` batches of evenly strided windows over the stream; no randomness.
std::vector<Batch> validation_batches(std::span<const std::int32_t> stream, Index batch, Index steps, Index count);

}  // namespace ddl
