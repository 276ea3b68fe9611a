#include "ddl/data.hpp"

#include <fstream>
#include <iterator>
#include <sstream>

namespace ddl {

std::vector<std::int32_t> tokenize_bytes(std::string_view bytes) {
  std::vector<std::int32_t> tokens(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) tokens[i] = static_cast<unsigned char>(bytes[i]);
  return tokens;
}

std::vector<std::int32_t> ingest_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw DataError("corpus '" + path + "' is empty");
  return tokenize_bytes(bytes);
}

Corpus split_corpus(std::vector<std::int32_t> tokens, double val_fraction) {
  const auto n_val = static_cast<std::size_t>(static_cast<double>(tokens.size()) * val_fraction);
  Corpus c;
  c.val.assign(tokens.end() - static_cast<std::ptrdiff_t>(n_val), tokens.end());
  tokens.resize(tokens.size() - n_val);
  c.train = std::move(tokens);
  return c;
}

namespace {

void check_length(std::span<const std::int32_t> stream, Index steps, const char* what) {
  if (static_cast<Index>(stream.size()) < steps + 1)
    throw DataError(std::string(what) + " stream has " + std::to_string(stream.size()) +
                    " tokens; a window needs " + std::to_string(steps + 1));
}

void copy_window(std::span<const std::int32_t> stream, Index start, Index steps, Batch& b, Index row) {
  for (Index t = 0; t < steps; ++t) {
    b.inputs[static_cast<std::size_t>(row * steps + t)] = stream[static_cast<std::size_t>(start + t)];
    b.targets[static_cast<std::size_t>(row * steps + t)] = stream[static_cast<std::size_t>(start + t + 1)];
  }
}

Batch empty_batch(Index batch, Index steps) {
  Batch b;
  b.batch = batch;
  b.steps = steps;
  b.inputs.resize(static_cast<std::size_t>(batch * steps));
  b.targets.resize(static_cast<std::size_t>(batch * steps));
  return b;
}

}  // namespace

Batch BatchSampler::sample(std::span<const std::int32_t> stream, Index batch, Index steps) {
  check_length(stream, steps, "training");
  const auto last_start = static_cast<std::uint64_t>(static_cast<Index>(stream.size()) - steps - 1);
  Batch b = empty_batch(batch, steps);
  for (Index r = 0; r < batch; ++r) {
    // Modulo keeps the draw independent of the standard library's distributions.
    const auto start = static_cast<Index>(rng_() % (last_start + 1));
    copy_window(stream, start, steps, b, r);
  }
  return b;
}

std::string BatchSampler::state() const {
  std::ostringstream out;
  out << rng_;
  return out.str();
}

void BatchSampler::set_state(const std::string& state) {
  std::istringstream in(state);
  in >> rng_;
  if (in.fail()) throw DataError("malformed sampler state");
}

std::vector<Batch> validation_batches(std::span<const std::int32_t> stream, Index batch, Index steps, Index count) {
  check_length(stream, steps, "validation");
  const Index windows = batch * count;
  const Index last_start = static_cast<Index>(stream.size()) - steps - 1;
  std::vector<Batch> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Index c = 0; c < count; ++c) {
    Batch b = empty_batch(batch, steps);
    for (Index r = 0; r < batch; ++r) {
      const Index w = c * batch + r;
      const Index start = windows == 1 ? 0 : (w * last_start) / (windows - 1);
      copy_window(stream, start, steps, b, r);
    }
    out.push_back(std::move(b));
  }
  return out;
}

}  // namespace ddl
