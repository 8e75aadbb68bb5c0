#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "elm/supernet.hpp"

namespace elm {

// Reads a file as raw bytes, one token per byte (vocab 256).
std::vector<int32_t> load_corpus(const std::string& path);

// Chops a token stream into fixed non-overlapping windows of `window` tokens
// (the tail remainder is dropped) and packs them into batches of at most
// `batch_size` rows, in stream order.
std::vector<TokenBatch> make_windows(const std::vector<int32_t>& stream, int64_t window,
                                     int64_t batch_size);

// Deterministic English-like filler prose with a skewed word distribution,
// at least min_bytes long. Gives runs and tests a reproducible byte-level
// training set without shipping one.
std::string synthetic_corpus(uint64_t min_bytes, uint64_t seed);

} // namespace elm
