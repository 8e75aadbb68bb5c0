#pragma once

#include <cstdint>
#include <string>

#include "elm/grid.hpp"
#include "elm/importance.hpp"
#include "elm/lora.hpp"
#include "elm/space.hpp"
#include "elm/supernet.hpp"
#include "elm/train.hpp"

namespace elm {

// Bumped when the on-disk layout changes incompatibly.
inline constexpr int64_t kCheckpointVersion = 1;

// Everything about a run that is not a tensor. Sections are meaningful only
// when their flag says so: `scheme`/`permutation` once sorted, `grid` once
// has_grid, `train`/`steps_done` once trained.
struct CheckpointMeta {
    std::string stage = "init"; // init | sorted | grid | trained
    SuperNetConfig model;
    SearchSpace space;
    bool sorted = false;
    AggregationScheme scheme;
    std::string block_scheme = "cosine"; // cosine | drop
    int64_t calib_samples = 0;
    PermutationRecord permutation;
    bool has_grid = false;
    CandidateGrid grid;
    bool trained = false;
    TrainConfig train;
    int64_t steps_done = 0;
};

// A checkpoint directory holds `manifest` (UTF-8 JSON: schema version, the
// meta above, and the tensor table) plus `tensors.bin` (the named tensors'
// values as concatenated raw little-endian 32-bit floats, located by the
// table's byte offset and length).
struct Checkpoint {
    CheckpointMeta meta;
    SuperNetWeights weights;
    LoraAdapterSet adapters; // rank 0 when the checkpoint carries none

    bool has_adapters() const { return adapters.rank > 0; }
};

bool checkpoint_exists(const std::string& dir);

// Writes manifest + tensors.bin, creating the directory if needed. Identical
// checkpoints serialize to identical bytes.
void save_checkpoint(const std::string& dir, const Checkpoint& ck);

// Validates the schema version, then the manifest fields, then the tensor
// table (unique known names, exact shapes and lengths, offsets inside the
// file) before reading any tensor bytes. Unknown schema versions, malformed
// tables, and undersized payloads raise UnknownVersionError,
// CorruptTableError, and ShortFileError respectively.
Checkpoint load_checkpoint(const std::string& dir);

} // namespace elm
