#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "elm/arch.hpp"
#include "elm/space.hpp"
#include "elm/train.hpp"

namespace elm {

// Knobs for the sorting pass.
struct SortOptions {
    std::string scheme = "mean-mean"; // "<batch>-<sequence>" aggregation name
    std::string block_scheme = "cosine"; // cosine | drop
    int64_t calib_samples = 8;           // calibration windows
};

struct GridOptions {
    int64_t bins = 22;
    int64_t per_bin = 5;
    int64_t max_trials = 10000;
};

struct EvalOptions {
    int64_t seq_len = 64;
    int64_t batch_size = 8;
    int64_t max_windows = 0; // cap on evaluation windows, 0 = use them all
};

struct LatencyOptions {
    int64_t seq_len = 64;
    int64_t reps = 5;
    int64_t warmup = 2;
};

struct DataOptions {
    std::string corpus = "corpus.txt";
    double eval_fraction = 0.1; // tail share of the token stream held out
};

struct RunOptions {
    uint64_t seed = 0;
};

// One file drives the whole pipeline: INI-style sections whose keys mirror
// the corresponding struct fields. List values are comma-separated. Empty
// [space] choice lists mean "derive the canonical space from the model".
struct RunConfig {
    SuperNetConfig model{256, 64, 4, 4, 2, 16, 3.5, 1e-5, 64};
    SpaceVariant space_variant = SpaceVariant::joint;
    std::vector<int64_t> d_model_choices;
    std::vector<int64_t> head_choices;
    std::vector<int64_t> d_head_choices;
    std::vector<double> ratio_choices;
    std::vector<int64_t> depth_choices;
    SortOptions sort;
    GridOptions grid;
    TrainConfig train;
    EvalOptions eval;
    LatencyOptions latency;
    DataOptions data;
    RunOptions run;

    // Explicit choice lists when any are given, canonical axes otherwise.
    SearchSpace resolve_space() const;
};

// Parses config text; errors carry the line number. Unknown sections or keys
// are refused rather than ignored.
RunConfig parse_run_config(const std::string& text);

// Reads and parses a config file; InputError when unreadable.
RunConfig load_run_config(const std::string& path);

// Renders a config that parses back to exactly the same values.
std::string render_run_config(const RunConfig& cfg);

} // namespace elm
