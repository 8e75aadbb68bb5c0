#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "elm/supernet.hpp"

namespace elm {

// Reduction applied along one axis of the calibration activations.
enum class Agg { mean, l2norm, variance };

std::string agg_name(Agg a);
Agg agg_from_name(const std::string& s); // InputError on unknown name

// How per-position activation magnitudes become one score: the sequence
// aggregator reduces over positions within a sample, then the batch
// aggregator reduces over samples. Canonical name "<batch>-<sequence>",
// e.g. "l2norm-mean" aggregates positions by mean and samples by l2norm.
struct AggregationScheme {
    Agg over_batch = Agg::mean;
    Agg over_sequence = Agg::mean;

    std::string name() const { return agg_name(over_batch) + "-" + agg_name(over_sequence); }
    static AggregationScheme parse(const std::string& s); // InputError on bad name
    bool operator==(const AggregationScheme&) const = default;
};

// Which component families a stat collection covers.
struct StatComponents {
    bool emb = true;
    bool ffn = true;
    bool gqa = true;
    bool blocks = true;
};

// Running per-position reductions of one activation stream within one sample.
// Enough to evaluate any aggregator afterwards without keeping raw traces.
struct StreamStats {
    double sum = 0.0;     // raw values
    double sum_abs = 0.0; // absolute values
    double sum_sq = 0.0;  // squares
};

// Per-sample activation summaries from traced full-width forward passes.
// Layouts are sample-major so results never depend on how the calibration
// set was batched.
struct ActivationStats {
    int64_t d_model = 0;
    int64_t ffn_dim = 0;
    int64_t groups = 0;
    int64_t n_blocks = 0;
    int64_t norm_sites = 0; // two per block plus the final norm
    int64_t samples = 0;
    std::vector<int64_t> lengths; // positions per sample

    bool has_emb = false, has_ffn = false, has_gqa = false, has_blocks = false;
    std::vector<StreamStats> emb;       // samples x norm_sites x d_model
    std::vector<StreamStats> ffn;       // samples x n_blocks x ffn_dim
    std::vector<StreamStats> gqa;       // samples x n_blocks x groups
    std::vector<StreamStats> block_cos; // samples x n_blocks, per-position cosine
};

// Importance of every slice-ordered component, higher = keep first.
struct ImportanceScores {
    AggregationScheme scheme;
    int64_t samples = 0;
    std::vector<double> emb_channels;             // d_model_max
    std::vector<std::vector<double>> ffn_neurons; // [block][ffn_dim_max]
    std::vector<std::vector<double>> gqa_groups;  // [block][n_groups_max]
    std::vector<double> blocks;                   // n_layers_max
};

// The permutations a sorting pass applied, kept so checkpoints can reproduce
// or invert it. Entry j holds the original index now living at position j.
// Blocks are ranked, never moved.
struct PermutationRecord {
    std::vector<int64_t> emb;
    std::vector<std::vector<int64_t>> ffn;
    std::vector<std::vector<int64_t>> groups;
    std::vector<int64_t> block_rank;

    // ConfigError unless every permutation is a bijection on its range.
    void validate() const;
};

template <class Real>
struct SortResult {
    WeightsT<Real> weights;
    PermutationRecord record;
};

// Runs traced full-width forwards over the calibration batches and retains,
// per sample, the per-position reductions every aggregation scheme needs.
template <class Real>
ActivationStats collect_stats(const WeightsT<Real>& w, const std::vector<TokenBatch>& calib,
                              const StatComponents& comps = {});

// Turns collected stats into component scores: FFN neurons from linear-branch
// pre-activation magnitudes, embedding channels from norm-site outputs summed
// over all sites, GQA groups from pre-projection attention output norms, and
// blocks from 1 - mean input/output cosine (block scores always aggregate by
// mean; the scheme drives the other three families).
ImportanceScores score_components(const ActivationStats& stats, const AggregationScheme& scheme);

// Leave-one-out alternative for block scores: perplexity with the block
// skipped minus full-model perplexity, on the calibration set.
template <class Real>
std::vector<double> score_blocks_by_drop(const WeightsT<Real>& w,
                                         const std::vector<TokenBatch>& calib);

// Applies descending-score permutations (ties keep the lower original index
// first) consistently across every coupled tensor axis, and stores the block
// retention order. The full-width network's function is unchanged.
template <class Real>
SortResult<Real> apply_sorting(const WeightsT<Real>& w, const ImportanceScores& scores);

// Mean fractional perplexity improvement of `after` over `before` across the
// given sub-networks: (1/N) sum (ppl_before - ppl_after) / ppl_before.
template <class Real>
double compute_rpd(const WeightsT<Real>& w_before, const WeightsT<Real>& w_after,
                   const std::vector<SubNetworkConfig>& thetas,
                   const std::vector<TokenBatch>& evalset);

// The same formula on already-computed perplexity pairs.
double rpd_from_ppl(const std::vector<double>& ppl_before, const std::vector<double>& ppl_after);

extern template ActivationStats collect_stats<float>(const WeightsT<float>&,
                                                     const std::vector<TokenBatch>&,
                                                     const StatComponents&);
extern template std::vector<double> score_blocks_by_drop<float>(const WeightsT<float>&,
                                                                const std::vector<TokenBatch>&);
extern template SortResult<float> apply_sorting<float>(const WeightsT<float>&,
                                                       const ImportanceScores&);
extern template double compute_rpd<float>(const WeightsT<float>&, const WeightsT<float>&,
                                          const std::vector<SubNetworkConfig>&,
                                          const std::vector<TokenBatch>&);

} // namespace elm
