#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <vector>

#include "elm/arch.hpp"
#include "elm/lora.hpp"
#include "elm/rng.hpp"
#include "elm/tensor.hpp"

namespace elm {

// Row-major token ids, batch * seq of them.
struct TokenBatch {
    std::vector<int32_t> ids;
    int64_t batch = 0;
    int64_t seq = 0;
};

template <class Real>
struct BlockWeightsT {
    Tensor<Real> attn_norm_gamma; // {1, d_model_max}
    Tensor<Real> w_attn;          // {d_model_max, (H+2G)*d_head_max}: queries | keys | values
    Tensor<Real> w_proj;          // {H*d_head_max, d_model_max}
    Tensor<Real> ffn_norm_gamma;  // {1, d_model_max}
    Tensor<Real> w_ffn_gate;      // {d_model_max, U_max}, feeds the sigmoid
    Tensor<Real> w_ffn_up;        // {d_model_max, U_max}, linear branch
    Tensor<Real> w_ffn_down;      // {U_max, d_model_max}
};

// The shared super-network parameter set. Sub-networks read first-k slices of
// these tensors; nothing is ever copied on the training path.
template <class Real>
struct WeightsT {
    SuperNetConfig cfg;
    Tensor<Real> w_emb; // {V, d_model_max}
    Tensor<Real> w_pos; // {max_seq_len, d_model_max}
    std::vector<BlockWeightsT<Real>> blocks;
    Tensor<Real> final_norm_gamma; // {1, d_model_max}
    Tensor<Real> w_lm_head;        // {d_model_max, V}

    // Depth retention order: a depth-L' sub-network keeps the first L' entries,
    // executed in ascending original position. Identity until blocks are scored.
    std::vector<int64_t> block_rank;

    // Absolute indices of the blocks a depth-L' sub-network runs, ascending.
    std::vector<int64_t> retained_blocks(int64_t depth) const {
        std::vector<int64_t> keep(block_rank.begin(), block_rank.begin() + depth);
        std::sort(keep.begin(), keep.end());
        return keep;
    }

    std::vector<Tensor<Real>> all_tensors() const {
        std::vector<Tensor<Real>> out{w_emb, w_pos};
        for (const auto& b : blocks) {
            out.push_back(b.attn_norm_gamma);
            out.push_back(b.w_attn);
            out.push_back(b.w_proj);
            out.push_back(b.ffn_norm_gamma);
            out.push_back(b.w_ffn_gate);
            out.push_back(b.w_ffn_up);
            out.push_back(b.w_ffn_down);
        }
        out.push_back(final_norm_gamma);
        out.push_back(w_lm_head);
        return out;
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& t : all_tensors()) n += t.numel();
        return n;
    }

    SubNetworkConfig theta_max() const {
        return {cfg.d_model_max, cfg.n_heads_max, cfg.d_head_max, cfg.ffn_ratio_max,
                cfg.n_layers_max};
    }
};

using SuperNetWeights = WeightsT<float>;

// Activations captured during a traced forward pass, one entry per executed
// block in execution order. Everything is a plain value copy (B*T rows).
template <class Real>
struct ForwardTrace {
    int64_t batch = 0, seq = 0;
    int64_t d_model = 0, ffn_dim = 0, groups = 0;
    std::vector<int64_t> blocks; // absolute block indices, ascending
    std::vector<std::vector<Real>> block_input;      // X entering the block, {B*T, d'}
    std::vector<std::vector<Real>> block_output;     // X leaving the block
    std::vector<std::vector<Real>> attn_norm_out;    // first norm site output
    std::vector<std::vector<Real>> ffn_norm_out;     // second norm site output
    std::vector<std::vector<Real>> ffn_up_act;       // linear-branch X*W_up, {B*T, U'}
    std::vector<std::vector<Real>> group_attn_norms; // {B*T, G'} pre-projection norms
    std::vector<Real> final_norm_out;                // {B*T, d'}
};

template <class Real>
struct ForwardOptions {
    bool want_trace = false;
    // Adapters are applied (sliced with theta) when present.
    const LoraAdapterSetT<Real>* lora = nullptr;
    // Enables adapter dropout; evaluation passes leave this null.
    Rng* dropout_rng = nullptr;
    // Absolute block indices to skip on top of theta's depth rule.
    const std::vector<int64_t>* skip_blocks = nullptr;
};

template <class Real>
struct ForwardResult {
    Tensor<Real> logits; // {B*T, V}
    std::shared_ptr<ForwardTrace<Real>> trace;
};

// Scaled-normal init: std 0.02 everywhere except the residual down-projections
// (attention output and FFN down), which use 0.02/sqrt(2L); norm gains start
// at one. Deterministic per seed; the draw order is part of the format.
template <class Real>
WeightsT<Real> init_supernet(const SuperNetConfig& cfg, uint64_t seed);

// Runs theta's slice of the super-network: embedding + positions, then each
// retained block (norm -> grouped causal attention -> residual -> norm ->
// gated FFN -> residual), final norm, LM head.
template <class Real>
ForwardResult<Real> forward(Tape<Real>& tape, const WeightsT<Real>& w,
                            const SubNetworkConfig& theta, const TokenBatch& tokens,
                            const ForwardOptions<Real>& opt = {});

// Materializes theta's slice as a self-contained network whose maxima equal
// theta. Adapters, when given, are merged into the copied weights.
template <class Real>
WeightsT<Real> extract_subnet(const WeightsT<Real>& w, const SubNetworkConfig& theta,
                              const LoraAdapterSetT<Real>* lora = nullptr);

// Fresh adapters for the embedding and every block's q/k/v columns. The a
// tables draw from N(0, 0.02); the b tables start at zero so forward output
// is unchanged until training moves them.
template <class Real>
LoraAdapterSetT<Real> attach_lora(const SuperNetConfig& cfg, int64_t rank, double alpha,
                                  double dropout, uint64_t seed);

// Mean next-token cross-entropy over all B*T positions.
template <class Real>
Tensor<Real> lm_loss(Tape<Real>& tape, const Tensor<Real>& logits,
                     const std::vector<int32_t>& targets);

extern template WeightsT<float> init_supernet<float>(const SuperNetConfig&, uint64_t);
extern template WeightsT<double> init_supernet<double>(const SuperNetConfig&, uint64_t);
extern template ForwardResult<float> forward<float>(Tape<float>&, const WeightsT<float>&,
                                                    const SubNetworkConfig&, const TokenBatch&,
                                                    const ForwardOptions<float>&);
extern template ForwardResult<double> forward<double>(Tape<double>&, const WeightsT<double>&,
                                                      const SubNetworkConfig&, const TokenBatch&,
                                                      const ForwardOptions<double>&);
extern template WeightsT<float> extract_subnet<float>(const WeightsT<float>&,
                                                      const SubNetworkConfig&,
                                                      const LoraAdapterSetT<float>*);
extern template WeightsT<double> extract_subnet<double>(const WeightsT<double>&,
                                                        const SubNetworkConfig&,
                                                        const LoraAdapterSetT<double>*);
extern template LoraAdapterSetT<float> attach_lora<float>(const SuperNetConfig&, int64_t,
                                                          double, double, uint64_t);
extern template LoraAdapterSetT<double> attach_lora<double>(const SuperNetConfig&, int64_t,
                                                            double, double, uint64_t);
extern template Tensor<float> lm_loss<float>(Tape<float>&, const Tensor<float>&,
                                             const std::vector<int32_t>&);
extern template Tensor<double> lm_loss<double>(Tape<double>&, const Tensor<double>&,
                                               const std::vector<int32_t>&);

} // namespace elm
