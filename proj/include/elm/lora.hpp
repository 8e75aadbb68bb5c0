#pragma once

#include <cstdint>
#include <vector>

#include "elm/tensor.hpp"

namespace elm {

// One low-rank pair: delta(X) = (alpha/rank) * X * a * b with a {in, rank},
// b {rank, out}. b starts at zero so an untrained adapter is a no-op.
template <class Real>
struct LoraPair {
    Tensor<Real> a;
    Tensor<Real> b;
};

// Adapters for the trainable surface: token embedding plus the query/key/value
// column blocks of every block's packed attention projection. Base weights
// stay frozen while these train; extraction merges them back.
template <class Real>
struct LoraAdapterSetT {
    int64_t rank = 0;
    double alpha = 0.0;
    double dropout = 0.0;

    LoraPair<Real> emb; // a {V, rank}, b {rank, d_model_max}

    struct BlockAdapters {
        LoraPair<Real> q; // a {d_model_max, rank}, b {rank, H*d_head_max}
        LoraPair<Real> k; // a {d_model_max, rank}, b {rank, G*d_head_max}
        LoraPair<Real> v; // a {d_model_max, rank}, b {rank, G*d_head_max}
    };
    std::vector<BlockAdapters> blocks;

    double scaling() const { return alpha / static_cast<double>(rank); }

    std::vector<Tensor<Real>> trainable() const {
        std::vector<Tensor<Real>> out{emb.a, emb.b};
        for (const auto& blk : blocks)
            for (const auto* p : {&blk.q, &blk.k, &blk.v}) {
                out.push_back(p->a);
                out.push_back(p->b);
            }
        return out;
    }
};

using LoraAdapterSet = LoraAdapterSetT<float>;

} // namespace elm
