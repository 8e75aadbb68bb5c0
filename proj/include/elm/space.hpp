#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "elm/arch.hpp"
#include "elm/rng.hpp"

namespace elm {

enum class SpaceVariant { joint, fixed_head, fixed_head_size };

const char* space_variant_name(SpaceVariant v);
SpaceVariant space_variant_from(const std::string& name);

// Factorized choice sets, each ordered ascending. A sub-network picks one
// value per axis independently.
struct SearchSpace {
    SpaceVariant variant = SpaceVariant::joint;
    std::vector<int64_t> d_model_choices;
    std::vector<int64_t> head_choices;
    std::vector<int64_t> d_head_choices;
    std::vector<double> ratio_choices;
    std::vector<int64_t> depth_choices;

    // Canonical axes for a super-network:
    //   d_model: powers of two from 32 up to d_model_max (degenerates to
    //            {d_model_max/2, d_model_max} when 32 exceeds the max);
    //   heads:   {H/4, H/2, H} filtered to whole key/value groups;
    //   d_head:  powers of two from min(8, d_head_max) up to d_head_max;
    //   ratio:   {1.0, 2.0, 3.0, 3.5} clipped to ffn_ratio_max;
    //   depth:   1..n_layers_max.
    // fixed_head pins heads to {H}; fixed_head_size pins d_head to {d_head_max}.
    static SearchSpace make(SpaceVariant variant, const SuperNetConfig& cfg);

    std::vector<std::string> problems(const SuperNetConfig& cfg) const;
    void validate(const SuperNetConfig& cfg) const;

    SubNetworkConfig theta_min() const;
    SubNetworkConfig theta_max() const;

    bool operator==(const SearchSpace&) const = default;
};

// Each field drawn independently and uniformly; draw order is the vector form
// [d_model, H, d_head, r, L] so a seeded rng replays exactly.
SubNetworkConfig sample_uniform(const SearchSpace& space, Rng& rng);

// Membership of every field plus group integrality. Returns all violations,
// empty when theta is valid; never throws.
std::vector<std::string> validate(const SearchSpace& space, const SuperNetConfig& cfg,
                                  const SubNetworkConfig& theta);

// Exact scalar-parameter count of the materialized sub-network: embedding and
// positional tables, per-block attention and FFN weights with both norm gains,
// final norm, and the LM head. Adapter weights are not counted.
int64_t count_params(const SuperNetConfig& cfg, const SubNetworkConfig& theta);

// 2 * (multiply-adds) of one batch-1 forward pass over T positions, counting
// matmuls and the causal attention score/value products:
//   per block: T*d*(H+2G)*dh   (packed QKV projection)
//            + H*dh*T*(T+1)    (scores and value mix, sum_t (t+1) per head, x2)
//            + T*H*dh*d        (output projection)
//            + 3*T*d*U         (gate, up, down FFN matmuls)
//   plus T*d*V for the LM head; everything doubled for mult+add.
// Norms and other elementwise work are excluded.
int64_t estimate_flops(const SuperNetConfig& cfg, const SubNetworkConfig& theta, int64_t T);

} // namespace elm
