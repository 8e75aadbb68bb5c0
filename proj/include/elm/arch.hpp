#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "elm/error.hpp"

namespace elm {

inline bool is_power_of_two(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

// Static description of the full (maximal) network. Every sub-network is a
// first-k slice of the tensors this config implies.
struct SuperNetConfig {
    int64_t vocab_size = 256;
    int64_t d_model_max = 0;
    int64_t n_layers_max = 0;
    int64_t n_heads_max = 0;
    int64_t n_groups_max = 0;
    int64_t d_head_max = 0;
    double ffn_ratio_max = 0.0;
    double rms_eps = 1e-5;
    int64_t max_seq_len = 0;

    int64_t heads_per_group() const { return n_heads_max / n_groups_max; }
    // Packed attention projection: query columns, then key, then value.
    int64_t qkv_cols() const { return (n_heads_max + 2 * n_groups_max) * d_head_max; }
    int64_t ffn_dim_max() const {
        return static_cast<int64_t>(std::llround(ffn_ratio_max * double(d_model_max)));
    }

    std::vector<std::string> problems() const {
        std::vector<std::string> out;
        auto positive = [&](int64_t v, const char* name) {
            if (v <= 0) out.push_back(std::string(name) + " must be positive");
        };
        positive(vocab_size, "vocab_size");
        positive(d_model_max, "d_model_max");
        positive(n_layers_max, "n_layers_max");
        positive(n_heads_max, "n_heads_max");
        positive(n_groups_max, "n_groups_max");
        positive(d_head_max, "d_head_max");
        positive(max_seq_len, "max_seq_len");
        if (ffn_ratio_max <= 0.0) out.push_back("ffn_ratio_max must be positive");
        if (rms_eps <= 0.0) out.push_back("rms_eps must be positive");
        if (n_heads_max > 0 && n_groups_max > 0 && n_heads_max % n_groups_max != 0)
            out.push_back("n_heads_max must be a multiple of n_groups_max");
        if (d_model_max > 0 && !is_power_of_two(d_model_max))
            out.push_back("d_model_max must be a power of two");
        if (d_head_max > 0 && !is_power_of_two(d_head_max))
            out.push_back("d_head_max must be a power of two");
        return out;
    }

    void validate() const {
        auto p = problems();
        if (p.empty()) return;
        std::string msg = "invalid supernet config:";
        for (const auto& s : p) msg += " " + s + ";";
        throw ConfigError(msg);
    }

    bool operator==(const SuperNetConfig&) const = default;
};

// One point of the search space: [d_model, n_heads, d_head, ffn_ratio, n_layers].
struct SubNetworkConfig {
    int64_t d_model = 0;
    int64_t n_heads = 0;
    int64_t d_head = 0;
    double ffn_ratio = 0.0;
    int64_t n_layers = 0;

    // Whole key/value groups active under the fixed heads-per-group ratio.
    int64_t n_groups(const SuperNetConfig& cfg) const {
        return n_heads * cfg.n_groups_max / cfg.n_heads_max;
    }
    int64_t ffn_dim() const {
        return static_cast<int64_t>(std::llround(ffn_ratio * double(d_model)));
    }

    std::string to_string() const {
        std::string r = std::to_string(ffn_ratio);
        while (r.size() > 1 && r.back() == '0') r.pop_back();
        if (!r.empty() && r.back() == '.') r.push_back('0');
        return "[" + std::to_string(d_model) + "," + std::to_string(n_heads) + "," +
               std::to_string(d_head) + "," + r + "," + std::to_string(n_layers) + "]";
    }

    bool operator==(const SubNetworkConfig&) const = default;
};

// Structural fit of theta against the super-network shapes (independent of any
// search-space membership): slice extents must exist and groups stay integral.
inline std::vector<std::string> structural_problems(const SuperNetConfig& cfg,
                                                    const SubNetworkConfig& theta) {
    std::vector<std::string> out;
    if (theta.d_model < 1 || theta.d_model > cfg.d_model_max)
        out.push_back("d_model " + std::to_string(theta.d_model) + " outside [1, " +
                      std::to_string(cfg.d_model_max) + "]");
    if (theta.n_heads < 1 || theta.n_heads > cfg.n_heads_max)
        out.push_back("n_heads " + std::to_string(theta.n_heads) + " outside [1, " +
                      std::to_string(cfg.n_heads_max) + "]");
    else if (theta.n_heads * cfg.n_groups_max % cfg.n_heads_max != 0)
        out.push_back("n_heads " + std::to_string(theta.n_heads) +
                      " selects a fractional number of key/value groups");
    if (theta.d_head < 1 || theta.d_head > cfg.d_head_max)
        out.push_back("d_head " + std::to_string(theta.d_head) + " outside [1, " +
                      std::to_string(cfg.d_head_max) + "]");
    if (theta.ffn_ratio <= 0.0 || theta.ffn_ratio > cfg.ffn_ratio_max)
        out.push_back("ffn_ratio outside (0, max]");
    if (theta.n_layers < 1 || theta.n_layers > cfg.n_layers_max)
        out.push_back("n_layers " + std::to_string(theta.n_layers) + " outside [1, " +
                      std::to_string(cfg.n_layers_max) + "]");
    return out;
}

inline void check_structural(const SuperNetConfig& cfg, const SubNetworkConfig& theta) {
    auto p = structural_problems(cfg, theta);
    if (p.empty()) return;
    std::string msg = "invalid sub-network " + theta.to_string() + ":";
    for (const auto& s : p) msg += " " + s + ";";
    throw ConfigError(msg);
}

} // namespace elm
