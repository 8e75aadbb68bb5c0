#include "elm/space.hpp"

#include <algorithm>
#include <cmath>

namespace elm {

const char* space_variant_name(SpaceVariant v) {
    switch (v) {
        case SpaceVariant::joint: return "joint";
        case SpaceVariant::fixed_head: return "fixed_head";
        case SpaceVariant::fixed_head_size: return "fixed_head_size";
    }
    return "?";
}

SpaceVariant space_variant_from(const std::string& name) {
    if (name == "joint") return SpaceVariant::joint;
    if (name == "fixed_head") return SpaceVariant::fixed_head;
    if (name == "fixed_head_size") return SpaceVariant::fixed_head_size;
    throw InputError("unknown search-space variant '" + name + "'");
}

SearchSpace SearchSpace::make(SpaceVariant variant, const SuperNetConfig& cfg) {
    cfg.validate();
    SearchSpace s;
    s.variant = variant;

    if (cfg.d_model_max >= 32) {
        for (int64_t v = 32; v <= cfg.d_model_max; v *= 2) s.d_model_choices.push_back(v);
    } else {
        if (cfg.d_model_max / 2 >= 1) s.d_model_choices.push_back(cfg.d_model_max / 2);
        s.d_model_choices.push_back(cfg.d_model_max);
    }

    if (variant == SpaceVariant::fixed_head) {
        s.head_choices = {cfg.n_heads_max};
    } else {
        for (int64_t h : {cfg.n_heads_max / 4, cfg.n_heads_max / 2, cfg.n_heads_max})
            if (h >= 1 && h * cfg.n_groups_max % cfg.n_heads_max == 0)
                s.head_choices.push_back(h);
        s.head_choices.erase(std::unique(s.head_choices.begin(), s.head_choices.end()),
                             s.head_choices.end());
    }

    if (variant == SpaceVariant::fixed_head_size) {
        s.d_head_choices = {cfg.d_head_max};
    } else {
        for (int64_t v = std::min<int64_t>(8, cfg.d_head_max); v <= cfg.d_head_max; v *= 2)
            s.d_head_choices.push_back(v);
    }

    for (double r : {1.0, 2.0, 3.0, 3.5})
        if (r <= cfg.ffn_ratio_max) s.ratio_choices.push_back(r);
    if (s.ratio_choices.empty()) s.ratio_choices.push_back(cfg.ffn_ratio_max);

    for (int64_t l = 1; l <= cfg.n_layers_max; ++l) s.depth_choices.push_back(l);
    return s;
}

std::vector<std::string> SearchSpace::problems(const SuperNetConfig& cfg) const {
    std::vector<std::string> out;
    auto check_axis = [&out](const auto& choices, auto maxv, const char* name) {
        if (choices.empty()) out.push_back(std::string(name) + " has no choices");
        for (size_t i = 0; i < choices.size(); ++i) {
            if (choices[i] <= 0) out.push_back(std::string(name) + " has non-positive choice");
            if (choices[i] > maxv)
                out.push_back(std::string(name) + " choice exceeds super-network maximum");
            if (i > 0 && !(choices[i - 1] < choices[i]))
                out.push_back(std::string(name) + " choices not strictly ascending");
        }
    };
    check_axis(d_model_choices, cfg.d_model_max, "d_model");
    check_axis(head_choices, cfg.n_heads_max, "heads");
    check_axis(d_head_choices, cfg.d_head_max, "d_head");
    check_axis(ratio_choices, cfg.ffn_ratio_max, "ratio");
    check_axis(depth_choices, cfg.n_layers_max, "depth");
    for (int64_t h : head_choices)
        if (h > 0 && h * cfg.n_groups_max % cfg.n_heads_max != 0)
            out.push_back("head choice " + std::to_string(h) +
                          " selects a fractional number of key/value groups");
    if (variant == SpaceVariant::fixed_head && head_choices.size() != 1)
        out.push_back("fixed_head requires exactly one head choice");
    if (variant == SpaceVariant::fixed_head_size && d_head_choices.size() != 1)
        out.push_back("fixed_head_size requires exactly one d_head choice");
    return out;
}

void SearchSpace::validate(const SuperNetConfig& cfg) const {
    auto p = problems(cfg);
    if (p.empty()) return;
    std::string msg = "invalid search space:";
    for (const auto& s : p) msg += " " + s + ";";
    throw ConfigError(msg);
}

SubNetworkConfig SearchSpace::theta_min() const {
    return {d_model_choices.front(), head_choices.front(), d_head_choices.front(),
            ratio_choices.front(), depth_choices.front()};
}

SubNetworkConfig SearchSpace::theta_max() const {
    return {d_model_choices.back(), head_choices.back(), d_head_choices.back(),
            ratio_choices.back(), depth_choices.back()};
}

SubNetworkConfig sample_uniform(const SearchSpace& space, Rng& rng) {
    SubNetworkConfig t;
    t.d_model = rng.pick(space.d_model_choices);
    t.n_heads = rng.pick(space.head_choices);
    t.d_head = rng.pick(space.d_head_choices);
    t.ffn_ratio = rng.pick(space.ratio_choices);
    t.n_layers = rng.pick(space.depth_choices);
    return t;
}

std::vector<std::string> validate(const SearchSpace& space, const SuperNetConfig& cfg,
                                  const SubNetworkConfig& theta) {
    std::vector<std::string> out;
    auto member = [&out](const auto& choices, auto v, const char* name) {
        if (std::find(choices.begin(), choices.end(), v) == choices.end())
            out.push_back(std::string(name) + " not in choice set");
    };
    member(space.d_model_choices, theta.d_model, "d_model");
    member(space.head_choices, theta.n_heads, "n_heads");
    member(space.d_head_choices, theta.d_head, "d_head");
    member(space.ratio_choices, theta.ffn_ratio, "ffn_ratio");
    member(space.depth_choices, theta.n_layers, "n_layers");
    if (theta.n_heads >= 1 && theta.n_heads * cfg.n_groups_max % cfg.n_heads_max != 0)
        out.push_back("n_heads selects a fractional number of key/value groups");
    return out;
}

int64_t count_params(const SuperNetConfig& cfg, const SubNetworkConfig& theta) {
    check_structural(cfg, theta);
    const int64_t d = theta.d_model;
    const int64_t heads = theta.n_heads;
    const int64_t groups = theta.n_groups(cfg);
    const int64_t dh = theta.d_head;
    const int64_t u = theta.ffn_dim();
    const int64_t per_block = d                       // attention norm gain
                              + d * (heads + 2 * groups) * dh // packed QKV
                              + heads * dh * d        // output projection
                              + d                     // FFN norm gain
                              + 2 * d * u             // gate and up
                              + u * d;                // down
    return cfg.vocab_size * d       // embedding
           + cfg.max_seq_len * d    // positional table
           + theta.n_layers * per_block
           + d                      // final norm gain
           + d * cfg.vocab_size;    // LM head
}

int64_t estimate_flops(const SuperNetConfig& cfg, const SubNetworkConfig& theta, int64_t T) {
    check_structural(cfg, theta);
    if (T < 1) throw InputError("estimate_flops: T must be >= 1");
    const int64_t d = theta.d_model;
    const int64_t heads = theta.n_heads;
    const int64_t groups = theta.n_groups(cfg);
    const int64_t dh = theta.d_head;
    const int64_t u = theta.ffn_dim();
    const int64_t per_block = T * d * (heads + 2 * groups) * dh // packed QKV
                              + heads * dh * T * (T + 1)        // scores + value mix
                              + T * heads * dh * d              // output projection
                              + 3 * T * d * u;                  // gate, up, down
    const int64_t madds = theta.n_layers * per_block + T * d * cfg.vocab_size;
    return 2 * madds;
}

} // namespace elm
