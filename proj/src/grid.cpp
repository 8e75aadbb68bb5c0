#include "elm/grid.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "elm/error.hpp"

namespace elm {

namespace {

template <class Real>
double abs_sum_rows_cols(const Tensor<Real>& t, int64_t rows, int64_t cols) {
    double acc = 0;
    const int64_t stride = t.cols();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) acc += std::abs(double(t.value()[r * stride + c]));
    return acc;
}

} // namespace

int64_t CandidateGrid::occupied_count() const {
    int64_t n = 0;
    for (const auto& b : bins) n += b.occupied ? 1 : 0;
    return n;
}

std::vector<SubNetworkConfig> CandidateGrid::occupied_thetas() const {
    std::vector<SubNetworkConfig> out;
    for (const auto& b : bins)
        if (b.occupied) out.push_back(b.theta);
    return out;
}

template <class Real>
double subnet_magnitude(const WeightsT<Real>& w, const SubNetworkConfig& theta) {
    const auto& cfg = w.cfg;
    check_structural(cfg, theta);

    const int64_t dp = theta.d_model;
    const int64_t heads = theta.n_heads, groups = theta.n_groups(cfg);
    const int64_t dh = theta.d_head, up = theta.ffn_dim();
    const int64_t hmax = cfg.n_heads_max, gmax = cfg.n_groups_max, dhmax = cfg.d_head_max;

    double acc = abs_sum_rows_cols(w.w_emb, cfg.vocab_size, dp);
    acc += abs_sum_rows_cols(w.w_pos, cfg.max_seq_len, dp);

    for (int64_t l : w.retained_blocks(theta.n_layers)) {
        const auto& blk = w.blocks[l];
        acc += abs_sum_rows_cols(blk.attn_norm_gamma, 1, dp);
        acc += abs_sum_rows_cols(blk.ffn_norm_gamma, 1, dp);

        const auto& wa = blk.w_attn.value();
        const int64_t qkvw = blk.w_attn.cols();
        for (int64_t r = 0; r < dp; ++r) {
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t e = 0; e < dh; ++e)
                    acc += std::abs(double(wa[r * qkvw + h * dhmax + e]));
            for (int64_t g = 0; g < groups; ++g)
                for (int64_t e = 0; e < dh; ++e) {
                    acc += std::abs(double(wa[r * qkvw + (hmax + g) * dhmax + e]));
                    acc += std::abs(double(wa[r * qkvw + (hmax + gmax + g) * dhmax + e]));
                }
        }

        const auto& wp = blk.w_proj.value();
        const int64_t pw = blk.w_proj.cols();
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t e = 0; e < dh; ++e)
                for (int64_t c = 0; c < dp; ++c)
                    acc += std::abs(double(wp[(h * dhmax + e) * pw + c]));

        acc += abs_sum_rows_cols(blk.w_ffn_gate, dp, up);
        acc += abs_sum_rows_cols(blk.w_ffn_up, dp, up);
        acc += abs_sum_rows_cols(blk.w_ffn_down, up, dp);
    }

    acc += abs_sum_rows_cols(w.final_norm_gamma, 1, dp);
    acc += abs_sum_rows_cols(w.w_lm_head, dp, cfg.vocab_size);
    return acc;
}

template <class Real>
CandidateGrid build_grid(const SearchSpace& space, const SuperNetConfig& cfg,
                         const WeightsT<Real>& w, int64_t bins, int64_t per_bin,
                         int64_t max_trials, Rng& rng, bool keep_samples) {
    if (bins < 2) throw ConfigError("grid needs at least 2 bins, got " + std::to_string(bins));
    if (per_bin < 1)
        throw ConfigError("grid needs at least 1 sample per bin, got " + std::to_string(per_bin));
    space.validate(cfg);

    CandidateGrid grid;
    grid.params_min = count_params(cfg, space.theta_min());
    grid.params_max = count_params(cfg, space.theta_max());
    const double span = static_cast<double>(grid.params_max - grid.params_min);

    grid.bins.resize(bins);
    for (int64_t i = 0; i < bins; ++i) {
        grid.bins[i].lo = grid.params_min + span * double(i) / double(bins);
        grid.bins[i].hi = grid.params_min + span * double(i + 1) / double(bins);
    }

    auto in_bin = [&](int64_t p, int64_t i) {
        const double v = static_cast<double>(p);
        if (span == 0.0) return i == 0; // single-point range: everything is bin 0
        if (i == bins - 1) return grid.bins[i].lo <= v && v <= grid.bins[i].hi;
        return grid.bins[i].lo <= v && v < grid.bins[i].hi;
    };

    for (int64_t i = 0; i < bins; ++i) {
        GridBin& bin = grid.bins[i];
        std::vector<RetainedSample> retained;
        while (bin.trials < max_trials &&
               static_cast<int64_t>(retained.size()) < per_bin) {
            ++bin.trials;
            SubNetworkConfig theta = sample_uniform(space, rng);
            const int64_t p = count_params(cfg, theta);
            if (in_bin(p, i)) retained.push_back({theta, p, 0.0});
        }
        if (retained.empty()) continue;

        for (auto& s : retained) s.magnitude = subnet_magnitude(w, s.theta);
        size_t best = 0;
        for (size_t j = 1; j < retained.size(); ++j)
            if (retained[j].magnitude > retained[best].magnitude) best = j;

        bin.occupied = true;
        bin.theta = retained[best].theta;
        bin.params = retained[best].params;
        bin.magnitude = retained[best].magnitude;
        if (keep_samples) bin.samples = std::move(retained);
    }

    if (grid.occupied_count() == 0)
        throw GridError("rejection sampling landed no sub-network in any of the " +
                        std::to_string(bins) + " bins");
    return grid;
}

std::vector<SubNetworkConfig> draw(const CandidateGrid& grid, Rng& rng, int64_t k) {
    std::vector<SubNetworkConfig> pool = grid.occupied_thetas();
    if (pool.empty()) throw GridError("cannot draw from a grid with no occupied bins");

    std::vector<SubNetworkConfig> out;
    if (k <= static_cast<int64_t>(pool.size())) {
        std::vector<int64_t> idx(pool.size());
        std::iota(idx.begin(), idx.end(), 0);
        rng.shuffle(idx);
        for (int64_t i = 0; i < k; ++i) out.push_back(pool[idx[i]]);
    } else {
        for (int64_t i = 0; i < k; ++i)
            out.push_back(pool[rng.uniform_below(static_cast<uint64_t>(pool.size()))]);
    }
    return out;
}

template double subnet_magnitude<float>(const WeightsT<float>&, const SubNetworkConfig&);
template CandidateGrid build_grid<float>(const SearchSpace&, const SuperNetConfig&,
                                         const WeightsT<float>&, int64_t, int64_t, int64_t,
                                         Rng&, bool);

} // namespace elm
