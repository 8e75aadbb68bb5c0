#include "elm/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "elm/error.hpp"
#include "elm/eval.hpp"

namespace elm {

std::string agg_name(Agg a) {
    switch (a) {
    case Agg::mean: return "mean";
    case Agg::l2norm: return "l2norm";
    case Agg::variance: return "variance";
    }
    return "?";
}

Agg agg_from_name(const std::string& s) {
    if (s == "mean") return Agg::mean;
    if (s == "l2norm" || s == "norm") return Agg::l2norm;
    if (s == "variance") return Agg::variance;
    throw InputError("unknown aggregator '" + s + "' (choose mean, l2norm, variance)");
}

AggregationScheme AggregationScheme::parse(const std::string& s) {
    const auto dash = s.find('-');
    if (dash == std::string::npos)
        throw InputError("aggregation scheme '" + s + "' is not of the form batch-sequence");
    AggregationScheme out;
    out.over_batch = agg_from_name(s.substr(0, dash));
    out.over_sequence = agg_from_name(s.substr(dash + 1));
    return out;
}

namespace {

void accumulate(StreamStats& s, double v) {
    s.sum += v;
    s.sum_abs += std::abs(v);
    s.sum_sq += v * v;
}

// Reduction over the positions of one sample. Mean and l2norm act on
// magnitudes; variance is computed from raw values by definition.
double reduce_seq(const StreamStats& s, int64_t t, Agg a, bool use_abs) {
    switch (a) {
    case Agg::mean: return (use_abs ? s.sum_abs : s.sum) / static_cast<double>(t);
    case Agg::l2norm: return std::sqrt(s.sum_sq);
    case Agg::variance: {
        const double m = s.sum / static_cast<double>(t);
        return s.sum_sq / static_cast<double>(t) - m * m;
    }
    }
    return 0.0;
}

double reduce_batch(const std::vector<double>& r, Agg a) {
    const double n = static_cast<double>(r.size());
    switch (a) {
    case Agg::mean: return std::accumulate(r.begin(), r.end(), 0.0) / n;
    case Agg::l2norm: {
        double ss = 0;
        for (double v : r) ss += v * v;
        return std::sqrt(ss);
    }
    case Agg::variance: {
        double s = 0, ss = 0;
        for (double v : r) {
            s += v;
            ss += v * v;
        }
        const double m = s / n;
        return ss / n - m * m;
    }
    }
    return 0.0;
}

// Descending score, ties broken by the lower original index.
std::vector<int64_t> rank_desc(const std::vector<double>& scores) {
    std::vector<int64_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int64_t a, int64_t b) { return scores[a] > scores[b]; });
    return idx;
}

void check_bijection(const std::vector<int64_t>& perm, const std::string& what) {
    std::vector<char> seen(perm.size(), 0);
    for (int64_t p : perm) {
        if (p < 0 || p >= static_cast<int64_t>(perm.size()) || seen[p])
            throw ConfigError(what + " permutation is not a bijection on 0.." +
                              std::to_string(perm.size() - 1));
        seen[p] = 1;
    }
}

template <class Real>
void permute_cols(Tensor<Real>& t, const std::vector<int64_t>& perm) {
    const int64_t rows = t.rows(), cols = t.cols();
    std::vector<Real> next(t.value().size());
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < cols; ++j) next[r * cols + j] = t.value()[r * cols + perm[j]];
    t.value() = std::move(next);
}

template <class Real>
void permute_rows(Tensor<Real>& t, const std::vector<int64_t>& perm) {
    const int64_t rows = t.rows(), cols = t.cols();
    std::vector<Real> next(t.value().size());
    for (int64_t j = 0; j < rows; ++j)
        for (int64_t c = 0; c < cols; ++c) next[j * cols + c] = t.value()[perm[j] * cols + c];
    t.value() = std::move(next);
}

// Column permutation at block granularity: block j of `width` columns moves
// from block perm[j].
template <class Real>
void permute_col_blocks(Tensor<Real>& t, const std::vector<int64_t>& perm, int64_t width,
                        int64_t first_col) {
    const int64_t rows = t.rows(), cols = t.cols();
    std::vector<Real> next = t.value();
    for (int64_t r = 0; r < rows; ++r)
        for (size_t j = 0; j < perm.size(); ++j)
            for (int64_t e = 0; e < width; ++e)
                next[r * cols + first_col + int64_t(j) * width + e] =
                    t.value()[r * cols + first_col + perm[j] * width + e];
    t.value() = std::move(next);
}

template <class Real>
void permute_row_blocks(Tensor<Real>& t, const std::vector<int64_t>& perm, int64_t width) {
    const int64_t cols = t.cols();
    std::vector<Real> next = t.value();
    for (size_t j = 0; j < perm.size(); ++j)
        for (int64_t e = 0; e < width; ++e)
            for (int64_t c = 0; c < cols; ++c)
                next[(int64_t(j) * width + e) * cols + c] =
                    t.value()[(perm[j] * width + e) * cols + c];
    t.value() = std::move(next);
}

template <class Real>
double ppl_skipping(const WeightsT<Real>& w, const std::vector<TokenBatch>& calib,
                    const std::vector<int64_t>* skip) {
    const int64_t vocab = w.cfg.vocab_size;
    SubNetworkConfig full = w.theta_max();
    ForwardOptions<Real> opt;
    opt.skip_blocks = skip;
    double total = 0.0;
    int64_t count = 0;
    for (const auto& batch : calib) {
        if (batch.seq < 2) continue;
        Tape<Real> tape;
        auto out = forward(tape, w, full, batch, opt);
        const auto& logits = out.logits.value();
        for (int64_t b = 0; b < batch.batch; ++b)
            for (int64_t t = 0; t + 1 < batch.seq; ++t) {
                const int64_t row = b * batch.seq + t;
                const Real* lp = logits.data() + row * vocab;
                double mx = lp[0];
                for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, double(lp[c]));
                double z = 0.0;
                for (int64_t c = 0; c < vocab; ++c) z += std::exp(double(lp[c]) - mx);
                total += mx + std::log(z) - double(lp[batch.ids[row + 1]]);
                ++count;
            }
    }
    if (count == 0) throw InputError("block scoring: no scoreable positions in calibration set");
    return std::exp(total / static_cast<double>(count));
}

} // namespace

template <class Real>
ActivationStats collect_stats(const WeightsT<Real>& w, const std::vector<TokenBatch>& calib,
                              const StatComponents& comps) {
    int64_t total_samples = 0;
    for (const auto& b : calib) total_samples += b.batch;
    if (total_samples == 0) throw InputError("stat collection needs a non-empty calibration set");

    const auto& cfg = w.cfg;
    ActivationStats st;
    st.d_model = cfg.d_model_max;
    st.ffn_dim = cfg.ffn_dim_max();
    st.groups = cfg.n_groups_max;
    st.n_blocks = cfg.n_layers_max;
    st.norm_sites = 2 * cfg.n_layers_max + 1;
    st.has_emb = comps.emb;
    st.has_ffn = comps.ffn;
    st.has_gqa = comps.gqa;
    st.has_blocks = comps.blocks;
    if (comps.emb) st.emb.reserve(total_samples * st.norm_sites * st.d_model);
    if (comps.ffn) st.ffn.reserve(total_samples * st.n_blocks * st.ffn_dim);
    if (comps.gqa) st.gqa.reserve(total_samples * st.n_blocks * st.groups);
    if (comps.blocks) st.block_cos.reserve(total_samples * st.n_blocks);

    const SubNetworkConfig full = w.theta_max();
    ForwardOptions<Real> opt;
    opt.want_trace = true;

    for (const auto& batch : calib) {
        Tape<Real> tape;
        auto out = forward(tape, w, full, batch, opt);
        const auto& tr = *out.trace;
        const int64_t seq = batch.seq, d = st.d_model;

        for (int64_t b = 0; b < batch.batch; ++b) {
            st.lengths.push_back(seq);
            ++st.samples;

            if (comps.emb) {
                const size_t base = st.emb.size();
                st.emb.resize(base + st.norm_sites * d);
                for (int64_t site = 0; site < st.norm_sites; ++site) {
                    const std::vector<Real>& src =
                        site == st.norm_sites - 1
                            ? tr.final_norm_out
                            : (site % 2 == 0 ? tr.attn_norm_out[site / 2]
                                             : tr.ffn_norm_out[site / 2]);
                    for (int64_t t = 0; t < seq; ++t)
                        for (int64_t i = 0; i < d; ++i)
                            accumulate(st.emb[base + site * d + i],
                                       double(src[(b * seq + t) * d + i]));
                }
            }
            if (comps.ffn) {
                const size_t base = st.ffn.size();
                st.ffn.resize(base + st.n_blocks * st.ffn_dim);
                for (int64_t l = 0; l < st.n_blocks; ++l)
                    for (int64_t t = 0; t < seq; ++t)
                        for (int64_t i = 0; i < st.ffn_dim; ++i)
                            accumulate(
                                st.ffn[base + l * st.ffn_dim + i],
                                double(tr.ffn_up_act[l][(b * seq + t) * st.ffn_dim + i]));
            }
            if (comps.gqa) {
                const size_t base = st.gqa.size();
                st.gqa.resize(base + st.n_blocks * st.groups);
                for (int64_t l = 0; l < st.n_blocks; ++l)
                    for (int64_t t = 0; t < seq; ++t)
                        for (int64_t g = 0; g < st.groups; ++g)
                            accumulate(st.gqa[base + l * st.groups + g],
                                       double(tr.group_attn_norms[l][(b * seq + t) * st.groups +
                                                                     g]));
            }
            if (comps.blocks) {
                const size_t base = st.block_cos.size();
                st.block_cos.resize(base + st.n_blocks);
                for (int64_t l = 0; l < st.n_blocks; ++l)
                    for (int64_t t = 0; t < seq; ++t) {
                        const Real* xi = tr.block_input[l].data() + (b * seq + t) * d;
                        const Real* xo = tr.block_output[l].data() + (b * seq + t) * d;
                        double dot = 0, ni = 0, no = 0;
                        for (int64_t i = 0; i < d; ++i) {
                            dot += double(xi[i]) * xo[i];
                            ni += double(xi[i]) * xi[i];
                            no += double(xo[i]) * xo[i];
                        }
                        // zero-norm guard: both zero reads as unchanged, one
                        // zero as maximally changed
                        double cos;
                        if (ni == 0.0 && no == 0.0) cos = 1.0;
                        else if (ni == 0.0 || no == 0.0) cos = 0.0;
                        else cos = dot / std::sqrt(ni * no);
                        accumulate(st.block_cos[base + l], cos);
                    }
            }
        }
    }
    return st;
}

ImportanceScores score_components(const ActivationStats& stats,
                                  const AggregationScheme& scheme) {
    if (!stats.has_emb || !stats.has_ffn || !stats.has_gqa || !stats.has_blocks)
        throw StateError("component scoring needs stats for every component family");
    if (stats.samples == 0) throw StateError("component scoring on empty stats");

    ImportanceScores out;
    out.scheme = scheme;
    out.samples = stats.samples;
    const int64_t n = stats.samples;

    // one unit = one scalar stream indexed within a sample's record
    auto score_unit = [&](const std::vector<StreamStats>& pool, int64_t stride, int64_t unit) {
        std::vector<double> r(n);
        for (int64_t s = 0; s < n; ++s)
            r[s] = reduce_seq(pool[s * stride + unit], stats.lengths[s], scheme.over_sequence,
                              /*use_abs=*/true);
        return reduce_batch(r, scheme.over_batch);
    };

    out.emb_channels.assign(stats.d_model, 0.0);
    for (int64_t site = 0; site < stats.norm_sites; ++site)
        for (int64_t i = 0; i < stats.d_model; ++i)
            out.emb_channels[i] +=
                score_unit(stats.emb, stats.norm_sites * stats.d_model, site * stats.d_model + i);

    out.ffn_neurons.resize(stats.n_blocks);
    out.gqa_groups.resize(stats.n_blocks);
    for (int64_t l = 0; l < stats.n_blocks; ++l) {
        out.ffn_neurons[l].resize(stats.ffn_dim);
        for (int64_t i = 0; i < stats.ffn_dim; ++i)
            out.ffn_neurons[l][i] =
                score_unit(stats.ffn, stats.n_blocks * stats.ffn_dim, l * stats.ffn_dim + i);
        out.gqa_groups[l].resize(stats.groups);
        for (int64_t g = 0; g < stats.groups; ++g)
            out.gqa_groups[l][g] =
                score_unit(stats.gqa, stats.n_blocks * stats.groups, l * stats.groups + g);
    }

    // blocks always aggregate by mean: 1 - mean cosine(input, output)
    out.blocks.resize(stats.n_blocks);
    for (int64_t l = 0; l < stats.n_blocks; ++l) {
        double acc = 0;
        for (int64_t s = 0; s < n; ++s)
            acc += stats.block_cos[s * stats.n_blocks + l].sum /
                   static_cast<double>(stats.lengths[s]);
        out.blocks[l] = 1.0 - acc / static_cast<double>(n);
    }
    return out;
}

template <class Real>
std::vector<double> score_blocks_by_drop(const WeightsT<Real>& w,
                                         const std::vector<TokenBatch>& calib) {
    if (w.cfg.n_layers_max < 2)
        throw ConfigError("block-drop scoring needs at least two blocks");
    const double base = ppl_skipping(w, calib, nullptr);
    std::vector<double> scores(w.cfg.n_layers_max);
    for (int64_t l = 0; l < w.cfg.n_layers_max; ++l) {
        const std::vector<int64_t> skip = {l};
        scores[l] = ppl_skipping(w, calib, &skip) - base;
    }
    return scores;
}

void PermutationRecord::validate() const {
    check_bijection(emb, "embedding");
    check_bijection(block_rank, "block ranking");
    for (size_t l = 0; l < ffn.size(); ++l)
        check_bijection(ffn[l], "block " + std::to_string(l) + " FFN");
    for (size_t l = 0; l < groups.size(); ++l)
        check_bijection(groups[l], "block " + std::to_string(l) + " group");
}

template <class Real>
SortResult<Real> apply_sorting(const WeightsT<Real>& w, const ImportanceScores& scores) {
    const auto& cfg = w.cfg;
    const int64_t L = cfg.n_layers_max;
    if (static_cast<int64_t>(scores.emb_channels.size()) != cfg.d_model_max ||
        static_cast<int64_t>(scores.blocks.size()) != L ||
        static_cast<int64_t>(scores.ffn_neurons.size()) != L ||
        static_cast<int64_t>(scores.gqa_groups.size()) != L)
        throw ConfigError("importance scores do not cover this network's components");
    for (int64_t l = 0; l < L; ++l)
        if (static_cast<int64_t>(scores.ffn_neurons[l].size()) != cfg.ffn_dim_max() ||
            static_cast<int64_t>(scores.gqa_groups[l].size()) != cfg.n_groups_max)
            throw ConfigError("importance scores do not cover this network's components");

    SortResult<Real> out;
    out.record.emb = rank_desc(scores.emb_channels);
    out.record.block_rank = rank_desc(scores.blocks);
    for (int64_t l = 0; l < L; ++l) {
        out.record.ffn.push_back(rank_desc(scores.ffn_neurons[l]));
        out.record.groups.push_back(rank_desc(scores.gqa_groups[l]));
    }
    out.record.validate();

    WeightsT<Real>& sw = out.weights;
    sw.cfg = cfg;
    sw.w_emb = w.w_emb.clone();
    sw.w_pos = w.w_pos.clone();
    sw.final_norm_gamma = w.final_norm_gamma.clone();
    sw.w_lm_head = w.w_lm_head.clone();
    for (const auto& blk : w.blocks) {
        BlockWeightsT<Real> nb;
        nb.attn_norm_gamma = blk.attn_norm_gamma.clone();
        nb.w_attn = blk.w_attn.clone();
        nb.w_proj = blk.w_proj.clone();
        nb.ffn_norm_gamma = blk.ffn_norm_gamma.clone();
        nb.w_ffn_gate = blk.w_ffn_gate.clone();
        nb.w_ffn_up = blk.w_ffn_up.clone();
        nb.w_ffn_down = blk.w_ffn_down.clone();
        sw.blocks.push_back(std::move(nb));
    }
    sw.block_rank = out.record.block_rank;

    const auto& rho = out.record.emb;
    permute_cols(sw.w_emb, rho);
    permute_cols(sw.w_pos, rho);
    permute_cols(sw.final_norm_gamma, rho);
    permute_rows(sw.w_lm_head, rho);

    const int64_t hpg = cfg.heads_per_group();
    const int64_t dh = cfg.d_head_max;
    for (int64_t l = 0; l < L; ++l) {
        auto& blk = sw.blocks[l];
        permute_cols(blk.attn_norm_gamma, rho);
        permute_cols(blk.ffn_norm_gamma, rho);
        permute_rows(blk.w_attn, rho);
        permute_cols(blk.w_proj, rho);
        permute_rows(blk.w_ffn_gate, rho);
        permute_rows(blk.w_ffn_up, rho);
        permute_cols(blk.w_ffn_down, rho);

        const auto& pi = out.record.ffn[l];
        permute_cols(blk.w_ffn_gate, pi);
        permute_cols(blk.w_ffn_up, pi);
        permute_rows(blk.w_ffn_down, pi);

        // a group moves with its query heads, its K and V column blocks, and
        // the output-projection rows of those heads
        const auto& sigma = out.record.groups[l];
        std::vector<int64_t> head_perm(cfg.n_heads_max);
        for (int64_t g = 0; g < cfg.n_groups_max; ++g)
            for (int64_t s = 0; s < hpg; ++s) head_perm[g * hpg + s] = sigma[g] * hpg + s;
        permute_col_blocks(blk.w_attn, head_perm, dh, 0);
        permute_col_blocks(blk.w_attn, sigma, dh, cfg.n_heads_max * dh);
        permute_col_blocks(blk.w_attn, sigma, dh, (cfg.n_heads_max + cfg.n_groups_max) * dh);
        permute_row_blocks(blk.w_proj, head_perm, dh);
    }
    return out;
}

double rpd_from_ppl(const std::vector<double>& ppl_before, const std::vector<double>& ppl_after) {
    if (ppl_before.empty() || ppl_before.size() != ppl_after.size())
        throw InputError("perplexity lists must be non-empty and equally sized");
    double acc = 0;
    for (size_t i = 0; i < ppl_before.size(); ++i)
        acc += (ppl_before[i] - ppl_after[i]) / ppl_before[i];
    return acc / static_cast<double>(ppl_before.size());
}

template <class Real>
double compute_rpd(const WeightsT<Real>& w_before, const WeightsT<Real>& w_after,
                   const std::vector<SubNetworkConfig>& thetas,
                   const std::vector<TokenBatch>& evalset) {
    if (thetas.empty()) throw InputError("relative perplexity decrease needs at least one theta");
    std::vector<double> before, after;
    for (const auto& theta : thetas) {
        before.push_back(perplexity(w_before, theta, evalset));
        after.push_back(perplexity(w_after, theta, evalset));
    }
    return rpd_from_ppl(before, after);
}

template ActivationStats collect_stats<float>(const WeightsT<float>&,
                                              const std::vector<TokenBatch>&,
                                              const StatComponents&);
template std::vector<double> score_blocks_by_drop<float>(const WeightsT<float>&,
                                                         const std::vector<TokenBatch>&);
template SortResult<float> apply_sorting<float>(const WeightsT<float>&,
                                                const ImportanceScores&);
template double compute_rpd<float>(const WeightsT<float>&, const WeightsT<float>&,
                                   const std::vector<SubNetworkConfig>&,
                                   const std::vector<TokenBatch>&);

} // namespace elm
