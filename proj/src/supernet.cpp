#include "elm/supernet.hpp"

#include <numeric>
#include <string>

namespace elm {

namespace {

std::vector<int64_t> iota_idx(int64_t n) {
    std::vector<int64_t> v(n);
    std::iota(v.begin(), v.end(), int64_t(0));
    return v;
}

// Column blocks of the packed attention matrix selected by theta: the first
// dh' columns of each retained query head, then of each retained key group,
// then value group. Layout: H query blocks, G key blocks, G value blocks,
// each d_head_max wide.
struct QkvCols {
    std::vector<int64_t> q, k, v;
};

QkvCols qkv_col_indices(const SuperNetConfig& cfg, int64_t heads, int64_t groups, int64_t dh) {
    QkvCols c;
    c.q.reserve(heads * dh);
    for (int64_t h = 0; h < heads; ++h)
        for (int64_t e = 0; e < dh; ++e) c.q.push_back(h * cfg.d_head_max + e);
    c.k.reserve(groups * dh);
    c.v.reserve(groups * dh);
    for (int64_t g = 0; g < groups; ++g)
        for (int64_t e = 0; e < dh; ++e)
            c.k.push_back((cfg.n_heads_max + g) * cfg.d_head_max + e);
    for (int64_t g = 0; g < groups; ++g)
        for (int64_t e = 0; e < dh; ++e)
            c.v.push_back((cfg.n_heads_max + cfg.n_groups_max + g) * cfg.d_head_max + e);
    return c;
}

// Rows of W_proj owned by the retained heads (first dh' of each head block).
std::vector<int64_t> proj_row_indices(const SuperNetConfig& cfg, int64_t heads, int64_t dh) {
    std::vector<int64_t> rows;
    rows.reserve(heads * dh);
    for (int64_t h = 0; h < heads; ++h)
        for (int64_t e = 0; e < dh; ++e) rows.push_back(h * cfg.d_head_max + e);
    return rows;
}

// Untracked first-rows/first-cols copy used by extraction.
template <class Real>
Tensor<Real> slice_copy(const Tensor<Real>& t, const std::vector<int64_t>& row_idx,
                        const std::vector<int64_t>& col_idx) {
    const int64_t rows = static_cast<int64_t>(row_idx.size());
    const int64_t cols = static_cast<int64_t>(col_idx.size());
    auto out = Tensor<Real>::zeros({rows, cols});
    const int64_t src_cols = t.cols();
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j)
            out.value()[i * cols + j] = t.value()[row_idx[i] * src_cols + col_idx[j]];
    return out;
}

} // namespace

template <class Real>
WeightsT<Real> init_supernet(const SuperNetConfig& cfg, uint64_t seed) {
    cfg.validate();
    WeightsT<Real> w;
    w.cfg = cfg;
    Rng rng = Rng(seed).derive("init");
    const double std_main = 0.02;
    // Residual-branch outputs are down-scaled with depth to keep the stream
    // variance flat at init.
    const double std_down = 0.02 / std::sqrt(2.0 * double(cfg.n_layers_max));
    const int64_t d = cfg.d_model_max;
    const int64_t u = cfg.ffn_dim_max();

    w.w_emb = Tensor<Real>::randn({cfg.vocab_size, d}, rng, std_main).set_name("emb.weight");
    w.w_pos = Tensor<Real>::randn({cfg.max_seq_len, d}, rng, std_main).set_name("pos.weight");
    for (int64_t l = 0; l < cfg.n_layers_max; ++l) {
        const std::string p = "block" + std::to_string(l) + ".";
        BlockWeightsT<Real> blk;
        blk.attn_norm_gamma = Tensor<Real>::full({1, d}, Real(1)).set_name(p + "attn_norm.gamma");
        blk.w_attn =
            Tensor<Real>::randn({d, cfg.qkv_cols()}, rng, std_main).set_name(p + "attn.w_qkv");
        blk.w_proj = Tensor<Real>::randn({cfg.n_heads_max * cfg.d_head_max, d}, rng, std_down)
                         .set_name(p + "attn.w_proj");
        blk.ffn_norm_gamma = Tensor<Real>::full({1, d}, Real(1)).set_name(p + "ffn_norm.gamma");
        blk.w_ffn_gate = Tensor<Real>::randn({d, u}, rng, std_main).set_name(p + "ffn.w_gate");
        blk.w_ffn_up = Tensor<Real>::randn({d, u}, rng, std_main).set_name(p + "ffn.w_up");
        blk.w_ffn_down = Tensor<Real>::randn({u, d}, rng, std_down).set_name(p + "ffn.w_down");
        w.blocks.push_back(std::move(blk));
    }
    w.final_norm_gamma = Tensor<Real>::full({1, d}, Real(1)).set_name("final_norm.gamma");
    w.w_lm_head = Tensor<Real>::randn({d, cfg.vocab_size}, rng, std_main).set_name("lm_head.weight");
    w.block_rank = iota_idx(cfg.n_layers_max);
    return w;
}

template <class Real>
ForwardResult<Real> forward(Tape<Real>& tape, const WeightsT<Real>& w,
                            const SubNetworkConfig& theta, const TokenBatch& tokens,
                            const ForwardOptions<Real>& opt) {
    const SuperNetConfig& cfg = w.cfg;
    check_structural(cfg, theta);
    if (tokens.batch < 1 || tokens.seq < 1 ||
        tokens.ids.size() != size_t(tokens.batch * tokens.seq))
        throw InputError("forward: token buffer does not match batch*seq");
    if (tokens.seq > cfg.max_seq_len)
        throw InputError("forward: sequence length " + std::to_string(tokens.seq) +
                         " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    for (int32_t id : tokens.ids)
        if (id < 0 || id >= cfg.vocab_size)
            throw InputError("forward: token id " + std::to_string(id) + " outside vocab");
    if (static_cast<int64_t>(w.block_rank.size()) != cfg.n_layers_max)
        throw ConfigError("forward: block ranking size mismatch");

    const int64_t d = theta.d_model;
    const int64_t heads = theta.n_heads;
    const int64_t groups = theta.n_groups(cfg);
    const int64_t dh = theta.d_head;
    const int64_t u = theta.ffn_dim();
    const int64_t bt = tokens.batch * tokens.seq;
    const Real eps = static_cast<Real>(cfg.rms_eps);
    const auto dcols = iota_idx(d);
    const auto cols = qkv_col_indices(cfg, heads, groups, dh);
    const auto prows = proj_row_indices(cfg, heads, dh);

    const LoraAdapterSetT<Real>* lora = opt.lora;
    const Real lora_scale = lora ? static_cast<Real>(lora->scaling()) : Real(0);
    // Adapter input, optionally dropped out on the adapter path only.
    auto adapter_in = [&](const Tensor<Real>& x) {
        if (lora && lora->dropout > 0.0 && opt.dropout_rng)
            return tape.dropout(x, lora->dropout, *opt.dropout_rng);
        return x;
    };

    std::shared_ptr<ForwardTrace<Real>> trace;
    if (opt.want_trace) {
        trace = std::make_shared<ForwardTrace<Real>>();
        trace->batch = tokens.batch;
        trace->seq = tokens.seq;
        trace->d_model = d;
        trace->ffn_dim = u;
        trace->groups = groups;
    }

    std::vector<int64_t> token_rows(tokens.ids.begin(), tokens.ids.end());
    Tensor<Real> x = tape.gather_rows(tape.gather_cols(w.w_emb, dcols), token_rows);
    if (lora) {
        auto ea = tape.gather_rows(lora->emb.a, token_rows);
        auto eb = tape.gather_cols(lora->emb.b, dcols);
        x = tape.add_scaled(x, tape.matmul(ea, eb), lora_scale);
    }
    x = tape.add_positional(x, tape.gather_cols(w.w_pos, dcols), tokens.batch, tokens.seq);

    auto executed = w.retained_blocks(theta.n_layers);
    if (opt.skip_blocks) {
        std::vector<int64_t> kept;
        for (int64_t l : executed)
            if (std::find(opt.skip_blocks->begin(), opt.skip_blocks->end(), l) ==
                opt.skip_blocks->end())
                kept.push_back(l);
        executed = std::move(kept);
    }

    for (int64_t l : executed) {
        const auto& blk = w.blocks[l];
        if (trace) {
            trace->blocks.push_back(l);
            trace->block_input.push_back(x.value());
        }
        auto xn = tape.rms_norm(x, tape.gather_cols(blk.attn_norm_gamma, dcols), eps);
        if (trace) trace->attn_norm_out.push_back(xn.value());

        auto wq = tape.gather_cols(tape.gather_rows(blk.w_attn, dcols), cols.q);
        auto wk = tape.gather_cols(tape.gather_rows(blk.w_attn, dcols), cols.k);
        auto wv = tape.gather_cols(tape.gather_rows(blk.w_attn, dcols), cols.v);
        auto q = tape.matmul(xn, wq);
        auto k = tape.matmul(xn, wk);
        auto v = tape.matmul(xn, wv);
        if (lora) {
            const auto& ad = lora->blocks[l];
            auto xin = adapter_in(xn);
            auto dq = tape.matmul(tape.matmul(xin, tape.gather_rows(ad.q.a, dcols)),
                                  tape.gather_cols(ad.q.b, cols.q));
            // Key/value adapters project onto group blocks; reuse the packed
            // column pattern shifted to the k/v tables' own layout.
            std::vector<int64_t> kv_cols;
            kv_cols.reserve(groups * dh);
            for (int64_t g = 0; g < groups; ++g)
                for (int64_t e = 0; e < dh; ++e) kv_cols.push_back(g * cfg.d_head_max + e);
            auto dk = tape.matmul(tape.matmul(xin, tape.gather_rows(ad.k.a, dcols)),
                                  tape.gather_cols(ad.k.b, kv_cols));
            auto dv = tape.matmul(tape.matmul(xin, tape.gather_rows(ad.v.a, dcols)),
                                  tape.gather_cols(ad.v.b, kv_cols));
            q = tape.add_scaled(q, dq, lora_scale);
            k = tape.add_scaled(k, dk, lora_scale);
            v = tape.add_scaled(v, dv, lora_scale);
        }

        AttentionProbe<Real> probe;
        auto att = tape.causal_attention(q, k, v, tokens.batch, tokens.seq, heads, groups, dh,
                                         trace ? &probe : nullptr);
        if (trace) {
            std::vector<Real> norms(bt * groups);
            for (int64_t r = 0; r < bt; ++r)
                for (int64_t g = 0; g < groups; ++g)
                    norms[r * groups + g] = probe.group_norms[r * groups + g];
            trace->group_attn_norms.push_back(std::move(norms));
        }
        auto wproj = tape.gather_cols(tape.gather_rows(blk.w_proj, prows), dcols);
        x = tape.add(x, tape.matmul(att, wproj));

        auto xf = tape.rms_norm(x, tape.gather_cols(blk.ffn_norm_gamma, dcols), eps);
        if (trace) trace->ffn_norm_out.push_back(xf.value());
        const auto ucols = iota_idx(u);
        auto wgate = tape.gather_cols(tape.gather_rows(blk.w_ffn_gate, dcols), ucols);
        auto wup = tape.gather_cols(tape.gather_rows(blk.w_ffn_up, dcols), ucols);
        auto wdown = tape.gather_cols(tape.gather_rows(blk.w_ffn_down, ucols), dcols);
        auto up = tape.matmul(xf, wup);
        if (trace) trace->ffn_up_act.push_back(up.value());
        auto hidden = tape.mul(tape.sigmoid(tape.matmul(xf, wgate)), up);
        x = tape.add(x, tape.matmul(hidden, wdown));
        if (trace) trace->block_output.push_back(x.value());
    }

    auto xfinal = tape.rms_norm(x, tape.gather_cols(w.final_norm_gamma, dcols), eps);
    if (trace) trace->final_norm_out = xfinal.value();
    auto logits = tape.matmul(xfinal, tape.gather_rows(w.w_lm_head, dcols));

    ForwardResult<Real> res;
    res.logits = logits;
    res.trace = trace;
    return res;
}

template <class Real>
WeightsT<Real> extract_subnet(const WeightsT<Real>& w, const SubNetworkConfig& theta,
                              const LoraAdapterSetT<Real>* lora) {
    const SuperNetConfig& cfg = w.cfg;
    check_structural(cfg, theta);
    const int64_t d = theta.d_model;
    const int64_t heads = theta.n_heads;
    const int64_t groups = theta.n_groups(cfg);
    const int64_t dh = theta.d_head;
    const int64_t u = theta.ffn_dim();
    const auto dcols = iota_idx(d);
    const auto ucols = iota_idx(u);
    const auto cols = qkv_col_indices(cfg, heads, groups, dh);
    const auto prows = proj_row_indices(cfg, heads, dh);
    const auto vrows = iota_idx(cfg.vocab_size);
    const Real scale = lora ? static_cast<Real>(lora->scaling()) : Real(0);

    // delta {rows(a_rows), cols(b_cols)} = scale * a[a_rows,:] * b[:,b_cols]
    auto merge_lora = [&](Tensor<Real>& dst, const LoraPair<Real>& pair,
                          const std::vector<int64_t>& a_rows,
                          const std::vector<int64_t>& b_cols, int64_t col_off) {
        const int64_t rank = pair.a.cols();
        const int64_t n = static_cast<int64_t>(b_cols.size());
        const int64_t dst_cols = dst.cols();
        for (size_t i = 0; i < a_rows.size(); ++i)
            for (int64_t j = 0; j < n; ++j) {
                Real acc = 0;
                for (int64_t r = 0; r < rank; ++r)
                    acc += pair.a.value()[a_rows[i] * rank + r] *
                           pair.b.value()[r * pair.b.cols() + b_cols[j]];
                dst.value()[i * dst_cols + col_off + j] += scale * acc;
            }
    };

    WeightsT<Real> out;
    out.cfg = cfg;
    out.cfg.d_model_max = d;
    out.cfg.n_layers_max = theta.n_layers;
    out.cfg.n_heads_max = heads;
    out.cfg.n_groups_max = groups;
    out.cfg.d_head_max = dh;
    out.cfg.ffn_ratio_max = theta.ffn_ratio;

    out.w_emb = slice_copy(w.w_emb, vrows, dcols).set_name("emb.weight");
    if (lora) merge_lora(out.w_emb, lora->emb, vrows, dcols, 0);
    out.w_pos = slice_copy(w.w_pos, iota_idx(cfg.max_seq_len), dcols).set_name("pos.weight");

    for (int64_t l : w.retained_blocks(theta.n_layers)) {
        const auto& src = w.blocks[l];
        const std::string p = "block" + std::to_string(out.blocks.size()) + ".";
        BlockWeightsT<Real> blk;
        blk.attn_norm_gamma =
            slice_copy(src.attn_norm_gamma, {0}, dcols).set_name(p + "attn_norm.gamma");
        // Re-pack q|k|v column blocks contiguously at the sliced head size.
        auto wq = slice_copy(src.w_attn, dcols, cols.q);
        auto wk = slice_copy(src.w_attn, dcols, cols.k);
        auto wv = slice_copy(src.w_attn, dcols, cols.v);
        blk.w_attn = Tensor<Real>::zeros({d, (heads + 2 * groups) * dh});
        blk.w_attn.set_name(p + "attn.w_qkv");
        {
            const int64_t qc = heads * dh, kc = groups * dh;
            for (int64_t i = 0; i < d; ++i) {
                auto* dst = blk.w_attn.value().data() + i * (qc + 2 * kc);
                std::copy_n(wq.value().data() + i * qc, qc, dst);
                std::copy_n(wk.value().data() + i * kc, kc, dst + qc);
                std::copy_n(wv.value().data() + i * kc, kc, dst + qc + kc);
            }
        }
        if (lora) {
            const auto& ad = lora->blocks[l];
            merge_lora(blk.w_attn, ad.q, dcols, cols.q, 0);
            // Adapter b-matrices for keys/values are indexed by the k/v
            // tables' own group-block layout.
            std::vector<int64_t> b_kv;
            for (int64_t g = 0; g < groups; ++g)
                for (int64_t e = 0; e < dh; ++e) b_kv.push_back(g * cfg.d_head_max + e);
            merge_lora(blk.w_attn, ad.k, dcols, b_kv, heads * dh);
            merge_lora(blk.w_attn, ad.v, dcols, b_kv, heads * dh + groups * dh);
        }
        blk.w_proj = slice_copy(src.w_proj, prows, dcols).set_name(p + "attn.w_proj");
        blk.ffn_norm_gamma =
            slice_copy(src.ffn_norm_gamma, {0}, dcols).set_name(p + "ffn_norm.gamma");
        blk.w_ffn_gate = slice_copy(src.w_ffn_gate, dcols, ucols).set_name(p + "ffn.w_gate");
        blk.w_ffn_up = slice_copy(src.w_ffn_up, dcols, ucols).set_name(p + "ffn.w_up");
        blk.w_ffn_down = slice_copy(src.w_ffn_down, ucols, dcols).set_name(p + "ffn.w_down");
        out.blocks.push_back(std::move(blk));
    }
    out.final_norm_gamma = slice_copy(w.final_norm_gamma, {0}, dcols).set_name("final_norm.gamma");
    out.w_lm_head =
        slice_copy(w.w_lm_head, dcols, iota_idx(cfg.vocab_size)).set_name("lm_head.weight");
    out.block_rank = iota_idx(theta.n_layers);
    return out;
}

template <class Real>
LoraAdapterSetT<Real> attach_lora(const SuperNetConfig& cfg, int64_t rank, double alpha,
                                  double dropout, uint64_t seed) {
    if (rank < 1) throw ConfigError("adapter rank must be positive, got " + std::to_string(rank));
    if (dropout < 0.0 || dropout >= 1.0)
        throw ConfigError("adapter dropout must lie in [0, 1), got " + std::to_string(dropout));
    cfg.validate();

    LoraAdapterSetT<Real> set;
    set.rank = rank;
    set.alpha = alpha;
    set.dropout = dropout;

    Rng rng = Rng(seed).derive("lora");
    const Real std_a = static_cast<Real>(0.02);
    auto pair = [&](int64_t in, int64_t out, const std::string& name) {
        LoraPair<Real> p;
        p.a = Tensor<Real>::randn({in, rank}, rng, std_a);
        p.a.set_name(name + ".a");
        p.b = Tensor<Real>::zeros({rank, out});
        p.b.set_name(name + ".b");
        return p;
    };

    set.emb = pair(cfg.vocab_size, cfg.d_model_max, "lora.emb");
    set.blocks.resize(cfg.n_layers_max);
    for (int64_t l = 0; l < cfg.n_layers_max; ++l) {
        const std::string base = "lora.block" + std::to_string(l);
        set.blocks[l].q = pair(cfg.d_model_max, cfg.n_heads_max * cfg.d_head_max, base + ".q");
        set.blocks[l].k = pair(cfg.d_model_max, cfg.n_groups_max * cfg.d_head_max, base + ".k");
        set.blocks[l].v = pair(cfg.d_model_max, cfg.n_groups_max * cfg.d_head_max, base + ".v");
    }
    return set;
}

template <class Real>
Tensor<Real> lm_loss(Tape<Real>& tape, const Tensor<Real>& logits,
                     const std::vector<int32_t>& targets) {
    return tape.cross_entropy_mean(logits, targets);
}

template WeightsT<float> init_supernet<float>(const SuperNetConfig&, uint64_t);
template WeightsT<double> init_supernet<double>(const SuperNetConfig&, uint64_t);
template ForwardResult<float> forward<float>(Tape<float>&, const WeightsT<float>&,
                                             const SubNetworkConfig&, const TokenBatch&,
                                             const ForwardOptions<float>&);
template ForwardResult<double> forward<double>(Tape<double>&, const WeightsT<double>&,
                                               const SubNetworkConfig&, const TokenBatch&,
                                               const ForwardOptions<double>&);
template WeightsT<float> extract_subnet<float>(const WeightsT<float>&, const SubNetworkConfig&,
                                               const LoraAdapterSetT<float>*);
template WeightsT<double> extract_subnet<double>(const WeightsT<double>&, const SubNetworkConfig&,
                                                 const LoraAdapterSetT<double>*);
template LoraAdapterSetT<float> attach_lora<float>(const SuperNetConfig&, int64_t, double,
                                                   double, uint64_t);
template LoraAdapterSetT<double> attach_lora<double>(const SuperNetConfig&, int64_t, double,
                                                     double, uint64_t);
template Tensor<float> lm_loss<float>(Tape<float>&, const Tensor<float>&,
                                      const std::vector<int32_t>&);
template Tensor<double> lm_loss<double>(Tape<double>&, const Tensor<double>&,
                                        const std::vector<int32_t>&);

} // namespace elm
