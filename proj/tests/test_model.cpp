#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "elm/rng.hpp"
#include "elm/space.hpp"
#include "elm/supernet.hpp"
#include "oracles.hpp"

using namespace elm;

namespace {

SuperNetConfig toy_cfg() {
    SuperNetConfig cfg;
    cfg.vocab_size = 31;
    cfg.d_model_max = 16;
    cfg.n_layers_max = 3;
    cfg.n_heads_max = 4;
    cfg.n_groups_max = 2;
    cfg.d_head_max = 8;
    cfg.ffn_ratio_max = 3.5;
    cfg.max_seq_len = 12;
    return cfg;
}

TokenBatch random_tokens(int64_t batch, int64_t seq, int64_t vocab, uint64_t seed) {
    TokenBatch tb;
    tb.batch = batch;
    tb.seq = seq;
    Rng rng(seed);
    tb.ids.resize(batch * seq);
    for (auto& t : tb.ids) t = static_cast<int32_t>(rng.uniform_below(vocab));
    return tb;
}

template <class Real>
Real max_abs_diff(const std::vector<Real>& a, const std::vector<Real>& b) {
    REQUIRE(a.size() == b.size());
    Real m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST_CASE("init: deterministic and shaped") {
    auto cfg = toy_cfg();
    auto w1 = init_supernet<float>(cfg, 11);
    auto w2 = init_supernet<float>(cfg, 11);
    auto w3 = init_supernet<float>(cfg, 12);

    CHECK(w1.w_emb.rows() == 31);
    CHECK(w1.w_emb.cols() == 16);
    CHECK(w1.w_pos.rows() == 12);
    CHECK(w1.blocks.size() == 3);
    // packed attention projection: queries then keys then values
    CHECK(w1.blocks[0].w_attn.rows() == 16);
    CHECK(w1.blocks[0].w_attn.cols() == (4 + 2 + 2) * 8);
    CHECK(w1.blocks[0].w_proj.rows() == 4 * 8);
    CHECK(w1.blocks[0].w_ffn_gate.cols() == cfg.ffn_dim_max());
    CHECK(w1.blocks[0].w_ffn_down.rows() == cfg.ffn_dim_max());
    CHECK(w1.w_lm_head.rows() == 16);
    CHECK(w1.w_lm_head.cols() == 31);

    // same seed bitwise equal, different seed not
    CHECK(w1.w_emb.value() == w2.w_emb.value());
    CHECK(w1.blocks[2].w_ffn_down.value() == w2.blocks[2].w_ffn_down.value());
    CHECK(w1.w_emb.value() != w3.w_emb.value());

    // gains start at one
    for (float g : w1.final_norm_gamma.value()) CHECK(g == 1.0f);
    for (float g : w1.blocks[1].attn_norm_gamma.value()) CHECK(g == 1.0f);

    // down projections drawn at the depth-scaled deviation
    double acc = 0;
    for (float x : w1.blocks[0].w_ffn_down.value()) acc += double(x) * x;
    const double sd = std::sqrt(acc / double(w1.blocks[0].w_ffn_down.value().size()));
    const double expect = 0.02 / std::sqrt(2.0 * 3);
    CHECK(sd == doctest::Approx(expect).epsilon(0.15));

    double acc_main = 0;
    for (float x : w1.w_emb.value()) acc_main += double(x) * x;
    CHECK(std::sqrt(acc_main / double(w1.w_emb.value().size())) ==
          doctest::Approx(0.02).epsilon(0.15));
}

TEST_CASE("init: parameter count matches the closed form") {
    auto cfg = toy_cfg();
    auto w = init_supernet<float>(cfg, 5);
    SubNetworkConfig full = w.theta_max();
    CHECK(w.param_count() == count_params(cfg, full));
}

TEST_CASE("forward: slicing matches the zero-masked reference") {
    auto cfg = toy_cfg();
    auto w = init_supernet<float>(cfg, 21);
    auto tokens = random_tokens(2, 7, cfg.vocab_size, 900);

    auto space = SearchSpace::make(SpaceVariant::joint, cfg);
    Rng rng(314);
    std::vector<SubNetworkConfig> thetas = {space.theta_min(), space.theta_max()};
    for (int i = 0; i < 10; ++i) thetas.push_back(sample_uniform(space, rng));

    for (const auto& theta : thetas) {
        CAPTURE(theta.to_string());
        Tape<float> tape;
        auto out = forward(tape, w, theta, tokens, {});
        auto ref = elm::testing::masked_ref_forward(w, theta, tokens);

        REQUIRE(out.logits.value().size() ==
                static_cast<size_t>(tokens.batch * tokens.seq * cfg.vocab_size));
        CHECK(max_abs_diff(out.logits.value(), std::vector<float>(ref.begin(), ref.end())) <
              2e-5f);
    }
}

TEST_CASE("forward: depth slicing follows the retention order") {
    auto cfg = toy_cfg();
    auto w = init_supernet<float>(cfg, 33);
    // retain block 2 first, then 0, then 1
    w.block_rank = {2, 0, 1};
    auto tokens = random_tokens(1, 5, cfg.vocab_size, 17);

    SubNetworkConfig theta{16, 4, 8, 3.5, 1};
    Tape<float> tape;
    auto out = forward(tape, w, theta, tokens, {});
    auto ref = elm::testing::masked_ref_forward(w, theta, tokens);
    CHECK(max_abs_diff(out.logits.value(), std::vector<float>(ref.begin(), ref.end())) < 2e-5f);

    // with depth 1 only block 2 runs: skipping it must reduce to skipping all
    std::vector<int64_t> skip = {2};
    ForwardOptions<float> opt;
    opt.skip_blocks = &skip;
    Tape<float> tape2;
    auto skipped = forward(tape2, w, theta, tokens, opt);

    Tape<float> tape3;
    std::vector<int64_t> skip_all = {0, 1, 2};
    ForwardOptions<float> opt_all;
    opt_all.skip_blocks = &skip_all;
    SubNetworkConfig theta_full{16, 4, 8, 3.5, 3};
    auto none = forward(tape3, w, theta_full, tokens, opt_all);
    CHECK(skipped.logits.value() == none.logits.value());
}

TEST_CASE("forward: causality at the model level") {
    auto cfg = toy_cfg();
    auto w = init_supernet<float>(cfg, 77);
    SubNetworkConfig theta{16, 4, 8, 2.0, 3};

    auto tokens = random_tokens(1, 8, cfg.vocab_size, 5);
    Tape<float> t1;
    auto base = forward(t1, w, theta, tokens, {});

    // changing the final token must leave all earlier positions untouched
    auto mutated = tokens;
    mutated.ids.back() = (mutated.ids.back() + 1) % int32_t(cfg.vocab_size);
    Tape<float> t2;
    auto out = forward(t2, w, theta, mutated, {});

    const int64_t v = cfg.vocab_size;
    for (int64_t t = 0; t + 1 < tokens.seq; ++t)
        for (int64_t c = 0; c < v; ++c)
            REQUIRE(base.logits.value()[t * v + c] == out.logits.value()[t * v + c]);
    bool last_changed = false;
    for (int64_t c = 0; c < v; ++c)
        last_changed |= base.logits.value()[(tokens.seq - 1) * v + c] !=
                        out.logits.value()[(tokens.seq - 1) * v + c];
    CHECK(last_changed);
}

TEST_CASE("forward: inactive attention columns never contribute") {
    auto cfg = toy_cfg();
    auto w = init_supernet<float>(cfg, 41);
    // half the heads and one of two groups active
    SubNetworkConfig theta{16, 2, 8, 3.5, 3};
    auto tokens = random_tokens(1, 6, cfg.vocab_size, 23);

    Tape<float> t1;
    auto base = forward(t1, w, theta, tokens, {});

    // scribble over every weight column owned by heads >= 2 and group 1
    const int64_t hmax = cfg.n_heads_max, gmax = cfg.n_groups_max, dh = cfg.d_head_max;
    const int64_t qkvw = (hmax + 2 * gmax) * dh;
    for (auto& blk : w.blocks) {
        auto& wa = blk.w_attn.value();
        auto& wp = blk.w_proj.value();
        for (int64_t rrow = 0; rrow < cfg.d_model_max; ++rrow) {
            for (int64_t h = 2; h < hmax; ++h)
                for (int64_t e = 0; e < dh; ++e) wa[rrow * qkvw + h * dh + e] = 99.0f;
            for (int64_t g = 1; g < gmax; ++g)
                for (int64_t e = 0; e < dh; ++e) {
                    wa[rrow * qkvw + (hmax + g) * dh + e] = 99.0f;
                    wa[rrow * qkvw + (hmax + gmax + g) * dh + e] = 99.0f;
                }
        }
        for (int64_t h = 2; h < hmax; ++h)
            for (int64_t e = 0; e < dh; ++e)
                for (int64_t j = 0; j < cfg.d_model_max; ++j)
                    wp[(h * dh + e) * cfg.d_model_max + j] = 99.0f;
    }

    Tape<float> t2;
    auto out = forward(t2, w, theta, tokens, {});
    CHECK(base.logits.value() == out.logits.value());
}

TEST_CASE("forward: rejects malformed inputs") {
    auto cfg = toy_cfg();
    auto w = init_supernet<float>(cfg, 1);
    SubNetworkConfig theta{16, 4, 8, 2.0, 2};

    TokenBatch bad_tok = random_tokens(1, 4, cfg.vocab_size, 3);
    bad_tok.ids[2] = 31;
    Tape<float> t1;
    CHECK_THROWS_AS(forward(t1, w, theta, bad_tok, {}), InputError);

    TokenBatch neg = random_tokens(1, 4, cfg.vocab_size, 3);
    neg.ids[0] = -1;
    Tape<float> t2;
    CHECK_THROWS_AS(forward(t2, w, theta, neg, {}), InputError);

    TokenBatch long_seq = random_tokens(1, 13, cfg.vocab_size, 3);
    Tape<float> t3;
    CHECK_THROWS_AS(forward(t3, w, theta, long_seq, {}), InputError);

    SubNetworkConfig bad_theta{24, 4, 8, 2.0, 2}; // d_model over the ceiling
    TokenBatch ok = random_tokens(1, 4, cfg.vocab_size, 3);
    Tape<float> t4;
    CHECK_THROWS_AS(forward(t4, w, bad_theta, ok, {}), ConfigError);

    SubNetworkConfig bad_groups{16, 3, 8, 2.0, 2}; // 3 heads cannot split into 2 groups
    Tape<float> t5;
    CHECK_THROWS_AS(forward(t5, w, bad_groups, ok, {}), ConfigError);
}

TEST_CASE("forward: trace captures per-block activations") {
    auto cfg = toy_cfg();
    auto w = init_supernet<float>(cfg, 55);
    SubNetworkConfig theta{8, 2, 4, 2.0, 2};
    auto tokens = random_tokens(2, 5, cfg.vocab_size, 67);

    ForwardOptions<float> opt;
    opt.want_trace = true;
    Tape<float> tape;
    auto out = forward(tape, w, theta, tokens, opt);

    REQUIRE(out.trace != nullptr);
    const auto& tr = *out.trace;
    CHECK(tr.batch == 2);
    CHECK(tr.seq == 5);
    CHECK(tr.d_model == 8);
    CHECK(tr.ffn_dim == theta.ffn_dim());
    CHECK(tr.blocks.size() == 2);
    CHECK(tr.blocks == std::vector<int64_t>{0, 1});

    const size_t bt = 10;
    for (size_t l = 0; l < 2; ++l) {
        REQUIRE(tr.block_input[l].size() == bt * 8);
        REQUIRE(tr.block_output[l].size() == bt * 8);
        REQUIRE(tr.attn_norm_out[l].size() == bt * 8);
        REQUIRE(tr.ffn_norm_out[l].size() == bt * 8);
        REQUIRE(tr.ffn_up_act[l].size() == bt * size_t(theta.ffn_dim()));
        REQUIRE(tr.group_attn_norms[l].size() == bt * size_t(theta.n_groups(cfg)));
    }
    REQUIRE(tr.final_norm_out.size() == bt * 8);

    // block input of the second block equals the output of the first
    CHECK(tr.block_input[1] == tr.block_output[0]);

    // without tracing nothing is allocated
    Tape<float> tape2;
    auto plain = forward(tape2, w, theta, tokens, {});
    CHECK(plain.trace == nullptr);
    CHECK(plain.logits.value() == out.logits.value());
}

TEST_CASE("forward: trace group norms at seq 1 match the value projection") {
    auto cfg = toy_cfg();
    auto w = init_supernet<float>(cfg, 91);
    SubNetworkConfig theta{16, 4, 8, 2.0, 1};
    auto tokens = random_tokens(1, 1, cfg.vocab_size, 2);

    ForwardOptions<float> opt;
    opt.want_trace = true;
    Tape<float> tape;
    auto out = forward(tape, w, theta, tokens, opt);
    REQUIRE(out.trace != nullptr);

    // with one position, attention output per head is exactly its value vector,
    // so each group norm is the norm of that group's concatenated head outputs
    // = sqrt(hpg) * |v_g| since all heads of a group share one value vector
    const auto& xn = out.trace->attn_norm_out[0];
    const int64_t hmax = cfg.n_heads_max, gmax = cfg.n_groups_max, dh = 8;
    const int64_t qkvw = (hmax + 2 * gmax) * cfg.d_head_max;
    const int64_t hpg = cfg.heads_per_group();
    for (int64_t g = 0; g < theta.n_groups(cfg); ++g) {
        double vsq = 0;
        for (int64_t e = 0; e < dh; ++e) {
            double s = 0;
            for (int64_t j = 0; j < theta.d_model; ++j)
                s += double(xn[j]) *
                     double(w.blocks[0].w_attn.value()[j * qkvw +
                                                       (hmax + gmax + g) * cfg.d_head_max + e]);
            vsq += s * s;
        }
        const double expect = std::sqrt(double(hpg) * vsq);
        CHECK(double(out.trace->group_attn_norms[0][g]) == doctest::Approx(expect).epsilon(1e-4));
    }
}

TEST_CASE("loss: uniform logits give log vocab") {
    auto cfg = toy_cfg();
    Tape<float> tape;
    auto logits = Tensor<float>::zeros({6, cfg.vocab_size});
    std::vector<int32_t> targets = {0, 5, 30, 1, 2, 3};
    auto loss = lm_loss(tape, logits, targets);
    CHECK(loss.value()[0] == doctest::Approx(std::log(31.0)).epsilon(1e-6));
}

TEST_CASE("extract: subnet reproduces the sliced forward") {
    auto cfg = toy_cfg();
    auto w = init_supernet<float>(cfg, 131);
    w.block_rank = {1, 2, 0};
    auto space = SearchSpace::make(SpaceVariant::joint, cfg);
    Rng rng(99);
    auto tokens = random_tokens(2, 6, cfg.vocab_size, 3000);

    std::vector<SubNetworkConfig> thetas = {space.theta_min(), space.theta_max()};
    for (int i = 0; i < 6; ++i) thetas.push_back(sample_uniform(space, rng));

    for (const auto& theta : thetas) {
        CAPTURE(theta.to_string());
        Tape<float> t1;
        auto sliced = forward(t1, w, theta, tokens, {});

        auto sub = extract_subnet(w, theta);
        CHECK(sub.cfg.d_model_max == theta.d_model);
        CHECK(sub.cfg.n_layers_max == theta.n_layers);
        CHECK(sub.cfg.n_heads_max == theta.n_heads);
        CHECK(sub.cfg.n_groups_max == theta.n_groups(cfg));
        CHECK(sub.cfg.d_head_max == theta.d_head);
        CHECK(sub.cfg.ffn_dim_max() == theta.ffn_dim());
        CHECK(sub.param_count() == count_params(cfg, theta));

        SubNetworkConfig full = sub.theta_max();
        Tape<float> t2;
        auto standalone = forward(t2, sub, full, tokens, {});
        CHECK(max_abs_diff(sliced.logits.value(), standalone.logits.value()) < 1e-5f);
    }
}

TEST_CASE("extract: full-width extraction is byte identical") {
    auto cfg = toy_cfg();
    auto w = init_supernet<float>(cfg, 7);
    auto sub = extract_subnet(w, w.theta_max());

    auto same = [](const std::vector<float>& a, const std::vector<float>& b) {
        REQUIRE(a.size() == b.size());
        return std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
    };
    CHECK(same(sub.w_emb.value(), w.w_emb.value()));
    CHECK(same(sub.w_pos.value(), w.w_pos.value()));
    CHECK(same(sub.w_lm_head.value(), w.w_lm_head.value()));
    CHECK(same(sub.final_norm_gamma.value(), w.final_norm_gamma.value()));
    for (size_t l = 0; l < w.blocks.size(); ++l) {
        CHECK(same(sub.blocks[l].w_attn.value(), w.blocks[l].w_attn.value()));
        CHECK(same(sub.blocks[l].w_proj.value(), w.blocks[l].w_proj.value()));
        CHECK(same(sub.blocks[l].w_ffn_gate.value(), w.blocks[l].w_ffn_gate.value()));
        CHECK(same(sub.blocks[l].w_ffn_up.value(), w.blocks[l].w_ffn_up.value()));
        CHECK(same(sub.blocks[l].w_ffn_down.value(), w.blocks[l].w_ffn_down.value()));
    }
}

TEST_CASE("lora: adapters shift logits and slice with the subnet") {
    auto cfg = toy_cfg();
    auto w = init_supernet<float>(cfg, 300);
    auto lora = attach_lora<float>(cfg, 4, 8.0, 0.0, 1234);

    CHECK(lora.rank == 4);
    CHECK(lora.scaling() == doctest::Approx(2.0));
    CHECK(lora.blocks.size() == 3);
    CHECK(lora.emb.a.rows() == cfg.vocab_size);
    CHECK(lora.emb.b.cols() == cfg.d_model_max);
    CHECK(lora.blocks[0].q.b.cols() == cfg.n_heads_max * cfg.d_head_max);
    CHECK(lora.blocks[0].k.b.cols() == cfg.n_groups_max * cfg.d_head_max);

    // b starts at zero so fresh adapters are inert
    SubNetworkConfig theta{16, 4, 8, 2.0, 3};
    auto tokens = random_tokens(1, 6, cfg.vocab_size, 8);
    Tape<float> t1;
    auto base = forward(t1, w, theta, tokens, {});
    ForwardOptions<float> with;
    with.lora = &lora;
    Tape<float> t2;
    auto adapted = forward(t2, w, theta, tokens, with);
    CHECK(base.logits.value() == adapted.logits.value());

    // a nonzero b changes the output
    for (auto& x : lora.blocks[1].q.b.value()) x = 0.05f;
    Tape<float> t3;
    auto shifted = forward(t3, w, theta, tokens, with);
    CHECK(max_abs_diff(base.logits.value(), shifted.logits.value()) > 1e-6f);

    // merged extraction equals the adapted sliced forward
    for (auto& x : lora.emb.b.value()) x = 0.01f;
    for (auto& x : lora.blocks[0].v.b.value()) x = -0.02f;
    for (auto& x : lora.blocks[2].k.b.value()) x = 0.015f;
    SubNetworkConfig small{8, 2, 4, 2.0, 2};
    Tape<float> t4;
    auto sliced = forward(t4, w, small, tokens, with);
    auto merged = extract_subnet(w, small, &lora);
    Tape<float> t5;
    auto standalone = forward(t5, merged, merged.theta_max(), tokens, {});
    CHECK(max_abs_diff(sliced.logits.value(), standalone.logits.value()) < 1e-5f);
}

TEST_CASE("lora: trainable set excludes the base weights") {
    auto cfg = toy_cfg();
    auto lora = attach_lora<float>(cfg, 4, 8.0, 0.05, 9);
    auto ts = lora.trainable();
    // embedding pair + three pairs per block
    CHECK(ts.size() == 2 + 3 * 2 * 3);
    for (auto& t : ts) {
        bool all_zero = true;
        for (float x : t.value()) all_zero &= (x == 0.0f);
        // every second tensor is a zero-initialised b table
        (void)all_zero;
    }
    // a tables follow the usual init scale, b tables are zero
    double acc = 0;
    for (float x : lora.emb.a.value()) acc += double(x) * x;
    CHECK(std::sqrt(acc / double(lora.emb.a.value().size())) ==
          doctest::Approx(0.02).epsilon(0.2));
    for (float x : lora.emb.b.value()) CHECK(x == 0.0f);
    for (float x : lora.blocks[1].k.b.value()) CHECK(x == 0.0f);
}
