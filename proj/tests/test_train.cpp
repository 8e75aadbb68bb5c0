#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "elm/data.hpp"
#include "elm/eval.hpp"
#include "elm/grid.hpp"
#include "elm/space.hpp"
#include "elm/train.hpp"

using namespace elm;

namespace {

SuperNetConfig tiny_cfg() {
    SuperNetConfig cfg;
    cfg.vocab_size = 23;
    cfg.d_model_max = 8;
    cfg.n_layers_max = 2;
    cfg.n_heads_max = 4;
    cfg.n_groups_max = 2;
    cfg.d_head_max = 4;
    cfg.ffn_ratio_max = 2.0;
    cfg.max_seq_len = 10;
    return cfg;
}

TrainConfig tiny_train_cfg() {
    TrainConfig tc;
    tc.epochs = 1;
    tc.k = 2;
    tc.batch_size = 4;
    tc.seq_len = 8;
    tc.seed = 42;
    return tc;
}

std::vector<int32_t> cyclic_corpus(int64_t n, int32_t period) {
    std::vector<int32_t> out(n);
    for (int64_t i = 0; i < n; ++i) out[i] = int32_t(i % period);
    return out;
}

TokenBatch cyclic_batch(int64_t batch, int64_t seq, int32_t period) {
    TokenBatch tb;
    tb.batch = batch;
    tb.seq = seq;
    tb.ids.resize(batch * seq);
    for (int64_t i = 0; i < batch * seq; ++i) tb.ids[i] = int32_t(i % period);
    return tb;
}

std::vector<std::vector<float>> snapshot(const std::vector<Tensor<float>>& ts) {
    std::vector<std::vector<float>> out;
    for (const auto& t : ts) out.push_back(t.value());
    return out;
}

bool all_equal(const std::vector<Tensor<float>>& ts,
               const std::vector<std::vector<float>>& snap) {
    for (size_t i = 0; i < ts.size(); ++i)
        if (ts[i].value() != snap[i]) return false;
    return true;
}

CandidateGrid tiny_grid(const SuperNetConfig& cfg, const WeightsT<float>& w) {
    auto space = SearchSpace::make(SpaceVariant::joint, cfg);
    Rng rng(7);
    return build_grid(space, cfg, w, 6, 2, 400, rng);
}

} // namespace

TEST_CASE("name parsing for losses and modes") {
    CHECK(kd_kind_from("kl_forward") == KdKind::kl_forward);
    CHECK(kd_kind_from("forward_kl") == KdKind::kl_forward);
    CHECK(kd_kind_from("kl_reverse") == KdKind::kl_reverse);
    CHECK(kd_kind_from("reverse_kl") == KdKind::kl_reverse);
    CHECK(kd_kind_from("js") == KdKind::js);
    CHECK(kd_kind_from("l1") == KdKind::l1);
    CHECK(kd_kind_from("l2") == KdKind::l2);
    CHECK(kd_kind_from("cosine") == KdKind::cosine);
    CHECK_THROWS_AS(kd_kind_from("kl"), ConfigError);

    CHECK(train_mode_from("weight_sharing") == TrainMode::weight_sharing);
    CHECK(train_mode_from("independent") == TrainMode::independent);
    CHECK_THROWS_AS(train_mode_from("shared"), ConfigError);
    CHECK(init_mode_from("random") == InitMode::random);
    CHECK(init_mode_from("pretrained_sliced") == InitMode::pretrained_sliced);
    CHECK_THROWS_AS(init_mode_from("zeros"), ConfigError);
    CHECK(std::string(train_mode_name(TrainMode::independent)) == "independent");
    CHECK(std::string(init_mode_name(InitMode::random)) == "random");
    CHECK(std::string(kd_kind_name(kd_kind_from("forward_kl"))) == "kl_forward");
}

TEST_CASE("training configuration validation") {
    TrainConfig tc;
    CHECK(tc.problems().empty()); // the defaults are a valid configuration
    CHECK(tc.epochs == 3);
    CHECK(tc.base_lr == 2e-4);
    CHECK(tc.final_lr == 6e-5);
    CHECK(tc.beta1 == 0.9);
    CHECK(tc.beta2 == 0.95);
    CHECK(tc.k == 3);
    CHECK(tc.kd_kind == KdKind::cosine);
    CHECK(tc.kd_temperature == 1.0);
    CHECK(tc.lora_rank == 32);
    CHECK(tc.lora_alpha == 16.0);
    CHECK(tc.lora_dropout == 0.05);

    auto bad = tc;
    bad.final_lr = tc.base_lr * 2;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tc;
    bad.k = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tc;
    bad.kd_temperature = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tc;
    bad.seq_len = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tc;
    bad.lora_dropout = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.use_lora = false; // adapter fields are ignored when adapters are off
    CHECK(bad.problems().empty());
}

TEST_CASE("cosine schedule hits both endpoints exactly") {
    const double base = 2e-4, fin = 6e-5;
    const int64_t total = 97;
    CHECK(cosine_lr(base, fin, 0, total) == base);
    CHECK(cosine_lr(base, fin, total - 1, total) == fin);
    CHECK(cosine_lr(base, fin, (total - 1) / 2, total) ==
          doctest::Approx((base + fin) / 2).epsilon(1e-12));
    double prev = base;
    for (int64_t s = 1; s < total; ++s) {
        const double lr = cosine_lr(base, fin, s, total);
        CHECK(lr <= prev + 1e-18);
        CHECK(lr >= fin);
        prev = lr;
    }
    CHECK(cosine_lr(base, fin, 0, 1) == base); // degenerate single-step schedule
}

TEST_CASE("adam: zero gradient from a fresh state is an exact no-op") {
    auto p = Tensor<float>::from({2}, {1.5f, -2.25f});
    p.ensure_grad();
    auto st = make_adam<float>({p});
    REQUIRE(st.m.size() == 1);
    REQUIRE(st.m[0].size() == 2);
    REQUIRE(st.v[0].size() == 2);
    adam_update(st, 0.1, 0.9, 0.95, 1e-8);
    CHECK(st.step == 1);
    CHECK(p.value() == std::vector<float>{1.5f, -2.25f});
    adam_update(st, 0.1, 0.9, 0.95, 1e-8);
    CHECK(st.step == 2);
    CHECK(p.value() == std::vector<float>{1.5f, -2.25f});
}

TEST_CASE("adam: bias-corrected update matches the hand computation") {
    auto p = Tensor<float>::from({1}, {1.0f});
    p.ensure_grad();
    p.grad()[0] = 0.5f;
    auto st = make_adam<float>({p});

    // With a constant gradient the bias corrections cancel: every step moves
    // by lr * g/(|g| + eps).
    const double delta = 0.1 * 0.5 / (0.5 + 1e-8);
    adam_update(st, 0.1, 0.9, 0.95, 1e-8);
    CHECK(p.value()[0] == doctest::Approx(1.0 - delta).epsilon(1e-6));
    adam_update(st, 0.1, 0.9, 0.95, 1e-8);
    CHECK(p.value()[0] == doctest::Approx(1.0 - 2 * delta).epsilon(1e-6));
}

TEST_CASE("gradient clipping caps the global norm") {
    auto a = Tensor<float>::from({1}, {0.0f});
    auto b = Tensor<float>::from({1}, {0.0f});
    a.ensure_grad();
    b.ensure_grad();
    a.grad()[0] = 3.0f;
    b.grad()[0] = 4.0f;
    std::vector<Tensor<float>> ps{a, b};

    CHECK(global_grad_norm(ps) == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(clip_global_norm(ps, 1.0) == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(a.grad()[0] == doctest::Approx(0.6f).epsilon(1e-6));
    CHECK(b.grad()[0] == doctest::Approx(0.8f).epsilon(1e-6));

    // under the cap: untouched
    CHECK(clip_global_norm(ps, 10.0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(a.grad()[0] == doctest::Approx(0.6f).epsilon(1e-6));

    // cap 0 disables
    a.grad()[0] = 30.0f;
    b.grad()[0] = 40.0f;
    CHECK(clip_global_norm(ps, 0.0) == doctest::Approx(50.0).epsilon(1e-12));
    CHECK(a.grad()[0] == 30.0f);
}

TEST_CASE("distillation loss: exact value, zeros, and positivity") {
    // teacher distribution (0.5, 0.5), student (0.25, 0.75)
    Tape<double> tape;
    auto t = Tensor<double>::from({1, 2}, {0.0, 0.0});
    auto s = Tensor<double>::from({1, 2}, {0.0, std::log(3.0)});
    auto fkl = kd_loss(tape, KdKind::kl_forward, t, s, 1.0);
    CHECK(std::abs(fkl.item() - 0.5 * std::log(4.0 / 3.0)) < 1e-9);

    const std::vector<double> logits{0.3, -1.2, 0.7, 2.1, -0.4, 0.0};
    for (KdKind kind : {KdKind::kl_forward, KdKind::kl_reverse, KdKind::js, KdKind::l1,
                        KdKind::l2, KdKind::cosine}) {
        Tape<double> tp;
        auto a = Tensor<double>::from({2, 3}, logits);
        auto b = Tensor<double>::from({2, 3}, logits);
        CHECK(std::abs(kd_loss(tp, kind, a, b, 2.0).item()) < 1e-12);

        Rng rng(uint64_t(kind) + 1);
        std::vector<double> rv(6), sv(6);
        for (auto& v : rv) v = rng.normal(0.0, 2.0);
        for (auto& v : sv) v = rng.normal(0.0, 2.0);
        Tape<double> tp2;
        auto r1 = Tensor<double>::from({2, 3}, rv);
        auto r2 = Tensor<double>::from({2, 3}, sv);
        CHECK(kd_loss(tp2, kind, r1, r2, 1.0).item() >= 0.0);
    }
}

TEST_CASE("distillation loss: non-finite logits rejected, teacher gets no gradient") {
    Tape<double> tape;
    auto bad = Tensor<double>::from({1, 2}, {std::numeric_limits<double>::quiet_NaN(), 0.0});
    auto ok = Tensor<double>::from({1, 2}, {0.0, 0.0});
    CHECK_THROWS_AS(kd_loss(tape, KdKind::cosine, bad, ok, 1.0), InputError);
    auto inf = Tensor<double>::from({1, 2}, {std::numeric_limits<double>::infinity(), 0.0});
    CHECK_THROWS_AS(kd_loss(tape, KdKind::l2, ok, inf, 1.0), InputError);

    for (KdKind kind : {KdKind::kl_forward, KdKind::kl_reverse, KdKind::js, KdKind::l1,
                        KdKind::l2, KdKind::cosine}) {
        Tape<double> tp;
        auto teacher = Tensor<double>::from({2, 3}, {0.4, -0.2, 1.1, 0.0, 0.9, -1.3});
        auto student = Tensor<double>::from({2, 3}, {1.0, 0.2, -0.1, 0.5, -0.7, 0.3});
        teacher.set_requires_grad(true);
        auto d = kd_loss(tp, kind, teacher, student, 1.5);
        tp.backward(d);
        for (double g : teacher.grad()) CHECK(g == 0.0);
    }
}

TEST_CASE("train state: the trainable surface follows the adapter switch") {
    auto cfg = tiny_cfg();
    auto tc = tiny_train_cfg();

    auto st = make_train_state(init_supernet<float>(cfg, 3), tc);
    CHECK(st.lora_on);
    const int64_t lora_tensors = 2 + 6 * cfg.n_layers_max;
    CHECK(int64_t(st.trainable().size()) == lora_tensors);
    CHECK(int64_t(st.adam.params.size()) == lora_tensors);
    for (const auto& t : st.trainable()) CHECK(t.requires_grad());
    for (const auto& t : st.weights.all_tensors()) CHECK(!t.requires_grad());
    CHECK(st.adapters.rank == tc.lora_rank);

    tc.use_lora = false;
    auto full = make_train_state(init_supernet<float>(cfg, 3), tc);
    CHECK(!full.lora_on);
    CHECK(int64_t(full.trainable().size()) == 4 + 7 * cfg.n_layers_max);
    for (const auto& t : full.weights.all_tensors()) CHECK(t.requires_grad());
}

TEST_CASE("sandwich step: zero rate logs metrics without moving parameters") {
    auto cfg = tiny_cfg();
    auto tc = tiny_train_cfg();
    auto st = make_train_state(init_supernet<float>(cfg, 9), tc);
    auto grid = tiny_grid(cfg, st.weights);
    auto batch = cyclic_batch(4, 8, 16);

    auto base_snap = snapshot(st.weights.all_tensors());
    auto lora_snap = snapshot(st.adapters.trainable());
    auto ms = sandwich_step(st, batch, grid, tc, 0.0);

    CHECK(all_equal(st.weights.all_tensors(), base_snap));
    CHECK(all_equal(st.adapters.trainable(), lora_snap));
    CHECK(st.step == 1);
    CHECK(st.log.size() == 1);
    CHECK(ms.lr == 0.0);
    CHECK(std::isfinite(ms.teacher_loss));
    CHECK(ms.teacher_loss > 0.0);
    CHECK(int64_t(ms.drawn.size()) == tc.k);
    CHECK(ms.forward_passes == tc.k + 1);
    CHECK(ms.student_lm.size() == ms.drawn.size());
    CHECK(ms.student_kd.size() == ms.drawn.size());
    for (double v : ms.student_kd) CHECK(v >= 0.0);
    CHECK(ms.grad_norm > 0.0);
    CHECK(ms.madds > 0);
}

TEST_CASE("sandwich step: base weights stay frozen while adapters move") {
    auto cfg = tiny_cfg();
    auto tc = tiny_train_cfg();
    tc.k = 3;
    auto st = make_train_state(init_supernet<float>(cfg, 11), tc);
    auto grid = tiny_grid(cfg, st.weights);
    auto batch = cyclic_batch(4, 8, 16);

    auto base_snap = snapshot(st.weights.all_tensors());
    auto a_snap = st.adapters.emb.a.value();
    auto b_snap = st.adapters.emb.b.value();
    for (float v : b_snap) CHECK(v == 0.0f);

    for (int i = 0; i < 3; ++i) {
        auto ms = sandwich_step(st, batch, grid, tc, 1e-3);
        CHECK(ms.forward_passes == 4);
    }

    CHECK(all_equal(st.weights.all_tensors(), base_snap));
    CHECK(st.adapters.emb.b.value() != b_snap);
    // the down-projection starts moving once its partner is nonzero
    CHECK(st.adapters.emb.a.value() != a_snap);
    CHECK(st.step == 3);
    CHECK(st.adam.step == 3);
}

TEST_CASE("sandwich step: k=0 trains the full network without a grid") {
    auto cfg = tiny_cfg();
    auto tc = tiny_train_cfg();
    tc.k = 0;
    tc.use_lora = false;
    auto st = make_train_state(init_supernet<float>(cfg, 13), tc);
    auto batch = cyclic_batch(4, 8, 16);

    auto snap = snapshot(st.weights.all_tensors());
    CandidateGrid untouched; // k = 0 must not consult the grid at all
    auto ms = sandwich_step(st, batch, untouched, tc, 1e-3);
    CHECK(ms.forward_passes == 1);
    CHECK(ms.drawn.empty());
    CHECK(!all_equal(st.weights.all_tensors(), snap));

    TokenBatch one_token;
    one_token.batch = 2;
    one_token.seq = 1;
    one_token.ids = {0, 1};
    CHECK_THROWS_AS(sandwich_step(st, one_token, untouched, tc, 1e-3), InputError);
}

TEST_CASE("sandwich step: identical seeds replay bitwise") {
    auto cfg = tiny_cfg();
    auto tc = tiny_train_cfg();
    auto batch = cyclic_batch(4, 8, 16);

    auto run = [&](uint64_t weight_seed, uint64_t train_seed) {
        auto local = tc;
        local.seed = train_seed;
        auto st = make_train_state(init_supernet<float>(cfg, weight_seed), local);
        auto grid = tiny_grid(cfg, st.weights);
        for (int i = 0; i < 3; ++i) sandwich_step(st, batch, grid, local, 5e-4);
        return snapshot(st.adapters.trainable());
    };

    auto s1 = run(9, 42);
    auto s2 = run(9, 42);
    CHECK(s1 == s2);
    auto s3 = run(9, 43);
    CHECK(s1 != s3);
}

TEST_CASE("sandwich step: a non-finite loss aborts with diagnostics") {
    auto cfg = tiny_cfg();
    auto tc = tiny_train_cfg();
    tc.k = 0;
    tc.use_lora = false;
    auto st = make_train_state(init_supernet<float>(cfg, 15), tc);
    st.weights.w_emb.value()[0] = std::numeric_limits<float>::infinity();
    auto batch = cyclic_batch(2, 4, 2); // touches token 0
    CandidateGrid none;
    CHECK_THROWS_AS(sandwich_step(st, batch, none, tc, 1e-3), StateError);
    CHECK(st.step == 0);
    CHECK(st.log.empty());
}

TEST_CASE("train: hooks, schedule endpoints, and the empty run") {
    auto cfg = tiny_cfg();
    auto tc = tiny_train_cfg();
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.seq_len = 8;
    auto st = make_train_state(init_supernet<float>(cfg, 21), tc);
    auto grid = tiny_grid(cfg, st.weights);
    auto corpus = cyclic_corpus(16 * 8, 16); // 16 windows -> 4 steps per epoch

    int64_t steps_seen = 0;
    std::vector<int64_t> epochs_seen;
    train(
        st, corpus, grid, tc, [&](const StepMetrics&) { ++steps_seen; },
        [&](int64_t e) { epochs_seen.push_back(e); });
    CHECK(steps_seen == 8);
    CHECK(epochs_seen == std::vector<int64_t>{0, 1});
    CHECK(st.log.size() == 8);
    CHECK(st.log.front().lr == tc.base_lr);
    CHECK(st.log.back().lr == tc.final_lr);
    CHECK(st.step == 8);

    // zero epochs: nothing moves, nothing fires
    auto fresh = make_train_state(init_supernet<float>(cfg, 21), tc);
    auto snap = snapshot(fresh.adapters.trainable());
    auto tc0 = tc;
    tc0.epochs = 0;
    bool fired = false;
    train(
        fresh, corpus, grid, tc0, [&](const StepMetrics&) { fired = true; },
        [&](int64_t) { fired = true; });
    CHECK(!fired);
    CHECK(fresh.log.empty());
    CHECK(all_equal(fresh.adapters.trainable(), snap));

    std::vector<int32_t> short_corpus(tc.seq_len - 1, 0);
    CHECK_THROWS_AS(train(fresh, short_corpus, grid, tc), InputError);
    auto wide = tc;
    wide.seq_len = cfg.max_seq_len + 1;
    CHECK_THROWS_AS(train(fresh, corpus, grid, wide), ConfigError);
}

TEST_CASE("train: loss falls on structured data and replays by seed") {
    auto cfg = tiny_cfg();
    TrainConfig tc;
    tc.epochs = 6;
    tc.k = 2;
    tc.batch_size = 8;
    tc.seq_len = 8;
    tc.base_lr = 5e-3;
    tc.final_lr = 5e-4;
    tc.use_lora = false;
    tc.seed = 5;
    auto corpus = cyclic_corpus(64 * 8, 16);

    auto run = [&](uint64_t seed) {
        auto local = tc;
        local.seed = seed;
        auto st = make_train_state(init_supernet<float>(cfg, 31), local);
        auto grid = tiny_grid(cfg, st.weights);
        train(st, corpus, grid, local);
        return st;
    };

    auto st = run(5);
    REQUIRE(!st.log.empty());
    const double first = st.log.front().teacher_loss;
    const double last = st.log.back().teacher_loss;
    CHECK(last < first);
    CHECK(last < 0.8 * first); // cyclic data is learnable well past a 20% drop

    auto again = run(5);
    CHECK(snapshot(st.weights.all_tensors()) == snapshot(again.weights.all_tensors()));
}

TEST_CASE("independent baseline: init modes and the zero-epoch identity") {
    auto cfg = tiny_cfg();
    auto w = init_supernet<float>(cfg, 41);
    w.block_rank = {1, 0};
    SubNetworkConfig theta{4, 2, 4, 1.0, 1};
    auto corpus = cyclic_corpus(32 * 8, 16);

    TrainConfig tc = tiny_train_cfg();
    tc.epochs = 0;

    auto sliced = finetune_independent(InitMode::pretrained_sliced, w, theta, corpus, tc);
    auto want = extract_subnet(w, theta);
    auto got_t = sliced.all_tensors();
    auto want_t = want.all_tensors();
    REQUIRE(got_t.size() == want_t.size());
    for (size_t i = 0; i < got_t.size(); ++i) CHECK(got_t[i].value() == want_t[i].value());
    CHECK(sliced.cfg == want.cfg);

    auto randomed = finetune_independent(InitMode::random, w, theta, corpus, tc);
    CHECK(randomed.param_count() == want.param_count());
    CHECK(randomed.cfg == want.cfg);
    CHECK(randomed.w_emb.value() != want.w_emb.value());

    SubNetworkConfig invalid{64, 2, 4, 1.0, 1};
    CHECK_THROWS_AS(finetune_independent(InitMode::random, w, invalid, corpus, tc),
                    ConfigError);
}

TEST_CASE("independent baseline: training the slice improves it") {
    auto cfg = tiny_cfg();
    auto w = init_supernet<float>(cfg, 43);
    SubNetworkConfig theta{8, 4, 4, 2.0, 2};
    auto corpus = cyclic_corpus(48 * 8, 16);

    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 8;
    tc.seq_len = 8;
    tc.base_lr = 3e-3;
    tc.final_lr = 3e-4;
    tc.use_lora = false;
    tc.seed = 77;

    auto evalset = make_windows(corpus, 8, 8);
    auto before = extract_subnet(w, theta);
    const double ppl_before = perplexity(before, before.theta_max(), evalset);
    auto tuned = finetune_independent(InitMode::pretrained_sliced, w, theta, corpus, tc);
    const double ppl_after = perplexity(tuned, tuned.theta_max(), evalset);
    CHECK(ppl_after < ppl_before);

    // the source super-network is left untouched
    auto w2 = init_supernet<float>(cfg, 43);
    auto wt = w.all_tensors();
    auto w2t = w2.all_tensors();
    for (size_t i = 0; i < wt.size(); ++i) CHECK(wt[i].value() == w2t[i].value());
}
