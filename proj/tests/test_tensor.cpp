#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>
#include <vector>

#include "elm/rng.hpp"
#include "elm/tensor.hpp"

using namespace elm;

namespace {

// Reference kernels, written independently of the tape implementations: plain
// triple loops and per-element formulas, no shared helpers.

std::vector<double> matmul_ref(const std::vector<double>& a, const std::vector<double>& b,
                               int64_t m, int64_t k, int64_t n) {
    std::vector<double> c(m * n, 0.0);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = s;
        }
    return c;
}

std::vector<double> softmax_ref(const std::vector<double>& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    double z = 0.0;
    std::vector<double> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - mx);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return out;
}

std::vector<double> rms_norm_ref(const std::vector<double>& x, const std::vector<double>& gamma,
                                 int64_t m, int64_t d, double eps) {
    std::vector<double> out(x.size());
    for (int64_t i = 0; i < m; ++i) {
        double ss = 0.0;
        for (int64_t j = 0; j < d; ++j) ss += x[i * d + j] * x[i * d + j];
        const double denom = std::sqrt(ss / double(d) + eps);
        for (int64_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] / denom * gamma[j];
    }
    return out;
}

// Naive causal GQA attention: explicit -inf masking, no fusion.
std::vector<double> attention_ref(const std::vector<double>& q, const std::vector<double>& k,
                                  const std::vector<double>& v, int64_t batch, int64_t seq,
                                  int64_t heads, int64_t groups, int64_t dh) {
    const int64_t hpg = heads / groups;
    const int64_t qw = heads * dh, kw = groups * dh;
    std::vector<double> out(batch * seq * qw, 0.0);
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t h = 0; h < heads; ++h) {
            const int64_t g = h / hpg;
            for (int64_t t = 0; t < seq; ++t) {
                std::vector<double> scores(seq, -1e30);
                for (int64_t j = 0; j <= t; ++j) {
                    double s = 0.0;
                    for (int64_t e = 0; e < dh; ++e)
                        s += q[(b * seq + t) * qw + h * dh + e] *
                             k[(b * seq + j) * kw + g * dh + e];
                    scores[j] = s / std::sqrt(double(dh));
                }
                auto p = softmax_ref(scores);
                for (int64_t j = 0; j <= t; ++j)
                    for (int64_t e = 0; e < dh; ++e)
                        out[(b * seq + t) * qw + h * dh + e] +=
                            p[j] * v[(b * seq + j) * kw + g * dh + e];
            }
        }
    return out;
}

double cross_entropy_ref(const std::vector<double>& logits, const std::vector<int32_t>& tgt,
                         int64_t n, int64_t vsz) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        std::vector<double> row(logits.begin() + i * vsz, logits.begin() + (i + 1) * vsz);
        auto p = softmax_ref(row);
        acc -= std::log(p[tgt[i]]);
    }
    return acc / double(n);
}

Tensor<double> randn_t(Shape shape, Rng& rng, double stddev = 1.0) {
    return Tensor<double>::randn(std::move(shape), rng, stddev);
}

} // namespace

TEST_CASE("matmul matches triple-loop reference") {
    Rng rng(11);
    for (int iter = 0; iter < 10; ++iter) {
        const int64_t m = 1 + rng.uniform_below(7);
        const int64_t k = 1 + rng.uniform_below(9);
        const int64_t n = 1 + rng.uniform_below(8);
        auto a = randn_t({m, k}, rng);
        auto b = randn_t({k, n}, rng);
        Tape<double> tape;
        auto c = tape.matmul(a, b);
        auto ref = matmul_ref(a.value(), b.value(), m, k, n);
        for (int64_t i = 0; i < m * n; ++i) CHECK(c.value()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
}

TEST_CASE("matmul_nt matches reference on transposed operand") {
    Rng rng(12);
    const int64_t m = 5, k = 7, n = 4;
    auto a = randn_t({m, k}, rng);
    auto bt = randn_t({n, k}, rng);
    std::vector<double> b(k * n);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < k; ++j) b[j * n + i] = bt.value()[i * k + j];
    Tape<double> tape;
    auto c = tape.matmul_nt(a, bt);
    auto ref = matmul_ref(a.value(), b, m, k, n);
    for (int64_t i = 0; i < m * n; ++i) CHECK(c.value()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    Rng rng(13);
    auto a = randn_t({3, 4}, rng);
    auto b = randn_t({5, 2}, rng);
    Tape<double> tape;
    CHECK_THROWS_AS(tape.matmul(a, b), ShapeError);
}

TEST_CASE("softmax_rows matches reference and known point") {
    Tape<double> tape;
    auto x = Tensor<double>::from({1, 2}, {0.0, std::log(3.0)});
    auto y = tape.softmax_rows(x);
    CHECK(y.value()[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(y.value()[1] == doctest::Approx(0.75).epsilon(1e-12));

    Rng rng(14);
    auto z = randn_t({6, 9}, rng, 3.0);
    auto s = tape.softmax_rows(z);
    for (int64_t i = 0; i < 6; ++i) {
        std::vector<double> row(z.value().begin() + i * 9, z.value().begin() + (i + 1) * 9);
        auto ref = softmax_ref(row);
        double sum = 0.0;
        for (int64_t j = 0; j < 9; ++j) {
            CHECK(s.value()[i * 9 + j] == doctest::Approx(ref[j]).epsilon(1e-12));
            sum += s.value()[i * 9 + j];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("softmax_rows survives large-magnitude rows") {
    Tape<double> tape;
    auto x = Tensor<double>::from({1, 3}, {1000.0, 1000.0, 999.0});
    auto y = tape.softmax_rows(x);
    for (double v : y.value()) CHECK(std::isfinite(v));
    CHECK(y.value()[0] == doctest::Approx(y.value()[1]).epsilon(1e-12));
}

TEST_CASE("rms_norm matches per-row reference") {
    Rng rng(15);
    const int64_t m = 7, d = 11;
    auto x = randn_t({m, d}, rng, 2.0);
    auto gamma = randn_t({1, d}, rng);
    Tape<double> tape;
    auto y = tape.rms_norm(x, gamma, 1e-5);
    auto ref = rms_norm_ref(x.value(), gamma.value(), m, d, 1e-5);
    for (size_t i = 0; i < ref.size(); ++i)
        CHECK(y.value()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("causal attention matches naive masked reference") {
    Rng rng(16);
    for (auto [heads, groups] : std::vector<std::pair<int64_t, int64_t>>{{4, 2}, {3, 3}, {4, 1}}) {
        const int64_t batch = 2, seq = 5, dh = 3;
        auto q = randn_t({batch * seq, heads * dh}, rng);
        auto k = randn_t({batch * seq, groups * dh}, rng);
        auto v = randn_t({batch * seq, groups * dh}, rng);
        Tape<double> tape;
        auto o = tape.causal_attention(q, k, v, batch, seq, heads, groups, dh);
        auto ref = attention_ref(q.value(), k.value(), v.value(), batch, seq, heads, groups, dh);
        for (size_t i = 0; i < ref.size(); ++i)
            CHECK(o.value()[i] == doctest::Approx(ref[i]).epsilon(1e-10));
    }
}

TEST_CASE("causal attention ignores future positions") {
    Rng rng(17);
    const int64_t batch = 1, seq = 6, heads = 2, groups = 1, dh = 4;
    auto q = randn_t({seq, heads * dh}, rng);
    auto k = randn_t({seq, groups * dh}, rng);
    auto v = randn_t({seq, groups * dh}, rng);
    Tape<double> t1;
    auto o1 = t1.causal_attention(q, k, v, batch, seq, heads, groups, dh).clone();
    // Perturb the last position's key/value; outputs at earlier positions must
    // be bitwise unchanged.
    for (int64_t e = 0; e < groups * dh; ++e) {
        k.value()[(seq - 1) * groups * dh + e] += 3.0;
        v.value()[(seq - 1) * groups * dh + e] -= 2.0;
    }
    Tape<double> t2;
    auto o2 = t2.causal_attention(q, k, v, batch, seq, heads, groups, dh);
    for (int64_t t = 0; t < seq - 1; ++t)
        for (int64_t e = 0; e < heads * dh; ++e)
            CHECK(o1.value()[t * heads * dh + e] == o2.value()[t * heads * dh + e]);
}

TEST_CASE("grouped attention routes heads to their key-value group") {
    Rng rng(18);
    const int64_t batch = 1, seq = 4, heads = 4, groups = 2, dh = 3;
    auto q = randn_t({seq, heads * dh}, rng);
    auto k = randn_t({seq, groups * dh}, rng);
    auto v = randn_t({seq, groups * dh}, rng);
    Tape<double> t1;
    auto o1 = t1.causal_attention(q, k, v, batch, seq, heads, groups, dh).clone();
    // Perturbing group 1 must leave heads 0..1 (group 0) untouched.
    for (int64_t t = 0; t < seq; ++t)
        for (int64_t e = 0; e < dh; ++e) v.value()[t * groups * dh + dh + e] += 1.5;
    Tape<double> t2;
    auto o2 = t2.causal_attention(q, k, v, batch, seq, heads, groups, dh);
    for (int64_t t = 0; t < seq; ++t) {
        for (int64_t e = 0; e < 2 * dh; ++e)
            CHECK(o1.value()[t * heads * dh + e] == o2.value()[t * heads * dh + e]);
        bool changed = false;
        for (int64_t e = 2 * dh; e < 4 * dh; ++e)
            changed |= o1.value()[t * heads * dh + e] != o2.value()[t * heads * dh + e];
        CHECK(changed);
    }
}

TEST_CASE("attention probe reports group output norms") {
    Rng rng(19);
    const int64_t batch = 2, seq = 3, heads = 4, groups = 2, dh = 2;
    auto q = randn_t({batch * seq, heads * dh}, rng);
    auto k = randn_t({batch * seq, groups * dh}, rng);
    auto v = randn_t({batch * seq, groups * dh}, rng);
    Tape<double> tape;
    AttentionProbe<double> probe;
    auto o = tape.causal_attention(q, k, v, batch, seq, heads, groups, dh, &probe);
    REQUIRE(probe.group_norms.size() == size_t(batch * seq * groups));
    const int64_t hpg = heads / groups;
    for (int64_t r = 0; r < batch * seq; ++r)
        for (int64_t g = 0; g < groups; ++g) {
            double ss = 0.0;
            for (int64_t e = 0; e < hpg * dh; ++e) {
                const double x = o.value()[r * heads * dh + g * hpg * dh + e];
                ss += x * x;
            }
            CHECK(probe.group_norms[r * groups + g] ==
                  doctest::Approx(std::sqrt(ss)).epsilon(1e-12));
        }
}

TEST_CASE("cross entropy matches reference and known uniform point") {
    const int64_t n = 1, vsz = 4;
    Tape<double> tape;
    auto logits = Tensor<double>::zeros({n, vsz});
    auto loss = tape.cross_entropy_mean(logits, {2});
    CHECK(loss.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    Rng rng(20);
    auto l2 = randn_t({5, 7}, rng, 2.0);
    std::vector<int32_t> tgt = {0, 3, 6, 2, 2};
    Tape<double> t2;
    auto loss2 = t2.cross_entropy_mean(l2, tgt);
    CHECK(loss2.item() == doctest::Approx(cross_entropy_ref(l2.value(), tgt, 5, 7)).epsilon(1e-12));
}

TEST_CASE("cross entropy rejects bad targets") {
    Tape<double> tape;
    auto logits = Tensor<double>::zeros({2, 3});
    CHECK_THROWS_AS(tape.cross_entropy_mean(logits, {0, 3}), InputError);
    CHECK_THROWS_AS(tape.cross_entropy_mean(logits, {0}), ShapeError);
}

namespace {

// Finite-difference check harness for a single-op composite loss.
template <class BuildFn>
double fd_max_rel_err(BuildFn&& build, std::vector<Tensor<double>> params, double h = 1e-6) {
    auto report = grad_check<double>(build, std::move(params), h);
    REQUIRE(report.all_finite);
    return report.max_rel_err;
}

} // namespace

TEST_CASE("gradients agree with central differences across ops") {
    Rng rng(21);
    for (int seed = 0; seed < 5; ++seed) {
        Rng r = rng.derive("case" + std::to_string(seed));
        auto a = randn_t({3, 4}, r);
        auto b = randn_t({4, 5}, r);
        auto g = randn_t({1, 5}, r);

        // matmul -> rms_norm -> sigmoid -> sum
        double err = fd_max_rel_err(
            [&](Tape<double>& t) {
                auto h1 = t.matmul(a, b);
                auto h2 = t.rms_norm(h1, g, 1e-5);
                auto h3 = t.sigmoid(h2);
                return t.sum_all(h3);
            },
            {a, b, g});
        CHECK(err < 1e-6);
    }
}

TEST_CASE("gradients: softmax, log-softmax, elementwise, gather, positional") {
    Rng rng(22);
    auto x = randn_t({4, 6}, rng);
    auto w = randn_t({6, 6}, rng);
    auto pos = randn_t({8, 6}, rng);
    auto emb = randn_t({10, 6}, rng);

    double err = fd_max_rel_err(
        [&](Tape<double>& t) {
            auto rows = t.gather_rows(emb, {1, 7, 7, 0});
            auto h0 = t.add_positional(rows, pos, 2, 2);
            auto h1 = t.matmul(h0, w);
            auto h2 = t.gather_cols(h1, {5, 0, 3});
            auto sm = t.softmax_rows(h2);
            auto lsm = t.log_softmax_rows(h2);
            auto prod = t.mul(sm, lsm);
            auto mix = t.add_scaled(t.add(prod, h2), t.sub(sm, lsm), 0.37);
            auto sc = t.scale(mix, 1.7);
            return t.sum_all(sc);
        },
        {emb, pos, w});
    CHECK(err < 1e-6);
    (void)x;
}

TEST_CASE("gradients: non-square matmul in both orientations") {
    Rng rng(47);
    auto a = randn_t({3, 5}, rng);
    auto b = randn_t({5, 4}, rng);
    auto bt = randn_t({4, 5}, rng);
    double err = fd_max_rel_err(
        [&](Tape<double>& t) {
            auto c1 = t.matmul(a, b);
            auto c2 = t.matmul_nt(a, bt);
            auto s = t.add(t.sigmoid(c1), t.sigmoid(c2));
            return t.sum_all(s);
        },
        {a, b, bt});
    CHECK(err < 1e-6);
}

TEST_CASE("gradients: fused attention") {
    Rng rng(23);
    const int64_t batch = 2, seq = 4, heads = 4, groups = 2, dh = 3;
    auto q = randn_t({batch * seq, heads * dh}, rng);
    auto k = randn_t({batch * seq, groups * dh}, rng);
    auto v = randn_t({batch * seq, groups * dh}, rng);
    auto wout = randn_t({heads * dh, 2}, rng);
    double err = fd_max_rel_err(
        [&](Tape<double>& t) {
            auto o = t.causal_attention(q, k, v, batch, seq, heads, groups, dh);
            auto y = t.matmul(o, wout);
            auto s = t.sigmoid(y);
            return t.sum_all(s);
        },
        {q, k, v, wout}, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("gradients: cross entropy through a projection") {
    Rng rng(24);
    auto x = randn_t({6, 5}, rng);
    auto w = randn_t({5, 9}, rng);
    std::vector<int32_t> tgt = {1, 8, 0, 4, 4, 7};
    double err = fd_max_rel_err(
        [&](Tape<double>& t) {
            auto logits = t.matmul(x, w);
            return t.cross_entropy_mean(logits, tgt);
        },
        {x, w});
    CHECK(err < 1e-6);
}

TEST_CASE("gradients: every distillation kind") {
    Rng rng(25);
    const int64_t n = 4, vsz = 6;
    auto teacher = randn_t({n, vsz}, rng, 1.5);
    auto ws = randn_t({vsz, vsz}, rng);
    auto base = randn_t({n, vsz}, rng);
    for (KdKind kind : {KdKind::kl_forward, KdKind::kl_reverse, KdKind::js, KdKind::l1,
                        KdKind::l2, KdKind::cosine}) {
        CAPTURE(kd_kind_name(kind));
        const double temp = kind == KdKind::js ? 2.0 : 1.0;
        double err = fd_max_rel_err(
            [&](Tape<double>& t) {
                auto student = t.matmul(base, ws);
                return t.kd_divergence(kind, teacher, student, temp);
            },
            {base, ws});
        // l1 has kinks; random logits stay away from them so tolerance holds.
        CHECK(err < 5e-6);
    }
}

TEST_CASE("distillation is zero when student equals teacher") {
    Rng rng(26);
    auto teacher = randn_t({3, 8}, rng, 2.0);
    auto student = teacher.clone();
    for (KdKind kind : {KdKind::kl_forward, KdKind::kl_reverse, KdKind::js, KdKind::l1,
                        KdKind::l2, KdKind::cosine}) {
        Tape<double> t;
        auto d = t.kd_divergence(kind, teacher, student, 1.0);
        CHECK(std::abs(d.item()) < 1e-12);
    }
}

TEST_CASE("js divergence is symmetric, forward kl is not") {
    Rng rng(27);
    auto a = randn_t({4, 7}, rng, 1.2);
    auto b = randn_t({4, 7}, rng, 1.2);
    Tape<double> t;
    auto jab = t.kd_divergence(KdKind::js, a, b, 1.0);
    auto jba = t.kd_divergence(KdKind::js, b, a, 1.0);
    CHECK(jab.item() == doctest::Approx(jba.item()).epsilon(1e-12));
    auto kab = t.kd_divergence(KdKind::kl_forward, a, b, 1.0);
    auto kba = t.kd_divergence(KdKind::kl_forward, b, a, 1.0);
    CHECK(std::abs(kab.item() - kba.item()) > 1e-6);
}

TEST_CASE("forward kl at a hand-computed point") {
    // Teacher logits [0, 0] -> (1/2, 1/2); student [0, ln 3] -> (1/4, 3/4).
    // KL = 1/2 ln(1/2 / 1/4) + 1/2 ln(1/2 / 3/4) = 1/2 ln(4/3).
    Tape<double> t;
    auto teacher = Tensor<double>::from({1, 2}, {0.0, 0.0});
    auto student = Tensor<double>::from({1, 2}, {0.0, std::log(3.0)});
    auto d = t.kd_divergence(KdKind::kl_forward, teacher, student, 1.0);
    CHECK(d.item() == doctest::Approx(0.5 * std::log(4.0 / 3.0)).epsilon(1e-12));
}

TEST_CASE("no gradient flows to the teacher") {
    Rng rng(28);
    auto teacher = randn_t({3, 5}, rng).set_requires_grad(true);
    auto student = randn_t({3, 5}, rng).set_requires_grad(true);
    Tape<double> t;
    auto d = t.kd_divergence(KdKind::kl_forward, teacher, student, 1.0);
    t.backward(d);
    for (double g : teacher.grad()) CHECK(g == 0.0);
    bool any = false;
    for (double g : student.grad()) any |= g != 0.0;
    CHECK(any);
}

TEST_CASE("fan-out gradients accumulate; off-path tensors stay zero") {
    auto x = Tensor<double>::from({1, 1}, {3.0}).set_requires_grad(true);
    auto unused = Tensor<double>::from({1, 1}, {5.0}).set_requires_grad(true);
    Tape<double> t;
    auto sq = t.mul(x, x);       // x used twice in one node
    auto y = t.add(sq, x);       // and once more: d/dx (x^2 + x) = 2x + 1 = 7
    auto z = t.mul(unused, unused);
    auto loss = t.sum_all(y);
    t.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(7.0).epsilon(1e-12));
    REQUIRE(unused.grad().size() == 1);
    CHECK(unused.grad()[0] == 0.0);
    (void)z;
}

TEST_CASE("gradients accumulate across tapes sharing a weight") {
    auto w = Tensor<double>::from({1, 1}, {2.0}).set_requires_grad(true);
    for (int pass = 0; pass < 3; ++pass) {
        Tape<double> t;
        auto y = t.mul(w, w);
        t.backward(t.sum_all(y));
    }
    CHECK(w.grad()[0] == doctest::Approx(3 * 2 * 2.0).epsilon(1e-12)); // 3 passes of 2w
}

TEST_CASE("second backward on one tape is rejected") {
    auto x = Tensor<double>::from({1, 1}, {1.0}).set_requires_grad(true);
    Tape<double> t;
    auto y = t.sigmoid(x);
    auto s = t.sum_all(y);
    t.backward(s);
    CHECK_THROWS_AS(t.backward(s), StateError);
}

TEST_CASE("replay recomputes forward values bitwise") {
    Rng rng(29);
    auto x = randn_t({4, 4}, rng);
    auto w = randn_t({4, 4}, rng);
    Tape<double> t;
    auto h1 = t.matmul(x, w);
    auto h2 = t.softmax_rows(h1);
    auto h3 = t.rms_norm(h2, Tensor<double>::full({1, 4}, 1.0), 1e-5);
    auto bytes_of = [](const std::vector<double>& v) {
        return std::vector<char>(reinterpret_cast<const char*>(v.data()),
                                 reinterpret_cast<const char*>(v.data() + v.size()));
    };
    auto b1 = bytes_of(h1.value()), b2 = bytes_of(h2.value()), b3 = bytes_of(h3.value());
    // Scribble over outputs, then replay.
    std::fill(h1.value().begin(), h1.value().end(), -1.0);
    std::fill(h2.value().begin(), h2.value().end(), -1.0);
    std::fill(h3.value().begin(), h3.value().end(), -1.0);
    t.replay();
    CHECK(bytes_of(h1.value()) == b1);
    CHECK(bytes_of(h2.value()) == b2);
    CHECK(bytes_of(h3.value()) == b3);
}

TEST_CASE("record keeps append order and exposes op metadata") {
    Rng rng(30);
    auto x = randn_t({2, 3}, rng);
    auto w = randn_t({3, 3}, rng);
    Tape<double> t;
    auto h1 = t.matmul(x, w);
    auto h2 = t.sigmoid(h1);
    auto h3 = t.sum_all(h2);
    auto info = t.nodes_info();
    REQUIRE(info.size() == 3);
    CHECK(info[0].kind == OpKind::matmul);
    CHECK(info[1].kind == OpKind::sigmoid);
    CHECK(info[2].kind == OpKind::sum_all);
    CHECK(info[0].output == h1.id());
    CHECK(info[1].inputs == std::vector<int64_t>{h1.id()});
    CHECK(info[2].output == h3.id());
    CHECK(info[0].inputs == (std::vector<int64_t>{x.id(), w.id()}));
}

TEST_CASE("dropout: rate zero is identity, mask is stable across replay") {
    Rng rng(31);
    auto x = randn_t({8, 8}, rng);
    Rng drop_rng = rng.derive("dropout");
    Tape<double> t;
    auto y0 = t.dropout(x, 0.0, drop_rng);
    for (size_t i = 0; i < x.value().size(); ++i) CHECK(y0.value()[i] == x.value()[i]);

    auto y = t.dropout(x, 0.5, drop_rng);
    auto before = y.value();
    t.replay();
    CHECK(y.value() == before);
    // Surviving entries are scaled by 1/(1-p).
    int kept = 0;
    for (size_t i = 0; i < x.value().size(); ++i) {
        if (y.value()[i] != 0.0) {
            ++kept;
            CHECK(y.value()[i] == doctest::Approx(2.0 * x.value()[i]).epsilon(1e-12));
        }
    }
    CHECK(kept > 8);
    CHECK(kept < 56);
}

TEST_CASE("dropout gradient respects the drawn mask") {
    Rng rng(32);
    auto x = randn_t({5, 5}, rng);
    Rng drop_rng(77);
    // The mask is drawn at op creation, so the same seed rebuilds the same
    // mask inside the finite-difference harness.
    double err = fd_max_rel_err(
        [&](Tape<double>& t) {
            Rng local(77);
            auto y = t.dropout(x, 0.4, local);
            auto s = t.sigmoid(y);
            return t.sum_all(s);
        },
        {x});
    CHECK(err < 1e-6);
    (void)drop_rng;
}

TEST_CASE("mult-add counter covers matmul and attention exactly") {
    Rng rng(33);
    Tape<double> t;
    auto a = randn_t({3, 4}, rng);
    auto b = randn_t({4, 5}, rng);
    t.matmul(a, b);
    CHECK(t.madds() == 3u * 4u * 5u);
    t.reset_madds();
    const int64_t batch = 2, seq = 5, heads = 4, groups = 2, dh = 3;
    auto q = randn_t({batch * seq, heads * dh}, rng);
    auto k = randn_t({batch * seq, groups * dh}, rng);
    auto v = randn_t({batch * seq, groups * dh}, rng);
    t.causal_attention(q, k, v, batch, seq, heads, groups, dh);
    // Per (batch, head): scores sum_t (t+1)*dh plus the same for the value mix.
    uint64_t expect = uint64_t(batch) * heads * 2u * dh * (seq * (seq + 1) / 2);
    CHECK(t.madds() == expect);
}

TEST_CASE("grad_check flags a wrong gradient") {
    // A deliberately broken loss: forward computes x^2 but we compare against
    // the gradient of x^3 by scaling the analytic result. Implemented by
    // checking that a mismatched build (different h vs analytic pass) reports
    // a large error: build returns x^2 on the analytic pass and x^2 + x on
    // numeric passes via a counter.
    auto x = Tensor<double>::from({1, 1}, {1.5}).set_requires_grad(true);
    int calls = 0;
    auto report = grad_check<double>(
        [&](Tape<double>& t) {
            ++calls;
            auto y = t.mul(x, x);
            if (calls > 1) y = t.add(y, x);
            return t.sum_all(y);
        },
        {x}, 1e-6);
    CHECK(report.max_rel_err > 0.1);
}

TEST_CASE("rng: uniform_below stays in range and covers values") {
    Rng rng(40);
    std::set<uint64_t> seen;
    for (int i = 0; i < 2000; ++i) {
        uint64_t v = rng.uniform_below(7);
        CHECK(v < 7);
        seen.insert(v);
    }
    CHECK(seen.size() == 7);
}

TEST_CASE("rng: same seed replays, derived streams differ") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(123);
    Rng d1 = c.derive("init");
    Rng d2 = c.derive("train");
    bool differ = false;
    for (int i = 0; i < 10; ++i) differ |= d1.next_u64() != d2.next_u64();
    CHECK(differ);
    Rng e1 = Rng(123).derive("init");
    Rng e2 = Rng(123).derive("init");
    for (int i = 0; i < 10; ++i) CHECK(e1.next_u64() == e2.next_u64());
}

TEST_CASE("rng: normal moments are sane") {
    Rng rng(41);
    double sum = 0.0, sum2 = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        double v = rng.normal();
        sum += v;
        sum2 += v * v;
    }
    CHECK(std::abs(sum / n) < 0.03);
    CHECK(std::abs(sum2 / n - 1.0) < 0.05);
}

TEST_CASE("rng: shuffle is a permutation") {
    Rng rng(42);
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[i] = i;
    rng.shuffle(v);
    auto sorted = v;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 50; ++i) CHECK(sorted[i] == i);
}
