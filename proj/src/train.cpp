#include "elm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <utility>

#include "elm/error.hpp"

namespace elm {

KdKind kd_kind_from(const std::string& name) {
    if (name == "kl_forward" || name == "forward_kl") return KdKind::kl_forward;
    if (name == "kl_reverse" || name == "reverse_kl") return KdKind::kl_reverse;
    if (name == "js") return KdKind::js;
    if (name == "l1") return KdKind::l1;
    if (name == "l2") return KdKind::l2;
    if (name == "cosine") return KdKind::cosine;
    throw ConfigError("unknown distillation loss \"" + name +
                      "\" (kl_forward, kl_reverse, js, l1, l2, cosine)");
}

const char* train_mode_name(TrainMode m) {
    return m == TrainMode::weight_sharing ? "weight_sharing" : "independent";
}

TrainMode train_mode_from(const std::string& name) {
    if (name == "weight_sharing") return TrainMode::weight_sharing;
    if (name == "independent") return TrainMode::independent;
    throw ConfigError("unknown train mode \"" + name + "\" (weight_sharing, independent)");
}

const char* init_mode_name(InitMode m) {
    return m == InitMode::random ? "random" : "pretrained_sliced";
}

InitMode init_mode_from(const std::string& name) {
    if (name == "random") return InitMode::random;
    if (name == "pretrained_sliced") return InitMode::pretrained_sliced;
    throw ConfigError("unknown init mode \"" + name + "\" (random, pretrained_sliced)");
}

std::vector<std::string> TrainConfig::problems() const {
    std::vector<std::string> out;
    if (epochs < 0) out.push_back("epochs must be >= 0");
    if (!(base_lr > 0.0)) out.push_back("base_lr must be positive");
    if (!(final_lr > 0.0) || final_lr > base_lr)
        out.push_back("final_lr must lie in (0, base_lr]");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) out.push_back("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) out.push_back("beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) out.push_back("adam_eps must be positive");
    if (!(clip_norm >= 0.0)) out.push_back("clip_norm must be >= 0");
    if (k < 0) out.push_back("k must be >= 0");
    if (!(kd_temperature > 0.0)) out.push_back("kd_temperature must be positive");
    if (!(kd_weight >= 0.0)) out.push_back("kd_weight must be >= 0");
    if (batch_size < 1) out.push_back("batch_size must be >= 1");
    if (seq_len < 2) out.push_back("seq_len must be >= 2 for next-token targets");
    if (use_lora) {
        if (lora_rank < 1) out.push_back("lora_rank must be >= 1");
        if (!(lora_dropout >= 0.0 && lora_dropout < 1.0))
            out.push_back("lora_dropout must lie in [0, 1)");
    }
    return out;
}

void TrainConfig::validate() const {
    auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid training configuration:";
    for (const auto& s : p) msg += " " + s + ";";
    throw ConfigError(msg);
}

double cosine_lr(double base_lr, double final_lr, int64_t step, int64_t total_steps) {
    if (total_steps <= 1 || step <= 0) return base_lr;
    if (step >= total_steps - 1) return final_lr;
    const double x = static_cast<double>(step) / static_cast<double>(total_steps - 1);
    return final_lr + 0.5 * (base_lr - final_lr) * (1.0 + std::cos(std::numbers::pi * x));
}

template <class Real>
AdamStateT<Real> make_adam(std::vector<Tensor<Real>> params) {
    AdamStateT<Real> st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& p : params) {
        st.m.emplace_back(p.numel(), Real(0));
        st.v.emplace_back(p.numel(), Real(0));
    }
    st.params = std::move(params);
    return st;
}

template <class Real>
void adam_update(AdamStateT<Real>& st, double lr, double beta1, double beta2, double eps) {
    st.step += 1;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.step));
    for (size_t i = 0; i < st.params.size(); ++i) {
        st.params[i].ensure_grad();
        const auto& g = st.params[i].grad();
        auto& val = st.params[i].value();
        auto& m = st.m[i];
        auto& v = st.v[i];
        for (size_t j = 0; j < val.size(); ++j) {
            const double gj = static_cast<double>(g[j]);
            const double mj = beta1 * static_cast<double>(m[j]) + (1.0 - beta1) * gj;
            const double vj = beta2 * static_cast<double>(v[j]) + (1.0 - beta2) * gj * gj;
            m[j] = static_cast<Real>(mj);
            v[j] = static_cast<Real>(vj);
            val[j] -= static_cast<Real>(lr * (mj / c1) / (std::sqrt(vj / c2) + eps));
        }
    }
}

template <class Real>
double global_grad_norm(const std::vector<Tensor<Real>>& params) {
    double ss = 0.0;
    for (const auto& p : params)
        for (Real g : p.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(ss);
}

template <class Real>
double clip_global_norm(const std::vector<Tensor<Real>>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& p : params)
            for (Real& g : p.grad()) g = static_cast<Real>(static_cast<double>(g) * s);
    }
    return norm;
}

template <class Real>
Tensor<Real> kd_loss(Tape<Real>& tape, KdKind kind, const Tensor<Real>& teacher,
                     const Tensor<Real>& student, Real temperature) {
    for (Real v : teacher.value())
        if (!std::isfinite(static_cast<double>(v)))
            throw InputError("distillation loss: teacher logits are not finite");
    for (Real v : student.value())
        if (!std::isfinite(static_cast<double>(v)))
            throw InputError("distillation loss: student logits are not finite");
    return tape.kd_divergence(kind, teacher, student, temperature);
}

template <class Real>
TrainStateT<Real> make_train_state(WeightsT<Real> w, const TrainConfig& cfg) {
    cfg.validate();
    TrainStateT<Real> st;
    st.weights = std::move(w);
    st.lora_on = cfg.use_lora;
    if (cfg.use_lora) {
        st.adapters = attach_lora<Real>(st.weights.cfg, cfg.lora_rank, cfg.lora_alpha,
                                        cfg.lora_dropout, cfg.seed);
        for (auto& t : st.weights.all_tensors()) t.set_requires_grad(false);
        for (auto& t : st.adapters.trainable()) t.set_requires_grad(true);
    } else {
        for (auto& t : st.weights.all_tensors()) t.set_requires_grad(true);
    }
    st.adam = make_adam(st.trainable());
    Rng root(cfg.seed);
    st.draw_rng = root.derive("draws");
    st.data_rng = root.derive("data");
    st.dropout_rng = root.derive("dropout");
    return st;
}

namespace {

// Rows that have a next token (all but the last position of each sequence)
// and the token each of them predicts.
struct ShiftedTargets {
    std::vector<int64_t> keep;
    std::vector<int32_t> next;
};

ShiftedTargets shifted_targets(const TokenBatch& batch) {
    if (batch.seq < 2)
        throw InputError("training batch needs sequences of at least 2 tokens, got " +
                         std::to_string(batch.seq));
    ShiftedTargets out;
    out.keep.reserve(batch.batch * (batch.seq - 1));
    out.next.reserve(batch.batch * (batch.seq - 1));
    for (int64_t r = 0; r < batch.batch; ++r)
        for (int64_t t = 0; t + 1 < batch.seq; ++t) {
            out.keep.push_back(r * batch.seq + t);
            out.next.push_back(batch.ids[r * batch.seq + t + 1]);
        }
    return out;
}

} // namespace

template <class Real>
StepMetrics sandwich_step(TrainStateT<Real>& st, const TokenBatch& batch,
                          const CandidateGrid& grid, const TrainConfig& cfg, double lr) {
    StepMetrics ms;
    ms.step = st.step;
    ms.lr = lr;

    const auto tgt = shifted_targets(batch);
    const auto trainables = st.trainable();
    for (const auto& t : trainables) t.zero_grad();

    ForwardOptions<Real> opt;
    opt.lora = st.lora_on ? &st.adapters : nullptr;
    opt.dropout_rng = st.lora_on && st.adapters.dropout > 0.0 ? &st.dropout_rng : nullptr;

    // Draw order is part of the step's rng contract: k picks, then passes.
    const auto drawn =
        cfg.k > 0 ? draw(grid, st.draw_rng, cfg.k) : std::vector<SubNetworkConfig>{};

    Tape<Real> teacher_tape;
    auto teacher = forward(teacher_tape, st.weights, st.weights.theta_max(), batch, opt);
    auto teacher_rows = teacher_tape.gather_rows(teacher.logits, tgt.keep);
    auto teacher_lm = teacher_tape.cross_entropy_mean(teacher_rows, tgt.next);
    ms.teacher_loss = static_cast<double>(teacher_lm.item());
    if (!std::isfinite(ms.teacher_loss))
        throw StateError("sandwich step " + std::to_string(st.step) +
                         ": full-network loss is not finite (" +
                         std::to_string(ms.teacher_loss) + "), aborting before the update");
    teacher_tape.backward(teacher_lm);
    ms.forward_passes += 1;
    ms.madds += teacher_tape.madds();

    // The teacher distribution is a constant for every student pass.
    auto teacher_const =
        Tensor<Real>::from(teacher.logits.shape(), std::vector<Real>(teacher.logits.value()));

    for (const auto& theta : drawn) {
        Tape<Real> tape;
        auto out = forward(tape, st.weights, theta, batch, opt);
        auto rows = tape.gather_rows(out.logits, tgt.keep);
        auto lm = tape.cross_entropy_mean(rows, tgt.next);
        auto kd = kd_loss(tape, cfg.kd_kind, teacher_const, out.logits,
                          static_cast<Real>(cfg.kd_temperature));
        auto total = tape.add_scaled(lm, kd, static_cast<Real>(cfg.kd_weight));
        const double lm_v = static_cast<double>(lm.item());
        const double kd_v = static_cast<double>(kd.item());
        if (!std::isfinite(lm_v) || !std::isfinite(kd_v) ||
            !std::isfinite(static_cast<double>(total.item())))
            throw StateError("sandwich step " + std::to_string(st.step) + ": loss for " +
                             theta.to_string() + " is not finite (lm=" + std::to_string(lm_v) +
                             ", kd=" + std::to_string(kd_v) +
                             "), aborting before the update");
        tape.backward(total);
        ms.drawn.push_back(theta);
        ms.student_lm.push_back(lm_v);
        ms.student_kd.push_back(kd_v);
        ms.forward_passes += 1;
        ms.madds += tape.madds();
    }

    ms.grad_norm = clip_global_norm(trainables, cfg.clip_norm);
    adam_update(st.adam, lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    st.step += 1;
    st.log.push_back(ms);
    return ms;
}

template <class Real>
void train(TrainStateT<Real>& st, const std::vector<int32_t>& corpus, const CandidateGrid& grid,
           const TrainConfig& cfg, const std::function<void(const StepMetrics&)>& on_step,
           const std::function<void(int64_t)>& on_epoch) {
    cfg.validate();
    if (cfg.seq_len > st.weights.cfg.max_seq_len)
        throw ConfigError("seq_len " + std::to_string(cfg.seq_len) +
                          " exceeds the model's max_seq_len " +
                          std::to_string(st.weights.cfg.max_seq_len));
    const int64_t T = cfg.seq_len;
    const int64_t n_windows = static_cast<int64_t>(corpus.size()) / T;
    if (n_windows < 1)
        throw InputError("corpus of " + std::to_string(corpus.size()) +
                         " tokens is shorter than one window of " + std::to_string(T));
    const int64_t steps_per_epoch = (n_windows + cfg.batch_size - 1) / cfg.batch_size;
    const int64_t total_steps = cfg.epochs * steps_per_epoch;

    std::vector<int64_t> order(n_windows);
    int64_t global_step = 0;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), int64_t(0));
        st.data_rng.shuffle(order);
        for (int64_t at = 0; at < n_windows; at += cfg.batch_size) {
            const int64_t rows = std::min(cfg.batch_size, n_windows - at);
            TokenBatch batch;
            batch.batch = rows;
            batch.seq = T;
            batch.ids.reserve(rows * T);
            for (int64_t r = 0; r < rows; ++r) {
                const int64_t w = order[at + r];
                batch.ids.insert(batch.ids.end(), corpus.begin() + w * T,
                                 corpus.begin() + (w + 1) * T);
            }
            const double lr = cosine_lr(cfg.base_lr, cfg.final_lr, global_step, total_steps);
            auto ms = sandwich_step(st, batch, grid, cfg, lr);
            ++global_step;
            if (on_step) on_step(ms);
        }
        if (on_epoch) on_epoch(epoch);
    }
}

template <class Real>
WeightsT<Real> finetune_independent(InitMode init, const WeightsT<Real>& w,
                                    const SubNetworkConfig& theta,
                                    const std::vector<int32_t>& corpus, const TrainConfig& cfg) {
    cfg.validate();
    check_structural(w.cfg, theta);

    WeightsT<Real> small;
    if (init == InitMode::pretrained_sliced) {
        small = extract_subnet(w, theta);
    } else {
        SuperNetConfig sc;
        sc.vocab_size = w.cfg.vocab_size;
        sc.d_model_max = theta.d_model;
        sc.n_layers_max = theta.n_layers;
        sc.n_heads_max = theta.n_heads;
        sc.n_groups_max = theta.n_heads * w.cfg.n_groups_max / w.cfg.n_heads_max;
        sc.d_head_max = theta.d_head;
        sc.ffn_ratio_max = theta.ffn_ratio;
        sc.max_seq_len = w.cfg.max_seq_len;
        small = init_supernet<Real>(sc, Rng(cfg.seed).derive("independent-init").seed());
    }

    TrainConfig icfg = cfg;
    icfg.mode = TrainMode::independent;
    icfg.k = 0; // plain LM training, no sandwich and no distillation
    auto st = make_train_state(std::move(small), icfg);
    CandidateGrid no_grid;
    train(st, corpus, no_grid, icfg);
    if (st.lora_on)
        return extract_subnet(st.weights, st.weights.theta_max(), &st.adapters);
    return std::move(st.weights);
}

template struct AdamStateT<float>;
template struct TrainStateT<float>;
template AdamStateT<float> make_adam<float>(std::vector<Tensor<float>>);
template void adam_update<float>(AdamStateT<float>&, double, double, double, double);
template double global_grad_norm<float>(const std::vector<Tensor<float>>&);
template double clip_global_norm<float>(const std::vector<Tensor<float>>&, double);
template Tensor<float> kd_loss<float>(Tape<float>&, KdKind, const Tensor<float>&,
                                      const Tensor<float>&, float);
template Tensor<double> kd_loss<double>(Tape<double>&, KdKind, const Tensor<double>&,
                                        const Tensor<double>&, double);
template TrainStateT<float> make_train_state<float>(WeightsT<float>, const TrainConfig&);
template StepMetrics sandwich_step<float>(TrainStateT<float>&, const TokenBatch&,
                                          const CandidateGrid&, const TrainConfig&, double);
template void train<float>(TrainStateT<float>&, const std::vector<int32_t>&,
                           const CandidateGrid&, const TrainConfig&,
                           const std::function<void(const StepMetrics&)>&,
                           const std::function<void(int64_t)>&);
template WeightsT<float> finetune_independent<float>(InitMode, const WeightsT<float>&,
                                                     const SubNetworkConfig&,
                                                     const std::vector<int32_t>&,
                                                     const TrainConfig&);

} // namespace elm
