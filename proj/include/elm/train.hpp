#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "elm/arch.hpp"
#include "elm/grid.hpp"
#include "elm/lora.hpp"
#include "elm/rng.hpp"
#include "elm/supernet.hpp"
#include "elm/tensor.hpp"

namespace elm {

// Accepts the canonical kd_kind_name() spellings plus the forward_kl /
// reverse_kl aliases.
KdKind kd_kind_from(const std::string& name);

enum class TrainMode { weight_sharing, independent };
enum class InitMode { random, pretrained_sliced };

const char* train_mode_name(TrainMode m);
TrainMode train_mode_from(const std::string& name);
const char* init_mode_name(InitMode m);
InitMode init_mode_from(const std::string& name);

struct TrainConfig {
    int64_t epochs = 3;
    double base_lr = 2e-4;
    double final_lr = 6e-5;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double clip_norm = 1.0; // global gradient-norm cap; 0 disables clipping
    int64_t k = 3;          // sub-networks drawn per step on top of the full pass
    KdKind kd_kind = KdKind::cosine;
    double kd_temperature = 1.0;
    double kd_weight = 1.0;
    int64_t batch_size = 8;
    int64_t seq_len = 64;
    uint64_t seed = 0;
    bool use_lora = true;
    int64_t lora_rank = 32;
    double lora_alpha = 16.0;
    double lora_dropout = 0.05;
    TrainMode mode = TrainMode::weight_sharing;

    std::vector<std::string> problems() const;
    void validate() const;
};

// Cosine annealing with exact endpoints: step 0 returns base_lr, step
// total_steps-1 returns final_lr. A single-step schedule degenerates to
// base_lr.
double cosine_lr(double base_lr, double final_lr, int64_t step, int64_t total_steps);

template <class Real>
struct AdamStateT {
    std::vector<Tensor<Real>> params;
    std::vector<std::vector<Real>> m; // first moments, shaped like params
    std::vector<std::vector<Real>> v; // second moments, shaped like params
    int64_t step = 0;                 // completed updates
};

template <class Real>
AdamStateT<Real> make_adam(std::vector<Tensor<Real>> params);

// One bias-corrected update from the gradients currently stored on the
// parameters. Gradients are left untouched; the caller zeroes them.
template <class Real>
void adam_update(AdamStateT<Real>& st, double lr, double beta1, double beta2, double eps);

template <class Real>
double global_grad_norm(const std::vector<Tensor<Real>>& params);

// Scales all gradients by max_norm/norm when the global L2 norm exceeds
// max_norm (max_norm 0 disables). Returns the pre-clip norm.
template <class Real>
double clip_global_norm(const std::vector<Tensor<Real>>& params, double max_norm);

// Distillation loss against constant teacher logits. Validates both sides are
// finite; gradient flows to the student only.
template <class Real>
Tensor<Real> kd_loss(Tape<Real>& tape, KdKind kind, const Tensor<Real>& teacher,
                     const Tensor<Real>& student, Real temperature);

struct StepMetrics {
    int64_t step = 0;
    double lr = 0.0;
    double grad_norm = 0.0; // pre-clip global norm
    double teacher_loss = 0.0;
    std::vector<SubNetworkConfig> drawn;
    std::vector<double> student_lm;
    std::vector<double> student_kd;
    int64_t forward_passes = 0;
    uint64_t madds = 0; // summed over the step's passes
};

template <class Real>
struct TrainStateT {
    WeightsT<Real> weights;
    LoraAdapterSetT<Real> adapters; // rank 0 when the base weights train directly
    bool lora_on = false;
    AdamStateT<Real> adam;
    Rng draw_rng{0};
    Rng data_rng{0};
    Rng dropout_rng{0};
    int64_t step = 0;
    std::vector<StepMetrics> log;

    // The tensors the optimizer moves: adapter pairs under LoRA, every base
    // tensor otherwise.
    std::vector<Tensor<Real>> trainable() const {
        return lora_on ? adapters.trainable() : weights.all_tensors();
    }
};

using TrainState = TrainStateT<float>;

// Takes ownership of the weights, attaches adapters when configured, marks
// exactly the trainable tensors as differentiable, and seeds the rng streams
// ("draws", "data", "dropout") from cfg.seed.
template <class Real>
TrainStateT<Real> make_train_state(WeightsT<Real> w, const TrainConfig& cfg);

// One sandwich update: a full-width pass with LM loss (its logits become the
// frozen teacher), k grid draws each scored by LM loss + kd_weight * KD
// against the teacher, gradients summed over all k+1 passes, then a single
// clipped Adam step at the given rate. A non-finite loss aborts before any
// parameter changes.
template <class Real>
StepMetrics sandwich_step(TrainStateT<Real>& st, const TokenBatch& batch,
                          const CandidateGrid& grid, const TrainConfig& cfg, double lr);

// Runs cfg.epochs passes over the corpus chopped into seq_len windows,
// reshuffled each epoch, annealing the rate across all steps. on_step fires
// after every update, on_epoch after each full pass (checkpoint hook).
template <class Real>
void train(TrainStateT<Real>& st, const std::vector<int32_t>& corpus, const CandidateGrid& grid,
           const TrainConfig& cfg, const std::function<void(const StepMetrics&)>& on_step = {},
           const std::function<void(int64_t)>& on_epoch = {});

// Baseline: materializes theta as a standalone network (sliced from w or
// freshly initialized) and trains it alone with plain LM loss on the same
// schedule. Adapters, when enabled, are merged into the returned weights.
template <class Real>
WeightsT<Real> finetune_independent(InitMode init, const WeightsT<Real>& w,
                                    const SubNetworkConfig& theta,
                                    const std::vector<int32_t>& corpus, const TrainConfig& cfg);

extern template struct AdamStateT<float>;
extern template struct TrainStateT<float>;
extern template AdamStateT<float> make_adam<float>(std::vector<Tensor<float>>);
extern template void adam_update<float>(AdamStateT<float>&, double, double, double, double);
extern template double global_grad_norm<float>(const std::vector<Tensor<float>>&);
extern template double clip_global_norm<float>(const std::vector<Tensor<float>>&, double);
extern template Tensor<float> kd_loss<float>(Tape<float>&, KdKind, const Tensor<float>&,
                                             const Tensor<float>&, float);
extern template Tensor<double> kd_loss<double>(Tape<double>&, KdKind, const Tensor<double>&,
                                               const Tensor<double>&, double);
extern template TrainStateT<float> make_train_state<float>(WeightsT<float>, const TrainConfig&);
extern template StepMetrics sandwich_step<float>(TrainStateT<float>&, const TokenBatch&,
                                                 const CandidateGrid&, const TrainConfig&,
                                                 double);
extern template void train<float>(TrainStateT<float>&, const std::vector<int32_t>&,
                                  const CandidateGrid&, const TrainConfig&,
                                  const std::function<void(const StepMetrics&)>&,
                                  const std::function<void(int64_t)>&);
extern template WeightsT<float> finetune_independent<float>(InitMode, const WeightsT<float>&,
                                                            const SubNetworkConfig&,
                                                            const std::vector<int32_t>&,
                                                            const TrainConfig&);

} // namespace elm
