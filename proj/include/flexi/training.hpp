#pragma once

// Explicit backpropagation, Adam, and the fine-tuning loop.

#include "flexi/corpus.hpp"
#include "flexi/model.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <vector>

namespace flexi {

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Schedule { constant, cosine };
/// adapters_norms_bases: every adapter, every output-norm gamma, and every
/// native block that serves as a base for a Shared or Repeated block.
enum class TrainableSet { all, adapters_norms_bases };

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    double lr = 3e-3;
    std::size_t steps = 5000;
    std::size_t batch_size = 16;
    std::size_t seq_len = 64;
    std::uint64_t seed = 0;
    Schedule schedule = Schedule::cosine;
    TrainableSet trainable = TrainableSet::all;
    /// Cosine decays to this fraction of lr.
    double min_lr_fraction = 0.1;
    /// Linear ramp from lr / warmup_steps up to lr before the schedule starts.
    std::size_t warmup_steps = 0;
    /// Global gradient-norm clip; 0 disables.
    double grad_clip = 1.0;
    AdamConfig adam;
    std::size_t eval_every = 250;
    /// Validation windows used for the periodic PPL (0 = whole split).
    std::size_t eval_windows = 64;
    double divergence_loss = 1e4;

    void validate() const;
};

/// Addresses a contiguous slice of one tensor in list_params order.
struct ParamRef {
    std::size_t tensor = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
};

/// One gradient tensor per entry of list_params(model), same shapes.
struct Gradients {
    std::vector<Matrix> tensors;

    static Gradients zeros_like(const Model& model);
    double global_norm() const;
    std::span<const double> at(const ParamRef& ref) const;
};

struct LossAndGrads {
    double loss = 0.0;
    Gradients grads;
};

/// Mean next-token cross-entropy (nats) over `batch` windows of `seq_len`
/// tokens stored back to back; each window yields seq_len - 1 predictions.
double batch_loss(const Model& model, std::span<const Token> tokens, std::size_t batch, std::size_t seq_len);

LossAndGrads loss_and_grads(const Model& model, std::span<const Token> tokens, std::size_t batch,
                            std::size_t seq_len);

/// Per-tensor trainable flags in list_params order.
std::vector<bool> trainable_mask(const Model& model, TrainableSet set);

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    /// One update of every tensor whose mask bit is set. Tensors outside the
    /// mask are left untouched; the step counter always advances.
    void step(std::span<const std::span<double>> params, std::span<const Matrix> grads,
              const std::vector<bool>& mask, double lr);
    void step(Model& model, const Gradients& grads, const std::vector<bool>& mask, double lr);

    std::size_t steps_taken() const { return t_; }

private:
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

double scheduled_lr(const TrainConfig& cfg, std::size_t step);

struct EvalPoint {
    std::size_t step = 0;
    double valid_ppl = 0.0;
};

struct FinetuneResult {
    std::vector<double> train_loss;  // one per step
    std::vector<EvalPoint> evals;
};

/// Trains in place. Deterministic given (model, corpus, config). With a
/// validation corpus, PPL is logged at step 0, every eval_every steps, and
/// after the last step.
FinetuneResult finetune(Model& model, const Corpus& train, const Corpus* valid, const TrainConfig& cfg);

/// CSV columns: step, train_loss, valid_ppl (blank when not evaluated).
void write_loss_csv(const FinetuneResult& result, const std::filesystem::path& path);

}  // namespace flexi
