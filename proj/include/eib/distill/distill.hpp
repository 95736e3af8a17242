#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eib/distill/data.hpp"
#include "eib/distill/optimizer.hpp"
#include "eib/error.hpp"

namespace eib {

// KD: student keeps its own head. PI_KD: student starts from the teacher's
// head (parameter integration), teacher frozen. CROSS_KD: PI_KD plus a slow
// teacher update against the student on every batch.
enum class DistillMode { KD, PI_KD, CROSS_KD };

const char* to_string(DistillMode m);
// "kd", "pi-kd", "cross-kd"; throws Config otherwise.
DistillMode parse_distill_mode(const std::string& s);

struct DistillPlan {
    DistillMode mode = DistillMode::CROSS_KD;
    Real teacher_lr = 5e-7;  // lambda1
    Real student_lr = 1e-4;  // lambda2
    Real beta_mse = 1;
    Real beta_kl = 1;
    Real temperature = 1;
    std::size_t steps = 0;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    AdamConfig adam;
    bool student_first = false;  // swap the per-batch update order

    // Throws Spec unless teacher_lr < student_lr, betas >= 0, T > 0.
    void validate() const;
};

enum class Side { Teacher, Student };

// Loss = task(side) + beta_mse * mse(aligned hiddens) + beta_kl * KL(teacher || student).
struct ObjectiveVars {
    Var total;
    Var task;  // task loss of the trainable side
    Var mse;   // invalid when the hidden widths differ and beta_mse == 0
    Var kl;
    Var other_task;
};

// Records both forward passes on one tape; only the given side is trainable.
ObjectiveVars distill_objective(Tape& tape, const TransformerModel& teacher, const TransformerModel& student,
                                const Batch& batch, const DistillPlan& plan, Side trainable);

struct LossParts {
    Real total = 0;
    Real task = 0;
    Real mse = 0;
    Real kl = 0;
    Real other_task = 0;
};

// One Adam step on the teacher (CROSS_KD only); the student is read-only.
LossParts teacher_step(TransformerModel& teacher, const TransformerModel& student, const Batch& batch,
                       const DistillPlan& plan, Adam& opt);
// One Adam step on the student (projector and head included).
LossParts student_step(const TransformerModel& teacher, TransformerModel& student, const Batch& batch,
                       const DistillPlan& plan, Adam& opt);

struct EpochRecord {
    std::size_t epoch = 0;
    double teacher_loss = 0;
    double student_loss = 0;
    double student_task_loss = 0;
    double eval_acc = 0;
    double seconds = 0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;

    std::size_t size() const noexcept { return epochs.size(); }
    // "epoch,teacher_loss,student_loss,student_task_loss,eval_acc,seconds"; without
    // the wall-clock column the output is reproducible.
    std::string csv(bool with_seconds = true) const;
    // Equality of everything except wall-clock time.
    bool same_trajectory(const TrainHistory& other) const;
};

// Divergence: the models hold the parameters from before the failing step.
class TrainingDiverged : public Error {
  public:
    TrainingDiverged(const std::string& what, TrainHistory history)
        : Error(ErrorKind::Training, what), history_(std::move(history)) {}
    const TrainHistory& history() const noexcept { return history_; }

  private:
    TrainHistory history_;
};

// plan.steps batches; an epoch is one pass over train (the last one may be
// partial). Eval accuracy on dev after every epoch.
TrainHistory run_distillation(TransformerModel& teacher, TransformerModel& student, const Dataset& train,
                              const Dataset& dev, const DistillPlan& plan);

struct FinetuneOptions {
    std::size_t epochs = 1;
    std::size_t max_steps = 0;  // 0: no cap
    Real lr = 1e-3;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    AdamConfig adam;
    Side role = Side::Teacher;  // history columns the loss is reported in
};

// Plain task fine-tuning with Adam on cross-entropy; batches drawn exactly as
// run_distillation draws them for the same seed and batch size.
TrainHistory finetune(TransformerModel& model, const Dataset& train, const Dataset& dev, const FinetuneOptions& opts);

inline TrainHistory finetune_teacher(TransformerModel& teacher, const Dataset& train, const Dataset& dev,
                                     const FinetuneOptions& opts) {
    FinetuneOptions o = opts;
    o.role = Side::Teacher;
    return finetune(teacher, train, dev, o);
}

struct MlmOptions {
    std::size_t steps = 0;
    Real mask_prob = 0.15;
    std::size_t batch_size = 16;
    Real lr = 1e-4;
    std::uint64_t seed = 0;
    AdamConfig adam;
};

// Masks positions (never CLS or padding) with probability mask_prob: 80% ->
// MASK, 10% -> random non-reserved token, 10% unchanged. Returns the original
// id at selected positions and -1 elsewhere.
std::vector<int> mask_tokens(Batch& batch, Real mask_prob, std::size_t vocab_size, std::mt19937_64& rng);

// Masked-token loss with decoding tied to the token embeddings. Zero (and
// constant) when no position is selected.
Var mlm_loss(Tape& tape, const TransformerModel& model, const Batch& batch, const std::vector<int>& targets);

// Returns the per-step masked-token loss.
std::vector<Real> pretrain_student_mlm(TransformerModel& student, const std::vector<std::vector<int>>& corpus,
                                       const MlmOptions& opts);

}  // namespace eib
