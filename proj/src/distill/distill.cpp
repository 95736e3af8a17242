#include "eib/distill/distill.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

namespace eib {

const char* to_string(DistillMode m) {
    switch (m) {
        case DistillMode::KD: return "kd";
        case DistillMode::PI_KD: return "pi-kd";
        case DistillMode::CROSS_KD: return "cross-kd";
    }
    return "?";
}

DistillMode parse_distill_mode(const std::string& s) {
    if (s == "kd") return DistillMode::KD;
    if (s == "pi-kd") return DistillMode::PI_KD;
    if (s == "cross-kd") return DistillMode::CROSS_KD;
    fail(ErrorKind::Config, "unknown distillation mode '" + s + "' (expected kd, pi-kd or cross-kd)");
}

void DistillPlan::validate() const {
    if (!(teacher_lr >= 0) || !(teacher_lr < student_lr))
        fail(ErrorKind::Spec, "teacher learning rate must be below the student's (got " + std::to_string(teacher_lr) +
                                  " vs " + std::to_string(student_lr) + ")");
    if (!(beta_mse >= 0) || !(beta_kl >= 0)) fail(ErrorKind::Spec, "loss weights must be non-negative");
    if (!(temperature > 0)) fail(ErrorKind::Spec, "temperature must be positive");
    if (batch_size == 0) fail(ErrorKind::Spec, "batch_size must be positive");
}

ObjectiveVars distill_objective(Tape& tape, const TransformerModel& teacher, const TransformerModel& student,
                                const Batch& batch, const DistillPlan& plan, Side trainable) {
    if (teacher.spec.num_classes != student.spec.num_classes)
        fail(ErrorKind::Alignment, "teacher and student disagree on the class count");
    ForwardOptions to, so;
    to.trainable = trainable == Side::Teacher;
    so.trainable = trainable == Side::Student;
    const ForwardVars t = forward_on_tape(teacher, tape, batch, to);
    const ForwardVars s = forward_on_tape(student, tape, batch, so);

    ObjectiveVars o;
    const Var t_task = ag::cross_entropy(t.logits, batch.labels);
    const Var s_task = ag::cross_entropy(s.logits, batch.labels);
    o.task = trainable == Side::Teacher ? t_task : s_task;
    o.other_task = trainable == Side::Teacher ? s_task : t_task;
    o.kl = ag::kl_logits(t.logits, s.logits, plan.temperature);

    const Var ht = aligned_hidden(teacher, tape, t.sequence_output, batch, to);
    const Var hs = aligned_hidden(student, tape, s.sequence_output, batch, so);
    if (ht.shape() == hs.shape()) {
        o.mse = ag::mse(ht, hs);
    } else if (plan.beta_mse != 0) {
        fail(ErrorKind::Alignment, "teacher hidden " + shape_string(ht.shape()) + " vs projected student hidden " +
                                       shape_string(hs.shape()));
    }
    std::vector<Var> terms{o.task, o.kl};
    std::vector<Real> weights{1, plan.beta_kl};
    if (o.mse.valid()) {
        terms.push_back(o.mse);
        weights.push_back(plan.beta_mse);
    }
    o.total = ag::weighted_sum(terms, weights);
    return o;
}

namespace {

LossParts parts_of(const ObjectiveVars& o) {
    LossParts p;
    p.total = o.total.value().item();
    p.task = o.task.value().item();
    p.mse = o.mse.valid() ? o.mse.value().item() : 0;
    p.kl = o.kl.value().item();
    p.other_task = o.other_task.value().item();
    return p;
}

LossParts step_side(const TransformerModel& teacher, const TransformerModel& student, const Batch& batch,
                    const DistillPlan& plan, Adam& opt, Side side) {
    Tape tape;
    const ObjectiveVars o = distill_objective(tape, teacher, student, batch, plan, side);
    const LossParts p = parts_of(o);
    if (!std::isfinite(p.total))
        fail(ErrorKind::Training, std::string(side == Side::Teacher ? "teacher" : "student") + " loss is not finite");
    tape.backward(o.total);
    opt.step(tape);
    return p;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

LossParts teacher_step(TransformerModel& teacher, const TransformerModel& student, const Batch& batch,
                       const DistillPlan& plan, Adam& opt) {
    if (plan.mode != DistillMode::CROSS_KD) fail(ErrorKind::Spec, "teacher updates only happen in cross-kd mode");
    return step_side(teacher, student, batch, plan, opt, Side::Teacher);
}

LossParts student_step(const TransformerModel& teacher, TransformerModel& student, const Batch& batch,
                       const DistillPlan& plan, Adam& opt) {
    return step_side(teacher, student, batch, plan, opt, Side::Student);
}

std::string TrainHistory::csv(bool with_seconds) const {
    std::string out = "epoch,teacher_loss,student_loss,student_task_loss,eval_acc";
    out += with_seconds ? ",seconds\n" : "\n";
    char buf[256];
    for (const EpochRecord& e : epochs) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.6f", e.epoch, e.teacher_loss, e.student_loss,
                      e.student_task_loss, e.eval_acc);
        out += buf;
        if (with_seconds) {
            std::snprintf(buf, sizeof buf, ",%.3f", e.seconds);
            out += buf;
        }
        out += "\n";
    }
    return out;
}

bool TrainHistory::same_trajectory(const TrainHistory& other) const {
    if (epochs.size() != other.epochs.size()) return false;
    for (std::size_t i = 0; i < epochs.size(); ++i) {
        const EpochRecord& a = epochs[i];
        const EpochRecord& b = other.epochs[i];
        if (a.epoch != b.epoch || a.teacher_loss != b.teacher_loss || a.student_loss != b.student_loss ||
            a.student_task_loss != b.student_task_loss || a.eval_acc != b.eval_acc)
            return false;
    }
    return true;
}

TrainHistory run_distillation(TransformerModel& teacher, TransformerModel& student, const Dataset& train,
                              const Dataset& dev, const DistillPlan& plan) {
    plan.validate();
    TrainHistory hist;
    if (plan.steps == 0) return hist;
    if (plan.mode != DistillMode::KD && student.head_dim() != teacher.head_dim())
        fail(ErrorKind::Integration, "student head was not integrated from the teacher");

    BatchSampler sampler(train.size(), plan.batch_size, plan.seed);
    Adam t_opt(teacher.parameters(), plan.teacher_lr, plan.adam);
    Adam s_opt(student.parameters(), plan.student_lr, plan.adam);
    const std::size_t per_epoch = sampler.batches_per_epoch();
    const std::size_t max_len = std::min(teacher.spec.max_seq_len, student.spec.max_seq_len);

    EpochRecord cur;
    std::size_t in_epoch = 0;
    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t step = 0; step < plan.steps; ++step) {
        const Batch batch = make_batch(train, sampler.next(), max_len);
        LossParts tp, sp;
        try {
            if (plan.mode == DistillMode::CROSS_KD && !plan.student_first) tp = teacher_step(teacher, student, batch, plan, t_opt);
            sp = student_step(teacher, student, batch, plan, s_opt);
            if (plan.mode == DistillMode::CROSS_KD && plan.student_first) tp = teacher_step(teacher, student, batch, plan, t_opt);
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::Training) throw TrainingDiverged(e.what(), hist);
            throw;
        }
        // Without a teacher update, the teacher objective is still reported.
        if (plan.mode != DistillMode::CROSS_KD)
            tp.total = sp.other_task + plan.beta_mse * sp.mse + plan.beta_kl * sp.kl;
        cur.teacher_loss += tp.total;
        cur.student_loss += sp.total;
        cur.student_task_loss += sp.task;
        ++in_epoch;
        if (in_epoch == per_epoch || step + 1 == plan.steps) {
            const auto n = static_cast<double>(in_epoch);
            cur.teacher_loss /= n;
            cur.student_loss /= n;
            cur.student_task_loss /= n;
            cur.eval_acc = evaluate(student, dev).accuracy;
            cur.seconds = seconds_since(t0);
            cur.epoch = hist.epochs.size() + 1;
            hist.epochs.push_back(cur);
            cur = {};
            in_epoch = 0;
            t0 = std::chrono::steady_clock::now();
        }
    }
    return hist;
}

TrainHistory finetune(TransformerModel& model, const Dataset& train, const Dataset& dev, const FinetuneOptions& opts) {
    TrainHistory hist;
    const std::size_t budget = opts.max_steps ? opts.max_steps : std::size_t(-1);
    if (opts.epochs == 0) return hist;
    BatchSampler sampler(train.size(), opts.batch_size, opts.seed);
    Adam opt(model.parameters(), opts.lr, opts.adam);
    const std::size_t per_epoch = sampler.batches_per_epoch();
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= opts.epochs && step < budget; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double loss = 0;
        std::size_t n = 0;
        for (; n < per_epoch && step < budget; ++n, ++step) {
            const Batch batch = make_batch(train, sampler.next(), model.spec.max_seq_len);
            Tape tape;
            const Var l = ag::cross_entropy(forward_on_tape(model, tape, batch).logits, batch.labels);
            const Real v = l.value().item();
            if (!std::isfinite(v)) throw TrainingDiverged("task loss is not finite", hist);
            tape.backward(l);
            try {
                opt.step(tape);
            } catch (const Error& e) {
                if (e.kind() == ErrorKind::Training) throw TrainingDiverged(e.what(), hist);
                throw;
            }
            loss += v;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        const double mean = loss / static_cast<double>(n);
        if (opts.role == Side::Teacher) {
            rec.teacher_loss = mean;
        } else {
            rec.student_loss = mean;
            rec.student_task_loss = mean;
        }
        rec.eval_acc = evaluate(model, dev).accuracy;
        rec.seconds = seconds_since(t0);
        hist.epochs.push_back(rec);
    }
    return hist;
}

std::vector<int> mask_tokens(Batch& batch, Real mask_prob, std::size_t vocab_size, std::mt19937_64& rng) {
    if (!(mask_prob >= 0 && mask_prob < 1)) fail(ErrorKind::Spec, "mask probability must lie in [0, 1)");
    if (vocab_size <= 4) fail(ErrorKind::Vocab, "vocabulary has no maskable tokens");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<int> targets(batch.ids.size(), -1);
    for (std::size_t i = 0; i < batch.ids.size(); ++i) {
        const int id = batch.ids[i];
        if (!batch.mask[i] || id == 2 /* CLS */) continue;
        if (!(u(rng) < mask_prob)) continue;
        targets[i] = id;
        const double r = u(rng);
        if (r < 0.8)
            batch.ids[i] = 3;  // MASK
        else if (r < 0.9)
            batch.ids[i] = static_cast<int>(4 + rng() % (vocab_size - 4));
    }
    return targets;
}

Var mlm_loss(Tape& tape, const TransformerModel& model, const Batch& batch, const std::vector<int>& targets) {
    std::vector<std::size_t> rows;
    std::vector<int> labels;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i] < 0) continue;
        rows.push_back(i);
        labels.push_back(targets[i]);
    }
    if (rows.empty()) return tape.constant(Tensor({1}, 0.0));
    ForwardOptions opts;
    const ForwardVars f = forward_on_tape(model, tape, batch, opts);
    Var h = ag::select_rows(f.sequence_output, std::move(rows));
    if (model.embed_projection) h = ag::matmul_bt(h, bind_param(tape, model.embed_projection->weight, opts));
    const Var logits = ag::matmul_bt(h, bind_param(tape, model.token_embedding, opts));
    return ag::cross_entropy(logits, std::move(labels));
}

std::vector<Real> pretrain_student_mlm(TransformerModel& student, const std::vector<std::vector<int>>& corpus,
                                       const MlmOptions& opts) {
    // mask_prob = 0 is accepted: nothing is selected and nothing changes.
    if (!(opts.mask_prob >= 0 && opts.mask_prob < 1)) fail(ErrorKind::Spec, "mask probability must lie in [0, 1)");
    std::vector<Real> losses;
    if (opts.steps == 0) return losses;
    Dataset data;
    for (const auto& s : corpus) data.push_back({0, s});
    BatchSampler sampler(data.size(), opts.batch_size, opts.seed);
    std::mt19937_64 rng(opts.seed ^ 0x6d6c6dULL);
    Adam opt(student.parameters(), opts.lr, opts.adam);
    for (std::size_t step = 0; step < opts.steps; ++step) {
        Batch b = make_batch(data, sampler.next(), student.spec.max_seq_len);
        const std::vector<int> targets = mask_tokens(b, opts.mask_prob, student.spec.vocab_size, rng);
        Tape tape;
        const Var l = mlm_loss(tape, student, b, targets);
        const Real v = l.value().item();
        if (!std::isfinite(v)) fail(ErrorKind::Training, "masked-token loss is not finite");
        losses.push_back(v);
        if (!tape.requires_grad(l.id)) continue;
        tape.backward(l);
        opt.step(tape);
    }
    return losses;
}

}  // namespace eib
