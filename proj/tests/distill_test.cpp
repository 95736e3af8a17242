#include <doctest.h>

#include <cmath>
#include <set>

#include "eib/distill/distill.hpp"
#include "eib/numerics/gradcheck.hpp"
#include "eib/numerics/precision.hpp"
#include "eib/pipeline/synthetic.hpp"
#include "support.hpp"

using namespace eib;

namespace {

SyntheticTask tiny_task(std::uint64_t seed = 1) {
    SyntheticTask t;
    t.vocab_size = 40;
    t.num_classes = 3;
    t.min_len = 3;
    t.max_len = 7;
    t.max_rival_count = 1;
    t.seed = seed;
    return t;
}

struct Pair {
    TransformerModel teacher, student;
};

// Scrambled teacher (hidden 32) and student (hidden 16) with an integrated head.
Pair make_pair(std::size_t teacher_layers = 2, bool integrate = true) {
    Pair p{build_model(testing::tiny_spec(32, teacher_layers)), build_model(testing::tiny_spec(16, 2, true, 11))};
    testing::scramble(p.teacher, 0.2, 21);
    testing::scramble(p.student, 0.2, 22);
    if (integrate) integrate_head(p.teacher, p.student);
    return p;
}

std::vector<std::vector<Real>> snapshot(const TransformerModel& m) {
    std::vector<std::vector<Real>> out;
    for (const Parameter* p : m.parameters()) out.emplace_back(p->value.data().begin(), p->value.data().end());
    return out;
}

// Masked mean of a [batch x seq x hidden] trace, then an optional linear map.
Tensor pooled_hidden(const TransformerModel& m, const Batch& b) {
    const Tensor h = forward(m, b, {.hidden = true}).hidden;
    const std::size_t H = m.spec.hidden_dim;
    Tensor pooled({b.batch, H});
    for (std::size_t r = 0; r < b.batch; ++r) {
        double n = 0;
        for (std::size_t s = 0; s < b.seq; ++s) {
            if (!b.mask[r * b.seq + s]) continue;
            ++n;
            for (std::size_t c = 0; c < H; ++c) pooled.at(r, c) += h[(r * b.seq + s) * H + c];
        }
        for (std::size_t c = 0; c < H; ++c) pooled.at(r, c) /= n;
    }
    if (!m.projector) return pooled;
    const Tensor& W = m.projector->weight.value;
    Tensor out({b.batch, W.cols()});
    for (std::size_t r = 0; r < b.batch; ++r)
        for (std::size_t j = 0; j < W.cols(); ++j) {
            double acc = m.projector->bias ? m.projector->bias->value[j] : 0.0;
            for (std::size_t c = 0; c < H; ++c) acc += pooled.at(r, c) * W.at(c, j);
            out.at(r, j) = acc;
        }
    return out;
}

DistillPlan plan_for(DistillMode mode, std::size_t steps = 0) {
    DistillPlan p;
    p.mode = mode;
    p.teacher_lr = 1e-4;
    p.student_lr = 1e-3;
    p.steps = steps;
    p.batch_size = 8;
    p.seed = 3;
    return p;
}

}  // namespace

TEST_CASE("Adam matches a hand-computed update") {
    PrecisionScope f64(Precision::F64);
    Parameter w{"w", Tensor({2}, 1.0)};
    Adam opt({&w}, 0.1);
    opt.step({Tensor({2}, 2.0)});
    // m = 0.2, v = 0.004, bias-corrected: 2 and 4 -> step 0.1 * 2 / (2 + 1e-8)
    CHECK(w.value[0] == doctest::Approx(1 - 0.1 * 2 / (2 + 1e-8)).epsilon(1e-14));
    opt.step({Tensor({2}, -1.0)});
    const double m = 0.9 * 0.2 + 0.1 * -1.0, v = 0.999 * 0.004 + 0.001 * 1.0;
    const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
    CHECK(w.value[1] == doctest::Approx(1 - 0.1 * 2 / (2 + 1e-8) - 0.1 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-14));

    Parameter z{"z", Tensor({3}, 0.5)};
    Adam frozen({&z}, 0.0);
    frozen.step({Tensor({3}, 7.0)});
    CHECK(z.value == Tensor({3}, 0.5));
    CHECK_THROWS_AS(frozen.step({Tensor({3}, std::nan(""))}), Error);
}

TEST_CASE("plan validation enforces the learning-rate asymmetry") {
    DistillPlan p;
    CHECK_NOTHROW(p.validate());
    p.teacher_lr = p.student_lr;
    CHECK_THROWS_AS(p.validate(), Error);
    p = {};
    p.beta_kl = -1;
    CHECK_THROWS_AS(p.validate(), Error);
    p = {};
    p.temperature = 0;
    CHECK_THROWS_AS(p.validate(), Error);
    CHECK(parse_distill_mode("pi-kd") == DistillMode::PI_KD);
    CHECK_THROWS_AS(parse_distill_mode("fancy"), Error);
}

TEST_CASE("batch sampler draws every row once per epoch") {
    BatchSampler s(10, 3, 4);
    CHECK(s.batches_per_epoch() == 3);
    std::multiset<std::size_t> seen;
    for (int i = 0; i < 3; ++i)
        for (std::size_t r : s.next()) seen.insert(r);
    CHECK(seen.size() == 9);
    CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 9);
    BatchSampler a(10, 3, 4), b(10, 3, 4);
    for (int i = 0; i < 7; ++i) {
        auto x = a.next();
        auto y = b.next();
        CHECK(std::equal(x.begin(), x.end(), y.begin()));
    }
    CHECK_THROWS_AS(BatchSampler(2, 3, 0), Error);
}

TEST_CASE("objective equals the hand-composed sum of recomputed parts") {
    PrecisionScope f64(Precision::F64);
    Pair p = make_pair();
    const Batch b = testing::random_batch(4, 7, 40, 3, 5);
    DistillPlan plan = plan_for(DistillMode::PI_KD);
    plan.beta_mse = 1.5;
    plan.beta_kl = 2.5;
    plan.temperature = 2.0;
    for (Side side : {Side::Teacher, Side::Student}) {
        Tape tape;
        const ObjectiveVars o = distill_objective(tape, p.teacher, p.student, b, plan, side);
        const Tensor zt = forward(p.teacher, b).logits;
        const Tensor zs = forward(p.student, b).logits;
        const Real task = cross_entropy(side == Side::Teacher ? zt : zs, b.labels);
        Tensor zt2 = zt, zs2 = zs;
        for (Real& v : zt2.data()) v /= 2;
        for (Real& v : zs2.data()) v /= 2;
        const Real kl = kl_divergence(softmax_rows(zt2), softmax_rows(zs2));
        const Real ms = mse(pooled_hidden(p.teacher, b), pooled_hidden(p.student, b));
        CHECK(o.task.value().item() == doctest::Approx(task).epsilon(1e-12));
        CHECK(o.kl.value().item() == doctest::Approx(kl).epsilon(1e-10));
        CHECK(o.mse.value().item() == doctest::Approx(ms).epsilon(1e-10));
        CHECK(std::abs(o.total.value().item() - (task + 1.5 * ms + 2.5 * kl)) < 1e-6);
    }
}

TEST_CASE("identical teacher and student give zero distillation terms") {
    PrecisionScope f64(Precision::F64);
    TransformerModel t = build_model(testing::tiny_spec());
    testing::scramble(t, 0.2, 1);
    TransformerModel s = t;
    integrate_head(t, s);
    CHECK_FALSE(s.projector.has_value());
    const Batch b = testing::random_batch(3, 6, 40, 3, 2);
    Tape tape;
    const ObjectiveVars o = distill_objective(tape, t, s, b, plan_for(DistillMode::PI_KD), Side::Student);
    CHECK(o.kl.value().item() == 0);
    CHECK(o.mse.value().item() == 0);
    CHECK(o.total.value().item() == o.task.value().item());
}

TEST_CASE("objective gradients match finite differences on both sides") {
    PrecisionScope f64(Precision::F64);
    Pair p = make_pair(1);
    const Batch b = testing::random_batch(3, 5, 40, 3, 9);
    const DistillPlan plan = plan_for(DistillMode::CROSS_KD);
    for (Side side : {Side::Teacher, Side::Student}) {
        TransformerModel& m = side == Side::Teacher ? p.teacher : p.student;
        auto loss = [&](Tape& t) { return distill_objective(t, p.teacher, p.student, b, plan, side).total; };
        auto ps = m.parameters();
        const auto r = finite_diff_check(loss, ps, {4e-3, 4, 1, true});
        INFO(r.worst_param, "[", r.worst_index, "] ", r.worst_analytic, " vs ", r.worst_numeric);
        CHECK(r.max_rel_error < 1e-5);
    }
}

TEST_CASE("teacher_step leaves the student untouched") {
    PrecisionScope f64(Precision::F64);
    Pair p = make_pair();
    const Batch b = testing::random_batch(4, 7, 40, 3, 5);
    const auto s0 = snapshot(p.student);
    const auto t0 = snapshot(p.teacher);
    const DistillPlan plan = plan_for(DistillMode::CROSS_KD);
    Adam opt(p.teacher.parameters(), plan.teacher_lr);
    const LossParts parts = teacher_step(p.teacher, p.student, b, plan, opt);
    CHECK(snapshot(p.student) == s0);
    CHECK(snapshot(p.teacher) != t0);
    CHECK(std::abs(parts.total - (parts.task + parts.mse + parts.kl)) < 1e-9);

    Adam opt2(p.teacher.parameters(), plan.teacher_lr);
    CHECK_THROWS_AS(teacher_step(p.teacher, p.student, b, plan_for(DistillMode::PI_KD), opt2), Error);
}

TEST_CASE("with zero loss weights a step is a plain fine-tuning step") {
    PrecisionScope f64(Precision::F64);
    Pair p = make_pair();
    const Batch b = testing::random_batch(4, 7, 40, 3, 5);
    DistillPlan plan = plan_for(DistillMode::CROSS_KD);
    plan.beta_mse = plan.beta_kl = 0;
    for (Side side : {Side::Teacher, Side::Student}) {
        TransformerModel& m = side == Side::Teacher ? p.teacher : p.student;
        const Real lr = side == Side::Teacher ? plan.teacher_lr : plan.student_lr;
        TransformerModel ref = m;
        {
            Tape tape;
            const Var l = ag::cross_entropy(forward_on_tape(ref, tape, b).logits, b.labels);
            tape.backward(l);
            Adam(ref.parameters(), lr).step(tape);
        }
        Adam opt(m.parameters(), lr);
        if (side == Side::Teacher)
            teacher_step(p.teacher, p.student, b, plan, opt);
        else
            student_step(p.teacher, p.student, b, plan, opt);
        CHECK(snapshot(m) == snapshot(ref));
    }
}

TEST_CASE("student_step lowers the student loss and leaves the teacher untouched") {
    PrecisionScope f64(Precision::F64);
    Pair p = make_pair();
    const Batch b = testing::random_batch(6, 7, 40, 3, 8);
    DistillPlan plan = plan_for(DistillMode::PI_KD);
    plan.student_lr = 1e-4;
    const auto t0 = snapshot(p.teacher);
    auto total = [&] {
        Tape tape;
        return distill_objective(tape, p.teacher, p.student, b, plan, Side::Student).total.value().item();
    };
    const Real before = total();
    Adam opt(p.student.parameters(), plan.student_lr);
    const LossParts parts = student_step(p.teacher, p.student, b, plan, opt);
    CHECK(parts.total == doctest::Approx(before).epsilon(1e-15));
    CHECK(total() < before);
    CHECK(snapshot(p.teacher) == t0);
}

TEST_CASE("hidden width mismatch without a projector is an alignment error") {
    Pair p = make_pair(2, false);
    const Batch b = testing::random_batch(2, 5, 40, 3, 1);
    DistillPlan plan = plan_for(DistillMode::KD);
    Tape tape;
    try {
        distill_objective(tape, p.teacher, p.student, b, plan, Side::Student);
        FAIL("expected an alignment error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Alignment);
    }
    plan.beta_mse = 0;
    Tape tape2;
    CHECK_NOTHROW(distill_objective(tape2, p.teacher, p.student, b, plan, Side::Student));
}

TEST_CASE("run_distillation: no-op, frozen teacher and the PI-KD reduction") {
    PrecisionScope f64(Precision::F64);
    const auto data = generate(tiny_task(), 64, 16, 4);

    Pair p = make_pair();
    const auto s0 = snapshot(p.student);
    CHECK(run_distillation(p.teacher, p.student, data.train, data.dev, plan_for(DistillMode::CROSS_KD)).size() == 0);
    CHECK(snapshot(p.student) == s0);

    Pair cross = make_pair(), pikd = make_pair();
    const auto t0 = snapshot(cross.teacher);
    DistillPlan cp = plan_for(DistillMode::CROSS_KD, 20);
    cp.teacher_lr = 0;
    const TrainHistory hc = run_distillation(cross.teacher, cross.student, data.train, data.dev, cp);
    const TrainHistory hp =
        run_distillation(pikd.teacher, pikd.student, data.train, data.dev, plan_for(DistillMode::PI_KD, 20));
    CHECK(snapshot(cross.teacher) == t0);
    CHECK(snapshot(cross.student) == snapshot(pikd.student));
    CHECK(hc.size() == 3);  // 8 batches per epoch: 8 + 8 + 4
    CHECK(hc.same_trajectory(hp));
}

TEST_CASE("CROSS_KD moves the teacher; the run is deterministic") {
    PrecisionScope f64(Precision::F64);
    const auto data = generate(tiny_task(), 64, 16, 4);
    Pair a = make_pair(), b = make_pair();
    const auto t0 = snapshot(a.teacher);
    const TrainHistory ha = run_distillation(a.teacher, a.student, data.train, data.dev, plan_for(DistillMode::CROSS_KD, 12));
    const TrainHistory hb = run_distillation(b.teacher, b.student, data.train, data.dev, plan_for(DistillMode::CROSS_KD, 12));
    CHECK(snapshot(a.teacher) != t0);
    CHECK(ha.same_trajectory(hb));
    CHECK(snapshot(a.student) == snapshot(b.student));
    for (const EpochRecord& e : ha.epochs) {
        CHECK(std::isfinite(e.teacher_loss));
        CHECK(std::isfinite(e.student_loss));
        CHECK(e.student_loss >= e.student_task_loss);
    }
}

TEST_CASE("KD with zero loss weights follows the fine-tuning trajectory") {
    PrecisionScope f64(Precision::F64);
    const auto data = generate(tiny_task(), 64, 16, 4);
    Pair kd = make_pair(2, false);
    TransformerModel ft = kd.student;
    DistillPlan plan = plan_for(DistillMode::KD, 20);
    plan.beta_mse = plan.beta_kl = 0;
    const TrainHistory hk = run_distillation(kd.teacher, kd.student, data.train, data.dev, plan);
    FinetuneOptions fo;
    fo.epochs = 3;
    fo.max_steps = 20;
    fo.lr = plan.student_lr;
    fo.batch_size = plan.batch_size;
    fo.seed = plan.seed;
    fo.role = Side::Student;
    const TrainHistory hf = finetune(ft, data.train, data.dev, fo);
    CHECK(snapshot(ft) == snapshot(kd.student));
    REQUIRE(hf.size() == hk.size());
    for (std::size_t i = 0; i < hf.size(); ++i) {
        CHECK(hf.epochs[i].student_task_loss == hk.epochs[i].student_task_loss);
        CHECK(hf.epochs[i].eval_acc == hk.epochs[i].eval_acc);
    }
}

TEST_CASE("divergence raises a training error with the history so far") {
    const auto data = generate(tiny_task(), 64, 16, 4);
    Pair p = make_pair();
    p.student.classifier.weight.value[0] = std::nan("");
    try {
        run_distillation(p.teacher, p.student, data.train, data.dev, plan_for(DistillMode::PI_KD, 5));
        FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
        CHECK(e.kind() == ErrorKind::Training);
        CHECK(e.history().size() == 0);
    }
}

TEST_CASE("finetune: zero learning rate and a decreasing loss") {
    const auto data = generate(tiny_task(), 96, 32, 4);
    TransformerModel m = build_model(testing::tiny_spec());
    const auto w0 = snapshot(m);
    FinetuneOptions fo;
    fo.lr = 0;
    fo.batch_size = 8;
    finetune(m, data.train, data.dev, fo);
    CHECK(snapshot(m) == w0);

    const double before = evaluate(m, data.train).loss;
    fo.lr = 3e-3;
    const TrainHistory h = finetune_teacher(m, data.train, data.dev, fo);
    CHECK(h.size() == 1);
    CHECK(h.epochs[0].teacher_loss > 0);
    CHECK(evaluate(m, data.train).loss < before);
}

TEST_CASE("history CSV layout") {
    TrainHistory h;
    h.epochs.push_back({1, 0.5, 0.75, 0.25, 0.875, 1.5});
    CHECK(h.csv() == "epoch,teacher_loss,student_loss,student_task_loss,eval_acc,seconds\n"
                     "1,0.5,0.75,0.25,0.875000,1.500\n");
    CHECK(h.csv(false) == "epoch,teacher_loss,student_loss,student_task_loss,eval_acc\n"
                          "1,0.5,0.75,0.25,0.875000\n");
}

TEST_CASE("mask_tokens never touches CLS or padding and follows 80/10/10") {
    std::mt19937_64 rng(3);
    std::size_t selected = 0, masked = 0, kept = 0, eligible = 0;
    for (int rep = 0; rep < 200; ++rep) {
        Batch b = testing::random_batch(8, 8, 40, 3, static_cast<std::uint64_t>(rep));
        const Batch orig = b;
        const auto targets = mask_tokens(b, 0.3, 40, rng);
        for (std::size_t i = 0; i < b.ids.size(); ++i) {
            const bool special = !orig.mask[i] || orig.ids[i] == 2;
            eligible += !special;
            if (special) {
                CHECK(targets[i] == -1);
                CHECK(b.ids[i] == orig.ids[i]);
                continue;
            }
            if (targets[i] < 0) {
                CHECK(b.ids[i] == orig.ids[i]);
                continue;
            }
            ++selected;
            CHECK(targets[i] == orig.ids[i]);
            masked += b.ids[i] == 3;
            kept += b.ids[i] == orig.ids[i];
        }
    }
    const double frac = static_cast<double>(selected) / static_cast<double>(eligible);
    CHECK(std::abs(frac - 0.3) < 0.02);
    CHECK(std::abs(static_cast<double>(masked) / static_cast<double>(selected) - 0.8) < 0.03);
    // "random" may redraw the original token, so kept is slightly above 10%.
    CHECK(std::abs(static_cast<double>(kept) / static_cast<double>(selected) - 0.1) < 0.03);
}

TEST_CASE("masked-token pretraining") {
    const auto data = generate(tiny_task(), 64, 8, 4);
    std::vector<std::vector<int>> corpus;
    for (const Example& e : data.train) corpus.push_back(e.ids);
    TransformerModel m = build_model(testing::tiny_spec(32, 2, true));
    const auto w0 = snapshot(m);

    MlmOptions o;
    o.batch_size = 8;
    o.seed = 5;
    CHECK(pretrain_student_mlm(m, corpus, o).empty());
    CHECK(snapshot(m) == w0);

    o.steps = 5;
    o.mask_prob = 0;
    const auto zero = pretrain_student_mlm(m, corpus, o);
    for (Real l : zero) CHECK(l == 0);
    CHECK(snapshot(m) == w0);

    // Fixed masked batch, before and after training.
    std::mt19937_64 rng(1);
    Dataset all;
    for (const auto& s : corpus) all.push_back({0, s});
    std::vector<std::size_t> rows(32);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    Batch probe = make_batch(all, rows, 8);
    const auto targets = mask_tokens(probe, 0.3, 40, rng);
    auto probe_loss = [&] {
        Tape t;
        return mlm_loss(t, m, probe, targets).value().item();
    };
    const Real before = probe_loss();
    o.steps = 60;
    o.mask_prob = 0.15;
    o.lr = 3e-3;
    pretrain_student_mlm(m, corpus, o);
    CHECK(probe_loss() < before);

    CHECK_THROWS_AS(pretrain_student_mlm(m, {{2, 5}}, o), Error);
}
