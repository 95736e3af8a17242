#include "eib/pipeline/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fcntl.h>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unistd.h>

#include "eib/model/checkpoint.hpp"
#include "eib/pipeline/report.hpp"

namespace eib {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Stage s) {
    switch (s) {
        case Stage::GenData: return "gen-data";
        case Stage::Pretrain: return "pretrain";
        case Stage::FinetuneTeacher: return "finetune-teacher";
        case Stage::Distill: return "distill";
        case Stage::Prune: return "prune";
        case Stage::Quantize: return "quantize";
        case Stage::Eval: return "eval";
    }
    return "?";
}

Stage parse_stage(const std::string& s) {
    for (Stage st : {Stage::GenData, Stage::Pretrain, Stage::FinetuneTeacher, Stage::Distill, Stage::Prune,
                     Stage::Quantize, Stage::Eval})
        if (s == to_string(st)) return st;
    fail(ErrorKind::Config, "unknown stage '" + s + "'");
}

const char* variant_label(DistillMode m) {
    switch (m) {
        case DistillMode::KD: return "KD";
        case DistillMode::PI_KD: return "PI-KD";
        case DistillMode::CROSS_KD: return "CrossKD";
    }
    return "?";
}

std::string Artifacts::tag(DistillMode m) {
    std::string t = to_string(m);
    std::replace(t.begin(), t.end(), '-', '_');
    return t;
}

OutputLock::OutputLock(const fs::path& dir) : path_(dir / ".eib.lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        fail(ErrorKind::Dependency, "output directory " + dir.string() + " is locked by another run (remove " +
                                        path_.string() + " if that run is gone)");
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd, pid.data(), pid.size()) < 0) {
        // the lock is the file's existence; its content is informational
    }
    ::close(fd);
}

OutputLock::~OutputLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void require(const fs::path& p, Stage producer) {
    if (!fs::exists(p)) {
        fail(ErrorKind::Dependency,
             "missing " + p.string() + " (run the " + std::string(to_string(producer)) + " stage first)");
    }
}

std::string read_text(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) fail(ErrorKind::Format, "cannot read " + p.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct Splits {
    Dataset train, dev, test;
};

class Context {
  public:
    explicit Context(const PipelineConfig& c) : cfg(c), art(c.output_dir), precision_(c.precision) {}

    const PipelineConfig& cfg;
    Artifacts art;

    Splits splits() const {
        Splits s;
        const Vocabulary vocab = cfg.data.task.vocabulary();
        const std::size_t classes = cfg.data.task.num_classes;
        for (auto [name, out] : {std::pair{"train", &s.train}, {"dev", &s.dev}, {"test", &s.test}}) {
            const fs::path p = art.split(name);
            require(p, Stage::GenData);
            *out = parse_dataset_tsv(read_text(p), vocab, classes);
        }
        return s;
    }

    std::size_t vocab() const { return cfg.data.task.vocab_size; }

  private:
    PrecisionScope precision_;
};

void save_model(const TransformerModel& m, const fs::path& p, const std::vector<int>& vocab_map = {}) {
    Checkpoint c = model_to_checkpoint(m);
    if (!vocab_map.empty()) c.metadata[kVocabMapKey] = vocab_map;
    save_checkpoint(c, p);
}

LoadedModel load_float(const fs::path& p, Stage producer) {
    require(p, producer);
    LoadedModel m = load_any(p);
    if (m.quantized) fail(ErrorKind::Format, p.string() + " holds a quantized model where a float one was expected");
    return m;
}

PruneRemap remap_from_map(const std::vector<int>& new_to_old, std::size_t vocab) {
    PruneRemap r;
    r.new_to_old = new_to_old;
    r.old_to_new.assign(vocab, -1);
    for (std::size_t n = 0; n < new_to_old.size(); ++n) r.old_to_new.at(static_cast<std::size_t>(new_to_old[n])) = static_cast<int>(n);
    r.k = new_to_old.size();
    return r;
}

void write_metrics(const Context& ctx, const std::string& name, const json& j) {
    write_text_atomic(ctx.art.metrics(name), j.dump(2) + "\n");
}

json epoch_json(const EpochRecord& e) {
    return json{{"epoch", e.epoch},
                {"teacher_loss", e.teacher_loss},
                {"student_loss", e.student_loss},
                {"student_task_loss", e.student_task_loss},
                {"eval_acc", e.eval_acc}};
}

StageResult gen_data(const Context& ctx) {
    const auto& d = ctx.cfg.data;
    const SyntheticSplits s = generate(d.task, d.n_train, d.n_dev, d.n_test);
    const Vocabulary vocab = d.task.vocabulary();
    StageResult r;
    json counts = json::object();
    for (auto [name, data] : {std::pair{"train", &s.train}, {"dev", &s.dev}, {"test", &s.test}}) {
        write_text_atomic(ctx.art.split(name), dataset_tsv(*data, vocab));
        r.artifacts.push_back(ctx.art.split(name));
        std::vector<std::size_t> per(d.task.num_classes, 0);
        for (const Example& e : *data) ++per[static_cast<std::size_t>(e.label)];
        counts[name] = per;
    }
    std::string vtxt;
    for (const std::string& t : vocab.tokens()) vtxt += t + "\n";
    write_text_atomic(ctx.art.vocab(), vtxt);
    r.artifacts.push_back(ctx.art.vocab());
    r.metrics = json{{"label_counts", counts}, {"vocab_size", vocab.size()}};
    return r;
}

StageResult pretrain(const Context& ctx) {
    const Splits s = ctx.splits();
    TransformerModel student = build_model(ctx.cfg.student);
    std::vector<std::vector<int>> corpus;
    for (const Example& e : s.train) corpus.push_back(e.ids);
    MlmOptions o;
    o.steps = ctx.cfg.pretrain.steps;
    o.mask_prob = ctx.cfg.pretrain.mask_prob;
    o.lr = ctx.cfg.pretrain.lr;
    o.batch_size = ctx.cfg.pretrain.batch_size;
    o.seed = derive_seed(ctx.cfg.seed, SeedStream::Pretrain);
    const std::vector<Real> losses = pretrain_student_mlm(student, corpus, o);
    save_model(student, ctx.art.student_init());
    StageResult r;
    r.artifacts.push_back(ctx.art.student_init());
    r.metrics = json{{"steps", losses.size()}, {"final_mlm_loss", losses.empty() ? 0.0 : losses.back()}};
    return r;
}

StageResult finetune_teacher_stage(const Context& ctx) {
    const Splits s = ctx.splits();
    TransformerModel teacher = build_model(ctx.cfg.teacher);
    FinetuneOptions o;
    o.epochs = ctx.cfg.teacher_finetune.epochs;
    o.max_steps = ctx.cfg.teacher_finetune.max_steps;
    o.lr = ctx.cfg.teacher_finetune.lr;
    o.batch_size = ctx.cfg.teacher_finetune.batch_size;
    o.seed = derive_seed(ctx.cfg.seed, SeedStream::Finetune);
    const TrainHistory h = finetune_teacher(teacher, s.train, s.dev, o);
    save_model(teacher, ctx.art.teacher());
    write_text_atomic(ctx.art.file("teacher_history.csv"), h.csv(false));
    StageResult r;
    r.artifacts = {ctx.art.teacher(), ctx.art.file("teacher_history.csv")};
    json epochs = json::array();
    for (const auto& e : h.epochs) epochs.push_back(epoch_json(e));
    r.metrics = json{{"epochs", epochs}, {"dev_accuracy", h.epochs.empty() ? 0.0 : h.epochs.back().eval_acc}};
    return r;
}

StageResult distill_stage(const Context& ctx, DistillMode mode) {
    const bool paper = ctx.cfg.stage_order == StageOrder::Paper;
    Splits s = ctx.splits();
    TransformerModel teacher = load_float(ctx.art.teacher(), Stage::FinetuneTeacher).model;
    LoadedModel st = load_float(paper ? ctx.art.student_init_pruned() : ctx.art.student_init(),
                                paper ? Stage::Prune : Stage::Pretrain);
    TransformerModel student = std::move(st.model);
    if (!st.vocab_map.empty()) {
        // both sides must read the same ids
        teacher = apply_prune(teacher, remap_from_map(st.vocab_map, ctx.vocab()));
        s.train = remap_dataset(s.train, st.vocab_map, ctx.vocab());
        s.dev = remap_dataset(s.dev, st.vocab_map, ctx.vocab());
    }
    if (mode == DistillMode::KD) {
        attach_alignment_projector(student, teacher.spec.hidden_dim);
    } else {
        integrate_head(teacher, student);
    }
    DistillPlan plan = ctx.cfg.distill;
    plan.mode = mode;
    const TrainHistory h = run_distillation(teacher, student, s.train, s.dev, plan);

    StageResult r;
    const fs::path out = paper ? ctx.art.pruned(mode) : ctx.art.distilled(mode);
    save_model(student, out, st.vocab_map);
    r.artifacts.push_back(out);
    if (mode == DistillMode::CROSS_KD) {
        save_model(teacher, ctx.art.teacher_after(mode), st.vocab_map);
        r.artifacts.push_back(ctx.art.teacher_after(mode));
    }
    const fs::path hist = ctx.art.file("distill_" + Artifacts::tag(mode) + ".csv");
    write_text_atomic(hist, h.csv(false));
    r.artifacts.push_back(hist);
    json epochs = json::array();
    for (const auto& e : h.epochs) epochs.push_back(epoch_json(e));
    r.metrics = json{{"mode", to_string(mode)},
                     {"epochs", epochs},
                     {"dev_accuracy", h.epochs.empty() ? 0.0 : h.epochs.back().eval_acc},
                     {"student_task_loss", h.epochs.empty() ? 0.0 : h.epochs.back().student_task_loss}};
    return r;
}

StageResult prune_stage(const Context& ctx, DistillMode mode) {
    const bool paper = ctx.cfg.stage_order == StageOrder::Paper;
    const Splits s = ctx.splits();
    const fs::path src = paper ? ctx.art.student_init() : ctx.art.distilled(mode);
    LoadedModel lm = load_float(src, paper ? Stage::Pretrain : Stage::Distill);
    if (!lm.vocab_map.empty()) fail(ErrorKind::Dependency, src.string() + " is already pruned");

    std::vector<std::vector<int>> corpus;
    const std::size_t n = ctx.cfg.prune.score_sentences ? std::min(ctx.cfg.prune.score_sentences, s.train.size())
                                                        : s.train.size();
    for (std::size_t i = 0; i < n; ++i) corpus.push_back(s.train[i].ids);
    const Vocabulary vocab = ctx.cfg.data.task.vocabulary();
    ScoreOptions so;
    so.convention = ctx.cfg.prune.convention;
    const ImportanceTable table = score_importance(lm.model, corpus, vocab, so);
    const PruneRemap remap = select_topk(table, ctx.cfg.prune.k(ctx.vocab()));
    TransformerModel pruned = apply_prune(lm.model, remap);

    StageResult r;
    const std::string tag = paper ? "init" : Artifacts::tag(mode);
    const fs::path imp = ctx.art.file("importance_" + tag + ".tsv");
    write_text_atomic(imp, importance_tsv(table, vocab));
    std::string vtxt;
    const Vocabulary kept = prune_vocab(vocab, remap);
    for (const std::string& t : kept.tokens()) vtxt += t + "\n";
    const fs::path vpath = ctx.art.file("vocab_pruned_" + tag + ".txt");
    write_text_atomic(vpath, vtxt);

    std::size_t recovery = 0;
    if (!paper && ctx.cfg.prune.recovery_steps > 0) {
        FinetuneOptions o;
        o.epochs = std::size_t(-1) / 2;
        o.max_steps = ctx.cfg.prune.recovery_steps;
        o.lr = ctx.cfg.prune.recovery_lr;
        o.batch_size = ctx.cfg.distill.batch_size;
        o.seed = derive_seed(ctx.cfg.seed, SeedStream::Recovery);
        o.role = Side::Student;
        finetune(pruned, remap_dataset(s.train, remap.new_to_old, ctx.vocab()),
                 remap_dataset(s.dev, remap.new_to_old, ctx.vocab()), o);
        recovery = o.max_steps;
    }
    const fs::path out = paper ? ctx.art.student_init_pruned() : ctx.art.pruned(mode);
    save_model(pruned, out, remap.new_to_old);
    r.artifacts = {out, imp, vpath};
    const Dataset dev = remap_dataset(s.dev, remap.new_to_old, ctx.vocab());
    r.metrics = json{{"source", src.filename().string()},
                     {"k", remap.k},
                     {"clamped", remap.clamped},
                     {"sentences", table.sentences},
                     {"truncated", table.truncated},
                     {"recovery_steps", recovery},
                     {"dev_accuracy", evaluate(pruned, dev, ctx.cfg.eval_batch).accuracy}};
    return r;
}

StageResult quantize_stage(const Context& ctx, DistillMode mode) {
    const Splits s = ctx.splits();
    const fs::path src = ctx.art.pruned(mode);
    const LoadedModel lm = load_float(src, ctx.cfg.stage_order == StageOrder::Paper ? Stage::Distill : Stage::Prune);
    const Dataset train = remap_dataset(s.train, lm.vocab_map, ctx.vocab());
    const Dataset dev = remap_dataset(s.dev, lm.vocab_map, ctx.vocab());

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(ctx.cfg.seed, SeedStream::Calib));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    order.resize(std::min(order.size(), ctx.cfg.quant.calib_examples));
    std::vector<Batch> calib;
    const std::size_t bs = ctx.cfg.quant.quant.batch_size;
    for (std::size_t i = 0; i < order.size(); i += bs) {
        const std::span<const std::size_t> rows(order.data() + i, std::min(bs, order.size() - i));
        calib.push_back(make_batch(train, rows, lm.model.spec.max_seq_len));
    }

    const QuantResult q = quantize_model(lm.model, partition(lm.model, ctx.cfg.quant.quant.group_size), calib,
                                         ctx.cfg.quant.quant);
    Checkpoint c = qmodel_to_checkpoint(q.qmodel);
    if (!lm.vocab_map.empty()) c.metadata[kVocabMapKey] = lm.vocab_map;
    const fs::path out = ctx.art.quantized(mode);
    save_checkpoint(c, out);
    const fs::path rep = ctx.art.file("quant_report_" + Artifacts::tag(mode) + ".csv");
    write_text_atomic(rep, q.report.csv());

    StageResult r;
    r.artifacts = {out, rep};
    json modules = json::array();
    for (const ModuleReport& m : q.report.modules) {
        json mj{{"module", m.module},
                {"initial_err", m.initial_err},
                {"final_err", m.final_err},
                {"iterations", m.iterations},
                {"accepted", m.accepted}};
        if (!m.warning.empty()) {
            mj["warning"] = m.warning;
            std::fprintf(stderr, "warning: %s: %s\n", m.module.c_str(), m.warning.c_str());
        }
        modules.push_back(mj);
    }
    r.metrics = json{{"source", src.filename().string()},
                     {"modules", modules},
                     {"dev_accuracy", evaluate_quantized(q.qmodel, dev, ctx.cfg.eval_batch).accuracy}};
    return r;
}

struct Variant {
    std::string name;
    fs::path path;
};

std::vector<Variant> variants(const PipelineConfig& cfg) {
    const Artifacts a(cfg.output_dir);
    std::vector<Variant> v{{"teacher", a.teacher()}};
    for (DistillMode m : cfg.ladder) v.push_back({std::string(variant_label(m)) + "_stu", a.distilled(m)});
    for (DistillMode m : cfg.ladder) v.push_back({std::string(variant_label(m)) + "-TP", a.pruned(m)});
    for (DistillMode m : cfg.ladder) {
        v.push_back({m == DistillMode::CROSS_KD ? std::string("EI-BERT") : std::string(variant_label(m)) + "-TP-int8",
                     a.quantized(m)});
    }
    return v;
}

StageResult eval_stage(const Context& ctx) {
    const Splits s = ctx.splits();
    StageResult r;
    r.metrics = json::array();
    for (const Variant& v : variants(ctx.cfg)) {
        if (!fs::exists(v.path)) continue;
        const LoadedModel m = load_any(v.path);
        const Dataset dev = remap_dataset(s.dev, m.vocab_map, ctx.vocab());
        const Dataset test = remap_dataset(s.test, m.vocab_map, ctx.vocab());
        r.metrics.push_back(json{{"variant", v.name},
                                 {"checkpoint", v.path.filename().string()},
                                 {"dev_accuracy", evaluate_any(m, dev, ctx.cfg.eval_batch).accuracy},
                                 {"test_accuracy", evaluate_any(m, test, ctx.cfg.eval_batch).accuracy}});
    }
    if (r.metrics.empty()) fail(ErrorKind::Dependency, "no checkpoints to evaluate (run finetune-teacher first)");
    return r;
}

}  // namespace

StageResult run_stage(const PipelineConfig& cfg, Stage stage, DistillMode mode) {
    const Context ctx(cfg);
    fs::create_directories(ctx.art.root());
    const auto t0 = std::chrono::steady_clock::now();
    StageResult r;
    std::string name = to_string(stage);
    switch (stage) {
        case Stage::GenData: r = gen_data(ctx); break;
        case Stage::Pretrain: r = pretrain(ctx); break;
        case Stage::FinetuneTeacher: r = finetune_teacher_stage(ctx); break;
        case Stage::Distill:
            r = distill_stage(ctx, mode);
            name += "_" + Artifacts::tag(mode);
            break;
        case Stage::Prune:
            r = prune_stage(ctx, mode);
            if (cfg.stage_order == StageOrder::Default) name += "_" + Artifacts::tag(mode);
            break;
        case Stage::Quantize:
            r = quantize_stage(ctx, mode);
            name += "_" + Artifacts::tag(mode);
            break;
        case Stage::Eval: r = eval_stage(ctx); break;
    }
    json fragment{{"stage", to_string(stage)}, {"seconds", seconds_since(t0)}, {"result", r.metrics}};
    write_metrics(ctx, name, fragment);
    return r;
}

MetricsReport build_report(const PipelineConfig& cfg) {
    const Context ctx(cfg);
    const Splits s = ctx.splits();
    require(ctx.art.teacher(), Stage::FinetuneTeacher);
    MetricsReport rep;
    const std::size_t seq = cfg.data.task.max_len + 1;
    for (const Variant& v : variants(cfg)) {
        if (!fs::exists(v.path)) continue;
        rep.rows.push_back(make_row(v.name, v.path, load_any(v.path), s.dev, s.test, ctx.vocab(), seq, cfg.eval_batch));
    }
    fill_ratios(rep);
    rep.notes = accounting_notes();
    rep.notes.push_back(std::string("stage order: ") + to_string(cfg.stage_order) + "; seed " + std::to_string(cfg.seed));
    write_text_atomic(ctx.art.file("report.csv"), rep.csv());
    write_text_atomic(ctx.art.file("report.txt"), rep.table());
    return rep;
}

void run_all(const PipelineConfig& cfg) {
    const Artifacts a(cfg.output_dir);
    fs::create_directories(a.root());
    write_text_atomic(a.file("config.json"), config_to_json(cfg).dump(2) + "\n");
    const DistillMode primary = cfg.distill.mode;
    run_stage(cfg, Stage::GenData, primary);
    run_stage(cfg, Stage::Pretrain, primary);
    run_stage(cfg, Stage::FinetuneTeacher, primary);
    if (cfg.stage_order == StageOrder::Paper) {
        run_stage(cfg, Stage::Prune, primary);
        for (DistillMode m : cfg.ladder) run_stage(cfg, Stage::Distill, m);
    } else {
        for (DistillMode m : cfg.ladder) run_stage(cfg, Stage::Distill, m);
        run_stage(cfg, Stage::Prune, primary);
    }
    run_stage(cfg, Stage::Quantize, primary);
    run_stage(cfg, Stage::Eval, primary);
    build_report(cfg);
}

}  // namespace eib
