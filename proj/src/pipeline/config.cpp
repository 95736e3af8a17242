#include "eib/pipeline/config.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace eib {

using nlohmann::json;

namespace {

[[noreturn]] void config_error(const std::string& path, const std::string& what) {
    fail(ErrorKind::Config, (path.empty() ? std::string("config") : path) + ": " + what);
}

// Reads keys from one JSON object and rejects any it was not asked about.
class Section {
  public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) config_error(path_, "expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            config_error(child(key), "has the wrong type");
        }
    }

    template <class T>
    void get_positive(const char* key, T& out) {
        get(key, out);
        if (!(out > 0)) config_error(child(key), "must be positive");
    }

    bool has(const char* key) {
        seen_.insert(key);
        return j_.contains(key);
    }
    const json& at(const char* key) const { return j_.at(key); }
    std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key())) config_error(child(it.key()), "unknown key");
    }

  private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

void read_model(Section& parent, const char* key, ModelSpec& s) {
    if (!parent.has(key)) return;
    Section m(parent.at(key), parent.child(key));
    m.get_positive("hidden_dim", s.hidden_dim);
    s.embed_dim = s.hidden_dim;
    m.get_positive("embed_dim", s.embed_dim);
    m.get_positive("intermediate_dim", s.intermediate_dim);
    m.get_positive("num_layers", s.num_layers);
    m.get_positive("num_heads", s.num_heads);
    m.get_positive("max_seq_len", s.max_seq_len);
    m.get("share_layers", s.share_layers);
    m.get("factorized_embedding", s.factorized_embedding);
    m.finish();
}

json model_json(const ModelSpec& s) {
    return json{{"hidden_dim", s.hidden_dim},
                {"embed_dim", s.embed_dim},
                {"intermediate_dim", s.intermediate_dim},
                {"num_layers", s.num_layers},
                {"num_heads", s.num_heads},
                {"max_seq_len", s.max_seq_len},
                {"share_layers", s.share_layers},
                {"factorized_embedding", s.factorized_embedding}};
}

template <class F>
void rethrow_as_config(const std::string& path, F&& f) {
    try {
        f();
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::Config) throw;
        config_error(path, e.what());
    }
}

}  // namespace

const char* to_string(StageOrder o) { return o == StageOrder::Paper ? "paper" : "default"; }

StageOrder parse_stage_order(const std::string& s) {
    if (s == "default") return StageOrder::Default;
    if (s == "paper") return StageOrder::Paper;
    fail(ErrorKind::Config, "unknown stage order '" + s + "' (expected default or paper)");
}

std::size_t PruneConfig::k(std::size_t vocab) const {
    if (keep) return keep;
    return static_cast<std::size_t>(std::llround(keep_fraction * static_cast<double>(vocab)));
}

std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), 0xe1bu};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

void PipelineConfig::finalize() {
    data.task.seed = derive_seed(seed, SeedStream::Data);
    for (ModelSpec* s : {&teacher, &student}) {
        s->vocab_size = data.task.vocab_size;
        s->num_classes = data.task.num_classes;
    }
    teacher.seed = derive_seed(seed, SeedStream::Teacher);
    student.seed = derive_seed(seed, SeedStream::Student);
    distill.seed = derive_seed(seed, SeedStream::Distill);

    rethrow_as_config("dataset", [&] { data.task.validate(); });
    if (data.n_train == 0 || data.n_dev == 0 || data.n_test == 0) config_error("dataset", "split sizes must be positive");
    rethrow_as_config("teacher", [&] { teacher.validate(); });
    rethrow_as_config("student", [&] { student.validate(); });
    rethrow_as_config("distill", [&] { distill.validate(); });
    rethrow_as_config("quantize", [&] { quant.quant.validate(); });
    const std::size_t need = data.task.max_len + 1;
    if (teacher.max_seq_len < need || student.max_seq_len < need) {
        config_error("", "max_seq_len must hold the longest sentence plus CLS (" + std::to_string(need) + ")");
    }
    if (ladder.empty()) config_error("distill.ladder", "needs at least one mode");
    if (!(prune.keep_fraction > 0 && prune.keep_fraction <= 1)) config_error("prune.keep_fraction", "must lie in (0, 1]");
    const std::size_t k = prune.k(data.task.vocab_size);
    if (k < Vocabulary::kReserved || k > data.task.vocab_size) {
        config_error("prune", "keep " + std::to_string(k) + " outside [4, vocab_size]");
    }
    if (quant.calib_examples == 0) config_error("quantize.calib_examples", "must be positive");
    if (output_dir.empty()) config_error("output_dir", "must not be empty");
    if (eval_batch == 0) config_error("eval_batch", "must be positive");
}

PipelineConfig parse_config(const json& j) {
    PipelineConfig c;
    Section root(j, "");
    int version = kConfigVersion;
    root.get("version", version);
    if (version != kConfigVersion) config_error("version", "unsupported config version " + std::to_string(version));
    root.get("seed", c.seed);
    root.get("output_dir", c.output_dir);
    std::string precision = "f32", order = "default";
    root.get("precision", precision);
    if (precision == "f32") {
        c.precision = Precision::F32;
    } else if (precision == "f64") {
        c.precision = Precision::F64;
    } else {
        config_error("precision", "must be f32 or f64");
    }
    root.get("stage_order", order);
    if (order != "default" && order != "paper") config_error("stage_order", "must be default or paper");
    c.stage_order = parse_stage_order(order);
    root.get("eval_batch", c.eval_batch);

    if (root.has("dataset")) {
        Section d(root.at("dataset"), "dataset");
        d.get("vocab_size", c.data.task.vocab_size);
        d.get("num_classes", c.data.task.num_classes);
        d.get("class_fraction", c.data.task.class_fraction);
        d.get("min_len", c.data.task.min_len);
        d.get("max_len", c.data.task.max_len);
        d.get("max_rival_count", c.data.task.max_rival_count);
        d.get("n_train", c.data.n_train);
        d.get("n_dev", c.data.n_dev);
        d.get("n_test", c.data.n_test);
        d.finish();
    }
    read_model(root, "teacher", c.teacher);
    read_model(root, "student", c.student);
    if (root.has("pretrain")) {
        Section p(root.at("pretrain"), "pretrain");
        p.get("steps", c.pretrain.steps);
        p.get("mask_prob", c.pretrain.mask_prob);
        p.get("lr", c.pretrain.lr);
        p.get_positive("batch_size", c.pretrain.batch_size);
        p.finish();
        if (!(c.pretrain.mask_prob >= 0 && c.pretrain.mask_prob < 1)) config_error("pretrain.mask_prob", "must lie in [0, 1)");
    }
    if (root.has("finetune_teacher")) {
        Section t(root.at("finetune_teacher"), "finetune_teacher");
        t.get("epochs", c.teacher_finetune.epochs);
        t.get("max_steps", c.teacher_finetune.max_steps);
        t.get_positive("lr", c.teacher_finetune.lr);
        t.get_positive("batch_size", c.teacher_finetune.batch_size);
        t.finish();
    }
    if (root.has("distill")) {
        Section d(root.at("distill"), "distill");
        std::string mode = to_string(c.distill.mode);
        d.get("mode", mode);
        rethrow_as_config("distill.mode", [&] { c.distill.mode = parse_distill_mode(mode); });
        d.get("teacher_lr", c.distill.teacher_lr);
        d.get("student_lr", c.distill.student_lr);
        d.get("beta_mse", c.distill.beta_mse);
        d.get("beta_kl", c.distill.beta_kl);
        d.get("temperature", c.distill.temperature);
        d.get("steps", c.distill.steps);
        d.get_positive("batch_size", c.distill.batch_size);
        d.get("student_first", c.distill.student_first);
        if (d.has("ladder")) {
            std::vector<std::string> modes;
            d.get("ladder", modes);
            c.ladder.clear();
            for (const auto& m : modes) rethrow_as_config("distill.ladder", [&] { c.ladder.push_back(parse_distill_mode(m)); });
        }
        d.finish();
    }
    if (root.has("prune")) {
        Section p(root.at("prune"), "prune");
        p.get("keep_fraction", c.prune.keep_fraction);
        p.get("keep", c.prune.keep);
        std::string conv = to_string(c.prune.convention);
        p.get("convention", conv);
        if (conv == to_string(ImportanceConvention::Received)) {
            c.prune.convention = ImportanceConvention::Received;
        } else if (conv == to_string(ImportanceConvention::Emitted)) {
            c.prune.convention = ImportanceConvention::Emitted;
        } else {
            config_error("prune.convention", "unknown convention '" + conv + "'");
        }
        p.get("score_sentences", c.prune.score_sentences);
        p.get("recovery_steps", c.prune.recovery_steps);
        p.get("recovery_lr", c.prune.recovery_lr);
        p.finish();
    }
    if (root.has("quantize")) {
        Section q(root.at("quantize"), "quantize");
        q.get_positive("group_size", c.quant.quant.group_size);
        q.get("iters", c.quant.quant.iters);
        q.get("lr", c.quant.quant.lr);
        q.get_positive("batch_size", c.quant.quant.batch_size);
        q.get("compensate", c.quant.quant.compensate);
        q.get("quantize_activations", c.quant.quant.quantize_activations);
        q.get("calib_examples", c.quant.calib_examples);
        q.finish();
    }
    root.finish();
    c.finalize();
    return c;
}

PipelineConfig parse_config_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorKind::Config, std::string("config is not valid JSON: ") + e.what());
    }
    return parse_config(j);
}

PipelineConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) fail(ErrorKind::Config, "cannot read config " + path);
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

json config_to_json(const PipelineConfig& c) {
    json ladder = json::array();
    for (DistillMode m : c.ladder) ladder.push_back(to_string(m));
    const SyntheticTask& t = c.data.task;
    return json{
        {"version", kConfigVersion},
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"precision", c.precision == Precision::F64 ? "f64" : "f32"},
        {"stage_order", to_string(c.stage_order)},
        {"eval_batch", c.eval_batch},
        {"dataset",
         {{"vocab_size", t.vocab_size},
          {"num_classes", t.num_classes},
          {"class_fraction", t.class_fraction},
          {"min_len", t.min_len},
          {"max_len", t.max_len},
          {"max_rival_count", t.max_rival_count},
          {"n_train", c.data.n_train},
          {"n_dev", c.data.n_dev},
          {"n_test", c.data.n_test}}},
        {"teacher", model_json(c.teacher)},
        {"student", model_json(c.student)},
        {"pretrain",
         {{"steps", c.pretrain.steps},
          {"mask_prob", c.pretrain.mask_prob},
          {"lr", c.pretrain.lr},
          {"batch_size", c.pretrain.batch_size}}},
        {"finetune_teacher",
         {{"epochs", c.teacher_finetune.epochs},
          {"max_steps", c.teacher_finetune.max_steps},
          {"lr", c.teacher_finetune.lr},
          {"batch_size", c.teacher_finetune.batch_size}}},
        {"distill",
         {{"mode", to_string(c.distill.mode)},
          {"teacher_lr", c.distill.teacher_lr},
          {"student_lr", c.distill.student_lr},
          {"beta_mse", c.distill.beta_mse},
          {"beta_kl", c.distill.beta_kl},
          {"temperature", c.distill.temperature},
          {"steps", c.distill.steps},
          {"batch_size", c.distill.batch_size},
          {"student_first", c.distill.student_first},
          {"ladder", ladder}}},
        {"prune",
         {{"keep_fraction", c.prune.keep_fraction},
          {"keep", c.prune.keep},
          {"convention", to_string(c.prune.convention)},
          {"score_sentences", c.prune.score_sentences},
          {"recovery_steps", c.prune.recovery_steps},
          {"recovery_lr", c.prune.recovery_lr}}},
        {"quantize",
         {{"group_size", c.quant.quant.group_size},
          {"iters", c.quant.quant.iters},
          {"lr", c.quant.quant.lr},
          {"batch_size", c.quant.quant.batch_size},
          {"compensate", c.quant.quant.compensate},
          {"quantize_activations", c.quant.quant.quantize_activations},
          {"calib_examples", c.quant.calib_examples}}},
    };
}

PipelineConfig desk_config() {
    PipelineConfig c;
    c.data.task.vocab_size = 2000;
    c.data.task.num_classes = 4;
    c.data.task.min_len = 6;
    c.data.task.max_len = 15;
    c.teacher.hidden_dim = c.teacher.embed_dim = 128;
    c.teacher.intermediate_dim = 512;
    c.teacher.num_layers = 2;
    c.teacher.num_heads = 4;
    c.teacher.share_layers = false;
    c.teacher.max_seq_len = 16;
    c.student.hidden_dim = c.student.embed_dim = 64;
    c.student.intermediate_dim = 256;
    c.student.num_layers = 2;
    c.student.num_heads = 4;
    c.student.share_layers = true;
    c.student.max_seq_len = 16;
    c.distill.steps = 600;
    c.distill.student_lr = 1e-3;
    c.distill.teacher_lr = 1e-5;
    c.distill.beta_mse = 0;
    c.distill.beta_kl = 1;
    c.finalize();
    return c;
}

}  // namespace eib
