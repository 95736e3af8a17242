#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "eib/model/accounting.hpp"
#include "eib/model/checkpoint.hpp"
#include "eib/pipeline/pipeline.hpp"
#include "eib/pipeline/synthetic.hpp"

using namespace eib;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("eib_pipeline_test_" + name);
    fs::remove_all(p);
    return p;
}

// Small enough to run every stage in seconds.
PipelineConfig micro_config(const fs::path& out) {
    PipelineConfig c = desk_config();
    c.output_dir = out.string();
    c.precision = Precision::F64;
    c.data.task.vocab_size = 120;
    c.data.n_train = 160;
    c.data.n_dev = 40;
    c.data.n_test = 40;
    for (ModelSpec* s : {&c.teacher, &c.student}) {
        s->hidden_dim = s->embed_dim = 16;
        s->intermediate_dim = 32;
        s->num_heads = 2;
    }
    c.teacher.hidden_dim = c.teacher.embed_dim = 24;
    c.teacher_finetune.epochs = 1;
    c.distill.steps = 12;
    c.prune.recovery_steps = 4;
    c.quant.quant.iters = 4;
    c.quant.calib_examples = 32;
    c.finalize();
    return c;
}

}  // namespace

TEST_CASE("synthetic data is deterministic in the seed") {
    SyntheticTask t;
    t.seed = 11;
    const Vocabulary v = t.vocabulary();
    const SyntheticSplits a = generate(t, 300, 50, 50), b = generate(t, 300, 50, 50);
    CHECK(dataset_tsv(a.train, v) == dataset_tsv(b.train, v));
    CHECK(dataset_tsv(a.test, v) == dataset_tsv(b.test, v));
    t.seed = 12;
    CHECK(dataset_tsv(generate(t, 300, 50, 50).train, v) != dataset_tsv(a.train, v));
}

TEST_CASE("sentences of class-0 tokens only are labelled 0") {
    SyntheticTask t;
    t.num_classes = 2;
    std::vector<int> ids;
    for (int id = 4; ids.size() < 6; ++id)
        if (t.class_of(id) == 0) ids.push_back(id);
    CHECK(t.label_of(ids) == 0);
}

TEST_CASE("labels are uniform within 5% over 10k samples") {
    SyntheticTask t;
    t.seed = 5;
    const SyntheticSplits s = generate(t, 10000, 10, 10);
    std::vector<std::size_t> counts(t.num_classes, 0);
    for (const Example& e : s.train) {
        ++counts[static_cast<std::size_t>(e.label)];
        CHECK(e.label == t.label_of(e.ids));
    }
    for (std::size_t c : counts) CHECK(std::abs(static_cast<double>(c) / 10000.0 - 0.25) <= 0.05);
}

TEST_CASE("a vocabulary too small for the classes is a task error") {
    SyntheticTask t;
    t.vocab_size = 6;
    t.num_classes = 4;
    try {
        t.validate();
        FAIL("expected a task error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Task);
    }
}

TEST_CASE("dataset TSV round trip") {
    SyntheticTask t;
    t.vocab_size = 100;
    const Vocabulary v = t.vocabulary();
    const Dataset d = generate(t, 40, 1, 1).train;
    const Dataset back = parse_dataset_tsv(dataset_tsv(d, v), v, t.num_classes);
    REQUIRE(back.size() == d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        CHECK(back[i].ids == d[i].ids);
        CHECK(back[i].label == d[i].label);
    }
    CHECK_THROWS_AS(parse_dataset_tsv("9\tnot-a-token\n", v, t.num_classes), Error);
}

TEST_CASE("config: desk defaults survive a JSON round trip") {
    const PipelineConfig c = desk_config();
    const nlohmann::json j = config_to_json(c);
    CHECK(config_to_json(parse_config(j)) == j);
}

TEST_CASE("config: unknown keys are rejected with their path") {
    nlohmann::json j = config_to_json(desk_config());
    auto expect_config_error = [](const nlohmann::json& bad, const std::string& fragment) {
        try {
            parse_config(bad);
            FAIL("expected a config error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Config);
            const std::string what = e.what();
            CAPTURE(what);
            CHECK(std::string(e.what()).find(fragment) != std::string::npos);
        }
    };
    nlohmann::json top = j;
    top["lerning_rate"] = 1;
    expect_config_error(top, "lerning_rate");
    nlohmann::json nested = j;
    nested["student"]["hiden_dim"] = 8;
    expect_config_error(nested, "student.hiden_dim");
    nlohmann::json type = j;
    type["seed"] = "one";
    expect_config_error(type, "seed");
    nlohmann::json prec = j;
    prec["precision"] = "f16";
    expect_config_error(prec, "precision");
    nlohmann::json order = j;
    order["stage_order"] = "sideways";
    expect_config_error(order, "stage_order");
    CHECK_THROWS_AS(parse_config_text("{ not json"), Error);
}

TEST_CASE("seed streams are distinct and reproducible") {
    CHECK(derive_seed(1, SeedStream::Data) == derive_seed(1, SeedStream::Data));
    CHECK(derive_seed(1, SeedStream::Data) != derive_seed(1, SeedStream::Teacher));
    CHECK(derive_seed(1, SeedStream::Data) != derive_seed(2, SeedStream::Data));
}

TEST_CASE("published sizes give a 213.09x compression ratio") {
    CHECK(std::abs(compression_ratio(407.0, 1.91) - 213.09) <= 0.01);
}

TEST_CASE("remap_dataset sends dropped ids to UNK") {
    const Dataset d{Example{1, {2, 5, 6, 7}}};
    const Dataset r = remap_dataset(d, {0, 1, 2, 3, 6}, 10);
    CHECK(r[0].ids == std::vector<int>{2, Vocabulary::kUnk, 4, Vocabulary::kUnk});
    CHECK(r[0].label == 1);
    CHECK(remap_dataset(d, {}, 10)[0].ids == d[0].ids);
}

TEST_CASE("output lock excludes a second holder until released") {
    const fs::path dir = scratch("lock");
    {
        OutputLock a(dir);
        try {
            OutputLock b(dir);
            FAIL("second lock should fail");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Dependency);
        }
    }
    OutputLock again(dir);
    fs::remove_all(dir);
}

TEST_CASE("missing prerequisites name the producing stage") {
    const PipelineConfig c = micro_config(scratch("deps"));
    auto expect_dep = [&](Stage s, const std::string& producer) {
        try {
            run_stage(c, s, DistillMode::CROSS_KD);
            FAIL("expected a dependency error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::Dependency);
            CHECK(std::string(e.what()).find(producer) != std::string::npos);
        }
    };
    expect_dep(Stage::Distill, "gen-data");
    run_stage(c, Stage::GenData, DistillMode::CROSS_KD);
    expect_dep(Stage::Distill, "finetune-teacher");
    expect_dep(Stage::Prune, "distill");
    expect_dep(Stage::Quantize, "prune");
    fs::remove_all(c.output_dir);
}

TEST_CASE("micro pipeline: stages, report and determinism") {
    const fs::path out_a = scratch("run_a"), out_b = scratch("run_b");
    const PipelineConfig a = micro_config(out_a), b = micro_config(out_b);
    run_all(a);
    run_all(b);
    const Artifacts art_a(out_a), art_b(out_b);

    SUBCASE("five ladder checkpoints and one report") {
        for (DistillMode m : a.ladder) CHECK(fs::exists(art_a.distilled(m)));
        CHECK(fs::exists(art_a.pruned(DistillMode::CROSS_KD)));
        CHECK(fs::exists(art_a.quantized(DistillMode::CROSS_KD)));
        CHECK(fs::exists(art_a.file("report.csv")));
        CHECK(fs::exists(art_a.metrics("eval")));
        CHECK_FALSE(fs::exists(out_a / ".eib.lock"));
    }

    SUBCASE("bit-identical artifacts across runs in 64-bit mode") {
        for (const fs::path& rel : {fs::path("teacher.eibt"), fs::path("student_cross_kd.eibt"),
                                    fs::path("student_cross_kd_pruned.eibt"), fs::path("student_cross_kd_int8.eibt"),
                                    fs::path("report.csv"), fs::path("data/train.tsv")}) {
            CAPTURE(rel);
            CHECK(slurp(out_a / rel) == slurp(out_b / rel));
        }
    }

    SUBCASE("re-running a stage rewrites the same bytes") {
        const std::string before = slurp(art_a.distilled(DistillMode::PI_KD));
        run_stage(a, Stage::Distill, DistillMode::PI_KD);
        CHECK(slurp(art_a.distilled(DistillMode::PI_KD)) == before);
    }

    SUBCASE("eval of the teacher matches the fine-tuning record") {
        const auto ft = nlohmann::json::parse(slurp(art_a.metrics("finetune-teacher")));
        const auto ev = nlohmann::json::parse(slurp(art_a.metrics("eval")));
        const double recorded = ft["result"]["dev_accuracy"].get<double>();
        double evaluated = -1;
        for (const auto& row : ev["result"])
            if (row["variant"] == "teacher") evaluated = row["dev_accuracy"].get<double>();
        CHECK(std::abs(recorded - evaluated) <= 1e-6);
    }

    SUBCASE("report ratios are recomputed from byte counts") {
        const MetricsReport rep = build_report(a);
        REQUIRE(rep.rows.size() >= 2);
        CHECK(rep.rows.front().ratio == 1.0);
        for (const ReportRow& r : rep.rows) {
            CHECK(r.ratio == static_cast<double>(rep.rows.front().bytes.total()) /
                                 static_cast<double>(r.bytes.total()));
            const LoadedModel m = load_any(out_a / r.checkpoint);
            CHECK(storage_bytes(m.float_model(), r.quantized ? StoragePrecision::Int8WithFp32Steps
                                                             : StoragePrecision::Fp32)
                      .total() == r.bytes.total());
        }
        CHECK(rep.csv().rfind("variant,checkpoint,precision,dev_acc", 0) == 0);
    }

    SUBCASE("quantized checkpoint schema: every weight has a step") {
        const Checkpoint c = load_checkpoint(art_a.quantized(DistillMode::CROSS_KD));
        std::size_t int8 = 0;
        for (const StoredTensor& t : c.tensors) {
            if (!std::holds_alternative<std::vector<std::int8_t>>(t.data)) continue;
            ++int8;
            CHECK_NOTHROW(c.at(t.name + ".step"));
        }
        CHECK(int8 > 0);
    }

    SUBCASE("truncated checkpoints are rejected") {
        const std::string bytes = slurp(art_a.pruned(DistillMode::CROSS_KD));
        const fs::path cut = out_a / "cut.eibt";
        for (std::size_t n : {std::size_t{3}, bytes.size() / 2, bytes.size() - 1}) {
            std::ofstream(cut, std::ios::binary) << bytes.substr(0, n);
            try {
                load_any(cut);
                FAIL("truncated file loaded");
            } catch (const Error& e) {
                CHECK(e.kind() == ErrorKind::Format);
            }
        }
    }

    SUBCASE("paper stage order prunes before distilling") {
        PipelineConfig p = a;
        p.stage_order = StageOrder::Paper;
        run_stage(p, Stage::Prune, DistillMode::CROSS_KD);
        CHECK(fs::exists(art_a.student_init_pruned()));
        run_stage(p, Stage::Distill, DistillMode::CROSS_KD);
        const LoadedModel m = load_any(art_a.pruned(DistillMode::CROSS_KD));
        CHECK(m.vocab_map.size() == p.prune.k(p.data.task.vocab_size));
        run_stage(p, Stage::Quantize, DistillMode::CROSS_KD);
        CHECK(load_any(art_a.quantized(DistillMode::CROSS_KD)).quantized);
    }

    fs::remove_all(out_a);
    fs::remove_all(out_b);
}
