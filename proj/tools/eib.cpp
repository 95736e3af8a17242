// eib: staged EI-BERT compression pipeline driver.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "eib/error.hpp"
#include "eib/numerics/kernels.hpp"
#include "eib/pipeline/pipeline.hpp"

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string mode;
    std::string stage_order;
};

void add_common(CLI::App* app, Flags& f, bool with_mode) {
    app->add_option("--config", f.config, "JSON config (desk defaults when omitted)");
    app->add_option("--seed", f.seed, "Pipeline seed");
    app->add_option("--out", f.out, "Output directory");
    app->add_option("--stage-order", f.stage_order, "default | paper")->check(CLI::IsMember({"default", "paper"}));
    if (with_mode) app->add_option("--mode", f.mode, "kd | pi-kd | cross-kd")->check(CLI::IsMember({"kd", "pi-kd", "cross-kd"}));
}

eib::PipelineConfig resolve(const Flags& f) {
    eib::PipelineConfig c = f.config.empty() ? eib::desk_config() : eib::load_config(f.config);
    if (f.seed) c.seed = *f.seed;
    if (!f.out.empty()) c.output_dir = f.out;
    if (!f.stage_order.empty()) c.stage_order = eib::parse_stage_order(f.stage_order);
    if (!f.mode.empty()) c.distill.mode = eib::parse_distill_mode(f.mode);
    c.finalize();
    return c;
}

void print_artifacts(const eib::StageResult& r) {
    for (const auto& p : r.artifacts) std::printf("wrote %s\n", p.string().c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EI-BERT desk-scale compression pipeline"};
    app.require_subcommand(1);
    Flags f;

    struct Sub {
        const char* name;
        const char* help;
        std::optional<eib::Stage> stage;
        bool mode;
    };
    const Sub subs[] = {
        {"gen-data", "Generate the synthetic dataset", eib::Stage::GenData, false},
        {"pretrain", "Initialise (and optionally MLM-pretrain) the student", eib::Stage::Pretrain, false},
        {"finetune-teacher", "Fine-tune the teacher on the task", eib::Stage::FinetuneTeacher, false},
        {"distill", "Distill the student (--mode)", eib::Stage::Distill, true},
        {"prune", "Prune the vocabulary", eib::Stage::Prune, true},
        {"quantize", "Module-wise int8 calibration", eib::Stage::Quantize, true},
        {"eval", "Evaluate every variant present", eib::Stage::Eval, false},
        {"report", "Write report.csv and report.txt", std::nullopt, false},
        {"run-all", "Every stage for the configured ladder, then report", std::nullopt, false},
    };
    for (const Sub& s : subs) add_common(app.add_subcommand(s.name, s.help), f, s.mode);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        eib::kernels::configure_threads_from_env();
        const eib::PipelineConfig cfg = resolve(f);
        const std::string cmd = app.get_subcommands().front()->get_name();
        eib::OutputLock lock(cfg.output_dir);
        if (cmd == "run-all") {
            eib::run_all(cfg);
            std::printf("%s", eib::build_report(cfg).table().c_str());
        } else if (cmd == "report") {
            std::printf("%s", eib::build_report(cfg).table().c_str());
        } else {
            for (const Sub& s : subs) {
                if (cmd != s.name) continue;
                const eib::StageResult r = eib::run_stage(cfg, *s.stage, cfg.distill.mode);
                print_artifacts(r);
                std::printf("%s\n", r.metrics.dump(2).c_str());
            }
        }
        return 0;
    } catch (const eib::Error& e) {
        std::fprintf(stderr, "eib: %s\n", e.what());
        return eib::exit_code(e.kind());
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "eib: config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "eib: %s\n", e.what());
        return 1;
    }
}
