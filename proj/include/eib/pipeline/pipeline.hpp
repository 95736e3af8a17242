#pragma once

// Staged driver: gen-data -> pretrain -> finetune-teacher -> distill -> prune
// -> quantize (prune before distill with the paper stage order). Every stage
// reads its inputs from the output directory, writes its artifacts
// atomically and leaves a metrics fragment in metrics/.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "eib/pipeline/config.hpp"
#include "eib/pipeline/report.hpp"

namespace eib {

enum class Stage { GenData, Pretrain, FinetuneTeacher, Distill, Prune, Quantize, Eval };
const char* to_string(Stage s);
Stage parse_stage(const std::string& s);

// Short variant labels used in reports: KD, PI-KD, CrossKD.
const char* variant_label(DistillMode m);

class Artifacts {
  public:
    explicit Artifacts(std::filesystem::path root) : root_(std::move(root)) {}

    const std::filesystem::path& root() const { return root_; }
    std::filesystem::path split(const std::string& name) const { return root_ / "data" / (name + ".tsv"); }
    std::filesystem::path vocab() const { return root_ / "data" / "vocab.txt"; }
    std::filesystem::path teacher() const { return root_ / "teacher.eibt"; }
    std::filesystem::path student_init() const { return root_ / "student_init.eibt"; }
    // Paper order: the pretrained student after pruning.
    std::filesystem::path student_init_pruned() const { return root_ / "student_init_pruned.eibt"; }
    std::filesystem::path distilled(DistillMode m) const { return root_ / ("student_" + tag(m) + ".eibt"); }
    std::filesystem::path teacher_after(DistillMode m) const { return root_ / ("teacher_" + tag(m) + ".eibt"); }
    std::filesystem::path pruned(DistillMode m) const { return root_ / ("student_" + tag(m) + "_pruned.eibt"); }
    std::filesystem::path quantized(DistillMode m) const { return root_ / ("student_" + tag(m) + "_int8.eibt"); }
    std::filesystem::path metrics(const std::string& name) const { return root_ / "metrics" / (name + ".json"); }
    std::filesystem::path file(const std::string& name) const { return root_ / name; }

    static std::string tag(DistillMode m);

  private:
    std::filesystem::path root_;
};

// Advisory lock on an output directory; a second holder gets a Dependency
// error. Released on destruction.
class OutputLock {
  public:
    explicit OutputLock(const std::filesystem::path& dir);
    ~OutputLock();
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;

  private:
    std::filesystem::path path_;
};

struct StageResult {
    nlohmann::json metrics;
    std::vector<std::filesystem::path> artifacts;
};

// Runs one stage. `mode` selects the distillation variant for distill,
// prune and quantize. Missing inputs raise a Dependency error naming the
// stage that produces them.
StageResult run_stage(const PipelineConfig& cfg, Stage stage, DistillMode mode);

// Evaluates every variant checkpoint present and writes report.csv/report.txt.
MetricsReport build_report(const PipelineConfig& cfg);

// Every stage in order for every ladder mode, then eval and report.
void run_all(const PipelineConfig& cfg);

}  // namespace eib
