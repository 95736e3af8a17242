#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "eib/distill/distill.hpp"
#include "eib/model/transformer.hpp"
#include "eib/numerics/precision.hpp"
#include "eib/pipeline/synthetic.hpp"
#include "eib/quant/quant.hpp"
#include "eib/vocab/prune.hpp"

namespace eib {

inline constexpr int kConfigVersion = 1;

// default: distill -> prune -> quantize. paper: prune -> distill -> quantize.
enum class StageOrder { Default, Paper };
const char* to_string(StageOrder o);
StageOrder parse_stage_order(const std::string& s);

struct DataConfig {
    SyntheticTask task;  // task.seed is derived from the pipeline seed
    std::size_t n_train = 10000, n_dev = 1000, n_test = 1000;
};

struct PretrainConfig {
    std::size_t steps = 0;
    Real mask_prob = 0.15;
    Real lr = 1e-4;
    std::size_t batch_size = 16;
};

struct TeacherConfig {
    std::size_t epochs = 3;
    std::size_t max_steps = 0;
    Real lr = 3e-4;
    std::size_t batch_size = 16;
};

struct PruneConfig {
    double keep_fraction = 0.5;  // of the vocabulary, reserved ids included
    std::size_t keep = 0;        // explicit k; overrides keep_fraction when non-zero
    ImportanceConvention convention = ImportanceConvention::Received;
    std::size_t score_sentences = 0;  // 0: the whole training split
    std::size_t recovery_steps = 200;
    Real recovery_lr = 1e-4;

    std::size_t k(std::size_t vocab) const;
};

struct QuantStageConfig {
    QuantConfig quant;
    std::size_t calib_examples = 256;
};

struct PipelineConfig {
    std::uint64_t seed = 1;
    std::string output_dir = "eib-out";
    Precision precision = Precision::F32;
    StageOrder stage_order = StageOrder::Default;
    DataConfig data;
    ModelSpec teacher, student;  // vocab_size / num_classes / seed come from the data and pipeline seed
    PretrainConfig pretrain;
    TeacherConfig teacher_finetune;
    DistillPlan distill;  // distill.seed is derived
    std::vector<DistillMode> ladder{DistillMode::KD, DistillMode::PI_KD, DistillMode::CROSS_KD};
    PruneConfig prune;
    QuantStageConfig quant;
    std::size_t eval_batch = 64;

    // Fills derived fields and checks cross-field consistency (Config errors).
    void finalize();
};

// Seeds for the pipeline's independent random streams.
enum class SeedStream : std::uint64_t { Data = 1, Teacher, Student, Finetune, Distill, Pretrain, Recovery, Calib };
std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream);

// Parses and validates; unknown keys anywhere are Config errors.
PipelineConfig parse_config(const nlohmann::json& j);
PipelineConfig parse_config_text(const std::string& text);
PipelineConfig load_config(const std::string& path);
nlohmann::json config_to_json(const PipelineConfig& c);

// Desk-scale defaults used by the examples and the acceptance run.
PipelineConfig desk_config();

}  // namespace eib
