#pragma once

// Run configuration and the stage functions shared by the command-line tool
// and the acceptance suite. Every random stream derives from `seed` through a
// fixed label, so one config reproduces every artifact byte for byte.

#include "flexi/corpus.hpp"
#include "flexi/inference.hpp"
#include "flexi/model.hpp"
#include "flexi/scoring.hpp"
#include "flexi/selection.hpp"
#include "flexi/surgery.hpp"
#include "flexi/training.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace flexi {

/// Malformed config text, unknown key or invalid value.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct PipelineConfig {
    ModelConfig model;
    std::uint64_t seed = 0;

    // Synthetic data.
    std::size_t train_tokens = 1'000'000;
    std::size_t valid_tokens = 65'536;
    std::uint64_t calib_seed = 1;
    std::size_t calib_sequences = 64;
    std::size_t calib_seq_len = 64;

    // Base training.
    TrainConfig train;

    // Pruning and replacement.
    double prune_ratio = 0.25;
    DistanceMetricKind metric = DistanceMetricKind::proposed;
    std::size_t rank = 8;
    double gamma_init = 1e-4;
    AdapterInit adapter_init = AdapterInit::svd;
    AdapterSource adapter_source = AdapterSource::raw;

    // Recovery fine-tuning.
    std::size_t recovery_steps = 1000;
    double recovery_lr = 1e-3;
    TrainableSet recovery_trainable = TrainableSet::all;

    // Extension.
    std::optional<ExtensionSpec> extension;
    std::size_t extension_steps = 500;

    // Decoding.
    std::size_t draft_k = 4;
    std::size_t max_new_tokens = 64;

    /// Evaluation windows for reported PPL (0 = the whole validation split).
    std::size_t eval_windows = 0;

    void validate() const;
    /// Canonical key = value text; parse_config(to_text()) round-trips.
    std::string to_text() const;
};

/// Applies one key = value pair. Throws ConfigError on unknown keys or bad values.
void apply_config_value(PipelineConfig& cfg, const std::string& key, const std::string& value);
PipelineConfig parse_config(const std::string& text, PipelineConfig base = {});
PipelineConfig load_config(const std::filesystem::path& path);
std::vector<std::string> config_keys();

struct Corpora {
    Corpus train;
    Corpus valid;
};
Corpora make_corpora(const PipelineConfig& cfg);
/// Held-out calibration tokens from the same source: calib_sequences * calib_seq_len ids.
Corpus make_calibration(const PipelineConfig& cfg, std::uint64_t calib_seed);

double eval_ppl(const Model& model, const Corpus& valid, const PipelineConfig& cfg);

Model train_base(const PipelineConfig& cfg, const Corpora& data, FinetuneResult* log = nullptr);
BiReport score_blocks(const Model& model, const PipelineConfig& cfg, std::uint64_t calib_seed);
/// Prune set from the BI report, then bases under `kind`.
SelectionReport choose_bases(const Model& model, const BiReport& bi, const PipelineConfig& cfg,
                             DistanceMetricKind kind);
ReplaceOptions replace_options(const PipelineConfig& cfg);
TrainConfig recovery_config(const PipelineConfig& cfg, std::size_t steps);
FinetuneResult recover(Model& model, const Corpora& data, const PipelineConfig& cfg, std::size_t steps);

/// One row of the ablation table: PPL right after surgery and after recovery.
struct AblationRow {
    std::string variant;
    double start_ppl = 0.0;
    double final_ppl = 0.0;
};

/// Four legs under one recovery budget: the full method, the raw-weight
/// (no-hrp) metric, output norm ablated (gamma = 1), and zero-product init.
std::vector<AblationRow> ablate_table4(const Model& base, const Corpora& data, const PipelineConfig& cfg,
                                       const std::function<void(const std::string&)>& progress = {});
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

/// Every stage in order, writing all artifacts under `out_dir`.
void run_pipeline(const PipelineConfig& cfg, const std::filesystem::path& out_dir,
                  const std::function<void(const std::string&)>& progress = {});

}  // namespace flexi
