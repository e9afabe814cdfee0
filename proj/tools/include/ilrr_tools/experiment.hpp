#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ilrr/diffusion.hpp"
#include "ilrr/metrics.hpp"
#include "ilrr/steering.hpp"
#include "ilrr/toylab.hpp"
#include "json.hpp"

namespace ilrr::tools {

inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kOutRootEnv = "ILRR_OUT_ROOT";

struct ReferenceSpec {
    std::string attribute;  // "pos" | "neg" | "" (none)
    int count = 5;
    int length = 16;
    std::uint64_t seed = 0;
};

struct SteerSpec {
    bool enabled = true;
    float alpha = 1.0f;
    std::string layers = "mid";  // early|mid|late|all|none, or "3", "3-5", "2,4,6"
    std::map<int, float> layer_alpha;  // per-layer overrides
    std::string steps = "full";  // early|mid|late|full|none, or "a-b", "1,5,9"
    int kernel = 6;
    std::string mode = "standard";  // standard | spatial
    std::optional<double> wave_freq = 7.0;  // null -> constant wave
    std::string pool_norm = "count";  // count | kernel
    std::string span = "response";    // response | full
};

struct ScheduleSpec {
    int steps = 16;  // T
    int gen_len = 16;
    std::string kind = "linear";
};

struct SamplerSpec {
    std::string kind = "temperature";  // greedy | temperature | topk
    float temperature = 1.0f;
    int top_k = 0;
};

struct ExperimentConfig {
    std::string checkpoint;
    std::string grammar;  // empty: built-in grammar
    std::vector<std::string> prompts = {"movie", "food"};
    ReferenceSpec reference;
    SteerSpec steer;
    ScheduleSpec schedule;
    SamplerSpec sampler;
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    int repeats = 4;
    int best_of = 1;       // > 1: unsteered best-of-n with the oracle as scorer
    std::string target;    // attribute counted as success; defaults to the reference attribute
    bool pseudo_ppl = false;
    std::string out;

    // Structural checks that need no files. Throws ConfigError.
    void validate() const;
    std::string target_label() const;  // "POS" / "NEG"
};

nlohmann::ordered_json to_json(const ExperimentConfig& cfg);
// Accepts a bare config object or a run manifest (uses its "config" member).
// Missing keys keep their defaults; unknown keys are a ConfigError.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

struct TrainJob {
    std::string grammar;
    int corpus_size = 4000;
    std::uint64_t seed = 7;
    DenoiserConfig model;  // vocab_size is filled from the grammar
    TrainConfig train;
    std::string out;

    void validate() const;
};

nlohmann::ordered_json to_json(const TrainJob& job);
TrainJob train_job_from_json(const nlohmann::json& j);
TrainJob load_train_job(const std::filesystem::path& path);

// Layer and step presets. Thirds use floor(n/3) for the outer parts.
std::vector<int> parse_layer_set(const std::string& spec, int num_layers);
std::set<int> parse_step_set(const std::string& spec, int total_steps);

ToyGrammar load_grammar(const std::string& path);

// Everything a generate run needs, resolved from a config.
struct Resolved {
    Checkpoint checkpoint;
    ToyGrammar grammar;
    Vocabulary vocab;
    std::vector<TokenSeq> references;  // empty when steering is off and no attribute given
    std::vector<std::vector<TokenId>> prompts;
    std::optional<SteerConfig> steer;
    NoiseSchedule schedule;
    TokenSampler sampler;
};

// Loads files and checks every cross-field constraint before any sampling.
Resolved resolve(const ExperimentConfig& cfg);

// All (seed, prompt, reference, repeat) generations in a fixed order.
std::vector<RunRecord> run_generations(const ExperimentConfig& cfg, const Resolved& r);

struct RunOutput {
    std::filesystem::path dir;
    std::vector<RunRecord> records;
    RunAggregate aggregate;
};

// Writes manifest.json, records.csv, summary.json and samples.txt into the
// run directory, then re-reads and verifies them.
RunOutput write_run(const std::filesystem::path& dir, const std::string& command, const ExperimentConfig& cfg,
                    const std::vector<RunRecord>& records);

std::filesystem::path default_out_dir(const std::string& command, const nlohmann::ordered_json& config);

// Commands. Each returns normally on success and throws ilrr errors otherwise.
struct TrainOutput {
    std::filesystem::path dir;
    TrainResult result;
};
TrainOutput cmd_train(const TrainJob& job);
RunOutput cmd_generate(const ExperimentConfig& cfg);

struct SweepRow {
    std::string value;
    RunOutput run;
};
// axis: alpha | layers | steps | kernel
std::vector<SweepRow> cmd_sweep(const ExperimentConfig& base, const std::string& axis,
                                const std::vector<std::string>& values);
ExperimentConfig apply_axis(ExperimentConfig cfg, const std::string& axis, const std::string& value);

// Verifies every report and returns the joint aggregate.
RunAggregate cmd_eval(const std::vector<std::filesystem::path>& reports);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace ilrr::tools
