#include <cstdio>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "ilrr/errors.hpp"
#include "ilrr_tools/experiment.hpp"

using namespace ilrr;
using namespace ilrr::tools;

namespace {

// Exit codes.
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIntegrity = 3;
constexpr int kExitTraining = 4;
constexpr int kExitFormat = 5;

struct ExperimentFlags {
    std::string config;
    std::optional<std::string> checkpoint, grammar, reference_attr, layers, steps_set, mode, wave_freq, out, target,
        sampler;
    std::vector<std::string> prompts;
    std::optional<float> alpha, temperature;
    std::optional<int> kernel, gen_len, T, repeats, best_of, ref_count, ref_len, top_k;
    std::vector<std::uint64_t> seeds;
    bool baseline = false;
    bool ppl = false;

    void add_to(CLI::App* app) {
        app->add_option("--config", config, "JSON config or run manifest; flags override it")->check(CLI::ExistingFile);
        app->add_option("--checkpoint", checkpoint, "Trained checkpoint file");
        app->add_option("--grammar", grammar, "Grammar file (default: built-in)");
        app->add_option("--prompt", prompts, "Prompt text; repeat for several prompts");
        app->add_option("--reference-attr", reference_attr, "Reference attribute")->check(CLI::IsMember({"pos", "neg"}));
        app->add_option("--ref-count", ref_count, "References per prompt");
        app->add_option("--ref-len", ref_len, "Reference length in tokens");
        app->add_option("--alpha", alpha, "Steering scale");
        app->add_option("--layers", layers, "Steered layers: early|mid|late|all|none or 3, 3-5, 2,4");
        app->add_option("--steps-set", steps_set, "Steered timesteps: early|mid|late|full|none|first-half or ranges");
        app->add_option("--kernel", kernel, "Pooling kernel size");
        app->add_option("--mode", mode, "Steering mode")->check(CLI::IsMember({"standard", "spatial"}));
        app->add_option("--wave-freq", wave_freq, "Modulation frequency, or 'none' for a constant wave");
        app->add_option("--gen-len", gen_len, "Response length");
        app->add_option("--T", T, "Denoising steps");
        app->add_option("--seeds", seeds, "Seeds, comma separated")->delimiter(',');
        app->add_option("--repeats", repeats, "Generations per (prompt, reference, seed)");
        app->add_option("--best-of", best_of, "Unsteered best-of-n with the oracle as scorer");
        app->add_option("--sampler", sampler, "Token sampler")->check(CLI::IsMember({"greedy", "temperature", "topk"}));
        app->add_option("--temperature", temperature, "Sampling temperature");
        app->add_option("--top-k", top_k, "k for the top-k sampler");
        app->add_option("--target", target, "Attribute counted as success")->check(CLI::IsMember({"pos", "neg"}));
        app->add_flag("--baseline", baseline, "Disable steering");
        app->add_flag("--ppl", ppl, "Compute pseudo-perplexity per record");
        app->add_option("--out", out, "Run directory");
    }

    ExperimentConfig resolve() const {
        ExperimentConfig c = config.empty() ? ExperimentConfig{} : load_experiment(config);
        if (checkpoint) c.checkpoint = *checkpoint;
        if (grammar) c.grammar = *grammar;
        if (!prompts.empty()) c.prompts = prompts;
        if (reference_attr) c.reference.attribute = *reference_attr;
        if (ref_count) c.reference.count = *ref_count;
        if (ref_len) c.reference.length = *ref_len;
        if (alpha) c.steer.alpha = *alpha;
        if (layers) c.steer.layers = *layers;
        if (steps_set) c.steer.steps = *steps_set;
        if (kernel) c.steer.kernel = *kernel;
        if (mode) c.steer.mode = *mode;
        if (wave_freq) {
            if (*wave_freq == "none") {
                c.steer.wave_freq.reset();
            } else {
                try {
                    c.steer.wave_freq = std::stod(*wave_freq);
                } catch (const std::logic_error&) {
                    throw ConfigError("bad --wave-freq '" + *wave_freq + "'");
                }
            }
        }
        if (gen_len) c.schedule.gen_len = *gen_len;
        if (T) c.schedule.steps = *T;
        if (!seeds.empty()) c.seeds = seeds;
        if (repeats) c.repeats = *repeats;
        if (best_of) c.best_of = *best_of;
        if (sampler) c.sampler.kind = *sampler;
        if (temperature) c.sampler.temperature = *temperature;
        if (top_k) c.sampler.top_k = *top_k;
        if (target) c.target = *target;
        if (baseline) c.steer.enabled = false;
        if (ppl) c.pseudo_ppl = true;
        if (out) c.out = *out;
        return c;
    }
};

void print_summary(const std::string& what, const RunAggregate& a) {
    std::printf("%s: %zu records, %s accuracy %.2f +- %.2f, overlap4 %.2f, nfe %.1f", what.c_str(), a.records,
                a.target.c_str(), a.accuracy.mean, a.accuracy.std, a.overlap_mean, a.nfe_mean);
    if (a.ppl_mean) std::printf(", pseudo-ppl %.3f", *a.ppl_mean);
    std::printf("\n");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Iterative latent refinement steering for a toy masked diffusion language model"};
    app.require_subcommand(1);

    // train
    auto* train = app.add_subcommand("train", "Train the toy denoiser");
    std::string train_config;
    std::optional<std::string> t_grammar, t_out;
    std::optional<int> t_steps, t_batch, t_corpus, t_hidden, t_layers, t_heads, t_mlp;
    std::optional<float> t_lr;
    std::optional<std::uint64_t> t_seed;
    train->add_option("--config", train_config, "JSON train config or train manifest")->check(CLI::ExistingFile);
    train->add_option("--grammar", t_grammar, "Grammar file (default: built-in)");
    train->add_option("--steps", t_steps, "Optimizer steps");
    train->add_option("--batch-size", t_batch, "Sequences per step");
    train->add_option("--lr", t_lr, "Learning rate");
    train->add_option("--seed", t_seed, "Seed for corpus and initialization");
    train->add_option("--corpus-size", t_corpus, "Documents in the synthetic corpus");
    train->add_option("--hidden-dim", t_hidden, "Model width");
    train->add_option("--num-layers", t_layers, "Transformer blocks");
    train->add_option("--num-heads", t_heads, "Attention heads");
    train->add_option("--mlp-dim", t_mlp, "MLP width");
    train->add_option("--out", t_out, "Output directory");

    auto* generate = app.add_subcommand("generate", "Sample (optionally steered) generations and write a report");
    ExperimentFlags gen_flags;
    gen_flags.add_to(generate);

    auto* sweep = app.add_subcommand("sweep", "Run generate over values of one hyperparameter");
    ExperimentFlags sweep_flags;
    sweep_flags.add_to(sweep);
    std::string axis;
    std::vector<std::string> values;
    sweep->add_option("--axis", axis, "alpha | layers | steps | kernel")->required();
    sweep->add_option("--values", values, "Values to sweep (space separated)")->required();

    auto* eval = app.add_subcommand("eval", "Verify reports and print the joint aggregate");
    std::vector<std::string> reports;
    eval->add_option("reports", reports, "Run directories or records.csv files")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (*train) {
            TrainJob job = train_config.empty() ? TrainJob{} : load_train_job(train_config);
            if (t_grammar) job.grammar = *t_grammar;
            if (t_steps) job.train.steps = *t_steps;
            if (t_batch) job.train.batch_size = *t_batch;
            if (t_lr) job.train.learning_rate = *t_lr;
            if (t_seed) job.seed = *t_seed;
            if (t_corpus) job.corpus_size = *t_corpus;
            if (t_hidden) job.model.hidden_dim = static_cast<std::uint32_t>(*t_hidden);
            if (t_layers) job.model.num_layers = static_cast<std::uint32_t>(*t_layers);
            if (t_heads) job.model.num_heads = static_cast<std::uint32_t>(*t_heads);
            if (t_mlp) job.model.mlp_dim = static_cast<std::uint32_t>(*t_mlp);
            if (t_out) job.out = *t_out;
            const auto res = cmd_train(job);
            std::printf("trained %zu steps, loss %.4f -> %.4f, checkpoint %s\n", res.result.loss_log.size() - 1,
                        res.result.loss_log.front(), res.result.loss_log.back(),
                        (res.dir / "model.ckpt").string().c_str());
        } else if (*generate) {
            const auto run = cmd_generate(gen_flags.resolve());
            print_summary(run.dir.string(), run.aggregate);
        } else if (*sweep) {
            for (const auto& row : cmd_sweep(sweep_flags.resolve(), axis, values)) {
                print_summary(axis + "=" + row.value, row.run.aggregate);
            }
        } else if (*eval) {
            std::vector<std::filesystem::path> paths(reports.begin(), reports.end());
            const auto agg = cmd_eval(paths);
            std::cout << aggregate_to_json(agg);
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const IntegrityError& e) {
        std::fprintf(stderr, "integrity error: %s\n", e.what());
        return kExitIntegrity;
    } catch (const TrainingError& e) {
        std::fprintf(stderr, "training error: %s\n", e.what());
        return kExitTraining;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return kExitFormat;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitError;
    }
    return 0;
}
