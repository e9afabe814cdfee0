#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "ilrr/errors.hpp"
#include "ilrr_tools/experiment.hpp"

namespace ilrr::tools {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

ordered_json manifest(const std::string& command, const ordered_json& config) {
    ordered_json m;
    m["tool_version"] = kToolVersion;
    m["checkpoint_format"] = kCheckpointVersion;
    m["command"] = command;
    m["config"] = config;
    return m;
}

SteerMode parse_mode(const std::string& s) {
    return s == "spatial" ? SteerMode::SpatiallyModulated : SteerMode::Standard;
}

}  // namespace

ToyGrammar load_grammar(const std::string& path) {
    if (path.empty()) return ToyGrammar::default_grammar();
    if (!fs::exists(path)) throw ConfigError("grammar file not found: " + path);
    return ToyGrammar::load(path);
}

Resolved resolve(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.checkpoint.empty()) throw ConfigError("no checkpoint given (--checkpoint)");
    if (!fs::exists(cfg.checkpoint)) throw ConfigError("checkpoint not found: " + cfg.checkpoint);

    ToyGrammar grammar = load_grammar(cfg.grammar);
    Vocabulary vocab = Vocabulary::from_grammar(grammar);
    Checkpoint ck = load_checkpoint(cfg.checkpoint);
    if (!ck.vocabulary.empty() && ck.vocabulary != vocab.words()) {
        throw ConfigError("checkpoint vocabulary does not match the grammar");
    }
    const auto& mc = ck.model.config;
    const auto T = cfg.schedule.steps;
    const auto gen_len = static_cast<std::size_t>(cfg.schedule.gen_len);

    std::vector<std::vector<TokenId>> prompts;
    for (const auto& p : cfg.prompts) {
        prompts.push_back(vocab.encode(p));
        if (prompts.back().size() + gen_len > mc.max_seq_len) {
            throw ConfigError("prompt '" + p + "' plus gen_len exceeds the model's max_seq_len");
        }
    }

    std::optional<SteerConfig> steer;
    if (cfg.steer.enabled) {
        SteerConfig sc;
        for (int layer : parse_layer_set(cfg.steer.layers, static_cast<int>(mc.num_layers))) {
            sc.layers[layer] = cfg.steer.alpha;
        }
        for (const auto& [layer, a] : cfg.steer.layer_alpha) {
            if (!sc.layers.contains(layer)) {
                throw ConfigError("layer_alpha names layer " + std::to_string(layer) + " which is not steered");
            }
            sc.layers[layer] = a;
        }
        sc.steps = parse_step_set(cfg.steer.steps, T);
        sc.kernel = cfg.steer.kernel;
        sc.mode = parse_mode(cfg.steer.mode);
        sc.wave_freq = cfg.steer.wave_freq;
        sc.pool_norm = cfg.steer.pool_norm == "kernel" ? PoolNorm::Kernel : PoolNorm::Count;
        sc.span = cfg.steer.span == "full" ? SteeringSpan::Full : SteeringSpan::Response;
        sc.validate(static_cast<int>(mc.num_layers), T);
        const auto ref_len = static_cast<std::size_t>(cfg.reference.length);
        // with a full span the shared prompt is part of both lengths
        if (sc.mode == SteerMode::Standard && ref_len != gen_len) {
            throw ConfigError("standard mode needs reference length == gen_len (" + std::to_string(ref_len) +
                              " vs " + std::to_string(gen_len) + "); use --mode spatial for shorter references");
        }
        if (sc.mode == SteerMode::SpatiallyModulated && ref_len > gen_len) {
            throw ConfigError("spatial mode needs reference length <= gen_len");
        }
        steer = sc;
    }

    std::vector<TokenSeq> refs;
    if (!cfg.reference.attribute.empty()) {
        Rng rng(cfg.reference.seed);
        try {
            refs = make_references(grammar, vocab, parse_attribute(cfg.reference.attribute),
                                   static_cast<std::size_t>(cfg.reference.count),
                                   static_cast<std::size_t>(cfg.reference.length), rng);
        } catch (const ContractError& e) {
            // the grammar cannot produce what the config asks for
            throw ConfigError(std::string("references: ") + e.what());
        }
    }

    TokenSampler sampler;
    if (cfg.sampler.kind == "temperature") sampler = TokenSampler::with_temperature(cfg.sampler.temperature);
    if (cfg.sampler.kind == "topk") sampler = TokenSampler::with_top_k(cfg.sampler.top_k, cfg.sampler.temperature);
    sampler.validate();

    NoiseSchedule schedule(T, gen_len, cfg.schedule.kind == "cosine" ? ScheduleKind::Cosine : ScheduleKind::Linear);
    return Resolved{std::move(ck), std::move(grammar), std::move(vocab), std::move(refs), std::move(prompts),
                    std::move(steer), schedule, sampler};
}

std::vector<RunRecord> run_generations(const ExperimentConfig& cfg, const Resolved& r) {
    const auto& model = r.checkpoint.model;
    const AttributeOracle oracle(r.grammar, r.vocab);
    const Attribute target = parse_attribute(cfg.target_label());
    const auto gen_len = r.schedule.gen_len();
    const std::size_t n_refs = std::max<std::size_t>(1, r.references.size());
    const auto repeats = static_cast<std::size_t>(cfg.repeats);

    const SequenceScorer scorer = [&](const TokenSeq& seq) {
        const auto c = oracle.classify(seq);
        const double margin = c.pos_hits - c.neg_hits;
        return target == Attribute::Pos ? margin : -margin;
    };

    std::vector<RunRecord> records;
    for (std::uint64_t seed : cfg.seeds) {
        for (std::size_t p = 0; p < r.prompts.size(); ++p) {
            for (std::size_t ref = 0; ref < n_refs; ++ref) {
                const TokenSeq* reference = r.references.empty() ? nullptr : &r.references[ref];
                for (std::size_t rep = 0; rep < repeats; ++rep) {
                    const Rng rng(seed, (p * n_refs + ref) * repeats + rep);
                    TokenSeq out;
                    std::int64_t nfe = 0;
                    if (cfg.best_of > 1) {
                        auto b = best_of_n(model, r.prompts[p], gen_len, r.schedule,
                                           static_cast<std::size_t>(cfg.best_of), scorer, r.sampler, rng);
                        out = std::move(b.best);
                        nfe = b.nfe.forward_passes;
                    } else {
                        SampleOptions opts;
                        opts.sampler = r.sampler;
                        if (r.steer) {
                            opts.steer = r.steer;
                            opts.reference = reference->ids;
                        }
                        auto s = sample(model, r.prompts[p], gen_len, r.schedule, opts, rng);
                        out = std::move(s.tokens);
                        nfe = s.nfe.forward_passes;
                    }
                    const auto cls = oracle.classify(out);
                    RunRecord rec;
                    rec.prompt_id = static_cast<int>(p);
                    rec.reference_id = reference ? static_cast<int>(ref) : -1;
                    rec.seed = seed;
                    rec.repeat = static_cast<int>(rep);
                    rec.label = std::string(attribute_name(cls.label));
                    rec.confidence = cls.confidence;
                    rec.overlap4 = reference ? ngram_overlap(out.response(), reference->ids).percent : 0.0;
                    if (cfg.pseudo_ppl) rec.pseudo_ppl = pseudo_perplexity(model, out);
                    rec.nfe = nfe;
                    rec.output = r.vocab.decode(out.response());
                    records.push_back(std::move(rec));
                }
            }
        }
    }
    return records;
}

fs::path default_out_dir(const std::string& command, const ordered_json& config) {
    const char* env = std::getenv(kOutRootEnv);
    const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a(config.dump())));
    return root / (command + "-" + buf);
}

RunOutput write_run(const fs::path& dir, const std::string& command, const ExperimentConfig& cfg,
                    const std::vector<RunRecord>& records) {
    fs::create_directories(dir);
    ExperimentConfig resolved = cfg;
    resolved.out = dir.string();
    write_text_file(dir / "manifest.json", manifest(command, to_json(resolved)).dump(2) + "\n");
    save_records_csv(dir / "records.csv", records);
    const RunAggregate agg = aggregate(records, cfg.target_label());
    write_text_file(dir / "summary.json", aggregate_to_json(agg));

    std::ostringstream samples;
    for (const auto& r : records) {
        samples << "seed=" << r.seed << " prompt=" << r.prompt_id << " ref=" << r.reference_id
                << " repeat=" << r.repeat << " [" << r.label << "] " << cfg.prompts.at(r.prompt_id) << " | "
                << r.output << '\n';
    }
    write_text_file(dir / "samples.txt", samples.str());

    // read back what was written; the report is only valid if it verifies
    const auto reread = load_records_csv(dir / "records.csv");
    const auto stored = aggregate_from_json(read_text_file(dir / "summary.json"));
    verify_aggregate(stored, reread);
    return RunOutput{dir, reread, stored};
}

TrainOutput cmd_train(const TrainJob& job_in) {
    TrainJob job = job_in;
    job.validate();
    const ToyGrammar grammar = load_grammar(job.grammar);
    const Vocabulary vocab = Vocabulary::from_grammar(grammar);
    job.model.vocab_size = static_cast<std::uint32_t>(vocab.size());
    job.model.mask_token_id = static_cast<std::uint32_t>(Vocabulary::kMask);
    job.model.validate();
    if (grammar.max_len + 1 > job.model.max_seq_len) {
        throw ConfigError("grammar documents up to " + std::to_string(grammar.max_len) +
                          " tokens plus the topic prompt do not fit max_seq_len " +
                          std::to_string(job.model.max_seq_len));
    }

    const fs::path dir = job.out.empty() ? default_out_dir("train", to_json(job)) : fs::path(job.out);
    fs::create_directories(dir);
    job.out = dir.string();

    Rng corpus_rng = Rng(job.seed).fork(100);
    const auto corpus = gen_corpus(grammar, vocab, static_cast<std::size_t>(job.corpus_size), corpus_rng);
    Rng train_rng(job.seed);
    TrainResult result;
    try {
        result = train_denoiser(job.model, vocab, corpus, job.train, train_rng);
    } catch (const TrainingError& e) {
        save_checkpoint(e.last_good(), dir / "model.last_good.ckpt");
        throw;
    }
    save_checkpoint(result.checkpoint, dir / "model.ckpt");
    std::ostringstream log;
    log << "step,loss\n";
    for (std::size_t s = 0; s < result.loss_log.size(); ++s) log << s << ',' << fmt6(result.loss_log[s]) << '\n';
    write_text_file(dir / "loss_log.csv", log.str());
    write_text_file(dir / "grammar.txt", grammar.serialize());  // the exact language the model saw
    write_text_file(dir / "manifest.json", manifest("train", to_json(job)).dump(2) + "\n");
    return TrainOutput{dir, std::move(result)};
}

RunOutput cmd_generate(const ExperimentConfig& cfg) {
    const Resolved r = resolve(cfg);
    const fs::path dir = cfg.out.empty() ? default_out_dir("generate", to_json(cfg)) : fs::path(cfg.out);
    return write_run(dir, "generate", cfg, run_generations(cfg, r));
}

ExperimentConfig apply_axis(ExperimentConfig cfg, const std::string& axis, const std::string& value) {
    try {
        if (axis == "alpha") {
            std::size_t used = 0;
            cfg.steer.alpha = std::stof(value, &used);
            if (used != value.size()) throw std::invalid_argument(value);
        } else if (axis == "layers") {
            cfg.steer.layers = value;
        } else if (axis == "steps") {
            cfg.steer.steps = value;
        } else if (axis == "kernel") {
            std::size_t used = 0;
            cfg.steer.kernel = std::stoi(value, &used);
            if (used != value.size()) throw std::invalid_argument(value);
        } else {
            throw ConfigError("sweep axis must be alpha, layers, steps or kernel, got '" + axis + "'");
        }
    } catch (const std::logic_error&) {
        throw ConfigError("bad " + axis + " value '" + value + "'");
    }
    return cfg;
}

std::vector<SweepRow> cmd_sweep(const ExperimentConfig& base, const std::string& axis,
                                const std::vector<std::string>& values) {
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    // fail fast: every point must resolve before anything runs
    std::vector<ExperimentConfig> points;
    for (const auto& v : values) points.push_back(apply_axis(base, axis, v));
    for (const auto& p : points) resolve(p);

    ordered_json sweep_cfg;
    sweep_cfg["axis"] = axis;
    sweep_cfg["values"] = values;
    sweep_cfg["base"] = to_json(base);
    const fs::path dir = base.out.empty() ? default_out_dir("sweep", sweep_cfg) : fs::path(base.out);
    fs::create_directories(dir);
    sweep_cfg["base"]["out"] = dir.string();
    write_text_file(dir / "manifest.json", manifest("sweep", sweep_cfg).dump(2) + "\n");

    std::vector<SweepRow> rows;
    std::ostringstream csv;
    csv << "axis,value,records,accuracy_mean,accuracy_std,overlap4_mean,pseudo_ppl_mean,nfe_mean\n";
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::string safe = values[i];
        for (char& c : safe)
            if (c == '/' || c == ',' || c == ' ') c = '_';
        ExperimentConfig cfg = points[i];
        cfg.out = (dir / (axis + "_" + safe)).string();
        RunOutput run = cmd_generate(cfg);
        const auto& a = run.aggregate;
        csv << axis << ',' << (values[i].find(',') == std::string::npos ? values[i] : '"' + values[i] + '"') << ','
            << a.records << ',' << fmt6(a.accuracy.mean) << ',' << fmt6(a.accuracy.std) << ','
            << fmt6(a.overlap_mean) << ',' << (a.ppl_mean ? fmt6(*a.ppl_mean) : "NA") << ',' << fmt6(a.nfe_mean)
            << '\n';
        rows.push_back(SweepRow{values[i], std::move(run)});
    }
    write_text_file(dir / "summary.csv", csv.str());
    return rows;
}

RunAggregate cmd_eval(const std::vector<fs::path>& reports) {
    if (reports.empty()) throw ConfigError("eval needs at least one report");
    std::vector<RunRecord> joint;
    std::string target;
    for (const auto& report : reports) {
        const fs::path dir = fs::is_directory(report) ? report : report.parent_path();
        const fs::path records_path = fs::is_directory(report) ? dir / "records.csv" : report;
        if (!fs::exists(records_path)) throw ConfigError("no records at " + records_path.string());
        const auto records = load_records_csv(records_path);
        const auto stored = aggregate_from_json(read_text_file(dir / "summary.json"));
        verify_aggregate(stored, records);
        if (target.empty()) target = stored.target;
        if (stored.target != target) throw ConfigError("reports disagree on the target attribute");
        joint.insert(joint.end(), records.begin(), records.end());
    }
    return aggregate(joint, target);
}

}  // namespace ilrr::tools
