#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "ilrr/errors.hpp"
#include "ilrr_tools/experiment.hpp"

namespace ilrr::tools {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
            throw ConfigError("unknown key '" + key + "' in " + where);
        }
    }
}

template <class T>
void take(const json& j, const char* key, T& field) {
    if (!j.contains(key)) return;
    try {
        field = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

int parse_int(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::logic_error&) {
        throw ConfigError("bad " + what + ": '" + s + "'");
    }
}

// "3", "3-5", "1-2,7"
std::set<int> parse_ranges(const std::string& spec, int lo, int hi, const std::string& what) {
    std::set<int> out;
    std::stringstream ss(spec);
    std::string part;
    while (std::getline(ss, part, ',')) {
        if (part.empty()) continue;
        const auto dash = part.find('-');
        const int a = parse_int(part.substr(0, dash), what);
        const int b = dash == std::string::npos ? a : parse_int(part.substr(dash + 1), what);
        if (a > b || a < lo || b > hi) {
            throw ConfigError(what + " '" + part + "' outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
        }
        for (int v = a; v <= b; ++v) out.insert(v);
    }
    return out;
}

}  // namespace

std::vector<int> parse_layer_set(const std::string& spec, int num_layers) {
    const std::string s = lower(spec);
    const int third = num_layers / 3;
    auto range = [](int a, int b) {
        std::vector<int> v;
        for (int i = a; i <= b; ++i) v.push_back(i);
        return v;
    };
    if (s == "all") return range(1, num_layers);
    if (s == "none" || s.empty()) return {};
    if (s == "early") return range(1, third);
    if (s == "mid") return range(third + 1, num_layers - third);
    if (s == "late") return range(num_layers - third + 1, num_layers);
    const auto set = parse_ranges(s, 1, num_layers, "layer");
    return {set.begin(), set.end()};
}

std::set<int> parse_step_set(const std::string& spec, int total_steps) {
    const std::string s = lower(spec);
    const int third = total_steps / 3;
    auto range = [](int a, int b) {
        std::set<int> v;
        for (int i = a; i <= b; ++i) v.insert(i);
        return v;
    };
    // Reverse sampling runs t = T down to 1, so "early" means large t.
    if (s == "full" || s == "all") return range(1, total_steps);
    if (s == "none" || s.empty()) return {};
    if (s == "early") return range(total_steps - third + 1, total_steps);
    if (s == "mid") return range(third + 1, total_steps - third);
    if (s == "late") return range(1, third);
    if (s == "first-half") return range(total_steps - total_steps / 2 + 1, total_steps);
    if (s == "second-half") return range(1, total_steps - total_steps / 2);
    return parse_ranges(s, 1, total_steps, "step");
}

void ExperimentConfig::validate() const {
    if (prompts.empty()) throw ConfigError("at least one prompt is required");
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    if (repeats < 1) throw ConfigError("repeats must be >= 1");
    if (best_of < 1) throw ConfigError("best_of must be >= 1");
    if (best_of > 1 && steer.enabled) throw ConfigError("best-of-n runs are unsteered; disable steering");
    if (schedule.steps < 1 || schedule.gen_len < 1) throw ConfigError("schedule needs T >= 1 and gen_len >= 1");
    if (schedule.kind != "linear" && schedule.kind != "cosine") throw ConfigError("schedule kind: linear | cosine");
    if (reference.count < 1 || reference.length < 1) throw ConfigError("reference count and length must be >= 1");
    const auto attr = lower(reference.attribute);
    if (!attr.empty() && attr != "pos" && attr != "neg") throw ConfigError("reference attribute must be pos or neg");
    if (steer.enabled && attr.empty()) throw ConfigError("steering enabled without a reference (--reference-attr)");
    if (steer.mode != "standard" && steer.mode != "spatial") throw ConfigError("mode must be standard or spatial");
    if (steer.pool_norm != "count" && steer.pool_norm != "kernel") throw ConfigError("pool_norm: count | kernel");
    if (steer.span != "response" && steer.span != "full") throw ConfigError("span: response | full");
    if (sampler.kind != "greedy" && sampler.kind != "temperature" && sampler.kind != "topk") {
        throw ConfigError("sampler kind: greedy | temperature | topk");
    }
    const auto t = lower(target);
    if (!t.empty() && t != "pos" && t != "neg") throw ConfigError("target must be pos or neg");
}

std::string ExperimentConfig::target_label() const {
    std::string t = !target.empty() ? target : (!reference.attribute.empty() ? reference.attribute : "pos");
    return std::string(attribute_name(parse_attribute(t)));
}

ordered_json to_json(const ExperimentConfig& c) {
    ordered_json j;
    j["checkpoint"] = c.checkpoint;
    j["grammar"] = c.grammar;
    j["prompts"] = c.prompts;
    j["reference"] = {{"attribute", c.reference.attribute},
                      {"count", c.reference.count},
                      {"length", c.reference.length},
                      {"seed", c.reference.seed}};
    ordered_json la = ordered_json::object();
    for (const auto& [layer, a] : c.steer.layer_alpha) la[std::to_string(layer)] = a;
    j["steer"] = {{"enabled", c.steer.enabled},
                  {"alpha", c.steer.alpha},
                  {"layers", c.steer.layers},
                  {"layer_alpha", la},
                  {"steps", c.steer.steps},
                  {"kernel", c.steer.kernel},
                  {"mode", c.steer.mode},
                  {"wave_freq", c.steer.wave_freq ? ordered_json(*c.steer.wave_freq) : ordered_json(nullptr)},
                  {"pool_norm", c.steer.pool_norm},
                  {"span", c.steer.span}};
    j["schedule"] = {{"T", c.schedule.steps}, {"gen_len", c.schedule.gen_len}, {"kind", c.schedule.kind}};
    j["sampler"] = {{"kind", c.sampler.kind}, {"temperature", c.sampler.temperature}, {"top_k", c.sampler.top_k}};
    j["seeds"] = c.seeds;
    j["repeats"] = c.repeats;
    j["best_of"] = c.best_of;
    j["target"] = c.target;
    j["pseudo_ppl"] = c.pseudo_ppl;
    j["out"] = c.out;
    return j;
}

ExperimentConfig experiment_from_json(const json& in) {
    const json& j = in.contains("config") && in.contains("command") ? in.at("config") : in;
    check_keys(j,
               {"checkpoint", "grammar", "prompts", "reference", "steer", "schedule", "sampler", "seeds", "repeats",
                "best_of", "target", "pseudo_ppl", "out"},
               "experiment config");
    ExperimentConfig c;
    take(j, "checkpoint", c.checkpoint);
    take(j, "grammar", c.grammar);
    take(j, "prompts", c.prompts);
    if (j.contains("reference")) {
        const auto& r = j.at("reference");
        check_keys(r, {"attribute", "count", "length", "seed"}, "reference");
        take(r, "attribute", c.reference.attribute);
        take(r, "count", c.reference.count);
        take(r, "length", c.reference.length);
        take(r, "seed", c.reference.seed);
    }
    if (j.contains("steer")) {
        const auto& s = j.at("steer");
        check_keys(s,
                   {"enabled", "alpha", "layers", "layer_alpha", "steps", "kernel", "mode", "wave_freq", "pool_norm",
                    "span"},
                   "steer");
        take(s, "enabled", c.steer.enabled);
        take(s, "alpha", c.steer.alpha);
        take(s, "layers", c.steer.layers);
        if (s.contains("layer_alpha")) {
            std::map<std::string, float> raw;
            take(s, "layer_alpha", raw);
            for (const auto& [k, a] : raw) c.steer.layer_alpha[parse_int(k, "layer")] = a;
        }
        take(s, "steps", c.steer.steps);
        take(s, "kernel", c.steer.kernel);
        take(s, "mode", c.steer.mode);
        if (s.contains("wave_freq")) {
            if (s.at("wave_freq").is_null()) {
                c.steer.wave_freq.reset();
            } else {
                double f = 0;
                take(s, "wave_freq", f);
                c.steer.wave_freq = f;
            }
        }
        take(s, "pool_norm", c.steer.pool_norm);
        take(s, "span", c.steer.span);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        check_keys(s, {"T", "gen_len", "kind"}, "schedule");
        take(s, "T", c.schedule.steps);
        take(s, "gen_len", c.schedule.gen_len);
        take(s, "kind", c.schedule.kind);
    }
    if (j.contains("sampler")) {
        const auto& s = j.at("sampler");
        check_keys(s, {"kind", "temperature", "top_k"}, "sampler");
        take(s, "kind", c.sampler.kind);
        take(s, "temperature", c.sampler.temperature);
        take(s, "top_k", c.sampler.top_k);
    }
    take(j, "seeds", c.seeds);
    take(j, "repeats", c.repeats);
    take(j, "best_of", c.best_of);
    take(j, "target", c.target);
    take(j, "pseudo_ppl", c.pseudo_ppl);
    take(j, "out", c.out);
    return c;
}

namespace {

json parse_json_file(const std::filesystem::path& path) {
    try {
        return json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse " + path.string() + ": " + e.what());
    }
}

}  // namespace

ExperimentConfig load_experiment(const std::filesystem::path& path) { return experiment_from_json(parse_json_file(path)); }

void TrainJob::validate() const {
    if (corpus_size < 1) throw ConfigError("corpus_size must be >= 1");
    train.validate();
}

ordered_json to_json(const TrainJob& t) {
    ordered_json j;
    j["grammar"] = t.grammar;
    j["corpus_size"] = t.corpus_size;
    j["seed"] = t.seed;
    j["model"] = {{"hidden_dim", t.model.hidden_dim}, {"num_layers", t.model.num_layers},
                  {"num_heads", t.model.num_heads},   {"max_seq_len", t.model.max_seq_len},
                  {"mlp_dim", t.model.mlp_dim}};
    j["train"] = {{"steps", t.train.steps},
                  {"batch_size", t.train.batch_size},
                  {"learning_rate", t.train.learning_rate},
                  {"beta1", t.train.beta1},
                  {"beta2", t.train.beta2},
                  {"adam_eps", t.train.adam_eps},
                  {"grad_clip", t.train.grad_clip},
                  {"corruption_levels", t.train.corruption_levels},
                  {"linear_decay", t.train.linear_decay},
                  {"balanced_batches", t.train.balanced_batches}};
    j["out"] = t.out;
    return j;
}

TrainJob train_job_from_json(const json& in) {
    const json& j = in.contains("config") && in.contains("command") ? in.at("config") : in;
    check_keys(j, {"grammar", "corpus_size", "seed", "model", "train", "out"}, "train config");
    TrainJob t;
    take(j, "grammar", t.grammar);
    take(j, "corpus_size", t.corpus_size);
    take(j, "seed", t.seed);
    if (j.contains("model")) {
        const auto& m = j.at("model");
        check_keys(m, {"hidden_dim", "num_layers", "num_heads", "max_seq_len", "mlp_dim"}, "model");
        take(m, "hidden_dim", t.model.hidden_dim);
        take(m, "num_layers", t.model.num_layers);
        take(m, "num_heads", t.model.num_heads);
        take(m, "max_seq_len", t.model.max_seq_len);
        take(m, "mlp_dim", t.model.mlp_dim);
    }
    if (j.contains("train")) {
        const auto& s = j.at("train");
        check_keys(s,
                   {"steps", "batch_size", "learning_rate", "beta1", "beta2", "adam_eps", "grad_clip",
                    "corruption_levels", "linear_decay", "balanced_batches"},
                   "train");
        take(s, "steps", t.train.steps);
        take(s, "batch_size", t.train.batch_size);
        take(s, "learning_rate", t.train.learning_rate);
        take(s, "beta1", t.train.beta1);
        take(s, "beta2", t.train.beta2);
        take(s, "adam_eps", t.train.adam_eps);
        take(s, "grad_clip", t.train.grad_clip);
        take(s, "corruption_levels", t.train.corruption_levels);
        take(s, "linear_decay", t.train.linear_decay);
        take(s, "balanced_batches", t.train.balanced_batches);
    }
    take(j, "out", t.out);
    return t;
}

TrainJob load_train_job(const std::filesystem::path& path) { return train_job_from_json(parse_json_file(path)); }

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << text;
    if (!out) throw ConfigError("write failed: " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace ilrr::tools
