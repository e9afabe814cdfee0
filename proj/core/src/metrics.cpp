#include "ilrr/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "ilrr/errors.hpp"
#include "json.hpp"

namespace ilrr {

OverlapResult ngram_overlap(std::span<const TokenId> gen, std::span<const TokenId> ref, std::size_t n) {
    if (n == 0) throw ContractError("ngram_overlap: n must be >= 1");
    if (gen.size() < n) return OverlapResult{0.0, true};
    std::set<std::vector<TokenId>> ref_grams;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ref_grams.emplace(ref.begin() + i, ref.begin() + i + n);
    const std::size_t total = gen.size() - n + 1;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < total; ++i) {
        if (ref_grams.contains(std::vector<TokenId>(gen.begin() + i, gen.begin() + i + n))) ++hits;
    }
    return OverlapResult{100.0 * static_cast<double>(hits) / static_cast<double>(total), false};
}

double pseudo_perplexity(const Denoiser& model, const TokenSeq& seq) {
    if (seq.response_len() == 0) throw ContractError("pseudo_perplexity needs a non-empty response");
    const auto mask = static_cast<TokenId>(model.config.mask_token_id);
    double nll = 0.0;
    for (std::size_t i = seq.prompt_len; i < seq.size(); ++i) {
        TokenSeq probe = seq;
        probe.ids[i] = mask;
        const Matrix logits = forward_with_taps(model, probe).logits;
        std::vector<float> row(logits.row(i).begin(), logits.row(i).end());
        softmax_inplace(row);
        nll -= std::log(std::max(static_cast<double>(row[static_cast<std::size_t>(seq.ids[i])]), 1e-30));
    }
    return std::exp(nll / static_cast<double>(seq.response_len()));
}

AccuracyStat attribute_accuracy(std::span<const RunRecord> records, const std::string& target) {
    if (records.empty()) throw ContractError("attribute_accuracy: no records");
    std::map<std::uint64_t, std::pair<std::size_t, std::size_t>> counts;  // seed -> (hits, total)
    for (const auto& r : records) {
        auto& c = counts[r.seed];
        c.first += r.label == target ? 1 : 0;
        c.second += 1;
    }
    AccuracyStat stat;
    for (const auto& [seed, c] : counts) {
        stat.per_seed[seed] = 100.0 * static_cast<double>(c.first) / static_cast<double>(c.second);
    }
    double sum = 0.0;
    for (const auto& [seed, acc] : stat.per_seed) sum += acc;
    stat.mean = sum / static_cast<double>(stat.per_seed.size());
    double var = 0.0;
    for (const auto& [seed, acc] : stat.per_seed) var += (acc - stat.mean) * (acc - stat.mean);
    stat.std = std::sqrt(var / static_cast<double>(stat.per_seed.size()));
    return stat;
}

RunAggregate aggregate(std::span<const RunRecord> records, const std::string& target) {
    RunAggregate agg;
    agg.target = target;
    agg.records = records.size();
    agg.accuracy = attribute_accuracy(records, target);
    double overlap = 0.0, nfe = 0.0, ppl = 0.0;
    std::size_t ppl_count = 0;
    for (const auto& r : records) {
        overlap += r.overlap4;
        nfe += static_cast<double>(r.nfe);
        if (r.pseudo_ppl) {
            ppl += *r.pseudo_ppl;
            ++ppl_count;
        }
    }
    const auto n = static_cast<double>(records.size());
    agg.overlap_mean = overlap / n;
    agg.nfe_mean = nfe / n;
    if (ppl_count > 0) agg.ppl_mean = ppl / static_cast<double>(ppl_count);
    return agg;
}

namespace {

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::vector<std::string> split_csv_line(const std::string& line, std::size_t fields) {
    // The trailing `output` column may contain anything but newlines; only the
    // first fields-1 commas are separators.
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t f = 0; f + 1 < fields; ++f) {
        const auto comma = line.find(',', start);
        if (comma == std::string::npos) throw FormatError("record row has too few columns: " + line);
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    out.push_back(line.substr(start));
    return out;
}

}  // namespace

void write_records_csv(std::ostream& out, std::span<const RunRecord> records) {
    out << kRecordCsvHeader << '\n';
    for (const auto& r : records) {
        out << r.prompt_id << ',' << r.reference_id << ',' << r.seed << ',' << r.repeat << ',' << r.label << ','
            << fmt6(r.confidence) << ',' << fmt6(r.overlap4) << ',' << (r.pseudo_ppl ? fmt6(*r.pseudo_ppl) : "NA")
            << ',' << r.nfe << ',' << r.output << '\n';
    }
}

std::vector<RunRecord> read_records_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kRecordCsvHeader) throw FormatError("record CSV header mismatch");
    std::vector<RunRecord> records;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line, 10);
        try {
            RunRecord r;
            r.prompt_id = std::stoi(f[0]);
            r.reference_id = std::stoi(f[1]);
            r.seed = std::stoull(f[2]);
            r.repeat = std::stoi(f[3]);
            r.label = f[4];
            r.confidence = std::stod(f[5]);
            r.overlap4 = std::stod(f[6]);
            if (f[7] != "NA") r.pseudo_ppl = std::stod(f[7]);
            r.nfe = std::stoll(f[8]);
            r.output = f[9];
            records.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw FormatError("malformed record row: " + line);
        }
    }
    return records;
}

void save_records_csv(const std::filesystem::path& path, std::span<const RunRecord> records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write_records_csv(out, records);
}

std::vector<RunRecord> load_records_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    return read_records_csv(in);
}

std::string aggregate_to_json(const RunAggregate& agg) {
    nlohmann::ordered_json j;
    j["target"] = agg.target;
    j["records"] = agg.records;
    j["accuracy_mean"] = agg.accuracy.mean;
    j["accuracy_std"] = agg.accuracy.std;
    nlohmann::ordered_json per_seed = nlohmann::ordered_json::object();
    for (const auto& [seed, acc] : agg.accuracy.per_seed) per_seed[std::to_string(seed)] = acc;
    j["accuracy_per_seed"] = per_seed;
    j["overlap4_mean"] = agg.overlap_mean;
    j["pseudo_ppl_mean"] = agg.ppl_mean ? nlohmann::ordered_json(*agg.ppl_mean) : nlohmann::ordered_json(nullptr);
    j["nfe_mean"] = agg.nfe_mean;
    return j.dump(2) + "\n";
}

RunAggregate aggregate_from_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        RunAggregate agg;
        agg.target = j.at("target").get<std::string>();
        agg.records = j.at("records").get<std::size_t>();
        agg.accuracy.mean = j.at("accuracy_mean").get<double>();
        agg.accuracy.std = j.at("accuracy_std").get<double>();
        for (const auto& [seed, acc] : j.at("accuracy_per_seed").items()) {
            agg.accuracy.per_seed[std::stoull(seed)] = acc.get<double>();
        }
        agg.overlap_mean = j.at("overlap4_mean").get<double>();
        if (!j.at("pseudo_ppl_mean").is_null()) agg.ppl_mean = j.at("pseudo_ppl_mean").get<double>();
        agg.nfe_mean = j.at("nfe_mean").get<double>();
        return agg;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed summary: ") + e.what());
    }
}

void verify_aggregate(const RunAggregate& stored, std::span<const RunRecord> records) {
    const RunAggregate fresh = aggregate(records, stored.target);
    auto close = [](double a, double b) { return std::fabs(a - b) <= 1e-6 * std::max(1.0, std::fabs(b)); };
    std::ostringstream why;
    if (stored.records != fresh.records) why << "record count " << stored.records << " vs " << fresh.records << "; ";
    if (!close(stored.accuracy.mean, fresh.accuracy.mean)) why << "accuracy mean; ";
    if (!close(stored.accuracy.std, fresh.accuracy.std)) why << "accuracy std; ";
    if (stored.accuracy.per_seed.size() != fresh.accuracy.per_seed.size()) {
        why << "seed groups; ";
    } else {
        for (const auto& [seed, acc] : fresh.accuracy.per_seed) {
            const auto it = stored.accuracy.per_seed.find(seed);
            if (it == stored.accuracy.per_seed.end() || !close(it->second, acc)) why << "seed " << seed << "; ";
        }
    }
    if (!close(stored.overlap_mean, fresh.overlap_mean)) why << "overlap mean; ";
    if (!close(stored.nfe_mean, fresh.nfe_mean)) why << "nfe mean; ";
    if (stored.ppl_mean.has_value() != fresh.ppl_mean.has_value() ||
        (stored.ppl_mean && !close(*stored.ppl_mean, *fresh.ppl_mean))) {
        why << "pseudo-ppl mean; ";
    }
    if (!why.str().empty()) throw IntegrityError("stored aggregate disagrees with records: " + why.str());
}

}  // namespace ilrr
