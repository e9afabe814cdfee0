#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ilrr/model.hpp"
#include "ilrr/tokens.hpp"

namespace ilrr {

struct OverlapResult {
    double percent = 0.0;
    bool too_short = false;  // generation had fewer than n tokens; percent is 0
};

// Share of the generation's n-gram instances that occur anywhere in the
// reference as a contiguous n-gram, in percent. Operates on response tokens.
OverlapResult ngram_overlap(std::span<const TokenId> gen, std::span<const TokenId> ref, std::size_t n = 4);

// exp of the mean leave-one-out masked negative log-likelihood of each
// response token under the denoiser.
double pseudo_perplexity(const Denoiser& model, const TokenSeq& seq);

struct RunRecord {
    int prompt_id = 0;
    int reference_id = 0;
    std::uint64_t seed = 0;
    int repeat = 0;
    std::string label;  // oracle label
    double confidence = 0.0;
    double overlap4 = 0.0;
    std::optional<double> pseudo_ppl;
    std::int64_t nfe = 0;
    std::string output;  // response text, space separated

    bool operator==(const RunRecord&) const = default;
};

struct AccuracyStat {
    double mean = 0.0;
    double std = 0.0;                           // population std across seeds
    std::map<std::uint64_t, double> per_seed;   // percent

    bool operator==(const AccuracyStat&) const = default;
};

// Per-seed percentage of records labeled `target`, then mean and population
// std across seeds. Throws ContractError on an empty record set.
AccuracyStat attribute_accuracy(std::span<const RunRecord> records, const std::string& target);

struct RunAggregate {
    std::string target;
    std::size_t records = 0;
    AccuracyStat accuracy;
    double overlap_mean = 0.0;
    std::optional<double> ppl_mean;
    double nfe_mean = 0.0;

    bool operator==(const RunAggregate&) const = default;
};

RunAggregate aggregate(std::span<const RunRecord> records, const std::string& target);

// Fixed column order:
// prompt_id,reference_id,seed,repeat,label,confidence,overlap4,pseudo_ppl,nfe,output
inline constexpr const char* kRecordCsvHeader =
    "prompt_id,reference_id,seed,repeat,label,confidence,overlap4,pseudo_ppl,nfe,output";

void write_records_csv(std::ostream& out, std::span<const RunRecord> records);
std::vector<RunRecord> read_records_csv(std::istream& in);
void save_records_csv(const std::filesystem::path& path, std::span<const RunRecord> records);
std::vector<RunRecord> load_records_csv(const std::filesystem::path& path);

// Aggregate summary block as JSON text.
std::string aggregate_to_json(const RunAggregate& agg);
RunAggregate aggregate_from_json(const std::string& text);

// Throws IntegrityError when `stored` disagrees with a recomputation from
// `records` (counts exact, real values within 1e-6).
void verify_aggregate(const RunAggregate& stored, std::span<const RunRecord> records);

}  // namespace ilrr
