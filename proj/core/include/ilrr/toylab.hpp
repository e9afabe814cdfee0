#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ilrr/errors.hpp"
#include "ilrr/model.hpp"
#include "ilrr/numerics.hpp"
#include "ilrr/tokens.hpp"

namespace ilrr {

enum class Attribute { Pos, Neg, Neutral };

std::string_view attribute_name(Attribute a);  // "POS" / "NEG" / "NEUTRAL"
Attribute parse_attribute(std::string_view s);  // case-insensitive pos/neg/neutral

// Synthetic two-attribute language. A document is a topic word (the prompt)
// followed by clauses drawn from templates. Template items are literal words
// or slots: "{attr}" takes a word from the document's attribute lexicon with
// probability `purity` (a neutral word otherwise); "{name}" takes a word from
// the named filler class. Classes "name+" / "name-", when present, replace
// "name" in POS / NEG documents; the oracle never counts them, but they make
// polarity visible at most positions the way sentiment colours real text.
struct ToyGrammar {
    std::vector<std::string> positive;
    std::vector<std::string> negative;
    std::vector<std::string> neutral;
    std::vector<std::string> topics;
    std::map<std::string, std::vector<std::string>> fillers;
    std::vector<std::vector<std::string>> templates;
    double purity = 0.8;
    std::size_t min_len = 8;   // corpus response length range
    std::size_t max_len = 48;

    // Throws ConfigError when lexicons overlap, a slot names an unknown class,
    // a template has no attribute slot, or ranges are empty.
    void validate() const;

    static ToyGrammar default_grammar();

    // Line-oriented text: "key: w1 w2 ..." for positive/negative/neutral/topics,
    // "class <name>: ...", "template: ...", "purity: p", "lengths: lo hi".
    // '#' starts a comment.
    static ToyGrammar parse(std::string_view text);
    static ToyGrammar load(const std::filesystem::path& path);
    std::string serialize() const;
};

class Vocabulary {
  public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kMask = 1;

    // "<pad>", "<mask>", then every grammar word once in first-seen order.
    static Vocabulary from_grammar(const ToyGrammar& g);
    static Vocabulary from_words(std::vector<std::string> words);

    std::size_t size() const { return words_.size(); }
    const std::vector<std::string>& words() const { return words_; }
    TokenId id(std::string_view word) const;  // throws ConfigError for unknown words
    bool contains(std::string_view word) const;
    const std::string& word(TokenId id) const;

    std::vector<TokenId> encode(std::string_view text) const;
    std::string decode(std::span<const TokenId> ids) const;

  private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, TokenId> index_;
};

struct LabeledSeq {
    TokenSeq seq;
    Attribute label = Attribute::Neutral;
};

// One document of exactly `len` response tokens with at least one attribute
// word. Uses `purity` for the attribute slots.
LabeledSeq make_document(const ToyGrammar& g, const Vocabulary& vocab, Attribute label, std::size_t len, double purity,
                         Rng& rng);

// Labels alternate POS, NEG, ...; lengths uniform in [min_len, max_len].
std::vector<LabeledSeq> gen_corpus(const ToyGrammar& g, const Vocabulary& vocab, std::size_t n, Rng& rng);

// n distinct purity-1 responses of length `len` (prompt_len = 0).
std::vector<TokenSeq> make_references(const ToyGrammar& g, const Vocabulary& vocab, Attribute attribute,
                                      std::size_t n, std::size_t len, Rng& rng);

// Corpus file: one document per line, "POS\t" or "NEG\t" then the words.
void write_corpus(const std::vector<LabeledSeq>& corpus, const Vocabulary& vocab, const std::filesystem::path& path);
std::vector<LabeledSeq> read_corpus(const Vocabulary& vocab, const std::filesystem::path& path,
                                    std::size_t prompt_len = 1);

struct OracleResult {
    Attribute label = Attribute::Neutral;
    double confidence = 0.0;
    int pos_hits = 0;
    int neg_hits = 0;
};

// Majority vote of attribute-lexicon hits over the response tokens;
// confidence = |pos - neg| / max(1, pos + neg).
class AttributeOracle {
  public:
    AttributeOracle(const ToyGrammar& g, const Vocabulary& vocab);
    OracleResult classify(const TokenSeq& seq) const;

  private:
    std::vector<signed char> polarity_;  // +1 POS, -1 NEG, 0 otherwise, indexed by token id
};

OracleResult oracle_classify(const TokenSeq& seq, const ToyGrammar& g, const Vocabulary& vocab);

struct TrainConfig {
    int steps = 3000;
    int batch_size = 16;
    float learning_rate = 3e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float adam_eps = 1e-8f;
    float grad_clip = 1.0f;  // global L2 norm; <= 0 disables
    int corruption_levels = 1000;  // t ~ Uniform{1..levels}, mask prob t/levels
    // Learning rate falls linearly to zero over the run. Without it the
    // fully-masked polarity marginal is left wherever the last noisy batches
    // pushed it, and the confidence-ordered sampler amplifies that lean.
    bool linear_decay = true;
    // Batch slots alternate between POS and NEG documents.
    bool balanced_batches = true;

    void validate() const;
};

struct TrainResult {
    Checkpoint checkpoint;
    // Entry s is the batch loss at the parameters before update s; the final
    // entry is measured after the last update. steps + 1 entries.
    std::vector<double> loss_log;
};

class TrainingError : public Error {
  public:
    TrainingError(const std::string& what, Checkpoint last_good)
        : Error(what), last_good_(std::move(last_good)) {}
    const Checkpoint& last_good() const { return last_good_; }

  private:
    Checkpoint last_good_;
};

// Masked-token cross-entropy over positions where targets[i] >= 0.
// Returns the summed (unscaled) loss; when grad is non-null, adds
// grad_scale * d(loss)/d(params) into it.
double masked_loss_and_grad(const Denoiser& model, std::span<const TokenId> inputs, std::span<const TokenId> targets,
                            float grad_scale, DenoiserWeights* grad);

TrainResult train_denoiser(const DenoiserConfig& cfg, const Vocabulary& vocab, const std::vector<LabeledSeq>& corpus,
                           const TrainConfig& train_cfg, Rng& rng,
                           const std::function<void(int, double)>& on_step = {});

}  // namespace ilrr
