#include "ilrr/toylab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace ilrr {

namespace {

constexpr std::string_view kAttrSlot = "{attr}";

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::istringstream is{std::string(text)};
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

std::string trim(std::string_view s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return std::string(s.substr(a, b - a));
}

bool is_slot(const std::string& item) { return item.size() > 2 && item.front() == '{' && item.back() == '}'; }

std::string slot_name(const std::string& item) { return item.substr(1, item.size() - 2); }

const std::vector<std::string>& lexicon(const ToyGrammar& g, Attribute a) {
    return a == Attribute::Pos ? g.positive : g.negative;
}

// "{name}" in a POS document prefers class "name+", in a NEG one "name-".
const std::vector<std::string>* filler_class(const ToyGrammar& g, const std::string& name, Attribute a) {
    if (a != Attribute::Neutral) {
        const auto tinted = g.fillers.find(name + (a == Attribute::Pos ? "+" : "-"));
        if (tinted != g.fillers.end()) return &tinted->second;
    }
    const auto plain = g.fillers.find(name);
    return plain == g.fillers.end() ? nullptr : &plain->second;
}

}  // namespace

std::string_view attribute_name(Attribute a) {
    switch (a) {
        case Attribute::Pos:
            return "POS";
        case Attribute::Neg:
            return "NEG";
        case Attribute::Neutral:
            return "NEUTRAL";
    }
    return "NEUTRAL";
}

Attribute parse_attribute(std::string_view s) {
    std::string lower;
    for (char c : s) lower.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    if (lower == "pos") return Attribute::Pos;
    if (lower == "neg") return Attribute::Neg;
    if (lower == "neutral") return Attribute::Neutral;
    throw ConfigError("unknown attribute '" + std::string(s) + "' (expected pos or neg)");
}

void ToyGrammar::validate() const {
    if (positive.empty() || negative.empty()) throw ConfigError("grammar needs positive and negative lexicons");
    if (topics.empty()) throw ConfigError("grammar needs at least one topic");
    if (templates.empty()) throw ConfigError("grammar needs at least one template");
    if (!(purity >= 0.0 && purity <= 1.0)) throw ConfigError("grammar purity must lie in [0, 1]");
    if (min_len < 1 || min_len > max_len) throw ConfigError("grammar length range is empty");
    if (purity < 1.0 && neutral.empty()) throw ConfigError("purity < 1 needs a neutral lexicon");

    std::set<std::string> pos(positive.begin(), positive.end());
    std::set<std::string> neg(negative.begin(), negative.end());
    std::set<std::string> others(neutral.begin(), neutral.end());
    others.insert(topics.begin(), topics.end());
    for (const auto& [name, words] : fillers) others.insert(words.begin(), words.end());
    for (const auto& t : templates) {
        bool has_attr = false;
        for (const auto& item : t) {
            if (item == kAttrSlot) {
                has_attr = true;
            } else if (is_slot(item)) {
                for (Attribute a : {Attribute::Pos, Attribute::Neg}) {
                    const auto* cls = filler_class(*this, slot_name(item), a);
                    if (cls == nullptr || cls->empty()) {
                        throw ConfigError("template slot " + item + " has no filler class for " +
                                          std::string(attribute_name(a)) + " documents");
                    }
                }
            } else {
                others.insert(item);
            }
        }
        if (!has_attr) throw ConfigError("every template needs an {attr} slot");
    }
    for (const auto& w : pos) {
        if (neg.contains(w) || others.contains(w)) throw ConfigError("word '" + w + "' is in more than one lexicon");
    }
    for (const auto& w : neg) {
        if (others.contains(w)) throw ConfigError("word '" + w + "' is in more than one lexicon");
    }
}

ToyGrammar ToyGrammar::default_grammar() {
    ToyGrammar g;
    g.positive = {"good", "great", "lovely", "superb", "wonderful", "excellent", "pleasant", "brilliant", "charming",
                  "delightful"};
    g.negative = {"bad", "awful", "terrible", "poor", "horrible", "dreadful", "boring", "nasty", "dull", "grim"};
    g.neutral = {"plain", "usual", "typical", "average", "ordinary", "modest"};
    g.topics = {"movie", "food", "hotel", "book", "game", "trip"};
    g.fillers["noun"] = {"plot", "cast", "staff", "room", "meal", "price", "view", "ending", "music", "story"};
    // Tinted classes: "+" words appear only in POS documents, "-" words only
    // in NEG ones, so polarity shows at most positions and survives pooling.
    g.fillers["verb+"] = {"loved", "enjoyed", "liked", "adored"};
    g.fillers["verb-"] = {"hated", "disliked", "loathed", "endured"};
    g.fillers["adv+"] = {"truly", "really"};
    g.fillers["adv-"] = {"rather", "fairly"};
    g.fillers["mood+"] = {"wow", "yay"};
    g.fillers["mood-"] = {"ugh", "sigh"};
    g.fillers["end+"] = {"!"};
    g.fillers["end-"] = {"..."};
    g.fillers["det+"] = {"the"};
    g.fillers["det-"] = {"that"};
    g.fillers["cop+"] = {"was", "is"};
    g.fillers["cop-"] = {"seemed", "looked"};
    g.fillers["subj+"] = {"i", "we"};
    g.fillers["subj-"] = {"they", "you"};
    // Every clause is five tokens with the attribute word fourth, so attribute
    // slots recur at a fixed period and a small model picks up document-level
    // polarity within a few thousand steps. A few untinted words ("it", ",",
    // "what a", "felt") are left so the sampler has confident, polarity-free
    // tokens to commit first.
    g.templates = {
        {"{det}", "{noun}", "{cop}", "{attr}", "{end}"},
        {"{subj}", "{verb}", "it", "{attr}", "{end}"},
        {"{mood}", "{det}", "{noun}", "{attr}", ","},
        {"what", "a", "{adv}", "{attr}", "{noun}"},
        {"{det}", "{noun}", "felt", "{attr}", "{end}"},
    };
    g.purity = 0.9;
    g.min_len = 8;
    g.max_len = 32;
    return g;
}

ToyGrammar ToyGrammar::parse(std::string_view text) {
    ToyGrammar g;
    std::istringstream is{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto colon = line.find(':');
        if (colon == std::string::npos) {
            throw ConfigError("grammar line " + std::to_string(lineno) + ": expected 'key: values'");
        }
        const std::string key = trim(std::string_view(line).substr(0, colon));
        const auto words = split_words(std::string_view(line).substr(colon + 1));
        if (key == "positive") {
            g.positive = words;
        } else if (key == "negative") {
            g.negative = words;
        } else if (key == "neutral") {
            g.neutral = words;
        } else if (key == "topics") {
            g.topics = words;
        } else if (key.starts_with("class ")) {
            g.fillers[trim(std::string_view(key).substr(6))] = words;
        } else if (key == "template") {
            g.templates.push_back(words);
        } else if (key == "purity" && words.size() == 1) {
            g.purity = std::stod(words[0]);
        } else if (key == "lengths" && words.size() == 2) {
            g.min_len = std::stoul(words[0]);
            g.max_len = std::stoul(words[1]);
        } else {
            throw ConfigError("grammar line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        }
    }
    g.validate();
    return g;
}

ToyGrammar ToyGrammar::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open grammar file: " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string ToyGrammar::serialize() const {
    std::ostringstream os;
    auto list = [&](const std::string& key, const std::vector<std::string>& words) {
        os << key << ":";
        for (const auto& w : words) os << ' ' << w;
        os << '\n';
    };
    list("positive", positive);
    list("negative", negative);
    list("neutral", neutral);
    list("topics", topics);
    for (const auto& [name, words] : fillers) list("class " + name, words);
    for (const auto& t : templates) list("template", t);
    os << "purity: " << purity << '\n';
    os << "lengths: " << min_len << ' ' << max_len << '\n';
    return os.str();
}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
    Vocabulary v;
    v.words_ = std::move(words);
    for (std::size_t i = 0; i < v.words_.size(); ++i) {
        if (!v.index_.emplace(v.words_[i], static_cast<TokenId>(i)).second) {
            throw ConfigError("duplicate vocabulary word '" + v.words_[i] + "'");
        }
    }
    if (v.words_.size() < 2 || v.words_[kPad] != "<pad>" || v.words_[kMask] != "<mask>") {
        throw ConfigError("vocabulary must start with <pad> and <mask>");
    }
    return v;
}

Vocabulary Vocabulary::from_grammar(const ToyGrammar& g) {
    std::vector<std::string> words = {"<pad>", "<mask>"};
    std::set<std::string> seen(words.begin(), words.end());
    auto add = [&](const std::string& w) {
        if (seen.insert(w).second) words.push_back(w);
    };
    for (const auto& w : g.topics) add(w);
    for (const auto& w : g.positive) add(w);
    for (const auto& w : g.negative) add(w);
    for (const auto& w : g.neutral) add(w);
    for (const auto& [name, ws] : g.fillers) {
        for (const auto& w : ws) add(w);
    }
    for (const auto& t : g.templates) {
        for (const auto& item : t) {
            if (!is_slot(item)) add(item);
        }
    }
    return from_words(std::move(words));
}

TokenId Vocabulary::id(std::string_view word) const {
    const auto it = index_.find(std::string(word));
    if (it == index_.end()) throw ConfigError("word '" + std::string(word) + "' not in vocabulary");
    return it->second;
}

bool Vocabulary::contains(std::string_view word) const { return index_.contains(std::string(word)); }

const std::string& Vocabulary::word(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) throw ContractError("token id out of range");
    return words_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& w : split_words(text)) ids.push_back(id(w));
    return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out.push_back(' ');
        out += word(ids[i]);
    }
    return out;
}

LabeledSeq make_document(const ToyGrammar& g, const Vocabulary& vocab, Attribute label, std::size_t len, double purity,
                         Rng& rng) {
    if (label == Attribute::Neutral) throw ContractError("documents carry POS or NEG labels");
    if (len < 1) throw ContractError("document length must be >= 1");
    const auto& attr_words = lexicon(g, label);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        std::vector<TokenId> response;
        int hits = 0;
        while (response.size() < len) {
            const auto& tmpl = g.templates[rng.below(g.templates.size())];
            for (const auto& item : tmpl) {
                std::string word;
                if (item == kAttrSlot) {
                    const bool attribute = rng.uniform() < purity;
                    word = attribute ? attr_words[rng.below(attr_words.size())] : g.neutral[rng.below(g.neutral.size())];
                    if (attribute && response.size() < len) ++hits;
                } else if (is_slot(item)) {
                    const auto& cls = *filler_class(g, slot_name(item), label);
                    word = cls[rng.below(cls.size())];
                } else {
                    word = item;
                }
                if (response.size() < len) response.push_back(vocab.id(word));
            }
        }
        if (hits == 0) continue;
        const std::vector<TokenId> prompt = {vocab.id(g.topics[rng.below(g.topics.size())])};
        return LabeledSeq{TokenSeq::join(prompt, response), label};
    }
    throw ContractError("could not draw a document with an attribute word; raise purity or length");
}

std::vector<LabeledSeq> gen_corpus(const ToyGrammar& g, const Vocabulary& vocab, std::size_t n, Rng& rng) {
    g.validate();
    std::vector<LabeledSeq> corpus;
    corpus.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const Attribute label = i % 2 == 0 ? Attribute::Pos : Attribute::Neg;
        const std::size_t len = g.min_len + rng.below(g.max_len - g.min_len + 1);
        corpus.push_back(make_document(g, vocab, label, len, g.purity, rng));
    }
    return corpus;
}

std::vector<TokenSeq> make_references(const ToyGrammar& g, const Vocabulary& vocab, Attribute attribute,
                                      std::size_t n, std::size_t len, Rng& rng) {
    if (attribute == Attribute::Neutral) throw ContractError("references need a POS or NEG attribute");
    std::vector<TokenSeq> refs;
    std::set<std::vector<TokenId>> seen;
    for (int attempt = 0; refs.size() < n; ++attempt) {
        if (attempt > 1000 * static_cast<int>(n + 1)) throw ContractError("could not draw enough distinct references");
        LabeledSeq doc = make_document(g, vocab, attribute, len, 1.0, rng);
        std::vector<TokenId> response(doc.seq.response().begin(), doc.seq.response().end());
        if (!seen.insert(response).second) continue;
        refs.push_back(TokenSeq{std::move(response), 0});
    }
    return refs;
}

void write_corpus(const std::vector<LabeledSeq>& corpus, const Vocabulary& vocab, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write corpus file: " + path.string());
    for (const auto& doc : corpus) out << attribute_name(doc.label) << '\t' << vocab.decode(doc.seq.ids) << '\n';
}

std::vector<LabeledSeq> read_corpus(const Vocabulary& vocab, const std::filesystem::path& path,
                                    std::size_t prompt_len) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open corpus file: " + path.string());
    std::vector<LabeledSeq> corpus;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw FormatError("corpus line without a label prefix");
        const std::string label = line.substr(0, tab);
        if (label != "POS" && label != "NEG") throw FormatError("corpus label must be POS or NEG, got " + label);
        LabeledSeq doc;
        doc.label = label == "POS" ? Attribute::Pos : Attribute::Neg;
        doc.seq.ids = vocab.encode(std::string_view(line).substr(tab + 1));
        doc.seq.prompt_len = std::min(prompt_len, doc.seq.ids.size());
        corpus.push_back(std::move(doc));
    }
    return corpus;
}

AttributeOracle::AttributeOracle(const ToyGrammar& g, const Vocabulary& vocab) : polarity_(vocab.size(), 0) {
    for (const auto& w : g.positive) {
        if (vocab.contains(w)) polarity_[static_cast<std::size_t>(vocab.id(w))] = 1;
    }
    for (const auto& w : g.negative) {
        if (vocab.contains(w)) polarity_[static_cast<std::size_t>(vocab.id(w))] = -1;
    }
}

OracleResult AttributeOracle::classify(const TokenSeq& seq) const {
    OracleResult r;
    for (TokenId id : seq.response()) {
        if (id < 0 || static_cast<std::size_t>(id) >= polarity_.size()) continue;
        const signed char p = polarity_[static_cast<std::size_t>(id)];
        if (p > 0) ++r.pos_hits;
        if (p < 0) ++r.neg_hits;
    }
    const int total = r.pos_hits + r.neg_hits;
    r.confidence = static_cast<double>(std::abs(r.pos_hits - r.neg_hits)) / static_cast<double>(std::max(1, total));
    r.label = r.pos_hits > r.neg_hits ? Attribute::Pos : r.neg_hits > r.pos_hits ? Attribute::Neg : Attribute::Neutral;
    return r;
}

OracleResult oracle_classify(const TokenSeq& seq, const ToyGrammar& g, const Vocabulary& vocab) {
    return AttributeOracle(g, vocab).classify(seq);
}

}  // namespace ilrr
