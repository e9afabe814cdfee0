#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ilrr/errors.hpp"
#include "ilrr/model.hpp"

namespace ilrr {

namespace {

class Writer {
  public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void f32s(std::span<const float> v) {
        for (float f : v) u32(std::bit_cast<std::uint32_t>(f));
    }
    std::vector<std::uint8_t> take() { return std::move(out_); }

  private:
    std::vector<std::uint8_t> out_;
};

class Reader {
  public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw FormatError("checkpoint truncated");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::string str() {
        const std::uint32_t n = u32();
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    void f32s(std::span<float> out) {
        need(out.size() * 4);
        for (float& f : out) f = std::bit_cast<float>(u32());
    }
    void magic(std::span<const char> expect) {
        need(expect.size());
        if (std::memcmp(in_.data() + pos_, expect.data(), expect.size()) != 0) {
            throw FormatError("checkpoint magic mismatch");
        }
        pos_ += expect.size();
    }
    bool done() const { return pos_ == in_.size(); }

  private:
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    const auto& c = ckpt.model.config;
    Writer w;
    w.bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
    w.u32(kCheckpointVersion);
    for (std::uint32_t v : {c.vocab_size, c.hidden_dim, c.num_layers, c.num_heads, c.max_seq_len, c.mask_token_id,
                            c.mlp_dim}) {
        w.u32(v);
    }
    w.u32(static_cast<std::uint32_t>(ckpt.vocabulary.size()));
    for (const auto& word : ckpt.vocabulary) w.str(word);

    std::uint32_t sections = 0;
    ckpt.model.weights.for_each_section([&](const std::string&, const Matrix&) { ++sections; });
    w.u32(sections);
    ckpt.model.weights.for_each_section([&](const std::string& name, const Matrix& m) {
        w.str(name);
        w.u64(m.size());
        w.f32s(m.values());
    });
    return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    r.magic(kCheckpointMagic);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));

    Checkpoint ckpt;
    auto& c = ckpt.model.config;
    c.vocab_size = r.u32();
    c.hidden_dim = r.u32();
    c.num_layers = r.u32();
    c.num_heads = r.u32();
    c.max_seq_len = r.u32();
    c.mask_token_id = r.u32();
    c.mlp_dim = r.u32();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint header invalid: ") + e.what());
    }

    const std::uint32_t words = r.u32();
    if (words != 0 && words != c.vocab_size) {
        throw FormatError("checkpoint vocabulary size disagrees with header vocab_size");
    }
    ckpt.vocabulary.reserve(words);
    for (std::uint32_t i = 0; i < words; ++i) ckpt.vocabulary.push_back(r.str());

    ckpt.model.weights = DenoiserWeights::zeros(c);
    std::uint32_t expected_sections = 0;
    ckpt.model.weights.for_each_section([&](const std::string&, Matrix&) { ++expected_sections; });
    const std::uint32_t sections = r.u32();
    if (sections != expected_sections) {
        throw FormatError("checkpoint has " + std::to_string(sections) + " weight sections, header implies " +
                          std::to_string(expected_sections));
    }
    ckpt.model.weights.for_each_section([&](const std::string& name, Matrix& m) {
        const std::string got = r.str();
        if (got != name) throw FormatError("checkpoint section '" + got + "' where '" + name + "' expected");
        const std::uint64_t count = r.u64();
        if (count != m.size()) {
            throw FormatError("checkpoint section '" + name + "' holds " + std::to_string(count) +
                              " values, header implies " + std::to_string(m.size()));
        }
        r.f32s(m.values());
    });
    if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace ilrr
