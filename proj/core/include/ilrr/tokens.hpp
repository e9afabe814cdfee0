#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace ilrr {

using TokenId = std::int32_t;

// Token ids with a conditioning prefix: ids[0, prompt_len) is the prompt c,
// the remainder is the response being generated.
struct TokenSeq {
    std::vector<TokenId> ids;
    std::size_t prompt_len = 0;

    std::size_t size() const { return ids.size(); }
    std::size_t response_len() const { return ids.size() - prompt_len; }
    std::span<const TokenId> prompt() const { return {ids.data(), prompt_len}; }
    std::span<const TokenId> response() const { return {ids.data() + prompt_len, ids.size() - prompt_len}; }

    static TokenSeq join(std::span<const TokenId> prompt, std::span<const TokenId> response) {
        TokenSeq s;
        s.ids.assign(prompt.begin(), prompt.end());
        s.ids.insert(s.ids.end(), response.begin(), response.end());
        s.prompt_len = prompt.size();
        return s;
    }

    bool operator==(const TokenSeq&) const = default;
};

}  // namespace ilrr
