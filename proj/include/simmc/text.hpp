#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "simmc/errors.hpp"

namespace simmc {

// Closed word-level vocabulary. Specials get the low ids in a fixed order;
// corpus words follow in sorted order, so the table is reproducible from the
// word set alone.
class Vocabulary {
   public:
    static constexpr const char* kSpecials[8] = {"[CLS]", "[USER]", "[SYSTEM]", "[META]",
                                                 "[RES]", "[PAD]",  "[EOS]",    "[UNK]"};

    Vocabulary() {
        for (int i = 0; i < 8; ++i) add_token(kSpecials[i]);
    }

    static Vocabulary build(const std::set<std::string>& words) {
        Vocabulary v;
        for (const auto& w : words) v.add_token(w);  // std::set iterates sorted
        return v;
    }

    int id(const std::string& tok) const {
        auto it = map_.find(tok);
        return it == map_.end() ? unk_id() : it->second;
    }
    bool contains(const std::string& tok) const { return map_.count(tok) != 0; }
    const std::string& token(int id) const {
        if (id < 0 || id >= static_cast<int>(tokens_.size()))
            throw LabelError("token id " + std::to_string(id) + " outside vocabulary");
        return tokens_[id];
    }
    int size() const { return static_cast<int>(tokens_.size()); }

    static constexpr int cls_id() { return 0; }
    static constexpr int user_id() { return 1; }
    static constexpr int system_id() { return 2; }
    static constexpr int meta_id() { return 3; }
    static constexpr int res_id() { return 4; }
    static constexpr int pad_id() { return 5; }
    static constexpr int eos_id() { return 6; }
    static constexpr int unk_id() { return 7; }

    const std::vector<std::string>& tokens() const { return tokens_; }

   private:
    void add_token(const std::string& t) {
        if (map_.count(t)) return;
        map_[t] = static_cast<int>(tokens_.size());
        tokens_.push_back(t);
    }
    std::map<std::string, int> map_;
    std::vector<std::string> tokens_;
};

inline std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(w);
    return out;
}

// Token ids plus the bookkeeping the encoders need: attention mask and the
// positions of [SYSTEM] markers with their source-utterance indices.
struct TokenSequence {
    std::vector<int> ids;
    std::vector<uint8_t> attn;          // 1 = attend, 0 = padding
    std::vector<int> system_positions;  // positions holding a [SYSTEM] marker
    std::vector<int> system_turns;      // source utterance index per marker

    int length() const { return static_cast<int>(ids.size()); }

    void push(int id, bool real = true) {
        ids.push_back(id);
        attn.push_back(real ? 1 : 0);
    }
};

// Plain whitespace tokenization; no specials are added here.
inline TokenSequence tokenize(const std::string& text, const Vocabulary& vocab) {
    TokenSequence seq;
    for (const auto& w : split_words(text)) seq.push(vocab.id(w));
    return seq;
}

}  // namespace simmc
