#pragma once

// Checkpoint container: one magic line, a little-endian uint64 header length,
// a JSON header (format version, objective tag, configuration, vocabulary,
// parameter names and shapes), then the raw little-endian doubles of every
// parameter in header order. Files are written deterministically so equal
// models produce byte-identical checkpoints.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "simmc/coref.hpp"
#include "simmc/disambiguation.hpp"
#include "simmc/generation.hpp"
#include "simmc/pretrain.hpp"

namespace simmc {

inline constexpr const char* kCheckpointMagic = "simmc-checkpoint-v1";
inline constexpr int kCheckpointFormat = 1;

inline nlohmann::json encoder_to_json(const EncoderConfig& c) {
    return {{"layers", c.layers}, {"heads", c.heads},     {"d", c.d},        {"ff", c.ff},
            {"max_len", c.max_len}, {"patch", c.patch},   {"vocab", c.vocab}};
}

inline EncoderConfig encoder_from_json(const nlohmann::json& j, const std::string& where) {
    EncoderConfig c;
    try {
        c.layers = j.at("layers").get<int>();
        c.heads = j.at("heads").get<int>();
        c.d = j.at("d").get<int>();
        c.ff = j.at("ff").get<int>();
        c.max_len = j.at("max_len").get<int>();
        c.patch = j.at("patch").get<int>();
        c.vocab = j.at("vocab").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(where + ": " + e.what());
    }
    return c;
}

inline void save_checkpoint(const std::string& path, const std::string& objective,
                            const nlohmann::json& config, const ParameterSet& params,
                            const Vocabulary& vocab) {
    nlohmann::json header;
    header["format_version"] = kCheckpointFormat;
    header["objective"] = objective;
    header["config"] = config;
    header["vocab"] = vocab.tokens();
    nlohmann::json plist = nlohmann::json::array();
    for (const auto& e : params.entries())
        plist.push_back({{"name", e.name}, {"shape", e.param->shape}});
    header["params"] = plist;

    std::string head = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    out << kCheckpointMagic << "\n";
    uint64_t len = head.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((len >> (8 * i)) & 0xff);
    out.write(lenbuf, 8);
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& e : params.entries())
        out.write(reinterpret_cast<const char*>(e.param->values.data()),
                  static_cast<std::streamsize>(e.param->values.size() * sizeof(double)));
    if (!out) throw DataError("short write on checkpoint '" + path + "'");
}

struct Checkpoint {
    std::string objective;
    nlohmann::json config;
    std::vector<std::string> vocab_tokens;
    ParameterSet params;
};

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read checkpoint '" + path + "'");
    std::string magic;
    if (!std::getline(in, magic)) throw IntegrityError("checkpoint is empty");
    if (magic != kCheckpointMagic)
        throw CompatError("unrecognized checkpoint magic '" + magic + "'");
    char lenbuf[8];
    in.read(lenbuf, 8);
    if (in.gcount() != 8) throw IntegrityError("checkpoint header length is truncated");
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i)
        len |= static_cast<uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
    if (len == 0 || len > (1ull << 30)) throw IntegrityError("implausible header length");
    std::string head(len, '\0');
    in.read(head.data(), static_cast<std::streamsize>(len));
    if (static_cast<uint64_t>(in.gcount()) != len)
        throw IntegrityError("checkpoint header is truncated");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(head);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what());
    }
    int version = header.value("format_version", -1);
    if (version != kCheckpointFormat)
        throw CompatError("unsupported checkpoint format version " + std::to_string(version));

    Checkpoint ck;
    try {
        ck.objective = header.at("objective").get<std::string>();
        ck.config = header.at("config");
        ck.vocab_tokens = header.at("vocab").get<std::vector<std::string>>();
        for (const auto& p : header.at("params")) {
            std::string name = p.at("name").get<std::string>();
            Shape shape = p.at("shape").get<Shape>();
            auto t = tensor(shape);
            in.read(reinterpret_cast<char*>(t->values.data()),
                    static_cast<std::streamsize>(t->values.size() * sizeof(double)));
            if (static_cast<size_t>(in.gcount()) != t->values.size() * sizeof(double))
                throw IntegrityError("checkpoint payload is truncated at parameter '" + name +
                                     "'");
            ck.params.add(name, t);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint header: ") + e.what());
    }
    char extra;
    if (in.read(&extra, 1) && in.gcount() == 1)
        throw IntegrityError("checkpoint has trailing bytes after the payload");
    return ck;
}

// Rebuilds the vocabulary from a checkpoint and verifies the id mapping
// reproduces exactly.
inline Vocabulary vocab_from_tokens(const std::vector<std::string>& tokens) {
    std::set<std::string> words;
    for (size_t i = 0; i < tokens.size(); ++i)
        if (i >= 8) words.insert(tokens[i]);
    Vocabulary v = Vocabulary::build(words);
    if (v.tokens() != tokens)
        throw CompatError("checkpoint vocabulary does not reproduce its id mapping");
    return v;
}

// ---------------------------------------------------------------------------
// Typed wrappers
// ---------------------------------------------------------------------------

inline nlohmann::json matching_config_to_json(const MatchingConfig& c) {
    return {{"text", encoder_to_json(c.text)},
            {"image", encoder_to_json(c.image)},
            {"d_joint", c.d_joint},
            {"score_scale", c.score_scale},
            {"loss", c.loss_kind == LossKind::BCE ? "bce" : "ce"},
            {"k_neg", c.k_neg},
            {"hard_neg_frac", c.hard_neg_frac},
            {"attr_drop_frac", c.attr_drop_frac},
            {"rank_weight", c.rank_weight}};
}

inline MatchingConfig matching_config_from_json(const nlohmann::json& j) {
    MatchingConfig c;
    try {
        c.text = encoder_from_json(j.at("text"), "matching text config");
        c.image = encoder_from_json(j.at("image"), "matching image config");
        c.d_joint = j.at("d_joint").get<int>();
        c.score_scale = j.at("score_scale").get<double>();
        std::string loss = j.at("loss").get<std::string>();
        if (loss != "bce" && loss != "ce")
            throw ParseError("matching config: unknown loss '" + loss + "'");
        c.loss_kind = loss == "ce" ? LossKind::CE : LossKind::BCE;
        c.k_neg = j.at("k_neg").get<int>();
        c.hard_neg_frac = j.value("hard_neg_frac", 0.0);
        c.attr_drop_frac = j.value("attr_drop_frac", 0.0);
        c.rank_weight = j.value("rank_weight", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("matching config: ") + e.what());
    }
    return c;
}

inline void save_matching_model(const std::string& path, const MatchingModel& m,
                                MatchObjective objective, const Vocabulary& vocab) {
    save_checkpoint(path, objective_name(objective), matching_config_to_json(m.cfg), m.params,
                    vocab);
}

inline MatchingModel load_matching_model(const Checkpoint& ck) {
    if (ck.objective != "itm" && ck.objective != "btm")
        throw CompatError("checkpoint objective '" + ck.objective + "' is not a matching model");
    MatchingModel m;
    m.cfg = matching_config_from_json(ck.config);
    m.cfg.validate();
    for (const auto& e : ck.params.entries()) m.params.add(e.name, e.param);
    for (const char* need : {"head.wt", "head.wv", "text.tok_embed", "img.patch_proj"})
        if (!m.params.has(need))
            throw IntegrityError(std::string("matching checkpoint lacks parameter '") + need +
                                 "'");
    return m;
}

inline nlohmann::json disamb_config_to_json(const DisambConfig& c) {
    return {{"text", encoder_to_json(c.text)}, {"image", encoder_to_json(c.image)}};
}

inline DisambConfig disamb_config_from_json(const nlohmann::json& j) {
    DisambConfig c;
    try {
        c.text = encoder_from_json(j.at("text"), "disambiguation text config");
        c.image = encoder_from_json(j.at("image"), "disambiguation image config");
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("disambiguation config: ") + e.what());
    }
    return c;
}

inline void save_disamb_model(const std::string& path, const DisambModel& m,
                              const Vocabulary& vocab) {
    save_checkpoint(path, "disambiguation", disamb_config_to_json(m.cfg), m.params, vocab);
}

inline DisambModel load_disamb_model(const Checkpoint& ck) {
    if (ck.objective != "disambiguation")
        throw CompatError("checkpoint objective '" + ck.objective +
                          "' is not a disambiguation model");
    DisambModel m;
    m.cfg = disamb_config_from_json(ck.config);
    m.cfg.validate();
    for (const auto& e : ck.params.entries()) m.params.add(e.name, e.param);
    for (const char* need : {"cls.wo", "cls.w1", "text.tok_embed", "img.patch_proj"})
        if (!m.params.has(need))
            throw IntegrityError(std::string("disambiguation checkpoint lacks parameter '") +
                                 need + "'");
    return m;
}

inline nlohmann::json coref_config_to_json(const CorefConfig& c) {
    return {{"text", encoder_to_json(c.text)},
            {"image", encoder_to_json(c.image)},
            {"d_joint", c.d_joint},
            {"score_scale", c.score_scale},
            {"mention_inform", c.flags.mention_inform},
            {"utterance_head", c.flags.utterance_head},
            {"system_head", c.flags.system_head},
            {"system_augmentation", c.flags.system_augmentation}};
}

inline CorefConfig coref_config_from_json(const nlohmann::json& j) {
    CorefConfig c;
    try {
        c.text = encoder_from_json(j.at("text"), "coref text config");
        c.image = encoder_from_json(j.at("image"), "coref image config");
        c.d_joint = j.at("d_joint").get<int>();
        c.score_scale = j.at("score_scale").get<double>();
        c.flags.mention_inform = j.at("mention_inform").get<bool>();
        c.flags.utterance_head = j.at("utterance_head").get<bool>();
        c.flags.system_head = j.at("system_head").get<bool>();
        c.flags.system_augmentation = j.at("system_augmentation").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("coref config: ") + e.what());
    }
    return c;
}

inline void save_coref_model(const std::string& path, const CorefModel& m,
                             const Vocabulary& vocab) {
    save_checkpoint(path, "coref", coref_config_to_json(m.cfg), m.params, vocab);
}

inline CorefModel load_coref_model(const Checkpoint& ck) {
    if (ck.objective != "coref")
        throw CompatError("checkpoint objective '" + ck.objective + "' is not a coref model");
    CorefModel m;
    m.cfg = coref_config_from_json(ck.config);
    m.cfg.validate();
    for (const auto& e : ck.params.entries()) m.params.add(e.name, e.param);
    for (const char* need : {"match.wt", "match.wv", "utt.w", "sys.w"})
        if (!m.params.has(need))
            throw IntegrityError(std::string("coref checkpoint lacks parameter '") + need + "'");
    return m;
}

inline nlohmann::json gen_config_to_json(const GenConfig& c) {
    return {{"dec", encoder_to_json(c.dec)},
            {"image", encoder_to_json(c.image)},
            {"reserve", c.reserve},
            {"use_objects", c.flags.use_objects},
            {"use_meta", c.flags.use_meta},
            {"user_augmentation", c.flags.user_augmentation}};
}

inline GenConfig gen_config_from_json(const nlohmann::json& j) {
    GenConfig c;
    try {
        c.dec = encoder_from_json(j.at("dec"), "generator decoder config");
        c.image = encoder_from_json(j.at("image"), "generator image config");
        c.reserve = j.at("reserve").get<int>();
        c.flags.use_objects = j.at("use_objects").get<bool>();
        c.flags.use_meta = j.at("use_meta").get<bool>();
        c.flags.user_augmentation = j.at("user_augmentation").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("generator config: ") + e.what());
    }
    return c;
}

inline void save_gen_model(const std::string& path, const GenModel& m, const Vocabulary& vocab) {
    save_checkpoint(path, "generation", gen_config_to_json(m.cfg), m.params, vocab);
}

inline GenModel load_gen_model(const Checkpoint& ck) {
    if (ck.objective != "generation")
        throw CompatError("checkpoint objective '" + ck.objective + "' is not a generator");
    GenModel m;
    m.cfg = gen_config_from_json(ck.config);
    m.cfg.validate();
    for (const auto& e : ck.params.entries()) m.params.add(e.name, e.param);
    for (const char* need : {"gen.wo", "gen.w4", "dec.tok_embed", "img.patch_proj"})
        if (!m.params.has(need))
            throw IntegrityError(std::string("generator checkpoint lacks parameter '") + need +
                                 "'");
    return m;
}

}  // namespace simmc
