#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "simmc/corpus.hpp"
#include "simmc/errors.hpp"

namespace simmc {

// ---------------------------------------------------------------------------
// base64 (RFC 4648, with padding) for the raster payloads
// ---------------------------------------------------------------------------

inline std::string base64_encode(const std::vector<uint8_t>& data) {
    static const char* tab = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((data.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= data.size(); i += 3) {
        uint32_t v = (data[i] << 16) | (data[i + 1] << 8) | data[i + 2];
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back(tab[v & 63]);
    }
    if (i + 1 == data.size()) {
        uint32_t v = data[i] << 16;
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out += "==";
    } else if (i + 2 == data.size()) {
        uint32_t v = (data[i] << 16) | (data[i + 1] << 8);
        out.push_back(tab[(v >> 18) & 63]);
        out.push_back(tab[(v >> 12) & 63]);
        out.push_back(tab[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::vector<uint8_t> base64_decode(const std::string& text) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        if (c == '=') return -1;
        throw ParseError(std::string("invalid base64 character '") + c + "'");
    };
    if (text.size() % 4 != 0) throw ParseError("base64 length not a multiple of 4");
    std::vector<uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (size_t i = 0; i < text.size(); i += 4) {
        int a = val(text[i]), b = val(text[i + 1]), c = val(text[i + 2]), d = val(text[i + 3]);
        if (a < 0 || b < 0) throw ParseError("malformed base64 quantum");
        uint32_t v = (a << 18) | (b << 12) | ((c < 0 ? 0 : c) << 6) | (d < 0 ? 0 : d);
        out.push_back((v >> 16) & 255);
        if (c >= 0) out.push_back((v >> 8) & 255);
        if (d >= 0) out.push_back(v & 255);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Raster <-> 8-bit payload
// ---------------------------------------------------------------------------

inline std::string encode_raster(const RasterImage& img) {
    std::vector<uint8_t> bytes(img.pix.size());
    for (size_t i = 0; i < img.pix.size(); ++i)
        bytes[i] = static_cast<uint8_t>(std::lround(img.pix[i] * 255.0));
    return base64_encode(bytes);
}

inline RasterImage decode_raster(int h, int w, const std::string& b64) {
    auto bytes = base64_decode(b64);
    if (bytes.size() != static_cast<size_t>(h) * w * 3)
        throw ParseError("raster payload is " + std::to_string(bytes.size()) +
                         " bytes, expected " + std::to_string(static_cast<size_t>(h) * w * 3));
    RasterImage img(h, w);
    for (size_t i = 0; i < bytes.size(); ++i) img.pix[i] = q8(bytes[i]);
    return img;
}

// ---------------------------------------------------------------------------
// Corpus JSON document
// ---------------------------------------------------------------------------

inline nlohmann::json corpus_to_json(const Corpus& corpus) {
    nlohmann::json root;
    root["scenes"] = nlohmann::json::array();
    for (const auto& s : corpus.scenes) {
        nlohmann::json js;
        js["scene_id"] = s.scene_id;
        js["background"] = {{"h", s.background.height},
                            {"w", s.background.width},
                            {"pixels", encode_raster(s.background)}};
        js["objects"] = nlohmann::json::array();
        for (const auto& o : s.objects) {
            nlohmann::json jo;
            jo["object_id"] = o.object_id;
            jo["bbox"] = {o.bbox.x, o.bbox.y, o.bbox.w, o.bbox.h};
            jo["visual_meta"] = o.visual_meta;
            jo["nonvisual_meta"] = o.nonvisual_meta;
            js["objects"].push_back(std::move(jo));
        }
        root["scenes"].push_back(std::move(js));
    }
    root["dialogs"] = nlohmann::json::array();
    for (const auto& d : corpus.dialogs) {
        nlohmann::json jd;
        jd["dialog_id"] = d.dialog_id;
        jd["scene_id"] = d.scene_id;
        jd["mentioned_object_ids"] = d.mentioned_object_ids;
        jd["turns"] = nlohmann::json::array();
        for (const auto& t : d.turns) {
            nlohmann::json jt;
            jt["user_utterance"] = t.user_utterance;
            jt["system_utterance"] = t.system_utterance;
            jt["user_object_ids"] = t.user_object_ids;
            jt["system_object_ids"] = t.system_object_ids;
            if (t.disambiguation_label.has_value())
                jt["disambiguation_label"] = *t.disambiguation_label;
            else
                jt["disambiguation_label"] = nullptr;
            jt["slot_values"] = t.slot_values;
            jt["request_slots"] = t.request_slots;
            jd["turns"].push_back(std::move(jt));
        }
        root["dialogs"].push_back(std::move(jd));
    }
    root["splits"] = {{"train", corpus.splits.train},
                      {"dev", corpus.splits.dev},
                      {"test", corpus.splits.test}};
    return root;
}

namespace detail {

// Wraps json access so a missing/mistyped field reports its path instead of
// a bare type error.
template <typename T>
T field(const nlohmann::json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key)) throw ParseError("missing field '" + key + "' in " + where);
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad field '" + key + "' in " + where + ": " + e.what());
    }
}

}  // namespace detail

inline Corpus corpus_from_json(const nlohmann::json& root) {
    Corpus corpus;
    for (const auto& js : detail::field<nlohmann::json>(root, "scenes", "document")) {
        SceneRecord s;
        s.scene_id = detail::field<int>(js, "scene_id", "scene");
        auto where = "scene " + std::to_string(s.scene_id);
        auto bg = detail::field<nlohmann::json>(js, "background", where);
        s.background = decode_raster(detail::field<int>(bg, "h", where),
                                     detail::field<int>(bg, "w", where),
                                     detail::field<std::string>(bg, "pixels", where));
        for (const auto& jo : detail::field<nlohmann::json>(js, "objects", where)) {
            ObjectRecord o;
            o.object_id = detail::field<int>(jo, "object_id", where);
            auto box = detail::field<std::vector<int>>(jo, "bbox", where);
            if (box.size() != 4) throw ParseError("bbox of wrong arity in " + where);
            o.bbox = {box[0], box[1], box[2], box[3]};
            o.visual_meta =
                detail::field<std::map<std::string, std::string>>(jo, "visual_meta", where);
            o.nonvisual_meta =
                detail::field<std::map<std::string, std::string>>(jo, "nonvisual_meta", where);
            s.objects.push_back(std::move(o));
        }
        corpus.scenes.push_back(std::move(s));
    }
    for (const auto& jd : detail::field<nlohmann::json>(root, "dialogs", "document")) {
        Dialog d;
        d.dialog_id = detail::field<int>(jd, "dialog_id", "dialog");
        auto where = "dialog " + std::to_string(d.dialog_id);
        d.scene_id = detail::field<int>(jd, "scene_id", where);
        d.mentioned_object_ids =
            detail::field<std::vector<int>>(jd, "mentioned_object_ids", where);
        for (const auto& jt : detail::field<nlohmann::json>(jd, "turns", where)) {
            DialogTurn t;
            t.user_utterance = detail::field<std::string>(jt, "user_utterance", where);
            t.system_utterance = detail::field<std::string>(jt, "system_utterance", where);
            t.user_object_ids = detail::field<std::vector<int>>(jt, "user_object_ids", where);
            t.system_object_ids =
                detail::field<std::vector<int>>(jt, "system_object_ids", where);
            if (jt.contains("disambiguation_label") && !jt["disambiguation_label"].is_null())
                t.disambiguation_label = jt["disambiguation_label"].get<bool>();
            t.slot_values =
                detail::field<std::map<std::string, std::string>>(jt, "slot_values", where);
            t.request_slots = detail::field<std::vector<std::string>>(jt, "request_slots", where);
            d.turns.push_back(std::move(t));
        }
        corpus.dialogs.push_back(std::move(d));
    }
    auto sp = detail::field<nlohmann::json>(root, "splits", "document");
    corpus.splits.train = detail::field<std::vector<int>>(sp, "train", "splits");
    corpus.splits.dev = detail::field<std::vector<int>>(sp, "dev", "splits");
    corpus.splits.test = detail::field<std::vector<int>>(sp, "test", "splits");
    validate_corpus(corpus);
    corpus.vocab = collect_vocab(corpus);
    return corpus;
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << corpus_to_json(corpus).dump() << "\n";
    if (!out) throw DataError("write failed on '" + path + "'");
}

inline Corpus load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "' for reading");
    nlohmann::json root;
    try {
        in >> root;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("malformed corpus file '" + path + "': " + e.what());
    }
    return corpus_from_json(root);
}

}  // namespace simmc
