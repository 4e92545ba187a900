#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "simmc/errors.hpp"
#include "simmc/image.hpp"
#include "simmc/rng.hpp"
#include "simmc/text.hpp"

namespace simmc {

// Scene geometry: 16x16 object tiles composited on a 64x64 background over a
// 4x4 slot grid; crops are served to the image encoder at 32x32 (a lossless
// 2x nearest upscale of the tile).
constexpr int kTileSize = 16;
constexpr int kBackgroundSize = 64;
constexpr int kGridSlots = 4;
constexpr int kCropSize = 32;

struct BBox {
    int x = 0, y = 0, w = 0, h = 0;
};

struct ObjectRecord {
    int object_id = 0;
    BBox bbox;
    std::map<std::string, std::string> visual_meta;
    std::map<std::string, std::string> nonvisual_meta;
};

inline const std::vector<std::string>& visual_keys() {
    static const std::vector<std::string> k = {"assetType", "color", "pattern", "sleeveLength",
                                               "type"};
    return k;
}
inline const std::vector<std::string>& nonvisual_keys() {
    static const std::vector<std::string> k = {"brand", "customerReview", "materials", "price",
                                               "size"};
    return k;
}

struct SceneRecord {
    int scene_id = 0;
    RasterImage background;
    std::vector<ObjectRecord> objects;

    const ObjectRecord* find_object(int id) const {
        for (const auto& o : objects)
            if (o.object_id == id) return &o;
        return nullptr;
    }
};

struct DialogTurn {
    std::string user_utterance;
    std::string system_utterance;
    std::vector<int> user_object_ids;    // gold referents of the user utterance
    std::vector<int> system_object_ids;  // objects the system utterance mentions
    std::optional<bool> disambiguation_label;
    std::map<std::string, std::string> slot_values;
    std::vector<std::string> request_slots;  // carried through, unused by models
};

struct Dialog {
    int dialog_id = 0;
    int scene_id = 0;
    std::vector<DialogTurn> turns;
    std::vector<int> mentioned_object_ids;  // union of all referenced objects
};

struct Splits {
    std::vector<int> train, dev, test;
};

struct Corpus {
    std::vector<SceneRecord> scenes;
    std::vector<Dialog> dialogs;
    Splits splits;
    Vocabulary vocab;

    const SceneRecord& scene(int id) const {
        for (const auto& s : scenes)
            if (s.scene_id == id) return s;
        throw DataError("unknown scene id " + std::to_string(id));
    }
    const Dialog& dialog(int id) const {
        for (const auto& d : dialogs)
            if (d.dialog_id == id) return d;
        throw DataError("unknown dialog id " + std::to_string(id));
    }
};

// ---------------------------------------------------------------------------
// Attribute pools and tile rendering
// ---------------------------------------------------------------------------

struct AttributePools {
    std::vector<std::string> asset_types = {"hanging", "folded", "shelved", "mounted"};
    std::vector<std::string> colors = {"red",   "green", "blue",   "yellow",
                                       "black", "white", "purple", "orange"};
    std::vector<std::string> patterns = {"plain", "striped", "checkered", "dotted"};
    std::vector<std::string> sleeves = {"long", "short", "sleeveless", "rolled"};
    std::vector<std::string> types = {"top", "jacket", "dress", "skirt", "hat", "shirt"};
    std::vector<std::string> reviews = {"2.5", "3.0", "3.5", "4.0", "4.5", "5.0"};
    std::vector<std::string> brands = {"northwind", "acme", "zephyr", "cascade", "harbor", "atlas"};
    std::vector<std::string> prices = {"19", "29", "39", "49", "59", "79", "99", "129"};
    std::vector<std::string> sizes = {"xs", "s", "m", "l", "xl"};
    std::vector<std::string> materials = {"cotton", "wool", "denim", "silk", "linen", "leather"};
};

struct CorpusConfig {
    uint64_t seed = 7;
    int n_scenes = 200;
    int objects_min = 6, objects_max = 6;
    int turns_min = 4, turns_max = 6;
    double train_frac = 0.7, dev_frac = 0.15, test_frac = 0.15;
    AttributePools pools;

    void validate() const;
};

struct Rgb8 {
    int r, g, b;
};

// Every pixel the generator writes is an exact multiple of 1/255, so the
// 8-bit serialized form round-trips losslessly.
inline double q8(int v) { return v / 255.0; }

inline const std::map<std::string, Rgb8>& color_palette() {
    static const std::map<std::string, Rgb8> p = {
        {"red", {220, 30, 30}},    {"green", {30, 200, 30}},  {"blue", {30, 60, 220}},
        {"yellow", {230, 220, 30}}, {"black", {15, 15, 15}},   {"white", {245, 245, 245}},
        {"purple", {160, 40, 200}}, {"orange", {240, 140, 20}}};
    return p;
}

// Tile layout (master 16x16 coordinates):
//   rows 0-3   cols 0-3    sleeve glyph   (gray 80)
//   rows 0-3   cols 12-15  type glyph     (gray 140)
//   rows 12-15 cols 0-3    hue block      (pure palette color)
//   rows 12-15 cols 12-15  asset glyph    (gray 200)
//   rows 5-10  cols 2-13   pattern texture (color on gray base)
// Everything else is the base gray 178. Each region is decodable by direct
// pixel comparison, which is what makes the matching task solvable from
// pixels alone.
constexpr int kTileBaseGray = 178;
constexpr int kSleeveGray = 80;
constexpr int kTypeGray = 140;
constexpr int kAssetGray = 200;
constexpr int kBackgroundGray = 40;

// 4x4 binary glyph masks; the first eight are pairwise distinct.
inline bool glyph_cell(int variant, int i, int j) {
    switch (variant) {
        case 0: return true;                                   // full block
        case 1: return i == 0 || i == 3 || j == 0 || j == 3;   // outline
        case 2: return i == j;                                 // diagonal
        case 3: return i == j || i + j == 3;                   // X
        case 4: return (i == 0 || i == 3) && (j == 0 || j == 3);  // corners
        case 5: return i % 2 == 0;                             // horizontal stripes
        case 6: return j % 2 == 0;                             // vertical stripes
        case 7: return (i + j) % 2 == 0;                       // checker
        default: throw ConfigError("glyph variant out of range");
    }
}

// Pattern texture over a 6x12 cell region; `on` cells take the object color,
// the rest stay base gray (base != any palette color, so white works too).
inline bool pattern_cell(int variant, int i, int j) {
    switch (variant) {
        case 0: return true;                        // plain
        case 1: return j % 2 == 0;                  // striped
        case 2: return (i + j) % 2 == 0;            // checkered
        case 3: return i % 2 == 1 && j % 3 == 1;    // dotted
        default: throw ConfigError("pattern variant out of range");
    }
}

namespace detail {

inline int pool_index(const std::vector<std::string>& pool, const std::string& value,
                      const char* what) {
    for (size_t i = 0; i < pool.size(); ++i)
        if (pool[i] == value) return static_cast<int>(i);
    throw DataError(std::string(what) + " value '" + value + "' not in attribute pool");
}

inline void paint_glyph(RasterImage& tile, int r0, int c0, int variant, int gray) {
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            if (glyph_cell(variant, i, j))
                tile.set_rgb(r0 + i, c0 + j, q8(gray), q8(gray), q8(gray));
}

}  // namespace detail

inline RasterImage render_object_tile(const std::map<std::string, std::string>& visual,
                                      const AttributePools& pools) {
    RasterImage tile(kTileSize, kTileSize);
    for (int y = 0; y < kTileSize; ++y)
        for (int x = 0; x < kTileSize; ++x)
            tile.set_rgb(y, x, q8(kTileBaseGray), q8(kTileBaseGray), q8(kTileBaseGray));

    const Rgb8 rgb = color_palette().at(visual.at("color"));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            tile.set_rgb(12 + i, j, q8(rgb.r), q8(rgb.g), q8(rgb.b));

    detail::paint_glyph(tile, 0, 0,
                        detail::pool_index(pools.sleeves, visual.at("sleeveLength"), "sleeve"),
                        kSleeveGray);
    detail::paint_glyph(tile, 0, 12, detail::pool_index(pools.types, visual.at("type"), "type"),
                        kTypeGray);
    detail::paint_glyph(tile, 12, 12,
                        detail::pool_index(pools.asset_types, visual.at("assetType"), "assetType"),
                        kAssetGray);

    const int pvar = detail::pool_index(pools.patterns, visual.at("pattern"), "pattern");
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 12; ++j)
            if (pattern_cell(pvar, i, j))
                tile.set_rgb(5 + i, 2 + j, q8(rgb.r), q8(rgb.g), q8(rgb.b));
    return tile;
}

// Pixel-statistics decoders — the no-learning inverse of the renderer. They
// see only the crop raster (any integer upscale of the tile).
inline std::string decode_color(const RasterImage& crop) {
    const int f = crop.height / kTileSize;
    if (f < 1 || crop.height != kTileSize * f || crop.width != kTileSize * f)
        throw ShapeError("crop is not an integer upscale of a tile");
    double r = crop.at(13 * f, 1 * f, 0), g = crop.at(13 * f, 1 * f, 1),
           b = crop.at(13 * f, 1 * f, 2);
    for (const auto& [name, rgb] : color_palette())
        if (r == q8(rgb.r) && g == q8(rgb.g) && b == q8(rgb.b)) return name;
    throw DataError("hue block does not match any palette color");
}

inline std::map<std::string, std::string> decode_visual(const RasterImage& crop,
                                                        const AttributePools& pools) {
    const int f = crop.height / kTileSize;
    if (f < 1 || crop.height != kTileSize * f || crop.width != kTileSize * f)
        throw ShapeError("crop is not an integer upscale of a tile");
    std::map<std::string, std::string> out;
    out["color"] = decode_color(crop);
    const Rgb8 rgb = color_palette().at(out["color"]);

    auto read_glyph = [&](int r0, int c0, int gray, const std::vector<std::string>& pool,
                          const char* what) {
        for (size_t v = 0; v < pool.size(); ++v) {
            bool match = true;
            for (int i = 0; i < 4 && match; ++i)
                for (int j = 0; j < 4 && match; ++j) {
                    double expect = glyph_cell(static_cast<int>(v), i, j) ? q8(gray)
                                                                          : q8(kTileBaseGray);
                    match = crop.at((r0 + i) * f, (c0 + j) * f, 0) == expect;
                }
            if (match) return pool[v];
        }
        throw DataError(std::string("undecodable ") + what + " glyph");
    };
    out["sleeveLength"] = read_glyph(0, 0, kSleeveGray, pools.sleeves, "sleeve");
    out["type"] = read_glyph(0, 12, kTypeGray, pools.types, "type");
    out["assetType"] = read_glyph(12, 12, kAssetGray, pools.asset_types, "assetType");

    for (size_t v = 0; v < pools.patterns.size(); ++v) {
        bool match = true;
        for (int i = 0; i < 6 && match; ++i)
            for (int j = 0; j < 12 && match; ++j) {
                bool on = pattern_cell(static_cast<int>(v), i, j);
                double er = on ? q8(rgb.r) : q8(kTileBaseGray);
                double eg = on ? q8(rgb.g) : q8(kTileBaseGray);
                match = crop.at((5 + i) * f, (2 + j) * f, 0) == er &&
                        crop.at((5 + i) * f, (2 + j) * f, 1) == eg;
            }
        if (match) {
            out["pattern"] = pools.patterns[v];
            return out;
        }
    }
    throw DataError("undecodable pattern texture");
}

// ---------------------------------------------------------------------------
// Crop access
// ---------------------------------------------------------------------------

inline RasterImage crop_object(const SceneRecord& scene, int object_id,
                               int out_size = kCropSize) {
    const ObjectRecord* obj = scene.find_object(object_id);
    if (!obj)
        throw DataError("object id " + std::to_string(object_id) + " not in scene " +
                        std::to_string(scene.scene_id));
    auto sub = crop(scene.background, obj->bbox.y, obj->bbox.x, obj->bbox.h, obj->bbox.w);
    return nearest_resize(sub, out_size, out_size);
}

// ---------------------------------------------------------------------------
// Input construction
// ---------------------------------------------------------------------------

// "[CLS] assetType-value color-value pattern-value sleeve-value type-value";
// empty values are skipped. A non-empty `only_key` keeps just that attribute,
// for partial-description training pairs.
inline TokenSequence build_itm_text(const ObjectRecord& obj, const Vocabulary& vocab,
                                    const std::string& only_key = "") {
    TokenSequence seq;
    seq.push(Vocabulary::cls_id());
    for (const auto& key : visual_keys()) {
        if (!only_key.empty() && key != only_key) continue;
        auto it = obj.visual_meta.find(key);
        if (it == obj.visual_meta.end() || it->second.empty()) continue;
        for (const auto& w : split_words(it->second)) seq.push(vocab.id(w));
    }
    return seq;
}

// Dialog context "[CLS] [USER] u1 [SYSTEM] s1 ...": complete turns before
// `upto_turn`, plus the current user utterance when asked. Overlong contexts
// drop whole oldest turns; [CLS] survives always.
inline TokenSequence build_context(const Dialog& dialog, int upto_turn, bool include_current_user,
                                   const Vocabulary& vocab, int max_len) {
    if (upto_turn < 0 || upto_turn > static_cast<int>(dialog.turns.size()))
        throw ContractError("context turn index out of range");
    struct Group {
        std::vector<int> ids;
        int system_offset = -1;  // offset of the [SYSTEM] marker inside ids
        int turn = -1;
    };
    std::vector<Group> groups;
    for (int k = 0; k < upto_turn; ++k) {
        Group g;
        g.turn = k;
        g.ids.push_back(Vocabulary::user_id());
        for (const auto& w : split_words(dialog.turns[k].user_utterance))
            g.ids.push_back(vocab.id(w));
        g.system_offset = static_cast<int>(g.ids.size());
        g.ids.push_back(Vocabulary::system_id());
        for (const auto& w : split_words(dialog.turns[k].system_utterance))
            g.ids.push_back(vocab.id(w));
        groups.push_back(std::move(g));
    }
    if (include_current_user) {
        Group g;
        g.turn = upto_turn;
        g.ids.push_back(Vocabulary::user_id());
        for (const auto& w : split_words(dialog.turns[upto_turn].user_utterance))
            g.ids.push_back(vocab.id(w));
        groups.push_back(std::move(g));
    }
    const int budget = max_len - 1;
    int total = 0;
    for (const auto& g : groups) total += static_cast<int>(g.ids.size());
    size_t start = 0;
    while (total > budget && start < groups.size()) {
        total -= static_cast<int>(groups[start].ids.size());
        ++start;
    }
    TokenSequence seq;
    seq.push(Vocabulary::cls_id());
    if (total > budget && start == groups.size() && !groups.empty()) {
        // A single oversized utterance: keep its most recent tokens.
        const auto& ids = groups.back().ids;
        for (size_t i = ids.size() - budget; i < ids.size(); ++i) seq.push(ids[i]);
        return seq;
    }
    for (size_t gi = start; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        if (g.system_offset >= 0) {
            seq.system_positions.push_back(seq.length() + g.system_offset);
            seq.system_turns.push_back(g.turn);
        }
        for (int id : g.ids) seq.push(id);
    }
    return seq;
}

// Slot map flattened as "key : value" runs in sorted key order.
inline std::vector<int> flatten_slot_values(const std::map<std::string, std::string>& slots,
                                            const Vocabulary& vocab) {
    std::vector<int> ids;
    for (const auto& [k, v] : slots) {  // std::map iterates in sorted key order
        ids.push_back(vocab.id(k));
        ids.push_back(vocab.id(":"));
        for (const auto& w : split_words(v)) ids.push_back(vocab.id(w));
    }
    return ids;
}

// Decoder input "context [META] flattened-slots [RES]". `reserve` tokens of
// max_len are left for the generated continuation; `include_meta_values`
// cleared keeps the bare [META] [RES] markers (the meta ablation).
inline TokenSequence build_generation_input(const Dialog& dialog, int turn,
                                            const Vocabulary& vocab, int max_len,
                                            int reserve = 28, bool include_meta_values = true) {
    std::vector<int> suffix;
    suffix.push_back(Vocabulary::meta_id());
    if (include_meta_values)
        for (int id : flatten_slot_values(dialog.turns[turn].slot_values, vocab))
            suffix.push_back(id);
    suffix.push_back(Vocabulary::res_id());
    const int context_budget = max_len - static_cast<int>(suffix.size()) - reserve;
    if (context_budget < 1) throw ConfigError("generation input budget exhausted by meta block");
    auto seq = build_context(dialog, turn, true, vocab, context_budget);
    for (int id : suffix) seq.push(id);
    return seq;
}

// Teacher-forcing target: the system utterance tokens then [EOS].
inline std::vector<int> generation_target(const DialogTurn& turn, const Vocabulary& vocab) {
    std::vector<int> ids;
    for (const auto& w : split_words(turn.system_utterance)) ids.push_back(vocab.id(w));
    ids.push_back(Vocabulary::eos_id());
    return ids;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

inline void CorpusConfig::validate() const {
    if (n_scenes < 1) throw ConfigError("n_scenes must be positive");
    if (objects_min < 3)
        throw ConfigError("objects_per_scene must be at least 3 (a duplicated pair plus a "
                          "distinct target)");
    if (objects_min > objects_max) throw ConfigError("objects_per_scene range is inverted");
    if (objects_max > kGridSlots * kGridSlots)
        throw ConfigError("objects_per_scene exceeds grid capacity");
    if (turns_min < 4 || turns_max > 6 || turns_min > turns_max)
        throw ConfigError("turns_per_dialog range must lie inside [4,6]");
    double fsum = train_frac + dev_frac + test_frac;
    if (train_frac < 0 || dev_frac < 0 || test_frac < 0 || std::abs(fsum - 1.0) > 1e-9)
        throw ConfigError("split fractions must be non-negative and sum to 1");
    if (pools.patterns.size() < 2 || pools.patterns.size() > 4)
        throw ConfigError("pattern pool must have 2-4 values");
    auto check_glyph_pool = [](const std::vector<std::string>& p, const char* what) {
        if (p.empty() || p.size() > 8)
            throw ConfigError(std::string(what) + " pool must have 1-8 values");
    };
    check_glyph_pool(pools.asset_types, "assetType");
    check_glyph_pool(pools.sleeves, "sleeve");
    check_glyph_pool(pools.types, "type");
    for (const auto& c : pools.colors)
        if (!color_palette().count(c))
            throw ConfigError("color '" + c + "' has no palette entry");
    if (static_cast<int>(pools.colors.size() * pools.types.size()) < objects_max - 1)
        throw ConfigError("color x type pool too small for distinct object identities");
    if (pools.reviews.empty() || pools.brands.empty() || pools.prices.empty() ||
        pools.sizes.empty() || pools.materials.empty())
        throw ConfigError("non-visual attribute pools must be non-empty");
}

inline void validate_corpus(const Corpus& corpus) {
    std::set<int> scene_ids;
    for (const auto& s : corpus.scenes) {
        if (!scene_ids.insert(s.scene_id).second)
            throw IntegrityError("duplicate scene id " + std::to_string(s.scene_id));
        if (s.objects.size() < 2)
            throw IntegrityError("scene " + std::to_string(s.scene_id) + " has fewer than 2 objects");
        std::set<int> obj_ids;
        for (const auto& o : s.objects) {
            if (!obj_ids.insert(o.object_id).second)
                throw IntegrityError("duplicate object id " + std::to_string(o.object_id) +
                                     " in scene " + std::to_string(s.scene_id));
            if (o.bbox.x < 0 || o.bbox.y < 0 || o.bbox.w <= 0 || o.bbox.h <= 0 ||
                o.bbox.x + o.bbox.w > s.background.width ||
                o.bbox.y + o.bbox.h > s.background.height)
                throw IntegrityError("object " + std::to_string(o.object_id) +
                                     " bbox outside background");
            auto expect_keys = [](const std::map<std::string, std::string>& m,
                                  const std::vector<std::string>& keys, const char* what,
                                  int id) {
                if (m.size() != keys.size())
                    throw IntegrityError(std::string(what) + " key set wrong on object " +
                                         std::to_string(id));
                for (const auto& k : keys)
                    if (!m.count(k))
                        throw IntegrityError(std::string(what) + " missing key '" + k +
                                             "' on object " + std::to_string(id));
            };
            expect_keys(o.visual_meta, visual_keys(), "visual_meta", o.object_id);
            expect_keys(o.nonvisual_meta, nonvisual_keys(), "nonvisual_meta", o.object_id);
        }
    }
    std::set<int> dialog_ids;
    for (const auto& d : corpus.dialogs) {
        if (!dialog_ids.insert(d.dialog_id).second)
            throw IntegrityError("duplicate dialog id " + std::to_string(d.dialog_id));
        if (!scene_ids.count(d.scene_id))
            throw IntegrityError("dialog " + std::to_string(d.dialog_id) +
                                 " references unknown scene " + std::to_string(d.scene_id));
        const auto& scene = corpus.scene(d.scene_id);
        std::set<int> mentioned;
        for (const auto& t : d.turns) {
            for (int id : t.user_object_ids) {
                if (!scene.find_object(id))
                    throw IntegrityError("turn references unknown object id " +
                                         std::to_string(id) + " in dialog " +
                                         std::to_string(d.dialog_id));
                mentioned.insert(id);
            }
            for (int id : t.system_object_ids) {
                if (!scene.find_object(id))
                    throw IntegrityError("turn references unknown object id " +
                                         std::to_string(id) + " in dialog " +
                                         std::to_string(d.dialog_id));
                mentioned.insert(id);
            }
        }
        std::set<int> declared(d.mentioned_object_ids.begin(), d.mentioned_object_ids.end());
        if (declared != mentioned)
            throw IntegrityError("mentioned_object_ids of dialog " + std::to_string(d.dialog_id) +
                                 " is not the union of turn references");
    }
    std::set<int> seen_split;
    for (const auto* split : {&corpus.splits.train, &corpus.splits.dev, &corpus.splits.test})
        for (int id : *split) {
            if (!dialog_ids.count(id))
                throw IntegrityError("split references unknown dialog id " + std::to_string(id));
            if (!seen_split.insert(id).second)
                throw IntegrityError("dialog id " + std::to_string(id) +
                                     " appears in multiple splits");
        }
}

// Deterministic: the word set is collected from every text field, so the
// table depends only on corpus content (stable across save/load).
inline Vocabulary collect_vocab(const Corpus& corpus) {
    std::set<std::string> words;
    words.insert(":");
    for (const auto& s : corpus.scenes)
        for (const auto& o : s.objects) {
            for (const auto& [k, v] : o.visual_meta)
                for (const auto& w : split_words(v)) words.insert(w);
            for (const auto& [k, v] : o.nonvisual_meta)
                for (const auto& w : split_words(v)) words.insert(w);
        }
    for (const auto& d : corpus.dialogs)
        for (const auto& t : d.turns) {
            for (const auto& w : split_words(t.user_utterance)) words.insert(w);
            for (const auto& w : split_words(t.system_utterance)) words.insert(w);
            for (const auto& [k, v] : t.slot_values) {
                words.insert(k);
                for (const auto& w : split_words(v)) words.insert(w);
            }
            for (const auto& r : t.request_slots) words.insert(r);
        }
    return Vocabulary::build(words);
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

namespace detail {

inline std::string describe(const ObjectRecord& o) {
    return "a " + o.visual_meta.at("color") + " " + o.visual_meta.at("pattern") + " " +
           o.visual_meta.at("type");
}

inline std::vector<int> sorted_ids(std::vector<int> ids) {
    std::sort(ids.begin(), ids.end());
    return ids;
}

inline std::string join_words(const std::vector<std::string>& ws, const std::string& sep) {
    std::string out;
    for (size_t i = 0; i < ws.size(); ++i) {
        if (i) out += sep;
        out += ws[i];
    }
    return out;
}

struct ScenePlan {
    SceneRecord scene;
    int dup_a = 0, dup_b = 0;    // the color+type duplicated pair
    int false_target = 0;        // unique color+type object the dialog asks about
    std::vector<int> spare_ids;  // never listed in the opening inventory
};

inline ScenePlan generate_scene(int scene_id, const CorpusConfig& cfg, Rng& rng) {
    const auto& pools = cfg.pools;
    const int n_obj = rng.uniform_int(cfg.objects_min, cfg.objects_max);

    // The duplicated pair shares color+type but differs in pattern (so a
    // clarification question can tell them apart).
    const std::string dup_color = pools.colors[rng.uniform_int(0, pools.colors.size() - 1)];
    const std::string dup_type = pools.types[rng.uniform_int(0, pools.types.size() - 1)];
    const int pat_a = rng.uniform_int(0, pools.patterns.size() - 1);
    const int pat_b =
        (pat_a + 1 + rng.uniform_int(0, pools.patterns.size() - 2)) % pools.patterns.size();

    std::set<std::pair<std::string, std::string>> used_pairs;
    used_pairs.insert({dup_color, dup_type});

    auto sample_visual = [&](const std::string& color, const std::string& type,
                             int pattern_idx) {
        std::map<std::string, std::string> v;
        v["assetType"] = pools.asset_types[rng.uniform_int(0, pools.asset_types.size() - 1)];
        v["color"] = color;
        v["pattern"] = pools.patterns[pattern_idx];
        v["sleeveLength"] = pools.sleeves[rng.uniform_int(0, pools.sleeves.size() - 1)];
        v["type"] = type;
        return v;
    };

    std::vector<std::map<std::string, std::string>> visuals;
    visuals.push_back(sample_visual(dup_color, dup_type, pat_a));
    visuals.push_back(sample_visual(dup_color, dup_type, pat_b));
    for (int i = 2; i < n_obj; ++i) {
        // Unique color+type identity for everyone outside the pair.
        for (;;) {
            std::string c = pools.colors[rng.uniform_int(0, pools.colors.size() - 1)];
            std::string t = pools.types[rng.uniform_int(0, pools.types.size() - 1)];
            if (used_pairs.insert({c, t}).second) {
                visuals.push_back(
                    sample_visual(c, t, rng.uniform_int(0, pools.patterns.size() - 1)));
                break;
            }
        }
    }

    // Shuffle identity -> object id so the pair is not always ids 1,2.
    std::vector<int> order(n_obj);
    for (int i = 0; i < n_obj; ++i) order[i] = i;
    rng.shuffle(order);
    auto slots = rng.sample_indices(kGridSlots * kGridSlots, n_obj);

    ScenePlan plan;
    plan.scene.scene_id = scene_id;
    plan.scene.background = RasterImage(kBackgroundSize, kBackgroundSize);
    for (auto& v : plan.scene.background.pix) v = q8(kBackgroundGray);

    for (int i = 0; i < n_obj; ++i) {
        ObjectRecord obj;
        obj.object_id = i + 1;
        const int identity = order[i];
        obj.visual_meta = visuals[identity];
        obj.nonvisual_meta["brand"] = pools.brands[rng.uniform_int(0, pools.brands.size() - 1)];
        obj.nonvisual_meta["customerReview"] =
            pools.reviews[rng.uniform_int(0, pools.reviews.size() - 1)];
        obj.nonvisual_meta["materials"] =
            pools.materials[rng.uniform_int(0, pools.materials.size() - 1)];
        obj.nonvisual_meta["price"] = pools.prices[rng.uniform_int(0, pools.prices.size() - 1)];
        obj.nonvisual_meta["size"] = pools.sizes[rng.uniform_int(0, pools.sizes.size() - 1)];
        obj.bbox = {slots[i] % kGridSlots * kTileSize, slots[i] / kGridSlots * kTileSize,
                    kTileSize, kTileSize};
        if (identity == 0) plan.dup_a = obj.object_id;
        if (identity == 1) plan.dup_b = obj.object_id;
        if (identity == 2) plan.false_target = obj.object_id;
        if (identity > 2) plan.spare_ids.push_back(obj.object_id);

        auto tile = render_object_tile(obj.visual_meta, pools);
        for (int y = 0; y < kTileSize; ++y)
            for (int x = 0; x < kTileSize; ++x)
                for (int c = 0; c < 3; ++c)
                    plan.scene.background.at(obj.bbox.y + y, obj.bbox.x + x, c) =
                        tile.at(y, x, c);
        plan.scene.objects.push_back(std::move(obj));
    }
    return plan;
}

inline Dialog generate_dialog(const ScenePlan& plan, const CorpusConfig& cfg, Rng& rng) {
    const SceneRecord& scene = plan.scene;
    auto obj = [&](int id) -> const ObjectRecord& { return *scene.find_object(id); };
    Dialog d;
    d.dialog_id = 10000 + scene.scene_id;
    d.scene_id = scene.scene_id;

    const int n_turns = rng.uniform_int(cfg.turns_min, cfg.turns_max);

    // Opening inventory lists the pair and the false target in random order.
    std::vector<int> listing = {plan.dup_a, plan.dup_b, plan.false_target};
    rng.shuffle(listing);
    {
        DialogTurn t;
        t.user_utterance = rng.bernoulli(0.5) ? "hello what do you have in store today"
                                              : "hi can you show me what you have";
        std::vector<std::string> descs;
        for (int id : listing) descs.push_back(describe(obj(id)));
        std::string options = join_words(descs, " and ");
        t.system_utterance = "we have " + options + " in store";
        t.slot_values["options"] = options;
        t.system_object_ids = sorted_ids(listing);
        d.turns.push_back(std::move(t));
    }

    // One ambiguous and one unambiguous price query, in coin-flip order.
    auto make_disamb_true = [&] {
        DialogTurn t;
        const auto& a = obj(plan.dup_a);
        std::string c = a.visual_meta.at("color"), ty = a.visual_meta.at("type");
        t.user_utterance = rng.bernoulli(0.5) ? "how much is the " + c + " " + ty
                                              : "what is the price of the " + c + " " + ty;
        int lo = std::min(plan.dup_a, plan.dup_b), hi = std::max(plan.dup_a, plan.dup_b);
        std::string p1 = obj(lo).visual_meta.at("pattern"), p2 = obj(hi).visual_meta.at("pattern");
        t.system_utterance = "do you mean the " + p1 + " one or the " + p2 + " one";
        t.slot_values["choices"] = p1 + " " + p2;
        t.user_object_ids = {lo, hi};
        t.system_object_ids = {lo, hi};
        t.disambiguation_label = true;
        t.request_slots = {"price"};
        return t;
    };
    auto make_disamb_false = [&] {
        DialogTurn t;
        const auto& c = obj(plan.false_target);
        std::string col = c.visual_meta.at("color"), ty = c.visual_meta.at("type");
        t.user_utterance = rng.bernoulli(0.5) ? "how much is the " + col + " " + ty
                                              : "what is the price of the " + col + " " + ty;
        t.system_utterance =
            "the " + col + " " + ty + " is " + c.nonvisual_meta.at("price") + " dollars";
        t.slot_values = {{"color", col}, {"price", c.nonvisual_meta.at("price")}, {"type", ty}};
        t.user_object_ids = {plan.false_target};
        t.system_object_ids = {plan.false_target};
        t.disambiguation_label = false;
        t.request_slots = {"price"};
        return t;
    };
    if (rng.bernoulli(0.5)) {
        d.turns.push_back(make_disamb_true());
        d.turns.push_back(make_disamb_false());
    } else {
        d.turns.push_back(make_disamb_false());
        d.turns.push_back(make_disamb_true());
    }

    // Optional middle turns: a follow-up on the previous turn's objects, and
    // a query about an object the system never listed.
    bool want_followup = n_turns >= 5;
    bool want_fresh = n_turns >= 6;
    if (n_turns == 5 && rng.bernoulli(0.5)) {
        want_followup = false;
        want_fresh = true;
    }
    if (want_followup) {
        DialogTurn t;
        const auto& prev = d.turns.back();
        std::vector<int> targets = prev.system_object_ids;
        const char* kinds[3] = {"size", "materials", "brand"};
        std::string key = kinds[rng.uniform_int(0, 2)];
        std::string noun = key == "materials" ? "material" : key;
        t.user_utterance = "and what about the " + noun;
        std::vector<std::string> vals;
        for (int id : targets) vals.push_back(obj(id).nonvisual_meta.at(key));
        t.slot_values[key] = join_words(vals, " ");
        if (targets.size() == 1) {
            if (key == "size") t.system_utterance = "it comes in size " + vals[0];
            else if (key == "materials") t.system_utterance = "it is made of " + vals[0];
            else t.system_utterance = "it is from " + vals[0];
        } else {
            std::string both = join_words(vals, " and ");
            if (key == "size") t.system_utterance = "they come in size " + both;
            else if (key == "materials") t.system_utterance = "they are made of " + both;
            else t.system_utterance = "they are from " + both;
        }
        t.user_object_ids = targets;
        t.system_object_ids = targets;
        t.request_slots = {key};
        d.turns.push_back(std::move(t));
    }
    if (want_fresh) {
        DialogTurn t;
        if (!plan.spare_ids.empty() && rng.bernoulli(0.75)) {
            int id = plan.spare_ids[rng.uniform_int(0, plan.spare_ids.size() - 1)];
            const auto& o = obj(id);
            std::string c = o.visual_meta.at("color"), ty = o.visual_meta.at("type");
            t.user_utterance = rng.bernoulli(0.5) ? "do you have a " + c + " " + ty
                                                  : "i am looking for a " + c + " " + ty;
            t.system_utterance = "yes the " + o.nonvisual_meta.at("brand") + " " + c + " " + ty +
                                 " is available for " + o.nonvisual_meta.at("price") + " dollars";
            t.slot_values = {{"brand", o.nonvisual_meta.at("brand")},
                             {"color", c},
                             {"price", o.nonvisual_meta.at("price")},
                             {"type", ty}};
            t.user_object_ids = {id};
            t.system_object_ids = {id};
            t.request_slots = {"price"};
        } else {
            t.user_utterance = rng.bernoulli(0.5) ? "i am just browsing around for now"
                                                  : "just looking around thanks";
            t.system_utterance = "sure take your time";
        }
        d.turns.push_back(std::move(t));
    }

    {
        DialogTurn t;
        t.user_utterance =
            rng.bernoulli(0.5) ? "thank you that is all for today" : "thanks that will be all";
        t.system_utterance = "you are welcome have a nice day";
        d.turns.push_back(std::move(t));
    }

    std::set<int> mentioned;
    for (const auto& t : d.turns) {
        mentioned.insert(t.user_object_ids.begin(), t.user_object_ids.end());
        mentioned.insert(t.system_object_ids.begin(), t.system_object_ids.end());
    }
    d.mentioned_object_ids.assign(mentioned.begin(), mentioned.end());
    return d;
}

}  // namespace detail

inline Corpus generate_corpus(const CorpusConfig& cfg) {
    cfg.validate();
    Corpus corpus;
    Rng rng(derive_seed(cfg.seed, "corpus"));
    for (int s = 0; s < cfg.n_scenes; ++s) {
        auto plan = detail::generate_scene(s, cfg, rng);
        corpus.dialogs.push_back(detail::generate_dialog(plan, cfg, rng));
        corpus.scenes.push_back(std::move(plan.scene));
    }
    // Split by shuffled dialog order; fractions round down, remainder to train.
    Rng split_rng(derive_seed(cfg.seed, "split"));
    std::vector<int> ids;
    for (const auto& d : corpus.dialogs) ids.push_back(d.dialog_id);
    split_rng.shuffle(ids);
    const int n = static_cast<int>(ids.size());
    const int n_dev = static_cast<int>(n * cfg.dev_frac);
    const int n_test = static_cast<int>(n * cfg.test_frac);
    const int n_train = n - n_dev - n_test;
    corpus.splits.train.assign(ids.begin(), ids.begin() + n_train);
    corpus.splits.dev.assign(ids.begin() + n_train, ids.begin() + n_train + n_dev);
    corpus.splits.test.assign(ids.begin() + n_train + n_dev, ids.end());
    corpus.vocab = collect_vocab(corpus);
    validate_corpus(corpus);
    return corpus;
}

}  // namespace simmc
