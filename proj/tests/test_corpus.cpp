#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <fstream>
#include <set>

#include "simmc/corpus.hpp"
#include "simmc/corpus_io.hpp"

using namespace simmc;

static CorpusConfig tiny_cfg(int scenes = 8) {
    CorpusConfig cfg;
    cfg.seed = 7;
    cfg.n_scenes = scenes;
    return cfg;
}

TEST_CASE("generator determinism: equal seeds give byte-identical documents") {
    auto a = generate_corpus(tiny_cfg(4));
    auto b = generate_corpus(tiny_cfg(4));
    CHECK(corpus_to_json(a).dump() == corpus_to_json(b).dump());
    CorpusConfig other = tiny_cfg(4);
    other.seed = 8;
    auto c = generate_corpus(other);
    CHECK(corpus_to_json(a).dump() != corpus_to_json(c).dump());
}

TEST_CASE("scene and object counts follow the config") {
    CorpusConfig cfg = tiny_cfg(10);
    cfg.objects_min = cfg.objects_max = 4;
    auto corpus = generate_corpus(cfg);
    CHECK(corpus.scenes.size() == 10);
    size_t total = 0;
    for (const auto& s : corpus.scenes) total += s.objects.size();
    CHECK(total == 40);
}

TEST_CASE("config validation rejects bad settings") {
    CorpusConfig cfg = tiny_cfg();
    cfg.objects_min = cfg.objects_max = 2;
    CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
    cfg = tiny_cfg();
    cfg.objects_min = cfg.objects_max = 17;
    CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
    cfg = tiny_cfg();
    cfg.train_frac = 0.9;  // no longer sums to 1
    CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
    cfg = tiny_cfg();
    cfg.turns_min = 2;
    CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
    cfg = tiny_cfg();
    cfg.pools.colors = {"no-such-color"};
    CHECK_THROWS_AS(generate_corpus(cfg), ConfigError);
}

TEST_CASE("referential integrity and mention union hold on generated corpora") {
    auto corpus = generate_corpus(tiny_cfg());
    for (const auto& d : corpus.dialogs) {
        const auto& scene = corpus.scene(d.scene_id);
        std::set<int> mentioned;
        for (const auto& t : d.turns) {
            for (int id : t.user_object_ids) {
                CHECK(scene.find_object(id) != nullptr);
                mentioned.insert(id);
            }
            for (int id : t.system_object_ids) {
                CHECK(scene.find_object(id) != nullptr);
                mentioned.insert(id);
            }
        }
        CHECK(std::set<int>(d.mentioned_object_ids.begin(), d.mentioned_object_ids.end()) ==
              mentioned);
    }
}

TEST_CASE("every dialog carries one true and one false disambiguation label") {
    auto corpus = generate_corpus(tiny_cfg(20));
    int nt = 0, nf = 0;
    for (const auto& d : corpus.dialogs) {
        int dt = 0, df = 0;
        for (const auto& turn : d.turns) {
            if (!turn.disambiguation_label.has_value()) continue;
            (*turn.disambiguation_label ? dt : df) += 1;
        }
        CHECK(dt == 1);
        CHECK(df == 1);
        nt += dt;
        nf += df;
    }
    CHECK(nt == nf);  // exactly balanced by construction
}

TEST_CASE("ambiguous labels are honest: attribute match counts agree") {
    // A turn labeled true must describe >1 object of its scene; false exactly 1.
    auto corpus = generate_corpus(tiny_cfg());
    for (const auto& d : corpus.dialogs) {
        const auto& scene = corpus.scene(d.scene_id);
        for (const auto& t : d.turns) {
            if (!t.disambiguation_label.has_value()) continue;
            // The query names a color and a type as its last two words.
            auto words = split_words(t.user_utterance);
            REQUIRE(words.size() >= 2);
            std::string color = words[words.size() - 2], type = words.back();
            int matches = 0;
            for (const auto& o : scene.objects)
                if (o.visual_meta.at("color") == color && o.visual_meta.at("type") == type)
                    ++matches;
            if (*t.disambiguation_label) CHECK(matches > 1);
            else CHECK(matches == 1);
        }
    }
}

TEST_CASE("splits partition the dialogs with the configured fractions") {
    auto corpus = generate_corpus(tiny_cfg(20));
    std::set<int> all;
    for (const auto& d : corpus.dialogs) all.insert(d.dialog_id);
    std::set<int> seen;
    size_t n = 0;
    for (const auto* split : {&corpus.splits.train, &corpus.splits.dev, &corpus.splits.test})
        for (int id : *split) {
            CHECK(all.count(id) == 1);
            CHECK(seen.insert(id).second);
            ++n;
        }
    CHECK(n == all.size());
    CHECK(corpus.splits.dev.size() == 3);   // floor(20 * 0.15)
    CHECK(corpus.splits.test.size() == 3);
    CHECK(corpus.splits.train.size() == 14);
}

TEST_CASE("crops decode back to their visual metadata everywhere") {
    auto corpus = generate_corpus(tiny_cfg());
    const AttributePools pools;
    int checked = 0;
    for (const auto& s : corpus.scenes)
        for (const auto& o : s.objects) {
            auto c = crop_object(s, o.object_id);
            CHECK(c.height == kCropSize);
            auto decoded = decode_visual(c, pools);
            CHECK(decoded == o.visual_meta);
            ++checked;
        }
    CHECK(checked >= 16);
}

TEST_CASE("red crops have a red-dominant hue block") {
    auto corpus = generate_corpus(tiny_cfg());
    int reds = 0;
    for (const auto& s : corpus.scenes)
        for (const auto& o : s.objects) {
            if (o.visual_meta.at("color") != "red") continue;
            auto c = crop_object(s, o.object_id);
            // Hue block occupies tile rows 12-15, cols 0-3 -> crop rows 24-31, cols 0-7.
            double r = 0, g = 0, b = 0;
            for (int y = 24; y < 32; ++y)
                for (int x = 0; x < 8; ++x) {
                    r += c.at(y, x, 0);
                    g += c.at(y, x, 1);
                    b += c.at(y, x, 2);
                }
            CHECK(r > g);
            CHECK(r > b);
            ++reds;
        }
    CHECK(reds > 0);
}

TEST_CASE("crop determinism and unknown-id error") {
    auto corpus = generate_corpus(tiny_cfg(2));
    const auto& s = corpus.scenes[0];
    auto c1 = crop_object(s, s.objects[0].object_id);
    auto c2 = crop_object(s, s.objects[0].object_id);
    CHECK(c1.pix == c2.pix);
    CHECK_THROWS_AS(crop_object(s, 999), DataError);
}

TEST_CASE("whole-background bbox crops to a resized copy of the background") {
    auto corpus = generate_corpus(tiny_cfg(1));
    SceneRecord s = corpus.scenes[0];
    ObjectRecord whole = s.objects[0];
    whole.object_id = 77;
    whole.bbox = {0, 0, kBackgroundSize, kBackgroundSize};
    s.objects.push_back(whole);
    auto c = crop_object(s, 77, kBackgroundSize);
    CHECK(c.pix == s.background.pix);
}

TEST_CASE("glyph and pattern variants are pairwise distinct") {
    for (int a = 0; a < 8; ++a)
        for (int b = a + 1; b < 8; ++b) {
            bool differ = false;
            for (int i = 0; i < 4 && !differ; ++i)
                for (int j = 0; j < 4 && !differ; ++j)
                    differ = glyph_cell(a, i, j) != glyph_cell(b, i, j);
            CHECK(differ);
        }
    for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b) {
            bool differ = false;
            for (int i = 0; i < 6 && !differ; ++i)
                for (int j = 0; j < 12 && !differ; ++j)
                    differ = pattern_cell(a, i, j) != pattern_cell(b, i, j);
            CHECK(differ);
        }
}

TEST_CASE("matching-text construction follows the fixed key order") {
    ObjectRecord o;
    o.visual_meta = {{"assetType", "hanging"},
                     {"color", "red"},
                     {"pattern", "plain"},
                     {"sleeveLength", "long"},
                     {"type", "top"}};
    Vocabulary v = Vocabulary::build({"hanging", "red", "plain", "long", "top", "x"});
    auto seq = build_itm_text(o, v);
    std::vector<int> expect = {Vocabulary::cls_id(), v.id("hanging"), v.id("red"),
                               v.id("plain"),        v.id("long"),    v.id("top")};
    CHECK(seq.ids == expect);

    ObjectRecord same;
    for (const auto& k : visual_keys()) same.visual_meta[k] = "x";
    auto seq2 = build_itm_text(same, v);
    CHECK(seq2.ids == std::vector<int>(
                          {Vocabulary::cls_id(), v.id("x"), v.id("x"), v.id("x"), v.id("x"),
                           v.id("x")}));

    ObjectRecord gap = o;
    gap.visual_meta["pattern"] = "";
    CHECK(build_itm_text(gap, v).length() == seq.length() - 1);
}

TEST_CASE("unknown words map to the unknown token") {
    Vocabulary v = Vocabulary::build({"red"});
    auto seq = tokenize("red wombat", v);
    CHECK(seq.ids == std::vector<int>({v.id("red"), Vocabulary::unk_id()}));
    CHECK(tokenize("", v).length() == 0);
    CHECK(tokenize("red wombat", v).ids == seq.ids);
}

TEST_CASE("synthetic text is fully in-vocabulary") {
    auto corpus = generate_corpus(tiny_cfg());
    auto check_no_unk = [&](const std::string& text) {
        for (int id : tokenize(text, corpus.vocab).ids) CHECK(id != Vocabulary::unk_id());
    };
    for (const auto& d : corpus.dialogs)
        for (const auto& t : d.turns) {
            check_no_unk(t.user_utterance);
            check_no_unk(t.system_utterance);
            for (int id : flatten_slot_values(t.slot_values, corpus.vocab))
                CHECK(id != Vocabulary::unk_id());
        }
}

static Dialog mini_dialog(int turns) {
    Dialog d;
    d.dialog_id = 1;
    d.scene_id = 0;
    for (int k = 0; k < turns; ++k) {
        DialogTurn t;
        t.user_utterance = "u" + std::to_string(k) + " q";
        t.system_utterance = "s" + std::to_string(k) + " r";
        d.turns.push_back(t);
    }
    return d;
}

static Vocabulary mini_vocab() {
    std::set<std::string> w;
    for (int k = 0; k < 8; ++k) {
        w.insert("u" + std::to_string(k));
        w.insert("s" + std::to_string(k));
    }
    w.insert("q");
    w.insert("r");
    return Vocabulary::build(w);
}

TEST_CASE("context construction basics") {
    auto d = mini_dialog(3);
    auto v = mini_vocab();
    auto empty = build_context(d, 0, false, v, 64);
    CHECK(empty.ids == std::vector<int>({Vocabulary::cls_id()}));

    auto first_user = build_context(d, 0, true, v, 64);
    CHECK(first_user.ids == std::vector<int>({Vocabulary::cls_id(), Vocabulary::user_id(),
                                              v.id("u0"), v.id("q")}));
    CHECK(first_user.system_positions.empty());

    auto two_full = build_context(d, 2, false, v, 64);
    REQUIRE(two_full.system_positions.size() == 2);
    CHECK(two_full.system_turns == std::vector<int>({0, 1}));
    for (size_t i = 0; i < two_full.system_positions.size(); ++i)
        CHECK(two_full.ids[two_full.system_positions[i]] == Vocabulary::system_id());
}

TEST_CASE("context is a prefix extension as turns advance") {
    auto d = mini_dialog(4);
    auto v = mini_vocab();
    for (int k = 1; k <= 4; ++k) {
        auto shorter = build_context(d, k - 1, false, v, 256);
        auto longer = build_context(d, k, false, v, 256);
        REQUIRE(longer.ids.size() >= shorter.ids.size());
        for (size_t i = 0; i < shorter.ids.size(); ++i) CHECK(shorter.ids[i] == longer.ids[i]);
    }
}

TEST_CASE("overlong context drops whole oldest turns and keeps [CLS]") {
    auto d = mini_dialog(3);  // each full turn group is 6 tokens
    auto v = mini_vocab();
    auto full = build_context(d, 3, false, v, 64);
    CHECK(full.length() == 19);
    auto cut = build_context(d, 3, false, v, 13);  // budget 12 -> drops turn 0
    CHECK(cut.length() == 13);
    CHECK(cut.ids[0] == Vocabulary::cls_id());
    CHECK(cut.system_turns == std::vector<int>({1, 2}));
    // The retained tail matches the uncut context's tail exactly.
    for (int i = 1; i < cut.length(); ++i)
        CHECK(cut.ids[i] == full.ids[full.length() - cut.length() + i]);
    auto tiny = build_context(d, 3, false, v, 7);  // budget 6 -> only turn 2 fits
    CHECK(tiny.system_turns == std::vector<int>({2}));
}

TEST_CASE("generation input appends the flattened meta block") {
    auto corpus = generate_corpus(tiny_cfg(2));
    const auto& d = corpus.dialogs[0];
    // Find the priced-reply turn: slots {color, price, type}.
    int turn = -1;
    for (size_t k = 0; k < d.turns.size(); ++k)
        if (d.turns[k].slot_values.count("price") && d.turns[k].slot_values.count("color"))
            turn = static_cast<int>(k);
    REQUIRE(turn >= 0);
    auto seq = build_generation_input(d, turn, corpus.vocab, 192);
    const auto& slots = d.turns[turn].slot_values;
    std::vector<int> expect_tail = {Vocabulary::meta_id()};
    for (const auto& [k, vvalue] : slots) {
        expect_tail.push_back(corpus.vocab.id(k));
        expect_tail.push_back(corpus.vocab.id(":"));
        for (const auto& w : split_words(vvalue)) expect_tail.push_back(corpus.vocab.id(w));
    }
    expect_tail.push_back(Vocabulary::res_id());
    REQUIRE(seq.length() >= static_cast<int>(expect_tail.size()));
    for (size_t i = 0; i < expect_tail.size(); ++i)
        CHECK(seq.ids[seq.ids.size() - expect_tail.size() + i] == expect_tail[i]);
    // Keys arrive in sorted order: color before price before type.
    auto seq2 = build_generation_input(d, turn, corpus.vocab, 192);
    CHECK(seq.ids == seq2.ids);

    // Meta ablation keeps the bare markers.
    auto bare = build_generation_input(d, turn, corpus.vocab, 192, 28, false);
    int n = bare.length();
    CHECK(bare.ids[n - 2] == Vocabulary::meta_id());
    CHECK(bare.ids[n - 1] == Vocabulary::res_id());
}

TEST_CASE("generation target is the system utterance plus terminator") {
    auto corpus = generate_corpus(tiny_cfg(1));
    const auto& t = corpus.dialogs[0].turns[0];
    auto target = generation_target(t, corpus.vocab);
    auto words = split_words(t.system_utterance);
    REQUIRE(target.size() == words.size() + 1);
    CHECK(target.back() == Vocabulary::eos_id());
    for (size_t i = 0; i < words.size(); ++i) CHECK(target[i] == corpus.vocab.id(words[i]));
}

TEST_CASE("base64 round trips arbitrary bytes") {
    Rng rng(99);
    for (int len = 0; len < 40; ++len) {
        std::vector<uint8_t> data(len);
        for (auto& b : data) b = static_cast<uint8_t>(rng.next_u64() & 255);
        CHECK(base64_decode(base64_encode(data)) == data);
    }
    CHECK(base64_encode({}) == "");
    CHECK_THROWS_AS(base64_decode("abc"), ParseError);
    CHECK_THROWS_AS(base64_decode("ab!!"), ParseError);
}

TEST_CASE("corpus save/load round trip is lossless") {
    auto corpus = generate_corpus(tiny_cfg(3));
    std::string path = "corpus_roundtrip_test.json";
    save_corpus(corpus, path);
    auto loaded = load_corpus(path);
    CHECK(corpus_to_json(corpus).dump() == corpus_to_json(loaded).dump());
    CHECK(loaded.vocab.tokens() == corpus.vocab.tokens());
    // Pixels survive exactly (everything is quantized to 8-bit levels).
    CHECK(loaded.scenes[0].background.pix == corpus.scenes[0].background.pix);
    std::remove(path.c_str());
}

TEST_CASE("loader rejects dangling object references by id") {
    auto corpus = generate_corpus(tiny_cfg(1));
    auto doc = corpus_to_json(corpus);
    doc["dialogs"][0]["turns"][0]["user_object_ids"] = {12345};
    doc["dialogs"][0]["mentioned_object_ids"].push_back(12345);
    try {
        corpus_from_json(doc);
        FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
        CHECK(std::string(e.what()).find("12345") != std::string::npos);
    }
}

TEST_CASE("loader rejects malformed documents with diagnostics") {
    std::string path = "corpus_malformed_test.json";
    {
        std::ofstream f(path);
        f << "{not json at all";
    }
    CHECK_THROWS_AS(load_corpus(path), ParseError);
    std::remove(path.c_str());

    auto corpus = generate_corpus(tiny_cfg(1));
    auto doc = corpus_to_json(corpus);
    doc["scenes"][0].erase("objects");
    try {
        corpus_from_json(doc);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("objects") != std::string::npos);
    }

    auto doc2 = corpus_to_json(corpus);
    doc2["scenes"][0]["background"]["pixels"] = "AAAA";  // wrong payload size
    CHECK_THROWS_AS(corpus_from_json(doc2), ParseError);
}

TEST_CASE("empty dialog list loads as a valid corpus") {
    auto corpus = generate_corpus(tiny_cfg(1));
    auto doc = corpus_to_json(corpus);
    doc["dialogs"] = nlohmann::json::array();
    doc["splits"] = {{"train", nlohmann::json::array()},
                     {"dev", nlohmann::json::array()},
                     {"test", nlohmann::json::array()}};
    auto loaded = corpus_from_json(doc);
    CHECK(loaded.dialogs.empty());
    CHECK(loaded.scenes.size() == 1);
}

TEST_CASE("turn templates cover the coref category spectrum") {
    // At the follow-up turn the gold set must equal the previous system set,
    // and spare objects are never listed by the opening inventory.
    auto corpus = generate_corpus(tiny_cfg(30));
    int followups = 0, fresh = 0;
    for (const auto& d : corpus.dialogs) {
        const auto& inventory = d.turns[0];
        CHECK(inventory.system_object_ids.size() == 3);
        for (size_t k = 1; k < d.turns.size(); ++k) {
            const auto& t = d.turns[k];
            if (t.user_utterance.rfind("and what about", 0) == 0) {
                CHECK(t.user_object_ids == d.turns[k - 1].system_object_ids);
                ++followups;
            }
            bool fresh_query = t.user_utterance.rfind("do you have", 0) == 0 ||
                               t.user_utterance.rfind("i am looking", 0) == 0;
            if (fresh_query) {
                REQUIRE(t.user_object_ids.size() == 1);
                // Target was never referenced by any earlier system turn.
                for (size_t j = 0; j < k; ++j)
                    for (int id : d.turns[j].system_object_ids)
                        CHECK(id != t.user_object_ids[0]);
                ++fresh;
            }
        }
    }
    CHECK(followups > 0);
    CHECK(fresh > 0);
}
