#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "simmc/checkpoint.hpp"

using namespace simmc;

namespace {

Corpus tiny_corpus() {
    CorpusConfig cfg;
    cfg.seed = 11;
    cfg.n_scenes = 6;
    return generate_corpus(cfg);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

struct TempFile {
    std::string path;
    explicit TempFile(std::string p) : path(std::move(p)) { std::remove(path.c_str()); }
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("matching checkpoints round trip bit-exactly") {
    auto corpus = tiny_corpus();
    auto model = init_matching_model(default_matching_config(corpus.vocab.size()), 7, "init:itm");
    TempFile f("ck_matching.bin");

    save_matching_model(f.path, model, MatchObjective::ITM, corpus.vocab);
    auto ck = load_checkpoint(f.path);
    REQUIRE(ck.objective == "itm");
    REQUIRE(ck.vocab_tokens == corpus.vocab.tokens());

    auto loaded = load_matching_model(ck);
    REQUIRE(loaded.cfg.text.max_len == model.cfg.text.max_len);
    REQUIRE(loaded.cfg.image.patch == model.cfg.image.patch);
    REQUIRE(loaded.cfg.score_scale == model.cfg.score_scale);
    REQUIRE(loaded.params.size() == model.params.size());
    for (size_t i = 0; i < model.params.size(); ++i) {
        REQUIRE(loaded.params.entries()[i].name == model.params.entries()[i].name);
        REQUIRE(loaded.params.entries()[i].param->values ==
                model.params.entries()[i].param->values);
    }

    // saving the loaded model reproduces the file byte for byte
    TempFile f2("ck_matching_again.bin");
    save_matching_model(f2.path, loaded, MatchObjective::ITM, vocab_from_tokens(ck.vocab_tokens));
    REQUIRE(slurp(f.path) == slurp(f2.path));
}

TEST_CASE("equal models write identical bytes") {
    auto corpus = tiny_corpus();
    auto a = init_matching_model(default_matching_config(corpus.vocab.size()), 7, "init:itm");
    auto b = init_matching_model(default_matching_config(corpus.vocab.size()), 7, "init:itm");
    TempFile fa("ck_eq_a.bin"), fb("ck_eq_b.bin");
    save_matching_model(fa.path, a, MatchObjective::ITM, corpus.vocab);
    save_matching_model(fb.path, b, MatchObjective::ITM, corpus.vocab);
    REQUIRE(slurp(fa.path) == slurp(fb.path));
}

TEST_CASE("the vocabulary reproduces its id mapping or is rejected") {
    auto corpus = tiny_corpus();
    auto v = vocab_from_tokens(corpus.vocab.tokens());
    REQUIRE(v.tokens() == corpus.vocab.tokens());
    REQUIRE(v.id("red") == corpus.vocab.id("red"));

    auto scrambled = corpus.vocab.tokens();
    std::swap(scrambled[10], scrambled[11]);
    REQUIRE_THROWS_AS(vocab_from_tokens(scrambled), CompatError);
}

TEST_CASE("foreign files and wrong versions are refused") {
    TempFile f("ck_bogus.bin");
    spit(f.path, "definitely not a checkpoint\nmore bytes\n");
    REQUIRE_THROWS_AS(load_checkpoint(f.path), CompatError);

    spit(f.path, "");
    REQUIRE_THROWS_AS(load_checkpoint(f.path), IntegrityError);

    // well-formed layout, unsupported version
    nlohmann::json header{{"format_version", 99}, {"objective", "itm"},
                          {"config", nlohmann::json::object()},
                          {"vocab", nlohmann::json::array()},
                          {"params", nlohmann::json::array()}};
    std::string head = header.dump();
    std::string bytes = std::string(kCheckpointMagic) + "\n";
    uint64_t len = head.size();
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
    bytes += head;
    spit(f.path, bytes);
    REQUIRE_THROWS_AS(load_checkpoint(f.path), CompatError);

    REQUIRE_THROWS_AS(load_checkpoint("no_such_file.bin"), DataError);
}

TEST_CASE("truncation and trailing bytes are caught") {
    auto corpus = tiny_corpus();
    auto model = init_matching_model(default_matching_config(corpus.vocab.size()), 7, "init:itm");
    TempFile f("ck_trunc.bin");
    save_matching_model(f.path, model, MatchObjective::ITM, corpus.vocab);
    std::string bytes = slurp(f.path);

    spit(f.path, bytes.substr(0, bytes.size() - 8));
    REQUIRE_THROWS_AS(load_checkpoint(f.path), IntegrityError);

    spit(f.path, bytes.substr(0, 40));  // inside the header
    REQUIRE_THROWS_AS(load_checkpoint(f.path), IntegrityError);

    spit(f.path, bytes + "x");
    REQUIRE_THROWS_AS(load_checkpoint(f.path), IntegrityError);
}

TEST_CASE("typed loaders enforce the objective tag and required heads") {
    auto corpus = tiny_corpus();
    auto model = init_matching_model(default_matching_config(corpus.vocab.size()), 7, "init:itm");
    TempFile f("ck_typed.bin");
    save_matching_model(f.path, model, MatchObjective::BTM, corpus.vocab);
    auto ck = load_checkpoint(f.path);
    REQUIRE(ck.objective == "btm");
    REQUIRE_THROWS_AS(load_disamb_model(ck), CompatError);
    REQUIRE_THROWS_AS(load_coref_model(ck), CompatError);
    REQUIRE_THROWS_AS(load_gen_model(ck), CompatError);
    REQUIRE_NOTHROW(load_matching_model(ck));

    // a matching-tagged file missing its head parameters is rejected
    ParameterSet partial;
    partial.add("text.tok_embed", tensor({4, 4}, 0.0));
    save_checkpoint(f.path, "itm", matching_config_to_json(model.cfg), partial, corpus.vocab);
    auto bad = load_checkpoint(f.path);
    REQUIRE_THROWS_AS(load_matching_model(bad), IntegrityError);
}

TEST_CASE("disambiguation coref and generator checkpoints round trip") {
    auto corpus = tiny_corpus();

    auto disamb = init_disamb_model(default_disamb_config(corpus.vocab.size()), 7, "init:d");
    TempFile fd("ck_disamb.bin");
    save_disamb_model(fd.path, disamb, corpus.vocab);
    auto d2 = load_disamb_model(load_checkpoint(fd.path));
    REQUIRE(d2.params.get("cls.w1")->values == disamb.params.get("cls.w1")->values);

    auto cfg = default_coref_config(corpus.vocab.size());
    cfg.flags.mention_inform = false;
    cfg.flags.system_augmentation = false;
    auto coref = init_coref_model(cfg, 7, "init:c");
    TempFile fc("ck_coref.bin");
    save_coref_model(fc.path, coref, corpus.vocab);
    auto c2 = load_coref_model(load_checkpoint(fc.path));
    REQUIRE(c2.cfg.flags.mention_inform == false);
    REQUIRE(c2.cfg.flags.system_augmentation == false);
    REQUIRE(c2.cfg.flags.utterance_head == true);
    REQUIRE(c2.params.get("sys.w")->values == coref.params.get("sys.w")->values);

    auto gcfg = default_gen_config(corpus.vocab.size());
    gcfg.flags.use_meta = false;
    auto gen = init_gen_model(gcfg, 7, "init:g");
    TempFile fg("ck_gen.bin");
    save_gen_model(fg.path, gen, corpus.vocab);
    auto g2 = load_gen_model(load_checkpoint(fg.path));
    REQUIRE(g2.cfg.flags.use_meta == false);
    REQUIRE(g2.cfg.reserve == gen.cfg.reserve);
    REQUIRE(g2.params.get("gen.w4")->values == gen.params.get("gen.w4")->values);
}
