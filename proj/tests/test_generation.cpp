#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "simmc/generation.hpp"
#include "test_util.hpp"

using namespace simmc;

namespace {

Corpus tiny_corpus(uint64_t seed = 11, int n_scenes = 8) {
    CorpusConfig cfg;
    cfg.seed = seed;
    cfg.n_scenes = n_scenes;
    return generate_corpus(cfg);
}

}  // namespace

TEST_CASE("teacher forcing aligns targets with the reply positions") {
    auto corpus = tiny_corpus();
    auto model = init_gen_model(default_gen_config(corpus.vocab.size()), 7, "init:gen");
    const Dialog& d = corpus.dialogs[0];
    GenExample ex{d.dialog_id, 1, false};

    auto fwd = gen_forward(model, corpus, ex, nullptr);
    auto prefix = build_generation_input(d, 1, corpus.vocab, model.cfg.dec.max_len,
                                         model.cfg.reserve, true);
    auto target = generation_target(d.turns[1], corpus.vocab);

    REQUIRE(fwd.prefix_len == prefix.length());
    REQUIRE(prefix.ids[prefix.length() - 1] == Vocabulary::res_id());
    REQUIRE(fwd.logits->shape ==
            Shape{prefix.length() + static_cast<int>(target.size()) - 1, corpus.vocab.size()});

    int active = 0;
    for (size_t i = 0; i < fwd.active.size(); ++i) active += fwd.active[i];
    REQUIRE(active == static_cast<int>(target.size()));
    for (size_t j = 0; j < target.size(); ++j) {
        int pos = fwd.prefix_len - 1 + static_cast<int>(j);
        REQUIRE(fwd.active[pos] == 1);
        REQUIRE(fwd.targets[pos] == target[j]);
    }
    for (int i = 0; i < fwd.prefix_len - 1; ++i) REQUIRE(fwd.active[i] == 0);
}

TEST_CASE("an untrained model scores near the uniform baseline") {
    auto corpus = tiny_corpus();
    auto model = init_gen_model(default_gen_config(corpus.vocab.size()), 7, "init:gen");
    std::vector<int> ids{corpus.dialogs[0].dialog_id, corpus.dialogs[1].dialog_id};
    auto ev = evaluate_generation(model, corpus, collect_gen_examples(corpus, ids, false));
    double uniform = std::log(static_cast<double>(corpus.vocab.size()));
    REQUIRE(ev.loss > 0.9 * uniform);
    REQUIRE(ev.loss < 1.1 * uniform);
}

TEST_CASE("the crop term preserves causal prefix equivalence") {
    auto corpus = tiny_corpus();
    auto model = init_gen_model(default_gen_config(corpus.vocab.size()), 7, "init:gen");
    const Dialog& d = corpus.dialogs[0];
    GenExample ex{d.dialog_id, 1, false};
    REQUIRE(!gen_condition_objects(d, ex).empty());

    // full teacher-forced pass vs. a one-step pass over just the prefix
    auto fwd = gen_forward(model, corpus, ex, nullptr);
    auto prefix = build_generation_input(d, 1, corpus.vocab, model.cfg.dec.max_len,
                                         model.cfg.reserve, true);
    auto hidden = lm_forward(prefix, model.params, model.cfg.dec, nullptr, "dec.");
    auto last = row(hidden, prefix.length() - 1);
    std::vector<TensorPtr> crops;
    const SceneRecord& sc = corpus.scene(d.scene_id);
    for (int id : gen_condition_objects(d, ex))
        crops.push_back(encode_image(crop_object(sc, id), model.params, model.cfg.image, nullptr,
                                     "img.").cls);
    last = add(last, matmul(mean_vecs(crops), model.params.get("gen.wo")));
    auto step_logits = matmul(last, model.params.get("gen.w4"));

    for (int v = 0; v < corpus.vocab.size(); ++v) {
        double full = fwd.logits->values[(fwd.prefix_len - 1) * corpus.vocab.size() + v];
        REQUIRE(std::abs(full - step_logits->values[v]) <= 1e-9);
    }
}

TEST_CASE("user-side inputs end with bare markers and shift the conditioning") {
    auto corpus = tiny_corpus();
    auto model = init_gen_model(default_gen_config(corpus.vocab.size()), 7, "init:gen");
    const Dialog& d = corpus.dialogs[0];

    auto seq = build_user_generation_input(d, 2, corpus.vocab, 192, 28);
    REQUIRE(seq.ids[seq.length() - 2] == Vocabulary::meta_id());
    REQUIRE(seq.ids[seq.length() - 1] == Vocabulary::res_id());

    GenExample ex{d.dialog_id, 2, true};
    REQUIRE(gen_condition_objects(d, ex) == d.turns[1].system_object_ids);
    GenExample first{d.dialog_id, 0, true};
    REQUIRE(gen_condition_objects(d, first).empty());

    auto fwd = gen_forward(model, corpus, ex, nullptr);
    auto words = split_words(d.turns[2].user_utterance);
    int active = 0;
    for (auto a : fwd.active) active += a;
    REQUIRE(active == static_cast<int>(words.size()) + 1);
    REQUIRE(fwd.targets[fwd.prefix_len - 1] == corpus.vocab.id(words[0]));
    REQUIRE(fwd.targets[fwd.active.size() - 1] == Vocabulary::eos_id());
}

TEST_CASE("greedy decoding is deterministic and breaks ties downward") {
    auto corpus = tiny_corpus();
    auto model = init_gen_model(default_gen_config(corpus.vocab.size()), 7, "init:gen");
    int did = corpus.dialogs[0].dialog_id;

    auto a = greedy_decode(model, corpus, did, 1, 8);
    auto b = greedy_decode(model, corpus, did, 1, 8);
    REQUIRE(a == b);
    REQUIRE(a.size() <= 8);

    // all-zero weights tie every logit; the lowest id must win each step
    auto zero = init_gen_model(default_gen_config(corpus.vocab.size()), 7, "init:gen");
    for (auto& e : zero.params.entries())
        std::fill(e.param->values.begin(), e.param->values.end(), 0.0);
    auto z = greedy_decode(zero, corpus, did, 1, 5);
    REQUIRE(z == std::vector<int>{0, 0, 0, 0, 0});

    REQUIRE_THROWS_AS(greedy_decode(model, corpus, did, 1, 0), ConfigError);
}

TEST_CASE("corpus bleu over greedy replies stays in range") {
    auto corpus = tiny_corpus();
    auto model = init_gen_model(default_gen_config(corpus.vocab.size()), 7, "init:gen");
    double b = evaluate_generation_bleu(model, corpus, corpus.splits.dev, 8);
    REQUIRE(b >= 0.0);
    REQUIRE(b <= 1.0);
    REQUIRE(b == evaluate_generation_bleu(model, corpus, corpus.splits.dev, 8));
}

TEST_CASE("a short run trains deterministically and stays finite") {
    auto corpus = tiny_corpus();
    auto run = [&]() {
        auto cfg = default_gen_config(corpus.vocab.size());
        cfg.flags.user_augmentation = true;
        auto model = init_gen_model(cfg, 7, "init:gen");
        TrainOptions opts;
        opts.epochs = 1;
        auto dev = train_generator(model, corpus, opts);
        return std::make_pair(std::move(model), dev);
    };
    auto [m1, d1] = run();
    auto [m2, d2] = run();
    REQUIRE(std::isfinite(d1.loss));
    REQUIRE(d1.loss == d2.loss);
    for (size_t i = 0; i < m1.params.size(); ++i)
        REQUIRE(m1.params.entries()[i].param->values == m2.params.entries()[i].param->values);
    REQUIRE(m1.params.step_count > 0);
}

TEST_CASE("fine-tune initialization reuses the crop encoder only") {
    auto corpus = tiny_corpus();
    auto pre = init_matching_model(default_matching_config(corpus.vocab.size()), 7, "init:itm");
    GenFlags flags;
    auto model = init_gen_from_matching(pre, flags, 7);
    REQUIRE(model.params.get("img.patch_proj")->values == pre.params.get("img.patch_proj")->values);
    REQUIRE(model.params.has("dec.tok_embed"));
    REQUIRE(model.params.has("gen.wo"));
    REQUIRE(model.params.has("gen.w4"));
    REQUIRE(!model.params.has("head.wt"));
    REQUIRE(!model.params.has("text.tok_embed"));
}
