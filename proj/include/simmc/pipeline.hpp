#pragma once
// End-to-end commands shared by the command-line tool and the test drivers:
// corpus generation, the two matching pretraining stages, the three
// fine-tuning stages, evaluation with optional prediction exports, greedy
// decoding, and the fixed-seed reproduction run that writes summary.json.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "simmc/checkpoint.hpp"
#include "simmc/coref.hpp"
#include "simmc/corpus_io.hpp"
#include "simmc/disambiguation.hpp"
#include "simmc/generation.hpp"
#include "simmc/metrics.hpp"
#include "simmc/pretrain.hpp"

namespace simmc {

inline const std::vector<int>& split_dialogs(const Corpus& corpus, const std::string& split) {
    if (split == "train") return corpus.splits.train;
    if (split == "dev") return corpus.splits.dev;
    if (split == "test") return corpus.splits.test;
    throw ConfigError("unknown split '" + split + "' (expected train, dev, or test)");
}

inline void require_vocab_match(const Checkpoint& ck, const Corpus& corpus) {
    if (ck.vocab_tokens != corpus.vocab.tokens())
        throw CompatError("checkpoint vocabulary does not match the corpus");
}

// ---------------------------------------------------------------------------
// Coreference bundle: the model plus the frozen scene-background features it
// was trained against. The features ride inside the checkpoint header so a
// reloaded model scores candidates exactly as it did during training.
// ---------------------------------------------------------------------------

inline nlohmann::json background_to_json(const BackgroundFeatures& bg) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [scene_id, values] : bg) j[std::to_string(scene_id)] = values;
    return j;
}

inline BackgroundFeatures background_from_json(const nlohmann::json& j) {
    BackgroundFeatures bg;
    try {
        for (auto it = j.begin(); it != j.end(); ++it)
            bg[std::stoi(it.key())] = it.value().get<std::vector<double>>();
    } catch (const std::exception& e) {
        throw ParseError(std::string("background features: ") + e.what());
    }
    return bg;
}

inline void save_coref_bundle(const std::string& path, const CorefModel& m,
                              const BackgroundFeatures& bg, const Vocabulary& vocab) {
    nlohmann::json cfg = coref_config_to_json(m.cfg);
    cfg["background"] = background_to_json(bg);
    save_checkpoint(path, "coref", cfg, m.params, vocab);
}

struct CorefBundle {
    CorefModel model;
    BackgroundFeatures background;
};

inline CorefBundle load_coref_bundle(const Checkpoint& ck) {
    CorefBundle b;
    b.model = load_coref_model(ck);
    if (!ck.config.contains("background"))
        throw IntegrityError("coreference checkpoint lacks background features");
    b.background = background_from_json(ck.config.at("background"));
    return b;
}

// ---------------------------------------------------------------------------
// Training commands. Each loads or initializes a model, trains it on the
// corpus train split, writes a checkpoint, and returns the final dev
// evaluation.
// ---------------------------------------------------------------------------

inline LossAcc pretrain_command(const Corpus& corpus, MatchObjective objective,
                                const std::string& init_path, LossKind loss, int k_neg,
                                const TrainOptions& opts, const std::string& out_path,
                                double score_scale = 100.0, int d_joint = 64,
                                double hard_neg_frac = 0.0, double attr_drop_frac = 0.0,
                                double rank_weight = 0.0) {
    MatchingModel model;
    if (init_path.empty()) {
        MatchingConfig cfg = default_matching_config(corpus.vocab.size());
        cfg.loss_kind = loss;
        cfg.k_neg = k_neg;
        cfg.score_scale = score_scale;
        // Wider joint projections start random cosines nearer zero, which
        // keeps the scaled sigmoid out of saturation from the first step.
        cfg.d_joint = d_joint;
        cfg.hard_neg_frac = hard_neg_frac;
        cfg.attr_drop_frac = attr_drop_frac;
        cfg.rank_weight = rank_weight;
        model = init_matching_model(cfg, opts.seed,
                                    std::string("init:") + objective_name(objective));
    } else {
        Checkpoint ck = load_checkpoint(init_path);
        require_vocab_match(ck, corpus);
        model = load_matching_model(ck);
        model.cfg.loss_kind = loss;
        model.cfg.k_neg = k_neg;
        model.cfg.score_scale = score_scale;
        model.cfg.hard_neg_frac = hard_neg_frac;
        model.cfg.attr_drop_frac = attr_drop_frac;
        model.cfg.rank_weight = rank_weight;
    }
    LossAcc dev = train_matching(model, corpus, objective, opts);
    if (!out_path.empty()) save_matching_model(out_path, model, objective, corpus.vocab);
    return dev;
}

inline LossAcc train_disamb_command(const Corpus& corpus, const std::string& init_path,
                                    const TrainOptions& opts, const std::string& out_path) {
    DisambModel model;
    if (init_path.empty()) {
        model = init_disamb_model(default_disamb_config(corpus.vocab.size()), opts.seed,
                                  "init:disamb");
    } else {
        Checkpoint ck = load_checkpoint(init_path);
        require_vocab_match(ck, corpus);
        model = init_disamb_from_matching(load_matching_model(ck), opts.seed);
    }
    LossAcc dev = train_disambiguation(model, corpus, opts);
    if (!out_path.empty()) save_disamb_model(out_path, model, corpus.vocab);
    return dev;
}

inline LossAcc train_coref_command(const Corpus& corpus, const std::string& init_path,
                                   const CorefFlags& flags, const TrainOptions& opts,
                                   const std::string& out_path) {
    CorefModel model;
    if (init_path.empty()) {
        CorefConfig cfg = default_coref_config(corpus.vocab.size());
        cfg.flags = flags;
        model = init_coref_model(cfg, opts.seed, "init:coref");
    } else {
        Checkpoint ck = load_checkpoint(init_path);
        require_vocab_match(ck, corpus);
        model = init_coref_from_matching(load_matching_model(ck), flags, opts.seed);
    }
    // Background features are frozen at the initial weights; candidate crops
    // keep training. The bundle preserves exactly what training scored with.
    BackgroundFeatures bg = compute_background_features(corpus, model.params, model.cfg.image);
    LossAcc dev = train_coref(model, corpus, bg, opts);
    if (!out_path.empty()) save_coref_bundle(out_path, model, bg, corpus.vocab);
    return dev;
}

inline LossAcc train_gen_command(const Corpus& corpus, const std::string& init_path,
                                 const GenFlags& flags, const TrainOptions& opts,
                                 const std::string& out_path) {
    GenModel model;
    if (init_path.empty()) {
        GenConfig cfg = default_gen_config(corpus.vocab.size());
        cfg.flags = flags;
        model = init_gen_model(cfg, opts.seed, "init:gen");
    } else {
        Checkpoint ck = load_checkpoint(init_path);
        require_vocab_match(ck, corpus);
        model = init_gen_from_matching(load_matching_model(ck), flags, opts.seed);
    }
    LossAcc dev = train_generator(model, corpus, opts);
    if (!out_path.empty()) save_gen_model(out_path, model, corpus.vocab);
    return dev;
}

// ---------------------------------------------------------------------------
// Evaluation commands. Each returns a metrics object; an optional path
// receives per-example predictions as JSON lines.
// ---------------------------------------------------------------------------

namespace detail {

inline std::ofstream open_predictions(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open predictions file '" + path + "'");
    return out;
}

inline std::vector<std::string> words_of(const std::vector<int>& ids, const Vocabulary& vocab) {
    std::vector<std::string> out;
    for (int id : ids) out.push_back(vocab.token(id));
    return out;
}

}  // namespace detail

inline nlohmann::json evaluate_matching_command(const Corpus& corpus,
                                                const std::string& model_path,
                                                const std::string& split, uint64_t seed) {
    Checkpoint ck = load_checkpoint(model_path);
    require_vocab_match(ck, corpus);
    MatchingModel m = load_matching_model(ck);
    const auto& ids = split_dialogs(corpus, split);
    Rng rng(derive_seed(seed, "eval:" + ck.objective + ":" + split));
    // Evaluation always scores balanced uniform pools (one negative per
    // positive, full text) no matter how the model was trained.
    std::vector<MatchExample> examples;
    if (ck.objective == "itm")
        examples = sample_itm_examples(corpus, detail::split_scene_ids(corpus, ids), 1, rng);
    else
        examples = sample_btm_examples(corpus, ids, 1, rng);
    LossAcc ev = evaluate_matching(m, corpus, examples);
    return {{"task", ck.objective},
            {"split", split},
            {"examples", examples.size()},
            {"loss", ev.loss},
            {"accuracy", ev.accuracy}};
}

inline nlohmann::json evaluate_disamb_command(const Corpus& corpus, const std::string& model_path,
                                              const std::string& split,
                                              const std::string& pred_path = "") {
    Checkpoint ck = load_checkpoint(model_path);
    require_vocab_match(ck, corpus);
    DisambModel m = load_disamb_model(ck);
    auto examples = collect_disamb_examples(corpus, split_dialogs(corpus, split));
    LossAcc ev = evaluate_disamb(m, corpus, examples);
    if (!pred_path.empty()) {
        auto out = detail::open_predictions(pred_path);
        for (const auto& ex : examples) {
            int pred = disamb_predict(disamb_logits(m, corpus, ex, nullptr));
            nlohmann::json line = {{"dialog_id", ex.dialog_id},
                                   {"turn", ex.turn},
                                   {"label", ex.label},
                                   {"predicted", pred}};
            out << line.dump() << "\n";
        }
    }
    return {{"task", "disambiguation"},
            {"split", split},
            {"examples", examples.size()},
            {"loss", ev.loss},
            {"accuracy", ev.accuracy}};
}

// With only the primary model the mention-informed and shown-objects variants
// are reported; adding the unrestricted model enables the remaining two.
inline nlohmann::json evaluate_coref_command(const Corpus& corpus, const std::string& model_path,
                                             const std::string& secondary_path,
                                             const std::string& split,
                                             const std::string& pred_path = "") {
    Checkpoint ck = load_checkpoint(model_path);
    require_vocab_match(ck, corpus);
    CorefBundle primary = load_coref_bundle(ck);
    CorefBundle secondary;
    bool has_secondary = !secondary_path.empty();
    if (has_secondary) {
        Checkpoint ck2 = load_checkpoint(secondary_path);
        require_vocab_match(ck2, corpus);
        secondary = load_coref_bundle(ck2);
    }
    const auto& ids = split_dialogs(corpus, split);

    std::vector<CorefVariant> variants = {CorefVariant::PlusM, CorefVariant::OnlyS};
    if (has_secondary) {
        variants.push_back(CorefVariant::MinusM);
        variants.push_back(CorefVariant::Combined);
    }
    const CorefModel* sec_model = has_secondary ? &secondary.model : nullptr;
    const BackgroundFeatures* sec_bg = has_secondary ? &secondary.background : nullptr;

    nlohmann::json f1 = nlohmann::json::object();
    for (CorefVariant v : variants)
        f1[variant_name(v)] = evaluate_coref_f1(&primary.model, sec_model, corpus,
                                                &primary.background, sec_bg, ids, v);

    if (!pred_path.empty()) {
        auto out = detail::open_predictions(pred_path);
        for (int did : ids) {
            const Dialog& d = corpus.dialog(did);
            for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
                nlohmann::json preds = nlohmann::json::object();
                for (CorefVariant v : variants)
                    preds[variant_name(v)] = predict_references(
                        &primary.model, sec_model, corpus, &primary.background, sec_bg, did, t, v);
                nlohmann::json line = {{"dialog_id", did},
                                       {"turn", t},
                                       {"gold", d.turns[t].user_object_ids},
                                       {"predicted", preds}};
                out << line.dump() << "\n";
            }
        }
    }
    return {{"task", "coref"}, {"split", split}, {"f1", f1}};
}

inline nlohmann::json evaluate_generation_command(const Corpus& corpus,
                                                  const std::string& model_path,
                                                  const std::string& split, int max_new,
                                                  const std::string& pred_path = "") {
    Checkpoint ck = load_checkpoint(model_path);
    require_vocab_match(ck, corpus);
    GenModel m = load_gen_model(ck);
    const auto& ids = split_dialogs(corpus, split);
    LossAcc ev = evaluate_generation(m, corpus, collect_gen_examples(corpus, ids, false));
    double bleu = evaluate_generation_bleu(m, corpus, ids, max_new);
    if (!pred_path.empty()) {
        auto out = detail::open_predictions(pred_path);
        for (int did : ids) {
            const Dialog& d = corpus.dialog(did);
            for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
                auto cand = greedy_decode(m, corpus, did, t, max_new);
                nlohmann::json line = {{"dialog_id", did},
                                       {"turn", t},
                                       {"reference", split_words(d.turns[t].system_utterance)},
                                       {"candidate", detail::words_of(cand, corpus.vocab)}};
                out << line.dump() << "\n";
            }
        }
    }
    return {{"task", "generation"},
            {"split", split},
            {"bleu", bleu},
            {"loss", ev.loss},
            {"accuracy", ev.accuracy}};
}

// Decoded reply for one turn (or every turn when turn < 0).
inline std::vector<std::string> decode_command(const Corpus& corpus, const std::string& model_path,
                                               int dialog_id, int turn, int max_new) {
    Checkpoint ck = load_checkpoint(model_path);
    require_vocab_match(ck, corpus);
    GenModel m = load_gen_model(ck);
    const Dialog& d = corpus.dialog(dialog_id);
    std::vector<int> turns;
    if (turn < 0)
        for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) turns.push_back(t);
    else if (turn < static_cast<int>(d.turns.size()))
        turns.push_back(turn);
    else
        throw DataError("dialog " + std::to_string(dialog_id) + " has no turn " +
                        std::to_string(turn));
    std::vector<std::string> lines;
    for (int t : turns) {
        auto words = detail::words_of(greedy_decode(m, corpus, dialog_id, t, max_new),
                                      corpus.vocab);
        std::string text;
        for (size_t i = 0; i < words.size(); ++i) text += (i ? " " : "") + words[i];
        lines.push_back("turn " + std::to_string(t) + ": " + text);
    }
    return lines;
}

// ---------------------------------------------------------------------------
// Fixed-seed reproduction: corpus, both pretraining stages, all fine-tuned
// heads, and a test-split evaluation of every checkpoint. summary.json holds
// only seed-determined values; wall-clock timings go to a separate log.
// ---------------------------------------------------------------------------

struct ReproConfig {
    uint64_t seed = 7;
    int scenes = 24;
    int epochs_itm = 2;
    int epochs_btm = 1;
    int epochs_disamb = 2;
    int epochs_coref = 1;
    int epochs_gen = 2;
    double lr = 1e-3;
    int batch = 8;
    int max_new = 16;
};

inline nlohmann::json repro_all(const std::string& workdir, const ReproConfig& rc,
                                std::ostream* progress = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(workdir);
    fs::create_directories(workdir + "/logs");
    std::ofstream timings(workdir + "/timings.log");
    if (!timings) throw DataError("cannot open '" + workdir + "/timings.log'");

    auto timed = [&](const std::string& phase, auto&& fn) {
        if (progress) *progress << "[repro] " << phase << "...\n" << std::flush;
        auto t0 = std::chrono::steady_clock::now();
        fn();
        std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
        timings << phase << " " << dt.count() << "s\n" << std::flush;
    };

    CorpusConfig cc;
    cc.seed = rc.seed;
    cc.n_scenes = rc.scenes;
    Corpus corpus;
    timed("gen-data", [&] {
        corpus = generate_corpus(cc);
        save_corpus(corpus, workdir + "/corpus.json");
    });

    auto opts = [&](int epochs, const std::string& log_name) {
        TrainOptions o;
        o.epochs = epochs;
        o.lr = rc.lr;
        o.batch = rc.batch;
        o.seed = rc.seed;
        o.log_path = workdir + "/logs/" + log_name + ".jsonl";
        return o;
    };

    const std::string itm_path = workdir + "/itm.ckpt";
    const std::string btm_path = workdir + "/btm.ckpt";
    const std::string disamb_path = workdir + "/disambiguation.ckpt";
    const std::string coref_informed = workdir + "/coref_informed.ckpt";
    const std::string coref_free = workdir + "/coref_free.ckpt";
    const std::string gen_path = workdir + "/generator.ckpt";

    nlohmann::json dev = nlohmann::json::object();
    timed("pretrain-itm", [&] {
        LossAcc ev = pretrain_command(corpus, MatchObjective::ITM, "", LossKind::BCE, 1,
                                      opts(rc.epochs_itm, "itm"), itm_path);
        dev["itm"] = {{"loss", ev.loss}, {"accuracy", ev.accuracy}};
    });
    timed("pretrain-btm", [&] {
        LossAcc ev = pretrain_command(corpus, MatchObjective::BTM, itm_path, LossKind::BCE, 1,
                                      opts(rc.epochs_btm, "btm"), btm_path);
        dev["btm"] = {{"loss", ev.loss}, {"accuracy", ev.accuracy}};
    });
    timed("train-disambiguation", [&] {
        LossAcc ev =
            train_disamb_command(corpus, itm_path, opts(rc.epochs_disamb, "disamb"), disamb_path);
        dev["disambiguation"] = {{"loss", ev.loss}, {"accuracy", ev.accuracy}};
    });
    timed("train-coref-informed", [&] {
        CorefFlags flags;
        LossAcc ev = train_coref_command(corpus, btm_path, flags,
                                         opts(rc.epochs_coref, "coref_informed"), coref_informed);
        dev["coref_informed"] = {{"loss", ev.loss}, {"accuracy", ev.accuracy}};
    });
    timed("train-coref-free", [&] {
        CorefFlags flags;
        flags.mention_inform = false;
        LossAcc ev = train_coref_command(corpus, btm_path, flags,
                                         opts(rc.epochs_coref, "coref_free"), coref_free);
        dev["coref_free"] = {{"loss", ev.loss}, {"accuracy", ev.accuracy}};
    });
    timed("train-generator", [&] {
        GenFlags flags;
        flags.user_augmentation = true;
        LossAcc ev =
            train_gen_command(corpus, itm_path, flags, opts(rc.epochs_gen, "gen"), gen_path);
        dev["generation"] = {{"loss", ev.loss}, {"accuracy", ev.accuracy}};
    });

    nlohmann::json test = nlohmann::json::object();
    timed("evaluate", [&] {
        test["itm"] = evaluate_matching_command(corpus, itm_path, "test", rc.seed);
        test["btm"] = evaluate_matching_command(corpus, btm_path, "test", rc.seed);
        test["disambiguation"] = evaluate_disamb_command(corpus, disamb_path, "test");
        test["coref"] = evaluate_coref_command(corpus, coref_informed, coref_free, "test");
        test["generation"] =
            evaluate_generation_command(corpus, gen_path, "test", rc.max_new);
    });

    nlohmann::json summary = {{"seed", rc.seed},
                              {"scenes", rc.scenes},
                              {"epochs",
                               {{"itm", rc.epochs_itm},
                                {"btm", rc.epochs_btm},
                                {"disambiguation", rc.epochs_disamb},
                                {"coref", rc.epochs_coref},
                                {"generation", rc.epochs_gen}}},
                              {"lr", rc.lr},
                              {"batch", rc.batch},
                              {"max_new", rc.max_new},
                              {"dev", dev},
                              {"test", test}};
    std::ofstream out(workdir + "/summary.json");
    if (!out) throw DataError("cannot open '" + workdir + "/summary.json'");
    out << summary.dump(2) << "\n";
    return summary;
}

}  // namespace simmc
