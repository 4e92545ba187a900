#pragma once

// Multimodal coreference: for each user turn, decide which scene objects the
// utterance refers to. A matching head scores (context, object) pairs, an
// utterance head gates turns that reference nothing, and a per-system-turn
// head marks which previous system turns the utterance builds on. Inference
// combines head outputs with a rule table over object categories.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "simmc/corpus.hpp"
#include "simmc/encoder.hpp"
#include "simmc/errors.hpp"
#include "simmc/metrics.hpp"
#include "simmc/pretrain.hpp"
#include "simmc/train_util.hpp"

namespace simmc {

enum class CorefVariant { PlusM, MinusM, OnlyS, Combined };

inline const char* variant_name(CorefVariant v) {
    switch (v) {
        case CorefVariant::PlusM: return "plus_m";
        case CorefVariant::MinusM: return "minus_m";
        case CorefVariant::OnlyS: return "only_s";
        default: return "combined";
    }
}

// Category of a candidate object relative to the predicted-relevant system
// turns: referenced by a relevant turn, referenced only by irrelevant turns,
// or never shown by the system at all.
enum class ObjCategory { Related, Unrelated, Others };

struct CorefFlags {
    bool mention_inform = true;         // restrict training candidates to mentioned objects
    bool utterance_head = true;         // gate turns predicted to reference nothing
    bool system_head = true;            // predict per-system-turn relevance
    bool system_augmentation = true;    // also train on system utterances as queries
};

struct CorefConfig {
    EncoderConfig text, image;
    int d_joint = 64;
    double score_scale = 100.0;
    CorefFlags flags;

    void validate() const {
        text.validate();
        image.validate();
        if (d_joint < 1) throw ConfigError("d_joint must be positive");
        if (!(score_scale > 0.0)) throw ConfigError("score_scale must be positive");
    }
};

inline CorefConfig default_coref_config(int vocab) {
    CorefConfig c;
    c.text.vocab = vocab;
    c.text.max_len = 160;
    c.image.max_len = 65;
    return c;
}

// "text.*" / "img.*" encoders plus "match.wt" / "match.wv" (pair scoring),
// "utt.w" (references-anything head) and "sys.w" (system-turn relevance head).
struct CorefModel {
    CorefConfig cfg;
    ParameterSet params;
};

inline void add_coref_heads(CorefModel& m, Rng& rng) {
    m.params.add("match.wt", randn({m.cfg.text.d, m.cfg.d_joint}, rng));
    m.params.add("match.wv", randn({m.cfg.image.d, m.cfg.d_joint}, rng));
    m.params.add("utt.w", randn({m.cfg.text.d, 2}, rng));
    m.params.add("sys.w", randn({m.cfg.text.d, 2}, rng));
}

inline CorefModel init_coref_model(const CorefConfig& cfg, uint64_t seed,
                                   const std::string& stream) {
    cfg.validate();
    CorefModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(seed, stream));
    ParameterSet text = init_text_encoder(cfg.text, rng);
    ParameterSet img = init_image_encoder(cfg.image, rng);
    m.params.adopt("text.", text);
    m.params.adopt("img.", img);
    add_coref_heads(m, rng);
    return m;
}

inline CorefModel init_coref_from_matching(const MatchingModel& pre, const CorefFlags& flags,
                                           uint64_t seed) {
    CorefModel m;
    m.cfg.text = pre.cfg.text;
    m.cfg.image = pre.cfg.image;
    m.cfg.flags = flags;
    Rng rng(derive_seed(seed, "init:coref-heads"));
    for (const auto& e : pre.params.entries()) {
        if (e.name.rfind("head.", 0) == 0) continue;
        m.params.add(e.name, tensor(e.param->shape, e.param->values));
    }
    add_coref_heads(m, rng);
    return m;
}

// Scene backgrounds are encoded once with the initial weights and then held
// fixed, so candidate scoring only pays for the small crop encoder.
using BackgroundFeatures = std::map<int, std::vector<double>>;

inline BackgroundFeatures compute_background_features(const Corpus& corpus,
                                                      const ParameterSet& params,
                                                      const EncoderConfig& image_cfg,
                                                      const std::string& prefix = "img.") {
    BackgroundFeatures out;
    for (const auto& sc : corpus.scenes)
        out[sc.scene_id] = encode_image(sc.background, params, image_cfg, nullptr, prefix).cls->values;
    return out;
}

// The inference rule table, kept pure so it can be enumerated exhaustively.
// An utterance gated off matches nothing; objects the system referenced only
// in irrelevant turns are never matched. "primary" is the mention-informed
// model's score, "secondary" the unrestricted model's.
inline bool decide_match(CorefVariant v, ObjCategory c, double primary, double secondary,
                         bool utterance_positive, double threshold = 0.5) {
    if (!utterance_positive) return false;
    if (c == ObjCategory::Unrelated) return false;
    switch (v) {
        case CorefVariant::PlusM:
            return c == ObjCategory::Related && primary >= threshold;
        case CorefVariant::MinusM:
            return c == ObjCategory::Related || secondary >= threshold;
        case CorefVariant::OnlyS:
            return c == ObjCategory::Related;
        default:  // Combined
            return c == ObjCategory::Related ? primary >= threshold : secondary >= threshold;
    }
}

// Objects shown in turns marked relevant become Related; shown elsewhere,
// Unrelated; never shown, Others. `relevant` maps dialog turn index -> the
// system head's verdict; turns missing from the map count as irrelevant.
inline std::map<int, ObjCategory> categorize_objects(const SceneRecord& scene, const Dialog& d,
                                                     int upto_turn,
                                                     const std::map<int, bool>& relevant) {
    std::map<int, ObjCategory> out;
    for (const auto& obj : scene.objects) out[obj.object_id] = ObjCategory::Others;
    for (int t = 0; t < upto_turn && t < static_cast<int>(d.turns.size()); ++t) {
        auto it = relevant.find(t);
        bool rel = it != relevant.end() && it->second;
        for (int id : d.turns[t].system_object_ids) {
            auto slot = out.find(id);
            if (slot == out.end()) continue;
            if (rel)
                slot->second = ObjCategory::Related;
            else if (slot->second == ObjCategory::Others)
                slot->second = ObjCategory::Unrelated;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

// score = sigmoid(s cos(wt' t_cls, wv' (o_cls + frozen background)))
inline TensorPtr coref_pair_logit(const CorefModel& m, const TensorPtr& t_cls,
                                  const TensorPtr& o_cls, const std::vector<double>& bg,
                                  Tape* tape) {
    if (static_cast<int>(bg.size()) != m.cfg.image.d)
        throw ShapeError("background feature size mismatch");
    auto o_rep = add(o_cls, tensor({m.cfg.image.d}, bg), tape);
    return matching_logit(t_cls, o_rep, m.params.get("match.wt"), m.params.get("match.wv"),
                          m.cfg.score_scale, tape);
}

struct CorefEncoded {
    TensorPtr cls;
    std::vector<TensorPtr> systems;
    std::vector<int> system_turns;
};

inline CorefEncoded coref_encode_context(const CorefModel& m, const Corpus& corpus, int dialog_id,
                                         int upto_turn, bool include_current_user, Tape* tape) {
    const Dialog& d = corpus.dialog(dialog_id);
    auto seq = build_context(d, upto_turn, include_current_user, corpus.vocab, m.cfg.text.max_len);
    auto enc = encode_text(seq, m.params, m.cfg.text, tape, "text.");
    return {enc.cls, enc.systems, enc.system_turns};
}

inline TensorPtr coref_object_cls(const CorefModel& m, const SceneRecord& scene, int object_id,
                                  Tape* tape) {
    return encode_image(crop_object(scene, object_id), m.params, m.cfg.image, tape, "img.").cls;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

// One query utterance. Plain examples are user turns (context up to and
// including the user utterance); augmented ones are system utterances used as
// extra queries, which skip the system-relevance loss.
struct CorefExample {
    int dialog_id = 0;
    int turn = 0;
    bool augmented = false;
    std::vector<int> gold;
};

inline std::vector<CorefExample> collect_coref_examples(const Corpus& corpus,
                                                        const std::vector<int>& dialog_ids,
                                                        bool system_augmentation) {
    std::vector<CorefExample> out;
    for (int did : dialog_ids) {
        const Dialog& d = corpus.dialog(did);
        for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
            out.push_back({did, t, false, d.turns[t].user_object_ids});
            if (system_augmentation)
                out.push_back({did, t, true, d.turns[t].system_object_ids});
        }
    }
    return out;
}

// Candidates for one training example: every mentioned object plus a couple
// of distractors when mention-informed, otherwise the whole scene.
inline std::vector<int> training_candidates(const Corpus& corpus, const CorefExample& ex,
                                            bool mention_inform, int n_extra, Rng& rng) {
    const Dialog& d = corpus.dialog(ex.dialog_id);
    const SceneRecord& sc = corpus.scene(d.scene_id);
    std::vector<int> out;
    if (!mention_inform) {
        for (const auto& obj : sc.objects) out.push_back(obj.object_id);
        return out;
    }
    out = d.mentioned_object_ids;
    std::sort(out.begin(), out.end());
    std::vector<int> rest;
    for (const auto& obj : sc.objects)
        if (std::find(out.begin(), out.end(), obj.object_id) == out.end())
            rest.push_back(obj.object_id);
    int take = std::min<int>(n_extra, static_cast<int>(rest.size()));
    if (take > 0)
        for (int p : rng.sample_indices(static_cast<int>(rest.size()), take))
            out.push_back(rest[p]);
    return out;
}

// Mean of the three head losses present for this example. Counts per-candidate
// decisions into `correct`/`total` for the logged proxy accuracy.
inline TensorPtr coref_example_loss(const CorefModel& m, const Corpus& corpus,
                                    const CorefExample& ex, const std::vector<int>& candidates,
                                    const BackgroundFeatures& bg, Tape* tape, int* correct,
                                    int* total) {
    const Dialog& d = corpus.dialog(ex.dialog_id);
    const SceneRecord& sc = corpus.scene(d.scene_id);
    auto bg_it = bg.find(d.scene_id);
    if (bg_it == bg.end()) throw DataError("missing background features for scene");

    auto enc = ex.augmented
                   ? coref_encode_context(m, corpus, ex.dialog_id, ex.turn + 1, false, tape)
                   : coref_encode_context(m, corpus, ex.dialog_id, ex.turn, true, tape);

    if (candidates.empty()) throw ContractError("coref example needs candidates");
    std::vector<TensorPtr> losses;
    std::vector<TensorPtr> cand_losses;
    for (int id : candidates) {
        int label = std::find(ex.gold.begin(), ex.gold.end(), id) != ex.gold.end();
        auto z = coref_pair_logit(m, enc.cls, coref_object_cls(m, sc, id, tape), bg_it->second,
                                  tape);
        if (correct) {
            *correct += (z->values[0] >= 0.0) == (label == 1);
            *total += 1;
        }
        cand_losses.push_back(bce_logits_loss(z, label, tape));
    }
    losses.push_back(scale(sum(vec_concat(cand_losses, tape), tape), 1.0 / cand_losses.size(), tape));

    if (m.cfg.flags.utterance_head) {
        int label = ex.gold.empty() ? 0 : 1;
        losses.push_back(ce_loss(matmul(enc.cls, m.params.get("utt.w"), tape), label, tape));
    }

    if (!ex.augmented && m.cfg.flags.system_head && !enc.systems.empty()) {
        std::vector<TensorPtr> sys_losses;
        for (size_t k = 0; k < enc.systems.size(); ++k) {
            int turn_idx = enc.system_turns[k];
            if (turn_idx >= ex.turn) continue;  // only previous system turns carry labels
            const auto& shown = d.turns[turn_idx].system_object_ids;
            int label = 0;
            for (int id : shown)
                label = label ||
                        std::find(ex.gold.begin(), ex.gold.end(), id) != ex.gold.end();
            sys_losses.push_back(
                ce_loss(matmul(enc.systems[k], m.params.get("sys.w"), tape), label, tape));
        }
        if (!sys_losses.empty())
            losses.push_back(scale(sum(vec_concat(sys_losses, tape), tape), 1.0 / sys_losses.size(), tape));
    }

    return scale(sum(vec_concat(losses, tape), tape), 1.0 / losses.size(), tape);
}

inline LossAcc evaluate_coref_loss(const CorefModel& m, const Corpus& corpus,
                                   const std::vector<CorefExample>& examples,
                                   const BackgroundFeatures& bg) {
    if (examples.empty()) throw EvalError("no examples to evaluate");
    LossAcc ev;
    int correct = 0, total = 0;
    Rng rng(derive_seed(0, "coref-eval"));  // candidates are scene-wide, rng unused
    for (const auto& ex : examples) {
        auto cands = training_candidates(corpus, ex, false, 0, rng);
        ev.loss +=
            coref_example_loss(m, corpus, ex, cands, bg, nullptr, &correct, &total)->values[0];
    }
    ev.loss /= static_cast<double>(examples.size());
    ev.accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    return ev;
}

inline LossAcc train_coref(CorefModel& model, const Corpus& corpus, const BackgroundFeatures& bg,
                           const TrainOptions& opts) {
    model.cfg.validate();
    if (opts.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (opts.batch < 1) throw ConfigError("batch must be >= 1");
    const CorefFlags& flags = model.cfg.flags;
    auto train_examples =
        collect_coref_examples(corpus, corpus.splits.train, flags.system_augmentation);
    if (train_examples.empty()) throw DataError("no coref examples in the training split");
    auto dev_examples = collect_coref_examples(corpus, corpus.splits.dev, false);
    if (dev_examples.empty()) throw DataError("no coref examples in the dev split");

    TrainLogger logger(opts.log_path);
    const int64_t total_steps =
        std::max<int64_t>(1, opts.epochs * steps_per_epoch(train_examples.size(), opts.batch));
    const int64_t warmup = static_cast<int64_t>(opts.warmup_frac * static_cast<double>(total_steps));

    AdamConfig adam;
    adam.lr = opts.lr;
    adam.weight_decay = opts.weight_decay;
    adam.clip_norm = opts.clip_norm;

    ParamSnapshot last_good = snapshot(model.params);
    LossAcc dev = evaluate_coref_loss(model, corpus, dev_examples, bg);
    logger.log(0, "dev", dev.loss, dev.accuracy);

    for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
        Rng rng(derive_seed(opts.seed, "epoch:coref:" + std::to_string(epoch)));
        auto examples = train_examples;
        rng.shuffle(examples);

        double loss_sum = 0.0;
        int64_t windows = 0;
        int correct = 0, total = 0;
        try {
            for (size_t start = 0; start < examples.size(); start += opts.batch) {
                std::vector<int> window;
                for (size_t i = start; i < examples.size() && i < start + opts.batch; ++i)
                    window.push_back(static_cast<int>(i));
                adam.lr = warmup_linear_lr(std::min(model.params.step_count, total_steps - 1),
                                           warmup, total_steps, opts.lr);
                loss_sum += accumulate_and_step(
                    model.params, window,
                    [&](int i, Tape& tape) {
                        const CorefExample& ex = examples[i];
                        auto cands =
                            training_candidates(corpus, ex, flags.mention_inform, 2, rng);
                        return coref_example_loss(model, corpus, ex, cands, bg, &tape, &correct,
                                                  &total);
                    },
                    adam);
                ++windows;
            }
        } catch (const TrainingAbort&) {
            restore(model.params, last_good);
            throw;
        }
        logger.log(epoch, "train", loss_sum / static_cast<double>(windows),
                   total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0);
        dev = evaluate_coref_loss(model, corpus, dev_examples, bg);
        logger.log(epoch, "dev", dev.loss, dev.accuracy);
        last_good = snapshot(model.params);
    }
    return dev;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

// Matched object ids for one user turn. PlusM / OnlyS read only the primary
// model; MinusM only the secondary; Combined gates and categorizes with the
// primary and scores Others with the secondary. Null models are only legal
// for channels the variant never reads.
inline std::vector<int> predict_references(const CorefModel* primary, const CorefModel* secondary,
                                           const Corpus& corpus,
                                           const BackgroundFeatures* bg_primary,
                                           const BackgroundFeatures* bg_secondary, int dialog_id,
                                           int turn, CorefVariant variant,
                                           double threshold = 0.5) {
    const bool need_primary = variant != CorefVariant::MinusM;
    const bool need_secondary =
        variant == CorefVariant::MinusM || variant == CorefVariant::Combined;
    if (need_primary && (!primary || !bg_primary))
        throw ContractError("variant requires the mention-informed model");
    if (need_secondary && (!secondary || !bg_secondary))
        throw ContractError("variant requires the unrestricted model");

    const CorefModel& gate_model = need_primary ? *primary : *secondary;
    const Dialog& d = corpus.dialog(dialog_id);
    const SceneRecord& sc = corpus.scene(d.scene_id);

    auto enc = coref_encode_context(gate_model, corpus, dialog_id, turn, true, nullptr);

    bool utterance_positive = true;
    if (gate_model.cfg.flags.utterance_head) {
        auto logits = matmul(enc.cls, gate_model.params.get("utt.w"));
        utterance_positive = logits->values[1] > logits->values[0];
    }

    std::map<int, bool> relevant;
    for (size_t k = 0; k < enc.systems.size(); ++k) {
        if (enc.system_turns[k] >= turn) continue;
        bool rel = true;
        if (gate_model.cfg.flags.system_head) {
            auto logits = matmul(enc.systems[k], gate_model.params.get("sys.w"));
            rel = logits->values[1] > logits->values[0];
        }
        relevant[enc.system_turns[k]] = rel;
    }
    auto categories = categorize_objects(sc, d, turn, relevant);

    // Score lazily: each channel encodes its own context and crops.
    std::map<int, double> primary_scores, secondary_scores;
    auto fill_scores = [&](const CorefModel& m, const BackgroundFeatures& bg,
                           std::map<int, double>& out) {
        auto it = bg.find(d.scene_id);
        if (it == bg.end()) throw DataError("missing background features for scene");
        auto menc = coref_encode_context(m, corpus, dialog_id, turn, true, nullptr);
        for (const auto& obj : sc.objects) {
            auto z = coref_pair_logit(m, menc.cls, coref_object_cls(m, sc, obj.object_id, nullptr),
                                      it->second, nullptr);
            out[obj.object_id] = sigmoid(z)->values[0];
        }
    };
    const bool primary_scores_needed =
        variant == CorefVariant::PlusM || variant == CorefVariant::Combined;
    if (primary_scores_needed) fill_scores(*primary, *bg_primary, primary_scores);
    if (need_secondary) fill_scores(*secondary, *bg_secondary, secondary_scores);

    std::vector<int> matched;
    for (const auto& obj : sc.objects) {
        int id = obj.object_id;
        double p = primary_scores_needed ? primary_scores[id] : 0.0;
        double s = need_secondary ? secondary_scores[id] : 0.0;
        if (decide_match(variant, categories.at(id), p, s, utterance_positive, threshold))
            matched.push_back(id);
    }
    return matched;
}

// Micro F1 of predicted reference sets over every user turn in the pool.
inline double evaluate_coref_f1(const CorefModel* primary, const CorefModel* secondary,
                                const Corpus& corpus, const BackgroundFeatures* bg_primary,
                                const BackgroundFeatures* bg_secondary,
                                const std::vector<int>& dialog_ids, CorefVariant variant,
                                double threshold = 0.5) {
    std::vector<std::vector<int>> pred, gold;
    for (int did : dialog_ids) {
        const Dialog& d = corpus.dialog(did);
        for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
            pred.push_back(predict_references(primary, secondary, corpus, bg_primary, bg_secondary,
                                              did, t, variant, threshold));
            gold.push_back(d.turns[t].user_object_ids);
        }
    }
    return object_f1(pred, gold);
}

}  // namespace simmc
