#pragma once

// Image-text matching pretraining. A text encoder and a patch image encoder
// are trained jointly so that a shared projection head scores description /
// crop pairs (per-object matching) or full-dialog / background pairs
// (scene-level matching) close to their 0/1 labels.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "simmc/corpus.hpp"
#include "simmc/encoder.hpp"
#include "simmc/errors.hpp"
#include "simmc/optim.hpp"
#include "simmc/rng.hpp"
#include "simmc/tensor.hpp"
#include "simmc/train_util.hpp"

namespace simmc {

enum class MatchObjective { ITM, BTM };  // object crops vs. whole backgrounds

inline const char* objective_name(MatchObjective o) {
    return o == MatchObjective::ITM ? "itm" : "btm";
}

struct MatchingConfig {
    EncoderConfig text, image;
    int d_joint = 64;
    double score_scale = 100.0;  // sharpness of the cosine before the sigmoid
    LossKind loss_kind = LossKind::BCE;
    int k_neg = 1;  // negatives drawn per positive pair
    // Fraction of training negatives drawn from same-color objects, so the
    // easy color signal cannot separate every pair on its own.
    double hard_neg_frac = 0.0;
    // Fraction of training pairs whose text keeps a single attribute. Each
    // attribute then has to align with its own pixel evidence instead of
    // hiding behind whichever one separates pairs first.
    double attr_drop_frac = 0.0;
    // Weight of a softmax ranking loss over each positive and its own
    // negatives. Any signal shared by the whole group cancels out of the
    // ranking, so it keeps full pressure on whatever still tells the group's
    // crops apart after the dominant attribute is learned.
    double rank_weight = 0.0;

    void validate() const {
        text.validate();
        image.validate();
        if (d_joint < 1) throw ConfigError("d_joint must be positive");
        if (k_neg < 1) throw ConfigError("k_neg must be >= 1");
        if (!(score_scale > 0.0)) throw ConfigError("score_scale must be positive");
        if (hard_neg_frac < 0.0 || hard_neg_frac > 1.0)
            throw ConfigError("hard_neg_frac must be in [0, 1]");
        if (attr_drop_frac < 0.0 || attr_drop_frac > 1.0)
            throw ConfigError("attr_drop_frac must be in [0, 1]");
        if (rank_weight < 0.0) throw ConfigError("rank_weight must be >= 0");
    }
};

inline MatchingConfig default_matching_config(int vocab) {
    MatchingConfig c;
    c.text.vocab = vocab;
    c.text.max_len = 160;
    c.image.max_len = 65;  // 64 patches + [CLS]; crops use a prefix of the same table
    return c;
}

// Parameters live in one set under "text.", "img." and "head." prefixes so a
// single optimizer step updates everything.
struct MatchingModel {
    MatchingConfig cfg;
    ParameterSet params;
};

inline MatchingModel init_matching_model(const MatchingConfig& cfg, uint64_t seed,
                                         const std::string& stream) {
    cfg.validate();
    if (cfg.text.vocab < 1) throw ConfigError("matching model needs a vocabulary size");
    MatchingModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(seed, stream));
    ParameterSet text = init_text_encoder(cfg.text, rng);
    ParameterSet img = init_image_encoder(cfg.image, rng);
    m.params.adopt("text.", text);
    m.params.adopt("img.", img);
    m.params.add("head.wt", randn({cfg.text.d, cfg.d_joint}, rng));
    m.params.add("head.wv", randn({cfg.image.d, cfg.d_joint}, rng));
    return m;
}

// sigmoid(s * cos(wt't, wv'o)). Orthogonal projections land on exactly 0.5;
// with s large, aligned / opposed projections saturate to hard 1 / 0.
inline TensorPtr matching_logit(const TensorPtr& t_cls, const TensorPtr& o_cls,
                                const TensorPtr& wt, const TensorPtr& wv, double s,
                                Tape* tape = nullptr) {
    auto u = matmul(t_cls, wt, tape);
    auto v = matmul(o_cls, wv, tape);
    return scale(cosine_similarity(u, v, tape), s, tape);
}

inline TensorPtr matching_score(const TensorPtr& t_cls, const TensorPtr& o_cls,
                                const TensorPtr& wt, const TensorPtr& wv, double s,
                                Tape* tape = nullptr) {
    return sigmoid(matching_logit(t_cls, o_cls, wt, wv, s, tape), tape);
}

// Two-class (no-match, match) logits from the single pair logit, for the
// cross-entropy flavor of the loss. Decisions are unchanged: softmax picks
// "match" exactly when the logit is positive.
inline TensorPtr pair_logits(const TensorPtr& logit, Tape* tape = nullptr) {
    return vec_concat({scale(logit, -1.0, tape), logit}, tape);
}

inline TensorPtr matching_loss(const TensorPtr& logit, int label, LossKind kind,
                               Tape* tape = nullptr, double pos_weight = 1.0) {
    if (label != 0 && label != 1) throw LabelError("matching label must be 0 or 1");
    // BCE goes through the fused logit form: with the sharp score scale a
    // wrong pair can sit hundreds of logits from its label, where a
    // sigmoid->bce composition has no gradient left to correct it.
    if (kind == LossKind::BCE) return bce_logits_loss(logit, label, tape, pos_weight);
    auto ce = ce_loss(pair_logits(logit, tape), label, tape);
    return label == 1 && pos_weight != 1.0 ? scale(ce, pos_weight, tape) : ce;
}

// One scored pair. dialog_id >= 0 selects the scene-level flavor: the text is
// the dialog's whole context and the image is scene_id's background. Otherwise
// the text describes text_object and the image is image_object's crop (both
// from scene_id). A non-empty attr restricts the text to that attribute; the
// sampler only assigns attrs that keep the label truthful.
struct MatchExample {
    int dialog_id = -1;
    int scene_id = 0;
    int text_object = -1;
    int image_object = -1;
    int label = 0;
    std::string attr;
};

// Each object appears once as a positive and k_neg times against distinct
// other crops of the same scene. hard_neg_frac of the negative draws prefer
// objects sharing the described color (falling back to any other object), and
// attr_drop_frac of all pairs keep a single attribute in the text — chosen so
// the label stays truthful: any attribute for a positive, a differing one for
// a negative.
inline std::vector<MatchExample> sample_itm_examples(const Corpus& corpus,
                                                     const std::vector<int>& scene_ids,
                                                     int k_neg, Rng& rng,
                                                     double hard_neg_frac = 0.0,
                                                     double attr_drop_frac = 0.0) {
    if (k_neg < 1) throw ConfigError("k_neg must be >= 1");
    if (hard_neg_frac < 0.0 || hard_neg_frac > 1.0)
        throw ConfigError("hard_neg_frac must be in [0, 1]");
    if (attr_drop_frac < 0.0 || attr_drop_frac > 1.0)
        throw ConfigError("attr_drop_frac must be in [0, 1]");

    auto meta = [](const ObjectRecord& o, const std::string& key) {
        auto it = o.visual_meta.find(key);
        return it == o.visual_meta.end() ? std::string() : it->second;
    };
    // Restrict out.back()'s text to one attribute, drawn among keys that keep
    // the label honest. No entropy is consumed when the feature is off.
    auto maybe_drop = [&](std::vector<MatchExample>& out, const SceneRecord& sc) {
        if (attr_drop_frac == 0.0 || !rng.bernoulli(attr_drop_frac)) return;
        MatchExample& ex = out.back();
        const ObjectRecord* text_obj = sc.find_object(ex.text_object);
        const ObjectRecord* img_obj = sc.find_object(ex.image_object);
        std::vector<std::string> keys;
        for (const auto& key : visual_keys()) {
            const std::string value = meta(*text_obj, key);
            if (value.empty()) continue;
            if (ex.label == 0 && value == meta(*img_obj, key)) continue;
            keys.push_back(key);
        }
        if (keys.empty()) return;  // visually identical pair: keep the full text
        ex.attr = keys[rng.uniform_int(0, static_cast<int>(keys.size()) - 1)];
    };

    std::vector<MatchExample> out;
    for (int sid : scene_ids) {
        const SceneRecord& sc = corpus.scene(sid);
        if (static_cast<int>(sc.objects.size()) < k_neg + 1)
            throw DataError("scene " + std::to_string(sid) + " has too few objects for " +
                            std::to_string(k_neg) + " negatives");
        for (const auto& obj : sc.objects) {
            out.push_back({-1, sid, obj.object_id, obj.object_id, 1});
            maybe_drop(out, sc);
            if (hard_neg_frac == 0.0) {
                std::vector<int> others;
                for (const auto& other : sc.objects)
                    if (other.object_id != obj.object_id) others.push_back(other.object_id);
                for (int p : rng.sample_indices(static_cast<int>(others.size()), k_neg)) {
                    out.push_back({-1, sid, obj.object_id, others[p], 0});
                    maybe_drop(out, sc);
                }
                continue;
            }
            std::vector<int> used;
            const std::string& color = obj.visual_meta.at("color");
            for (int k = 0; k < k_neg; ++k) {
                bool prefer_hard = rng.bernoulli(hard_neg_frac);
                std::vector<int> pool, fallback;
                for (const auto& other : sc.objects) {
                    if (other.object_id == obj.object_id) continue;
                    if (std::find(used.begin(), used.end(), other.object_id) != used.end())
                        continue;
                    fallback.push_back(other.object_id);
                    if (other.visual_meta.at("color") == color)
                        pool.push_back(other.object_id);
                }
                if (!prefer_hard || pool.empty()) pool = fallback;
                int pick = pool[rng.uniform_int(0, static_cast<int>(pool.size()) - 1)];
                used.push_back(pick);
                out.push_back({-1, sid, obj.object_id, pick, 0});
                maybe_drop(out, sc);
            }
        }
    }
    return out;
}

// Each dialog's full context is paired with its own background and k_neg
// backgrounds of other scenes from the same pool.
inline std::vector<MatchExample> sample_btm_examples(const Corpus& corpus,
                                                     const std::vector<int>& dialog_ids,
                                                     int k_neg, Rng& rng) {
    if (k_neg < 1) throw ConfigError("k_neg must be >= 1");
    std::vector<int> scene_pool;
    for (int did : dialog_ids) {
        int sid = corpus.dialog(did).scene_id;
        if (std::find(scene_pool.begin(), scene_pool.end(), sid) == scene_pool.end())
            scene_pool.push_back(sid);
    }
    if (static_cast<int>(scene_pool.size()) < k_neg + 1)
        throw DataError("need at least " + std::to_string(k_neg + 1) +
                        " distinct scenes for background negatives");
    std::vector<MatchExample> out;
    for (int did : dialog_ids) {
        const Dialog& d = corpus.dialog(did);
        out.push_back({did, d.scene_id, -1, -1, 1});
        std::vector<int> others;
        for (int sid : scene_pool)
            if (sid != d.scene_id) others.push_back(sid);
        for (int p : rng.sample_indices(static_cast<int>(others.size()), k_neg))
            out.push_back({did, others[p], -1, -1, 0});
    }
    return out;
}

// Pair logit under the current weights; works tape-free for evaluation.
inline TensorPtr matching_forward(const MatchingModel& m, const Corpus& corpus,
                                  const MatchExample& ex, Tape* tape) {
    TokenSequence seq;
    if (ex.dialog_id >= 0) {
        const Dialog& d = corpus.dialog(ex.dialog_id);
        seq = build_context(d, static_cast<int>(d.turns.size()), false, corpus.vocab,
                            m.cfg.text.max_len);
    } else {
        const SceneRecord& sc = corpus.scene(ex.scene_id);
        const ObjectRecord* obj = sc.find_object(ex.text_object);
        if (!obj) throw DataError("unknown object " + std::to_string(ex.text_object));
        seq = build_itm_text(*obj, corpus.vocab, ex.attr);
    }
    auto t = encode_text(seq, m.params, m.cfg.text, tape, "text.");
    const SceneRecord& img_scene = corpus.scene(ex.scene_id);
    RasterImage img = ex.image_object >= 0 ? crop_object(img_scene, ex.image_object)
                                           : img_scene.background;
    auto o = encode_image(img, m.params, m.cfg.image, tape, "img.");
    // Matching pools the whole hidden state instead of taking the [CLS] row:
    // every token and patch then feeds the score directly, so an attribute
    // the attention never routes to the front can still earn its way in.
    return matching_logit(mean_rows(t.hidden, tape), mean_rows(o.hidden, tape),
                          m.params.get("head.wt"), m.params.get("head.wv"),
                          m.cfg.score_scale, tape);
}

inline LossAcc evaluate_matching(const MatchingModel& m, const Corpus& corpus,
                                      const std::vector<MatchExample>& examples) {
    if (examples.empty()) throw EvalError("no matching examples to evaluate");
    LossAcc ev;
    int correct = 0;
    for (const auto& ex : examples) {
        auto z = matching_forward(m, corpus, ex, nullptr);
        ev.loss += matching_loss(z, ex.label, m.cfg.loss_kind)->values[0];
        correct += (z->values[0] >= 0.0) == (ex.label == 1);
    }
    ev.loss /= static_cast<double>(examples.size());
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(examples.size());
    return ev;
}

namespace detail {

inline std::vector<int> split_scene_ids(const Corpus& corpus, const std::vector<int>& dialog_ids) {
    std::vector<int> out;
    for (int did : dialog_ids) {
        int sid = corpus.dialog(did).scene_id;
        if (std::find(out.begin(), out.end(), sid) == out.end()) out.push_back(sid);
    }
    return out;
}

}  // namespace detail

// Trains in place; returns the last dev evaluation (of the freshly initialized
// model when epochs == 0). On a non-finite loss or gradient the weights are
// rolled back to the end of the last completed epoch before rethrowing.
inline LossAcc train_matching(MatchingModel& model, const Corpus& corpus,
                                   MatchObjective objective, const TrainOptions& opts) {
    model.cfg.validate();
    if (opts.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (opts.batch < 1) throw ConfigError("batch must be >= 1");
    const std::string name = objective_name(objective);
    TrainLogger logger(opts.log_path);

    // Hard negatives, attribute dropout, and extra negatives steer training
    // only; held-out pairs stay uniformly sampled full-text pairs with one
    // negative per positive, so dev accuracy keeps meaning the same thing
    // across configs.
    auto sample_pool = [&](const std::vector<int>& dialog_ids, Rng& rng, bool train) {
        const int k = train ? model.cfg.k_neg : 1;
        if (objective == MatchObjective::ITM)
            return sample_itm_examples(corpus, detail::split_scene_ids(corpus, dialog_ids), k, rng,
                                       train ? model.cfg.hard_neg_frac : 0.0,
                                       train ? model.cfg.attr_drop_frac : 0.0);
        return sample_btm_examples(corpus, dialog_ids, k, rng);
    };

    Rng dev_rng(derive_seed(opts.seed, "dev:" + name));
    const auto dev_examples = sample_pool(corpus.splits.dev, dev_rng, false);

    // Training pools arrive as groups of one positive followed by its own
    // negatives; the group is the unit of shuffling, batching and ranking.
    const int group = 1 + model.cfg.k_neg;
    const int per_step = std::max(1, opts.batch / group);

    // Pool size per epoch is fixed by the splits, so the schedule length is
    // known up front.
    size_t epoch_groups = 0;
    {
        Rng probe(derive_seed(opts.seed, "probe:" + name));
        size_t n = sample_pool(corpus.splits.train, probe, true).size();
        if (n % group != 0) throw ContractError("training pool is not group aligned");
        epoch_groups = n / group;
    }
    const int64_t total_steps =
        std::max<int64_t>(1, opts.epochs * steps_per_epoch(epoch_groups, per_step));
    const int64_t warmup = static_cast<int64_t>(opts.warmup_frac * static_cast<double>(total_steps));

    AdamConfig adam;
    adam.lr = opts.lr;
    adam.weight_decay = opts.weight_decay;
    adam.clip_norm = opts.clip_norm;

    ParamSnapshot last_good = snapshot(model.params);
    LossAcc dev = evaluate_matching(model, corpus, dev_examples);
    logger.log(0, "dev", dev.loss, dev.accuracy);

    for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
        Rng rng(derive_seed(opts.seed, "epoch:" + name + ":" + std::to_string(epoch)));
        auto examples = sample_pool(corpus.splits.train, rng, true);
        std::vector<int> order(examples.size() / group);
        for (size_t g = 0; g < order.size(); ++g) order[g] = static_cast<int>(g);
        rng.shuffle(order);

        double loss_sum = 0.0;
        int64_t windows = 0;
        int correct = 0;
        try {
            for (size_t start = 0; start < order.size(); start += per_step) {
                std::vector<int> window(
                    order.begin() + start,
                    order.begin() + std::min(order.size(), start + per_step));
                adam.lr = warmup_linear_lr(std::min(model.params.step_count, total_steps - 1),
                                           warmup, total_steps, opts.lr);
                loss_sum += accumulate_and_step(
                    model.params, window,
                    [&](int g, Tape& tape) {
                        TensorPtr pair_sum;
                        std::vector<TensorPtr> logits;
                        for (int j = 0; j < group; ++j) {
                            const MatchExample& ex = examples[g * group + j];
                            if ((j == 0) != (ex.label == 1))
                                throw ContractError("group does not start with its positive");
                            auto z = matching_forward(model, corpus, ex, &tape);
                            correct += (z->values[0] >= 0.0) == (ex.label == 1);
                            // Positives carry k_neg's worth of weight so
                            // pools with extra negatives stay balanced.
                            auto l = matching_loss(z, ex.label, model.cfg.loss_kind, &tape,
                                                   static_cast<double>(model.cfg.k_neg));
                            pair_sum = pair_sum ? add(pair_sum, l, &tape) : l;
                            logits.push_back(z);
                        }
                        auto loss = scale(pair_sum, 1.0 / static_cast<double>(group), &tape);
                        if (model.cfg.rank_weight > 0.0) {
                            auto ce = ce_loss(vec_concat(logits, &tape), 0, &tape);
                            loss = add(loss, scale(ce, model.cfg.rank_weight, &tape), &tape);
                        }
                        return loss;
                    },
                    adam);
                ++windows;
            }
        } catch (const TrainingAbort&) {
            restore(model.params, last_good);
            throw;
        }
        double train_acc = static_cast<double>(correct) / static_cast<double>(examples.size());
        logger.log(epoch, "train", loss_sum / static_cast<double>(windows), train_acc);
        dev = evaluate_matching(model, corpus, dev_examples);
        logger.log(epoch, "dev", dev.loss, dev.accuracy);
        last_good = snapshot(model.params);
    }
    return dev;
}

}  // namespace simmc
