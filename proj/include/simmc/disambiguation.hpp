#pragma once

// Disambiguation classifier: given the dialog context up to and including the
// current user utterance, plus crops of every object the system has shown so
// far, decide whether the utterance is ambiguous (refers to more than one
// plausible object).

#include <algorithm>
#include <string>
#include <vector>

#include "simmc/corpus.hpp"
#include "simmc/encoder.hpp"
#include "simmc/errors.hpp"
#include "simmc/pretrain.hpp"
#include "simmc/train_util.hpp"

namespace simmc {

struct DisambConfig {
    EncoderConfig text, image;

    void validate() const {
        text.validate();
        image.validate();
    }
};

inline DisambConfig default_disamb_config(int vocab) {
    DisambConfig c;
    c.text.vocab = vocab;
    c.text.max_len = 160;
    c.image.max_len = 65;
    return c;
}

// "text.*" / "img.*" encoders plus "cls.wo" (object-mean projection) and
// "cls.w1" (two-way head).
struct DisambModel {
    DisambConfig cfg;
    ParameterSet params;
};

inline void add_disamb_heads(DisambModel& m, Rng& rng) {
    m.params.add("cls.wo", randn({m.cfg.image.d, m.cfg.text.d}, rng));
    m.params.add("cls.w1", randn({m.cfg.text.d, 2}, rng));
}

inline DisambModel init_disamb_model(const DisambConfig& cfg, uint64_t seed,
                                     const std::string& stream) {
    cfg.validate();
    DisambModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(seed, stream));
    ParameterSet text = init_text_encoder(cfg.text, rng);
    ParameterSet img = init_image_encoder(cfg.image, rng);
    m.params.adopt("text.", text);
    m.params.adopt("img.", img);
    add_disamb_heads(m, rng);
    return m;
}

// Copies the pretrained encoders (leaving the source model untouched) and
// draws fresh heads.
inline DisambModel init_disamb_from_matching(const MatchingModel& pre, uint64_t seed) {
    DisambModel m;
    m.cfg.text = pre.cfg.text;
    m.cfg.image = pre.cfg.image;
    Rng rng(derive_seed(seed, "init:disamb-heads"));
    for (const auto& e : pre.params.entries()) {
        if (e.name.rfind("head.", 0) == 0) continue;  // matching head is not reused
        m.params.add(e.name, tensor(e.param->shape, e.param->values));
    }
    add_disamb_heads(m, rng);
    return m;
}

// Objects the system has shown before the given turn, one entry per id, in
// turn order (ids sorted inside a turn).
inline std::vector<int> collect_prior_system_objects(const Dialog& d, int upto_turn) {
    if (upto_turn < 0 || upto_turn > static_cast<int>(d.turns.size()))
        throw ContractError("turn index out of range");
    std::vector<int> out;
    for (int t = 0; t < upto_turn; ++t) {
        std::vector<int> ids = d.turns[t].system_object_ids;
        std::sort(ids.begin(), ids.end());
        for (int id : ids)
            if (std::find(out.begin(), out.end(), id) == out.end()) out.push_back(id);
    }
    return out;
}

struct DisambExample {
    int dialog_id = 0;
    int turn = 0;
    int label = 0;
};

inline std::vector<DisambExample> collect_disamb_examples(const Corpus& corpus,
                                                          const std::vector<int>& dialog_ids) {
    std::vector<DisambExample> out;
    for (int did : dialog_ids) {
        const Dialog& d = corpus.dialog(did);
        for (int t = 0; t < static_cast<int>(d.turns.size()); ++t)
            if (d.turns[t].disambiguation_label)
                out.push_back({did, t, *d.turns[t].disambiguation_label ? 1 : 0});
    }
    return out;
}

// Two-way logits: w1' (t_cls + wo' mean(object crops)). With no prior
// objects the image term is exactly absent, not approximated.
inline TensorPtr disamb_logits(const DisambModel& m, const Corpus& corpus,
                               const DisambExample& ex, Tape* tape) {
    const Dialog& d = corpus.dialog(ex.dialog_id);
    auto seq = build_context(d, ex.turn, true, corpus.vocab, m.cfg.text.max_len);
    auto t = encode_text(seq, m.params, m.cfg.text, tape, "text.");
    TensorPtr rep = t.cls;
    auto prior = collect_prior_system_objects(d, ex.turn);
    if (!prior.empty()) {
        const SceneRecord& sc = corpus.scene(d.scene_id);
        std::vector<TensorPtr> obj_cls;
        for (int id : prior)
            obj_cls.push_back(
                encode_image(crop_object(sc, id), m.params, m.cfg.image, tape, "img.").cls);
        auto mean = mean_vecs(obj_cls, tape);
        rep = add(rep, matmul(mean, m.params.get("cls.wo"), tape), tape);
    }
    return matmul(rep, m.params.get("cls.w1"), tape);
}

// Ties resolve to "unambiguous".
inline int disamb_predict(const TensorPtr& logits) {
    return logits->values[1] > logits->values[0] ? 1 : 0;
}

inline LossAcc evaluate_disamb(const DisambModel& m, const Corpus& corpus,
                               const std::vector<DisambExample>& examples) {
    if (examples.empty()) throw EvalError("no labeled turns to evaluate");
    LossAcc ev;
    int correct = 0;
    for (const auto& ex : examples) {
        auto logits = disamb_logits(m, corpus, ex, nullptr);
        ev.loss += ce_loss(logits, ex.label)->values[0];
        correct += disamb_predict(logits) == ex.label;
    }
    ev.loss /= static_cast<double>(examples.size());
    ev.accuracy = static_cast<double>(correct) / static_cast<double>(examples.size());
    return ev;
}

inline LossAcc train_disambiguation(DisambModel& model, const Corpus& corpus,
                                    const TrainOptions& opts) {
    model.cfg.validate();
    if (opts.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (opts.batch < 1) throw ConfigError("batch must be >= 1");
    auto train_examples = collect_disamb_examples(corpus, corpus.splits.train);
    if (train_examples.empty()) throw DataError("no labeled turns in the training split");
    auto dev_examples = collect_disamb_examples(corpus, corpus.splits.dev);
    if (dev_examples.empty()) throw DataError("no labeled turns in the dev split");

    TrainLogger logger(opts.log_path);
    const int64_t total_steps =
        std::max<int64_t>(1, opts.epochs * steps_per_epoch(train_examples.size(), opts.batch));
    const int64_t warmup = static_cast<int64_t>(opts.warmup_frac * static_cast<double>(total_steps));

    AdamConfig adam;
    adam.lr = opts.lr;
    adam.weight_decay = opts.weight_decay;
    adam.clip_norm = opts.clip_norm;

    ParamSnapshot last_good = snapshot(model.params);
    LossAcc dev = evaluate_disamb(model, corpus, dev_examples);
    logger.log(0, "dev", dev.loss, dev.accuracy);

    for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
        Rng rng(derive_seed(opts.seed, "epoch:disamb:" + std::to_string(epoch)));
        auto examples = train_examples;
        rng.shuffle(examples);

        double loss_sum = 0.0;
        int64_t windows = 0;
        int correct = 0;
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
                        const DisambExample& ex = examples[i];
                        auto logits = disamb_logits(model, corpus, ex, &tape);
                        correct += disamb_predict(logits) == ex.label;
                        return ce_loss(logits, ex.label, &tape);
                    },
                    adam);
                ++windows;
            }
        } catch (const TrainingAbort&) {
            restore(model.params, last_good);
            throw;
        }
        logger.log(epoch, "train", loss_sum / static_cast<double>(windows),
                   static_cast<double>(correct) / static_cast<double>(examples.size()));
        dev = evaluate_disamb(model, corpus, dev_examples);
        logger.log(epoch, "dev", dev.loss, dev.accuracy);
        last_good = snapshot(model.params);
    }
    return dev;
}

}  // namespace simmc
