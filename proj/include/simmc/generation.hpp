#pragma once

// Response generation: a causal decoder consumes the dialog context, the
// current turn's slot values between [META] and [RES], and (optionally) the
// mean crop features of the objects the reply is about, then emits the
// system utterance token by token.

#include <algorithm>
#include <string>
#include <vector>

#include "simmc/corpus.hpp"
#include "simmc/encoder.hpp"
#include "simmc/errors.hpp"
#include "simmc/metrics.hpp"
#include "simmc/pretrain.hpp"
#include "simmc/train_util.hpp"

namespace simmc {

struct GenFlags {
    bool use_objects = true;   // add projected crop means to every position
    bool use_meta = true;      // spell out slot values between the markers
    bool user_augmentation = false;  // extra examples that predict user turns
};

struct GenConfig {
    EncoderConfig dec, image;
    int reserve = 28;  // positions the input builder leaves for the reply
    GenFlags flags;

    void validate() const {
        dec.validate();
        image.validate();
        if (dec.vocab < 1) throw ConfigError("decoder needs a vocabulary size");
        if (reserve < 1) throw ConfigError("reserve must be positive");
    }
};

inline GenConfig default_gen_config(int vocab) {
    GenConfig c;
    c.dec.vocab = vocab;
    c.dec.max_len = 192;
    c.image.max_len = 65;
    return c;
}

// "dec.*" decoder, "img.*" crop encoder, "gen.wo" (crop-mean projection) and
// "gen.w4" (vocabulary head).
struct GenModel {
    GenConfig cfg;
    ParameterSet params;
};

inline void add_gen_heads(GenModel& m, Rng& rng) {
    m.params.add("gen.wo", randn({m.cfg.image.d, m.cfg.dec.d}, rng));
    m.params.add("gen.w4", randn({m.cfg.dec.d, m.cfg.dec.vocab}, rng));
}

inline GenModel init_gen_model(const GenConfig& cfg, uint64_t seed, const std::string& stream) {
    cfg.validate();
    GenModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(seed, stream));
    ParameterSet dec = init_decoder(cfg.dec, rng);
    ParameterSet img = init_image_encoder(cfg.image, rng);
    m.params.adopt("dec.", dec);
    m.params.adopt("img.", img);
    add_gen_heads(m, rng);
    return m;
}

// Fresh decoder, crop encoder copied from the pretrained matching model.
inline GenModel init_gen_from_matching(const MatchingModel& pre, const GenFlags& flags,
                                       uint64_t seed) {
    GenConfig cfg;
    cfg.dec.vocab = pre.cfg.text.vocab;
    cfg.dec.max_len = 192;
    cfg.image = pre.cfg.image;
    cfg.flags = flags;
    GenModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(seed, "init:gen"));
    ParameterSet dec = init_decoder(cfg.dec, rng);
    m.params.adopt("dec.", dec);
    for (const auto& e : pre.params.entries())
        if (e.name.rfind("img.", 0) == 0)
            m.params.add(e.name, tensor(e.param->shape, e.param->values));
    add_gen_heads(m, rng);
    return m;
}

struct GenExample {
    int dialog_id = 0;
    int turn = 0;
    bool user_side = false;  // augmented: predict the user utterance instead
};

inline std::vector<GenExample> collect_gen_examples(const Corpus& corpus,
                                                    const std::vector<int>& dialog_ids,
                                                    bool user_augmentation) {
    std::vector<GenExample> out;
    for (int did : dialog_ids) {
        const Dialog& d = corpus.dialog(did);
        for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
            out.push_back({did, t, false});
            if (user_augmentation) out.push_back({did, t, true});
        }
    }
    return out;
}

// Conditioning prefix for predicting the user side of `turn`: everything up
// to the previous system reply, then bare [META] [RES] markers.
inline TokenSequence build_user_generation_input(const Dialog& d, int turn,
                                                 const Vocabulary& vocab, int max_len,
                                                 int reserve) {
    int budget = max_len - 2 - reserve;
    if (budget < 1) throw ConfigError("generation budget leaves no room for context");
    TokenSequence seq = build_context(d, turn, false, vocab, budget);
    seq.push(Vocabulary::meta_id());
    seq.push(Vocabulary::res_id());
    return seq;
}

// Objects whose crops condition this example: the reply's objects for system
// turns; for user-side examples, what the system showed most recently.
inline std::vector<int> gen_condition_objects(const Dialog& d, const GenExample& ex) {
    if (!ex.user_side) return d.turns[ex.turn].system_object_ids;
    return ex.turn > 0 ? d.turns[ex.turn - 1].system_object_ids : std::vector<int>{};
}

struct GenForward {
    TensorPtr logits;          // one row per fed position
    std::vector<int> targets;  // shifted next-token ids
    std::vector<uint8_t> active;
    int prefix_len = 0;
};

// Teacher-forced pass: feed prefix plus reply minus its final token; rows
// from prefix_len - 1 onward predict each reply token in turn.
inline GenForward gen_forward(const GenModel& m, const Corpus& corpus, const GenExample& ex,
                              Tape* tape) {
    const Dialog& d = corpus.dialog(ex.dialog_id);
    const DialogTurn& turn = d.turns[ex.turn];

    TokenSequence prefix =
        ex.user_side
            ? build_user_generation_input(d, ex.turn, corpus.vocab, m.cfg.dec.max_len,
                                          m.cfg.reserve)
            : build_generation_input(d, ex.turn, corpus.vocab, m.cfg.dec.max_len, m.cfg.reserve,
                                     m.cfg.flags.use_meta);
    std::vector<int> target_ids;
    if (ex.user_side) {
        for (const auto& w : split_words(turn.user_utterance))
            target_ids.push_back(corpus.vocab.id(w));
        target_ids.push_back(Vocabulary::eos_id());
    } else {
        target_ids = generation_target(turn, corpus.vocab);
    }

    GenForward out;
    out.prefix_len = prefix.length();
    TokenSequence fed = prefix;
    for (size_t i = 0; i + 1 < target_ids.size(); ++i) fed.push(target_ids[i]);

    const int n = fed.length();
    out.targets.assign(n, 0);
    out.active.assign(n, 0);
    for (size_t j = 0; j < target_ids.size(); ++j) {
        int pos = out.prefix_len - 1 + static_cast<int>(j);
        out.targets[pos] = target_ids[j];
        out.active[pos] = 1;
    }

    auto hidden = lm_forward(fed, m.params, m.cfg.dec, tape, "dec.");
    if (m.cfg.flags.use_objects) {
        auto objs = gen_condition_objects(d, ex);
        if (!objs.empty()) {
            const SceneRecord& sc = corpus.scene(d.scene_id);
            std::vector<TensorPtr> crops;
            for (int id : objs)
                crops.push_back(
                    encode_image(crop_object(sc, id), m.params, m.cfg.image, tape, "img.").cls);
            auto term = matmul(mean_vecs(crops, tape), m.params.get("gen.wo"), tape);
            hidden = add_row(hidden, term, tape);
        }
    }
    out.logits = matmul(hidden, m.params.get("gen.w4"), tape);
    return out;
}

inline TensorPtr gen_loss(const GenModel& m, const Corpus& corpus, const GenExample& ex,
                          Tape* tape, int* correct = nullptr, int* total = nullptr) {
    auto fwd = gen_forward(m, corpus, ex, tape);
    if (correct) {
        const int vocab = m.cfg.dec.vocab;
        for (size_t i = 0; i < fwd.active.size(); ++i) {
            if (!fwd.active[i]) continue;
            int best = 0;
            const double* row = fwd.logits->values.data() + i * vocab;
            for (int v = 1; v < vocab; ++v)
                if (row[v] > row[best]) best = v;
            *correct += best == fwd.targets[i];
            *total += 1;
        }
    }
    return ce_rows(fwd.logits, fwd.targets, fwd.active, tape);
}

inline LossAcc evaluate_generation(const GenModel& m, const Corpus& corpus,
                                   const std::vector<GenExample>& examples) {
    if (examples.empty()) throw EvalError("no generation examples to evaluate");
    LossAcc ev;
    int correct = 0, total = 0;
    for (const auto& ex : examples)
        ev.loss += gen_loss(m, corpus, ex, nullptr, &correct, &total)->values[0];
    ev.loss /= static_cast<double>(examples.size());
    ev.accuracy = total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
    return ev;
}

inline LossAcc train_generator(GenModel& model, const Corpus& corpus, const TrainOptions& opts) {
    model.cfg.validate();
    if (opts.epochs < 0) throw ConfigError("epochs must be >= 0");
    if (opts.batch < 1) throw ConfigError("batch must be >= 1");
    auto train_examples =
        collect_gen_examples(corpus, corpus.splits.train, model.cfg.flags.user_augmentation);
    if (train_examples.empty()) throw DataError("no generation examples in the training split");
    auto dev_examples = collect_gen_examples(corpus, corpus.splits.dev, false);
    if (dev_examples.empty()) throw DataError("no generation examples in the dev split");

    TrainLogger logger(opts.log_path);
    const int64_t total_steps =
        std::max<int64_t>(1, opts.epochs * steps_per_epoch(train_examples.size(), opts.batch));
    const int64_t warmup = static_cast<int64_t>(opts.warmup_frac * static_cast<double>(total_steps));

    AdamConfig adam;
    adam.lr = opts.lr;
    adam.weight_decay = opts.weight_decay;
    adam.clip_norm = opts.clip_norm;

    ParamSnapshot last_good = snapshot(model.params);
    LossAcc dev = evaluate_generation(model, corpus, dev_examples);
    logger.log(0, "dev", dev.loss, dev.accuracy);

    for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
        Rng rng(derive_seed(opts.seed, "epoch:gen:" + std::to_string(epoch)));
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
                        return gen_loss(model, corpus, examples[i], &tape, &correct, &total);
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
        dev = evaluate_generation(model, corpus, dev_examples);
        logger.log(epoch, "dev", dev.loss, dev.accuracy);
        last_good = snapshot(model.params);
    }
    return dev;
}

// Greedy continuation of the conditioning prefix. Ties break toward the
// lowest token id; generation stops at [EOS] or after max_new tokens. The
// returned ids exclude the prefix and any final [EOS].
inline std::vector<int> greedy_decode(const GenModel& m, const Corpus& corpus, int dialog_id,
                                      int turn, int max_new = 32) {
    if (max_new < 1) throw ConfigError("max_new must be positive");
    const Dialog& d = corpus.dialog(dialog_id);
    TokenSequence fed = build_generation_input(d, turn, corpus.vocab, m.cfg.dec.max_len,
                                               m.cfg.reserve, m.cfg.flags.use_meta);

    TensorPtr obj_term;
    if (m.cfg.flags.use_objects) {
        GenExample ex{dialog_id, turn, false};
        auto objs = gen_condition_objects(d, ex);
        if (!objs.empty()) {
            const SceneRecord& sc = corpus.scene(d.scene_id);
            std::vector<TensorPtr> crops;
            for (int id : objs)
                crops.push_back(
                    encode_image(crop_object(sc, id), m.params, m.cfg.image, nullptr, "img.").cls);
            obj_term = matmul(mean_vecs(crops), m.params.get("gen.wo"));
        }
    }

    std::vector<int> out;
    for (int step = 0; step < max_new; ++step) {
        if (fed.length() >= m.cfg.dec.max_len) break;
        auto hidden = lm_forward(fed, m.params, m.cfg.dec, nullptr, "dec.");
        auto last = row(hidden, fed.length() - 1);
        if (obj_term) last = add(last, obj_term);
        auto logits = matmul(last, m.params.get("gen.w4"));
        int best = 0;
        for (int v = 1; v < m.cfg.dec.vocab; ++v)
            if (logits->values[v] > logits->values[best]) best = v;
        if (best == Vocabulary::eos_id()) break;
        out.push_back(best);
        fed.push(best);
    }
    return out;
}

// Corpus BLEU of greedy replies against the written responses over every
// turn in the pool.
inline double evaluate_generation_bleu(const GenModel& m, const Corpus& corpus,
                                       const std::vector<int>& dialog_ids, int max_new = 32) {
    std::vector<std::vector<int>> cand, ref;
    for (int did : dialog_ids) {
        const Dialog& d = corpus.dialog(did);
        for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
            cand.push_back(greedy_decode(m, corpus, did, t, max_new));
            std::vector<int> r;
            for (const auto& w : split_words(d.turns[t].system_utterance))
                r.push_back(corpus.vocab.id(w));
            ref.push_back(r);
        }
    }
    return bleu4(cand, ref);
}

}  // namespace simmc
