#pragma once

#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "simmc/errors.hpp"

namespace simmc {

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& gold) {
    if (pred.empty()) throw EvalError("accuracy needs at least one prediction");
    if (pred.size() != gold.size()) throw EvalError("prediction/label count mismatch");
    int64_t hit = 0;
    for (size_t i = 0; i < pred.size(); ++i) hit += pred[i] == gold[i];
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// Micro-averaged F1 over per-example id sets. Duplicates within an example
// collapse; zero precision-plus-recall scores 0.
inline double object_f1(const std::vector<std::vector<int>>& pred,
                        const std::vector<std::vector<int>>& gold) {
    if (pred.empty()) throw EvalError("f1 needs at least one example");
    if (pred.size() != gold.size()) throw EvalError("prediction/label count mismatch");
    int64_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        std::set<int> p(pred[i].begin(), pred[i].end());
        std::set<int> g(gold[i].begin(), gold[i].end());
        for (int id : p) (g.count(id) ? tp : fp) += 1;
        for (int id : g) fn += !p.count(id);
    }
    double prec = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    double rec = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    if (prec + rec == 0.0) return 0.0;
    return 2.0 * prec * rec / (prec + rec);
}

namespace detail {

inline std::map<std::vector<int>, int> ngram_counts(const std::vector<int>& toks, int n) {
    std::map<std::vector<int>, int> counts;
    for (size_t i = 0; i + n <= toks.size(); ++i)
        counts[std::vector<int>(toks.begin() + i, toks.begin() + i + n)] += 1;
    return counts;
}

}  // namespace detail

// Corpus-level BLEU-4: clipped modified n-gram precisions pooled over all
// segments, geometric mean over n = 1..4, times the brevity penalty
// min(1, e^{1 - r/c}). Any empty pooled precision zeroes the score.
inline double bleu4(const std::vector<std::vector<int>>& cand,
                    const std::vector<std::vector<int>>& ref) {
    if (cand.empty()) throw EvalError("bleu needs at least one segment");
    if (cand.size() != ref.size()) throw EvalError("candidate/reference count mismatch");
    int64_t c_len = 0, r_len = 0;
    int64_t clipped[4] = {0, 0, 0, 0}, total[4] = {0, 0, 0, 0};
    for (size_t i = 0; i < cand.size(); ++i) {
        c_len += static_cast<int64_t>(cand[i].size());
        r_len += static_cast<int64_t>(ref[i].size());
        for (int n = 1; n <= 4; ++n) {
            auto cc = detail::ngram_counts(cand[i], n);
            auto rc = detail::ngram_counts(ref[i], n);
            for (const auto& [gram, cnt] : cc) {
                total[n - 1] += cnt;
                auto it = rc.find(gram);
                if (it != rc.end()) clipped[n - 1] += std::min(cnt, it->second);
            }
        }
    }
    double log_sum = 0.0;
    for (int n = 0; n < 4; ++n) {
        if (clipped[n] == 0 || total[n] == 0) return 0.0;
        log_sum += 0.25 * std::log(static_cast<double>(clipped[n]) / static_cast<double>(total[n]));
    }
    if (c_len == 0) return 0.0;
    double bp = c_len >= r_len
                    ? 1.0
                    : std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len));
    return bp * std::exp(log_sum);
}

}  // namespace simmc
