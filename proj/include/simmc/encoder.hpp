#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "simmc/image.hpp"
#include "simmc/optim.hpp"
#include "simmc/tensor.hpp"
#include "simmc/text.hpp"

namespace simmc {

// One config type covers all three stacks; `vocab` only matters for the
// token-embedding tables and `patch` only for the image encoder.
struct EncoderConfig {
    int layers = 2;
    int heads = 4;
    int d = 64;
    int ff = 128;
    int max_len = 64;
    int patch = 8;
    int vocab = 0;

    void validate() const {
        if (layers < 1 || heads < 1 || d < 1 || ff < 1 || max_len < 1)
            throw ConfigError("encoder config fields must be positive");
        if (d % heads != 0) throw ConfigError("model dim must be divisible by head count");
    }
};

struct EncodedContext {
    TensorPtr hidden;                  // len x d
    TensorPtr cls;                     // row 0
    std::vector<TensorPtr> systems;    // hidden at each [SYSTEM] marker
    std::vector<int> system_turns;     // source utterance index per marker
};

struct EncodedImage {
    TensorPtr hidden;  // (patches + 1) x d
    TensorPtr cls;     // row 0, the [CLS]-patch output
};

namespace detail {

inline void init_block_params(ParameterSet& ps, const EncoderConfig& cfg, Rng& rng) {
    for (int l = 0; l < cfg.layers; ++l) {
        std::string p = "l" + std::to_string(l) + ".";
        ps.add(p + "ln1.g", tensor({cfg.d}, 1.0));
        ps.add(p + "ln1.b", tensor({cfg.d}, 0.0));
        ps.add(p + "attn.wq", randn({cfg.d, cfg.d}, rng));
        ps.add(p + "attn.wk", randn({cfg.d, cfg.d}, rng));
        ps.add(p + "attn.wv", randn({cfg.d, cfg.d}, rng));
        ps.add(p + "attn.wo", randn({cfg.d, cfg.d}, rng));
        ps.add(p + "ln2.g", tensor({cfg.d}, 1.0));
        ps.add(p + "ln2.b", tensor({cfg.d}, 0.0));
        ps.add(p + "ff.w1", randn({cfg.d, cfg.ff}, rng));
        ps.add(p + "ff.b1", tensor({cfg.ff}, 0.0));
        ps.add(p + "ff.w2", randn({cfg.ff, cfg.d}, rng));
        ps.add(p + "ff.b2", tensor({cfg.d}, 0.0));
    }
    ps.add("lnf.g", tensor({cfg.d}, 1.0));
    ps.add("lnf.b", tensor({cfg.d}, 0.0));
}

// Additive attention mask over keys: blocked entries get a large negative
// constant whose exp underflows to exactly zero after the row max shift.
constexpr double kMaskOff = -1e9;

inline TensorPtr key_padding_mask(const std::vector<uint8_t>& attn) {
    const int n = static_cast<int>(attn.size());
    auto m = tensor({n, n}, 0.0);
    for (int j = 0; j < n; ++j)
        if (!attn[j])
            for (int i = 0; i < n; ++i) m->at(i, j) = kMaskOff;
    return m;
}

inline TensorPtr causal_mask(int n) {
    auto m = tensor({n, n}, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m->at(i, j) = kMaskOff;
    return m;
}

// Pre-LN transformer stack: x += attn(ln1(x)); x += ff(ln2(x)); final LN.
// `mask` may be null (all positions attend everywhere).
inline TensorPtr transformer_stack(TensorPtr x, const ParameterSet& ps, const std::string& pre,
                                   const EncoderConfig& cfg, TensorPtr mask, Tape* tape) {
    const int dh = cfg.d / cfg.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int l = 0; l < cfg.layers; ++l) {
        std::string p = pre + "l" + std::to_string(l) + ".";
        auto xn = layer_norm(x, ps.get(p + "ln1.g"), ps.get(p + "ln1.b"), tape);
        auto q = matmul(xn, ps.get(p + "attn.wq"), tape);
        auto k = matmul(xn, ps.get(p + "attn.wk"), tape);
        auto v = matmul(xn, ps.get(p + "attn.wv"), tape);
        std::vector<TensorPtr> heads;
        for (int h = 0; h < cfg.heads; ++h) {
            auto qh = col_slice(q, h * dh, (h + 1) * dh, tape);
            auto kh = col_slice(k, h * dh, (h + 1) * dh, tape);
            auto vh = col_slice(v, h * dh, (h + 1) * dh, tape);
            auto scores = scale(matmul(qh, transpose(kh, tape), tape), inv_sqrt_dh, tape);
            if (mask) scores = add(scores, mask, tape);
            heads.push_back(matmul(softmax(scores, 1, tape), vh, tape));
        }
        auto attn_out = matmul(col_concat(heads, tape), ps.get(p + "attn.wo"), tape);
        x = add(x, attn_out, tape);
        auto xn2 = layer_norm(x, ps.get(p + "ln2.g"), ps.get(p + "ln2.b"), tape);
        auto h1 = gelu(add_row(matmul(xn2, ps.get(p + "ff.w1"), tape), ps.get(p + "ff.b1"), tape),
                       tape);
        auto h2 = add_row(matmul(h1, ps.get(p + "ff.w2"), tape), ps.get(p + "ff.b2"), tape);
        x = add(x, h2, tape);
    }
    return layer_norm(x, ps.get(pre + "lnf.g"), ps.get(pre + "lnf.b"), tape);
}

inline TensorPtr token_input(const TokenSequence& seq, const ParameterSet& ps,
                             const std::string& pre, const EncoderConfig& cfg, Tape* tape) {
    if (seq.length() == 0) throw ShapeError("encoder input must be non-empty");
    if (seq.length() > cfg.max_len)
        throw ShapeError("sequence length " + std::to_string(seq.length()) + " exceeds max_len " +
                         std::to_string(cfg.max_len));
    std::vector<int> pos(seq.ids.size());
    for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
    return add(embed(ps.get(pre + "tok_embed"), seq.ids, tape),
               embed(ps.get(pre + "pos_embed"), pos, tape), tape);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Bidirectional text encoder
// ---------------------------------------------------------------------------

inline ParameterSet init_text_encoder(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    if (cfg.vocab < 1) throw ConfigError("text encoder needs a vocabulary size");
    ParameterSet ps;
    ps.add("tok_embed", randn({cfg.vocab, cfg.d}, rng));
    ps.add("pos_embed", randn({cfg.max_len, cfg.d}, rng));
    detail::init_block_params(ps, cfg, rng);
    return ps;
}

inline EncodedContext encode_text(const TokenSequence& seq, const ParameterSet& ps,
                                  const EncoderConfig& cfg, Tape* tape,
                                  const std::string& prefix = "") {
    auto x = detail::token_input(seq, ps, prefix, cfg, tape);
    bool any_pad = false;
    for (uint8_t a : seq.attn) any_pad = any_pad || !a;
    TensorPtr mask = any_pad ? detail::key_padding_mask(seq.attn) : nullptr;
    auto h = detail::transformer_stack(x, ps, prefix, cfg, mask, tape);
    EncodedContext out;
    out.hidden = h;
    out.cls = row(h, 0, tape);
    for (size_t i = 0; i < seq.system_positions.size(); ++i) {
        out.systems.push_back(row(h, seq.system_positions[i], tape));
        out.system_turns.push_back(seq.system_turns[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Patch image encoder
// ---------------------------------------------------------------------------

inline int patch_rows(const EncoderConfig& cfg) {
    return cfg.patch * cfg.patch * 3;
}

inline ParameterSet init_image_encoder(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    ParameterSet ps;
    ps.add("patch_proj", randn({patch_rows(cfg), cfg.d}, rng));
    ps.add("cls_embed", randn({1, cfg.d}, rng));
    ps.add("pos_embed", randn({cfg.max_len, cfg.d}, rng));
    detail::init_block_params(ps, cfg, rng);
    return ps;
}

// Flattens non-overlapping patches in row-major patch order; each row is one
// patch's pixels, interleaved RGB, scanned row-major inside the patch.
inline TensorPtr patchify(const RasterImage& img, int patch) {
    if (img.height % patch != 0 || img.width % patch != 0)
        throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         " not divisible by patch " + std::to_string(patch));
    const int py = img.height / patch, px = img.width / patch;
    auto out = tensor({py * px, patch * patch * 3});
    int r = 0;
    for (int i = 0; i < py; ++i)
        for (int j = 0; j < px; ++j, ++r) {
            int c = 0;
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x)
                    for (int ch = 0; ch < 3; ++ch)
                        out->values[static_cast<size_t>(r) * out->shape[1] + c++] =
                            img.at(i * patch + y, j * patch + x, ch);
        }
    return out;
}

inline EncodedImage encode_image(const RasterImage& img, const ParameterSet& ps,
                                 const EncoderConfig& cfg, Tape* tape,
                                 const std::string& prefix = "") {
    auto patches = patchify(img, cfg.patch);
    const int np = patches->shape[0];
    if (np + 1 > cfg.max_len)
        throw ShapeError("patch count " + std::to_string(np) + " + [CLS] exceeds max_len " +
                         std::to_string(cfg.max_len));
    auto proj = matmul(patches, ps.get(prefix + "patch_proj"), tape);
    auto x = concat_rows({ps.get(prefix + "cls_embed"), proj}, tape);
    std::vector<int> pos(np + 1);
    for (int i = 0; i <= np; ++i) pos[i] = i;
    x = add(x, embed(ps.get(prefix + "pos_embed"), pos, tape), tape);
    auto h = detail::transformer_stack(x, ps, prefix, cfg, nullptr, tape);
    EncodedImage out;
    out.hidden = h;
    out.cls = row(h, 0, tape);
    return out;
}

// ---------------------------------------------------------------------------
// Causal decoder
// ---------------------------------------------------------------------------

inline ParameterSet init_decoder(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    if (cfg.vocab < 1) throw ConfigError("decoder needs a vocabulary size");
    ParameterSet ps;
    ps.add("tok_embed", randn({cfg.vocab, cfg.d}, rng));
    ps.add("pos_embed", randn({cfg.max_len, cfg.d}, rng));
    detail::init_block_params(ps, cfg, rng);
    return ps;
}

// Per-position hiddens under strictly causal attention: row k sees tokens
// 0..k only.
inline TensorPtr lm_forward(const TokenSequence& seq, const ParameterSet& ps,
                            const EncoderConfig& cfg, Tape* tape,
                            const std::string& prefix = "") {
    auto x = detail::token_input(seq, ps, prefix, cfg, tape);
    return detail::transformer_stack(x, ps, prefix, cfg, detail::causal_mask(seq.length()), tape);
}

}  // namespace simmc
