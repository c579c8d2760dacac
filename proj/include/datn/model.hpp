#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "datn/attention.hpp"
#include "datn/checkpoint.hpp"
#include "datn/config.hpp"
#include "datn/corpus.hpp"
#include "datn/graph.hpp"
#include "datn/optim.hpp"

namespace datn {

// Sinusoidal positional encoding; positions restart at every sentence.
inline Tensor positional_rows(const std::vector<std::size_t>& positions, std::size_t dim) {
    Tensor pe({positions.size(), dim});
    for (std::size_t r = 0; r < positions.size(); ++r) {
        const double pos = double(positions[r]);
        for (std::size_t i = 0; i < dim; i += 2) {
            const double angle = pos / std::pow(10000.0, double(i) / double(dim));
            pe.at(r, i) = std::sin(angle);
            if (i + 1 < dim) pe.at(r, i + 1) = std::cos(angle);
        }
    }
    return pe;
}

struct TokenLayout {
    std::vector<int> ids;                  // concatenated token ids
    std::vector<std::size_t> sentence;     // sentence index per token
    std::vector<std::size_t> position;     // position within the sentence
    SegmentBounds bounds;                  // token ranges per sentence
};

inline TokenLayout layout_sentences(const std::vector<std::vector<int>>& sentences) {
    TokenLayout out;
    for (std::size_t j = 0; j < sentences.size(); ++j) {
        const std::size_t start = out.ids.size();
        for (std::size_t p = 0; p < sentences[j].size(); ++p) {
            out.ids.push_back(sentences[j][p]);
            out.sentence.push_back(j);
            out.position.push_back(p);
        }
        out.bounds.push_back({start, out.ids.size()});
    }
    return out;
}

inline Tensor block_self_mask(const TokenLayout& layout, bool causal) {
    const std::size_t n = layout.ids.size();
    Tensor mask({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const bool same = layout.sentence[i] == layout.sentence[j];
            const bool visible = same && (!causal || layout.position[j] <= layout.position[i]);
            mask.at(i, j) = visible ? 0.0 : kMaskValue;
        }
    return mask;
}

inline Tensor cross_block_mask(const TokenLayout& tgt, const TokenLayout& src) {
    Tensor mask({tgt.ids.size(), src.ids.size()});
    for (std::size_t i = 0; i < tgt.ids.size(); ++i)
        for (std::size_t j = 0; j < src.ids.size(); ++j)
            mask.at(i, j) = tgt.sentence[i] == src.sentence[j] ? 0.0 : kMaskValue;
    return mask;
}

// Drops one service row per segment (the EOS row of encoded source sentences
// or the BOS row of decoded target sentences) so the cache holds word rows
// only. Returns the stripped matrix and its new bounds.
inline std::pair<Value, SegmentBounds> strip_service_rows(Value rows, const SegmentBounds& bounds,
                                                          bool drop_first) {
    std::vector<Value> parts;
    SegmentBounds out_bounds;
    std::size_t off = 0;
    for (const auto& [b0, b1] : bounds) {
        const std::size_t w0 = drop_first ? b0 + 1 : b0;
        const std::size_t w1 = drop_first ? b1 : b1 - 1;
        if (w0 >= w1) throw std::invalid_argument("strip_service_rows: empty sentence");
        parts.push_back(slice_rows(rows, w0, w1));
        out_bounds.push_back({off, off + (w1 - w0)});
        off += w1 - w0;
    }
    return {concat_rows(parts), out_bounds};
}

// Per-document context encoding block: word and sentence keys/values plus the
// sentence boundary index.
struct ContextCache {
    Value k_w, v_w, k_s, v_s;
    SegmentBounds bounds;
    Integration side = Integration::Encoder;

    void validate() const {
        std::size_t expected = 0;
        for (const auto& [b0, b1] : bounds) {
            if (b0 != expected || b1 <= b0)
                throw std::invalid_argument("ContextCache: bounds do not partition the tokens");
            expected = b1;
        }
        if (expected != k_w.rows() || k_w.rows() != v_w.rows())
            throw std::invalid_argument("ContextCache: word rows do not match bounds");
        if (k_s.rows() != bounds.size() || v_s.rows() != bounds.size())
            throw std::invalid_argument("ContextCache: sentence rows do not match bounds");
    }
};

struct ForwardOptions {
    bool with_context = false;
    bool train = false;     // enables dropout
    double dropout = 0.0;
    Rng* rng = nullptr;
    bool collect_traces = false;
};

struct DocForward {
    std::vector<Value> logits;             // per sentence, (tgt_in length x tgt_vocab)
    std::vector<std::vector<int>> gold;    // per sentence target outputs (y + EOS)
    std::size_t total_target_tokens = 0;
    std::vector<AttentionTrace> traces;    // per sentence; hier variants only
    std::vector<bool> degenerate;          // true when a sentence had no visible context
};

// Inference-side snapshot of a prepared document: plain tensors only.
struct PreparedDoc {
    std::vector<Tensor> memory;  // per sentence decoder memory (gated when encoder-side context)
    Tensor cache_kw, cache_vw, cache_ks, cache_vs;
    SegmentBounds cache_bounds;
    bool has_cache = false;
    std::size_t sentences = 0;
};

class Model {
public:
    ModelConfig cfg;
    ParamStore params;

    explicit Model(ModelConfig config) : cfg(std::move(config)) {
        cfg.validate();
        if (cfg.src_vocab < 5 || cfg.tgt_vocab < 5)
            throw std::invalid_argument("model: vocab sizes must cover the reserved ids");
        create_params();
    }

    // ------------------------------------------------------------------
    // Parameters
    // ------------------------------------------------------------------

    void init_params(Rng& rng) {
        for (ParamTensor* p : params.all())
            if (!is_context_param(p->name)) init_stack_tensor(*p, rng);
        init_context_params(rng);
    }

    // Stage-two entry: context block starts fresh, gate at zero so the model
    // begins as an even mix of r and d.
    void init_context_params(Rng& rng) {
        for (ParamTensor* p : params.all()) {
            if (!is_context_param(p->name)) continue;
            const std::string& n = p->name;
            const bool is_bias = n.size() >= 3 && (n.substr(n.size() - 3) == "_b1" ||
                                                   n.substr(n.size() - 3) == "_b2");
            if (n.rfind("gate_", 0) == 0) {
                p->value.fill(0.0);
            } else if (n.find("_ln") != std::string::npos) {
                init_stack_tensor(*p, rng);
            } else if (is_bias) {
                p->value.fill(0.0);
            } else {
                p->value = rand_uniform(rng, p->value.shape, -0.05, 0.05);
            }
        }
    }

    static bool is_context_param(const std::string& name) {
        return name.rfind("ctx_", 0) == 0 || name.rfind("gate_", 0) == 0;
    }

    std::vector<ParamTensor*> sentence_params() {
        std::vector<ParamTensor*> out;
        for (ParamTensor* p : params.all())
            if (!is_context_param(p->name)) out.push_back(p);
        return out;
    }

    std::vector<ParamTensor*> context_params() {
        std::vector<ParamTensor*> out;
        for (ParamTensor* p : params.all())
            if (is_context_param(p->name)) out.push_back(p);
        return out;
    }

    std::size_t param_count() const { return params.total_scalars(); }

    std::size_t context_param_count() {
        std::size_t n = 0;
        for (ParamTensor* p : context_params()) n += p->value.numel();
        return n;
    }

    // ------------------------------------------------------------------
    // Stacks
    // ------------------------------------------------------------------

    Value encode_document(Graph& g, const TokenLayout& src, const ForwardOptions& opt) {
        Value x = embed(g, "src_embed", src, opt);
        Tensor self_mask = block_self_mask(src, /*causal=*/false);
        const AttnDropout drop = attn_dropout(opt);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string base = "enc" + std::to_string(l);
            Value mask = g.constant(self_mask);
            Value att = flat_multi_head(x, x, x, &mask, flat_proj(g, base + "_self"), cfg.heads,
                                        Normalizer::Softmax, nullptr, &drop);
            x = sublayer_norm(g, base + "_ln1", x, att, opt);
            Value ff = feed_forward(g, base + "_ff", x, opt);
            x = sublayer_norm(g, base + "_ln2", x, ff, opt);
        }
        return x;
    }

    struct DecoderOut {
        Value hidden;     // final layer output per target token
        Value ctx_read;   // raw source-attention read at the last layer
        Value src_query;  // source-attention sub-layer output at the last layer
    };

    DecoderOut decode_document(Graph& g, const TokenLayout& tgt, Value memory,
                               const TokenLayout& src, const ForwardOptions& opt) {
        Value x = embed(g, "tgt_embed", tgt, opt);
        Tensor self_mask = block_self_mask(tgt, /*causal=*/true);
        Tensor cross_mask = cross_block_mask(tgt, src);
        const AttnDropout drop = attn_dropout(opt);
        DecoderOut out;
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string base = "dec" + std::to_string(l);
            Value smask = g.constant(self_mask);
            Value att = flat_multi_head(x, x, x, &smask, flat_proj(g, base + "_self"), cfg.heads,
                                        Normalizer::Softmax, nullptr, &drop);
            x = sublayer_norm(g, base + "_ln1", x, att, opt);
            Value cmask = g.constant(cross_mask);
            Value read = flat_multi_head(x, memory, memory, &cmask, flat_proj(g, base + "_cross"),
                                         cfg.heads, Normalizer::Softmax, nullptr, &drop);
            x = sublayer_norm(g, base + "_ln2", x, read, opt);
            if (l + 1 == cfg.layers) {
                out.ctx_read = read;
                out.src_query = x;
            }
            Value ff = feed_forward(g, base + "_ff", x, opt);
            x = sublayer_norm(g, base + "_ln3", x, ff, opt);
        }
        out.hidden = x;
        return out;
    }

    Value generator_logits(Graph& g, Value hidden) {
        return add_rowvec(matmul(hidden, g.param(params.get("gen_w"))),
                          g.param(params.get("gen_b")));
    }

    // ------------------------------------------------------------------
    // Context encoding blocks
    // ------------------------------------------------------------------

    // Monolingual cache: word keys/values are the last-layer representations
    // of the source words (EOS rows dropped); sentence keys/values are the
    // per-sentence means of those word rows.
    ContextCache build_encoder_context(Graph& g, Value enc_out, const SegmentBounds& bounds) const {
        if (bounds.empty()) throw std::invalid_argument("build_encoder_context: empty document");
        auto [words, word_bounds] = strip_service_rows(enc_out, bounds, /*drop_first=*/false);
        ContextCache cache;
        cache.side = Integration::Encoder;
        cache.k_w = words;
        cache.v_w = words;
        Value means = segment_mean_rows(words, word_bounds);
        cache.k_s = means;
        cache.v_s = means;
        cache.bounds = word_bounds;
        cache.validate();
        return cache;
    }

    // Bilingual cache: keys match the source side (the raw source-attention
    // reads), values match the target side (the final hidden states); BOS
    // rows dropped so rows align with target words.
    ContextCache build_decoder_context(Graph& g, Value ctx_read, Value hidden,
                                       const SegmentBounds& bounds) const {
        if (!ctx_read.valid() || !hidden.valid())
            throw std::invalid_argument("build_decoder_context: target side missing");
        auto [keys, word_bounds] = strip_service_rows(ctx_read, bounds, /*drop_first=*/true);
        auto [values, vb] = strip_service_rows(hidden, bounds, /*drop_first=*/true);
        (void)vb;
        ContextCache cache;
        cache.side = Integration::Decoder;
        cache.k_w = keys;
        cache.v_w = values;
        cache.k_s = segment_mean_rows(keys, word_bounds);
        cache.v_s = segment_mean_rows(values, word_bounds);
        cache.bounds = word_bounds;
        cache.validate();
        return cache;
    }

    // ------------------------------------------------------------------
    // Document-level context layer and gating
    // ------------------------------------------------------------------

    // Context layer: a multi-head context attention sub-layer and a
    // feed-forward sub-layer, each followed by layer normalization, with no
    // residual connections.
    Value context_layer(Graph& g, Value queries, const ContextCache& cache, const ContextMask& mask,
                        const ForwardOptions& opt, AttentionTrace* trace = nullptr) {
        if ((cache.side == Integration::Encoder) != (cfg.integration == Integration::Encoder))
            throw std::invalid_argument("context_layer: cache built for the other integration side");
        Value mask_row = g.constant(mask.row);
        const AttnDropout drop = attn_dropout(opt);
        Value att;
        if (cfg.hierarchical()) {
            Value q_s = matmul(queries, g.param(params.get("ctx_qs_in")));
            Value q_w = matmul(queries, g.param(params.get("ctx_qw_in")));
            HierProjections proj{g.param(params.get("ctx_att_wqs")), g.param(params.get("ctx_att_wqw")),
                                 g.param(params.get("ctx_att_wks")), g.param(params.get("ctx_att_wkw")),
                                 g.param(params.get("ctx_att_wvw")), g.param(params.get("ctx_att_wo"))};
            att = h_multi_head(q_s, cache.k_s, q_w, cache.k_w, cache.v_w, &mask_row, proj, cfg.heads,
                               cfg.word_normalizer(), cache.bounds, trace, &drop);
        } else {
            Value q = matmul(queries, g.param(params.get("ctx_q_in")));
            FlatProjections proj{g.param(params.get("ctx_att_wq")), g.param(params.get("ctx_att_wk")),
                                 g.param(params.get("ctx_att_wv")), g.param(params.get("ctx_att_wo"))};
            if (cfg.attention == AttentionVariant::FlatSentence) {
                att = flat_multi_head(q, cache.k_s, cache.v_s, &mask_row, proj, cfg.heads,
                                      Normalizer::Softmax, nullptr, &drop);
            } else {
                Value word_mask = g.constant(expand_mask_to_words(mask.row, cache.bounds));
                att = flat_multi_head(q, cache.k_w, cache.v_w, &word_mask, proj, cfg.heads,
                                      Normalizer::Softmax, nullptr, &drop);
            }
        }
        Value sub1 = layer_norm_rows(maybe_dropout(g, att, opt), g.param(params.get("ctx_ln1_g")),
                                     g.param(params.get("ctx_ln1_b")));
        Value ff = feed_forward(g, "ctx_ff", sub1, opt);
        return layer_norm_rows(maybe_dropout(g, ff, opt), g.param(params.get("ctx_ln2_g")),
                               g.param(params.get("ctx_ln2_b")));
    }

    // gamma = sigma(W_r r + W_d d); output = gamma * r + (1 - gamma) * d.
    Value context_gate(Graph& g, Value r, Value d) {
        if (!r.val().same_shape(d.val()))
            throw std::invalid_argument("context_gate: shape mismatch");
        Value gamma;
        if (cfg.gate_override) {
            gamma = g.constant(Tensor::full(r.val().shape, *cfg.gate_override));
        } else {
            gamma = sigmoid(add(matmul(r, g.param(params.get("gate_wr"))),
                                matmul(d, g.param(params.get("gate_wd")))));
        }
        Value one_minus = scale(add(gamma, g.constant(Tensor::full(gamma.val().shape, -1.0))), -1.0);
        return add(mul(gamma, r), mul(one_minus, d));
    }

    // ------------------------------------------------------------------
    // Whole-document forward
    // ------------------------------------------------------------------

    DocForward document_forward(Graph& g, const DocumentPair& doc, const ForwardOptions& opt) {
        if (doc.src.empty() || doc.src.size() != doc.tgt.size())
            throw std::invalid_argument("document_forward: malformed document");
        const std::size_t J = doc.src.size();
        TokenLayout src = layout_sentences(with_eos(doc.src));
        std::vector<std::vector<int>> tgt_in, gold;
        for (const auto& sent : doc.tgt) {
            std::vector<int> in = {Vocab::BOS};
            in.insert(in.end(), sent.begin(), sent.end());
            tgt_in.push_back(std::move(in));
            std::vector<int> out = sent;
            out.push_back(Vocab::EOS);
            gold.push_back(std::move(out));
        }
        TokenLayout tgt = layout_sentences(tgt_in);

        DocForward result;
        result.gold = gold;
        for (const auto& sent : gold) result.total_target_tokens += sent.size();
        result.degenerate.assign(J, false);

        Value enc = encode_document(g, src, opt);
        Value memory = enc;
        const bool enc_side_ctx = opt.with_context && cfg.integration == Integration::Encoder;
        const bool dec_side_ctx = opt.with_context && cfg.integration == Integration::Decoder;

        if (enc_side_ctx) {
            ContextCache cache = build_encoder_context(g, enc, src.bounds);
            std::vector<Value> gated;
            for (std::size_t j = 0; j < J; ++j) {
                Value r = slice_rows(enc, src.bounds[j].first, src.bounds[j].second);
                gated.push_back(contextualize(g, r, r, cache, j, opt, result));
            }
            memory = concat_rows(gated);
        }

        DecoderOut dec = decode_document(g, tgt, memory, src, opt);

        if (dec_side_ctx) {
            ContextCache cache = build_decoder_context(g, dec.ctx_read, dec.hidden, tgt.bounds);
            for (std::size_t j = 0; j < J; ++j) {
                Value r = slice_rows(dec.hidden, tgt.bounds[j].first, tgt.bounds[j].second);
                Value q = slice_rows(dec.src_query, tgt.bounds[j].first, tgt.bounds[j].second);
                Value mixed = contextualize(g, r, q, cache, j, opt, result);
                result.logits.push_back(generator_logits(g, mixed));
            }
        } else {
            Value logits = generator_logits(g, dec.hidden);
            for (std::size_t j = 0; j < J; ++j)
                result.logits.push_back(slice_rows(logits, tgt.bounds[j].first, tgt.bounds[j].second));
        }
        return result;
    }

    // Mean label-smoothed cross entropy per target token.
    Value document_loss(Graph& g, const DocumentPair& doc, const ForwardOptions& opt,
                        DocForward* forward_out = nullptr) {
        DocForward fwd = document_forward(g, doc, opt);
        Value total = g.scalar(0.0);
        for (std::size_t j = 0; j < fwd.logits.size(); ++j)
            total = add(total,
                        cross_entropy_label_smoothed(fwd.logits[j], fwd.gold[j], cfg.label_smoothing));
        Value loss = scale(total, 1.0 / double(fwd.total_target_tokens));
        if (forward_out) *forward_out = std::move(fwd);
        return loss;
    }

    // Teacher-forced document log-likelihood (no smoothing): the sum over
    // sentences and positions of log P(y | prefix, source, context).
    double document_log_likelihood(const DocumentPair& doc, bool with_context) {
        Graph g(false);
        ForwardOptions opt;
        opt.with_context = with_context;
        DocForward fwd = document_forward(g, doc, opt);
        double total = 0.0;
        for (std::size_t j = 0; j < fwd.logits.size(); ++j)
            total += log_prob_sum(fwd.logits[j], fwd.gold[j]).val()[0];
        return total;
    }

    // Context-agnostic single-sentence forward: logits for every prefix
    // position of tgt_prefix (BOS-shifted internally).
    Tensor sentence_logits(const std::vector<int>& src_sentence,
                           const std::vector<int>& tgt_prefix) {
        Graph g(false);
        ForwardOptions opt;
        TokenLayout src = layout_sentences(with_eos({src_sentence}));
        std::vector<int> in = {Vocab::BOS};
        in.insert(in.end(), tgt_prefix.begin(), tgt_prefix.end());
        TokenLayout tgt = layout_sentences({in});
        Value enc = encode_document(g, src, opt);
        DecoderOut dec = decode_document(g, tgt, enc, src, opt);
        return generator_logits(g, dec.hidden).val();
    }

    // ------------------------------------------------------------------
    // Inference-side prepared documents
    // ------------------------------------------------------------------

    // Encoder-side (monolingual) preparation: encodes the source document,
    // builds the cache and the per-sentence gated memory.
    PreparedDoc prepare_source(const std::vector<std::vector<int>>& src_sentences,
                               bool with_context) {
        if (with_context && cfg.integration == Integration::Decoder)
            throw std::invalid_argument(
                "prepare_source: decoder-side integration needs target context "
                "(use prepare_bilingual)");
        Graph g(false);
        ForwardOptions opt;
        PreparedDoc prep;
        prep.sentences = src_sentences.size();
        TokenLayout src = layout_sentences(with_eos(src_sentences));
        Value enc = encode_document(g, src, opt);
        if (with_context && cfg.integration == Integration::Encoder) {
            ContextCache cache = build_encoder_context(g, enc, src.bounds);
            DocForward scratch;
            scratch.degenerate.assign(prep.sentences, false);
            for (std::size_t j = 0; j < prep.sentences; ++j) {
                Value r = slice_rows(enc, src.bounds[j].first, src.bounds[j].second);
                prep.memory.push_back(contextualize(g, r, r, cache, j, opt, scratch).val());
            }
        } else {
            for (std::size_t j = 0; j < prep.sentences; ++j)
                prep.memory.push_back(
                    slice_rows(enc, src.bounds[j].first, src.bounds[j].second).val());
        }
        return prep;
    }

    // Decoder-side (bilingual) preparation: teacher-forces the given target
    // sentences (references during training-style scoring, hypotheses during
    // iterative decoding) to build the bilingual cache.
    PreparedDoc prepare_bilingual(const std::vector<std::vector<int>>& src_sentences,
                                  const std::vector<std::vector<int>>& tgt_sentences) {
        if (cfg.integration != Integration::Decoder)
            throw std::invalid_argument("prepare_bilingual: model is encoder-integrated");
        if (src_sentences.size() != tgt_sentences.size())
            throw std::invalid_argument("prepare_bilingual: sentence count mismatch");
        Graph g(false);
        ForwardOptions opt;
        PreparedDoc prep;
        prep.sentences = src_sentences.size();
        TokenLayout src = layout_sentences(with_eos(src_sentences));
        Value enc = encode_document(g, src, opt);
        for (std::size_t j = 0; j < prep.sentences; ++j)
            prep.memory.push_back(slice_rows(enc, src.bounds[j].first, src.bounds[j].second).val());
        std::vector<std::vector<int>> tgt_in;
        for (const auto& sent : tgt_sentences) {
            std::vector<int> in = {Vocab::BOS};
            in.insert(in.end(), sent.begin(), sent.end());
            if (in.size() == 1) in.push_back(Vocab::EOS);  // empty hypothesis still needs a word row
            tgt_in.push_back(std::move(in));
        }
        TokenLayout tgt = layout_sentences(tgt_in);
        DecoderOut dec = decode_document(g, tgt, enc, src, opt);
        ContextCache cache = build_decoder_context(g, dec.ctx_read, dec.hidden, tgt.bounds);
        prep.cache_kw = cache.k_w.val();
        prep.cache_vw = cache.v_w.val();
        prep.cache_ks = cache.k_s.val();
        prep.cache_vs = cache.v_s.val();
        prep.cache_bounds = cache.bounds;
        prep.has_cache = true;
        return prep;
    }

    // Teacher-forced logits for one sentence of a prepared document; used by
    // greedy decoding (growing prefixes), likelihood scoring and inspection.
    Tensor score_sentence(const PreparedDoc& prep, std::size_t j,
                          const std::vector<int>& src_sentence, const std::vector<int>& tgt_prefix,
                          bool with_context, AttentionTrace* trace = nullptr,
                          bool* degenerate_out = nullptr) {
        if (j >= prep.sentences) throw std::out_of_range("score_sentence: sentence index");
        Graph g(false);
        ForwardOptions opt;
        opt.collect_traces = trace != nullptr;
        TokenLayout src = layout_sentences(with_eos({src_sentence}));
        std::vector<int> in = {Vocab::BOS};
        in.insert(in.end(), tgt_prefix.begin(), tgt_prefix.end());
        TokenLayout tgt = layout_sentences({in});
        Value memory = g.constant(prep.memory[j]);
        DecoderOut dec = decode_document(g, tgt, memory, src, opt);
        Value hidden = dec.hidden;
        if (with_context && cfg.integration == Integration::Decoder) {
            if (!prep.has_cache)
                throw std::invalid_argument("score_sentence: document prepared without a cache");
            ContextMask mask = build_context_mask(prep.sentences, j, cfg.setting);
            if (mask.degenerate()) {
                Value d = g.constant(Tensor(hidden.val().shape));
                hidden = context_gate(g, hidden, d);
                if (degenerate_out) *degenerate_out = true;
            } else {
                ContextCache cache;
                cache.side = Integration::Decoder;
                cache.k_w = g.constant(prep.cache_kw);
                cache.v_w = g.constant(prep.cache_vw);
                cache.k_s = g.constant(prep.cache_ks);
                cache.v_s = g.constant(prep.cache_vs);
                cache.bounds = prep.cache_bounds;
                AttentionTrace local_trace;
                Value d = context_layer(g, dec.src_query, cache, mask, opt,
                                        opt.collect_traces && cfg.hierarchical() ? &local_trace
                                                                                 : nullptr);
                if (trace) *trace = local_trace;
                hidden = context_gate(g, hidden, d);
            }
        }
        return generator_logits(g, hidden).val();
    }

    // Plain-tensor snapshot of a context encoding block for callers that need
    // to feed a cache in explicitly (decoding, inspection, tests).
    struct PlainCache {
        Tensor kw, vw, ks, vs;
        SegmentBounds bounds;
        Integration side = Integration::Encoder;
    };

    PlainCache export_encoder_cache(const std::vector<std::vector<int>>& src_sentences) {
        Graph g(false);
        ForwardOptions opt;
        TokenLayout src = layout_sentences(with_eos(src_sentences));
        Value enc = encode_document(g, src, opt);
        ContextCache cache = build_encoder_context(g, enc, src.bounds);
        return {cache.k_w.val(), cache.v_w.val(), cache.k_s.val(), cache.v_s.val(), cache.bounds,
                Integration::Encoder};
    }

    // Per-sentence context-aware forward against an externally supplied
    // cache (encoder integration). Returns logits for the BOS-shifted prefix.
    Tensor forward_with_cache(const std::vector<std::vector<int>>& src_sentences, std::size_t j,
                              const std::vector<int>& tgt_prefix, const PlainCache& plain,
                              AttentionTrace* trace = nullptr) {
        if (cfg.integration != Integration::Encoder)
            throw std::invalid_argument("forward_with_cache: cache side mismatch");
        if (plain.side != Integration::Encoder)
            throw std::invalid_argument("forward_with_cache: cache built for the other side");
        Graph g(false);
        ForwardOptions opt;
        TokenLayout src = layout_sentences(with_eos({src_sentences[j]}));
        Value enc = encode_document(g, src, opt);
        ContextMask mask = build_context_mask(src_sentences.size(), j, cfg.setting);
        Value memory = enc;
        if (mask.degenerate()) {
            memory = context_gate(g, enc, g.constant(Tensor(enc.val().shape)));
        } else {
            ContextCache cache;
            cache.side = Integration::Encoder;
            cache.k_w = g.constant(plain.kw);
            cache.v_w = g.constant(plain.vw);
            cache.k_s = g.constant(plain.ks);
            cache.v_s = g.constant(plain.vs);
            cache.bounds = plain.bounds;
            AttentionTrace local;
            Value d = context_layer(g, enc, cache, mask, opt,
                                    trace && hierarchical_traces() ? &local : nullptr);
            if (trace) *trace = local;
            memory = context_gate(g, enc, d);
        }
        std::vector<int> in = {Vocab::BOS};
        in.insert(in.end(), tgt_prefix.begin(), tgt_prefix.end());
        TokenLayout tgt = layout_sentences({in});
        DecoderOut dec = decode_document(g, tgt, memory, src, opt);
        return generator_logits(g, dec.hidden).val();
    }

    bool hierarchical_traces() const { return cfg.hierarchical(); }

    // Per-sentence context trace against an encoder-side cache (inspection).
    Tensor encoder_context_dump(const std::vector<std::vector<int>>& src_sentences, std::size_t j,
                                AttentionTrace* trace) {
        if (cfg.integration != Integration::Encoder)
            throw std::invalid_argument("encoder_context_dump: decoder-side model");
        Graph g(false);
        ForwardOptions opt;
        opt.collect_traces = true;
        TokenLayout src = layout_sentences(with_eos(src_sentences));
        Value enc = encode_document(g, src, opt);
        ContextCache cache = build_encoder_context(g, enc, src.bounds);
        ContextMask mask = build_context_mask(src_sentences.size(), j, cfg.setting);
        if (mask.degenerate())
            throw std::invalid_argument("encoder_context_dump: no visible context for sentence");
        Value r = slice_rows(enc, src.bounds[j].first, src.bounds[j].second);
        AttentionTrace local;
        Value d = context_layer(g, r, cache, mask, opt, cfg.hierarchical() ? &local : nullptr);
        if (trace) *trace = local;
        return d.val();
    }

    // ------------------------------------------------------------------
    // Checkpoints
    // ------------------------------------------------------------------

    void save(const std::string& path) {
        std::vector<std::pair<std::string, const Tensor*>> tensors;
        for (ParamTensor* p : params.all()) tensors.emplace_back(p->name, &p->value);
        save_checkpoint(path, cfg, tensors);
    }

    static Model load(const std::string& path) {
        LoadedCheckpoint ck = load_checkpoint(path);
        Model model(ck.config);
        model.assign_tensors(ck);
        return model;
    }

    // Load a checkpoint into this model; configs must match exactly.
    void load_into(const std::string& path) {
        LoadedCheckpoint ck = load_checkpoint(path);
        if (!(ck.config == cfg))
            throw ConfigMismatchError("checkpoint: config mismatch\nexpected:\n" + cfg.to_kv() +
                                      "found:\n" + ck.config.to_kv());
        assign_tensors(ck);
    }

    // Import the sentence-stage parameters from a checkpoint whose dimensions
    // agree; the context block keeps its current (fresh) values.
    void import_sentence_stage(const std::string& path) {
        LoadedCheckpoint ck = load_checkpoint(path);
        const ModelConfig& other = ck.config;
        if (other.src_vocab != cfg.src_vocab || other.tgt_vocab != cfg.tgt_vocab ||
            other.model_dim != cfg.model_dim || other.ff_dim != cfg.ff_dim ||
            other.layers != cfg.layers || other.heads != cfg.heads)
            throw ConfigMismatchError("checkpoint: sentence-stage dimensions do not match");
        for (auto& [name, tensor] : ck.tensors) {
            if (is_context_param(name)) continue;
            ParamTensor& p = params.get(name);
            if (!p.value.same_shape(tensor))
                throw ConfigMismatchError("checkpoint: shape mismatch for " + name);
            p.value = tensor;
        }
    }

private:
    void assign_tensors(LoadedCheckpoint& ck) {
        std::size_t assigned = 0;
        for (auto& [name, tensor] : ck.tensors) {
            if (!params.has(name))
                throw CheckpointError("checkpoint: unexpected tensor " + name);
            ParamTensor& p = params.get(name);
            if (!p.value.same_shape(tensor))
                throw CheckpointError("checkpoint: shape mismatch for " + name);
            p.value = std::move(tensor);
            ++assigned;
        }
        if (assigned != params.all().size())
            throw CheckpointError("checkpoint: missing tensors (got " + std::to_string(assigned) +
                                  " of " + std::to_string(params.all().size()) + ")");
    }

    static std::vector<std::vector<int>> with_eos(const std::vector<std::vector<int>>& sents) {
        std::vector<std::vector<int>> out = sents;
        for (auto& s : out) {
            if (s.empty()) throw std::invalid_argument("model: empty sentence");
            s.push_back(Vocab::EOS);
        }
        return out;
    }

    void create_params() {
        const std::size_t d = cfg.model_dim, ff = cfg.ff_dim;
        params.create("src_embed", Tensor({cfg.src_vocab, d}));
        params.create("tgt_embed", Tensor({cfg.tgt_vocab, d}));
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string base = "enc" + std::to_string(l);
            create_attention(base + "_self", d);
            create_layer_norm(base + "_ln1", d);
            create_ff(base + "_ff", d, ff);
            create_layer_norm(base + "_ln2", d);
        }
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string base = "dec" + std::to_string(l);
            create_attention(base + "_self", d);
            create_layer_norm(base + "_ln1", d);
            create_attention(base + "_cross", d);
            create_layer_norm(base + "_ln2", d);
            create_ff(base + "_ff", d, ff);
            create_layer_norm(base + "_ln3", d);
        }
        params.create("gen_w", Tensor({d, cfg.tgt_vocab}));
        params.create("gen_b", Tensor({1, cfg.tgt_vocab}));

        // document-level context layer
        if (cfg.hierarchical()) {
            params.create("ctx_qs_in", Tensor({d, d}));
            params.create("ctx_qw_in", Tensor({d, d}));
            for (const char* n : {"ctx_att_wqs", "ctx_att_wqw", "ctx_att_wks", "ctx_att_wkw",
                                  "ctx_att_wvw", "ctx_att_wo"})
                params.create(n, Tensor({d, d}));
        } else {
            params.create("ctx_q_in", Tensor({d, d}));
            for (const char* n : {"ctx_att_wq", "ctx_att_wk", "ctx_att_wv", "ctx_att_wo"})
                params.create(n, Tensor({d, d}));
        }
        create_layer_norm("ctx_ln1", d);
        create_ff("ctx_ff", d, ff);
        create_layer_norm("ctx_ln2", d);
        params.create("gate_wr", Tensor({d, d}));
        params.create("gate_wd", Tensor({d, d}));
    }

    void create_attention(const std::string& base, std::size_t d) {
        for (const char* suffix : {"_wq", "_wk", "_wv", "_wo"})
            params.create(base + suffix, Tensor({d, d}));
    }

    void create_ff(const std::string& base, std::size_t d, std::size_t ff) {
        params.create(base + "_w1", Tensor({d, ff}));
        params.create(base + "_b1", Tensor({1, ff}));
        params.create(base + "_w2", Tensor({ff, d}));
        params.create(base + "_b2", Tensor({1, d}));
    }

    void create_layer_norm(const std::string& base, std::size_t d) {
        params.create(base + "_g", Tensor({d}));
        params.create(base + "_b", Tensor({d}));
    }

    void init_stack_tensor(ParamTensor& p, Rng& rng) {
        const std::string& n = p.name;
        if (n.find("_ln") != std::string::npos || n == "ctx_ln1_g" || n == "ctx_ln2_g") {
            // layer norms: gain 1, bias 0
            const bool is_gain = n.size() >= 2 && n.substr(n.size() - 2) == "_g";
            p.value.fill(is_gain ? 1.0 : 0.0);
        } else if (n.size() >= 3 && (n.substr(n.size() - 3) == "_b1" || n.substr(n.size() - 3) == "_b2")) {
            p.value.fill(0.0);
        } else if (n == "gen_b") {
            p.value.fill(0.0);
        } else {
            const std::size_t fan_in = p.value.rows(), fan_out = p.value.cols();
            const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
            p.value = rand_uniform(rng, p.value.shape, -limit, limit);
        }
    }

    FlatProjections flat_proj(Graph& g, const std::string& base) {
        return {g.param(params.get(base + "_wq")), g.param(params.get(base + "_wk")),
                g.param(params.get(base + "_wv")), g.param(params.get(base + "_wo"))};
    }

    Value maybe_dropout(Graph& g, Value v, const ForwardOptions& opt) {
        if (!opt.train || opt.dropout == 0.0) return v;
        if (!opt.rng) throw std::invalid_argument("forward: dropout requested without an rng");
        return dropout(v, opt.dropout, *opt.rng, true);
    }

    AttnDropout attn_dropout(const ForwardOptions& opt) const {
        AttnDropout d;
        if (opt.train && opt.dropout > 0.0) {
            d.rate = opt.dropout;
            d.rng = opt.rng;
        }
        return d;
    }

    Value embed(Graph& g, const std::string& table, const TokenLayout& layout,
                const ForwardOptions& opt) {
        Value x = scale(embedding(g.param(params.get(table)), layout.ids),
                        std::sqrt(double(cfg.model_dim)));
        x = add(x, g.constant(positional_rows(layout.position, cfg.model_dim)));
        return maybe_dropout(g, x, opt);
    }

    Value sublayer_norm(Graph& g, const std::string& ln, Value x, Value sub,
                        const ForwardOptions& opt) {
        return layer_norm_rows(add(x, maybe_dropout(g, sub, opt)), g.param(params.get(ln + "_g")),
                               g.param(params.get(ln + "_b")));
    }

    Value feed_forward(Graph& g, const std::string& base, Value x, const ForwardOptions& opt) {
        Value h = relu(add_rowvec(matmul(x, g.param(params.get(base + "_w1"))),
                                  g.param(params.get(base + "_b1"))));
        h = maybe_dropout(g, h, opt);
        return add_rowvec(matmul(h, g.param(params.get(base + "_w2"))),
                          g.param(params.get(base + "_b2")));
    }

    // Context layer + gate for one sentence; returns the gated representation.
    Value contextualize(Graph& g, Value r, Value queries, const ContextCache& cache, std::size_t j,
                        const ForwardOptions& opt, DocForward& result) {
        ContextMask mask = build_context_mask(cache.bounds.size(), j, cfg.setting);
        if (mask.degenerate()) {
            // no visible context: the layer output is defined as zero
            result.degenerate[j] = true;
            if (opt.collect_traces) result.traces.emplace_back();
            Value d = g.constant(Tensor(r.val().shape));
            return context_gate(g, r, d);
        }
        AttentionTrace trace;
        Value d = context_layer(g, queries, cache, mask, opt,
                                opt.collect_traces && cfg.hierarchical() ? &trace : nullptr);
        if (opt.collect_traces) result.traces.push_back(std::move(trace));
        return context_gate(g, r, d);
    }
};

}  // namespace datn
