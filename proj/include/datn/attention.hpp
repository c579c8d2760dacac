#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "datn/graph.hpp"

namespace datn {

enum class Normalizer { Softmax, Sparsemax };
enum class Setting { Offline, Online };

// Additive mask value standing in for -inf. Large enough that exp underflows
// to exactly 0 after max subtraction and sparsemax never includes the entry
// in its support.
constexpr double kMaskValue = -1e9;

inline Value normalize_rows(Value scores, Normalizer norm) {
    return norm == Normalizer::Softmax ? softmax_rows(scores) : sparsemax_rows(scores);
}

// Per-sentence additive context mask. Offline masks only the query's own
// sentence; online masks the query's sentence and everything after it.
struct ContextMask {
    Tensor row;  // 1 x J, entries 0 or kMaskValue
    Setting setting = Setting::Offline;
    std::size_t doc_sentences = 0;
    std::size_t query_sentence = 0;

    bool degenerate() const {
        for (double v : row.data)
            if (v == 0.0) return false;
        return true;
    }
};

inline ContextMask build_context_mask(std::size_t doc_sentence_count, std::size_t query_sentence,
                                      Setting setting) {
    if (query_sentence >= doc_sentence_count)
        throw std::out_of_range("build_context_mask: sentence index out of range");
    ContextMask m;
    m.setting = setting;
    m.doc_sentences = doc_sentence_count;
    m.query_sentence = query_sentence;
    m.row = Tensor({1, doc_sentence_count});
    for (std::size_t s = 0; s < doc_sentence_count; ++s) {
        const bool masked =
            setting == Setting::Offline ? s == query_sentence : s >= query_sentence;
        m.row.data[s] = masked ? kMaskValue : 0.0;
    }
    return m;
}

// Sentence boundaries as token-offset ranges into the word-level matrices.
using SegmentBounds = std::vector<std::pair<std::size_t, std::size_t>>;

inline Tensor expand_mask_to_words(const Tensor& sentence_mask, const SegmentBounds& bounds) {
    std::size_t total = 0;
    for (const auto& b : bounds) total = std::max(total, b.second);
    Tensor out({1, total});
    for (std::size_t s = 0; s < bounds.size(); ++s)
        for (std::size_t i = bounds[s].first; i < bounds[s].second; ++i)
            out.data[i] = sentence_mask.data[s];
    return out;
}

namespace detail {

inline void require_some_key_unmasked(const Tensor& mask) {
    const std::size_t r = mask.rows(), c = mask.cols();
    for (std::size_t i = 0; i < r; ++i) {
        bool any = false;
        for (std::size_t j = 0; j < c; ++j)
            if (mask.data[i * c + j] == 0.0) {
                any = true;
                break;
            }
        if (!any) throw std::invalid_argument("attention: every key masked for a query");
    }
}

inline Value apply_mask(Value scores, const Value* mask) {
    if (!mask) return scores;
    require_some_key_unmasked(mask->val());
    if (mask->rows() == 1 && scores.rows() >= 1) return add_rowvec(scores, *mask);
    if (mask->val().same_shape(scores.val())) return add(scores, *mask);
    throw std::invalid_argument("attention: mask shape " + mask->val().shape_str() +
                                " does not match scores " + scores.val().shape_str());
}

}  // namespace detail

struct AttentionOutput {
    Value output;
    Value weights;
};

// Optional dropout on normalized attention weights (training only).
struct AttnDropout {
    double rate = 0.0;
    Rng* rng = nullptr;
    bool enabled() const { return rate > 0.0 && rng != nullptr; }
};

namespace detail {

inline Value maybe_drop_weights(Value w, const AttnDropout* drop) {
    if (!drop || !drop->enabled()) return w;
    return dropout(w, drop->rate, *drop->rng, true);
}

}  // namespace detail

// weights = normalizer(Q K^T / sqrt(d_k) + mask); output = weights V.
inline AttentionOutput scaled_dot_attention(Value q, Value k, Value v, const Value* mask,
                                            Normalizer norm, const AttnDropout* drop = nullptr) {
    if (q.cols() != k.cols())
        throw std::invalid_argument("scaled_dot_attention: query/key dim mismatch");
    if (k.rows() != v.rows())
        throw std::invalid_argument("scaled_dot_attention: key/value count mismatch");
    Value scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(double(q.cols())));
    scores = detail::apply_mask(scores, mask);
    Value w = normalize_rows(scores, norm);
    return {matmul_rowseq(detail::maybe_drop_weights(w, drop), v), w};
}

// Sentence-level key matching: always sparsemax, so irrelevant sentences get
// exactly zero weight.
inline Value sentence_attention_weights(Value q_s, Value k_s, const Value* mask) {
    Value scores = scale(matmul_nt(q_s, k_s), 1.0 / std::sqrt(double(q_s.cols())));
    scores = detail::apply_mask(scores, mask);
    return sparsemax_rows(scores);
}

// Word-level key matching, computed densely for every sentence.
inline std::vector<Value> word_attention_weights(Value q_w, Value k_w, const SegmentBounds& bounds,
                                                 Normalizer norm) {
    Value scores = scale(matmul_nt(q_w, k_w), 1.0 / std::sqrt(double(q_w.cols())));
    std::vector<Value> per_sentence;
    per_sentence.reserve(bounds.size());
    for (const auto& [b0, b1] : bounds)
        per_sentence.push_back(normalize_rows(slice_cols(scores, b0, b1), norm));
    return per_sentence;
}

// alpha_hier^j = alpha_s(j) * alpha_w^j, concatenated in document order.
inline Value rescale_hierarchical(Value alpha_s, const std::vector<Value>& alpha_w,
                                  const SegmentBounds& bounds) {
    if (alpha_w.size() != bounds.size() || alpha_s.cols() != alpha_w.size())
        throw std::invalid_argument("rescale_hierarchical: sentence count mismatch");
    std::vector<Value> scaled;
    scaled.reserve(alpha_w.size());
    for (std::size_t j = 0; j < alpha_w.size(); ++j) {
        if (alpha_w[j].cols() != bounds[j].second - bounds[j].first)
            throw std::invalid_argument("rescale_hierarchical: boundary length mismatch");
        scaled.push_back(colwise_scale(alpha_w[j], slice_cols(alpha_s, j, j + 1)));
    }
    return concat_cols(scaled);
}

struct HeadTrace {
    Value alpha_s;
    std::vector<Value> alpha_w;
    Value alpha_hier;
};

struct AttentionTrace {
    std::vector<HeadTrace> heads;
    SegmentBounds bounds;
};

// The four-step hierarchical attention: sentence matching, word matching,
// re-scaling, value reading.
inline AttentionOutput h_attention(Value q_s, Value q_w, Value k_s, Value k_w, Value v_w,
                                   const Value* mask, Normalizer word_norm,
                                   const SegmentBounds& bounds, HeadTrace* trace = nullptr,
                                   const AttnDropout* drop = nullptr) {
    if (q_s.rows() != q_w.rows())
        throw std::invalid_argument("h_attention: query row mismatch");
    if (std::size_t(k_s.rows()) != bounds.size())
        throw std::invalid_argument("h_attention: sentence key count mismatch");
    if (k_w.rows() != v_w.rows())
        throw std::invalid_argument("h_attention: word key/value count mismatch");
    Value alpha_s = sentence_attention_weights(q_s, k_s, mask);
    std::vector<Value> alpha_w = word_attention_weights(q_w, k_w, bounds, word_norm);
    Value alpha_hier = rescale_hierarchical(alpha_s, alpha_w, bounds);
    if (trace) {
        trace->alpha_s = alpha_s;
        trace->alpha_w = alpha_w;
        trace->alpha_hier = alpha_hier;
    }
    return {matmul_rowseq(detail::maybe_drop_weights(alpha_hier, drop), v_w), alpha_hier};
}

struct HierProjections {
    Value wqs, wqw, wks, wkw, wvw, wo;  // each model_dim x model_dim
};

struct FlatProjections {
    Value wq, wk, wv, wo;
};

namespace detail {

inline void check_heads(std::size_t model_dim, std::size_t heads) {
    if (heads == 0 || model_dim % heads != 0)
        throw std::invalid_argument("multi-head: head count must divide model dim");
}

}  // namespace detail

// H-MultiHead: all five inputs get separate per-head linear maps; the head
// outputs are concatenated and mixed by wo.
inline Value h_multi_head(Value q_s, Value k_s, Value q_w, Value k_w, Value v_w, const Value* mask,
                          const HierProjections& proj, std::size_t heads, Normalizer word_norm,
                          const SegmentBounds& bounds, AttentionTrace* trace = nullptr,
                          const AttnDropout* drop = nullptr) {
    const std::size_t d = q_s.cols();
    detail::check_heads(d, heads);
    const std::size_t dk = d / heads;
    Value pqs = matmul(q_s, proj.wqs);
    Value pqw = matmul(q_w, proj.wqw);
    Value pks = matmul(k_s, proj.wks);
    Value pkw = matmul(k_w, proj.wkw);
    Value pvw = matmul(v_w, proj.wvw);
    std::vector<Value> head_outputs;
    head_outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dk, c1 = (h + 1) * dk;
        HeadTrace* ht = nullptr;
        if (trace) {
            trace->heads.emplace_back();
            ht = &trace->heads.back();
        }
        AttentionOutput out =
            h_attention(slice_cols(pqs, c0, c1), slice_cols(pqw, c0, c1), slice_cols(pks, c0, c1),
                        slice_cols(pkw, c0, c1), slice_cols(pvw, c0, c1), mask, word_norm, bounds,
                        ht, drop);
        head_outputs.push_back(out.output);
    }
    if (trace) trace->bounds = bounds;
    return matmul(concat_cols(head_outputs), proj.wo);
}

// Standard multi-head scaled dot-product attention (flat sentence- or
// word-level context, stack self-attention, source attention).
inline Value flat_multi_head(Value q, Value k, Value v, const Value* mask,
                             const FlatProjections& proj, std::size_t heads, Normalizer norm,
                             std::vector<Value>* head_weights = nullptr,
                             const AttnDropout* drop = nullptr) {
    const std::size_t d = q.cols();
    detail::check_heads(d, heads);
    const std::size_t dk = d / heads;
    Value pq = matmul(q, proj.wq);
    Value pk = matmul(k, proj.wk);
    Value pv = matmul(v, proj.wv);
    std::vector<Value> head_outputs;
    head_outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t c0 = h * dk, c1 = (h + 1) * dk;
        AttentionOutput out = scaled_dot_attention(slice_cols(pq, c0, c1), slice_cols(pk, c0, c1),
                                                   slice_cols(pv, c0, c1), mask, norm, drop);
        head_outputs.push_back(out.output);
        if (head_weights) head_weights->push_back(out.weights);
    }
    return matmul(concat_cols(head_outputs), proj.wo);
}

// Inference-only route that skips word matching for pruned sentences; must
// agree numerically with the dense path. Benchmarking aid, not used in
// training.
inline Tensor h_attention_pruned(const Tensor& q_s, const Tensor& q_w, const Tensor& k_s,
                                 const Tensor& k_w, const Tensor& v_w, const Tensor* mask_row,
                                 Normalizer word_norm, const SegmentBounds& bounds) {
    const std::size_t nq = q_s.rows(), dk = q_s.cols(), dv = v_w.cols();
    Tensor scores({nq, bounds.size()});
    const double inv = 1.0 / std::sqrt(double(dk));
    for (std::size_t i = 0; i < nq; ++i)
        for (std::size_t j = 0; j < bounds.size(); ++j) {
            double dot = 0.0;
            for (std::size_t t = 0; t < dk; ++t) dot += q_s.at(i, t) * k_s.at(j, t);
            scores.at(i, j) = dot * inv + (mask_row ? mask_row->data[j] : 0.0);
        }
    SparsemaxResult alpha_s = sparsemax(scores);
    Tensor out({nq, dv});
    for (std::size_t i = 0; i < nq; ++i) {
        for (std::size_t j = 0; j < bounds.size(); ++j) {
            const double as = alpha_s.probs.at(i, j);
            if (as == 0.0) continue;  // pruned sentence: skip its words entirely
            const auto [b0, b1] = bounds[j];
            Tensor wscores({1, b1 - b0});
            for (std::size_t w = b0; w < b1; ++w) {
                double dot = 0.0;
                for (std::size_t t = 0; t < dk; ++t) dot += q_w.at(i, t) * k_w.at(w, t);
                wscores.data[w - b0] = dot * inv;
            }
            Tensor aw;
            if (word_norm == Normalizer::Sparsemax) {
                aw = sparsemax(wscores).probs;
            } else {
                aw = wscores;
                detail::softmax_row_inplace(aw.data.data(), aw.numel());
            }
            for (std::size_t w = b0; w < b1; ++w) {
                const double weight = as * aw.data[w - b0];
                for (std::size_t t = 0; t < dv; ++t) out.at(i, t) += weight * v_w.at(w, t);
            }
        }
    }
    return out;
}

}  // namespace datn
