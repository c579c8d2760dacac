#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "datn/corpus.hpp"
#include "datn/model.hpp"
#include "datn/train.hpp"

namespace datn {

// ---------------------------------------------------------------------------
// Corpus BLEU
// ---------------------------------------------------------------------------

namespace detail {

template <typename Token>
std::map<std::vector<Token>, std::size_t> ngram_counts(const std::vector<Token>& sent,
                                                       std::size_t n) {
    std::map<std::vector<Token>, std::size_t> counts;
    if (sent.size() < n) return counts;
    for (std::size_t i = 0; i + n <= sent.size(); ++i)
        ++counts[std::vector<Token>(sent.begin() + i, sent.begin() + i + n)];
    return counts;
}

}  // namespace detail

// Corpus-level BLEU-4: geometric mean of clipped n-gram precisions times the
// brevity penalty, scaled to [0, 100]. Optional +1 smoothing adds one to the
// numerator and denominator of every order's precision.
template <typename Token>
double corpus_bleu(const std::vector<std::vector<Token>>& hypotheses,
                   const std::vector<std::vector<Token>>& references, std::size_t max_n = 4,
                   bool smooth = false) {
    if (references.empty()) throw std::invalid_argument("bleu: empty reference set");
    if (hypotheses.size() != references.size())
        throw std::invalid_argument("bleu: sentence count mismatch");
    std::vector<std::size_t> matches(max_n, 0), totals(max_n, 0);
    std::size_t hyp_len = 0, ref_len = 0;
    for (std::size_t s = 0; s < hypotheses.size(); ++s) {
        hyp_len += hypotheses[s].size();
        ref_len += references[s].size();
        for (std::size_t n = 1; n <= max_n; ++n) {
            auto hyp_counts = detail::ngram_counts(hypotheses[s], n);
            auto ref_counts = detail::ngram_counts(references[s], n);
            for (const auto& [gram, count] : hyp_counts) {
                totals[n - 1] += count;
                auto it = ref_counts.find(gram);
                if (it != ref_counts.end()) matches[n - 1] += std::min(count, it->second);
            }
        }
    }
    if (hyp_len == 0) return 0.0;
    double log_sum = 0.0;
    for (std::size_t n = 0; n < max_n; ++n) {
        const double add = smooth ? 1.0 : 0.0;
        const double num = double(matches[n]) + add;
        const double den = double(totals[n]) + add;
        if (num == 0.0 || den == 0.0) return 0.0;  // plain geometric mean, no smoothing
        log_sum += std::log(num / den);
    }
    const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - double(ref_len) / double(hyp_len));
    return 100.0 * bp * std::exp(log_sum / double(max_n));
}

// ---------------------------------------------------------------------------
// Contrastive scoring
// ---------------------------------------------------------------------------

struct ContrastiveReport {
    // distance buckets 0, 1, 2, 3, >3
    static constexpr std::size_t kBuckets = 5;
    std::array<std::size_t, kBuckets> correct{};
    std::array<std::size_t, kBuckets> counts{};

    static std::size_t bucket_of(std::size_t distance) { return std::min<std::size_t>(distance, 4); }

    double bucket_accuracy(std::size_t b) const {
        return counts[b] == 0 ? 0.0 : double(correct[b]) / double(counts[b]);
    }

    double overall() const {
        std::size_t c = 0, n = 0;
        for (std::size_t b = 0; b < kBuckets; ++b) {
            c += correct[b];
            n += counts[b];
        }
        return n == 0 ? 0.0 : double(c) / double(n);
    }

    std::string to_kv() const {
        std::ostringstream os;
        os.precision(10);
        const char* names[kBuckets] = {"0", "1", "2", "3", "gt3"};
        for (std::size_t b = 0; b < kBuckets; ++b) {
            os << "bucket" << names[b] << "_count=" << counts[b] << "\n";
            os << "bucket" << names[b] << "_acc=" << bucket_accuracy(b) << "\n";
        }
        os << "overall=" << overall() << "\n";
        return os.str();
    }
};

// Log-likelihood of one candidate target sentence under the model,
// conditioned on the prepared document context.
inline double candidate_log_likelihood(Model& model, const PreparedDoc& prep,
                                       const ContrastiveItem& item,
                                       const std::vector<int>& candidate, bool with_context) {
    Tensor logits = model.score_sentence(prep, item.sentence, item.doc.src[item.sentence],
                                         candidate, with_context);
    std::vector<int> gold = candidate;
    gold.push_back(Vocab::EOS);
    Graph g(false);
    return log_prob_sum(g.constant(logits), gold).val()[0];
}

// An item counts as correct iff the correct target strictly out-scores every
// foil; ties are incorrect.
inline ContrastiveReport score_contrastive(Model& model, const std::vector<ContrastiveItem>& items,
                                           bool with_context) {
    ContrastiveReport report;
    for (const ContrastiveItem& item : items) {
        PreparedDoc prep =
            (with_context && model.cfg.integration == Integration::Decoder)
                ? model.prepare_bilingual(item.doc.src, item.doc.tgt)
                : model.prepare_source(item.doc.src, with_context);
        const double correct_ll =
            candidate_log_likelihood(model, prep, item, item.correct, with_context);
        bool win = true;
        for (const auto& foil : item.foils) {
            const double foil_ll = candidate_log_likelihood(model, prep, item, foil, with_context);
            if (foil_ll >= correct_ll) {
                win = false;
                break;
            }
        }
        const std::size_t b = ContrastiveReport::bucket_of(item.distance);
        ++report.counts[b];
        if (win) ++report.correct[b];
    }
    return report;
}

// Stub-scorer variant used to validate the chance level of the protocol.
inline ContrastiveReport score_contrastive_with(
    const std::vector<ContrastiveItem>& items,
    const std::function<double(const ContrastiveItem&, const std::vector<int>&)>& scorer) {
    ContrastiveReport report;
    for (const ContrastiveItem& item : items) {
        const double correct_ll = scorer(item, item.correct);
        bool win = true;
        for (const auto& foil : item.foils)
            if (scorer(item, foil) >= correct_ll) {
                win = false;
                break;
            }
        const std::size_t b = ContrastiveReport::bucket_of(item.distance);
        ++report.counts[b];
        if (win) ++report.correct[b];
    }
    return report;
}

// ---------------------------------------------------------------------------
// Attention inspection
// ---------------------------------------------------------------------------

struct RankedSentence {
    std::size_t sentence = 0;
    double mass = 0.0;
    std::vector<double> word_weights;  // alpha_w before rescaling
};

struct HeadDump {
    std::vector<RankedSentence> ranked;  // decreasing mass, exact zeros omitted
    std::size_t pruned = 0;              // unmasked sentences with exactly zero mass
};

struct AttentionTraceDump {
    std::size_t sentence = 0;
    std::size_t token = 0;
    std::vector<HeadDump> heads;
    std::vector<RankedSentence> mean_ranked;  // head-averaged sentence ranking
    std::size_t mean_pruned = 0;

    std::string to_kv() const {
        std::ostringstream os;
        os.precision(10);
        os << "sentence=" << sentence << "\n";
        os << "token=" << token << "\n";
        os << "heads=" << heads.size() << "\n";
        for (std::size_t h = 0; h < heads.size(); ++h) {
            os << "head" << h << "_pruned=" << heads[h].pruned << "\n";
            for (std::size_t r = 0; r < heads[h].ranked.size(); ++r) {
                const RankedSentence& rs = heads[h].ranked[r];
                os << "head" << h << "_rank" << r << "_sentence=" << rs.sentence << "\n";
                os << "head" << h << "_rank" << r << "_mass=" << rs.mass << "\n";
                os << "head" << h << "_rank" << r << "_words=";
                for (std::size_t w = 0; w < rs.word_weights.size(); ++w)
                    os << (w ? " " : "") << rs.word_weights[w];
                os << "\n";
            }
        }
        os << "mean_pruned=" << mean_pruned << "\n";
        for (std::size_t r = 0; r < mean_ranked.size(); ++r) {
            os << "mean_rank" << r << "_sentence=" << mean_ranked[r].sentence << "\n";
            os << "mean_rank" << r << "_mass=" << mean_ranked[r].mass << "\n";
        }
        return os.str();
    }
};

// Distills a per-head trace into the ranked dump for one query token.
inline AttentionTraceDump summarize_trace(const AttentionTrace& trace, const ContextMask& mask,
                                          std::size_t query_row) {
    AttentionTraceDump dump;
    if (trace.heads.empty()) throw std::invalid_argument("summarize_trace: empty trace");
    const std::size_t J = trace.bounds.size();
    std::vector<double> mean_mass(J, 0.0);
    for (const HeadTrace& head : trace.heads) {
        const Tensor& alpha_s = head.alpha_s.val();
        if (query_row >= alpha_s.rows())
            throw std::out_of_range("summarize_trace: query token out of range");
        HeadDump hd;
        std::vector<RankedSentence> entries;
        for (std::size_t j = 0; j < J; ++j) {
            if (mask.row.data[j] != 0.0) continue;  // masked sentences are not candidates
            const double mass = alpha_s.at(query_row, j);
            mean_mass[j] += mass / double(trace.heads.size());
            if (mass == 0.0) {
                ++hd.pruned;
                continue;
            }
            RankedSentence rs;
            rs.sentence = j;
            rs.mass = mass;
            const Tensor& aw = head.alpha_w[j].val();
            for (std::size_t w = 0; w < aw.cols(); ++w)
                rs.word_weights.push_back(aw.at(query_row, w));
            entries.push_back(std::move(rs));
        }
        std::stable_sort(entries.begin(), entries.end(),
                         [](const RankedSentence& a, const RankedSentence& b) {
                             return a.mass > b.mass;
                         });
        hd.ranked = std::move(entries);
        dump.heads.push_back(std::move(hd));
    }
    for (std::size_t j = 0; j < J; ++j) {
        if (mask.row.data[j] != 0.0) continue;
        if (mean_mass[j] == 0.0) {
            ++dump.mean_pruned;
            continue;
        }
        RankedSentence rs;
        rs.sentence = j;
        rs.mass = mean_mass[j];
        dump.mean_ranked.push_back(rs);
    }
    std::stable_sort(dump.mean_ranked.begin(), dump.mean_ranked.end(),
                     [](const RankedSentence& a, const RankedSentence& b) { return a.mass > b.mass; });
    return dump;
}

// Attention inspection for one query token of one sentence. Hierarchical
// variants only. Encoder-side models inspect source-token queries directly;
// decoder-side models first decode pass-one hypotheses to build the bilingual
// cache and inspect target-position queries.
inline AttentionTraceDump inspect_attention(Model& model,
                                            const std::vector<std::vector<int>>& src_sentences,
                                            std::size_t sentence, std::size_t token) {
    if (!model.cfg.hierarchical())
        throw std::invalid_argument(
            "inspect_attention: attention dumps are hierarchical-only; this checkpoint uses a flat "
            "variant");
    if (sentence >= src_sentences.size())
        throw std::out_of_range("inspect_attention: sentence index out of range");
    AttentionTrace trace;
    if (model.cfg.integration == Integration::Encoder) {
        model.encoder_context_dump(src_sentences, sentence, &trace);
    } else {
        std::vector<std::vector<int>> pass1 = decode_document_sentence_level(model, src_sentences);
        PreparedDoc prep = model.prepare_bilingual(src_sentences, pass1);
        ContextMask mask = build_context_mask(src_sentences.size(), sentence, model.cfg.setting);
        if (mask.degenerate())
            throw std::invalid_argument("inspect_attention: no visible context for this sentence");
        model.score_sentence(prep, sentence, src_sentences[sentence], pass1[sentence], true, &trace);
    }
    ContextMask mask = build_context_mask(src_sentences.size(), sentence, model.cfg.setting);
    AttentionTraceDump dump = summarize_trace(trace, mask, token);
    dump.sentence = sentence;
    dump.token = token;
    return dump;
}

}  // namespace datn
