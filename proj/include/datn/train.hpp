#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "datn/corpus.hpp"
#include "datn/model.hpp"
#include "datn/optim.hpp"

namespace datn {

struct TrainConfig {
    double lr = 1e-4;
    std::size_t max_epochs = 20;
    std::size_t patience = 3;
    std::uint64_t seed = 1;
    bool freeze_sentence = false;  // context-stage ablation
    std::size_t accum_docs = 1;    // documents per optimizer step

    void apply_kv(const std::map<std::string, std::string>& kv) {
        for (const auto& [key, value] : kv) {
            if (key == "lr") lr = std::stod(value);
            else if (key == "max_epochs") max_epochs = std::stoul(value);
            else if (key == "patience") patience = std::stoul(value);
            else if (key == "seed") seed = std::stoull(value);
            else if (key == "freeze_sentence") freeze_sentence = value == "1" || value == "true";
            else if (key == "accum_docs") accum_docs = std::stoul(value);
        }
        if (accum_docs == 0) throw std::invalid_argument("train: accum_docs must be >= 1");
    }
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double dev_loss = 0.0;
};

struct TrainReport {
    std::string stage;
    std::vector<EpochRecord> epochs;
    double best_dev = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;
    bool stopped_early = false;

    std::string to_kv() const {
        std::ostringstream os;
        os.precision(12);
        os << "stage=" << stage << "\n";
        os << "epochs=" << epochs.size() << "\n";
        for (const EpochRecord& e : epochs) {
            os << "epoch" << e.epoch << "_train=" << e.train_loss << "\n";
            os << "epoch" << e.epoch << "_dev=" << e.dev_loss << "\n";
        }
        os << "best_dev=" << best_dev << "\n";
        os << "best_epoch=" << best_epoch << "\n";
        os << "stopped_early=" << (stopped_early ? 1 : 0) << "\n";
        return os.str();
    }
};

// Label-smoothed dev loss per token, dropout disabled.
inline double evaluate_dev_loss(Model& model, const std::vector<DocumentPair>& dev,
                                bool with_context) {
    double total = 0.0;
    std::size_t tokens = 0;
    for (const DocumentPair& doc : dev) {
        Graph g(false);
        ForwardOptions opt;
        opt.with_context = with_context;
        DocForward fwd = model.document_forward(g, doc, opt);
        for (std::size_t j = 0; j < fwd.logits.size(); ++j)
            total +=
                cross_entropy_label_smoothed(fwd.logits[j], fwd.gold[j], model.cfg.label_smoothing)
                    .val()[0];
        tokens += fwd.total_target_tokens;
    }
    if (tokens == 0) throw std::invalid_argument("evaluate_dev_loss: empty dev corpus");
    return total / double(tokens);
}

namespace detail {

inline TrainReport run_training(Model& model, const std::vector<DocumentPair>& train,
                                const std::vector<DocumentPair>& dev, const TrainConfig& tc,
                                bool with_context, double dropout,
                                const std::vector<ParamTensor*>& trained) {
    if (train.empty()) throw std::invalid_argument("train: empty corpus");
    if (dev.empty()) throw std::invalid_argument("train: empty dev corpus");

    TrainReport report;
    report.stage = with_context ? "context" : "sentence";
    AdamConfig ac;
    ac.lr = tc.lr;
    AdamOptimizer opt(ac);
    Rng rng(tc.seed);

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<Tensor> best_values;
    std::size_t bad_evals = 0;

    for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t token_sum = 0, pending = 0;
        model.params.zero_grads();
        for (std::size_t idx : order) {
            const DocumentPair& doc = train[idx];
            Graph g;
            ForwardOptions fo;
            fo.with_context = with_context;
            fo.train = true;
            fo.dropout = dropout;
            fo.rng = &rng;
            DocForward fwd;
            Value loss = model.document_loss(g, doc, fo, &fwd);
            check_finite(loss.val(), "train loss");
            g.backward(loss);
            loss_sum += loss.val()[0] * double(fwd.total_target_tokens);
            token_sum += fwd.total_target_tokens;
            if (++pending == tc.accum_docs) {
                opt.step(trained);
                model.params.zero_grads();
                pending = 0;
            }
        }
        if (pending > 0) {
            opt.step(trained);
            model.params.zero_grads();
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / double(token_sum);
        rec.dev_loss = evaluate_dev_loss(model, dev, with_context);
        report.epochs.push_back(rec);

        if (rec.dev_loss < report.best_dev) {
            report.best_dev = rec.dev_loss;
            report.best_epoch = epoch;
            bad_evals = 0;
            best_values.clear();
            for (ParamTensor* p : model.params.all()) best_values.push_back(p->value);
        } else {
            ++bad_evals;
            if (bad_evals >= tc.patience) {
                report.stopped_early = true;
                break;
            }
        }
    }
    // restore the best-dev parameters
    if (!best_values.empty()) {
        std::size_t i = 0;
        for (ParamTensor* p : model.params.all()) p->value = best_values[i++];
    }
    return report;
}

}  // namespace detail

// Stage one: context-agnostic pre-training. The context block is untouched.
inline TrainReport train_sentence_stage(Model& model, const std::vector<DocumentPair>& train,
                                        const std::vector<DocumentPair>& dev,
                                        const TrainConfig& tc) {
    return detail::run_training(model, train, dev, tc, /*with_context=*/false,
                                model.cfg.dropout_sentence, model.sentence_params());
}

// Stage two: joint optimization of the whole model with the document as the
// batch unit; the context cache is rebuilt inside every per-document graph.
inline TrainReport train_context_stage(Model& model, const std::vector<DocumentPair>& train,
                                       const std::vector<DocumentPair>& dev, const TrainConfig& tc) {
    return detail::run_training(model, train, dev, tc, /*with_context=*/true,
                                model.cfg.dropout_context,
                                tc.freeze_sentence ? model.context_params() : model.params.all());
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

// Deterministic greedy decoding: argmax per step until EOS or max_len.
inline std::vector<int> greedy_decode_sentence(Model& model, const PreparedDoc& prep, std::size_t j,
                                               const std::vector<int>& src_sentence,
                                               bool with_context, std::size_t max_len) {
    if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
    std::vector<int> out;
    for (std::size_t step = 0; step < max_len; ++step) {
        Tensor logits = model.score_sentence(prep, j, src_sentence, out, with_context);
        const std::size_t last = logits.rows() - 1;
        int best = 0;
        double best_score = logits.at(last, 0);
        for (std::size_t v = 1; v < logits.cols(); ++v)
            if (logits.at(last, v) > best_score) {
                best_score = logits.at(last, v);
                best = int(v);
            }
        if (best == Vocab::EOS) break;
        out.push_back(best);
    }
    return out;
}

inline std::size_t default_max_len(const std::vector<int>& src) { return 2 * src.size() + 5; }

// Sentence-level decoding of a whole document (pass one / baseline model).
inline std::vector<std::vector<int>> decode_document_sentence_level(
    Model& model, const std::vector<std::vector<int>>& src) {
    PreparedDoc prep = model.prepare_source(src, /*with_context=*/false);
    std::vector<std::vector<int>> out;
    for (std::size_t j = 0; j < src.size(); ++j)
        out.push_back(greedy_decode_sentence(model, prep, j, src[j], false, default_max_len(src[j])));
    return out;
}

// Two-pass iterative decoding. Encoder-side integration needs no second pass
// over target context: the single context-aware pass is the result. For
// decoder-side integration, pass one initializes every sentence with the
// sentence-level model and pass two re-decodes each sentence against the
// bilingual cache built from the pass-one translations (updated
// simultaneously, not sequentially).
inline std::vector<std::vector<int>> iterative_decode(Model& model,
                                                      const std::vector<std::vector<int>>& src) {
    if (model.cfg.integration == Integration::Encoder) {
        PreparedDoc prep = model.prepare_source(src, /*with_context=*/true);
        std::vector<std::vector<int>> out;
        for (std::size_t j = 0; j < src.size(); ++j)
            out.push_back(
                greedy_decode_sentence(model, prep, j, src[j], true, default_max_len(src[j])));
        return out;
    }
    std::vector<std::vector<int>> pass1 = decode_document_sentence_level(model, src);
    PreparedDoc prep = model.prepare_bilingual(src, pass1);
    std::vector<std::vector<int>> pass2;
    for (std::size_t j = 0; j < src.size(); ++j)
        pass2.push_back(
            greedy_decode_sentence(model, prep, j, src[j], true, default_max_len(src[j])));
    return pass2;
}

}  // namespace datn
