#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "datn/tensor.hpp"

namespace datn {

// Token <-> id bijection with fixed reserved ids.
class Vocab {
public:
    static constexpr int PAD = 0;
    static constexpr int BOS = 1;
    static constexpr int EOS = 2;
    static constexpr int UNK = 3;

    Vocab() {
        for (const char* t : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(t);
    }

    int add(const std::string& token) {
        auto it = index_.find(token);
        if (it != index_.end()) return it->second;
        tokens_.push_back(token);
        index_[token] = int(tokens_.size()) - 1;
        return int(tokens_.size()) - 1;
    }

    int id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? UNK : it->second;
    }

    bool contains(const std::string& token) const { return index_.count(token) != 0; }

    const std::string& token(int id) const {
        if (id < 0 || std::size_t(id) >= tokens_.size())
            throw std::out_of_range("Vocab: id out of range");
        return tokens_[std::size_t(id)];
    }

    std::size_t size() const { return tokens_.size(); }

    // One non-reserved token per line; id = line number + 4.
    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("Vocab: cannot write " + path);
        for (std::size_t i = 4; i < tokens_.size(); ++i) out << tokens_[i] << "\n";
    }

    static Vocab load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("Vocab: cannot read " + path);
        Vocab v;
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) v.add(line);
        return v;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

// Aligned source/target document: one token-id sequence per sentence.
struct DocumentPair {
    std::vector<std::vector<int>> src;
    std::vector<std::vector<int>> tgt;
    std::string id;

    std::size_t sentences() const { return src.size(); }
};

using TextDocument = std::vector<std::vector<std::string>>;  // sentences of tokens

inline std::vector<std::string> split_tokens(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

// Corpus text format: one sentence per line, documents separated by exactly
// one blank line, UTF-8.
inline std::vector<TextDocument> read_text_documents(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("corpus: cannot read " + path);
    std::vector<TextDocument> docs;
    TextDocument current;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) {
            if (current.empty())
                throw std::runtime_error("corpus: empty document (consecutive blank lines) in " +
                                         path + " before document " + std::to_string(docs.size()));
            docs.push_back(std::move(current));
            current.clear();
            continue;
        }
        std::vector<std::string> toks = split_tokens(line);
        if (toks.empty())
            throw std::runtime_error("corpus: blank-only sentence line in " + path);
        current.push_back(std::move(toks));
    }
    if (!current.empty()) docs.push_back(std::move(current));
    return docs;
}

inline void write_text_documents(const std::string& path, const std::vector<TextDocument>& docs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("corpus: cannot write " + path);
    for (std::size_t d = 0; d < docs.size(); ++d) {
        if (d) out << "\n";
        for (const auto& sent : docs[d]) out << join_tokens(sent) << "\n";
    }
}

inline std::vector<int> to_ids(const std::vector<std::string>& tokens, const Vocab& vocab) {
    std::vector<int> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(vocab.id(t));
    return ids;
}

inline std::vector<std::string> to_tokens(const std::vector<int>& ids, const Vocab& vocab) {
    std::vector<std::string> toks;
    toks.reserve(ids.size());
    for (int id : ids) toks.push_back(vocab.token(id));
    return toks;
}

inline std::vector<DocumentPair> pair_documents(const std::vector<TextDocument>& src_docs,
                                                const std::vector<TextDocument>& tgt_docs,
                                                const Vocab& src_vocab, const Vocab& tgt_vocab) {
    if (src_docs.size() != tgt_docs.size())
        throw std::runtime_error("corpus: document count mismatch: " +
                                 std::to_string(src_docs.size()) + " vs " +
                                 std::to_string(tgt_docs.size()));
    std::vector<DocumentPair> out;
    for (std::size_t d = 0; d < src_docs.size(); ++d) {
        if (src_docs[d].size() != tgt_docs[d].size())
            throw std::runtime_error("corpus: sentence count mismatch in document " +
                                     std::to_string(d) + ": " + std::to_string(src_docs[d].size()) +
                                     " vs " + std::to_string(tgt_docs[d].size()));
        DocumentPair pair;
        pair.id = std::to_string(d);
        for (const auto& sent : src_docs[d]) pair.src.push_back(to_ids(sent, src_vocab));
        for (const auto& sent : tgt_docs[d]) pair.tgt.push_back(to_ids(sent, tgt_vocab));
        out.push_back(std::move(pair));
    }
    return out;
}

inline std::vector<DocumentPair> load_parallel_documents(const std::string& src_path,
                                                         const std::string& tgt_path,
                                                         const Vocab& src_vocab,
                                                         const Vocab& tgt_vocab) {
    return pair_documents(read_text_documents(src_path), read_text_documents(tgt_path), src_vocab,
                          tgt_vocab);
}

// ---------------------------------------------------------------------------
// Synthetic disambiguation task
// ---------------------------------------------------------------------------
//
// Ordinary source tokens translate deterministically one-for-one. Each
// document plants one class marker in some sentence and one ambiguous AMB
// token at the sampled sentence distance after it; AMB's correct translation
// is decided solely by the marker's class, so a sentence-level model cannot
// do better than the class prior whenever the marker sits in another
// sentence.

struct SyntheticSpec {
    std::uint64_t seed = 1;
    std::size_t train_docs = 100;
    std::size_t doc_len = 6;        // J
    std::size_t sentence_len = 6;
    std::size_t vocab_size = 50;    // source-side total including reserved ids
    std::size_t classes = 4;        // k
    // Sentence distances between marker and AMB; 0 means same sentence.
    // Entries >= doc_len are capped at doc_len - 1 (the documented resample
    // rule collapses to a cap for this fixed menu). Defaults to {1..5}: the
    // marker is always in an earlier sentence, keeping AMB unsolvable for a
    // context-agnostic model.
    std::vector<std::size_t> distances = {1, 2, 3, 4, 5};

    std::size_t dev_docs() const { return std::max<std::size_t>(10, train_docs / 10); }
    std::size_t test_docs() const {
        return std::max<std::size_t>(10, std::min<std::size_t>(500, train_docs / 4));
    }
};

struct SyntheticCorpus {
    Vocab src_vocab, tgt_vocab;
    std::vector<DocumentPair> train, dev, test;
    int amb_src_id = -1;                  // the AMB token
    std::vector<int> marker_src_ids;      // M_c per class
    std::vector<int> amb_tgt_ids;         // A_c per class
};

inline SyntheticCorpus generate_synthetic_docs(const SyntheticSpec& spec) {
    if (spec.classes < 2) throw std::invalid_argument("synthetic: need at least 2 classes");
    if (spec.doc_len < 2) throw std::invalid_argument("synthetic: need at least 2 sentences");
    if (spec.sentence_len < 2) throw std::invalid_argument("synthetic: need sentence length >= 2");
    const std::size_t reserved = 4;
    if (spec.vocab_size < reserved + spec.classes + 1 + 2)
        throw std::invalid_argument("synthetic: vocab too small for markers and AMB");

    SyntheticCorpus corpus;
    const std::size_t n_ordinary = spec.vocab_size - reserved - spec.classes - 1;
    std::vector<int> ord_src, ord_tgt;
    char buf[16];
    for (std::size_t i = 0; i < n_ordinary; ++i) {
        std::snprintf(buf, sizeof buf, "w%02zu", i);
        ord_src.push_back(corpus.src_vocab.add(buf));
        std::snprintf(buf, sizeof buf, "v%02zu", i);
        ord_tgt.push_back(corpus.tgt_vocab.add(buf));
    }
    for (std::size_t c = 0; c < spec.classes; ++c) {
        std::snprintf(buf, sizeof buf, "M%zu", c + 1);
        corpus.marker_src_ids.push_back(corpus.src_vocab.add(buf));
        std::snprintf(buf, sizeof buf, "N%zu", c + 1);
        corpus.tgt_vocab.add(buf);
    }
    corpus.amb_src_id = corpus.src_vocab.add("AMB");
    for (std::size_t c = 0; c < spec.classes; ++c) {
        std::snprintf(buf, sizeof buf, "A%zu", c + 1);
        corpus.amb_tgt_ids.push_back(corpus.tgt_vocab.add(buf));
    }

    std::vector<std::size_t> distances;
    for (std::size_t d : spec.distances) distances.push_back(std::min(d, spec.doc_len - 1));
    std::sort(distances.begin(), distances.end());
    distances.erase(std::unique(distances.begin(), distances.end()), distances.end());

    Rng rng(spec.seed);
    std::uniform_int_distribution<std::size_t> pick_ordinary(0, n_ordinary - 1);
    std::uniform_int_distribution<std::size_t> pick_class(0, spec.classes - 1);

    std::size_t doc_counter = 0;
    auto make_split = [&](std::size_t count) {
        std::vector<DocumentPair> docs;
        for (std::size_t n = 0; n < count; ++n) {
            DocumentPair doc;
            doc.id = std::to_string(doc_counter++);
            std::vector<std::vector<std::size_t>> ords(spec.doc_len);
            for (std::size_t j = 0; j < spec.doc_len; ++j) {
                ords[j].resize(spec.sentence_len);
                for (auto& o : ords[j]) o = pick_ordinary(rng);
            }
            const std::size_t cls = pick_class(rng);
            // distances are assigned round-robin so every bucket fills evenly
            const std::size_t dist = distances[n % distances.size()];
            std::uniform_int_distribution<std::size_t> pick_amb_sent(dist, spec.doc_len - 1);
            const std::size_t amb_sent = pick_amb_sent(rng);
            const std::size_t marker_sent = amb_sent - dist;
            std::uniform_int_distribution<std::size_t> pick_pos(0, spec.sentence_len - 1);
            std::size_t amb_pos = pick_pos(rng);
            std::size_t marker_pos = pick_pos(rng);
            if (dist == 0) {  // same sentence: marker must precede AMB
                if (amb_pos == 0) amb_pos = spec.sentence_len - 1;
                marker_pos = marker_pos % amb_pos;
            }
            for (std::size_t j = 0; j < spec.doc_len; ++j) {
                std::vector<int> s, t;
                for (std::size_t p = 0; p < spec.sentence_len; ++p) {
                    if (j == amb_sent && p == amb_pos) {
                        s.push_back(corpus.amb_src_id);
                        t.push_back(corpus.amb_tgt_ids[cls]);
                    } else if (j == marker_sent && p == marker_pos) {
                        s.push_back(corpus.marker_src_ids[cls]);
                        t.push_back(corpus.tgt_vocab.id("N" + std::to_string(cls + 1)));
                    } else {
                        s.push_back(ord_src[ords[j][p]]);
                        t.push_back(ord_tgt[ords[j][p]]);
                    }
                }
                doc.src.push_back(std::move(s));
                doc.tgt.push_back(std::move(t));
            }
            docs.push_back(std::move(doc));
        }
        return docs;
    };

    corpus.train = make_split(spec.train_docs);
    corpus.dev = make_split(spec.dev_docs());
    corpus.test = make_split(spec.test_docs());
    return corpus;
}

inline TextDocument document_text(const std::vector<std::vector<int>>& sents, const Vocab& vocab) {
    TextDocument out;
    for (const auto& s : sents) out.push_back(to_tokens(s, vocab));
    return out;
}

inline void save_split(const std::string& dir, const std::string& name,
                       const std::vector<DocumentPair>& docs, const Vocab& src_vocab,
                       const Vocab& tgt_vocab) {
    std::vector<TextDocument> src, tgt;
    for (const auto& d : docs) {
        src.push_back(document_text(d.src, src_vocab));
        tgt.push_back(document_text(d.tgt, tgt_vocab));
    }
    write_text_documents(dir + "/" + name + ".src", src);
    write_text_documents(dir + "/" + name + ".tgt", tgt);
}

// ---------------------------------------------------------------------------
// Contrastive test set
// ---------------------------------------------------------------------------

struct ContrastiveItem {
    DocumentPair doc;                     // full document context
    std::size_t sentence = 0;             // sentence holding the AMB token
    std::size_t amb_pos = 0;              // target-side position of the decision
    std::size_t distance = 0;             // sentences between marker and AMB
    std::vector<int> correct;             // reference target sentence
    std::vector<std::vector<int>> foils;  // single-token substitutions
};

inline std::vector<ContrastiveItem> generate_contrastive_set(const std::vector<DocumentPair>& docs,
                                                             const SyntheticCorpus& corpus) {
    std::vector<ContrastiveItem> items;
    for (const auto& doc : docs) {
        ContrastiveItem item;
        bool found_amb = false, found_marker = false;
        std::size_t marker_sent = 0;
        for (std::size_t j = 0; j < doc.src.size() && !(found_amb && found_marker); ++j) {
            for (std::size_t p = 0; p < doc.src[j].size(); ++p) {
                const int id = doc.src[j][p];
                if (id == corpus.amb_src_id && !found_amb) {
                    item.sentence = j;
                    item.amb_pos = p;
                    found_amb = true;
                }
                if (!found_marker &&
                    std::find(corpus.marker_src_ids.begin(), corpus.marker_src_ids.end(), id) !=
                        corpus.marker_src_ids.end()) {
                    marker_sent = j;
                    found_marker = true;
                }
            }
        }
        if (!found_amb || !found_marker) continue;
        item.distance = item.sentence - marker_sent;
        item.doc = doc;
        item.correct = doc.tgt[item.sentence];
        const int correct_tgt = item.correct[item.amb_pos];
        for (int alt : corpus.amb_tgt_ids) {
            if (alt == correct_tgt) continue;
            std::vector<int> foil = item.correct;
            foil[item.amb_pos] = alt;
            item.foils.push_back(std::move(foil));
        }
        items.push_back(std::move(item));
    }
    return items;
}

// On-disk layout for contrastive items: docs.src/docs.tgt in corpus format
// plus items.tsv with doc index, sentence index, distance, the correct
// sentence and the foils, tab separated.
inline void save_contrastive_items(const std::string& dir, const std::vector<ContrastiveItem>& items,
                                   const Vocab& src_vocab, const Vocab& tgt_vocab) {
    std::filesystem::create_directories(dir);
    std::vector<TextDocument> src, tgt;
    std::ofstream tsv(dir + "/items.tsv", std::ios::binary);
    if (!tsv) throw std::runtime_error("contrastive: cannot write " + dir + "/items.tsv");
    for (std::size_t i = 0; i < items.size(); ++i) {
        const ContrastiveItem& it = items[i];
        src.push_back(document_text(it.doc.src, src_vocab));
        tgt.push_back(document_text(it.doc.tgt, tgt_vocab));
        tsv << i << "\t" << it.sentence << "\t" << it.distance << "\t"
            << join_tokens(to_tokens(it.correct, tgt_vocab));
        for (const auto& foil : it.foils) tsv << "\t" << join_tokens(to_tokens(foil, tgt_vocab));
        tsv << "\n";
    }
    write_text_documents(dir + "/docs.src", src);
    write_text_documents(dir + "/docs.tgt", tgt);
}

inline std::vector<ContrastiveItem> load_contrastive_items(const std::string& dir,
                                                           const Vocab& src_vocab,
                                                           const Vocab& tgt_vocab) {
    std::vector<TextDocument> src = read_text_documents(dir + "/docs.src");
    std::vector<TextDocument> tgt = read_text_documents(dir + "/docs.tgt");
    std::vector<DocumentPair> docs = pair_documents(src, tgt, src_vocab, tgt_vocab);
    std::ifstream tsv(dir + "/items.tsv", std::ios::binary);
    if (!tsv) throw std::runtime_error("contrastive: cannot read " + dir + "/items.tsv");
    std::vector<ContrastiveItem> items;
    std::string line;
    while (std::getline(tsv, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::size_t start = 0;
        while (true) {
            const auto tab = line.find('\t', start);
            cols.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (cols.size() < 5)
            throw std::runtime_error("contrastive: malformed items.tsv line: " + line);
        ContrastiveItem item;
        const std::size_t doc_idx = std::stoul(cols[0]);
        if (doc_idx >= docs.size()) throw std::runtime_error("contrastive: doc index out of range");
        item.doc = docs[doc_idx];
        item.sentence = std::stoul(cols[1]);
        item.distance = std::stoul(cols[2]);
        item.correct = to_ids(split_tokens(cols[3]), tgt_vocab);
        for (std::size_t c = 4; c < cols.size(); ++c)
            item.foils.push_back(to_ids(split_tokens(cols[c]), tgt_vocab));
        // locate the decision position: the single token where a foil differs
        for (std::size_t p = 0; p < item.correct.size(); ++p)
            if (!item.foils.empty() && item.foils[0][p] != item.correct[p]) {
                item.amb_pos = p;
                break;
            }
        items.push_back(std::move(item));
    }
    return items;
}

}  // namespace datn
