#pragma once

#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include "datn/attention.hpp"

namespace datn {

enum class AttentionVariant { FlatSentence, FlatWord, HierSparseSoft, HierSparseSparse };
enum class Integration { Encoder, Decoder };

inline std::string to_string(AttentionVariant v) {
    switch (v) {
        case AttentionVariant::FlatSentence: return "flat-sentence";
        case AttentionVariant::FlatWord: return "flat-word";
        case AttentionVariant::HierSparseSoft: return "hier-sparse-soft";
        case AttentionVariant::HierSparseSparse: return "hier-sparse-sparse";
    }
    throw std::logic_error("unknown attention variant");
}

inline AttentionVariant attention_from_string(const std::string& s) {
    if (s == "flat-sentence") return AttentionVariant::FlatSentence;
    if (s == "flat-word") return AttentionVariant::FlatWord;
    if (s == "hier-sparse-soft") return AttentionVariant::HierSparseSoft;
    if (s == "hier-sparse-sparse") return AttentionVariant::HierSparseSparse;
    throw std::invalid_argument("unknown attention variant: " + s);
}

inline std::string to_string(Integration i) {
    return i == Integration::Encoder ? "encoder" : "decoder";
}

inline Integration integration_from_string(const std::string& s) {
    if (s == "encoder") return Integration::Encoder;
    if (s == "decoder") return Integration::Decoder;
    throw std::invalid_argument("unknown integration side: " + s);
}

inline std::string to_string(Setting s) { return s == Setting::Offline ? "offline" : "online"; }

inline Setting setting_from_string(const std::string& s) {
    if (s == "offline") return Setting::Offline;
    if (s == "online") return Setting::Online;
    throw std::invalid_argument("unknown setting: " + s);
}

struct ModelConfig {
    std::size_t src_vocab = 0;
    std::size_t tgt_vocab = 0;
    std::size_t model_dim = 128;
    std::size_t ff_dim = 512;
    std::size_t layers = 2;
    std::size_t heads = 4;
    double dropout_sentence = 0.1;
    double dropout_context = 0.2;
    double label_smoothing = 0.1;
    AttentionVariant attention = AttentionVariant::HierSparseSoft;
    Integration integration = Integration::Encoder;
    Setting setting = Setting::Online;
    std::optional<double> gate_override;  // testing/ablation hook; fixes gamma
    std::string stage = "sentence";       // recorded training progress: sentence | context

    bool hierarchical() const {
        return attention == AttentionVariant::HierSparseSoft ||
               attention == AttentionVariant::HierSparseSparse;
    }

    Normalizer word_normalizer() const {
        return attention == AttentionVariant::HierSparseSparse ? Normalizer::Sparsemax
                                                               : Normalizer::Softmax;
    }

    void validate() const {
        if (model_dim == 0 || ff_dim == 0 || layers == 0)
            throw std::invalid_argument("config: dimensions must be positive");
        if (heads == 0 || model_dim % heads != 0)
            throw std::invalid_argument("config: heads must divide model_dim");
        if (dropout_sentence < 0 || dropout_sentence >= 1 || dropout_context < 0 ||
            dropout_context >= 1)
            throw std::invalid_argument("config: dropout rates must be in [0,1)");
        if (label_smoothing < 0 || label_smoothing >= 1)
            throw std::invalid_argument("config: label smoothing must be in [0,1)");
    }

    std::string to_kv() const {
        std::ostringstream os;
        os.precision(17);
        os << "src_vocab=" << src_vocab << "\n";
        os << "tgt_vocab=" << tgt_vocab << "\n";
        os << "model_dim=" << model_dim << "\n";
        os << "ff_dim=" << ff_dim << "\n";
        os << "layers=" << layers << "\n";
        os << "heads=" << heads << "\n";
        os << "dropout_sentence=" << dropout_sentence << "\n";
        os << "dropout_context=" << dropout_context << "\n";
        os << "label_smoothing=" << label_smoothing << "\n";
        os << "attention=" << to_string(attention) << "\n";
        os << "integration=" << to_string(integration) << "\n";
        os << "setting=" << to_string(setting) << "\n";
        os << "stage=" << stage << "\n";
        if (gate_override) os << "gate_override=" << *gate_override << "\n";
        return os.str();
    }

    void apply_kv(const std::map<std::string, std::string>& kv) {
        for (const auto& [key, value] : kv) {
            if (key == "src_vocab") src_vocab = std::stoul(value);
            else if (key == "tgt_vocab") tgt_vocab = std::stoul(value);
            else if (key == "model_dim") model_dim = std::stoul(value);
            else if (key == "ff_dim") ff_dim = std::stoul(value);
            else if (key == "layers") layers = std::stoul(value);
            else if (key == "heads") heads = std::stoul(value);
            else if (key == "dropout_sentence") dropout_sentence = std::stod(value);
            else if (key == "dropout_context") dropout_context = std::stod(value);
            else if (key == "label_smoothing") label_smoothing = std::stod(value);
            else if (key == "attention") attention = attention_from_string(value);
            else if (key == "integration") integration = integration_from_string(value);
            else if (key == "setting") setting = setting_from_string(value);
            else if (key == "stage") {
                if (value != "sentence" && value != "context")
                    throw std::invalid_argument("config: unknown stage " + value);
                stage = value;
            }
            else if (key == "gate_override") gate_override = std::stod(value);
            // unrecognized keys are left to the caller (training knobs share the file)
        }
        validate();
    }

    bool operator==(const ModelConfig& o) const {
        return to_kv() == o.to_kv();
    }
};

// key=value line parsing shared by config files, checkpoints and reports.
inline std::map<std::string, std::string> parse_kv(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: expected key=value, got: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

}  // namespace datn
