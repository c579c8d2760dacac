#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "datn/graph.hpp"
#include "datn/tensor.hpp"

namespace datn {

// Named parameter collection; iteration order is creation order so that
// checkpoints and Adam moments line up deterministically.
class ParamStore {
public:
    ParamTensor& create(const std::string& name, Tensor init) {
        if (index_.count(name)) throw std::invalid_argument("ParamStore: duplicate name " + name);
        items_.push_back(std::make_unique<ParamTensor>(name, std::move(init)));
        index_[name] = items_.size() - 1;
        return *items_.back();
    }

    ParamTensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
        return *items_[it->second];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<ParamTensor*> all() {
        std::vector<ParamTensor*> out;
        out.reserve(items_.size());
        for (auto& p : items_) out.push_back(p.get());
        return out;
    }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& p : items_) n += p->value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : items_) p->zero_grad();
    }

private:
    std::vector<std::unique_ptr<ParamTensor>> items_;
    std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Standard bias-corrected Adam. Moments are created lazily per parameter;
// step count is shared across the parameter set handed to step().
class AdamOptimizer {
public:
    explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

    AdamConfig& config() { return cfg_; }
    long step_count() const { return step_; }

    void step(const std::vector<ParamTensor*>& params) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (ParamTensor* p : params) {
            Moments& m = moments(*p);
            if (!m.m.same_shape(p->grad))
                throw std::invalid_argument("adam: moment/gradient shape mismatch for " + p->name);
            for (std::size_t i = 0; i < p->value.numel(); ++i) {
                const double g = p->grad[i];
                m.m[i] = cfg_.beta1 * m.m[i] + (1.0 - cfg_.beta1) * g;
                m.v[i] = cfg_.beta2 * m.v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m.m[i] / bc1;
                const double vhat = m.v[i] / bc2;
                p->value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    struct Moments {
        Tensor m, v;
    };

    Moments& moments(ParamTensor& p) {
        auto it = moments_.find(&p);
        if (it == moments_.end()) {
            Moments mo;
            mo.m = Tensor(p.value.shape);
            mo.v = Tensor(p.value.shape);
            it = moments_.emplace(&p, std::move(mo)).first;
        }
        return it->second;
    }

    AdamConfig cfg_;
    long step_ = 0;
    std::map<ParamTensor*, Moments> moments_;
};

}  // namespace datn
