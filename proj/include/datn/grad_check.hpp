#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "datn/optim.hpp"
#include "datn/tensor.hpp"

namespace datn {

// Central finite-difference gradient checker. The callable must rebuild the
// computation from the current parameter values and return the scalar loss;
// when do_backward is set it must also populate the parameter gradients
// (the checker zeroes them first).
struct GradCheckOptions {
    double h = 1e-4;
    std::size_t samples_per_tensor = 4;  // 0 checks every entry
    double zero_floor = 1e-6;            // below this both gradients count as zero
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t entries_checked = 0;
};

inline double relative_gradient_error(double analytic, double numeric, double zero_floor) {
    const double denom = std::max(std::abs(analytic), std::abs(numeric));
    if (denom < zero_floor) return 0.0;
    return std::abs(analytic - numeric) / denom;
}

inline GradCheckReport check_gradients(const std::function<double(bool)>& loss,
                                       const std::vector<ParamTensor*>& params, Rng& rng,
                                       GradCheckOptions opt = {}) {
    for (ParamTensor* p : params) p->zero_grad();
    loss(true);

    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (ParamTensor* p : params) analytic.push_back(p->grad);

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        ParamTensor* p = params[pi];
        std::vector<std::size_t> idx;
        if (opt.samples_per_tensor == 0 || p->value.numel() <= opt.samples_per_tensor) {
            for (std::size_t i = 0; i < p->value.numel(); ++i) idx.push_back(i);
        } else {
            std::uniform_int_distribution<std::size_t> pick(0, p->value.numel() - 1);
            for (std::size_t s = 0; s < opt.samples_per_tensor; ++s) idx.push_back(pick(rng));
        }
        for (std::size_t i : idx) {
            const double saved = p->value[i];
            p->value[i] = saved + opt.h;
            const double up = loss(false);
            p->value[i] = saved - opt.h;
            const double down = loss(false);
            p->value[i] = saved;
            const double numeric = (up - down) / (2.0 * opt.h);
            const double err = relative_gradient_error(analytic[pi][i], numeric, opt.zero_floor);
            report.max_rel_err = std::max(report.max_rel_err, err);
            ++report.entries_checked;
        }
    }
    return report;
}

}  // namespace datn
