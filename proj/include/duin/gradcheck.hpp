#pragma once

#include "duin/graph.hpp"
#include "duin/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace duin {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    Index worst_coord = -1;
    Index coords_checked = 0;

    bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

/// Central-difference check of reverse-mode gradients in f64.
///
/// `fn` must rebuild its graph from the current parameter values and return
/// the scalar loss Var on every call. The analytic gradient comes from one
/// backward() sweep; each sampled coordinate is then perturbed by +-h and the
/// difference quotient compared against it. Relative error uses a 1e-3 floor
/// so coordinates whose true gradient sits below finite-difference resolution
/// do not register as spurious failures.
class GradChecker {
public:
    explicit GradChecker(double h = 1e-4, Index max_coords_per_param = 512,
                         std::uint64_t sample_seed = 17)
        : h_(h), max_coords_(max_coords_per_param), sample_seed_(sample_seed) {}

    GradCheckReport check(const std::function<Var<double>()>& fn,
                          std::vector<std::pair<std::string, Var<double>>> params) const {
        for (auto& [name, p] : params) p.zero_grad();
        Var<double> loss = fn();
        backward(loss);

        GradCheckReport report;
        Rng rng(sample_seed_);
        for (auto& [name, p] : params) {
            Tensor<double> analytic = p.grad();
            if (analytic.empty()) analytic = Tensor<double>::zeros(p.value().dims());
            std::vector<Index> coords = sample_coords(p.value().size(), rng);
            for (Index c : coords) {
                const double saved = p.value()[c];
                p.value()[c] = saved + h_;
                const double f_plus = fn().value()[0];
                p.value()[c] = saved - h_;
                const double f_minus = fn().value()[0];
                p.value()[c] = saved;
                const double fd = (f_plus - f_minus) / (2.0 * h_);
                const double an = analytic[c];
                const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
                const double rel = std::abs(fd - an) / denom;
                ++report.coords_checked;
                if (rel > report.max_rel_error) {
                    report.max_rel_error = rel;
                    report.worst_param = name;
                    report.worst_coord = c;
                }
            }
        }
        for (auto& [name, p] : params) p.zero_grad();
        return report;
    }

private:
    std::vector<Index> sample_coords(Index n, Rng& rng) const {
        std::vector<Index> coords;
        if (n <= max_coords_) {
            coords.resize(static_cast<std::size_t>(n));
            for (Index i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
        } else {
            coords.reserve(static_cast<std::size_t>(max_coords_));
            for (Index i = 0; i < max_coords_; ++i) coords.push_back(rng.uniform_int(0, n - 1));
            std::sort(coords.begin(), coords.end());
            coords.erase(std::unique(coords.begin(), coords.end()), coords.end());
        }
        return coords;
    }

    double h_;
    Index max_coords_;
    std::uint64_t sample_seed_;
};

}  // namespace duin
