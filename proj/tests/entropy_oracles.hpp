#pragma once

// Straight-loop re-summation oracles for the minibatch entropy estimators.
// Everything here is plain scalar code sharing only weight *values* with the
// implementation under test: an MLP forward written with explicit loops and
// the entropy formulas expressed exactly as their defining sums.

#include <cmath>
#include <string>
#include <vector>

#include "cadvae/networks.hpp"

namespace oracles {

inline std::vector<double> oracle_probs(const cadvae::Classifier& f,
                                        const std::vector<double>& input) {
    std::vector<double> h = input;
    const auto dense = [&](const std::string& prefix, const std::vector<double>& in, bool relu) {
        const cadvae::Tensor& w = f.params().at(prefix + ".w");
        const cadvae::Tensor& b = f.params().at(prefix + ".b");
        const std::size_t rows = w.shape()[0], cols = w.shape()[1];
        std::vector<double> out(cols);
        for (std::size_t j = 0; j < cols; ++j) {
            double acc = b.values()[j];
            for (std::size_t i = 0; i < rows; ++i) acc += in[i] * w.values()[i * cols + j];
            out[j] = relu && acc < 0.0 ? 0.0 : acc;
        }
        return out;
    };
    for (std::size_t l = 0; l < f.spec().hidden.size(); ++l) {
        h = dense("l" + std::to_string(l + 1), h, true);
    }
    h = dense("out", h, false);
    double mx = h[0];
    for (double v : h) mx = std::max(mx, v);
    double sum = 0.0;
    for (double& v : h) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : h) v /= sum;
    return h;
}

inline std::vector<double> row_of(const cadvae::Tensor& t, std::size_t i) {
    const std::size_t d = t.shape()[1];
    return std::vector<double>(t.values().begin() + i * d, t.values().begin() + (i + 1) * d);
}

inline std::vector<double> concat_rows(const std::vector<double>& a,
                                       const std::vector<double>& b) {
    std::vector<double> out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

inline double oracle_entropy_of_row(const std::vector<double>& p) {
    double h = 0.0;
    for (double v : p) h -= v * std::log(v + 1e-12);
    return h;
}

// H(pred | z) estimated as the batch mean of per-sample output entropies.
inline double oracle_mean_entropy(const cadvae::Classifier& f, const cadvae::Tensor& z) {
    double acc = 0.0;
    for (std::size_t i = 0; i < z.shape()[0]; ++i) {
        acc += oracle_entropy_of_row(oracle_probs(f, row_of(z, i)));
    }
    return acc / static_cast<double>(z.shape()[0]);
}

// One relevance term: H(pred | z_R) - H(pred | label, z_R), both entropies
// via pairwise marginalization, computed pair by pair.
inline double oracle_lri_term(const cadvae::Classifier& f, const cadvae::Tensor& z_first,
                              const cadvae::Tensor& zr, const std::vector<int>& labels) {
    const std::size_t b = z_first.shape()[0];
    const std::size_t c = f.spec().classes;
    double h_marginal = 0.0, h_conditional = 0.0;
    for (std::size_t k = 0; k < b; ++k) {
        std::vector<double> marg(c, 0.0), cond(c, 0.0);
        std::size_t group_size = 0;
        for (std::size_t i = 0; i < b; ++i) {
            const auto p = oracle_probs(f, concat_rows(row_of(z_first, i), row_of(zr, k)));
            for (std::size_t j = 0; j < c; ++j) marg[j] += p[j];
            if (labels[i] == labels[k]) {
                for (std::size_t j = 0; j < c; ++j) cond[j] += p[j];
                ++group_size;
            }
        }
        for (double& v : marg) v /= static_cast<double>(b);
        for (double& v : cond) v /= static_cast<double>(group_size);
        h_marginal += oracle_entropy_of_row(marg);
        h_conditional += oracle_entropy_of_row(cond);
    }
    h_marginal /= static_cast<double>(b);
    h_conditional /= static_cast<double>(b);
    return h_marginal - h_conditional;
}

}  // namespace oracles
