#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "error.hpp"
#include "image.hpp"

namespace mugshot {

struct DenoiseParams {
    int iterations = 200;
    double lambda = 0.1;    // TV weight
    double epsilon = 1e-3;  // |d| ~ sqrt(d^2 + eps^2)
    double step = 0.05;

    void validate() const {
        if (iterations < 1) throw ConfigError("denoise iterations must be >= 1");
        if (!(lambda > 0.0) || !(epsilon > 0.0) || !(step > 0.0))
            throw ConfigError("denoise lambda, epsilon and step must be > 0");
    }
};

/// Anisotropic total variation: sum of absolute forward differences along rows
/// and columns. Edge pixels have no forward neighbour and contribute nothing.
inline double total_variation(const GrayImage& img) {
    const auto w = img.width();
    const auto h = img.height();
    double tv = 0.0;
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            if (i + 1 < h) tv += std::abs(img(i + 1, j) - img(i, j));
            if (j + 1 < w) tv += std::abs(img(i, j + 1) - img(i, j));
        }
    }
    return tv;
}

namespace detail {

struct TvProblem {
    std::size_t w;
    std::size_t h;
    const std::vector<double>& observed;
    double lambda;
    double eps2;

    double smoothed_abs(double d) const { return std::sqrt(d * d + eps2); }

    double energy(const std::vector<double>& y) const {
        double fidelity = 0.0;
        double tv = 0.0;
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                const auto p = i * w + j;
                const double r = y[p] - observed[p];
                fidelity += r * r;
                if (i + 1 < h) tv += smoothed_abs(y[p + w] - y[p]);
                if (j + 1 < w) tv += smoothed_abs(y[p + 1] - y[p]);
            }
        }
        return 0.5 * fidelity + lambda * tv;
    }

    void gradient(const std::vector<double>& y, std::vector<double>& g) const {
        for (std::size_t p = 0; p < y.size(); ++p) g[p] = y[p] - observed[p];
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                const auto p = i * w + j;
                if (i + 1 < h) {
                    const double d = y[p + w] - y[p];
                    const double s = lambda * d / smoothed_abs(d);
                    g[p + w] += s;
                    g[p] -= s;
                }
                if (j + 1 < w) {
                    const double d = y[p + 1] - y[p];
                    const double s = lambda * d / smoothed_abs(d);
                    g[p + 1] += s;
                    g[p] -= s;
                }
            }
        }
    }
};

}  // namespace detail

/// Smoothed objective 1/2 ||y - x||^2 + lambda * V_eps(y).
inline double denoise_energy(const GrayImage& y, const GrayImage& observed, const DenoiseParams& params) {
    if (y.width() != observed.width() || y.height() != observed.height())
        throw UsageError("energy operands differ in size");
    detail::TvProblem prob{y.width(), y.height(), observed.pixels(), params.lambda,
                           params.epsilon * params.epsilon};
    return prob.energy(y.pixels());
}

struct DenoiseResult {
    GrayImage image;
    // energy[0] is the starting energy, energy[k] the energy after iteration k.
    std::vector<double> energy;
};

/// Projected gradient descent on the smoothed ROF energy. A trial step that
/// raises the energy is halved until it does not; the next iteration starts
/// again from the base step. Iterates are projected onto [0,1], which never
/// raises the energy for observations inside [0,1].
inline DenoiseResult denoise_with_trace(const GrayImage& img, const DenoiseParams& params) {
    params.validate();
    const auto& x = img.pixels();
    detail::TvProblem prob{img.width(), img.height(), x, params.lambda, params.epsilon * params.epsilon};

    std::vector<double> y = x;
    std::vector<double> g(y.size());
    std::vector<double> trial(y.size());
    double e = prob.energy(y);

    DenoiseResult result{img, {e}};
    result.energy.reserve(static_cast<std::size_t>(params.iterations) + 1);
    if (img.size() == 1) {
        result.energy.resize(static_cast<std::size_t>(params.iterations) + 1, e);
        return result;
    }

    constexpr int kMaxHalvings = 40;
    for (int it = 0; it < params.iterations; ++it) {
        prob.gradient(y, g);
        double step = params.step;
        for (int k = 0; k <= kMaxHalvings; ++k, step *= 0.5) {
            for (std::size_t p = 0; p < y.size(); ++p) trial[p] = detail::clamp01(y[p] - step * g[p]);
            const double te = prob.energy(trial);
            if (te <= e) {
                y.swap(trial);
                e = te;
                break;
            }
        }
        // If no trial descended, y is stationary to machine precision and stays put.
        result.energy.push_back(e);
    }
    result.image = GrayImage(img.width(), img.height(), std::move(y));
    return result;
}

inline GrayImage denoise(const GrayImage& img, const DenoiseParams& params = {}) {
    return denoise_with_trace(img, params).image;
}

inline RgbImage denoise_rgb(const RgbImage& img, const DenoiseParams& params = {}) {
    return RgbImage::from_channels(denoise(img.channel(0), params), denoise(img.channel(1), params),
                                   denoise(img.channel(2), params));
}

}  // namespace mugshot
