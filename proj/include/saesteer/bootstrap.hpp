#pragma once
// Bootstrap distribution of the sample mean, random or exhaustive.

#include "saesteer/common.hpp"

#include <algorithm>
#include <vector>

namespace saesteer {

struct bootstrap_options {
    std::size_t resamples = 10000;
    std::uint64_t seed = 7;
    // Enumerate all n^n index tuples instead of sampling (small n only).
    bool exhaustive = false;
    double confidence = 0.95;
    std::size_t threads = 1;
};

inline constexpr std::size_t bootstrap_block = 1024;
inline constexpr std::uint64_t max_exhaustive_resamples = 20'000'000;

// Sorted resampled means. Random resamples are drawn in fixed-size blocks,
// each from its own seeded substream, so the output is independent of the
// thread count.
inline std::vector<double> bootstrap_means(std::span<const double> values, const bootstrap_options &opt) {
    const std::size_t n = values.size();
    if (n == 0) throw data_error("bootstrap needs at least one value");
    std::vector<double> means;
    if (opt.exhaustive) {
        std::uint64_t total = 1;
        for (std::size_t i = 0; i < n; ++i) {
            total *= n;
            if (total > max_exhaustive_resamples)
                throw usage_error("exhaustive bootstrap over " + std::to_string(n) + " values is too large");
        }
        means.reserve(total);
        std::vector<std::size_t> idx(n, 0);
        for (std::uint64_t r = 0; r < total; ++r) {
            double s = 0;
            for (auto i : idx) s += values[i];
            means.push_back(s / double(n));
            for (std::size_t p = n; p-- > 0;) {
                if (++idx[p] < n) break;
                idx[p] = 0;
            }
        }
    } else {
        if (opt.resamples == 0) throw usage_error("bootstrap resamples must be positive");
        means.resize(opt.resamples);
        const std::size_t blocks = (opt.resamples + bootstrap_block - 1) / bootstrap_block;
        parallel_for(blocks, opt.threads, [&](std::size_t b) {
            rng r(mix_seed(opt.seed, b));
            const std::size_t lo = b * bootstrap_block;
            const std::size_t hi = std::min(opt.resamples, lo + bootstrap_block);
            for (std::size_t k = lo; k < hi; ++k) {
                double s = 0;
                for (std::size_t i = 0; i < n; ++i) s += values[r.below(n)];
                means[k] = s / double(n);
            }
        });
    }
    std::sort(means.begin(), means.end());
    return means;
}

// Linear-interpolation percentile (q in [0,1]) of an ascending sample.
inline double percentile(const std::vector<double> &sorted, double q) {
    if (sorted.empty()) throw data_error("percentile of empty sample");
    q = std::clamp(q, 0.0, 1.0);
    const double pos = q * double(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - double(lo);
    if (frac == 0.0) return sorted[lo];
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

struct interval {
    double low = 0;
    double high = 0;
};

inline interval percentile_interval(const std::vector<double> &sorted, double confidence) {
    const double tail = (1.0 - confidence) / 2.0;
    return {percentile(sorted, tail), percentile(sorted, 1.0 - tail)};
}

} // namespace saesteer
