#pragma once

#include "saesteer/saesteer.hpp"

#include <cmath>
#include <vector>

namespace testing_support {

using namespace saesteer;

template <class T>
basic_sae_model<T> random_sae(std::size_t d, std::size_t D, std::size_t K, std::uint64_t seed, double bias_scale = 0.1) {
    rng r(seed);
    auto m = basic_sae_model<T>::zeros(d, D, K);
    for (auto &w : m.w_enc) w = static_cast<T>(r.normal() / std::sqrt(double(d)));
    for (auto &w : m.w_dec) w = static_cast<T>(r.normal());
    for (auto &b : m.b_enc) b = static_cast<T>(bias_scale * r.normal());
    for (auto &b : m.b_dec) b = static_cast<T>(bias_scale * r.normal());
    m.normalize_decoder_rows();
    return m;
}

// Worst relative error between the analytic gradient and central
// differences. Each coordinate is compared with max(|a|, |n|, floor) in the
// denominator; coordinates whose perturbation flips the Top-K support are
// skipped because the loss is not differentiable there.
struct gradient_check_result {
    double max_rel_error = 0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
};

inline gradient_check_result gradient_check(std::size_t d, std::size_t D, std::size_t K, std::uint64_t seed,
                                            std::size_t rows = 5, double eps = 1e-6) {
    auto m = random_sae<double>(d, D, K, seed, 0.3);
    rng r(mix_seed(seed, 1));
    std::vector<std::vector<double>> data(rows, std::vector<double>(d));
    for (auto &row : data)
        for (auto &v : row) v = r.normal();
    row_list<double> list;
    for (const auto &row : data) list.push_back(row);

    auto support = [&](const basic_sae_model<double> &mm) {
        std::vector<std::vector<double>> s;
        for (const auto &h : list) {
            auto z = encode(mm, h, true);
            for (auto &v : z) v = v > 0 ? 1 : 0;
            s.push_back(z);
        }
        return s;
    };
    const auto base_support = support(m);
    const auto [loss, grad] = masked_mse_gradient(m, list);
    (void)loss;

    gradient_check_result out;
    auto probe = [&](std::vector<double> &param, const std::vector<double> &g) {
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double keep = param[i];
            param[i] = keep + eps;
            const bool same_plus = support(m) == base_support;
            const double lp = masked_mse_loss(m, list);
            param[i] = keep - eps;
            const bool same_minus = support(m) == base_support;
            const double lm = masked_mse_loss(m, list);
            param[i] = keep;
            if (!same_plus || !same_minus) {
                ++out.skipped;
                continue;
            }
            const double numeric = (lp - lm) / (2 * eps);
            const double denom = std::max({std::abs(numeric), std::abs(g[i]), 1e-3});
            out.max_rel_error = std::max(out.max_rel_error, std::abs(numeric - g[i]) / denom);
            ++out.checked;
        }
    };
    probe(m.w_enc, grad.w_enc);
    probe(m.b_enc, grad.b_enc);
    probe(m.w_dec, grad.w_dec);
    probe(m.b_dec, grad.b_dec);
    return out;
}

// Greedy maximum-cosine assignment of planted atoms to decoder rows: take the
// globally best remaining (atom, row) pair until none reaches the threshold.
inline std::size_t greedy_matches(const std::vector<std::vector<double>> &atoms, const sae_model &m, double threshold) {
    struct cand {
        double cos;
        std::size_t a, j;
    };
    std::vector<cand> all;
    for (std::size_t a = 0; a < atoms.size(); ++a) {
        double na = 0;
        for (double v : atoms[a]) na += v * v;
        for (std::size_t j = 0; j < m.dict_size; ++j) {
            const auto row = m.decoder_row(j);
            double dot = 0, nr = 0;
            for (std::size_t i = 0; i < row.size(); ++i) {
                dot += atoms[a][i] * row[i];
                nr += double(row[i]) * row[i];
            }
            if (na > 0 && nr > 0) all.push_back({dot / std::sqrt(na * nr), a, j});
        }
    }
    std::sort(all.begin(), all.end(), [](const cand &x, const cand &y) {
        if (x.cos != y.cos) return x.cos > y.cos;
        if (x.a != y.a) return x.a < y.a;
        return x.j < y.j;
    });
    std::vector<bool> used_a(atoms.size()), used_j(m.dict_size);
    std::size_t matched = 0;
    for (const auto &c : all) {
        if (c.cos < threshold) break;
        if (used_a[c.a] || used_j[c.j]) continue;
        used_a[c.a] = used_j[c.j] = true;
        ++matched;
    }
    return matched;
}

} // namespace testing_support

namespace testing_support {

// Screens every planted atom of one world at each hooked layer, with a
// differently seeded panel per layer, using the planted dictionary as SAE.
inline std::map<int, causal_delta_table> screen_world(const toy_config &config, std::size_t studies,
                                                      std::size_t panel_size, std::uint64_t seed,
                                                      std::size_t threads = 1) {
    const auto world = generate_world(config);
    const auto pool = make_studies(world, studies, seed);
    const toy_generator gen(world, pool);
    const toy_oracle oracle(gen);
    const auto sae = oracle_sae(world);
    std::map<std::string, double> badness;
    for (const auto &id : gen.study_ids()) {
        const auto c = oracle.count(gen.generate(id, {}));
        badness[id] = double(c.ff) + c.mf + c.wl + c.ws;
    }
    std::vector<std::size_t> candidates(sae.dict_size);
    std::iota(candidates.begin(), candidates.end(), std::size_t{0});
    screen_options opt;
    opt.threads = threads;
    std::map<int, causal_delta_table> out;
    for (int layer : config.layers) {
        const auto panel = compose_panel(badness, panel_size, mix_seed(seed, std::uint64_t(layer)));
        out[layer] = causal_screen(sae, layer, panel, gen, oracle, candidates, opt);
    }
    return out;
}

struct twin_census_result {
    census_comparison report;
    model_census a, b;
};

inline twin_census_result twin_census(std::uint64_t seed, std::vector<int> layers, const census_options &opt,
                                      std::size_t threads = 1) {
    auto [ca, cb] = twin_configs(seed);
    ca.layers = cb.layers = layers;
    twin_census_result r;
    r.a = census_of(screen_world(ca, 200, 24, mix_seed(seed, 11), threads), default_consensus_size);
    r.b = census_of(screen_world(cb, 200, 24, mix_seed(seed, 12), threads), default_consensus_size);
    r.report = census_report(r.a, r.b, opt);
    return r;
}

} // namespace testing_support

namespace testing_support {

// Three-feature identity SAE over three reports of lengths 10, 37 and 100.
// Feature 0 fires only on each report's last token, feature 1 fires with
// the same value everywhere, feature 2 never crosses any threshold.
struct profiling_fixture {
    sae_model sae;
    std::vector<activation_shard> shards;
    std::map<std::string, generation> reports;
};

inline profiling_fixture make_profiling_fixture() {
    profiling_fixture f;
    f.sae = sae_model::zeros(3, 3, 3);
    for (std::size_t i = 0; i < 2; ++i) {
        f.sae.encoder(i, i) = 1.f;
        f.sae.w_dec[i * 3 + i] = 1.f;
    }
    activation_shard shard(0, 3);
    for (std::size_t len : {10, 37, 100}) {
        const std::string id = "s" + std::to_string(len);
        generation g{id, {}};
        for (std::size_t t = 0; t < len; ++t) {
            g.tokens.push_back("w" + std::to_string(t));
            const std::vector<float> v = {t + 1 == len ? 5.f : 0.f, 3.f, 1.f};
            shard.append(id, std::uint32_t(t), v);
        }
        f.reports[id] = g;
    }
    f.shards.push_back(std::move(shard));
    return f;
}

// Profile of feature 1 restricted to the 100-token report.
inline feature_profile uniform_profile() {
    auto f = make_profiling_fixture();
    activation_shard only(0, 3);
    const auto &s = f.shards[0];
    for (std::size_t r = 0; r < s.size(); ++r)
        if (s.key(r).study_id == "s100") only.append("s100", s.key(r).token_position, s.row(r));
    const std::vector<activation_shard> v{only};
    return profile_features(f.sae, std::span<const activation_shard>(v), f.reports, {1}).front();
}

// Active counts over an increasing threshold sweep on random activations.
inline std::vector<std::size_t> threshold_sweep(std::uint64_t seed) {
    rng r(seed);
    const auto sae = random_sae<float>(8, 16, 4, seed);
    activation_shard shard(0, 8);
    std::map<std::string, generation> reports;
    for (int s = 0; s < 20; ++s) {
        const std::string id = "r" + std::to_string(s);
        generation g{id, {}};
        for (std::uint32_t t = 0; t < 30; ++t) {
            g.tokens.push_back("x");
            std::vector<float> v(8);
            for (auto &x : v) x = static_cast<float>(2 * r.normal());
            shard.append(id, t, v);
        }
        reports[id] = g;
    }
    const std::vector<activation_shard> v{shard};
    std::vector<std::size_t> features(16);
    std::iota(features.begin(), features.end(), std::size_t{0});
    std::vector<std::size_t> totals;
    for (double th = -3; th <= 6; th += 0.25) {
        std::size_t total = 0;
        for (const auto &p : profile_features(sae, std::span<const activation_shard>(v), reports, features, th))
            total += p.active_count;
        totals.push_back(total);
    }
    return totals;
}

} // namespace testing_support
