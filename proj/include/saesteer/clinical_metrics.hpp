#pragma once
// GREEN ratio, Composite score, per-error-type breakdowns and paired
// bootstrap significance over per-sample scores.

#include "saesteer/bootstrap.hpp"
#include "saesteer/error_types.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace saesteer {

// M / (M + sum of all six error counts); 0 when M == 0.
inline double green_score(const error_counts &c) {
    if (c.matched == 0) return 0.0;
    return double(c.matched) / (double(c.matched) + double(c.total_errors()));
}

// Component scores on the 0..100 scale, produced by external scorers.
struct score_vector {
    std::optional<double> green;
    std::optional<double> radgraph;
    std::optional<double> chexbert;
    std::optional<double> bertscore;
    std::optional<double> bleu4;
    std::optional<double> rougel;
    std::optional<double> radcliq;

    void validate() const {
        auto check = [](const std::optional<double> &v, const char *what) {
            if (v && (!std::isfinite(*v) || *v < 0.0 || *v > 100.0))
                throw data_error(std::string("score '") + what + "' outside [0, 100]");
        };
        check(green, "green");
        check(radgraph, "radgraph");
        check(chexbert, "chexbert");
        check(bertscore, "bertscore");
        if (radcliq && !std::isfinite(*radcliq)) throw data_error("score 'radcliq' is not finite");
    }

    friend bool operator==(const score_vector &, const score_vector &) = default;
};

inline constexpr double composite_weight_green = 0.4;
inline constexpr double composite_weight_radgraph = 0.3;
inline constexpr double composite_weight_chexbert = 0.2;
inline constexpr double composite_weight_bertscore = 0.1;

inline double composite(const score_vector &s) {
    auto need = [](const std::optional<double> &v, const char *what) {
        if (!v) throw data_error(std::string("missing component: ") + what);
        return *v;
    };
    return composite_weight_green * need(s.green, "green") + composite_weight_radgraph * need(s.radgraph, "radgraph") +
           composite_weight_chexbert * need(s.chexbert, "chexbert") +
           composite_weight_bertscore * need(s.bertscore, "bertscore");
}

inline void to_json(nlohmann::json &j, const score_vector &s) {
    j = nlohmann::json::object();
    auto put = [&](const char *k, const std::optional<double> &v) {
        if (v) j[k] = *v;
    };
    put("green", s.green);
    put("radgraph", s.radgraph);
    put("chexbert", s.chexbert);
    put("bertscore", s.bertscore);
    put("bleu4", s.bleu4);
    put("rougel", s.rougel);
    put("radcliq", s.radcliq);
}

inline void from_json(const nlohmann::json &j, score_vector &s) {
    if (!j.is_object()) throw data_error("scores must be an object");
    auto get = [&](const char *k) -> std::optional<double> {
        if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
        if (!j.at(k).is_number()) throw data_error(std::string("score '") + k + "' must be a number");
        return j.at(k).get<double>();
    };
    s.green = get("green");
    s.radgraph = get("radgraph");
    s.chexbert = get("chexbert");
    s.bertscore = get("bertscore");
    s.bleu4 = get("bleu4");
    s.rougel = get("rougel");
    s.radcliq = get("radcliq");
    s.validate();
}

// One per-sample record: {study_id, counts:{...}, scores:{...}}.
struct sample_record {
    std::string study_id;
    error_counts counts;
    score_vector scores;
};

inline void to_json(nlohmann::json &j, const sample_record &r) {
    j = {{"study_id", r.study_id}, {"counts", r.counts}, {"scores", r.scores}};
}

inline void from_json(const nlohmann::json &j, sample_record &r) {
    if (!j.is_object() || !j.contains("study_id") || !j.at("study_id").is_string())
        throw data_error("sample record needs a string study_id");
    r.study_id = j.at("study_id").get<std::string>();
    if (!j.contains("counts")) throw data_error("sample record " + r.study_id + " has no counts");
    r.counts = j.at("counts").get<error_counts>();
    r.scores = j.contains("scores") ? j.at("scores").get<score_vector>() : score_vector{};
}

// ---------------------------------------------------------------------------

// Column totals per category for two aligned arms.
struct error_breakdown {
    static constexpr std::array<std::string_view, 6> categories = {"FF", "MF", "WL", "WS", "FC", "MC"};
    std::array<std::int64_t, 6> baseline{};
    std::array<std::int64_t, 6> steered{};
    std::int64_t baseline_matched = 0;
    std::int64_t steered_matched = 0;

    std::int64_t delta(std::size_t i) const { return steered[i] - baseline[i]; }
    std::int64_t baseline_total() const {
        std::int64_t s = 0;
        for (auto v : baseline) s += v;
        return s;
    }
    std::int64_t steered_total() const {
        std::int64_t s = 0;
        for (auto v : steered) s += v;
        return s;
    }
    std::int64_t total_delta() const { return steered_total() - baseline_total(); }
};

inline error_breakdown per_type_breakdown(const std::vector<std::pair<error_counts, error_counts>> &pairs) {
    error_breakdown b;
    auto add = [](std::array<std::int64_t, 6> &col, const error_counts &c) {
        col[0] += c.ff;
        col[1] += c.mf;
        col[2] += c.wl;
        col[3] += c.ws;
        col[4] += c.fc;
        col[5] += c.mc;
    };
    for (const auto &[base, steer] : pairs) {
        add(b.baseline, base);
        add(b.steered, steer);
        b.baseline_matched += base.matched;
        b.steered_matched += steer.matched;
    }
    return b;
}

inline void to_json(nlohmann::json &j, const error_breakdown &b) {
    j = nlohmann::json::object();
    for (std::size_t i = 0; i < 6; ++i)
        j[std::string(error_breakdown::categories[i])] = {
            {"baseline", b.baseline[i]}, {"steered", b.steered[i]}, {"delta", b.delta(i)}};
    j["total"] = {{"baseline", b.baseline_total()}, {"steered", b.steered_total()}, {"delta", b.total_delta()}};
    j["M"] = {{"baseline", b.baseline_matched},
              {"steered", b.steered_matched},
              {"delta", b.steered_matched - b.baseline_matched}};
}

// ---------------------------------------------------------------------------

enum class test_sidedness { one_sided, two_sided };

struct paired_bootstrap_result {
    double mean_delta = 0;
    double p_value = 1;
    double ci_low = 0;
    double ci_high = 0;
    std::size_t resamples = 0;
};

inline void to_json(nlohmann::json &j, const paired_bootstrap_result &r) {
    j = {{"mean_delta", r.mean_delta},
         {"p_value", r.p_value},
         {"ci_low", r.ci_low},
         {"ci_high", r.ci_high},
         {"resamples", r.resamples}};
}

// Resamples per-sample deltas (treat - base). One-sided p is the fraction
// of resampled mean deltas <= 0; two-sided doubles the smaller tail.
inline paired_bootstrap_result paired_bootstrap(std::span<const double> base, std::span<const double> treat,
                                                const bootstrap_options &opt = {},
                                                test_sidedness sided = test_sidedness::one_sided) {
    if (base.size() != treat.size())
        throw data_error("paired bootstrap length mismatch: " + std::to_string(base.size()) + " vs " +
                         std::to_string(treat.size()));
    if (base.size() < 2) throw data_error("paired bootstrap needs at least 2 samples");
    std::vector<double> delta(base.size());
    double sum = 0;
    for (std::size_t i = 0; i < base.size(); ++i) {
        delta[i] = treat[i] - base[i];
        sum += delta[i];
    }
    const auto means = bootstrap_means(delta, opt);
    paired_bootstrap_result r;
    r.mean_delta = sum / double(delta.size());
    r.resamples = means.size();
    const auto le0 = static_cast<double>(std::upper_bound(means.begin(), means.end(), 0.0) - means.begin());
    const auto ge0 = static_cast<double>(means.end() - std::lower_bound(means.begin(), means.end(), 0.0));
    const double B = double(means.size());
    r.p_value = sided == test_sidedness::one_sided ? le0 / B : std::min(1.0, 2.0 * std::min(le0, ge0) / B);
    const auto ci = percentile_interval(means, opt.confidence);
    r.ci_low = ci.low;
    r.ci_high = ci.high;
    return r;
}

} // namespace saesteer
