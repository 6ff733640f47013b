#pragma once
// Multi-layer steering plans, list aggregation, generation-time hooks and
// the validation grid search over operating points.

#include "saesteer/feature_select.hpp"

#include <json.hpp>

#include <map>

namespace saesteer {

inline constexpr double alpha_grid_low = 0.1;
inline constexpr double alpha_grid_high = 0.5;

struct steering_plan {
    double alpha = 0.3;
    double beta = 1.0;
    steering_mode mode = steering_mode::residual;
    std::optional<std::size_t> k_budget;
    std::map<int, layer_edits> layers;

    void validate() const {
        if (!std::isfinite(alpha) || alpha < 0.0 || alpha > 1.0) throw data_error("alpha must lie in [0, 1]");
        if (!std::isfinite(beta) || beta < 0.0) throw data_error("beta must be non-negative");
        if (k_budget && *k_budget == 0) throw data_error("K budget must be positive");
        for (const auto &[layer, e] : layers) {
            const std::set<std::size_t> s(e.suppress.begin(), e.suppress.end());
            for (auto j : e.boost)
                if (s.count(j))
                    throw data_error("feature " + std::to_string(j) + " is both suppressed and boosted at layer " +
                                     std::to_string(layer));
        }
    }

    std::vector<std::string> warnings() const {
        std::vector<std::string> w;
        if (alpha != 0.0 && (alpha < alpha_grid_low || alpha > alpha_grid_high))
            w.push_back("alpha=" + nlohmann::json(alpha).dump() + " is outside the validated range [0.1, 0.5]");
        return w;
    }

    friend bool operator==(const steering_plan &, const steering_plan &) = default;
};

inline void to_json(nlohmann::json &j, const steering_plan &p) {
    j = nlohmann::json::object();
    j["alpha"] = p.alpha;
    j["beta"] = p.beta;
    j["mode"] = std::string(name(p.mode));
    if (p.k_budget) j["k_budget"] = *p.k_budget;
    j["layers"] = nlohmann::json::object();
    for (const auto &[layer, e] : p.layers)
        j["layers"][std::to_string(layer)] = {{"suppress", e.suppress}, {"boost", e.boost}};
}

inline void from_json(const nlohmann::json &j, steering_plan &p) {
    if (!j.is_object()) throw data_error("steering plan must be a JSON object");
    for (const char *k : {"alpha", "beta", "mode", "layers"})
        if (!j.contains(k)) throw data_error(std::string("steering plan missing '") + k + "'");
    if (!j.at("alpha").is_number() || !j.at("beta").is_number()) throw data_error("alpha and beta must be numbers");
    if (!j.at("mode").is_string()) throw data_error("mode must be a string");
    p.alpha = j.at("alpha").get<double>();
    p.beta = j.at("beta").get<double>();
    try {
        p.mode = parse_steering_mode(j.at("mode").get<std::string>());
    } catch (const usage_error &e) {
        throw data_error(e.what());
    }
    p.k_budget.reset();
    if (j.contains("k_budget")) {
        if (!j.at("k_budget").is_number_unsigned()) throw data_error("k_budget must be a positive integer");
        p.k_budget = j.at("k_budget").get<std::size_t>();
    }
    p.layers.clear();
    if (!j.at("layers").is_object()) throw data_error("plan layers must be an object");
    for (const auto &[key, v] : j.at("layers").items()) {
        const int layer = static_cast<int>(parse_feature_key(key));
        layer_edits e;
        for (const char *dir : {"suppress", "boost"}) {
            if (!v.contains(dir)) continue;
            if (!v.at(dir).is_array()) throw data_error(std::string("plan '") + dir + "' must be an array");
            for (const auto &f : v.at(dir)) {
                if (!f.is_number_unsigned()) throw data_error("plan feature indices must be non-negative integers");
                (std::string_view(dir) == "suppress" ? e.suppress : e.boost).push_back(f.get<std::size_t>());
            }
        }
        p.layers[layer] = std::move(e);
    }
    p.validate();
}

// ---------------------------------------------------------------------------

enum class list_selection { combined, suppress_only, boost_only };

inline std::string_view name(list_selection s) {
    switch (s) {
    case list_selection::combined: return "combined";
    case list_selection::suppress_only: return "suppress";
    case list_selection::boost_only: return "boost";
    }
    return "combined";
}

inline list_selection parse_list_selection(std::string_view s) {
    if (s == "combined") return list_selection::combined;
    if (s == "suppress") return list_selection::suppress_only;
    if (s == "boost") return list_selection::boost_only;
    throw usage_error("unknown selection '" + std::string(s) + "' (expected combined, suppress or boost)");
}

// Top-K per type and direction, unioned across types; boost members that are
// also suppressed are dropped. Sets come back in ascending index order.
inline layer_edits aggregate_lists(const ranked_feature_lists &lists, std::size_t k_budget,
                                   list_selection selection = list_selection::combined) {
    if (k_budget == 0) throw usage_error("K budget must be positive");
    std::set<std::size_t> suppress, boost;
    for (auto t : steered_error_types) {
        const auto &s = lists.suppress[index(t)];
        const auto &b = lists.boost[index(t)];
        if (selection != list_selection::boost_only)
            suppress.insert(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(std::min(k_budget, s.size())));
        if (selection != list_selection::suppress_only)
            boost.insert(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(std::min(k_budget, b.size())));
    }
    layer_edits e;
    e.suppress.assign(suppress.begin(), suppress.end());
    for (auto j : boost)
        if (!suppress.count(j)) e.boost.push_back(j);
    return e;
}

// ---------------------------------------------------------------------------

using sae_by_layer = std::map<int, sae_model>;

inline void check_plan(const steering_plan &plan, const sae_by_layer &saes, const steerable_generator &gen) {
    plan.validate();
    for (const auto &[layer, e] : plan.layers) {
        detail::require_layer(gen, layer);
        auto it = saes.find(layer);
        if (it == saes.end()) throw data_error("no SAE for steered layer " + std::to_string(layer));
        check_indices(e, it->second.dict_size);
    }
}

// Post-block hook applying the plan's update at each listed layer. An empty
// hook is returned when nothing would change.
inline hidden_state_hook make_steering_hook(const steering_plan &plan, const sae_by_layer &saes) {
    if (plan.alpha == 0.0 || plan.layers.empty()) return {};
    return [&plan, &saes](int layer, std::size_t, std::span<float> h) {
        auto it = plan.layers.find(layer);
        if (it == plan.layers.end()) return;
        const auto s = apply_update(saes.at(layer), std::span<const float>(h.data(), h.size()), it->second, plan.alpha,
                                    plan.beta, plan.mode);
        std::copy(s.output.begin(), s.output.end(), h.begin());
    };
}

inline generation steer_generation(const steerable_generator &gen, const sae_by_layer &saes, const steering_plan &plan,
                                   const std::string &study_id) {
    check_plan(plan, saes, gen);
    return gen.generate(study_id, make_steering_hook(plan, saes));
}

// Decodes every study; parallel only when the generator allows it.
inline std::vector<generation> steer_all(const steerable_generator &gen, const sae_by_layer &saes,
                                         const steering_plan &plan, const std::vector<std::string> &studies,
                                         std::size_t threads) {
    check_plan(plan, saes, gen);
    const auto hook = make_steering_hook(plan, saes);
    std::vector<generation> out(studies.size());
    parallel_for(studies.size(), gen.thread_safe() ? threads : 1,
                 [&](std::size_t i) { out[i] = gen.generate(studies[i], hook); });
    return out;
}

// ---------------------------------------------------------------------------
// Grid search.

struct grid_spec {
    std::vector<double> alphas{0.1, 0.2, 0.3, 0.4, 0.5};
    std::vector<std::size_t> k_budgets{20, 50, 100};
    std::vector<double> betas{1.0};
    std::vector<steering_mode> modes{steering_mode::residual};
    std::vector<list_selection> selections{list_selection::combined};
    std::vector<std::vector<int>> layer_sets{{8, 16, 20, 24}};
    std::size_t threads = 1;
};

struct grid_row {
    bool baseline = false;
    double alpha = 0;
    std::size_t k_budget = 0;
    double beta = 0;
    steering_mode mode = steering_mode::residual;
    list_selection selection = list_selection::combined;
    std::vector<int> layers;
    double composite = 0;
    double green = 0;
    double radgraph = 0;
    double chexbert = 0;
    double bertscore = 0;
    std::array<std::int64_t, 4> errors{}; // summed FF, MF, WL, WS
};

struct grid_result {
    std::vector<grid_row> rows; // rows[0] is the unsteered baseline
    std::size_t best = 0;
};

inline void to_json(nlohmann::json &j, const grid_row &r) {
    j = nlohmann::json::object();
    if (r.baseline) {
        j["config"] = "baseline";
    } else {
        j["config"] = {{"alpha", r.alpha},
                       {"k_budget", r.k_budget},
                       {"beta", r.beta},
                       {"mode", std::string(name(r.mode))},
                       {"selection", std::string(name(r.selection))},
                       {"layers", r.layers}};
    }
    j["composite"] = r.composite;
    j["green"] = r.green;
    j["radgraph"] = r.radgraph;
    j["chexbert"] = r.chexbert;
    j["bertscore"] = r.bertscore;
    j["errors"] = nlohmann::json::object();
    for (auto t : steered_error_types) j["errors"][std::string(name(t))] = r.errors[index(t)];
}

inline void to_json(nlohmann::json &j, const grid_result &g) {
    j = {{"rows", g.rows}, {"best", g.best}};
}

inline steering_plan plan_for(const grid_row &r, const std::map<int, ranked_feature_lists> &lists) {
    steering_plan p;
    p.alpha = r.alpha;
    p.beta = r.beta;
    p.mode = r.mode;
    p.k_budget = r.k_budget;
    for (int layer : r.layers) {
        auto it = lists.find(layer);
        if (it == lists.end()) throw data_error("no feature lists for layer " + std::to_string(layer));
        p.layers[layer] = aggregate_lists(it->second, r.k_budget, r.selection);
    }
    return p;
}

namespace detail {
inline void score_row(grid_row &row, const std::vector<generation> &decodes, const report_scorer &scorer,
                      const error_oracle &oracle) {
    double comp = 0, g = 0, rg = 0, cx = 0, bs = 0;
    for (const auto &d : decodes) {
        const auto s = scorer.score(d);
        comp += composite(s);
        g += *s.green;
        rg += *s.radgraph;
        cx += *s.chexbert;
        bs += *s.bertscore;
        const auto c = oracle.count(d);
        for (auto t : steered_error_types) row.errors[index(t)] += c.get(t);
    }
    const double n = double(decodes.size());
    row.composite = comp / n;
    row.green = g / n;
    row.radgraph = rg / n;
    row.chexbert = cx / n;
    row.bertscore = bs / n;
}
} // namespace detail

// Full factorial over the spec; the winner maximizes mean Composite, the
// earliest configuration winning ties. The baseline row is never selected.
inline grid_result grid_search(const grid_spec &spec, const std::map<int, ranked_feature_lists> &lists,
                               const sae_by_layer &saes, const steerable_generator &gen, const report_scorer &scorer,
                               const error_oracle &oracle, const std::vector<std::string> &studies) {
    if (studies.empty()) throw data_error("grid search needs validation studies");
    grid_result out;
    grid_row base;
    base.baseline = true;
    steering_plan unsteered;
    unsteered.alpha = 0.0;
    detail::score_row(base, steer_all(gen, saes, unsteered, studies, spec.threads), scorer, oracle);
    out.rows.push_back(base);
    for (const auto &layers : spec.layer_sets)
        for (auto sel : spec.selections)
            for (auto mode : spec.modes)
                for (double beta : spec.betas)
                    for (std::size_t k : spec.k_budgets)
                        for (double alpha : spec.alphas) {
                            grid_row row;
                            row.alpha = alpha;
                            row.k_budget = k;
                            row.beta = beta;
                            row.mode = mode;
                            row.selection = sel;
                            row.layers = layers;
                            const auto plan = plan_for(row, lists);
                            detail::score_row(row, steer_all(gen, saes, plan, studies, spec.threads), scorer, oracle);
                            out.rows.push_back(row);
                        }
    if (out.rows.size() == 1) throw usage_error("empty grid");
    out.best = 1;
    for (std::size_t i = 2; i < out.rows.size(); ++i)
        if (out.rows[i].composite > out.rows[out.best].composite) out.best = i;
    return out;
}

} // namespace saesteer
