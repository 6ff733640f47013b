#pragma once
// Where features fire inside generated reports: active-token statistics on
// raw pre-activations, normalized decode positions, and top contexts.

#include "saesteer/activation_store.hpp"
#include "saesteer/generator.hpp"
#include "saesteer/topk_sae.hpp"

#include <json.hpp>

#include <map>
#include <sstream>

namespace saesteer {

inline constexpr double default_profile_threshold = 2.0;
inline constexpr std::size_t context_half_width = 50;

struct activation_hit {
    std::string study_id;
    std::uint32_t token_position = 0;
    double value = 0;
    double position = 0; // normalized to [0, 1]
};

struct feature_profile {
    std::size_t feature = 0;
    std::size_t active_count = 0;
    std::size_t distinct_studies = 0;
    double mean_activation = 0;
    double median_position = 0;
    double frac_late = 0;
    std::array<std::size_t, 4> histogram{};
    std::vector<activation_hit> hits; // ordered by (study_id, position)

    bool inactive() const { return active_count == 0; }
};

inline double normalized_position(std::size_t pos, std::size_t length) {
    return length <= 1 ? 0.0 : double(pos) / double(length - 1);
}

// [0,.25), [.25,.5), [.5,.75), [.75,1]
inline std::size_t position_quartile(double p) { return p >= 0.75 ? 3 : p >= 0.5 ? 2 : p >= 0.25 ? 1 : 0; }

inline double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace detail {
inline void finish_profile(feature_profile &p) {
    std::sort(p.hits.begin(), p.hits.end(), [](const activation_hit &a, const activation_hit &b) {
        return std::tie(a.study_id, a.token_position) < std::tie(b.study_id, b.token_position);
    });
    p.active_count = p.hits.size();
    p.histogram = {};
    std::set<std::string> studies;
    std::vector<double> positions;
    double sum = 0;
    std::size_t late = 0;
    for (const auto &h : p.hits) {
        studies.insert(h.study_id);
        positions.push_back(h.position);
        sum += h.value;
        ++p.histogram[position_quartile(h.position)];
        if (h.position >= 0.5) ++late;
    }
    p.distinct_studies = studies.size();
    p.mean_activation = p.hits.empty() ? 0.0 : sum / double(p.hits.size());
    p.median_position = median_of(positions);
    p.frac_late = p.hits.empty() ? 0.0 : double(late) / double(p.hits.size());
}
} // namespace detail

// Shards and reports must agree on (study_id, token_position). A token is
// active when its raw pre-activation (no Top-K) exceeds the threshold.
template <class T>
std::vector<feature_profile> profile_features(const basic_sae_model<T> &sae, std::span<const activation_shard> shards,
                                              const std::map<std::string, generation> &reports,
                                              const std::vector<std::size_t> &features,
                                              double threshold = default_profile_threshold) {
    for (auto f : features)
        if (f >= sae.dict_size) throw data_error("feature " + std::to_string(f) + " outside dictionary");
    std::vector<feature_profile> out(features.size());
    for (std::size_t i = 0; i < features.size(); ++i) out[i].feature = features[i];
    for (const auto &shard : shards) {
        check_dim(sae, shard.dim(), sae.hidden_dim, "profile shard");
        for (std::size_t r = 0; r < shard.size(); ++r) {
            const auto &key = shard.key(r);
            auto it = reports.find(key.study_id);
            if (it == reports.end()) throw data_error("misaligned streams: no report for study " + key.study_id);
            const std::size_t len = it->second.tokens.size();
            if (key.token_position >= len)
                throw data_error("misaligned streams: position " + std::to_string(key.token_position) +
                                 " beyond report of length " + std::to_string(len) + " for study " + key.study_id);
            const auto pre = pre_activations(sae, shard.row(r));
            for (std::size_t i = 0; i < features.size(); ++i) {
                const double v = pre[features[i]];
                if (v > threshold)
                    out[i].hits.push_back({key.study_id, key.token_position, v,
                                           normalized_position(key.token_position, len)});
            }
        }
    }
    for (auto &p : out) detail::finish_profile(p);
    return out;
}

struct activation_context {
    std::size_t feature = 0;
    std::string study_id;
    std::uint32_t token_position = 0;
    double value = 0;
    std::string window;
    bool repetition = false;
};

// True when some run of three words occurs twice without overlap.
inline bool has_literal_repetition(std::string_view text) {
    std::vector<std::string> words;
    std::istringstream in{std::string(text)};
    for (std::string w; in >> w;) words.push_back(w);
    std::map<std::string, std::size_t> first;
    for (std::size_t i = 0; i + 3 <= words.size(); ++i) {
        const auto gram = words[i] + ' ' + words[i + 1] + ' ' + words[i + 2];
        auto [it, fresh] = first.emplace(gram, i);
        if (!fresh && i >= it->second + 3) return true;
    }
    return false;
}

inline std::string context_window(const generation &report, std::size_t position) {
    const auto text = report.text();
    const auto offsets = report.token_offsets();
    if (position >= offsets.size()) throw data_error("context position outside report");
    const std::size_t at = offsets[position];
    const std::size_t lo = at > context_half_width ? at - context_half_width : 0;
    const std::size_t hi = std::min(text.size(), at + context_half_width);
    return text.substr(lo, hi - lo);
}

// Global top-k hits per feature, ties broken by (study_id, position).
inline std::vector<activation_context> top_contexts(const feature_profile &profile,
                                                    const std::map<std::string, generation> &reports,
                                                    std::size_t k) {
    if (k == 0) throw usage_error("top-k must be at least 1");
    auto hits = profile.hits;
    std::sort(hits.begin(), hits.end(), [](const activation_hit &a, const activation_hit &b) {
        if (a.value != b.value) return a.value > b.value;
        return std::tie(a.study_id, a.token_position) < std::tie(b.study_id, b.token_position);
    });
    std::vector<activation_context> out;
    for (std::size_t i = 0; i < std::min(k, hits.size()); ++i) {
        const auto &h = hits[i];
        activation_context c{profile.feature, h.study_id, h.token_position, h.value, {}, false};
        c.window = context_window(reports.at(h.study_id), h.token_position);
        c.repetition = has_literal_repetition(c.window);
        out.push_back(std::move(c));
    }
    return out;
}

inline std::string profiles_tsv(const std::vector<feature_profile> &profiles,
                                const std::map<std::size_t, std::vector<activation_context>> &contexts = {}) {
    std::ostringstream os;
    os.precision(6);
    os << "feature\tactive\tstudies\tmean_act\tp50\tfrac_late\tq1\tq2\tq3\tq4\trep\n";
    for (const auto &p : profiles) {
        std::size_t rep = 0;
        if (auto it = contexts.find(p.feature); it != contexts.end())
            for (const auto &c : it->second) rep += c.repetition;
        os << p.feature << '\t' << p.active_count << '\t' << p.distinct_studies << '\t' << p.mean_activation << '\t'
           << p.median_position << '\t' << p.frac_late;
        for (auto b : p.histogram) os << '\t' << b;
        os << '\t' << rep << '\n';
    }
    return os.str();
}

inline void to_json(nlohmann::json &j, const activation_context &c) {
    j = {{"study_id", c.study_id},
         {"token_position", c.token_position},
         {"activation", c.value},
         {"window", c.window},
         {"repetition", c.repetition}};
}

inline void to_json(nlohmann::json &j, const feature_profile &p) {
    j = {{"feature", p.feature},
         {"active_count", p.active_count},
         {"distinct_studies", p.distinct_studies},
         {"mean_activation", p.mean_activation},
         {"median_position", p.median_position},
         {"frac_late", p.frac_late},
         {"histogram", p.histogram},
         {"inactive", p.inactive()}};
    auto pos = nlohmann::json::array();
    for (const auto &h : p.hits) pos.push_back({{"study_id", h.study_id}, {"token_position", h.token_position},
                                                {"position", h.position}, {"activation", h.value}});
    j["positions"] = pos;
}

} // namespace saesteer
