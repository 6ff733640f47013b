#pragma once
// Synthetic steerable generator with a planted dictionary. Hidden states are
// sparse combinations of known unit atoms; a few "role" atoms drive or guard
// specific report errors, and one drives a repeated filler phrase.
//
// Every hooked layer is an identity block, so an edit made at one layer is
// seen by all later layers and by the emission readout.

#include "saesteer/activation_store.hpp"
#include "saesteer/generator.hpp"
#include "saesteer/topk_sae.hpp"

#include <json.hpp>

#include <cstdio>
#include <map>
#include <set>

namespace saesteer {

struct role_spec {
    error_type type;
    std::size_t count;
    friend bool operator==(const role_spec &, const role_spec &) = default;
};

// "FF:3,MF:2"
inline std::vector<role_spec> parse_role_specs(std::string_view s) {
    std::vector<role_spec> out;
    std::size_t start = 0;
    while (start < s.size()) {
        auto end = s.find(',', start);
        if (end == std::string_view::npos) end = s.size();
        const auto item = s.substr(start, end - start);
        const auto colon = item.find(':');
        if (colon == std::string_view::npos) throw usage_error("role spec '" + std::string(item) + "' needs TYPE:COUNT");
        const auto type = parse_error_type(item.substr(0, colon));
        const auto count_str = std::string(item.substr(colon + 1));
        if (count_str.empty() || !std::all_of(count_str.begin(), count_str.end(), ::isdigit))
            throw usage_error("role count in '" + std::string(item) + "' is not a number");
        out.push_back({type, std::stoul(count_str)});
        start = end + 1;
    }
    return out;
}

struct toy_config {
    std::size_t hidden_dim = 64;
    std::size_t atom_count = 96;  // D0
    std::size_t background_k = 4; // k0, background atoms per token
    double noise = 0.0;           // sigma
    std::vector<role_spec> drivers{{error_type::ff, 1}, {error_type::mf, 1}};
    std::vector<role_spec> guards{{error_type::mf, 1}, {error_type::wl, 1}};
    bool repetition = true;
    std::vector<int> layers{8, 16, 20, 24};
    std::uint64_t seed = 1;
    double threshold = 0.5;             // injection threshold on driver minus guard readout
    double incidental_threshold = 1.2;  // guard readout above which an incidental finding is reported
    double driver_rate_high = 0.35;     // per-slot driver probability, high-risk studies
    double driver_rate_low = 0.05;
    double guard_rate = 0.5;

    friend bool operator==(const toy_config &, const toy_config &) = default;
};

enum class role_kind { driver, guard, repetition };

struct planted_role {
    std::size_t atom = 0;
    role_kind kind = role_kind::driver;
    error_type type = error_type::ff; // unused for repetition
    friend bool operator==(const planted_role &, const planted_role &) = default;
};

inline constexpr std::size_t toy_finding_count = 16;
inline constexpr std::array<std::string_view, 2> toy_locations{"left", "right"};
inline constexpr std::array<std::string_view, 3> toy_severities{"mild", "moderate", "severe"};
inline constexpr std::array<std::string_view, 3> toy_phrase{"no", "acute", "process"};
inline constexpr std::string_view toy_comparison = "unchanged";

inline std::string toy_finding_token(std::size_t f) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "f%02zu", f);
    return buf;
}

struct toy_world {
    toy_config config;
    std::vector<double> atoms; // D0 x d, row-major, unit rows
    std::vector<planted_role> roles;

    std::span<const double> atom(std::size_t j) const {
        return {atoms.data() + j * config.hidden_dim, config.hidden_dim};
    }
    std::vector<std::size_t> role_atoms(role_kind kind, std::optional<error_type> type = std::nullopt) const {
        std::vector<std::size_t> out;
        for (const auto &r : roles)
            if (r.kind == kind && (!type || r.type == *type)) out.push_back(r.atom);
        return out;
    }
    std::optional<std::size_t> repetition_atom() const {
        for (const auto &r : roles)
            if (r.kind == role_kind::repetition) return r.atom;
        return std::nullopt;
    }
    std::vector<std::size_t> background_atoms() const {
        std::set<std::size_t> special;
        for (const auto &r : roles) special.insert(r.atom);
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < config.atom_count; ++j)
            if (!special.count(j)) out.push_back(j);
        return out;
    }
    double readout(std::size_t j, std::span<const float> h) const {
        const auto a = atom(j);
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * double(h[i]);
        return s;
    }

    friend bool operator==(const toy_world &, const toy_world &) = default;
};

inline std::size_t role_total(const toy_config &c) {
    std::size_t n = c.repetition ? 1 : 0;
    for (const auto &r : c.drivers) n += r.count;
    for (const auto &r : c.guards) n += r.count;
    return n;
}

inline void validate_config(const toy_config &c) {
    if (c.hidden_dim == 0 || c.atom_count == 0) throw data_error("infeasible toy config: sizes must be positive");
    if (c.atom_count < c.background_k) throw data_error("infeasible toy config: D0 must be at least k0");
    const std::size_t roles = role_total(c);
    if (roles > c.hidden_dim) throw data_error("infeasible toy config: more role atoms than hidden dimensions");
    if (roles + c.background_k > c.atom_count)
        throw data_error("infeasible toy config: too few background atoms for k0");
    if (roles == c.hidden_dim && roles < c.atom_count)
        throw data_error("infeasible toy config: no room for background atoms");
    if (c.layers.empty()) throw data_error("infeasible toy config: no hook layers");
    if (!(c.noise >= 0.0) || !std::isfinite(c.noise)) throw data_error("noise scale must be non-negative");
    for (double p : {c.driver_rate_high, c.driver_rate_low, c.guard_rate})
        if (!(p >= 0.0 && p <= 1.0)) throw data_error("rates must lie in [0, 1]");
}

namespace detail {
// Orthonormalizes v against `basis` in place; false if it collapses.
inline bool orthonormalize(std::vector<double> &v, const std::vector<std::vector<double>> &basis) {
    for (int pass = 0; pass < 2; ++pass)
        for (const auto &b : basis) {
            double dot = 0;
            for (std::size_t i = 0; i < v.size(); ++i) dot += v[i] * b[i];
            for (std::size_t i = 0; i < v.size(); ++i) v[i] -= dot * b[i];
        }
    double n2 = 0;
    for (double x : v) n2 += x * x;
    if (n2 < 1e-20) return false;
    const double inv = 1.0 / std::sqrt(n2);
    for (double &x : v) x *= inv;
    return true;
}

inline std::vector<double> gaussian_vector(rng &r, std::size_t d) {
    std::vector<double> v(d);
    for (auto &x : v) x = r.normal();
    return v;
}
} // namespace detail

// Role atoms are orthonormal. Background atoms fill the orthogonal
// complement orthonormally while there is room, then become random unit
// vectors inside it. Atom indices are shuffled afterwards.
inline toy_world generate_world(const toy_config &config) {
    validate_config(config);
    const std::size_t d = config.hidden_dim;
    const std::size_t D0 = config.atom_count;
    const std::size_t R = role_total(config);
    rng r(mix_seed(config.seed, 0x70795f776f726c64ULL));

    std::vector<std::vector<double>> basis;
    while (basis.size() < std::min(D0, d)) {
        auto v = detail::gaussian_vector(r, d);
        if (detail::orthonormalize(v, basis)) basis.push_back(std::move(v));
    }
    std::vector<std::vector<double>> rows(basis.begin(), basis.end());
    const std::vector<std::vector<double>> role_basis(basis.begin(), basis.begin() + static_cast<std::ptrdiff_t>(R));
    while (rows.size() < D0) {
        auto v = detail::gaussian_vector(r, d);
        if (detail::orthonormalize(v, role_basis)) rows.push_back(std::move(v));
    }

    std::vector<std::size_t> perm(D0);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    r.shuffle(perm); // slot i of the planted list lands at atom index perm[i]

    toy_world w;
    w.config = config;
    w.atoms.assign(D0 * d, 0.0);
    for (std::size_t i = 0; i < D0; ++i) std::copy(rows[i].begin(), rows[i].end(), w.atoms.begin() + perm[i] * d);
    std::size_t slot = 0;
    for (const auto &spec : config.drivers)
        for (std::size_t c = 0; c < spec.count; ++c) w.roles.push_back({perm[slot++], role_kind::driver, spec.type});
    for (const auto &spec : config.guards)
        for (std::size_t c = 0; c < spec.count; ++c) w.roles.push_back({perm[slot++], role_kind::guard, spec.type});
    if (config.repetition) w.roles.push_back({perm[slot++], role_kind::repetition, error_type::ff});
    return w;
}

// ---------------------------------------------------------------------------
// Studies.

struct toy_mention {
    std::size_t finding = 0;
    std::size_t location = 0;
    std::size_t severity = 0;
    friend bool operator==(const toy_mention &, const toy_mention &) = default;
};

struct toy_study {
    std::string study_id;
    std::string stratum; // "low" or "high" risk
    std::vector<toy_mention> mentions;
    // Role-atom magnitudes at each mention's decision token.
    std::vector<std::map<std::size_t, double>> slot_roles;
    double repetition = 0; // repetition-atom magnitude over the closing phrase
    bool comparison = false;
    std::uint64_t seed = 0; // background-code substream

    friend bool operator==(const toy_study &, const toy_study &) = default;
};

inline std::vector<toy_study> make_studies(const toy_world &w, std::size_t count, std::uint64_t seed,
                                           double high_fraction = 0.5, double repetition_rate = 0.2) {
    const auto &c = w.config;
    std::vector<toy_study> out;
    for (std::size_t s = 0; s < count; ++s) {
        rng r(mix_seed(seed, s));
        toy_study st;
        char id[32];
        std::snprintf(id, sizeof id, "s%05zu", s);
        st.study_id = id;
        st.stratum = r.uniform() < high_fraction ? "high" : "low";
        const std::size_t n = 2 + r.below(3);
        std::vector<std::size_t> findings(toy_finding_count);
        std::iota(findings.begin(), findings.end(), std::size_t{0});
        r.shuffle(findings);
        const double rate = st.stratum == "high" ? c.driver_rate_high : c.driver_rate_low;
        for (std::size_t m = 0; m < n; ++m) {
            st.mentions.push_back({findings[m], r.below(2), r.below(3)});
            std::map<std::size_t, double> roles;
            for (const auto &role : w.roles) {
                if (role.kind == role_kind::driver && r.uniform() < rate) roles[role.atom] = r.uniform(1.0, 2.0);
                if (role.kind == role_kind::guard && r.uniform() < c.guard_rate) roles[role.atom] = r.uniform(0.6, 1.0);
            }
            st.slot_roles.push_back(std::move(roles));
        }
        if (w.repetition_atom() && r.uniform() < repetition_rate) st.repetition = r.uniform(2.5, 3.5);
        st.comparison = r.uniform() < 0.3;
        st.seed = mix_seed(seed ^ 0x5eedULL, s);
        out.push_back(std::move(st));
    }
    return out;
}

// Sparse code of one token: slot s (mentions then the closing slot), local
// index inside the slot. Background atoms come from the study's substream.
inline std::vector<std::pair<std::size_t, double>> token_code(const toy_world &w, const toy_study &st,
                                                              std::size_t slot, std::size_t local) {
    rng r(mix_seed(mix_seed(st.seed, slot), local));
    const auto bg = w.background_atoms();
    std::vector<std::pair<std::size_t, double>> code;
    std::set<std::size_t> chosen;
    while (chosen.size() < std::min(w.config.background_k, bg.size())) {
        const auto j = bg[r.below(bg.size())];
        if (chosen.insert(j).second) code.push_back({j, r.uniform(0.5, 1.5)});
    }
    if (local == 0 && slot < st.slot_roles.size())
        for (const auto &[j, v] : st.slot_roles[slot]) code.push_back({j, v});
    if (slot == st.mentions.size() && st.repetition > 0) code.push_back({*w.repetition_atom(), st.repetition});
    return code;
}

inline std::vector<float> token_state(const toy_world &w, const toy_study &st, std::size_t slot, std::size_t local) {
    const std::size_t d = w.config.hidden_dim;
    std::vector<double> h(d, 0.0);
    for (const auto &[j, v] : token_code(w, st, slot, local)) {
        const auto a = w.atom(j);
        for (std::size_t i = 0; i < d; ++i) h[i] += v * a[i];
    }
    if (w.config.noise > 0) {
        rng r(mix_seed(mix_seed(mix_seed(st.seed, slot), local), 0x6e6f697365ULL));
        for (auto &x : h) x += w.config.noise * r.normal();
    }
    return {h.begin(), h.end()};
}

// Planted-world samples without report structure: k0 random atoms with
// magnitudes in [1, 2] plus isotropic noise.
inline activation_shard sample_activations(const toy_world &w, std::size_t tokens, std::uint64_t seed) {
    const std::size_t d = w.config.hidden_dim;
    activation_shard shard(0, d);
    rng r(seed);
    std::vector<float> hf(d);
    for (std::size_t t = 0; t < tokens; ++t) {
        std::vector<double> h(d, 0.0);
        std::set<std::size_t> chosen;
        while (chosen.size() < w.config.background_k) {
            const auto j = r.below(w.config.atom_count);
            if (!chosen.insert(j).second) continue;
            const double v = r.uniform(1.0, 2.0);
            const auto a = w.atom(j);
            for (std::size_t i = 0; i < d; ++i) h[i] += v * a[i];
        }
        for (std::size_t i = 0; i < d; ++i) hf[i] = static_cast<float>(h[i] + w.config.noise * r.normal());
        shard.append("planted", static_cast<std::uint32_t>(t), hf);
    }
    return shard;
}

// SAE whose dictionary is the planted one: W_dec = A, W_enc = A^T.
inline sae_model oracle_sae(const toy_world &w) {
    const std::size_t d = w.config.hidden_dim, D = w.config.atom_count;
    auto m = sae_model::zeros(d, D, std::min(D, w.config.background_k + w.roles.size()));
    for (std::size_t j = 0; j < D; ++j) {
        const auto a = w.atom(j);
        for (std::size_t i = 0; i < d; ++i) {
            m.w_dec[j * d + i] = static_cast<float>(a[i]);
            m.encoder(i, j) = static_cast<float>(a[i]);
        }
    }
    return m;
}

// Two worlds sharing guard (boost-side) structure with disjoint dominant
// suppress drivers: FF-heavy versus WS-heavy.
inline std::pair<toy_config, toy_config> twin_configs(std::uint64_t seed) {
    toy_config a;
    a.seed = mix_seed(seed, 1);
    a.drivers = {{error_type::mf, 1}, {error_type::wl, 1}, {error_type::ff, 3}};
    a.guards = {{error_type::mf, 1}, {error_type::wl, 1}};
    toy_config b = a;
    b.seed = mix_seed(seed, 2);
    b.drivers = {{error_type::mf, 1}, {error_type::wl, 1}, {error_type::ws, 3}};
    return {a, b};
}

// ---------------------------------------------------------------------------
// Generator, oracle and scorer.

class toy_generator : public steerable_generator {
public:
    toy_generator(const toy_world &w, const std::vector<toy_study> &studies) : world_(w) {
        for (const auto &s : studies) {
            if (s.slot_roles.size() != s.mentions.size())
                throw data_error("study " + s.study_id + " has mismatched slot schedule");
            if (!studies_.emplace(s.study_id, s).second) throw data_error("duplicate study id " + s.study_id);
        }
    }

    std::vector<int> hook_layers() const override { return world_.config.layers; }
    const toy_world &world() const { return world_; }

    const toy_study &study(const std::string &id) const {
        auto it = studies_.find(id);
        if (it == studies_.end()) throw data_error("unknown study " + id);
        return it->second;
    }
    std::vector<std::string> study_ids() const {
        std::vector<std::string> ids;
        for (const auto &[id, _] : studies_) ids.push_back(id);
        return ids;
    }

    // Error-free decode of the study's reference.
    generation reference(const std::string &id) const {
        const auto &st = study(id);
        generation g{id, {}};
        for (const auto &m : st.mentions) {
            g.tokens.push_back(".");
            push_mention(g, m);
        }
        g.tokens.push_back(".");
        for (auto w : toy_phrase) g.tokens.emplace_back(w);
        if (st.comparison) g.tokens.emplace_back(toy_comparison);
        return g;
    }

    generation generate(const std::string &id, const hidden_state_hook &hook) const override {
        const auto &st = study(id);
        const auto &c = world_.config;
        generation g{id, {}};
        auto step = [&](std::size_t slot, std::size_t local, std::string token) {
            auto h = token_state(world_, st, slot, local);
            if (hook)
                for (int layer : c.layers) hook(layer, g.tokens.size(), std::span<float>(h));
            g.tokens.push_back(std::move(token));
            return h;
        };
        auto emit = [&](std::size_t slot, std::size_t &local, const toy_mention &m) {
            step(slot, local++, toy_finding_token(m.finding));
            step(slot, local++, std::string(toy_locations[m.location]));
            step(slot, local++, std::string(toy_severities[m.severity]));
        };
        std::set<std::size_t> used;
        for (const auto &m : st.mentions) used.insert(m.finding);
        auto false_finding = [&]() {
            std::size_t f = 0;
            while (used.count(f)) ++f;
            used.insert(f);
            return f;
        };

        for (std::size_t s = 0; s < st.mentions.size(); ++s) {
            const auto h = step(s, 0, ".");
            auto strength = [&](role_kind kind, error_type t) {
                double best = 0;
                for (auto j : world_.role_atoms(kind, t)) best = std::max(best, world_.readout(j, h));
                return best;
            };
            auto fires = [&](error_type t) {
                return strength(role_kind::driver, t) - strength(role_kind::guard, t) > c.threshold;
            };
            bool incidental = false;
            for (auto j : world_.role_atoms(role_kind::guard))
                incidental = incidental || world_.readout(j, h) > c.incidental_threshold;

            auto m = st.mentions[s];
            if (fires(error_type::wl)) m.location = 1 - m.location;
            if (fires(error_type::ws)) m.severity = (m.severity + 1) % toy_severities.size();
            std::size_t local = 1;
            if (!fires(error_type::mf)) emit(s, local, m);
            const int extra = int(fires(error_type::ff)) + int(incidental);
            for (int e = 0; e < extra; ++e) {
                if (used.size() >= toy_finding_count) break;
                emit(s, local, {false_finding(), st.mentions[s].location, st.mentions[s].severity});
            }
        }
        const std::size_t tail = st.mentions.size();
        const auto h = step(tail, 0, ".");
        const auto rep_atom = world_.repetition_atom();
        const int reps = rep_atom && world_.readout(*rep_atom, h) > c.threshold ? 3 : 1;
        std::size_t local = 1;
        for (int k = 0; k < reps; ++k)
            for (auto w : toy_phrase) step(tail, local++, std::string(w));
        if (st.comparison) step(tail, local++, std::string(toy_comparison));
        return g;
    }

private:
    static void push_mention(generation &g, const toy_mention &m) {
        g.tokens.push_back(toy_finding_token(m.finding));
        g.tokens.emplace_back(toy_locations[m.location]);
        g.tokens.emplace_back(toy_severities[m.severity]);
    }

    const toy_world &world_;
    std::map<std::string, toy_study> studies_;
};

struct parsed_report {
    std::vector<toy_mention> mentions;
    bool comparison = false;
};

inline parsed_report parse_toy_report(const std::vector<std::string> &tokens) {
    auto index_of = [](const auto &vocab, const std::string &t) -> std::optional<std::size_t> {
        for (std::size_t i = 0; i < vocab.size(); ++i)
            if (vocab[i] == t) return i;
        return std::nullopt;
    };
    auto finding_of = [](const std::string &t) -> std::optional<std::size_t> {
        if (t.size() != 3 || t[0] != 'f' || !std::isdigit(static_cast<unsigned char>(t[1])) ||
            !std::isdigit(static_cast<unsigned char>(t[2])))
            return std::nullopt;
        const std::size_t f = std::size_t(t[1] - '0') * 10 + std::size_t(t[2] - '0');
        if (f >= toy_finding_count) return std::nullopt;
        return f;
    };
    parsed_report out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto &t = tokens[i];
        if (t == "." || index_of(toy_phrase, t)) continue;
        if (t == toy_comparison) {
            out.comparison = true;
            continue;
        }
        if (auto f = finding_of(t)) {
            if (i + 2 >= tokens.size()) throw data_error("finding " + t + " lacks location and severity");
            const auto loc = index_of(toy_locations, tokens[i + 1]);
            const auto sev = index_of(toy_severities, tokens[i + 2]);
            if (!loc || !sev) throw data_error("finding " + t + " lacks location and severity");
            out.mentions.push_back({*f, *loc, *sev});
            i += 2;
            continue;
        }
        if (index_of(toy_locations, t) || index_of(toy_severities, t))
            throw data_error("tag '" + t + "' outside a finding");
        throw data_error("unknown token '" + t + "'");
    }
    return out;
}

// Exact rule comparison of decode against reference. A finding reported with
// the wrong location or severity still counts as matched.
inline error_counts toy_count(const std::vector<std::string> &decode, const std::vector<std::string> &reference) {
    const auto dec = parse_toy_report(decode);
    const auto ref = parse_toy_report(reference);
    error_counts c;
    std::vector<bool> used(dec.mentions.size(), false);
    for (const auto &r : ref.mentions) {
        std::optional<std::size_t> hit;
        for (std::size_t i = 0; i < dec.mentions.size() && !hit; ++i)
            if (!used[i] && dec.mentions[i].finding == r.finding) hit = i;
        if (!hit) {
            ++c.mf;
            continue;
        }
        used[*hit] = true;
        ++c.matched;
        if (dec.mentions[*hit].location != r.location) ++c.wl;
        if (dec.mentions[*hit].severity != r.severity) ++c.ws;
    }
    for (bool u : used)
        if (!u) ++c.ff;
    if (dec.comparison && !ref.comparison) ++c.fc;
    if (!dec.comparison && ref.comparison) ++c.mc;
    return c;
}

class toy_oracle : public error_oracle {
public:
    explicit toy_oracle(const toy_generator &gen) : gen_(gen) {}
    error_counts count(const generation &decode) const override {
        return toy_count(decode.tokens, gen_.reference(decode.study_id).tokens);
    }

private:
    const toy_generator &gen_;
};

namespace detail {
template <class T>
double set_f1(const std::multiset<T> &a, const std::multiset<T> &b) {
    if (a.empty() && b.empty()) return 100.0;
    std::vector<T> common;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
    if (common.empty()) return 0.0;
    const double p = double(common.size()) / double(a.size());
    const double r = double(common.size()) / double(b.size());
    return 100.0 * 2 * p * r / (p + r);
}
} // namespace detail

// Stand-ins for the external scorers: GREEN from the toy oracle, triple F1,
// finding F1 and bag-of-token F1, all on 0..100.
class toy_scorer : public report_scorer {
public:
    explicit toy_scorer(const toy_generator &gen) : gen_(gen) {}
    score_vector score(const generation &decode) const override {
        const auto ref = gen_.reference(decode.study_id);
        const auto pd = parse_toy_report(decode.tokens);
        const auto pr = parse_toy_report(ref.tokens);
        std::multiset<std::array<std::size_t, 3>> td, tr;
        std::multiset<std::size_t> fd, fr;
        for (const auto &m : pd.mentions) {
            td.insert({m.finding, m.location, m.severity});
            fd.insert(m.finding);
        }
        for (const auto &m : pr.mentions) {
            tr.insert({m.finding, m.location, m.severity});
            fr.insert(m.finding);
        }
        score_vector s;
        s.green = 100.0 * green_score(toy_count(decode.tokens, ref.tokens));
        s.radgraph = detail::set_f1(td, tr);
        s.chexbert = detail::set_f1(fd, fr);
        s.bertscore = detail::set_f1(std::multiset<std::string>(decode.tokens.begin(), decode.tokens.end()),
                                     std::multiset<std::string>(ref.tokens.begin(), ref.tokens.end()));
        return s;
    }

private:
    const toy_generator &gen_;
};

// ---------------------------------------------------------------------------
// JSON.

inline void to_json(nlohmann::json &j, const role_spec &r) { j = std::string(name(r.type)) + ":" + std::to_string(r.count); }

inline std::string role_string(const std::vector<role_spec> &v) {
    std::string s;
    for (const auto &r : v) {
        if (!s.empty()) s += ',';
        s += std::string(name(r.type)) + ":" + std::to_string(r.count);
    }
    return s;
}

inline void to_json(nlohmann::json &j, const toy_config &c) {
    j = {{"d", c.hidden_dim},
         {"dict", c.atom_count},
         {"k", c.background_k},
         {"noise", c.noise},
         {"drivers", role_string(c.drivers)},
         {"guards", role_string(c.guards)},
         {"repetition", c.repetition},
         {"layers", c.layers},
         {"seed", c.seed},
         {"threshold", c.threshold},
         {"incidental_threshold", c.incidental_threshold},
         {"driver_rate_high", c.driver_rate_high},
         {"driver_rate_low", c.driver_rate_low},
         {"guard_rate", c.guard_rate}};
}

inline void from_json(const nlohmann::json &j, toy_config &c) {
    try {
        c.hidden_dim = j.at("d").get<std::size_t>();
        c.atom_count = j.at("dict").get<std::size_t>();
        c.background_k = j.at("k").get<std::size_t>();
        c.noise = j.at("noise").get<double>();
        c.drivers = parse_role_specs(j.at("drivers").get<std::string>());
        c.guards = parse_role_specs(j.at("guards").get<std::string>());
        c.repetition = j.at("repetition").get<bool>();
        c.layers = j.at("layers").get<std::vector<int>>();
        c.seed = j.at("seed").get<std::uint64_t>();
        c.threshold = j.at("threshold").get<double>();
        c.incidental_threshold = j.at("incidental_threshold").get<double>();
        c.driver_rate_high = j.at("driver_rate_high").get<double>();
        c.driver_rate_low = j.at("driver_rate_low").get<double>();
        c.guard_rate = j.at("guard_rate").get<double>();
    } catch (const nlohmann::json::exception &e) {
        throw data_error(std::string("invalid toy config: ") + e.what());
    } catch (const usage_error &e) {
        throw data_error(std::string("invalid toy config: ") + e.what());
    }
    validate_config(c);
}

inline std::string_view name(role_kind k) {
    return k == role_kind::driver ? "driver" : k == role_kind::guard ? "guard" : "repetition";
}

inline void to_json(nlohmann::json &j, const toy_world &w) {
    j = nlohmann::json::object();
    j["config"] = w.config;
    auto roles = nlohmann::json::array();
    for (const auto &r : w.roles) {
        nlohmann::json o = {{"atom", r.atom}, {"kind", std::string(name(r.kind))}};
        if (r.kind != role_kind::repetition) o["type"] = std::string(name(r.type));
        roles.push_back(o);
    }
    j["roles"] = roles;
    auto atoms = nlohmann::json::array();
    for (std::size_t a = 0; a < w.config.atom_count; ++a) {
        const auto row = w.atom(a);
        atoms.push_back(std::vector<double>(row.begin(), row.end()));
    }
    j["atoms"] = atoms;
}

inline void from_json(const nlohmann::json &j, toy_world &w) {
    if (!j.is_object() || !j.contains("config") || !j.contains("roles") || !j.contains("atoms"))
        throw data_error("world JSON needs config, roles and atoms");
    w.config = j.at("config").get<toy_config>();
    const std::size_t d = w.config.hidden_dim, D0 = w.config.atom_count;
    const auto &atoms = j.at("atoms");
    if (!atoms.is_array() || atoms.size() != D0) throw data_error("world atom count does not match config");
    w.atoms.clear();
    for (const auto &row : atoms) {
        if (!row.is_array() || row.size() != d) throw data_error("world atom has the wrong dimension");
        double n2 = 0;
        for (const auto &v : row) {
            const double x = v.get<double>();
            n2 += x * x;
            w.atoms.push_back(x);
        }
        if (std::abs(n2 - 1.0) > 1e-9) throw data_error("world atom is not unit norm");
    }
    w.roles.clear();
    for (const auto &r : j.at("roles")) {
        planted_role p;
        p.atom = r.at("atom").get<std::size_t>();
        if (p.atom >= D0) throw data_error("role atom outside dictionary");
        const auto kind = r.at("kind").get<std::string>();
        if (kind == "driver") p.kind = role_kind::driver;
        else if (kind == "guard") p.kind = role_kind::guard;
        else if (kind == "repetition") p.kind = role_kind::repetition;
        else throw data_error("unknown role kind '" + kind + "'");
        if (p.kind != role_kind::repetition) p.type = parse_error_type(r.at("type").get<std::string>());
        w.roles.push_back(p);
    }
}

inline void to_json(nlohmann::json &j, const toy_study &s) {
    auto mentions = nlohmann::json::array();
    for (const auto &m : s.mentions) mentions.push_back({m.finding, m.location, m.severity});
    auto slots = nlohmann::json::array();
    for (const auto &roles : s.slot_roles) {
        nlohmann::json o = nlohmann::json::object();
        for (const auto &[a, v] : roles) o[std::to_string(a)] = v;
        slots.push_back(o);
    }
    j = {{"study_id", s.study_id}, {"stratum", s.stratum},       {"mentions", mentions},
         {"slots", slots},         {"repetition", s.repetition}, {"comparison", s.comparison},
         {"seed", s.seed}};
}

inline void from_json(const nlohmann::json &j, toy_study &s) {
    try {
        s.study_id = j.at("study_id").get<std::string>();
        s.stratum = j.at("stratum").get<std::string>();
        s.mentions.clear();
        for (const auto &m : j.at("mentions")) {
            toy_mention t{m.at(0).get<std::size_t>(), m.at(1).get<std::size_t>(), m.at(2).get<std::size_t>()};
            if (t.finding >= toy_finding_count || t.location >= toy_locations.size() ||
                t.severity >= toy_severities.size())
                throw data_error("study " + s.study_id + " has an out-of-vocabulary mention");
            s.mentions.push_back(t);
        }
        s.slot_roles.clear();
        for (const auto &slot : j.at("slots")) {
            std::map<std::size_t, double> roles;
            for (const auto &[k, v] : slot.items()) roles[std::stoul(k)] = v.get<double>();
            s.slot_roles.push_back(std::move(roles));
        }
        s.repetition = j.at("repetition").get<double>();
        s.comparison = j.at("comparison").get<bool>();
        s.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception &e) {
        throw data_error(std::string("invalid study record: ") + e.what());
    }
}

// Manifest grouping studies by stratum.
inline std::map<std::string, std::vector<std::string>> strata_of(const std::vector<toy_study> &studies) {
    std::map<std::string, std::vector<std::string>> g;
    for (const auto &s : studies) g[s.stratum].push_back(s.study_id);
    return g;
}

} // namespace saesteer
