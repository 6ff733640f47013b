#pragma once
// Edits in the SAE basis and the two ways of writing them back into a
// hidden state: residual update and blend patch.

#include "saesteer/topk_sae.hpp"

#include <set>

namespace saesteer {

enum class steering_mode { residual, blend };

inline std::string_view name(steering_mode m) { return m == steering_mode::residual ? "residual" : "blend"; }

inline steering_mode parse_steering_mode(std::string_view s) {
    if (s == "residual") return steering_mode::residual;
    if (s == "blend") return steering_mode::blend;
    throw usage_error("unknown steering mode '" + std::string(s) + "' (expected residual or blend)");
}

struct layer_edits {
    std::vector<std::size_t> suppress;
    std::vector<std::size_t> boost;

    bool empty() const { return suppress.empty() && boost.empty(); }
    friend bool operator==(const layer_edits &, const layer_edits &) = default;
};

template <class T>
struct basic_steered_state {
    std::vector<T> original;
    std::vector<T> edited_code;
    std::vector<T> delta;
    std::vector<T> output;
};

using steered_state = basic_steered_state<float>;

inline void check_indices(const layer_edits &e, std::size_t dict_size) {
    for (const auto *set : {&e.suppress, &e.boost})
        for (auto j : *set)
            if (j >= dict_size)
                throw data_error("feature index " + std::to_string(j) + " out of range for dictionary of size " +
                                 std::to_string(dict_size));
}

// z'_j = 0 for suppressed, (1 + beta) z_j for boosted, z_j otherwise.
// Suppression wins when an index appears in both sets.
template <class T>
std::vector<T> edit_code(std::span<const T> z, const layer_edits &edits, double beta) {
    check_indices(edits, z.size());
    std::vector<T> out(z.begin(), z.end());
    const std::set<std::size_t> suppressed(edits.suppress.begin(), edits.suppress.end());
    for (auto j : edits.boost)
        if (!suppressed.count(j)) out[j] = static_cast<T>((1.0 + beta) * double(z[j]));
    for (auto j : edits.suppress) out[j] = T(0);
    return out;
}

// h' = h + alpha * (decode(z') - decode(z)).
//
// decode is affine, so the difference is sum_j (z'_j - z_j) w_dec[j]; the
// bias and all unedited atoms cancel exactly and coordinates with a zero
// delta are copied from h untouched.
template <class T, class U>
basic_steered_state<T> residual_update(const basic_sae_model<T> &m, std::span<const U> h, const layer_edits &edits,
                                       double alpha, double beta) {
    check_dim(m, h.size(), m.hidden_dim, "residual update");
    basic_steered_state<T> s;
    s.original.assign(h.begin(), h.end());
    const auto z = encode(m, h, true);
    s.edited_code = edit_code(std::span<const T>(z), edits, beta);
    s.delta.assign(m.hidden_dim, T(0));
    for (std::size_t j = 0; j < m.dict_size; ++j) {
        const T dz = s.edited_code[j] - z[j];
        if (dz == T(0)) continue;
        const auto row = m.decoder_row(j);
        for (std::size_t i = 0; i < m.hidden_dim; ++i) s.delta[i] += dz * row[i];
    }
    s.output = s.original;
    if (alpha != 0.0)
        for (std::size_t i = 0; i < m.hidden_dim; ++i)
            if (s.delta[i] != T(0)) s.output[i] = static_cast<T>(s.original[i] + alpha * s.delta[i]);
    return s;
}

// h' = (1 - alpha) h + alpha * decode(z').
template <class T, class U>
basic_steered_state<T> blend_update(const basic_sae_model<T> &m, std::span<const U> h, const layer_edits &edits,
                                    double alpha, double beta) {
    check_dim(m, h.size(), m.hidden_dim, "blend update");
    basic_steered_state<T> s;
    s.original.assign(h.begin(), h.end());
    const auto z = encode(m, h, true);
    s.edited_code = edit_code(std::span<const T>(z), edits, beta);
    const auto rec = decode(m, std::span<const T>(s.edited_code));
    s.delta.resize(m.hidden_dim);
    s.output = s.original;
    for (std::size_t i = 0; i < m.hidden_dim; ++i) s.delta[i] = rec[i] - s.original[i];
    if (alpha != 0.0)
        for (std::size_t i = 0; i < m.hidden_dim; ++i)
            s.output[i] = static_cast<T>((1.0 - alpha) * s.original[i] + alpha * rec[i]);
    return s;
}

template <class T, class U>
basic_steered_state<T> apply_update(const basic_sae_model<T> &m, std::span<const U> h, const layer_edits &edits,
                                    double alpha, double beta, steering_mode mode) {
    return mode == steering_mode::residual ? residual_update(m, h, edits, alpha, beta)
                                           : blend_update(m, h, edits, alpha, beta);
}

} // namespace saesteer
