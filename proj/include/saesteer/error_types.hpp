#pragma once
// GREEN-style clinical error taxonomy.

#include "saesteer/common.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <string_view>

namespace saesteer {

// The four types targeted by screening and steering, in canonical order.
enum class error_type : std::uint8_t { ff = 0, mf = 1, wl = 2, ws = 3 };

inline constexpr std::array<error_type, 4> steered_error_types = {error_type::ff, error_type::mf, error_type::wl,
                                                                  error_type::ws};

inline constexpr std::string_view name(error_type t) {
    constexpr std::array<std::string_view, 4> names = {"FF", "MF", "WL", "WS"};
    return names[static_cast<std::size_t>(t)];
}

inline error_type parse_error_type(std::string_view s) {
    for (auto t : steered_error_types)
        if (name(t) == s) return t;
    throw usage_error("unknown error type '" + std::string(s) + "' (expected FF, MF, WL or WS)");
}

inline constexpr std::size_t index(error_type t) { return static_cast<std::size_t>(t); }

struct error_counts {
    std::uint32_t matched = 0; // M
    std::uint32_t ff = 0;      // false finding
    std::uint32_t mf = 0;      // missing finding
    std::uint32_t wl = 0;      // wrong location
    std::uint32_t ws = 0;      // wrong severity
    std::uint32_t fc = 0;      // false comparison
    std::uint32_t mc = 0;      // missing comparison

    std::uint32_t get(error_type t) const {
        switch (t) {
        case error_type::ff: return ff;
        case error_type::mf: return mf;
        case error_type::wl: return wl;
        case error_type::ws: return ws;
        }
        return 0;
    }
    std::uint64_t total_errors() const { return std::uint64_t(ff) + mf + wl + ws + fc + mc; }

    friend bool operator==(const error_counts &, const error_counts &) = default;
};

inline void to_json(nlohmann::json &j, const error_counts &c) {
    j = {{"M", c.matched}, {"FF", c.ff}, {"MF", c.mf}, {"WL", c.wl},
         {"WS", c.ws},     {"FC", c.fc}, {"MC", c.mc}};
}

inline void from_json(const nlohmann::json &j, error_counts &c) {
    auto get = [&](const char *key) -> std::uint32_t {
        if (!j.contains(key)) throw data_error(std::string("error counts missing '") + key + "'");
        const auto &v = j.at(key);
        if (!v.is_number_integer() || v.get<std::int64_t>() < 0)
            throw data_error(std::string("error count '") + key + "' must be a non-negative integer");
        return v.get<std::uint32_t>();
    };
    c.matched = get("M");
    c.ff = get("FF");
    c.mf = get("MF");
    c.wl = get("WL");
    c.ws = get("WS");
    c.fc = get("FC");
    c.mc = get("MC");
}

} // namespace saesteer
