#pragma once
// Contracts between the pipeline and whatever produces reports: a generator
// exposing per-token, per-layer residual hooks, and oracles that score a
// decode against its study's reference.

#include "saesteer/clinical_metrics.hpp"
#include "saesteer/error_types.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace saesteer {

// Called once per generated token at each hooked layer with the post-block
// residual state, which the hook may edit in place.
using hidden_state_hook = std::function<void(int layer, std::size_t token_position, std::span<float> h)>;

struct generation {
    std::string study_id;
    std::vector<std::string> tokens;

    // Detokenized text: tokens joined by single spaces.
    std::string text() const {
        std::string s;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (i) s += ' ';
            s += tokens[i];
        }
        return s;
    }
    // Character offset of each token inside text().
    std::vector<std::size_t> token_offsets() const {
        std::vector<std::size_t> off;
        std::size_t pos = 0;
        for (const auto &t : tokens) {
            off.push_back(pos);
            pos += t.size() + 1;
        }
        return off;
    }

    friend bool operator==(const generation &, const generation &) = default;
};

class steerable_generator {
public:
    virtual ~steerable_generator() = default;
    virtual std::vector<int> hook_layers() const = 0;
    virtual generation generate(const std::string &study_id, const hidden_state_hook &hook) const = 0;
    virtual bool thread_safe() const { return true; }
};

// Maps a decode (and the study's reference, looked up by id) to error counts.
class error_oracle {
public:
    virtual ~error_oracle() = default;
    virtual error_counts count(const generation &decode) const = 0;
    virtual bool thread_safe() const { return true; }
};

// Produces the Composite components for a decode.
class report_scorer {
public:
    virtual ~report_scorer() = default;
    virtual score_vector score(const generation &decode) const = 0;
    virtual bool thread_safe() const { return true; }
};

} // namespace saesteer
