#pragma once
// Recording per-layer hidden states from unsteered decodes into shards.

#include "saesteer/activation_store.hpp"
#include "saesteer/generator.hpp"

#include <map>

namespace saesteer {

// One shard per requested layer. Studies decode independently; rows are
// appended in study order, then token order, whatever the thread count.
inline std::map<int, activation_shard> collect_activations(const steerable_generator &gen,
                                                           const std::vector<std::string> &studies,
                                                           const std::vector<int> &layers, std::size_t max_tokens,
                                                           std::size_t threads = 1) {
    if (layers.empty()) throw usage_error("no layers requested");
    const auto available = gen.hook_layers();
    for (int l : layers)
        if (std::find(available.begin(), available.end(), l) == available.end())
            throw data_error("hook layer " + std::to_string(l) + " is not exposed by the generator");
    struct captured {
        int layer;
        std::uint32_t position;
        std::vector<float> h;
    };
    std::vector<std::vector<captured>> per_study(studies.size());
    parallel_for(studies.size(), gen.thread_safe() ? threads : 1, [&](std::size_t i) {
        auto &out = per_study[i];
        gen.generate(studies[i], [&](int layer, std::size_t pos, std::span<float> h) {
            if (pos >= max_tokens) return;
            if (std::find(layers.begin(), layers.end(), layer) == layers.end()) return;
            out.push_back({layer, static_cast<std::uint32_t>(pos), std::vector<float>(h.begin(), h.end())});
        });
    });
    std::map<int, activation_shard> shards;
    for (std::size_t i = 0; i < studies.size(); ++i)
        for (const auto &c : per_study[i]) {
            auto it = shards.find(c.layer);
            if (it == shards.end())
                it = shards.emplace(c.layer, activation_shard(static_cast<std::uint32_t>(c.layer), c.h.size())).first;
            it->second.append(studies[i], c.position, c.h);
        }
    return shards;
}

} // namespace saesteer
