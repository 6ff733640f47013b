#pragma once
// Per-token residual-stream activations: binary shards, sampling manifests,
// stratified sampling and quality quartiles.
//
// Shard layout (all integers and floats little-endian):
//
//   offset  size            field
//   0       8               magic "SAESHARD"
//   8       4               version (1)
//   12      4               layer index
//   16      4               hidden dim d
//   20      4               reserved (0)
//   24      8               record count n
//   32      4*n*d           float32 vectors, row-major
//   ...     variable        metadata: n x (u32 token_position, u32 id length, id bytes)
//   end-8   8               FNV-1a 64 checksum of every preceding byte
//
// The vector block starts at a fixed offset so the file can be memory-mapped.

#include "saesteer/common.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace saesteer {

inline constexpr std::string_view shard_magic = "SAESHARD";
inline constexpr std::uint32_t shard_version = 1;
inline constexpr std::size_t shard_header_bytes = 32;

struct token_key {
    std::string study_id;
    std::uint32_t token_position = 0;

    friend bool operator==(const token_key &, const token_key &) = default;
    friend auto operator<=>(const token_key &, const token_key &) = default;
};

struct activation_record {
    std::string study_id;
    std::uint32_t token_position = 0;
    std::vector<float> values;
};

// Hidden states of one layer, stored contiguously row-major.
class activation_shard {
public:
    activation_shard() = default;
    activation_shard(std::uint32_t layer, std::size_t dim) : layer_(layer), dim_(dim) {
        if (dim == 0) throw data_error("hidden dim must be positive");
    }

    void append(std::string study_id, std::uint32_t token_position, std::span<const float> v) {
        if (v.size() != dim_)
            throw data_error("dimension mismatch: expected " + std::to_string(dim_) + ", got " +
                             std::to_string(v.size()));
        if (!all_finite(v)) throw data_error("non-finite activation");
        keys_.push_back({std::move(study_id), token_position});
        values_.insert(values_.end(), v.begin(), v.end());
    }

    std::uint32_t layer() const { return layer_; }
    std::size_t dim() const { return dim_; }
    std::size_t size() const { return keys_.size(); }
    bool empty() const { return keys_.empty(); }
    const token_key &key(std::size_t i) const { return keys_[i]; }
    const std::vector<token_key> &keys() const { return keys_; }
    std::span<const float> row(std::size_t i) const {
        return {values_.data() + i * dim_, dim_};
    }
    std::span<const float> values() const { return values_; }

    // Keys unique, and each study's positions form 0..n-1.
    void validate() const {
        std::map<std::string, std::vector<std::uint32_t>> positions;
        for (const auto &k : keys_) positions[k.study_id].push_back(k.token_position);
        for (auto &[study, pos] : positions) {
            std::sort(pos.begin(), pos.end());
            for (std::size_t i = 0; i < pos.size(); ++i) {
                if (i > 0 && pos[i] == pos[i - 1])
                    throw data_error("duplicate token position " + std::to_string(pos[i]) +
                                     " for study " + study);
                if (pos[i] != i)
                    throw data_error("token positions for study " + study +
                                     " are not contiguous from 0");
            }
        }
    }

    friend bool operator==(const activation_shard &, const activation_shard &) = default;

private:
    std::uint32_t layer_ = 0;
    std::size_t dim_ = 0;
    std::vector<token_key> keys_;
    std::vector<float> values_;
};

inline activation_shard make_shard(std::uint32_t layer, const std::vector<activation_record> &records) {
    if (records.empty()) throw data_error("empty shard");
    activation_shard shard(layer, records.front().values.size());
    for (const auto &r : records) shard.append(r.study_id, r.token_position, r.values);
    shard.validate();
    return shard;
}

struct shard_descriptor {
    std::string path;
    std::uint32_t layer = 0;
    std::uint32_t dim = 0;
    std::uint64_t count = 0;
    std::uint64_t checksum = 0;
};

inline std::vector<unsigned char> encode_shard(const activation_shard &shard) {
    if (shard.empty()) throw data_error("empty shard");
    shard.validate();
    std::vector<unsigned char> out;
    out.reserve(shard_header_bytes + shard.values().size() * 4 + shard.size() * 24 + 8);
    io::put_bytes(out, shard_magic);
    io::put_u32(out, shard_version);
    io::put_u32(out, shard.layer());
    io::put_u32(out, static_cast<std::uint32_t>(shard.dim()));
    io::put_u32(out, 0);
    io::put_u64(out, shard.size());
    for (float v : shard.values()) io::put_f32(out, v);
    for (const auto &k : shard.keys()) {
        io::put_u32(out, k.token_position);
        io::put_u32(out, static_cast<std::uint32_t>(k.study_id.size()));
        io::put_bytes(out, k.study_id);
    }
    io::put_u64(out, fnv1a64(out));
    return out;
}

inline activation_shard decode_shard(std::span<const unsigned char> bytes) {
    if (bytes.size() < shard_header_bytes + 8) throw data_error("truncated shard");
    const std::uint64_t stored = [&] {
        io::reader tail(bytes.subspan(bytes.size() - 8));
        return tail.u64();
    }();
    if (stored != fnv1a64(bytes.first(bytes.size() - 8))) throw data_error("shard checksum mismatch");

    io::reader in(bytes.first(bytes.size() - 8));
    if (in.bytes(8) != shard_magic) throw data_error("not a shard file (bad magic)");
    if (const auto v = in.u32(); v != shard_version)
        throw data_error("unsupported shard version " + std::to_string(v));
    const std::uint32_t layer = in.u32();
    const std::uint32_t dim = in.u32();
    in.u32();
    const std::uint64_t count = in.u64();
    if (dim == 0 || count == 0) throw data_error("empty shard");
    if (in.remaining() / 4 / dim < count) throw data_error("truncated shard");

    std::vector<float> values(count * dim);
    for (auto &v : values) v = in.f32();
    activation_shard shard(layer, dim);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t pos = in.u32();
        const std::uint32_t len = in.u32();
        shard.append(in.bytes(len), pos, std::span<const float>(values.data() + i * dim, dim));
    }
    if (in.remaining() != 0) throw data_error("trailing bytes in shard");
    shard.validate();
    return shard;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path &path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path &path, std::span<const unsigned char> bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot write " + path.string());
    f.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw data_error("I/O failure writing " + path.string());
}

inline shard_descriptor write_shard(const activation_shard &shard, const std::filesystem::path &path) {
    const auto bytes = encode_shard(shard);
    write_file_bytes(path, bytes);
    io::reader tail(std::span<const unsigned char>(bytes).subspan(bytes.size() - 8));
    return {path.string(), shard.layer(), static_cast<std::uint32_t>(shard.dim()), shard.size(),
            tail.u64()};
}

inline shard_descriptor write_shard(const std::vector<activation_record> &records, std::uint32_t layer,
                                    const std::filesystem::path &path) {
    return write_shard(make_shard(layer, records), path);
}

inline activation_shard read_shard(const std::filesystem::path &path) {
    return decode_shard(read_file_bytes(path));
}

// Byte offset of a row's vector inside its shard file.
inline std::uint64_t row_byte_offset(const activation_shard &shard, std::size_t row) {
    return shard_header_bytes + static_cast<std::uint64_t>(row) * shard.dim() * 4;
}

// ---------------------------------------------------------------------------
// Sampling manifest.

struct sample_manifest {
    struct shard_entry {
        std::string path;
        std::uint32_t layer = 0;
        std::uint64_t count = 0;
        std::uint64_t checksum = 0;
    };
    struct location {
        std::string shard;
        std::uint64_t byte_offset = 0;
    };
    struct study_entry {
        std::string group;
        std::map<std::uint32_t, location> layers;
    };

    std::vector<std::string> groups;
    std::vector<shard_entry> shards;
    std::map<std::string, study_entry> studies;
    std::uint64_t seed = 0;

    void validate() const {
        const std::set<std::string> declared(groups.begin(), groups.end());
        std::map<std::string, std::uint32_t> shard_layer;
        for (const auto &s : shards) {
            if (!shard_layer.emplace(s.path, s.layer).second)
                throw data_error("shard listed twice: " + s.path);
        }
        for (const auto &[id, entry] : studies) {
            if (!declared.count(entry.group))
                throw data_error("unknown group label '" + entry.group + "' for study " + id);
            for (const auto &[layer, loc] : entry.layers) {
                auto it = shard_layer.find(loc.shard);
                if (it == shard_layer.end())
                    throw data_error("study " + id + " references unlisted shard " + loc.shard);
                if (it->second != layer)
                    throw data_error("study " + id + " listed under layer " + std::to_string(layer) +
                                     " in a layer-" + std::to_string(it->second) + " shard");
            }
        }
    }

    std::vector<std::string> study_ids() const {
        std::vector<std::string> ids;
        for (const auto &[id, _] : studies) ids.push_back(id);
        return ids;
    }
};

inline void to_json(nlohmann::json &j, const sample_manifest &m) {
    j = nlohmann::json::object();
    j["seed"] = m.seed;
    j["groups"] = m.groups;
    j["shards"] = nlohmann::json::array();
    for (const auto &s : m.shards)
        j["shards"].push_back(
            {{"path", s.path}, {"layer", s.layer}, {"count", s.count}, {"checksum", s.checksum}});
    j["studies"] = nlohmann::json::object();
    for (const auto &[id, e] : m.studies) {
        nlohmann::json layers = nlohmann::json::object();
        for (const auto &[layer, loc] : e.layers)
            layers[std::to_string(layer)] = {{"shard", loc.shard}, {"offset", loc.byte_offset}};
        j["studies"][id] = {{"group", e.group}, {"layers", layers}};
    }
}

inline void from_json(const nlohmann::json &j, sample_manifest &m) {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.groups = j.at("groups").get<std::vector<std::string>>();
    m.shards.clear();
    for (const auto &s : j.at("shards"))
        m.shards.push_back({s.at("path").get<std::string>(), s.at("layer").get<std::uint32_t>(),
                            s.at("count").get<std::uint64_t>(), s.at("checksum").get<std::uint64_t>()});
    m.studies.clear();
    for (const auto &[id, e] : j.at("studies").items()) {
        sample_manifest::study_entry entry;
        entry.group = e.at("group").get<std::string>();
        if (e.contains("layers"))
            for (const auto &[layer, loc] : e.at("layers").items())
                entry.layers[static_cast<std::uint32_t>(std::stoul(layer))] = {
                    loc.at("shard").get<std::string>(), loc.at("offset").get<std::uint64_t>()};
        m.studies[id] = std::move(entry);
    }
    m.validate();
}

inline std::vector<std::string> overlapping_studies(const std::vector<std::string> &a,
                                                    const std::vector<std::string> &b) {
    std::set<std::string> sa(a.begin(), a.end());
    std::set<std::string> out;
    for (const auto &id : b)
        if (sa.count(id)) out.insert(id);
    return {out.begin(), out.end()};
}

// ---------------------------------------------------------------------------
// Stratified sampling.

struct stratified_sample_result {
    std::vector<std::string> study_ids;
    std::map<std::string, std::size_t> per_group;
    std::vector<std::string> warnings;
};

namespace detail {

// Largest-remainder apportionment of `slots` by weight. Remainder ties go to
// the larger weight, then the lower position.
inline std::vector<std::size_t> largest_remainder(std::size_t slots, const std::vector<std::size_t> &weights) {
    std::vector<std::size_t> out(weights.size(), 0);
    std::size_t total = 0;
    for (auto w : weights) total += w;
    if (total == 0 || slots == 0) return out;
    std::vector<std::pair<std::size_t, std::size_t>> rema; // (remainder numerator, index)
    std::size_t given = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const std::size_t num = slots * weights[i];
        out[i] = num / total;
        given += out[i];
        rema.push_back({num % total, i});
    }
    std::sort(rema.begin(), rema.end(), [&](const auto &a, const auto &b) {
        if (a.first != b.first) return a.first > b.first;
        if (weights[a.second] != weights[b.second]) return weights[a.second] > weights[b.second];
        return a.second < b.second;
    });
    for (std::size_t r = 0; given < slots; ++r, ++given) ++out[rema[r % rema.size()].second];
    return out;
}

} // namespace detail

// Per-group quotas: proportional to group size, each group raised to
// min(min_per_group, size) and capped at its size; undersized groups warn.
inline std::map<std::string, std::size_t>
stratified_quotas(const std::map<std::string, std::size_t> &group_sizes, std::size_t n, std::size_t min_per_group,
                  std::vector<std::string> *warnings = nullptr) {
    std::size_t total = 0;
    for (const auto &[g, s] : group_sizes) total += s;
    if (n == 0) throw usage_error("sample size must be positive");
    if (n > total)
        throw data_error("infeasible quota: n=" + std::to_string(n) + " exceeds " + std::to_string(total) +
                         " studies");
    if (min_per_group * group_sizes.size() > n)
        throw data_error("infeasible quota: min_per_group x groups exceeds n");

    std::vector<std::string> names;
    std::vector<std::size_t> sizes;
    for (const auto &[g, s] : group_sizes) {
        names.push_back(g);
        sizes.push_back(s);
        if (s < min_per_group && warnings)
            warnings->push_back("group '" + g + "' has " + std::to_string(s) + " studies, fewer than min_per_group=" +
                                std::to_string(min_per_group));
    }
    const std::size_t G = names.size();
    std::vector<std::optional<std::size_t>> fixed(G);
    std::vector<std::size_t> alloc(G, 0);
    for (;;) {
        std::size_t used = 0;
        std::vector<std::size_t> free_idx, free_w;
        for (std::size_t i = 0; i < G; ++i) {
            if (fixed[i]) {
                used += *fixed[i];
            } else {
                free_idx.push_back(i);
                free_w.push_back(sizes[i]);
            }
        }
        const std::size_t slots = n > used ? n - used : 0;
        const auto share = detail::largest_remainder(slots, free_w);
        for (std::size_t f = 0; f < free_idx.size(); ++f) alloc[free_idx[f]] = share[f];
        for (std::size_t i = 0; i < G; ++i)
            if (fixed[i]) alloc[i] = *fixed[i];

        bool changed = false;
        for (auto i : free_idx) {
            const std::size_t floor = std::min(min_per_group, sizes[i]);
            if (alloc[i] < floor) {
                fixed[i] = floor;
                changed = true;
            }
        }
        if (!changed) {
            for (auto i : free_idx) {
                if (alloc[i] > sizes[i]) {
                    fixed[i] = sizes[i];
                    changed = true;
                }
            }
        }
        if (!changed) break;
    }
    // Slots left over when every group was pinned go to groups with spare capacity.
    std::size_t assigned = 0;
    for (auto a : alloc) assigned += a;
    for (std::size_t i = 0; assigned < n && i < G; ++i) {
        const std::size_t take = std::min(sizes[i] - alloc[i], n - assigned);
        alloc[i] += take;
        assigned += take;
    }
    std::map<std::string, std::size_t> out;
    for (std::size_t i = 0; i < G; ++i) out[names[i]] = alloc[i];
    return out;
}

inline stratified_sample_result stratified_sample(const sample_manifest &manifest, std::size_t n,
                                                  std::size_t min_per_group) {
    manifest.validate();
    std::map<std::string, std::vector<std::string>> members;
    for (const auto &g : manifest.groups) members[g];
    for (const auto &[id, e] : manifest.studies) members[e.group].push_back(id);
    std::map<std::string, std::size_t> sizes;
    for (const auto &[g, ids] : members) sizes[g] = ids.size();

    stratified_sample_result result;
    const auto quotas = stratified_quotas(sizes, n, min_per_group, &result.warnings);
    for (auto &[group, ids] : members) {
        rng r(mix_seed(manifest.seed, fnv1a64(group)));
        r.shuffle(ids);
        const std::size_t q = quotas.at(group);
        result.per_group[group] = q;
        result.study_ids.insert(result.study_ids.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(q));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Quartiles.

enum class sort_direction { ascending, descending };

// Stable rank order (score, then study_id), cut at ceil(N/4), ceil(N/2), ceil(3N/4).
inline std::array<std::vector<std::string>, 4> quartile_split(const std::map<std::string, double> &scores,
                                                              sort_direction direction) {
    const std::size_t N = scores.size();
    if (N < 4) throw data_error("quartile split needs at least 4 studies, got " + std::to_string(N));
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto &[id, s] : scores) {
        if (!std::isfinite(s)) throw data_error("non-finite score for study " + id);
        ranked.push_back({s, id});
    }
    std::stable_sort(ranked.begin(), ranked.end(), [&](const auto &a, const auto &b) {
        if (a.first != b.first)
            return direction == sort_direction::ascending ? a.first < b.first : a.first > b.first;
        return a.second < b.second;
    });
    const std::size_t cuts[5] = {0, (N + 3) / 4, (N + 1) / 2, (3 * N + 3) / 4, N};
    std::array<std::vector<std::string>, 4> out;
    for (std::size_t q = 0; q < 4; ++q)
        for (std::size_t i = cuts[q]; i < cuts[q + 1]; ++i) out[q].push_back(ranked[i].second);
    return out;
}

} // namespace saesteer
