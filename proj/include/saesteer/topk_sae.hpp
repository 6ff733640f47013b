#pragma once
// Top-K sparse autoencoder: encode/decode, masked-MSE gradients, Adam
// training with unit-norm decoder rows, quality diagnostics and checkpoints.
//
// Parameter layout (row-major):
//   w_enc  d x D    column j is feature j's encoder direction
//   b_enc  D
//   w_dec  D x d    row j is feature j's decoder atom
//   b_dec  d

#include "saesteer/activation_store.hpp"
#include "saesteer/common.hpp"

#include <json.hpp>

#include <functional>
#include <numeric>

namespace saesteer {

template <class T>
struct basic_sae_model {
    std::size_t hidden_dim = 0;
    std::size_t dict_size = 0;
    std::size_t k = 0;
    std::vector<T> w_enc;
    std::vector<T> b_enc;
    std::vector<T> w_dec;
    std::vector<T> b_dec;

    static basic_sae_model zeros(std::size_t d, std::size_t D, std::size_t K) {
        if (d == 0 || D == 0 || K == 0) throw data_error("SAE sizes must be positive");
        if (K > D) throw data_error("sparsity K must not exceed dictionary size D");
        basic_sae_model m;
        m.hidden_dim = d;
        m.dict_size = D;
        m.k = K;
        m.w_enc.assign(d * D, T(0));
        m.b_enc.assign(D, T(0));
        m.w_dec.assign(D * d, T(0));
        m.b_dec.assign(d, T(0));
        return m;
    }

    std::span<const T> decoder_row(std::size_t j) const { return {w_dec.data() + j * hidden_dim, hidden_dim}; }
    std::span<T> decoder_row(std::size_t j) { return {w_dec.data() + j * hidden_dim, hidden_dim}; }
    T &encoder(std::size_t i, std::size_t j) { return w_enc[i * dict_size + j]; }
    T encoder(std::size_t i, std::size_t j) const { return w_enc[i * dict_size + j]; }

    void normalize_decoder_rows() {
        for (std::size_t j = 0; j < dict_size; ++j) {
            auto row = decoder_row(j);
            double n2 = 0;
            for (T v : row) n2 += double(v) * double(v);
            if (n2 <= 0) continue;
            const double inv = 1.0 / std::sqrt(n2);
            for (T &v : row) v = static_cast<T>(double(v) * inv);
        }
    }

    void validate() const {
        if (hidden_dim == 0 || dict_size == 0 || k == 0 || k > dict_size)
            throw data_error("invalid SAE sizes");
        if (w_enc.size() != hidden_dim * dict_size || b_enc.size() != dict_size ||
            w_dec.size() != dict_size * hidden_dim || b_dec.size() != hidden_dim)
            throw data_error("SAE parameter blocks do not match declared sizes");
    }

    template <class U>
    basic_sae_model<U> cast() const {
        basic_sae_model<U> m;
        m.hidden_dim = hidden_dim;
        m.dict_size = dict_size;
        m.k = k;
        m.w_enc.assign(w_enc.begin(), w_enc.end());
        m.b_enc.assign(b_enc.begin(), b_enc.end());
        m.w_dec.assign(w_dec.begin(), w_dec.end());
        m.b_dec.assign(b_dec.begin(), b_dec.end());
        return m;
    }

    friend bool operator==(const basic_sae_model &, const basic_sae_model &) = default;
};

using sae_model = basic_sae_model<float>;

template <class T>
using row_list = std::vector<std::span<const T>>;

inline row_list<float> rows_of(std::span<const activation_shard> shards) {
    row_list<float> rows;
    for (const auto &s : shards)
        for (std::size_t i = 0; i < s.size(); ++i) rows.push_back(s.row(i));
    return rows;
}

// ---------------------------------------------------------------------------
// Forward pass.

template <class T>
void check_dim([[maybe_unused]] const basic_sae_model<T> &m, std::size_t got, std::size_t want, const char *what) {
    if (got != want)
        throw data_error(std::string("dimension mismatch in ") + what + ": expected " + std::to_string(want) +
                         ", got " + std::to_string(got));
}

// z_j = (h - b_dec) . w_enc[:, j] + b_enc[j]
template <class T, class U>
std::vector<T> pre_activations(const basic_sae_model<T> &m, std::span<const U> h) {
    check_dim(m, h.size(), m.hidden_dim, "encode");
    std::vector<T> z(m.b_enc.begin(), m.b_enc.end());
    const std::size_t D = m.dict_size;
    for (std::size_t i = 0; i < m.hidden_dim; ++i) {
        const T c = static_cast<T>(h[i]) - m.b_dec[i];
        if (c == T(0)) continue;
        const T *w = m.w_enc.data() + i * D;
        for (std::size_t j = 0; j < D; ++j) z[j] += c * w[j];
    }
    return z;
}

// Keeps the K largest entries (lowest index wins ties), zeroes the rest, then
// clamps surviving negatives to zero.
template <class T>
void apply_topk(std::span<T> z, std::size_t k) {
    if (k >= z.size()) {
        for (T &v : z) v = std::max(v, T(0));
        return;
    }
    std::vector<std::uint32_t> idx(z.size());
    std::iota(idx.begin(), idx.end(), 0u);
    auto before = [&](std::uint32_t a, std::uint32_t b) { return z[a] > z[b] || (z[a] == z[b] && a < b); };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
    for (std::size_t r = k; r < idx.size(); ++r) z[idx[r]] = T(0);
    for (T &v : z) v = std::max(v, T(0));
}

template <class T, class U>
std::vector<T> encode(const basic_sae_model<T> &m, std::span<const U> h, bool apply_topk_mask = true) {
    auto z = pre_activations(m, h);
    if (apply_topk_mask) apply_topk(std::span<T>(z), m.k);
    return z;
}

// h_hat = z^T w_dec + b_dec
template <class T, class U>
std::vector<T> decode(const basic_sae_model<T> &m, std::span<const U> z) {
    check_dim(m, z.size(), m.dict_size, "decode");
    std::vector<T> out(m.b_dec.begin(), m.b_dec.end());
    for (std::size_t j = 0; j < m.dict_size; ++j) {
        const T zj = static_cast<T>(z[j]);
        if (zj == T(0)) continue;
        const T *row = m.w_dec.data() + j * m.hidden_dim;
        for (std::size_t i = 0; i < m.hidden_dim; ++i) out[i] += zj * row[i];
    }
    return out;
}

template <class T, class U>
std::vector<T> reconstruct(const basic_sae_model<T> &m, std::span<const U> h) {
    const auto z = encode(m, h, true);
    return decode(m, std::span<const T>(z));
}

// ---------------------------------------------------------------------------
// Loss and gradient of mean squared reconstruction error,
//   L = 1/(B d) * sum_b ||h_hat_b - h_b||^2,
// with gradients flowing only through the surviving Top-K coordinates.

template <class T>
struct sae_gradient {
    std::vector<T> w_enc, b_enc, w_dec, b_dec;

    explicit sae_gradient(const basic_sae_model<T> &m)
        : w_enc(m.w_enc.size()), b_enc(m.b_enc.size()), w_dec(m.w_dec.size()), b_dec(m.b_dec.size()) {}

    void zero() {
        for (auto *v : {&w_enc, &b_enc, &w_dec, &b_dec}) std::fill(v->begin(), v->end(), T(0));
    }
    void add(const sae_gradient &o) {
        auto acc = [](std::vector<T> &a, const std::vector<T> &b) {
            for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
        };
        acc(w_enc, o.w_enc);
        acc(b_enc, o.b_enc);
        acc(w_dec, o.w_dec);
        acc(b_dec, o.b_dec);
    }
};

namespace detail {

// Accumulates scale * dSE/dtheta for rows[first, last) into grad and returns
// the summed squared error.
template <class T>
double accumulate_gradient(const basic_sae_model<T> &m, const row_list<T> &rows, const std::size_t *order,
                           std::size_t first, std::size_t last, T scale, sae_gradient<T> &grad) {
    const std::size_t d = m.hidden_dim;
    const std::size_t D = m.dict_size;
    std::vector<T> centered(d), residual(d);
    double se = 0;
    for (std::size_t r = first; r < last; ++r) {
        const auto h = rows[order ? order[r] : r];
        check_dim(m, h.size(), d, "training row");
        for (std::size_t i = 0; i < d; ++i) centered[i] = h[i] - m.b_dec[i];
        auto z = encode(m, h, true);

        for (std::size_t i = 0; i < d; ++i) residual[i] = m.b_dec[i] - h[i];
        for (std::size_t j = 0; j < D; ++j) {
            if (z[j] == T(0)) continue;
            const T *row = m.w_dec.data() + j * d;
            for (std::size_t i = 0; i < d; ++i) residual[i] += z[j] * row[i];
        }
        for (std::size_t i = 0; i < d; ++i) {
            se += double(residual[i]) * double(residual[i]);
            residual[i] *= scale; // now dL/dh_hat
            grad.b_dec[i] += residual[i];
        }
        for (std::size_t j = 0; j < D; ++j) {
            if (z[j] <= T(0)) continue;
            T *gdec = grad.w_dec.data() + j * d;
            const T *row = m.w_dec.data() + j * d;
            T dz = 0;
            for (std::size_t i = 0; i < d; ++i) {
                gdec[i] += z[j] * residual[i];
                dz += residual[i] * row[i];
            }
            grad.b_enc[j] += dz;
            for (std::size_t i = 0; i < d; ++i) {
                grad.w_enc[i * D + j] += dz * centered[i];
                grad.b_dec[i] -= dz * m.w_enc[i * D + j];
            }
        }
    }
    return se;
}

} // namespace detail

template <class T>
T masked_mse_loss(const basic_sae_model<T> &m, const row_list<T> &rows) {
    if (rows.empty()) throw data_error("empty activation stream");
    double se = 0;
    for (const auto &h : rows) {
        const auto rec = reconstruct(m, h);
        for (std::size_t i = 0; i < m.hidden_dim; ++i) {
            const double e = double(rec[i]) - double(h[i]);
            se += e * e;
        }
    }
    return static_cast<T>(se / (double(rows.size()) * double(m.hidden_dim)));
}

template <class T>
std::pair<T, sae_gradient<T>> masked_mse_gradient(const basic_sae_model<T> &m, const row_list<T> &rows) {
    if (rows.empty()) throw data_error("empty activation stream");
    sae_gradient<T> g(m);
    const T norm = T(1) / (T(rows.size()) * T(m.hidden_dim));
    const double se = detail::accumulate_gradient(m, rows, nullptr, 0, rows.size(), T(2) * norm, g);
    return {static_cast<T>(se * double(norm)), std::move(g)};
}

// ---------------------------------------------------------------------------
// Diagnostics.

struct sae_quality_report {
    double mean_cosine = 0;
    double dead_fraction = 0;
    double mean_activation_norm = 0;
    std::size_t tokens = 0;
    std::vector<std::uint64_t> activation_counts;
};

inline void to_json(nlohmann::json &j, const sae_quality_report &r) {
    j = {{"mean_cosine", r.mean_cosine},
         {"dead_fraction", r.dead_fraction},
         {"mean_activation_norm", r.mean_activation_norm},
         {"tokens", r.tokens},
         {"activation_counts", r.activation_counts}};
}

template <class T>
sae_quality_report quality_report(const basic_sae_model<T> &m, const row_list<T> &rows) {
    if (rows.empty()) throw data_error("empty activation stream");
    sae_quality_report rep;
    rep.tokens = rows.size();
    rep.activation_counts.assign(m.dict_size, 0);
    double cos_sum = 0, norm_sum = 0;
    for (const auto &h : rows) {
        const auto z = encode(m, h, true);
        for (std::size_t j = 0; j < m.dict_size; ++j)
            if (z[j] > T(0)) ++rep.activation_counts[j];
        const auto rec = decode(m, std::span<const T>(z));
        double dot = 0, nh = 0, nr = 0;
        for (std::size_t i = 0; i < m.hidden_dim; ++i) {
            dot += double(h[i]) * double(rec[i]);
            nh += double(h[i]) * double(h[i]);
            nr += double(rec[i]) * double(rec[i]);
        }
        if (nh == 0 && nr == 0)
            cos_sum += 1.0;
        else if (nh > 0 && nr > 0)
            cos_sum += dot / std::sqrt(nh * nr);
        norm_sum += std::sqrt(nh);
    }
    rep.mean_cosine = cos_sum / double(rows.size());
    rep.mean_activation_norm = norm_sum / double(rows.size());
    const auto dead = std::count(rep.activation_counts.begin(), rep.activation_counts.end(), 0u);
    rep.dead_fraction = double(dead) / double(m.dict_size);
    return rep;
}

// ---------------------------------------------------------------------------
// Training.

struct train_config {
    std::size_t dict_size = 512;
    std::size_t k = 8;
    double learning_rate = 1e-3;
    std::size_t batch_size = 256;
    std::size_t epochs = 10;
    std::uint64_t seed = 0;
    double holdout_fraction = 0.05;
    std::size_t threads = 1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

inline void to_json(nlohmann::json &j, const train_config &c) {
    j = {{"dict_size", c.dict_size}, {"k", c.k},         {"learning_rate", c.learning_rate},
         {"batch_size", c.batch_size}, {"epochs", c.epochs}, {"seed", c.seed},
         {"holdout_fraction", c.holdout_fraction}};
}

template <class T>
struct training_result {
    basic_sae_model<T> model;
    sae_quality_report report;
    std::vector<double> epoch_loss;
    std::size_t steps = 0;
};

template <class T>
using step_callback = std::function<void(std::size_t step, double loss, const basic_sae_model<T> &)>;

namespace detail {

template <class T>
struct adam_state {
    std::vector<double> m, v;
    explicit adam_state(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

    void step(std::vector<T> &param, const std::vector<T> &grad, const train_config &c, std::size_t t) {
        const double bc1 = 1.0 - std::pow(c.beta1, double(t));
        const double bc2 = 1.0 - std::pow(c.beta2, double(t));
        for (std::size_t i = 0; i < param.size(); ++i) {
            const double g = grad[i];
            m[i] = c.beta1 * m[i] + (1 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1 - c.beta2) * g * g;
            const double mh = m[i] / bc1;
            const double vh = v[i] / bc2;
            param[i] = static_cast<T>(double(param[i]) - c.learning_rate * mh / (std::sqrt(vh) + c.epsilon));
        }
    }
};

// Rows per gradient chunk. Chunks are reduced in index order, so the result
// does not depend on the worker count.
inline constexpr std::size_t gradient_chunk = 32;

} // namespace detail

template <class T>
training_result<T> train(const row_list<T> &rows, const train_config &config, const step_callback<T> &on_step = {}) {
    if (rows.empty()) throw data_error("empty activation stream");
    if (config.k == 0 || config.dict_size == 0) throw usage_error("dict size and K must be positive");
    if (config.k > config.dict_size) throw usage_error("K must not exceed dictionary size");
    if (config.batch_size == 0 || config.epochs == 0) throw usage_error("batch size and epochs must be positive");
    const std::size_t d = rows.front().size();
    for (const auto &r : rows) {
        if (r.size() != d) throw data_error("dimension mismatch in training rows");
        if (!all_finite(r)) throw data_error("non-finite activation");
    }

    rng r(config.seed);
    std::vector<std::size_t> order(rows.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    r.shuffle(order);
    std::size_t holdout = static_cast<std::size_t>(std::floor(config.holdout_fraction * double(rows.size())));
    if (rows.size() < 2) holdout = 0;
    holdout = std::min(holdout, rows.size() - 1);
    std::vector<std::size_t> train_idx(order.begin(), order.end() - static_cast<std::ptrdiff_t>(holdout));
    row_list<T> held;
    for (std::size_t i = rows.size() - holdout; i < rows.size(); ++i) held.push_back(rows[order[i]]);
    if (held.empty()) held = rows;

    auto model = basic_sae_model<T>::zeros(d, config.dict_size, config.k);
    std::vector<double> mean(d, 0.0);
    for (auto i : train_idx)
        for (std::size_t c = 0; c < d; ++c) mean[c] += rows[i][c];
    for (std::size_t c = 0; c < d; ++c) model.b_dec[c] = static_cast<T>(mean[c] / double(train_idx.size()));
    for (auto &w : model.w_dec) w = static_cast<T>(r.normal());
    model.normalize_decoder_rows();
    for (std::size_t j = 0; j < model.dict_size; ++j)
        for (std::size_t i = 0; i < d; ++i) model.encoder(i, j) = model.w_dec[j * d + i];

    detail::adam_state<T> a_wenc(model.w_enc.size()), a_benc(model.b_enc.size()), a_wdec(model.w_dec.size()),
        a_bdec(model.b_dec.size());

    training_result<T> result;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        r.shuffle(train_idx);
        double epoch_se = 0;
        for (std::size_t start = 0; start < train_idx.size(); start += config.batch_size) {
            const std::size_t stop = std::min(train_idx.size(), start + config.batch_size);
            const std::size_t B = stop - start;
            const T scale = T(2) / (T(B) * T(d));
            const std::size_t chunks = (B + detail::gradient_chunk - 1) / detail::gradient_chunk;
            std::vector<sae_gradient<T>> parts(chunks, sae_gradient<T>(model));
            std::vector<double> part_se(chunks, 0.0);
            parallel_for(chunks, config.threads, [&](std::size_t c) {
                const std::size_t lo = start + c * detail::gradient_chunk;
                const std::size_t hi = std::min(stop, lo + detail::gradient_chunk);
                part_se[c] = detail::accumulate_gradient(model, rows, train_idx.data(), lo, hi, scale, parts[c]);
            });
            double se = 0;
            for (std::size_t c = 0; c < chunks; ++c) {
                se += part_se[c];
                if (c > 0) parts[0].add(parts[c]);
            }
            const double loss = se / (double(B) * double(d));
            if (!std::isfinite(loss))
                throw numeric_error("SAE training diverged at step " + std::to_string(step) + " (epoch " +
                                    std::to_string(epoch) + "): loss is not finite");
            ++step;
            a_wenc.step(model.w_enc, parts[0].w_enc, config, step);
            a_benc.step(model.b_enc, parts[0].b_enc, config, step);
            a_wdec.step(model.w_dec, parts[0].w_dec, config, step);
            a_bdec.step(model.b_dec, parts[0].b_dec, config, step);
            model.normalize_decoder_rows();
            epoch_se += se;
            if (on_step) on_step(step, loss, model);
        }
        result.epoch_loss.push_back(epoch_se / (double(train_idx.size()) * double(d)));
    }
    result.steps = step;
    result.report = quality_report(model, held);
    result.model = std::move(model);
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoint: magic "SAEMODEL", u32 version, u32 D, u32 K, u32 d, then
// w_enc, b_enc, w_dec, b_dec as little-endian float32.

inline constexpr std::string_view checkpoint_magic = "SAEMODEL";
inline constexpr std::uint32_t checkpoint_version = 1;

template <class T>
std::vector<unsigned char> encode_checkpoint(const basic_sae_model<T> &m) {
    m.validate();
    std::vector<unsigned char> out;
    io::put_bytes(out, checkpoint_magic);
    io::put_u32(out, checkpoint_version);
    io::put_u32(out, static_cast<std::uint32_t>(m.dict_size));
    io::put_u32(out, static_cast<std::uint32_t>(m.k));
    io::put_u32(out, static_cast<std::uint32_t>(m.hidden_dim));
    for (const auto *block : {&m.w_enc, &m.b_enc, &m.w_dec, &m.b_dec})
        for (T v : *block) io::put_f32(out, static_cast<float>(v));
    return out;
}

inline sae_model decode_checkpoint(std::span<const unsigned char> bytes) {
    io::reader in(bytes);
    if (in.bytes(8) != checkpoint_magic) throw data_error("not an SAE checkpoint (bad magic)");
    if (const auto v = in.u32(); v != checkpoint_version)
        throw data_error("unsupported checkpoint version " + std::to_string(v));
    const std::uint32_t D = in.u32(), K = in.u32(), d = in.u32();
    auto m = sae_model::zeros(d, D, K);
    const std::size_t expected = 2ull * d * D + D + d;
    if (in.remaining() != expected * 4) throw data_error("checkpoint size does not match header");
    for (auto *block : {&m.w_enc, &m.b_enc, &m.w_dec, &m.b_dec})
        for (float &v : *block) v = in.f32();
    return m;
}

template <class T>
void save_checkpoint(const basic_sae_model<T> &m, const std::filesystem::path &path) {
    write_file_bytes(path, encode_checkpoint(m));
}

inline sae_model load_checkpoint(const std::filesystem::path &path) {
    return decode_checkpoint(read_file_bytes(path));
}

} // namespace saesteer
