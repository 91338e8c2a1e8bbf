#pragma once

// Hashed character n-gram features projected through a trainable linear map
// and L2-normalized.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "util.hpp"

namespace clusterlm {

struct FeaturizerConfig {
    int ngram_min = 3;
    int ngram_max = 5;
    std::size_t n_buckets = 32768;
    std::size_t max_tokens = 40;
    std::string hash_name = "fnv1a64";

    bool operator==(const FeaturizerConfig&) const = default;

    void validate() const {
        if (ngram_min < 1 || ngram_min > ngram_max) throw ConfigError("need 1 <= ngram_min <= ngram_max");
        if (n_buckets < 2) throw ConfigError("n_buckets must be >= 2");
        if (max_tokens < 1) throw ConfigError("max_tokens must be >= 1");
        if (hash_name != "fnv1a64") throw ConfigError("unsupported hash: " + hash_name);
    }
};

struct SparseFeatures {
    std::vector<std::uint32_t> indices;  // strictly increasing
    std::vector<double> values;

    bool empty() const { return indices.empty(); }
    bool operator==(const SparseFeatures&) const = default;
};

using Embedding = std::vector<double>;

/// Lowercase, whitespace split, keep the first max_tokens tokens.
inline std::vector<std::string> tokenize(std::string_view text, std::size_t max_tokens = 40) {
    auto tokens = split_whitespace(to_lower_ascii(text));
    if (tokens.size() > max_tokens) tokens.resize(max_tokens);
    return tokens;
}

inline std::uint32_t ngram_bucket(std::string_view gram, std::size_t n_buckets) {
    return static_cast<std::uint32_t>(fnv1a64(gram) % n_buckets);
}

inline SparseFeatures featurize(std::span<const std::string> tokens, const FeaturizerConfig& cfg) {
    std::map<std::uint32_t, double> counts;
    std::string wrapped;
    for (const auto& tok : tokens) {
        wrapped.assign("^");
        wrapped += tok;
        wrapped += '$';
        for (int n = cfg.ngram_min; n <= cfg.ngram_max; ++n) {
            auto len = static_cast<std::size_t>(n);
            if (len > wrapped.size()) break;
            for (std::size_t i = 0; i + len <= wrapped.size(); ++i)
                counts[ngram_bucket(std::string_view(wrapped).substr(i, len), cfg.n_buckets)] += 1.0;
        }
    }
    SparseFeatures out;
    out.indices.reserve(counts.size());
    out.values.reserve(counts.size());
    double sq = 0.0;
    for (auto [b, c] : counts) {
        out.indices.push_back(b);
        out.values.push_back(c);
        sq += c * c;
    }
    if (sq > 0.0) {
        double inv = 1.0 / std::sqrt(sq);
        for (double& v : out.values) v *= inv;
    }
    return out;
}

inline SparseFeatures featurize_text(std::string_view text, const FeaturizerConfig& cfg) {
    auto tokens = tokenize(text, cfg.max_tokens);
    return featurize(tokens, cfg);
}

/// Linear projection W of shape (embed_dim x n_buckets). Stored bucket-major
/// (the column of W for one bucket is contiguous) because features are
/// sparse; serialization goes through row_major()/from_row_major().
class EncoderParams {
public:
    EncoderParams() = default;
    EncoderParams(const EncoderParams& o)
        : featurizer_(o.featurizer_), embed_dim_(o.embed_dim_), weights_(o.weights_),
          fingerprint_(o.fingerprint_.load()), fingerprint_valid_(o.fingerprint_valid_.load()) {}
    EncoderParams(EncoderParams&& o) noexcept
        : featurizer_(std::move(o.featurizer_)), embed_dim_(o.embed_dim_), weights_(std::move(o.weights_)),
          fingerprint_(o.fingerprint_.load()), fingerprint_valid_(o.fingerprint_valid_.load()) {}
    EncoderParams& operator=(EncoderParams o) noexcept {
        featurizer_ = std::move(o.featurizer_);
        embed_dim_ = o.embed_dim_;
        weights_ = std::move(o.weights_);
        fingerprint_ = o.fingerprint_.load();
        fingerprint_valid_ = o.fingerprint_valid_.load();
        return *this;
    }

    EncoderParams(FeaturizerConfig featurizer, std::size_t embed_dim)
        : featurizer_(std::move(featurizer)), embed_dim_(embed_dim),
          weights_(featurizer_.n_buckets * embed_dim, 0.0) {
        featurizer_.validate();
        if (embed_dim_ < 1) throw ConfigError("embed_dim must be >= 1");
    }

    static EncoderParams random(FeaturizerConfig featurizer, std::size_t embed_dim, std::uint64_t seed) {
        EncoderParams p(std::move(featurizer), embed_dim);
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(embed_dim)));
        for (double& w : p.weights_) w = normal(rng);
        return p;
    }

    static EncoderParams from_row_major(FeaturizerConfig featurizer, std::size_t embed_dim,
                                        std::span<const double> row_major) {
        EncoderParams p(std::move(featurizer), embed_dim);
        if (row_major.size() != p.weights_.size())
            throw DimError("weight blob has " + std::to_string(row_major.size()) + " values, expected " +
                           std::to_string(p.weights_.size()));
        const std::size_t nb = p.featurizer_.n_buckets;
        for (std::size_t r = 0; r < embed_dim; ++r)
            for (std::size_t b = 0; b < nb; ++b) p.weights_[b * embed_dim + r] = row_major[r * nb + b];
        return p;
    }

    std::vector<double> row_major() const {
        const std::size_t nb = featurizer_.n_buckets;
        std::vector<double> out(weights_.size());
        for (std::size_t b = 0; b < nb; ++b)
            for (std::size_t r = 0; r < embed_dim_; ++r) out[r * nb + b] = weights_[b * embed_dim_ + r];
        return out;
    }

    const FeaturizerConfig& featurizer() const { return featurizer_; }
    std::size_t embed_dim() const { return embed_dim_; }
    std::size_t n_buckets() const { return featurizer_.n_buckets; }

    /// W[row][bucket]
    double& at(std::size_t row, std::size_t bucket) {
        invalidate();
        return weights_[bucket * embed_dim_ + row];
    }
    double at(std::size_t row, std::size_t bucket) const { return weights_[bucket * embed_dim_ + row]; }

    std::span<double> column(std::size_t bucket) {
        invalidate();
        return {weights_.data() + bucket * embed_dim_, embed_dim_};
    }
    std::span<const double> column(std::size_t bucket) const {
        return {weights_.data() + bucket * embed_dim_, embed_dim_};
    }

    std::span<const double> raw() const { return weights_; }
    std::span<double> raw() {
        invalidate();
        return weights_;
    }

    bool all_finite() const {
        return std::all_of(weights_.begin(), weights_.end(), [](double w) { return std::isfinite(w); });
    }

    /// Digest of shape, featurizer and every weight bit. Memoized until the
    /// next mutable access to the weights.
    std::uint64_t fingerprint() const {
        if (fingerprint_valid_.load(std::memory_order_acquire)) return fingerprint_.load(std::memory_order_relaxed);
        std::uint64_t fp = compute_fingerprint();
        fingerprint_.store(fp, std::memory_order_relaxed);
        fingerprint_valid_.store(true, std::memory_order_release);
        return fp;
    }

    bool operator==(const EncoderParams& o) const {
        return featurizer_ == o.featurizer_ && embed_dim_ == o.embed_dim_ && weights_ == o.weights_;
    }

private:
    void invalidate() { fingerprint_valid_.store(false, std::memory_order_release); }

    std::uint64_t compute_fingerprint() const {
        std::string header = featurizer_.hash_name + "|" + std::to_string(featurizer_.ngram_min) + "|" +
                             std::to_string(featurizer_.ngram_max) + "|" + std::to_string(featurizer_.n_buckets) +
                             "|" + std::to_string(featurizer_.max_tokens) + "|" + std::to_string(embed_dim_);
        return fnv1a64(std::span<const double>(weights_), fnv1a64(header));
    }

    FeaturizerConfig featurizer_;
    std::size_t embed_dim_ = 0;
    std::vector<double> weights_;
    mutable std::atomic<std::uint64_t> fingerprint_{0};
    mutable std::atomic<bool> fingerprint_valid_{false};
};

/// Unnormalized projection W x.
inline Embedding project(const SparseFeatures& x, const EncoderParams& params) {
    const std::size_t dim = params.embed_dim();
    Embedding e(dim, 0.0);
    for (std::size_t k = 0; k < x.indices.size(); ++k) {
        auto col = params.column(x.indices[k]);
        const double v = x.values[k];
        for (std::size_t r = 0; r < dim; ++r) e[r] += v * col[r];
    }
    return e;
}

inline Embedding fallback_embedding(std::size_t dim) {
    Embedding e(dim, 0.0);
    e[0] = 1.0;
    return e;
}

inline double l2_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

/// Result of encoding kept for backpropagation: the unit output and the norm
/// of the projection (zero when the fallback vector was used).
struct EncodedFeatures {
    Embedding unit;
    double norm = 0.0;
};

inline EncodedFeatures encode_features(const SparseFeatures& x, const EncoderParams& params) {
    EncodedFeatures out;
    if (x.empty()) {
        out.unit = fallback_embedding(params.embed_dim());
        return out;
    }
    Embedding e = project(x, params);
    double norm = l2_norm(e);
    if (!std::isfinite(norm)) throw NonFiniteError("non-finite embedding; encoder params contain non-finite values");
    if (norm == 0.0) {
        out.unit = fallback_embedding(params.embed_dim());
        return out;
    }
    for (double& v : e) v /= norm;
    out.unit = std::move(e);
    out.norm = norm;
    return out;
}

inline Embedding encode(std::string_view text, const EncoderParams& params) {
    return encode_features(featurize_text(text, params.featurizer()), params).unit;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimError("dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

/// Cosine of unit vectors, i.e. their dot product.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) { return dot(a, b); }

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DimError("dimension mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

}  // namespace clusterlm
