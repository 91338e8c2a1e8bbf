#pragma once

// Mini-batch K-Means (k-means++ seeding, per-center 1/count learning rate),
// Calinski-Harabasz scoring, routing and cluster diagnostics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "encoder.hpp"
#include "errors.hpp"
#include "util.hpp"

namespace clusterlm {

struct KMeansModel {
    std::vector<Embedding> centers;
    std::uint64_t seed = 0;
    std::size_t iterations_run = 0;

    std::size_t k() const { return centers.size(); }
    std::size_t dim() const { return centers.empty() ? 0 : centers.front().size(); }

    std::vector<double> row_major() const {
        std::vector<double> out;
        out.reserve(k() * dim());
        for (const auto& c : centers) out.insert(out.end(), c.begin(), c.end());
        return out;
    }

    static KMeansModel from_row_major(std::span<const double> values, std::size_t k, std::size_t dim) {
        if (k < 1 || dim < 1 || values.size() != k * dim)
            throw DimError("kmeans blob has " + std::to_string(values.size()) + " values, expected " +
                           std::to_string(k) + "x" + std::to_string(dim));
        KMeansModel m;
        for (std::size_t c = 0; c < k; ++c)
            m.centers.emplace_back(values.begin() + static_cast<std::ptrdiff_t>(c * dim),
                                   values.begin() + static_cast<std::ptrdiff_t>((c + 1) * dim));
        return m;
    }

    bool operator==(const KMeansModel&) const = default;
};

struct KMeansConfig {
    std::size_t batch_size = 1024;
    std::size_t max_iters = 300;
    std::uint64_t seed = 0;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// Nearest center; ties go to the smallest id.
inline std::size_t assign(std::span<const double> embedding, const KMeansModel& model) {
    if (model.centers.empty()) throw DimError("model has no centers");
    if (embedding.size() != model.dim())
        throw DimError("embedding dim " + std::to_string(embedding.size()) + " != center dim " +
                       std::to_string(model.dim()));
    std::size_t best = 0;
    double best_d = squared_distance(embedding, model.centers[0]);
    for (std::size_t c = 1; c < model.centers.size(); ++c) {
        double d = squared_distance(embedding, model.centers[c]);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

inline std::vector<std::size_t> assign_all(const std::vector<Embedding>& embeddings, const KMeansModel& model) {
    std::vector<std::size_t> out;
    out.reserve(embeddings.size());
    for (const auto& e : embeddings) out.push_back(assign(e, model));
    return out;
}

namespace detail {

inline std::size_t sample_by_weight(const std::vector<double>& w, double total, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    double r = unit(rng) * total;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] <= 0.0) continue;
        last_positive = i;
        r -= w[i];
        if (r < 0.0) return i;
    }
    return last_positive;
}

/// Greedy k-means++: each step draws 2 + floor(ln k) candidates by D^2
/// weighting and keeps the one that lowers the potential the most.
inline std::vector<Embedding> kmeans_plus_plus(const std::vector<Embedding>& points, std::size_t k,
                                               std::mt19937_64& rng) {
    const std::size_t n = points.size();
    const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
    std::vector<Embedding> centers;
    std::uniform_int_distribution<std::size_t> first(0, n - 1);
    centers.push_back(points[first(rng)]);
    std::vector<double> d2(n), cand(n), best_d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = squared_distance(points[i], centers[0]);
    while (centers.size() < k) {
        double total = 0.0;
        for (double v : d2) total += v;
        if (total <= 0.0) {
            centers.push_back(points[first(rng)]);
            continue;
        }
        std::size_t best = n;
        double best_pot = std::numeric_limits<double>::infinity();
        for (std::size_t t = 0; t < trials; ++t) {
            std::size_t c = sample_by_weight(d2, total, rng);
            double pot = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                cand[i] = std::min(d2[i], squared_distance(points[i], points[c]));
                pot += cand[i];
            }
            if (pot < best_pot) {
                best_pot = pot;
                best = c;
                best_d2.swap(cand);
            }
        }
        centers.push_back(points[best]);
        d2.swap(best_d2);
    }
    return centers;
}

}  // namespace detail

/// Sculley-style mini-batch K-Means. Stops after max_iters minibatches or when
/// no center moves by 1e-6 or more in one minibatch.
inline KMeansModel fit_minibatch_kmeans(const std::vector<Embedding>& embeddings, std::size_t k,
                                        std::size_t batch_size, std::size_t max_iters, std::uint64_t seed) {
    if (k == 0) throw ConfigError("k must be >= 1");
    if (embeddings.empty()) throw ConfigError("no points to cluster");
    if (k > embeddings.size())
        throw ConfigError("k=" + std::to_string(k) + " exceeds point count " + std::to_string(embeddings.size()));
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    const std::size_t dim = embeddings.front().size();
    for (const auto& e : embeddings)
        if (e.size() != dim) throw DimError("embeddings have mixed dimensions");

    std::mt19937_64 rng(seed);
    KMeansModel model;
    model.seed = seed;
    model.centers = detail::kmeans_plus_plus(embeddings, k, rng);

    const std::size_t n = embeddings.size();
    const std::size_t b = std::min(batch_size, n);
    std::vector<std::size_t> counts(k, 0);
    std::vector<std::size_t> indices(n);
    for (std::size_t i = 0; i < n; ++i) indices[i] = i;
    std::vector<std::size_t> batch_assign(b);

    for (std::size_t iter = 0; iter < max_iters; ++iter) {
        // Draw the minibatch without replacement (partial Fisher-Yates).
        for (std::size_t i = 0; i < b; ++i) {
            std::uniform_int_distribution<std::size_t> d(i, n - 1);
            std::swap(indices[i], indices[d(rng)]);
        }
        for (std::size_t i = 0; i < b; ++i) batch_assign[i] = assign(embeddings[indices[i]], model);

        std::vector<Embedding> before = model.centers;
        for (std::size_t i = 0; i < b; ++i) {
            auto& c = model.centers[batch_assign[i]];
            const auto& x = embeddings[indices[i]];
            double eta = 1.0 / static_cast<double>(++counts[batch_assign[i]]);
            for (std::size_t r = 0; r < dim; ++r) c[r] = (1.0 - eta) * c[r] + eta * x[r];
        }
        // A center that has never absorbed a point is moved onto the batch point
        // farthest from its own center.
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            std::size_t far = 0;
            double far_d = -1.0;
            for (std::size_t i = 0; i < b; ++i) {
                double d = squared_distance(embeddings[indices[i]], model.centers[batch_assign[i]]);
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            if (far_d > 0.0) model.centers[c] = embeddings[indices[far]];
        }
        model.iterations_run = iter + 1;
        double moved = 0.0;
        for (std::size_t c = 0; c < k; ++c)
            moved = std::max(moved, std::sqrt(squared_distance(before[c], model.centers[c])));
        if (moved < 1e-6) break;
    }
    return model;
}

/// CH = [SSB/(k-1)] / [SSW/(n-k)] over the clusters present in `labels`.
/// Returns +infinity when SSW = 0.
inline double calinski_harabasz(const std::vector<Embedding>& embeddings, const std::vector<std::size_t>& labels) {
    if (embeddings.size() != labels.size()) throw DimError("labels and embeddings differ in length");
    const std::size_t n = embeddings.size();
    if (n == 0) throw DegenerateError("no points");
    const std::size_t dim = embeddings.front().size();
    std::size_t max_label = *std::max_element(labels.begin(), labels.end());
    std::vector<Embedding> sums(max_label + 1, Embedding(dim, 0.0));
    std::vector<std::size_t> sizes(max_label + 1, 0);
    Embedding mean(dim, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        if (embeddings[i].size() != dim) throw DimError("embeddings have mixed dimensions");
        ++sizes[labels[i]];
        for (std::size_t r = 0; r < dim; ++r) {
            sums[labels[i]][r] += embeddings[i][r];
            mean[r] += embeddings[i][r];
        }
    }
    for (double& v : mean) v /= static_cast<double>(n);
    std::size_t k = 0;
    for (std::size_t c = 0; c <= max_label; ++c) {
        if (sizes[c] == 0) continue;
        ++k;
        for (double& v : sums[c]) v /= static_cast<double>(sizes[c]);
    }
    if (k < 2 || k >= n)
        throw DegenerateError("Calinski-Harabasz needs 2 <= k < n (k=" + std::to_string(k) + ", n=" +
                              std::to_string(n) + ")");
    double ssb = 0.0;
    for (std::size_t c = 0; c <= max_label; ++c)
        if (sizes[c] > 0) ssb += static_cast<double>(sizes[c]) * squared_distance(sums[c], mean);
    double ssw = 0.0;
    for (std::size_t i = 0; i < n; ++i) ssw += squared_distance(embeddings[i], sums[labels[i]]);
    if (ssw == 0.0) return std::numeric_limits<double>::infinity();
    return (ssb / static_cast<double>(k - 1)) / (ssw / static_cast<double>(n - k));
}

struct ElbowRow {
    std::size_t k = 0;
    double ch_score = 0.0;
};

/// One fit per k with a seed derived from (cfg.seed, k).
inline std::vector<ElbowRow> elbow_scan(const std::vector<Embedding>& embeddings, const std::vector<std::size_t>& k_values,
                                        const KMeansConfig& cfg) {
    std::vector<ElbowRow> rows;
    for (std::size_t k : k_values) {
        auto model = fit_minibatch_kmeans(embeddings, k, cfg.batch_size, cfg.max_iters, derive_seed(cfg.seed, k));
        rows.push_back({k, calinski_harabasz(embeddings, assign_all(embeddings, model))});
    }
    return rows;
}

inline void write_elbow_csv(std::ostream& os, const std::vector<ElbowRow>& rows) {
    os << "k,ch_score\n";
    for (const auto& r : rows) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%zu,%.17g\n", r.k, r.ch_score);
        os << buf;
    }
}

struct ClusterDiagnostics {
    std::vector<std::size_t> sizes;
    std::vector<double> share_pct;
    std::vector<double> mean_l2;
    std::vector<std::vector<double>> center_distances;
    std::optional<double> ch_score;  // empty when fewer than two clusters are populated
};

inline ClusterDiagnostics diagnostics(const std::vector<Embedding>& embeddings, const std::vector<std::size_t>& labels,
                                      const KMeansModel& model) {
    const std::size_t k = model.k();
    ClusterDiagnostics d;
    d.sizes.assign(k, 0);
    d.mean_l2.assign(k, 0.0);
    d.share_pct.assign(k, 0.0);
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        if (labels[i] >= k) throw DimError("assignment references cluster " + std::to_string(labels[i]));
        ++d.sizes[labels[i]];
        d.mean_l2[labels[i]] += euclidean_distance(embeddings[i], model.centers[labels[i]]);
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (d.sizes[c] > 0) d.mean_l2[c] /= static_cast<double>(d.sizes[c]);
        if (!embeddings.empty())
            d.share_pct[c] = 100.0 * static_cast<double>(d.sizes[c]) / static_cast<double>(embeddings.size());
    }
    d.center_distances.assign(k, std::vector<double>(k, 0.0));
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i + 1; j < k; ++j)
            d.center_distances[i][j] = d.center_distances[j][i] = euclidean_distance(model.centers[i], model.centers[j]);
    try {
        d.ch_score = calinski_harabasz(embeddings, labels);
    } catch (const DegenerateError&) {
        d.ch_score.reset();
    }
    return d;
}

inline void write_diagnostics_csv(std::ostream& os, const ClusterDiagnostics& d) {
    os << "cluster_id,size,share_pct,mean_l2\n";
    for (std::size_t c = 0; c < d.sizes.size(); ++c) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%zu,%zu,%.6f,%.17g\n", c, d.sizes[c], d.share_pct[c], d.mean_l2[c]);
        os << buf;
    }
}

/// Square matrix with a header row and a leading cluster-id column.
inline void write_center_distance_csv(std::ostream& os, const std::vector<std::vector<double>>& m) {
    os << "cluster_id";
    for (std::size_t j = 0; j < m.size(); ++j) os << "," << j;
    os << "\n";
    for (std::size_t i = 0; i < m.size(); ++i) {
        os << i;
        for (double v : m[i]) {
            char buf[40];
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            os << buf;
        }
        os << "\n";
    }
}

struct ClusterSizeWarning {
    std::size_t cluster_id = 0;
    std::size_t size = 0;
    std::size_t limit = 0;
};

/// Flags every nonempty cluster whose size reaches max_cluster_size.
inline std::vector<ClusterSizeWarning> check_cluster_sizes(const std::vector<std::size_t>& labels, std::size_t n_clusters,
                                                           std::size_t max_cluster_size) {
    std::vector<std::size_t> sizes(n_clusters, 0);
    for (auto l : labels) {
        if (l >= sizes.size()) sizes.resize(l + 1, 0);
        ++sizes[l];
    }
    std::vector<ClusterSizeWarning> out;
    for (std::size_t c = 0; c < sizes.size(); ++c)
        if (sizes[c] > 0 && sizes[c] >= max_cluster_size) out.push_back({c, sizes[c], max_cluster_size});
    return out;
}

}  // namespace clusterlm
