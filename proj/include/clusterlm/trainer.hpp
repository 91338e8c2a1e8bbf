#pragma once

// Contrastive (Hadsell) objective over the normalized linear encoder, its
// exact gradient, and minibatch SGD for the baseline and per-cluster models.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "corpus.hpp"
#include "encoder.hpp"
#include "errors.hpp"
#include "util.hpp"

namespace clusterlm {

/// label 1 = relevant (attract), 0 = irrelevant (repel inside the margin).
struct LabeledPair {
    std::string query_text;
    std::string product_text;
    int label = 0;

    bool operator==(const LabeledPair&) const = default;
};

struct TrainConfig {
    double margin = 0.5;
    double learning_rate = 0.05;
    std::size_t batch_size = 256;
    int epochs_baseline = 15;
    int epochs_cluster = 5;
    int negatives_per_positive = 2;
    std::uint64_t seed = 1;
    unsigned threads = 1;

    void validate() const {
        if (!(margin > 0.0) || !std::isfinite(margin)) throw ConfigError("margin must be > 0");
        // lr = 0 is accepted as the identity update.
        if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs_baseline < 0 || epochs_cluster < 0) throw ConfigError("epochs must be >= 0");
        if (negatives_per_positive < 0) throw ConfigError("negatives_per_positive must be >= 0");
    }
};

struct EpochStats {
    int epoch = 0;
    double mean_loss = 0.0;
    std::size_t pairs = 0;
    double seconds = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;

    void write_csv(std::ostream& os) const {
        os << "epoch,mean_loss,pairs,seconds\n";
        for (const auto& e : epochs) {
            char buf[128];
            std::snprintf(buf, sizeof buf, "%d,%.17g,%zu,%.6f\n", e.epoch, e.mean_loss, e.pairs, e.seconds);
            os << buf;
        }
    }
};

/// Margin contrastive loss: label 1 pairs are pulled together (d^2 / 2),
/// label 0 pairs are pushed out to the margin (max(0, m - d)^2 / 2).
inline double contrastive_loss(double distance, int label, double margin) {
    if (label == 1) return 0.5 * distance * distance;
    double slack = std::max(0.0, margin - distance);
    return 0.5 * slack * slack;
}

namespace detail {

// Loss plus gradients w.r.t. the two unnormalized projections.
struct PairTerms {
    double loss = 0.0;
    Embedding grad_query;    // dL/d(W x_q)
    Embedding grad_product;  // dL/d(W x_p)
};

// Backprop through z = e/|e|: dL/de = (g - z (z.g)) / |e|.
inline Embedding through_normalization(const EncodedFeatures& enc, const Embedding& grad_unit) {
    Embedding out(grad_unit.size(), 0.0);
    if (enc.norm == 0.0) return out;
    double zg = dot(enc.unit, grad_unit);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (grad_unit[i] - enc.unit[i] * zg) / enc.norm;
    return out;
}

inline PairTerms pair_terms(const SparseFeatures& xq, const SparseFeatures& xp, int label, double margin,
                            const EncoderParams& params) {
    const auto q = encode_features(xq, params);
    const auto p = encode_features(xp, params);
    const std::size_t dim = params.embed_dim();
    Embedding diff(dim);
    for (std::size_t i = 0; i < dim; ++i) diff[i] = q.unit[i] - p.unit[i];
    const double d = l2_norm(diff);

    PairTerms t;
    t.loss = contrastive_loss(d, label, margin);
    Embedding g(dim, 0.0);  // dL/dz_q; dL/dz_p = -g
    if (d > 0.0) {
        if (label == 1) {
            g = diff;
        } else if (d < margin) {
            double coef = -(margin - d) / d;
            for (std::size_t i = 0; i < dim; ++i) g[i] = coef * diff[i];
        }
    }
    Embedding neg(dim);
    for (std::size_t i = 0; i < dim; ++i) neg[i] = -g[i];
    t.grad_query = through_normalization(q, g);
    t.grad_product = through_normalization(p, neg);
    return t;
}

inline bool all_finite(const Embedding& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace detail

/// Gradient of one pair's loss w.r.t. W, sparse in buckets.
struct WeightGradient {
    std::size_t embed_dim = 0;
    std::unordered_map<std::uint32_t, Embedding> columns;

    double entry(std::size_t row, std::size_t bucket) const {
        auto it = columns.find(static_cast<std::uint32_t>(bucket));
        return it == columns.end() ? 0.0 : it->second[row];
    }

    bool is_zero() const {
        for (const auto& [b, col] : columns)
            for (double v : col)
                if (v != 0.0) return false;
        return true;
    }
};

struct PairLossAndGradient {
    double loss = 0.0;
    WeightGradient gradient;
};

inline PairLossAndGradient pair_loss_and_gradient(const LabeledPair& pair, const EncoderParams& params, double margin) {
    const auto xq = featurize_text(pair.query_text, params.featurizer());
    const auto xp = featurize_text(pair.product_text, params.featurizer());
    auto terms = detail::pair_terms(xq, xp, pair.label, margin, params);

    PairLossAndGradient out;
    out.loss = terms.loss;
    out.gradient.embed_dim = params.embed_dim();
    auto scatter = [&](const SparseFeatures& x, const Embedding& g) {
        for (std::size_t k = 0; k < x.indices.size(); ++k) {
            auto& col = out.gradient.columns[x.indices[k]];
            col.resize(params.embed_dim(), 0.0);
            for (std::size_t r = 0; r < col.size(); ++r) col[r] += g[r] * x.values[k];
        }
    };
    scatter(xq, terms.grad_query);
    scatter(xp, terms.grad_product);
    if (!std::isfinite(out.loss) || !detail::all_finite(terms.grad_query) || !detail::all_finite(terms.grad_product))
        throw NonFiniteError("non-finite loss or gradient");
    return out;
}

/// Each (query, judged product) is a positive whatever the engagement type;
/// every positive is followed by negatives_per_positive uniform catalog draws
/// outside the query's judged set.
inline std::vector<LabeledPair> build_baseline_pairs(const std::vector<QueryRecord>& train_queries,
                                                     const std::vector<ProductRecord>& catalog,
                                                     const TrainConfig& cfg, std::mt19937_64& rng) {
    if (catalog.empty()) throw EmptyCatalogError("cannot build pairs from an empty catalog");
    std::unordered_map<std::string, std::size_t> by_id;
    std::vector<std::string> sentences;
    sentences.reserve(catalog.size());
    for (std::size_t i = 0; i < catalog.size(); ++i) {
        by_id.emplace(catalog[i].omsid, i);
        sentences.push_back(product_sentence(catalog[i]));
    }
    std::uniform_int_distribution<std::size_t> pick(0, catalog.size() - 1);
    std::vector<LabeledPair> pairs;
    for (const auto& q : train_queries) {
        std::unordered_set<std::size_t> judged;
        for (const auto& j : q.judgments) {
            auto it = by_id.find(j.omsid);
            if (it == by_id.end()) throw ValidationError("unknown omsid " + j.omsid + " in query " + q.query_id);
            judged.insert(it->second);
        }
        const bool has_eligible = judged.size() < catalog.size();
        for (const auto& j : q.judgments) {
            pairs.push_back({q.text, sentences[by_id.at(j.omsid)], 1});
            if (!has_eligible) continue;
            for (int n = 0; n < cfg.negatives_per_positive; ++n) {
                std::size_t idx;
                do {
                    idx = pick(rng);
                } while (judged.contains(idx));
                pairs.push_back({q.text, sentences[idx], 0});
            }
        }
    }
    return pairs;
}

namespace detail {

// Featurizes every distinct text once; pairs then refer to cache slots.
struct FeatureCache {
    std::vector<SparseFeatures> features;
    std::vector<std::pair<std::size_t, std::size_t>> pair_slots;

    FeatureCache(const std::vector<LabeledPair>& pairs, const FeaturizerConfig& cfg) {
        std::unordered_map<std::string, std::size_t> slot;
        auto intern = [&](const std::string& text) {
            auto [it, inserted] = slot.emplace(text, features.size());
            if (inserted) features.push_back(featurize_text(text, cfg));
            return it->second;
        };
        pair_slots.reserve(pairs.size());
        for (const auto& p : pairs) {
            std::size_t qs = intern(p.query_text);
            std::size_t ps = intern(p.product_text);
            pair_slots.emplace_back(qs, ps);
        }
    }
};

}  // namespace detail

/// Mean contrastive loss of params over pairs.
inline double mean_loss(const EncoderParams& params, const std::vector<LabeledPair>& pairs, double margin) {
    if (pairs.empty()) return 0.0;
    detail::FeatureCache cache(pairs, params.featurizer());
    double total = 0.0;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto [qs, ps] = cache.pair_slots[i];
        auto q = encode_features(cache.features[qs], params);
        auto p = encode_features(cache.features[ps], params);
        total += contrastive_loss(euclidean_distance(q.unit, p.unit), pairs[i].label, margin);
    }
    return total / static_cast<double>(pairs.size());
}

/// Minibatch SGD, W <- W - lr * mean batch gradient. Pair terms are computed
/// in parallel into per-pair slots and reduced in batch order, so the result
/// does not depend on the thread count.
inline std::pair<EncoderParams, TrainReport> train(EncoderParams params, const std::vector<LabeledPair>& pairs,
                                                   const TrainConfig& cfg, int epochs) {
    cfg.validate();
    if (pairs.empty()) throw ConfigError("train requires a nonempty pair set");
    for (const auto& p : pairs)
        if (p.label != 0 && p.label != 1) throw ValidationError("pair label must be 0 or 1");

    detail::FeatureCache cache(pairs, params.featurizer());
    const std::size_t dim = params.embed_dim();
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order(pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> accum(params.raw().size(), 0.0);
    std::vector<char> touched_flag(params.n_buckets(), 0);
    std::vector<std::uint32_t> touched;
    std::vector<detail::PairTerms> slots(cfg.batch_size);

    TrainReport report;
    for (int epoch = 1; epoch <= epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
            const std::size_t len = std::min(cfg.batch_size, order.size() - start);
            try {
                parallel_for(len, cfg.threads, [&](std::size_t i) {
                    const auto [qs, ps] = cache.pair_slots[order[start + i]];
                    slots[i] = detail::pair_terms(cache.features[qs], cache.features[ps],
                                                  pairs[order[start + i]].label, cfg.margin, params);
                });
            } catch (const NonFiniteError& e) {
                throw NonFiniteError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(batch_index));
            }
            touched.clear();
            for (std::size_t i = 0; i < len; ++i) {
                const auto& t = slots[i];
                if (!std::isfinite(t.loss) || !detail::all_finite(t.grad_query) || !detail::all_finite(t.grad_product))
                    throw NonFiniteError("non-finite loss or gradient at epoch " + std::to_string(epoch) + ", batch " +
                                         std::to_string(batch_index));
                loss_sum += t.loss;
                const auto [qs, ps] = cache.pair_slots[order[start + i]];
                for (auto [x, g] : {std::pair{&cache.features[qs], &t.grad_query},
                                    std::pair{&cache.features[ps], &t.grad_product}}) {
                    for (std::size_t k = 0; k < x->indices.size(); ++k) {
                        const std::uint32_t b = x->indices[k];
                        if (!touched_flag[b]) {
                            touched_flag[b] = 1;
                            touched.push_back(b);
                        }
                        double* acc = accum.data() + static_cast<std::size_t>(b) * dim;
                        const double v = x->values[k];
                        for (std::size_t r = 0; r < dim; ++r) acc[r] += (*g)[r] * v;
                    }
                }
            }
            const double step = cfg.learning_rate / static_cast<double>(len);
            for (std::uint32_t b : touched) {
                double* acc = accum.data() + static_cast<std::size_t>(b) * dim;
                auto col = params.column(b);
                if (step != 0.0)
                    for (std::size_t r = 0; r < dim; ++r) col[r] -= step * acc[r];
                std::fill(acc, acc + dim, 0.0);
                touched_flag[b] = 0;
            }
        }
        auto t1 = std::chrono::steady_clock::now();
        report.epochs.push_back({epoch, loss_sum / static_cast<double>(pairs.size()), pairs.size(),
                                 std::chrono::duration<double>(t1 - t0).count()});
    }
    return {std::move(params), std::move(report)};
}

inline std::pair<EncoderParams, TrainReport> train(EncoderParams params, const std::vector<LabeledPair>& pairs,
                                                   const TrainConfig& cfg) {
    return train(std::move(params), pairs, cfg, cfg.epochs_baseline);
}

/// Copies the baseline and trains the copy for epochs_cluster epochs on the
/// cluster's relabeled pairs.
inline EncoderParams fine_tune_cluster(const EncoderParams& baseline, const std::vector<LabeledPair>& cluster_pairs,
                                       const TrainConfig& cfg) {
    if (cluster_pairs.empty()) throw EmptyClusterError("cluster has no labeled pairs");
    return train(baseline, cluster_pairs, cfg, cfg.epochs_cluster).first;
}

}  // namespace clusterlm
