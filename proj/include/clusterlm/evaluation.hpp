#pragma once

// Recall@k and NDCG@k over binary purchase relevance, run-level and
// cluster-level reports, and the per-stage timing harness.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "clustering.hpp"
#include "corpus.hpp"
#include "errors.hpp"
#include "retrieval.hpp"

namespace clusterlm {

inline const std::vector<std::size_t> kDefaultThresholds = {1, 2, 4, 8, 12, 24, 100};

/// Binary relevance by 0-based stored rank; metric formulas index it 1-based.
struct RelevanceList {
    std::vector<int> rel;
    std::size_t total_purchased = 0;

    RelevanceList() = default;
    RelevanceList(std::vector<int> values, std::size_t total) : rel(std::move(values)), total_purchased(total) {
        std::size_t ones = 0;
        for (int v : rel) {
            if (v != 0 && v != 1) throw ValidationError("relevance values must be 0 or 1");
            ones += static_cast<std::size_t>(v);
        }
        if (ones > total_purchased) throw ValidationError("more relevant ranks than purchased products");
    }

    static RelevanceList from_top_set(const TopProductSet& top, const std::vector<Judgment>& judgments) {
        std::unordered_set<std::string> purchased;
        for (const auto& j : judgments)
            if (j.type == EngagementType::Purchased) purchased.insert(j.omsid);
        std::vector<int> rel;
        rel.reserve(top.entries.size());
        for (const auto& e : top.entries) rel.push_back(purchased.contains(e.omsid) ? 1 : 0);
        return {std::move(rel), purchased.size()};
    }
};

namespace detail {

inline void check_metric_args(const RelevanceList& rel, std::size_t k) {
    if (k < 1) throw ConfigError("k must be >= 1");
    if (rel.total_purchased == 0) throw NoRelevantError("query has no purchased products");
}

}  // namespace detail

/// hits in the first k ranks / min(k, total purchased).
inline double recall_at_k(const RelevanceList& rel, std::size_t k) {
    detail::check_metric_args(rel, k);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < std::min(k, rel.rel.size()); ++i) hits += static_cast<std::size_t>(rel.rel[i]);
    return static_cast<double>(hits) / static_cast<double>(std::min(k, rel.total_purchased));
}

/// DCG@k / IDCG@k with DCG = sum rel_i / log2(i + 1), i 1-based; the ideal
/// list puts min(k, total purchased) ones first.
inline double ndcg_at_k(const RelevanceList& rel, std::size_t k) {
    detail::check_metric_args(rel, k);
    double dcg = 0.0;
    for (std::size_t i = 1; i <= std::min(k, rel.rel.size()); ++i)
        if (rel.rel[i - 1]) dcg += 1.0 / std::log2(static_cast<double>(i) + 1.0);
    double idcg = 0.0;
    for (std::size_t i = 1; i <= std::min(k, rel.total_purchased); ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 1.0);
    return dcg / idcg;
}

struct EvalReport {
    std::vector<std::size_t> thresholds;
    std::vector<double> recall_baseline;
    std::vector<double> recall_cluster;
    std::vector<double> ndcg_baseline;
    std::vector<double> ndcg_cluster;
    std::size_t evaluated_queries = 0;
    std::size_t excluded_queries = 0;

    void write_csv(std::ostream& os) const {
        os << "threshold,recall_baseline,recall_cluster,ndcg_baseline,ndcg_cluster\n";
        for (std::size_t i = 0; i < thresholds.size(); ++i) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", thresholds[i], recall_baseline[i],
                          recall_cluster[i], ndcg_baseline[i], ndcg_cluster[i]);
            os << buf;
        }
    }
};

namespace detail {

inline std::unordered_map<std::string, const TopProductSet*> by_query(const std::vector<TopProductSet>& sets) {
    std::unordered_map<std::string, const TopProductSet*> out;
    for (const auto& s : sets) out.emplace(s.query_id, &s);
    return out;
}

}  // namespace detail

/// Averages over queries with at least one purchase, summed in query order.
inline EvalReport evaluate_run(const std::vector<QueryRecord>& test_queries, const std::vector<TopProductSet>& baseline,
                               const std::vector<TopProductSet>& refined,
                               const std::vector<std::size_t>& thresholds = kDefaultThresholds) {
    auto base = detail::by_query(baseline);
    auto ref = detail::by_query(refined);
    EvalReport rep;
    rep.thresholds = thresholds;
    const std::size_t t = thresholds.size();
    rep.recall_baseline.assign(t, 0.0);
    rep.recall_cluster.assign(t, 0.0);
    rep.ndcg_baseline.assign(t, 0.0);
    rep.ndcg_cluster.assign(t, 0.0);
    for (const auto& q : test_queries) {
        auto b = base.find(q.query_id);
        auto r = ref.find(q.query_id);
        if (b == base.end() || r == ref.end()) throw MissingRunError("no retrieval result for query " + q.query_id);
        auto rb = RelevanceList::from_top_set(*b->second, q.judgments);
        auto rr = RelevanceList::from_top_set(*r->second, q.judgments);
        if (rb.total_purchased == 0) {
            ++rep.excluded_queries;
            continue;
        }
        ++rep.evaluated_queries;
        for (std::size_t i = 0; i < t; ++i) {
            rep.recall_baseline[i] += recall_at_k(rb, thresholds[i]);
            rep.recall_cluster[i] += recall_at_k(rr, thresholds[i]);
            rep.ndcg_baseline[i] += ndcg_at_k(rb, thresholds[i]);
            rep.ndcg_cluster[i] += ndcg_at_k(rr, thresholds[i]);
        }
    }
    if (rep.evaluated_queries > 0) {
        const double n = static_cast<double>(rep.evaluated_queries);
        for (auto* col : {&rep.recall_baseline, &rep.recall_cluster, &rep.ndcg_baseline, &rep.ndcg_cluster})
            for (double& v : *col) v /= n;
    }
    return rep;
}

/// Mean recall@k of one system per cluster; empty when a cluster has no
/// evaluable test query.
inline std::vector<std::optional<double>> per_cluster_recall(const std::vector<QueryRecord>& test_queries,
                                                             const std::vector<std::size_t>& test_assignment,
                                                             const std::vector<TopProductSet>& sets, std::size_t n_clusters,
                                                             std::size_t k = 24) {
    auto lookup = detail::by_query(sets);
    std::vector<double> sum(n_clusters, 0.0);
    std::vector<std::size_t> count(n_clusters, 0);
    for (std::size_t i = 0; i < test_queries.size(); ++i) {
        const auto& q = test_queries[i];
        auto it = lookup.find(q.query_id);
        if (it == lookup.end()) throw MissingRunError("no retrieval result for query " + q.query_id);
        auto rel = RelevanceList::from_top_set(*it->second, q.judgments);
        if (rel.total_purchased == 0) continue;
        sum[test_assignment[i]] += recall_at_k(rel, k);
        ++count[test_assignment[i]];
    }
    std::vector<std::optional<double>> out(n_clusters);
    for (std::size_t c = 0; c < n_clusters; ++c)
        if (count[c] > 0) out[c] = sum[c] / static_cast<double>(count[c]);
    return out;
}

struct ClusterReportRow {
    std::size_t cluster_id = 0;
    double train_share_pct = 0.0;
    std::optional<double> occurrence_pct;
    double mean_l2 = 0.0;
    std::optional<double> recall24_baseline;
    std::optional<double> recall24_cluster;
};

struct ClusterReport {
    std::vector<ClusterReportRow> rows;

    void write_csv(std::ostream& os) const {
        os << "cluster_id,train_share_pct,occurrence_pct,mean_l2,recall24_baseline,recall24_cluster\n";
        auto opt = [](const std::optional<double>& v) {
            if (!v) return std::string();
            char buf[40];
            std::snprintf(buf, sizeof buf, "%.17g", *v);
            return std::string(buf);
        };
        for (const auto& r : rows) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g", r.train_share_pct);
            char l2[40];
            std::snprintf(l2, sizeof l2, "%.17g", r.mean_l2);
            os << r.cluster_id << ',' << buf << ',' << opt(r.occurrence_pct) << ',' << l2 << ','
               << opt(r.recall24_baseline) << ',' << opt(r.recall24_cluster) << '\n';
        }
    }
};

/// Share of a cluster's distinct test-purchased omsids that also appear in
/// the judgments of the cluster's training queries, in percent. Empty when
/// the cluster's test queries purchased nothing.
inline std::optional<double> purchased_occurrence_pct(const std::vector<const QueryRecord*>& cluster_train,
                                                      const std::vector<const QueryRecord*>& cluster_test) {
    std::unordered_set<std::string> test_purchased;
    for (const auto* q : cluster_test)
        for (const auto& j : q->judgments)
            if (j.type == EngagementType::Purchased) test_purchased.insert(j.omsid);
    if (test_purchased.empty()) return std::nullopt;
    std::unordered_set<std::string> train_judged;
    for (const auto* q : cluster_train)
        for (const auto& j : q->judgments) train_judged.insert(j.omsid);
    std::size_t hit = 0;
    for (const auto& o : test_purchased) hit += train_judged.contains(o) ? 1 : 0;
    return 100.0 * static_cast<double>(hit) / static_cast<double>(test_purchased.size());
}

inline ClusterReport cluster_level_report(const std::vector<std::size_t>& train_assignment,
                                          const std::vector<std::size_t>& test_assignment,
                                          const std::vector<QueryRecord>& train_queries,
                                          const std::vector<QueryRecord>& test_queries,
                                          const std::vector<std::optional<double>>& recall24_baseline,
                                          const std::vector<std::optional<double>>& recall24_cluster,
                                          const ClusterDiagnostics& diag) {
    if (train_assignment.size() != train_queries.size() || test_assignment.size() != test_queries.size())
        throw DimError("assignments must cover both query sets");
    const std::size_t k = diag.sizes.size();
    std::vector<std::vector<const QueryRecord*>> train_by(k), test_by(k);
    for (std::size_t i = 0; i < train_queries.size(); ++i) train_by.at(train_assignment[i]).push_back(&train_queries[i]);
    for (std::size_t i = 0; i < test_queries.size(); ++i) test_by.at(test_assignment[i]).push_back(&test_queries[i]);

    ClusterReport rep;
    for (std::size_t c = 0; c < k; ++c) {
        ClusterReportRow row;
        row.cluster_id = c;
        if (!train_queries.empty())
            row.train_share_pct =
                100.0 * static_cast<double>(train_by[c].size()) / static_cast<double>(train_queries.size());
        row.occurrence_pct = purchased_occurrence_pct(train_by[c], test_by[c]);
        row.mean_l2 = diag.mean_l2[c];
        if (c < recall24_baseline.size()) row.recall24_baseline = recall24_baseline[c];
        if (c < recall24_cluster.size()) row.recall24_cluster = recall24_cluster[c];
        rep.rows.push_back(row);
    }
    return rep;
}

/// Per-cluster recall bars for plotting.
inline void write_cluster_recall_csv(std::ostream& os, const ClusterReport& rep) {
    os << "cluster_id,recall24_baseline,recall24_cluster\n";
    for (const auto& r : rep.rows) {
        auto opt = [](const std::optional<double>& v) {
            if (!v) return std::string();
            char buf[40];
            std::snprintf(buf, sizeof buf, "%.17g", *v);
            return std::string(buf);
        };
        os << r.cluster_id << ',' << opt(r.recall24_baseline) << ',' << opt(r.recall24_cluster) << '\n';
    }
}

struct StageTiming {
    std::string stage;
    std::size_t queries = 0;
    double total_s = 0.0;

    double ms_per_query() const { return queries == 0 ? 0.0 : 1000.0 * total_s / static_cast<double>(queries); }
};

struct TimingReport {
    std::vector<StageTiming> stages;

    const StageTiming& stage(std::string_view name) const {
        for (const auto& s : stages)
            if (s.stage == name) return s;
        throw ValidationError("no timing stage " + std::string(name));
    }

    void write_csv(std::ostream& os) const {
        os << "stage,queries,total_s,ms_per_query\n";
        for (const auto& s : stages) {
            char buf[160];
            std::snprintf(buf, sizeof buf, "%s,%zu,%.9f,%.9f\n", s.stage.c_str(), s.queries, s.total_s, s.ms_per_query());
            os << buf;
        }
    }
};

/// Wall time of the four serving stages over the test queries: embed the
/// query with the baseline, route it, search the top set, refine it.
inline TimingReport timing_harness(const ModelRegistry& registry, const CatalogIndex& index,
                                   const std::vector<ProductRecord>& catalog, const std::vector<QueryRecord>& queries) {
    using clock = std::chrono::steady_clock;
    auto seconds = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
    TimingReport rep;
    const std::size_t n = queries.size();
    if (n == 0) {
        for (const char* s : {"assign", "embed_query", "top100_search", "refine"}) rep.stages.push_back({s, 0, 0.0});
        return rep;
    }
    registry.require_complete();
    if (registry.baseline->fingerprint() != index.params_fingerprint)
        throw FingerprintMismatchError("index was not built from the registry's baseline");

    std::vector<Embedding> embedded(n);
    auto t0 = clock::now();
    for (std::size_t i = 0; i < n; ++i) embedded[i] = encode(queries[i].text, *registry.baseline);
    auto t1 = clock::now();
    std::vector<std::size_t> cluster(n);
    for (std::size_t i = 0; i < n; ++i) cluster[i] = assign(embedded[i], *registry.kmeans);
    auto t2 = clock::now();
    std::vector<TopProductSet> tops(n);
    for (std::size_t i = 0; i < n; ++i) tops[i] = top_k_from_embedding(embedded[i], index, registry.k_top, queries[i].query_id);
    auto t3 = clock::now();
    std::size_t checksum = 0;
    for (std::size_t i = 0; i < n; ++i)
        checksum += refine_top_products(queries[i].text, tops[i], registry.params_for(cluster[i]), catalog).entries.size();
    auto t4 = clock::now();
    (void)checksum;

    rep.stages.push_back({"assign", n, seconds(t1, t2)});
    rep.stages.push_back({"embed_query", n, seconds(t0, t1)});
    rep.stages.push_back({"top100_search", n, seconds(t2, t3)});
    rep.stages.push_back({"refine", n, seconds(t3, t4)});
    return rep;
}

}  // namespace clusterlm
