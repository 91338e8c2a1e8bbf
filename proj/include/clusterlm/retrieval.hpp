#pragma once

// Catalog index, exact top-K search, last-purchase relabeling, cluster
// refinement and the persistent model registry.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "clustering.hpp"
#include "corpus.hpp"
#include "encoder.hpp"
#include "errors.hpp"
#include "trainer.hpp"
#include "util.hpp"

namespace clusterlm {

/// Cached product-side embeddings, one unit row per catalog product.
struct CatalogIndex {
    std::vector<std::string> omsids;
    std::vector<double> embeddings;  // row-major (size x dim)
    std::size_t dim = 0;
    std::uint64_t params_fingerprint = 0;

    std::size_t size() const { return omsids.size(); }
    std::span<const double> row(std::size_t i) const { return {embeddings.data() + i * dim, dim}; }

    bool operator==(const CatalogIndex&) const = default;
};

inline CatalogIndex build_index(const std::vector<ProductRecord>& catalog, const EncoderParams& params,
                                unsigned threads = 1) {
    if (catalog.empty()) throw EmptyCatalogError("cannot index an empty catalog");
    CatalogIndex index;
    index.dim = params.embed_dim();
    index.params_fingerprint = params.fingerprint();
    index.omsids.reserve(catalog.size());
    for (const auto& p : catalog) index.omsids.push_back(p.omsid);
    index.embeddings.assign(catalog.size() * index.dim, 0.0);
    parallel_for(catalog.size(), threads, [&](std::size_t i) {
        auto e = encode(product_sentence(catalog[i]), params);
        std::copy(e.begin(), e.end(), index.embeddings.begin() + static_cast<std::ptrdiff_t>(i * index.dim));
    });
    return index;
}

struct ScoredProduct {
    std::string omsid;
    double score = 0.0;
    std::size_t catalog_pos = 0;  // row in the catalog / index

    bool operator==(const ScoredProduct&) const = default;
};

struct TopProductSet {
    std::string query_id;
    std::vector<ScoredProduct> entries;

    bool operator==(const TopProductSet&) const = default;
};

inline constexpr std::size_t kDefaultTopK = 100;

/// Exact scan over an already-encoded query. Higher score first, ties by
/// catalog order.
inline TopProductSet top_k_from_embedding(std::span<const double> query, const CatalogIndex& index, std::size_t k_top,
                                          std::string query_id = {}) {
    if (query.size() != index.dim) throw DimError("query dim does not match index dim");
    std::vector<double> scores(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) scores[i] = cosine_similarity(query, index.row(i));
    std::vector<std::size_t> order(index.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t k = std::min(k_top, order.size());
    auto better = [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
    TopProductSet out;
    out.query_id = std::move(query_id);
    out.entries.reserve(k);
    for (std::size_t r = 0; r < k; ++r) out.entries.push_back({index.omsids[order[r]], scores[order[r]], order[r]});
    return out;
}

inline TopProductSet top_k_search(std::string_view query_text, const EncoderParams& params, const CatalogIndex& index,
                                  std::size_t k_top = kDefaultTopK, std::string query_id = {}) {
    if (params.fingerprint() != index.params_fingerprint)
        throw FingerprintMismatchError("index was built with different encoder params");
    return top_k_from_embedding(encode(query_text, params), index, k_top, std::move(query_id));
}

inline void write_top_products_csv(std::ostream& os, const std::vector<TopProductSet>& sets, bool header = true) {
    if (header) os << "query_id,rank,omsid,score\n";
    for (const auto& s : sets)
        for (std::size_t r = 0; r < s.entries.size(); ++r) {
            char buf[48];
            std::snprintf(buf, sizeof buf, "%.17g", s.entries[r].score);
            os << s.query_id << ',' << r << ',' << s.entries[r].omsid << ',' << buf << '\n';
        }
}

// ---------------------------------------------------------------------------
// Last-purchase relabeling

struct LabeledRank {
    std::size_t rank = 0;
    std::string omsid;
    int label = 0;

    bool operator==(const LabeledRank&) const = default;
};

struct LabelingOutput {
    std::string query_id;
    std::vector<LabeledRank> entries;
    std::size_t discarded_count = 0;
};

/// Keeps ranks up to and including the last purchased product: purchased
/// products get label 1, everything else (impressed, added-to-cart, unjudged)
/// label 0. Ranks after it are discarded; with no purchase in the set,
/// everything is discarded.
inline LabelingOutput label_top_products(const TopProductSet& top, const std::vector<Judgment>& judgments) {
    std::unordered_set<std::string> purchased;
    for (const auto& j : judgments)
        if (j.type == EngagementType::Purchased) purchased.insert(j.omsid);

    LabelingOutput out;
    out.query_id = top.query_id;
    std::optional<std::size_t> last;
    for (std::size_t r = 0; r < top.entries.size(); ++r)
        if (purchased.contains(top.entries[r].omsid)) last = r;
    if (!last) {
        out.discarded_count = top.entries.size();
        return out;
    }
    for (std::size_t r = 0; r <= *last; ++r)
        out.entries.push_back({r, top.entries[r].omsid, purchased.contains(top.entries[r].omsid) ? 1 : 0});
    out.discarded_count = top.entries.size() - (*last + 1);
    return out;
}

struct ClusterTrainingData {
    std::vector<LabeledPair> pairs;
    std::size_t skipped_queries = 0;
};

/// Retrieve with the baseline, relabel, and emit (query, product sentence,
/// label) pairs in query order.
inline ClusterTrainingData build_cluster_training_data(const std::vector<const QueryRecord*>& cluster_queries,
                                                       const EncoderParams& baseline, const CatalogIndex& index,
                                                       const std::vector<ProductRecord>& catalog,
                                                       std::size_t k_top = kDefaultTopK) {
    if (catalog.size() != index.size()) throw DimError("index and catalog sizes differ");
    ClusterTrainingData out;
    for (const QueryRecord* q : cluster_queries) {
        auto top = top_k_search(q->text, baseline, index, k_top, q->query_id);
        auto labeled = label_top_products(top, q->judgments);
        if (labeled.entries.empty()) {
            ++out.skipped_queries;
            continue;
        }
        for (const auto& e : labeled.entries)
            out.pairs.push_back({q->text, product_sentence(catalog[top.entries[e.rank].catalog_pos]), e.label});
    }
    return out;
}

/// Re-encodes the query and every product of `top` with the cluster model
/// and reorders the same entries by the new cosine (ties by original rank).
inline TopProductSet refine_top_products(std::string_view query_text, const TopProductSet& top,
                                         const EncoderParams& cluster_params,
                                         const std::vector<ProductRecord>& catalog) {
    const Embedding q = encode(query_text, cluster_params);
    std::vector<double> scores(top.entries.size());
    for (std::size_t r = 0; r < top.entries.size(); ++r) {
        const auto pos = top.entries[r].catalog_pos;
        if (pos >= catalog.size() || catalog[pos].omsid != top.entries[r].omsid)
            throw ValidationError("top product set does not match the catalog at " + top.entries[r].omsid);
        scores[r] = cosine_similarity(q, encode(product_sentence(catalog[pos]), cluster_params));
    }
    std::vector<std::size_t> order(top.entries.size());
    for (std::size_t r = 0; r < order.size(); ++r) order[r] = r;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    TopProductSet out;
    out.query_id = top.query_id;
    out.entries.reserve(order.size());
    for (auto r : order) out.entries.push_back({top.entries[r].omsid, scores[r], top.entries[r].catalog_pos});
    return out;
}

// ---------------------------------------------------------------------------
// Model registry

inline constexpr int kRegistryFormatVersion = 1;

struct RegistrySeeds {
    std::uint64_t global = 0;
    std::uint64_t init = 0;
    std::uint64_t train = 0;
    std::uint64_t kmeans = 0;

    bool operator==(const RegistrySeeds&) const = default;
};

/// Baseline params, K-Means router and per-cluster params. A cluster slot
/// without params is a fallback-to-baseline marker once clusters_trained.
struct ModelRegistry {
    FeaturizerConfig featurizer;
    std::size_t embed_dim = 64;
    std::size_t k_top = kDefaultTopK;
    RegistrySeeds seeds;
    std::optional<EncoderParams> baseline;
    std::optional<KMeansModel> kmeans;
    std::vector<std::optional<EncoderParams>> clusters;
    bool clusters_trained = false;

    std::size_t n_clusters() const { return kmeans ? kmeans->k() : 0; }

    std::vector<std::size_t> fallback_ids() const {
        std::vector<std::size_t> out;
        if (!clusters_trained) return out;
        for (std::size_t c = 0; c < clusters.size(); ++c)
            if (!clusters[c]) out.push_back(c);
        return out;
    }

    void require_complete() const {
        if (!baseline) throw RegistryError("registry has no baseline model");
        if (!kmeans) throw RegistryError("registry has no K-Means model");
        if (!clusters_trained || clusters.size() != kmeans->k())
            throw RegistryError("registry has no cluster models; run train-clusters");
    }

    /// Params used to refine for a cluster: its own, or the baseline on fallback.
    const EncoderParams& params_for(std::size_t cluster_id) const {
        require_complete();
        if (cluster_id >= clusters.size()) throw RegistryError("cluster id out of range: " + std::to_string(cluster_id));
        return clusters[cluster_id] ? *clusters[cluster_id] : *baseline;
    }
};

struct RoutedResult {
    std::size_t cluster_id = 0;
    TopProductSet baseline;
    TopProductSet refined;

    bool operator==(const RoutedResult&) const = default;
};

inline RoutedResult route_and_search(std::string_view query_text, const ModelRegistry& registry,
                                     const CatalogIndex& index, const std::vector<ProductRecord>& catalog,
                                     std::string query_id = {}) {
    registry.require_complete();
    if (registry.baseline->fingerprint() != index.params_fingerprint)
        throw FingerprintMismatchError("index was not built from the registry's baseline");
    RoutedResult out;
    const Embedding q = encode(query_text, *registry.baseline);
    out.cluster_id = assign(q, *registry.kmeans);
    out.baseline = top_k_from_embedding(q, index, registry.k_top, std::move(query_id));
    out.refined = refine_top_products(query_text, out.baseline, registry.params_for(out.cluster_id), catalog);
    return out;
}

namespace detail {

inline std::filesystem::path cluster_blob(const std::filesystem::path& dir, std::size_t id) {
    return dir / ("cluster_" + std::to_string(id) + ".f64");
}

}  // namespace detail

/// manifest.json, baseline.f64, kmeans.f64 and cluster_<id>.f64 files.
inline void save_registry(const ModelRegistry& reg, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create registry dir " + dir.string() + ": " + ec.message());

    nlohmann::ordered_json m;
    m["format_version"] = kRegistryFormatVersion;
    m["embed_dim"] = reg.embed_dim;
    m["n_buckets"] = reg.featurizer.n_buckets;
    m["ngram_min"] = reg.featurizer.ngram_min;
    m["ngram_max"] = reg.featurizer.ngram_max;
    m["max_tokens"] = reg.featurizer.max_tokens;
    m["hash_name"] = reg.featurizer.hash_name;
    m["n_clusters"] = reg.n_clusters();
    m["k_top"] = reg.k_top;
    m["seeds"] = {{"global", reg.seeds.global}, {"init", reg.seeds.init}, {"train", reg.seeds.train},
                  {"kmeans", reg.seeds.kmeans}};
    m["has_baseline"] = reg.baseline.has_value();
    m["has_kmeans"] = reg.kmeans.has_value();
    m["kmeans_iterations"] = reg.kmeans ? reg.kmeans->iterations_run : 0;
    m["clusters_trained"] = reg.clusters_trained;
    m["fallback_cluster_ids"] = reg.fallback_ids();

    auto check_shape = [&](const EncoderParams& p, const std::string& what) {
        if (p.embed_dim() != reg.embed_dim || !(p.featurizer() == reg.featurizer))
            throw ManifestError(what + " params do not match the registry shape");
    };
    if (reg.baseline) {
        check_shape(*reg.baseline, "baseline");
        write_f64_blob(dir / "baseline.f64", reg.baseline->row_major());
    }
    if (reg.kmeans) {
        if (reg.kmeans->dim() != reg.embed_dim) throw ManifestError("kmeans dim does not match embed_dim");
        write_f64_blob(dir / "kmeans.f64", reg.kmeans->row_major());
    }
    // Drop cluster blobs left over from an earlier save.
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        auto name = entry.path().filename().string();
        if (name.starts_with("cluster_") && name.ends_with(".f64")) std::filesystem::remove(entry.path());
    }
    if (reg.clusters_trained) {
        if (reg.clusters.size() != reg.n_clusters()) throw ManifestError("cluster slot count does not match kmeans");
        for (std::size_t c = 0; c < reg.clusters.size(); ++c)
            if (reg.clusters[c]) {
                check_shape(*reg.clusters[c], "cluster " + std::to_string(c));
                write_f64_blob(detail::cluster_blob(dir, c), reg.clusters[c]->row_major());
            }
    }
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("cannot write manifest in " + dir.string());
    out << m.dump(2) << '\n';
    if (!out) throw IoError("manifest write failed in " + dir.string());
}

inline ModelRegistry load_registry(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IoError("no manifest.json in " + dir.string());
    nlohmann::json m;
    ModelRegistry reg;
    std::size_t n_clusters = 0;
    std::vector<std::size_t> fallback;
    bool has_baseline = false;
    bool has_kmeans = false;
    try {
        in >> m;
        if (m.at("format_version").get<int>() != kRegistryFormatVersion)
            throw ManifestError("unsupported registry format_version " + m.at("format_version").dump());
        reg.embed_dim = m.at("embed_dim").get<std::size_t>();
        reg.featurizer.n_buckets = m.at("n_buckets").get<std::size_t>();
        reg.featurizer.ngram_min = m.at("ngram_min").get<int>();
        reg.featurizer.ngram_max = m.at("ngram_max").get<int>();
        reg.featurizer.max_tokens = m.at("max_tokens").get<std::size_t>();
        reg.featurizer.hash_name = m.at("hash_name").get<std::string>();
        reg.k_top = m.at("k_top").get<std::size_t>();
        const auto& s = m.at("seeds");
        reg.seeds = {s.at("global").get<std::uint64_t>(), s.at("init").get<std::uint64_t>(),
                     s.at("train").get<std::uint64_t>(), s.at("kmeans").get<std::uint64_t>()};
        n_clusters = m.at("n_clusters").get<std::size_t>();
        has_baseline = m.at("has_baseline").get<bool>();
        has_kmeans = m.at("has_kmeans").get<bool>();
        reg.clusters_trained = m.at("clusters_trained").get<bool>();
        fallback = m.at("fallback_cluster_ids").get<std::vector<std::size_t>>();
        reg.featurizer.validate();
        if (reg.embed_dim < 1) throw ManifestError("embed_dim must be >= 1");
    } catch (const nlohmann::json::exception& e) {
        throw ManifestError(std::string("malformed manifest: ") + e.what());
    } catch (const ConfigError& e) {
        throw ManifestError(std::string("invalid manifest: ") + e.what());
    }

    auto load_params = [&](const std::filesystem::path& path) {
        auto blob = read_f64_blob(path);
        if (blob.size() != reg.embed_dim * reg.featurizer.n_buckets)
            throw ManifestError(path.filename().string() + " holds " + std::to_string(blob.size()) +
                                " values; manifest shape is " + std::to_string(reg.embed_dim) + "x" +
                                std::to_string(reg.featurizer.n_buckets));
        return EncoderParams::from_row_major(reg.featurizer, reg.embed_dim, blob);
    };
    if (has_baseline) {
        if (!std::filesystem::exists(dir / "baseline.f64")) throw RegistryError("baseline.f64 missing in " + dir.string());
        reg.baseline = load_params(dir / "baseline.f64");
    }
    if (has_kmeans) {
        auto blob = read_f64_blob(dir / "kmeans.f64");
        if (n_clusters < 1 || blob.size() != n_clusters * reg.embed_dim)
            throw ManifestError("kmeans.f64 does not match n_clusters x embed_dim");
        reg.kmeans = KMeansModel::from_row_major(blob, n_clusters, reg.embed_dim);
        reg.kmeans->seed = reg.seeds.kmeans;
        reg.kmeans->iterations_run = m.value("kmeans_iterations", std::size_t{0});
    }
    if (reg.clusters_trained) {
        if (!has_kmeans) throw ManifestError("clusters_trained without a kmeans model");
        std::unordered_set<std::size_t> fb(fallback.begin(), fallback.end());
        reg.clusters.resize(n_clusters);
        for (std::size_t c = 0; c < n_clusters; ++c) {
            auto path = detail::cluster_blob(dir, c);
            if (fb.contains(c)) continue;
            if (!std::filesystem::exists(path))
                throw RegistryError("cluster " + std::to_string(c) + " has neither params nor a fallback marker");
            reg.clusters[c] = load_params(path);
        }
    }
    return reg;
}

}  // namespace clusterlm
