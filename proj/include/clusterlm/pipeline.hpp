#pragma once

// Batch orchestration behind the command-line tool: dataset generation,
// baseline training, clustering, per-cluster fine-tuning, evaluation,
// single-query inference and report printing.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "clustering.hpp"
#include "corpus.hpp"
#include "encoder.hpp"
#include "errors.hpp"
#include "evaluation.hpp"
#include "retrieval.hpp"
#include "trainer.hpp"
#include "util.hpp"

namespace clusterlm {

/// Bad command-line usage (e.g. an empty query).
class UsageError : public Error {
public:
    using Error::Error;
};

struct PipelinePaths {
    std::filesystem::path data_dir = "data";
    std::filesystem::path registry_dir = "registry";
    std::filesystem::path report_dir = "reports";
};

struct PipelineConfig {
    std::uint64_t seed = 42;
    SynthConfig synth;
    FeaturizerConfig featurizer;
    std::size_t embed_dim = 64;
    TrainConfig train;
    KMeansConfig kmeans;
    std::size_t n_clusters = 8;
    std::size_t k_top = kDefaultTopK;
    std::vector<std::size_t> thresholds = kDefaultThresholds;
    std::size_t max_cluster_size = 4000;
    PipelinePaths paths;
    std::optional<std::vector<std::size_t>> elbow;
    unsigned threads = 1;

    PipelineConfig() {
        train.learning_rate = 2.0;
        kmeans.batch_size = 1024;
        kmeans.max_iters = 300;
    }

    // Every stochastic stage gets its own stream of the global seed.
    std::uint64_t synth_seed() const { return derive_seed(seed, 1); }
    std::uint64_t init_seed() const { return derive_seed(seed, 2); }
    std::uint64_t train_seed() const { return derive_seed(seed, 3); }
    std::uint64_t kmeans_seed() const { return derive_seed(seed, 4); }
    std::uint64_t pair_seed() const { return derive_seed(seed, 5); }
    std::uint64_t cluster_train_seed(std::size_t cluster) const { return derive_seed(train_seed(), 100 + cluster); }

    SynthConfig synth_config() const {
        SynthConfig s = synth;
        s.seed = synth_seed();
        return s;
    }

    TrainConfig train_config() const {
        TrainConfig t = train;
        t.seed = train_seed();
        t.threads = threads;
        return t;
    }

    void validate() const {
        synth.validate();
        featurizer.validate();
        train.validate();
        if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
        if (n_clusters < 1) throw ConfigError("n_clusters must be >= 1");
        if (k_top < 1) throw ConfigError("k_top must be >= 1");
        if (kmeans.batch_size < 1) throw ConfigError("kmeans.batch_size must be >= 1");
        if (thresholds.empty()) throw ConfigError("thresholds must be nonempty");
        for (std::size_t i = 0; i < thresholds.size(); ++i) {
            if (thresholds[i] < 1) throw ConfigError("thresholds must be >= 1");
            if (i > 0 && thresholds[i] <= thresholds[i - 1]) throw ConfigError("thresholds must be sorted ascending");
        }
        const auto& p = paths;
        if (p.data_dir == p.registry_dir || p.data_dir == p.report_dir || p.registry_dir == p.report_dir)
            throw ConfigError("data, registry and report paths must be distinct");
    }

    /// Resolves relative paths against `home`.
    void resolve_paths(const std::filesystem::path& home) {
        for (auto* p : {&paths.data_dir, &paths.registry_dir, &paths.report_dir})
            if (p->is_relative()) *p = home / *p;
    }
};

/// Parses "2..10" or "2,3,5".
inline std::vector<std::size_t> parse_k_range(const std::string& spec) {
    std::vector<std::size_t> out;
    try {
        auto dots = spec.find("..");
        if (dots != std::string::npos) {
            std::size_t lo = std::stoul(spec.substr(0, dots));
            std::size_t hi = std::stoul(spec.substr(dots + 2));
            if (lo > hi) throw ConfigError("empty k range: " + spec);
            for (std::size_t k = lo; k <= hi; ++k) out.push_back(k);
        } else {
            std::stringstream ss(spec);
            std::string item;
            while (std::getline(ss, item, ',')) out.push_back(std::stoul(item));
        }
    } catch (const std::logic_error&) {
        throw ConfigError("bad k range: " + spec);
    }
    if (out.empty()) throw ConfigError("bad k range: " + spec);
    return out;
}

namespace detail {

template <typename T>
void read_field(const nlohmann::json& obj, const char* key, T& target) {
    if (obj.contains(key)) target = obj.at(key).get<T>();
}

inline void check_keys(const nlohmann::json& obj, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || it.key() == a;
        if (!ok) throw ConfigError("unknown config key '" + it.key() + "' in " + where);
    }
}

}  // namespace detail

inline PipelineConfig parse_pipeline_config(const nlohmann::json& j) {
    PipelineConfig c;
    try {
        detail::check_keys(j,
                           {"seed", "synth", "featurizer", "embed_dim", "train", "kmeans", "n_clusters", "k_top",
                            "thresholds", "max_cluster_size", "paths", "elbow", "threads"},
                           "config");
        detail::read_field(j, "seed", c.seed);
        detail::read_field(j, "embed_dim", c.embed_dim);
        detail::read_field(j, "n_clusters", c.n_clusters);
        detail::read_field(j, "k_top", c.k_top);
        detail::read_field(j, "thresholds", c.thresholds);
        detail::read_field(j, "max_cluster_size", c.max_cluster_size);
        detail::read_field(j, "threads", c.threads);
        if (j.contains("elbow")) c.elbow = parse_k_range(j.at("elbow").get<std::string>());
        if (j.contains("synth")) {
            const auto& s = j.at("synth");
            detail::check_keys(s,
                               {"n_intents", "products_per_intent", "train_queries_per_intent",
                                "test_queries_per_intent", "vocab_noise_rate", "purchases_min", "purchases_max",
                                "impressions_per_query", "core_vocab_size", "n_brands", "preferred_brands_per_intent"},
                               "synth");
            detail::read_field(s, "n_intents", c.synth.n_intents);
            detail::read_field(s, "products_per_intent", c.synth.products_per_intent);
            detail::read_field(s, "train_queries_per_intent", c.synth.train_queries_per_intent);
            detail::read_field(s, "test_queries_per_intent", c.synth.test_queries_per_intent);
            detail::read_field(s, "vocab_noise_rate", c.synth.vocab_noise_rate);
            detail::read_field(s, "purchases_min", c.synth.purchases_min);
            detail::read_field(s, "purchases_max", c.synth.purchases_max);
            detail::read_field(s, "impressions_per_query", c.synth.impressions_per_query);
            detail::read_field(s, "core_vocab_size", c.synth.core_vocab_size);
            detail::read_field(s, "n_brands", c.synth.n_brands);
            detail::read_field(s, "preferred_brands_per_intent", c.synth.preferred_brands_per_intent);
        }
        if (j.contains("featurizer")) {
            const auto& f = j.at("featurizer");
            detail::check_keys(f, {"ngram_min", "ngram_max", "n_buckets", "max_tokens", "hash_name"}, "featurizer");
            detail::read_field(f, "ngram_min", c.featurizer.ngram_min);
            detail::read_field(f, "ngram_max", c.featurizer.ngram_max);
            detail::read_field(f, "n_buckets", c.featurizer.n_buckets);
            detail::read_field(f, "max_tokens", c.featurizer.max_tokens);
            detail::read_field(f, "hash_name", c.featurizer.hash_name);
        }
        if (j.contains("train")) {
            const auto& t = j.at("train");
            detail::check_keys(t,
                               {"margin", "learning_rate", "batch_size", "epochs_baseline", "epochs_cluster",
                                "negatives_per_positive"},
                               "train");
            detail::read_field(t, "margin", c.train.margin);
            detail::read_field(t, "learning_rate", c.train.learning_rate);
            detail::read_field(t, "batch_size", c.train.batch_size);
            detail::read_field(t, "epochs_baseline", c.train.epochs_baseline);
            detail::read_field(t, "epochs_cluster", c.train.epochs_cluster);
            detail::read_field(t, "negatives_per_positive", c.train.negatives_per_positive);
        }
        if (j.contains("kmeans")) {
            const auto& k = j.at("kmeans");
            detail::check_keys(k, {"batch_size", "max_iters"}, "kmeans");
            detail::read_field(k, "batch_size", c.kmeans.batch_size);
            detail::read_field(k, "max_iters", c.kmeans.max_iters);
        }
        if (j.contains("paths")) {
            const auto& p = j.at("paths");
            detail::check_keys(p, {"data_dir", "registry_dir", "report_dir"}, "paths");
            if (p.contains("data_dir")) c.paths.data_dir = p.at("data_dir").get<std::string>();
            if (p.contains("registry_dir")) c.paths.registry_dir = p.at("registry_dir").get<std::string>();
            if (p.contains("report_dir")) c.paths.report_dir = p.at("report_dir").get<std::string>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config value: ") + e.what());
    }
    return c;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    return parse_pipeline_config(j);
}

namespace detail {

inline void ensure_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

template <typename WriteFn>
void write_report(const std::filesystem::path& path, WriteFn&& fn) {
    ensure_dir(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    fn(out);
    if (!out) throw IoError("write failed: " + path.string());
}

inline ModelRegistry registry_shell(const PipelineConfig& cfg) {
    ModelRegistry reg;
    reg.featurizer = cfg.featurizer;
    reg.embed_dim = cfg.embed_dim;
    reg.k_top = cfg.k_top;
    reg.seeds = {cfg.seed, cfg.init_seed(), cfg.train_seed(), cfg.kmeans_seed()};
    return reg;
}

inline std::vector<Embedding> encode_queries(const std::vector<QueryRecord>& qs, const EncoderParams& params,
                                             unsigned threads) {
    std::vector<Embedding> out(qs.size());
    parallel_for(qs.size(), threads, [&](std::size_t i) { out[i] = encode(qs[i].text, params); });
    return out;
}

inline Dataset load_pipeline_dataset(const PipelineConfig& cfg) {
    return load_dataset(DatasetPaths::in_dir(cfg.paths.data_dir));
}

inline ModelRegistry load_with_baseline(const PipelineConfig& cfg) {
    auto reg = load_registry(cfg.paths.registry_dir);
    if (!reg.baseline) throw RegistryError("registry has no baseline; run train-baseline first");
    return reg;
}

}  // namespace detail

inline void cmd_datagen(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    auto d = generate_synthetic(cfg.synth_config());
    detail::ensure_dir(cfg.paths.data_dir);
    save_dataset(d, DatasetPaths::in_dir(cfg.paths.data_dir));
    log << "products=" << d.catalog.size() << " train_queries=" << d.train_queries.size()
        << " test_queries=" << d.test_queries.size() << "\n";
}

inline TrainReport cmd_train_baseline(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    auto d = detail::load_pipeline_dataset(cfg);
    auto tc = cfg.train_config();
    std::mt19937_64 rng(cfg.pair_seed());
    auto pairs = build_baseline_pairs(d.train_queries, d.catalog, tc, rng);
    auto params = EncoderParams::random(cfg.featurizer, cfg.embed_dim, cfg.init_seed());
    TrainReport report;
    if (tc.epochs_baseline > 0) std::tie(params, report) = train(std::move(params), pairs, tc, tc.epochs_baseline);
    auto reg = detail::registry_shell(cfg);
    reg.baseline = std::move(params);
    save_registry(reg, cfg.paths.registry_dir);
    detail::write_report(cfg.paths.report_dir / "train_baseline.csv", [&](std::ostream& os) { report.write_csv(os); });
    log << "pairs=" << pairs.size() << " epochs=" << report.epochs.size();
    if (!report.epochs.empty())
        log << " first_loss=" << report.epochs.front().mean_loss << " last_loss=" << report.epochs.back().mean_loss;
    log << "\n";
    return report;
}

struct ClusterCommandResult {
    KMeansModel model;
    std::vector<std::size_t> assignment;
    ClusterDiagnostics diagnostics;
    std::vector<ClusterSizeWarning> warnings;
    std::vector<ElbowRow> elbow;
};

inline ClusterCommandResult cmd_cluster(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    auto d = detail::load_pipeline_dataset(cfg);
    auto reg = detail::load_with_baseline(cfg);
    auto emb = detail::encode_queries(d.train_queries, *reg.baseline, cfg.threads);

    ClusterCommandResult res;
    res.model = fit_minibatch_kmeans(emb, cfg.n_clusters, cfg.kmeans.batch_size, cfg.kmeans.max_iters, cfg.kmeans_seed());
    res.assignment = assign_all(emb, res.model);
    res.diagnostics = diagnostics(emb, res.assignment, res.model);
    res.warnings = check_cluster_sizes(res.assignment, res.model.k(), cfg.max_cluster_size);

    reg.seeds.kmeans = cfg.kmeans_seed();
    reg.kmeans = res.model;
    reg.clusters.clear();
    reg.clusters_trained = false;
    save_registry(reg, cfg.paths.registry_dir);

    const auto& rd = cfg.paths.report_dir;
    detail::write_report(rd / "cluster_diagnostics.csv", [&](std::ostream& os) { write_diagnostics_csv(os, res.diagnostics); });
    detail::write_report(rd / "center_distances.csv",
                         [&](std::ostream& os) { write_center_distance_csv(os, res.diagnostics.center_distances); });
    detail::write_report(rd / "train_assignments.csv", [&](std::ostream& os) {
        os << "query_id,cluster_id\n";
        for (std::size_t i = 0; i < d.train_queries.size(); ++i)
            os << d.train_queries[i].query_id << ',' << res.assignment[i] << '\n';
    });
    if (cfg.elbow) {
        KMeansConfig kc = cfg.kmeans;
        kc.seed = cfg.kmeans_seed();
        res.elbow = elbow_scan(emb, *cfg.elbow, kc);
        detail::write_report(rd / "elbow.csv", [&](std::ostream& os) { write_elbow_csv(os, res.elbow); });
    }
    log << "clusters=" << res.model.k() << " iterations=" << res.model.iterations_run;
    if (res.diagnostics.ch_score) log << " ch=" << *res.diagnostics.ch_score;
    log << "\n";
    for (const auto& w : res.warnings)
        log << "warning: cluster " << w.cluster_id << " has " << w.size << " queries (limit " << w.limit << ")\n";
    return res;
}

struct ClusterTrainingSummary {
    std::size_t cluster_id = 0;
    std::size_t queries = 0;
    std::size_t pairs = 0;
    std::size_t skipped = 0;
    bool fallback = false;
};

inline std::vector<ClusterTrainingSummary> cmd_train_clusters(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    auto d = detail::load_pipeline_dataset(cfg);
    auto reg = detail::load_with_baseline(cfg);
    if (!reg.kmeans) throw RegistryError("registry has no K-Means model; run cluster first");
    const auto& baseline = *reg.baseline;
    auto index = build_index(d.catalog, baseline, cfg.threads);
    auto emb = detail::encode_queries(d.train_queries, baseline, cfg.threads);
    auto labels = assign_all(emb, *reg.kmeans);

    const std::size_t k = reg.kmeans->k();
    std::vector<std::vector<const QueryRecord*>> members(k);
    for (std::size_t i = 0; i < d.train_queries.size(); ++i) members[labels[i]].push_back(&d.train_queries[i]);

    std::vector<ClusterTrainingSummary> summary;
    reg.clusters.assign(k, std::nullopt);
    for (std::size_t c = 0; c < k; ++c) {
        auto data = build_cluster_training_data(members[c], baseline, index, d.catalog, reg.k_top);
        ClusterTrainingSummary s{c, members[c].size(), data.pairs.size(), data.skipped_queries, data.pairs.empty()};
        if (!data.pairs.empty()) {
            TrainConfig tc = cfg.train_config();
            tc.seed = cfg.cluster_train_seed(c);
            try {
                reg.clusters[c] = fine_tune_cluster(baseline, data.pairs, tc);
            } catch (const Error& e) {
                throw Error("training cluster " + std::to_string(c) + " failed: " + e.what());
            }
        }
        log << "cluster " << c << ": queries=" << s.queries << " pairs=" << s.pairs << " skipped=" << s.skipped
            << (s.fallback ? " fallback=baseline" : "") << "\n";
        summary.push_back(s);
    }
    reg.clusters_trained = true;
    save_registry(reg, cfg.paths.registry_dir);
    detail::write_report(cfg.paths.report_dir / "cluster_training.csv", [&](std::ostream& os) {
        os << "cluster_id,queries,pairs,skipped_queries,fallback\n";
        for (const auto& s : summary)
            os << s.cluster_id << ',' << s.queries << ',' << s.pairs << ',' << s.skipped << ',' << (s.fallback ? 1 : 0)
               << '\n';
    });
    return summary;
}

struct EvalOutputs {
    EvalReport eval;
    ClusterReport clusters;
    TimingReport timing;
    ClusterDiagnostics diagnostics;
};

inline EvalOutputs cmd_eval(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    auto d = detail::load_pipeline_dataset(cfg);
    auto reg = load_registry(cfg.paths.registry_dir);
    reg.require_complete();
    auto index = build_index(d.catalog, *reg.baseline, cfg.threads);

    std::vector<RoutedResult> routed(d.test_queries.size());
    parallel_for(d.test_queries.size(), cfg.threads, [&](std::size_t i) {
        routed[i] = route_and_search(d.test_queries[i].text, reg, index, d.catalog, d.test_queries[i].query_id);
    });
    std::vector<TopProductSet> base_sets, ref_sets;
    std::vector<std::size_t> test_assign;
    for (auto& r : routed) {
        test_assign.push_back(r.cluster_id);
        base_sets.push_back(r.baseline);
        ref_sets.push_back(r.refined);
    }

    EvalOutputs out;
    out.eval = evaluate_run(d.test_queries, base_sets, ref_sets, cfg.thresholds);
    auto train_emb = detail::encode_queries(d.train_queries, *reg.baseline, cfg.threads);
    auto train_assign = assign_all(train_emb, *reg.kmeans);
    out.diagnostics = diagnostics(train_emb, train_assign, *reg.kmeans);
    const std::size_t k = reg.n_clusters();
    auto rb = per_cluster_recall(d.test_queries, test_assign, base_sets, k, 24);
    auto rc = per_cluster_recall(d.test_queries, test_assign, ref_sets, k, 24);
    out.clusters = cluster_level_report(train_assign, test_assign, d.train_queries, d.test_queries, rb, rc, out.diagnostics);
    out.timing = timing_harness(reg, index, d.catalog, d.test_queries);

    const auto& rd = cfg.paths.report_dir;
    detail::write_report(rd / "eval.csv", [&](std::ostream& os) { out.eval.write_csv(os); });
    detail::write_report(rd / "cluster_report.csv", [&](std::ostream& os) { out.clusters.write_csv(os); });
    detail::write_report(rd / "cluster_recall.csv", [&](std::ostream& os) { write_cluster_recall_csv(os, out.clusters); });
    detail::write_report(rd / "center_distances.csv",
                         [&](std::ostream& os) { write_center_distance_csv(os, out.diagnostics.center_distances); });
    detail::write_report(rd / "timing.csv", [&](std::ostream& os) { out.timing.write_csv(os); });
    detail::write_report(rd / "top_baseline.csv", [&](std::ostream& os) { write_top_products_csv(os, base_sets); });
    detail::write_report(rd / "top_refined.csv", [&](std::ostream& os) { write_top_products_csv(os, ref_sets); });

    log << "evaluated=" << out.eval.evaluated_queries << " excluded=" << out.eval.excluded_queries << "\n";
    log << std::fixed << std::setprecision(4);
    for (std::size_t i = 0; i < out.eval.thresholds.size(); ++i)
        log << "@" << out.eval.thresholds[i] << " recall " << out.eval.recall_baseline[i] << " -> "
            << out.eval.recall_cluster[i] << "  ndcg " << out.eval.ndcg_baseline[i] << " -> " << out.eval.ndcg_cluster[i]
            << "\n";
    log << std::defaultfloat;
    return out;
}

enum class OutputFormat { Text, Csv };

inline RoutedResult cmd_infer(const PipelineConfig& cfg, const std::string& query, OutputFormat format, std::ostream& out) {
    if (normalize_text(query).empty()) throw UsageError("query must be nonempty");
    cfg.validate();
    auto d = detail::load_pipeline_dataset(cfg);
    auto reg = load_registry(cfg.paths.registry_dir);
    reg.require_complete();
    auto index = build_index(d.catalog, *reg.baseline, cfg.threads);
    auto res = route_and_search(query, reg, index, d.catalog, "query");
    if (format == OutputFormat::Csv) {
        out << "system,cluster_id,rank,omsid,score\n";
        for (auto [name, set] : {std::pair{"baseline", &res.baseline}, std::pair{"refined", &res.refined}})
            for (std::size_t r = 0; r < set->entries.size(); ++r) {
                char buf[40];
                std::snprintf(buf, sizeof buf, "%.17g", set->entries[r].score);
                out << name << ',' << res.cluster_id << ',' << r + 1 << ',' << set->entries[r].omsid << ',' << buf << '\n';
            }
    } else {
        out << "cluster_id " << res.cluster_id << "\n";
        for (auto [name, set] : {std::pair{"baseline", &res.baseline}, std::pair{"refined", &res.refined}}) {
            out << name << ":\n";
            for (std::size_t r = 0; r < set->entries.size(); ++r) {
                char buf[96];
                std::snprintf(buf, sizeof buf, "%4zu  %-10s  %.6f\n", r + 1, set->entries[r].omsid.c_str(),
                              set->entries[r].score);
                out << buf;
            }
        }
    }
    return res;
}

/// Prints the CSV reports found in the report directory.
inline void cmd_report(const PipelineConfig& cfg, OutputFormat format, std::ostream& out) {
    static const char* kReports[] = {"eval.csv", "cluster_report.csv", "timing.csv", "cluster_diagnostics.csv",
                                     "elbow.csv", "train_baseline.csv", "cluster_training.csv"};
    std::size_t found = 0;
    for (const char* name : kReports) {
        auto path = cfg.paths.report_dir / name;
        std::ifstream in(path);
        if (!in) continue;
        ++found;
        out << "== " << name << "\n";
        std::string line;
        while (std::getline(in, line)) {
            if (format == OutputFormat::Csv) {
                out << line << "\n";
                continue;
            }
            std::stringstream ss(line);
            std::string cell;
            bool first = true;
            while (std::getline(ss, cell, ',')) {
                // Shorten long floats for the table view.
                char* end = nullptr;
                double v = std::strtod(cell.c_str(), &end);
                std::string shown = cell;
                if (!cell.empty() && end && *end == '\0' && cell.find('.') != std::string::npos) {
                    char buf[32];
                    std::snprintf(buf, sizeof buf, "%.4f", v);
                    shown = buf;
                }
                out << (first ? "" : "  ") << std::setw(14) << shown;
                first = false;
            }
            out << "\n";
        }
    }
    if (found == 0) throw IoError("no reports in " + cfg.paths.report_dir.string());
}

}  // namespace clusterlm
