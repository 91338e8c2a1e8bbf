// clusterlm: command-line driver for the cluster language model pipeline.
//
// Exit codes: 0 success, 2 config error, 3 pipeline error, 4 usage error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "clusterlm/clusterlm.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitPipeline = 3;
constexpr int kExitUsage = 4;

struct Flags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> clusters;
    std::optional<std::size_t> k_top;
    std::optional<unsigned> threads;
    std::string format = "text";
    std::string elbow;
    std::string query;
};

clusterlm::PipelineConfig build_config(const Flags& f) {
    clusterlm::PipelineConfig cfg;
    if (!f.config_path.empty()) cfg = clusterlm::load_pipeline_config(f.config_path);
    if (f.seed) cfg.seed = *f.seed;
    if (f.clusters) cfg.n_clusters = *f.clusters;
    if (f.k_top) cfg.k_top = *f.k_top;
    if (f.threads) cfg.threads = *f.threads;
    if (!f.elbow.empty()) cfg.elbow = clusterlm::parse_k_range(f.elbow);
    std::filesystem::path home = std::filesystem::current_path();
    if (const char* env = std::getenv("CLUSTERLM_HOME"); env && *env) home = env;
    cfg.resolve_paths(home);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cluster language model retrieval pipeline"};
    app.require_subcommand(1);
    Flags f;
    app.add_option("--config", f.config_path, "JSON pipeline config")->check(CLI::ExistingFile);
    app.add_option("--seed", f.seed, "global seed");
    app.add_option("--clusters", f.clusters, "number of query clusters");
    app.add_option("--k-top", f.k_top, "size of the top product set");
    app.add_option("--threads", f.threads, "worker thread cap");
    app.add_option("--format", f.format, "output format")->check(CLI::IsMember({"text", "csv"}));
    app.add_option("--elbow", f.elbow, "k range for the Calinski-Harabasz scan, e.g. 2..10");

    auto* datagen = app.add_subcommand("datagen", "generate the synthetic dataset");
    auto* train_baseline = app.add_subcommand("train-baseline", "train the baseline encoder");
    auto* cluster = app.add_subcommand("cluster", "cluster training queries with mini-batch K-Means");
    auto* train_clusters = app.add_subcommand("train-clusters", "fine-tune one model per cluster");
    auto* eval = app.add_subcommand("eval", "evaluate baseline vs refined retrieval");
    auto* infer = app.add_subcommand("infer", "route and rank a single query");
    infer->add_option("query", f.query, "query text")->required();
    auto* report = app.add_subcommand("report", "print the report tables");
    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    const auto format = f.format == "csv" ? clusterlm::OutputFormat::Csv : clusterlm::OutputFormat::Text;
    try {
        auto cfg = build_config(f);
        if (datagen->parsed()) clusterlm::cmd_datagen(cfg, std::cout);
        else if (train_baseline->parsed()) clusterlm::cmd_train_baseline(cfg, std::cout);
        else if (cluster->parsed()) clusterlm::cmd_cluster(cfg, std::cout);
        else if (train_clusters->parsed()) clusterlm::cmd_train_clusters(cfg, std::cout);
        else if (eval->parsed()) clusterlm::cmd_eval(cfg, std::cout);
        else if (infer->parsed()) clusterlm::cmd_infer(cfg, f.query, format, std::cout);
        else if (report->parsed()) clusterlm::cmd_report(cfg, format, std::cout);
    } catch (const clusterlm::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const clusterlm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const clusterlm::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitPipeline;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitPipeline;
    }
    return 0;
}
