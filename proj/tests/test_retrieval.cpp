#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <set>

#include "test_support.hpp"

namespace clusterlm {
namespace {

using testing::TempDir;

std::vector<ProductRecord> hardware_catalog() {
    return {{"P1", "cordless drill", "bolt", "black", "drills"},
            {"P2", "garden hose", "aqua", "green", "hoses"},
            {"P3", "led lamp", "lumo", "white", "lighting"}};
}

TEST(BuildIndex, UnitRowsAndDeterminism) {
    auto params = EncoderParams::random(testing::small_featurizer(), 8, 1);
    auto index = build_index(hardware_catalog(), params);
    ASSERT_EQ(index.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(l2_norm(index.row(i)), 1.0, 1e-12);
    EXPECT_EQ(index, build_index(hardware_catalog(), params, 4));
    auto other = EncoderParams::random(testing::small_featurizer(), 8, 2);
    EXPECT_NE(build_index(hardware_catalog(), other).params_fingerprint, index.params_fingerprint);
    EXPECT_THROW(build_index({}, params), EmptyCatalogError);
}

TEST(TopK, FullCatalogIdentityAndFingerprintCheck) {
    auto params = EncoderParams::random(testing::small_featurizer(), 8, 1);
    auto cat = hardware_catalog();
    auto index = build_index(cat, params);
    auto top = top_k_search(product_sentence(cat[1]), params, index, 100, "q");
    ASSERT_EQ(top.entries.size(), 3u);
    EXPECT_EQ(top.entries[0].omsid, "P2");
    EXPECT_NEAR(top.entries[0].score, 1.0, 1e-12);
    for (std::size_t r = 1; r < 3; ++r) EXPECT_GE(top.entries[r - 1].score, top.entries[r].score);
    auto other = EncoderParams::random(testing::small_featurizer(), 8, 2);
    EXPECT_THROW(top_k_search("drill", other, index, 10), FingerprintMismatchError);
}

TEST(TopK, MatchesOracleOnRandomCatalogsWithTies) {
    std::mt19937_64 rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        std::size_t n = 1 + rng() % 1000;
        auto index = testing::random_tied_index(n, 6, rng);
        Embedding q = testing::random_unit(6, rng);
        if (trial % 3 == 0) {
            auto row = index.row(rng() % n);
            q.assign(row.begin(), row.end());
        }
        std::size_t k = 1 + rng() % 120;
        auto got = top_k_from_embedding(q, index, k);
        auto want = testing::oracle_top_k(q, index, k);
        ASSERT_EQ(got.entries.size(), want.size());
        for (std::size_t r = 0; r < want.size(); ++r) {
            EXPECT_EQ(got.entries[r].catalog_pos, want[r].first) << "trial " << trial << " rank " << r;
            EXPECT_EQ(got.entries[r].score, want[r].second);
        }
    }
}

TEST(TopK, MatchesOracleOnEncodedCatalog) {
    auto corpus = generate_synthetic(testing::small_synth(4));
    auto params = EncoderParams::random(testing::small_featurizer(), 12, 6);
    std::vector<ProductRecord> cat(corpus.catalog.begin(), corpus.catalog.begin() + 50);
    auto index = build_index(cat, params);
    for (const auto& q : corpus.test_queries) {
        auto got = top_k_search(q.text, params, index, 20);
        auto want = testing::oracle_top_k(encode(q.text, params), index, 20);
        for (std::size_t r = 0; r < want.size(); ++r) EXPECT_EQ(got.entries[r].catalog_pos, want[r].first);
    }
}

TopProductSet ranked(std::size_t n) {
    TopProductSet t;
    t.query_id = "q";
    for (std::size_t r = 0; r < n; ++r)
        t.entries.push_back({"P" + std::to_string(r), 1.0 - 0.01 * static_cast<double>(r), r});
    return t;
}

TEST(Labeling, LastPurchasePattern) {
    auto top = ranked(100);
    std::vector<Judgment> js = {{"P0", EngagementType::Purchased},
                                {"P2", EngagementType::Impressed},
                                {"P3", EngagementType::AddedToCart},
                                {"P6", EngagementType::Purchased},
                                {"P50", EngagementType::Impressed}};
    auto out = label_top_products(top, js);
    ASSERT_EQ(out.entries.size(), 7u);
    for (std::size_t r = 0; r < 7; ++r) {
        EXPECT_EQ(out.entries[r].rank, r);
        EXPECT_EQ(out.entries[r].label, (r == 0 || r == 6) ? 1 : 0) << r;
    }
    EXPECT_EQ(out.discarded_count, 93u);
}

TEST(Labeling, NoPurchaseAndRankZeroBoundary) {
    auto top = ranked(100);
    auto none = label_top_products(top, {{"P1", EngagementType::AddedToCart}, {"P999", EngagementType::Purchased}});
    EXPECT_TRUE(none.entries.empty());
    EXPECT_EQ(none.discarded_count, 100u);
    auto first = label_top_products(top, {{"P0", EngagementType::Purchased}});
    ASSERT_EQ(first.entries.size(), 1u);
    EXPECT_EQ(first.entries[0].label, 1);
    EXPECT_EQ(first.discarded_count, 99u);
}

TEST(Labeling, AgreesWithReferenceOnRandomFixtures) {
    std::mt19937_64 rng(12);
    for (int t = 0; t < 2000; ++t) {
        auto [top, js] = testing::random_labeling_fixture(rng);
        std::vector<std::string> ids;
        for (const auto& e : top.entries) ids.push_back(e.omsid);
        std::set<std::string> purchased;
        for (const auto& j : js)
            if (j.type == EngagementType::Purchased) purchased.insert(j.omsid);
        auto want = testing::reference_labels(ids, purchased);
        auto got = label_top_products(top, js);
        ASSERT_EQ(got.entries.size(), want.kept.size());
        EXPECT_EQ(got.discarded_count, want.discarded);
        for (std::size_t i = 0; i < want.kept.size(); ++i) {
            EXPECT_EQ(got.entries[i].rank, want.kept[i].first);
            EXPECT_EQ(got.entries[i].label, want.kept[i].second);
        }
        if (!got.entries.empty()) {
            EXPECT_EQ(got.entries.back().label, 1);
        }
    }
}

TEST(ClusterTrainingData, CountsAndSkips) {
    auto cat = hardware_catalog();
    auto params = EncoderParams::random(testing::small_featurizer(), 8, 1);
    auto index = build_index(cat, params);
    // Purchasing the last-ranked product keeps all three ranks.
    auto order = top_k_search("garden hose", params, index, 3);
    QueryRecord a{"a", "garden hose", {{order.entries[2].omsid, EngagementType::Purchased}}};
    QueryRecord b{"b", "garden hose", {{order.entries[2].omsid, EngagementType::Purchased}}};
    QueryRecord none{"c", "lamp", {{"P1", EngagementType::Impressed}}};
    auto data = build_cluster_training_data({&a, &b, &none}, params, index, cat, 3);
    EXPECT_EQ(data.pairs.size(), 6u);
    EXPECT_EQ(data.skipped_queries, 1u);
    for (const auto& p : data.pairs)
        if (p.label == 1) {
            EXPECT_EQ(p.product_text, product_sentence(cat[order.entries[2].catalog_pos]));
        }
    auto empty = build_cluster_training_data({&none, &none}, params, index, cat, 3);
    EXPECT_TRUE(empty.pairs.empty());
    EXPECT_EQ(empty.skipped_queries, 2u);
}

TEST(Refine, IdentityWhenParamsMatch) {
    auto corpus = generate_synthetic(testing::small_synth(4));
    auto params = EncoderParams::random(testing::small_featurizer(), 12, 6);
    auto index = build_index(corpus.catalog, params);
    for (std::size_t i = 0; i < 10; ++i) {
        const auto& q = corpus.test_queries[i];
        auto top = top_k_search(q.text, params, index, 40, q.query_id);
        auto refined = refine_top_products(q.text, top, params, corpus.catalog);
        EXPECT_EQ(refined, top);
    }
}

TEST(Refine, PermutationAndRescoringOracle) {
    auto corpus = generate_synthetic(testing::small_synth(4));
    auto base = EncoderParams::random(testing::small_featurizer(), 12, 6);
    auto other = EncoderParams::random(testing::small_featurizer(), 12, 7);
    auto index = build_index(corpus.catalog, base);
    for (const auto& q : corpus.test_queries) {
        auto top = top_k_search(q.text, base, index, 50, q.query_id);
        auto refined = refine_top_products(q.text, top, other, corpus.catalog);
        std::multiset<std::string> a, b;
        for (const auto& e : top.entries) a.insert(e.omsid);
        for (const auto& e : refined.entries) b.insert(e.omsid);
        EXPECT_EQ(a, b);
        auto qe = encode(q.text, other);
        for (std::size_t r = 0; r < refined.entries.size(); ++r) {
            const auto& e = refined.entries[r];
            EXPECT_EQ(e.score, cosine_similarity(qe, encode(product_sentence(corpus.catalog[e.catalog_pos]), other)));
            if (r > 0) {
                EXPECT_GE(refined.entries[r - 1].score, e.score);
            }
        }
    }
}

TEST(Refine, TiesKeepOriginalRank) {
    std::vector<ProductRecord> cat = {{"A", "hose", "", "", ""}, {"B", "hose", "", "", ""}, {"C", "drill", "", "", ""}};
    // All-zero weights send every text to the fallback vector, so every score ties.
    EncoderParams zero(testing::small_featurizer(), 8);
    TopProductSet top;
    top.entries = {{"C", 0.9, 2}, {"A", 0.8, 0}, {"B", 0.7, 1}};
    auto refined = refine_top_products("hose", top, zero, cat);
    ASSERT_EQ(refined.entries.size(), 3u);
    for (std::size_t r = 0; r < 3; ++r) {
        EXPECT_EQ(refined.entries[r].omsid, top.entries[r].omsid);
        EXPECT_EQ(refined.entries[r].score, 1.0);
    }
    TopProductSet mismatch;
    mismatch.entries = {{"Z", 1.0, 0}};
    EXPECT_THROW(refine_top_products("hose", mismatch, zero, cat), ValidationError);
}

ModelRegistry small_registry(bool with_fallback) {
    ModelRegistry reg;
    reg.featurizer = testing::small_featurizer(256);
    reg.embed_dim = 4;
    reg.k_top = 10;
    reg.seeds = {42, 1, 2, 3};
    reg.baseline = EncoderParams::random(reg.featurizer, 4, 10);
    auto blobs = testing::planted_blobs(3, 10, 4, 3.0, 0.3, 1);
    reg.kmeans = fit_minibatch_kmeans(blobs.points, 3, 8, 20, 3);
    reg.kmeans->seed = reg.seeds.kmeans;
    reg.clusters_trained = true;
    reg.clusters.resize(3);
    for (std::size_t c = 0; c < 3; ++c)
        if (!(with_fallback && c == 1)) reg.clusters[c] = EncoderParams::random(reg.featurizer, 4, 20 + c);
    return reg;
}

TEST(Registry, RoundTripIsBitExact) {
    TempDir dir;
    auto reg = small_registry(true);
    save_registry(reg, dir.path());
    auto back = load_registry(dir.path());
    ASSERT_TRUE(back.baseline && back.kmeans);
    EXPECT_EQ(*back.baseline, *reg.baseline);
    EXPECT_EQ(back.kmeans->centers, reg.kmeans->centers);
    EXPECT_EQ(back.kmeans->iterations_run, reg.kmeans->iterations_run);
    ASSERT_EQ(back.clusters.size(), 3u);
    EXPECT_FALSE(back.clusters[1].has_value());
    EXPECT_EQ(*back.clusters[0], *reg.clusters[0]);
    EXPECT_EQ(*back.clusters[2], *reg.clusters[2]);
    EXPECT_EQ(back.fallback_ids(), (std::vector<std::size_t>{1}));
    EXPECT_EQ(back.seeds, reg.seeds);
    EXPECT_EQ(back.featurizer, reg.featurizer);
    // Saving again over the same directory is byte-stable.
    auto manifest = testing::read_file(dir / "manifest.json");
    auto blob = testing::read_file(dir / "cluster_2.f64");
    save_registry(back, dir.path());
    EXPECT_EQ(testing::read_file(dir / "manifest.json"), manifest);
    EXPECT_EQ(testing::read_file(dir / "cluster_2.f64"), blob);
}

void edit_manifest(const std::filesystem::path& dir, const std::string& key, const nlohmann::json& value) {
    std::ifstream in(dir / "manifest.json");
    nlohmann::ordered_json m;
    in >> m;
    in.close();
    m[key] = value;
    std::ofstream(dir / "manifest.json") << m.dump(2);
}

TEST(Registry, WrongEmbedDimIsManifestError) {
    TempDir dir;
    save_registry(small_registry(false), dir.path());
    edit_manifest(dir.path(), "embed_dim", 5);
    EXPECT_THROW(load_registry(dir.path()), ManifestError);
}

TEST(Registry, WrongVersionIsManifestError) {
    TempDir dir;
    save_registry(small_registry(false), dir.path());
    edit_manifest(dir.path(), "format_version", 99);
    EXPECT_THROW(load_registry(dir.path()), ManifestError);
}

TEST(Registry, MissingClusterFileIsRegistryError) {
    TempDir dir;
    save_registry(small_registry(false), dir.path());
    std::filesystem::remove(dir / "cluster_0.f64");
    EXPECT_THROW(load_registry(dir.path()), RegistryError);
}

TEST(Registry, MissingManifestIsIoError) {
    TempDir dir;
    EXPECT_THROW(load_registry(dir.path()), IoError);
}

TEST(RouteAndSearch, FallbackRangeAndDeterminism) {
    auto corpus = generate_synthetic(testing::small_synth(4));
    ModelRegistry reg;
    reg.featurizer = testing::small_featurizer(1024);
    reg.embed_dim = 6;
    reg.k_top = 25;
    reg.baseline = EncoderParams::random(reg.featurizer, 6, 1);
    std::vector<Embedding> emb;
    for (const auto& q : corpus.train_queries) emb.push_back(encode(q.text, *reg.baseline));
    reg.kmeans = fit_minibatch_kmeans(emb, 3, 64, 50, 2);
    reg.clusters_trained = true;
    reg.clusters.assign(3, std::nullopt);
    auto index = build_index(corpus.catalog, *reg.baseline);
    for (const auto& q : corpus.test_queries) {
        auto r = route_and_search(q.text, reg, index, corpus.catalog, q.query_id);
        EXPECT_LT(r.cluster_id, 3u);
        EXPECT_EQ(r.refined.entries.size(), 25u);
        for (std::size_t i = 0; i < r.refined.entries.size(); ++i)
            EXPECT_EQ(r.refined.entries[i].omsid, r.baseline.entries[i].omsid);
    }
    reg.clusters[0] = EncoderParams::random(reg.featurizer, 6, 9);
    reg.clusters[2] = EncoderParams::random(reg.featurizer, 6, 8);
    for (const auto& q : corpus.test_queries)
        EXPECT_EQ(route_and_search(q.text, reg, index, corpus.catalog, q.query_id),
                  route_and_search(q.text, reg, index, corpus.catalog, q.query_id));
    ModelRegistry incomplete = reg;
    incomplete.kmeans.reset();
    EXPECT_THROW(route_and_search("hose", incomplete, index, corpus.catalog), RegistryError);
}

}  // namespace
}  // namespace clusterlm
