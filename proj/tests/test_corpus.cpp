#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "test_support.hpp"

namespace clusterlm {
namespace {

using testing::TempDir;

ProductRecord washer() { return {"P52993", "electric pressure washer", "sun joe", "green", "pressure washer"}; }

TEST(ProductSentence, MatchesCatalogExample) {
    EXPECT_EQ(product_sentence(washer()), "p52993 electric pressure washer sun joe green pressure washer");
}

TEST(ProductSentence, SkipsEmptyFields) {
    EXPECT_EQ(product_sentence({"x1", "hammer", "", "", ""}), "x1 hammer");
    EXPECT_EQ(product_sentence({"x1", "  Claw   HAMMER ", "", "  ", "tools"}), "x1 claw hammer tools");
}

TEST(ProductSentence, DeterministicAndLowercase) {
    auto a = product_sentence(washer());
    EXPECT_EQ(a, product_sentence(washer()));
    for (char c : a) EXPECT_FALSE(c >= 'A' && c <= 'Z');
}

Dataset tiny_dataset() {
    Dataset d;
    d.catalog = {{"a1", "red hammer", "acme", "red", "tools"},
                 {"a2", "blue drill", "bolt", "blue", "tools"},
                 {"a3", "garden hose", "", "green", "garden"}};
    d.train_queries = {{"q1", "hammer", {{"a1", EngagementType::Purchased}, {"a2", EngagementType::Impressed}}},
                       {"q2", "garden hose", {{"a3", EngagementType::AddedToCart}}}};
    return d;
}

TEST(DatasetIo, CountsRoundTrip) {
    TempDir dir;
    auto paths = DatasetPaths::in_dir(dir.path());
    save_dataset(tiny_dataset(), paths);
    auto d = load_dataset(paths);
    EXPECT_EQ(d.catalog.size(), 3u);
    EXPECT_EQ(d.train_queries.size(), 2u);
    EXPECT_EQ(d.test_queries.size(), 0u);
    EXPECT_EQ(d, tiny_dataset());
}

TEST(DatasetIo, EmptyDatasetWritesThreeEmptyFiles) {
    TempDir dir;
    auto paths = DatasetPaths::in_dir(dir.path());
    save_dataset(Dataset{}, paths);
    for (const auto& p : {paths.catalog, paths.train, paths.test}) {
        ASSERT_TRUE(std::filesystem::exists(p));
        EXPECT_EQ(std::filesystem::file_size(p), 0u);
    }
    EXPECT_EQ(load_dataset(paths), Dataset{});
}

TEST(DatasetIo, UnwritablePathIsIoError) {
    TempDir dir;
    auto paths = DatasetPaths::in_dir(dir.path() / "missing" / "nested");
    EXPECT_THROW(save_dataset(tiny_dataset(), paths), IoError);
}

TEST(DatasetIo, UnknownOmsidIsValidationError) {
    TempDir dir;
    auto d = tiny_dataset();
    d.train_queries[0].judgments.push_back({"zz9", EngagementType::Impressed});
    auto paths = DatasetPaths::in_dir(dir.path());
    save_dataset(d, paths);
    EXPECT_THROW(load_dataset(paths), ValidationError);
}

TEST(DatasetIo, DuplicateIdsAreValidationErrors) {
    auto d = tiny_dataset();
    d.catalog.push_back(d.catalog[0]);
    EXPECT_THROW(validate(d), ValidationError);

    d = tiny_dataset();
    d.test_queries.push_back(d.train_queries[0]);
    EXPECT_THROW(validate(d), ValidationError);

    d = tiny_dataset();
    d.train_queries[0].judgments.push_back({"a1", EngagementType::Impressed});
    EXPECT_THROW(validate(d), ValidationError);
}

TEST(DatasetIo, MalformedLineReportsLineNumber) {
    TempDir dir;
    auto paths = DatasetPaths::in_dir(dir.path());
    save_dataset(tiny_dataset(), paths);
    {
        std::ofstream out(paths.train, std::ios::app);
        out << "{\"query_id\": \"q9\", \"text\": \n";
    }
    try {
        load_dataset(paths);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find(":3:"), std::string::npos) << e.what();
    }
}

TEST(DatasetIo, UnknownEngagementTypeIsParseError) {
    TempDir dir;
    auto paths = DatasetPaths::in_dir(dir.path());
    save_dataset(tiny_dataset(), paths);
    std::ofstream(paths.test) << R"({"query_id":"t1","text":"x","judgments":[{"omsid":"a1","type":"clicked"}]})" << "\n";
    EXPECT_THROW(load_dataset(paths), ParseError);
}

TEST(Synthetic, CountArithmetic) {
    SynthConfig cfg;
    cfg.seed = 7;
    cfg.n_intents = 2;
    cfg.products_per_intent = 10;
    cfg.train_queries_per_intent = 20;
    cfg.test_queries_per_intent = 5;
    auto d = generate_synthetic(cfg);
    EXPECT_EQ(d.catalog.size(), 20u);
    EXPECT_EQ(d.train_queries.size(), 40u);
    EXPECT_EQ(d.test_queries.size(), 10u);
}

TEST(Synthetic, SameConfigGivesByteIdenticalFiles) {
    TempDir a, b;
    auto cfg = testing::small_synth(11);
    save_dataset(generate_synthetic(cfg), DatasetPaths::in_dir(a.path()));
    save_dataset(generate_synthetic(cfg), DatasetPaths::in_dir(b.path()));
    for (const char* f : {"catalog.jsonl", "train.jsonl", "test.jsonl"})
        EXPECT_EQ(testing::read_file(a / f), testing::read_file(b / f)) << f;

    cfg.seed = 12;
    EXPECT_NE(generate_synthetic(cfg), generate_synthetic(testing::small_synth(11)));
}

TEST(Synthetic, JudgmentsResolveAndEveryQueryPurchases) {
    auto corpus = generate_synthetic_corpus(testing::small_synth(4));
    const auto& d = corpus.dataset;
    EXPECT_NO_THROW(validate(d));
    for (const auto* qs : {&d.train_queries, &d.test_queries})
        for (const auto& q : *qs) {
            EXPECT_GE(q.purchased_count(), 1u);
            EXPECT_FALSE(q.text.empty());
        }
    EXPECT_EQ(corpus.train_intents.size(), d.train_queries.size());
    EXPECT_EQ(corpus.product_intents.size(), d.catalog.size());
}

TEST(Synthetic, IntentVocabulariesAreDisjoint) {
    auto corpus = generate_synthetic_corpus(testing::small_synth(4));
    std::map<std::string, std::set<int>> owners;
    for (std::size_t i = 0; i < corpus.dataset.train_queries.size(); ++i)
        for (const auto& tok : split_whitespace(corpus.dataset.train_queries[i].text))
            owners[tok].insert(corpus.train_intents[i]);
    for (const auto& [tok, who] : owners) EXPECT_EQ(who.size(), 1u) << tok;
}

TEST(Synthetic, InvalidCountsAreConfigErrors) {
    SynthConfig cfg;
    cfg.n_intents = 0;
    EXPECT_THROW(generate_synthetic(cfg), ConfigError);
    cfg = SynthConfig{};
    cfg.vocab_noise_rate = 1.5;
    EXPECT_THROW(generate_synthetic(cfg), ConfigError);
    cfg = SynthConfig{};
    cfg.purchases_min = 4;
    cfg.purchases_max = 2;
    EXPECT_THROW(generate_synthetic(cfg), ConfigError);
}

TEST(Synthetic, PlantedIntentsRecoveredByClusteringTrainedEmbeddings) {
    SynthConfig sc = testing::small_synth(21);
    sc.n_intents = 4;
    auto corpus = generate_synthetic_corpus(sc);
    const auto& d = corpus.dataset;
    TrainConfig tc;
    tc.learning_rate = 2.0;
    tc.batch_size = 64;
    std::mt19937_64 rng(1);
    auto pairs = build_baseline_pairs(d.train_queries, d.catalog, tc, rng);
    auto params = train(EncoderParams::random(testing::small_featurizer(4096), 32, 9), pairs, tc, 5).first;
    std::vector<Embedding> emb;
    for (const auto& q : d.train_queries) emb.push_back(encode(q.text, params));
    auto model = fit_minibatch_kmeans(emb, 4, 256, 200, 17);
    double ari = testing::brute_force_ari(corpus.train_intents, assign_all(emb, model));
    EXPECT_GE(ari, 0.9);
}

}  // namespace
}  // namespace clusterlm
