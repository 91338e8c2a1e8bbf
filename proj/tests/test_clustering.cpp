#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include "test_support.hpp"

namespace clusterlm {
namespace {

TEST(KMeans, IdenticalPointsSingleCenter) {
    std::vector<Embedding> pts(10, Embedding{0.25, -1.5, 3.0});
    auto m = fit_minibatch_kmeans(pts, 1, 4, 50, 1);
    ASSERT_EQ(m.k(), 1u);
    for (std::size_t r = 0; r < 3; ++r) EXPECT_DOUBLE_EQ(m.centers[0][r], pts[0][r]);
}

TEST(KMeans, ConfigErrors) {
    std::vector<Embedding> pts = {{0.0}, {1.0}};
    EXPECT_THROW(fit_minibatch_kmeans(pts, 0, 2, 10, 1), ConfigError);
    EXPECT_THROW(fit_minibatch_kmeans(pts, 3, 2, 10, 1), ConfigError);
    EXPECT_THROW(fit_minibatch_kmeans({}, 1, 2, 10, 1), ConfigError);
}

// Globally optimal 2-partition by enumerating every split. Lloyd's algorithm
// from any reasonable start lands here on well-separated data.
std::vector<std::size_t> exhaustive_two_means(const std::vector<Embedding>& pts) {
    const std::size_t n = pts.size();
    const std::size_t dim = pts[0].size();
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> best_labels;
    for (std::uint32_t mask = 1; mask < (1u << (n - 1)); ++mask) {
        std::vector<std::size_t> labels(n);
        for (std::size_t i = 0; i < n; ++i) labels[i] = (mask >> i) & 1u;
        double sse = 0.0;
        for (std::size_t c = 0; c < 2; ++c) {
            Embedding mean(dim, 0.0);
            double cnt = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (labels[i] == c) {
                    for (std::size_t r = 0; r < dim; ++r) mean[r] += pts[i][r];
                    ++cnt;
                }
            for (double& v : mean) v /= cnt;
            for (std::size_t i = 0; i < n; ++i)
                if (labels[i] == c) sse += squared_distance(pts[i], mean);
        }
        if (sse < best) {
            best = sse;
            best_labels = labels;
        }
    }
    return best_labels;
}

TEST(KMeans, TwoBlobsMatchExhaustiveOptimum) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto blobs = testing::planted_blobs(2, 8, 2, 10.0, 0.5, seed);
        auto oracle = exhaustive_two_means(blobs.points);
        auto model = fit_minibatch_kmeans(blobs.points, 2, 8, 100, seed + 100);
        auto got = assign_all(blobs.points, model);
        EXPECT_DOUBLE_EQ(testing::brute_force_ari(got, oracle), 1.0) << "seed " << seed;
        EXPECT_DOUBLE_EQ(testing::brute_force_ari(got, blobs.labels), 1.0) << "seed " << seed;
    }
}

TEST(KMeans, DeterministicAndFinite) {
    auto blobs = testing::planted_blobs(4, 50, 5, 3.0, 1.0, 7);
    auto a = fit_minibatch_kmeans(blobs.points, 4, 32, 200, 11);
    auto b = fit_minibatch_kmeans(blobs.points, 4, 32, 200, 11);
    EXPECT_EQ(a, b);
    for (const auto& c : a.centers)
        for (double v : c) EXPECT_TRUE(std::isfinite(v));
    EXPECT_GE(a.iterations_run, 1u);
    EXPECT_LE(a.iterations_run, 200u);
}

TEST(KMeans, CentersStayInsideBoundingBox) {
    auto blobs = testing::planted_blobs(3, 40, 3, 5.0, 1.0, 3);
    Embedding lo(3, 1e300), hi(3, -1e300);
    for (const auto& p : blobs.points)
        for (std::size_t r = 0; r < 3; ++r) {
            lo[r] = std::min(lo[r], p[r]);
            hi[r] = std::max(hi[r], p[r]);
        }
    auto m = fit_minibatch_kmeans(blobs.points, 6, 16, 100, 5);
    for (const auto& c : m.centers)
        for (std::size_t r = 0; r < 3; ++r) {
            EXPECT_GE(c[r], lo[r] - 1e-12);
            EXPECT_LE(c[r], hi[r] + 1e-12);
        }
}

TEST(KMeans, ThreeBlobsRecoveredAcrossSeeds) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto blobs = testing::planted_blobs(3, 100, 8, 4.0, 0.5, 1000 + seed);
        auto m = fit_minibatch_kmeans(blobs.points, 3, 64, 300, seed);
        EXPECT_GE(testing::brute_force_ari(assign_all(blobs.points, m), blobs.labels), 0.9) << "seed " << seed;
    }
}

KMeansModel five_centers() {
    KMeansModel m;
    for (int c = 0; c < 5; ++c) m.centers.push_back({static_cast<double>(c), 0.0});
    return m;
}

TEST(Assign, ExactCenterAndTieRule) {
    auto m = five_centers();
    EXPECT_EQ(assign(Embedding{3.0, 0.0}, m), 3u);
    KMeansModel tie;
    tie.centers = {{9.0, 9.0}, {1.0, 0.0}, {7.0, 7.0}, {8.0, 8.0}, {-1.0, 0.0}};
    EXPECT_EQ(assign(Embedding{0.0, 0.0}, tie), 1u);
    EXPECT_THROW(assign(Embedding{0.0, 0.0, 0.0}, m), DimError);
}

TEST(Assign, InvariantUnderPositiveRescaling) {
    std::mt19937_64 rng(5);
    KMeansModel m;
    for (int c = 0; c < 6; ++c) m.centers.push_back(testing::random_unit(4, rng));
    for (int t = 0; t < 200; ++t) {
        auto q = testing::random_unit(4, rng);
        double s = std::ldexp(1.0, static_cast<int>(rng() % 9) - 4);  // power of two keeps ties exact
        KMeansModel scaled = m;
        for (auto& c : scaled.centers)
            for (double& v : c) v *= s;
        Embedding qs = q;
        for (double& v : qs) v *= s;
        EXPECT_EQ(assign(q, m), assign(qs, scaled));
    }
}

std::vector<Embedding> hand_points() { return {{0, 0}, {0, 1}, {10, 0}, {10, 1}}; }

TEST(CalinskiHarabasz, HandCase) {
    EXPECT_NEAR(calinski_harabasz(hand_points(), {0, 0, 1, 1}), 200.0, 1e-9);
}

TEST(CalinskiHarabasz, DegenerateCases) {
    std::vector<Embedding> dup = {{1, 1}, {1, 1}, {5, 5}, {5, 5}};
    EXPECT_TRUE(std::isinf(calinski_harabasz(dup, {0, 0, 1, 1})));
    EXPECT_THROW(calinski_harabasz(hand_points(), {0, 0, 0, 0}), DegenerateError);
    EXPECT_THROW(calinski_harabasz(hand_points(), {0, 1, 2, 3}), DegenerateError);
}

TEST(CalinskiHarabasz, RelabelingAndTranslationInvariance) {
    auto blobs = testing::planted_blobs(3, 20, 3, 4.0, 1.0, 2);
    double base = calinski_harabasz(blobs.points, blobs.labels);
    std::vector<std::size_t> relabeled;
    for (auto l : blobs.labels) relabeled.push_back((l + 2) % 3 + 4);
    EXPECT_NEAR(calinski_harabasz(blobs.points, relabeled), base, 1e-9 * base);
    auto shifted = blobs.points;
    for (auto& p : shifted)
        for (double& v : p) v += 3.5;
    EXPECT_NEAR(calinski_harabasz(shifted, blobs.labels), base, 1e-9 * base);
}

TEST(Elbow, RowCountDeterminismAndPlantedArgmax) {
    auto blobs = testing::planted_blobs(3, 60, 6, 5.0, 0.5, 31);
    KMeansConfig cfg{64, 200, 9};
    std::vector<std::size_t> ks = {2, 3, 4, 5, 6, 7, 8};
    auto rows = elbow_scan(blobs.points, ks, cfg);
    ASSERT_EQ(rows.size(), ks.size());
    auto again = elbow_scan(blobs.points, ks, cfg);
    std::size_t best = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].k, ks[i]);
        EXPECT_EQ(rows[i].ch_score, again[i].ch_score);
        if (rows[i].ch_score > rows[best].ch_score) best = i;
    }
    EXPECT_EQ(rows[best].k, 3u);

    std::vector<std::size_t> nine;
    for (std::size_t k = 2; k <= 10; ++k) nine.push_back(k);
    EXPECT_EQ(elbow_scan(blobs.points, nine, cfg).size(), 9u);

    std::ostringstream os;
    write_elbow_csv(os, rows);
    EXPECT_EQ(os.str().substr(0, 11), "k,ch_score\n");
}

TEST(Diagnostics, MeanDistanceAndMatrix) {
    KMeansModel m;
    m.centers = {{0.0, 0.0}, {4.0, 3.0}};
    std::vector<Embedding> pts = {{1.0, 0.0}, {0.0, 3.0}, {4.0, 4.0}};
    auto d = diagnostics(pts, {0, 0, 1}, m);
    EXPECT_DOUBLE_EQ(d.mean_l2[0], 2.0);
    EXPECT_DOUBLE_EQ(d.mean_l2[1], 1.0);
    EXPECT_EQ(d.sizes, (std::vector<std::size_t>{2, 1}));
    EXPECT_NEAR(d.share_pct[0] + d.share_pct[1], 100.0, 1e-12);
    EXPECT_EQ(d.center_distances[0][0], 0.0);
    EXPECT_DOUBLE_EQ(d.center_distances[0][1], 5.0);
}

TEST(Diagnostics, MatrixMatchesDirectRecomputation) {
    auto blobs = testing::planted_blobs(5, 30, 4, 3.0, 1.0, 8);
    auto m = fit_minibatch_kmeans(blobs.points, 5, 32, 100, 3);
    auto d = diagnostics(blobs.points, assign_all(blobs.points, m), m);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < 4; ++r) s += (m.centers[i][r] - m.centers[j][r]) * (m.centers[i][r] - m.centers[j][r]);
            EXPECT_NEAR(d.center_distances[i][j], std::sqrt(s), 1e-12);
            EXPECT_EQ(d.center_distances[i][j], d.center_distances[j][i]);
        }
    ASSERT_TRUE(d.ch_score.has_value());
    for (double v : d.mean_l2) EXPECT_GE(v, 0.0);
}

TEST(ClusterSizes, Warnings) {
    std::vector<std::size_t> labels = {0, 0, 1, 2, 2, 2};
    EXPECT_TRUE(check_cluster_sizes(labels, 4, 4).empty());
    auto one = check_cluster_sizes(labels, 4, 3);
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0].cluster_id, 2u);
    EXPECT_EQ(one[0].size, 3u);
    EXPECT_EQ(check_cluster_sizes(labels, 4, 0).size(), 3u);
}

TEST(KMeansModel, RowMajorRoundTrip) {
    auto m = five_centers();
    auto back = KMeansModel::from_row_major(m.row_major(), 5, 2);
    EXPECT_EQ(back.centers, m.centers);
    EXPECT_THROW(KMeansModel::from_row_major(m.row_major(), 4, 2), DimError);
}

}  // namespace
}  // namespace clusterlm
