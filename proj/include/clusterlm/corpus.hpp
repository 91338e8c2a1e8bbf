#pragma once

// Product/query data model, JSON-lines I/O and the seeded synthetic corpus.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "util.hpp"

namespace clusterlm {

struct ProductRecord {
    std::string omsid;
    std::string title;
    std::string brand;
    std::string color_finish;
    std::string leaf;

    bool operator==(const ProductRecord&) const = default;
};

enum class EngagementType { Purchased, AddedToCart, Impressed };

inline std::string_view to_string(EngagementType t) {
    switch (t) {
        case EngagementType::Purchased: return "purchased";
        case EngagementType::AddedToCart: return "added_to_cart";
        case EngagementType::Impressed: return "impressed";
    }
    return "impressed";
}

inline EngagementType parse_engagement(std::string_view s) {
    if (s == "purchased") return EngagementType::Purchased;
    if (s == "added_to_cart") return EngagementType::AddedToCart;
    if (s == "impressed") return EngagementType::Impressed;
    throw ParseError("unknown engagement type: " + std::string(s));
}

struct Judgment {
    std::string omsid;
    EngagementType type = EngagementType::Impressed;

    bool operator==(const Judgment&) const = default;
};

struct QueryRecord {
    std::string query_id;
    std::string text;
    std::vector<Judgment> judgments;

    bool operator==(const QueryRecord&) const = default;

    std::size_t purchased_count() const {
        return static_cast<std::size_t>(std::count_if(judgments.begin(), judgments.end(), [](const Judgment& j) {
            return j.type == EngagementType::Purchased;
        }));
    }
};

struct Dataset {
    std::vector<ProductRecord> catalog;
    std::vector<QueryRecord> train_queries;
    std::vector<QueryRecord> test_queries;

    bool operator==(const Dataset&) const = default;
};

struct DatasetPaths {
    std::filesystem::path catalog;
    std::filesystem::path train;
    std::filesystem::path test;

    static DatasetPaths in_dir(const std::filesystem::path& dir) {
        return {dir / "catalog.jsonl", dir / "train.jsonl", dir / "test.jsonl"};
    }
};

/// Lowercases and collapses runs of whitespace to one space.
inline std::string normalize_text(std::string_view s) {
    auto tokens = split_whitespace(to_lower_ascii(s));
    std::string out;
    for (const auto& t : tokens) {
        if (!out.empty()) out.push_back(' ');
        out += t;
    }
    return out;
}

inline ProductRecord normalize(ProductRecord p) {
    p.title = normalize_text(p.title);
    p.brand = normalize_text(p.brand);
    p.color_finish = normalize_text(p.color_finish);
    p.leaf = normalize_text(p.leaf);
    return p;
}

/// "omsid title brand color_finish leaf", lowercased, empty fields skipped.
inline std::string product_sentence(const ProductRecord& p) {
    std::string out;
    for (const std::string* field : {&p.omsid, &p.title, &p.brand, &p.color_finish, &p.leaf}) {
        std::string norm = normalize_text(*field);
        if (norm.empty()) continue;
        if (!out.empty()) out.push_back(' ');
        out += norm;
    }
    return out;
}

/// Throws ValidationError on the first violated Dataset invariant.
inline void validate(const Dataset& d) {
    std::unordered_set<std::string> omsids;
    for (const auto& p : d.catalog) {
        if (p.omsid.empty()) throw ValidationError("product with empty omsid");
        if (!omsids.insert(p.omsid).second) throw ValidationError("duplicate omsid: " + p.omsid);
    }
    std::unordered_set<std::string> train_ids;
    auto check_queries = [&](const std::vector<QueryRecord>& qs, std::unordered_set<std::string>& ids,
                             const char* split) {
        for (const auto& q : qs) {
            if (q.query_id.empty()) throw ValidationError(std::string("empty query_id in ") + split);
            if (!ids.insert(q.query_id).second)
                throw ValidationError("duplicate query_id in " + std::string(split) + ": " + q.query_id);
            if (normalize_text(q.text).empty()) throw ValidationError("empty query text: " + q.query_id);
            std::unordered_set<std::string> judged;
            for (const auto& j : q.judgments) {
                if (!omsids.contains(j.omsid))
                    throw ValidationError("query " + q.query_id + " judges unknown omsid " + j.omsid);
                if (!judged.insert(j.omsid).second)
                    throw ValidationError("query " + q.query_id + " judges " + j.omsid + " twice");
            }
        }
    };
    check_queries(d.train_queries, train_ids, "train");
    std::unordered_set<std::string> test_ids;
    check_queries(d.test_queries, test_ids, "test");
    for (const auto& id : test_ids)
        if (train_ids.contains(id)) throw ValidationError("query_id in both train and test: " + id);
}

namespace detail {

template <typename Fn>
void for_each_jsonl(const std::filesystem::path& path, Fn&& fn) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open: " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
            fn(obj);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const ParseError& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

inline std::vector<QueryRecord> read_queries(const std::filesystem::path& path) {
    std::vector<QueryRecord> out;
    for_each_jsonl(path, [&](const nlohmann::json& obj) {
        QueryRecord q;
        q.query_id = obj.at("query_id").get<std::string>();
        q.text = normalize_text(obj.at("text").get<std::string>());
        for (const auto& j : obj.at("judgments"))
            q.judgments.push_back({j.at("omsid").get<std::string>(), parse_engagement(j.at("type").get<std::string>())});
        out.push_back(std::move(q));
    });
    return out;
}

inline void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    for (const auto& l : lines) out << l << '\n';
    out.flush();
    if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<std::string> query_lines(const std::vector<QueryRecord>& qs) {
    std::vector<std::string> lines;
    lines.reserve(qs.size());
    for (const auto& q : qs) {
        nlohmann::ordered_json obj;
        obj["query_id"] = q.query_id;
        obj["text"] = q.text;
        obj["judgments"] = nlohmann::ordered_json::array();
        for (const auto& j : q.judgments) {
            nlohmann::ordered_json jj;
            jj["omsid"] = j.omsid;
            jj["type"] = std::string(to_string(j.type));
            obj["judgments"].push_back(std::move(jj));
        }
        lines.push_back(obj.dump());
    }
    return lines;
}

}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& catalog_path, const std::filesystem::path& train_path,
                            const std::filesystem::path& test_path) {
    Dataset d;
    detail::for_each_jsonl(catalog_path, [&](const nlohmann::json& obj) {
        ProductRecord p;
        p.omsid = obj.at("omsid").get<std::string>();
        p.title = obj.at("title").get<std::string>();
        p.brand = obj.value("brand", "");
        p.color_finish = obj.value("color_finish", "");
        p.leaf = obj.value("leaf", "");
        d.catalog.push_back(normalize(std::move(p)));
    });
    d.train_queries = detail::read_queries(train_path);
    d.test_queries = detail::read_queries(test_path);
    validate(d);
    return d;
}

inline Dataset load_dataset(const DatasetPaths& paths) {
    return load_dataset(paths.catalog, paths.train, paths.test);
}

inline void save_dataset(const Dataset& d, const DatasetPaths& paths) {
    std::vector<std::string> lines;
    lines.reserve(d.catalog.size());
    for (const auto& p : d.catalog) {
        nlohmann::ordered_json obj;
        obj["omsid"] = p.omsid;
        obj["title"] = p.title;
        obj["brand"] = p.brand;
        obj["color_finish"] = p.color_finish;
        obj["leaf"] = p.leaf;
        lines.push_back(obj.dump());
    }
    detail::write_lines(paths.catalog, lines);
    detail::write_lines(paths.train, detail::query_lines(d.train_queries));
    detail::write_lines(paths.test, detail::query_lines(d.test_queries));
}

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthConfig {
    std::uint64_t seed = 42;
    int n_intents = 8;
    int products_per_intent = 250;
    int train_queries_per_intent = 1000;
    int test_queries_per_intent = 100;
    double vocab_noise_rate = 0.1;
    int purchases_min = 1;
    int purchases_max = 3;
    int impressions_per_query = 4;
    int core_vocab_size = 12;
    int n_brands = 16;
    int preferred_brands_per_intent = 2;

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
        };
        positive(n_intents, "n_intents");
        positive(products_per_intent, "products_per_intent");
        positive(train_queries_per_intent, "train_queries_per_intent");
        positive(test_queries_per_intent, "test_queries_per_intent");
        positive(purchases_min, "purchases_min");
        positive(purchases_max, "purchases_max");
        positive(impressions_per_query, "impressions_per_query");
        positive(core_vocab_size, "core_vocab_size");
        positive(n_brands, "n_brands");
        positive(preferred_brands_per_intent, "preferred_brands_per_intent");
        if (purchases_min > purchases_max) throw ConfigError("purchases_min > purchases_max");
        if (preferred_brands_per_intent > n_brands) throw ConfigError("preferred_brands_per_intent > n_brands");
        if (!(vocab_noise_rate >= 0.0 && vocab_noise_rate <= 1.0))
            throw ConfigError("vocab_noise_rate must be in [0,1]");
    }
};

/// Generated corpus plus the planted intent of every query and product.
struct SyntheticCorpus {
    Dataset dataset;
    std::vector<int> product_intents;
    std::vector<int> train_intents;
    std::vector<int> test_intents;
};

namespace detail {

class WordFactory {
public:
    explicit WordFactory(std::mt19937_64& rng) : rng_(rng) {}

    std::string fresh(int min_syllables, int max_syllables) {
        static constexpr std::string_view kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                                       "s", "t", "v", "z", "br", "gr", "st", "tr", "pl", "sh"};
        static constexpr std::string_view kVowels[] = {"a", "e", "i", "o", "u", "ai", "ou"};
        static constexpr std::string_view kCodas[] = {"", "", "n", "r", "s", "l", "x"};
        std::uniform_int_distribution<int> syl(min_syllables, max_syllables);
        for (;;) {
            std::string w;
            int n = syl(rng_);
            for (int i = 0; i < n; ++i) {
                w += pick(kOnsets);
                w += pick(kVowels);
                if (i + 1 == n) w += pick(kCodas);
            }
            if (used_.insert(w).second) return w;
        }
    }

private:
    template <std::size_t N>
    std::string_view pick(const std::string_view (&arr)[N]) {
        std::uniform_int_distribution<std::size_t> d(0, N - 1);
        return arr[d(rng_)];
    }

    std::mt19937_64& rng_;
    std::set<std::string> used_;
};

inline std::vector<std::size_t> sample_distinct(std::size_t n, std::size_t k, std::mt19937_64& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    k = std::min(k, n);
    for (std::size_t i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> d(i, n - 1);
        std::swap(idx[i], idx[d(rng)]);
    }
    idx.resize(k);
    return idx;
}

// Weighted sampling without replacement; zero-weight items are never picked.
inline std::vector<std::size_t> weighted_sample(std::vector<double> weights, std::size_t k, std::mt19937_64& rng) {
    std::vector<std::size_t> out;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    while (out.size() < k) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (total <= 0.0) break;
        double r = u(rng) * total;
        std::size_t pick = weights.size();
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (weights[i] <= 0.0) continue;
            pick = i;
            r -= weights[i];
            if (r < 0.0) break;
        }
        out.push_back(pick);
        weights[pick] = 0.0;
    }
    return out;
}

}  // namespace detail

/// Plants one intent per disjoint core vocabulary. Purchases favour products
/// that share query tokens and carry one of the intent's preferred brands;
/// the remaining high-overlap products become impressed or added-to-cart
/// near misses.
inline SyntheticCorpus generate_synthetic_corpus(const SynthConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    detail::WordFactory words(rng);

    std::vector<std::string> noise_vocab;
    for (int i = 0; i < 24; ++i) noise_vocab.push_back(words.fresh(1, 2));
    std::vector<std::string> brands;
    for (int i = 0; i < cfg.n_brands; ++i) brands.push_back(words.fresh(2, 2) + " " + words.fresh(1, 1));
    static const std::vector<std::string> kColors = {"white", "black", "gray", "red", "green", "blue", "brown", "silver"};

    struct Intent {
        std::vector<std::string> core;
        std::string leaf;
        std::vector<std::size_t> preferred_brands;
    };
    std::vector<Intent> intents(static_cast<std::size_t>(cfg.n_intents));
    for (auto& in : intents) {
        for (int i = 0; i < cfg.core_vocab_size; ++i) in.core.push_back(words.fresh(2, 3));
        in.leaf = words.fresh(2, 3);
        in.preferred_brands = detail::sample_distinct(brands.size(), static_cast<std::size_t>(cfg.preferred_brands_per_intent), rng);
    }

    SyntheticCorpus out;
    Dataset& d = out.dataset;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> noise_pick(0, noise_vocab.size() - 1);
    std::uniform_int_distribution<std::size_t> brand_pick(0, brands.size() - 1);
    std::uniform_int_distribution<std::size_t> color_pick(0, kColors.size() - 1);
    std::uniform_int_distribution<int> title_len(3, 4);

    // Per product: its core-token indices (for overlap scoring) and preference flag.
    std::vector<std::vector<std::size_t>> product_core(static_cast<std::size_t>(cfg.n_intents));
    std::vector<std::vector<std::set<std::size_t>>> title_tokens(static_cast<std::size_t>(cfg.n_intents));
    std::vector<std::vector<bool>> preferred(static_cast<std::size_t>(cfg.n_intents));
    std::vector<std::vector<std::size_t>> product_index(static_cast<std::size_t>(cfg.n_intents));

    std::size_t next_id = 10000;
    for (int ii = 0; ii < cfg.n_intents; ++ii) {
        auto& in = intents[static_cast<std::size_t>(ii)];
        for (int p = 0; p < cfg.products_per_intent; ++p) {
            auto picks = detail::sample_distinct(in.core.size(), static_cast<std::size_t>(title_len(rng)), rng);
            std::set<std::size_t> kept;
            std::string title;
            for (auto c : picks) {
                std::string tok;
                if (unit(rng) < cfg.vocab_noise_rate) {
                    tok = noise_vocab[noise_pick(rng)];
                } else {
                    tok = in.core[c];
                    kept.insert(c);
                }
                if (!title.empty()) title.push_back(' ');
                title += tok;
            }
            std::size_t brand = brand_pick(rng);
            ProductRecord rec{"P" + std::to_string(next_id++), title, brands[brand], kColors[color_pick(rng)], in.leaf};
            product_index[static_cast<std::size_t>(ii)].push_back(d.catalog.size());
            title_tokens[static_cast<std::size_t>(ii)].push_back(std::move(kept));
            preferred[static_cast<std::size_t>(ii)].push_back(
                std::find(in.preferred_brands.begin(), in.preferred_brands.end(), brand) != in.preferred_brands.end());
            d.catalog.push_back(normalize(std::move(rec)));
            out.product_intents.push_back(ii);
        }
    }

    std::uniform_int_distribution<int> query_len(2, 4);
    std::uniform_int_distribution<int> purchase_count(cfg.purchases_min, cfg.purchases_max);
    auto make_query = [&](int ii, const std::string& id) {
        auto ui = static_cast<std::size_t>(ii);
        const auto& in = intents[ui];
        auto picks = detail::sample_distinct(in.core.size(), static_cast<std::size_t>(query_len(rng)), rng);
        QueryRecord q;
        q.query_id = id;
        for (auto c : picks) {
            if (!q.text.empty()) q.text.push_back(' ');
            q.text += in.core[c];
        }
        const auto& products = product_index[ui];
        std::vector<double> overlap(products.size(), 0.0);
        for (std::size_t k = 0; k < products.size(); ++k)
            for (auto c : picks) overlap[k] += title_tokens[ui][k].contains(c) ? 1.0 : 0.0;

        std::vector<double> buy_w(products.size());
        for (std::size_t k = 0; k < products.size(); ++k)
            buy_w[k] = overlap[k] * overlap[k] * (preferred[ui][k] ? 12.0 : 1.0);
        auto bought = detail::weighted_sample(buy_w, static_cast<std::size_t>(purchase_count(rng)), rng);
        if (bought.empty()) bought = detail::sample_distinct(products.size(), 1, rng);

        std::vector<double> near_w(products.size());
        for (std::size_t k = 0; k < products.size(); ++k) near_w[k] = overlap[k] * overlap[k] + 0.05;
        for (auto b : bought) near_w[b] = 0.0;
        auto near = detail::weighted_sample(near_w, static_cast<std::size_t>(cfg.impressions_per_query), rng);

        for (auto b : bought) q.judgments.push_back({d.catalog[products[b]].omsid, EngagementType::Purchased});
        for (auto n : near) {
            auto type = unit(rng) < 0.25 ? EngagementType::AddedToCart : EngagementType::Impressed;
            q.judgments.push_back({d.catalog[products[n]].omsid, type});
        }
        return q;
    };

    auto id_of = [](const char* prefix, std::size_t n) {
        std::string num = std::to_string(n);
        return std::string(prefix) + std::string(num.size() < 6 ? 6 - num.size() : 0, '0') + num;
    };
    for (int ii = 0; ii < cfg.n_intents; ++ii)
        for (int k = 0; k < cfg.train_queries_per_intent; ++k) {
            d.train_queries.push_back(make_query(ii, id_of("tr", d.train_queries.size())));
            out.train_intents.push_back(ii);
        }
    for (int ii = 0; ii < cfg.n_intents; ++ii)
        for (int k = 0; k < cfg.test_queries_per_intent; ++k) {
            d.test_queries.push_back(make_query(ii, id_of("te", d.test_queries.size())));
            out.test_intents.push_back(ii);
        }
    validate(d);
    return out;
}

inline Dataset generate_synthetic(const SynthConfig& cfg) {
    return generate_synthetic_corpus(cfg).dataset;
}

}  // namespace clusterlm
