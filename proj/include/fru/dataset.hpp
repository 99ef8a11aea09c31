#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "fru/rng.hpp"

namespace fru {

class ParseError : public std::runtime_error {
  public:
    ParseError(const std::string& file, std::size_t line, const std::string& what)
        : std::runtime_error(file + ":" + std::to_string(line) + ": " + what) {}
};

class DataError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct Interaction {
    std::uint32_t user_id;
    std::uint32_t item_id;
    std::int64_t timestamp;  // -1 when the source has no timestamps
};

// One client's training data. Negatives are the implicit complement of
// `positives` in [0, item_count).
struct LocalDataset {
    std::uint32_t owner = 0;
    std::vector<std::uint32_t> positives;  // sorted, unique

    bool is_positive(std::uint32_t item) const {
        return std::binary_search(positives.begin(), positives.end(), item);
    }
};

struct SplitDataset {
    std::uint32_t user_count = 0;
    std::uint32_t item_count = 0;
    std::vector<LocalDataset> train;                     // indexed by user id
    std::vector<std::vector<std::uint32_t>> test;        // held-out positives per user
    std::uint64_t total_interactions = 0;                // after dedup

    // Users with an empty test split stay in training but are skipped by
    // evaluation.
    bool evaluable(std::uint32_t user) const { return !test[user].empty(); }
};

namespace detail {

inline SplitDataset split_interactions(std::vector<Interaction> interactions,
                                       std::uint32_t user_count, std::uint32_t item_count,
                                       std::uint64_t seed, bool temporal) {
    SplitDataset out;
    out.user_count = user_count;
    out.item_count = item_count;
    out.total_interactions = interactions.size();
    out.train.resize(user_count);
    out.test.resize(user_count);

    std::vector<std::vector<Interaction>> per_user(user_count);
    for (const Interaction& it : interactions) per_user[it.user_id].push_back(it);

    for (std::uint32_t u = 0; u < user_count; ++u) {
        auto& rows = per_user[u];
        out.train[u].owner = u;
        if (rows.empty()) continue;
        std::size_t n = rows.size();
        std::size_t test_count = static_cast<std::size_t>(std::llround(0.2 * double(n)));
        if (test_count >= n) test_count = n - 1;  // train must stay nonempty

        if (temporal) {
            std::sort(rows.begin(), rows.end(), [](const Interaction& a, const Interaction& b) {
                return a.timestamp != b.timestamp ? a.timestamp < b.timestamp
                                                  : a.item_id < b.item_id;
            });
        } else {
            Rng rng(derive_seed(seed, "split", 0, u));
            std::shuffle(rows.begin(), rows.end(), rng);
        }
        for (std::size_t i = 0; i < n; ++i) {
            if (i < n - test_count)
                out.train[u].positives.push_back(rows[i].item_id);
            else
                out.test[u].push_back(rows[i].item_id);
        }
        std::sort(out.train[u].positives.begin(), out.train[u].positives.end());
        std::sort(out.test[u].begin(), out.test[u].end());
    }
    return out;
}

}  // namespace detail

// MovieLens u.data: TSV rows (user, item, rating, timestamp), 1-based ids.
// Every observed pair becomes an implicit positive; the most recent 20% per
// user are held out for testing.
inline SplitDataset load_movielens(const std::string& path, std::uint64_t seed) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);

    std::unordered_map<std::string, std::uint32_t> user_ids, item_ids;
    std::unordered_set<std::uint64_t> seen;
    std::vector<Interaction> interactions;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string user, item, rating, ts;
        if (!(ss >> user >> item >> rating >> ts))
            throw ParseError(path, lineno, "expected 4 tab-separated fields");
        std::int64_t timestamp;
        try {
            timestamp = std::stoll(ts);
            (void)std::stod(rating);
        } catch (const std::exception&) {
            throw ParseError(path, lineno, "non-numeric rating or timestamp");
        }
        auto uid = user_ids.emplace(user, static_cast<std::uint32_t>(user_ids.size())).first->second;
        auto iid = item_ids.emplace(item, static_cast<std::uint32_t>(item_ids.size())).first->second;
        std::uint64_t key = (std::uint64_t(uid) << 32) | iid;
        if (!seen.insert(key).second) continue;
        interactions.push_back({uid, iid, timestamp});
    }
    return detail::split_interactions(std::move(interactions),
                                      static_cast<std::uint32_t>(user_ids.size()),
                                      static_cast<std::uint32_t>(item_ids.size()), seed,
                                      /*temporal=*/true);
}

// Steam-200k: CSV rows (user-id, game-title, behavior, value). Titles may
// contain commas, so the record is parsed from both ends. One interaction is
// kept per (user, game) pair regardless of behavior; the split is a seeded
// uniform 20% per user.
inline SplitDataset load_steam(const std::string& path, std::uint64_t seed) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);

    std::unordered_map<std::string, std::uint32_t> user_ids, item_ids;
    std::unordered_set<std::uint64_t> seen;
    std::vector<Interaction> interactions;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
        if (line.empty()) continue;
        auto first = line.find(',');
        auto last = line.rfind(',');
        if (first == std::string::npos || last <= first)
            throw ParseError(path, lineno, "expected 4 comma-separated fields");
        auto behavior_sep = line.rfind(',', last - 1);
        if (behavior_sep == std::string::npos || behavior_sep <= first)
            throw ParseError(path, lineno, "expected 4 comma-separated fields");
        std::string user = line.substr(0, first);
        std::string title = line.substr(first + 1, behavior_sep - first - 1);
        std::string behavior = line.substr(behavior_sep + 1, last - behavior_sep - 1);
        if (behavior != "purchase" && behavior != "play")
            throw ParseError(path, lineno, "unknown behavior '" + behavior + "'");
        auto uid = user_ids.emplace(user, static_cast<std::uint32_t>(user_ids.size())).first->second;
        auto iid = item_ids.emplace(title, static_cast<std::uint32_t>(item_ids.size())).first->second;
        std::uint64_t key = (std::uint64_t(uid) << 32) | iid;
        if (!seen.insert(key).second) continue;
        interactions.push_back({uid, iid, -1});
    }
    return detail::split_interactions(std::move(interactions),
                                      static_cast<std::uint32_t>(user_ids.size()),
                                      static_cast<std::uint32_t>(item_ids.size()), seed,
                                      /*temporal=*/false);
}

// Arithmetic mean of per-user train-positive counts.
inline double average_positive_count(const SplitDataset& split) {
    if (split.user_count == 0) return 0.0;
    double total = 0.0;
    for (const auto& local : split.train) total += double(local.positives.size());
    return total / double(split.user_count);
}

inline nlohmann::json dataset_to_json(const SplitDataset& split) {
    nlohmann::json j;
    j["user_count"] = split.user_count;
    j["item_count"] = split.item_count;
    j["total_interactions"] = split.total_interactions;
    j["train"] = nlohmann::json::array();
    j["test"] = nlohmann::json::array();
    for (const auto& local : split.train) j["train"].push_back(local.positives);
    for (const auto& t : split.test) j["test"].push_back(t);
    return j;
}

inline SplitDataset dataset_from_json(const nlohmann::json& j) {
    SplitDataset split;
    split.user_count = j.at("user_count").get<std::uint32_t>();
    split.item_count = j.at("item_count").get<std::uint32_t>();
    split.total_interactions = j.at("total_interactions").get<std::uint64_t>();
    split.train.resize(split.user_count);
    split.test.resize(split.user_count);
    for (std::uint32_t u = 0; u < split.user_count; ++u) {
        split.train[u].owner = u;
        split.train[u].positives = j.at("train").at(u).get<std::vector<std::uint32_t>>();
        split.test[u] = j.at("test").at(u).get<std::vector<std::uint32_t>>();
    }
    return split;
}

}  // namespace fru
