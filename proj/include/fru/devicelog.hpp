#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fru/model.hpp"
#include "fru/negsample.hpp"
#include "fru/rng.hpp"
#include "fru/tensor.hpp"

namespace fru {

enum class SelectionMode { importance, random };

struct LogConfig {
    double keep_fraction = 0.5;  // alpha
    SelectionMode selection_mode = SelectionMode::importance;

    void validate() const {
        if (keep_fraction <= 0.0 || keep_fraction > 1.0)
            throw std::invalid_argument("keep_fraction must be in (0,1]");
    }
};

// Keeps the ceil(alpha * m) rows with the largest Euclidean delta norm;
// ties broken by ascending item id.
inline SparseRows select_important(const SparseRows& item_deltas, double alpha) {
    if (alpha <= 0.0 || alpha > 1.0) throw std::invalid_argument("alpha must be in (0,1]");
    if (item_deltas.empty()) return {};
    std::size_t keep = static_cast<std::size_t>(std::ceil(alpha * double(item_deltas.size())));
    if (keep >= item_deltas.size()) return item_deltas;

    std::vector<std::pair<double, std::uint32_t>> ranked;
    ranked.reserve(item_deltas.size());
    for (const auto& [item, delta] : item_deltas) ranked.emplace_back(squared_norm(delta), item);
    // Largest norm first; equal norms by ascending id (map order is ascending,
    // stable_sort preserves it).
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    SparseRows out;
    for (std::size_t i = 0; i < keep; ++i) out.emplace(ranked[i].second, item_deltas.at(ranked[i].second));
    return out;
}

// Random-selection baseline for the same budget.
inline SparseRows select_random(const SparseRows& item_deltas, double alpha, Rng& rng) {
    if (alpha <= 0.0 || alpha > 1.0) throw std::invalid_argument("alpha must be in (0,1]");
    if (item_deltas.empty()) return {};
    std::size_t keep = static_cast<std::size_t>(std::ceil(alpha * double(item_deltas.size())));
    if (keep >= item_deltas.size()) return item_deltas;
    std::vector<std::uint32_t> ids;
    ids.reserve(item_deltas.size());
    for (const auto& [item, delta] : item_deltas) ids.push_back(item);
    for (std::size_t i = 0; i < keep; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, ids.size() - 1);
        std::swap(ids[i], ids[pick(rng)]);
    }
    SparseRows out;
    for (std::size_t i = 0; i < keep; ++i) out.emplace(ids[i], item_deltas.at(ids[i]));
    return out;
}

inline std::uint32_t crc32(const unsigned char* data, std::size_t len,
                           std::uint32_t crc = 0xffffffffu) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    for (std::size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

struct LogEntry {
    std::uint32_t round = 0;
    SparseRows item_deltas;                        // already importance-filtered
    std::vector<std::vector<double>> dense_deltas; // one flat vector per tensor
    std::vector<double> user_embedding;            // snapshot after the round
};

namespace detail {

inline void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
    buf.push_back(static_cast<unsigned char>(v));
    buf.push_back(static_cast<unsigned char>(v >> 8));
    buf.push_back(static_cast<unsigned char>(v >> 16));
    buf.push_back(static_cast<unsigned char>(v >> 24));
}

inline void put_f32(std::vector<unsigned char>& buf, double x) {
    float f = static_cast<float>(x);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(buf, bits);
}

struct ByteReader {
    const unsigned char* p;
    const unsigned char* end;
    bool ok = true;

    std::uint32_t u32() {
        if (end - p < 4) { ok = false; return 0; }
        std::uint32_t v = std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
                          (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
        p += 4;
        return v;
    }
    double f32() {
        std::uint32_t bits = u32();
        float f;
        std::memcpy(&f, &bits, 4);
        return double(f);
    }
};

inline std::vector<unsigned char> encode_payload(const LogEntry& e) {
    std::vector<unsigned char> buf;
    put_u32(buf, static_cast<std::uint32_t>(e.item_deltas.size()));
    for (const auto& [item, delta] : e.item_deltas) {
        put_u32(buf, item);
        for (double x : delta) put_f32(buf, x);
    }
    put_u32(buf, static_cast<std::uint32_t>(e.dense_deltas.size()));
    for (const auto& t : e.dense_deltas) {
        put_u32(buf, static_cast<std::uint32_t>(t.size()));
        for (double x : t) put_f32(buf, x);
    }
    put_u32(buf, static_cast<std::uint32_t>(e.user_embedding.size()));
    for (double x : e.user_embedding) put_f32(buf, x);
    return buf;
}

inline std::optional<LogEntry> decode_payload(const unsigned char* data, std::size_t len,
                                              std::uint32_t round, std::size_t embedding_dim) {
    ByteReader r{data, data + len};
    LogEntry e;
    e.round = round;
    std::uint32_t rows = r.u32();
    for (std::uint32_t i = 0; i < rows && r.ok; ++i) {
        std::uint32_t item = r.u32();
        std::vector<double> delta(embedding_dim);
        for (auto& x : delta) x = r.f32();
        e.item_deltas.emplace(item, std::move(delta));
    }
    std::uint32_t tensors = r.u32();
    for (std::uint32_t i = 0; i < tensors && r.ok; ++i) {
        std::uint32_t n = r.u32();
        std::vector<double> t(n);
        for (auto& x : t) x = r.f32();
        e.dense_deltas.push_back(std::move(t));
    }
    std::uint32_t ue = r.u32();
    e.user_embedding.resize(ue);
    for (auto& x : e.user_embedding) x = r.f32();
    if (!r.ok || r.p != r.end) return std::nullopt;
    return e;
}

}  // namespace detail

// One append-only log file per simulated device. Records are checksummed and
// length-prefixed so a truncated tail from a crash is detected and dropped on
// open. Values round-trip through f32, and the in-memory view always matches
// what a reload would produce.
class DeviceLog {
  public:
    static constexpr char kMagic[8] = {'F', 'R', 'U', 'L', 'O', 'G', '1', '\0'};

    DeviceLog(std::string path, std::uint32_t owner, std::size_t embedding_dim)
        : path_(std::move(path)), owner_(owner), embedding_dim_(embedding_dim) {
        load();
    }

    std::uint32_t owner() const { return owner_; }
    const std::vector<LogEntry>& entries() const { return entries_; }
    const std::string& path() const { return path_; }

    void append(std::uint32_t round, const SparseRows& filtered_item_deltas,
                const std::vector<std::vector<double>>& dense_deltas,
                const std::vector<double>& user_embedding) {
        if (!entries_.empty() && round <= entries_.back().round)
            throw std::invalid_argument("device log rounds must be strictly increasing");
        LogEntry e;
        e.round = round;
        e.item_deltas = filtered_item_deltas;
        e.dense_deltas = dense_deltas;
        e.user_embedding = user_embedding;

        auto payload = detail::encode_payload(e);
        std::vector<unsigned char> rec;
        detail::put_u32(rec, static_cast<std::uint32_t>(payload.size()));
        detail::put_u32(rec, round);
        rec.insert(rec.end(), payload.begin(), payload.end());
        std::vector<unsigned char> checked(rec.begin() + 4, rec.end());
        detail::put_u32(rec, crc32(checked.data(), checked.size()));

        if (!path_.empty()) {  // empty path = memory-only log (tests, dry runs)
            std::ofstream out(path_, std::ios::binary | std::ios::app);
            if (!out) throw std::runtime_error("cannot append to " + path_);
            if (fresh_file_) {
                out.write(kMagic, 8);
                fresh_file_ = false;
            }
            out.write(reinterpret_cast<const char*>(rec.data()),
                      static_cast<std::streamsize>(rec.size()));
            out.flush();
            if (!out) throw std::runtime_error("write failed on " + path_);
        }

        // Store the f32-rounded view so memory and disk agree bit-exactly.
        auto reloaded = detail::decode_payload(payload.data(), payload.size(), round,
                                               embedding_dim_);
        entries_.push_back(std::move(*reloaded));
    }

    // Entry for a round, or nullopt when the client did not participate.
    std::optional<LogEntry> fetch(std::uint32_t round) const {
        for (const LogEntry& e : entries_)
            if (e.round == round) return e;
        return std::nullopt;
    }

    std::uint64_t total_item_rows() const {
        std::uint64_t n = 0;
        for (const LogEntry& e : entries_) n += e.item_deltas.size();
        return n;
    }

  private:
    void load() {
        entries_.clear();
        if (path_.empty()) {
            fresh_file_ = true;
            return;
        }
        std::ifstream in(path_, std::ios::binary);
        if (!in) {
            fresh_file_ = true;
            return;
        }
        std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                         std::istreambuf_iterator<char>());
        if (bytes.size() < 8) {
            // A torn write can leave a partial magic; anything else is not ours.
            if (std::memcmp(bytes.data(), kMagic, bytes.size()) != 0)
                throw std::runtime_error("bad log magic in " + path_);
            fresh_file_ = true;
            if (!bytes.empty()) std::ofstream(path_, std::ios::binary | std::ios::trunc);
            return;
        }
        if (std::memcmp(bytes.data(), kMagic, 8) != 0)
            throw std::runtime_error("bad log magic in " + path_);
        fresh_file_ = false;
        std::size_t pos = 8;
        while (pos + 12 <= bytes.size()) {
            detail::ByteReader hdr{bytes.data() + pos, bytes.data() + bytes.size()};
            std::uint32_t len = hdr.u32();
            std::uint32_t round = hdr.u32();
            if (pos + 12 + len > bytes.size()) break;  // truncated tail
            const unsigned char* payload = bytes.data() + pos + 8;
            std::uint32_t stored_crc;
            {
                detail::ByteReader cr{payload + len, bytes.data() + bytes.size()};
                stored_crc = cr.u32();
            }
            std::uint32_t actual = crc32(bytes.data() + pos + 4, std::size_t(len) + 4);
            if (stored_crc != actual) break;  // corrupt or partially written record
            auto entry = detail::decode_payload(payload, len, round, embedding_dim_);
            if (!entry) break;
            entries_.push_back(std::move(*entry));
            pos += 12 + len;
        }
        if (pos != bytes.size()) {
            // Torn or corrupt tail (e.g. crash mid-write): drop it on disk too,
            // so later appends land after the last valid record.
            std::ofstream out(path_, std::ios::binary | std::ios::trunc);
            out.write(reinterpret_cast<const char*>(bytes.data()),
                      static_cast<std::streamsize>(pos));
        }
    }

    std::string path_;
    std::uint32_t owner_;
    std::size_t embedding_dim_;
    std::vector<LogEntry> entries_;
    bool fresh_file_ = true;
};

// ---------------------------------------------------------------------------
// Closed-form storage accounting. Costs are in units of C, the cost of one
// item-row delta.

struct StorageReport {
    double avg_cost_units = 0.0;       // b% * B * alpha * (1 + beta*n) * avg_pos
    double overhead_percent = 0.0;     // avg_cost_units / |V| * 100
    std::vector<double> predicted_per_client;  // same formula with per-client pos counts
};

inline double predicted_storage_units(double client_fraction_percent, std::size_t global_rounds,
                                      double alpha, double beta, std::size_t negative_ratio,
                                      double positive_count) {
    return client_fraction_percent / 100.0 * double(global_rounds) * alpha *
           (1.0 + beta * double(negative_ratio)) * positive_count;
}

inline StorageReport predict_storage(const TrainConfig& train_cfg, const LogConfig& log_cfg,
                                     const SamplingConfig& sample_cfg,
                                     const SplitDataset& split) {
    StorageReport r;
    double avg_pos = average_positive_count(split);
    r.avg_cost_units =
        predicted_storage_units(train_cfg.client_fraction_percent, train_cfg.global_rounds,
                                log_cfg.keep_fraction, sample_cfg.shrink_factor,
                                train_cfg.negative_ratio, avg_pos);
    r.overhead_percent = split.item_count ? r.avg_cost_units / double(split.item_count) * 100.0
                                          : 0.0;
    r.predicted_per_client.reserve(split.user_count);
    for (const auto& local : split.train)
        r.predicted_per_client.push_back(predicted_storage_units(
            train_cfg.client_fraction_percent, train_cfg.global_rounds, log_cfg.keep_fraction,
            sample_cfg.shrink_factor, train_cfg.negative_ratio,
            double(local.positives.size())));
    return r;
}

// Hard per-round row ceiling for one client: the log never stores more than
// ceil(alpha * (positives + sampled negatives)) rows for a round.
inline std::uint64_t per_round_row_bound(double alpha, std::size_t positive_count,
                                         std::size_t negative_count) {
    return static_cast<std::uint64_t>(
        std::ceil(alpha * double(positive_count + negative_count)));
}

}  // namespace fru
