#pragma once

#include <sqlite3.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "protomsl/error.hpp"

namespace protomsl {

class StoreError : public Error {
    using Error::Error;
};

enum class FeedbackKind { WRONG_LABEL, WRONG_EVIDENCE };

inline std::string to_string(FeedbackKind k) { return k == FeedbackKind::WRONG_LABEL ? "WRONG_LABEL" : "WRONG_EVIDENCE"; }

inline std::optional<FeedbackKind> parse_feedback_kind(std::string_view s) {
    if (s == "WRONG_LABEL") return FeedbackKind::WRONG_LABEL;
    if (s == "WRONG_EVIDENCE") return FeedbackKind::WRONG_EVIDENCE;
    return std::nullopt;
}

struct FeedbackRecord {
    int64_t feedback_id = 0;
    std::string image_id;
    FeedbackKind kind = FeedbackKind::WRONG_LABEL;
    std::optional<int> suggested_label;
    std::optional<int> prototype_id;
    std::optional<std::string> comment;
    std::string created_at;  // ISO 8601, UTC
    std::string model_version;
    int predicted_class = -1;  // the served prediction the feedback is about
};

inline nlohmann::json to_json(const FeedbackRecord& r) {
    nlohmann::json j{{"feedback_id", r.feedback_id},   {"image_id", r.image_id},
                     {"kind", to_string(r.kind)},      {"created_at", r.created_at},
                     {"model_version", r.model_version}, {"predicted_class", r.predicted_class}};
    j["suggested_label"] = r.suggested_label ? nlohmann::json(*r.suggested_label) : nlohmann::json(nullptr);
    j["prototype_id"] = r.prototype_id ? nlohmann::json(*r.prototype_id) : nlohmann::json(nullptr);
    j["comment"] = r.comment ? nlohmann::json(*r.comment) : nlohmann::json(nullptr);
    return j;
}

inline std::string utc_timestamp() {
    using namespace std::chrono;
    auto now = system_clock::now();
    std::time_t t = system_clock::to_time_t(now);
    auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1, tm.tm_mday,
                  tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
    return buf;
}

/// SQLite-backed feedback table. Writes are serialized and each insert is its
/// own transaction, committed with synchronous=FULL before it returns.
class FeedbackStore {
public:
    static constexpr const char* kSchema = R"sql(
CREATE TABLE IF NOT EXISTS feedback (
    feedback_id     INTEGER PRIMARY KEY AUTOINCREMENT,
    image_id        TEXT    NOT NULL,
    kind            TEXT    NOT NULL CHECK (kind IN ('WRONG_LABEL', 'WRONG_EVIDENCE')),
    suggested_label INTEGER,
    prototype_id    INTEGER,
    comment         TEXT,
    created_at      TEXT    NOT NULL,
    model_version   TEXT    NOT NULL,
    predicted_class INTEGER NOT NULL,
    CHECK (kind <> 'WRONG_LABEL' OR suggested_label IS NOT NULL),
    CHECK (kind <> 'WRONG_EVIDENCE' OR prototype_id IS NOT NULL)
);
CREATE INDEX IF NOT EXISTS feedback_by_version ON feedback (model_version);
)sql";

    explicit FeedbackStore(const std::filesystem::path& path) {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        if (sqlite3_open_v2(path.c_str(), &db_, SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE | SQLITE_OPEN_FULLMUTEX,
                            nullptr) != SQLITE_OK) {
            std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
            sqlite3_close(db_);
            throw StoreError("cannot open feedback store " + path.string() + ": " + msg);
        }
        sqlite3_busy_timeout(db_, 5000);
        exec("PRAGMA journal_mode=WAL;");
        exec("PRAGMA synchronous=FULL;");
        exec(kSchema);
    }

    FeedbackStore(const FeedbackStore&) = delete;
    FeedbackStore& operator=(const FeedbackStore&) = delete;
    ~FeedbackStore() { sqlite3_close(db_); }

    /// Persists `r` (feedback_id and created_at are assigned here) and returns the stored row.
    FeedbackRecord insert(FeedbackRecord r) {
        std::lock_guard lock(mutex_);
        r.created_at = utc_timestamp();
        Statement st(db_,
                     "INSERT INTO feedback (image_id, kind, suggested_label, prototype_id, comment, created_at, "
                     "model_version, predicted_class) VALUES (?, ?, ?, ?, ?, ?, ?, ?)");
        st.bind(1, r.image_id);
        st.bind(2, to_string(r.kind));
        st.bind(3, r.suggested_label);
        st.bind(4, r.prototype_id);
        st.bind(5, r.comment);
        st.bind(6, r.created_at);
        st.bind(7, r.model_version);
        st.bind(8, std::optional<int>(r.predicted_class));
        if (sqlite3_step(st.get()) != SQLITE_DONE) throw StoreError(std::string("insert failed: ") + sqlite3_errmsg(db_));
        r.feedback_id = sqlite3_last_insert_rowid(db_);
        return r;
    }

    std::optional<FeedbackRecord> get(int64_t id) {
        std::lock_guard lock(mutex_);
        Statement st(db_, std::string(kSelect) + " WHERE feedback_id = ?");
        sqlite3_bind_int64(st.get(), 1, id);
        if (sqlite3_step(st.get()) == SQLITE_ROW) return read_row(st.get());
        return std::nullopt;
    }

    /// All rows, or those of one model version, in id order.
    std::vector<FeedbackRecord> list(const std::optional<std::string>& model_version = std::nullopt) {
        std::lock_guard lock(mutex_);
        Statement st(db_, std::string(kSelect) + (model_version ? " WHERE model_version = ?" : "") +
                              " ORDER BY feedback_id");
        if (model_version) st.bind(1, *model_version);
        std::vector<FeedbackRecord> out;
        int rc;
        while ((rc = sqlite3_step(st.get())) == SQLITE_ROW) out.push_back(read_row(st.get()));
        if (rc != SQLITE_DONE) throw StoreError(std::string("query failed: ") + sqlite3_errmsg(db_));
        return out;
    }

    size_t count() { return list().size(); }

private:
    static constexpr const char* kSelect =
        "SELECT feedback_id, image_id, kind, suggested_label, prototype_id, comment, created_at, model_version, "
        "predicted_class FROM feedback";

    class Statement {
    public:
        Statement(sqlite3* db, const std::string& sql) {
            if (sqlite3_prepare_v2(db, sql.c_str(), -1, &st_, nullptr) != SQLITE_OK)
                throw StoreError(std::string("prepare failed: ") + sqlite3_errmsg(db));
        }
        ~Statement() { sqlite3_finalize(st_); }
        sqlite3_stmt* get() const { return st_; }
        void bind(int i, const std::string& s) { sqlite3_bind_text(st_, i, s.c_str(), -1, SQLITE_TRANSIENT); }
        void bind(int i, const std::optional<std::string>& s) {
            if (s) bind(i, *s);
            else sqlite3_bind_null(st_, i);
        }
        void bind(int i, const std::optional<int>& v) {
            if (v) sqlite3_bind_int(st_, i, *v);
            else sqlite3_bind_null(st_, i);
        }

    private:
        sqlite3_stmt* st_ = nullptr;
    };

    static std::optional<int> int_or_null(sqlite3_stmt* st, int col) {
        if (sqlite3_column_type(st, col) == SQLITE_NULL) return std::nullopt;
        return sqlite3_column_int(st, col);
    }

    static std::string text(sqlite3_stmt* st, int col) {
        auto p = sqlite3_column_text(st, col);
        return p ? reinterpret_cast<const char*>(p) : "";
    }

    static FeedbackRecord read_row(sqlite3_stmt* st) {
        FeedbackRecord r;
        r.feedback_id = sqlite3_column_int64(st, 0);
        r.image_id = text(st, 1);
        r.kind = parse_feedback_kind(text(st, 2)).value_or(FeedbackKind::WRONG_LABEL);
        r.suggested_label = int_or_null(st, 3);
        r.prototype_id = int_or_null(st, 4);
        if (sqlite3_column_type(st, 5) != SQLITE_NULL) r.comment = text(st, 5);
        r.created_at = text(st, 6);
        r.model_version = text(st, 7);
        r.predicted_class = sqlite3_column_int(st, 8);
        return r;
    }

    void exec(const char* sql) {
        char* err = nullptr;
        if (sqlite3_exec(db_, sql, nullptr, nullptr, &err) != SQLITE_OK) {
            std::string msg = err ? err : "unknown error";
            sqlite3_free(err);
            throw StoreError("feedback store: " + msg);
        }
    }

    sqlite3* db_ = nullptr;
    std::mutex mutex_;
};

}  // namespace protomsl
