#pragma once

#include <algorithm>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "protomsl/analytics.hpp"
#include "protomsl/archive.hpp"
#include "protomsl/dataset.hpp"
#include "protomsl/explain.hpp"
#include "protomsl/feedback.hpp"
#include "protomsl/image.hpp"
#include "protomsl/protonet.hpp"

namespace protomsl {

/// Immutable model snapshot. Handlers copy the shared pointer once per request,
/// so a reload never changes the model under a request in flight.
struct Engine {
    std::shared_ptr<const Model> model;
    std::string model_version;
};

/// Lookup of images that are not in the local catalog. Only the interface is
/// provided; the default client knows no images.
class RemoteArchive {
public:
    virtual ~RemoteArchive() = default;
    virtual std::optional<Image> fetch(const std::string& image_id) = 0;
};

class NullRemoteArchive : public RemoteArchive {
public:
    std::optional<Image> fetch(const std::string&) override { return std::nullopt; }
};

struct Response {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
};

inline Response json_response(int status, const nlohmann::json& j) { return {status, j.dump(), "application/json"}; }

inline Response error_response(int status, const std::string& message, const nlohmann::json& fields = nullptr) {
    nlohmann::json j{{"error", message}};
    if (!fields.is_null()) j["fields"] = fields;
    return json_response(status, j);
}

/// Public form of a prediction. Abstained predictions expose only the
/// abstention flag, never a class or its confidence.
inline nlohmann::json classification_payload(const PredictionRecord& r, const std::vector<std::string>& class_names,
                                             const std::string& model_version) {
    if (r.abstained) return {{"image_id", r.image_id}, {"abstained", true}, {"model_version", model_version}};
    return {{"image_id", r.image_id},
            {"abstained", false},
            {"predicted_class", r.predicted_label},
            {"predicted_class_name", class_names.at(r.predicted_label)},
            {"confidence", r.confidence},
            {"model_version", model_version}};
}

/// Everything behind the HTTP routes, callable without a socket.
class Service {
public:
    Service(DatasetIndex catalog, std::shared_ptr<FeedbackStore> store, Engine engine,
            std::shared_ptr<RemoteArchive> remote = std::make_shared<NullRemoteArchive>())
        : catalog_(std::move(catalog)), store_(std::move(store)), remote_(std::move(remote)) {
        set_engine(std::move(engine));
    }

    double threshold = kConfidenceThreshold;
    int default_k = 4;

    void set_engine(Engine e) {
        if (!e.model) throw Error("engine has no model");
        auto next = std::make_shared<const Engine>(std::move(e));
        std::unique_lock lock(engine_mutex_);
        engine_ = std::move(next);
    }

    std::shared_ptr<const Engine> engine() const {
        std::shared_lock lock(engine_mutex_);
        return engine_;
    }

    const DatasetIndex& catalog() const { return catalog_; }
    FeedbackStore& store() { return *store_; }

    // POST /classify with {"image_id": ...}
    Response classify_id(const std::string& image_id) {
        auto eng = engine();
        auto img = resolve(image_id, *eng);
        if (!img) return error_response(404, "unknown image_id '" + image_id + "'");
        return json_response(200, classification_payload(predict(*eng, image_id, *img), eng->model->class_names,
                                                         eng->model_version));
    }

    // POST /classify with an encoded image body
    Response classify_upload(std::span<const uint8_t> bytes) {
        auto eng = engine();
        Image img;
        try {
            img = decode_image(bytes);
        } catch (const ImageError& e) {
            return error_response(400, e.what());
        }
        const std::string id = "upload-" + hex64(fnv1a64(bytes.data(), bytes.size()));
        img = fit(img, eng->model->input_size());
        {
            std::lock_guard lock(uploads_mutex_);
            uploads_.emplace(id, img);
        }
        return json_response(200, classification_payload(predict(*eng, id, img), eng->model->class_names,
                                                         eng->model_version));
    }

    // POST /classify, dispatching on the body
    Response classify(const std::string& body, const std::string& content_type) {
        if (content_type.find("json") != std::string::npos) {
            auto j = nlohmann::json::parse(body, nullptr, false);
            if (j.is_discarded() || !j.is_object() || !j.contains("image_id") || !j["image_id"].is_string())
                return error_response(400, "expected a JSON object with a string image_id");
            return classify_id(j["image_id"].get<std::string>());
        }
        return classify_upload({reinterpret_cast<const uint8_t*>(body.data()), body.size()});
    }

    // GET /images?split=&offset=&limit=
    Response images(const std::optional<std::string>& split, int offset = 0, int limit = 100) const {
        std::optional<Split> s;
        if (split) {
            s = parse_split(*split);
            if (!s) return error_response(400, "unknown split '" + *split + "'");
        }
        if (offset < 0 || limit < 1) return error_response(400, "offset must be >= 0 and limit >= 1");
        nlohmann::json items = nlohmann::json::array();
        int seen = 0;
        for (const auto& e : catalog_.entries) {
            if (s && e.split != s) continue;
            if (seen++ < offset || static_cast<int>(items.size()) >= limit) continue;
            nlohmann::json it{{"image_id", e.image_id}, {"instrument", to_string(e.instrument)}, {"sol", e.sol}};
            if (e.split) it["split"] = to_string(*e.split);
            items.push_back(std::move(it));
        }
        return json_response(200, {{"total", seen}, {"offset", offset}, {"items", items}});
    }

    // GET /explain/{image_id}?k=
    Response explain(const std::string& image_id, int k) {
        if (k < 1) return error_response(400, "k must be a positive integer");
        auto eng = engine();
        auto key = std::make_tuple(image_id, eng->model_version, k);
        {
            std::lock_guard lock(cache_mutex_);
            auto it = explain_cache_.find(key);
            if (it != explain_cache_.end()) return {200, it->second, "application/json"};
        }
        auto img = resolve(image_id, *eng);
        if (!img) return error_response(404, "unknown image_id '" + image_id + "'");
        std::string body;
        try {
            ExplainOptions opt;
            opt.k = k;
            body = to_json(protomsl::explain(*eng->model, *img, image_id, opt), eng->model_version).dump();
        } catch (const ExplainError& e) {
            return error_response(409, e.what());
        }
        std::lock_guard lock(cache_mutex_);
        // a concurrent request may have filled the slot; keep the first body
        auto [it, inserted] = explain_cache_.emplace(key, std::move(body));
        return {200, it->second, "application/json"};
    }

    // GET /explain/{image_id}/panel.png?k=
    Response explain_panel(const std::string& image_id, int k) {
        if (k < 1) return error_response(400, "k must be a positive integer");
        auto eng = engine();
        auto img = resolve(image_id, *eng);
        if (!img) return error_response(404, "unknown image_id '" + image_id + "'");
        try {
            ExplainOptions opt;
            opt.k = k;
            auto ex = protomsl::explain(*eng->model, *img, image_id, opt);
            const int size = eng->model->input_size();
            auto panel = render_panel(ex, *img, *eng->model,
                                      [&](const std::string& id) { return load_source_image(catalog_, id, size); });
            auto png = encode_png(panel);
            return {200, std::string(png.begin(), png.end()), "image/png"};
        } catch (const ExplainError& e) {
            return error_response(409, e.what());
        }
    }

    size_t explain_cache_size() const {
        std::lock_guard lock(cache_mutex_);
        return explain_cache_.size();
    }

    // POST /feedback
    Response feedback(const std::string& body) {
        auto j = nlohmann::json::parse(body, nullptr, false);
        if (j.is_discarded() || !j.is_object()) return error_response(400, "body must be a JSON object");
        auto eng = engine();
        nlohmann::json fields = nlohmann::json::object();
        FeedbackRecord r;

        if (!j.contains("image_id") || !j["image_id"].is_string() || j["image_id"].get<std::string>().empty()) {
            fields["image_id"] = "required string";
        } else {
            r.image_id = j["image_id"].get<std::string>();
        }
        std::optional<FeedbackKind> kind;
        if (j.contains("kind") && j["kind"].is_string()) kind = parse_feedback_kind(j["kind"].get<std::string>());
        if (!kind) fields["kind"] = "must be WRONG_LABEL or WRONG_EVIDENCE";
        else r.kind = *kind;

        const int C = eng->model->num_classes(), M = eng->model->prototypes.size();
        auto optional_int = [&](const char* name, int upper) -> std::optional<int> {
            if (!j.contains(name) || j[name].is_null()) return std::nullopt;
            if (!j[name].is_number_integer() || j[name].get<int64_t>() < 0 || j[name].get<int64_t>() >= upper) {
                fields[name] = "must be an integer in [0, " + std::to_string(upper) + ")";
                return std::nullopt;
            }
            return j[name].get<int>();
        };
        r.suggested_label = optional_int("suggested_label", C);
        r.prototype_id = optional_int("prototype_id", M);
        if (kind == FeedbackKind::WRONG_LABEL && !r.suggested_label && !fields.contains("suggested_label"))
            fields["suggested_label"] = "required for WRONG_LABEL";
        if (kind == FeedbackKind::WRONG_EVIDENCE && !r.prototype_id && !fields.contains("prototype_id"))
            fields["prototype_id"] = "required for WRONG_EVIDENCE";
        if (j.contains("comment") && !j["comment"].is_null()) {
            if (!j["comment"].is_string() || j["comment"].get<std::string>().size() > 4000)
                fields["comment"] = "must be a string of at most 4000 bytes";
            else
                r.comment = j["comment"].get<std::string>();
        }
        if (j.contains("model_version") && j["model_version"] != eng->model_version)
            fields["model_version"] = "stale: the service now runs " + eng->model_version;

        std::optional<Image> img;
        if (!r.image_id.empty()) {
            img = resolve(r.image_id, *eng);
            if (!img) fields["image_id"] = "unknown image";
        }
        if (!fields.empty()) return error_response(422, "invalid feedback", fields);

        r.model_version = eng->model_version;
        r.predicted_class = predict(*eng, r.image_id, *img).predicted_label;
        try {
            return json_response(201, to_json(store_->insert(std::move(r))));
        } catch (const StoreError& e) {
            return error_response(500, e.what());
        }
    }

    // GET /feedback/{id}
    Response feedback_by_id(int64_t id) {
        auto r = store_->get(id);
        if (!r) return error_response(404, "no feedback with id " + std::to_string(id));
        return json_response(200, to_json(*r));
    }

    // GET /export/review?model_version=
    Response export_review(const std::optional<std::string>& model_version) {
        auto eng = engine();
        return json_response(200, review_export(store_->list(model_version.value_or(eng->model_version)),
                                                model_version.value_or(eng->model_version),
                                                eng->model->class_names));
    }

    // GET /healthz
    Response healthz() const {
        auto eng = engine();
        return json_response(200, {{"status", "ok"},
                                   {"model_version", eng->model_version},
                                   {"classes", eng->model->class_names},
                                   {"images", catalog_.entries.size()}});
    }

    /// Feedback review tables for one model version: grouped counts, the
    /// majority-vote label patch with unresolved ties, and prototype complaints.
    static nlohmann::json review_export(const std::vector<FeedbackRecord>& rows, const std::string& model_version,
                                        const std::vector<std::string>& class_names) {
        nlohmann::json out{{"model_version", model_version}, {"total", rows.size()}, {"empty", rows.empty()}};
        using Key = std::tuple<int, std::string, int>;  // class, kind, prototype (-1 for none)
        std::map<Key, std::vector<std::string>> groups;
        std::map<std::string, std::map<int, int>> votes;
        std::map<int, int> complaints;
        for (const auto& r : rows) {
            groups[{r.predicted_class, to_string(r.kind), r.prototype_id.value_or(-1)}].push_back(r.image_id);
            if (r.kind == FeedbackKind::WRONG_LABEL) ++votes[r.image_id][*r.suggested_label];
            else ++complaints[*r.prototype_id];
        }
        auto class_name = [&](int c) { return c >= 0 && c < static_cast<int>(class_names.size()) ? class_names[c] : ""; };

        auto& g = out["groups"] = nlohmann::json::array();
        for (const auto& [key, images] : groups) {
            auto [cls, kind, proto] = key;
            std::vector<std::string> sample = images;
            std::sort(sample.begin(), sample.end());
            sample.erase(std::unique(sample.begin(), sample.end()), sample.end());
            if (sample.size() > 10) sample.resize(10);
            g.push_back({{"class", cls},
                         {"class_name", class_name(cls)},
                         {"kind", kind},
                         {"prototype_id", proto < 0 ? nlohmann::json(nullptr) : nlohmann::json(proto)},
                         {"count", images.size()},
                         {"sample_images", sample}});
        }

        auto& patch = out["label_patch"] = nlohmann::json::array();
        auto& unresolved = out["unresolved"] = nlohmann::json::array();
        for (const auto& [image, tally] : votes) {
            int best = -1, best_n = 0, ties = 0;
            for (const auto& [label, n] : tally) {
                if (n > best_n) {
                    best = label;
                    best_n = n;
                    ties = 0;
                } else if (n == best_n) {
                    ++ties;
                }
            }
            nlohmann::json v = nlohmann::json::object();
            for (const auto& [label, n] : tally) v[std::to_string(label)] = n;
            if (ties > 0)
                unresolved.push_back({{"image_id", image}, {"votes", v}});
            else
                patch.push_back({{"image_id", image},
                                 {"suggested_label", best},
                                 {"suggested_class_name", class_name(best)},
                                 {"votes", v}});
        }

        std::vector<std::pair<int, int>> ranking(complaints.begin(), complaints.end());
        std::stable_sort(ranking.begin(), ranking.end(), [](auto& a, auto& b) { return a.second > b.second; });
        auto& rank = out["prototype_complaints"] = nlohmann::json::array();
        for (const auto& [proto, n] : ranking) rank.push_back({{"prototype_id", proto}, {"count", n}});
        return out;
    }

private:
    static Image fit(const Image& img, int size) {
        Image rgb = to_rgb(img);
        return rgb.height == size && rgb.width == size ? rgb : resize_bilinear(rgb, size, size);
    }

    std::optional<Image> resolve(const std::string& image_id, const Engine& eng) {
        {
            std::lock_guard lock(uploads_mutex_);
            auto it = uploads_.find(image_id);
            if (it != uploads_.end()) return it->second;
        }
        const int size = eng.model->input_size();
        if (catalog_.find(image_id)) {
            try {
                return load_source_image(catalog_, image_id, size);
            } catch (const ExplainError&) {
                return std::nullopt;
            }
        }
        if (auto img = remote_->fetch(image_id)) return fit(*img, size);
        return std::nullopt;
    }

    PredictionRecord predict(const Engine& eng, const std::string& image_id, const Image& img) {
        auto key = std::make_pair(image_id, eng.model_version);
        {
            std::lock_guard lock(cache_mutex_);
            auto it = prediction_cache_.find(key);
            if (it != prediction_cache_.end()) return it->second;
        }
        HeadOutput h = eng.model->forward(img);
        auto rec = make_record(image_id, -1, h.logits, eng.model->probabilities(h.logits), threshold);
        std::lock_guard lock(cache_mutex_);
        prediction_cache_.emplace(key, rec);
        return rec;
    }

    DatasetIndex catalog_;
    std::shared_ptr<FeedbackStore> store_;
    std::shared_ptr<RemoteArchive> remote_;

    mutable std::shared_mutex engine_mutex_;
    std::shared_ptr<const Engine> engine_;

    std::mutex uploads_mutex_;
    std::map<std::string, Image> uploads_;

    mutable std::mutex cache_mutex_;
    std::map<std::tuple<std::string, std::string, int>, std::string> explain_cache_;
    std::map<std::pair<std::string, std::string>, PredictionRecord> prediction_cache_;
};

}  // namespace protomsl
