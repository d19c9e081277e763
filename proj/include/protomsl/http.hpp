#pragma once

#include <charconv>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

// Eigen must come before httplib: <resolv.h> defines a _res macro.
#include "protomsl/service.hpp"

// The library default backlog of 5 drops connections when many clients post at once.
#ifndef CPPHTTPLIB_LISTEN_BACKLOG
#define CPPHTTPLIB_LISTEN_BACKLOG 1024
#endif
#ifndef CPPHTTPLIB_USE_POLL
#define CPPHTTPLIB_USE_POLL
#endif
#include "httplib.h"

namespace protomsl {

namespace detail {

inline void send(httplib::Response& res, const Response& r) {
    res.status = r.status;
    res.set_content(r.body, r.content_type);
}

inline std::optional<int> int_param(const httplib::Request& req, const char* name, int fallback, bool& ok) {
    ok = true;
    if (!req.has_param(name)) return fallback;
    const std::string v = req.get_param_value(name);
    int out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size()) {
        ok = false;
        return std::nullopt;
    }
    return out;
}

}  // namespace detail

/// Routes of the JSON API. `static_dir`, when given, is served at "/".
inline std::unique_ptr<httplib::Server> make_http_server(Service& svc, const std::filesystem::path& static_dir = {}) {
    auto server = std::make_unique<httplib::Server>();
    using detail::send;

    server->Post("/classify", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.classify(req.body, req.get_header_value("Content-Type")));
    });

    server->Get("/images", [&svc](const httplib::Request& req, httplib::Response& res) {
        bool ok_o, ok_l;
        auto offset = detail::int_param(req, "offset", 0, ok_o);
        auto limit = detail::int_param(req, "limit", 100, ok_l);
        if (!ok_o || !ok_l) return send(res, error_response(400, "offset and limit must be integers"));
        std::optional<std::string> split;
        if (req.has_param("split")) split = req.get_param_value("split");
        send(res, svc.images(split, *offset, *limit));
    });

    server->Get(R"(/explain/(.+)/panel\.png)", [&svc](const httplib::Request& req, httplib::Response& res) {
        bool ok;
        auto k = detail::int_param(req, "k", svc.default_k, ok);
        if (!ok) return send(res, error_response(400, "k must be a positive integer"));
        send(res, svc.explain_panel(req.matches[1], *k));
    });

    server->Get(R"(/explain/(.+))", [&svc](const httplib::Request& req, httplib::Response& res) {
        bool ok;
        auto k = detail::int_param(req, "k", svc.default_k, ok);
        if (!ok) return send(res, error_response(400, "k must be a positive integer"));
        send(res, svc.explain(req.matches[1], *k));
    });

    server->Post("/feedback", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.feedback(req.body));
    });

    server->Get(R"(/feedback/(\d+))", [&svc](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.feedback_by_id(std::stoll(req.matches[1])));
    });

    server->Get("/export/review", [&svc](const httplib::Request& req, httplib::Response& res) {
        std::optional<std::string> version;
        if (req.has_param("model_version")) version = req.get_param_value("model_version");
        send(res, svc.export_review(version));
    });

    server->Get("/healthz", [&svc](const httplib::Request&, httplib::Response& res) { send(res, svc.healthz()); });

    if (!static_dir.empty()) server->set_mount_point("/", static_dir.string());

    server->set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string msg = "internal error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            msg = e.what();
        } catch (...) {
        }
        send(res, error_response(500, msg));
    });
    return server;
}

}  // namespace protomsl
