#include "streetgaze/survey_http.hpp"

#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <set>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "streetgaze/text_io.hpp"

namespace streetgaze {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

void reply_json(httplib::Response& res, int status, const ordered_json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void reply_error(httplib::Response& res, ErrorKind kind, const std::string& message) {
    ordered_json body;
    body["error"] = std::string(to_string(kind));
    body["message"] = message;
    reply_json(res, http_status(kind), body);
}

json parse_body(const httplib::Request& req) {
    try {
        return json::parse(req.body);
    } catch (const std::exception& e) {
        fail(ErrorKind::Parse, std::string("request body is not valid JSON: ") + e.what());
    }
}

ordered_json pair_json(const PairAssignment& p, const SurveyService& svc, std::size_t of) {
    auto image = [&](const std::string& id) {
        ordered_json j;
        j["image_id"] = id;
        const auto* img = svc.find_image(id);
        j["url"] = "/images/" + (img ? img->file : id);
        return j;
    };
    ordered_json j;
    j["pair_id"] = p.pair_id;
    j["left"] = image(p.left_image);
    j["right"] = image(p.right_image);
    j["index"] = p.index;
    j["of"] = of;
    return j;
}

std::vector<RawGazeSample> parse_samples(const json& body) {
    if (!body.is_object() || !body.contains("samples") || !body["samples"].is_array()) {
        fail(ErrorKind::Validation, "gaze batch needs a samples array");
    }
    std::vector<RawGazeSample> out;
    for (std::size_t i = 0; i < body["samples"].size(); ++i) {
        const auto& s = body["samples"][i];
        try {
            RawGazeSample g;
            g.t_ms = s.at("t_ms").get<std::int64_t>();
            const bool valid = s.contains("valid") ? s.at("valid").get<bool>() : true;
            g.validity = valid ? Validity::Valid : Validity::Invalid;
            g.x = s.at("x_px").is_null() ? std::nan("") : s.at("x_px").get<double>();
            g.y = s.at("y_px").is_null() ? std::nan("") : s.at("y_px").get<double>();
            out.push_back(std::move(g));
        } catch (const Error&) {
            throw;
        } catch (const std::exception& e) {
            fail(ErrorKind::Validation, fmt::format("sample {}: {}", i, e.what()));
        }
    }
    return out;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& value) {
    std::filesystem::path p(value);
    return p.is_absolute() ? p : base / p;
}

std::uint64_t parse_u64(const std::string& name, const std::string& text) {
    try {
        std::size_t used = 0;
        if (text.empty() || text[0] == '-') throw std::invalid_argument("negative");
        const auto v = std::stoull(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        fail(ErrorKind::Validation, fmt::format("{} must be a non-negative integer, got '{}'", name, text));
    }
}

}  // namespace

std::optional<std::string> process_env(const char* name) {
    const char* v = std::getenv(name);
    if (!v) return std::nullopt;
    return std::string(v);
}

int http_status(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Parse: return 400;
        case ErrorKind::Unauthorized: return 401;
        case ErrorKind::NotFound: return 404;
        case ErrorKind::Conflict: return 409;
        case ErrorKind::NoMorePairs: return 410;
        case ErrorKind::TooLarge: return 413;
        case ErrorKind::InvalidArgument:
        case ErrorKind::Validation: return 422;
        default: return 500;
    }
}

ServerConfig load_server_config(const std::optional<std::filesystem::path>& file, const EnvLookup& env) {
    ServerConfig cfg;
    std::filesystem::path base = std::filesystem::current_path();
    std::optional<std::string> manifest;
    if (file) {
        base = std::filesystem::absolute(*file).parent_path();
        json j;
        try {
            j = json::parse(text_io::read_file(*file), nullptr, true, true);
        } catch (const json::exception& e) {
            fail(ErrorKind::Parse, fmt::format("{}: {}", file->string(), e.what()));
        }
        if (!j.is_object()) fail(ErrorKind::Validation, "server config must be a JSON object");
        static const std::set<std::string> known = {
            "host", "port", "manifest", "image_dir", "ui_dir", "data_dir", "export_dir", "seed",
            "pairs_per_session", "scheduler", "admin_token", "max_gaze_batch", "session_ttl_s",
            "gaze_grace_s", "snapshot_every", "exposure_target", "sweep_interval_s", "fsync"};
        for (const auto& [key, value] : j.items()) {
            if (!known.contains(key)) fail(ErrorKind::Validation, "unknown server config field: " + key);
        }
        try {
            if (j.contains("host")) cfg.host = j["host"].get<std::string>();
            if (j.contains("port")) cfg.port = j["port"].get<int>();
            if (j.contains("manifest")) manifest = j["manifest"].get<std::string>();
            if (j.contains("image_dir")) cfg.image_dir = resolve(base, j["image_dir"].get<std::string>());
            if (j.contains("ui_dir")) cfg.ui_dir = resolve(base, j["ui_dir"].get<std::string>());
            if (j.contains("data_dir")) cfg.study.data_dir = resolve(base, j["data_dir"].get<std::string>());
            if (j.contains("export_dir")) cfg.export_dir = resolve(base, j["export_dir"].get<std::string>());
            if (j.contains("seed")) cfg.study.seed = j["seed"].get<std::uint64_t>();
            if (j.contains("pairs_per_session")) cfg.study.pairs_per_session = j["pairs_per_session"].get<std::size_t>();
            if (j.contains("scheduler")) cfg.study.policy = scheduler_policy_from_string(j["scheduler"].get<std::string>());
            if (j.contains("admin_token")) cfg.admin_token = j["admin_token"].get<std::string>();
            if (j.contains("max_gaze_batch")) cfg.study.max_gaze_batch = j["max_gaze_batch"].get<std::size_t>();
            if (j.contains("session_ttl_s")) cfg.study.session_ttl_ms = j["session_ttl_s"].get<std::int64_t>() * 1000;
            if (j.contains("gaze_grace_s")) cfg.study.gaze_grace_ms = j["gaze_grace_s"].get<std::int64_t>() * 1000;
            if (j.contains("snapshot_every")) cfg.study.snapshot_every = j["snapshot_every"].get<std::size_t>();
            if (j.contains("exposure_target")) cfg.study.exposure_target = j["exposure_target"].get<double>();
            if (j.contains("sweep_interval_s")) cfg.sweep_interval_ms = j["sweep_interval_s"].get<std::int64_t>() * 1000;
            if (j.contains("fsync")) cfg.study.fsync = j["fsync"].get<bool>();
        } catch (const json::exception& e) {
            fail(ErrorKind::Validation, fmt::format("server config: {}", e.what()));
        }
    }
    if (auto v = env("STREETGAZE_PORT")) {
        const auto port = parse_u64("STREETGAZE_PORT", *v);
        if (port > 65535) fail(ErrorKind::Validation, "STREETGAZE_PORT out of range");
        cfg.port = static_cast<int>(port);
    }
    if (auto v = env("STREETGAZE_MANIFEST")) {
        manifest = *v;
        base = std::filesystem::current_path();
    }
    if (auto v = env("STREETGAZE_SEED")) cfg.study.seed = parse_u64("STREETGAZE_SEED", *v);
    if (auto v = env("STREETGAZE_PAIRS_PER_SESSION")) {
        cfg.study.pairs_per_session = parse_u64("STREETGAZE_PAIRS_PER_SESSION", *v);
    }
    if (auto v = env("STREETGAZE_ADMIN_TOKEN")) cfg.admin_token = *v;

    if (cfg.port < 0 || cfg.port > 65535) fail(ErrorKind::Validation, "port out of range");
    if (!manifest) fail(ErrorKind::Validation, "manifest is required (config field or STREETGAZE_MANIFEST)");
    cfg.manifest = resolve(base, *manifest);
    cfg.study.images = read_study_manifest(cfg.manifest);
    if (cfg.image_dir.empty()) cfg.image_dir = cfg.manifest.parent_path();
    cfg.study.validate();
    return cfg;
}

struct SurveyServer::Impl {
    SurveyService& service;
    ServerConfig config;
    httplib::Server http;
    std::mutex stop_mutex;
    std::condition_variable stop_cv;
    bool stopping = false;

    Impl(SurveyService& svc, ServerConfig cfg) : service(svc), config(std::move(cfg)) { routes(); }

    template <typename F>
    httplib::Server::Handler guarded(F f) {
        return [f](const httplib::Request& req, httplib::Response& res) {
            try {
                f(req, res);
            } catch (const Error& e) {
                reply_error(res, e.kind(), e.what());
            } catch (const std::exception& e) {
                reply_error(res, ErrorKind::Io, e.what());
            }
        };
    }

    void routes() {
        // Roughly 100 bytes per serialized sample plus slack for the envelope.
        http.set_payload_max_length(config.study.max_gaze_batch * 128 + (1 << 16));
        if (!config.image_dir.empty() && std::filesystem::is_directory(config.image_dir)) {
            http.set_mount_point("/images", config.image_dir.string());
        }
        if (!config.ui_dir.empty()) {
            if (!std::filesystem::is_directory(config.ui_dir)) fail(ErrorKind::Validation, "ui_dir is not a directory: " + config.ui_dir.string());
            http.set_mount_point("/ui", config.ui_dir.string());
        }

        http.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto s = service.create_session(parse_demographics(req.body));
            ordered_json j;
            j["session_id"] = s.session_id;
            j["pairs_per_session"] = service.config().pairs_per_session;
            j["state"] = std::string(to_string(s.state));
            reply_json(res, 201, j);
        }));

        http.Get(R"(/sessions/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto s = service.session(req.matches[1]);
            ordered_json j;
            j["session_id"] = s.session_id;
            j["state"] = std::string(to_string(s.state));
            j["pairs_served"] = s.pairs_served();
            j["pairs_answered"] = s.pairs_answered();
            j["pairs_per_session"] = service.config().pairs_per_session;
            reply_json(res, 200, j);
        }));

        http.Get(R"(/sessions/([^/]+)/pair)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto p = service.next_pair(req.matches[1]);
            reply_json(res, 200, pair_json(p, service, service.config().pairs_per_session));
        }));

        http.Post(R"(/sessions/([^/]+)/choice)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto body = parse_body(req);
            if (!body.is_object() || !body.contains("pair_id") || !body["pair_id"].is_string() ||
                !body.contains("chosen") || !body["chosen"].is_string()) {
                fail(ErrorKind::Validation, "choice needs string fields pair_id and chosen");
            }
            Side side;
            try {
                side = side_from_string(body["chosen"].get<std::string>());
            } catch (const Error& e) {
                fail(ErrorKind::Validation, e.what());
            }
            const auto r = service.record_choice(req.matches[1], body["pair_id"].get<std::string>(), side);
            reply_json(res, 200, json::parse(serialize_comparison(r)));
        }));

        http.Post(R"(/sessions/([^/]+)/gaze)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto body = parse_body(req);
            if (!body.is_object() || !body.contains("image_id") || !body["image_id"].is_string()) {
                fail(ErrorKind::Validation, "gaze batch needs a string image_id");
            }
            const auto n = service.record_gaze_batch(req.matches[1], body["image_id"].get<std::string>(),
                                                     parse_samples(body));
            ordered_json j;
            j["accepted"] = n;
            reply_json(res, 200, j);
        }));

        http.Get("/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto auth = req.get_header_value("Authorization");
            if (config.admin_token.empty() || auth != "Bearer " + config.admin_token) {
                fail(ErrorKind::Unauthorized, "admin token required");
            }
            ExportOptions opts;
            opts.include_abandoned = req.get_param_value("include_abandoned") == "1";
            service.sweep_abandoned();
            const auto bundle = service.export_bundle(opts);
            if (!config.export_dir.empty()) service.export_logs(config.export_dir, opts);
            ordered_json j;
            j[std::string(kComparisonsFile)] = bundle.comparisons;
            j[std::string(kGazeFile)] = bundle.gaze;
            j[std::string(kSessionsFile)] = bundle.sessions;
            reply_json(res, 200, j);
        }));
    }
};

SurveyServer::SurveyServer(SurveyService& service, ServerConfig config)
    : impl_(std::make_unique<Impl>(service, std::move(config))) {}

SurveyServer::~SurveyServer() { stop(); }

int SurveyServer::bind() {
    int port = impl_->config.port;
    if (port == 0) {
        port = impl_->http.bind_to_any_port(impl_->config.host);
    } else if (!impl_->http.bind_to_port(impl_->config.host, port)) {
        port = -1;
    }
    if (port < 0) {
        fail(ErrorKind::Io, fmt::format("cannot bind {}:{}", impl_->config.host, impl_->config.port));
    }
    return port;
}

void SurveyServer::run() {
    std::thread sweeper([this] {
        std::unique_lock lock(impl_->stop_mutex);
        const auto every = std::chrono::milliseconds(std::max<std::int64_t>(impl_->config.sweep_interval_ms, 1));
        while (!impl_->stop_cv.wait_for(lock, every, [this] { return impl_->stopping; })) {
            try {
                impl_->service.sweep_abandoned();
            } catch (const std::exception&) {
                // The next request or sweep retries; the log is unchanged on failure.
            }
        }
    });
    impl_->http.listen_after_bind();
    {
        std::lock_guard lock(impl_->stop_mutex);
        impl_->stopping = true;
    }
    impl_->stop_cv.notify_all();
    sweeper.join();
}

void SurveyServer::stop() {
    if (!impl_) return;
    {
        std::lock_guard lock(impl_->stop_mutex);
        impl_->stopping = true;
    }
    impl_->stop_cv.notify_all();
    impl_->http.stop();
}

}  // namespace streetgaze
