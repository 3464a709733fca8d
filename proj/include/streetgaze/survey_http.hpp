#pragma once

#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "streetgaze/error.hpp"
#include "streetgaze/survey_service.hpp"

namespace streetgaze {

struct ServerConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    std::filesystem::path manifest;
    std::filesystem::path image_dir;
    std::filesystem::path ui_dir;      // static participant UI bundle, served under /ui
    std::filesystem::path export_dir;  // GET /export also writes here when set
    std::string admin_token;           // empty disables GET /export
    std::int64_t sweep_interval_ms = 60'000;
    StudyConfig study;
};

using EnvLookup = std::function<std::optional<std::string>(const char* name)>;
std::optional<std::string> process_env(const char* name);

/// Reads the JSON config file (relative paths resolve against its directory),
/// applies STREETGAZE_PORT, STREETGAZE_MANIFEST, STREETGAZE_SEED,
/// STREETGAZE_PAIRS_PER_SESSION and STREETGAZE_ADMIN_TOKEN, then loads the
/// study manifest. A missing file path means defaults plus environment.
ServerConfig load_server_config(const std::optional<std::filesystem::path>& file,
                                const EnvLookup& env = process_env);

/// HTTP status for an error kind.
int http_status(ErrorKind kind);

class SurveyServer {
public:
    SurveyServer(SurveyService& service, ServerConfig config);
    ~SurveyServer();
    SurveyServer(const SurveyServer&) = delete;
    SurveyServer& operator=(const SurveyServer&) = delete;

    /// Binds the listening socket and returns the actual port.
    int bind();
    /// Serves until stop(); call bind() first.
    void run();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace streetgaze
