#pragma once

// Local TCP bridge exposing a TaskEnv to out-of-process clients. Frames are
// a 4-byte big-endian length followed by a UTF-8 JSON body. Requests:
//   {"type":"spec"}
//   {"type":"reset","seed":7}
//   {"type":"step","action":[...]}
//   {"type":"close"}
// Failures come back as {"type":"error","code":...,"message":...} and keep
// the connection open. Each connection owns its own env and thread.

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "surgsim/env.hpp"

namespace surgsim::bridge {

constexpr std::uint32_t kMaxFrameBytes = 16u << 20;

/// Protocol state of one connection.
class Session {
public:
    explicit Session(env::TaskConfig config) : env_(std::move(config)) {}

    /// Handles one decoded request. `closed` is set by a close request.
    nlohmann::json handle(const nlohmann::json& request, bool& closed);
    /// Handles raw frame text, answering parse failures with bad_request.
    nlohmann::json handle_text(const std::string& text, bool& closed);

    const env::TaskEnv& env() const { return env_; }

private:
    env::TaskEnv env_;
    bool has_reset_ = false;
    bool done_ = false;
};

nlohmann::json error_response(const std::string& code, const std::string& message);
nlohmann::json observation_json(const env::Observation& obs);
env::Observation observation_from_json(const nlohmann::json& j);

/// Blocking frame I/O on a connected socket. read_frame returns false on a
/// clean EOF before any header byte; other failures throw std::runtime_error.
bool read_frame(int fd, std::string& body);
void write_frame(int fd, const std::string& body);

class Server {
public:
    /// Binds host:port (port 0 picks a free port) and starts accepting.
    Server(env::TaskConfig config, const std::string& host = "127.0.0.1", int port = 0);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    int port() const { return port_; }
    /// Stops accepting, shuts down open connections and joins all threads.
    void stop();
    int connections_served() const { return served_.load(); }

private:
    void accept_loop();
    void serve_connection(int fd);

    env::TaskConfig config_;
    int listen_fd_ = -1;
    int port_ = 0;
    std::atomic<bool> stopping_{false};
    std::atomic<int> served_{0};
    std::thread acceptor_;
    std::mutex mutex_;
    std::vector<std::thread> workers_;
    std::vector<int> open_fds_;
};

/// Minimal blocking client, used by tests and tooling.
class Client {
public:
    Client(const std::string& host, int port);
    ~Client();
    Client(const Client&) = delete;
    Client& operator=(const Client&) = delete;

    nlohmann::json request(const nlohmann::json& message);
    /// Sends raw bytes as one frame; for protocol tests.
    nlohmann::json request_raw(const std::string& body);
    int fd() const { return fd_; }

private:
    int fd_ = -1;
};

/// Parses "host:port"; throws ContractViolation.
std::pair<std::string, int> parse_address(const std::string& address);

} // namespace surgsim::bridge
