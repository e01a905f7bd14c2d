#include "surgsim/bridge.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include "surgsim/errors.hpp"

namespace surgsim::bridge {

using nlohmann::json;

namespace {

json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd vec_from(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void send_all(int fd, const char* data, size_t n) {
    while (n > 0) {
        const ssize_t k = ::send(fd, data, n, MSG_NOSIGNAL);
        if (k < 0) {
            if (errno == EINTR) continue;
            throw std::runtime_error(std::string("send failed: ") + std::strerror(errno));
        }
        data += k;
        n -= static_cast<size_t>(k);
    }
}

// Returns bytes read; fewer than n only at EOF.
size_t recv_all(int fd, char* data, size_t n) {
    size_t got = 0;
    while (got < n) {
        const ssize_t k = ::recv(fd, data + got, n - got, 0);
        if (k == 0) break;
        if (k < 0) {
            if (errno == EINTR) continue;
            throw std::runtime_error(std::string("recv failed: ") + std::strerror(errno));
        }
        got += static_cast<size_t>(k);
    }
    return got;
}

} // namespace

json error_response(const std::string& code, const std::string& message) {
    return {{"type", "error"}, {"code", code}, {"message", message}};
}

json observation_json(const env::Observation& obs) {
    return {{"observation", vec_json(obs.observation)},
            {"achieved_goal", vec_json(obs.achieved_goal)},
            {"desired_goal", vec_json(obs.desired_goal)}};
}

env::Observation observation_from_json(const json& j) {
    return {vec_from(j.at("observation")), vec_from(j.at("achieved_goal")), vec_from(j.at("desired_goal"))};
}

json Session::handle(const json& request, bool& closed) {
    if (!request.is_object() || !request.contains("type") || !request.at("type").is_string())
        return error_response("bad_request", "request must be an object with a string 'type'");
    const std::string type = request.at("type");
    try {
        if (type == "spec") {
            const auto& spec = env_.action_spec();
            return {{"type", "spec"},
                    {"task", env::task_name(env_.task())},
                    {"action_dim", spec.dim()},
                    {"action_components", spec.components},
                    {"action_scale", spec.scale},
                    {"observation_dim", env_.observation_dim()},
                    {"goal_dim", env_.goal_dim()},
                    {"goal_based", env::is_goal_based(env_.task())},
                    {"horizon", env_.horizon()},
                    {"env_config_hash", env_.config().hash()},
                    {"config", env_.config().to_json()}};
        }
        if (type == "reset") {
            if (!request.contains("seed") || !request.at("seed").is_number_unsigned())
                return error_response("bad_request", "reset needs a non-negative integer 'seed'");
            const auto obs = env_.reset(request.at("seed").get<std::uint64_t>());
            has_reset_ = true;
            done_ = false;
            return {{"type", "reset"}, {"obs", observation_json(obs)}};
        }
        if (type == "step") {
            if (!has_reset_) return error_response("bad_state", "step before reset");
            if (done_) return error_response("bad_state", "episode is done; reset first");
            if (!request.contains("action") || !request.at("action").is_array())
                return error_response("bad_request", "step needs an 'action' array");
            for (const auto& v : request.at("action"))
                if (!v.is_number()) return error_response("bad_action", "action components must be numbers");
            const Eigen::VectorXd action = vec_from(request.at("action"));
            if (action.size() != env_.action_spec().dim())
                return error_response("bad_action", "action has " + std::to_string(action.size()) +
                                                        " components, expected " +
                                                        std::to_string(env_.action_spec().dim()));
            const auto r = env_.step(action);
            done_ = r.done;
            return {{"type", "step"},
                    {"obs", observation_json(r.obs)},
                    {"reward", r.reward},
                    {"done", r.done},
                    {"info",
                     {{"is_success", r.info.is_success},
                      {"timeout", r.info.timeout},
                      {"target_lost", r.info.target_lost}}}};
        }
        if (type == "close") {
            closed = true;
            return {{"type", "ack"}};
        }
    } catch (const ContractViolation& e) {
        return error_response("bad_request", e.what());
    } catch (const std::exception& e) {
        return error_response("internal", e.what());
    }
    return error_response("bad_request", "unknown request type '" + type + "'");
}

json Session::handle_text(const std::string& text, bool& closed) {
    json request;
    try {
        request = json::parse(text);
    } catch (const json::exception& e) {
        return error_response("bad_request", std::string("malformed JSON: ") + e.what());
    }
    return handle(request, closed);
}

bool read_frame(int fd, std::string& body) {
    unsigned char header[4];
    const size_t got = recv_all(fd, reinterpret_cast<char*>(header), 4);
    if (got == 0) return false;
    if (got < 4) throw std::runtime_error("connection closed inside a frame header");
    const std::uint32_t n = (std::uint32_t(header[0]) << 24) | (std::uint32_t(header[1]) << 16) |
                            (std::uint32_t(header[2]) << 8) | std::uint32_t(header[3]);
    if (n > kMaxFrameBytes) throw std::runtime_error("frame of " + std::to_string(n) + " bytes exceeds the limit");
    body.assign(n, '\0');
    if (recv_all(fd, body.data(), n) < n) throw std::runtime_error("connection closed inside a frame body");
    return true;
}

void write_frame(int fd, const std::string& body) {
    if (body.size() > kMaxFrameBytes) throw std::runtime_error("frame too large");
    const auto n = static_cast<std::uint32_t>(body.size());
    const unsigned char header[4] = {static_cast<unsigned char>(n >> 24), static_cast<unsigned char>(n >> 16),
                                     static_cast<unsigned char>(n >> 8), static_cast<unsigned char>(n)};
    std::string frame(reinterpret_cast<const char*>(header), 4);
    frame += body;
    send_all(fd, frame.data(), frame.size());
}

// --- Server --------------------------------------------------------------------

Server::Server(env::TaskConfig config, const std::string& host, int port) : config_(std::move(config)) {
    env::TaskEnv probe(config_); // validate the config before binding
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
        ::close(listen_fd_);
        throw ContractViolation("bridge host must be an IPv4 address, got '" + host + "'");
    }
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 16) < 0) {
        const std::string err = std::strerror(errno);
        ::close(listen_fd_);
        throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port) + ": " + err);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    acceptor_ = std::thread([this] { accept_loop(); });
}

Server::~Server() { stop(); }

void Server::accept_loop() {
    while (!stopping_) {
        const int fd = ::accept(listen_fd_, nullptr, nullptr);
        if (fd < 0) {
            if (errno == EINTR) continue;
            break; // listening socket shut down
        }
        std::lock_guard lock(mutex_);
        if (stopping_) {
            ::close(fd);
            break;
        }
        open_fds_.push_back(fd);
        workers_.emplace_back([this, fd] { serve_connection(fd); });
    }
}

void Server::serve_connection(int fd) {
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    try {
        Session session(config_);
        std::string body;
        bool closed = false;
        while (!closed && read_frame(fd, body)) write_frame(fd, session.handle_text(body, closed).dump());
    } catch (const std::exception&) {
        // Transport failure: drop this connection only.
    }
    ++served_;
    std::lock_guard lock(mutex_);
    open_fds_.erase(std::remove(open_fds_.begin(), open_fds_.end(), fd), open_fds_.end());
    ::close(fd);
}

void Server::stop() {
    if (stopping_.exchange(true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> workers;
    {
        std::lock_guard lock(mutex_);
        for (int fd : open_fds_) ::shutdown(fd, SHUT_RDWR);
        workers.swap(workers_);
    }
    for (auto& t : workers) t.join();
}

// --- Client --------------------------------------------------------------------

Client::Client(const std::string& host, int port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw std::runtime_error(std::string("socket: ") + std::strerror(errno));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1 ||
        ::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
        const std::string err = std::strerror(errno);
        ::close(fd_);
        throw std::runtime_error("cannot connect to " + host + ":" + std::to_string(port) + ": " + err);
    }
    const int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

Client::~Client() {
    if (fd_ >= 0) ::close(fd_);
}

json Client::request_raw(const std::string& body) {
    write_frame(fd_, body);
    std::string reply;
    if (!read_frame(fd_, reply)) throw std::runtime_error("server closed the connection");
    return json::parse(reply);
}

json Client::request(const json& message) { return request_raw(message.dump()); }

std::pair<std::string, int> parse_address(const std::string& address) {
    const auto colon = address.rfind(':');
    if (colon == std::string::npos || colon == 0) throw ContractViolation("address must be host:port, got '" + address + "'");
    const std::string host = address.substr(0, colon);
    int port = -1;
    try {
        size_t used = 0;
        port = std::stoi(address.substr(colon + 1), &used);
        if (used != address.size() - colon - 1) port = -1;
    } catch (const std::exception&) {
    }
    if (port < 0 || port > 65535) throw ContractViolation("bad port in address '" + address + "'");
    return {host, port};
}

} // namespace surgsim::bridge
