#include "doctest.h"

#include <sys/socket.h>

#include <map>
#include <random>
#include <thread>

#include "surgsim/bridge.hpp"
#include "surgsim/errors.hpp"

using namespace surgsim;
using namespace surgsim::bridge;
using env::TaskId;
using nlohmann::json;

namespace {

json reset_msg(std::uint64_t seed) { return {{"type", "reset"}, {"seed", seed}}; }

json step_msg(const Eigen::VectorXd& a) {
    return {{"type", "step"}, {"action", std::vector<double>(a.data(), a.data() + a.size())}};
}

Eigen::VectorXd vec(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// Runs the same random-action episodes in process and over the bridge and
// counts steps whose (obs, reward, done) differ.
int dual_run_mismatches(const env::TaskConfig& cfg, Client& client, int episodes, std::uint64_t seed0, long& steps) {
    env::TaskEnv local(cfg);
    std::mt19937_64 rng(seed0);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const int dim = local.action_spec().dim();
    int mismatches = 0;
    for (int e = 0; e < episodes; ++e) {
        const auto seed = seed0 + e;
        const auto obs = local.reset(seed);
        const auto remote = client.request(reset_msg(seed));
        mismatches += vec(remote["obs"]["observation"]) != obs.observation;
        bool done = false;
        while (!done) {
            Eigen::VectorXd a(dim);
            for (int i = 0; i < dim; ++i) a[i] = u(rng);
            const auto r = local.step(a);
            const auto rr = client.request(step_msg(a));
            ++steps;
            const bool same = rr["type"] == "step" && vec(rr["obs"]["observation"]) == r.obs.observation &&
                              vec(rr["obs"]["achieved_goal"]) == r.obs.achieved_goal &&
                              vec(rr["obs"]["desired_goal"]) == r.obs.desired_goal &&
                              rr["reward"].get<double>() == r.reward && rr["done"].get<bool>() == r.done &&
                              rr["info"]["is_success"].get<bool>() == r.info.is_success;
            mismatches += !same;
            done = r.done;
        }
    }
    return mismatches;
}

} // namespace

TEST_CASE("frames round trip through a socket pair") {
    int fds[2];
    REQUIRE(::socketpair(AF_UNIX, SOCK_STREAM, 0, fds) == 0);
    const std::string body = R"({"type":"spec"})";
    write_frame(fds[0], body);
    write_frame(fds[0], "");
    std::string got;
    REQUIRE(read_frame(fds[1], got));
    CHECK(got == body);
    REQUIRE(read_frame(fds[1], got));
    CHECK(got.empty());
    // Header bytes are big-endian.
    write_frame(fds[0], std::string(258, 'x'));
    unsigned char header[4];
    REQUIRE(::recv(fds[1], header, 4, 0) == 4);
    CHECK(header[0] == 0);
    CHECK(header[1] == 0);
    CHECK(header[2] == 1);
    CHECK(header[3] == 2);
    ::close(fds[0]);
    std::string rest(258, '\0');
    CHECK(::recv(fds[1], rest.data(), 258, MSG_WAITALL) == 258);
    CHECK_FALSE(read_frame(fds[1], got)); // clean EOF
    ::close(fds[1]);
}

TEST_CASE("session protocol errors") {
    Session s(env::default_config(TaskId::NeedleReach));
    bool closed = false;
    CHECK(s.handle_text(R"({"type":"step","action":[0,0,0]})", closed)["code"] == "bad_state");
    CHECK(s.handle_text("{not json", closed)["code"] == "bad_request");
    CHECK(s.handle_text("[1,2]", closed)["code"] == "bad_request");
    CHECK(s.handle_text(R"({"type":"fly"})", closed)["code"] == "bad_request");
    CHECK(s.handle_text(R"({"type":"reset"})", closed)["code"] == "bad_request");
    CHECK(s.handle_text(R"({"type":"reset","seed":-3})", closed)["code"] == "bad_request");
    CHECK(s.handle(reset_msg(1), closed)["type"] == "reset");
    CHECK(s.handle_text(R"({"type":"step","action":[0,0]})", closed)["code"] == "bad_action");
    CHECK(s.handle_text(R"({"type":"step","action":[0,"a",0]})", closed)["code"] == "bad_action");
    CHECK(s.handle_text(R"({"type":"step"})", closed)["code"] == "bad_request");
    CHECK_FALSE(closed);
    for (int t = 0; t < 50; ++t) REQUIRE(s.handle(step_msg(Eigen::VectorXd::Zero(3)), closed)["type"] == "step");
    CHECK(s.handle(step_msg(Eigen::VectorXd::Zero(3)), closed)["code"] == "bad_state");
    CHECK(s.handle_text(R"({"type":"close"})", closed)["type"] == "ack");
    CHECK(closed);
}

TEST_CASE("spec reports each task's dimensions") {
    const std::map<TaskId, int> action_dims = {
        {TaskId::NeedleReach, 3},   {TaskId::GauzeRetrieve, 4}, {TaskId::NeedlePick, 5}, {TaskId::PegTransfer, 5},
        {TaskId::NeedleRegrasp, 10}, {TaskId::BiPegTransfer, 10}, {TaskId::EcmReach, 3},  {TaskId::MisOrient, 1},
        {TaskId::StaticTrack, 4},   {TaskId::ActiveTrack, 4}};
    for (TaskId t : env::all_tasks()) {
        CAPTURE(env::task_name(t));
        Session s(env::default_config(t));
        bool closed = false;
        const auto spec = s.handle({{"type", "spec"}}, closed);
        CHECK(spec["task"] == env::task_name(t));
        CHECK(spec["action_dim"] == s.env().action_spec().dim());
        CHECK(spec["observation_dim"] == s.env().observation_dim());
        CHECK(spec["goal_dim"] == s.env().goal_dim());
        CHECK(spec["env_config_hash"] == s.env().config().hash());
        CHECK(spec["action_dim"] == action_dims.at(t));
    }
}

TEST_CASE("server: reset is deterministic and errors keep the connection") {
    Server server(env::default_config(TaskId::NeedlePick));
    Client client("127.0.0.1", server.port());
    CHECK(client.request({{"type", "step"}, {"action", {0, 0, 0, 0, 0}}})["code"] == "bad_state");
    const auto a = client.request(reset_msg(7));
    const auto b = client.request(reset_msg(7));
    CHECK(a.dump() == b.dump());
    CHECK(client.request_raw("{oops")["code"] == "bad_request");
    CHECK(client.request(step_msg(Eigen::VectorXd::Zero(3)))["code"] == "bad_action");
    CHECK(client.request(step_msg(Eigen::VectorXd::Zero(5)))["type"] == "step");
    CHECK(client.request({{"type", "close"}})["type"] == "ack");
    std::string body;
    CHECK_FALSE(read_frame(client.fd(), body)); // server hung up
    server.stop();
    CHECK(server.connections_served() == 1);
}

TEST_CASE("server drops a connection that announces an oversized frame") {
    Server server(env::default_config(TaskId::NeedleReach));
    Client bad("127.0.0.1", server.port());
    const unsigned char header[4] = {0xff, 0xff, 0xff, 0xff};
    REQUIRE(::send(bad.fd(), header, 4, 0) == 4);
    std::string body;
    CHECK_FALSE(read_frame(bad.fd(), body));
    // Other connections are unaffected.
    Client good("127.0.0.1", server.port());
    CHECK(good.request({{"type", "spec"}})["type"] == "spec");
}

TEST_CASE("bridged rollouts match in-process execution exactly") {
    const auto reach = env::default_config(TaskId::NeedleReach);
    Server reach_server(reach);
    Client c1("127.0.0.1", reach_server.port());
    long steps = 0;
    CHECK(dual_run_mismatches(reach, c1, 100, 0, steps) == 0);
    CHECK(steps == 100 * 50);

    const auto track = env::default_config(TaskId::ActiveTrack);
    Server track_server(track);
    Client c2("127.0.0.1", track_server.port());
    steps = 0;
    CHECK(dual_run_mismatches(track, c2, 100, 500, steps) == 0);
    CHECK(steps > 100);

    // A 1000-step ActiveTrack horizon; zero actions may lose the target early.
    auto long_track = track;
    long_track.horizon = 1000;
    Server long_server(long_track);
    Client c3("127.0.0.1", long_server.port());
    env::TaskEnv local(long_track);
    local.reset(3);
    c3.request(reset_msg(3));
    double local_return = 0.0, remote_return = 0.0;
    int t = 0;
    for (bool done = false; !done; ++t) {
        const auto r = local.step(Eigen::VectorXd::Zero(4));
        const auto rr = c3.request(step_msg(Eigen::VectorXd::Zero(4)));
        local_return += r.reward;
        remote_return += rr["reward"].get<double>();
        done = r.done;
        REQUIRE(rr["done"].get<bool>() == done);
    }
    CHECK(remote_return == local_return);
    CHECK(t <= 1000);
}

TEST_CASE("concurrent connections get independent envs") {
    const auto cfg = env::default_config(TaskId::NeedleReach);
    Server server(cfg);
    int bad[3] = {0, 0, 0};
    long steps[3] = {0, 0, 0};
    std::vector<std::thread> threads;
    for (int i = 0; i < 3; ++i)
        threads.emplace_back([&, i] {
            Client c("127.0.0.1", server.port());
            bad[i] = dual_run_mismatches(cfg, c, 10, 1000 * (i + 1), steps[i]);
        });
    for (auto& th : threads) th.join();
    for (int i = 0; i < 3; ++i) {
        CHECK(bad[i] == 0);
        CHECK(steps[i] == 500);
    }
    server.stop();
    CHECK(server.connections_served() == 3);
}

TEST_CASE("parse_address") {
    CHECK(parse_address("127.0.0.1:5555") == std::pair<std::string, int>{"127.0.0.1", 5555});
    CHECK_THROWS_AS(parse_address("localhost"), ContractViolation);
    CHECK_THROWS_AS(parse_address("1.2.3.4:x"), ContractViolation);
    CHECK_THROWS_AS(parse_address("1.2.3.4:70000"), ContractViolation);
    CHECK_THROWS_AS(Server(env::default_config(TaskId::NeedleReach), "not-an-ip", 0), ContractViolation);
}
