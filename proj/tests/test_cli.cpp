#include "doctest.h"

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "surgsim/demos.hpp"
#include "surgsim/rollout.hpp"

using namespace surgsim;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string output;
};

Run cli(const std::string& args) {
    const std::string cmd = std::string(SURGSIM_CLI) + " " + args + " 2>&1";
    Run r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[512];
    while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
    const int status = ::pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("surgsim_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST_CASE("usage and config errors exit with 2") {
    const auto dir = scratch("usage");
    CHECK(cli("").code == 2);
    CHECK(cli("frobnicate").code == 2);
    CHECK(cli("train --task no_such_task --out " + dir.string()).code == 2);
    CHECK(cli("train --task needle_pick --algo her_demo --out " + dir.string()).code == 2);
    CHECK(cli("train --task needle_pick --algo her_demo --demos " + (dir / "missing.jsonl").string() + " --out " +
              dir.string())
              .code == 2);
    CHECK(cli("eval --task needle_reach --policy " + (dir / "missing.json").string() + " --out " + dir.string())
              .code == 2);
    CHECK(cli("serve --task needle_reach --serve nohost --out " + dir.string()).code == 2);
    CHECK(cli("--help").code == 0);
}

TEST_CASE("collect writes a manifest first and replay verifies the file") {
    const auto dir = scratch("collect");
    const auto r = cli("collect --task needle_reach --episodes 3 --out " + dir.string());
    REQUIRE(r.code == 0);
    const auto manifest = nlohmann::json::parse(std::ifstream(dir / "manifest.json"));
    CHECK(manifest["command"] == "collect");
    CHECK(manifest["task"] == "needle_reach");
    CHECK(manifest["grasp_mode"] == "interact");
    CHECK(manifest.contains("git_describe"));
    CHECK(manifest["task_config"]["task"] == "needle_reach");

    const auto file = (dir / "needle_reach_demos.jsonl").string();
    const auto ok = cli("replay --file " + file + " --out " + (dir / "replay").string());
    CHECK(ok.code == 0);
    CHECK(ok.output.find("0 diverged") != std::string::npos);

    // A well-formed file with one tampered action.
    auto episodes = read_episodes(file);
    episodes.episodes[1].actions[10][0] = -episodes.episodes[1].actions[10][0] + 0.5;
    const auto tampered = (dir / "tampered.jsonl").string();
    write_episodes(tampered, episodes.config, episodes.episodes);
    const auto bad = cli("replay --file " + tampered + " --out " + (dir / "replay2").string());
    CHECK(bad.code == 1);
    CHECK(bad.output.find("diverges at step 10") != std::string::npos);

    // The same episodes under another grasp mode are reported, not silently accepted.
    const auto other = cli("replay --file " + file + " --grasp-mode approx:2 --out " + (dir / "replay3").string());
    CHECK(other.output.find("episodes replayed") != std::string::npos);
}

TEST_CASE("short train run produces metrics, a policy and a summary") {
    const auto dir = scratch("train");
    std::ofstream(dir / "small.json") << R"({"cycles":2,"updates_per_cycle":5,"test_episodes":2})";
    const auto r = cli("train --task needle_reach --algo her --seeds 3,4 --epochs 2 --eval-episodes 3 --train-config " +
                       (dir / "small.json").string() + " --out " + dir.string());
    REQUIRE(r.code == 0);
    for (const char* s : {"seed_3", "seed_4"}) {
        CHECK(fs::exists(dir / s / "metrics.csv"));
        CHECK(fs::exists(dir / s / "policy.json"));
    }
    std::ifstream summary(dir / "summary.csv");
    std::string line;
    int rows = 0;
    while (std::getline(summary, line)) ++rows;
    CHECK(rows == 3);

    const auto e = cli("eval --task needle_reach --episodes 4 --policy " + (dir / "seed_3" / "policy.json").string() +
                       " --out " + (dir / "eval").string());
    CHECK(e.code == 0);
    CHECK(fs::exists(dir / "eval" / "eval.json"));
}

TEST_CASE("bench reports a rate") {
    const auto dir = scratch("bench");
    const auto r = cli("bench --task needle_pick --steps 200 --trials 2 --out " + dir.string());
    REQUIRE(r.code == 0);
    const auto j = nlohmann::json::parse(std::ifstream(dir / "bench.json"));
    CHECK(j["trials"].size() == 2);
    CHECK(j["mean_hz"].get<double>() > 0.0);
}
