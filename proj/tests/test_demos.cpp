#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "surgsim/demos.hpp"
#include "surgsim/errors.hpp"

using namespace surgsim;
using namespace surgsim::demos;
using env::TaskId;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("surgsim_" + name)).string();
}

std::vector<std::string> stage_labels(const ScriptedPolicy& p, int arm) {
    std::vector<std::string> out;
    for (const auto& s : p.stages) {
        const auto& w = s.arms.at(arm);
        if (w.ref == Waypoint::Ref::Hold) continue;
        if (out.empty() || out.back() != w.label) out.push_back(w.label);
    }
    return out;
}

} // namespace

TEST_CASE("NeedlePick plan is approach, pick, lift, place") {
    env::TaskEnv env(env::default_config(TaskId::NeedlePick));
    env.reset(0);
    const auto p = plan_waypoints(env);
    CHECK(p.stages.size() >= 4);
    CHECK(p.stages.size() <= 5);
    CHECK(stage_labels(p, 0) == std::vector<std::string>{"approach", "pick", "lift", "place"});
    for (const auto& s : p.stages) CHECK(s.arms.at(0).tolerance > 0);
    // The grasp waypoints target the needle's designated grasp point.
    CHECK(p.stages[1].arms[0].ref == Waypoint::Ref::GraspPoint);
    CHECK(p.stages[1].arms[0].point.norm() == 0.0);
}

TEST_CASE("act: waypoint reached, saturation and exhaustion") {
    env::TaskEnv env(env::default_config(TaskId::NeedleReach));
    auto obs = env.reset(1);
    auto p = plan_waypoints(env);
    REQUIRE(p.stages.size() == 1);

    // Goal 10 cm away along x: every moving component saturates.
    auto far = obs;
    far.observation.head<3>() = obs.desired_goal - Eigen::Vector3d(0.1, 0.0, 0.0);
    auto copy = p;
    const auto a_far = act(copy, far);
    CHECK(a_far[0] == 1.0);
    CHECK(copy.index == 0);

    // Tool at the waypoint: near-zero action and the index advances.
    auto at = obs;
    at.observation.head<3>() = obs.desired_goal + Eigen::Vector3d(1e-4, 0.0, 0.0);
    const auto a_at = act(p, at);
    CHECK(a_at.head<3>().norm() < 0.03);
    CHECK(p.index == 1);
    CHECK(p.exhausted());
    CHECK(act(p, at).norm() == 0.0);

    // A needle pushed off the tray cannot be reached.
    env::TaskEnv far_env(env::default_config(TaskId::NeedlePick));
    far_env.reset(1);
    far_env.world_mut().body(far_env.object_id()).pose.translation.x() = 0.2;
    CHECK_THROWS_AS(plan_waypoints(far_env), NoFeasiblePlan);
    env::TaskEnv fresh(env::default_config(TaskId::NeedleReach));
    CHECK_THROWS_AS(plan_waypoints(fresh), ContractViolation);
}

TEST_CASE("scripted NeedleReach succeeds on 100 of 100 seeds within the horizon") {
    env::TaskEnv env(env::default_config(TaskId::NeedleReach));
    int solved = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto ep = run_scripted(env, seed);
        CHECK(ep.length() == 50);
        solved += episode_solved(env, ep);
    }
    CHECK(solved == 100);
}

TEST_CASE("scripted policies solve every task") {
    for (TaskId t : env::all_tasks()) {
        CAPTURE(env::task_name(t));
        env::TaskEnv env(env::default_config(t));
        int solved = 0;
        for (std::uint64_t seed = 100; seed < 120; ++seed) solved += episode_solved(env, run_scripted(env, seed));
        CHECK(solved >= 19);
    }
}

TEST_CASE("staged BiPegTransfer resets shorten the plan") {
    for (const char* stage : {"approach", "pick", "lift"}) {
        CAPTURE(stage);
        auto cfg = env::default_config(TaskId::BiPegTransfer);
        cfg.init_stage = stage;
        env::TaskEnv env(cfg);
        env::TaskEnv full(env::default_config(TaskId::BiPegTransfer));
        env.reset(3);
        full.reset(3);
        CHECK(plan_waypoints(env).stages.size() < plan_waypoints(full).stages.size());
        int solved = 0;
        for (std::uint64_t seed = 0; seed < 10; ++seed) solved += episode_solved(env, run_scripted(env, seed));
        CHECK(solved == 10);
    }
}

TEST_CASE("NeedleRegrasp handover meets at a shared rendezvous") {
    env::TaskEnv env(env::default_config(TaskId::NeedleRegrasp));
    auto obs = env.reset(5);
    auto p = plan_waypoints(env);
    int release_stage = -1;
    for (size_t i = 0; i < p.stages.size(); ++i)
        if (p.stages[i].arms[1].label == "release") release_stage = static_cast<int>(i);
    REQUIRE(release_stage > 0);
    bool checked = false;
    for (int t = 0; t < 50 && !checked; ++t) {
        const int before = p.index;
        const auto a = act(p, obs);
        obs = env.step(a).obs;
        if (before < release_stage && p.index == release_stage) {
            // Both jaws are on their grasp points at the same time.
            CHECK((env.psm_state(0).tip - env.grasp_point(0)).norm() < 1e-3);
            CHECK((env.psm_state(1).tip - env.grasp_point(1)).norm() < 1e-3);
            CHECK(env.psm_state(0).grasp.phase == phys::GraspState::Phase::PinchHold);
            CHECK(env.psm_state(1).grasp.phase == phys::GraspState::Phase::PinchHold);
            checked = true;
        }
    }
    CHECK(checked);
}

TEST_CASE("visual_servo_ecm") {
    CHECK(visual_servo_ecm(env::Vec2::Zero(), 0.0, 0.1).norm() == 0.0);
    const auto tw = visual_servo_ecm(env::Vec2(0.1, 0.0), 0.0, 0.1);
    CHECK(tw[0] > 0.0);
    CHECK(std::abs(tw[0]) > 10 * (std::abs(tw[1]) + std::abs(tw[2])));
    CHECK(tw[3] == 0.0);
    // Feature centered: only roll.
    const auto roll = visual_servo_ecm(env::Vec2::Zero(), 0.2, 0.1);
    CHECK(roll.head<3>().norm() == 0.0);
    CHECK(roll[3] > 0.0);

    // One servo step through the arm moves the feature toward the center.
    env::TaskEnv env(env::default_config(TaskId::StaticTrack));
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto obs = env.reset(seed);
        auto p = plan_waypoints(env);
        const double before = (env.target_image().uv - env::Vec2(0.5, 0.5)).norm();
        env.step(act(p, obs));
        CHECK((env.target_image().uv - env::Vec2(0.5, 0.5)).norm() < before);
    }
}

TEST_CASE("closed-loop StaticTrack meets the image and roll tolerances") {
    env::TaskEnv env(env::default_config(TaskId::StaticTrack));
    int solved = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) solved += run_scripted(env, seed).final_success();
    CHECK(solved >= 95);
}

TEST_CASE("collect_demos stores successful episodes that replay exactly") {
    const std::string path = temp_path("needle_pick_demos.jsonl");
    env::TaskEnv env(env::default_config(TaskId::NeedlePick));
    const auto stats = collect_demos(env, 10, path, 0);
    CHECK(stats.stored == 10);
    const auto file = read_episodes(path, &env.config());
    REQUIRE(file.episodes.size() == 10);
    for (const auto& ep : file.episodes) {
        CHECK(ep.final_success());
        CHECK(ep.length() == 50);
        // Replaying the stored actions reproduces the stored rewards.
        env.reset(ep.seed);
        for (int t = 0; t < ep.length(); ++t) {
            const auto r = env.step(ep.actions[t]);
            CHECK(r.reward == ep.rewards[t]);
            CHECK(r.obs.observation == ep.obs[t + 1]);
        }
    }

    // Episodes recorded under another env config are rejected.
    auto other = env.config();
    other.grasp_mode = phys::GraspMode::approx(0.002);
    CHECK_THROWS_AS(read_episodes(path, &other), ContractViolation);

    // A flipped digit in a transition line breaks the digest.
    std::ifstream in(path);
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    in.close();
    const auto pos = lines[5].find("\"reward\":");
    REQUIRE(pos != std::string::npos);
    lines[5].replace(pos, 11, "\"reward\":-0");
    {
        std::ofstream out(path);
        for (const auto& l : lines) out << l << '\n';
    }
    CHECK_THROWS_AS(read_episodes(path), CorruptFile);
    {
        std::ofstream out(path);
        out << lines[0] << '\n' << "{not json\n";
    }
    CHECK_THROWS_AS(read_episodes(path), CorruptFile);
    std::filesystem::remove(path);

    CHECK_THROWS_AS(collect_demos(env, 3, path, 0, 2), InsufficientSuccess);
}
