#include "doctest.h"

#include <cmath>
#include <fstream>
#include <random>

#include "surgsim/env.hpp"
#include "surgsim/errors.hpp"

using namespace surgsim;
using namespace surgsim::env;

namespace {

constexpr double kPi = 3.14159265358979323846;

VectorXd vec(std::initializer_list<double> v) {
    VectorXd out(static_cast<Eigen::Index>(v.size()));
    int i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

VectorXd random_action(std::mt19937_64& rng, int dim) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    VectorXd a(dim);
    for (int i = 0; i < dim; ++i) a[i] = u(rng);
    return a;
}

// Camera looking along +x with the image up axis (-y) on world +z.
phys::Mat3 level_camera() {
    phys::Mat3 r;
    r.col(2) = Vec3::UnitX();
    r.col(1) = -Vec3::UnitZ();
    r.col(0) = r.col(1).cross(r.col(2));
    return r;
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(in.good());
    return nlohmann::json::parse(in);
}

} // namespace

TEST_CASE("task table and action dimensions") {
    const std::map<TaskId, int> dofs = {
        {TaskId::NeedleReach, 3}, {TaskId::GauzeRetrieve, 4}, {TaskId::NeedlePick, 5},  {TaskId::PegTransfer, 5},
        {TaskId::NeedleRegrasp, 10}, {TaskId::BiPegTransfer, 10}, {TaskId::EcmReach, 3}, {TaskId::MisOrient, 1},
        {TaskId::StaticTrack, 4}, {TaskId::ActiveTrack, 4}};
    CHECK(all_tasks().size() == 10);
    for (TaskId t : all_tasks()) {
        CHECK(parse_task(task_name(t)) == t);
        const auto env = make_env(t);
        CHECK(env->action_spec().dim() == dofs.at(t));
        CHECK(env->action_spec().scale.size() == env->action_spec().components.size());
    }
    CHECK(parse_task("NeedlePick") == TaskId::NeedlePick);
    CHECK_THROWS_AS(parse_task("suturing"), ContractViolation);
    CHECK(make_env(TaskId::NeedleRegrasp)->action_spec().components[3] == "psm1.dpitch");
    CHECK(make_env(TaskId::BiPegTransfer)->action_spec().components[8] == "psm2.dyaw");
    CHECK(make_env(TaskId::ActiveTrack)->horizon() == 500);
    CHECK(make_env(TaskId::NeedlePick)->horizon() == 50);
}

TEST_CASE("compute_reward examples") {
    const TaskConfig c = default_config(TaskId::NeedleReach);
    const VectorXd g = vec({0.01, -0.02, 0.03});
    CHECK(compute_reward(TaskId::NeedleReach, g, g, c) == 0.0);
    CHECK(compute_reward(TaskId::NeedleReach, g + vec({2 * c.epsilon, 0, 0}), g, c) == -1.0);
    CHECK(compute_reward(TaskId::NeedleReach, g + vec({0.9 * c.epsilon, 0, 0}), g, c) == 0.0);
    CHECK_THROWS_AS(compute_reward(TaskId::NeedleReach, vec({0, 0}), g, c), ContractViolation);
    CHECK_THROWS_AS(compute_reward(TaskId::MisOrient, g, g, c), ContractViolation);

    // Image error 0.005 and misorientation 0.005 are both inside tolerance.
    const TaskConfig s = default_config(TaskId::StaticTrack);
    CHECK(compute_reward(TaskId::StaticTrack, vec({0.505, 0.5, 0.005}), vec({0.5, 0.5, 0.0}), s) == 0.0);
    CHECK(compute_reward(TaskId::StaticTrack, vec({0.52, 0.5, 0.0}), vec({0.5, 0.5, 0.0}), s) == -1.0);
    CHECK(compute_reward(TaskId::StaticTrack, vec({0.5, 0.5, 0.02}), vec({0.5, 0.5, 0.0}), s) == -1.0);

    // Pick tasks need the grasp flag as well as the position.
    const TaskConfig p = default_config(TaskId::NeedlePick);
    CHECK(compute_reward(TaskId::NeedlePick, vec({0, 0, 0.04, 1}), vec({0, 0, 0.04, 1}), p) == 0.0);
    CHECK(compute_reward(TaskId::NeedlePick, vec({0, 0, 0.04, 0}), vec({0, 0, 0.04, 1}), p) == -1.0);

    // Seated block: within epsilon laterally and seat tolerance vertically.
    const TaskConfig q = default_config(TaskId::PegTransfer);
    CHECK(compute_reward(TaskId::PegTransfer, vec({0.003, 0, 0.004}), vec({0, 0, 0.004}), q) == 0.0);
    CHECK(compute_reward(TaskId::PegTransfer, vec({0, 0, 0.007}), vec({0, 0, 0.004}), q) == -1.0);
    CHECK_THROWS_AS(compute_reward(TaskId::ActiveTrack, vec({0.5, 0.5, 0}), vec({0.5, 0.5, 0}), q), ContractViolation);
}

TEST_CASE("active_track_reward examples and bound") {
    CHECK(active_track_reward(Vec2(0.5, 0.5), 0.0) == doctest::Approx(1.0));
    CHECK(active_track_reward(Vec2(0.8, 0.9), 1.0) == doctest::Approx(0.4));
    CHECK(active_track_reward(Vec2(0.5, 1.5), 0.0) == doctest::Approx(0.0));
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-2, 2);
    for (int i = 0; i < 1000; ++i) CHECK(active_track_reward(Vec2(u(rng), u(rng)), u(rng)) <= 1.0);
    CHECK(active_track_reward(Vec2(0.5, 0.5), 1e-6) < 1.0);
}

TEST_CASE("project_to_image") {
    const CameraModel cam;
    const Pose at_origin;
    auto p = project_to_image(cam, at_origin, Vec3(0, 0, 0.1));
    CHECK(p.in_view);
    CHECK((p.uv - Vec2(0.5, 0.5)).norm() < 1e-15);
    CHECK_FALSE(project_to_image(cam, at_origin, Vec3(0, 0, -0.1)).in_view);
    p = project_to_image(cam, at_origin, Vec3(0.01, 0, 0.1));
    CHECK(p.uv.x() == doctest::Approx(0.5 + 0.8 * 0.01 / 0.1).epsilon(1e-12));
    CHECK(p.uv.y() == doctest::Approx(0.5));
    CHECK_FALSE(project_to_image(cam, at_origin, Vec3(0.1, 0, 0.1)).in_view);
    // Same point seen from a translated and rotated camera.
    const Pose moved(level_camera(), Vec3(-0.2, 0.0, 0.05));
    p = project_to_image(cam, moved, Vec3(0.0, 0.0, 0.05));
    CHECK((p.uv - Vec2(0.5, 0.5)).norm() < 1e-12);
    CHECK(p.depth == doctest::Approx(0.2));
}

TEST_CASE("misorientation") {
    const CameraModel cam;
    const phys::Mat3 level = level_camera();
    CHECK(std::abs(misorientation(cam, Pose(level, Vec3::Zero()))) < 1e-12);
    for (double roll : {0.3, -0.3, 1.0}) {
        const Pose rolled(level * kin::rot_z<double>(roll), Vec3::Zero());
        CHECK(misorientation(cam, rolled) == doctest::Approx(-roll).epsilon(1e-12));
    }
    CHECK(std::abs(std::abs(misorientation(cam, Pose(level * kin::rot_z<double>(0.3), Vec3::Zero()))) - 0.3) < 1e-9);
    // Looking straight up or down: the reference projects to a point.
    CHECK_THROWS_AS(misorientation(cam, Pose()), UndefinedOrientation);
    CHECK_THROWS_AS(misorientation(cam, Pose(kin::rot_x<double>(kPi), Vec3::Zero())), UndefinedOrientation);
}

TEST_CASE("ECM joint 4 changes misorientation by minus the same angle") {
    TaskEnv env(default_config(TaskId::MisOrient));
    env.reset(4);
    auto& w = env.world_mut();
    const int ecm = 0;
    kin::JointVector<double> q = w.instruments[ecm].arm.current_q;
    const double before = env.theta_star();
    for (double d : {0.05, 0.2, -0.3}) {
        kin::JointVector<double> q2 = q;
        q2[3] += d;
        phys::reset_instrument(w, ecm, q2, 0.0);
        double diff = env.theta_star() - before + d;
        diff -= 2 * kPi * std::round(diff / (2 * kPi));
        CHECK(std::abs(diff) < 1e-9);
    }
    // Roll action +u moves theta* monotonically by -rotation_scale * u.
    env.reset(4);
    double prev = env.theta_star();
    for (int i = 0; i < 5; ++i) {
        env.step(vec({0.5}));
        const double now = env.theta_star();
        CHECK(now < prev);
        // Joint tracking settles within one control step up to a small lag.
        CHECK(now - prev == doctest::Approx(-0.05).epsilon(1e-3));
        prev = now;
    }
}

TEST_CASE("target paths") {
    // Two waypoints: a straight segment at constant speed.
    const TargetPath line({Vec3(0, 0, 0), Vec3(0.04, 0.02, 0)}, 0.03);
    CHECK(line.length() == doctest::Approx(std::hypot(0.04, 0.02)).epsilon(1e-9));
    for (int k = 0; k <= 20; ++k) {
        const double t = 0.05 * k;
        const Vec3 p = line.at(t);
        const Vec3 expect = Vec3(0.04, 0.02, 0).normalized() * std::min(0.03 * t, line.length());
        CHECK((p - expect).norm() < 1e-9);
    }
    CHECK_THROWS_AS(TargetPath({Vec3::Zero()}, 0.03), ContractViolation);
    CHECK_THROWS_AS(TargetPath({Vec3::Zero(), Vec3::Ones()}, 0.0), ContractViolation);

    const assets::Region ws{Vec3(-0.04, -0.04, 0), Vec3(0.04, 0.04, 0)};
    const auto path = generate_target_path(ws, 5, 0.03, 11);
    // Interpolates its waypoints.
    for (size_t i = 0; i < path.waypoints().size(); ++i)
        CHECK((path.spline(static_cast<double>(i)) - path.waypoints()[i]).norm() < 1e-12);
    // Constant speed: distance travelled between consecutive control steps,
    // measured along the curve with fine chords.
    const double dt = 0.01;
    const double expected = path.speed() * dt;
    const int steps = static_cast<int>(path.length() / expected) - 1;
    for (int k = 0; k < steps; ++k) {
        double d = 0.0;
        for (int i = 0; i < 20; ++i)
            d += (path.at((k + (i + 1) / 20.0) * dt) - path.at((k + i / 20.0) * dt)).norm();
        CHECK(std::abs(d - expected) < 0.01 * expected);
    }
    // Reverses at the end and returns to the start.
    CHECK((path.at(2 * path.length() / path.speed()) - path.waypoints().front()).norm() < 1e-9);
    const auto again = generate_target_path(ws, 5, 0.03, 11);
    CHECK(again.waypoints() == path.waypoints());
    CHECK(generate_target_path(ws, 5, 0.03, 12).waypoints() != path.waypoints());
}

TEST_CASE("reset is deterministic per seed") {
    for (TaskId t : all_tasks()) {
        CAPTURE(task_name(t));
        TaskEnv a(default_config(t)), b(default_config(t));
        const auto oa = a.reset(21);
        const auto ob = b.reset(21);
        CHECK(oa.observation == ob.observation);
        CHECK(oa.desired_goal == ob.desired_goal);
        CHECK(oa.observation.size() == a.observation_dim());
        CHECK(oa.desired_goal.size() == a.goal_dim());
        CHECK(oa.achieved_goal.size() == a.goal_dim());
        CHECK(oa.observation.allFinite());
        CHECK(a.reset(22).observation != oa.observation);
        // Observations depend on world state only.
        CHECK(a.reset(21).observation == oa.observation);
        CHECK(a.observe().observation == oa.observation);
    }
}

TEST_CASE("NeedleReach goal sits above the needle") {
    TaskEnv env(default_config(TaskId::NeedleReach));
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto o = env.reset(seed);
        const Vec3 needle = env.world().body(env.object_id()).pose.translation;
        CHECK((o.desired_goal - (needle + Vec3(0, 0, env.config().h_above))).norm() < 1e-15);
    }
}

TEST_CASE("zero action holds the tool and the episode ends at the horizon") {
    for (TaskId t : all_tasks()) {
        CAPTURE(task_name(t));
        TaskEnv env(default_config(t));
        env.reset(5);
        auto tool = [&] {
            std::vector<Pose> poses;
            for (const auto& ins : env.world().instruments) poses.push_back(ins.arm.world_tool_pose());
            return poses;
        };
        const auto before = tool();
        const VectorXd zero = VectorXd::Zero(env.action_spec().dim());
        StepResult r;
        for (int i = 0; i < 10; ++i) r = env.step(zero);
        const auto after = tool();
        for (size_t i = 0; i < before.size(); ++i) {
            CHECK((after[i].translation - before[i].translation).norm() < 1e-5);
            CHECK((after[i].rotation - before[i].rotation).norm() < 1e-5);
        }
        if (!is_goal_based(t)) continue;
        int steps = 10;
        while (!r.done) {
            r = env.step(zero);
            ++steps;
            CHECK((r.done == (steps == 50)));
        }
        CHECK(steps == 50);
        CHECK(r.info.timeout);
        CHECK_THROWS_AS(env.step(zero), ContractViolation);
    }
}

TEST_CASE("NeedleReach tool within epsilon of the goal succeeds") {
    TaskEnv env(default_config(TaskId::NeedleReach));
    env.reset(9);
    bool reached = false;
    for (int i = 0; i < 50; ++i) {
        const Vec3 err = env.goal() - env.psm_state(0).tip;
        const VectorXd a = (err / env.config().translation_scale).cwiseMax(-1.0).cwiseMin(1.0);
        const auto r = env.step(a);
        CHECK((r.reward == 0.0) == r.info.is_success);
        CHECK(r.info.is_success == ((env.psm_state(0).tip - env.goal()).norm() < env.config().epsilon));
        reached = reached || r.info.is_success;
    }
    CHECK(reached);
}

TEST_CASE("step contract violations") {
    TaskEnv env(default_config(TaskId::NeedlePick));
    CHECK_THROWS_AS(env.step(VectorXd::Zero(5)), ContractViolation);
    env.reset(1);
    CHECK_THROWS_AS(env.step(VectorXd::Zero(4)), ContractViolation);
    CHECK_THROWS_AS(env.step(vec({0, 0, std::nan(""), 0, 0})), ContractViolation);
    // Out-of-range values are clipped, not rejected.
    TaskEnv a(default_config(TaskId::NeedleReach)), b(default_config(TaskId::NeedleReach));
    a.reset(2);
    b.reset(2);
    CHECK(a.step(vec({5, -7, 1})).obs.observation == b.step(vec({1, -1, 1})).obs.observation);
}

TEST_CASE("identical seeds and actions give identical rollouts") {
    for (TaskId t : {TaskId::NeedlePick, TaskId::BiPegTransfer, TaskId::ActiveTrack}) {
        TaskEnv a(default_config(t)), b(default_config(t));
        a.reset(17);
        b.reset(17);
        std::mt19937_64 rng(1);
        for (int i = 0; i < 30; ++i) {
            const VectorXd act = random_action(rng, a.action_spec().dim());
            const auto ra = a.step(act);
            const auto rb = b.step(act);
            CHECK(ra.obs.observation == rb.obs.observation);
            CHECK(ra.reward == rb.reward);
        }
    }
}

TEST_CASE("reward and success agree on random rollouts") {
    std::mt19937_64 rng(77);
    for (TaskId t : all_tasks()) {
        if (!is_goal_based(t)) continue;
        CAPTURE(task_name(t));
        TaskEnv env(default_config(t));
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            env.reset(seed);
            for (int i = 0; i < 50; ++i) {
                const auto r = env.step(random_action(rng, env.action_spec().dim()));
                CHECK(((r.reward == 0.0) == r.info.is_success));
                CHECK(r.obs.observation.allFinite());
                CHECK(env.compute_reward(r.obs.achieved_goal, r.obs.desired_goal) == r.reward);
            }
        }
    }
}

TEST_CASE("BiPegTransfer staged initialization") {
    auto cfg = default_config(TaskId::BiPegTransfer);
    cfg.init_stage = "pick";
    TaskEnv pick(cfg);
    pick.reset(3);
    CHECK(pick.psm_state(1).grasp.phase == phys::GraspState::Phase::PinchHold);
    CHECK(pick.psm_state(1).grasp.body == pick.object_id());
    CHECK(pick.psm_state(0).grasp.phase == phys::GraspState::Phase::Free);
    // The pinch holds the block while it is lifted.
    for (int i = 0; i < 6; ++i) pick.step(vec({0, 0, 0, 0, 1, 0, 0, 1, 0, -1}));
    CHECK(pick.psm_state(1).grasp.phase == phys::GraspState::Phase::PinchHold);
    CHECK(pick.world().body(pick.object_id()).pose.translation.z() > 0.004 + 0.02);

    cfg.init_stage = "approach";
    TaskEnv approach(cfg);
    approach.reset(3);
    CHECK(approach.psm_state(1).grasp.phase == phys::GraspState::Phase::Free);
    CHECK((approach.psm_state(1).tip - approach.grasp_point(1) - Vec3(0, 0, 0.01)).norm() < 1e-5);

    cfg.init_stage = "lift";
    TaskEnv lift(cfg);
    lift.reset(3);
    CHECK(lift.psm_state(1).grasp.phase == phys::GraspState::Phase::PinchHold);
    lift.step(VectorXd::Zero(10).eval() + vec({0, 0, 0, 0, 1, 0, 0, 0, 0, -1}));
    CHECK(lift.psm_state(1).grasp.phase == phys::GraspState::Phase::PinchHold);

    cfg.init_stage = "place";
    CHECK_THROWS_AS(TaskEnv{cfg}, ContractViolation);
    auto other = default_config(TaskId::PegTransfer);
    other.init_stage = "pick";
    CHECK_THROWS_AS(TaskEnv{other}, ContractViolation);
}

TEST_CASE("NeedleRegrasp starts with the needle held by PSM2") {
    TaskEnv env(default_config(TaskId::NeedleRegrasp));
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto o = env.reset(seed);
        CHECK(env.psm_state(1).grasp.phase == phys::GraspState::Phase::PinchHold);
        CHECK(o.achieved_goal[3] == 0.0);
        const Vec3 start = env.world().body(env.object_id()).pose.translation;
        for (int i = 0; i < 10; ++i) env.step(vec({0, 0, 0, 0, 1, 0, 0, 0, 0, -1}));
        CHECK((env.world().body(env.object_id()).pose.translation - start).norm() < 1e-5);
    }
}

TEST_CASE("success predicates") {
    SUBCASE("MisOrient within delta") {
        TaskEnv env(default_config(TaskId::MisOrient));
        env.reset(2);
        auto& w = env.world_mut();
        kin::JointVector<double> q = w.instruments[0].arm.current_q;
        q[3] += env.theta_star() - 0.005;
        phys::reset_instrument(w, 0, q, 0.0);
        CHECK(env.theta_star() == doctest::Approx(0.005).epsilon(1e-9));
        CHECK(env.success_check());
        q[3] -= 0.01;
        phys::reset_instrument(w, 0, q, 0.0);
        CHECK_FALSE(env.success_check());
    }
    SUBCASE("PegTransfer block floating above the goal peg") {
        TaskEnv env(default_config(TaskId::PegTransfer));
        env.reset(6);
        auto& block = env.world_mut().body(env.object_id());
        block.pose.translation = env.goal() + Vec3(0, 0, 0.003);
        CHECK_FALSE(env.success_check());
        block.pose.translation = env.goal();
        CHECK(env.success_check());
        // Seated on the goal peg and left alone, it stays there.
        for (int i = 0; i < 10; ++i) env.step(VectorXd::Zero(5));
        CHECK(env.success_check());
    }
    SUBCASE("GauzeRetrieve slid along the tray without a grasp") {
        TaskEnv env(default_config(TaskId::GauzeRetrieve));
        env.reset(8);
        // Push the pad sideways with the closed jaw resting on the tray.
        const Vec3 pad = env.world().body(env.object_id()).pose.translation;
        const Vec3 start = pad + Vec3(-0.008, 0, 0.001);
        for (int i = 0; i < 50; ++i) {
            const PsmState s = env.psm_state(0);
            const Vec3 target = i < 25 ? start : start + Vec3(0.001 * (i - 25), 0, 0);
            const Vec3 err = (target - s.tip) / env.config().translation_scale;
            env.step(vec({std::clamp(err.x(), -1.0, 1.0), std::clamp(err.y(), -1.0, 1.0), std::clamp(err.z(), -1.0, 1.0), -1}));
        }
        const Vec3 moved = env.world().body(env.object_id()).pose.translation;
        CHECK(moved.x() - pad.x() > 0.002);
        CHECK_FALSE(env.grasp_ever_stabilized());
        // Teleported onto the goal without ever being lifted: still not a success.
        env.world_mut().body(env.object_id()).pose.translation = env.goal().head<3>();
        CHECK_FALSE(env.success_check());
        CHECK(env.observe().achieved_goal[3] == 0.0);
    }
}

TEST_CASE("camera jacobian matches finite differences") {
    TaskEnv env(default_config(TaskId::StaticTrack));
    env.reset(12);
    auto& w = env.world_mut();
    const kin::JointVector<double> q = w.instruments[0].arm.current_q;
    const Eigen::Matrix4d j = env.camera_jacobian();
    const Pose base = env.camera_pose();
    const double h = 1e-6;
    for (int k = 0; k < 4; ++k) {
        kin::JointVector<double> qp = q, qm = q;
        qp[k] += h;
        qm[k] -= h;
        phys::reset_instrument(w, 0, qp, 0.0);
        const Pose pp = env.camera_pose();
        phys::reset_instrument(w, 0, qm, 0.0);
        const Pose pm = env.camera_pose();
        const Vec3 v = base.rotation.transpose() * (pp.translation - pm.translation) / (2 * h);
        const Vec3 wv = kin::log_so3<double>(pm.rotation.transpose() * pp.rotation) / (2 * h);
        CHECK((v - j.col(k).head<3>()).norm() < 1e-5);
        CHECK(std::abs(wv.z() - j(3, k)) < 1e-5);
    }
}

TEST_CASE("ActiveTrack reward and loss of target") {
    TaskEnv env(default_config(TaskId::ActiveTrack));
    env.reset(4);
    CHECK_THROWS_AS(env.compute_reward(env.observe().achieved_goal, env.goal()), ContractViolation);
    // Pan hard in one direction until the target leaves the image.
    int steps = 0;
    StepResult r;
    int lost_run = 0;
    do {
        r = env.step(vec({1, 0, -1, 0}));
        ++steps;
        CHECK(r.reward <= 1.0);
        lost_run = r.info.target_lost ? lost_run + 1 : 0;
        if (r.info.target_lost) CHECK(r.reward == -1.0);
        else CHECK(r.reward == doctest::Approx(active_track_reward(env.target_image().uv, env.theta_star())));
    } while (!r.done);
    CHECK(steps < 500);
    CHECK(lost_run == env.config().lost_limit + 1);
    CHECK_FALSE(r.info.timeout);
}

TEST_CASE("task config JSON") {
    auto c = default_config(TaskId::PegTransfer);
    const auto back = TaskConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());
    CHECK(c.hash().size() == 16);
    c.grasp_mode = phys::GraspMode::approx(0.002);
    CHECK(c.hash() != back.hash());
    CHECK(TaskConfig::from_json(c.to_json()).grasp_mode.label() == c.grasp_mode.label());
    auto doc = c.to_json();
    doc["epsilon"] = -1;
    CHECK_THROWS_AS(TaskConfig::from_json(doc), ContractViolation);
    doc = c.to_json();
    doc["task"] = "knot_tying";
    CHECK_THROWS_AS(TaskConfig::from_json(doc), ContractViolation);
    CHECK_THROWS_AS(TaskConfig::from_json(nlohmann::json::array()), ContractViolation);
    // Partial documents fall back to the task defaults.
    CHECK(TaskConfig::from_json({{"task", "active_track"}}).horizon == 500);
}

TEST_CASE("shipped config files match the built-in defaults") {
    const std::string root = SURGSIM_SOURCE_DIR;
    for (TaskId t : all_tasks()) {
        CAPTURE(task_name(t));
        const auto task_doc = read_json(root + "/config/tasks/" + task_name(t) + ".json");
        CHECK(TaskConfig::from_json(task_doc).to_json() == default_config(t).to_json());
        const auto scene_doc = read_json(root + "/config/scenes/" + task_name(t) + ".json");
        CHECK(assets::scene_to_json(assets::scene_from_json(scene_doc)) == assets::scene_to_json(task_scene(t)));
    }
}

TEST_CASE("episode log lines") {
    TaskEnv env(default_config(TaskId::NeedleReach));
    const auto o = env.reset(3);
    EpisodeLog log(env, 3);
    const VectorXd a = vec({1, 0, 0});
    log.record(o, a, env.step(a));
    REQUIRE(log.lines().size() == 2);
    CHECK(log.lines()[0]["task"] == "needle_reach");
    CHECK(log.lines()[0]["env_config_hash"] == env.config().hash());
    CHECK(log.lines()[0]["seed"] == 3);
    CHECK(log.lines()[0]["grasp_mode"] == "interact");
    CHECK(log.lines()[1]["action"].size() == 3);
    CHECK(log.lines()[1]["obs"].size() == 12);
}
