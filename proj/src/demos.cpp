#include "surgsim/demos.hpp"

#include <algorithm>
#include <cmath>

#include "surgsim/errors.hpp"

namespace surgsim::demos {

using env::TaskId;
using Ref = Waypoint::Ref;

namespace {

constexpr double kApproachHeight = 0.012;  // above the grasp point before descending
constexpr double kBlockGripDepth = 0.002;  // jaw tip below the wall top
constexpr double kBlockLift = 0.012;       // block bottom clears the peg tops by 4 mm
constexpr double kHandoverHover = 0.006;   // hover above the grasp point before a handover pick
constexpr double kSeatDrop = 0.0003;       // release height above the seated pose
constexpr int kCloseDwell = 2;
constexpr double kAngleTolerance = 0.02;

// Per-arm view of an observation vector.
struct ArmObs {
    Vec3 tip;
    double angle = 0.0;
    Vec3 object;
    Vec3 grasp_point;
};

ArmObs parse_arm(TaskId task, const VectorXd& o, int arm) {
    ArmObs a;
    switch (task) {
    case TaskId::NeedleReach:
    case TaskId::GauzeRetrieve:
        a.tip = o.segment<3>(0);
        a.angle = o[3];
        a.object = o.segment<3>(5);
        a.grasp_point = a.tip + o.segment<3>(9);
        break;
    case TaskId::NeedlePick:
    case TaskId::PegTransfer:
        a.tip = o.segment<3>(0);
        a.angle = o[3];
        a.object = o.segment<3>(5);
        a.grasp_point = a.tip + o.segment<3>(9);
        break;
    case TaskId::NeedleRegrasp:
    case TaskId::BiPegTransfer:
        a.tip = o.segment<3>(5 * arm);
        a.angle = o[5 * arm + 3];
        a.object = o.segment<3>(10);
        a.grasp_point = a.tip + o.segment<3>(14 + 3 * arm);
        break;
    default: throw ContractViolation("not a PSM task");
    }
    return a;
}

Waypoint wp(Ref ref, const Vec3& p, double angle, bool open, const std::string& label, double tol = 5e-4,
            int dwell = 0) {
    Waypoint w;
    w.ref = ref;
    w.point = p;
    w.angle = angle;
    w.jaw_open = open;
    w.label = label;
    w.tolerance = tol;
    w.dwell = dwell;
    return w;
}

Waypoint hold(bool open, int dwell = 0, const std::string& label = "hold") {
    return wp(Ref::Hold, Vec3::Zero(), 0.0, open, label, 1.0, dwell);
}

void check_reachable(const env::TaskEnv& env, const Vec3& p, const char* what) {
    if (!env.workspace().contains(p, 1e-9))
        throw NoFeasiblePlan(std::string(what) + " lies outside the workspace");
}

// Single-arm pick-and-place of the object to the goal and hold there.
std::vector<Stage> pick_and_hold(const env::TaskEnv& env, double grip_z, double angle) {
    const Vec3 goal = env.goal().head<3>();
    const Vec3 gp = env.grasp_point(0);
    check_reachable(env, gp + Vec3(0, 0, kApproachHeight), "approach point");
    check_reachable(env, goal + (gp - env.world().body(env.object_id()).pose.translation), "goal carry pose");
    const Vec3 grip(0, 0, grip_z);
    return {
        {{wp(Ref::Fixed, gp + Vec3(0, 0, kApproachHeight), angle, true, "approach", 1e-3)}},
        {{wp(Ref::GraspPoint, grip, angle, true, "pick", 3e-4)}},
        {{wp(Ref::GraspPoint, grip, angle, false, "pick", 1.0, kCloseDwell)}},
        {{wp(Ref::Fixed, gp + Vec3(0, 0, 0.02), angle, false, "lift", 1e-3)}},
        {{wp(Ref::ObjectTo, goal, angle, false, "place", 5e-4)}},
    };
}

std::vector<Stage> peg_transfer_plan(const env::TaskEnv& env) {
    const double yaw = env.grasp_angle(0);
    const Vec3 goal = env.goal().head<3>();
    const Vec3 src = env.world().body(env.object_id()).pose.translation;
    const Vec3 gp = env.grasp_point(0);
    check_reachable(env, goal + (gp - src) + Vec3(0, 0, kBlockLift), "goal carry pose");
    const Vec3 grip(0, 0, -kBlockGripDepth);
    const Vec3 up(0, 0, kBlockLift);
    return {
        {{wp(Ref::Fixed, gp + Vec3(0, 0, kApproachHeight), yaw, true, "approach", 1e-3)}},
        {{wp(Ref::GraspPoint, grip, yaw, true, "pick", 3e-4)}},
        {{wp(Ref::GraspPoint, grip, yaw, false, "pick", 1.0, kCloseDwell)}},
        {{wp(Ref::ObjectTo, src + up, yaw, false, "lift", 1e-3)}},
        {{wp(Ref::ObjectTo, goal + up, yaw, false, "place", 5e-4)}},
        {{wp(Ref::ObjectTo, goal + Vec3(0, 0, kSeatDrop), yaw, false, "place", 2e-4)}},
        {{wp(Ref::GraspPoint, grip, yaw, true, "release", 1.0, 5)}},
        {{wp(Ref::GraspPoint, Vec3(0, 0, kApproachHeight), yaw, true, "retreat", 1e-3)}},
    };
}

std::vector<Stage> regrasp_plan(const env::TaskEnv& env) {
    // Arm 0 is PSM1 (receiver), arm 1 is PSM2 (holding the needle at reset).
    const Vec3 goal = env.goal().head<3>();
    const Vec3 rendezvous(0.0, 0.0, 0.045);
    const Vec3 above(0, 0, kApproachHeight);
    return {
        {{hold(true), wp(Ref::ObjectTo, rendezvous, 0.0, false, "handover", 1e-3)}},
        {{wp(Ref::GraspPoint, above, 0.0, true, "approach", 1e-3), hold(false)}},
        {{wp(Ref::GraspPoint, Vec3::Zero(), 0.0, true, "pick", 3e-4), hold(false)}},
        {{wp(Ref::GraspPoint, Vec3::Zero(), 0.0, false, "pick", 1.0, kCloseDwell), hold(false)}},
        {{hold(false), hold(true, kCloseDwell, "release")}},
        {{hold(false), wp(Ref::GraspPoint, above, 0.0, true, "retreat", 1e-3)}},
        {{wp(Ref::ObjectTo, goal, 0.0, false, "place", 5e-4), hold(true)}},
    };
}

Waypoint background(Waypoint w) {
    w.blocking = false;
    return w;
}

std::vector<Stage> bi_peg_plan(const env::TaskEnv& env) {
    // Arm 0 is PSM1 (+x side, places), arm 1 is PSM2 (-x side, picks).
    const double yaw = env.grasp_angle(0);
    const Vec3 goal = env.goal().head<3>();
    const Vec3 src = env.world().body(env.object_id()).pose.translation;
    const Vec3 grip(0, 0, -kBlockGripDepth);
    const Vec3 hover(0, 0, kHandoverHover);
    const Vec3 up(0, 0, kBlockLift);
    const Vec3 rendezvous(0.0, 0.5 * (src.y() + goal.y()), src.z() + kBlockLift);
    // PSM1 waits above where its grasp point will be at the handover.
    const Vec3 gp1_local = assets::block_grasp_point(env.block_geometry());
    const Vec3 wait1 = rendezvous + kin::rot_z<double>(yaw) * gp1_local + hover;
    check_reachable(env, wait1, "handover hover point");
    check_reachable(env, goal + (env.grasp_point(0) - src) + up, "goal carry pose");
    const Waypoint waiting = background(wp(Ref::Fixed, wait1, yaw, true, "approach", 1e-3));
    std::vector<Stage> stages = {
        {{waiting, wp(Ref::GraspPoint, hover, yaw, true, "approach", 1e-3)}},
        {{waiting, wp(Ref::GraspPoint, grip, yaw, true, "pick", 3e-4)}},
        {{waiting, wp(Ref::GraspPoint, grip, yaw, false, "pick", 1.0, kCloseDwell)}},
        {{waiting, wp(Ref::ObjectTo, src + up, yaw, false, "lift", 1e-3)}},
        {{waiting, wp(Ref::ObjectTo, rendezvous, yaw, false, "handover", 5e-4)}},
        {{wp(Ref::GraspPoint, grip, yaw, true, "pick", 3e-4), hold(false)}},
        {{wp(Ref::GraspPoint, grip, yaw, false, "pick", 1.0, kCloseDwell), hold(false)}},
        {{hold(false), hold(true, 1, "release")}},
        {{wp(Ref::ObjectTo, goal + up, yaw, false, "place", 5e-4),
          background(wp(Ref::GraspPoint, hover, yaw, true, "retreat", 1e-3))}},
        {{wp(Ref::ObjectTo, goal + Vec3(0, 0, kSeatDrop), yaw, false, "place", 2e-4), hold(true)}},
        {{wp(Ref::GraspPoint, grip, yaw, true, "release", 1.0, kCloseDwell), hold(true)}},
        {{wp(Ref::GraspPoint, hover, yaw, true, "retreat", 1e-3), hold(true)}},
    };
    // Staged resets have already completed the first steps.
    const std::string& stage = env.config().init_stage;
    const int skip = stage == "approach" ? 1 : stage == "pick" ? 3 : stage == "lift" ? 4 : 0;
    stages.erase(stages.begin(), stages.begin() + skip);
    return stages;
}

double clip1(double x) { return std::clamp(x, -1.0, 1.0); }

VectorXd ecm_action(const ScriptedPolicy& p, const env::Observation& obs) {
    const VectorXd& o = obs.observation;
    const auto& c = p.config;
    switch (p.task) {
    case TaskId::EcmReach: {
        const Vec3 err = obs.desired_goal - o.head<3>();
        return (p.gain * err / c.translation_scale).cwiseMax(-1.0).cwiseMin(1.0);
    }
    case TaskId::MisOrient: {
        // Rolling by +u * rotation_scale changes theta* by the negative amount.
        VectorXd a(1);
        a[0] = clip1(p.gain * o[4] / c.rotation_scale);
        return a;
    }
    default: {
        const kin::JointVector<double> q = o.head<4>();
        const env::Vec2 uv = o.segment<2>(4);
        const double theta = o[6];
        const double depth = std::max(o[9], 1e-3);
        // Lateral camera motion pivots about the RCM behind it, which swings
        // the line of sight by an extra depth / pivot_distance.
        const double pivot = kin::tool_pose(kin::ecm_chain(), q).translation.norm();
        const double effective = depth * pivot / (pivot + depth);
        const Eigen::Vector4d twist = visual_servo_ecm(uv - env::Vec2(0.5, 0.5), theta, effective);
        VectorXd a(4);
        a << twist.head<3>() / c.translation_scale, twist[3] / c.rotation_scale;
        return a.cwiseMax(-1.0).cwiseMin(1.0);
    }
    }
}

} // namespace

ScriptedPolicy plan_waypoints(const env::TaskEnv& env) {
    if (!env.has_reset()) throw ContractViolation("plan_waypoints needs a reset environment");
    ScriptedPolicy p;
    p.task = env.task();
    p.config = env.config();
    p.action_dim = env.action_spec().dim();
    switch (env.task()) {
    case TaskId::NeedleReach: {
        const Vec3 goal = env.goal();
        check_reachable(env, goal, "goal");
        p.stages = {{{wp(Ref::Fixed, goal, 0.0, false, "reach", 1e-3)}}};
        break;
    }
    case TaskId::GauzeRetrieve: p.stages = pick_and_hold(env, 0.0, 0.0); break;
    case TaskId::NeedlePick: p.stages = pick_and_hold(env, 0.0, env.grasp_angle(0)); break;
    case TaskId::PegTransfer: p.stages = peg_transfer_plan(env); break;
    case TaskId::NeedleRegrasp: p.stages = regrasp_plan(env); break;
    case TaskId::BiPegTransfer: p.stages = bi_peg_plan(env); break;
    default: break;
    }
    return p;
}

VectorXd act(ScriptedPolicy& p, const env::Observation& obs) {
    if (env::is_ecm_task(p.task)) return ecm_action(p, obs);
    const int arms = env::is_bimanual(p.task) ? 2 : 1;
    const int dim = p.action_dim;
    VectorXd a = VectorXd::Zero(dim);
    if (p.exhausted()) return a;

    const int block = dim / arms;
    const bool has_angle = block == 5;
    const bool has_jaw = block >= 4;
    const Stage& stage = p.stages[p.index];
    bool reached = true;
    int dwell = 0;
    for (int arm = 0; arm < arms; ++arm) {
        const Waypoint& w = stage.arms.at(arm);
        const ArmObs s = parse_arm(p.task, obs.observation, arm);
        const int o = arm * block;
        if (has_jaw) a[o + block - 1] = w.jaw_open ? 1.0 : -1.0;
        dwell = std::max(dwell, w.dwell);
        if (w.ref == Ref::Hold) continue;
        Vec3 target = w.point;
        if (w.ref == Ref::GraspPoint) target = s.grasp_point + w.point;
        else if (w.ref == Ref::ObjectTo) target = s.tip + (w.point - s.object);
        const Vec3 err = target - s.tip;
        for (int k = 0; k < 3; ++k) a[o + k] = clip1(p.gain * err[k] / p.config.translation_scale);
        double angle_err = 0.0;
        if (has_angle) {
            angle_err = w.angle - s.angle;
            a[o + 3] = clip1(angle_err / p.config.rotation_scale);
        }
        if (w.blocking) reached = reached && err.norm() < w.tolerance && std::abs(angle_err) < kAngleTolerance;
    }
    if (reached) {
        if (p.dwell_count >= dwell) {
            ++p.index;
            p.dwell_count = 0;
        } else {
            ++p.dwell_count;
        }
    }
    return a;
}

Eigen::Vector4d visual_servo_ecm(const env::Vec2& p_err, double theta_star, double depth_estimate,
                                 const env::CameraModel& camera, double gain) {
    Eigen::Vector4d twist = Eigen::Vector4d::Zero();
    // Camera-frame lateral offset of the feature, pinhole back-projection.
    twist[0] = gain * p_err.x() * depth_estimate / camera.fx;
    twist[1] = gain * p_err.y() * depth_estimate / camera.fy;
    // Roll about the optical axis; it only rotates the image about the center,
    // so it leaves a centered feature in place.
    twist[3] = gain * theta_star;
    return twist;
}

Episode run_scripted(env::TaskEnv& env, std::uint64_t seed) {
    ScriptedPolicy policy;
    bool planned = false;
    return rollout(env, seed, [&](const env::Observation& obs) {
        if (!planned) {
            policy = plan_waypoints(env);
            planned = true;
        }
        return act(policy, obs);
    });
}

CollectStats collect_demos(env::TaskEnv& env, int n_episodes, const std::string& out_path, std::uint64_t first_seed,
                           int max_attempts) {
    if (n_episodes < 0) throw ContractViolation("n_episodes must be >= 0");
    if (max_attempts < 0) max_attempts = 2 * n_episodes;
    CollectStats stats;
    std::vector<Episode> kept;
    for (std::uint64_t seed = first_seed; stats.stored < n_episodes && stats.attempted < max_attempts; ++seed) {
        ++stats.attempted;
        Episode ep = run_scripted(env, seed);
        if (!episode_solved(env, ep)) continue;
        kept.push_back(std::move(ep));
        ++stats.stored;
    }
    if (stats.stored < n_episodes)
        throw InsufficientSuccess("only " + std::to_string(stats.stored) + " of " + std::to_string(n_episodes) +
                                  " demonstrations succeeded in " + std::to_string(stats.attempted) + " attempts");
    write_episodes(out_path, env.config(), kept);
    return stats;
}

} // namespace surgsim::demos
