#pragma once

// Waypoint-based scripted policies for the PSM tasks, image-based servoing
// for the ECM tasks, and demonstration collection.

#include <string>
#include <vector>

#include "surgsim/env.hpp"
#include "surgsim/rollout.hpp"

namespace surgsim::demos {

using env::Vec3;
using Eigen::VectorXd;

struct Waypoint {
    enum class Ref {
        Fixed,       // point is a world tip position
        GraspPoint,  // point is an offset from this arm's grasp point
        ObjectTo,    // move the held object so its origin reaches point
        Hold,        // stay put
    };
    Ref ref = Ref::Hold;
    Vec3 point = Vec3::Zero();
    double angle = 0.0;      // tool yaw, or pitch for NeedleRegrasp
    bool jaw_open = true;
    double tolerance = 5e-4; // meters
    int dwell = 0;           // extra steps to hold once reached
    bool blocking = true;    // stage waits for this arm to reach its waypoint
    std::string label;       // approach, pick, lift, handover, place, release, reach, retreat
};

/// One synchronized stage: a waypoint per arm. The stage advances when every
/// arm has reached its waypoint and dwelled.
struct Stage {
    std::vector<Waypoint> arms;
};

struct ScriptedPolicy {
    env::TaskId task = env::TaskId::NeedleReach;
    env::TaskConfig config;
    int action_dim = 0;
    std::vector<Stage> stages;
    int index = 0;
    int dwell_count = 0;
    double gain = 1.0;

    bool exhausted() const { return index >= static_cast<int>(stages.size()); }
};

/// Plans from the post-reset state. ECM tasks get an empty plan (they use
/// feedback only). Throws NoFeasiblePlan when a target lies outside the
/// workspace.
ScriptedPolicy plan_waypoints(const env::TaskEnv& env);

/// Next action from the latest observation. Advances the stage index when
/// the current stage is complete; once the plan is exhausted it returns the
/// zero action for waypoint tasks.
VectorXd act(ScriptedPolicy& policy, const env::Observation& obs);

/// Camera twist (vx, vy, vz, wz) in the camera frame that centers an image
/// point with normalized error p_err = p - p_c at the given effective depth
/// and removes the misorientation.
Eigen::Vector4d visual_servo_ecm(const env::Vec2& p_err, double theta_star, double depth_estimate,
                                 const env::CameraModel& camera = {}, double gain = 0.6);

/// Scripted rollout for any task.
Episode run_scripted(env::TaskEnv& env, std::uint64_t seed);

struct CollectStats {
    int attempted = 0;
    int stored = 0;
};

/// Rolls out scripted episodes with seeds first_seed, first_seed + 1, ...,
/// keeping only solved ones, until n_episodes are stored. Throws
/// InsufficientSuccess if fewer than n_episodes succeed in
/// max_attempts (default 2 n_episodes).
CollectStats collect_demos(env::TaskEnv& env, int n_episodes, const std::string& out_path, std::uint64_t first_seed = 0,
                           int max_attempts = -1);

} // namespace surgsim::demos
