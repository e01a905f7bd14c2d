#pragma once

// The ten task environments: reset/step, action mapping, low-dimensional
// observations, goal checks, rewards and the ECM camera model.

#include <array>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "surgsim/assets.hpp"
#include "surgsim/physics.hpp"

namespace surgsim::env {

using Eigen::VectorXd;
using phys::Pose;
using phys::Vec3;
using Vec2 = Eigen::Vector2d;

enum class TaskId {
    NeedleReach,
    GauzeRetrieve,
    NeedlePick,
    PegTransfer,
    NeedleRegrasp,
    BiPegTransfer,
    EcmReach,
    MisOrient,
    StaticTrack,
    ActiveTrack,
};

const std::vector<TaskId>& all_tasks();
/// Snake-case task name, e.g. "needle_pick".
std::string task_name(TaskId task);
/// Accepts snake-case or CamelCase names. Throws ContractViolation.
TaskId parse_task(const std::string& name);
bool is_ecm_task(TaskId task);
bool is_bimanual(TaskId task);
bool is_goal_based(TaskId task);

struct ActionSpec {
    // Component labels in order, e.g. {"dx","dy","dz","dyaw","jaw"}; bimanual
    // tasks prefix the per-arm block with "psm1." / "psm2.".
    std::vector<std::string> components;
    // Physical step per unit action (meters or radians; 1 for the jaw).
    std::vector<double> scale;

    int dim() const { return static_cast<int>(components.size()); }
};

struct Observation {
    VectorXd observation;
    VectorXd achieved_goal;
    VectorXd desired_goal;
};

struct StepInfo {
    bool is_success = false;
    bool timeout = false;
    // ActiveTrack: target outside the image on this step.
    bool target_lost = false;
};

struct StepResult {
    Observation obs;
    double reward = 0.0;
    bool done = false;
    StepInfo info;
};

struct TaskConfig {
    TaskId task = TaskId::NeedleReach;
    double epsilon = 0.005;        // PSM and EcmReach position tolerance, m
    double delta = 0.01;           // misorientation tolerance, rad
    double image_epsilon = 0.01;   // normalized image error tolerance
    double seat_tolerance = 0.001; // vertical tolerance for a seated block, m
    int horizon = 50;
    double h_above = 0.005;        // NeedleReach goal height above the needle
    double translation_scale = 0.005;
    double rotation_scale = 0.1;
    phys::GraspMode grasp_mode = phys::GraspMode::interact();
    // BiPegTransfer only: none | approach | pick | lift.
    std::string init_stage = "none";
    double track_speed = 0.03;     // ActiveTrack target speed, m/s
    int track_waypoints = 5;
    int lost_limit = 20;           // ActiveTrack: consecutive lost steps before termination

    nlohmann::json to_json() const;
    static TaskConfig from_json(const nlohmann::json& doc);
    /// Stable hex digest of to_json(); identifies the environment variant.
    std::string hash() const;
};

TaskConfig default_config(TaskId task);

// --- Camera ------------------------------------------------------------------

struct CameraModel {
    double fx = 0.8;
    double fy = 0.8;
    Vec2 principal{0.5, 0.5};
    // Camera frame relative to the ECM tool frame: z optical axis, x right,
    // y down in the image.
    Pose tool_to_camera;
    Vec3 nls_reference = Vec3::UnitZ();
};

struct ImagePoint {
    Vec2 uv = Vec2::Zero();
    bool in_view = false;
    double depth = 0.0;
};

/// Pinhole projection into normalized [0,1]^2 image coordinates.
ImagePoint project_to_image(const CameraModel& camera, const Pose& camera_world, const Vec3& point);

/// Signed angle between the image-plane projection of the NLS reference and
/// the image up axis. Rolling the camera by +a about its optical axis changes
/// it by -a. Throws UndefinedOrientation when the optical axis is parallel to
/// the reference.
double misorientation(const CameraModel& camera, const Pose& camera_world);

/// Dense tracking reward C - (|p - p_c| + lambda |theta|) with C = 1, lambda = 0.1.
double active_track_reward(const Vec2& p_img, double theta_star, const Vec2& p_c = Vec2(0.5, 0.5));

// --- Target paths -------------------------------------------------------------

/// Interpolating cubic B-spline through waypoints, traversed at constant
/// speed by arc length; reverses direction at the ends.
class TargetPath {
public:
    TargetPath() = default;
    TargetPath(std::vector<Vec3> waypoints, double speed);

    Vec3 at(double t) const;
    /// Position at arc length s in [0, length()].
    Vec3 at_arc_length(double s) const;
    double length() const { return length_; }
    double speed() const { return speed_; }
    const std::vector<Vec3>& waypoints() const { return waypoints_; }
    /// Raw spline position at parameter u in [0, n_waypoints - 1].
    Vec3 spline(double u) const;

private:
    std::vector<Vec3> waypoints_;
    std::vector<Vec3> control_;
    std::vector<double> table_u_, table_s_;
    double speed_ = 0.0;
    double length_ = 0.0;
};

TargetPath generate_target_path(const assets::Region& workspace, int n_waypoints, double speed, std::uint64_t seed);

// --- Rewards -------------------------------------------------------------------

/// Goal predicate shared by rewards and relabeling.
bool goal_reached(TaskId task, const VectorXd& achieved, const VectorXd& desired, const TaskConfig& config);

/// 0 when the goal predicate holds, -1 otherwise. Throws ContractViolation on
/// shape mismatch or for ActiveTrack (which has no goal).
double compute_reward(TaskId task, const VectorXd& achieved, const VectorXd& desired, const TaskConfig& config);

// --- Environment ---------------------------------------------------------------

/// Scene template for a task. Randomized objects carry their OnSurface rules;
/// fixed placements are re-posed at reset.
assets::SceneSpec task_scene(TaskId task);

/// Per-arm state exposed to scripted controllers.
struct PsmState {
    Vec3 tip;            // jaw tip point, world
    double yaw = 0.0;    // tool yaw about world z
    double pitch = 0.0;  // tool pitch about world y
    bool jaw_open = false;
    double jaw_half_angle = 0.0;
    phys::GraspState grasp;
};

class TaskEnv {
public:
    explicit TaskEnv(TaskConfig config);

    Observation reset(std::uint64_t seed);
    StepResult step(const VectorXd& action);

    TaskId task() const { return config_.task; }
    const TaskConfig& config() const { return config_; }
    const ActionSpec& action_spec() const { return action_spec_; }
    int observation_dim() const;
    int goal_dim() const;
    int horizon() const { return config_.horizon; }
    int step_count() const { return steps_; }
    std::uint64_t seed() const { return seed_; }
    bool has_reset() const { return has_reset_; }

    Observation observe() const;
    double compute_reward(const VectorXd& achieved, const VectorXd& desired) const;
    bool success_check() const;

    // State access for scripted policies, tests and logging.
    const phys::World& world() const { return world_; }
    phys::World& world_mut() { return world_; }
    int psm_count() const { return static_cast<int>(psms_.size()); }
    PsmState psm_state(int arm) const;
    Pose camera_pose() const;
    const CameraModel& camera() const { return camera_; }
    double theta_star() const;
    ImagePoint target_image() const;
    phys::BodyId object_id() const { return object_; }
    phys::BodyId target_id() const { return target_; }
    /// Designated grasp point of the object for each arm, world frame.
    Vec3 grasp_point(int arm) const;
    /// Tool yaw (or pitch for NeedleRegrasp) that aligns the jaw with the
    /// grasp point of `arm`.
    double grasp_angle(int arm) const;
    const VectorXd& goal() const { return goal_; }
    const assets::Region& workspace() const { return workspace_; }
    /// Peg axis bottoms for peg tasks.
    const std::vector<Vec3>& pegs() const { return pegs_; }
    int target_peg() const { return target_peg_; }
    double support_height() const { return world_.config.support_z; }
    const TargetPath& target_path() const { return path_; }
    bool grasp_ever_stabilized() const { return ever_stabilized_; }
    /// 4x4 map from joint rates to camera (vx, vy, vz, wz) in the camera frame.
    Eigen::Matrix4d camera_jacobian() const;
    const assets::BlockGeometry& block_geometry() const { return block_geom_; }
    const assets::NeedleGeometry& needle_geometry() const { return needle_geom_; }

private:
    struct Psm {
        int instrument = -1;
        double fixed_yaw = 0.0; // yaw held constant when the action has no yaw
        bool jaw_open = true;
    };

    void build_world();
    void place_psm(int arm, const Vec3& tip, double yaw, double pitch, bool jaw_open);
    kin::JointVector<double> psm_ik(int arm, const Vec3& tip, double yaw, double pitch) const;
    Pose tool_target(const Vec3& tip, double yaw, double pitch) const;
    void apply_psm_action(const VectorXd& action, std::vector<phys::ArmCommand>& commands);
    void apply_ecm_action(const VectorXd& action, std::vector<phys::ArmCommand>& commands);
    void sample_ecm_view(std::mt19937_64& rng);
    VectorXd achieved_goal() const;
    void update_latches();
    void init_bipeg_stage();
    void reset_psm_tasks(std::mt19937_64& rng);
    void reset_ecm_tasks(std::mt19937_64& rng);

    TaskConfig config_;
    ActionSpec action_spec_;
    phys::World world_;
    std::vector<Psm> psms_;
    int ecm_ = -1;
    CameraModel camera_;
    assets::Region workspace_;
    assets::NeedleGeometry needle_geom_;
    assets::BlockGeometry block_geom_;
    assets::PegBoardGeometry board_geom_;
    std::vector<Vec3> pegs_;
    int target_peg_ = -1;
    phys::BodyId object_ = -1;
    phys::BodyId target_ = -1;
    std::vector<phys::BodyId> distractors_;
    TargetPath path_;
    VectorXd goal_;
    int steps_ = 0;
    int lost_steps_ = 0;
    bool ever_stabilized_ = false;
    bool has_reset_ = false;
    std::uint64_t seed_ = 0;
};

std::unique_ptr<TaskEnv> make_env(TaskId task);

// --- Episode logs -------------------------------------------------------------

/// One transition per line after a header line {task, env_config_hash, seed, grasp_mode}.
class EpisodeLog {
public:
    EpisodeLog(const TaskEnv& env, std::uint64_t seed);
    void record(const Observation& obs, const VectorXd& action, const StepResult& result);
    const std::vector<nlohmann::json>& lines() const { return lines_; }
    void write(const std::string& path, bool append = false) const;

private:
    std::vector<nlohmann::json> lines_;
};

} // namespace surgsim::env
