#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "surgsim/env.hpp"
#include "surgsim/errors.hpp"

namespace surgsim::env {

namespace {

constexpr double kPi = 3.14159265358979323846;

using Mat3 = phys::Mat3;

struct TaskInfo {
    TaskId id;
    const char* name;
    const char* camel;
};

const TaskInfo kTasks[] = {
    {TaskId::NeedleReach, "needle_reach", "NeedleReach"},
    {TaskId::GauzeRetrieve, "gauze_retrieve", "GauzeRetrieve"},
    {TaskId::NeedlePick, "needle_pick", "NeedlePick"},
    {TaskId::PegTransfer, "peg_transfer", "PegTransfer"},
    {TaskId::NeedleRegrasp, "needle_regrasp", "NeedleRegrasp"},
    {TaskId::BiPegTransfer, "bi_peg_transfer", "BiPegTransfer"},
    {TaskId::EcmReach, "ecm_reach", "EcmReach"},
    {TaskId::MisOrient, "misorient", "MisOrient"},
    {TaskId::StaticTrack, "static_track", "StaticTrack"},
    {TaskId::ActiveTrack, "active_track", "ActiveTrack"},
};

// Tool pointing straight down with tool x along world x.
const Mat3& down_rotation() {
    static const Mat3 r = Vec3(1, -1, -1).asDiagonal();
    return r;
}

Mat3 psm_rotation(double yaw, double pitch) {
    return kin::rot_z<double>(yaw) * kin::rot_y<double>(pitch) * down_rotation();
}

void psm_angles(const Mat3& r, double& yaw, double& pitch) {
    const Mat3 m = r * down_rotation();
    pitch = std::asin(std::clamp(-m(2, 0), -1.0, 1.0));
    yaw = std::atan2(m(1, 0), m(0, 0));
}

double wrap_pi(double a) { return a - 2 * kPi * std::floor((a + kPi) / (2 * kPi)); }

// The jaw is symmetric, so grasp angles are only defined modulo pi.
double wrap_half_pi(double a) { return a - kPi * std::round(a / kPi); }

double body_yaw(const phys::RigidBody& b) { return std::atan2(b.pose.rotation(1, 0), b.pose.rotation(0, 0)); }

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

Vec3 clip(const Vec3& p, const assets::Region& r) { return p.cwiseMax(r.lo).cwiseMin(r.hi); }

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

ActionSpec make_action_spec(const TaskConfig& c) {
    ActionSpec s;
    const double t = c.translation_scale;
    const double r = c.rotation_scale;
    auto add = [&](const std::string& name, double scale) {
        s.components.push_back(name);
        s.scale.push_back(scale);
    };
    auto psm_block = [&](const std::string& prefix, const char* angle, bool jaw) {
        add(prefix + "dx", t);
        add(prefix + "dy", t);
        add(prefix + "dz", t);
        if (angle) add(prefix + angle, r);
        if (jaw) add(prefix + "jaw", 1.0);
    };
    switch (c.task) {
    case TaskId::NeedleReach: psm_block("", nullptr, false); break;
    case TaskId::GauzeRetrieve: psm_block("", nullptr, true); break;
    case TaskId::NeedlePick:
    case TaskId::PegTransfer: psm_block("", "dyaw", true); break;
    case TaskId::NeedleRegrasp:
        psm_block("psm1.", "dpitch", true);
        psm_block("psm2.", "dpitch", true);
        break;
    case TaskId::BiPegTransfer:
        psm_block("psm1.", "dyaw", true);
        psm_block("psm2.", "dyaw", true);
        break;
    case TaskId::EcmReach: psm_block("", nullptr, false); break;
    case TaskId::MisOrient: add("droll", r); break;
    case TaskId::StaticTrack:
    case TaskId::ActiveTrack:
        add("vx", t);
        add("vy", t);
        add("vz", t);
        add("wz", r);
        break;
    }
    return s;
}

// Scene layout constants.
const assets::Region kPsmWorkspace{Vec3(-0.05, -0.05, 0.0), Vec3(0.05, 0.05, 0.1)};
const assets::Region kCubeWorkspace{Vec3(-0.05, -0.05, 0.0), Vec3(0.05, 0.05, 0.0)};
const Vec3 kEcmRcm(-0.1, 0.0, 0.1);
constexpr double kCubeHalf = 0.0025;
constexpr double kBlockGripDepth = 0.002; // jaw tip below the wall top when grasping
constexpr double kPickGoalLow = 0.025, kPickGoalHigh = 0.06;

Pose psm_rcm(TaskId task, int arm) {
    if (is_bimanual(task)) return Pose::from_translation(Vec3(arm == 0 ? 0.04 : -0.04, 0.0, 0.15));
    return Pose::from_translation(Vec3(0.0, 0.0, 0.15));
}

// RCM frame for the ECM so that at q = 0 the camera looks at the workspace
// center, upright.
Pose ecm_rcm() {
    const auto chain = kin::ecm_chain();
    const Mat3 home = kin::tool_pose(chain, Eigen::VectorXd::Zero(4)).rotation;
    const Vec3 z = (Vec3::Zero() - kEcmRcm).normalized();
    const Vec3 y = (-Vec3::UnitZ() + Vec3::UnitZ().dot(z) * z).normalized();
    Mat3 cam;
    cam.col(0) = y.cross(z);
    cam.col(1) = y;
    cam.col(2) = z;
    return Pose(cam * home.transpose(), kEcmRcm);
}

} // namespace

// --- Task table ----------------------------------------------------------------

const std::vector<TaskId>& all_tasks() {
    static const std::vector<TaskId> tasks = [] {
        std::vector<TaskId> t;
        for (const auto& info : kTasks) t.push_back(info.id);
        return t;
    }();
    return tasks;
}

std::string task_name(TaskId task) {
    for (const auto& info : kTasks)
        if (info.id == task) return info.name;
    throw ContractViolation("unknown task id");
}

TaskId parse_task(const std::string& name) {
    for (const auto& info : kTasks)
        if (name == info.name || name == info.camel) return info.id;
    throw ContractViolation("unknown task '" + name + "'");
}

bool is_ecm_task(TaskId t) {
    return t == TaskId::EcmReach || t == TaskId::MisOrient || t == TaskId::StaticTrack || t == TaskId::ActiveTrack;
}

bool is_bimanual(TaskId t) { return t == TaskId::NeedleRegrasp || t == TaskId::BiPegTransfer; }

bool is_goal_based(TaskId t) { return t != TaskId::ActiveTrack; }

nlohmann::json TaskConfig::to_json() const {
    return {{"task", task_name(task)},
            {"epsilon", epsilon},
            {"delta", delta},
            {"image_epsilon", image_epsilon},
            {"seat_tolerance", seat_tolerance},
            {"horizon", horizon},
            {"h_above", h_above},
            {"translation_scale", translation_scale},
            {"rotation_scale", rotation_scale},
            {"grasp_mode", grasp_mode.label()},
            {"init_stage", init_stage},
            {"track_speed", track_speed},
            {"track_waypoints", track_waypoints},
            {"lost_limit", lost_limit}};
}

TaskConfig TaskConfig::from_json(const nlohmann::json& doc) {
    try {
        TaskConfig c = default_config(parse_task(doc.at("task").get<std::string>()));
        c.epsilon = doc.value("epsilon", c.epsilon);
        c.delta = doc.value("delta", c.delta);
        c.image_epsilon = doc.value("image_epsilon", c.image_epsilon);
        c.seat_tolerance = doc.value("seat_tolerance", c.seat_tolerance);
        c.horizon = doc.value("horizon", c.horizon);
        c.h_above = doc.value("h_above", c.h_above);
        c.translation_scale = doc.value("translation_scale", c.translation_scale);
        c.rotation_scale = doc.value("rotation_scale", c.rotation_scale);
        if (doc.contains("grasp_mode")) c.grasp_mode = phys::GraspMode::parse(doc.at("grasp_mode").get<std::string>());
        c.init_stage = doc.value("init_stage", c.init_stage);
        c.track_speed = doc.value("track_speed", c.track_speed);
        c.track_waypoints = doc.value("track_waypoints", c.track_waypoints);
        c.lost_limit = doc.value("lost_limit", c.lost_limit);
        if (!(c.epsilon > 0) || !(c.delta > 0) || !(c.image_epsilon > 0) || c.horizon < 1 || !(c.translation_scale > 0) ||
            !(c.rotation_scale > 0) || !(c.track_speed > 0) || c.track_waypoints < 2)
            throw ContractViolation("task config values out of range");
        static const std::vector<std::string> stages = {"none", "approach", "pick", "lift"};
        if (std::find(stages.begin(), stages.end(), c.init_stage) == stages.end())
            throw ContractViolation("init_stage must be none, approach, pick or lift");
        if (c.init_stage != "none" && c.task != TaskId::BiPegTransfer)
            throw ContractViolation("init_stage is only supported by bi_peg_transfer");
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation(std::string("malformed task config: ") + e.what());
    }
}

std::string TaskConfig::hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(to_json().dump())));
    return buf;
}

TaskConfig default_config(TaskId task) {
    TaskConfig c;
    c.task = task;
    c.horizon = task == TaskId::ActiveTrack ? 500 : 50;
    return c;
}

// --- Camera --------------------------------------------------------------------

ImagePoint project_to_image(const CameraModel& camera, const Pose& camera_world, const Vec3& point) {
    ImagePoint out;
    if (!point.allFinite()) return out;
    const Vec3 p = camera_world.inverse() * point;
    out.depth = p.z();
    if (p.z() <= 1e-9) {
        out.uv = Vec2(-1.0, -1.0);
        return out;
    }
    out.uv = camera.principal + Vec2(camera.fx * p.x() / p.z(), camera.fy * p.y() / p.z());
    out.in_view = (out.uv.array() >= 0.0).all() && (out.uv.array() <= 1.0).all();
    return out;
}

double misorientation(const CameraModel& camera, const Pose& camera_world) {
    const Vec3 n = camera_world.rotation.transpose() * camera.nls_reference.normalized();
    if (std::hypot(n.x(), n.y()) < 1e-9)
        throw UndefinedOrientation("misorientation: optical axis is parallel to the reference direction");
    return wrap_pi(std::atan2(n.y(), n.x()) + 0.5 * kPi);
}

double active_track_reward(const Vec2& p_img, double theta_star, const Vec2& p_c) {
    constexpr double C = 1.0, lambda = 0.1;
    return C - ((p_img - p_c).norm() + lambda * std::abs(theta_star));
}

// --- Target path ----------------------------------------------------------------

TargetPath::TargetPath(std::vector<Vec3> waypoints, double speed) : waypoints_(std::move(waypoints)), speed_(speed) {
    const int n = static_cast<int>(waypoints_.size());
    if (n < 2) throw ContractViolation("target path needs at least two waypoints");
    if (!(speed > 0)) throw ContractViolation("target path speed must be > 0");
    // Control points P_0..P_{n+1} of a uniform cubic B-spline interpolating the
    // waypoints at integer knots: (P_{i} + 4 P_{i+1} + P_{i+2}) / 6 = Q_i, with
    // natural end conditions P_0 = 2 P_1 - P_2 and P_{n+1} = 2 P_n - P_{n-1},
    // which reduce the end rows to P_1 = Q_0 and P_n = Q_{n-1}.
    const int m = n;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(m, m);
    Eigen::MatrixXd rhs(m, 3);
    for (int i = 0; i < m; ++i) {
        rhs.row(i) = waypoints_[i].transpose();
        if (i == 0 || i == m - 1) {
            a(i, i) = 1.0;
        } else {
            a(i, i - 1) = 1.0 / 6.0;
            a(i, i) = 4.0 / 6.0;
            a(i, i + 1) = 1.0 / 6.0;
        }
    }
    const Eigen::MatrixXd inner = a.partialPivLu().solve(rhs);
    control_.resize(m + 2);
    for (int i = 0; i < m; ++i) control_[i + 1] = inner.row(i).transpose();
    control_[0] = 2 * control_[1] - control_[2];
    control_[m + 1] = 2 * control_[m] - control_[m - 1];

    const int per_segment = 400;
    const int samples = per_segment * (n - 1);
    table_u_.resize(samples + 1);
    table_s_.resize(samples + 1);
    Vec3 prev = spline(0.0);
    table_u_[0] = table_s_[0] = 0.0;
    for (int i = 1; i <= samples; ++i) {
        const double u = static_cast<double>(i) / per_segment;
        const Vec3 p = spline(u);
        table_u_[i] = u;
        table_s_[i] = table_s_[i - 1] + (p - prev).norm();
        prev = p;
    }
    length_ = table_s_.back();
}

Vec3 TargetPath::spline(double u) const {
    const int segments = static_cast<int>(waypoints_.size()) - 1;
    u = std::clamp(u, 0.0, static_cast<double>(segments));
    const int k = std::min(static_cast<int>(u), segments - 1);
    const double t = u - k;
    const double b0 = (1 - t) * (1 - t) * (1 - t) / 6.0;
    const double b1 = (3 * t * t * t - 6 * t * t + 4) / 6.0;
    const double b2 = (-3 * t * t * t + 3 * t * t + 3 * t + 1) / 6.0;
    const double b3 = t * t * t / 6.0;
    return b0 * control_[k] + b1 * control_[k + 1] + b2 * control_[k + 2] + b3 * control_[k + 3];
}

Vec3 TargetPath::at_arc_length(double s) const {
    s = std::clamp(s, 0.0, length_);
    const auto it = std::lower_bound(table_s_.begin(), table_s_.end(), s);
    const size_t i = std::max<size_t>(1, std::min<size_t>(it - table_s_.begin(), table_s_.size() - 1));
    const double ds = table_s_[i] - table_s_[i - 1];
    const double f = ds > 0 ? (s - table_s_[i - 1]) / ds : 0.0;
    return spline(table_u_[i - 1] + f * (table_u_[i] - table_u_[i - 1]));
}

Vec3 TargetPath::at(double t) const {
    if (length_ <= 0) return waypoints_.front();
    const double s = std::fmod(std::max(t, 0.0) * speed_, 2 * length_);
    return at_arc_length(s <= length_ ? s : 2 * length_ - s);
}

TargetPath generate_target_path(const assets::Region& ws, int n_waypoints, double speed, std::uint64_t seed) {
    if (n_waypoints < 2) throw ContractViolation("generate_target_path: need at least two waypoints");
    std::mt19937_64 rng(seed);
    std::vector<Vec3> pts;
    for (int i = 0; i < n_waypoints; ++i)
        pts.emplace_back(uniform(rng, ws.lo.x(), ws.hi.x()), uniform(rng, ws.lo.y(), ws.hi.y()),
                         uniform(rng, ws.lo.z(), ws.hi.z()));
    return TargetPath(std::move(pts), speed);
}

// --- Rewards -------------------------------------------------------------------------

namespace {

int goal_size(TaskId task) {
    switch (task) {
    case TaskId::GauzeRetrieve:
    case TaskId::NeedlePick:
    case TaskId::NeedleRegrasp: return 4;
    case TaskId::MisOrient: return 1;
    default: return 3;
    }
}

} // namespace

bool goal_reached(TaskId task, const VectorXd& a, const VectorXd& d, const TaskConfig& c) {
    const int n = goal_size(task);
    if (a.size() != n || d.size() != n) throw ContractViolation("goal has the wrong size for " + task_name(task));
    switch (task) {
    case TaskId::NeedleReach:
    case TaskId::EcmReach: return (a - d).norm() < c.epsilon;
    case TaskId::GauzeRetrieve:
    case TaskId::NeedlePick:
    case TaskId::NeedleRegrasp: return (a.head<3>() - d.head<3>()).norm() < c.epsilon && std::abs(a[3] - d[3]) < 0.5;
    case TaskId::PegTransfer:
    case TaskId::BiPegTransfer:
        return (a.head<2>() - d.head<2>()).norm() < c.epsilon && std::abs(a[2] - d[2]) < c.seat_tolerance;
    case TaskId::MisOrient: return std::abs(a[0] - d[0]) <= c.delta;
    case TaskId::StaticTrack:
        return (a.head<2>() - d.head<2>()).norm() < c.image_epsilon && std::abs(a[2] - d[2]) < c.delta;
    case TaskId::ActiveTrack: break;
    }
    throw ContractViolation("active_track has a dense reward; use active_track_reward");
}

double compute_reward(TaskId task, const VectorXd& a, const VectorXd& d, const TaskConfig& c) {
    return goal_reached(task, a, d, c) ? 0.0 : -1.0;
}

assets::SceneSpec task_scene(TaskId task) {
    using assets::ObjectKind;
    assets::SceneSpec spec;
    if (is_ecm_task(task)) {
        spec.workspace = {Vec3(-0.15, -0.15, 0), Vec3(0.15, 0.15, 0.1)};
        assets::ObjectSpec table;
        table.kind = ObjectKind::Tray;
        table.name = "table";
        table.dims = {{"half_x", 0.15}, {"half_y", 0.15}};
        spec.objects.push_back(table);
        if (task == TaskId::StaticTrack || task == TaskId::ActiveTrack) {
            for (int i = 0; i < 4; ++i) {
                assets::ObjectSpec cube;
                cube.kind = ObjectKind::Cube;
                cube.name = i == 0 ? "target" : "cube_" + std::to_string(i);
                cube.dims = {{"half", kCubeHalf}};
                cube.placement.rule = assets::Placement::Rule::OnSurface;
                cube.placement.region = {Vec3(-0.05, -0.05, 0), Vec3(0.05, 0.05, 0)};
                cube.placement.yaw_lo = -kPi / 4;
                cube.placement.yaw_hi = kPi / 4;
                spec.objects.push_back(cube);
            }
        }
        return spec;
    }
    spec.workspace = kPsmWorkspace;
    const bool peg_task = task == TaskId::PegTransfer || task == TaskId::BiPegTransfer;
    assets::ObjectSpec support;
    support.kind = peg_task ? ObjectKind::PegBoard : ObjectKind::Tray;
    support.name = peg_task ? "pegboard" : "tray";
    spec.objects.push_back(support);

    // Fixed placements (regrasp needle, peg blocks) are re-posed at reset.
    assets::ObjectSpec obj;
    obj.graspable = true;
    obj.name = "object";
    switch (task) {
    case TaskId::GauzeRetrieve:
        obj.kind = ObjectKind::GauzePad;
        obj.material.friction_mu = 0.2;
        obj.placement.rule = assets::Placement::Rule::OnSurface;
        obj.placement.region = {Vec3(-0.035, -0.035, 0), Vec3(0.035, 0.035, 0)};
        obj.placement.yaw_lo = -kPi / 4;
        obj.placement.yaw_hi = kPi / 4;
        break;
    case TaskId::NeedleReach:
    case TaskId::NeedlePick:
        obj.kind = ObjectKind::Needle;
        obj.placement.rule = assets::Placement::Rule::OnSurface;
        obj.placement.region = {Vec3(-0.035, -0.035, 0), Vec3(0.035, 0.035, 0)};
        obj.placement.yaw_lo = -kPi;
        obj.placement.yaw_hi = kPi;
        break;
    case TaskId::NeedleRegrasp: obj.kind = ObjectKind::Needle; break;
    default: obj.kind = ObjectKind::Block; break;
    }
    spec.objects.push_back(obj);
    return spec;
}

// --- Environment -------------------------------------------------------------------

TaskEnv::TaskEnv(TaskConfig config) : config_(std::move(config)) {
    config_ = TaskConfig::from_json(config_.to_json());
    action_spec_ = make_action_spec(config_);
}

std::unique_ptr<TaskEnv> make_env(TaskId task) { return std::make_unique<TaskEnv>(default_config(task)); }

int TaskEnv::goal_dim() const { return goal_size(config_.task); }

int TaskEnv::observation_dim() const {
    switch (config_.task) {
    case TaskId::NeedleReach:
    case TaskId::GauzeRetrieve: return 12;
    case TaskId::NeedlePick:
    case TaskId::PegTransfer: return 13;
    case TaskId::NeedleRegrasp: return 20;
    case TaskId::BiPegTransfer: return 22;
    case TaskId::EcmReach: return 7;
    case TaskId::MisOrient: return 5;
    case TaskId::StaticTrack: return 10;
    case TaskId::ActiveTrack: return 11;
    }
    return 0;
}

Pose TaskEnv::tool_target(const Vec3& tip, double yaw, double pitch) const {
    const Mat3 r = psm_rotation(yaw, pitch);
    return Pose(r, tip - r.col(2) * phys::JawDescriptor{}.tip_offset);
}

kin::JointVector<double> TaskEnv::psm_ik(int arm, const Vec3& tip, double yaw, double pitch) const {
    const auto& ins = world_.instruments.at(psms_.at(arm).instrument);
    const Pose target = ins.arm.rcm_pose.inverse() * tool_target(tip, yaw, pitch);
    kin::IkOptions opt;
    opt.max_iterations = 100;
    return kin::solve_ik(ins.arm.chain, target, ins.arm.current_q, opt).q;
}

void TaskEnv::place_psm(int arm, const Vec3& tip, double yaw, double pitch, bool jaw_open) {
    auto& psm = psms_.at(arm);
    auto& ins = world_.instruments.at(psm.instrument);
    kin::JointVector<double> nominal = Eigen::VectorXd::Zero(6);
    nominal[2] = 0.14;
    ins.arm.current_q = nominal;
    const auto q = psm_ik(arm, tip, yaw, pitch);
    phys::reset_instrument(world_, psm.instrument, q, jaw_open ? ins.jaw.open_half_angle : 0.0);
    ins.jaw_command = jaw_open ? 1.0 : -1.0;
    psm.jaw_open = jaw_open;
}

PsmState TaskEnv::psm_state(int arm) const {
    const auto& psm = psms_.at(arm);
    const auto& ins = world_.instruments.at(psm.instrument);
    const Pose tool = ins.arm.world_tool_pose();
    PsmState s;
    s.tip = tool * Vec3(0, 0, ins.jaw.tip_offset);
    psm_angles(tool.rotation, s.yaw, s.pitch);
    s.jaw_open = psm.jaw_open;
    s.jaw_half_angle = ins.jaw_half_angle;
    s.grasp = ins.grasp;
    return s;
}

Pose TaskEnv::camera_pose() const {
    if (ecm_ < 0) throw ContractViolation(task_name(config_.task) + " has no camera");
    return world_.instruments.at(ecm_).arm.world_tool_pose() * camera_.tool_to_camera;
}

double TaskEnv::theta_star() const { return misorientation(camera_, camera_pose()); }

ImagePoint TaskEnv::target_image() const {
    if (target_ < 0) throw ContractViolation(task_name(config_.task) + " has no tracking target");
    return project_to_image(camera_, camera_pose(), world_.body(target_).pose.translation);
}

Eigen::Matrix4d TaskEnv::camera_jacobian() const {
    const auto& ins = world_.instruments.at(ecm_);
    const auto j = kin::jacobian(ins.arm.chain, ins.arm.current_q);
    // Camera frame expressed in the RCM base frame.
    const Mat3 r = (kin::tool_pose(ins.arm.chain, ins.arm.current_q) * camera_.tool_to_camera).rotation;
    Eigen::Matrix4d out;
    out.topRows<3>() = r.transpose() * j.topRows<3>();
    out.row(3) = (r.transpose() * j.bottomRows<3>()).row(2);
    return out;
}

Vec3 TaskEnv::grasp_point(int arm) const {
    const auto& b = world_.body(object_);
    switch (config_.task) {
    case TaskId::NeedleReach:
    case TaskId::NeedlePick: return b.pose * needle_geom_.arc_point(assets::kNeedleGraspPhi);
    case TaskId::NeedleRegrasp:
        return b.pose * needle_geom_.arc_point(arm == 0 ? kPi - assets::kNeedleGraspPhi : assets::kNeedleGraspPhi);
    case TaskId::GauzeRetrieve: return b.pose.translation;
    case TaskId::PegTransfer: return b.pose * assets::block_grasp_point(block_geom_);
    case TaskId::BiPegTransfer: {
        Vec3 p = assets::block_grasp_point(block_geom_);
        if (arm == 1) p.x() = -p.x();
        return b.pose * p;
    }
    default: throw ContractViolation(task_name(config_.task) + " has no grasp point");
    }
}

double TaskEnv::grasp_angle(int arm) const {
    const auto& b = world_.body(object_);
    switch (config_.task) {
    case TaskId::NeedleReach:
    case TaskId::NeedlePick:
    case TaskId::NeedleRegrasp: {
        if (config_.task == TaskId::NeedleRegrasp) return 0.0; // pitch
        const double phi = assets::kNeedleGraspPhi;
        const Vec3 radial = b.pose.rotation * Vec3(std::cos(phi), std::sin(phi), 0.0);
        return wrap_half_pi(std::atan2(radial.y(), radial.x()));
    }
    case TaskId::PegTransfer:
    case TaskId::BiPegTransfer: return wrap_half_pi(body_yaw(b));
    default: (void)arm; return 0.0;
    }
}

// --- Reset ---------------------------------------------------------------------------

void TaskEnv::build_world() {
    world_ = phys::World{};
    world_.grasp_mode = config_.grasp_mode;
    world_.config.support_z = 0.0;
    psms_.clear();
    ecm_ = -1;
    object_ = target_ = -1;
    distractors_.clear();
    pegs_.clear();
    target_peg_ = -1;
}

Observation TaskEnv::reset(std::uint64_t seed) {
    seed_ = seed;
    std::mt19937_64 rng(seed);
    build_world();
    steps_ = 0;
    lost_steps_ = 0;
    ever_stabilized_ = false;
    if (is_ecm_task(config_.task)) reset_ecm_tasks(rng);
    else reset_psm_tasks(rng);
    has_reset_ = true;
    update_latches();
    return observe();
}

void TaskEnv::reset_psm_tasks(std::mt19937_64& rng) {
    const TaskId task = config_.task;
    workspace_ = kPsmWorkspace;
    assets::SceneSpec spec = task_scene(task);
    spec.rng_seed = rng();
    auto& obj = spec.objects.back();
    if (task == TaskId::NeedleRegrasp) {
        const double yaw = kPi / 4 + uniform(rng, -0.1, 0.1);
        const Vec3 p(uniform(rng, -0.02, 0.02), uniform(rng, -0.02, 0.02), uniform(rng, 0.03, 0.05));
        obj.placement.pose = Pose(kin::rot_z<double>(yaw), p);
    } else if (task == TaskId::PegTransfer || task == TaskId::BiPegTransfer) {
        pegs_ = assets::peg_positions(board_geom_);
        int src, dst;
        if (task == TaskId::PegTransfer) {
            src = std::uniform_int_distribution<int>(0, static_cast<int>(pegs_.size()) - 1)(rng);
            dst = std::uniform_int_distribution<int>(0, static_cast<int>(pegs_.size()) - 2)(rng);
            if (dst >= src) ++dst;
        } else {
            // PSM2 (on -x) picks from the left column, PSM1 places on the right.
            src = std::uniform_int_distribution<int>(0, board_geom_.rows - 1)(rng) * board_geom_.cols;
            dst = std::uniform_int_distribution<int>(0, board_geom_.rows - 1)(rng) * board_geom_.cols +
                  board_geom_.cols - 1;
        }
        target_peg_ = dst;
        const double yaw = uniform(rng, -0.3, 0.3);
        obj.placement.pose = Pose(kin::rot_z<double>(yaw), pegs_[src] + Vec3(0, 0, 0.5 * block_geom_.height));
    }
    auto scene = assets::spawn_scene(spec);
    world_ = std::move(scene.world);
    world_.grasp_mode = config_.grasp_mode;
    world_.config.support_z = 0.0;
    object_ = scene.id("object");

    const int arms = is_bimanual(task) ? 2 : 1;
    for (int arm = 0; arm < arms; ++arm) {
        kin::ArmModeld model;
        model.chain = kin::psm_chain();
        model.rcm_pose = psm_rcm(task, arm);
        model.current_q = Eigen::VectorXd::Zero(6);
        model.current_q[2] = 0.14;
        Psm psm;
        psm.instrument = world_.add_instrument(arm == 0 ? "psm1" : "psm2", model, true);
        psms_.push_back(psm);
    }

    auto random_tip = [&](double x_lo, double x_hi) {
        return Vec3(uniform(rng, x_lo, x_hi), uniform(rng, -0.03, 0.03), uniform(rng, 0.03, 0.06));
    };
    switch (task) {
    case TaskId::NeedleReach: {
        place_psm(0, random_tip(-0.03, 0.03), 0.0, 0.0, false);
        goal_ = world_.body(object_).pose.translation + Vec3(0, 0, config_.h_above);
        break;
    }
    case TaskId::GauzeRetrieve:
    case TaskId::NeedlePick: {
        place_psm(0, random_tip(-0.03, 0.03), 0.0, 0.0, true);
        goal_.resize(4);
        goal_ << uniform(rng, -0.04, 0.04), uniform(rng, -0.04, 0.04), uniform(rng, kPickGoalLow, kPickGoalHigh), 1.0;
        break;
    }
    case TaskId::PegTransfer: {
        place_psm(0, random_tip(-0.03, 0.03), 0.0, 0.0, true);
        goal_ = pegs_[target_peg_] + Vec3(0, 0, 0.5 * block_geom_.height);
        break;
    }
    case TaskId::NeedleRegrasp: {
        // PSM2 holds the needle a quarter arc from the tip, jaw across the wire.
        const Vec3 gp2 = grasp_point(1);
        const Vec3 radial =
            world_.body(object_).pose.rotation *
            Vec3(std::cos(assets::kNeedleGraspPhi), std::sin(assets::kNeedleGraspPhi), 0.0);
        psms_[1].fixed_yaw = wrap_half_pi(std::atan2(radial.y(), radial.x()));
        place_psm(1, gp2, psms_[1].fixed_yaw, 0.0, false);
        const auto& ins2 = world_.instruments[psms_[1].instrument];
        phys::reset_instrument(world_, psms_[1].instrument, ins2.arm.current_q,
                               std::asin(needle_geom_.wire_radius / ins2.jaw.tip_offset));
        phys::force_grasp(world_, psms_[1].instrument, object_);
        psms_[1].jaw_open = false;
        psms_[0].fixed_yaw = 0.0;
        place_psm(0, random_tip(0.0, 0.03) + Vec3(0, 0, 0.01), 0.0, 0.0, true);
        goal_.resize(4);
        goal_ << uniform(rng, -0.03, 0.03), uniform(rng, -0.03, 0.03), uniform(rng, kPickGoalLow, kPickGoalHigh), 1.0;
        break;
    }
    case TaskId::BiPegTransfer: {
        place_psm(0, random_tip(0.0, 0.03), 0.0, 0.0, true);
        place_psm(1, random_tip(-0.03, 0.0), 0.0, 0.0, true);
        goal_ = pegs_[target_peg_] + Vec3(0, 0, 0.5 * block_geom_.height);
        init_bipeg_stage();
        break;
    }
    default: break;
    }
}

void TaskEnv::init_bipeg_stage() {
    const std::string& stage = config_.init_stage;
    if (stage == "none") return;
    const double yaw = grasp_angle(1);
    const Vec3 gp = grasp_point(1);
    if (stage == "approach") {
        place_psm(1, gp + Vec3(0, 0, 0.01), yaw, 0.0, true);
        return;
    }
    const double lift = stage == "lift" ? 0.012 : 0.0;
    world_.body(object_).pose.translation.z() += lift;
    const Vec3 tip = gp + Vec3(0, 0, lift - kBlockGripDepth);
    place_psm(1, tip, yaw, 0.0, false);
    const double wall_half = 0.25 * (block_geom_.outer_half - block_geom_.hole_half);
    auto& ins = world_.instruments[psms_[1].instrument];
    const double contact = std::atan(wall_half / (ins.jaw.tip_offset - kBlockGripDepth));
    phys::reset_instrument(world_, psms_[1].instrument, ins.arm.current_q, contact);
    phys::force_grasp(world_, psms_[1].instrument, object_);
    psms_[1].jaw_open = false;
}

void TaskEnv::sample_ecm_view(std::mt19937_64& rng) {
    auto& ins = world_.instruments[ecm_];
    for (int attempt = 0; attempt < assets::kMaxPlacementAttempts; ++attempt) {
        kin::JointVector<double> q(4);
        q << uniform(rng, -0.3, 0.3), uniform(rng, -0.3, 0.3), uniform(rng, 0.02, 0.06), uniform(rng, -0.5, 0.5);
        phys::reset_instrument(world_, ecm_, q, 0.0);
        const auto img = target_image();
        if (img.in_view && (img.uv.array() > 0.15).all() && (img.uv.array() < 0.85).all()) return;
    }
    (void)ins;
    throw PlacementInfeasible("no ECM configuration keeps the target in view");
}

void TaskEnv::reset_ecm_tasks(std::mt19937_64& rng) {
    const TaskId task = config_.task;
    workspace_ = kCubeWorkspace;
    assets::SceneSpec spec = task_scene(task);
    spec.rng_seed = rng();
    const bool tracking = task == TaskId::StaticTrack || task == TaskId::ActiveTrack;
    auto scene = assets::spawn_scene(spec);
    world_ = std::move(scene.world);
    world_.grasp_mode = config_.grasp_mode;
    if (tracking) {
        target_ = scene.id("target");
        for (int i = 1; i < 4; ++i) distractors_.push_back(scene.id("cube_" + std::to_string(i)));
        // Cubes are placed, not simulated; the ActiveTrack target is driven along its path.
        world_.body(target_).kinematic = true;
        for (auto id : distractors_) world_.body(id).kinematic = true;
    }

    kin::ArmModeld model;
    model.chain = kin::ecm_chain();
    model.rcm_pose = ecm_rcm();
    model.current_q = Eigen::VectorXd::Zero(4);
    ecm_ = world_.add_instrument("ecm", model, false);

    auto random_q = [&](double q4_range) {
        kin::JointVector<double> q(4);
        q << uniform(rng, -0.4, 0.4), uniform(rng, -0.4, 0.4), uniform(rng, 0.02, 0.08),
            uniform(rng, -q4_range, q4_range);
        return q;
    };
    switch (task) {
    case TaskId::EcmReach: {
        const auto q_goal = random_q(0.0);
        phys::reset_instrument(world_, ecm_, q_goal, 0.0);
        goal_ = camera_pose().translation;
        phys::reset_instrument(world_, ecm_, random_q(0.0), 0.0);
        break;
    }
    case TaskId::MisOrient: {
        for (int attempt = 0;; ++attempt) {
            phys::reset_instrument(world_, ecm_, random_q(1.0), 0.0);
            if (std::abs(theta_star()) > 5 * config_.delta) break;
            if (attempt >= assets::kMaxPlacementAttempts) throw PlacementInfeasible("misorientation sampling failed");
        }
        goal_ = VectorXd::Zero(1);
        break;
    }
    case TaskId::StaticTrack:
    case TaskId::ActiveTrack: {
        if (task == TaskId::ActiveTrack) {
            assets::Region path_region{Vec3(-0.04, -0.04, kCubeHalf), Vec3(0.04, 0.04, kCubeHalf)};
            path_ = generate_target_path(path_region, config_.track_waypoints, config_.track_speed, rng());
            world_.body(target_).pose.translation = path_.at(0.0);
        }
        sample_ecm_view(rng);
        goal_ = Eigen::Vector3d(0.5, 0.5, 0.0);
        break;
    }
    default: break;
    }
}

// --- Step ------------------------------------------------------------------------------

void TaskEnv::apply_psm_action(const VectorXd& a, std::vector<phys::ArmCommand>& commands) {
    const int block = action_spec_.dim() / psm_count();
    for (int arm = 0; arm < psm_count(); ++arm) {
        const int o = arm * block;
        auto& psm = psms_[arm];
        const PsmState st = psm_state(arm);
        const Vec3 tip = clip(st.tip + config_.translation_scale * a.segment<3>(o), workspace_);
        double yaw = psm.fixed_yaw, pitch = 0.0;
        int next = o + 3;
        const std::string& label = action_spec_.components.size() > size_t(next) ? action_spec_.components[next] : "";
        if (label.find("dyaw") != std::string::npos) {
            yaw = std::clamp(st.yaw + config_.rotation_scale * a[next], -2.0, 2.0);
            ++next;
        } else if (label.find("dpitch") != std::string::npos) {
            pitch = std::clamp(st.pitch + config_.rotation_scale * a[next], -0.6, 0.6);
            ++next;
        }
        // Jaw: positive opens, negative closes, zero keeps the current state.
        if (next < o + block && a[next] != 0.0) psm.jaw_open = a[next] > 0.0;
        auto& cmd = commands[psm.instrument];
        cmd.q_target = psm_ik(arm, tip, yaw, pitch);
        cmd.jaw = psm.jaw_open ? 1.0 : -1.0;
    }
}

void TaskEnv::apply_ecm_action(const VectorXd& a, std::vector<phys::ArmCommand>& commands) {
    const auto& ins = world_.instruments[ecm_];
    auto& cmd = commands[ecm_];
    cmd.jaw = -1.0;
    kin::JointVector<double> q = ins.arm.current_q;
    switch (config_.task) {
    case TaskId::EcmReach: {
        const Vec3 target = camera_pose().translation + config_.translation_scale * a.head<3>();
        kin::IkOptions opt;
        opt.position_only = true;
        opt.locked = {false, false, false, true};
        opt.max_iterations = 100;
        const Pose goal(Mat3::Identity(), ins.arm.rcm_pose.inverse() * target);
        q = kin::solve_ik(ins.arm.chain, goal, q, opt).q;
        break;
    }
    case TaskId::MisOrient: q[3] += config_.rotation_scale * a[0]; break;
    default: {
        Eigen::Vector4d twist;
        twist << config_.translation_scale * a.head<3>(), config_.rotation_scale * a[3];
        const Eigen::Matrix4d j = camera_jacobian();
        // Damped least squares keeps the step bounded near pivot singularities.
        const Eigen::Matrix4d jjt = j * j.transpose() + 1e-8 * Eigen::Matrix4d::Identity();
        q += j.transpose() * jjt.ldlt().solve(twist);
        break;
    }
    }
    cmd.q_target = kin::clamp_joints(ins.arm.chain, q);
}

StepResult TaskEnv::step(const VectorXd& action) {
    if (!has_reset_) throw ContractViolation("step called before reset");
    if (action.size() != action_spec_.dim())
        throw ContractViolation("action has " + std::to_string(action.size()) + " components, expected " +
                                std::to_string(action_spec_.dim()));
    if (!action.allFinite()) throw ContractViolation("action has non-finite components");
    if (steps_ >= config_.horizon) throw ContractViolation("episode is over; call reset");
    const VectorXd a = action.cwiseMax(-1.0).cwiseMin(1.0);

    std::vector<phys::ArmCommand> commands(world_.instruments.size());
    for (size_t i = 0; i < commands.size(); ++i) {
        commands[i].q_target = world_.instruments[i].target_q;
        commands[i].jaw = world_.instruments[i].jaw_command;
    }
    if (is_ecm_task(config_.task)) apply_ecm_action(a, commands);
    else apply_psm_action(a, commands);

    ++steps_;
    if (config_.task == TaskId::ActiveTrack) {
        const double t = steps_ * world_.config.dt_sub * world_.config.substeps_per_control;
        auto& target = world_.body(target_);
        target.pose.translation = path_.at(t);
    }
    try {
        phys::step_control(world_, commands);
    } catch (const SimulationDiverged&) {
        has_reset_ = false;
        throw;
    }
    update_latches();

    StepResult r;
    r.obs = observe();
    if (config_.task == TaskId::ActiveTrack) {
        const ImagePoint img = target_image();
        r.info.target_lost = !img.in_view;
        lost_steps_ = img.in_view ? 0 : lost_steps_ + 1;
        r.reward = img.in_view ? active_track_reward(img.uv, theta_star()) : -1.0;
        r.info.is_success = img.in_view;
        r.done = steps_ >= config_.horizon || lost_steps_ > config_.lost_limit;
    } else {
        r.reward = compute_reward(r.obs.achieved_goal, r.obs.desired_goal);
        r.info.is_success = success_check();
        r.done = steps_ >= config_.horizon;
    }
    r.info.timeout = steps_ >= config_.horizon;
    return r;
}

void TaskEnv::update_latches() {
    for (const auto& psm : psms_) {
        const auto& g = world_.instruments[psm.instrument].grasp;
        if (g.body == object_ && g.stabilized) ever_stabilized_ = true;
    }
}

// --- Observation ------------------------------------------------------------------------

VectorXd TaskEnv::achieved_goal() const {
    const TaskId task = config_.task;
    switch (task) {
    case TaskId::NeedleReach: return psm_state(0).tip;
    case TaskId::GauzeRetrieve:
    case TaskId::NeedlePick: {
        VectorXd g(4);
        g << world_.body(object_).pose.translation, ever_stabilized_ ? 1.0 : 0.0;
        return g;
    }
    case TaskId::NeedleRegrasp: {
        const auto& g1 = world_.instruments[psms_[0].instrument].grasp;
        const auto& g2 = world_.instruments[psms_[1].instrument].grasp;
        const bool handed = g1.phase != phys::GraspState::Phase::Free && g1.body == object_ &&
                            !(g2.phase != phys::GraspState::Phase::Free && g2.body == object_);
        VectorXd g(4);
        g << world_.body(object_).pose.translation, handed ? 1.0 : 0.0;
        return g;
    }
    case TaskId::PegTransfer:
    case TaskId::BiPegTransfer: return world_.body(object_).pose.translation;
    case TaskId::EcmReach: return camera_pose().translation;
    case TaskId::MisOrient: return VectorXd::Constant(1, theta_star());
    case TaskId::StaticTrack:
    case TaskId::ActiveTrack: {
        const ImagePoint img = target_image();
        const Vec2 uv = img.uv.cwiseMax(-1.0).cwiseMin(2.0);
        return Eigen::Vector3d(uv.x(), uv.y(), theta_star());
    }
    }
    return {};
}

Observation TaskEnv::observe() const {
    Observation o;
    std::vector<double> v;
    auto push = [&](const auto& x) {
        for (int i = 0; i < x.size(); ++i) v.push_back(x[i]);
    };
    auto push1 = [&](double x) { v.push_back(x); };
    const TaskId task = config_.task;
    if (!is_ecm_task(task)) {
        const bool pitch_arm = task == TaskId::NeedleRegrasp;
        for (int arm = 0; arm < psm_count(); ++arm) {
            const PsmState s = psm_state(arm);
            const auto& ins = world_.instruments[psms_[arm].instrument];
            push(s.tip);
            push1(pitch_arm ? s.pitch : s.yaw);
            push1(s.jaw_half_angle / ins.jaw.open_half_angle);
        }
        const auto& b = world_.body(object_);
        push(b.pose.translation);
        push1(body_yaw(b));
        const Vec3 tip0 = psm_state(0).tip;
        switch (task) {
        case TaskId::NeedleReach:
        case TaskId::GauzeRetrieve: push(Vec3(b.pose.translation - tip0)); break;
        case TaskId::NeedlePick:
        case TaskId::PegTransfer:
            push(Vec3(grasp_point(0) - tip0));
            push1(wrap_half_pi(grasp_angle(0) - psm_state(0).yaw));
            break;
        case TaskId::NeedleRegrasp:
            push(Vec3(grasp_point(0) - tip0));
            push(Vec3(grasp_point(1) - psm_state(1).tip));
            break;
        case TaskId::BiPegTransfer:
            for (int arm = 0; arm < 2; ++arm) push(Vec3(grasp_point(arm) - psm_state(arm).tip));
            for (int arm = 0; arm < 2; ++arm) push1(wrap_half_pi(grasp_angle(arm) - psm_state(arm).yaw));
            break;
        default: break;
        }
    } else {
        const auto& q = world_.instruments[ecm_].arm.current_q;
        switch (task) {
        case TaskId::EcmReach:
            push(camera_pose().translation);
            push(q);
            break;
        case TaskId::MisOrient:
            push(q);
            push1(theta_star());
            break;
        default: {
            push(q);
            const ImagePoint img = target_image();
            push(img.uv.cwiseMax(-1.0).cwiseMin(2.0));
            push1(theta_star());
            push(Vec3(camera_pose().inverse() * world_.body(target_).pose.translation));
            if (task == TaskId::ActiveTrack) push1(img.in_view ? 1.0 : 0.0);
        }
        }
    }
    o.observation = Eigen::Map<VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    o.achieved_goal = achieved_goal();
    o.desired_goal = goal_;
    return o;
}

double TaskEnv::compute_reward(const VectorXd& achieved, const VectorXd& desired) const {
    return env::compute_reward(config_.task, achieved, desired, config_);
}

bool TaskEnv::success_check() const {
    if (config_.task == TaskId::ActiveTrack) return target_image().in_view;
    return goal_reached(config_.task, achieved_goal(), goal_, config_);
}

// --- Episode logs ---------------------------------------------------------------------------

namespace {

nlohmann::json vec_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

} // namespace

EpisodeLog::EpisodeLog(const TaskEnv& env, std::uint64_t seed) {
    lines_.push_back({{"task", task_name(env.task())},
                      {"env_config_hash", env.config().hash()},
                      {"seed", seed},
                      {"grasp_mode", env.config().grasp_mode.label()}});
}

void EpisodeLog::record(const Observation& obs, const VectorXd& action, const StepResult& r) {
    lines_.push_back({{"t", static_cast<int>(lines_.size()) - 1},
                      {"obs", vec_json(obs.observation)},
                      {"achieved_goal", vec_json(obs.achieved_goal)},
                      {"desired_goal", vec_json(obs.desired_goal)},
                      {"action", vec_json(action)},
                      {"reward", r.reward},
                      {"next_obs", vec_json(r.obs.observation)},
                      {"next_achieved_goal", vec_json(r.obs.achieved_goal)},
                      {"done", r.done},
                      {"is_success", r.info.is_success}});
}

void EpisodeLog::write(const std::string& path, bool append) const {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open episode log '" + path + "'");
    for (const auto& line : lines_) out << line.dump() << '\n';
}

} // namespace surgsim::env
