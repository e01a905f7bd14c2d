#pragma once

// Minimal deterministic rigid-body world: gravity, analytic colliders,
// sequential-impulse contacts with Coulomb friction, kinematically driven
// instruments and two grasp models (proximity attachment and friction pinch).

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "surgsim/kinematics.hpp"

namespace surgsim::phys {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Pose = kin::Posed;
using BodyId = int;

struct MaterialParams {
    double friction_mu = 0.5;
    double restitution = 0.0;
    // Scales the Baumgarte position correction of contacts on this body.
    double contact_stiffness = 1.0;
};

/// Half-space {x : normal . x <= offset} in the body frame; only for static bodies.
struct PlaneShape {
    Vec3 normal = Vec3::UnitZ();
    double offset = 0.0;
};

struct BoxShape {
    Vec3 half_extents;
    Pose local;
};

/// Segment a-b (body frame) swept by a sphere of `radius`.
struct CapsuleShape {
    Vec3 a;
    Vec3 b;
    double radius;
};

/// Axis along local z, centered on `local`. Collides as the inscribed capsule
/// with flat ends rounded off.
struct CylinderShape {
    double radius;
    double height;
    Pose local;
};

using Shape = std::variant<PlaneShape, BoxShape, CapsuleShape, CylinderShape>;

/// A collider is a compound of analytic parts in the body frame.
struct Collider {
    std::vector<Shape> parts;

    static Collider plane(const Vec3& normal = Vec3::UnitZ(), double offset = 0.0);
    static Collider box(const Vec3& half_extents, const Pose& local = Pose());
    static Collider capsule(const Vec3& a, const Vec3& b, double radius);
    static Collider capsule_chain(const std::vector<Vec3>& points, double radius);
    static Collider cylinder(double radius, double height, const Pose& local = Pose());

    void validate() const;
};

struct RigidBody {
    std::string name;
    Pose pose;
    Vec3 linear_velocity = Vec3::Zero();
    Vec3 angular_velocity = Vec3::Zero();
    double mass = 0.0; // 0 => static
    Mat3 inertia = Mat3::Zero(); // body frame
    Collider collider;
    MaterialParams material;
    bool kinematic = false;
    // May be attached in proximity-grasp mode.
    bool graspable = false;

    bool is_dynamic() const { return mass > 0.0 && !kinematic; }
};

/// Box inertia about its center.
Mat3 box_inertia(double mass, const Vec3& half_extents);

struct ContactPoint {
    BodyId body_a = -1;
    BodyId body_b = -1;
    Vec3 point = Vec3::Zero();
    // Unit normal pointing from a to b.
    Vec3 normal = Vec3::UnitZ();
    // Penetration depth; negative values are separations inside the margin.
    double depth = 0.0;
};

struct GraspMode {
    enum class Kind { Approx, Interact };
    Kind kind = Kind::Interact;
    double threshold_m = 0.002;

    static GraspMode approx(double threshold_m) { return {Kind::Approx, threshold_m}; }
    static GraspMode interact() { return {Kind::Interact, 0.002}; }
    std::string label() const;
    static GraspMode parse(const std::string& text);
};

struct GraspState {
    enum class Phase { Free, Attached, PinchHold };
    Phase phase = Phase::Free;
    BodyId body = -1;
    // Body pose relative to the tool frame at grasp time.
    Pose grasp_frame;
    // Pad-body contact points (tool frame) that established the pinch.
    std::vector<Vec3> contact_pair;
    bool stabilized = false;
    int lifted_substeps = 0;
};

/// Two thin finger pads hinged at the tool frame, closing along tool x.
struct JawDescriptor {
    double pad_length = 0.006;
    double pad_thickness = 0.001;
    double pad_width = 0.002;
    double open_half_angle = 0.6;
    double rate = 20.0; // rad/s
    // Normal force each pad exerts while pinching.
    double pinch_force = 2.0;
    // Attachment reference point along tool z for proximity grasping.
    double tip_offset = 0.0045;
    MaterialParams pad_material{0.5, 0.0, 1.0};
};

struct Instrument {
    std::string name;
    kin::ArmModeld arm;
    kin::JointVector<double> target_q;
    kin::JointVector<double> qdot;
    bool has_jaw = false;
    JawDescriptor jaw;
    double jaw_half_angle = 0.0;
    double jaw_command = -1.0;
    BodyId pads[2] = {-1, -1};
    GraspState grasp;
    // Tool-origin velocities over the last control period; their difference
    // gives the averaged acceleration used by the quasi-static support check.
    std::vector<Vec3> velocity_history;
    Vec3 tool_velocity = Vec3::Zero();
    Vec3 tool_acceleration = Vec3::Zero();
    // Substep at which the current grasp was established.
    long grasp_time = -1;
};

struct ArmCommand {
    kin::JointVector<double> q_target;
    double jaw = -1.0;
};

struct WorldConfig {
    Vec3 gravity{0.0, 0.0, -9.81};
    double dt_sub = 0.002;
    int substeps_per_control = 5;
    int solver_iterations = 10;
    double baumgarte = 0.2;
    double penetration_slop = 5e-5;
    double speculative_margin = 0.001;
    double restitution_threshold = 1e-3;
    // Natural frequency of the critically damped joint tracking.
    double tracking_omega = 1000.0;
    // Lift needed before a grasp counts as stabilized, and for how long.
    double lift_threshold = 0.005;
    int stabilize_substeps = 20;
    // Height of the support surface used by the lift check.
    double support_z = 0.0;
    // Separation below which a pad counts as touching for pinch detection.
    double pinch_contact_margin = 2e-4;
};

struct SolverStats {
    int contacts = 0;
    // Largest |f_t| - mu f_n seen after any iteration.
    double max_cone_violation = 0.0;
    double min_normal_impulse = 0.0;
};

class World {
public:
    WorldConfig config;
    GraspMode grasp_mode;
    std::vector<RigidBody> bodies;
    std::vector<Instrument> instruments;
    bool valid = true;
    long substep_count = 0;
    SolverStats last_stats;

    BodyId add_body(RigidBody body);
    RigidBody& body(BodyId id) { return bodies.at(static_cast<size_t>(id)); }
    const RigidBody& body(BodyId id) const { return bodies.at(static_cast<size_t>(id)); }
    BodyId find(const std::string& name) const;

    /// Adds an arm; PSMs get two kinematic jaw pads. Returns instrument index.
    int add_instrument(const std::string& name, const kin::ArmModeld& arm, bool with_jaw,
                       const JawDescriptor& jaw = {});

    /// Body is being carried by an instrument.
    bool is_held(BodyId id) const;
    /// Treat as immovable by impulses this substep.
    bool acts_kinematic(BodyId id) const;
    Pose tool_pose(int instrument) const;
    Vec3 jaw_tip(int instrument) const;
    double total_energy() const;
};

// --- Narrowphase -----------------------------------------------------------

/// Contacts between two world-placed shapes; normals point from a to b.
/// Throws ContractViolation for unsupported pairs (plane-plane).
std::vector<ContactPoint> collide_shapes(const Shape& a, const Pose& pose_a, const Shape& b, const Pose& pose_b,
                                         double margin);

/// Signed distance from a world point to a body's collider surface.
double distance_to_body(const RigidBody& body, const Vec3& point);

/// Lowest world z of a body's collider.
double lowest_point(const RigidBody& body);

// --- Stepping --------------------------------------------------------------

/// Penetrating or touching contacts between pairs with at least one dynamic
/// body. `margin` > 0 also returns near-contacts with negative depth.
std::vector<ContactPoint> detect_contacts(const World& world, double margin = 0.0);

/// One sequential-impulse velocity solve over `contacts` for the current substep.
SolverStats solve_impulses(World& world, const std::vector<ContactPoint>& contacts);

/// Advance instruments, grasps and bodies by one substep.
void step_substep(World& world);

/// Apply arm targets and run substeps_per_control substeps.
/// Throws SimulationDiverged if any body state becomes non-finite.
void step_control(World& world, const std::vector<ArmCommand>& commands);

/// Grasp transition logic for one instrument for the current substep.
GraspState update_grasp(World& world, int instrument);

/// Lift-stabilization status of a grasp.
bool check_stabilized(const World& world, const GraspState& grasp, double height_threshold);

/// Whether the pad pinch can support `body` given the instrument's motion.
bool pinch_supports(const World& world, int instrument, BodyId body);

/// Teleports an instrument to joint state `q` at rest with the given jaw
/// half-angle; pads follow. Releases any grasp it holds.
void reset_instrument(World& world, int instrument, const kin::JointVector<double>& q, double jaw_half_angle);

/// Establishes a grasp of `body` at the current relative pose without
/// simulating the approach: Attached in Approx mode, PinchHold in Interact.
/// The jaw command is set to closing.
void force_grasp(World& world, int instrument, BodyId body);

// --- Snapshots -------------------------------------------------------------

constexpr int kSnapshotVersion = 1;
nlohmann::json snapshot(const World& world);
/// Restores body and instrument state from a snapshot of a world with the
/// same layout.
void restore(World& world, const nlohmann::json& snap);

} // namespace surgsim::phys
