#pragma once

// Procedural task objects built from analytic primitives, and seeded scene
// spawning with rejection-sampled placements.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "surgsim/physics.hpp"

namespace surgsim::assets {

using phys::Pose;
using phys::Vec3;

enum class ObjectKind { Needle, GauzePad, Block, PegBoard, Tray, Cube };

std::string kind_name(ObjectKind kind);
ObjectKind parse_kind(const std::string& name);

struct NeedleGeometry {
    double arc_length = 0.040;
    double wire_radius = 0.0005;
    double mass = 0.0002;
    int segments = 8;

    double radius() const;
    /// Body-frame point at arc parameter phi in [0, pi]; phi = 0 is the tip.
    Vec3 arc_point(double phi) const;
    /// Unit tangent at phi (direction of increasing phi).
    Vec3 arc_tangent(double phi) const;
};

// Body frame: origin at the arc centroid, arc in the local xy plane, the
// circle center on local -y.
phys::RigidBody build_needle(const NeedleGeometry& g = {});
/// Grasp point a quarter of the arc back from the tip.
constexpr double kNeedleGraspPhi = 3.14159265358979323846 / 4.0;

struct BlockGeometry {
    double outer_half = 0.005;
    double hole_half = 0.0025;
    double height = 0.008;
    double mass = 0.001;
};

/// Square frame of four walls around a through-hole. Origin at the center of
/// the hole, z up.
phys::RigidBody build_block(const BlockGeometry& g = {});
/// Grasp point on top of the +x wall, block frame.
Vec3 block_grasp_point(const BlockGeometry& g);

struct PegBoardGeometry {
    int rows = 2;
    int cols = 3;
    double peg_radius = 0.0015;
    double peg_height = 0.008;
    double spacing = 0.025;
    Vec3 base_half_extents{0.05, 0.05, 0.005};
};

/// Static base box (top face at z = 0 of `origin`) plus rows x cols pegs.
/// Pegs are named "peg_<r>_<c>" in row-major order.
std::vector<phys::RigidBody> build_pegboard(const PegBoardGeometry& g, const Pose& origin = Pose());
/// Peg axis positions (top-of-base height), row-major.
std::vector<Vec3> peg_positions(const PegBoardGeometry& g, const Pose& origin = Pose());

phys::RigidBody build_tray(const Vec3& half_extents = Vec3(0.07, 0.07, 0.005));
phys::RigidBody build_gauze(const Vec3& half_extents = Vec3(0.0015, 0.0015, 0.00075), double mass = 0.0002);
phys::RigidBody build_cube(double half = 0.0025, double mass = 0.0005);

/// Axis-aligned region, meters.
struct Region {
    Vec3 lo = Vec3::Zero();
    Vec3 hi = Vec3::Zero();

    bool contains(const Vec3& p, double tol = 0.0) const;
    Vec3 center() const { return 0.5 * (lo + hi); }
};

struct Placement {
    enum class Rule { Fixed, OnSurface };
    Rule rule = Rule::Fixed;
    Pose pose;                // Fixed
    Region region;            // OnSurface: xy sampling range; z ignored
    double surface_z = 0.0;   // OnSurface: resting height of the lowest point
    double yaw_lo = 0.0, yaw_hi = 0.0;
};

struct ObjectSpec {
    ObjectKind kind = ObjectKind::Cube;
    std::string name;
    // Kind-specific dimensions in meters (see object_defaults()).
    std::map<std::string, double> dims;
    phys::MaterialParams material;
    bool graspable = false;
    Placement placement;
};

/// Dimension keys and default values for each kind.
std::map<std::string, double> object_defaults(ObjectKind kind);

struct SceneSpec {
    std::vector<ObjectSpec> objects;
    Region workspace;
    unsigned long long rng_seed = 0;
    phys::Vec3 gravity{0, 0, -9.81};
};

struct Scene {
    phys::World world;
    // Object name -> body ids (a pegboard yields several bodies).
    std::map<std::string, std::vector<phys::BodyId>> ids;

    phys::BodyId id(const std::string& name) const;
};

/// Rejection-sampling attempts per randomly placed object.
constexpr int kMaxPlacementAttempts = 100;

/// Builds all bodies, sampling OnSurface placements with a seeded generator.
/// Throws PlacementInfeasible when a placement fails kMaxPlacementAttempts times.
Scene spawn_scene(const SceneSpec& spec);

/// Bodies from one object spec, placed at the identity pose.
std::vector<phys::RigidBody> build_object(const ObjectSpec& spec);

nlohmann::json scene_to_json(const SceneSpec& spec);
SceneSpec scene_from_json(const nlohmann::json& doc);

} // namespace surgsim::assets
