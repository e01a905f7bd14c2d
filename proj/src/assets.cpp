#include <cmath>
#include <random>

#include "surgsim/assets.hpp"
#include "surgsim/errors.hpp"
#include "surgsim/kinematics_io.hpp"

namespace surgsim::assets {

namespace {

constexpr double kPi = 3.14159265358979323846;

const std::map<ObjectKind, std::string>& kind_names() {
    static const std::map<ObjectKind, std::string> names = {
        {ObjectKind::Needle, "needle"}, {ObjectKind::GauzePad, "gauze"}, {ObjectKind::Block, "block"},
        {ObjectKind::PegBoard, "pegboard"}, {ObjectKind::Tray, "tray"}, {ObjectKind::Cube, "cube"}};
    return names;
}

phys::RigidBody static_box(const std::string& name, const Vec3& half, const Vec3& center) {
    phys::RigidBody b;
    b.name = name;
    b.collider = phys::Collider::box(half);
    b.pose = Pose::from_translation(center);
    return b;
}

double dim(const std::map<std::string, double>& dims, const std::string& key) {
    const auto it = dims.find(key);
    if (it == dims.end()) throw ContractViolation("object spec is missing dimension '" + key + "'");
    if (!(it->second > 0)) throw ContractViolation("object dimension '" + key + "' must be > 0");
    return it->second;
}

} // namespace

std::string kind_name(ObjectKind kind) { return kind_names().at(kind); }

ObjectKind parse_kind(const std::string& name) {
    for (const auto& [k, v] : kind_names())
        if (v == name) return k;
    throw ContractViolation("unknown object kind '" + name + "'");
}

// --- Needle ------------------------------------------------------------------

double NeedleGeometry::radius() const { return arc_length / kPi; }

Vec3 NeedleGeometry::arc_point(double phi) const {
    const double r = radius();
    return Vec3(r * std::cos(phi), r * std::sin(phi) - 2.0 * r / kPi, 0.0);
}

Vec3 NeedleGeometry::arc_tangent(double phi) const { return Vec3(-std::sin(phi), std::cos(phi), 0.0); }

phys::RigidBody build_needle(const NeedleGeometry& g) {
    if (!(g.arc_length > 0) || !(g.wire_radius > 0) || !(g.mass > 0) || g.segments < 1)
        throw ContractViolation("needle dimensions must be > 0");
    std::vector<Vec3> points;
    for (int i = 0; i <= g.segments; ++i) points.push_back(g.arc_point(kPi * i / g.segments));

    // Thin-wire inertia from a fine point-mass discretization of the arc.
    const int n = 256;
    phys::Mat3 inertia = phys::Mat3::Zero();
    for (int i = 0; i < n; ++i) {
        const Vec3 p = g.arc_point(kPi * (i + 0.5) / n);
        inertia += (g.mass / n) * (p.squaredNorm() * phys::Mat3::Identity() - p * p.transpose());
    }
    // The wire's own thickness keeps the tensor positive definite.
    inertia += phys::Mat3::Identity() * 0.5 * g.mass * g.wire_radius * g.wire_radius;

    phys::RigidBody b;
    b.name = "needle";
    b.mass = g.mass;
    b.inertia = inertia;
    b.collider = phys::Collider::capsule_chain(points, g.wire_radius);
    b.material.friction_mu = 0.5;
    b.graspable = true;
    return b;
}

// --- Block and pegboard --------------------------------------------------------

phys::RigidBody build_block(const BlockGeometry& g) {
    if (!(g.hole_half > 0) || !(g.outer_half > g.hole_half) || !(g.height > 0) || !(g.mass > 0))
        throw ContractViolation("block needs 0 < hole_half < outer_half and positive height and mass");
    const double wall = 0.5 * (g.outer_half - g.hole_half);
    const double mid = g.hole_half + wall;
    const double hz = 0.5 * g.height;
    phys::RigidBody b;
    b.name = "block";
    b.mass = g.mass;
    b.inertia = phys::box_inertia(g.mass, Vec3(g.outer_half, g.outer_half, hz));
    b.collider.parts = {
        phys::BoxShape{Vec3(wall, g.outer_half, hz), Pose::from_translation(Vec3(mid, 0, 0))},
        phys::BoxShape{Vec3(wall, g.outer_half, hz), Pose::from_translation(Vec3(-mid, 0, 0))},
        phys::BoxShape{Vec3(g.hole_half, wall, hz), Pose::from_translation(Vec3(0, mid, 0))},
        phys::BoxShape{Vec3(g.hole_half, wall, hz), Pose::from_translation(Vec3(0, -mid, 0))},
    };
    b.graspable = true;
    return b;
}

Vec3 block_grasp_point(const BlockGeometry& g) {
    return Vec3(0.5 * (g.outer_half + g.hole_half), 0.0, 0.5 * g.height);
}

std::vector<Vec3> peg_positions(const PegBoardGeometry& g, const Pose& origin) {
    std::vector<Vec3> out;
    for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c)
            out.push_back(origin * Vec3((c - 0.5 * (g.cols - 1)) * g.spacing, (r - 0.5 * (g.rows - 1)) * g.spacing, 0));
    return out;
}

std::vector<phys::RigidBody> build_pegboard(const PegBoardGeometry& g, const Pose& origin) {
    if (g.rows < 1 || g.cols < 1 || !(g.peg_radius > 0) || !(g.peg_height > 2 * g.peg_radius) || !(g.spacing > 0) ||
        (g.base_half_extents.array() <= 0).any())
        throw ContractViolation("pegboard dimensions must be > 0 and pegs taller than wide");
    std::vector<phys::RigidBody> out;
    auto base = static_box("pegboard_base", g.base_half_extents, Vec3(0, 0, -g.base_half_extents.z()));
    base.pose = origin * base.pose;
    out.push_back(base);
    const auto pegs = peg_positions(g, origin);
    for (size_t i = 0; i < pegs.size(); ++i) {
        phys::RigidBody peg;
        peg.name = "peg_" + std::to_string(i / g.cols) + "_" + std::to_string(i % g.cols);
        peg.collider = phys::Collider::cylinder(g.peg_radius, g.peg_height);
        peg.pose = Pose(origin.rotation, pegs[i] + origin.rotation * Vec3(0, 0, 0.5 * g.peg_height));
        out.push_back(peg);
    }
    return out;
}

phys::RigidBody build_tray(const Vec3& h) {
    if ((h.array() <= 0).any()) throw ContractViolation("tray dimensions must be > 0");
    auto tray = static_box("tray", h, Vec3(0, 0, -h.z()));
    tray.material.friction_mu = 0.5;
    return tray;
}

phys::RigidBody build_gauze(const Vec3& h, double mass) {
    if ((h.array() <= 0).any() || !(mass > 0)) throw ContractViolation("gauze dimensions must be > 0");
    phys::RigidBody b;
    b.name = "gauze";
    b.mass = mass;
    b.inertia = phys::box_inertia(mass, h);
    b.collider = phys::Collider::box(h);
    b.material.friction_mu = 0.2;
    b.graspable = true;
    return b;
}

phys::RigidBody build_cube(double half, double mass) {
    if (!(half > 0) || !(mass > 0)) throw ContractViolation("cube dimensions must be > 0");
    phys::RigidBody b;
    b.name = "cube";
    b.mass = mass;
    b.inertia = phys::box_inertia(mass, Vec3::Constant(half));
    b.collider = phys::Collider::box(Vec3::Constant(half));
    return b;
}

// --- Specs -------------------------------------------------------------------

bool Region::contains(const Vec3& p, double tol) const {
    return (p.array() >= lo.array() - tol).all() && (p.array() <= hi.array() + tol).all();
}

std::map<std::string, double> object_defaults(ObjectKind kind) {
    switch (kind) {
    case ObjectKind::Needle: {
        NeedleGeometry g;
        return {{"arc_length", g.arc_length}, {"wire_radius", g.wire_radius}, {"mass", g.mass}};
    }
    case ObjectKind::GauzePad:
        return {{"half_x", 0.0015}, {"half_y", 0.0015}, {"half_z", 0.00075}, {"mass", 0.0002}};
    case ObjectKind::Block: {
        BlockGeometry g;
        return {{"outer_half", g.outer_half}, {"hole_half", g.hole_half}, {"height", g.height}, {"mass", g.mass}};
    }
    case ObjectKind::PegBoard: {
        PegBoardGeometry g;
        return {{"rows", double(g.rows)},   {"cols", double(g.cols)},          {"peg_radius", g.peg_radius},
                {"peg_height", g.peg_height}, {"spacing", g.spacing}, {"base_half_x", g.base_half_extents.x()},
                {"base_half_y", g.base_half_extents.y()}, {"base_half_z", g.base_half_extents.z()}};
    }
    case ObjectKind::Tray:
        return {{"half_x", 0.07}, {"half_y", 0.07}, {"half_z", 0.005}};
    case ObjectKind::Cube:
        return {{"half", 0.0025}, {"mass", 0.0005}};
    }
    return {};
}

std::vector<phys::RigidBody> build_object(const ObjectSpec& spec) {
    auto dims = object_defaults(spec.kind);
    for (const auto& [k, v] : spec.dims) {
        if (!dims.count(k)) throw ContractViolation("unknown dimension '" + k + "' for " + kind_name(spec.kind));
        dims[k] = v;
    }
    std::vector<phys::RigidBody> out;
    switch (spec.kind) {
    case ObjectKind::Needle: {
        NeedleGeometry g;
        g.arc_length = dim(dims, "arc_length");
        g.wire_radius = dim(dims, "wire_radius");
        g.mass = dim(dims, "mass");
        out.push_back(build_needle(g));
        break;
    }
    case ObjectKind::GauzePad:
        out.push_back(build_gauze(Vec3(dim(dims, "half_x"), dim(dims, "half_y"), dim(dims, "half_z")), dim(dims, "mass")));
        break;
    case ObjectKind::Block:
        out.push_back(build_block({dim(dims, "outer_half"), dim(dims, "hole_half"), dim(dims, "height"), dim(dims, "mass")}));
        break;
    case ObjectKind::PegBoard: {
        PegBoardGeometry g;
        g.rows = static_cast<int>(dim(dims, "rows"));
        g.cols = static_cast<int>(dim(dims, "cols"));
        g.peg_radius = dim(dims, "peg_radius");
        g.peg_height = dim(dims, "peg_height");
        g.spacing = dim(dims, "spacing");
        g.base_half_extents = Vec3(dim(dims, "base_half_x"), dim(dims, "base_half_y"), dim(dims, "base_half_z"));
        out = build_pegboard(g);
        break;
    }
    case ObjectKind::Tray:
        out.push_back(build_tray(Vec3(dim(dims, "half_x"), dim(dims, "half_y"), dim(dims, "half_z"))));
        break;
    case ObjectKind::Cube:
        out.push_back(build_cube(dim(dims, "half"), dim(dims, "mass")));
        break;
    }
    const bool single = out.size() == 1;
    for (auto& b : out) {
        if (single && !spec.name.empty()) b.name = spec.name;
        else if (!spec.name.empty()) b.name = spec.name + "/" + b.name;
        if (b.mass > 0) {
            b.material.friction_mu = spec.material.friction_mu;
            b.material.restitution = spec.material.restitution;
            b.material.contact_stiffness = spec.material.contact_stiffness;
            b.graspable = spec.graspable;
        }
    }
    return out;
}

phys::BodyId Scene::id(const std::string& name) const {
    const auto it = ids.find(name);
    if (it == ids.end() || it->second.empty()) throw ContractViolation("scene has no object '" + name + "'");
    return it->second.front();
}

namespace {

// Bodies resting on the support may touch it; only count penetration into
// anything other than the surface they were dropped onto.
bool overlaps_ignoring_touch(const phys::World& w, phys::BodyId id) {
    const auto& b = w.body(id);
    for (size_t j = 0; j < w.bodies.size(); ++j) {
        if (static_cast<phys::BodyId>(j) == id) continue;
        const auto& o = w.bodies[j];
        for (const auto& pa : b.collider.parts)
            for (const auto& pb : o.collider.parts)
                for (const auto& c : phys::collide_shapes(pa, b.pose, pb, o.pose, 1e-4)) {
                    const bool support_contact = std::abs(c.normal.z()) > 0.999 && c.depth < 1e-9;
                    if (!support_contact) return true;
                }
    }
    return false;
}

bool footprint_inside(const phys::RigidBody& b, const Region& r) {
    // Sample the collider extent along world x/y through the support function
    // of each part's corners.
    for (const auto& part : b.collider.parts) {
        bool inside = true;
        std::visit(
            [&](const auto& s) {
                using T = std::decay_t<decltype(s)>;
                auto check = [&](const Vec3& p, double pad) {
                    if (p.x() - pad < r.lo.x() || p.x() + pad > r.hi.x() || p.y() - pad < r.lo.y() ||
                        p.y() + pad > r.hi.y())
                        inside = false;
                };
                if constexpr (std::is_same_v<T, phys::BoxShape>) {
                    for (int k = 0; k < 8; ++k) {
                        const Vec3 corner((k & 1 ? 1 : -1) * s.half_extents.x(), (k & 2 ? 1 : -1) * s.half_extents.y(),
                                          (k & 4 ? 1 : -1) * s.half_extents.z());
                        check(b.pose * (s.local * corner), 0.0);
                    }
                } else if constexpr (std::is_same_v<T, phys::CapsuleShape>) {
                    check(b.pose * s.a, s.radius);
                    check(b.pose * s.b, s.radius);
                } else if constexpr (std::is_same_v<T, phys::CylinderShape>) {
                    check(b.pose * s.local.translation, s.radius);
                }
            },
            part);
        if (!inside) return false;
    }
    return true;
}

} // namespace

Scene spawn_scene(const SceneSpec& spec) {
    Scene scene;
    scene.world.config.gravity = spec.gravity;
    std::mt19937_64 rng(spec.rng_seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (const auto& obj : spec.objects) {
        auto bodies = build_object(obj);
        auto& ids = scene.ids[obj.name.empty() ? kind_name(obj.kind) : obj.name];
        if (obj.placement.rule == Placement::Rule::Fixed) {
            for (auto& b : bodies) {
                b.pose = obj.placement.pose * b.pose;
                ids.push_back(scene.world.add_body(b));
            }
            continue;
        }
        if (bodies.size() != 1) throw ContractViolation("only single-body objects can be placed on a surface");
        const Region& region = obj.placement.region;
        if (!(region.hi.x() > region.lo.x()) || !(region.hi.y() > region.lo.y()))
            throw PlacementInfeasible("placement region for '" + bodies[0].name + "' has zero area");
        const phys::BodyId id = scene.world.add_body(bodies[0]);
        auto& body = scene.world.body(id);
        bool placed = false;
        for (int attempt = 0; attempt < kMaxPlacementAttempts && !placed; ++attempt) {
            const double x = region.lo.x() + unit(rng) * (region.hi.x() - region.lo.x());
            const double y = region.lo.y() + unit(rng) * (region.hi.y() - region.lo.y());
            const double yaw = obj.placement.yaw_lo + unit(rng) * (obj.placement.yaw_hi - obj.placement.yaw_lo);
            body.pose = Pose(kin::rot_z<double>(yaw), Vec3(x, y, 0));
            body.pose.translation.z() += obj.placement.surface_z - phys::lowest_point(body);
            placed = footprint_inside(body, spec.workspace) && footprint_inside(body, region) &&
                     !overlaps_ignoring_touch(scene.world, id);
        }
        if (!placed)
            throw PlacementInfeasible("could not place '" + body.name + "' after " +
                                      std::to_string(kMaxPlacementAttempts) + " attempts");
        ids.push_back(id);
    }
    return scene;
}

// --- JSON --------------------------------------------------------------------

namespace {

nlohmann::json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

Vec3 json_vec(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 3) throw ContractViolation("expected a 3-vector");
    return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

} // namespace

nlohmann::json scene_to_json(const SceneSpec& spec) {
    nlohmann::json objects = nlohmann::json::array();
    for (const auto& o : spec.objects) {
        nlohmann::json p;
        if (o.placement.rule == Placement::Rule::Fixed) {
            p = {{"rule", "fixed"}, {"pose", kin::pose_to_json(o.placement.pose)}};
        } else {
            p = {{"rule", "on_surface"},
                 {"region", {{"lo", vec_json(o.placement.region.lo)}, {"hi", vec_json(o.placement.region.hi)}}},
                 {"surface_z", o.placement.surface_z},
                 {"yaw", {o.placement.yaw_lo, o.placement.yaw_hi}}};
        }
        objects.push_back({{"kind", kind_name(o.kind)},
                           {"name", o.name},
                           {"dims", o.dims},
                           {"material",
                            {{"friction_mu", o.material.friction_mu},
                             {"restitution", o.material.restitution},
                             {"contact_stiffness", o.material.contact_stiffness}}},
                           {"graspable", o.graspable},
                           {"placement", p}});
    }
    return {{"objects", objects},
            {"workspace", {{"lo", vec_json(spec.workspace.lo)}, {"hi", vec_json(spec.workspace.hi)}}},
            {"rng_seed", spec.rng_seed},
            {"gravity", vec_json(spec.gravity)}};
}

SceneSpec scene_from_json(const nlohmann::json& doc) {
    try {
        SceneSpec spec;
        spec.workspace.lo = json_vec(doc.at("workspace").at("lo"));
        spec.workspace.hi = json_vec(doc.at("workspace").at("hi"));
        spec.rng_seed = doc.value("rng_seed", 0ULL);
        if (doc.contains("gravity")) spec.gravity = json_vec(doc.at("gravity"));
        for (const auto& o : doc.at("objects")) {
            ObjectSpec obj;
            obj.kind = parse_kind(o.at("kind").get<std::string>());
            obj.name = o.value("name", "");
            obj.dims = o.value("dims", std::map<std::string, double>{});
            if (o.contains("material")) {
                const auto& m = o.at("material");
                obj.material.friction_mu = m.value("friction_mu", 0.5);
                obj.material.restitution = m.value("restitution", 0.0);
                obj.material.contact_stiffness = m.value("contact_stiffness", 1.0);
                if (obj.material.friction_mu < 0 || obj.material.restitution < 0 || obj.material.restitution > 1)
                    throw ContractViolation("material out of range");
            }
            obj.graspable = o.value("graspable", false);
            const auto& p = o.at("placement");
            const auto rule = p.at("rule").get<std::string>();
            if (rule == "fixed") {
                obj.placement.rule = Placement::Rule::Fixed;
                obj.placement.pose = kin::pose_from_json(p.at("pose"));
            } else if (rule == "on_surface") {
                obj.placement.rule = Placement::Rule::OnSurface;
                obj.placement.region.lo = json_vec(p.at("region").at("lo"));
                obj.placement.region.hi = json_vec(p.at("region").at("hi"));
                obj.placement.surface_z = p.value("surface_z", 0.0);
                const auto yaw = p.value("yaw", std::vector<double>{0.0, 0.0});
                if (yaw.size() != 2) throw ContractViolation("yaw range needs two values");
                obj.placement.yaw_lo = yaw[0];
                obj.placement.yaw_hi = yaw[1];
            } else {
                throw ContractViolation("unknown placement rule '" + rule + "'");
            }
            spec.objects.push_back(obj);
        }
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw ContractViolation(std::string("malformed scene spec: ") + e.what());
    }
}

} // namespace surgsim::assets
