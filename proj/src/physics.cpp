#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "surgsim/errors.hpp"
#include "surgsim/kinematics_io.hpp"

#include "surgsim/physics.hpp"

namespace surgsim::phys {

// --- Colliders ---------------------------------------------------------------

Collider Collider::plane(const Vec3& normal, double offset) { return {{PlaneShape{normal.normalized(), offset}}}; }

Collider Collider::box(const Vec3& half_extents, const Pose& local) { return {{BoxShape{half_extents, local}}}; }

Collider Collider::capsule(const Vec3& a, const Vec3& b, double radius) { return {{CapsuleShape{a, b, radius}}}; }

Collider Collider::capsule_chain(const std::vector<Vec3>& points, double radius) {
    Collider c;
    for (size_t i = 0; i + 1 < points.size(); ++i) c.parts.push_back(CapsuleShape{points[i], points[i + 1], radius});
    return c;
}

Collider Collider::cylinder(double radius, double height, const Pose& local) {
    return {{CylinderShape{radius, height, local}}};
}

void Collider::validate() const {
    if (parts.empty()) throw ContractViolation("collider has no parts");
    for (const auto& p : parts) {
        std::visit(
            [](const auto& s) {
                using T = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<T, BoxShape>) {
                    if ((s.half_extents.array() <= 0).any()) throw ContractViolation("box half extents must be > 0");
                } else if constexpr (std::is_same_v<T, CapsuleShape>) {
                    if (s.radius <= 0) throw ContractViolation("capsule radius must be > 0");
                } else if constexpr (std::is_same_v<T, CylinderShape>) {
                    if (s.radius <= 0 || s.height <= 0) throw ContractViolation("cylinder dimensions must be > 0");
                }
            },
            p);
    }
}

Mat3 box_inertia(double mass, const Vec3& h) {
    const Vec3 s = 2.0 * h;
    return (mass / 12.0 *
            Vec3(s.y() * s.y() + s.z() * s.z(), s.x() * s.x() + s.z() * s.z(), s.x() * s.x() + s.y() * s.y()))
        .asDiagonal();
}

std::string GraspMode::label() const {
    if (kind == Kind::Interact) return "interact";
    char buf[32];
    std::snprintf(buf, sizeof buf, "approx:%g", threshold_m * 1000.0);
    return buf;
}

GraspMode GraspMode::parse(const std::string& text) {
    if (text == "interact") return interact();
    const std::string prefix = "approx:";
    if (text.rfind(prefix, 0) == 0) {
        std::string mm = text.substr(prefix.size());
        if (mm.size() > 2 && mm.substr(mm.size() - 2) == "mm") mm.resize(mm.size() - 2);
        try {
            size_t used = 0;
            const double v = std::stod(mm, &used);
            if (used == mm.size() && v > 0) return approx(v / 1000.0);
        } catch (const std::exception&) {
        }
    }
    throw ContractViolation("grasp mode must be 'interact' or 'approx:<mm>', got '" + text + "'");
}

// --- World -------------------------------------------------------------------

BodyId World::add_body(RigidBody body) {
    if (body.mass < 0) throw ContractViolation("body mass must be >= 0");
    if (body.mass > 0 && !body.kinematic) {
        Eigen::SelfAdjointEigenSolver<Mat3> es(body.inertia);
        if (es.eigenvalues().minCoeff() <= 0) throw ContractViolation("inertia must be positive definite");
    }
    body.collider.validate();
    bodies.push_back(std::move(body));
    return static_cast<BodyId>(bodies.size() - 1);
}

BodyId World::find(const std::string& name) const {
    for (size_t i = 0; i < bodies.size(); ++i)
        if (bodies[i].name == name) return static_cast<BodyId>(i);
    return -1;
}

namespace {

Pose pad_local_pose(const JawDescriptor& jaw, double half_angle, int side) {
    const double s = side == 0 ? 1.0 : -1.0;
    const Vec3 dir(s * std::sin(half_angle), 0.0, std::cos(half_angle));
    const Vec3 outward(s * std::cos(half_angle), 0.0, -std::sin(half_angle));
    Mat3 r;
    r.col(0) = outward;
    r.col(2) = dir;
    r.col(1) = r.col(2).cross(r.col(0));
    return Pose(r, dir * (0.5 * jaw.pad_length) + outward * (0.5 * jaw.pad_thickness));
}

void set_kinematic_pose(RigidBody& b, const Pose& next, double dt) {
    b.linear_velocity = (next.translation - b.pose.translation) / dt;
    b.angular_velocity = kin::log_so3<double>(next.rotation * b.pose.rotation.transpose()) / dt;
    b.pose = next;
}

Mat3 world_inverse_inertia(const RigidBody& b) {
    return b.pose.rotation * b.inertia.inverse() * b.pose.rotation.transpose();
}

void orthonormalize(Mat3& r) {
    Eigen::Quaterniond q(r);
    q.normalize();
    r = q.toRotationMatrix();
}

} // namespace

int World::add_instrument(const std::string& name, const kin::ArmModeld& arm, bool with_jaw,
                          const JawDescriptor& jaw) {
    arm.chain.validate();
    Instrument ins;
    ins.name = name;
    ins.arm = arm;
    ins.arm.current_q = kin::clamp_joints(arm.chain, arm.current_q);
    ins.target_q = ins.arm.current_q;
    ins.qdot = Eigen::VectorXd::Zero(arm.chain.dof());
    ins.has_jaw = with_jaw;
    ins.jaw = jaw;
    const int index = static_cast<int>(instruments.size());
    if (with_jaw) {
        const Pose tool = ins.arm.world_tool_pose();
        for (int side = 0; side < 2; ++side) {
            RigidBody pad;
            pad.name = name + (side == 0 ? "/pad_a" : "/pad_b");
            pad.kinematic = true;
            pad.collider = Collider::box(Vec3(0.5 * jaw.pad_thickness, 0.5 * jaw.pad_width, 0.5 * jaw.pad_length));
            pad.material = jaw.pad_material;
            pad.pose = tool * pad_local_pose(jaw, ins.jaw_half_angle, side);
            ins.pads[side] = add_body(pad);
        }
    }
    instruments.push_back(std::move(ins));
    return index;
}

bool World::is_held(BodyId id) const {
    for (const auto& ins : instruments)
        if (ins.grasp.phase != GraspState::Phase::Free && ins.grasp.body == id) return true;
    return false;
}

bool World::acts_kinematic(BodyId id) const {
    const auto& b = body(id);
    return !b.is_dynamic() || is_held(id);
}

Pose World::tool_pose(int instrument) const { return instruments.at(instrument).arm.world_tool_pose(); }

Vec3 World::jaw_tip(int instrument) const {
    const auto& ins = instruments.at(instrument);
    return tool_pose(instrument) * Vec3(0, 0, ins.jaw.tip_offset);
}

double World::total_energy() const {
    double e = 0;
    for (const auto& b : bodies) {
        if (!b.is_dynamic()) continue;
        const Mat3 iw = b.pose.rotation * b.inertia * b.pose.rotation.transpose();
        e += 0.5 * b.mass * b.linear_velocity.squaredNorm() + 0.5 * b.angular_velocity.dot(iw * b.angular_velocity) -
             b.mass * config.gravity.dot(b.pose.translation);
    }
    return e;
}

// --- Contacts ----------------------------------------------------------------

namespace {

double bounding_radius(const RigidBody& b) {
    double r = 0;
    for (const auto& part : b.collider.parts) {
        std::visit(
            [&](const auto& s) {
                using T = std::decay_t<decltype(s)>;
                if constexpr (std::is_same_v<T, PlaneShape>) {
                    r = std::numeric_limits<double>::infinity();
                } else if constexpr (std::is_same_v<T, BoxShape>) {
                    r = std::max(r, s.local.translation.norm() + s.half_extents.norm());
                } else if constexpr (std::is_same_v<T, CapsuleShape>) {
                    r = std::max(r, std::max(s.a.norm(), s.b.norm()) + s.radius);
                } else {
                    r = std::max(r, s.local.translation.norm() + std::hypot(s.radius, 0.5 * s.height));
                }
            },
            part);
    }
    return r;
}

// Pads never push the body their own instrument is carrying.
bool pair_excluded(const World& w, BodyId a, BodyId b) {
    for (const auto& ins : w.instruments) {
        if (!ins.has_jaw || ins.grasp.phase == GraspState::Phase::Free) continue;
        const BodyId held = ins.grasp.body;
        for (BodyId pad : ins.pads)
            if ((a == pad && b == held) || (b == pad && a == held)) return true;
    }
    return false;
}

void append_pair(const World& w, BodyId i, BodyId j, double margin, std::vector<ContactPoint>& out) {
    const auto& a = w.bodies[i];
    const auto& b = w.bodies[j];
    for (const auto& pa : a.collider.parts) {
        for (const auto& pb : b.collider.parts) {
            auto cs = collide_shapes(pa, a.pose, pb, b.pose, margin);
            for (auto& c : cs) {
                c.body_a = i;
                c.body_b = j;
                out.push_back(c);
            }
        }
    }
}

} // namespace

std::vector<ContactPoint> detect_contacts(const World& world, double margin) {
    const int n = static_cast<int>(world.bodies.size());
    std::vector<double> radius(n);
    std::vector<char> kin(n);
    for (int i = 0; i < n; ++i) {
        radius[i] = bounding_radius(world.bodies[i]);
        kin[i] = world.acts_kinematic(i);
    }
    std::vector<ContactPoint> out;
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            if (kin[i] && kin[j]) continue;
            const double reach = radius[i] + radius[j] + margin;
            if (std::isfinite(reach) &&
                (world.bodies[i].pose.translation - world.bodies[j].pose.translation).squaredNorm() > reach * reach)
                continue;
            if (pair_excluded(world, i, j)) continue;
            append_pair(world, i, j, margin, out);
        }
    }
    return out;
}

SolverStats solve_impulses(World& world, const std::vector<ContactPoint>& contacts) {
    struct Row {
        int a, b;
        Vec3 ra, rb, n, t1, t2;
        double kn, kt1, kt2;
        double target;
        double mu;
        double ln = 0, lt1 = 0, lt2 = 0;
    };
    const auto& cfg = world.config;
    const double dt = cfg.dt_sub;
    const size_t nb = world.bodies.size();
    std::vector<double> inv_mass(nb, 0.0);
    std::vector<Mat3> inv_inertia(nb, Mat3::Zero());
    for (size_t i = 0; i < nb; ++i) {
        if (world.acts_kinematic(static_cast<BodyId>(i))) continue;
        inv_mass[i] = 1.0 / world.bodies[i].mass;
        inv_inertia[i] = world_inverse_inertia(world.bodies[i]);
    }

    auto velocity_at = [&](int id, const Vec3& r) {
        const auto& b = world.bodies[id];
        return Vec3(b.linear_velocity + b.angular_velocity.cross(r));
    };
    auto eff_mass = [&](const Row& row, const Vec3& dir) {
        double k = inv_mass[row.a] + inv_mass[row.b];
        k += (inv_inertia[row.a] * row.ra.cross(dir)).cross(row.ra).dot(dir);
        k += (inv_inertia[row.b] * row.rb.cross(dir)).cross(row.rb).dot(dir);
        return k > 1e-30 ? 1.0 / k : 0.0;
    };
    auto apply = [&](const Row& row, const Vec3& p) {
        auto& a = world.bodies[row.a];
        auto& b = world.bodies[row.b];
        a.linear_velocity -= inv_mass[row.a] * p;
        a.angular_velocity -= inv_inertia[row.a] * row.ra.cross(p);
        b.linear_velocity += inv_mass[row.b] * p;
        b.angular_velocity += inv_inertia[row.b] * row.rb.cross(p);
    };

    std::vector<Row> rows;
    rows.reserve(contacts.size());
    for (const auto& c : contacts) {
        Row row;
        row.a = c.body_a;
        row.b = c.body_b;
        const auto& A = world.bodies[row.a];
        const auto& B = world.bodies[row.b];
        row.ra = c.point - A.pose.translation;
        row.rb = c.point - B.pose.translation;
        row.n = c.normal;
        row.t1 = row.n.unitOrthogonal();
        row.t2 = row.n.cross(row.t1);
        row.kn = eff_mass(row, row.n);
        row.kt1 = eff_mass(row, row.t1);
        row.kt2 = eff_mass(row, row.t2);
        if (row.kn == 0.0) continue;
        row.mu = std::sqrt(A.material.friction_mu * B.material.friction_mu);
        const double e = std::max(A.material.restitution, B.material.restitution);
        const double vn0 = (velocity_at(row.b, row.rb) - velocity_at(row.a, row.ra)).dot(row.n);
        const bool bouncing = e > 0 && vn0 < -cfg.restitution_threshold;
        if (c.depth < 0) {
            const double sep = -c.depth;
            row.target = -sep / dt;
            if (bouncing && vn0 * dt < -sep) row.target = -e * vn0;
        } else {
            const double stiff = std::min(A.material.contact_stiffness, B.material.contact_stiffness);
            row.target = cfg.baumgarte * stiff / dt * std::max(c.depth - cfg.penetration_slop, 0.0);
            if (bouncing) row.target = std::max(row.target, -e * vn0);
        }
        rows.push_back(row);
    }

    SolverStats stats;
    stats.contacts = static_cast<int>(rows.size());
    for (int it = 0; it < cfg.solver_iterations; ++it) {
        for (auto& row : rows) {
            const Vec3 vrel = velocity_at(row.b, row.rb) - velocity_at(row.a, row.ra);
            const double vn = vrel.dot(row.n);
            double dl = (row.target - vn) * row.kn;
            const double ln_new = std::max(row.ln + dl, 0.0);
            dl = ln_new - row.ln;
            row.ln = ln_new;
            apply(row, row.n * dl);

            const Vec3 vrel2 = velocity_at(row.b, row.rb) - velocity_at(row.a, row.ra);
            double l1 = row.lt1 - vrel2.dot(row.t1) * row.kt1;
            double l2 = row.lt2 - vrel2.dot(row.t2) * row.kt2;
            const double cap = row.mu * row.ln;
            const double mag = std::hypot(l1, l2);
            if (mag > cap) {
                const double s = mag > 0 ? cap / mag : 0.0;
                l1 *= s;
                l2 *= s;
            }
            apply(row, row.t1 * (l1 - row.lt1) + row.t2 * (l2 - row.lt2));
            row.lt1 = l1;
            row.lt2 = l2;
        }
        for (const auto& row : rows) {
            stats.max_cone_violation = std::max(stats.max_cone_violation, std::hypot(row.lt1, row.lt2) - row.mu * row.ln);
            stats.min_normal_impulse = std::min(stats.min_normal_impulse, row.ln);
        }
    }
    return stats;
}

// --- Grasping ----------------------------------------------------------------

bool pinch_supports(const World& world, int instrument, BodyId body) {
    const auto& ins = world.instruments.at(instrument);
    const auto& b = world.body(body);
    const Vec3 x = world.tool_pose(instrument).rotation.col(0);
    const Vec3 force = b.mass * (ins.tool_acceleration - world.config.gravity);
    const double along = force.dot(x);
    const double tangential = (force - along * x).norm();
    const double mu = std::sqrt(ins.jaw.pad_material.friction_mu * b.material.friction_mu);
    const double n = ins.jaw.pinch_force;
    return tangential <= 2.0 * mu * n && std::abs(along) <= n;
}

namespace {

// Contact points of one pad against one body.
std::vector<ContactPoint> pad_contacts(const World& w, BodyId pad, BodyId body, double margin) {
    std::vector<ContactPoint> out;
    append_pair(w, pad, body, margin, out);
    return out;
}

void release(World&, Instrument& ins) {
    ins.grasp = GraspState{};
    ins.grasp_time = -1;
}

// Instrument currently driving a held body's pose: the most recent grasp.
int driver_of(const World& w, BodyId body) {
    int best = -1;
    long t = -1;
    for (size_t i = 0; i < w.instruments.size(); ++i) {
        const auto& ins = w.instruments[i];
        if (ins.grasp.phase != GraspState::Phase::Free && ins.grasp.body == body && ins.grasp_time > t) {
            t = ins.grasp_time;
            best = static_cast<int>(i);
        }
    }
    return best;
}

} // namespace

GraspState update_grasp(World& world, int instrument) {
    auto& ins = world.instruments.at(instrument);
    if (!ins.has_jaw) return ins.grasp;
    using Phase = GraspState::Phase;
    const bool closing = ins.jaw_command < 0;
    const Pose tool = world.tool_pose(instrument);

    if (!closing) {
        if (ins.grasp.phase != Phase::Free) release(world, ins);
        return ins.grasp;
    }

    if (world.grasp_mode.kind == GraspMode::Kind::Approx) {
        if (ins.grasp.phase == Phase::Free) {
            const Vec3 tip = world.jaw_tip(instrument);
            BodyId best = -1;
            double best_d = world.grasp_mode.threshold_m;
            for (size_t i = 0; i < world.bodies.size(); ++i) {
                const auto& b = world.bodies[i];
                if (!b.graspable || b.mass <= 0) continue;
                const double d = distance_to_body(b, tip);
                if (d < best_d) {
                    best_d = d;
                    best = static_cast<BodyId>(i);
                }
            }
            if (best >= 0) {
                ins.grasp.phase = Phase::Attached;
                ins.grasp.body = best;
                ins.grasp.grasp_frame = tool.inverse() * world.body(best).pose;
                ins.grasp_time = world.substep_count;
            }
        }
        return ins.grasp;
    }

    // Friction pinch.
    if (ins.grasp.phase == Phase::PinchHold) {
        if (!pinch_supports(world, instrument, ins.grasp.body)) release(world, ins);
        return ins.grasp;
    }
    for (size_t i = 0; i < world.bodies.size(); ++i) {
        const BodyId id = static_cast<BodyId>(i);
        const auto& b = world.bodies[i];
        if (b.mass <= 0 || b.kinematic || id == ins.pads[0] || id == ins.pads[1]) continue;
        const auto ca = pad_contacts(world, ins.pads[0], id, world.config.pinch_contact_margin);
        if (ca.empty()) continue;
        const auto cb = pad_contacts(world, ins.pads[1], id, world.config.pinch_contact_margin);
        if (cb.empty()) continue;
        // Both pads touch: the jaw cannot close further.
        ins.grasp.contact_pair = {tool.inverse() * ca.front().point, tool.inverse() * cb.front().point};
        if (pinch_supports(world, instrument, id)) {
            ins.grasp.phase = Phase::PinchHold;
            ins.grasp.body = id;
            ins.grasp.grasp_frame = tool.inverse() * b.pose;
            ins.grasp_time = world.substep_count;
        }
        return ins.grasp;
    }
    ins.grasp.contact_pair.clear();
    return ins.grasp;
}

bool check_stabilized(const World& world, const GraspState& grasp, double height_threshold) {
    if (grasp.phase == GraspState::Phase::Free || grasp.body < 0) return false;
    const double height = lowest_point(world.body(grasp.body)) - world.config.support_z;
    return height >= height_threshold && grasp.lifted_substeps >= world.config.stabilize_substeps;
}

// --- Stepping ----------------------------------------------------------------

namespace {

void advance_instrument(World& world, int index) {
    auto& ins = world.instruments[index];
    const auto& cfg = world.config;
    const double dt = cfg.dt_sub;
    const double w = cfg.tracking_omega;
    const double decay = std::exp(-w * dt);
    for (int k = 0; k < ins.arm.chain.dof(); ++k) {
        const double x0 = ins.arm.current_q[k] - ins.target_q[k];
        const double v0 = ins.qdot[k];
        const double c = v0 + w * x0;
        ins.arm.current_q[k] = ins.target_q[k] + (x0 + c * dt) * decay;
        ins.qdot[k] = (v0 - w * c * dt) * decay;
    }
    ins.arm.current_q = kin::clamp_joints(ins.arm.chain, ins.arm.current_q);

    const Pose tool = ins.arm.world_tool_pose();

    if (ins.has_jaw) {
        const bool closing = ins.jaw_command < 0;
        const bool pinched = ins.grasp.phase == GraspState::Phase::PinchHold ||
                             (!ins.grasp.contact_pair.empty() && world.grasp_mode.kind == GraspMode::Kind::Interact);
        if (!closing) {
            ins.jaw_half_angle = std::min(ins.jaw.open_half_angle, ins.jaw_half_angle + ins.jaw.rate * dt);
        } else if (!pinched) {
            ins.jaw_half_angle = std::max(0.0, ins.jaw_half_angle - ins.jaw.rate * dt);
        }
        for (int side = 0; side < 2; ++side)
            set_kinematic_pose(world.body(ins.pads[side]), tool * pad_local_pose(ins.jaw, ins.jaw_half_angle, side),
                               dt);
    }
}

void track_tool_motion(World& world, int index, const Pose& before) {
    auto& ins = world.instruments[index];
    const Pose after = world.tool_pose(index);
    ins.tool_velocity = (after.translation - before.translation) / world.config.dt_sub;
    ins.velocity_history.push_back(ins.tool_velocity);
    const size_t window = static_cast<size_t>(std::max(1, world.config.substeps_per_control));
    if (ins.velocity_history.size() > window + 1) ins.velocity_history.erase(ins.velocity_history.begin());
    const double span = world.config.dt_sub * static_cast<double>(ins.velocity_history.size() - 1);
    ins.tool_acceleration =
        span > 0 ? Vec3((ins.velocity_history.back() - ins.velocity_history.front()) / span) : Vec3::Zero();
}

void carry_held_bodies(World& world) {
    for (size_t i = 0; i < world.bodies.size(); ++i) {
        const int d = driver_of(world, static_cast<BodyId>(i));
        if (d < 0) continue;
        const auto& ins = world.instruments[d];
        set_kinematic_pose(world.bodies[i], world.tool_pose(d) * ins.grasp.grasp_frame, world.config.dt_sub);
    }
}

void update_lift_counters(World& world) {
    for (auto& ins : world.instruments) {
        if (ins.grasp.phase == GraspState::Phase::Free) continue;
        const double h = lowest_point(world.body(ins.grasp.body)) - world.config.support_z;
        if (h >= world.config.lift_threshold) {
            ++ins.grasp.lifted_substeps;
            if (ins.grasp.lifted_substeps >= world.config.stabilize_substeps) ins.grasp.stabilized = true;
        } else {
            ins.grasp.lifted_substeps = 0;
        }
    }
}

} // namespace

void step_substep(World& world) {
    if (!world.valid) throw SimulationDiverged("world was flagged invalid by an earlier divergence");
    const auto& cfg = world.config;
    const double dt = cfg.dt_sub;

    for (size_t i = 0; i < world.instruments.size(); ++i) {
        const Pose before = world.tool_pose(static_cast<int>(i));
        advance_instrument(world, static_cast<int>(i));
        track_tool_motion(world, static_cast<int>(i), before);
    }
    for (size_t i = 0; i < world.instruments.size(); ++i) update_grasp(world, static_cast<int>(i));
    carry_held_bodies(world);

    for (size_t i = 0; i < world.bodies.size(); ++i) {
        if (world.acts_kinematic(static_cast<BodyId>(i))) continue;
        world.bodies[i].linear_velocity += cfg.gravity * dt;
    }

    const auto contacts = detect_contacts(world, cfg.speculative_margin);
    world.last_stats = solve_impulses(world, contacts);

    for (size_t i = 0; i < world.bodies.size(); ++i) {
        if (world.acts_kinematic(static_cast<BodyId>(i))) continue;
        auto& b = world.bodies[i];
        b.pose.translation += b.linear_velocity * dt;
        b.pose.rotation = kin::exp_so3<double>(b.angular_velocity * dt) * b.pose.rotation;
        orthonormalize(b.pose.rotation);
    }
    update_lift_counters(world);
    ++world.substep_count;

    for (const auto& b : world.bodies) {
        if (!b.pose.translation.allFinite() || !b.pose.rotation.allFinite() || !b.linear_velocity.allFinite() ||
            !b.angular_velocity.allFinite()) {
            world.valid = false;
            throw SimulationDiverged("non-finite state in body '" + b.name + "'");
        }
    }
}

void step_control(World& world, const std::vector<ArmCommand>& commands) {
    if (commands.size() != world.instruments.size())
        throw ContractViolation("step_control: expected one command per instrument");
    for (size_t i = 0; i < commands.size(); ++i) {
        auto& ins = world.instruments[i];
        if (commands[i].q_target.size() != ins.arm.chain.dof())
            throw ContractViolation("step_control: joint target has wrong length for " + ins.name);
        if (!commands[i].q_target.allFinite()) throw ContractViolation("step_control: non-finite joint target");
        ins.target_q = kin::clamp_joints(ins.arm.chain, commands[i].q_target);
        ins.jaw_command = commands[i].jaw;
    }
    for (int s = 0; s < world.config.substeps_per_control; ++s) step_substep(world);
}

void reset_instrument(World& world, int instrument, const kin::JointVector<double>& q, double jaw_half_angle) {
    auto& ins = world.instruments.at(instrument);
    if (q.size() != ins.arm.chain.dof()) throw ContractViolation("reset_instrument: joint vector has wrong length");
    ins.arm.current_q = kin::clamp_joints(ins.arm.chain, q);
    ins.target_q = ins.arm.current_q;
    ins.qdot.setZero();
    ins.grasp = GraspState{};
    ins.grasp_time = -1;
    ins.velocity_history.clear();
    ins.tool_velocity.setZero();
    ins.tool_acceleration.setZero();
    if (!ins.has_jaw) return;
    ins.jaw_half_angle = std::clamp(jaw_half_angle, 0.0, ins.jaw.open_half_angle);
    const Pose tool = ins.arm.world_tool_pose();
    for (int side = 0; side < 2; ++side) {
        auto& pad = world.body(ins.pads[side]);
        pad.pose = tool * pad_local_pose(ins.jaw, ins.jaw_half_angle, side);
        pad.linear_velocity.setZero();
        pad.angular_velocity.setZero();
    }
}

void force_grasp(World& world, int instrument, BodyId body) {
    auto& ins = world.instruments.at(instrument);
    if (!ins.has_jaw) throw ContractViolation("force_grasp: instrument has no jaw");
    auto& b = world.body(body);
    if (!b.is_dynamic()) throw ContractViolation("force_grasp: body must be dynamic");
    const Pose tool = world.tool_pose(instrument);
    ins.jaw_command = -1.0;
    ins.grasp = GraspState{};
    ins.grasp.phase = world.grasp_mode.kind == GraspMode::Kind::Approx ? GraspState::Phase::Attached
                                                                        : GraspState::Phase::PinchHold;
    ins.grasp.body = body;
    ins.grasp.grasp_frame = tool.inverse() * b.pose;
    ins.grasp_time = world.substep_count;
    b.linear_velocity.setZero();
    b.angular_velocity.setZero();
}

// --- Snapshots ---------------------------------------------------------------

namespace {

nlohmann::json vec_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd json_vec(const nlohmann::json& j, Eigen::Index expected) {
    const auto values = j.get<std::vector<double>>();
    if (static_cast<Eigen::Index>(values.size()) != expected) throw CorruptFile("snapshot vector has wrong length");
    return Eigen::Map<const Eigen::VectorXd>(values.data(), expected);
}

} // namespace

nlohmann::json snapshot(const World& world) {
    nlohmann::json j;
    j["version"] = kSnapshotVersion;
    j["substep_count"] = world.substep_count;
    j["valid"] = world.valid;
    j["grasp_mode"] = world.grasp_mode.label();
    auto& bodies = j["bodies"] = nlohmann::json::array();
    for (const auto& b : world.bodies) {
        bodies.push_back({{"name", b.name},
                          {"pose", kin::pose_to_json(b.pose)},
                          {"v", vec_json(b.linear_velocity)},
                          {"w", vec_json(b.angular_velocity)}});
    }
    auto& arms = j["instruments"] = nlohmann::json::array();
    for (const auto& ins : world.instruments) {
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& v : ins.velocity_history) hist.push_back(vec_json(v));
        nlohmann::json contacts = nlohmann::json::array();
        for (const auto& c : ins.grasp.contact_pair) contacts.push_back(vec_json(c));
        arms.push_back({{"name", ins.name},
                        {"q", vec_json(ins.arm.current_q)},
                        {"target_q", vec_json(ins.target_q)},
                        {"qdot", vec_json(ins.qdot)},
                        {"jaw_half_angle", ins.jaw_half_angle},
                        {"jaw_command", ins.jaw_command},
                        {"velocity_history", hist},
                        {"tool_velocity", vec_json(ins.tool_velocity)},
                        {"tool_acceleration", vec_json(ins.tool_acceleration)},
                        {"grasp_time", ins.grasp_time},
                        {"grasp",
                         {{"phase", static_cast<int>(ins.grasp.phase)},
                          {"body", ins.grasp.body},
                          {"frame", kin::pose_to_json(ins.grasp.grasp_frame)},
                          {"contact_pair", contacts},
                          {"stabilized", ins.grasp.stabilized},
                          {"lifted_substeps", ins.grasp.lifted_substeps}}}});
    }
    return j;
}

void restore(World& world, const nlohmann::json& j) {
    try {
        if (j.at("version").get<int>() != kSnapshotVersion) throw CorruptFile("unsupported snapshot version");
        const auto& bodies = j.at("bodies");
        const auto& arms = j.at("instruments");
        if (bodies.size() != world.bodies.size() || arms.size() != world.instruments.size())
            throw CorruptFile("snapshot layout does not match world");
        for (size_t i = 0; i < bodies.size(); ++i) {
            auto& b = world.bodies[i];
            if (bodies[i].at("name").get<std::string>() != b.name) throw CorruptFile("snapshot body name mismatch");
            b.pose = kin::pose_from_json(bodies[i].at("pose"));
            b.linear_velocity = json_vec(bodies[i].at("v"), 3);
            b.angular_velocity = json_vec(bodies[i].at("w"), 3);
        }
        for (size_t i = 0; i < arms.size(); ++i) {
            auto& ins = world.instruments[i];
            const auto& a = arms[i];
            const auto dof = ins.arm.chain.dof();
            ins.arm.current_q = json_vec(a.at("q"), dof);
            ins.target_q = json_vec(a.at("target_q"), dof);
            ins.qdot = json_vec(a.at("qdot"), dof);
            ins.jaw_half_angle = a.at("jaw_half_angle").get<double>();
            ins.jaw_command = a.at("jaw_command").get<double>();
            ins.velocity_history.clear();
            for (const auto& v : a.at("velocity_history")) ins.velocity_history.push_back(json_vec(v, 3));
            ins.tool_velocity = json_vec(a.at("tool_velocity"), 3);
            ins.tool_acceleration = json_vec(a.at("tool_acceleration"), 3);
            ins.grasp_time = a.at("grasp_time").get<long>();
            const auto& g = a.at("grasp");
            ins.grasp.phase = static_cast<GraspState::Phase>(g.at("phase").get<int>());
            ins.grasp.body = g.at("body").get<int>();
            ins.grasp.grasp_frame = kin::pose_from_json(g.at("frame"));
            ins.grasp.contact_pair.clear();
            for (const auto& c : g.at("contact_pair")) ins.grasp.contact_pair.push_back(json_vec(c, 3));
            ins.grasp.stabilized = g.at("stabilized").get<bool>();
            ins.grasp.lifted_substeps = g.at("lifted_substeps").get<int>();
        }
        world.substep_count = j.at("substep_count").get<long>();
        world.valid = j.at("valid").get<bool>();
        world.grasp_mode = GraspMode::parse(j.at("grasp_mode").get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(std::string("malformed snapshot: ") + e.what());
    }
}

} // namespace surgsim::phys
