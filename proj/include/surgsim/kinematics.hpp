#pragma once

// Serial-chain kinematics for RCM-based arms (PSM: RRPRRR, ECM: RRPR).
//
// Every joint moves about (revolute) or along (prismatic) the local z axis of
// the frame produced by its fixed link transform, so a chain is
//
//     base_T_tip(q) = L_0 J_0(q_0) L_1 J_1(q_1) ... L_{n-1} J_{n-1}(q_{n-1})
//
// and base_T_tool(q) = base_T_tip(q) * tip_T_tool. The base frame is the
// remote center of motion.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "surgsim/errors.hpp"

namespace surgsim::kin {

template <typename Scalar> using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar> using Vec6 = Eigen::Matrix<Scalar, 6, 1>;
template <typename Scalar> using Mat3 = Eigen::Matrix<Scalar, 3, 3>;
template <typename Scalar> using Mat4 = Eigen::Matrix<Scalar, 4, 4>;
template <typename Scalar> using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar> using Jacobian = Eigen::Matrix<Scalar, 6, Eigen::Dynamic>;

/// Joint coordinates, radians for revolute joints and meters for prismatic.
template <typename Scalar> using JointVector = VecX<Scalar>;

enum class ArmKind { PSM, ECM };
enum class JointType { Revolute, Prismatic };

/// Rigid transform stored as rotation + translation.
template <typename Scalar = double>
struct Pose {
    Mat3<Scalar> rotation = Mat3<Scalar>::Identity();
    Vec3<Scalar> translation = Vec3<Scalar>::Zero();

    Pose() = default;
    Pose(const Mat3<Scalar>& r, const Vec3<Scalar>& t) : rotation(r), translation(t) {}

    static Pose identity() { return Pose(); }
    static Pose from_translation(const Vec3<Scalar>& t) { return Pose(Mat3<Scalar>::Identity(), t); }
    static Pose from_rotation(const Mat3<Scalar>& r) { return Pose(r, Vec3<Scalar>::Zero()); }

    static Pose from_matrix(const Mat4<Scalar>& m) {
        return Pose(m.template topLeftCorner<3, 3>(), m.template topRightCorner<3, 1>());
    }

    Mat4<Scalar> matrix() const {
        Mat4<Scalar> m = Mat4<Scalar>::Identity();
        m.template topLeftCorner<3, 3>() = rotation;
        m.template topRightCorner<3, 1>() = translation;
        return m;
    }

    Pose operator*(const Pose& rhs) const {
        return Pose(rotation * rhs.rotation, rotation * rhs.translation + translation);
    }

    Vec3<Scalar> operator*(const Vec3<Scalar>& p) const { return rotation * p + translation; }

    Pose inverse() const {
        Mat3<Scalar> rt = rotation.transpose();
        return Pose(rt, -(rt * translation));
    }

    template <typename Other> Pose<Other> cast() const {
        return Pose<Other>(rotation.template cast<Other>(), translation.template cast<Other>());
    }
};

using Posed = Pose<double>;

template <typename Scalar> Mat3<Scalar> rot_x(Scalar a) {
    return Eigen::AngleAxis<Scalar>(a, Vec3<Scalar>::UnitX()).toRotationMatrix();
}
template <typename Scalar> Mat3<Scalar> rot_y(Scalar a) {
    return Eigen::AngleAxis<Scalar>(a, Vec3<Scalar>::UnitY()).toRotationMatrix();
}
template <typename Scalar> Mat3<Scalar> rot_z(Scalar a) {
    return Eigen::AngleAxis<Scalar>(a, Vec3<Scalar>::UnitZ()).toRotationMatrix();
}

/// Rotation vector (axis * angle) of a rotation matrix; angle in [0, pi].
template <typename Scalar> Vec3<Scalar> log_so3(const Mat3<Scalar>& r) {
    Eigen::AngleAxis<Scalar> aa(r);
    return aa.axis() * aa.angle();
}

template <typename Scalar> Mat3<Scalar> exp_so3(const Vec3<Scalar>& w) {
    Scalar angle = w.norm();
    if (angle < Scalar(1e-15)) return Mat3<Scalar>::Identity();
    return Eigen::AngleAxis<Scalar>(angle, w / angle).toRotationMatrix();
}

/// Stacked [position error; orientation error] of `current` relative to
/// `target`, both expressed in the common base frame. Orientation error is the
/// rotation vector of R_target * R_current^T.
template <typename Scalar>
Vec6<Scalar> pose_error(const Pose<Scalar>& target, const Pose<Scalar>& current) {
    Vec6<Scalar> e;
    e.template head<3>() = target.translation - current.translation;
    e.template tail<3>() = log_so3<Scalar>(target.rotation * current.rotation.transpose());
    return e;
}

template <typename Scalar> struct JointLimit {
    Scalar lo;
    Scalar hi;
};

template <typename Scalar = double>
struct ChainSpec {
    ArmKind arm = ArmKind::PSM;
    std::vector<JointType> joint_types;
    std::vector<Pose<Scalar>> link_transforms;
    std::vector<JointLimit<Scalar>> limits;
    Pose<Scalar> tip_to_tool;

    int dof() const { return static_cast<int>(joint_types.size()); }

    void validate() const {
        const auto n = joint_types.size();
        if (link_transforms.size() != n || limits.size() != n)
            throw ContractViolation("chain: joint_types, link_transforms and limits differ in length");
        for (const auto& l : limits)
            if (!(l.lo <= l.hi)) throw ContractViolation("chain: joint limit lo > hi");
        const std::vector<JointType> psm{JointType::Revolute, JointType::Revolute, JointType::Prismatic,
                                         JointType::Revolute, JointType::Revolute, JointType::Revolute};
        const std::vector<JointType> ecm{JointType::Revolute, JointType::Revolute, JointType::Prismatic,
                                         JointType::Revolute};
        if (arm == ArmKind::PSM && joint_types != psm)
            throw ContractViolation("chain: PSM joint sequence must be RRPRRR");
        if (arm == ArmKind::ECM && joint_types != ecm)
            throw ContractViolation("chain: ECM joint sequence must be RRPR");
    }
};

using ChainSpecd = ChainSpec<double>;

/// Modified (Craig) DH link transform: Rx(alpha) Tx(a) Rz(theta) Tz(d).
template <typename Scalar>
Pose<Scalar> modified_dh(Scalar alpha, Scalar a, Scalar theta, Scalar d) {
    Pose<Scalar> rx(rot_x(alpha), Vec3<Scalar>(a, 0, 0));
    Pose<Scalar> rz(rot_z(theta), Vec3<Scalar>(0, 0, d));
    return rx * rz;
}

namespace detail {

template <typename Scalar, typename Derived>
void check_dims(const ChainSpec<Scalar>& chain, const Eigen::MatrixBase<Derived>& q) {
    if (q.size() != chain.dof())
        throw ContractViolation("joint vector has " + std::to_string(q.size()) + " entries, chain expects " +
                                std::to_string(chain.dof()));
    if (!q.allFinite()) throw ContractViolation("joint vector contains non-finite values");
}

template <typename Scalar> Pose<Scalar> joint_motion(JointType type, Scalar q) {
    if (type == JointType::Revolute) return Pose<Scalar>::from_rotation(rot_z(q));
    return Pose<Scalar>::from_translation(Vec3<Scalar>(0, 0, q));
}

} // namespace detail

/// base_T_tip. The tool transform is not applied.
template <typename Scalar, typename Derived>
Pose<Scalar> forward_kinematics(const ChainSpec<Scalar>& chain, const Eigen::MatrixBase<Derived>& q) {
    detail::check_dims(chain, q);
    Pose<Scalar> t;
    for (int i = 0; i < chain.dof(); ++i)
        t = t * chain.link_transforms[i] * detail::joint_motion(chain.joint_types[i], Scalar(q[i]));
    return t;
}

/// base_T_tool = base_T_tip * tip_T_tool.
template <typename Scalar, typename Derived>
Pose<Scalar> tool_pose(const ChainSpec<Scalar>& chain, const Eigen::MatrixBase<Derived>& q) {
    return forward_kinematics(chain, q) * chain.tip_to_tool;
}

/// Frames of every joint (after its link transform, before its motion).
/// The last element is the tool frame.
template <typename Scalar, typename Derived>
std::vector<Pose<Scalar>> joint_frames(const ChainSpec<Scalar>& chain, const Eigen::MatrixBase<Derived>& q) {
    detail::check_dims(chain, q);
    std::vector<Pose<Scalar>> frames;
    frames.reserve(chain.dof() + 1);
    Pose<Scalar> t;
    for (int i = 0; i < chain.dof(); ++i) {
        t = t * chain.link_transforms[i];
        frames.push_back(t);
        t = t * detail::joint_motion(chain.joint_types[i], Scalar(q[i]));
    }
    frames.push_back(t * chain.tip_to_tool);
    return frames;
}

/// Geometric Jacobian of the tool frame in base coordinates. Rows 0..2 are
/// the linear velocity of the tool origin, rows 3..5 the angular velocity.
template <typename Scalar, typename Derived>
Jacobian<Scalar> jacobian(const ChainSpec<Scalar>& chain, const Eigen::MatrixBase<Derived>& q) {
    const auto frames = joint_frames(chain, q);
    const Vec3<Scalar> p_tool = frames.back().translation;
    Jacobian<Scalar> j(6, chain.dof());
    for (int i = 0; i < chain.dof(); ++i) {
        const Vec3<Scalar> z = frames[i].rotation.col(2);
        if (chain.joint_types[i] == JointType::Revolute) {
            j.col(i).template head<3>() = z.cross(p_tool - frames[i].translation);
            j.col(i).template tail<3>() = z;
        } else {
            j.col(i).template head<3>() = z;
            j.col(i).template tail<3>().setZero();
        }
    }
    return j;
}

template <typename Scalar, typename Derived>
JointVector<Scalar> clamp_joints(const ChainSpec<Scalar>& chain, const Eigen::MatrixBase<Derived>& q) {
    if (q.size() != chain.dof()) throw ContractViolation("clamp_joints: dimension mismatch");
    JointVector<Scalar> out = q;
    for (int i = 0; i < chain.dof(); ++i) out[i] = std::clamp(out[i], chain.limits[i].lo, chain.limits[i].hi);
    return out;
}

template <typename Scalar, typename Derived>
bool within_limits(const ChainSpec<Scalar>& chain, const Eigen::MatrixBase<Derived>& q) {
    for (int i = 0; i < chain.dof(); ++i)
        if (q[i] < chain.limits[i].lo || q[i] > chain.limits[i].hi) return false;
    return true;
}

struct IkOptions {
    double damping = 1e-3;
    int max_iterations = 200;
    double max_angular_step = 0.2;
    double max_linear_step = 0.02;
    double tolerance = 1e-6;
    // Ignore orientation and solve for tool position only.
    bool position_only = false;
    // Joints held at their seed value.
    std::vector<bool> locked;
};

template <typename Scalar> struct IkResult {
    JointVector<Scalar> q;
    int iterations = 0;
    Scalar position_residual = 0;
    Scalar orientation_residual = 0;
    bool converged = false;
};

/// Damped least squares with a projected (clamped) update every iteration.
/// Never throws on non-convergence; see inverse_kinematics for that.
template <typename Scalar, typename Derived>
IkResult<Scalar> solve_ik(const ChainSpec<Scalar>& chain, const Pose<Scalar>& target,
                          const Eigen::MatrixBase<Derived>& seed, const IkOptions& opt = {}) {
    detail::check_dims(chain, seed);
    const int n = chain.dof();
    IkResult<Scalar> res;
    res.q = clamp_joints(chain, seed);
    const int rows = opt.position_only ? 3 : 6;
    const Scalar lambda2 = Scalar(opt.damping * opt.damping);

    JointVector<Scalar> best_q = res.q;
    Scalar best = std::numeric_limits<Scalar>::infinity();

    for (int it = 0; it <= opt.max_iterations; ++it) {
        const Pose<Scalar> cur = tool_pose(chain, res.q);
        Vec6<Scalar> e = pose_error(target, cur);
        if (opt.position_only) e.template tail<3>().setZero();
        const Scalar ep = e.template head<3>().norm();
        const Scalar er = e.template tail<3>().norm();
        const Scalar score = ep + er;
        if (score < best) {
            best = score;
            best_q = res.q;
            res.position_residual = ep;
            res.orientation_residual = er;
        }
        res.iterations = it;
        if (ep < opt.tolerance && er < opt.tolerance) {
            res.converged = true;
            break;
        }
        if (it == opt.max_iterations) break;

        Jacobian<Scalar> j = jacobian(chain, res.q);
        Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> jr = j.topRows(rows);
        for (int c = 0; c < n; ++c)
            if (c < static_cast<int>(opt.locked.size()) && opt.locked[c]) jr.col(c).setZero();
        const VecX<Scalar> er_vec = e.head(rows);
        Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> h = jr.transpose() * jr;
        h.diagonal().array() += lambda2;
        JointVector<Scalar> dq = h.ldlt().solve(jr.transpose() * er_vec);

        Scalar scale = 1;
        for (int c = 0; c < n; ++c) {
            const Scalar cap = chain.joint_types[c] == JointType::Revolute ? Scalar(opt.max_angular_step)
                                                                           : Scalar(opt.max_linear_step);
            if (std::abs(dq[c]) * scale > cap) scale = cap / std::abs(dq[c]);
        }
        res.q = clamp_joints(chain, res.q + scale * dq);
    }
    if (!res.converged) res.q = best_q;
    return res;
}

/// Joint vector whose tool pose matches `target`. Throws UnreachableTarget
/// carrying the best residual when the solver does not converge.
template <typename Scalar, typename Derived>
JointVector<Scalar> inverse_kinematics(const ChainSpec<Scalar>& chain, const Pose<Scalar>& target,
                                       const Eigen::MatrixBase<Derived>& seed, const IkOptions& opt = {}) {
    const Mat3<Scalar> rtr = target.rotation.transpose() * target.rotation;
    if (!opt.position_only && (rtr - Mat3<Scalar>::Identity()).norm() > Scalar(1e-6))
        throw ContractViolation("inverse_kinematics: target rotation is not orthonormal");
    auto res = solve_ik(chain, target, seed, opt);
    if (!res.converged) {
        const double residual = static_cast<double>(res.position_residual + res.orientation_residual);
        throw UnreachableTarget("inverse_kinematics: no convergence after " + std::to_string(res.iterations) +
                                    " iterations (residual " + std::to_string(residual) + ")",
                                residual);
    }
    return res.q;
}

/// Arm instance: chain plus where its RCM sits in the world.
template <typename Scalar = double>
struct ArmModel {
    ChainSpec<Scalar> chain;
    Pose<Scalar> rcm_pose;
    JointVector<Scalar> current_q;

    Pose<Scalar> world_tool_pose() const { return rcm_pose * tool_pose(chain, current_q); }
    Pose<Scalar> world_tool_pose(const JointVector<Scalar>& q) const { return rcm_pose * tool_pose(chain, q); }
};

using ArmModeld = ArmModel<double>;

// Default dVRK-scale chains (modified DH). Link lengths follow the published
// large-needle-driver / ECM tables; tip_to_tool re-orients the tip frame so
// that tool z points along the instrument (jaw / optical axis), tool y is the
// jaw hinge axis and tool x the jaw closing direction.
ChainSpecd psm_chain();
ChainSpecd ecm_chain();

/// Distance from `point` to the line through `origin` along `direction`.
template <typename Scalar>
Scalar point_line_distance(const Vec3<Scalar>& point, const Vec3<Scalar>& origin, const Vec3<Scalar>& direction) {
    const Vec3<Scalar> d = direction.normalized();
    const Vec3<Scalar> v = point - origin;
    return (v - v.dot(d) * d).norm();
}

/// Instrument shaft line in the base frame: origin and direction of the
/// insertion axis (the prismatic joint's frame).
template <typename Scalar, typename Derived>
std::pair<Vec3<Scalar>, Vec3<Scalar>> shaft_line(const ChainSpec<Scalar>& chain, const Eigen::MatrixBase<Derived>& q) {
    const auto frames = joint_frames(chain, q);
    for (int i = 0; i < chain.dof(); ++i)
        if (chain.joint_types[i] == JointType::Prismatic)
            return {frames[i].translation, frames[i].rotation.col(2)};
    throw ContractViolation("shaft_line: chain has no prismatic joint");
}

} // namespace surgsim::kin
