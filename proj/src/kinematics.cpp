#include "surgsim/kinematics.hpp"

namespace surgsim::kin {

namespace {
constexpr double kPi = std::numbers::pi;
}

ChainSpecd psm_chain() {
    ChainSpecd c;
    c.arm = ArmKind::PSM;
    c.joint_types = {JointType::Revolute, JointType::Revolute, JointType::Prismatic,
                     JointType::Revolute, JointType::Revolute, JointType::Revolute};
    c.link_transforms = {
        modified_dh(kPi / 2, 0.0, kPi / 2, 0.0),      // outer yaw
        modified_dh(-kPi / 2, 0.0, -kPi / 2, 0.0),    // outer pitch
        modified_dh(kPi / 2, 0.0, 0.0, -0.4318),      // insertion
        modified_dh(0.0, 0.0, 0.0, 0.4162),           // instrument roll
        modified_dh(-kPi / 2, 0.0, -kPi / 2, 0.0),    // wrist pitch
        modified_dh(-kPi / 2, 0.0091, -kPi / 2, 0.0), // wrist yaw
    };
    c.limits = {{-1.5, 1.5}, {-0.9, 0.9}, {0.0, 0.24}, {-3.0, 3.0}, {-1.5, 1.5}, {-1.5, 1.5}};
    Mat3<double> r;
    r << -1, 0, 0,
          0, 0, 1,
          0, 1, 0;
    c.tip_to_tool = Posed::from_rotation(r);
    return c;
}

ChainSpecd ecm_chain() {
    ChainSpecd c;
    c.arm = ArmKind::ECM;
    c.joint_types = {JointType::Revolute, JointType::Revolute, JointType::Prismatic, JointType::Revolute};
    c.link_transforms = {
        modified_dh(kPi / 2, 0.0, kPi / 2, 0.0),
        modified_dh(-kPi / 2, 0.0, -kPi / 2, 0.0),
        modified_dh(kPi / 2, 0.0, 0.0, -0.3822),
        modified_dh(0.0, 0.0, 0.0, 0.3829),
    };
    c.limits = {{-1.2, 1.2}, {-0.9, 0.9}, {0.0, 0.25}, {-1.57, 1.57}};
    c.tip_to_tool = Posed::identity();
    return c;
}

} // namespace surgsim::kin
