#include "surgsim/kinematics_io.hpp"

namespace surgsim::kin {

nlohmann::json pose_to_json(const Posed& pose) {
    const Mat4<double> m = pose.matrix();
    nlohmann::json out = nlohmann::json::array();
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) out.push_back(m(r, c));
    return out;
}

Posed pose_from_json(const nlohmann::json& doc) {
    if (!doc.is_array() || doc.size() != 16) throw ContractViolation("pose: expected 16 row-major values");
    Mat4<double> m;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) m(r, c) = doc.at(r * 4 + c).get<double>();
    Posed p = Posed::from_matrix(m);
    if ((p.rotation.transpose() * p.rotation - Mat3<double>::Identity()).norm() > 1e-9)
        throw ContractViolation("pose: rotation block is not orthonormal");
    return p;
}

nlohmann::json chain_to_json(const ChainSpecd& chain) {
    nlohmann::json doc;
    doc["arm"] = chain.arm == ArmKind::PSM ? "PSM" : "ECM";
    auto& types = doc["joint_types"] = nlohmann::json::array();
    for (auto t : chain.joint_types) types.push_back(t == JointType::Revolute ? "R" : "P");
    auto& links = doc["link_transforms"] = nlohmann::json::array();
    for (const auto& l : chain.link_transforms) links.push_back(pose_to_json(l));
    auto& limits = doc["limits"] = nlohmann::json::array();
    for (const auto& l : chain.limits) limits.push_back({l.lo, l.hi});
    doc["tip_to_tool"] = pose_to_json(chain.tip_to_tool);
    return doc;
}

ChainSpecd chain_from_json(const nlohmann::json& doc) {
    ChainSpecd c;
    const auto arm = doc.at("arm").get<std::string>();
    if (arm == "PSM") c.arm = ArmKind::PSM;
    else if (arm == "ECM") c.arm = ArmKind::ECM;
    else throw ContractViolation("chain: unknown arm '" + arm + "'");
    for (const auto& t : doc.at("joint_types")) {
        const auto s = t.get<std::string>();
        if (s == "R") c.joint_types.push_back(JointType::Revolute);
        else if (s == "P") c.joint_types.push_back(JointType::Prismatic);
        else throw ContractViolation("chain: joint type must be R or P");
    }
    for (const auto& l : doc.at("link_transforms")) c.link_transforms.push_back(pose_from_json(l));
    for (const auto& l : doc.at("limits")) c.limits.push_back({l.at(0).get<double>(), l.at(1).get<double>()});
    c.tip_to_tool = pose_from_json(doc.at("tip_to_tool"));
    c.validate();
    return c;
}

} // namespace surgsim::kin
