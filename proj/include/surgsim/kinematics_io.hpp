#pragma once

#include <nlohmann/json.hpp>

#include "surgsim/kinematics.hpp"

namespace surgsim::kin {

// {arm, joint_types: ["R"|"P"...], link_transforms: [[16 row-major]...],
//  limits: [[lo, hi]...], tip_to_tool: [16 row-major]}
nlohmann::json chain_to_json(const ChainSpecd& chain);
ChainSpecd chain_from_json(const nlohmann::json& doc);

nlohmann::json pose_to_json(const Posed& pose);
Posed pose_from_json(const nlohmann::json& doc);

} // namespace surgsim::kin
