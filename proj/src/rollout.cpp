#include "surgsim/rollout.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>

#include "surgsim/errors.hpp"

namespace surgsim {

namespace {

nlohmann::json to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Eigen::VectorXd from_json(const nlohmann::json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::string digest(const std::vector<std::string>& lines) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& line : lines)
        for (unsigned char c : line + "\n") {
            h ^= c;
            h *= 1099511628211ULL;
        }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace

double Episode::total_reward() const { return std::accumulate(rewards.begin(), rewards.end(), 0.0); }

double Episode::mean_reward() const { return rewards.empty() ? 0.0 : total_reward() / rewards.size(); }

Episode rollout(env::TaskEnv& env, std::uint64_t seed, const PolicyFn& policy) {
    Episode ep;
    ep.seed = seed;
    env::Observation obs = env.reset(seed);
    ep.obs.push_back(obs.observation);
    ep.achieved_goals.push_back(obs.achieved_goal);
    while (true) {
        const Eigen::VectorXd a = policy(obs);
        const auto r = env.step(a);
        ep.desired_goals.push_back(obs.desired_goal);
        ep.actions.push_back(a.cwiseMax(-1.0).cwiseMin(1.0));
        ep.rewards.push_back(r.reward);
        ep.successes.push_back(r.info.is_success);
        ep.obs.push_back(r.obs.observation);
        ep.achieved_goals.push_back(r.obs.achieved_goal);
        obs = r.obs;
        if (r.done) break;
    }
    return ep;
}

bool episode_solved(const env::TaskEnv& env, const Episode& ep, double track_fraction) {
    if (env::is_goal_based(env.task())) return ep.final_success();
    if (ep.length() < env.horizon()) return false;
    const auto in_view = std::count(ep.successes.begin(), ep.successes.end(), true);
    return in_view >= track_fraction * ep.length();
}

void write_episodes(const std::string& path, const env::TaskConfig& config, const std::vector<Episode>& episodes,
                    bool append) {
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open episode file '" + path + "'");
    for (const auto& ep : episodes) {
        std::vector<std::string> lines;
        for (int t = 0; t < ep.length(); ++t) {
            lines.push_back(nlohmann::json{{"t", t},
                                           {"obs", to_json(ep.obs[t])},
                                           {"achieved_goal", to_json(ep.achieved_goals[t])},
                                           {"desired_goal", to_json(ep.desired_goals[t])},
                                           {"action", to_json(ep.actions[t])},
                                           {"reward", ep.rewards[t]},
                                           {"next_obs", to_json(ep.obs[t + 1])},
                                           {"next_achieved_goal", to_json(ep.achieved_goals[t + 1])},
                                           {"is_success", static_cast<bool>(ep.successes[t])}}
                                .dump());
        }
        const nlohmann::json header = {{"task", env::task_name(config.task)},
                                       {"env_config_hash", config.hash()},
                                       {"seed", ep.seed},
                                       {"grasp_mode", config.grasp_mode.label()},
                                       {"length", ep.length()},
                                       {"digest", digest(lines)},
                                       {"config", config.to_json()}};
        out << header.dump() << '\n';
        for (const auto& line : lines) out << line << '\n';
    }
}

EpisodeFile read_episodes(const std::string& path, const env::TaskConfig* expected) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open episode file '" + path + "'");
    EpisodeFile file;
    bool have_config = false;
    std::string line;
    int line_no = 0;
    auto next_line = [&]() -> std::string {
        if (!std::getline(in, line)) throw CorruptFile(path + ": truncated episode");
        ++line_no;
        return line;
    };
    try {
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            const auto header = nlohmann::json::parse(line);
            const auto config = env::TaskConfig::from_json(header.at("config"));
            if (header.at("env_config_hash").get<std::string>() != config.hash())
                throw CorruptFile(path + ":" + std::to_string(line_no) + ": header hash does not match its config");
            if (expected && config.hash() != expected->hash())
                throw ContractViolation(path + ": episodes were recorded with env config " + config.hash() +
                                        ", expected " + expected->hash());
            if (!have_config) {
                file.config = config;
                have_config = true;
            } else if (config.hash() != file.config.hash()) {
                throw CorruptFile(path + ": episodes from different env configs");
            }
            Episode ep;
            ep.seed = header.at("seed").get<std::uint64_t>();
            const int length = header.at("length").get<int>();
            std::vector<std::string> lines;
            for (int t = 0; t < length; ++t) {
                lines.push_back(next_line());
                const auto tr = nlohmann::json::parse(lines.back());
                if (tr.at("t").get<int>() != t) throw CorruptFile(path + ": transitions out of order");
                if (t == 0) {
                    ep.obs.push_back(from_json(tr.at("obs")));
                    ep.achieved_goals.push_back(from_json(tr.at("achieved_goal")));
                }
                ep.desired_goals.push_back(from_json(tr.at("desired_goal")));
                ep.actions.push_back(from_json(tr.at("action")));
                ep.rewards.push_back(tr.at("reward").get<double>());
                ep.successes.push_back(tr.at("is_success").get<bool>());
                ep.obs.push_back(from_json(tr.at("next_obs")));
                ep.achieved_goals.push_back(from_json(tr.at("next_achieved_goal")));
            }
            if (digest(lines) != header.at("digest").get<std::string>())
                throw CorruptFile(path + ": digest mismatch for episode with seed " + std::to_string(ep.seed));
            file.episodes.push_back(std::move(ep));
        }
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFile(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    return file;
}

} // namespace surgsim
