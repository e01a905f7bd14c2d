#pragma once

// Whole-episode records, rollouts and the JSON-lines episode file format
// shared by demonstrations, replay and training.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "surgsim/env.hpp"

namespace surgsim {

struct Episode {
    std::uint64_t seed = 0;
    // obs and achieved goals have T + 1 entries; the rest have T.
    std::vector<Eigen::VectorXd> obs;
    std::vector<Eigen::VectorXd> achieved_goals;
    std::vector<Eigen::VectorXd> desired_goals;
    std::vector<Eigen::VectorXd> actions;
    std::vector<double> rewards;
    std::vector<bool> successes;

    int length() const { return static_cast<int>(actions.size()); }
    bool final_success() const { return !successes.empty() && successes.back(); }
    double total_reward() const;
    double mean_reward() const;
};

/// Maps the latest observation to an action.
using PolicyFn = std::function<Eigen::VectorXd(const env::Observation&)>;

/// Resets with `seed` and steps until done.
Episode rollout(env::TaskEnv& env, std::uint64_t seed, const PolicyFn& policy);

/// Whether an episode counts as solved: final-step success for goal-based
/// tasks; for ActiveTrack the target is in view on at least
/// `track_fraction` of the steps and the episode ran to the horizon.
bool episode_solved(const env::TaskEnv& env, const Episode& ep, double track_fraction = 0.95);

struct EpisodeFile {
    env::TaskConfig config;
    std::vector<Episode> episodes;
};

/// Appends one header line {task, env_config_hash, seed, grasp_mode,
/// length, digest} and one line per transition.
void write_episodes(const std::string& path, const env::TaskConfig& config, const std::vector<Episode>& episodes,
                    bool append = false);

/// Reads an episode file. Throws CorruptFile on malformed lines or digest
/// mismatch, and ContractViolation when `expected` is given and the stored
/// env_config_hash differs from it.
EpisodeFile read_episodes(const std::string& path, const env::TaskConfig* expected = nullptr);

} // namespace surgsim
