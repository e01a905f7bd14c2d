#pragma once

// Goal-conditioned off-policy learning: MLPs with hand-written backprop,
// observation normalizers, whole-episode replay with hindsight relabeling,
// DDPG with optional Q-filtered behavior cloning, and the training and
// evaluation loops.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "surgsim/env.hpp"
#include "surgsim/rollout.hpp"

namespace surgsim::rl {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Rng = std::mt19937_64;

// --- Networks ---------------------------------------------------------------

/// Fully connected net, ReLU hidden layers, linear or tanh output. Batches
/// are column-major: one sample per column.
class Mlp {
public:
    struct Cache {
        std::vector<MatrixXd> activations; // input, each hidden output, final output
    };
    struct Grad {
        std::vector<MatrixXd> w;
        std::vector<VectorXd> b;
    };

    Mlp() = default;
    /// sizes = {in, hidden..., out}; Glorot-uniform weights, zero biases.
    Mlp(const std::vector<int>& sizes, bool tanh_output, Rng& rng);

    MatrixXd forward(const MatrixXd& x, Cache* cache = nullptr) const;
    /// Accumulates parameter gradients into `grad` (if given) and returns dL/dx.
    MatrixXd backward(const Cache& cache, const MatrixXd& d_out, Grad* grad) const;
    Grad zero_grad() const;

    int input_dim() const { return static_cast<int>(w_.front().cols()); }
    int output_dim() const { return static_cast<int>(w_.back().rows()); }
    int param_count() const;
    VectorXd params() const;
    void set_params(const VectorXd& p);
    static VectorXd flatten(const Grad& g);

    /// target = polyak * target + (1 - polyak) * this, per parameter.
    void blend_into(Mlp& target, double polyak) const;

    nlohmann::json to_json() const;
    static Mlp from_json(const nlohmann::json& j);

    std::vector<MatrixXd>& weights() { return w_; }
    std::vector<VectorXd>& biases() { return b_; }

private:
    std::vector<MatrixXd> w_;
    std::vector<VectorXd> b_;
    bool tanh_output_ = false;
};

class Adam {
public:
    Adam() = default;
    Adam(const Mlp& net, double lr);
    void step(Mlp& net, const Mlp::Grad& grad);
    nlohmann::json to_json() const;
    static Adam from_json(const nlohmann::json& j);

private:
    double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    long t_ = 0;
    VectorXd m_, v_;
};

/// Running mean and standard deviation; normalized values are clipped.
class Normalizer {
public:
    Normalizer() = default;
    explicit Normalizer(int dim, double eps = 0.01, double clip = 5.0);

    void update(const MatrixXd& samples); // one sample per column
    MatrixXd normalize(const MatrixXd& x) const;
    VectorXd mean() const { return mean_; }
    VectorXd stddev() const { return std_; }
    int dim() const { return static_cast<int>(sum_.size()); }

    nlohmann::json to_json() const;
    static Normalizer from_json(const nlohmann::json& j);

private:
    VectorXd sum_, sumsq_, mean_, std_;
    double count_ = 0.0;
    double eps_ = 0.01, clip_ = 5.0;
};

// --- Replay -------------------------------------------------------------------

struct Batch {
    MatrixXd obs, goal, action, next_obs, next_goal;
    VectorXd reward;
    VectorXd terminal; // 1 when the next state is absorbing
    int size() const { return static_cast<int>(action.cols()); }
};

/// Ring buffer of whole episodes, bounded by total transitions.
class ReplayBuffer {
public:
    explicit ReplayBuffer(long capacity_transitions = 1'000'000) : capacity_(capacity_transitions) {}
    void add(Episode ep, bool terminal_at_end = false);
    const std::vector<Episode>& episodes() const { return episodes_; }
    const std::vector<bool>& terminal_flags() const { return terminal_; }
    long transitions() const { return transitions_; }
    bool empty() const { return episodes_.empty(); }
    void clear();

private:
    long capacity_;
    long transitions_ = 0;
    std::vector<Episode> episodes_;
    std::vector<bool> terminal_;
};

struct HerConfig {
    int k_future = 4;          // relabel probability 1 - 1/(1 + k)
    env::TaskConfig task;      // for reward recomputation
};

/// Samples transitions uniformly over (episode, step). With probability
/// 1 - 1/(1 + k_future) the goal is replaced by the achieved goal of a
/// uniformly chosen later step of the same episode and the reward is
/// recomputed. k_future = 0 keeps stored goals and rewards. Tasks without
/// goals always use stored rewards.
Batch her_sample(const ReplayBuffer& buffer, int batch_size, const HerConfig& config, Rng& rng);

// --- Agent ----------------------------------------------------------------------

struct AgentConfig {
    std::vector<int> hidden = {64, 64, 64};
    double lr_actor = 1e-3;
    double lr_critic = 1e-3;
    double gamma = 0.98;
    double polyak = 0.95;
    double action_l2 = 1.0;
    int batch_size = 256;
    // Target clipping to [-1/(1-gamma), 0] for 0/-1 rewards.
    bool clip_target = true;
    // Behavior cloning from demonstrations.
    double bc_weight = 1.0;        // used only when a demo batch is given
    double q_weight = 1.0;         // weight of -Q in the actor loss when cloning
    bool q_filter = true;
    int demo_batch_size = 32;      // taken out of batch_size, so 1/8 of each batch
    double noise_eps = 0.2;
    double random_eps = 0.3;

    nlohmann::json to_json() const;
    static AgentConfig from_json(const nlohmann::json& j);
};

struct UpdateStats {
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    double bc_loss = 0.0;
    bool rejected = false;
};

class Agent {
public:
    Agent() = default;
    Agent(int obs_dim, int goal_dim, int action_dim, const AgentConfig& config, std::uint64_t seed);

    /// Deterministic action in [-1, 1].
    VectorXd act(const VectorXd& obs, const VectorXd& goal) const;
    /// Epsilon-random plus Gaussian exploration.
    VectorXd explore(const VectorXd& obs, const VectorXd& goal, Rng& rng) const;

    void update_normalizers(const Episode& ep);
    UpdateStats update(const Batch& batch, const Batch* demos = nullptr);
    void update_targets();

    /// Network inputs after normalization.
    MatrixXd actor_input(const MatrixXd& obs, const MatrixXd& goal) const;
    MatrixXd q_values(const MatrixXd& obs, const MatrixXd& goal, const MatrixXd& action) const;
    MatrixXd policy(const MatrixXd& obs, const MatrixXd& goal) const;

    PolicyFn policy_fn() const;

    const AgentConfig& config() const { return config_; }
    AgentConfig& config_mut() { return config_; }
    Mlp& actor() { return actor_; }
    Mlp& critic() { return critic_; }
    Mlp& actor_target() { return actor_t_; }
    Mlp& critic_target() { return critic_t_; }
    const Mlp& actor() const { return actor_; }
    const Mlp& critic() const { return critic_; }
    const Mlp& actor_target() const { return actor_t_; }
    const Mlp& critic_target() const { return critic_t_; }
    const Normalizer& obs_normalizer() const { return o_norm_; }
    const Normalizer& goal_normalizer() const { return g_norm_; }
    int obs_dim() const { return obs_dim_; }
    int goal_dim() const { return goal_dim_; }
    int action_dim() const { return action_dim_; }

    nlohmann::json to_json() const;
    static Agent from_json(const nlohmann::json& j);

private:
    int obs_dim_ = 0, goal_dim_ = 0, action_dim_ = 0;
    AgentConfig config_;
    Mlp actor_, critic_, actor_t_, critic_t_;
    Adam actor_opt_, critic_opt_;
    Normalizer o_norm_, g_norm_;
};

/// Critic regression loss mean((Q(s,a) - y)^2) with y from the target nets.
/// Fills the critic gradient when `grad` is given.
double critic_loss(const Agent& agent, const Batch& batch, Mlp::Grad* grad = nullptr);

/// Actor loss -w_q mean Q(s, pi(s)) + action_l2 mean(pi^2) over batch and
/// demos, plus bc_weight times the Q-filtered cloning loss on the demos.
/// w_q is q_weight when cloning and 1 otherwise. Fills the actor gradient
/// and the cloning term when given.
double actor_loss(const Agent& agent, const Batch& batch, const Batch* demos = nullptr, Mlp::Grad* grad = nullptr,
                  double* bc_loss = nullptr);

/// Q-filtered behavior cloning loss: sum over samples whose demonstrated
/// action scores higher than the policy action (all samples when the filter
/// is off) of |pi(s) - a_demo|^2.
double bc_q_filter_loss(const Agent& agent, const Batch& demo_batch);

/// One DDPG step (critic then actor). Rejects the step, leaving the agent
/// unchanged, if any loss is non-finite.
UpdateStats ddpg_update(Agent& agent, const Batch& batch, const Batch* demo_batch = nullptr);

// --- Training -------------------------------------------------------------------

enum class Algo { Ddpg, Her, HerDemo };
std::string algo_name(Algo a);
Algo parse_algo(const std::string& name);

struct TrainConfig {
    env::TaskConfig task;
    Algo algo = Algo::Her;
    std::uint64_t seed = 1;
    int epochs = 30;
    int cycles = 10;                 // per epoch
    int episodes_per_cycle = 4;      // 40 episodes per epoch
    int updates_per_cycle = 80;
    int test_episodes = 20;
    int k_future = 4;
    long buffer_size = 1'000'000;
    std::string demo_path;           // her_demo only
    int n_demos = 100;
    AgentConfig agent;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Defaults for one task. The reach and roll tasks learn faster with a weak
/// action penalty; precise tracking and grasping need the stronger one, and
/// StaticTrack also explores with less noise.
TrainConfig default_train_config(env::TaskId task, Algo algo);

struct EpochMetrics {
    int epoch = 0;
    long episodes = 0;
    double train_success = 0.0;
    double test_success = 0.0;
    double test_mean_reward = 0.0;
    double critic_loss = 0.0;
    double actor_loss = 0.0;
    double bc_loss = 0.0;
    int rejected_updates = 0;
};

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

struct TrainResult {
    std::vector<EpochMetrics> metrics;
    Agent agent;
};

/// Runs training. When out_dir is non-empty, writes metrics.csv and a
/// checkpoint after every epoch; with resume = true a run picks up from the
/// checkpoint in out_dir and produces the same metrics as an uninterrupted
/// run. epoch_callback, if set, is called after each epoch.
TrainResult train(const TrainConfig& config, const std::string& out_dir = "", bool resume = false,
                  const std::function<void(const EpochMetrics&)>& epoch_callback = {});

struct EvalResult {
    int episodes = 0;
    double success_rate = 0.0;
    double mean_reward = 0.0; // per step, averaged over episodes
};

/// Runs n_episodes deterministic episodes with seeds seed0, seed0 + 1, ...
EvalResult evaluate(const PolicyFn& policy, const env::TaskConfig& task, int n_episodes, std::uint64_t seed0);

/// Success rates of each trained-mode policy set (rows) evaluated under each
/// test mode (columns), averaged over the policies in a row.
struct CrossEvalMatrix {
    std::vector<std::string> train_modes;
    std::vector<std::string> test_modes;
    std::vector<std::vector<double>> mean;
    std::vector<std::vector<double>> stddev;
};

CrossEvalMatrix cross_eval_matrix(const std::vector<std::pair<phys::GraspMode, std::vector<Agent>>>& policies,
                                  const std::vector<phys::GraspMode>& test_modes, const env::TaskConfig& task,
                                  int n_episodes, std::uint64_t seed0);

void save_agent(const Agent& agent, const std::string& path);
Agent load_agent(const std::string& path);

} // namespace surgsim::rl
