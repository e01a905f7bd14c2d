#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "surgsim/demos.hpp"
#include "surgsim/errors.hpp"
#include "surgsim/rl.hpp"

using namespace surgsim;
using namespace surgsim::rl;
using env::TaskId;

namespace {

std::string temp_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("surgsim_" + name);
    std::filesystem::remove_all(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

MatrixXd random_matrix(int r, int c, Rng& rng, double scale = 1.0) {
    std::uniform_real_distribution<double> u(-scale, scale);
    MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

// Central differences of f over the parameters of `net`.
template <class F> VectorXd numeric_grad(Mlp& net, F f, double h = 1e-6) {
    const VectorXd p0 = net.params();
    VectorXd g(p0.size());
    for (Eigen::Index i = 0; i < p0.size(); ++i) {
        VectorXd p = p0;
        p[i] += h;
        net.set_params(p);
        const double up = f();
        p[i] = p0[i] - h;
        net.set_params(p);
        const double down = f();
        g[i] = (up - down) / (2 * h);
    }
    net.set_params(p0);
    return g;
}

double rel_err(const VectorXd& a, const VectorXd& b) { return (a - b).norm() / std::max(b.norm(), 1e-12); }

Batch random_batch(const Agent& agent, int n, Rng& rng) {
    Batch b;
    b.obs = random_matrix(agent.obs_dim(), n, rng);
    b.goal = random_matrix(agent.goal_dim(), n, rng);
    b.action = random_matrix(agent.action_dim(), n, rng, 0.9);
    b.next_obs = random_matrix(agent.obs_dim(), n, rng);
    b.next_goal = b.goal;
    b.reward = -(random_matrix(n, 1, rng).array() > 0.0).cast<double>().matrix();
    b.terminal = VectorXd::Zero(n);
    return b;
}

// Zero-initialized biases put samples with an all-dead layer exactly on a
// ReLU kink, where finite differences are meaningless.
void jitter(Mlp& net, Rng& rng) { net.set_params(net.params() + random_matrix(net.param_count(), 1, rng, 0.05)); }

AgentConfig tiny_config() {
    AgentConfig c;
    c.hidden = {6, 5};
    return c;
}

std::vector<Episode> random_episodes(env::TaskEnv& env, int n, std::uint64_t seed0, Rng& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const int dim = env.action_spec().dim();
    std::vector<Episode> out;
    for (int i = 0; i < n; ++i)
        out.push_back(rollout(env, seed0 + i, [&](const env::Observation&) {
            VectorXd a(dim);
            for (int k = 0; k < dim; ++k) a[k] = u(rng);
            return a;
        }));
    return out;
}

TrainConfig small_train_config() {
    TrainConfig c;
    c.task = env::default_config(TaskId::NeedleReach);
    c.epochs = 3;
    c.cycles = 2;
    c.episodes_per_cycle = 2;
    c.updates_per_cycle = 5;
    c.test_episodes = 2;
    c.agent.hidden = {16, 16};
    c.agent.batch_size = 32;
    c.agent.demo_batch_size = 8;
    return c;
}

} // namespace

TEST_CASE("Mlp backprop matches finite differences") {
    Rng rng(3);
    for (bool tanh_out : {false, true}) {
        CAPTURE(tanh_out);
        Mlp net({4, 7, 6, 3}, tanh_out, rng);
        jitter(net, rng);
        const MatrixXd x = random_matrix(4, 5, rng);
        const MatrixXd w = random_matrix(3, 5, rng);
        auto loss = [&] { return net.forward(x).cwiseProduct(w).sum(); };

        Mlp::Cache cache;
        net.forward(x, &cache);
        auto grad = net.zero_grad();
        const MatrixXd dx = net.backward(cache, w, &grad);
        CHECK(rel_err(Mlp::flatten(grad), numeric_grad(net, loss)) < 1e-4);

        MatrixXd dx_num(4, 5);
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 5; ++j) {
                MatrixXd xp = x, xm = x;
                xp(i, j) += 1e-6;
                xm(i, j) -= 1e-6;
                dx_num(i, j) = (net.forward(xp).cwiseProduct(w).sum() - net.forward(xm).cwiseProduct(w).sum()) / 2e-6;
            }
        CHECK((dx - dx_num).norm() / dx_num.norm() < 1e-4);
    }
}

TEST_CASE("critic and actor losses match finite differences") {
    Rng rng(5);
    Agent agent(3, 2, 2, tiny_config(), 11);
    jitter(agent.actor(), rng);
    jitter(agent.critic(), rng);
    // Make online and target nets differ so the TD target is not trivial.
    agent.critic_target().set_params(agent.critic().params() + random_matrix(agent.critic().param_count(), 1, rng, 0.1));
    const Batch batch = random_batch(agent, 8, rng);

    auto cg = agent.critic().zero_grad();
    critic_loss(agent, batch, &cg);
    CHECK(rel_err(Mlp::flatten(cg), numeric_grad(agent.critic(), [&] { return critic_loss(agent, batch); })) < 1e-4);

    auto ag = agent.actor().zero_grad();
    actor_loss(agent, batch, nullptr, &ag);
    CHECK(rel_err(Mlp::flatten(ag), numeric_grad(agent.actor(), [&] { return actor_loss(agent, batch); })) < 1e-4);

    // With cloning: the Q filter is piecewise constant, so away from its
    // switching points the gradient is still exact.
    agent.config_mut().bc_weight = 0.7;
    agent.config_mut().q_weight = 0.3;
    const Batch demos = random_batch(agent, 4, rng);
    auto bg = agent.actor().zero_grad();
    double bc = 0.0;
    actor_loss(agent, batch, &demos, &bg, &bc);
    CHECK(bc > 0.0);
    CHECK(rel_err(Mlp::flatten(bg), numeric_grad(agent.actor(), [&] { return actor_loss(agent, batch, &demos); })) <
          1e-4);
}

TEST_CASE("TD targets are clipped to the reward range") {
    Rng rng(7);
    Agent agent(3, 2, 2, tiny_config(), 1);
    Batch batch = random_batch(agent, 6, rng);
    batch.reward.setZero();
    const MatrixXd q = agent.q_values(batch.obs, batch.goal, batch.action);

    // Target net predicting +100 everywhere: y clips to 0.
    auto& bias = agent.critic_target().biases().back();
    bias[0] = 100.0;
    CHECK(critic_loss(agent, batch) == doctest::Approx(q.squaredNorm() / 6).epsilon(1e-12));
    // Predicting -1000: y clips to -1/(1 - gamma) = -50.
    bias[0] = -1000.0;
    CHECK(critic_loss(agent, batch) == doctest::Approx((q.array() + 50.0).square().mean()).epsilon(1e-12));
    // Absorbing transitions ignore the target entirely.
    batch.terminal.setOnes();
    batch.reward.setConstant(-1.0);
    CHECK(critic_loss(agent, batch) == doctest::Approx((q.array() + 1.0).square().mean()).epsilon(1e-12));
}

TEST_CASE("Polyak averaging") {
    Rng rng(1);
    Agent agent(3, 2, 2, tiny_config(), 2);
    Mlp online = agent.actor();
    online.set_params(online.params() + VectorXd::Ones(online.param_count()));
    Mlp target = agent.actor();
    const VectorXd before = target.params();

    online.blend_into(target, 1.0);
    CHECK(target.params() == before);
    online.blend_into(target, 0.0);
    CHECK(target.params() == online.params());
    Mlp half = agent.actor();
    online.blend_into(half, 0.95);
    CHECK((half.params() - (0.95 * before + 0.05 * online.params())).norm() < 1e-12);
}

TEST_CASE("Q-filtered behavior cloning") {
    Rng rng(9);
    AgentConfig cfg;
    cfg.hidden = {4};
    Agent agent(2, 1, 1, cfg, 4);
    // Critic Q(s, g, a) = a + 10: higher actions score higher.
    auto& w = agent.critic().weights();
    auto& b = agent.critic().biases();
    w[0].setZero();
    w[0](0, 3) = 1.0;
    b[0].setZero();
    b[0][0] = 10.0;
    w[1].setZero();
    w[1](0, 0) = 1.0;
    b[1].setZero();

    Batch demos = random_batch(agent, 2, rng);
    const MatrixXd pi = agent.policy(demos.obs, demos.goal);
    // Sample 0 demonstrates a higher-valued action and passes; sample 1 does not.
    demos.action(0, 0) = pi(0, 0) + 0.3;
    demos.action(0, 1) = pi(0, 1) - 0.5;
    CHECK(bc_q_filter_loss(agent, demos) == doctest::Approx(0.09).epsilon(1e-9));

    demos.action(0, 0) = pi(0, 0) - 0.2;
    CHECK(bc_q_filter_loss(agent, demos) == 0.0);

    agent.config_mut().q_filter = false;
    CHECK(bc_q_filter_loss(agent, demos) == doctest::Approx(0.04 + 0.25).epsilon(1e-9));

    demos.action = pi;
    CHECK(bc_q_filter_loss(agent, demos) == 0.0);
}

TEST_CASE("critic loss vanishes on an all-success batch") {
    Rng rng(12);
    Agent agent(3, 2, 2, tiny_config(), 6);
    Batch batch = random_batch(agent, 32, rng);
    batch.reward.setZero();
    const double start = critic_loss(agent, batch);
    for (int i = 0; i < 2000; ++i) {
        agent.update(batch);
        agent.update_targets();
    }
    CHECK(critic_loss(agent, batch) < 1e-4);
    CHECK(critic_loss(agent, batch) < 1e-2 * start);
    const MatrixXd q = agent.q_values(batch.obs, batch.goal, batch.action);
    CHECK(q.maxCoeff() < 0.05);
}

TEST_CASE("non-finite updates are rejected") {
    Rng rng(2);
    Agent agent(3, 2, 2, tiny_config(), 8);
    Batch batch = random_batch(agent, 8, rng);
    batch.reward[3] = std::numeric_limits<double>::quiet_NaN();
    const VectorXd actor = agent.actor().params(), critic = agent.critic().params();
    const auto stats = agent.update(batch);
    CHECK(stats.rejected);
    CHECK(agent.actor().params() == actor);
    CHECK(agent.critic().params() == critic);
}

TEST_CASE("Normalizer statistics and clipping") {
    Rng rng(4);
    MatrixXd x = random_matrix(3, 200, rng);
    x.row(0) = x.row(0) * 4.0 + MatrixXd::Constant(1, 200, 2.0);
    x.row(2).setConstant(0.7); // zero variance row
    Normalizer n(3, 0.01, 5.0);
    n.update(x.leftCols(120));
    n.update(x.rightCols(80));
    for (int r = 0; r < 3; ++r) {
        const double mean = x.row(r).mean();
        const double var = (x.row(r).array() - mean).square().mean();
        CHECK(n.mean()[r] == doctest::Approx(mean).epsilon(1e-12));
        CHECK(n.stddev()[r] == doctest::Approx(std::sqrt(std::max(var, 1e-4))).epsilon(1e-9));
    }
    VectorXd probe(3);
    probe << 1e6, n.mean()[1], 0.7;
    const VectorXd z = n.normalize(probe);
    CHECK(z[0] == 5.0);
    CHECK(std::abs(z[1]) < 1e-12);
    CHECK(std::abs(z[2]) < 1e-9);
    CHECK(Normalizer::from_json(n.to_json()).normalize(probe) == z);
}

TEST_CASE("HER relabeling recomputes rewards exactly") {
    env::TaskEnv env(env::default_config(TaskId::NeedleReach));
    Rng rng(21);
    ReplayBuffer buffer;
    for (auto& ep : random_episodes(env, 6, 0, rng)) buffer.add(ep);

    const HerConfig her{4, env.config()};
    const Batch b = her_sample(buffer, 2000, her, rng);
    int relabeled = 0;
    for (int i = 0; i < b.size(); ++i) {
        // Locate the stored transition.
        int found_e = -1, found_t = -1;
        for (size_t e = 0; e < buffer.episodes().size() && found_e < 0; ++e) {
            const auto& ep = buffer.episodes()[e];
            for (int t = 0; t < ep.length(); ++t)
                if (ep.obs[t] == b.obs.col(i) && ep.actions[t] == b.action.col(i)) {
                    found_e = static_cast<int>(e);
                    found_t = t;
                    break;
                }
        }
        REQUIRE(found_e >= 0);
        const auto& ep = buffer.episodes()[found_e];
        CHECK(b.next_obs.col(i) == ep.obs[found_t + 1]);
        const VectorXd goal = b.goal.col(i);
        CHECK(b.reward[i] == env::compute_reward(TaskId::NeedleReach, ep.achieved_goals[found_t + 1], goal, env.config()));
        if (goal != ep.desired_goals[found_t]) {
            ++relabeled;
            bool from_future = false;
            for (int f = found_t + 1; f <= ep.length(); ++f) from_future |= ep.achieved_goals[f] == goal;
            CHECK(from_future);
        }
    }
    // Relabel probability 1 - 1/(1 + 4) = 0.8; binomial sd ~0.009.
    CHECK(relabeled / 2000.0 == doctest::Approx(0.8).epsilon(0.05));

    // k_future = 0 keeps stored goals and rewards.
    const Batch plain = her_sample(buffer, 500, HerConfig{0, env.config()}, rng);
    for (int i = 0; i < plain.size(); ++i) {
        bool match = false;
        for (const auto& ep : buffer.episodes())
            for (int t = 0; t < ep.length() && !match; ++t)
                match = ep.obs[t] == plain.obs.col(i) && ep.actions[t] == plain.action.col(i) &&
                        ep.desired_goals[t] == plain.goal.col(i) && ep.rewards[t] == plain.reward[i];
        CHECK(match);
    }
}

TEST_CASE("relabeling with the final achieved goal gives reward 0 at the last step") {
    env::TaskEnv env(env::default_config(TaskId::NeedlePick));
    Rng rng(8);
    Episode ep = random_episodes(env, 1, 3, rng).front();
    // Keep only the last transition so every relabel uses the final achieved goal.
    Episode last;
    const int T = ep.length();
    last.obs = {ep.obs[T - 1], ep.obs[T]};
    last.achieved_goals = {ep.achieved_goals[T - 1], ep.achieved_goals[T]};
    last.desired_goals = {ep.desired_goals[T - 1]};
    last.actions = {ep.actions[T - 1]};
    last.rewards = {ep.rewards[T - 1]};
    last.successes = {ep.successes[T - 1]};
    REQUIRE(last.rewards[0] == -1.0);
    ReplayBuffer buffer;
    buffer.add(last);
    const Batch b = her_sample(buffer, 200, HerConfig{4, env.config()}, rng);
    int zeros = 0;
    for (int i = 0; i < b.size(); ++i) {
        if (b.goal.col(i) == ep.achieved_goals[T]) {
            CHECK(b.reward[i] == 0.0);
            ++zeros;
        } else {
            CHECK(b.reward[i] == -1.0);
        }
    }
    CHECK(zeros > 100);
}

TEST_CASE("replay evicts whole oldest episodes") {
    env::TaskEnv env(env::default_config(TaskId::NeedleReach));
    Rng rng(1);
    ReplayBuffer buffer(120);
    const auto eps = random_episodes(env, 5, 40, rng);
    for (const auto& ep : eps) buffer.add(ep);
    CHECK(buffer.transitions() == 100);
    CHECK(buffer.episodes().size() == 2);
    CHECK(buffer.episodes().front().seed == 43);
    CHECK(buffer.episodes().back().seed == 44);
}

TEST_CASE("ActiveTrack replay keeps rewards and marks lost-target terminations") {
    env::TaskEnv env(env::default_config(TaskId::ActiveTrack));
    Rng rng(5);
    ReplayBuffer buffer;
    Episode ep = random_episodes(env, 1, 0, rng).front();
    const bool cut = ep.length() < env.horizon();
    buffer.add(ep, cut);
    const Batch b = her_sample(buffer, 300, HerConfig{4, env.config()}, rng);
    CHECK(b.goal.rows() == 0);
    for (int i = 0; i < b.size(); ++i) {
        int t = 0;
        while (ep.obs[t] != b.obs.col(i)) ++t;
        CHECK(b.reward[i] == ep.rewards[t]);
        CHECK(b.terminal[i] == ((cut && t == ep.length() - 1) ? 1.0 : 0.0));
    }
}

TEST_CASE("agent actions are bounded and serialization is exact") {
    env::TaskEnv env(env::default_config(TaskId::NeedlePick));
    Agent agent(env.observation_dim(), env.goal_dim(), env.action_spec().dim(), {}, 3);
    Rng rng(3);
    for (const auto& ep : random_episodes(env, 2, 0, rng)) agent.update_normalizers(ep);
    const std::string dir = temp_dir("agent");
    std::filesystem::create_directories(dir);
    const std::string path = dir + "/agent.json";
    save_agent(agent, path);
    const Agent loaded = load_agent(path);
    const auto obs = env.reset(4);
    for (int i = 0; i < 20; ++i) {
        VectorXd o = obs.observation + random_matrix(env.observation_dim(), 1, rng, 0.5);
        const VectorXd a = agent.act(o, obs.desired_goal);
        CHECK(a.cwiseAbs().maxCoeff() <= 1.0);
        CHECK(loaded.act(o, obs.desired_goal) == a);
        const VectorXd e = agent.explore(o, obs.desired_goal, rng);
        CHECK(e.cwiseAbs().maxCoeff() <= 1.0);
    }
    std::ofstream(path) << "{broken";
    CHECK_THROWS_AS(load_agent(path), CorruptFile);
    std::filesystem::remove_all(dir);
}

TEST_CASE("seeded training is reproducible and resumable") {
    const auto cfg = small_train_config();
    const std::string a = temp_dir("train_a"), b = temp_dir("train_b"), c = temp_dir("train_c");
    const auto ra = train(cfg, a);
    const auto rb = train(cfg, b);
    REQUIRE(ra.metrics.size() == 3);
    CHECK(slurp(a + "/metrics.csv") == slurp(b + "/metrics.csv"));
    CHECK(ra.agent.actor().params() == rb.agent.actor().params());

    auto shorter = cfg;
    shorter.epochs = 2;
    train(shorter, c);
    const auto rc = train(cfg, c, true);
    CHECK(slurp(a + "/metrics.csv") == slurp(c + "/metrics.csv"));
    CHECK(ra.agent.actor().params() == rc.agent.actor().params());
    CHECK(ra.agent.critic_target().params() == rc.agent.critic_target().params());
    CHECK(rc.metrics.size() == 3);

    // Header plus one row per epoch.
    std::ifstream in(a + "/metrics.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == metrics_csv_header());
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 3);

    auto other = cfg;
    other.seed = 2;
    CHECK_THROWS_AS(train(other, c, true), ContractViolation);
    for (const auto& d : {a, b, c}) std::filesystem::remove_all(d);
}

TEST_CASE("demonstration-augmented training") {
    auto cfg = small_train_config();
    cfg.task = env::default_config(TaskId::NeedlePick);
    cfg.algo = Algo::HerDemo;
    cfg.epochs = 1;
    CHECK_THROWS_AS(train(cfg), ContractViolation);

    const std::string dir = temp_dir("her_demo");
    std::filesystem::create_directories(dir);
    cfg.demo_path = dir + "/demos.jsonl";
    env::TaskEnv env(cfg.task);
    demos::collect_demos(env, 4, cfg.demo_path, 0);
    const auto r = train(cfg);
    REQUIRE(r.metrics.size() == 1);
    CHECK(r.metrics[0].bc_loss > 0.0);
    CHECK(r.metrics[0].rejected_updates == 0);

    auto wrong = cfg;
    wrong.task.grasp_mode = phys::GraspMode::approx(0.002);
    CHECK_THROWS_AS(train(wrong), ContractViolation);
    std::filesystem::remove_all(dir);
}

TEST_CASE("random actions do not solve NeedlePick") {
    Rng rng(17);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const PolicyFn random = [&](const env::Observation&) {
        VectorXd a(5);
        for (int i = 0; i < 5; ++i) a[i] = u(rng);
        return a;
    };
    const auto r = evaluate(random, env::default_config(TaskId::NeedlePick), 100, 0);
    CHECK(r.episodes == 100);
    CHECK(r.success_rate <= 0.02);
    CHECK(r.mean_reward < -0.9);
}

TEST_CASE("cross-evaluation matrix layout") {
    const auto task = env::default_config(TaskId::NeedlePick);
    env::TaskEnv env(task);
    AgentConfig small;
    small.hidden = {8};
    const Agent a(env.observation_dim(), env.goal_dim(), 5, small, 1);
    const Agent b(env.observation_dim(), env.goal_dim(), 5, small, 2);
    const std::vector<phys::GraspMode> modes = {phys::GraspMode::approx(0.001), phys::GraspMode::approx(0.002),
                                                phys::GraspMode::approx(0.003), phys::GraspMode::interact()};
    const auto m = cross_eval_matrix({{phys::GraspMode::interact(), {a, b}}, {phys::GraspMode::approx(0.002), {a}}},
                                     modes, task, 2, 0);
    CHECK(m.train_modes == std::vector<std::string>{phys::GraspMode::interact().label(),
                                                    phys::GraspMode::approx(0.002).label()});
    REQUIRE(m.test_modes.size() == 4);
    CHECK(m.test_modes[3] == m.train_modes[0]);
    CHECK(m.test_modes[1] == m.train_modes[1]);
    for (size_t r = 0; r < 2; ++r)
        for (size_t c = 0; c < 4; ++c) {
            CHECK(m.mean[r][c] >= 0.0);
            CHECK(m.mean[r][c] <= 1.0);
            CHECK(m.stddev[r][c] >= 0.0);
        }
    CHECK(m.stddev[1][0] == 0.0); // single policy
    CHECK_THROWS_AS(cross_eval_matrix({{phys::GraspMode::interact(), {}}}, modes, task, 1, 0), ContractViolation);
}

TEST_CASE("per-task training defaults") {
    for (TaskId t : env::all_tasks()) {
        const auto c = default_train_config(t, Algo::Her);
        CAPTURE(env::task_name(t));
        CHECK(c.task.to_json() == env::default_config(t).to_json());
        CHECK(c.algo == Algo::Her);
        const bool weak = t == TaskId::NeedleReach || t == TaskId::EcmReach || t == TaskId::MisOrient;
        CHECK(c.agent.action_l2 == (weak ? 0.01 : 1.0));
        CHECK(c.agent.random_eps == (t == TaskId::StaticTrack ? 0.1 : 0.3));
        const auto demo = default_train_config(t, Algo::HerDemo);
        CHECK(demo.agent.q_weight == 0.1);
        CHECK(demo.agent.lr_actor == 3e-4);
        CHECK(c.agent.q_weight == 1.0);
        // Round trips through the JSON used by checkpoints and --train-config.
        CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
    }
}
