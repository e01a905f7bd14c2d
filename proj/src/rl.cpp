#include "surgsim/rl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "surgsim/errors.hpp"

namespace surgsim::rl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json vec_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

VectorXd vec_from(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json mat_json(const MatrixXd& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

MatrixXd mat_from(const json& j) {
    const auto d = j.at("data").get<std::vector<double>>();
    return Eigen::Map<const MatrixXd>(d.data(), j.at("rows").get<Eigen::Index>(), j.at("cols").get<Eigen::Index>());
}

MatrixXd vstack(const MatrixXd& a, const MatrixXd& b) {
    MatrixXd out(a.rows() + b.rows(), a.cols());
    out << a, b;
    return out;
}

MatrixXd hstack(const MatrixXd& a, const MatrixXd& b) {
    MatrixXd out(a.rows(), a.cols() + b.cols());
    out << a, b;
    return out;
}

Batch concat(const Batch& a, const Batch& b) {
    Batch out;
    out.obs = hstack(a.obs, b.obs);
    out.goal = hstack(a.goal, b.goal);
    out.action = hstack(a.action, b.action);
    out.next_obs = hstack(a.next_obs, b.next_obs);
    out.next_goal = hstack(a.next_goal, b.next_goal);
    out.reward = vstack(a.reward, b.reward);
    out.terminal = vstack(a.terminal, b.terminal);
    return out;
}

bool finite(const VectorXd& v) { return v.allFinite(); }

void write_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write '" + tmp + "'");
        out << text;
    }
    fs::rename(tmp, path);
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Binary replay snapshot: raw doubles, so a resumed run sees bit-identical data.
template <class T> void put(std::ostream& out, const T& v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

template <class T> T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw CorruptFile("replay snapshot truncated");
    return v;
}

void put_vecs(std::ostream& out, const std::vector<VectorXd>& vs) {
    put<std::int64_t>(out, static_cast<std::int64_t>(vs.size()));
    put<std::int64_t>(out, vs.empty() ? 0 : vs.front().size());
    for (const auto& v : vs) out.write(reinterpret_cast<const char*>(v.data()), sizeof(double) * v.size());
}

std::vector<VectorXd> get_vecs(std::istream& in) {
    const auto n = get<std::int64_t>(in);
    const auto d = get<std::int64_t>(in);
    std::vector<VectorXd> vs(n, VectorXd(d));
    for (auto& v : vs) {
        in.read(reinterpret_cast<char*>(v.data()), sizeof(double) * d);
        if (!in) throw CorruptFile("replay snapshot truncated");
    }
    return vs;
}

void save_buffer(const ReplayBuffer& buffer, const std::string& path) {
    std::ostringstream out(std::ios::binary);
    out.write("SSRB", 4);
    put<std::int64_t>(out, static_cast<std::int64_t>(buffer.episodes().size()));
    for (size_t i = 0; i < buffer.episodes().size(); ++i) {
        const auto& ep = buffer.episodes()[i];
        put<std::uint64_t>(out, ep.seed);
        put<std::uint8_t>(out, buffer.terminal_flags()[i]);
        put_vecs(out, ep.obs);
        put_vecs(out, ep.achieved_goals);
        put_vecs(out, ep.desired_goals);
        put_vecs(out, ep.actions);
        put<std::int64_t>(out, ep.length());
        for (int t = 0; t < ep.length(); ++t) {
            put<double>(out, ep.rewards[t]);
            put<std::uint8_t>(out, ep.successes[t]);
        }
    }
    write_atomic(path, out.str());
}

void load_buffer(ReplayBuffer& buffer, const std::string& path) {
    std::istringstream in(read_text(path), std::ios::binary);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "SSRB") throw CorruptFile(path + ": not a replay snapshot");
    buffer.clear();
    const auto n = get<std::int64_t>(in);
    for (std::int64_t i = 0; i < n; ++i) {
        Episode ep;
        ep.seed = get<std::uint64_t>(in);
        const bool terminal = get<std::uint8_t>(in) != 0;
        ep.obs = get_vecs(in);
        ep.achieved_goals = get_vecs(in);
        ep.desired_goals = get_vecs(in);
        ep.actions = get_vecs(in);
        const auto T = get<std::int64_t>(in);
        for (std::int64_t t = 0; t < T; ++t) {
            ep.rewards.push_back(get<double>(in));
            ep.successes.push_back(get<std::uint8_t>(in) != 0);
        }
        buffer.add(std::move(ep), terminal);
    }
}

std::string rng_state(const Rng& rng) {
    std::ostringstream ss;
    ss << rng;
    return ss.str();
}

void set_rng_state(Rng& rng, const std::string& s) {
    std::istringstream ss(s);
    ss >> rng;
    if (!ss) throw CorruptFile("bad rng state in checkpoint");
}

} // namespace

// --- Mlp ---------------------------------------------------------------------

Mlp::Mlp(const std::vector<int>& sizes, bool tanh_output, Rng& rng) : tanh_output_(tanh_output) {
    if (sizes.size() < 2) throw ContractViolation("Mlp needs at least input and output sizes");
    for (size_t l = 0; l + 1 < sizes.size(); ++l) {
        const int in = sizes[l], out = sizes[l + 1];
        const double limit = std::sqrt(6.0 / (in + out));
        std::uniform_real_distribution<double> u(-limit, limit);
        MatrixXd w(out, in);
        for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
        w_.push_back(std::move(w));
        b_.push_back(VectorXd::Zero(out));
    }
}

MatrixXd Mlp::forward(const MatrixXd& x, Cache* cache) const {
    if (x.rows() != input_dim())
        throw ContractViolation("Mlp input has " + std::to_string(x.rows()) + " rows, expected " +
                                std::to_string(input_dim()));
    if (cache) {
        cache->activations.clear();
        cache->activations.push_back(x);
    }
    MatrixXd a = x;
    const size_t L = w_.size();
    for (size_t l = 0; l < L; ++l) {
        MatrixXd z = w_[l] * a;
        z.colwise() += b_[l];
        if (l + 1 < L)
            a = z.cwiseMax(0.0);
        else
            a = tanh_output_ ? MatrixXd(z.array().tanh()) : z;
        if (cache) cache->activations.push_back(a);
    }
    return a;
}

MatrixXd Mlp::backward(const Cache& cache, const MatrixXd& d_out, Grad* grad) const {
    const size_t L = w_.size();
    MatrixXd d = d_out;
    for (size_t l = L; l-- > 0;) {
        const MatrixXd& out = cache.activations[l + 1];
        if (l + 1 < L)
            d = d.cwiseProduct((out.array() > 0.0).cast<double>().matrix());
        else if (tanh_output_)
            d = d.cwiseProduct((1.0 - out.array().square()).matrix());
        if (grad) {
            grad->w[l].noalias() += d * cache.activations[l].transpose();
            grad->b[l] += d.rowwise().sum();
        }
        d = w_[l].transpose() * d;
    }
    return d;
}

Mlp::Grad Mlp::zero_grad() const {
    Grad g;
    for (size_t l = 0; l < w_.size(); ++l) {
        g.w.push_back(MatrixXd::Zero(w_[l].rows(), w_[l].cols()));
        g.b.push_back(VectorXd::Zero(b_[l].size()));
    }
    return g;
}

int Mlp::param_count() const {
    int n = 0;
    for (size_t l = 0; l < w_.size(); ++l) n += static_cast<int>(w_[l].size() + b_[l].size());
    return n;
}

VectorXd Mlp::params() const {
    Grad g{w_, b_};
    return flatten(g);
}

void Mlp::set_params(const VectorXd& p) {
    if (p.size() != param_count()) throw ContractViolation("Mlp::set_params size mismatch");
    Eigen::Index k = 0;
    for (size_t l = 0; l < w_.size(); ++l) {
        w_[l] = Eigen::Map<const MatrixXd>(p.data() + k, w_[l].rows(), w_[l].cols());
        k += w_[l].size();
        b_[l] = p.segment(k, b_[l].size());
        k += b_[l].size();
    }
}

VectorXd Mlp::flatten(const Grad& g) {
    Eigen::Index n = 0;
    for (size_t l = 0; l < g.w.size(); ++l) n += g.w[l].size() + g.b[l].size();
    VectorXd out(n);
    Eigen::Index k = 0;
    for (size_t l = 0; l < g.w.size(); ++l) {
        out.segment(k, g.w[l].size()) = Eigen::Map<const VectorXd>(g.w[l].data(), g.w[l].size());
        k += g.w[l].size();
        out.segment(k, g.b[l].size()) = g.b[l];
        k += g.b[l].size();
    }
    return out;
}

void Mlp::blend_into(Mlp& target, double polyak) const {
    for (size_t l = 0; l < w_.size(); ++l) {
        target.w_[l] = polyak * target.w_[l] + (1.0 - polyak) * w_[l];
        target.b_[l] = polyak * target.b_[l] + (1.0 - polyak) * b_[l];
    }
}

json Mlp::to_json() const {
    json layers = json::array();
    for (size_t l = 0; l < w_.size(); ++l) layers.push_back({{"w", mat_json(w_[l])}, {"b", vec_json(b_[l])}});
    return {{"tanh_output", tanh_output_}, {"layers", layers}};
}

Mlp Mlp::from_json(const json& j) {
    Mlp m;
    m.tanh_output_ = j.at("tanh_output").get<bool>();
    for (const auto& layer : j.at("layers")) {
        m.w_.push_back(mat_from(layer.at("w")));
        m.b_.push_back(vec_from(layer.at("b")));
    }
    return m;
}

// --- Adam --------------------------------------------------------------------

Adam::Adam(const Mlp& net, double lr)
    : lr_(lr), m_(VectorXd::Zero(net.param_count())), v_(VectorXd::Zero(net.param_count())) {}

void Adam::step(Mlp& net, const Mlp::Grad& grad) {
    const VectorXd g = Mlp::flatten(grad);
    ++t_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * g;
    v_ = beta2_ * v_ + (1.0 - beta2_) * g.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    const VectorXd update = (m_ / c1).array() / ((v_ / c2).array().sqrt() + eps_);
    net.set_params(net.params() - lr_ * update);
}

json Adam::to_json() const {
    return {{"lr", lr_}, {"beta1", beta1_}, {"beta2", beta2_}, {"eps", eps_}, {"t", t_}, {"m", vec_json(m_)},
            {"v", vec_json(v_)}};
}

Adam Adam::from_json(const json& j) {
    Adam a;
    a.lr_ = j.at("lr");
    a.beta1_ = j.at("beta1");
    a.beta2_ = j.at("beta2");
    a.eps_ = j.at("eps");
    a.t_ = j.at("t");
    a.m_ = vec_from(j.at("m"));
    a.v_ = vec_from(j.at("v"));
    return a;
}

// --- Normalizer --------------------------------------------------------------

Normalizer::Normalizer(int dim, double eps, double clip)
    : sum_(VectorXd::Zero(dim)), sumsq_(VectorXd::Zero(dim)), mean_(VectorXd::Zero(dim)),
      std_(VectorXd::Ones(dim)), eps_(eps), clip_(clip) {}

void Normalizer::update(const MatrixXd& samples) {
    if (samples.rows() != dim()) throw ContractViolation("Normalizer::update dimension mismatch");
    if (samples.cols() == 0) return;
    sum_ += samples.rowwise().sum();
    sumsq_ += samples.array().square().matrix().rowwise().sum();
    count_ += static_cast<double>(samples.cols());
    mean_ = sum_ / count_;
    const VectorXd var = (sumsq_ / count_ - mean_.cwiseAbs2()).cwiseMax(eps_ * eps_);
    std_ = var.cwiseSqrt();
}

MatrixXd Normalizer::normalize(const MatrixXd& x) const {
    MatrixXd out = (x.colwise() - mean_).array().colwise() / std_.array();
    return out.cwiseMax(-clip_).cwiseMin(clip_);
}

json Normalizer::to_json() const {
    return {{"sum", vec_json(sum_)}, {"sumsq", vec_json(sumsq_)}, {"mean", vec_json(mean_)},
            {"std", vec_json(std_)}, {"count", count_}, {"eps", eps_}, {"clip", clip_}};
}

Normalizer Normalizer::from_json(const json& j) {
    Normalizer n;
    n.sum_ = vec_from(j.at("sum"));
    n.sumsq_ = vec_from(j.at("sumsq"));
    n.mean_ = vec_from(j.at("mean"));
    n.std_ = vec_from(j.at("std"));
    n.count_ = j.at("count");
    n.eps_ = j.at("eps");
    n.clip_ = j.at("clip");
    return n;
}

// --- Replay ------------------------------------------------------------------

void ReplayBuffer::add(Episode ep, bool terminal_at_end) {
    if (ep.length() == 0) throw ContractViolation("cannot store an empty episode");
    transitions_ += ep.length();
    episodes_.push_back(std::move(ep));
    terminal_.push_back(terminal_at_end);
    while (transitions_ > capacity_ && episodes_.size() > 1) {
        transitions_ -= episodes_.front().length();
        episodes_.erase(episodes_.begin());
        terminal_.erase(terminal_.begin());
    }
}

void ReplayBuffer::clear() {
    episodes_.clear();
    terminal_.clear();
    transitions_ = 0;
}

Batch her_sample(const ReplayBuffer& buffer, int batch_size, const HerConfig& config, Rng& rng) {
    if (buffer.empty()) throw ContractViolation("her_sample on an empty buffer");
    const auto& eps = buffer.episodes();
    const env::TaskId task = config.task.task;
    const bool goal_based = env::is_goal_based(task);
    const auto& e0 = eps.front();
    const int od = static_cast<int>(e0.obs.front().size());
    const int gd = goal_based ? static_cast<int>(e0.desired_goals.front().size()) : 0;
    const int ad = static_cast<int>(e0.actions.front().size());
    const double future_p = 1.0 - 1.0 / (1.0 + config.k_future);

    Batch b;
    b.obs.resize(od, batch_size);
    b.next_obs.resize(od, batch_size);
    b.goal.resize(gd, batch_size);
    b.next_goal.resize(gd, batch_size);
    b.action.resize(ad, batch_size);
    b.reward.resize(batch_size);
    b.terminal.setZero(batch_size);

    std::uniform_int_distribution<size_t> pick_ep(0, eps.size() - 1);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int i = 0; i < batch_size; ++i) {
        const size_t e = pick_ep(rng);
        const Episode& ep = eps[e];
        const int T = ep.length();
        const int t = std::uniform_int_distribution<int>(0, T - 1)(rng);
        b.obs.col(i) = ep.obs[t];
        b.next_obs.col(i) = ep.obs[t + 1];
        b.action.col(i) = ep.actions[t];
        if (buffer.terminal_flags()[e] && t == T - 1) b.terminal[i] = 1.0;
        if (!goal_based) {
            b.reward[i] = ep.rewards[t];
            continue;
        }
        VectorXd goal = ep.desired_goals[t];
        bool relabeled = false;
        if (config.k_future > 0 && u01(rng) < future_p) {
            const int future = t + 1 + std::uniform_int_distribution<int>(0, T - t - 1)(rng);
            goal = ep.achieved_goals[future];
            relabeled = true;
        }
        b.goal.col(i) = goal;
        b.next_goal.col(i) = goal;
        b.reward[i] = relabeled ? env::compute_reward(task, ep.achieved_goals[t + 1], goal, config.task)
                                : ep.rewards[t];
    }
    return b;
}

// --- Agent -------------------------------------------------------------------

json AgentConfig::to_json() const {
    return {{"hidden", hidden},         {"lr_actor", lr_actor},     {"lr_critic", lr_critic},
            {"gamma", gamma},           {"polyak", polyak},         {"action_l2", action_l2},
            {"batch_size", batch_size}, {"clip_target", clip_target}, {"bc_weight", bc_weight},
            {"q_weight", q_weight},     {"q_filter", q_filter},     {"demo_batch_size", demo_batch_size},
            {"noise_eps", noise_eps},   {"random_eps", random_eps}};
}

AgentConfig AgentConfig::from_json(const json& j) {
    AgentConfig c;
    auto opt = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    opt("hidden", c.hidden);
    opt("lr_actor", c.lr_actor);
    opt("lr_critic", c.lr_critic);
    opt("gamma", c.gamma);
    opt("polyak", c.polyak);
    opt("action_l2", c.action_l2);
    opt("batch_size", c.batch_size);
    opt("clip_target", c.clip_target);
    opt("bc_weight", c.bc_weight);
    opt("q_weight", c.q_weight);
    opt("q_filter", c.q_filter);
    opt("demo_batch_size", c.demo_batch_size);
    opt("noise_eps", c.noise_eps);
    opt("random_eps", c.random_eps);
    return c;
}

Agent::Agent(int obs_dim, int goal_dim, int action_dim, const AgentConfig& config, std::uint64_t seed)
    : obs_dim_(obs_dim), goal_dim_(goal_dim), action_dim_(action_dim), config_(config),
      o_norm_(obs_dim), g_norm_(goal_dim) {
    Rng rng(seed);
    std::vector<int> a_sizes{obs_dim + goal_dim};
    a_sizes.insert(a_sizes.end(), config.hidden.begin(), config.hidden.end());
    a_sizes.push_back(action_dim);
    std::vector<int> c_sizes{obs_dim + goal_dim + action_dim};
    c_sizes.insert(c_sizes.end(), config.hidden.begin(), config.hidden.end());
    c_sizes.push_back(1);
    actor_ = Mlp(a_sizes, true, rng);
    critic_ = Mlp(c_sizes, false, rng);
    actor_t_ = actor_;
    critic_t_ = critic_;
    actor_opt_ = Adam(actor_, config.lr_actor);
    critic_opt_ = Adam(critic_, config.lr_critic);
}

MatrixXd Agent::actor_input(const MatrixXd& obs, const MatrixXd& goal) const {
    if (obs.rows() != obs_dim_ || goal.rows() != goal_dim_ || goal.cols() != obs.cols())
        throw ContractViolation("agent input has the wrong shape");
    if (goal_dim_ == 0) return o_norm_.normalize(obs);
    return vstack(o_norm_.normalize(obs), g_norm_.normalize(goal));
}

MatrixXd Agent::policy(const MatrixXd& obs, const MatrixXd& goal) const {
    return actor_.forward(actor_input(obs, goal));
}

MatrixXd Agent::q_values(const MatrixXd& obs, const MatrixXd& goal, const MatrixXd& action) const {
    return critic_.forward(vstack(actor_input(obs, goal), action));
}

VectorXd Agent::act(const VectorXd& obs, const VectorXd& goal) const {
    const VectorXd g = goal_dim_ == 0 ? VectorXd(0) : goal;
    return policy(obs, g).col(0);
}

VectorXd Agent::explore(const VectorXd& obs, const VectorXd& goal, Rng& rng) const {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    VectorXd a = act(obs, goal);
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = std::clamp(a[i] + config_.noise_eps * n(rng), -1.0, 1.0);
    if (u01(rng) < config_.random_eps)
        for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = u(rng);
    return a;
}

void Agent::update_normalizers(const Episode& ep) {
    MatrixXd o(obs_dim_, ep.obs.size());
    for (size_t t = 0; t < ep.obs.size(); ++t) o.col(t) = ep.obs[t];
    o_norm_.update(o);
    if (goal_dim_ == 0) return;
    // Relabeled goals are achieved goals, so both feed the goal statistics.
    MatrixXd g(goal_dim_, ep.achieved_goals.size() + ep.desired_goals.size());
    Eigen::Index k = 0;
    for (const auto& v : ep.achieved_goals) g.col(k++) = v;
    for (const auto& v : ep.desired_goals) g.col(k++) = v;
    g_norm_.update(g);
}

double critic_loss(const Agent& agent, const Batch& batch, Mlp::Grad* grad) {
    const auto& c = agent.config();
    const int B = batch.size();
    const MatrixXd x_next = agent.actor_input(batch.next_obs, batch.next_goal);
    const MatrixXd a_next = agent.actor_target().forward(x_next);
    const VectorXd q_next = agent.critic_target().forward(vstack(x_next, a_next)).row(0).transpose();
    const double bound = 1.0 / (1.0 - c.gamma);
    VectorXd y = batch.reward + c.gamma * (1.0 - batch.terminal.array()).matrix().cwiseProduct(q_next);
    y = y.cwiseMax(-bound).cwiseMin(c.clip_target ? 0.0 : bound);

    Mlp::Cache cache;
    const MatrixXd q = agent.critic().forward(vstack(agent.actor_input(batch.obs, batch.goal), batch.action), &cache);
    const VectorXd err = q.row(0).transpose() - y;
    if (grad) agent.critic().backward(cache, (2.0 / B) * err.transpose(), grad);
    return err.squaredNorm() / B;
}

namespace {

// 1 where the demonstrated action scores higher than the policy's.
VectorXd q_filter_mask(const Agent& agent, const Batch& demos, const MatrixXd& pi) {
    if (!agent.config().q_filter) return VectorXd::Ones(demos.size());
    const MatrixXd x = agent.actor_input(demos.obs, demos.goal);
    const MatrixXd q_demo = agent.critic().forward(vstack(x, demos.action));
    const MatrixXd q_pi = agent.critic().forward(vstack(x, pi));
    return (q_demo.row(0).array() > q_pi.row(0).array()).cast<double>().transpose();
}

} // namespace

double bc_q_filter_loss(const Agent& agent, const Batch& demos) {
    const MatrixXd pi = agent.policy(demos.obs, demos.goal);
    const VectorXd mask = q_filter_mask(agent, demos, pi);
    return ((pi - demos.action).colwise().squaredNorm().transpose().array() * mask.array()).sum();
}

double actor_loss(const Agent& agent, const Batch& batch, const Batch* demos, Mlp::Grad* grad, double* bc_loss) {
    const auto& c = agent.config();
    const Batch all = demos ? concat(batch, *demos) : batch;
    const int B = all.size();
    const int A = agent.action_dim();
    const bool cloning = demos && c.bc_weight > 0.0;
    const double qw = cloning ? c.q_weight : 1.0;

    const MatrixXd x = agent.actor_input(all.obs, all.goal);
    Mlp::Cache a_cache, c_cache;
    const MatrixXd pi = agent.actor().forward(x, &a_cache);
    const MatrixXd q = agent.critic().forward(vstack(x, pi), &c_cache);
    double loss = -qw * q.mean() + c.action_l2 * pi.squaredNorm() / (B * A);
    MatrixXd d_pi;
    if (grad) {
        const MatrixXd d_in = agent.critic().backward(c_cache, MatrixXd::Constant(1, B, -qw / B), nullptr);
        d_pi = d_in.bottomRows(A) + (2.0 * c.action_l2 / (B * A)) * pi;
    }
    double bc = 0.0;
    if (cloning) {
        const int D = demos->size();
        const MatrixXd pi_d = pi.rightCols(D);
        const VectorXd mask = q_filter_mask(agent, *demos, pi_d);
        const MatrixXd diff = pi_d - demos->action;
        bc = (diff.colwise().squaredNorm().transpose().array() * mask.array()).sum();
        loss += c.bc_weight * bc;
        if (grad) d_pi.rightCols(D) += 2.0 * c.bc_weight * (diff.array().rowwise() * mask.transpose().array()).matrix();
    }
    if (grad) agent.actor().backward(a_cache, d_pi, grad);
    if (bc_loss) *bc_loss = bc;
    return loss;
}

UpdateStats Agent::update(const Batch& batch, const Batch* demos) {
    UpdateStats stats;
    Mlp::Grad c_grad = critic_.zero_grad();
    stats.critic_loss = critic_loss(*this, demos ? concat(batch, *demos) : batch, &c_grad);
    Mlp::Grad a_grad = actor_.zero_grad();
    stats.actor_loss = actor_loss(*this, batch, demos, &a_grad, &stats.bc_loss);

    if (!std::isfinite(stats.critic_loss) || !std::isfinite(stats.actor_loss) || !std::isfinite(stats.bc_loss) ||
        !finite(Mlp::flatten(c_grad)) || !finite(Mlp::flatten(a_grad))) {
        stats.rejected = true;
        return stats;
    }
    critic_opt_.step(critic_, c_grad);
    actor_opt_.step(actor_, a_grad);
    return stats;
}

void Agent::update_targets() {
    actor_.blend_into(actor_t_, config_.polyak);
    critic_.blend_into(critic_t_, config_.polyak);
}

UpdateStats ddpg_update(Agent& agent, const Batch& batch, const Batch* demo_batch) {
    return agent.update(batch, demo_batch);
}

PolicyFn Agent::policy_fn() const {
    return [agent = *this](const env::Observation& obs) { return agent.act(obs.observation, obs.desired_goal); };
}

json Agent::to_json() const {
    return {{"obs_dim", obs_dim_},
            {"goal_dim", goal_dim_},
            {"action_dim", action_dim_},
            {"config", config_.to_json()},
            {"actor", actor_.to_json()},
            {"critic", critic_.to_json()},
            {"actor_target", actor_t_.to_json()},
            {"critic_target", critic_t_.to_json()},
            {"actor_opt", actor_opt_.to_json()},
            {"critic_opt", critic_opt_.to_json()},
            {"o_norm", o_norm_.to_json()},
            {"g_norm", g_norm_.to_json()}};
}

Agent Agent::from_json(const json& j) {
    Agent a;
    a.obs_dim_ = j.at("obs_dim");
    a.goal_dim_ = j.at("goal_dim");
    a.action_dim_ = j.at("action_dim");
    a.config_ = AgentConfig::from_json(j.at("config"));
    a.actor_ = Mlp::from_json(j.at("actor"));
    a.critic_ = Mlp::from_json(j.at("critic"));
    a.actor_t_ = Mlp::from_json(j.at("actor_target"));
    a.critic_t_ = Mlp::from_json(j.at("critic_target"));
    a.actor_opt_ = Adam::from_json(j.at("actor_opt"));
    a.critic_opt_ = Adam::from_json(j.at("critic_opt"));
    a.o_norm_ = Normalizer::from_json(j.at("o_norm"));
    a.g_norm_ = Normalizer::from_json(j.at("g_norm"));
    if (a.actor_.input_dim() != a.obs_dim_ + a.goal_dim_ || a.actor_.output_dim() != a.action_dim_)
        throw CorruptFile("agent network shapes do not match its dimensions");
    return a;
}

void save_agent(const Agent& agent, const std::string& path) { write_atomic(path, agent.to_json().dump()); }

Agent load_agent(const std::string& path) {
    try {
        return Agent::from_json(json::parse(read_text(path)));
    } catch (const json::exception& e) {
        throw CorruptFile(path + ": " + e.what());
    }
}

// --- Training ----------------------------------------------------------------

std::string algo_name(Algo a) {
    switch (a) {
    case Algo::Ddpg: return "ddpg";
    case Algo::Her: return "her";
    case Algo::HerDemo: return "her_demo";
    }
    return "?";
}

Algo parse_algo(const std::string& name) {
    if (name == "ddpg") return Algo::Ddpg;
    if (name == "her") return Algo::Her;
    if (name == "her_demo" || name == "her+demo") return Algo::HerDemo;
    throw ContractViolation("unknown algorithm '" + name + "' (ddpg, her, her_demo)");
}

TrainConfig default_train_config(env::TaskId task, Algo algo) {
    TrainConfig c;
    c.task = env::default_config(task);
    c.algo = algo;
    if (task == env::TaskId::NeedleReach || task == env::TaskId::EcmReach || task == env::TaskId::MisOrient)
        c.agent.action_l2 = 0.01;
    // Success needs the target within 1% of the image and 0.01 rad of roll at
    // the last step; heavy exploration noise keeps training rollouts from ever
    // getting there.
    if (task == env::TaskId::StaticTrack) {
        c.agent.random_eps = 0.1;
        c.agent.noise_eps = 0.1;
    }
    // With cloning the actor otherwise chases critic errors and its success
    // rate collapses between epochs.
    if (algo == Algo::HerDemo) {
        c.agent.q_weight = 0.1;
        c.agent.lr_actor = 3e-4;
    }
    return c;
}

json TrainConfig::to_json() const {
    return {{"task", task.to_json()},
            {"algo", algo_name(algo)},
            {"seed", seed},
            {"epochs", epochs},
            {"cycles", cycles},
            {"episodes_per_cycle", episodes_per_cycle},
            {"updates_per_cycle", updates_per_cycle},
            {"test_episodes", test_episodes},
            {"k_future", k_future},
            {"buffer_size", buffer_size},
            {"demo_path", demo_path},
            {"n_demos", n_demos},
            {"agent", agent.to_json()}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.task = env::TaskConfig::from_json(j.at("task"));
    auto opt = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    if (j.contains("algo")) c.algo = parse_algo(j.at("algo"));
    opt("seed", c.seed);
    opt("epochs", c.epochs);
    opt("cycles", c.cycles);
    opt("episodes_per_cycle", c.episodes_per_cycle);
    opt("updates_per_cycle", c.updates_per_cycle);
    opt("test_episodes", c.test_episodes);
    opt("k_future", c.k_future);
    opt("buffer_size", c.buffer_size);
    opt("demo_path", c.demo_path);
    opt("n_demos", c.n_demos);
    if (j.contains("agent")) c.agent = AgentConfig::from_json(j.at("agent"));
    return c;
}

std::string metrics_csv_header() {
    return "epoch,episodes,train_success,test_success,test_mean_reward,critic_loss,actor_loss,bc_loss,"
           "rejected_updates";
}

std::string metrics_csv_row(const EpochMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d,%ld,%.4f,%.4f,%.6f,%.6g,%.6g,%.6g,%d", m.epoch, m.episodes, m.train_success,
                  m.test_success, m.test_mean_reward, m.critic_loss, m.actor_loss, m.bc_loss, m.rejected_updates);
    return buf;
}

namespace {

json metrics_json(const EpochMetrics& m) {
    return {{"epoch", m.epoch},
            {"episodes", m.episodes},
            {"train_success", m.train_success},
            {"test_success", m.test_success},
            {"test_mean_reward", m.test_mean_reward},
            {"critic_loss", m.critic_loss},
            {"actor_loss", m.actor_loss},
            {"bc_loss", m.bc_loss},
            {"rejected_updates", m.rejected_updates}};
}

EpochMetrics metrics_from(const json& j) {
    EpochMetrics m;
    m.epoch = j.at("epoch");
    m.episodes = j.at("episodes");
    m.train_success = j.at("train_success");
    m.test_success = j.at("test_success");
    m.test_mean_reward = j.at("test_mean_reward");
    m.critic_loss = j.at("critic_loss");
    m.actor_loss = j.at("actor_loss");
    m.bc_loss = j.at("bc_loss");
    m.rejected_updates = j.at("rejected_updates");
    return m;
}

// Seeds for training and per-epoch test episodes are disjoint from each
// other and from the seeds used by evaluate() callers (small integers).
std::uint64_t train_seed(std::uint64_t run_seed, long episode) { return (run_seed << 32) + 1'000'000'000ULL + episode; }

std::uint64_t test_seed(std::uint64_t run_seed, int epoch, int i, int n) {
    return (run_seed << 32) + 2'000'000'000ULL + static_cast<std::uint64_t>(epoch) * n + i;
}

} // namespace

TrainResult train(const TrainConfig& config, const std::string& out_dir, bool resume,
                  const std::function<void(const EpochMetrics&)>& epoch_callback) {
    const env::TaskId task = config.task.task;
    const bool goal_based = env::is_goal_based(task);
    env::TaskEnv env(config.task);
    env::TaskEnv test_env(config.task);

    AgentConfig acfg = config.agent;
    if (!goal_based) acfg.clip_target = false; // dense rewards in [-1, 1]
    HerConfig her{config.algo == Algo::Ddpg ? 0 : config.k_future, config.task};

    TrainResult result;
    result.agent = Agent(env.observation_dim(), goal_based ? env.goal_dim() : 0, env.action_spec().dim(), acfg,
                         config.seed);
    Agent& agent = result.agent;
    Rng rng(config.seed * 0x9E3779B97F4A7C15ULL + 7);
    ReplayBuffer buffer(config.buffer_size);
    ReplayBuffer demo_buffer(config.buffer_size);
    long episodes_done = 0;
    int start_epoch = 0;

    const bool use_demos = config.algo == Algo::HerDemo;
    if (use_demos) {
        if (config.demo_path.empty()) throw ContractViolation("her_demo needs a demo file");
        if (acfg.demo_batch_size <= 0 || acfg.demo_batch_size >= acfg.batch_size)
            throw ContractViolation("demo_batch_size must be in (0, batch_size)");
        const auto file = read_episodes(config.demo_path, &config.task);
        const int n = std::min<int>(config.n_demos, static_cast<int>(file.episodes.size()));
        if (n == 0) throw ContractViolation("demo file '" + config.demo_path + "' has no episodes");
        for (int i = 0; i < n; ++i) demo_buffer.add(file.episodes[i]);
    }

    std::string ckpt_path, buffer_path, csv_path;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        ckpt_path = (fs::path(out_dir) / "checkpoint.json").string();
        buffer_path = (fs::path(out_dir) / "replay.bin").string();
        csv_path = (fs::path(out_dir) / "metrics.csv").string();
    }

    if (resume && !out_dir.empty() && fs::exists(ckpt_path)) {
        json ck;
        try {
            ck = json::parse(read_text(ckpt_path));
        } catch (const json::exception& e) {
            throw CorruptFile(ckpt_path + ": " + e.what());
        }
        auto stored = ck.at("config");
        auto current = config.to_json();
        stored.erase("epochs");
        current.erase("epochs");
        if (stored != current) throw ContractViolation(ckpt_path + ": checkpoint was written by a different config");
        agent = Agent::from_json(ck.at("agent"));
        set_rng_state(rng, ck.at("rng"));
        episodes_done = ck.at("episodes");
        start_epoch = ck.at("epoch");
        for (const auto& m : ck.at("metrics")) result.metrics.push_back(metrics_from(m));
        load_buffer(buffer, buffer_path);
    } else if (use_demos) {
        for (const auto& ep : demo_buffer.episodes()) agent.update_normalizers(ep);
    }

    for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
        EpochMetrics m;
        m.epoch = epoch;
        int train_solved = 0, train_total = 0, updates = 0;
        for (int cycle = 0; cycle < config.cycles; ++cycle) {
            for (int e = 0; e < config.episodes_per_cycle; ++e) {
                const auto explore = [&](const env::Observation& obs) {
                    return agent.explore(obs.observation, obs.desired_goal, rng);
                };
                Episode ep = rollout(env, train_seed(config.seed, episodes_done++), explore);
                train_solved += episode_solved(env, ep);
                ++train_total;
                agent.update_normalizers(ep);
                const bool terminal = !goal_based && ep.length() < env.horizon();
                buffer.add(std::move(ep), terminal);
            }
            for (int u = 0; u < config.updates_per_cycle; ++u) {
                UpdateStats s;
                if (use_demos) {
                    const Batch batch = her_sample(buffer, acfg.batch_size - acfg.demo_batch_size, her, rng);
                    const Batch demos = her_sample(demo_buffer, acfg.demo_batch_size, her, rng);
                    s = agent.update(batch, &demos);
                } else {
                    s = agent.update(her_sample(buffer, acfg.batch_size, her, rng));
                }
                ++updates;
                if (s.rejected) {
                    ++m.rejected_updates;
                    continue;
                }
                m.critic_loss += s.critic_loss;
                m.actor_loss += s.actor_loss;
                m.bc_loss += s.bc_loss;
            }
            agent.update_targets();
        }
        const int accepted = updates - m.rejected_updates;
        if (accepted > 0) {
            m.critic_loss /= accepted;
            m.actor_loss /= accepted;
            m.bc_loss /= accepted;
        }
        m.episodes = episodes_done;
        m.train_success = train_total ? static_cast<double>(train_solved) / train_total : 0.0;

        const PolicyFn greedy = agent.policy_fn();
        int test_solved = 0;
        double reward = 0.0;
        for (int i = 0; i < config.test_episodes; ++i) {
            const Episode ep = rollout(test_env, test_seed(config.seed, epoch, i, config.test_episodes), greedy);
            test_solved += episode_solved(test_env, ep);
            reward += ep.mean_reward();
        }
        if (config.test_episodes > 0) {
            m.test_success = static_cast<double>(test_solved) / config.test_episodes;
            m.test_mean_reward = reward / config.test_episodes;
        }
        result.metrics.push_back(m);

        if (!out_dir.empty()) {
            std::string csv = metrics_csv_header() + "\n";
            for (const auto& row : result.metrics) csv += metrics_csv_row(row) + "\n";
            write_atomic(csv_path, csv);
            save_buffer(buffer, buffer_path);
            json metrics = json::array();
            for (const auto& row : result.metrics) metrics.push_back(metrics_json(row));
            const json ck = {{"config", config.to_json()}, {"epoch", epoch + 1},      {"episodes", episodes_done},
                             {"rng", rng_state(rng)},      {"agent", agent.to_json()}, {"metrics", metrics}};
            write_atomic(ckpt_path, ck.dump());
            save_agent(agent, (fs::path(out_dir) / "policy.json").string());
        }
        if (epoch_callback) epoch_callback(m);
    }
    return result;
}

EvalResult evaluate(const PolicyFn& policy, const env::TaskConfig& task, int n_episodes, std::uint64_t seed0) {
    env::TaskEnv env(task);
    EvalResult r;
    r.episodes = n_episodes;
    int solved = 0;
    for (int i = 0; i < n_episodes; ++i) {
        const Episode ep = rollout(env, seed0 + i, policy);
        solved += episode_solved(env, ep);
        r.mean_reward += ep.mean_reward();
    }
    if (n_episodes > 0) {
        r.success_rate = static_cast<double>(solved) / n_episodes;
        r.mean_reward /= n_episodes;
    }
    return r;
}

CrossEvalMatrix cross_eval_matrix(const std::vector<std::pair<phys::GraspMode, std::vector<Agent>>>& policies,
                                  const std::vector<phys::GraspMode>& test_modes, const env::TaskConfig& task,
                                  int n_episodes, std::uint64_t seed0) {
    CrossEvalMatrix out;
    for (const auto& mode : test_modes) out.test_modes.push_back(mode.label());
    for (const auto& [train_mode, agents] : policies) {
        if (agents.empty()) throw ContractViolation("cross-eval row without policies");
        out.train_modes.push_back(train_mode.label());
        std::vector<double> means, stds;
        for (const auto& mode : test_modes) {
            env::TaskConfig cfg = task;
            cfg.grasp_mode = mode;
            std::vector<double> rates;
            for (const auto& agent : agents) rates.push_back(evaluate(agent.policy_fn(), cfg, n_episodes, seed0).success_rate);
            double mean = 0.0, var = 0.0;
            for (double r : rates) mean += r;
            mean /= rates.size();
            for (double r : rates) var += (r - mean) * (r - mean);
            means.push_back(mean);
            stds.push_back(std::sqrt(var / rates.size()));
        }
        out.mean.push_back(means);
        out.stddev.push_back(stds);
    }
    return out;
}

} // namespace surgsim::rl
