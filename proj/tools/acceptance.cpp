// Acceptance run: one PASS/FAIL line per criterion with the measured values
// and the pinned tolerance. The RL criteria train from scratch and take most
// of the runtime; --only restricts the run to named criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "surgsim/demos.hpp"
#include "surgsim/errors.hpp"
#include "surgsim/kinematics.hpp"
#include "surgsim/physics.hpp"
#include "surgsim/rl.hpp"

using namespace surgsim;
using env::TaskId;
using phys::Pose;
using phys::Vec3;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[2048];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// --- kinematics ------------------------------------------------------------------

Eigen::VectorXd random_q(const kin::ChainSpecd& c, std::mt19937_64& rng) {
    Eigen::VectorXd q(c.dof());
    for (int i = 0; i < c.dof(); ++i)
        q[i] = std::uniform_real_distribution<double>(c.limits[i].lo, c.limits[i].hi)(rng);
    return q;
}

Outcome kinematics() {
    std::mt19937_64 rng(2024);
    double ik_worst = 0, jac_worst = 0, roll_worst = 0;
    int ik_failures = 0;
    // Converge well past the acceptance bound so the bound is actually tested.
    kin::IkOptions tight;
    tight.tolerance = 1e-9;
    tight.max_iterations = 1000;
    for (const auto& c : {kin::psm_chain(), kin::ecm_chain()}) {
        for (int k = 0; k < 1000; ++k) {
            const Eigen::VectorXd q = random_q(c, rng);
            Eigen::VectorXd seed = q;
            for (int i = 0; i < c.dof(); ++i) seed[i] += std::normal_distribution<double>(0, 0.02)(rng);
            seed = kin::clamp_joints(c, seed);
            const auto target = kin::tool_pose(c, q);
            // The solver result is measured independently through forward kinematics.
            const auto res = kin::solve_ik(c, target, seed, tight);
            const auto e = kin::pose_error(kin::tool_pose(c, res.q), target);
            const double err = std::max(e.head<3>().norm(), e.tail<3>().norm());
            ik_worst = std::max(ik_worst, err);
            ik_failures += !(err < 1e-6) || !kin::within_limits(c, res.q);
        }
        // Central differences of the tool pose, angular part through the rotation log.
        const double h = 1e-6;
        for (int k = 0; k < 200; ++k) {
            const Eigen::VectorXd q = random_q(c, rng);
            Eigen::MatrixXd fd(6, c.dof());
            for (int i = 0; i < c.dof(); ++i) {
                Eigen::VectorXd qp = q, qm = q;
                qp[i] += h;
                qm[i] -= h;
                const auto tp = kin::tool_pose(c, qp), tm = kin::tool_pose(c, qm);
                fd.col(i).head<3>() = (tp.translation - tm.translation) / (2 * h);
                fd.col(i).tail<3>() = kin::log_so3<double>(tp.rotation * tm.rotation.transpose()) / (2 * h);
            }
            jac_worst = std::max(jac_worst, (kin::jacobian(c, q) - fd).cwiseAbs().maxCoeff());
        }
    }
    const auto ecm = kin::ecm_chain();
    for (int k = 0; k < 1000; ++k) {
        Eigen::VectorXd q = random_q(ecm, rng);
        const auto a = kin::tool_pose(ecm, q).translation;
        q[3] = std::uniform_real_distribution<double>(ecm.limits[3].lo, ecm.limits[3].hi)(rng);
        roll_worst = std::max(roll_worst, (kin::tool_pose(ecm, q).translation - a).norm());
    }
    return {ik_failures == 0 && ik_worst < 1e-6 && jac_worst < 1e-5 && roll_worst < 1e-9,
            fmt("IK round trip worst %.2e (< 1e-6, %d of 2000 outside the bound or limits); Jacobian vs FD %.2e (< 1e-5); "
                "ECM joint-4 camera shift %.2e m (< 1e-9)",
                ik_worst, ik_failures, jac_worst, roll_worst)};
}

// --- physics ---------------------------------------------------------------------

phys::RigidBody ground(double mu) {
    phys::RigidBody g;
    g.name = "ground";
    g.collider = phys::Collider::plane();
    g.material.friction_mu = mu;
    return g;
}

phys::RigidBody box(const std::string& name, const Vec3& h, double mass, const Vec3& at, double mu) {
    phys::RigidBody b;
    b.name = name;
    b.mass = mass;
    b.inertia = phys::box_inertia(mass, h);
    b.collider = phys::Collider::box(h);
    b.pose = Pose::from_translation(at);
    b.material.friction_mu = mu;
    return b;
}

Outcome physics() {
    const double tilt = 5.0 * kPi / 180.0;
    std::string incline;
    bool incline_ok = true;
    for (double mu : {0.0, 0.05, 0.5}) {
        phys::World w;
        const Vec3 n(-std::sin(tilt), 0, std::cos(tilt));
        auto plane = ground(mu);
        plane.collider = phys::Collider::plane(n, 0.0);
        w.add_body(plane);
        const Vec3 h(0.005, 0.005, 0.005);
        auto b = box("box", h, 0.01, n * h.z(), mu);
        b.pose.rotation = kin::rot_y<double>(-tilt);
        const auto id = w.add_body(b);
        const Vec3 start = w.body(id).pose.translation;
        for (int i = 0; i < 500; ++i) phys::step_substep(w);
        const double moved = (w.body(id).pose.translation - start).norm();
        const bool stuck = moved < 1e-4;
        const bool expected = mu > std::tan(tilt);
        incline_ok &= stuck == expected;
        incline += fmt("%smu=%.2f %s", incline.empty() ? "" : ", ", mu, stuck ? "static" : "slides");
    }

    phys::World rest;
    rest.add_body(ground(0.5));
    const auto id = rest.add_body(box("box", Vec3(0.005, 0.005, 0.005), 0.01, Vec3(0, 0, 0.005), 0.5));
    for (int i = 0; i < 500; ++i) phys::step_control(rest, {});
    const double penetration = std::max(0.0, -phys::lowest_point(rest.body(id)));

    phys::World pile;
    pile.add_body(ground(0.4));
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(-0.004, 0.004);
    for (int i = 0; i < 6; ++i) {
        auto b = box("b" + std::to_string(i), Vec3(0.003, 0.002, 0.0025), 0.002,
                     Vec3(u(rng), u(rng), 0.004 + 0.007 * i), 0.3 + 0.05 * i);
        b.pose.rotation = kin::rot_z<double>(u(rng) * 200) * kin::rot_x<double>(u(rng) * 20);
        pile.add_body(b);
    }
    const double e0 = pile.total_energy();
    double prev = e0, gain = 0, cone = 0, min_impulse = 0, pile_pen = 0;
    for (int i = 0; i < 10000; ++i) {
        phys::step_substep(pile);
        const double e = pile.total_energy();
        gain = std::max(gain, e - prev);
        prev = e;
        cone = std::max(cone, pile.last_stats.max_cone_violation);
        min_impulse = std::min(min_impulse, pile.last_stats.min_normal_impulse);
    }
    for (const auto& b : pile.bodies)
        if (b.is_dynamic()) pile_pen = std::max(pile_pen, -phys::lowest_point(b));

    const bool ok = incline_ok && penetration < 1e-3 && pile_pen < 1e-3 && gain <= 1e-6 * e0 && cone <= 1e-9 &&
                    min_impulse >= 0;
    return {ok, fmt("5 deg incline: %s (static iff mu > tan 5 deg = %.4f); resting penetration %.2e m, pile %.2e m "
                    "(< 1e-3); over 10k substeps max energy gain %.2e J (<= 1e-6 E0), cone violation %.2e, "
                    "min normal impulse %.2e",
                    incline.c_str(), std::tan(tilt), penetration, pile_pen, gain, cone, min_impulse)};
}

// --- grasp models ----------------------------------------------------------------

// PSM pointing straight down at the origin; tool origin height 0.0565 - (q3 - 0.1).
kin::ArmModeld downward_psm(double tool_z) {
    kin::ArmModeld arm;
    arm.chain = kin::psm_chain();
    arm.rcm_pose = Pose::from_translation(Vec3(0, 0, 0.15));
    arm.current_q = Eigen::VectorXd::Zero(6);
    arm.current_q[2] = 0.1 + (0.0565 - tool_z);
    return arm;
}

phys::ArmCommand at_height(double z, double jaw) {
    phys::ArmCommand c;
    c.q_target = Eigen::VectorXd::Zero(6);
    c.q_target[2] = 0.1 + (0.0565 - z);
    c.jaw = jaw;
    return c;
}

struct Pinch {
    phys::World world;
    int psm = 0;
    phys::BodyId block = -1;
};

Pinch pinch_rig(double mu, double mass) {
    Pinch r;
    r.world.grasp_mode = phys::GraspMode::interact();
    r.world.add_body(ground(mu));
    auto b = box("block", Vec3(0.001, 0.001, 0.002), mass, Vec3(0, 0, 0.002), mu);
    b.graspable = true;
    r.block = r.world.add_body(b);
    phys::JawDescriptor jaw;
    jaw.pad_material.friction_mu = mu;
    r.psm = r.world.add_instrument("psm", downward_psm(0.006), true, jaw);
    r.world.instruments[r.psm].jaw_half_angle = jaw.open_half_angle;
    r.world.instruments[r.psm].jaw_command = 1.0;
    return r;
}

// Closes on the block and lifts it 1 cm; true if it is carried clear of the floor.
bool pinch_lifts(double mu, double mass) {
    auto r = pinch_rig(mu, mass);
    for (int i = 0; i < 20; ++i) phys::step_control(r.world, {at_height(0.006, -1.0)});
    for (int i = 1; i <= 30; ++i) phys::step_control(r.world, {at_height(0.006 + 0.01 * i / 30.0, -1.0)});
    for (int i = 0; i < 10; ++i) phys::step_control(r.world, {at_height(0.016, -1.0)});
    return phys::lowest_point(r.world.body(r.block)) > 0.005;
}

Outcome grasp() {
    // Two pads carry m g at rest: hold iff 2 mu N >= m g.
    const double mass = 0.001;
    const double mu_crit = mass * 9.81 / (2.0 * phys::JawDescriptor{}.pinch_force);
    std::string sweep;
    bool sweep_ok = true;
    for (double s : {0.5, 0.9, 0.99, 1.01, 1.1, 2.0}) {
        auto r = pinch_rig(mu_crit * s, mass);
        const bool holds = phys::pinch_supports(r.world, r.psm, r.block);
        sweep_ok &= holds == (s > 1.0);
        sweep += holds ? "1" : "0";
    }
    const bool lift_hi = pinch_lifts(2.0 * mu_crit, mass), lift_lo = pinch_lifts(0.5 * mu_crit, mass);

    // Proximity grasp: attach below 2 mm, not above; release on jaw open.
    auto attempt = [](double gap) {
        phys::World w;
        w.grasp_mode = phys::GraspMode::approx(0.002);
        w.config.gravity = Vec3::Zero();
        w.add_body(ground(0.5));
        const int psm = w.add_instrument("psm", downward_psm(0.0565), true);
        auto b = box("target", Vec3(0.001, 0.001, 0.001), 0.001, w.jaw_tip(psm) - Vec3(0, 0, gap + 0.001), 0.5);
        b.graspable = true;
        w.add_body(b);
        w.instruments[psm].jaw_command = -1.0;
        const bool attached = phys::update_grasp(w, psm).phase == phys::GraspState::Phase::Attached;
        w.instruments[psm].jaw_command = 1.0;
        const bool released = phys::update_grasp(w, psm).phase == phys::GraspState::Phase::Free;
        return std::make_pair(attached, released);
    };
    const auto in = attempt(0.00199), out = attempt(0.00201);
    const bool ok = sweep_ok && lift_hi && !lift_lo && in.first && in.second && !out.first;
    return {ok, fmt("pinch hold at mu/mu_crit 0.5..2.0 = %s (expect 000111, mu_crit %.4f); lift at 2x %s, at 0.5x %s; "
                    "approx@2mm attaches at 1.99 mm %s, 2.01 mm %s, releases on open %s",
                    sweep.c_str(), mu_crit, lift_hi ? "yes" : "no", lift_lo ? "yes" : "no", in.first ? "yes" : "no",
                    out.first ? "yes" : "no", in.second ? "yes" : "no")};
}

// --- throughput ------------------------------------------------------------------

std::string machine() {
    std::ifstream in("/proc/cpuinfo");
    std::string line, model = "unknown CPU";
    while (std::getline(in, line))
        if (line.rfind("model name", 0) == 0) {
            model = line.substr(line.find(':') + 2);
            break;
        }
    return model + ", " + std::to_string(std::thread::hardware_concurrency()) + " threads";
}

Outcome throughput() {
    env::TaskEnv env(env::default_config(TaskId::NeedleReach));
    std::mt19937_64 rng(0);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    double worst = 1e300;
    for (int trial = 0; trial < 3; ++trial) {
        env.reset(trial);
        const long n = 5000;
        const auto t0 = std::chrono::steady_clock::now();
        for (long s = 0; s < n; ++s)
            if (env.step(Eigen::Vector3d(u(rng), u(rng), u(rng))).done) env.reset(1000 + s);
        worst = std::min(worst, n / std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return {worst >= 150.0, fmt("NeedleReach random actions: slowest of 3 trials %.0f steps/s (target >= 150, "
                                "CI floor >= 75) on %s",
                                worst, machine().c_str())};
}

// --- scripted policies -----------------------------------------------------------

Outcome scripted() {
    bool ok = true;
    std::string detail;
    for (TaskId t : env::all_tasks()) {
        env::TaskEnv env(env::default_config(t));
        const int horizon = t == TaskId::ActiveTrack ? 500 : 50;
        int solved = 0, too_long = 0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            const auto ep = demos::run_scripted(env, seed);
            solved += episode_solved(env, ep);
            too_long += ep.length() > horizon;
        }
        const int need = (t == TaskId::NeedleReach || t == TaskId::EcmReach) ? 100 : 95;
        ok &= solved >= need && too_long == 0 && env.horizon() == horizon;
        detail += fmt("%s%s %d/100", detail.empty() ? "" : ", ", env::task_name(t).c_str(), solved);
    }
    return {ok, detail + " (>= 95, reach tasks 100; all within 50/500-step horizons)"};
}

// --- learning --------------------------------------------------------------------

constexpr std::uint64_t kEvalSeed0 = 1'000'000;
const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

struct Runs {
    std::string out;
    std::map<std::string, std::vector<rl::Agent>> agents;

    std::vector<rl::Agent>& train(const std::string& key, rl::TrainConfig cfg) {
        auto it = agents.find(key);
        if (it != agents.end()) return it->second;
        auto& list = agents[key];
        for (auto seed : kSeeds) {
            cfg.seed = seed;
            const auto dir = (fs::path(out) / key / ("seed_" + std::to_string(seed))).string();
            const auto t0 = std::chrono::steady_clock::now();
            auto r = rl::train(cfg, dir);
            std::fprintf(stderr, "  trained %s seed %llu: %zu epochs in %.0f s, last test success %.2f\n", key.c_str(),
                         static_cast<unsigned long long>(seed), r.metrics.size(),
                         std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                         r.metrics.back().test_success);
            list.push_back(std::move(r.agent));
        }
        return list;
    }

    std::string demos(const env::TaskConfig& task) {
        const auto path = (fs::path(out) / ("demos_" + task.grasp_mode.label() + ".jsonl")).string();
        fs::create_directories(out);
        fs::remove(path);
        env::TaskEnv env(task);
        demos::collect_demos(env, 100, path, 0);
        return path;
    }
};

rl::TrainConfig train_config(TaskId task, rl::Algo algo, int epochs) {
    auto c = rl::default_train_config(task, algo);
    c.epochs = epochs;
    return c;
}

struct SeedStats {
    std::vector<double> values;
    double mean() const {
        double s = 0;
        for (double v : values) s += v;
        return values.empty() ? 0.0 : s / values.size();
    }
    std::string list() const {
        std::string s;
        for (double v : values) s += fmt("%s%.2f", s.empty() ? "" : "/", v);
        return s;
    }
};

SeedStats held_out_success(const std::vector<rl::Agent>& agents, const env::TaskConfig& task, int n = 100) {
    SeedStats s;
    for (const auto& a : agents) s.values.push_back(rl::evaluate(a.policy_fn(), task, n, kEvalSeed0).success_rate);
    return s;
}

rl::TrainConfig her_demo_config(Runs& runs, const phys::GraspMode& mode) {
    auto cfg = train_config(TaskId::NeedlePick, rl::Algo::HerDemo, 50);
    cfg.task.grasp_mode = mode;
    cfg.demo_path = runs.demos(cfg.task);
    return cfg;
}

Outcome rl_reproduction(Runs& runs) {
    bool ok = true;
    std::string detail;
    for (TaskId t : {TaskId::NeedleReach, TaskId::EcmReach, TaskId::MisOrient, TaskId::StaticTrack}) {
        // No epoch budget is pinned for the ECM orientation and tracking tasks.
        const auto cfg = train_config(t, rl::Algo::Her, t == TaskId::StaticTrack ? 50 : 30);
        const auto s = held_out_success(runs.train("her_" + env::task_name(t), cfg), cfg.task);
        const double need = (t == TaskId::NeedleReach || t == TaskId::EcmReach) ? 0.9 : 0.8;
        ok &= s.mean() >= need;
        detail += fmt("HER %s after %d epochs %.2f [%s] (>= %.2f); ", env::task_name(t).c_str(), cfg.epochs, s.mean(),
                      s.list().c_str(), need);
    }
    const auto ddpg = train_config(TaskId::NeedlePick, rl::Algo::Ddpg, 30);
    const auto sd = held_out_success(runs.train("ddpg_needle_pick", ddpg), ddpg.task);
    ok &= sd.mean() <= 0.1;
    detail += fmt("DDPG needle_pick %.2f [%s] (<= 0.10); ", sd.mean(), sd.list().c_str());

    const auto demo = her_demo_config(runs, phys::GraspMode::interact());
    const auto sh = held_out_success(runs.train("her_demo_needle_pick_interact", demo), demo.task);
    ok &= sh.mean() >= 0.5;
    detail += fmt("HER+DEMO needle_pick after 50 epochs %.2f [%s] (>= 0.50)", sh.mean(), sh.list().c_str());
    return {ok, "mean held-out success over 3 seeds x 100 episodes: " + detail};
}

Outcome active_track(Runs& runs) {
    auto cfg = train_config(TaskId::ActiveTrack, rl::Algo::Ddpg, 30);
    const auto& agents = runs.train("ddpg_active_track", cfg);
    SeedStats reward, full;
    env::TaskEnv env(cfg.task);
    for (const auto& a : agents) {
        double r = 0;
        int complete = 0;
        const int n = 20;
        for (int i = 0; i < n; ++i) {
            const auto ep = rollout(env, kEvalSeed0 + i, a.policy_fn());
            // Steps missing after a lost-target termination count as zero reward.
            r += ep.total_reward() / cfg.task.horizon;
            complete += ep.length() == cfg.task.horizon;
        }
        reward.values.push_back(r / n);
        full.values.push_back(double(complete) / n);
    }
    return {reward.mean() >= 0.7,
            fmt("DDPG mean per-step reward over 500-step episodes %.3f [%s] (>= 0.70); episodes run to the horizon "
                "%s",
                reward.mean(), reward.list().c_str(), full.list().c_str())};
}

Outcome cross_eval(Runs& runs) {
    const auto interact = phys::GraspMode::interact(), approx2 = phys::GraspMode::approx(0.002);
    const auto& a_int = runs.train("her_demo_needle_pick_interact", her_demo_config(runs, interact));
    const auto& a_apx = runs.train("her_demo_needle_pick_approx2", her_demo_config(runs, approx2));
    const std::vector<phys::GraspMode> tests = {phys::GraspMode::approx(0.001), approx2, phys::GraspMode::approx(0.003),
                                                interact};
    const auto m = rl::cross_eval_matrix({{interact, a_int}, {approx2, a_apx}}, tests,
                                         env::default_config(TaskId::NeedlePick), 200, kEvalSeed0);
    // Rows: interact, approx:2. Columns: approx:1, approx:2, approx:3, interact.
    const double drop_int = m.mean[0][3] - m.mean[0][1];
    const double drop_apx = m.mean[1][1] - m.mean[1][3];
    const bool a = drop_int < drop_apx;
    const bool b = m.mean[1][0] <= m.mean[1][1] && m.mean[1][1] <= m.mean[1][2];
    std::string table;
    for (size_t r = 0; r < 2; ++r) {
        table += fmt("%s%s:", r ? "; " : "", m.train_modes[r].c_str());
        for (size_t c = 0; c < tests.size(); ++c)
            table += fmt(" %s %.1f+-%.1f", m.test_modes[c].c_str(), 100 * m.mean[r][c], 100 * m.stddev[r][c]);
    }
    return {a && b, fmt("(a) interact-trained drop under approx:2 %.1f pts < approx:2-trained drop under interact "
                        "%.1f pts: %s; (b) approx:2-trained monotone over 1/2/3 mm: %s; success %%: %s",
                        100 * drop_int, 100 * drop_apx, a ? "yes" : "no", b ? "yes" : "no", table.c_str())};
}

Outcome learning_internals(Runs& runs) {
    // Relabeled rewards recomputed from the stored achieved goals.
    env::TaskEnv env(env::default_config(TaskId::NeedleReach));
    rl::Rng rng(21);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    rl::ReplayBuffer buffer;
    for (int e = 0; e < 8; ++e)
        buffer.add(rollout(env, e, [&](const env::Observation&) { return Eigen::Vector3d(u(rng), u(rng), u(rng)); }));
    const auto batch = rl::her_sample(buffer, 4000, rl::HerConfig{4, env.config()}, rng);
    int mismatched = 0, relabeled = 0;
    for (int i = 0; i < batch.size(); ++i) {
        bool matched = false;
        for (const auto& ep : buffer.episodes())
            for (int t = 0; t < ep.length() && !matched; ++t)
                if (ep.obs[t] == batch.obs.col(i) && ep.actions[t] == batch.action.col(i)) {
                    matched = true;
                    const Eigen::VectorXd g = batch.goal.col(i);
                    relabeled += g != ep.desired_goals[t];
                    mismatched += batch.reward[i] !=
                                  env::compute_reward(TaskId::NeedleReach, ep.achieved_goals[t + 1], g, env.config());
                }
        mismatched += !matched;
    }

    // Finite-difference checks of both losses, biases jittered off the ReLU kinks.
    rl::AgentConfig small;
    small.hidden = {6, 5};
    rl::Agent agent(3, 2, 2, small, 11);
    auto perturb = [&](rl::Mlp& net) {
        Eigen::VectorXd p = net.params();
        for (Eigen::Index i = 0; i < p.size(); ++i) p[i] += 0.05 * u(rng);
        net.set_params(p);
    };
    perturb(agent.actor());
    perturb(agent.critic());
    auto random_batch = [&](int n) {
        rl::Batch b;
        auto m = [&](int r, int c) {
            Eigen::MatrixXd x(r, c);
            for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
            return x;
        };
        b.obs = m(3, n);
        b.goal = m(2, n);
        b.action = 0.9 * m(2, n);
        b.next_obs = m(3, n);
        b.next_goal = b.goal;
        b.reward = -(m(n, 1).array() > 0.0).cast<double>().matrix();
        b.terminal = Eigen::VectorXd::Zero(n);
        return b;
    };
    const auto b = random_batch(16), demo = random_batch(6);
    auto fd = [](rl::Mlp& net, const std::function<double()>& f) {
        const Eigen::VectorXd p0 = net.params();
        Eigen::VectorXd g(p0.size());
        for (Eigen::Index i = 0; i < p0.size(); ++i) {
            Eigen::VectorXd p = p0;
            p[i] += 1e-6;
            net.set_params(p);
            const double up = f();
            p[i] = p0[i] - 1e-6;
            net.set_params(p);
            g[i] = (up - f()) / 2e-6;
        }
        net.set_params(p0);
        return g;
    };
    auto critic_grad = agent.critic().zero_grad();
    rl::critic_loss(agent, b, &critic_grad);
    const auto critic_fd = fd(agent.critic(), [&] { return rl::critic_loss(agent, b); });
    const double critic_err = (rl::Mlp::flatten(critic_grad) - critic_fd).norm() / critic_fd.norm();
    auto actor_grad = agent.actor().zero_grad();
    rl::actor_loss(agent, b, &demo, &actor_grad);
    const auto actor_fd = fd(agent.actor(), [&] { return rl::actor_loss(agent, b, &demo); });
    const double actor_err = (rl::Mlp::flatten(actor_grad) - actor_fd).norm() / actor_fd.norm();

    // Two seeded runs of the same short config produce identical parameters.
    rl::TrainConfig cfg = train_config(TaskId::NeedleReach, rl::Algo::Her, 2);
    cfg.cycles = 3;
    cfg.test_episodes = 3;
    const auto ra = rl::train(cfg, (fs::path(runs.out) / "repro_a").string());
    const auto rb = rl::train(cfg, (fs::path(runs.out) / "repro_b").string());
    const bool same = ra.agent.actor().params() == rb.agent.actor().params() &&
                      ra.agent.critic().params() == rb.agent.critic().params();

    const bool ok = mismatched == 0 && relabeled > 0 && critic_err < 1e-4 && actor_err < 1e-4 && same;
    return {ok, fmt("HER rewards recomputed exactly: %d mismatches in %d samples (%d relabeled); gradient FD relative "
                    "error critic %.2e, actor with BC %.2e (< 1e-4); seeded training bit-identical: %s",
                    mismatched, batch.size(), relabeled, critic_err, actor_err, same ? "yes" : "no")};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::vector<std::string> only;
    std::string out = "acceptance_runs";
    bool strict = false;
    app.add_option("--only", only, "Run only these criteria");
    app.add_option("--out", out, "Directory for training artifacts")->capture_default_str();
    app.add_flag("--strict", strict, "Exit 1 if any criterion fails");
    CLI11_PARSE(app, argc, argv);

    Runs runs{out, {}};
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"kinematics", kinematics},
        {"physics", physics},
        {"grasp", grasp},
        {"throughput", throughput},
        {"scripted", scripted},
        {"learning_internals", [&] { return learning_internals(runs); }},
        {"rl_reproduction", [&] { return rl_reproduction(runs); }},
        {"active_track", [&] { return active_track(runs); }},
        {"cross_eval", [&] { return cross_eval(runs); }},
    };
    fs::create_directories(out);
    std::ofstream report(fs::path(out) / "report.txt");
    int failed = 0, errors = 0;
    for (const auto& [name, run] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        bool crashed = false;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
            crashed = true;
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const auto line = fmt("%s %s: %s [%.1f s]", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
        std::printf("%s\n", line.c_str());
        std::fflush(stdout);
        report << line << std::endl;
        failed += !o.pass;
        errors += crashed;
    }
    std::printf("%d criteria failed\n", failed);
    report << failed << " criteria failed\n";
    if (errors) return 2;
    return strict && failed ? 1 : 0;
}
