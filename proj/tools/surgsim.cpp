// Command-line entry point: train, eval, collect, replay, bench, cross-eval
// and serve. Exit codes: 0 ok, 1 runtime failure, 2 usage or config error.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "surgsim/bridge.hpp"
#include "surgsim/demos.hpp"
#include "surgsim/errors.hpp"
#include "surgsim/rl.hpp"

#ifndef SURGSIM_GIT_DESCRIBE
#define SURGSIM_GIT_DESCRIBE "unknown"
#endif

using namespace surgsim;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Bad flags, missing inputs, mismatched configs.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Common {
    std::string task;
    std::string config_path;
    std::string grasp_mode;
    std::string out;
};

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open '" + path + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw UsageError(path + ": " + e.what());
    }
}

env::TaskConfig resolve_config(const Common& c) {
    env::TaskConfig cfg;
    if (!c.config_path.empty()) {
        cfg = env::TaskConfig::from_json(read_json_file(c.config_path));
        if (!c.task.empty() && env::parse_task(c.task) != cfg.task)
            throw UsageError("--task " + c.task + " disagrees with " + c.config_path);
    } else {
        if (c.task.empty()) throw UsageError("--task or --config is required");
        cfg = env::default_config(env::parse_task(c.task));
    }
    if (!c.grasp_mode.empty()) cfg.grasp_mode = phys::GraspMode::parse(c.grasp_mode);
    return cfg;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');) {
        try {
            size_t used = 0;
            seeds.push_back(std::stoull(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError("bad seed list '" + text + "'");
        }
    }
    if (seeds.empty()) throw UsageError("empty seed list");
    return seeds;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
    out << text;
}

// Written before any work so a run directory always says how it was made.
void write_manifest(const std::string& command, const Common& c, const env::TaskConfig& cfg,
                    const std::vector<std::uint64_t>& seeds, const std::vector<std::string>& argv, json extra = {}) {
    fs::create_directories(c.out);
    json m = {{"command", command},
              {"argv", argv},
              {"task", env::task_name(cfg.task)},
              {"config_path", c.config_path},
              {"task_config", cfg.to_json()},
              {"env_config_hash", cfg.hash()},
              {"seeds", seeds},
              {"grasp_mode", cfg.grasp_mode.label()},
              {"git_describe", SURGSIM_GIT_DESCRIBE},
              {"output_dir", fs::absolute(c.out).string()},
              {"started_utc", utc_now()}};
    if (!extra.is_null()) m["options"] = extra;
    write_text(fs::path(c.out) / "manifest.json", m.dump(2) + "\n");
}

void add_common(CLI::App* app, Common& c, const std::string& default_out) {
    app->add_option("--task", c.task, "Task name, e.g. needle_pick");
    app->add_option("--config", c.config_path, "Task config JSON (see config/tasks)");
    app->add_option("--grasp-mode", c.grasp_mode, "interact or approx:<mm>");
    c.out = default_out;
    app->add_option("--out", c.out, "Output directory")->capture_default_str();
}

std::string machine_description() {
    std::ifstream in("/proc/cpuinfo");
    std::string line, model = "unknown";
    while (std::getline(in, line))
        if (line.rfind("model name", 0) == 0) {
            model = line.substr(line.find(':') + 2);
            break;
        }
    return model + ", " + std::to_string(std::thread::hardware_concurrency()) + " hardware threads";
}

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

} // namespace

int main(int argc, char** argv) {
    const std::vector<std::string> args(argv, argv + argc);
    CLI::App app{"Surgical robot learning simulator"};
    app.require_subcommand(1);

    // train
    Common tc;
    std::string algo = "her", seeds_text = "1", demos_path, train_config_path;
    int epochs = -1, n_demos = 100, eval_episodes = 100;
    std::uint64_t eval_seed0 = 1'000'000;
    bool resume = false;
    auto* train = app.add_subcommand("train", "Train DDPG, HER or HER+DEMO");
    add_common(train, tc, "runs/train");
    train->add_option("--algo", algo, "ddpg, her or her_demo")->capture_default_str();
    train->add_option("--seeds", seeds_text, "Comma-separated seeds")->capture_default_str();
    train->add_option("--epochs", epochs, "Epochs (40 episodes each)");
    train->add_option("--demos", demos_path, "Demo file for her_demo");
    train->add_option("--n-demos", n_demos, "Demo episodes to load")->capture_default_str();
    train->add_option("--train-config", train_config_path, "JSON overrides for the training config");
    train->add_option("--eval-episodes", eval_episodes, "Held-out episodes per seed after training")
        ->capture_default_str();
    train->add_option("--eval-seed0", eval_seed0, "First held-out seed")->capture_default_str();
    train->add_flag("--resume", resume, "Continue from checkpoints in the output directory");

    // eval
    Common ec;
    std::vector<std::string> policy_paths;
    bool scripted = false;
    int episodes = 100;
    std::uint64_t seed0 = 1'000'000;
    auto* eval = app.add_subcommand("eval", "Evaluate saved policies or the scripted policy");
    add_common(eval, ec, "runs/eval");
    eval->add_option("--policy", policy_paths, "Policy file(s) written by train");
    eval->add_flag("--scripted", scripted, "Evaluate the scripted policy");
    eval->add_option("--episodes", episodes, "Episodes per policy")->capture_default_str();
    eval->add_option("--seed0", seed0, "First episode seed")->capture_default_str();

    // collect
    Common cc;
    int collect_n = 100;
    std::uint64_t collect_seed0 = 0;
    auto* collect = app.add_subcommand("collect", "Record scripted demonstrations");
    add_common(collect, cc, "runs/collect");
    collect->add_option("--episodes", collect_n, "Successful episodes to store")->capture_default_str();
    collect->add_option("--seed0", collect_seed0, "First seed")->capture_default_str();

    // replay
    Common rc;
    std::string replay_file, dump_path;
    auto* replay = app.add_subcommand("replay", "Re-simulate an episode file and verify it bit for bit");
    add_common(replay, rc, "runs/replay");
    replay->add_option("--file", replay_file, "Episode file (JSON lines)")->required();
    replay->add_option("--dump", dump_path, "Write a per-step trajectory CSV");

    // bench
    Common bc;
    long bench_steps = 10000;
    int trials = 3;
    auto* bench = app.add_subcommand("bench", "Random-action stepping rate");
    add_common(bench, bc, "runs/bench");
    bench->add_option("--steps", bench_steps, "Control steps per trial")->capture_default_str();
    bench->add_option("--trials", trials, "Trials")->capture_default_str();

    // cross-eval
    Common xc;
    std::vector<std::string> policy_sets;
    std::string test_modes_text = "approx:1,approx:2,approx:3,interact";
    int x_episodes = 200;
    std::uint64_t x_seed0 = 1'000'000;
    auto* cross = app.add_subcommand("cross-eval", "Grasp-mode cross-evaluation matrix");
    add_common(cross, xc, "runs/cross_eval");
    cross->add_option("--policies", policy_sets, "MODE=policy.json,policy.json,... (one per training mode)")
        ->required();
    cross->add_option("--test-modes", test_modes_text, "Comma-separated test modes")->capture_default_str();
    cross->add_option("--episodes", x_episodes, "Episodes per policy and cell")->capture_default_str();
    cross->add_option("--seed0", x_seed0, "First episode seed")->capture_default_str();

    // serve
    Common sc;
    std::string address = "127.0.0.1:5555";
    auto* serve = app.add_subcommand("serve", "Serve the env over the local TCP bridge");
    add_common(serve, sc, "runs/serve");
    serve->add_option("--serve", address, "host:port")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*train) {
            const auto cfg = resolve_config(tc);
            const auto seeds = parse_seeds(seeds_text);
            rl::TrainConfig base = rl::default_train_config(cfg.task, rl::parse_algo(algo));
            if (!train_config_path.empty()) {
                auto j = base.to_json();
                j.merge_patch(read_json_file(train_config_path));
                base = rl::TrainConfig::from_json(j);
            }
            base.task = cfg;
            if (epochs > 0) base.epochs = epochs;
            base.n_demos = n_demos;
            if (base.algo == rl::Algo::HerDemo) {
                if (demos_path.empty()) throw UsageError("her_demo needs --demos");
                if (!fs::exists(demos_path)) throw UsageError("demo file '" + demos_path + "' does not exist");
                base.demo_path = fs::absolute(demos_path).string();
            }
            write_manifest("train", tc, cfg, seeds, args, base.to_json());
            std::string summary = "seed,epochs,final_test_success,eval_success,eval_mean_reward\n";
            for (auto seed : seeds) {
                auto run = base;
                run.seed = seed;
                const auto dir = (fs::path(tc.out) / ("seed_" + std::to_string(seed))).string();
                std::cout << "seed " << seed << ": training " << run.epochs << " epochs into " << dir << std::endl;
                const auto result = rl::train(run, dir, resume, [&](const rl::EpochMetrics& m) {
                    std::cout << "  " << rl::metrics_csv_row(m) << std::endl;
                });
                const auto ev = rl::evaluate(result.agent.policy_fn(), cfg, eval_episodes, eval_seed0);
                char row[160];
                std::snprintf(row, sizeof row, "%llu,%zu,%.4f,%.4f,%.6f\n", static_cast<unsigned long long>(seed),
                              result.metrics.size(),
                              result.metrics.empty() ? 0.0 : result.metrics.back().test_success, ev.success_rate,
                              ev.mean_reward);
                summary += row;
                std::cout << "seed " << seed << ": held-out success " << ev.success_rate << ", mean reward "
                          << ev.mean_reward << std::endl;
            }
            write_text(fs::path(tc.out) / "summary.csv", summary);
            return 0;
        }

        if (*eval) {
            const auto cfg = resolve_config(ec);
            if (scripted == !policy_paths.empty()) throw UsageError("give either --scripted or --policy");
            for (const auto& p : policy_paths)
                if (!fs::exists(p)) throw UsageError("policy file '" + p + "' does not exist");
            write_manifest("eval", ec, cfg, {seed0}, args);
            json results = json::array();
            auto report = [&](const std::string& name, double success, double reward) {
                std::printf("%s: success %.3f, mean reward %.4f over %d episodes\n", name.c_str(), success, reward,
                            episodes);
                results.push_back({{"policy", name}, {"success_rate", success}, {"mean_reward", reward},
                                   {"episodes", episodes}});
            };
            if (scripted) {
                env::TaskEnv env(cfg);
                int solved = 0;
                double reward = 0.0;
                for (int i = 0; i < episodes; ++i) {
                    const auto ep = demos::run_scripted(env, seed0 + i);
                    solved += episode_solved(env, ep);
                    reward += ep.mean_reward();
                }
                report("scripted", episodes ? double(solved) / episodes : 0.0, episodes ? reward / episodes : 0.0);
            }
            for (const auto& p : policy_paths) {
                const auto agent = rl::load_agent(p);
                const auto r = rl::evaluate(agent.policy_fn(), cfg, episodes, seed0);
                report(p, r.success_rate, r.mean_reward);
            }
            write_text(fs::path(ec.out) / "eval.json", results.dump(2) + "\n");
            return 0;
        }

        if (*collect) {
            const auto cfg = resolve_config(cc);
            write_manifest("collect", cc, cfg, {collect_seed0}, args);
            env::TaskEnv env(cfg);
            const auto path = (fs::path(cc.out) / (env::task_name(cfg.task) + "_demos.jsonl")).string();
            const auto stats = demos::collect_demos(env, collect_n, path, collect_seed0);
            std::printf("stored %d of %d attempted episodes in %s\n", stats.stored, stats.attempted, path.c_str());
            return 0;
        }

        if (*replay) {
            if (!fs::exists(replay_file)) throw UsageError("episode file '" + replay_file + "' does not exist");
            const auto file = read_episodes(replay_file);
            Common effective = rc;
            env::TaskConfig cfg = file.config;
            if (!rc.grasp_mode.empty()) cfg.grasp_mode = phys::GraspMode::parse(rc.grasp_mode);
            write_manifest("replay", effective, cfg, {}, args);
            env::TaskEnv env(cfg);
            std::ofstream dump;
            if (!dump_path.empty()) {
                dump.open(dump_path);
                dump << "episode,seed,t,reward,stored_reward,is_success\n";
            }
            int bad_episodes = 0;
            for (size_t e = 0; e < file.episodes.size(); ++e) {
                const auto& ep = file.episodes[e];
                env.reset(ep.seed);
                for (int t = 0; t < ep.length(); ++t) {
                    const auto r = env.step(ep.actions[t]);
                    if (dump.is_open())
                        dump << e << ',' << ep.seed << ',' << t << ',' << r.reward << ',' << ep.rewards[t] << ','
                             << r.info.is_success << '\n';
                    if (r.reward != ep.rewards[t] || r.obs.observation != ep.obs[t + 1]) {
                        std::printf("episode %zu (seed %llu) diverges at step %d: reward %g, stored %g\n", e,
                                    static_cast<unsigned long long>(ep.seed), t, r.reward, ep.rewards[t]);
                        ++bad_episodes;
                        break;
                    }
                }
            }
            std::printf("%zu episodes replayed, %d diverged\n", file.episodes.size(), bad_episodes);
            return bad_episodes == 0 ? 0 : 1;
        }

        if (*bench) {
            Common b = bc;
            if (b.task.empty() && b.config_path.empty()) b.task = "needle_reach";
            const auto cfg = resolve_config(b);
            write_manifest("bench", b, cfg, {0}, args);
            env::TaskEnv env(cfg);
            std::mt19937_64 rng(0);
            std::uniform_real_distribution<double> u(-1.0, 1.0);
            const int dim = env.action_spec().dim();
            json trials_json = json::array();
            double sum_hz = 0.0;
            for (int trial = 0; trial < trials; ++trial) {
                env.reset(trial);
                long steps = 0;
                const auto t0 = std::chrono::steady_clock::now();
                while (steps < bench_steps) {
                    Eigen::VectorXd a(dim);
                    for (int i = 0; i < dim; ++i) a[i] = u(rng);
                    const auto r = env.step(a);
                    ++steps;
                    if (r.done) env.reset(trial * 1'000'000 + steps);
                }
                const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                const double hz = steps / secs;
                sum_hz += hz;
                trials_json.push_back({{"steps", steps}, {"seconds", secs}, {"hz", hz}});
                std::printf("trial %d: %ld steps in %.3f s, %.0f Hz\n", trial, steps, secs, hz);
            }
            const double mean_hz = trials > 0 ? sum_hz / trials : 0.0;
            std::printf("mean %.0f control steps/s on %s\n", mean_hz, machine_description().c_str());
            write_text(fs::path(b.out) / "bench.json",
                       json{{"task", env::task_name(cfg.task)}, {"trials", trials_json}, {"mean_hz", mean_hz},
                            {"machine", machine_description()}}
                               .dump(2) +
                           "\n");
            return 0;
        }

        if (*cross) {
            Common x = xc;
            if (x.task.empty() && x.config_path.empty()) x.task = "needle_pick";
            const auto cfg = resolve_config(x);
            std::vector<std::pair<phys::GraspMode, std::vector<rl::Agent>>> rows;
            json sets = json::object();
            for (const auto& spec : policy_sets) {
                const auto eq = spec.find('=');
                if (eq == std::string::npos) throw UsageError("--policies expects MODE=file,file,...");
                const auto mode = phys::GraspMode::parse(spec.substr(0, eq));
                std::vector<rl::Agent> agents;
                std::stringstream ss(spec.substr(eq + 1));
                for (std::string p; std::getline(ss, p, ',');) {
                    if (!fs::exists(p)) throw UsageError("checkpoint '" + p + "' does not exist");
                    agents.push_back(rl::load_agent(p));
                    sets[mode.label()].push_back(p);
                }
                rows.emplace_back(mode, std::move(agents));
            }
            std::vector<phys::GraspMode> test_modes;
            std::stringstream ms(test_modes_text);
            for (std::string m; std::getline(ms, m, ',');) test_modes.push_back(phys::GraspMode::parse(m));
            write_manifest("cross-eval", x, cfg, {x_seed0}, args, {{"policies", sets}, {"episodes", x_episodes}});
            const auto m = rl::cross_eval_matrix(rows, test_modes, cfg, x_episodes, x_seed0);
            std::string csv = "train_mode";
            for (const auto& t : m.test_modes) csv += "," + t;
            csv += "\n";
            for (size_t r = 0; r < m.train_modes.size(); ++r) {
                csv += m.train_modes[r];
                for (size_t c = 0; c < m.test_modes.size(); ++c) {
                    char cell[48];
                    std::snprintf(cell, sizeof cell, ",%.1f±%.1f", 100.0 * m.mean[r][c], 100.0 * m.stddev[r][c]);
                    csv += cell;
                }
                csv += "\n";
            }
            write_text(fs::path(x.out) / "cross_eval.csv", csv);
            std::cout << csv;
            return 0;
        }

        if (*serve) {
            const auto cfg = resolve_config(sc);
            const auto [host, port] = bridge::parse_address(address);
            write_manifest("serve", sc, cfg, {}, args, {{"address", address}});
            bridge::Server server(cfg, host, port);
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::printf("serving %s on %s:%d\n", env::task_name(cfg.task).c_str(), host.c_str(), server.port());
            std::fflush(stdout);
            while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
            server.stop();
            return 0;
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ContractViolation& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "failed: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
