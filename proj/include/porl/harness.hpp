#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "porl/checkpoint.hpp"
#include "porl/envs.hpp"
#include "porl/ppo.hpp"
#include "porl/sensor_failure.hpp"
#include "porl/stats.hpp"
#include "porl/theory.hpp"

namespace porl {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Flat experiment configuration. Every key is optional in the input;
// unknown keys are hard errors. Serialization always emits the full set.
// ---------------------------------------------------------------------------

struct ExperimentConfig {
    std::string env = "pointmass";
    std::string encoder = "mlp";
    bool wrapper = true;
    bool normalize = true;
    double sensor_p_fail = 0.01;
    double sensor_p_recover = 0.9;
    double group_p_fail = 0.55;
    double group_p_recover = 0.9;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5, 6, 7, 8};
    int eval_episodes = 100;
    std::string out_dir = "out";
    long total_timesteps = -1;  // -1 picks the per-env desk-scale default
    int n_workers = 0;          // 0 = hardware concurrency
    bool dump_trajectory = false;

    // PPO hyperparameters
    double lr = 3e-4;
    int n_steps = 2048;
    double gamma = 0.99;
    double gae_lambda = 0.95;
    int n_minibatches = 32;
    int update_epochs = 10;
    double clip_coef = 0.2;
    double ent_coef = 0.0;
    double vf_coef = 0.5;
    double max_grad_norm = 0.5;
    int segment_len = 16;
    int burn_in = 8;

    // encoder architecture
    int model_dim = 128;
    int seq_len = 16;
    double dropout = 0.1;

    // bound-verification experiment
    double bound_gamma = 0.9;
    double bound_delta = 0.1;
    int bound_trials = 2000;
    std::uint64_t bound_policy_seed = 7;
    double bound_weight_scale = 1.0;

    ChainParams sensor_params() const { return {sensor_p_fail, sensor_p_recover}; }
    ChainParams group_params() const { return {group_p_fail, group_p_recover}; }

    long resolved_timesteps() const {
        if (total_timesteps >= 0) return total_timesteps;
        return env == "chain5" ? 50000 : 200000;
    }

    PPOConfig ppo() const {
        PPOConfig cfg;
        cfg.total_timesteps = resolved_timesteps();
        cfg.lr = lr;
        cfg.n_steps = n_steps;
        cfg.gamma = gamma;
        cfg.gae_lambda = gae_lambda;
        cfg.n_minibatches = n_minibatches;
        cfg.update_epochs = update_epochs;
        cfg.clip_coef = clip_coef;
        cfg.ent_coef = ent_coef;
        cfg.vf_coef = vf_coef;
        cfg.max_grad_norm = max_grad_norm;
        cfg.segment_len = segment_len;
        cfg.burn_in = burn_in;
        return cfg;
    }

    EncoderConfig encoder_cfg() const {
        EncoderConfig cfg;
        cfg.model_dim = model_dim;
        cfg.seq_len = seq_len;
        cfg.dropout = dropout;
        return cfg;
    }

    json to_json() const {
        json j;
        j["env"] = env;
        j["encoder"] = encoder;
        j["wrapper"] = wrapper;
        j["normalize"] = normalize;
        j["sensor_p_fail"] = sensor_p_fail;
        j["sensor_p_recover"] = sensor_p_recover;
        j["group_p_fail"] = group_p_fail;
        j["group_p_recover"] = group_p_recover;
        j["seeds"] = seeds;
        j["eval_episodes"] = eval_episodes;
        j["out_dir"] = out_dir;
        j["total_timesteps"] = total_timesteps;
        j["n_workers"] = n_workers;
        j["dump_trajectory"] = dump_trajectory;
        j["lr"] = lr;
        j["n_steps"] = n_steps;
        j["gamma"] = gamma;
        j["gae_lambda"] = gae_lambda;
        j["n_minibatches"] = n_minibatches;
        j["update_epochs"] = update_epochs;
        j["clip_coef"] = clip_coef;
        j["ent_coef"] = ent_coef;
        j["vf_coef"] = vf_coef;
        j["max_grad_norm"] = max_grad_norm;
        j["segment_len"] = segment_len;
        j["burn_in"] = burn_in;
        j["model_dim"] = model_dim;
        j["seq_len"] = seq_len;
        j["dropout"] = dropout;
        j["bound_gamma"] = bound_gamma;
        j["bound_delta"] = bound_delta;
        j["bound_trials"] = bound_trials;
        j["bound_policy_seed"] = bound_policy_seed;
        j["bound_weight_scale"] = bound_weight_scale;
        return j;
    }

    static ExperimentConfig from_json(const json& j) {
        ExperimentConfig cfg;
        const json defaults = cfg.to_json();
        for (const auto& [key, value] : j.items()) {
            if (!defaults.contains(key))
                throw std::invalid_argument("ExperimentConfig: unknown key '" + key + "'");
            (void)value;
        }
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("env", cfg.env);
        get("encoder", cfg.encoder);
        get("wrapper", cfg.wrapper);
        get("normalize", cfg.normalize);
        get("sensor_p_fail", cfg.sensor_p_fail);
        get("sensor_p_recover", cfg.sensor_p_recover);
        get("group_p_fail", cfg.group_p_fail);
        get("group_p_recover", cfg.group_p_recover);
        get("seeds", cfg.seeds);
        get("eval_episodes", cfg.eval_episodes);
        get("out_dir", cfg.out_dir);
        get("total_timesteps", cfg.total_timesteps);
        get("n_workers", cfg.n_workers);
        get("dump_trajectory", cfg.dump_trajectory);
        get("lr", cfg.lr);
        get("n_steps", cfg.n_steps);
        get("gamma", cfg.gamma);
        get("gae_lambda", cfg.gae_lambda);
        get("n_minibatches", cfg.n_minibatches);
        get("update_epochs", cfg.update_epochs);
        get("clip_coef", cfg.clip_coef);
        get("ent_coef", cfg.ent_coef);
        get("vf_coef", cfg.vf_coef);
        get("max_grad_norm", cfg.max_grad_norm);
        get("segment_len", cfg.segment_len);
        get("burn_in", cfg.burn_in);
        get("model_dim", cfg.model_dim);
        get("seq_len", cfg.seq_len);
        get("dropout", cfg.dropout);
        get("bound_gamma", cfg.bound_gamma);
        get("bound_delta", cfg.bound_delta);
        get("bound_trials", cfg.bound_trials);
        get("bound_policy_seed", cfg.bound_policy_seed);
        get("bound_weight_scale", cfg.bound_weight_scale);
        return cfg;
    }

    static ExperimentConfig load(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("ExperimentConfig: cannot open " + path);
        json j;
        is >> j;
        return from_json(j);
    }

    // key=value overrides; values are parsed as JSON when possible and
    // fall back to strings.
    void apply_override(const std::string& spec) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("override must look like key=value, got '" + spec + "'");
        const std::string key = spec.substr(0, eq);
        const std::string raw = spec.substr(eq + 1);
        json j = to_json();
        if (!j.contains(key))
            throw std::invalid_argument("ExperimentConfig: unknown key '" + key + "'");
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::parse_error&) {
            value = raw;
        }
        j[key] = value;
        *this = from_json(j);
    }
};

// ---------------------------------------------------------------------------
// Environment / agent construction with the documented seed-splitting
// scheme: each component draws from an independent stream derived from
// the run's master seed.
// ---------------------------------------------------------------------------

inline std::unique_ptr<Env> make_training_env(const ExperimentConfig& cfg, std::uint64_t seed) {
    auto inner = make_env(cfg.env, Rng::derive(seed, streams::kEnv));
    if (!cfg.wrapper) return inner;
    auto wrapped = std::make_unique<FailureWrapperEnv>(std::move(inner), cfg.sensor_params(),
                                                       cfg.group_params(), cfg.normalize,
                                                       Rng::derive(seed, streams::kMask));
    wrapped->set_training(true);
    return wrapped;
}

inline std::unique_ptr<Env> make_eval_env(const ExperimentConfig& cfg, std::uint64_t seed) {
    const std::uint64_t env_seed = Rng::derive(seed, streams::kEval);
    auto inner = make_env(cfg.env, env_seed);
    if (!cfg.wrapper) return inner;
    auto wrapped = std::make_unique<FailureWrapperEnv>(std::move(inner), cfg.sensor_params(),
                                                       cfg.group_params(), cfg.normalize,
                                                       Rng::derive(env_seed, streams::kMask));
    wrapped->set_training(false);
    return wrapped;
}

inline std::unique_ptr<Agent> build_agent(const ExperimentConfig& cfg, const EnvSpec& spec,
                                          std::uint64_t seed) {
    return std::make_unique<Agent>(encoder_kind_from_name(cfg.encoder), spec, cfg.encoder_cfg(),
                                   seed);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct UpdateRow {
    long global_step = 0;
    double mean_episodic_return = std::numeric_limits<double>::quiet_NaN();
    UpdateMetrics metrics;
};

struct SeedTrainResult {
    std::uint64_t seed = 0;
    std::vector<UpdateRow> rows;
    bool aborted = false;
    std::string error;
};

inline json update_row_to_json(const UpdateRow& row) {
    json j;
    j["global_step"] = row.global_step;
    if (std::isnan(row.mean_episodic_return))
        j["mean_episodic_return"] = nullptr;
    else
        j["mean_episodic_return"] = row.mean_episodic_return;
    j["policy_loss"] = row.metrics.policy_loss;
    j["value_loss"] = row.metrics.value_loss;
    j["entropy"] = row.metrics.entropy;
    j["clip_frac"] = row.metrics.clip_frac;
    j["approx_kl"] = row.metrics.approx_kl;
    j["grad_norm"] = row.metrics.grad_norm;
    j["skipped_minibatches"] = row.metrics.skipped_minibatches;
    return j;
}

inline void append_normalizer_tensors(std::vector<NamedTensor>& out,
                                      const RunningNormalizer& norm) {
    out.push_back({"norm.count", ad::Tensor::from({1}, {norm.count()})});
    out.push_back({"norm.mean", ad::Tensor::from({norm.mean().size()}, norm.mean())});
    out.push_back({"norm.m2", ad::Tensor::from({norm.m2().size()}, norm.m2())});
}

inline void restore_normalizer(RunningNormalizer& norm, const std::vector<NamedTensor>& loaded) {
    std::vector<double> count, mean, m2;
    for (const auto& nt : loaded) {
        if (nt.name == "norm.count") count = nt.tensor.values();
        if (nt.name == "norm.mean") mean = nt.tensor.values();
        if (nt.name == "norm.m2") m2 = nt.tensor.values();
    }
    if (count.empty() || mean.empty() || m2.empty())
        throw std::runtime_error("restore_normalizer: checkpoint lacks normalizer state");
    norm.restore(count[0], std::move(mean), std::move(m2));
}

// One PPO run. Writes metrics.jsonl and checkpoint.bin (parameters plus
// normalizer state) under <out_dir>/seed_<seed>/.
inline SeedTrainResult train_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
    SeedTrainResult result;
    result.seed = seed;
    const std::filesystem::path dir =
        std::filesystem::path(cfg.out_dir) / ("seed_" + std::to_string(seed));
    std::filesystem::create_directories(dir);
    try {
        auto env = make_training_env(cfg, seed);
        auto agent = build_agent(cfg, env->spec(), seed);
        PPOConfig pcfg = cfg.ppo();
        pcfg.validate();
        Adam adam(&agent->all_params(), {pcfg.lr});
        Rng policy_rng(Rng::derive(seed, streams::kPolicy));
        Rng shuffle_rng(Rng::derive(seed, streams::kShuffle));
        Rng dropout_rng(Rng::derive(seed, streams::kDropout));
        RolloutState stream;
        double ep_ret = 0.0;
        const long iterations = pcfg.total_timesteps / pcfg.n_steps;
        for (long it = 0; it < iterations; ++it) {
            RolloutBuffer buf = collect_rollout(*agent, *env, pcfg, stream, policy_rng);
            double sum = 0.0;
            int count = 0;
            for (int t = 0; t < buf.n_steps; ++t) {
                ep_ret += buf.rewards[static_cast<std::size_t>(t)];
                if (buf.ended_at(t)) {
                    sum += ep_ret;
                    ep_ret = 0.0;
                    ++count;
                }
            }
            compute_gae(buf, pcfg.gamma, pcfg.gae_lambda);
            UpdateRow row;
            row.global_step = (it + 1) * pcfg.n_steps;
            if (count > 0)
                row.mean_episodic_return = sum / count;
            else if (!result.rows.empty())
                row.mean_episodic_return = result.rows.back().mean_episodic_return;
            row.metrics = ppo_update(*agent, buf, pcfg, adam, shuffle_rng, dropout_rng);
            result.rows.push_back(row);
        }
        std::vector<NamedTensor> ckpt = agent->all_params();
        if (cfg.wrapper)
            append_normalizer_tensors(ckpt,
                                      static_cast<FailureWrapperEnv&>(*env).normalizer());
        save_checkpoint((dir / "checkpoint.bin").string(), ckpt);
    } catch (const std::exception& e) {
        result.aborted = true;
        result.error = e.what();
    }
    std::ofstream os(dir / "metrics.jsonl");
    for (const auto& row : result.rows) os << update_row_to_json(row).dump() << "\n";
    if (result.aborted) {
        std::ofstream err(dir / "error.txt");
        err << result.error << "\n";
    }
    return result;
}

// Fans seed runs out to a worker pool and joins before aggregation.
inline std::vector<SeedTrainResult> train_all_seeds(const ExperimentConfig& cfg) {
    const std::size_t n_workers =
        cfg.n_workers > 0 ? static_cast<std::size_t>(cfg.n_workers)
                          : std::max(1u, std::thread::hardware_concurrency());
    std::vector<SeedTrainResult> results(cfg.seeds.size());
    std::size_t next = 0;
    while (next < cfg.seeds.size()) {
        const std::size_t batch = std::min(n_workers, cfg.seeds.size() - next);
        std::vector<std::future<SeedTrainResult>> futures;
        for (std::size_t k = 0; k < batch; ++k) {
            const std::uint64_t seed = cfg.seeds[next + k];
            futures.push_back(
                std::async(std::launch::async, [&cfg, seed] { return train_seed(cfg, seed); }));
        }
        for (std::size_t k = 0; k < batch; ++k) results[next + k] = futures[k].get();
        next += batch;
    }
    return results;
}

// step,median,q25,q75 across seeds per update index.
inline void write_curve_csv(const std::string& path, const std::vector<SeedTrainResult>& results,
                            bool smoothed, double ema_factor = 0.9) {
    std::size_t n_rows = 0;
    for (const auto& r : results) n_rows = std::max(n_rows, r.rows.size());
    std::vector<long> steps(n_rows, 0);
    std::vector<std::vector<double>> series;  // per seed, per update
    for (const auto& r : results) {
        std::vector<double> vals;
        for (std::size_t i = 0; i < r.rows.size(); ++i) {
            steps[i] = r.rows[i].global_step;
            vals.push_back(r.rows[i].mean_episodic_return);
        }
        if (smoothed) vals = stats::ema(vals, ema_factor);
        series.push_back(std::move(vals));
    }
    std::ofstream os(path);
    os << "step,median,q25,q75\n";
    os.precision(17);
    for (std::size_t i = 0; i < n_rows; ++i) {
        std::vector<double> col;
        for (const auto& s : series)
            if (i < s.size() && !std::isnan(s[i])) col.push_back(s[i]);
        if (col.empty()) continue;
        os << steps[i] << "," << stats::median(col) << "," << stats::quantile(col, 0.25) << ","
           << stats::quantile(col, 0.75) << "\n";
    }
}

// Runs the full training command; returns a process exit code.
inline int cmd_train(const ExperimentConfig& cfg) {
    std::filesystem::create_directories(cfg.out_dir);
    {
        std::ofstream os(std::filesystem::path(cfg.out_dir) / "config.json");
        os << cfg.to_json().dump(2) << "\n";
    }
    auto results = train_all_seeds(cfg);
    write_curve_csv((std::filesystem::path(cfg.out_dir) / "curve.csv").string(), results,
                    /*smoothed=*/false);
    write_curve_csv((std::filesystem::path(cfg.out_dir) / "curve_smoothed.csv").string(),
                    results, /*smoothed=*/true);
    bool any_aborted = false;
    for (const auto& r : results) any_aborted = any_aborted || r.aborted;
    return any_aborted ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct RunSummary {
    std::vector<std::uint64_t> seeds;
    std::vector<std::vector<double>> per_seed_returns;
    std::vector<double> pooled;
    double median = 0.0;
    double q25 = 0.0;
    double q75 = 0.0;
    stats::BootstrapCI ci;
    int n_resamples = 10000;
};

inline json run_summary_to_json(const RunSummary& s) {
    json j;
    j["seeds"] = s.seeds;
    j["per_seed_returns"] = s.per_seed_returns;
    j["pooled_median"] = s.median;
    j["q25"] = s.q25;
    j["q75"] = s.q75;
    j["ci_lo"] = s.ci.lo;
    j["ci_hi"] = s.ci.hi;
    j["n_resamples"] = s.n_resamples;
    j["n_pooled"] = s.pooled.size();
    return j;
}

// Deterministic mean-action evaluation of one stored seed checkpoint.
inline std::vector<double> evaluate_checkpoint_seed(const ExperimentConfig& cfg,
                                                    std::uint64_t seed,
                                                    const std::string& checkpoint_dir) {
    const std::filesystem::path dir =
        std::filesystem::path(checkpoint_dir) / ("seed_" + std::to_string(seed));
    auto loaded = load_checkpoint((dir / "checkpoint.bin").string());
    auto env = make_eval_env(cfg, seed);
    auto agent = build_agent(cfg, env->spec(), seed);
    restore_into(agent->all_params(), loaded);
    if (cfg.wrapper)
        restore_normalizer(static_cast<FailureWrapperEnv&>(*env).normalizer(), loaded);
    return evaluate(*agent, *env, cfg.eval_episodes);
}

inline void dump_trajectory_jsonl(const ExperimentConfig& cfg, std::uint64_t seed,
                                  const std::string& checkpoint_dir, const std::string& path) {
    const std::filesystem::path dir =
        std::filesystem::path(checkpoint_dir) / ("seed_" + std::to_string(seed));
    auto loaded = load_checkpoint((dir / "checkpoint.bin").string());
    auto env = make_eval_env(cfg, seed);
    auto agent = build_agent(cfg, env->spec(), seed);
    restore_into(agent->all_params(), loaded);
    if (cfg.wrapper)
        restore_normalizer(static_cast<FailureWrapperEnv&>(*env).normalizer(), loaded);

    const int d = cfg.wrapper ? env->spec().obs_dim / 2 : env->spec().obs_dim;
    std::ofstream os(path);
    agent->reset_memory();
    std::vector<double> obs = env->reset();
    while (true) {
        auto action = agent->act_deterministic(obs);
        StepResult r = env->step(action);
        json line;
        line["obs"] = std::vector<double>(obs.begin(), obs.begin() + d);
        if (cfg.wrapper)
            line["mask"] = std::vector<double>(obs.begin() + d, obs.end());
        else
            line["mask"] = std::vector<double>(static_cast<std::size_t>(d), 1.0);
        line["action"] = action;
        line["reward"] = r.reward;
        line["done"] = r.done || r.truncated;
        os << line.dump() << "\n";
        if (r.done || r.truncated) break;
        obs = r.observation;
    }
}

inline RunSummary summarize_returns(const std::vector<std::uint64_t>& seeds,
                                    std::vector<std::vector<double>> per_seed,
                                    std::uint64_t bootstrap_seed, int n_resamples = 10000) {
    RunSummary s;
    s.seeds = seeds;
    s.per_seed_returns = std::move(per_seed);
    for (const auto& r : s.per_seed_returns) s.pooled.insert(s.pooled.end(), r.begin(), r.end());
    s.median = stats::median(s.pooled);
    s.q25 = stats::quantile(s.pooled, 0.25);
    s.q75 = stats::quantile(s.pooled, 0.75);
    Rng rng(Rng::derive(bootstrap_seed, streams::kBootstrap));
    s.n_resamples = n_resamples;
    s.ci = stats::bootstrap_median_ci(s.pooled, n_resamples, rng);
    return s;
}

inline RunSummary eval_summary(const ExperimentConfig& cfg, const std::string& checkpoint_dir) {
    std::vector<std::vector<double>> per_seed;
    for (std::uint64_t seed : cfg.seeds)
        per_seed.push_back(evaluate_checkpoint_seed(cfg, seed, checkpoint_dir));
    return summarize_returns(cfg.seeds, std::move(per_seed), cfg.seeds.front());
}

inline int cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_dir) {
    RunSummary s = eval_summary(cfg, checkpoint_dir);
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream os(std::filesystem::path(cfg.out_dir) / "summary.json");
    os << run_summary_to_json(s).dump(2) << "\n";
    if (cfg.dump_trajectory)
        dump_trajectory_jsonl(
            cfg, cfg.seeds.front(), checkpoint_dir,
            (std::filesystem::path(cfg.out_dir) / "trajectory.jsonl").string());
    return 0;
}

// ---------------------------------------------------------------------------
// Mask simulation
// ---------------------------------------------------------------------------

inline int cmd_mask_sim(const ExperimentConfig& cfg, std::size_t n_steps, std::uint64_t seed) {
    std::filesystem::create_directories(cfg.out_dir);
    auto probe_env = make_env(cfg.env, 0);
    const SensorLayout layout = probe_env->spec().layout;
    const ChainParams sensor = cfg.sensor_params();
    const ChainParams group = cfg.group_params();

    Rng rng(seed);
    MaskProcessState state = stationary_init(layout, sensor, group, rng);
    const auto d = static_cast<std::size_t>(layout.n_sensors());
    const auto g = static_cast<std::size_t>(layout.n_groups);
    std::vector<std::vector<std::uint8_t>> trace;
    trace.reserve(n_steps);
    std::vector<double> z_up(d, 0.0), y_up(g, 0.0), x_up(d, 0.0);
    double x_fail_transitions = 0, x_up_steps = 0, x_recover_transitions = 0, x_down_steps = 0;
    std::vector<std::uint8_t> prev_x = state.x;
    for (std::size_t t = 0; t < n_steps; ++t) {
        trace.push_back(state.x);
        for (std::size_t i = 0; i < d; ++i) {
            z_up[i] += state.z[i];
            x_up[i] += state.x[i];
        }
        for (std::size_t j = 0; j < g; ++j) y_up[j] += state.y[j];
        prev_x = state.x;
        step_mask_process(state, layout, sensor, group, rng);
        for (std::size_t i = 0; i < d; ++i) {
            if (prev_x[i]) {
                x_up_steps += 1;
                if (!state.x[i]) x_fail_transitions += 1;
            } else {
                x_down_steps += 1;
                if (state.x[i]) x_recover_transitions += 1;
            }
        }
    }
    write_trace_csv((std::filesystem::path(cfg.out_dir) / "trace.csv").string(), trace);

    json rep;
    rep["n_steps"] = n_steps;
    rep["seed"] = seed;
    rep["analytic_pi_z"] = steady_state(sensor);
    rep["analytic_pi_y"] = steady_state(group);
    rep["analytic_pi_x"] = stationary_up_rate(sensor, group);
    const auto rates = effective_rates(sensor, group);
    rep["analytic_p_fail_eff"] = rates.p_fail_eff;
    rep["analytic_p_recover_eff"] = rates.p_recover_eff;
    rep["mixing_time_bound"] = mixing_time_bound(sensor, group);
    for (auto& v : z_up) v /= static_cast<double>(n_steps);
    for (auto& v : y_up) v /= static_cast<double>(n_steps);
    for (auto& v : x_up) v /= static_cast<double>(n_steps);
    rep["empirical_z_up"] = z_up;
    rep["empirical_y_up"] = y_up;
    rep["empirical_x_up"] = x_up;
    rep["empirical_p_fail_eff"] = x_up_steps > 0 ? x_fail_transitions / x_up_steps : 0.0;
    rep["empirical_p_recover_eff"] = x_down_steps > 0 ? x_recover_transitions / x_down_steps : 0.0;
    std::ofstream os(std::filesystem::path(cfg.out_dir) / "mask_report.json");
    os << rep.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// Bound verification
// ---------------------------------------------------------------------------

inline json bound_report_to_json(const theory::BoundReport& r) {
    json j;
    j["gamma"] = r.gamma;
    j["delta"] = r.delta;
    j["pi_x"] = r.up_rates;
    j["h_bar"] = r.h_bar;
    j["L_pi"] = r.l_pi;
    j["L_Q"] = r.l_q;
    j["C_max"] = r.c_max;
    j["tau"] = r.tau;
    j["tau_joint_diagnostic"] = r.tau_joint_diagnostic;
    j["bellman_residual"] = r.bellman_residual;
    j["mu_S_bound"] = r.mu_s_bound;
    j["deviation"] = r.deviation;
    j["cap"] = r.cap;
    j["final_bound"] = r.final_bound;
    j["n_trials"] = r.n_trials;
    j["horizon"] = r.horizon;
    j["truncation_bound"] = r.truncation_bound;
    j["mc_mean"] = r.mc_mean;
    j["mc_se"] = r.mc_se;
    j["mc_quantile"] = r.mc_quantile;
    j["exceed_count"] = r.exceed_count;
    j["exceed_frac"] = r.exceed_frac;
    j["exceed_threshold"] = r.exceed_threshold;
    j["mean_ok"] = r.mean_ok;
    j["tail_ok"] = r.tail_ok;
    j["pass"] = r.pass;
    return j;
}

inline theory::BoundReport run_bound_verification(const ExperimentConfig& cfg,
                                                  std::uint64_t mc_seed) {
    theory::TabularInstance inst = theory::chain5_instance(
        cfg.bound_gamma, cfg.bound_policy_seed, cfg.bound_weight_scale);
    inst.sensor = cfg.sensor_params();
    inst.group = cfg.group_params();
    return theory::verify_theorem(inst, cfg.bound_delta, cfg.bound_trials, mc_seed);
}

inline int cmd_verify_bound(const ExperimentConfig& cfg, std::uint64_t mc_seed) {
    auto rep = run_bound_verification(cfg, mc_seed);
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream os(std::filesystem::path(cfg.out_dir) / "bound_report.json");
    os << bound_report_to_json(rep).dump(2) << "\n";
    return rep.pass ? 0 : 2;
}

}  // namespace porl
