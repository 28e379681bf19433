// Acceptance suite: one checkable criterion per entry, each printing a
// single PASS/FAIL line. Run all with no arguments or one by number.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "porl/grad_check.hpp"
#include "porl/harness.hpp"

using namespace porl;
using ad::Tensor;

namespace {

double now_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.values()) v = scale * rng.normal();
    return t;
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

// ---------------------------------------------------------------------------
// 1. Failure-model stationarity
// ---------------------------------------------------------------------------

Outcome criterion_stationarity() {
    const ChainParams sensor{0.01, 0.9}, group{0.55, 0.9};
    const SensorLayout layout = SensorLayout::contiguous({2, 2, 1});
    const std::size_t T = 1000000;
    const double t0 = now_seconds();
    auto trace = simulate_trace(layout, sensor, group, T, 424242);
    const double pi_x = stationary_up_rate(sensor, group);
    double worst = 0.0;
    for (int i = 0; i < layout.n_sensors(); ++i) {
        double up = 0.0;
        for (const auto& row : trace) up += row[static_cast<std::size_t>(i)];
        worst = std::max(worst, std::abs(up / static_cast<double>(T) - pi_x));
    }
    const double p_fail_eff = effective_rates(sensor, group).p_fail_eff;
    const double elapsed = now_seconds() - t0;
    std::ostringstream os;
    os << "max |empirical - pi_x| = " << worst << " (pi_x = " << pi_x
       << "), p_fail_eff = " << p_fail_eff << ", " << elapsed << " s";
    const bool pass = worst <= 0.01 && std::abs(p_fail_eff - 0.5545) < 1e-12 &&
                      std::abs(pi_x - 0.6139) < 1e-4 && elapsed < 10.0;
    return {pass, os.str()};
}

// ---------------------------------------------------------------------------
// 2. Gradient integrity at the paper's architecture sizes
// ---------------------------------------------------------------------------

// Central differences near a relu kink can straddle it and report a bogus
// error; a second step size separates that artifact from a wrong gradient.
double robust_grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x) {
    const double e1 = ad::grad_check(f, x, 1e-5);
    if (e1 < 1e-4) return e1;
    return std::min(e1, ad::grad_check(f, std::move(x), 3e-6));
}

Outcome criterion_gradients() {
    const double t0 = now_seconds();
    const int obs_dim = 6;
    EncoderConfig cfg;  // table defaults: width 128, 2/4 layers, 2 heads
    cfg.dropout = 0.0;
    double worst = 0.0;
    Rng data_rng(777);

    {
        Rng rng(101);
        MlpEncoder enc(obs_dim, cfg, rng);
        for (int trial = 0; trial < 20; ++trial) {
            auto f = [&](const Tensor& x) { return ad::sum(enc.forward(x)); };
            worst = std::max(worst, robust_grad_check(f, random_tensor({1, 6}, data_rng)));
        }
    }
    {
        Rng rng(102);
        GruEncoder enc(obs_dim, cfg, rng);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<Tensor> inputs;
            for (int t = 0; t < 8; ++t) inputs.push_back(random_tensor({1, 6}, data_rng));
            auto f = [&](const Tensor& first) {
                std::vector<Tensor> hidden(
                    static_cast<std::size_t>(cfg.recurrent_layers),
                    Tensor::zeros({1, static_cast<std::size_t>(cfg.model_dim)}));
                Tensor z;
                for (int t = 0; t < 8; ++t)
                    z = enc.step_stack(hidden, t == 0 ? first : inputs[static_cast<std::size_t>(t)]);
                return ad::sum(z);
            };
            worst = std::max(worst, robust_grad_check(f, inputs[0].clone()));
        }
    }
    {
        Rng rng(103);
        LruEncoder enc(obs_dim, cfg, rng);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<Tensor> inputs;
            for (int t = 0; t < 8; ++t) inputs.push_back(random_tensor({1, 6}, data_rng));
            auto f = [&](const Tensor& first) {
                auto diags = enc.all_diags();
                std::vector<Tensor> hidden(
                    static_cast<std::size_t>(2 * cfg.recurrent_layers),
                    Tensor::zeros({1, static_cast<std::size_t>(cfg.model_dim)}));
                Tensor z;
                for (int t = 0; t < 8; ++t)
                    z = enc.step_stack(hidden, diags,
                                       t == 0 ? first : inputs[static_cast<std::size_t>(t)]);
                return ad::sum(z);
            };
            worst = std::max(worst, robust_grad_check(f, inputs[0].clone()));
        }
    }
    {
        Rng rng(104);
        TransformerEncoder enc(obs_dim, cfg, rng);  // L = 16
        std::vector<std::uint8_t> invalid(16, 0);
        for (int k = 11; k < 16; ++k) invalid[static_cast<std::size_t>(k)] = 1;
        Rng unused(0);
        for (int trial = 0; trial < 20; ++trial) {
            auto f = [&](const Tensor& x) {
                return ad::sum(enc.forward_windows(x, invalid, false, unused));
            };
            worst = std::max(worst, robust_grad_check(f, random_tensor({16, 6}, data_rng)));
        }
    }
    const double elapsed = now_seconds() - t0;
    std::ostringstream os;
    os << "max grad_check rel. err over 4 encoders x 20 trials = " << worst << ", " << elapsed
       << " s";
    return {worst < 1e-4 && elapsed < 120.0, os.str()};
}

// ---------------------------------------------------------------------------
// 3. Transformer masking invariance under fuzzing
// ---------------------------------------------------------------------------

Outcome criterion_masking_invariance() {
    const int obs_dim = 6;
    EncoderConfig cfg;
    Rng rng(105);
    TransformerEncoder enc(obs_dim, cfg, rng);
    Rng data_rng(106), fuzz(107);
    enc.reset_state();
    std::vector<double> z;
    for (int t = 0; t < 11; ++t) {  // 11 pushes leave 5 slots invalid
        std::vector<double> obs(6);
        for (auto& v : obs) v = data_rng.normal();
        z = enc.encode_step(obs);
    }
    int identical = 0;
    for (int trial = 0; trial < 100; ++trial) {
        for (std::size_t slot = 11; slot < enc.window_len(); ++slot) {
            std::vector<double> junk(6);
            for (auto& v : junk) v = fuzz.normal(0.0, 10.0);
            enc.history().poke_slot(slot, junk);
        }
        if (enc.encode_current() == z) ++identical;
    }
    std::ostringstream os;
    os << identical << "/100 fuzz trials bit-identical";
    return {identical == 100, os.str()};
}

// ---------------------------------------------------------------------------
// 4. GAE against the brute-force recursion
// ---------------------------------------------------------------------------

Outcome criterion_gae() {
    Rng rng(311);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(64));
        RolloutBuffer buf;
        buf.n_steps = n;
        buf.obs_dim = 1;
        buf.act_dim = 1;
        buf.values.resize(static_cast<std::size_t>(n));
        buf.rewards.resize(static_cast<std::size_t>(n));
        buf.done.assign(static_cast<std::size_t>(n), 0);
        buf.truncated.assign(static_cast<std::size_t>(n), 0);
        buf.boot_values.assign(static_cast<std::size_t>(n), 0.0);
        for (int t = 0; t < n; ++t) {
            const auto ut = static_cast<std::size_t>(t);
            buf.values[ut] = rng.normal();
            buf.rewards[ut] = rng.normal();
            const double u = rng.uniform01();
            if (u < 0.12)
                buf.done[ut] = 1;
            else if (u < 0.22) {
                buf.truncated[ut] = 1;
                buf.boot_values[ut] = rng.normal();
            }
        }
        buf.final_bootstrap = rng.normal();
        const double gamma = rng.uniform(0.5, 0.999);
        const double lambda = rng.uniform01();

        // forward-sum reference, independent of the reverse recursion
        auto next_value = [&](int t) {
            if (buf.done[static_cast<std::size_t>(t)]) return 0.0;
            if (buf.truncated[static_cast<std::size_t>(t)])
                return buf.boot_values[static_cast<std::size_t>(t)];
            if (t == n - 1) return buf.final_bootstrap;
            return buf.values[static_cast<std::size_t>(t) + 1];
        };
        compute_gae(buf, gamma, lambda);
        for (int t = 0; t < n; ++t) {
            double acc = 0.0, w = 1.0;
            for (int l = t; l < n; ++l) {
                acc += w * (buf.rewards[static_cast<std::size_t>(l)] + gamma * next_value(l) -
                            buf.values[static_cast<std::size_t>(l)]);
                if (buf.ended_at(l)) break;
                w *= gamma * lambda;
            }
            worst = std::max(worst, std::abs(acc - buf.advantages[static_cast<std::size_t>(t)]));
        }
    }
    std::ostringstream os;
    os << "max |reverse - brute force| over 1000 buffers = " << worst;
    return {worst < 1e-12, os.str()};
}

// ---------------------------------------------------------------------------
// 5. Theorem verification on chain5
// ---------------------------------------------------------------------------

Outcome criterion_theorem() {
    const double t0 = now_seconds();
    theory::TabularInstance inst = theory::chain5_instance(0.9, 7);
    auto q = theory::value_iteration_q(inst, theory::PolicyConditioning::FullObservation);

    // (a) the pointwise inequality chain on every (state, mask) pair
    const double l_pi = theory::certify_L_pi(inst).value;
    const double l_q = theory::certify_L_q(inst, q).value;
    double b_sum = 0.0;
    for (double b : inst.feature_bounds) b_sum += b;
    const double c_max = l_pi * l_q * b_sum;
    bool chain_ok = true;
    for (int s = 0; s < inst.n_states && chain_ok; ++s)
        for (std::uint32_t m = 0; m < inst.n_masks() && chain_ok; ++m) {
            const double delta = std::abs(theory::delta_value(inst, q, s, m));
            const double w1 = theory::wasserstein_1d(
                inst.policy(inst.obs[static_cast<std::size_t>(s)]),
                inst.policy(inst.masked_obs(s, m)), inst.action_embedding);
            double l1 = 0.0;
            const auto hm = inst.masked_obs(s, m);
            for (int i = 0; i < inst.obs_dim(); ++i)
                l1 += std::abs(inst.obs[static_cast<std::size_t>(s)][static_cast<std::size_t>(i)] -
                               hm[static_cast<std::size_t>(i)]);
            chain_ok = delta <= l_q * w1 + 1e-12 && l_q * w1 <= l_q * l_pi * l1 + 1e-12 &&
                       l_q * l_pi * l1 <= c_max + 1e-12;
        }

    auto rep = theory::verify_theorem(inst, 0.1, 2000, 20260809);
    const double elapsed = now_seconds() - t0;
    std::ostringstream os;
    os << "residual=" << rep.bellman_residual << ", L_pi=" << rep.l_pi << ", L_Q=" << rep.l_q
       << ", mean " << rep.mc_mean << " <= " << rep.mu_s_bound << " + 3*" << rep.mc_se
       << ", exceed " << rep.exceed_frac << " <= " << rep.exceed_threshold << ", " << elapsed
       << " s";
    const bool pass = chain_ok && rep.bellman_residual < 1e-12 && rep.mean_ok && rep.tail_ok &&
                      rep.pass && elapsed < 300.0;
    return {pass, os.str()};
}

// ---------------------------------------------------------------------------
// 6. Degradation monotonicity for a trained pointmass MLP
// ---------------------------------------------------------------------------

ExperimentConfig pointmass_config(const std::string& encoder, const std::string& out,
                                  long steps) {
    ExperimentConfig cfg;
    cfg.env = "pointmass";
    cfg.encoder = encoder;
    cfg.wrapper = true;
    cfg.normalize = true;
    cfg.seeds = {1, 2, 3, 4};
    cfg.eval_episodes = 100;
    cfg.total_timesteps = steps;
    cfg.out_dir = out;
    return cfg;
}

Outcome criterion_degradation() {
    const double t0 = now_seconds();
    const std::string out = "acceptance_out/c6";
    std::filesystem::create_directories(out);
    // train under the wrapper with failures disabled (full observability)
    ExperimentConfig train_cfg = pointmass_config("mlp", out, 200000);
    train_cfg.sensor_p_fail = 0.0;
    train_cfg.group_p_fail = 0.0;
    if (cmd_train(train_cfg) != 0) return {false, "training aborted"};

    ExperimentConfig full_cfg = train_cfg;  // evaluate without failures
    RunSummary full = eval_summary(full_cfg, out);
    ExperimentConfig fail_cfg = train_cfg;  // evaluate under the experiment parameters
    fail_cfg.sensor_p_fail = 0.01;
    fail_cfg.group_p_fail = 0.55;
    RunSummary degraded = eval_summary(fail_cfg, out);

    {
        std::ofstream os(out + "/degradation.json");
        json j;
        j["full"] = run_summary_to_json(full);
        j["degraded"] = run_summary_to_json(degraded);
        os << j.dump(2) << "\n";
    }
    const double elapsed = now_seconds() - t0;
    std::ostringstream os;
    os << "median full " << full.median << " [" << full.ci.lo << ", " << full.ci.hi
       << "] vs degraded " << degraded.median << " [" << degraded.ci.lo << ", "
       << degraded.ci.hi << "], " << elapsed << " s";
    const bool pass =
        degraded.median < full.median && degraded.ci.hi < full.ci.lo && elapsed < 1200.0;
    return {pass, os.str()};
}

// ---------------------------------------------------------------------------
// 7. Robustness ordering under failures (soft criterion; the comparison
//    table is the artifact of record)
// ---------------------------------------------------------------------------

Outcome criterion_robustness_ordering() {
    const double t0 = now_seconds();
    const std::string base = "acceptance_out/c7";
    std::filesystem::create_directories(base);
    const long steps = 10240;  // desk-scale training budget per seed

    std::vector<std::pair<std::string, RunSummary>> rows;
    for (const std::string encoder : {"mlp", "transformer"}) {
        const std::string out = base + "/" + encoder;
        ExperimentConfig cfg = pointmass_config(encoder, out, steps);
        if (cmd_train(cfg) != 0) return {false, encoder + " training aborted"};
        rows.emplace_back(encoder, eval_summary(cfg, out));
    }

    const std::string table_path = base + "/comparison.csv";
    {
        std::ofstream os(table_path);
        os << "model,median,q25,q75,ci_lo,ci_hi,n_pooled\n";
        os.precision(17);
        for (const auto& [name, s] : rows)
            os << name << "," << s.median << "," << s.q25 << "," << s.q75 << "," << s.ci.lo
               << "," << s.ci.hi << "," << s.pooled.size() << "\n";
    }
    const double mlp_median = rows[0].second.median;
    const double tf_median = rows[1].second.median;
    const bool ordered = tf_median >= mlp_median;
    const double elapsed = now_seconds() - t0;
    std::ostringstream os;
    os << "transformer median " << tf_median << " vs mlp median " << mlp_median
       << " (ordering replicated: " << (ordered ? "yes" : "no") << "), table at " << table_path
       << ", " << elapsed << " s";
    // soft criterion: the comparison table is the required artifact
    return {std::filesystem::exists(table_path), os.str()};
}

// ---------------------------------------------------------------------------
// 8. Bit-identical reruns
// ---------------------------------------------------------------------------

std::string slurp(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
}

Outcome criterion_determinism() {
    bool pass = true;
    std::ostringstream os;
    for (const std::string encoder : {"mlp", "gru"}) {
        ExperimentConfig cfg;
        cfg.env = "chain5";
        cfg.encoder = encoder;
        cfg.normalize = false;
        cfg.seeds = {11, 12};
        cfg.total_timesteps = 256;
        cfg.n_steps = 128;
        cfg.n_minibatches = 4;
        cfg.update_epochs = 2;
        cfg.model_dim = 32;
        cfg.seq_len = 8;
        const std::string a = "acceptance_out/c8_" + encoder + "_a";
        const std::string b = "acceptance_out/c8_" + encoder + "_b";
        std::filesystem::remove_all(a);
        std::filesystem::remove_all(b);
        cfg.out_dir = a;
        cmd_train(cfg);
        cfg.out_dir = b;
        cmd_train(cfg);
        for (auto seed : cfg.seeds) {
            const std::string rel = "seed_" + std::to_string(seed);
            if (slurp(std::filesystem::path(a) / rel / "metrics.jsonl") !=
                    slurp(std::filesystem::path(b) / rel / "metrics.jsonl") ||
                slurp(std::filesystem::path(a) / rel / "checkpoint.bin") !=
                    slurp(std::filesystem::path(b) / rel / "checkpoint.bin"))
                pass = false;
        }
        os << encoder << (pass ? " ok; " : " MISMATCH; ");
    }
    return {pass, os.str()};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> criteria = {
        {1, "failure-model stationarity", criterion_stationarity},
        {2, "gradient integrity", criterion_gradients},
        {3, "masking invariance", criterion_masking_invariance},
        {4, "GAE correctness", criterion_gae},
        {5, "theorem verification", criterion_theorem},
        {6, "degradation monotonicity", criterion_degradation},
        {7, "robustness ordering", criterion_robustness_ordering},
        {8, "determinism", criterion_determinism},
    };
    int only = 0;
    if (argc > 1) only = std::atoi(argv[1]);
    int failures = 0;
    for (const auto& c : criteria) {
        if (only != 0 && c.id != only) continue;
        Outcome out;
        try {
            out = c.run();
        } catch (const std::exception& e) {
            out = {false, std::string("exception: ") + e.what()};
        }
        std::printf("[%s] criterion %d: %s — %s\n", out.pass ? "PASS" : "FAIL", c.id, c.name,
                    out.detail.c_str());
        std::fflush(stdout);
        if (!out.pass) ++failures;
    }
    return failures == 0 ? 0 : 1;
}
