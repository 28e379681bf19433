#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "porl/encoders.hpp"
#include "porl/envs.hpp"
#include "porl/optim.hpp"
#include "porl/rng.hpp"
#include "porl/tensor.hpp"

namespace porl {

// Table-default PPO hyperparameters.
struct PPOConfig {
    long total_timesteps = 200000;
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

    void validate() const {
        if (n_steps <= 0 || n_minibatches <= 0 || update_epochs <= 0)
            throw std::invalid_argument("PPOConfig: counts must be positive");
        if (n_steps % n_minibatches != 0)
            throw std::invalid_argument("PPOConfig: n_steps must divide into minibatches");
        if (n_steps % segment_len != 0)
            throw std::invalid_argument("PPOConfig: n_steps must divide into segments");
        if ((n_steps / segment_len) % n_minibatches != 0)
            throw std::invalid_argument("PPOConfig: segments must divide into minibatches");
        if (burn_in < 0 || segment_len <= 0)
            throw std::invalid_argument("PPOConfig: bad segment/burn-in sizes");
        if (burn_in > 0 && segment_len % burn_in != 0)
            throw std::invalid_argument("PPOConfig: burn_in must divide segment_len");
        if (!(gamma > 0.0 && gamma < 1.0))
            throw std::invalid_argument("PPOConfig: gamma must lie in (0,1)");
    }

    int snapshot_stride() const { return burn_in > 0 ? std::gcd(segment_len, burn_in) : segment_len; }
};

// ---------------------------------------------------------------------------
// Policy and value heads
// ---------------------------------------------------------------------------

struct ActionSample {
    std::vector<double> action;  // env-facing action values
    int action_index = -1;       // discrete only
    double logp = 0.0;
    double value = 0.0;
};

// Gaussian policy: linear mean from the feature, state-independent
// log-std initialized to zero.
class GaussianHead {
public:
    GaussianHead(int feature_dim, int act_dim, Rng& rng) : act_dim_(act_dim) {
        params_ = {
            {"pi.w", init::orthogonal(static_cast<std::size_t>(feature_dim),
                                      static_cast<std::size_t>(act_dim), 0.01, rng)},
            {"pi.b", init::zeros_vec(static_cast<std::size_t>(act_dim))},
            {"pi.log_std", init::zeros_vec(static_cast<std::size_t>(act_dim))},
        };
    }

    std::vector<NamedTensor>& params() { return params_; }
    int act_dim() const { return act_dim_; }

    Tensor mean(const Tensor& z) const {
        return ad::add_rowvec(ad::matmul(z, params_[0].tensor), params_[1].tensor);
    }

    // log pi(a|z) per row, shape [N x 1]
    Tensor logp(const Tensor& z, const Tensor& actions_const) const {
        Tensor mu = mean(z);
        Tensor inv_sigma = ad::exp(ad::neg(params_[2].tensor));
        Tensor zscore = ad::mul_rowvec(ad::sub(actions_const, mu), inv_sigma);
        Tensor quad = ad::scale(ad::sum_rows(ad::mul(zscore, zscore)), -0.5);
        Tensor log_det = ad::sum(params_[2].tensor);
        const double c = -0.5 * act_dim_ * std::log(2.0 * std::numbers::pi);
        return ad::add_const(ad::sub(quad, log_det), c);
    }

    // differential entropy; state-independent for this parameterization
    Tensor entropy(const Tensor& /*z*/) const {
        const double c = 0.5 * act_dim_ * (1.0 + std::log(2.0 * std::numbers::pi));
        return ad::add_const(ad::sum(params_[2].tensor), c);
    }

    ActionSample sample(const std::vector<double>& feature, Rng& rng) const {
        ActionSample s;
        auto [mu, sigma] = mean_sigma(feature);
        s.action.resize(static_cast<std::size_t>(act_dim_));
        s.logp = 0.0;
        for (int j = 0; j < act_dim_; ++j) {
            const double eps = rng.normal();
            const double a = mu[static_cast<std::size_t>(j)] + sigma[static_cast<std::size_t>(j)] * eps;
            s.action[static_cast<std::size_t>(j)] = a;
            const double zj = (a - mu[static_cast<std::size_t>(j)]) / sigma[static_cast<std::size_t>(j)];
            s.logp += -0.5 * zj * zj - std::log(sigma[static_cast<std::size_t>(j)]) -
                      0.5 * std::log(2.0 * std::numbers::pi);
        }
        return s;
    }

    std::vector<double> deterministic(const std::vector<double>& feature) const {
        return mean_sigma(feature).first;
    }

private:
    std::pair<std::vector<double>, std::vector<double>> mean_sigma(
        const std::vector<double>& feature) const {
        ad::NoGradScope ng;
        Tensor z = Tensor::from({1, feature.size()}, feature);
        Tensor mu = mean(z);
        std::vector<double> sigma(static_cast<std::size_t>(act_dim_));
        for (int j = 0; j < act_dim_; ++j)
            sigma[static_cast<std::size_t>(j)] =
                std::exp(params_[2].tensor.at(static_cast<std::size_t>(j)));
        return {mu.values(), sigma};
    }

    int act_dim_;
    std::vector<NamedTensor> params_;
};

// Softmax policy over a discrete action set.
class CategoricalHead {
public:
    CategoricalHead(int feature_dim, int n_actions, Rng& rng) : n_actions_(n_actions) {
        params_ = {
            {"pi.w", init::orthogonal(static_cast<std::size_t>(feature_dim),
                                      static_cast<std::size_t>(n_actions), 0.01, rng)},
            {"pi.b", init::zeros_vec(static_cast<std::size_t>(n_actions))},
        };
    }

    std::vector<NamedTensor>& params() { return params_; }

    Tensor logits(const Tensor& z) const {
        return ad::add_rowvec(ad::matmul(z, params_[0].tensor), params_[1].tensor);
    }

    Tensor logp(const Tensor& z, const std::vector<int>& actions) const {
        return ad::gather_cols(ad::log_softmax_rows(logits(z)), actions);
    }

    Tensor entropy(const Tensor& z) const {
        Tensor ls = ad::log_softmax_rows(logits(z));
        Tensor p = ad::exp(ls);
        return ad::neg(ad::mean(ad::sum_rows(ad::mul(p, ls))));
    }

    ActionSample sample(const std::vector<double>& feature, Rng& rng) const {
        auto lp = row_log_probs(feature);
        const double u = rng.uniform01();
        double cum = 0.0;
        int pick = n_actions_ - 1;
        for (int j = 0; j < n_actions_; ++j) {
            cum += std::exp(lp[static_cast<std::size_t>(j)]);
            if (u < cum) {
                pick = j;
                break;
            }
        }
        ActionSample s;
        s.action_index = pick;
        s.action = {static_cast<double>(pick)};
        s.logp = lp[static_cast<std::size_t>(pick)];
        return s;
    }

    std::vector<double> deterministic(const std::vector<double>& feature) const {
        auto lp = row_log_probs(feature);
        int best = 0;
        for (int j = 1; j < n_actions_; ++j)
            if (lp[static_cast<std::size_t>(j)] > lp[static_cast<std::size_t>(best)]) best = j;
        return {static_cast<double>(best)};
    }

private:
    std::vector<double> row_log_probs(const std::vector<double>& feature) const {
        ad::NoGradScope ng;
        Tensor z = Tensor::from({1, feature.size()}, feature);
        return ad::log_softmax_rows(logits(z)).values();
    }

    int n_actions_;
    std::vector<NamedTensor> params_;
};

class ValueHead {
public:
    ValueHead(int feature_dim, Rng& rng) {
        params_ = {
            {"vf.w", init::orthogonal(static_cast<std::size_t>(feature_dim), 1, 1.0, rng)},
            {"vf.b", init::zeros_vec(1)},
        };
    }
    std::vector<NamedTensor>& params() { return params_; }

    Tensor value(const Tensor& z) const {
        return ad::add(ad::matmul(z, params_[0].tensor), params_[1].tensor);
    }

    double value_one(const std::vector<double>& feature) const {
        ad::NoGradScope ng;
        return value(Tensor::from({1, feature.size()}, feature)).value();
    }

private:
    std::vector<NamedTensor> params_;
};

// ---------------------------------------------------------------------------
// Agent: encoder + policy head + value head behind one parameter registry.
// ---------------------------------------------------------------------------

class Agent {
public:
    Agent(EncoderKind kind, const EnvSpec& spec, const EncoderConfig& ecfg, std::uint64_t init_seed)
        : discrete_(spec.action_space.discrete) {
        Rng rng(Rng::derive(init_seed, streams::kInit));
        encoder_ = make_encoder(kind, spec.obs_dim, ecfg, rng);
        if (discrete_) {
            categorical_ = std::make_unique<CategoricalHead>(encoder_->feature_dim(),
                                                             spec.action_space.n, rng);
        } else {
            gaussian_ = std::make_unique<GaussianHead>(encoder_->feature_dim(),
                                                       spec.action_space.dim, rng);
        }
        value_ = std::make_unique<ValueHead>(encoder_->feature_dim(), rng);
        for (auto& p : encoder_->params()) all_params_.push_back(p);
        for (auto& p : policy_params()) all_params_.push_back(p);
        for (auto& p : value_->params()) all_params_.push_back(p);
    }

    Encoder& encoder() { return *encoder_; }
    const Encoder& encoder() const { return *encoder_; }
    bool discrete() const { return discrete_; }
    GaussianHead& gaussian() { return *gaussian_; }
    CategoricalHead& categorical() { return *categorical_; }
    ValueHead& value_head() { return *value_; }
    std::vector<NamedTensor>& all_params() { return all_params_; }

    void reset_memory() { encoder_->reset_state(); }
    void on_done() { encoder_->on_done(); }

    ActionSample act(const std::vector<double>& obs, Rng& policy_rng) {
        auto z = encoder_->encode_step(obs);
        ActionSample s = discrete_ ? categorical_->sample(z, policy_rng)
                                   : gaussian_->sample(z, policy_rng);
        s.value = value_->value_one(z);
        return s;
    }

    std::vector<double> act_deterministic(const std::vector<double>& obs) {
        auto z = encoder_->encode_step(obs);
        return discrete_ ? categorical_->deterministic(z) : gaussian_->deterministic(z);
    }

    double peek_value(const std::vector<double>& obs) {
        return value_->value_one(encoder_->peek_feature(obs));
    }

    Tensor logp_batch(const Tensor& z, const Tensor& cont_actions,
                      const std::vector<int>& idx_actions) const {
        return discrete_ ? categorical_->logp(z, idx_actions) : gaussian_->logp(z, cont_actions);
    }

    Tensor entropy_batch(const Tensor& z) const {
        return discrete_ ? categorical_->entropy(z) : gaussian_->entropy(z);
    }

private:
    std::vector<NamedTensor>& policy_params() {
        return discrete_ ? categorical_->params() : gaussian_->params();
    }

    bool discrete_;
    std::unique_ptr<Encoder> encoder_;
    std::unique_ptr<GaussianHead> gaussian_;
    std::unique_ptr<CategoricalHead> categorical_;
    std::unique_ptr<ValueHead> value_;
    std::vector<NamedTensor> all_params_;
};

// ---------------------------------------------------------------------------
// Rollout storage
// ---------------------------------------------------------------------------

struct RolloutBuffer {
    int n_steps = 0;
    int obs_dim = 0;
    int act_dim = 0;  // continuous components; 1 for discrete
    std::vector<double> obs;          // n_steps * obs_dim
    std::vector<double> actions;      // n_steps * act_dim
    std::vector<int> action_idx;      // discrete indices
    std::vector<double> logp;
    std::vector<double> values;
    std::vector<double> rewards;
    std::vector<std::uint8_t> done;       // terminal
    std::vector<std::uint8_t> truncated;  // horizon
    std::vector<double> boot_values;      // value of the post-truncation obs
    double final_bootstrap = 0.0;
    int snapshot_stride = 8;
    std::vector<EncoderSnapshot> snapshots;  // at indices k * snapshot_stride
    std::vector<double> advantages;
    std::vector<double> returns;

    bool ended_at(int t) const { return done[static_cast<std::size_t>(t)] || truncated[static_cast<std::size_t>(t)]; }

    const EncoderSnapshot& snapshot_at(int t) const {
        if (t % snapshot_stride != 0)
            throw std::logic_error("RolloutBuffer: no snapshot at step " + std::to_string(t));
        return snapshots[static_cast<std::size_t>(t / snapshot_stride)];
    }
};

// Carries the environment stream across PPO iterations.
struct RolloutState {
    std::vector<double> obs;
    bool started = false;
};

inline RolloutBuffer collect_rollout(Agent& agent, Env& env, const PPOConfig& cfg,
                                     RolloutState& stream, Rng& policy_rng) {
    RolloutBuffer buf;
    buf.n_steps = cfg.n_steps;
    buf.obs_dim = env.spec().obs_dim;
    buf.act_dim = env.spec().action_space.discrete ? 1 : env.spec().action_space.dim;
    const auto n = static_cast<std::size_t>(cfg.n_steps);
    buf.obs.resize(n * static_cast<std::size_t>(buf.obs_dim));
    buf.actions.resize(n * static_cast<std::size_t>(buf.act_dim));
    buf.action_idx.assign(n, -1);
    buf.logp.resize(n);
    buf.values.resize(n);
    buf.rewards.resize(n);
    buf.done.assign(n, 0);
    buf.truncated.assign(n, 0);
    buf.boot_values.assign(n, 0.0);
    buf.snapshot_stride = cfg.snapshot_stride();

    if (!stream.started) {
        agent.reset_memory();
        stream.obs = env.reset();
        stream.started = true;
    }

    for (int t = 0; t < cfg.n_steps; ++t) {
        const auto ut = static_cast<std::size_t>(t);
        if (t % buf.snapshot_stride == 0) buf.snapshots.push_back(agent.encoder().snapshot());
        std::copy(stream.obs.begin(), stream.obs.end(),
                  buf.obs.begin() + ut * static_cast<std::size_t>(buf.obs_dim));

        ActionSample s = agent.act(stream.obs, policy_rng);
        for (double a : s.action)
            if (!std::isfinite(a))
                throw std::runtime_error("collect_rollout: non-finite action at step " +
                                         std::to_string(t));
        if (!std::isfinite(s.value) || !std::isfinite(s.logp))
            throw std::runtime_error("collect_rollout: non-finite value/logp at step " +
                                     std::to_string(t));

        std::copy(s.action.begin(), s.action.end(),
                  buf.actions.begin() + ut * static_cast<std::size_t>(buf.act_dim));
        buf.action_idx[ut] = s.action_index;
        buf.logp[ut] = s.logp;
        buf.values[ut] = s.value;

        StepResult r = env.step(s.action);
        buf.rewards[ut] = r.reward;
        buf.done[ut] = r.done ? 1 : 0;
        buf.truncated[ut] = (!r.done && r.truncated) ? 1 : 0;

        if (r.done || r.truncated) {
            if (buf.truncated[ut]) buf.boot_values[ut] = agent.peek_value(r.observation);
            agent.on_done();
            stream.obs = env.reset();
        } else {
            stream.obs = r.observation;
        }
    }
    const int last = cfg.n_steps - 1;
    buf.final_bootstrap = buf.ended_at(last) ? 0.0 : agent.peek_value(stream.obs);
    return buf;
}

// GAE over the filled buffer. Terminal steps bootstrap with zero,
// truncated steps with the recorded value of the post-truncation
// observation; the recursion restarts at every episode end.
inline void compute_gae(RolloutBuffer& buf, double gamma, double lambda) {
    const int n = buf.n_steps;
    buf.advantages.assign(static_cast<std::size_t>(n), 0.0);
    buf.returns.assign(static_cast<std::size_t>(n), 0.0);
    double acc = 0.0;
    for (int t = n - 1; t >= 0; --t) {
        const auto ut = static_cast<std::size_t>(t);
        double next_v;
        if (buf.done[ut])
            next_v = 0.0;
        else if (buf.truncated[ut])
            next_v = buf.boot_values[ut];
        else if (t == n - 1)
            next_v = buf.final_bootstrap;
        else
            next_v = buf.values[ut + 1];
        const double delta = buf.rewards[ut] + gamma * next_v - buf.values[ut];
        acc = delta + gamma * lambda * (buf.ended_at(t) ? 0.0 : acc);
        buf.advantages[ut] = acc;
        buf.returns[ut] = acc + buf.values[ut];
    }
}

struct UpdateMetrics {
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    double clip_frac = 0.0;
    double approx_kl = 0.0;
    double grad_norm = 0.0;
    int skipped_minibatches = 0;
};

namespace detail {

// Gathers buffer fields for the transition indices `idx`.
struct MinibatchData {
    Tensor obs;       // [M x obs_dim] (mlp path only)
    Tensor actions;   // [M x act_dim]
    std::vector<int> action_idx;
    std::vector<double> logp_old;
    std::vector<double> adv;
    std::vector<double> ret;
};

inline MinibatchData gather(const RolloutBuffer& buf, const std::vector<int>& idx,
                            bool with_obs) {
    MinibatchData mb;
    const auto m = idx.size();
    const auto od = static_cast<std::size_t>(buf.obs_dim);
    const auto adim = static_cast<std::size_t>(buf.act_dim);
    if (with_obs) {
        std::vector<double> ov(m * od);
        for (std::size_t k = 0; k < m; ++k)
            std::copy(buf.obs.begin() + idx[k] * static_cast<long>(od),
                      buf.obs.begin() + (idx[k] + 1) * static_cast<long>(od),
                      ov.begin() + k * od);
        mb.obs = Tensor::from({m, od}, std::move(ov));
    }
    std::vector<double> av(m * adim);
    mb.action_idx.resize(m);
    mb.logp_old.resize(m);
    mb.adv.resize(m);
    mb.ret.resize(m);
    for (std::size_t k = 0; k < m; ++k) {
        const auto t = static_cast<std::size_t>(idx[k]);
        std::copy(buf.actions.begin() + static_cast<long>(t * adim),
                  buf.actions.begin() + static_cast<long>((t + 1) * adim),
                  av.begin() + k * adim);
        mb.action_idx[k] = buf.action_idx[t];
        mb.logp_old[k] = buf.logp[t];
        mb.adv[k] = buf.advantages[t];
        mb.ret[k] = buf.returns[t];
    }
    mb.actions = Tensor::from({m, adim}, std::move(av));
    return mb;
}

// Population-statistics normalization with a small epsilon.
inline void normalize_advantages(std::vector<double>& adv) {
    double mean = 0.0;
    for (double a : adv) mean += a;
    mean /= static_cast<double>(adv.size());
    double var = 0.0;
    for (double a : adv) var += (a - mean) * (a - mean);
    var /= static_cast<double>(adv.size());
    const double inv = 1.0 / (std::sqrt(var) + 1e-8);
    for (double& a : adv) a = (a - mean) * inv;
}

// Features for a contiguous-segment minibatch of a recurrent encoder.
// Burn-in warms each segment's stored state over the preceding steps
// without gradients; rows come out t-major (row = t * B + segment).
inline Tensor recurrent_segment_features(Agent& agent, const RolloutBuffer& buf,
                                         const PPOConfig& cfg,
                                         const std::vector<int>& seg_starts,
                                         std::vector<int>& idx_out) {
    const auto B = seg_starts.size();
    const auto dim = static_cast<std::size_t>(agent.encoder().feature_dim());
    const auto od = static_cast<std::size_t>(buf.obs_dim);

    // per-segment burn-in (no-grad, batch of one)
    std::vector<std::vector<std::vector<double>>> warmed(B);
    for (std::size_t b = 0; b < B; ++b) {
        const int s = seg_starts[b];
        if (s == 0 || cfg.burn_in == 0) {
            warmed[b] = buf.snapshot_at(s).hidden;
        } else {
            const int bs = s - cfg.burn_in;
            std::vector<std::vector<double>> obs_steps;
            std::vector<std::vector<std::uint8_t>> ended_before;
            for (int j = 0; j < cfg.burn_in; ++j) {
                const auto t = static_cast<std::size_t>(bs + j);
                obs_steps.emplace_back(buf.obs.begin() + static_cast<long>(t * od),
                                       buf.obs.begin() + static_cast<long>((t + 1) * od));
                ended_before.push_back(
                    {j == 0 ? std::uint8_t{0} : std::uint8_t(buf.ended_at(bs + j - 1) ? 1 : 0)});
            }
            warmed[b] = burn_in_unroll(agent.encoder(), buf.snapshot_at(bs).hidden, obs_steps,
                                       ended_before, 1);
        }
    }

    // stack the warmed rows into [B x dim] constants per hidden slot
    const std::size_t n_slots = warmed[0].size();
    std::vector<Tensor> hidden;
    for (std::size_t slot = 0; slot < n_slots; ++slot) {
        std::vector<double> rows(B * dim);
        for (std::size_t b = 0; b < B; ++b)
            std::copy(warmed[b][slot].begin(), warmed[b][slot].end(),
                      rows.begin() + b * dim);
        hidden.push_back(Tensor::from({B, dim}, std::move(rows)));
    }

    RecurrentStepper stepper(agent.encoder());
    std::vector<Tensor> z_steps;
    idx_out.clear();
    for (int j = 0; j < cfg.segment_len; ++j) {
        std::vector<std::uint8_t> reset(B, 0);
        std::vector<double> step_obs(B * od);
        for (std::size_t b = 0; b < B; ++b) {
            const int t = seg_starts[b] + j;
            if (j == 0)
                reset[b] = (seg_starts[b] > 0 && buf.ended_at(seg_starts[b] - 1)) ? 1 : 0;
            else
                reset[b] = buf.ended_at(t - 1) ? 1 : 0;
            std::copy(buf.obs.begin() + static_cast<long>(static_cast<std::size_t>(t) * od),
                      buf.obs.begin() + static_cast<long>((static_cast<std::size_t>(t) + 1) * od),
                      step_obs.begin() + b * od);
            idx_out.push_back(t);
        }
        reset_on_done_tensors(hidden, reset);
        z_steps.push_back(stepper.step(hidden, Tensor::from({B, od}, std::move(step_obs))));
    }
    return ad::stack_rows(z_steps);
}

// Features for a transformer minibatch: windows are replayed exactly from
// the stored history snapshots, honoring in-segment resets. Rows come out
// segment-major (row = segment * segment_len + t).
inline Tensor transformer_segment_features(Agent& agent, const RolloutBuffer& buf,
                                           const PPOConfig& cfg,
                                           const std::vector<int>& seg_starts,
                                           std::vector<int>& idx_out, bool training,
                                           Rng& dropout_rng) {
    auto& enc = static_cast<TransformerEncoder&>(agent.encoder());
    const std::size_t L = enc.window_len();
    const auto od = static_cast<std::size_t>(buf.obs_dim);
    const std::size_t n_windows = seg_starts.size() * static_cast<std::size_t>(cfg.segment_len);
    std::vector<double> xs(n_windows * L * od);
    std::vector<std::uint8_t> invalid(n_windows * L, 1);
    idx_out.clear();

    std::vector<double> win_vals;
    std::vector<std::uint8_t> win_invalid;
    std::size_t w = 0;
    for (int s : seg_starts) {
        HistoryBuffer hist = buf.snapshot_at(s).history;
        for (int j = 0; j < cfg.segment_len; ++j) {
            const int t = s + j;
            const auto ut = static_cast<std::size_t>(t);
            hist.push({buf.obs.begin() + static_cast<long>(ut * od),
                       buf.obs.begin() + static_cast<long>((ut + 1) * od)});
            hist.rolled(win_vals, win_invalid);
            std::copy(win_vals.begin(), win_vals.end(), xs.begin() + w * L * od);
            std::copy(win_invalid.begin(), win_invalid.end(), invalid.begin() + w * L);
            idx_out.push_back(t);
            ++w;
            if (buf.ended_at(t)) hist.reset();
        }
    }
    Tensor x = Tensor::from({n_windows * L, od}, std::move(xs));
    return enc.forward_windows(x, invalid, training, dropout_rng);
}

}  // namespace detail

// One full PPO update over a collected buffer: update_epochs passes, each
// split into n_minibatches. MLP minibatches are shuffled transitions;
// sequence-model minibatches are contiguous segments with no-grad burn-in.
inline UpdateMetrics ppo_update(Agent& agent, RolloutBuffer& buf, const PPOConfig& cfg,
                                Adam& adam, Rng& shuffle_rng, Rng& dropout_rng) {
    cfg.validate();
    if (buf.advantages.empty())
        throw std::logic_error("ppo_update: advantages not computed");
    const bool sequence_model = agent.encoder().kind() != EncoderKind::Mlp;
    UpdateMetrics acc;
    int processed = 0;

    const int n = cfg.n_steps;
    const int n_segments = n / cfg.segment_len;
    const int segs_per_mb = n_segments / cfg.n_minibatches;
    const int trans_per_mb = n / cfg.n_minibatches;

    std::vector<int> order;
    if (sequence_model) {
        order.resize(static_cast<std::size_t>(n_segments));
        for (int i = 0; i < n_segments; ++i) order[static_cast<std::size_t>(i)] = i * cfg.segment_len;
    } else {
        order.resize(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
    }

    for (int epoch = 0; epoch < cfg.update_epochs; ++epoch) {
        // Fisher-Yates with the dedicated stream
        for (std::size_t i = order.size() - 1; i > 0; --i) {
            const std::size_t j = static_cast<std::size_t>(shuffle_rng.below(i + 1));
            std::swap(order[i], order[j]);
        }
        const int n_mb = cfg.n_minibatches;
        for (int mbi = 0; mbi < n_mb; ++mbi) {
            ad::Tape tape;
            ad::TapeScope scope(tape);

            Tensor z;
            std::vector<int> idx;
            if (!sequence_model) {
                idx.assign(order.begin() + mbi * trans_per_mb,
                           order.begin() + (mbi + 1) * trans_per_mb);
                auto mb0 = detail::gather(buf, idx, /*with_obs=*/true);
                z = static_cast<MlpEncoder&>(agent.encoder()).forward(mb0.obs);
            } else if (agent.encoder().kind() == EncoderKind::Transformer) {
                std::vector<int> segs(order.begin() + mbi * segs_per_mb,
                                      order.begin() + (mbi + 1) * segs_per_mb);
                z = detail::transformer_segment_features(agent, buf, cfg, segs, idx,
                                                         /*training=*/true, dropout_rng);
            } else {
                std::vector<int> segs(order.begin() + mbi * segs_per_mb,
                                      order.begin() + (mbi + 1) * segs_per_mb);
                z = detail::recurrent_segment_features(agent, buf, cfg, segs, idx);
            }

            auto mb = detail::gather(buf, idx, /*with_obs=*/false);
            detail::normalize_advantages(mb.adv);
            const auto m = idx.size();

            Tensor logp_new = agent.logp_batch(z, mb.actions, mb.action_idx);
            Tensor logp_old = Tensor::from({m, 1}, mb.logp_old);
            Tensor ratio = ad::exp(ad::sub(logp_new, logp_old));
            Tensor adv = Tensor::from({m, 1}, mb.adv);
            Tensor surr1 = ad::mul(ratio, adv);
            Tensor surr2 =
                ad::mul(ad::clamp(ratio, 1.0 - cfg.clip_coef, 1.0 + cfg.clip_coef), adv);
            Tensor pg_loss = ad::neg(ad::mean(ad::minimum(surr1, surr2)));

            Tensor v = agent.value_head().value(z);
            Tensor v_diff = ad::sub(v, Tensor::from({m, 1}, mb.ret));
            Tensor v_mse = ad::mean(ad::mul(v_diff, v_diff));

            Tensor entropy = agent.entropy_batch(z);
            Tensor loss = ad::add(pg_loss, ad::scale(v_mse, cfg.vf_coef));
            if (cfg.ent_coef != 0.0) loss = ad::sub(loss, ad::scale(entropy, cfg.ent_coef));

            if (!std::isfinite(loss.value())) {
                ++acc.skipped_minibatches;
                continue;
            }

            adam.zero_grad();
            tape.backward(loss);
            const double norm = clip_global_norm(agent.all_params(), cfg.max_grad_norm);
            adam.step();

            // diagnostics; the kl estimator works on log-ratios so an
            // underflowed ratio stays finite
            double clip_count = 0.0, kl = 0.0;
            for (std::size_t k = 0; k < m; ++k) {
                const double r = ratio.values()[k];
                const double d = logp_new.values()[k] - mb.logp_old[k];
                if (std::abs(r - 1.0) > cfg.clip_coef) clip_count += 1.0;
                kl += std::expm1(d) - d;
            }
            acc.policy_loss += pg_loss.value();
            acc.value_loss += v_mse.value();
            acc.entropy += entropy.value();
            acc.clip_frac += clip_count / static_cast<double>(m);
            acc.approx_kl += kl / static_cast<double>(m);
            acc.grad_norm += norm;
            ++processed;
        }
    }
    if (processed > 0) {
        acc.policy_loss /= processed;
        acc.value_loss /= processed;
        acc.entropy /= processed;
        acc.clip_frac /= processed;
        acc.approx_kl /= processed;
        acc.grad_norm /= processed;
    }
    return acc;
}

// Deterministic mean-action evaluation; the mask process stays stochastic
// when the wrapper is active.
inline std::vector<double> evaluate(Agent& agent, Env& env, int n_episodes) {
    std::vector<double> returns;
    returns.reserve(static_cast<std::size_t>(n_episodes));
    for (int ep = 0; ep < n_episodes; ++ep) {
        agent.reset_memory();
        std::vector<double> obs = env.reset();
        double total = 0.0;
        while (true) {
            auto action = agent.act_deterministic(obs);
            StepResult r = env.step(action);
            total += r.reward;
            if (r.done || r.truncated) break;
            obs = r.observation;
        }
        agent.on_done();
        returns.push_back(total);
    }
    return returns;
}

}  // namespace porl
