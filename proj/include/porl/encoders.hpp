#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "porl/optim.hpp"
#include "porl/rng.hpp"
#include "porl/tensor.hpp"

namespace porl {

using ad::Tensor;

// Defaults follow the architectural table: width 128, 2 transformer
// layers / 4 recurrent layers, 2 heads, dropout 0.1 for the transformer.
struct EncoderConfig {
    int model_dim = 128;
    int transformer_layers = 2;
    int recurrent_layers = 4;
    int n_heads = 2;
    double dropout = 0.1;
    int seq_len = 16;
    double lru_r_min = 0.9;
    double lru_r_max = 0.999;
    double lru_max_phase = 6.28;

    void validate() const {
        if (model_dim <= 0 || seq_len <= 0 || n_heads <= 0)
            throw std::invalid_argument("EncoderConfig: dimensions must be positive");
        if (model_dim % n_heads != 0)
            throw std::invalid_argument("EncoderConfig: model_dim must divide by n_heads");
        if (!(lru_r_min > 0.0 && lru_r_max < 1.0 && lru_r_min <= lru_r_max))
            throw std::invalid_argument(
                "EncoderConfig: LRU radius range must satisfy 0 < r_min <= r_max < 1");
    }
};

// ---------------------------------------------------------------------------
// History buffer: ring of the last L observations with validity flags.
// The rolled view places the oldest valid element first; trailing slots
// are flagged invalid until the buffer refills.
// ---------------------------------------------------------------------------

class HistoryBuffer {
public:
    HistoryBuffer() = default;
    HistoryBuffer(std::size_t capacity, std::size_t obs_dim)
        : capacity_(capacity),
          obs_dim_(obs_dim),
          slots_(capacity, std::vector<double>(obs_dim, 0.0)),
          valid_(capacity, 0) {}

    std::size_t capacity() const { return capacity_; }
    std::size_t obs_dim() const { return obs_dim_; }

    void push(const std::vector<double>& obs) {
        if (obs.size() != obs_dim_)
            throw std::invalid_argument("HistoryBuffer::push: observation dimension mismatch");
        slots_[cursor_] = obs;
        valid_[cursor_] = 1;
        cursor_ = (cursor_ + 1) % capacity_;
    }

    void reset() {
        std::fill(valid_.begin(), valid_.end(), std::uint8_t{0});
        cursor_ = 0;
    }

    std::size_t valid_count() const {
        std::size_t n = 0;
        for (auto v : valid_) n += v;
        return n;
    }

    // Writes the chronological view: row p holds the p-th oldest valid
    // observation; `invalid[p]` is true for the unfilled tail.
    void rolled(std::vector<double>& values, std::vector<std::uint8_t>& invalid) const {
        values.assign(capacity_ * obs_dim_, 0.0);
        invalid.assign(capacity_, 1);
        std::size_t pos = 0;
        for (std::size_t i = 0; i < capacity_; ++i) {
            const std::size_t slot = (cursor_ + i) % capacity_;
            if (!valid_[slot]) continue;
            std::copy(slots_[slot].begin(), slots_[slot].end(),
                      values.begin() + pos * obs_dim_);
            invalid[pos] = 0;
            ++pos;
        }
    }

    // Test hook: overwrite the stored contents of an invalid or valid slot
    // without touching flags (used to fuzz padded positions).
    void poke_slot(std::size_t ring_index, const std::vector<double>& obs) {
        slots_[ring_index] = obs;
    }
    const std::vector<std::uint8_t>& raw_valid() const { return valid_; }
    std::size_t cursor() const { return cursor_; }

private:
    std::size_t capacity_ = 0;
    std::size_t obs_dim_ = 0;
    std::vector<std::vector<double>> slots_;
    std::vector<std::uint8_t> valid_;
    std::size_t cursor_ = 0;
};

// Sinusoidal encoding by window position; values lie in [-1, 1] and
// position 0 is the alternating (0, 1, 0, 1, ...) pattern.
inline Tensor sinusoidal_positional_encoding(std::size_t length, std::size_t dim) {
    Tensor pe = Tensor::zeros({length, dim});
    for (std::size_t pos = 0; pos < length; ++pos)
        for (std::size_t i = 0; i < dim; i += 2) {
            const double freq =
                std::pow(10000.0, static_cast<double>(i) / static_cast<double>(dim));
            pe.at(pos, i) = std::sin(static_cast<double>(pos) / freq);
            if (i + 1 < dim) pe.at(pos, i + 1) = std::cos(static_cast<double>(pos) / freq);
        }
    return pe;
}

// ---------------------------------------------------------------------------
// Weight initializers
// ---------------------------------------------------------------------------

namespace init {

inline Tensor uniform(std::size_t rows, std::size_t cols, double lo, double hi, Rng& rng) {
    Tensor t = Tensor::zeros({rows, cols}, true);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

inline Tensor uniform_vec(std::size_t n, double lo, double hi, Rng& rng) {
    Tensor t = Tensor::zeros({n}, true);
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

inline Tensor xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
    return uniform(rows, cols, -a, a, rng);
}

// Orthogonal init via QR of a Gaussian matrix, sign-fixed by the R diagonal.
inline Tensor orthogonal(std::size_t rows, std::size_t cols, double gain, Rng& rng) {
    const std::size_t big = std::max(rows, cols), small = std::min(rows, cols);
    Eigen::MatrixXd a(big, small);
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
    Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
    for (std::size_t j = 0; j < small; ++j)
        if (r(j, j) < 0) q.col(j) *= -1.0;
    Tensor t = Tensor::zeros({rows, cols}, true);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            t.at(i, j) = gain * (rows >= cols ? q(i, j) : q(j, i));
    return t;
}

inline Tensor zeros_vec(std::size_t n) { return Tensor::zeros({n}, true); }
inline Tensor ones_vec(std::size_t n) { return Tensor::full({n}, 1.0, true); }

}  // namespace init

// ---------------------------------------------------------------------------
// Encoder interface. Rollout-time stepping is stateful and gradient-free;
// training-time unrolls are provided by the concrete classes.
// ---------------------------------------------------------------------------

enum class EncoderKind { Mlp, Gru, Lru, Transformer };

inline EncoderKind encoder_kind_from_name(const std::string& name) {
    if (name == "mlp") return EncoderKind::Mlp;
    if (name == "gru") return EncoderKind::Gru;
    if (name == "lru") return EncoderKind::Lru;
    if (name == "transformer") return EncoderKind::Transformer;
    throw std::invalid_argument("unknown encoder '" + name + "'");
}

// Rollout-time memory snapshot: history window for the transformer,
// per-layer hidden rows for the recurrent encoders.
struct EncoderSnapshot {
    HistoryBuffer history;
    std::vector<std::vector<double>> hidden;
};

class Encoder {
public:
    virtual ~Encoder() = default;
    virtual EncoderKind kind() const = 0;
    virtual int feature_dim() const = 0;
    virtual int obs_dim() const = 0;
    virtual std::vector<NamedTensor>& params() = 0;

    virtual void reset_state() = 0;
    virtual void on_done() = 0;
    // Advances internal memory and returns the feature for this step.
    virtual std::vector<double> encode_step(const std::vector<double>& obs) = 0;
    // Feature for obs without advancing memory (bootstrap values).
    virtual std::vector<double> peek_feature(const std::vector<double>& obs) = 0;

    virtual EncoderSnapshot snapshot() const { return {}; }
};

// Zeroes the hidden rows of flagged instances; untouched elsewhere.
inline void reset_on_done(std::vector<std::vector<double>>& hidden_layers,
                          const std::vector<std::uint8_t>& done, std::size_t dim) {
    for (auto& layer : hidden_layers) {
        const std::size_t batch = layer.size() / dim;
        if (done.size() != batch)
            throw std::invalid_argument("reset_on_done: done flags do not match batch");
        for (std::size_t b = 0; b < batch; ++b)
            if (done[b]) std::fill(layer.begin() + b * dim, layer.begin() + (b + 1) * dim, 0.0);
    }
}

// Tensor variant used inside training unrolls: scales flagged rows to
// zero through a recorded op so gradients stop at episode boundaries.
inline void reset_on_done_tensors(std::vector<Tensor>& hidden,
                                  const std::vector<std::uint8_t>& done) {
    bool any = false;
    for (auto d : done) any = any || (d != 0);
    if (!any) return;
    std::vector<double> keep(done.size());
    for (std::size_t i = 0; i < done.size(); ++i) keep[i] = done[i] ? 0.0 : 1.0;
    Tensor k = Tensor::from({done.size()}, keep);
    for (auto& h : hidden) h = ad::mul_colvec(h, k);
}

// ---------------------------------------------------------------------------
// MLP: two tanh layers of width model_dim, stateless.
// ---------------------------------------------------------------------------

class MlpEncoder : public Encoder {
public:
    MlpEncoder(int obs_dim, const EncoderConfig& cfg, Rng& rng) : obs_dim_(obs_dim), cfg_(cfg) {
        cfg_.validate();
        const auto d = static_cast<std::size_t>(cfg_.model_dim);
        const auto in = static_cast<std::size_t>(obs_dim);
        params_ = {
            {"enc.fc1.w", init::orthogonal(in, d, std::sqrt(2.0), rng)},
            {"enc.fc1.b", init::zeros_vec(d)},
            {"enc.fc2.w", init::orthogonal(d, d, std::sqrt(2.0), rng)},
            {"enc.fc2.b", init::zeros_vec(d)},
        };
    }

    EncoderKind kind() const override { return EncoderKind::Mlp; }
    int feature_dim() const override { return cfg_.model_dim; }
    int obs_dim() const override { return obs_dim_; }
    std::vector<NamedTensor>& params() override { return params_; }

    void reset_state() override {}
    void on_done() override {}

    Tensor forward(const Tensor& obs_batch) const {
        if (obs_batch.cols() != static_cast<std::size_t>(obs_dim_))
            throw std::invalid_argument("MlpEncoder: observation dim mismatch, got " +
                                        ad::shape_str(obs_batch.shape()));
        Tensor h = ad::tanh(ad::add_rowvec(ad::matmul(obs_batch, p(0)), p(1)));
        return ad::tanh(ad::add_rowvec(ad::matmul(h, p(2)), p(3)));
    }

    std::vector<double> encode_step(const std::vector<double>& obs) override {
        ad::NoGradScope ng;
        return forward(Tensor::from({1, obs.size()}, obs)).values();
    }
    std::vector<double> peek_feature(const std::vector<double>& obs) override {
        return encode_step(obs);
    }

private:
    const Tensor& p(std::size_t i) const { return params_[i].tensor; }
    int obs_dim_;
    EncoderConfig cfg_;
    std::vector<NamedTensor> params_;
};

// ---------------------------------------------------------------------------
// GRU: input embedding then a stack of gated cells,
//   r = sigma(Wr x + Ur h + br), u = sigma(Wu x + Uu h + bu),
//   htil = tanh(Wh x + Uh (r*h) + bh), h' = (1-u)*h + u*htil.
// ---------------------------------------------------------------------------

class GruEncoder : public Encoder {
public:
    GruEncoder(int obs_dim, const EncoderConfig& cfg, Rng& rng) : obs_dim_(obs_dim), cfg_(cfg) {
        cfg_.validate();
        const auto d = static_cast<std::size_t>(cfg_.model_dim);
        const double k = 1.0 / std::sqrt(static_cast<double>(d));
        params_.push_back({"enc.embed.w",
                           init::uniform(static_cast<std::size_t>(obs_dim), d, -k, k, rng)});
        params_.push_back({"enc.embed.b", init::zeros_vec(d)});
        for (int l = 0; l < cfg_.recurrent_layers; ++l) {
            const std::string base = "enc.gru" + std::to_string(l) + ".";
            for (const char* gate : {"r", "u", "h"}) {
                params_.push_back({base + "w" + gate, init::uniform(d, d, -k, k, rng)});
                params_.push_back({base + "u" + gate, init::uniform(d, d, -k, k, rng)});
                params_.push_back({base + "b" + gate, init::zeros_vec(d)});
            }
        }
        reset_state();
    }

    EncoderKind kind() const override { return EncoderKind::Gru; }
    int feature_dim() const override { return cfg_.model_dim; }
    int obs_dim() const override { return obs_dim_; }
    std::vector<NamedTensor>& params() override { return params_; }
    int n_layers() const { return cfg_.recurrent_layers; }

    void reset_state() override {
        hidden_.assign(static_cast<std::size_t>(cfg_.recurrent_layers),
                       std::vector<double>(static_cast<std::size_t>(cfg_.model_dim), 0.0));
    }
    void on_done() override { reset_state(); }

    EncoderSnapshot snapshot() const override {
        EncoderSnapshot s;
        s.hidden = hidden_;
        return s;
    }
    void restore(const EncoderSnapshot& s) { hidden_ = s.hidden; }

    Tensor embed(const Tensor& obs_batch) const {
        return ad::tanh(ad::add_rowvec(ad::matmul(obs_batch, pt("enc.embed.w")),
                                       pt("enc.embed.b")));
    }

    // One cell update for layer l; h and x are [B x D].
    Tensor cell(int l, const Tensor& h, const Tensor& x) const {
        const std::string base = "enc.gru" + std::to_string(l) + ".";
        Tensor r = ad::sigmoid(ad::add_rowvec(
            ad::add(ad::matmul(x, pt(base + "wr")), ad::matmul(h, pt(base + "ur"))),
            pt(base + "br")));
        Tensor u = ad::sigmoid(ad::add_rowvec(
            ad::add(ad::matmul(x, pt(base + "wu")), ad::matmul(h, pt(base + "uu"))),
            pt(base + "bu")));
        Tensor htil = ad::tanh(ad::add_rowvec(
            ad::add(ad::matmul(x, pt(base + "wh")), ad::matmul(ad::mul(r, h), pt(base + "uh"))),
            pt(base + "bh")));
        Tensor ones = Tensor::full(u.shape(), 1.0);
        return ad::add(ad::mul(ad::sub(ones, u), h), ad::mul(u, htil));
    }

    // Advances a full stack one step; hidden holds one [B x D] tensor per
    // layer and is replaced in place. Returns the top feature.
    Tensor step_stack(std::vector<Tensor>& hidden, const Tensor& obs_batch) const {
        Tensor x = embed(obs_batch);
        for (int l = 0; l < cfg_.recurrent_layers; ++l) {
            hidden[static_cast<std::size_t>(l)] = cell(l, hidden[static_cast<std::size_t>(l)], x);
            x = hidden[static_cast<std::size_t>(l)];
        }
        return x;
    }

    std::vector<double> encode_step(const std::vector<double>& obs) override {
        ad::NoGradScope ng;
        auto h = hidden_tensors();
        Tensor z = step_stack(h, Tensor::from({1, obs.size()}, obs));
        for (std::size_t l = 0; l < hidden_.size(); ++l) hidden_[l] = h[l].values();
        return z.values();
    }

    std::vector<double> peek_feature(const std::vector<double>& obs) override {
        ad::NoGradScope ng;
        auto h = hidden_tensors();
        return step_stack(h, Tensor::from({1, obs.size()}, obs)).values();
    }

    std::vector<Tensor> hidden_tensors() const {
        std::vector<Tensor> out;
        for (const auto& h : hidden_)
            out.push_back(Tensor::from({1, static_cast<std::size_t>(cfg_.model_dim)}, h));
        return out;
    }

    const Tensor& pt(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return p.tensor;
        throw std::logic_error("GruEncoder: unknown parameter " + name);
    }

private:
    int obs_dim_;
    EncoderConfig cfg_;
    std::vector<NamedTensor> params_;
    std::vector<std::vector<double>> hidden_;
};

// ---------------------------------------------------------------------------
// LRU: diagonal complex linear recurrence h' = Lambda h + B x with
// |Lambda_j| parameterized as exp(-exp(nu_j)) and phase theta_j, followed
// by a real readout Re(C h) and a residual/GLU/layer-norm block.
// ---------------------------------------------------------------------------

class LruEncoder : public Encoder {
public:
    LruEncoder(int obs_dim, const EncoderConfig& cfg, Rng& rng) : obs_dim_(obs_dim), cfg_(cfg) {
        cfg_.validate();
        const auto d = static_cast<std::size_t>(cfg_.model_dim);
        const double k = 1.0 / std::sqrt(static_cast<double>(d));
        params_.push_back({"enc.embed.w",
                           init::uniform(static_cast<std::size_t>(obs_dim), d, -k, k, rng)});
        params_.push_back({"enc.embed.b", init::zeros_vec(d)});
        for (int l = 0; l < cfg_.recurrent_layers; ++l) {
            const std::string base = "enc.lru" + std::to_string(l) + ".";
            // ring init: radius^2 uniform in [r_min^2, r_max^2], phase
            // uniform in [0, max_phase]
            Tensor nu = Tensor::zeros({d}, true);
            Tensor theta = Tensor::zeros({d}, true);
            std::vector<double> gamma(d);
            for (std::size_t j = 0; j < d; ++j) {
                const double u1 = rng.uniform01();
                const double r2 = cfg_.lru_r_min * cfg_.lru_r_min +
                                  u1 * (cfg_.lru_r_max * cfg_.lru_r_max -
                                        cfg_.lru_r_min * cfg_.lru_r_min);
                const double r = std::sqrt(r2);
                if (!(r > 0.0 && r < 1.0))
                    throw std::invalid_argument("LruEncoder: sampled modulus outside (0,1)");
                nu.at(j) = std::log(-std::log(r));
                theta.at(j) = rng.uniform01() * cfg_.lru_max_phase;
                gamma[j] = std::sqrt(1.0 - r2);
            }
            params_.push_back({base + "nu", nu});
            params_.push_back({base + "theta", theta});
            // complex input/readout maps; B columns carry the
            // sqrt(1-|lambda|^2) normalization at init
            const double bs = std::sqrt(0.5 / static_cast<double>(d));
            Tensor b_re = init::uniform(d, d, -bs, bs, rng);
            Tensor b_im = init::uniform(d, d, -bs, bs, rng);
            for (std::size_t i = 0; i < d; ++i)
                for (std::size_t j = 0; j < d; ++j) {
                    b_re.at(i, j) *= gamma[j];
                    b_im.at(i, j) *= gamma[j];
                }
            params_.push_back({base + "b_re", b_re});
            params_.push_back({base + "b_im", b_im});
            params_.push_back({base + "c_re", init::uniform(d, d, -bs, bs, rng)});
            params_.push_back({base + "c_im", init::uniform(d, d, -bs, bs, rng)});
            params_.push_back({base + "glu_wa", init::xavier_uniform(d, d, rng)});
            params_.push_back({base + "glu_ba", init::zeros_vec(d)});
            params_.push_back({base + "glu_wb", init::xavier_uniform(d, d, rng)});
            params_.push_back({base + "glu_bb", init::zeros_vec(d)});
            params_.push_back({base + "ln_g", init::ones_vec(d)});
            params_.push_back({base + "ln_b", init::zeros_vec(d)});
        }
        reset_state();
    }

    EncoderKind kind() const override { return EncoderKind::Lru; }
    int feature_dim() const override { return cfg_.model_dim; }
    int obs_dim() const override { return obs_dim_; }
    std::vector<NamedTensor>& params() override { return params_; }
    int n_layers() const { return cfg_.recurrent_layers; }

    // hidden layout: 2 buffers per layer (real then imaginary)
    void reset_state() override {
        hidden_.assign(static_cast<std::size_t>(2 * cfg_.recurrent_layers),
                       std::vector<double>(static_cast<std::size_t>(cfg_.model_dim), 0.0));
    }
    void on_done() override { reset_state(); }

    EncoderSnapshot snapshot() const override {
        EncoderSnapshot s;
        s.hidden = hidden_;
        return s;
    }
    void restore(const EncoderSnapshot& s) { hidden_ = s.hidden; }

    Tensor embed(const Tensor& obs_batch) const {
        return ad::tanh(ad::add_rowvec(ad::matmul(obs_batch, pt("enc.embed.w")),
                                       pt("enc.embed.b")));
    }

    struct LayerDiag {
        Tensor lam_re, lam_im;
    };

    LayerDiag diag(int l) const {
        const std::string base = "enc.lru" + std::to_string(l) + ".";
        Tensor mod = ad::exp(ad::neg(ad::exp(pt(base + "nu"))));
        return {ad::mul(mod, ad::cos(pt(base + "theta"))),
                ad::mul(mod, ad::sin(pt(base + "theta")))};
    }

    // One layer update; h_re/h_im are [B x D], u is the layer input.
    Tensor layer_step(int l, const LayerDiag& lam, Tensor& h_re, Tensor& h_im,
                      const Tensor& u) const {
        const std::string base = "enc.lru" + std::to_string(l) + ".";
        Tensor new_re = ad::add(
            ad::sub(ad::mul_rowvec(h_re, lam.lam_re), ad::mul_rowvec(h_im, lam.lam_im)),
            ad::matmul(u, pt(base + "b_re")));
        Tensor new_im = ad::add(
            ad::add(ad::mul_rowvec(h_re, lam.lam_im), ad::mul_rowvec(h_im, lam.lam_re)),
            ad::matmul(u, pt(base + "b_im")));
        h_re = new_re;
        h_im = new_im;
        Tensor y = ad::sub(ad::matmul(h_re, pt(base + "c_re")),
                           ad::matmul(h_im, pt(base + "c_im")));
        Tensor lin = ad::add_rowvec(ad::matmul(y, pt(base + "glu_wa")), pt(base + "glu_ba"));
        Tensor gate = ad::sigmoid(
            ad::add_rowvec(ad::matmul(y, pt(base + "glu_wb")), pt(base + "glu_bb")));
        return ad::layer_norm(ad::add(u, ad::mul(lin, gate)), pt(base + "ln_g"),
                              pt(base + "ln_b"));
    }

    Tensor step_stack(std::vector<Tensor>& hidden, const std::vector<LayerDiag>& diags,
                      const Tensor& obs_batch) const {
        Tensor x = embed(obs_batch);
        for (int l = 0; l < cfg_.recurrent_layers; ++l) {
            x = layer_step(l, diags[static_cast<std::size_t>(l)],
                           hidden[static_cast<std::size_t>(2 * l)],
                           hidden[static_cast<std::size_t>(2 * l + 1)], x);
        }
        return x;
    }

    std::vector<LayerDiag> all_diags() const {
        std::vector<LayerDiag> out;
        for (int l = 0; l < cfg_.recurrent_layers; ++l) out.push_back(diag(l));
        return out;
    }

    std::vector<double> encode_step(const std::vector<double>& obs) override {
        ad::NoGradScope ng;
        auto h = hidden_tensors();
        Tensor z = step_stack(h, all_diags(), Tensor::from({1, obs.size()}, obs));
        for (std::size_t l = 0; l < hidden_.size(); ++l) hidden_[l] = h[l].values();
        return z.values();
    }

    std::vector<double> peek_feature(const std::vector<double>& obs) override {
        ad::NoGradScope ng;
        auto h = hidden_tensors();
        return step_stack(h, all_diags(), Tensor::from({1, obs.size()}, obs)).values();
    }

    std::vector<Tensor> hidden_tensors() const {
        std::vector<Tensor> out;
        for (const auto& h : hidden_)
            out.push_back(Tensor::from({1, static_cast<std::size_t>(cfg_.model_dim)}, h));
        return out;
    }

    const Tensor& pt(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return p.tensor;
        throw std::logic_error("LruEncoder: unknown parameter " + name);
    }

private:
    int obs_dim_;
    EncoderConfig cfg_;
    std::vector<NamedTensor> params_;
    std::vector<std::vector<double>> hidden_;
};

// ---------------------------------------------------------------------------
// Transformer: linear input projection, sinusoidal PE over the rolled
// window, pre-norm encoder layers with key-padding-masked self-attention,
// and learned attention pooling over valid positions.
// ---------------------------------------------------------------------------

class TransformerEncoder : public Encoder {
public:
    TransformerEncoder(int obs_dim, const EncoderConfig& cfg, Rng& rng)
        : obs_dim_(obs_dim), cfg_(cfg) {
        cfg_.validate();
        const auto d = static_cast<std::size_t>(cfg_.model_dim);
        const auto in = static_cast<std::size_t>(obs_dim);
        const auto ff = 4 * d;
        params_.push_back({"enc.in.w", init::xavier_uniform(in, d, rng)});
        params_.push_back({"enc.in.b", init::zeros_vec(d)});
        for (int l = 0; l < cfg_.transformer_layers; ++l) {
            const std::string base = "enc.tf" + std::to_string(l) + ".";
            params_.push_back({base + "ln1_g", init::ones_vec(d)});
            params_.push_back({base + "ln1_b", init::zeros_vec(d)});
            for (const char* m : {"wq", "wk", "wv", "wo"})
                params_.push_back({base + m, init::xavier_uniform(d, d, rng)});
            for (const char* m : {"bq", "bk", "bv", "bo"})
                params_.push_back({base + m, init::zeros_vec(d)});
            params_.push_back({base + "ln2_g", init::ones_vec(d)});
            params_.push_back({base + "ln2_b", init::zeros_vec(d)});
            params_.push_back({base + "ff1.w", init::xavier_uniform(d, ff, rng)});
            params_.push_back({base + "ff1.b", init::zeros_vec(ff)});
            params_.push_back({base + "ff2.w", init::xavier_uniform(ff, d, rng)});
            params_.push_back({base + "ff2.b", init::zeros_vec(d)});
        }
        params_.push_back({"enc.pool.w", init::xavier_uniform(d, 1, rng)});
        params_.push_back({"enc.pool.b", init::zeros_vec(1)});
        pe_ = sinusoidal_positional_encoding(static_cast<std::size_t>(cfg_.seq_len), d);
        history_ = HistoryBuffer(static_cast<std::size_t>(cfg_.seq_len),
                                 static_cast<std::size_t>(obs_dim));
    }

    EncoderKind kind() const override { return EncoderKind::Transformer; }
    int feature_dim() const override { return cfg_.model_dim; }
    int obs_dim() const override { return obs_dim_; }
    std::vector<NamedTensor>& params() override { return params_; }
    const Tensor& positional_encoding() const { return pe_; }
    std::size_t window_len() const { return static_cast<std::size_t>(cfg_.seq_len); }

    void reset_state() override { history_.reset(); }
    void on_done() override { history_.reset(); }

    EncoderSnapshot snapshot() const override {
        EncoderSnapshot s;
        s.history = history_;
        return s;
    }
    void restore(const EncoderSnapshot& s) { history_ = s.history; }
    HistoryBuffer& history() { return history_; }

    // Encodes B windows stacked vertically in `x` (rows = B * seq_len).
    // `invalid[i]` flags padded rows. Dropout draws from `rng` only in
    // training mode.
    Tensor forward_windows(const Tensor& x, const std::vector<std::uint8_t>& invalid,
                           bool training, Rng& rng) const {
        const std::size_t L = window_len();
        if (x.cols() != static_cast<std::size_t>(obs_dim_) || x.rows() % L != 0)
            throw std::invalid_argument("TransformerEncoder: bad window batch shape " +
                                        ad::shape_str(x.shape()));
        const std::size_t n_win = x.rows() / L;
        Tensor h = ad::add_rowvec(ad::matmul(x, pt("enc.in.w")), pt("enc.in.b"));
        h = ad::add(h, tiled_pe(n_win));
        for (int l = 0; l < cfg_.transformer_layers; ++l) {
            const std::string base = "enc.tf" + std::to_string(l) + ".";
            Tensor a = ad::layer_norm(h, pt(base + "ln1_g"), pt(base + "ln1_b"));
            Tensor q = ad::add_rowvec(ad::matmul(a, pt(base + "wq")), pt(base + "bq"));
            Tensor k = ad::add_rowvec(ad::matmul(a, pt(base + "wk")), pt(base + "bk"));
            Tensor v = ad::add_rowvec(ad::matmul(a, pt(base + "wv")), pt(base + "bv"));
            Tensor c = ad::masked_attention(q, k, v, L,
                                            static_cast<std::size_t>(cfg_.n_heads), invalid);
            Tensor o = ad::add_rowvec(ad::matmul(c, pt(base + "wo")), pt(base + "bo"));
            o = ad::dropout(o, cfg_.dropout, rng, training);
            h = ad::add(h, o);
            Tensor a2 = ad::layer_norm(h, pt(base + "ln2_g"), pt(base + "ln2_b"));
            Tensor f = ad::relu(ad::add_rowvec(ad::matmul(a2, pt(base + "ff1.w")),
                                               pt(base + "ff1.b")));
            f = ad::dropout(f, cfg_.dropout, rng, training);
            Tensor f2 = ad::add_rowvec(ad::matmul(f, pt(base + "ff2.w")), pt(base + "ff2.b"));
            f2 = ad::dropout(f2, cfg_.dropout, rng, training);
            h = ad::add(h, f2);
        }
        Tensor e = ad::add(ad::matmul(h, pt("enc.pool.w")), pt("enc.pool.b"));
        return ad::attention_pool(h, e, L, invalid);
    }

    std::vector<double> encode_step(const std::vector<double>& obs) override {
        ad::NoGradScope ng;
        history_.push(obs);
        return encode_current();
    }

    std::vector<double> peek_feature(const std::vector<double>& obs) override {
        ad::NoGradScope ng;
        HistoryBuffer saved = history_;
        history_.push(obs);
        auto z = encode_current();
        history_ = saved;
        return z;
    }

    std::vector<double> encode_current() {
        ad::NoGradScope ng;
        std::vector<double> vals;
        std::vector<std::uint8_t> invalid;
        history_.rolled(vals, invalid);
        Rng unused(0);
        Tensor x = Tensor::from({window_len(), static_cast<std::size_t>(obs_dim_)},
                                std::move(vals));
        return forward_windows(x, invalid, false, unused).values();
    }

    const Tensor& pt(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return p.tensor;
        throw std::logic_error("TransformerEncoder: unknown parameter " + name);
    }

private:
    Tensor tiled_pe(std::size_t n_win) const {
        const std::size_t L = window_len(), d = static_cast<std::size_t>(cfg_.model_dim);
        Tensor t = Tensor::zeros({n_win * L, d});
        for (std::size_t w = 0; w < n_win; ++w)
            std::copy(pe_.values().begin(), pe_.values().end(),
                      t.values().begin() + w * L * d);
        return t;
    }

    int obs_dim_;
    EncoderConfig cfg_;
    std::vector<NamedTensor> params_;
    Tensor pe_;
    HistoryBuffer history_;
};

// ---------------------------------------------------------------------------
// Shared stepping facade over the two recurrent encoders. The LRU
// diagonal is materialized once per forward pass under the current tape
// mode, so gradient unrolls reuse a single recorded diagonal.
// ---------------------------------------------------------------------------

class RecurrentStepper {
public:
    explicit RecurrentStepper(Encoder& enc) {
        if (enc.kind() == EncoderKind::Gru) {
            gru_ = static_cast<GruEncoder*>(&enc);
        } else if (enc.kind() == EncoderKind::Lru) {
            lru_ = static_cast<LruEncoder*>(&enc);
            diags_ = lru_->all_diags();
        } else {
            throw std::invalid_argument("RecurrentStepper: encoder is not recurrent");
        }
    }

    std::size_t n_hidden_slots() const {
        return gru_ ? static_cast<std::size_t>(gru_->n_layers())
                    : static_cast<std::size_t>(2 * lru_->n_layers());
    }

    Tensor step(std::vector<Tensor>& hidden, const Tensor& obs_batch) const {
        return gru_ ? gru_->step_stack(hidden, obs_batch)
                    : lru_->step_stack(hidden, diags_, obs_batch);
    }

private:
    GruEncoder* gru_ = nullptr;
    LruEncoder* lru_ = nullptr;
    std::vector<LruEncoder::LayerDiag> diags_;
};

inline std::vector<Tensor> hidden_values_to_tensors(const std::vector<std::vector<double>>& h,
                                                    std::size_t batch, std::size_t dim) {
    std::vector<Tensor> out;
    for (const auto& slot : h) {
        if (slot.size() != batch * dim)
            throw std::invalid_argument("hidden_values_to_tensors: bad slot size");
        out.push_back(Tensor::from({batch, dim}, slot));
    }
    return out;
}

// Warms recurrent state over a prefix without recording gradients.
// `ended_before[t]` flags instances whose memory is cleared before step t
// (the done flag of the preceding transition). Returns h after the last
// step; an empty prefix returns the input unchanged.
inline std::vector<std::vector<double>> burn_in_unroll(
    Encoder& enc, std::vector<std::vector<double>> hidden,
    const std::vector<std::vector<double>>& obs_steps,
    const std::vector<std::vector<std::uint8_t>>& ended_before, std::size_t batch) {
    if (obs_steps.empty()) return hidden;
    ad::NoGradScope ng;
    const auto dim = static_cast<std::size_t>(enc.feature_dim());
    const auto obs_dim = static_cast<std::size_t>(enc.obs_dim());
    RecurrentStepper stepper(enc);
    auto h = hidden_values_to_tensors(hidden, batch, dim);
    for (std::size_t t = 0; t < obs_steps.size(); ++t) {
        reset_on_done_tensors(h, ended_before[t]);
        stepper.step(h, Tensor::from({batch, obs_dim}, obs_steps[t]));
    }
    for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] = h[i].values();
    return hidden;
}

inline std::unique_ptr<Encoder> make_encoder(EncoderKind kind, int obs_dim,
                                             const EncoderConfig& cfg, Rng& rng) {
    switch (kind) {
        case EncoderKind::Mlp: return std::make_unique<MlpEncoder>(obs_dim, cfg, rng);
        case EncoderKind::Gru: return std::make_unique<GruEncoder>(obs_dim, cfg, rng);
        case EncoderKind::Lru: return std::make_unique<LruEncoder>(obs_dim, cfg, rng);
        case EncoderKind::Transformer:
            return std::make_unique<TransformerEncoder>(obs_dim, cfg, rng);
    }
    throw std::logic_error("make_encoder: unreachable");
}

}  // namespace porl
