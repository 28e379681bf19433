#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "porl/rng.hpp"

namespace porl::ad {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

struct TensorData {
    std::vector<std::size_t> shape;
    std::vector<double> v;
    std::vector<double> g;  // allocated lazily, same length as v
    bool requires_grad = false;
};

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense 64-bit tensor handle with shared storage. Rank 1 and 2 cover
// everything the encoders need; a scalar is a rank-1 tensor of length 1.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
        auto d = std::make_shared<TensorData>();
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        d->shape = std::move(shape);
        d->v.assign(n, 0.0);
        d->requires_grad = requires_grad;
        return Tensor(std::move(d));
    }

    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.values().begin(), t.values().end(), value);
        return t;
    }

    static Tensor from(std::vector<std::size_t> shape, std::vector<double> values,
                       bool requires_grad = false) {
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        if (n != values.size())
            throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) +
                                        " does not match " + std::to_string(values.size()) +
                                        " values");
        auto d = std::make_shared<TensorData>();
        d->shape = std::move(shape);
        d->v = std::move(values);
        d->requires_grad = requires_grad;
        return Tensor(std::move(d));
    }

    static Tensor scalar(double value) { return from({1}, {value}); }

    bool defined() const { return d_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t size() const { return d_->v.size(); }
    std::size_t rows() const { return d_->shape.at(0); }
    std::size_t cols() const { return d_->shape.size() > 1 ? d_->shape[1] : 1; }

    double value() const {
        if (size() != 1) throw std::invalid_argument("Tensor::value: tensor is not a scalar");
        return d_->v[0];
    }
    double at(std::size_t i) const { return d_->v.at(i); }
    double& at(std::size_t i) { return d_->v.at(i); }
    double at(std::size_t i, std::size_t j) const { return d_->v[i * cols() + j]; }
    double& at(std::size_t i, std::size_t j) { return d_->v[i * cols() + j]; }

    std::vector<double>& values() { return d_->v; }
    const std::vector<double>& values() const { return d_->v; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool rg) { d_->requires_grad = rg; }

    void ensure_grad() {
        if (d_->g.size() != d_->v.size()) d_->g.assign(d_->v.size(), 0.0);
    }
    void zero_grad() {
        d_->g.assign(d_->v.size(), 0.0);
    }
    bool has_grad() const { return d_->g.size() == d_->v.size(); }
    std::vector<double>& grad() {
        ensure_grad();
        return d_->g;
    }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw std::runtime_error("Tensor::grad: gradient not populated");
        return d_->g;
    }

    // A value copy that does not share storage and carries no grad.
    Tensor clone() const {
        auto d = std::make_shared<TensorData>();
        d->shape = d_->shape;
        d->v = d_->v;
        d->requires_grad = false;
        return Tensor(std::move(d));
    }

    const std::shared_ptr<TensorData>& ptr() const { return d_; }

private:
    explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}
    std::shared_ptr<TensorData> d_;
};

// Reverse-mode tape. Ops append one record each in execution order, which
// is a valid topological order of the graph; backward replays the records
// once, in reverse.
class Tape {
public:
    static Tape*& active() {
        thread_local Tape* t = nullptr;
        return t;
    }

    void record(std::function<void()> backward_rule) {
        records_.push_back(std::move(backward_rule));
    }

    std::size_t size() const { return records_.size(); }
    void clear() { records_.clear(); }

    // Seeds d(root)/d(root) = 1 and accumulates grads into every
    // reachable requires_grad tensor.
    void backward(Tensor root) {
        if (root.size() != 1)
            throw std::invalid_argument("Tape::backward: root must be a scalar, got shape " +
                                        shape_str(root.shape()));
        root.ensure_grad();
        root.grad()[0] += 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> records_;
};

struct TapeScope {
    explicit TapeScope(Tape& t) : prev_(Tape::active()) { Tape::active() = &t; }
    ~TapeScope() { Tape::active() = prev_; }
    Tape* prev_;
};

struct NoGradScope {
    NoGradScope() : prev_(Tape::active()) { Tape::active() = nullptr; }
    ~NoGradScope() { Tape::active() = prev_; }
    Tape* prev_;
};

namespace detail {

inline bool want_record(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

inline Tensor make_output(std::vector<std::size_t> shape, bool recorded) {
    return Tensor::zeros(std::move(shape), recorded);
}

inline MatMap mat(TensorData& d, std::size_t r, std::size_t c) {
    return MatMap(d.v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline ConstMatMap cmat(const TensorData& d, std::size_t r, std::size_t c) {
    return ConstMatMap(d.v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MatMap gmat(TensorData& d, std::size_t r, std::size_t c) {
    return MatMap(d.g.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline void require_rank2(const Tensor& t, const char* who) {
    if (t.rank() != 2)
        throw std::invalid_argument(std::string(who) + ": expected rank-2 tensor, got " +
                                    shape_str(t.shape()));
}

inline void ensure_grad_data(const std::shared_ptr<TensorData>& d) {
    if (d->g.size() != d->v.size()) d->g.assign(d->v.size(), 0.0);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    if (a.cols() != b.rows())
        throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    bool rec = detail::want_record({&a, &b});
    Tensor c = detail::make_output({m, n}, rec);
    detail::mat(*c.ptr(), m, n).noalias() =
        detail::cmat(*a.ptr(), m, k) * detail::cmat(*b.ptr(), k, n);
    if (rec) {
        auto ad = a.ptr(), bd = b.ptr(), cd = c.ptr();
        Tape::active()->record([ad, bd, cd, m, k, n] {
            detail::ensure_grad_data(cd);
            ConstMatMap dc(cd->g.data(), m, n);
            if (ad->requires_grad) {
                detail::ensure_grad_data(ad);
                MatMap(ad->g.data(), m, k).noalias() += dc * detail::cmat(*bd, k, n).transpose();
            }
            if (bd->requires_grad) {
                detail::ensure_grad_data(bd);
                MatMap(bd->g.data(), k, n).noalias() += detail::cmat(*ad, m, k).transpose() * dc;
            }
        });
    }
    return c;
}

// c = a * b^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul_nt");
    detail::require_rank2(b, "matmul_nt");
    if (a.cols() != b.cols())
        throw std::invalid_argument("matmul_nt: inner dimensions disagree, " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    bool rec = detail::want_record({&a, &b});
    Tensor c = detail::make_output({m, n}, rec);
    detail::mat(*c.ptr(), m, n).noalias() =
        detail::cmat(*a.ptr(), m, k) * detail::cmat(*b.ptr(), n, k).transpose();
    if (rec) {
        auto ad = a.ptr(), bd = b.ptr(), cd = c.ptr();
        Tape::active()->record([ad, bd, cd, m, k, n] {
            detail::ensure_grad_data(cd);
            ConstMatMap dc(cd->g.data(), m, n);
            if (ad->requires_grad) {
                detail::ensure_grad_data(ad);
                MatMap(ad->g.data(), m, k).noalias() += dc * detail::cmat(*bd, n, k);
            }
            if (bd->requires_grad) {
                detail::ensure_grad_data(bd);
                MatMap(bd->g.data(), n, k).noalias() += dc.transpose() * detail::cmat(*ad, m, k);
            }
        });
    }
    return c;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops; shapes must match exactly or one side must be a
// single-element scalar tensor.
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Sub, Mul };

inline Tensor binary(const Tensor& a, const Tensor& b, BinKind kind, const char* who) {
    const bool a_scalar = a.size() == 1, b_scalar = b.size() == 1;
    if (!(a.shape() == b.shape() || a_scalar || b_scalar))
        throw std::invalid_argument(std::string(who) + ": incompatible shapes " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const Tensor& big = (a_scalar && !b_scalar) ? b : a;
    const std::size_t n = big.size();
    bool rec = want_record({&a, &b});
    Tensor c = make_output(big.shape(), rec);
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& cv = c.values();
    for (std::size_t i = 0; i < n; ++i) {
        double x = av[a_scalar ? 0 : i], y = bv[b_scalar ? 0 : i];
        switch (kind) {
            case BinKind::Add: cv[i] = x + y; break;
            case BinKind::Sub: cv[i] = x - y; break;
            case BinKind::Mul: cv[i] = x * y; break;
        }
    }
    if (rec) {
        auto ad = a.ptr(), bd = b.ptr(), cd = c.ptr();
        Tape::active()->record([ad, bd, cd, kind, a_scalar, b_scalar, n] {
            ensure_grad_data(cd);
            const auto& dg = cd->g;
            if (ad->requires_grad) {
                ensure_grad_data(ad);
                for (std::size_t i = 0; i < n; ++i) {
                    double d = dg[i];
                    if (kind == BinKind::Mul) d *= bd->v[b_scalar ? 0 : i];
                    ad->g[a_scalar ? 0 : i] += d;
                }
            }
            if (bd->requires_grad) {
                ensure_grad_data(bd);
                for (std::size_t i = 0; i < n; ++i) {
                    double d = dg[i];
                    switch (kind) {
                        case BinKind::Add: break;
                        case BinKind::Sub: d = -d; break;
                        case BinKind::Mul: d *= ad->v[a_scalar ? 0 : i]; break;
                    }
                    bd->g[b_scalar ? 0 : i] += d;
                }
            }
        });
    }
    return c;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary(a, b, detail::BinKind::Add, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary(a, b, detail::BinKind::Sub, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary(a, b, detail::BinKind::Mul, "mul");
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

namespace detail {

// fwd(x) -> y; dfdx(x, y) -> local derivative
template <class F, class D>
Tensor unary(const Tensor& a, F fwd, D dfdx, const char* who, bool check_finite = false) {
    bool rec = want_record({&a});
    Tensor c = make_output(a.shape(), rec);
    const auto& av = a.values();
    auto& cv = c.values();
    for (std::size_t i = 0; i < av.size(); ++i) {
        cv[i] = fwd(av[i]);
        if (check_finite && !std::isfinite(cv[i]))
            throw std::domain_error(std::string(who) + ": non-finite result at index " +
                                    std::to_string(i) + " for input " + std::to_string(av[i]));
    }
    if (rec) {
        auto ad = a.ptr(), cd = c.ptr();
        Tape::active()->record([ad, cd, dfdx] {
            ensure_grad_data(cd);
            ensure_grad_data(ad);
            for (std::size_t i = 0; i < ad->v.size(); ++i)
                ad->g[i] += cd->g[i] * dfdx(ad->v[i], cd->v[i]);
        });
    }
    return c;
}

}  // namespace detail

inline Tensor neg(const Tensor& a) {
    return detail::unary(
        a, [](double x) { return -x; }, [](double, double) { return -1.0; }, "neg");
}
inline Tensor scale(const Tensor& a, double k) {
    return detail::unary(
        a, [k](double x) { return k * x; }, [k](double, double) { return k; }, "scale");
}
inline Tensor add_const(const Tensor& a, double k) {
    return detail::unary(
        a, [k](double x) { return x + k; }, [](double, double) { return 1.0; }, "add_const");
}
inline Tensor tanh(const Tensor& a) {
    return detail::unary(
        a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; }, "tanh");
}
inline Tensor sigmoid(const Tensor& a) {
    return detail::unary(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); }, "sigmoid");
}
inline Tensor relu(const Tensor& a) {
    return detail::unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}
inline Tensor exp(const Tensor& a) {
    return detail::unary(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp",
        /*check_finite=*/true);
}
inline Tensor log(const Tensor& a) {
    for (double x : a.values())
        if (!(x > 0.0))
            throw std::domain_error("log: input " + std::to_string(x) +
                                    " outside the positive domain");
    return detail::unary(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}
inline Tensor sin(const Tensor& a) {
    return detail::unary(
        a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); },
        "sin");
}
inline Tensor cos(const Tensor& a) {
    return detail::unary(
        a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); },
        "cos");
}
inline Tensor clamp(const Tensor& a, double lo, double hi) {
    return detail::unary(
        a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; }, "clamp");
}

// Elementwise min; ties route the gradient to the first argument.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("minimum: shapes differ, " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    bool rec = detail::want_record({&a, &b});
    Tensor c = detail::make_output(a.shape(), rec);
    for (std::size_t i = 0; i < a.size(); ++i)
        c.values()[i] = std::min(a.values()[i], b.values()[i]);
    if (rec) {
        auto ad = a.ptr(), bd = b.ptr(), cd = c.ptr();
        Tape::active()->record([ad, bd, cd] {
            detail::ensure_grad_data(cd);
            if (ad->requires_grad) detail::ensure_grad_data(ad);
            if (bd->requires_grad) detail::ensure_grad_data(bd);
            for (std::size_t i = 0; i < cd->v.size(); ++i) {
                bool take_a = ad->v[i] <= bd->v[i];
                if (take_a && ad->requires_grad) ad->g[i] += cd->g[i];
                if (!take_a && bd->requires_grad) bd->g[i] += cd->g[i];
            }
        });
    }
    return c;
}

// ---------------------------------------------------------------------------
// Reductions and row/column broadcast ops
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    bool rec = detail::want_record({&a});
    Tensor c = detail::make_output({1}, rec);
    double s = 0.0;
    for (double x : a.values()) s += x;
    c.values()[0] = s;
    if (rec) {
        auto ad = a.ptr(), cd = c.ptr();
        Tape::active()->record([ad, cd] {
            detail::ensure_grad_data(cd);
            detail::ensure_grad_data(ad);
            for (auto& g : ad->g) g += cd->g[0];
        });
    }
    return c;
}

inline Tensor mean(const Tensor& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor sum_rows(const Tensor& a) {
    detail::require_rank2(a, "sum_rows");
    const std::size_t r = a.rows(), cn = a.cols();
    bool rec = detail::want_record({&a});
    Tensor c = detail::make_output({r, 1}, rec);
    for (std::size_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cn; ++j) s += a.at(i, j);
        c.values()[i] = s;
    }
    if (rec) {
        auto ad = a.ptr(), cd = c.ptr();
        Tape::active()->record([ad, cd, r, cn] {
            detail::ensure_grad_data(cd);
            detail::ensure_grad_data(ad);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < cn; ++j) ad->g[i * cn + j] += cd->g[i];
        });
    }
    return c;
}

namespace detail {

enum class VecSide { Row, Col };
enum class VecKind { Add, Mul };

inline Tensor broadcast_vec(const Tensor& m, const Tensor& v, VecSide side, VecKind kind,
                            const char* who) {
    require_rank2(m, who);
    const std::size_t r = m.rows(), c = m.cols();
    const std::size_t expect = side == VecSide::Row ? c : r;
    if (v.size() != expect)
        throw std::invalid_argument(std::string(who) + ": vector length " +
                                    std::to_string(v.size()) + " does not match matrix " +
                                    shape_str(m.shape()));
    bool rec = want_record({&m, &v});
    Tensor out = make_output(m.shape(), rec);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            double w = v.values()[side == VecSide::Row ? j : i];
            double x = m.at(i, j);
            out.at(i, j) = kind == VecKind::Add ? x + w : x * w;
        }
    if (rec) {
        auto md = m.ptr(), vd = v.ptr(), od = out.ptr();
        Tape::active()->record([md, vd, od, r, c, side, kind] {
            ensure_grad_data(od);
            if (md->requires_grad) ensure_grad_data(md);
            if (vd->requires_grad) ensure_grad_data(vd);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    std::size_t vi = side == VecSide::Row ? j : i;
                    double d = od->g[i * c + j];
                    if (md->requires_grad)
                        md->g[i * c + j] += kind == VecKind::Add ? d : d * vd->v[vi];
                    if (vd->requires_grad)
                        vd->g[vi] += kind == VecKind::Add ? d : d * md->v[i * c + j];
                }
        });
    }
    return out;
}

}  // namespace detail

inline Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    return detail::broadcast_vec(m, v, detail::VecSide::Row, detail::VecKind::Add, "add_rowvec");
}
inline Tensor mul_rowvec(const Tensor& m, const Tensor& v) {
    return detail::broadcast_vec(m, v, detail::VecSide::Row, detail::VecKind::Mul, "mul_rowvec");
}
inline Tensor mul_colvec(const Tensor& m, const Tensor& v) {
    return detail::broadcast_vec(m, v, detail::VecSide::Col, detail::VecKind::Mul, "mul_colvec");
}

// Vertical concatenation; every part must have the same column count.
inline Tensor stack_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("stack_rows: no parts");
    const std::size_t c = parts[0].cols();
    std::size_t r = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        detail::require_rank2(p, "stack_rows");
        if (p.cols() != c) throw std::invalid_argument("stack_rows: column counts differ");
        r += p.rows();
        any_grad = any_grad || p.requires_grad();
    }
    bool rec = Tape::active() && any_grad;
    Tensor out = detail::make_output({r, c}, rec);
    std::size_t row = 0;
    for (const auto& p : parts) {
        std::copy(p.values().begin(), p.values().end(), out.values().begin() + row * c);
        row += p.rows();
    }
    if (rec) {
        std::vector<std::shared_ptr<TensorData>> pds;
        std::vector<std::size_t> rows_of;
        for (const auto& p : parts) {
            pds.push_back(p.ptr());
            rows_of.push_back(p.rows());
        }
        auto od = out.ptr();
        Tape::active()->record([pds, rows_of, od, c] {
            detail::ensure_grad_data(od);
            std::size_t row = 0;
            for (std::size_t k = 0; k < pds.size(); ++k) {
                if (pds[k]->requires_grad) {
                    detail::ensure_grad_data(pds[k]);
                    for (std::size_t i = 0; i < rows_of[k] * c; ++i)
                        pds[k]->g[i] += od->g[row * c + i];
                }
                row += rows_of[k];
            }
        });
    }
    return out;
}

// out[i] = a(i, idx[i]); used to pick the log-probability of taken actions.
inline Tensor gather_cols(const Tensor& a, const std::vector<int>& idx) {
    detail::require_rank2(a, "gather_cols");
    const std::size_t r = a.rows(), c = a.cols();
    if (idx.size() != r) throw std::invalid_argument("gather_cols: index count != rows");
    bool rec = detail::want_record({&a});
    Tensor out = detail::make_output({r, 1}, rec);
    for (std::size_t i = 0; i < r; ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= c)
            throw std::out_of_range("gather_cols: index out of range");
        out.values()[i] = a.at(i, static_cast<std::size_t>(idx[i]));
    }
    if (rec) {
        auto ad = a.ptr(), od = out.ptr();
        Tape::active()->record([ad, od, idx, c] {
            detail::ensure_grad_data(od);
            detail::ensure_grad_data(ad);
            for (std::size_t i = 0; i < idx.size(); ++i)
                ad->g[i * c + static_cast<std::size_t>(idx[i])] += od->g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

// Softmax over the valid entries of a rank-1 logits vector. Invalid
// positions emit exactly 0 and never participate in the max/sum, so the
// result is independent of their contents.
inline Tensor masked_softmax(const Tensor& logits, const std::vector<std::uint8_t>& invalid) {
    if (logits.rank() != 1)
        throw std::invalid_argument("masked_softmax: expected rank-1 logits, got " +
                                    shape_str(logits.shape()));
    const std::size_t n = logits.size();
    if (invalid.size() != n)
        throw std::invalid_argument("masked_softmax: mask length != logits length");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i)
        if (!invalid[i]) mx = std::max(mx, logits.values()[i]);
    if (!std::isfinite(mx))
        throw std::invalid_argument("masked_softmax: all positions invalid (empty context)");
    bool rec = detail::want_record({&logits});
    Tensor out = detail::make_output({n}, rec);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (invalid[i]) continue;
        out.values()[i] = std::exp(logits.values()[i] - mx);
        z += out.values()[i];
    }
    for (std::size_t i = 0; i < n; ++i)
        if (!invalid[i]) out.values()[i] /= z;
    if (rec) {
        auto ld = logits.ptr(), od = out.ptr();
        Tape::active()->record([ld, od, invalid, n] {
            detail::ensure_grad_data(od);
            detail::ensure_grad_data(ld);
            double dot = 0.0;
            for (std::size_t i = 0; i < n; ++i)
                if (!invalid[i]) dot += od->v[i] * od->g[i];
            for (std::size_t i = 0; i < n; ++i)
                if (!invalid[i]) ld->g[i] += od->v[i] * (od->g[i] - dot);
        });
    }
    return out;
}

inline Tensor log_softmax_rows(const Tensor& a) {
    detail::require_rank2(a, "log_softmax_rows");
    const std::size_t r = a.rows(), c = a.cols();
    bool rec = detail::want_record({&a});
    Tensor out = detail::make_output({r, c}, rec);
    for (std::size_t i = 0; i < r; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, a.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(a.at(i, j) - mx);
        double lz = mx + std::log(z);
        for (std::size_t j = 0; j < c; ++j) out.at(i, j) = a.at(i, j) - lz;
    }
    if (rec) {
        auto ad = a.ptr(), od = out.ptr();
        Tape::active()->record([ad, od, r, c] {
            detail::ensure_grad_data(od);
            detail::ensure_grad_data(ad);
            for (std::size_t i = 0; i < r; ++i) {
                double gsum = 0.0;
                for (std::size_t j = 0; j < c; ++j) gsum += od->g[i * c + j];
                for (std::size_t j = 0; j < c; ++j)
                    ad->g[i * c + j] += od->g[i * c + j] - std::exp(od->v[i * c + j]) * gsum;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Layer norm, dropout
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
    detail::require_rank2(x, "layer_norm");
    const std::size_t r = x.rows(), c = x.cols();
    if (gain.size() != c || bias.size() != c)
        throw std::invalid_argument("layer_norm: gain/bias length != feature count");
    bool rec = detail::want_record({&x, &gain, &bias});
    Tensor out = detail::make_output({r, c}, rec);
    std::vector<double> inv_std(r), mu(r);
    for (std::size_t i = 0; i < r; ++i) {
        double m = 0.0;
        for (std::size_t j = 0; j < c; ++j) m += x.at(i, j);
        m /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            double d = x.at(i, j) - m;
            var += d * d;
        }
        var /= static_cast<double>(c);
        mu[i] = m;
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j)
            out.at(i, j) = (x.at(i, j) - m) * inv_std[i] * gain.values()[j] + bias.values()[j];
    }
    if (rec) {
        auto xd = x.ptr(), gd = gain.ptr(), bd = bias.ptr(), od = out.ptr();
        Tape::active()->record([xd, gd, bd, od, mu, inv_std, r, c] {
            detail::ensure_grad_data(od);
            if (xd->requires_grad) detail::ensure_grad_data(xd);
            if (gd->requires_grad) detail::ensure_grad_data(gd);
            if (bd->requires_grad) detail::ensure_grad_data(bd);
            for (std::size_t i = 0; i < r; ++i) {
                double s1 = 0.0, s2 = 0.0;  // sums of dxhat and dxhat*xhat
                for (std::size_t j = 0; j < c; ++j) {
                    double xhat = (xd->v[i * c + j] - mu[i]) * inv_std[i];
                    double dy = od->g[i * c + j];
                    double dxhat = dy * gd->v[j];
                    s1 += dxhat;
                    s2 += dxhat * xhat;
                    if (gd->requires_grad) gd->g[j] += dy * xhat;
                    if (bd->requires_grad) bd->g[j] += dy;
                }
                if (xd->requires_grad) {
                    double nc = static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                        double xhat = (xd->v[i * c + j] - mu[i]) * inv_std[i];
                        double dxhat = od->g[i * c + j] * gd->v[j];
                        xd->g[i * c + j] += inv_std[i] * (dxhat - (s1 + xhat * s2) / nc);
                    }
                }
            }
        });
    }
    return out;
}

// Inverted dropout; identity when not training. Draws one uniform per
// element from the supplied stream.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
    bool rec = detail::want_record({&x});
    Tensor out = detail::make_output(x.shape(), rec);
    auto keep = std::make_shared<std::vector<std::uint8_t>>(x.size());
    const double inv_keep = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < x.size(); ++i) {
        (*keep)[i] = rng.uniform01() >= p ? 1 : 0;
        out.values()[i] = (*keep)[i] ? x.values()[i] * inv_keep : 0.0;
    }
    if (rec) {
        auto xd = x.ptr(), od = out.ptr();
        Tape::active()->record([xd, od, keep, inv_keep] {
            detail::ensure_grad_data(od);
            detail::ensure_grad_data(xd);
            for (std::size_t i = 0; i < xd->v.size(); ++i)
                if ((*keep)[i]) xd->g[i] += od->g[i] * inv_keep;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fused attention ops. Inputs hold B windows of window_len rows stacked
// vertically; `invalid[i]` marks row i as padding. Attention never reads
// invalid key rows, so outputs at valid positions are independent of the
// contents of padded slots.
// ---------------------------------------------------------------------------

inline Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               std::size_t window_len, std::size_t n_heads,
                               const std::vector<std::uint8_t>& invalid) {
    detail::require_rank2(q, "masked_attention");
    const std::size_t rows = q.rows(), d = q.cols();
    if (k.shape() != q.shape() || v.shape() != q.shape())
        throw std::invalid_argument("masked_attention: q/k/v shapes differ");
    if (rows % window_len != 0)
        throw std::invalid_argument("masked_attention: rows not a multiple of window length");
    if (d % n_heads != 0)
        throw std::invalid_argument("masked_attention: model dim not divisible by heads");
    if (invalid.size() != rows)
        throw std::invalid_argument("masked_attention: mask length != rows");
    const std::size_t n_win = rows / window_len, dk = d / n_heads;
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

    bool rec = detail::want_record({&q, &k, &v});
    Tensor out = detail::make_output({rows, d}, rec);
    // probs[w*heads + h] is the window_len x window_len attention matrix
    auto probs = std::make_shared<std::vector<RowMat>>();
    probs->reserve(n_win * n_heads);

    using Block = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
    using MutBlock = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
    const Eigen::Index L = static_cast<Eigen::Index>(window_len);
    const Eigen::Index DK = static_cast<Eigen::Index>(dk);
    const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));

    for (std::size_t w = 0; w < n_win; ++w) {
        const std::size_t base = w * window_len;
        // at least one valid key is required per window
        bool any_valid = false;
        for (std::size_t i = 0; i < window_len; ++i) any_valid |= !invalid[base + i];
        if (!any_valid)
            throw std::invalid_argument("masked_attention: window " + std::to_string(w) +
                                        " has no valid positions (empty context)");
        for (std::size_t h = 0; h < n_heads; ++h) {
            Block qh(q.values().data() + base * d + h * dk, L, DK, stride);
            Block kh(k.values().data() + base * d + h * dk, L, DK, stride);
            Block vh(v.values().data() + base * d + h * dk, L, DK, stride);
            RowMat scores = qh * kh.transpose() * inv_sqrt_dk;
            RowMat p(L, L);
            for (Eigen::Index i = 0; i < L; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (Eigen::Index j = 0; j < L; ++j)
                    if (!invalid[base + j]) mx = std::max(mx, scores(i, j));
                double z = 0.0;
                for (Eigen::Index j = 0; j < L; ++j) {
                    if (invalid[base + j]) {
                        p(i, j) = 0.0;
                    } else {
                        p(i, j) = std::exp(scores(i, j) - mx);
                        z += p(i, j);
                    }
                }
                for (Eigen::Index j = 0; j < L; ++j) p(i, j) /= z;
            }
            MutBlock oh(out.values().data() + base * d + h * dk, L, DK, stride);
            oh.noalias() = p * vh;
            if (rec) probs->push_back(std::move(p));
        }
    }

    if (rec) {
        auto qd = q.ptr(), kd = k.ptr(), vd = v.ptr(), od = out.ptr();
        Tape::active()->record([qd, kd, vd, od, probs, invalid, n_win, n_heads, window_len, d, dk,
                                inv_sqrt_dk] {
            detail::ensure_grad_data(od);
            detail::ensure_grad_data(qd);
            detail::ensure_grad_data(kd);
            detail::ensure_grad_data(vd);
            const Eigen::Index L = static_cast<Eigen::Index>(window_len);
            const Eigen::Index DK = static_cast<Eigen::Index>(dk);
            const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
            using Block = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
            using MutBlock = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
            for (std::size_t w = 0; w < n_win; ++w) {
                const std::size_t base = w * window_len;
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const RowMat& p = (*probs)[w * n_heads + h];
                    Block qh(qd->v.data() + base * d + h * dk, L, DK, stride);
                    Block kh(kd->v.data() + base * d + h * dk, L, DK, stride);
                    Block vh(vd->v.data() + base * d + h * dk, L, DK, stride);
                    Block doh(od->g.data() + base * d + h * dk, L, DK, stride);
                    MutBlock dqh(qd->g.data() + base * d + h * dk, L, DK, stride);
                    MutBlock dkh(kd->g.data() + base * d + h * dk, L, DK, stride);
                    MutBlock dvh(vd->g.data() + base * d + h * dk, L, DK, stride);
                    dvh.noalias() += p.transpose() * doh;
                    RowMat dp = doh * vh.transpose();
                    // softmax backward per query row; invalid keys have p=0
                    RowMat ds(L, L);
                    for (Eigen::Index i = 0; i < L; ++i) {
                        double dot = 0.0;
                        for (Eigen::Index j = 0; j < L; ++j) dot += p(i, j) * dp(i, j);
                        for (Eigen::Index j = 0; j < L; ++j)
                            ds(i, j) = p(i, j) * (dp(i, j) - dot);
                    }
                    dqh.noalias() += ds * kh * inv_sqrt_dk;
                    dkh.noalias() += ds.transpose() * qh * inv_sqrt_dk;
                }
            }
        });
    }
    return out;
}

// Pools each window's valid rows with softmax weights from the scores `e`
// (shape rows x 1), emitting one feature row per window.
inline Tensor attention_pool(const Tensor& h, const Tensor& e, std::size_t window_len,
                             const std::vector<std::uint8_t>& invalid) {
    detail::require_rank2(h, "attention_pool");
    const std::size_t rows = h.rows(), d = h.cols();
    if (e.size() != rows)
        throw std::invalid_argument("attention_pool: score count != rows");
    if (rows % window_len != 0)
        throw std::invalid_argument("attention_pool: rows not a multiple of window length");
    if (invalid.size() != rows)
        throw std::invalid_argument("attention_pool: mask length != rows");
    const std::size_t n_win = rows / window_len;
    bool rec = detail::want_record({&h, &e});
    Tensor out = detail::make_output({n_win, d}, rec);
    auto alpha = std::make_shared<std::vector<double>>(rows, 0.0);
    for (std::size_t w = 0; w < n_win; ++w) {
        const std::size_t base = w * window_len;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < window_len; ++i)
            if (!invalid[base + i]) mx = std::max(mx, e.values()[base + i]);
        if (!std::isfinite(mx))
            throw std::invalid_argument("attention_pool: window " + std::to_string(w) +
                                        " has no valid positions (empty context)");
        double z = 0.0;
        for (std::size_t i = 0; i < window_len; ++i) {
            if (invalid[base + i]) continue;
            (*alpha)[base + i] = std::exp(e.values()[base + i] - mx);
            z += (*alpha)[base + i];
        }
        for (std::size_t i = 0; i < window_len; ++i) {
            if (invalid[base + i]) continue;
            (*alpha)[base + i] /= z;
            for (std::size_t j = 0; j < d; ++j)
                out.at(w, j) += (*alpha)[base + i] * h.at(base + i, j);
        }
    }
    if (rec) {
        auto hd = h.ptr(), ed = e.ptr(), od = out.ptr();
        Tape::active()->record([hd, ed, od, alpha, invalid, n_win, window_len, d] {
            detail::ensure_grad_data(od);
            if (hd->requires_grad) detail::ensure_grad_data(hd);
            if (ed->requires_grad) detail::ensure_grad_data(ed);
            for (std::size_t w = 0; w < n_win; ++w) {
                const std::size_t base = w * window_len;
                // dalpha_i = dz . h_i, then masked-softmax backward to de
                std::vector<double> dalpha(window_len, 0.0);
                double dot = 0.0;
                for (std::size_t i = 0; i < window_len; ++i) {
                    if (invalid[base + i]) continue;
                    double s = 0.0;
                    for (std::size_t j = 0; j < d; ++j)
                        s += od->g[w * d + j] * hd->v[(base + i) * d + j];
                    dalpha[i] = s;
                    dot += (*alpha)[base + i] * s;
                    if (hd->requires_grad)
                        for (std::size_t j = 0; j < d; ++j)
                            hd->g[(base + i) * d + j] += (*alpha)[base + i] * od->g[w * d + j];
                }
                if (ed->requires_grad)
                    for (std::size_t i = 0; i < window_len; ++i)
                        if (!invalid[base + i])
                            ed->g[base + i] += (*alpha)[base + i] * (dalpha[i] - dot);
            }
        });
    }
    return out;
}

}  // namespace porl::ad
