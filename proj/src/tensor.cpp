#include "i2mv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace i2mv {

namespace {

Index numel_of(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) n *= d;
    return n;
}

void check_shape_positive(const std::vector<Index>& shape) {
    for (Index d : shape) {
        if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
}

bool recording() { return Tape::current() != nullptr; }

// Allocates the grad buffer on first touch so accumulation can assume zeros.
void ensure_grad_buffer(const Tensor& t) {
    const_cast<Tensor&>(t).ensure_grad();
}

thread_local Tape* g_current_tape = nullptr;

}  // namespace

std::string shape_str(const std::vector<Index>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(std::vector<Index> shape, bool requires_grad) {
    check_shape_positive(shape);
    auto s = std::make_shared<TensorStorage>();
    s->value = Eigen::ArrayXd::Zero(numel_of(shape));
    s->shape = std::move(shape);
    s->requires_grad = requires_grad;
    return Tensor(std::move(s));
}

Tensor Tensor::constant(std::vector<Index> shape, double fill, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    t.values().setConstant(fill);
    return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    Tensor t = zeros({}, requires_grad);
    t.values()(0) = v;
    return t;
}

Tensor Tensor::from_values(std::vector<Index> shape, std::span<const double> values,
                           bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    if (t.numel() != static_cast<Index>(values.size())) {
        throw ShapeError("from_values: " + shape_str(t.shape()) + " needs " +
                         std::to_string(t.numel()) + " values, got " +
                         std::to_string(values.size()));
    }
    std::copy(values.begin(), values.end(), t.data());
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not a scalar");
    return s_->value(0);
}

void Tensor::ensure_grad() {
    if (s_->grad.size() == 0) s_->grad = Eigen::ArrayXd::Zero(s_->value.size());
}

MatMap Tensor::mat() {
    if (rank() != 2) throw ShapeError("mat: tensor " + shape_str(shape()) + " is not rank-2");
    return MatMap(data(), s_->shape[0], s_->shape[1]);
}

ConstMatMap Tensor::mat() const {
    if (rank() != 2) throw ShapeError("mat: tensor " + shape_str(shape()) + " is not rank-2");
    return ConstMatMap(data(), s_->shape[0], s_->shape[1]);
}

MatMap Tensor::grad_mat() {
    ensure_grad();
    return MatMap(s_->grad.data(), s_->shape[0], s_->shape[1]);
}

VecMap Tensor::vec() {
    if (rank() != 1) throw ShapeError("vec: tensor " + shape_str(shape()) + " is not rank-1");
    return VecMap(data(), numel());
}

ConstVecMap Tensor::vec() const {
    if (rank() != 1) throw ShapeError("vec: tensor " + shape_str(shape()) + " is not rank-1");
    return ConstVecMap(data(), numel());
}

VecMap Tensor::grad_vec() {
    ensure_grad();
    return VecMap(s_->grad.data(), numel());
}

// ---- tape -----------------------------------------------------------------

Tape::Tape() {
    prev_ = g_current_tape;
    g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(const Tensor& out, std::function<void()> backward_step) {
    outputs_.insert(out.storage());
    steps_.push_back(std::move(backward_step));
}

void backward(const Tensor& loss, Tape& tape) {
    if (loss.numel() != 1) {
        throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    }
    if (tape.consumed_) {
        throw std::runtime_error("backward: tape already consumed; run a new forward pass");
    }
    if (!tape.outputs_.contains(loss.storage())) {
        throw std::runtime_error("backward: loss was not produced on this tape");
    }
    tape.consumed_ = true;
    const_cast<Tensor&>(loss).ensure_grad();
    const_cast<Tensor&>(loss).grad()(0) = 1.0;
    for (auto it = tape.steps_.rbegin(); it != tape.steps_.rend(); ++it) (*it)();
}

// ---- op helpers -------------------------------------------------------------

namespace {

Tensor make_output(std::vector<Index> shape, bool requires_grad) {
    return Tensor::zeros(std::move(shape), requires_grad);
}

// Registers `step` if a tape is active and the output carries gradient. The
// step itself must early-return when the output's grad was never touched
// (op output not an ancestor of the loss).
void maybe_record(const Tensor& out, std::function<void()> step) {
    if (recording() && out.requires_grad()) Tape::current()->record(out, std::move(step));
}

void require_rank(const Tensor& t, int r, const char* op) {
    if (t.rank() != r) {
        throw ShapeError(std::string(op) + ": expected rank-" + std::to_string(r) +
                         " tensor, got " + shape_str(t.shape()));
    }
}

}  // namespace

// ---- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    if (a.size(1) != b.size(0)) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Tensor out = make_output({a.size(0), b.size(1)}, a.requires_grad() || b.requires_grad());
    out.mat() = a.mat() * b.mat();
    maybe_record(out, [a, b, out] {
        if (!out.has_grad()) return;
        Tensor o = out;
        ConstMatMap go(o.grad().data(), o.size(0), o.size(1));
        if (a.requires_grad()) {
            ensure_grad_buffer(a);
            const_cast<Tensor&>(a).grad_mat() += go * b.mat().transpose();
        }
        if (b.requires_grad()) {
            ensure_grad_buffer(b);
            const_cast<Tensor&>(b).grad_mat() += a.mat().transpose() * go;
        }
    });
    return out;
}

Tensor transpose(const Tensor& x) {
    require_rank(x, 2, "transpose");
    Tensor out = make_output({x.size(1), x.size(0)}, x.requires_grad());
    out.mat() = x.mat().transpose();
    maybe_record(out, [x, out] {
        if (!out.has_grad()) return;
        Tensor o = out;
        ConstMatMap go(o.grad().data(), o.size(0), o.size(1));
        ensure_grad_buffer(x);
        const_cast<Tensor&>(x).grad_mat() += go.transpose();
    });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("add: shape mismatch, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Tensor out = make_output(a.shape(), a.requires_grad() || b.requires_grad());
    out.values() = a.values() + b.values();
    maybe_record(out, [a, b, out] {
        if (!out.has_grad()) return;
        if (a.requires_grad()) {
            ensure_grad_buffer(a);
            const_cast<Tensor&>(a).grad() += out.grad();
        }
        if (b.requires_grad()) {
            ensure_grad_buffer(b);
            const_cast<Tensor&>(b).grad() += out.grad();
        }
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Tensor out = make_output(a.shape(), a.requires_grad() || b.requires_grad());
    out.values() = a.values() * b.values();
    maybe_record(out, [a, b, out] {
        if (!out.has_grad()) return;
        if (a.requires_grad()) {
            ensure_grad_buffer(a);
            const_cast<Tensor&>(a).grad() += out.grad() * b.values();
        }
        if (b.requires_grad()) {
            ensure_grad_buffer(b);
            const_cast<Tensor&>(b).grad() += out.grad() * a.values();
        }
    });
    return out;
}

Tensor scale(const Tensor& x, double c) {
    Tensor out = make_output(x.shape(), x.requires_grad());
    out.values() = x.values() * c;
    maybe_record(out, [x, out, c] {
        if (!out.has_grad()) return;
        ensure_grad_buffer(x);
        const_cast<Tensor&>(x).grad() += out.grad() * c;
    });
    return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
    require_rank(x, 2, "add_rowvec");
    require_rank(v, 1, "add_rowvec");
    if (x.size(1) != v.numel()) {
        throw ShapeError("add_rowvec: row width mismatch, " + shape_str(x.shape()) + " vs " +
                         shape_str(v.shape()));
    }
    Tensor out = make_output(x.shape(), x.requires_grad() || v.requires_grad());
    out.mat() = x.mat().rowwise() + v.vec().transpose();
    maybe_record(out, [x, v, out] {
        if (!out.has_grad()) return;
        Tensor o = out;
        ConstMatMap go(o.grad().data(), o.size(0), o.size(1));
        if (x.requires_grad()) {
            ensure_grad_buffer(x);
            const_cast<Tensor&>(x).grad() += out.grad();
        }
        if (v.requires_grad()) {
            ensure_grad_buffer(v);
            const_cast<Tensor&>(v).grad_vec() += go.colwise().sum().transpose();
        }
    });
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = make_output(x.shape(), x.requires_grad());
    out.values() = x.values().max(0.0);
    maybe_record(out, [x, out] {
        if (!out.has_grad()) return;
        ensure_grad_buffer(x);
        const_cast<Tensor&>(x).grad() +=
            out.grad() * (x.values() > 0.0).cast<double>();
    });
    return out;
}

namespace {

// Softmax over contiguous length-n slices with stride layout handled by the
// caller through index arithmetic: slice s element i lives at at(s, i).
template <typename At>
void softmax_slices(Index n_slices, Index n, const At& at, Eigen::ArrayXd& out,
                    const Eigen::ArrayXd& in) {
    for (Index s = 0; s < n_slices; ++s) {
        double mx = in(at(s, 0));
        for (Index i = 1; i < n; ++i) mx = std::max(mx, in(at(s, i)));
        double denom = 0.0;
        for (Index i = 0; i < n; ++i) denom += std::exp(in(at(s, i)) - mx);
        for (Index i = 0; i < n; ++i) out(at(s, i)) = std::exp(in(at(s, i)) - mx) / denom;
    }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    if (x.rank() < 1 || axis < 0 || axis >= x.rank()) {
        throw ShapeError("softmax: invalid axis " + std::to_string(axis) + " for tensor " +
                         shape_str(x.shape()));
    }
    Tensor out = make_output(x.shape(), x.requires_grad());

    const Index n = x.size(axis);
    const Index n_slices = x.numel() / n;
    // Rank-1: axis 0 over the whole vector. Rank-2: axis 1 walks within a row,
    // axis 0 walks down a column.
    auto at = [rank = x.rank(), axis, n, n_slices](Index s, Index i) -> Index {
        if (rank == 1) return i;
        if (axis == 1) return s * n + i;
        return i * n_slices + s;
    };
    softmax_slices(n_slices, n, at, out.values(), x.values());

    maybe_record(out, [x, out, at, n, n_slices] {
        if (!out.has_grad()) return;
        ensure_grad_buffer(x);
        auto& gx = const_cast<Tensor&>(x).grad();
        const auto& y = out.values();
        const auto& gy = out.grad();
        for (Index s = 0; s < n_slices; ++s) {
            double inner = 0.0;
            for (Index i = 0; i < n; ++i) inner += gy(at(s, i)) * y(at(s, i));
            for (Index i = 0; i < n; ++i) gx(at(s, i)) += y(at(s, i)) * (gy(at(s, i)) - inner);
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (x.rank() != 1 && x.rank() != 2) {
        throw ShapeError("layer_norm: expected rank-1 or rank-2, got " + shape_str(x.shape()));
    }
    require_rank(gain, 1, "layer_norm");
    require_rank(bias, 1, "layer_norm");
    const Index r = x.rank() == 2 ? x.size(1) : x.size(0);
    const Index n_rows = x.numel() / r;
    if (gain.numel() != r || bias.numel() != r) {
        throw ShapeError("layer_norm: gain/bias length must match last dim " + std::to_string(r));
    }
    if (r == 1 && eps == 0.0) {
        throw std::runtime_error("layer_norm: degenerate normalization (last dim 1, eps 0)");
    }

    Tensor out = make_output(x.shape(), x.requires_grad() || gain.requires_grad() ||
                                            bias.requires_grad());
    // Normalized rows and inverse stddevs are needed again on the way back.
    Mat y_hat(n_rows, r);
    Eigen::VectorXd inv_std(n_rows);
    {
        ConstMatMap xin(x.data(), n_rows, r);
        MatMap o(out.data(), n_rows, r);
        for (Index i = 0; i < n_rows; ++i) {
            const double mean = xin.row(i).mean();
            const double var = (xin.row(i).array() - mean).square().mean();
            const double inv = 1.0 / std::sqrt(var + eps);
            inv_std(i) = inv;
            y_hat.row(i) = ((xin.row(i).array() - mean) * inv).matrix();
            o.row(i) = (y_hat.row(i).array() * gain.vec().transpose().array() +
                        bias.vec().transpose().array())
                           .matrix();
        }
    }

    maybe_record(out, [x, gain, bias, out, y_hat, inv_std, n_rows, r] {
        if (!out.has_grad()) return;
        Tensor o = out;
        ConstMatMap go(o.grad().data(), n_rows, r);
        if (gain.requires_grad()) {
            ensure_grad_buffer(gain);
            const_cast<Tensor&>(gain).grad_vec() +=
                (go.array() * y_hat.array()).colwise().sum().matrix().transpose();
        }
        if (bias.requires_grad()) {
            ensure_grad_buffer(bias);
            const_cast<Tensor&>(bias).grad_vec() += go.colwise().sum().transpose();
        }
        if (x.requires_grad()) {
            ensure_grad_buffer(x);
            MatMap gx(const_cast<Tensor&>(x).grad().data(), n_rows, r);
            for (Index i = 0; i < n_rows; ++i) {
                Eigen::Array<double, 1, Eigen::Dynamic> h =
                    go.row(i).array() * gain.vec().transpose().array();
                const double h_mean = h.mean();
                const double hy_mean = (h * y_hat.row(i).array()).mean();
                gx.row(i) +=
                    ((h - h_mean - y_hat.row(i).array() * hy_mean) * inv_std(i)).matrix();
            }
        }
    });
    return out;
}

Tensor cross_entropy(const Tensor& scores, Index true_index) {
    require_rank(scores, 1, "cross_entropy");
    const Index c = scores.numel();
    if (true_index < 0 || true_index >= c) {
        throw std::out_of_range("cross_entropy: index " + std::to_string(true_index) +
                                " outside [0, " + std::to_string(c) + ")");
    }
    const double mx = scores.values().maxCoeff();
    Eigen::ArrayXd probs = (scores.values() - mx).exp();
    const double denom = probs.sum();
    probs /= denom;
    const double loss = std::log(denom) + mx - scores.values()(true_index);

    Tensor out = Tensor::scalar(loss, scores.requires_grad());
    maybe_record(out, [scores, out, probs, true_index] {
        if (!out.has_grad()) return;
        ensure_grad_buffer(scores);
        const double g = out.grad()(0);
        Eigen::ArrayXd d = probs * g;
        d(true_index) -= g;
        const_cast<Tensor&>(scores).grad() += d;
    });
    return out;
}

Tensor dot(const Tensor& a, const Tensor& b) {
    require_rank(a, 1, "dot");
    require_rank(b, 1, "dot");
    if (a.numel() != b.numel()) {
        throw ShapeError("dot: length mismatch, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Tensor out = Tensor::scalar(a.vec().dot(b.vec()), a.requires_grad() || b.requires_grad());
    maybe_record(out, [a, b, out] {
        if (!out.has_grad()) return;
        const double g = out.grad()(0);
        if (a.requires_grad()) {
            ensure_grad_buffer(a);
            const_cast<Tensor&>(a).grad() += g * b.values();
        }
        if (b.requires_grad()) {
            ensure_grad_buffer(b);
            const_cast<Tensor&>(b).grad() += g * a.values();
        }
    });
    return out;
}

Tensor sum(const Tensor& x) {
    Tensor out = Tensor::scalar(x.values().sum(), x.requires_grad());
    maybe_record(out, [x, out] {
        if (!out.has_grad()) return;
        ensure_grad_buffer(x);
        const_cast<Tensor&>(x).grad() += out.grad()(0);
    });
    return out;
}

Tensor reshape(const Tensor& x, std::vector<Index> shape) {
    Tensor out = make_output(std::move(shape), x.requires_grad());
    if (out.numel() != x.numel()) {
        throw ShapeError("reshape: numel mismatch, " + shape_str(x.shape()) + " vs " +
                         shape_str(out.shape()));
    }
    out.values() = x.values();
    maybe_record(out, [x, out] {
        if (!out.has_grad()) return;
        ensure_grad_buffer(x);
        const_cast<Tensor&>(x).grad() += out.grad();
    });
    return out;
}

Tensor rows(const Tensor& x, Index offset, Index count) {
    require_rank(x, 2, "rows");
    if (offset < 0 || count <= 0 || offset + count > x.size(0)) {
        throw ShapeError("rows: slice [" + std::to_string(offset) + ", " +
                         std::to_string(offset + count) + ") outside " + shape_str(x.shape()));
    }
    Tensor out = make_output({count, x.size(1)}, x.requires_grad());
    out.mat() = x.mat().middleRows(offset, count);
    maybe_record(out, [x, out, offset, count] {
        if (!out.has_grad()) return;
        Tensor o = out;
        ConstMatMap go(o.grad().data(), o.size(0), o.size(1));
        ensure_grad_buffer(x);
        const_cast<Tensor&>(x).grad_mat().middleRows(offset, count) += go;
    });
    return out;
}

Tensor row(const Tensor& x, Index i) {
    require_rank(x, 2, "row");
    if (i < 0 || i >= x.size(0)) {
        throw ShapeError("row: index " + std::to_string(i) + " outside " + shape_str(x.shape()));
    }
    Tensor out = make_output({x.size(1)}, x.requires_grad());
    out.vec() = x.mat().row(i).transpose();
    maybe_record(out, [x, out, i] {
        if (!out.has_grad()) return;
        ensure_grad_buffer(x);
        const_cast<Tensor&>(x).grad_mat().row(i) +=
            ConstVecMap(out.grad().data(), out.numel()).transpose();
    });
    return out;
}

Tensor cols(const Tensor& x, Index offset, Index count) {
    require_rank(x, 2, "cols");
    if (offset < 0 || count <= 0 || offset + count > x.size(1)) {
        throw ShapeError("cols: slice [" + std::to_string(offset) + ", " +
                         std::to_string(offset + count) + ") outside " + shape_str(x.shape()));
    }
    Tensor out = make_output({x.size(0), count}, x.requires_grad());
    out.mat() = x.mat().middleCols(offset, count);
    maybe_record(out, [x, out, offset, count] {
        if (!out.has_grad()) return;
        Tensor o = out;
        ConstMatMap go(o.grad().data(), o.size(0), o.size(1));
        ensure_grad_buffer(x);
        const_cast<Tensor&>(x).grad_mat().middleCols(offset, count) += go;
    });
    return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no parts");
    const Index w = parts[0].size(1);
    Index total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        require_rank(p, 2, "concat_rows");
        if (p.size(1) != w) {
            throw ShapeError("concat_rows: column mismatch, " + shape_str(parts[0].shape()) +
                             " vs " + shape_str(p.shape()));
        }
        total += p.size(0);
        rg = rg || p.requires_grad();
    }
    Tensor out = make_output({total, w}, rg);
    Index at = 0;
    for (const Tensor& p : parts) {
        out.mat().middleRows(at, p.size(0)) = p.mat();
        at += p.size(0);
    }
    std::vector<Tensor> kept(parts.begin(), parts.end());
    maybe_record(out, [kept, out] {
        if (!out.has_grad()) return;
        Tensor o = out;
        ConstMatMap go(o.grad().data(), o.size(0), o.size(1));
        Index at2 = 0;
        for (const Tensor& p : kept) {
            if (p.requires_grad()) {
                ensure_grad_buffer(p);
                const_cast<Tensor&>(p).grad_mat() += go.middleRows(at2, p.size(0));
            }
            at2 += p.size(0);
        }
    });
    return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const Index h = parts[0].size(0);
    Index total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        require_rank(p, 2, "concat_cols");
        if (p.size(0) != h) {
            throw ShapeError("concat_cols: row mismatch, " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        }
        total += p.size(1);
        rg = rg || p.requires_grad();
    }
    Tensor out = make_output({h, total}, rg);
    Index at = 0;
    for (const Tensor& p : parts) {
        out.mat().middleCols(at, p.size(1)) = p.mat();
        at += p.size(1);
    }
    std::vector<Tensor> kept(parts.begin(), parts.end());
    maybe_record(out, [kept, out] {
        if (!out.has_grad()) return;
        Tensor o = out;
        ConstMatMap go(o.grad().data(), o.size(0), o.size(1));
        Index at2 = 0;
        for (const Tensor& p : kept) {
            if (p.requires_grad()) {
                ensure_grad_buffer(p);
                const_cast<Tensor&>(p).grad_mat() += go.middleCols(at2, p.size(1));
            }
            at2 += p.size(1);
        }
    });
    return out;
}

Tensor stack_scalars(std::span<const Tensor> scalars) {
    if (scalars.empty()) throw ShapeError("stack_scalars: no inputs");
    bool rg = false;
    for (const Tensor& s : scalars) {
        if (s.numel() != 1) {
            throw ShapeError("stack_scalars: non-scalar input " + shape_str(s.shape()));
        }
        rg = rg || s.requires_grad();
    }
    Tensor out = make_output({static_cast<Index>(scalars.size())}, rg);
    for (std::size_t i = 0; i < scalars.size(); ++i) out.values()(static_cast<Index>(i)) = scalars[i].item();
    std::vector<Tensor> kept(scalars.begin(), scalars.end());
    maybe_record(out, [kept, out] {
        if (!out.has_grad()) return;
        for (std::size_t i = 0; i < kept.size(); ++i) {
            if (!kept[i].requires_grad()) continue;
            ensure_grad_buffer(kept[i]);
            const_cast<Tensor&>(kept[i]).grad()(0) += out.grad()(static_cast<Index>(i));
        }
    });
    return out;
}

Tensor scale_grad(const Tensor& x, double factor) {
    Tensor out = make_output(x.shape(), x.requires_grad());
    out.values() = x.values();
    maybe_record(out, [x, out, factor] {
        if (!out.has_grad()) return;
        ensure_grad_buffer(x);
        const_cast<Tensor&>(x).grad() += out.grad() * factor;
    });
    return out;
}

// ---- optimizer ---------------------------------------------------------------

void adam_step(std::span<const Tensor> params, AdamState& state) {
    for (const Tensor& p : params) {
        if (!p.has_grad()) {
            throw std::runtime_error("adam_step: uninitialized gradient for parameter " +
                                     shape_str(p.shape()) + "; run backward first");
        }
    }
    state.t_ += 1;
    const auto& c = state.cfg_;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t_));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t_));
    for (const Tensor& p : params) {
        auto& mom = state.moments_[p.storage()];
        if (mom.m.size() == 0) {
            mom.m = Eigen::ArrayXd::Zero(p.numel());
            mom.v = Eigen::ArrayXd::Zero(p.numel());
        }
        const auto& g = p.grad();
        mom.m = c.beta1 * mom.m + (1.0 - c.beta1) * g;
        mom.v = c.beta2 * mom.v + (1.0 - c.beta2) * g.square();
        Eigen::ArrayXd m_hat = mom.m / bc1;
        Eigen::ArrayXd v_hat = mom.v / bc2;
        const_cast<Tensor&>(p).values() -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        const_cast<Tensor&>(p).clear_grad();
    }
}

// ---- gradient checking ---------------------------------------------------------

double grad_check(const std::function<Tensor()>& f, std::span<const Tensor> params,
                  double epsilon) {
    if (epsilon <= 0.0) throw std::invalid_argument("grad_check: epsilon must be positive");

    std::vector<Eigen::ArrayXd> analytic;
    analytic.reserve(params.size());
    {
        Tape tape;
        Tensor loss = f();
        backward(loss, tape);
        for (const Tensor& p : params) {
            analytic.push_back(p.has_grad() ? p.grad() : Eigen::ArrayXd::Zero(p.numel()));
            const_cast<Tensor&>(p).clear_grad();
        }
    }

    double worst = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        for (Index i = 0; i < p.numel(); ++i) {
            const double saved = p.values()(i);
            p.values()(i) = saved + epsilon;
            const double f_plus = f().item();
            p.values()(i) = saved - epsilon;
            const double f_minus = f().item();
            p.values()(i) = saved;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
                throw std::runtime_error("grad_check: non-finite objective at probe point");
            }
            const double g_n = (f_plus - f_minus) / (2.0 * epsilon);
            const double g_a = analytic[pi](i);
            const double rel = std::abs(g_a - g_n) / std::max(1e-8, std::abs(g_a) + std::abs(g_n));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace i2mv
