#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "i2mv/errors.hpp"

namespace i2mv {

using Index = Eigen::Index;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

struct TensorStorage {
    std::vector<Index> shape;
    Eigen::ArrayXd value;  // flat, row-major
    Eigen::ArrayXd grad;   // size 0 until first accumulation
    bool requires_grad = false;
};

/// Dense f64 tensor with shared storage. Rank 0 (scalar), 1 or 2; all model
/// math lives in rank-1/2. Copies are shallow; ops produce fresh storage.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<Index> shape, bool requires_grad = false);
    static Tensor constant(std::vector<Index> shape, double fill, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor from_values(std::vector<Index> shape, std::span<const double> values,
                              bool requires_grad = false);

    bool valid() const { return s_ != nullptr; }
    const std::vector<Index>& shape() const { return s_->shape; }
    int rank() const { return static_cast<int>(s_->shape.size()); }
    Index size(int axis) const { return s_->shape.at(static_cast<std::size_t>(axis)); }
    Index numel() const { return s_->value.size(); }
    bool is_scalar() const { return numel() == 1 && rank() == 0; }

    double* data() { return s_->value.data(); }
    const double* data() const { return s_->value.data(); }
    Eigen::ArrayXd& values() { return s_->value; }
    const Eigen::ArrayXd& values() const { return s_->value; }

    /// Scalar read; requires numel() == 1.
    double item() const;

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool rg) { s_->requires_grad = rg; }

    bool has_grad() const { return s_->grad.size() != 0; }
    void ensure_grad();
    void clear_grad() { s_->grad.resize(0); }
    Eigen::ArrayXd& grad() { return s_->grad; }
    const Eigen::ArrayXd& grad() const { return s_->grad; }

    // Rank-2 views over the flat buffer.
    MatMap mat();
    ConstMatMap mat() const;
    MatMap grad_mat();
    // Rank-1 views.
    VecMap vec();
    ConstVecMap vec() const;
    VecMap grad_vec();

    TensorStorage* storage() const { return s_.get(); }

  private:
    explicit Tensor(std::shared_ptr<TensorStorage> s) : s_(std::move(s)) {}
    std::shared_ptr<TensorStorage> s_;
};

std::string shape_str(const std::vector<Index>& shape);

/// Ordered record of executed operations. Constructing a Tape makes it the
/// active recording target for the current thread; destruction restores the
/// previous one. Distinct tapes on distinct threads are independent.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();

    /// Appends one backward step; `out` marks the op's output as produced here.
    void record(const Tensor& out, std::function<void()> backward_step);

    bool consumed() const { return consumed_; }
    std::size_t size() const { return steps_.size(); }

  private:
    friend void backward(const Tensor& loss, Tape& tape);
    std::vector<std::function<void()>> steps_;
    std::unordered_set<const TensorStorage*> outputs_;
    Tape* prev_ = nullptr;
    bool consumed_ = false;
};

/// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients
/// accumulate additively across fan-out. A tape can be walked once.
void backward(const Tensor& loss, Tape& tape);

// ---- differentiable ops -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
/// Adds rank-1 `v` to every row of rank-2 `x`.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor relu(const Tensor& x);
/// Max-subtracted softmax along `axis`; every slice sums to 1.
Tensor softmax(const Tensor& x, int axis);
/// Row-wise normalization to zero mean / unit variance, then y*gain + bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
/// -log softmax(scores)[true_index]; scores is rank-1.
Tensor cross_entropy(const Tensor& scores, Index true_index);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<Index> shape);
Tensor rows(const Tensor& x, Index offset, Index count);
Tensor row(const Tensor& x, Index i);
Tensor cols(const Tensor& x, Index offset, Index count);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor stack_scalars(std::span<const Tensor> scalars);
/// Identity forward; multiplies the incoming gradient by `factor` on the way
/// back. Gradient-reversal-style knob, also the negative control for the
/// gradient checker.
Tensor scale_grad(const Tensor& x, double factor);

// ---- optimizer ----------------------------------------------------------

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class AdamState {
  public:
    explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}
    const AdamConfig& config() const { return cfg_; }
    long step_count() const { return t_; }

  private:
    friend void adam_step(std::span<const Tensor> params, AdamState& state);
    struct Moments {
        Eigen::ArrayXd m;
        Eigen::ArrayXd v;
    };
    AdamConfig cfg_;
    long t_ = 0;
    std::unordered_map<const TensorStorage*, Moments> moments_;
};

/// Bias-corrected Adam update in place; clears every param's gradient after.
void adam_step(std::span<const Tensor> params, AdamState& state);

// ---- gradient checking ----------------------------------------------------

/// Central-difference check of reverse-mode gradients. Returns the max over
/// all coordinates of |g_a - g_n| / max(1e-8, |g_a| + |g_n|). `f` must be
/// re-evaluable; it is called once under a fresh tape and 2*numel times
/// without one.
double grad_check(const std::function<Tensor()>& f, std::span<const Tensor> params,
                  double epsilon = 1e-5);

}  // namespace i2mv
