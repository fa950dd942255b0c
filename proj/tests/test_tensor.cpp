#include <doctest.h>

#include <cmath>
#include <random>
#include <thread>
#include <vector>

#include "i2mv/tensor.hpp"

using namespace i2mv;

namespace {

Tensor random_tensor(std::vector<Index> shape, std::mt19937_64& rng, bool requires_grad = true,
                     bool keep_off_zero = false) {
    Tensor t = Tensor::zeros(std::move(shape), requires_grad);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (Index i = 0; i < t.numel(); ++i) {
        double v = u(rng);
        if (keep_off_zero) v = (v < 0 ? -1.0 : 1.0) * (0.15 + std::abs(v));
        t.values()(i) = v;
    }
    return t;
}

// Projects an op output to a scalar through a fixed random weighting so the
// gradient check exercises every output coordinate.
Tensor project(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

double fd_check_op(const std::function<Tensor()>& f, std::span<const Tensor> params) {
    return grad_check(f, params, 1e-5);
}

}  // namespace

TEST_CASE("matmul hand-checked products") {
    const double id2[] = {1, 0, 0, 1};
    const double m[] = {1, 2, 3, 4};
    Tensor a = Tensor::from_values({2, 2}, id2);
    Tensor b = Tensor::from_values({2, 2}, m);
    Tensor c = matmul(a, b);
    for (Index i = 0; i < 4; ++i) CHECK(c.values()(i) == doctest::Approx(m[i]));

    const double v[] = {5, 6};
    Tensor d = matmul(b, Tensor::from_values({2, 1}, v));
    CHECK(d.values()(0) == doctest::Approx(17));
    CHECK(d.values()(1) == doctest::Approx(39));

    Tensor z = matmul(Tensor::zeros({2, 3}), Tensor::constant({3, 2}, 7.5));
    CHECK(z.values().abs().maxCoeff() == 0.0);
}

TEST_CASE("matmul rejects mismatched shapes, names both") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({4, 2});
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), ShapeError);
    try {
        matmul(a, b);
    } catch (const ShapeError& e) {
        CHECK(std::string(e.what()).find("[4x2]") != std::string::npos);
    }
}

TEST_CASE("softmax analytic cases") {
    Tensor x = Tensor::zeros({3});
    Tensor y = softmax(x, 0);
    for (Index i = 0; i < 3; ++i) CHECK(y.values()(i) == doctest::Approx(1.0 / 3).epsilon(1e-12));

    const double logits[] = {std::log(2.0), 0.0};
    Tensor y2 = softmax(Tensor::from_values({2}, logits), 0);
    CHECK(y2.values()(0) == doctest::Approx(2.0 / 3).epsilon(1e-12));
    CHECK(y2.values()(1) == doctest::Approx(1.0 / 3).epsilon(1e-12));

    const double big[] = {1000.0, 0.0};
    Tensor y3 = softmax(Tensor::from_values({2}, big), 0);
    CHECK(std::isfinite(y3.values()(0)));
    CHECK(y3.values()(0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y3.values()(1) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("softmax invalid axis") {
    Tensor x = Tensor::zeros({2, 2});
    CHECK_THROWS_AS(softmax(x, 2), ShapeError);
    CHECK_THROWS_AS(softmax(x, -1), ShapeError);
}

TEST_CASE("softmax slices sum to one and stay in [0,1]") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_tensor({5, 7}, rng, false);
        x.values() *= 50.0;  // widen the logit range
        for (int axis : {0, 1}) {
            Tensor y = softmax(x, axis);
            CHECK(y.values().minCoeff() >= 0.0);
            CHECK(y.values().maxCoeff() <= 1.0);
            auto ym = y.mat();
            if (axis == 1) {
                for (Index i = 0; i < 5; ++i)
                    CHECK(std::abs(ym.row(i).sum() - 1.0) <= 1e-12);
            } else {
                for (Index j = 0; j < 7; ++j)
                    CHECK(std::abs(ym.col(j).sum() - 1.0) <= 1e-12);
            }
            CHECK(y.values().isFinite().all());
        }
    }
}

TEST_CASE("layer_norm constant row collapses to zero") {
    Tensor x = Tensor::constant({4}, 3.25);
    Tensor y = layer_norm(x, Tensor::constant({4}, 1.0), Tensor::zeros({4}), 1e-5);
    CHECK(y.values().abs().maxCoeff() < 1e-9);
}

TEST_CASE("layer_norm matches scalar mean/variance oracle on [1,-1]") {
    // Independent oracle: mean = 0, population variance = 1.
    const double eps = 1e-5;
    const double expected = 1.0 / std::sqrt(1.0 + eps);
    const double in[] = {1.0, -1.0};
    Tensor y = layer_norm(Tensor::from_values({2}, in), Tensor::constant({2}, 1.0),
                          Tensor::zeros({2}), eps);
    CHECK(y.values()(0) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(y.values()(1) == doctest::Approx(-expected).epsilon(1e-12));
    CHECK(y.values()(0) == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("layer_norm is shift invariant") {
    std::mt19937_64 rng(5);
    Tensor x = random_tensor({3, 6}, rng, false);
    Tensor g = random_tensor({6}, rng, false);
    Tensor b = random_tensor({6}, rng, false);
    Tensor shifted = Tensor::zeros({3, 6});
    shifted.values() = x.values() + 17.5;
    Tensor y0 = layer_norm(x, g, b, 1e-5);
    Tensor y1 = layer_norm(shifted, g, b, 1e-5);
    CHECK((y0.values() - y1.values()).abs().maxCoeff() < 1e-9);
}

TEST_CASE("layer_norm rejects degenerate width-1 rows at eps 0") {
    Tensor x = Tensor::zeros({3, 1});
    Tensor g = Tensor::constant({1}, 1.0);
    CHECK_THROWS(layer_norm(x, g, Tensor::zeros({1}), 0.0));
}

TEST_CASE("cross_entropy analytic values") {
    Tensor even = Tensor::zeros({4});
    CHECK(cross_entropy(even, 2).item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    const double dominant[] = {1000.0, 0.0, 0.0};
    CHECK(cross_entropy(Tensor::from_values({3}, dominant), 0).item() < 1e-9);

    // Scalar softmax oracle: -log(e^1 / (e^1 + e^0)) = log(1 + e^-1).
    const double two[] = {1.0, 0.0};
    CHECK(cross_entropy(Tensor::from_values({2}, two), 0).item() ==
          doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
    CHECK(std::log(1.0 + std::exp(-1.0)) == doctest::Approx(0.313262).epsilon(1e-6));
}

TEST_CASE("cross_entropy rejects out-of-range index") {
    Tensor s = Tensor::zeros({3});
    CHECK_THROWS_AS(cross_entropy(s, 3), std::out_of_range);
    CHECK_THROWS_AS(cross_entropy(s, -1), std::out_of_range);
}

TEST_CASE("backward: linear derivative through dot") {
    Tensor w = Tensor::from_values({1}, std::vector<double>{2.0}, true);
    Tensor x = Tensor::from_values({1}, std::vector<double>{3.0});
    Tape tape;
    Tensor loss = dot(w, x);
    backward(loss, tape);
    CHECK(w.grad()(0) == doctest::Approx(3.0));
}

TEST_CASE("backward: fan-out accumulates additively") {
    Tensor w = Tensor::scalar(1.5, true);
    Tape tape;
    Tensor loss = add(w, w);
    backward(loss, tape);
    CHECK(w.grad()(0) == doctest::Approx(2.0));

    Tensor w3 = Tensor::scalar(-0.5, true);
    Tape tape3;
    Tensor loss3 = add(add(w3, w3), w3);
    backward(loss3, tape3);
    CHECK(w3.grad()(0) == doctest::Approx(3.0));
}

TEST_CASE("backward: softmax+CE gradient equals p minus one-hot") {
    std::mt19937_64 rng(23);
    Tensor logits = random_tensor({5}, rng, true);
    logits.values() *= 3.0;
    const Index label = 2;
    Tape tape;
    Tensor loss = cross_entropy(logits, label);
    backward(loss, tape);

    // Oracle probabilities computed independently of the op.
    double mx = logits.values().maxCoeff();
    Eigen::ArrayXd p = (logits.values() - mx).exp();
    p /= p.sum();
    for (Index i = 0; i < 5; ++i) {
        const double expected = p(i) - (i == label ? 1.0 : 0.0);
        CHECK(std::abs(logits.grad()(i) - expected) < 1e-10);
    }
}

TEST_CASE("backward errors: non-scalar loss, consumed tape, foreign loss") {
    Tensor x = Tensor::zeros({3}, true);
    {
        Tape tape;
        Tensor y = relu(x);
        CHECK_THROWS_AS(backward(y, tape), ShapeError);
    }
    {
        Tape tape;
        Tensor loss = sum(relu(x));
        backward(loss, tape);
        CHECK_THROWS_WITH_AS(backward(loss, tape), doctest::Contains("consumed"),
                             std::runtime_error);
    }
    {
        Tape tape;
        Tensor foreign = Tensor::scalar(1.0, true);
        CHECK_THROWS_WITH_AS(backward(foreign, tape), doctest::Contains("not produced"),
                             std::runtime_error);
    }
}

TEST_CASE("adam: zero gradient is a strict no-op") {
    Tensor w = Tensor::from_values({3}, std::vector<double>{1.0, -2.0, 0.25}, true);
    Eigen::ArrayXd before = w.values();
    w.ensure_grad();
    AdamState st(AdamConfig{.lr = 0.1});
    std::vector<Tensor> params{w};
    adam_step(params, st);
    CHECK((w.values() == before).all());
    CHECK(st.step_count() == 1);
}

TEST_CASE("adam: first step moves by about -lr * sign(g)") {
    Tensor w = Tensor::scalar(5.0, true);
    w.ensure_grad();
    w.grad()(0) = 0.3;
    AdamState st(AdamConfig{.lr = 0.01});
    std::vector<Tensor> params{w};
    adam_step(params, st);
    CHECK(w.item() == doctest::Approx(5.0 - 0.01).epsilon(1e-6));
    CHECK_FALSE(w.has_grad());  // grads cleared by the step
}

TEST_CASE("adam: 100 steps on (w-3)^2 converge") {
    Tensor w = Tensor::scalar(0.0, true);
    AdamState st(AdamConfig{.lr = 0.1});
    std::vector<Tensor> params{w};
    for (int i = 0; i < 100; ++i) {
        Tape tape;
        Tensor d = add(w, Tensor::scalar(-3.0));
        Tensor loss = mul(d, d);
        backward(loss, tape);
        adam_step(params, st);
    }
    CHECK(std::abs(w.item() - 3.0) < 0.1);
}

TEST_CASE("adam: missing gradient is an error") {
    Tensor w = Tensor::scalar(1.0, true);
    AdamState st;
    std::vector<Tensor> params{w};
    CHECK_THROWS_WITH_AS(adam_step(params, st), doctest::Contains("uninitialized"),
                         std::runtime_error);
}

TEST_CASE("grad_check: exact on a quadratic") {
    std::mt19937_64 rng(31);
    Tensor x = random_tensor({4}, rng, true);
    std::vector<Tensor> params{x};
    auto f = [&] { return sum(mul(x, x)); };
    CHECK(grad_check(f, params, 1e-5) < 1e-8);
}

TEST_CASE("grad_check: doubled gradient rule reads as 1/3") {
    std::mt19937_64 rng(37);
    Tensor x = random_tensor({4}, rng, true, /*keep_off_zero=*/true);
    std::vector<Tensor> params{x};
    auto f = [&] {
        Tensor y = scale_grad(x, 2.0);
        return sum(mul(y, y));
    };
    // d/dy = 2y, doubled on the way back: analytic 4x vs true 2x -> |2x|/|6x|.
    CHECK(grad_check(f, params, 1e-5) == doctest::Approx(1.0 / 3).epsilon(1e-5));
}

TEST_CASE("grad_check: non-finite objective raises") {
    Tensor x = Tensor::scalar(2.0, true);
    std::vector<Tensor> params{x};
    auto f = [&] {
        Tensor s = scale(x, 1e200);
        return sum(mul(s, s));
    };
    CHECK_THROWS_WITH_AS(grad_check(f, params, 1e-5), doctest::Contains("non-finite"),
                         std::runtime_error);
}

TEST_CASE("every op passes finite-difference checks over 20 seeds") {
    for (unsigned seed = 1; seed <= 20; ++seed) {
        std::mt19937_64 rng(seed);
        double worst = 0.0;

        {
            Tensor a = random_tensor({3, 4}, rng);
            Tensor b = random_tensor({4, 2}, rng);
            Tensor r = random_tensor({3, 2}, rng, false);
            std::vector<Tensor> ps{a, b};
            worst = std::max(worst, fd_check_op([&] { return project(matmul(a, b), r); }, ps));
        }
        {
            Tensor a = random_tensor({3, 4}, rng);
            Tensor r = random_tensor({4, 3}, rng, false);
            std::vector<Tensor> ps{a};
            worst = std::max(worst, fd_check_op([&] { return project(transpose(a), r); }, ps));
        }
        {
            Tensor a = random_tensor({2, 5}, rng);
            Tensor b = random_tensor({2, 5}, rng);
            Tensor r = random_tensor({2, 5}, rng, false);
            std::vector<Tensor> ps{a, b};
            worst = std::max(worst, fd_check_op([&] { return project(add(a, b), r); }, ps));
            worst = std::max(worst, fd_check_op([&] { return project(mul(a, b), r); }, ps));
            worst = std::max(worst, fd_check_op([&] { return project(scale(a, -1.7), r); }, ps));
        }
        {
            Tensor x = random_tensor({3, 4}, rng);
            Tensor v = random_tensor({4}, rng);
            Tensor r = random_tensor({3, 4}, rng, false);
            std::vector<Tensor> ps{x, v};
            worst = std::max(worst, fd_check_op([&] { return project(add_rowvec(x, v), r); }, ps));
        }
        {
            Tensor x = random_tensor({4, 4}, rng, true, /*keep_off_zero=*/true);
            Tensor r = random_tensor({4, 4}, rng, false);
            std::vector<Tensor> ps{x};
            worst = std::max(worst, fd_check_op([&] { return project(relu(x), r); }, ps));
        }
        {
            Tensor x = random_tensor({3, 5}, rng);
            Tensor r = random_tensor({3, 5}, rng, false);
            std::vector<Tensor> ps{x};
            worst = std::max(worst, fd_check_op([&] { return project(softmax(x, 1), r); }, ps));
            worst = std::max(worst, fd_check_op([&] { return project(softmax(x, 0), r); }, ps));
        }
        {
            Tensor x = random_tensor({6}, rng);
            Tensor r = random_tensor({6}, rng, false);
            std::vector<Tensor> ps{x};
            worst = std::max(worst, fd_check_op([&] { return project(softmax(x, 0), r); }, ps));
        }
        {
            Tensor x = random_tensor({3, 6}, rng);
            Tensor g = random_tensor({6}, rng);
            Tensor b = random_tensor({6}, rng);
            Tensor r = random_tensor({3, 6}, rng, false);
            std::vector<Tensor> ps{x, g, b};
            worst = std::max(worst,
                             fd_check_op([&] { return project(layer_norm(x, g, b, 1e-5), r); }, ps));
        }
        {
            Tensor s = random_tensor({5}, rng);
            s.values() *= 2.5;
            std::vector<Tensor> ps{s};
            worst = std::max(worst, fd_check_op([&] { return cross_entropy(s, 3); }, ps));
        }
        {
            Tensor a = random_tensor({7}, rng);
            Tensor b = random_tensor({7}, rng);
            std::vector<Tensor> ps{a, b};
            worst = std::max(worst, fd_check_op([&] { return dot(a, b); }, ps));
        }
        {
            Tensor x = random_tensor({2, 6}, rng);
            Tensor r = random_tensor({3, 4}, rng, false);
            std::vector<Tensor> ps{x};
            worst = std::max(worst,
                             fd_check_op([&] { return project(reshape(x, {3, 4}), r); }, ps));
        }
        {
            Tensor x = random_tensor({5, 3}, rng);
            Tensor r2 = random_tensor({2, 3}, rng, false);
            Tensor r1 = random_tensor({3}, rng, false);
            Tensor rc = random_tensor({5, 2}, rng, false);
            std::vector<Tensor> ps{x};
            worst = std::max(worst, fd_check_op([&] { return project(rows(x, 1, 2), r2); }, ps));
            worst = std::max(worst, fd_check_op([&] { return project(row(x, 4), r1); }, ps));
            worst = std::max(worst, fd_check_op([&] { return project(cols(x, 1, 2), rc); }, ps));
        }
        {
            Tensor a = random_tensor({2, 3}, rng);
            Tensor b = random_tensor({4, 3}, rng);
            Tensor r = random_tensor({6, 3}, rng, false);
            std::vector<Tensor> ps{a, b};
            std::vector<Tensor> parts{a, b};
            worst = std::max(worst, fd_check_op([&] { return project(concat_rows(parts), r); }, ps));
        }
        {
            Tensor a = random_tensor({3, 2}, rng);
            Tensor b = random_tensor({3, 4}, rng);
            Tensor r = random_tensor({3, 6}, rng, false);
            std::vector<Tensor> ps{a, b};
            std::vector<Tensor> parts{a, b};
            worst = std::max(worst, fd_check_op([&] { return project(concat_cols(parts), r); }, ps));
        }
        {
            Tensor a = Tensor::scalar(0.7, true);
            Tensor b = Tensor::scalar(-1.2, true);
            Tensor r = random_tensor({2}, rng, false);
            std::vector<Tensor> ps{a, b};
            std::vector<Tensor> parts{a, b};
            worst = std::max(worst,
                             fd_check_op([&] { return project(stack_scalars(parts), r); }, ps));
        }
        {
            Tensor x = random_tensor({4}, rng);
            std::vector<Tensor> ps{x};
            worst = std::max(worst, fd_check_op([&] { return sum(x); }, ps));
        }

        CHECK_MESSAGE(worst <= 1e-4, "seed ", seed, " worst relative error ", worst);
    }
}

TEST_CASE("distinct tapes run independently on distinct threads") {
    auto work = [](double x0, double* out) {
        Tensor w = Tensor::scalar(x0, true);
        for (int i = 0; i < 200; ++i) {
            Tape tape;
            Tensor loss = mul(w, w);
            backward(loss, tape);
            *out = w.grad()(0);
            w.clear_grad();
        }
    };
    double g1 = 0, g2 = 0;
    std::thread t1(work, 3.0, &g1);
    std::thread t2(work, -4.0, &g2);
    t1.join();
    t2.join();
    CHECK(g1 == doctest::Approx(6.0));
    CHECK(g2 == doctest::Approx(-8.0));
}
