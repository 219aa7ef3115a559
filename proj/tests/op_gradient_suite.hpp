#pragma once

// Per-op finite-difference gradient checks over random small instances.
// Shared between the unit tests and the acceptance suite.
//
// grad_reverse is the one deliberate exception to "autodiff == derivative":
// its backward is the *negated* upstream, so its entry compares against the
// negated finite difference.

#include <functional>
#include <string>
#include <vector>

#include "test_support.hpp"

namespace testsup {

struct OpSuiteEntry {
    std::string name;
    // runs one random instance, returns the check result
    std::function<GradCheckResult(glmsda::Rng&)> instance;
};

namespace detail {

inline int ext(glmsda::Rng& rng) { return 1 + rng.uniform_int(6); }  // extent in [1,6]

}  // namespace detail

inline std::vector<OpSuiteEntry> op_gradient_suite() {
    using glmsda::Rng;
    using glmsda::Tensor;
    using detail::ext;
    namespace g = glmsda;

    std::vector<OpSuiteEntry> ops;

    auto scalar_of = [](const Tensor& t) { return g::sum(t); };

    ops.push_back({"add", [=](Rng& rng) {
        std::vector<int> s{ext(rng), ext(rng)};
        return check_gradients({random_tensor(rng, s), random_tensor(rng, s)},
                               [=](const std::vector<Tensor>& in) { return scalar_of(g::add(in[0], in[1])); });
    }});
    ops.push_back({"sub", [=](Rng& rng) {
        std::vector<int> s{ext(rng), ext(rng)};
        return check_gradients({random_tensor(rng, s), random_tensor(rng, s)},
                               [=](const std::vector<Tensor>& in) { return scalar_of(g::sub(in[0], in[1])); });
    }});
    ops.push_back({"mul", [=](Rng& rng) {
        std::vector<int> s{ext(rng), ext(rng)};
        return check_gradients({random_tensor(rng, s), random_tensor(rng, s)},
                               [=](const std::vector<Tensor>& in) { return scalar_of(g::mul(in[0], in[1])); });
    }});
    ops.push_back({"scale", [=](Rng& rng) {
        std::vector<int> s{ext(rng)};
        double c = rng.uniform(-2.0, 2.0);
        return check_gradients({random_tensor(rng, s)},
                               [=](const std::vector<Tensor>& in) { return scalar_of(g::scale(in[0], c)); });
    }});
    ops.push_back({"add_scalar", [=](Rng& rng) {
        std::vector<int> s{ext(rng)};
        double c = rng.uniform(-2.0, 2.0);
        return check_gradients({random_tensor(rng, s)},
                               [=](const std::vector<Tensor>& in) { return scalar_of(g::add_scalar(in[0], c)); });
    }});
    ops.push_back({"relu", [=](Rng& rng) {
        std::vector<int> s{ext(rng), ext(rng)};
        return check_gradients({random_tensor_off_zero(rng, s)},
                               [=](const std::vector<Tensor>& in) { return scalar_of(g::relu(in[0])); });
    }});
    ops.push_back({"sigmoid", [=](Rng& rng) {
        std::vector<int> s{ext(rng), ext(rng)};
        return check_gradients({random_tensor(rng, s, -3.0, 3.0)},
                               [=](const std::vector<Tensor>& in) { return scalar_of(g::sigmoid(in[0])); });
    }});
    ops.push_back({"absolute", [=](Rng& rng) {
        std::vector<int> s{ext(rng)};
        return check_gradients({random_tensor_off_zero(rng, s)},
                               [=](const std::vector<Tensor>& in) { return scalar_of(g::absolute(in[0])); });
    }});
    ops.push_back({"reshape", [=](Rng& rng) {
        int a = ext(rng), b = ext(rng);
        return check_gradients({random_tensor(rng, {a, b})}, [=](const std::vector<Tensor>& in) {
            return scalar_of(g::sigmoid(g::reshape(in[0], {b, a})));
        });
    }});
    ops.push_back({"flatten", [=](Rng& rng) {
        int a = ext(rng), b = ext(rng);
        return check_gradients({random_tensor(rng, {a, b})}, [=](const std::vector<Tensor>& in) {
            return scalar_of(g::sigmoid(g::flatten(in[0])));
        });
    }});
    ops.push_back({"concat", [=](Rng& rng) {
        int rows_a = ext(rng), rows_b = ext(rng), cols = ext(rng);
        int axis = 0;
        return check_gradients(
            {random_tensor(rng, {rows_a, cols}), random_tensor(rng, {rows_b, cols})},
            [=](const std::vector<Tensor>& in) {
                return scalar_of(g::sigmoid(g::concat({in[0], in[1]}, axis)));
            });
    }});
    ops.push_back({"broadcast_scalar", [=](Rng& rng) {
        int n = 1 + rng.uniform_int(6);
        return check_gradients({random_tensor(rng, {1})}, [=](const std::vector<Tensor>& in) {
            return scalar_of(g::sigmoid(g::broadcast_scalar(in[0], n)));
        });
    }});
    ops.push_back({"matmul", [=](Rng& rng) {
        int m = ext(rng), k = ext(rng), n = ext(rng);
        return check_gradients({random_tensor(rng, {m, k}), random_tensor(rng, {k, n})},
                               [=](const std::vector<Tensor>& in) { return scalar_of(g::matmul(in[0], in[1])); });
    }});
    ops.push_back({"add_rowvec", [=](Rng& rng) {
        int n = ext(rng), m = ext(rng);
        return check_gradients({random_tensor(rng, {n, m}), random_tensor(rng, {m})},
                               [=](const std::vector<Tensor>& in) {
                                   return scalar_of(g::sigmoid(g::add_rowvec(in[0], in[1])));
                               });
    }});
    ops.push_back({"conv2d", [=](Rng& rng) {
        int ci = 1 + rng.uniform_int(3), co = 1 + rng.uniform_int(3);
        int h = 3 + rng.uniform_int(3), w = 3 + rng.uniform_int(3);
        int k = 1 + 2 * rng.uniform_int(2);  // 1 or 3
        int stride = 1 + rng.uniform_int(2), pad = rng.uniform_int(2);
        bool batched = rng.bernoulli(0.5);
        std::vector<int> xs = batched ? std::vector<int>{1, ci, h, w} : std::vector<int>{ci, h, w};
        return check_gradients(
            {random_tensor(rng, xs), random_tensor(rng, {co, ci, k, k}), random_tensor(rng, {co})},
            [=](const std::vector<Tensor>& in) {
                return scalar_of(g::conv2d(in[0], in[1], in[2], stride, pad));
            });
    }});
    ops.push_back({"adaptive_avg_pool", [=](Rng& rng) {
        int c = 1 + rng.uniform_int(3), h = 2 + rng.uniform_int(4), w = 2 + rng.uniform_int(4);
        int oh = 1 + rng.uniform_int(h), ow = 1 + rng.uniform_int(w);
        return check_gradients({random_tensor(rng, {c, h, w})}, [=](const std::vector<Tensor>& in) {
            return scalar_of(g::sigmoid(g::adaptive_avg_pool(in[0], oh, ow)));
        });
    }});
    ops.push_back({"roi_avg_pool", [=](Rng& rng) {
        int c = 1 + rng.uniform_int(2), h = 4 + rng.uniform_int(3), w = 4 + rng.uniform_int(3);
        double y0 = rng.uniform(0.0, h / 2.0), y1 = y0 + rng.uniform(1.0, h - y0);
        double x0 = rng.uniform(0.0, w / 2.0), x1 = x0 + rng.uniform(1.0, w - x0);
        return check_gradients({random_tensor(rng, {c, h, w})}, [=](const std::vector<Tensor>& in) {
            return scalar_of(g::sigmoid(g::roi_avg_pool(in[0], y0, x0, y1, x1, 2, 2)));
        });
    }});
    ops.push_back({"sum", [=](Rng& rng) {
        return check_gradients({random_tensor(rng, {ext(rng), ext(rng)})},
                               [=](const std::vector<Tensor>& in) { return g::sum(g::sigmoid(in[0])); });
    }});
    ops.push_back({"mean", [=](Rng& rng) {
        return check_gradients({random_tensor(rng, {ext(rng), ext(rng)})},
                               [=](const std::vector<Tensor>& in) { return g::mean(g::sigmoid(in[0])); });
    }});
    ops.push_back({"l2_norm", [=](Rng& rng) {
        return check_gradients({random_tensor_off_zero(rng, {ext(rng)})},
                               [=](const std::vector<Tensor>& in) { return g::l2_norm(in[0]); });
    }});
    ops.push_back({"softmax", [=](Rng& rng) {
        int n = ext(rng), l = 2 + rng.uniform_int(5);
        return check_gradients({random_tensor(rng, {n, l}, -2.0, 2.0)},
                               [=](const std::vector<Tensor>& in) {
                                   return g::sum(g::mul(g::softmax(in[0]), g::softmax(in[0])));
                               });
    }});
    ops.push_back({"binary_cross_entropy", [=](Rng& rng) {
        std::vector<int> s{ext(rng), ext(rng)};
        Tensor q(s);
        for (auto& x : q.v) x = rng.bernoulli(0.5) ? 1.0 : 0.0;
        return check_gradients({random_tensor(rng, s, 0.05, 0.95)},
                               [=](const std::vector<Tensor>& in) {
                                   return g::binary_cross_entropy(in[0], q);
                               });
    }});
    ops.push_back({"cross_entropy", [=](Rng& rng) {
        int n = ext(rng), l = 2 + rng.uniform_int(5);
        std::vector<int> targets(n);
        for (auto& t : targets) t = rng.uniform_int(l);
        // normalized positive rows, away from the clamp bounds
        Tensor p({n, l});
        for (int r = 0; r < n; ++r) {
            double z = 0.0;
            for (int i = 0; i < l; ++i) {
                p.v[static_cast<size_t>(r) * l + i] = rng.uniform(0.1, 1.0);
                z += p.v[static_cast<size_t>(r) * l + i];
            }
            for (int i = 0; i < l; ++i) p.v[static_cast<size_t>(r) * l + i] /= z;
        }
        return check_gradients({p}, [=](const std::vector<Tensor>& in) {
            return g::cross_entropy(in[0], targets);
        });
    }});
    ops.push_back({"smooth_l1", [=](Rng& rng) {
        std::vector<int> s{ext(rng)};
        Tensor target = random_tensor(rng, s);
        Tensor pred = target;
        for (auto& x : pred.v) x += rng.uniform(-0.8, 0.8);  // keep |d| away from the kink at 1
        return check_gradients({pred}, [=](const std::vector<Tensor>& in) {
            return g::smooth_l1(in[0], target);
        });
    }});
    ops.push_back({"cosine_similarity", [=](Rng& rng) {
        std::vector<int> s{2 + rng.uniform_int(5)};
        return check_gradients({random_tensor_off_zero(rng, s), random_tensor_off_zero(rng, s)},
                               [=](const std::vector<Tensor>& in) {
                                   return g::cosine_similarity(in[0], in[1]);
                               });
    }});
    // grad_reverse: the tape gradient is -coeff times the true derivative by
    // definition. FD of sum(grad_reverse(x)) is exactly 1 per element, so the
    // instance checks tape == -coeff against that.
    ops.push_back({"grad_reverse", [=](Rng& rng) {
        std::vector<int> s{ext(rng)};
        double coeff = rng.uniform(0.0, 2.0);
        Tensor x = random_tensor(rng, s);
        glmsda::Tape tape;
        GradCheckResult res;
        {
            glmsda::TapeScope scope(tape);
            x.node = tape.leaf(x.size());
            Tensor y = g::grad_reverse(x, coeff);
            tape.backward(g::sum(y));
        }
        const auto& gr = tape.grad(x.node);
        for (int i = 0; i < x.size(); ++i) {
            // FD of sum(identity) is exactly 1; tape must report -coeff
            double err = std::fabs(gr[i] - (-coeff * 1.0));
            res.max_abs_err = std::max(res.max_abs_err, err);
            res.max_rel_err = std::max(res.max_rel_err, err / std::max(coeff, 1e-6));
            ++res.checked;
        }
        return res;
    }});

    return ops;
}

}  // namespace testsup
