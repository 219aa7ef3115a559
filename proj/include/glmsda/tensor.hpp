#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace glmsda {

// Thrown on shape mismatches and misuse of the tape (programming errors,
// not data errors).
class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major double tensor. `node` links the value to a node on the
// currently active Tape; -1 means detached (a constant as far as autodiff
// is concerned).
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;
    int node = -1;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
        v.assign(count(shape), fill);
    }
    Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<size_t>(count(shape)) != v.size())
            throw ContractViolation("tensor data size " + std::to_string(v.size()) +
                                    " does not match shape " + shape_str(shape));
    }

    static int count(const std::vector<int>& s) {
        int n = 1;
        for (int d : s) {
            if (d <= 0) throw ContractViolation("nonpositive extent in shape " + shape_str(s));
            n *= d;
        }
        return n;
    }

    static Tensor scalar(double x) { return Tensor({1}, {x}); }

    int size() const { return static_cast<int>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    bool is_scalar() const { return v.size() == 1; }
    double item() const {
        if (!is_scalar()) throw ContractViolation("item() on non-scalar tensor " + shape_str(shape));
        return v[0];
    }
    bool attached() const { return node >= 0; }

    double& at(int i) { return v[static_cast<size_t>(i)]; }
    double at(int i) const { return v[static_cast<size_t>(i)]; }
};

// Wengert list. Nodes are appended in execution order, so walking the list
// backwards is already a topological order. One tape per training step;
// a second backward() on the same tape is rejected.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const std::vector<double>&)>;

    Tape() : id_(next_id()++) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t id() const { return id_; }

    int leaf(int size) { return push(size, nullptr); }

    int record(int size, BackwardFn fn) { return push(size, std::move(fn)); }

    void accumulate(int node, const std::vector<double>& g) {
        auto& buf = grads_[static_cast<size_t>(node)];
        if (buf.empty()) buf.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].size), 0.0);
        for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
    }

    // Seeds d(loss)/d(loss) = 1 and sweeps the list in reverse. Gradients of
    // nodes never reached stay empty (treated as zero by callers).
    void backward(const Tensor& loss) {
        if (!loss.is_scalar())
            throw ContractViolation("backward requires a scalar loss, got shape " + shape_str(loss.shape));
        if (!loss.attached()) throw ContractViolation("backward requires a loss attached to the tape");
        if (ran_) throw ContractViolation("backward already executed on this tape; build a fresh tape");
        ran_ = true;
        grads_[static_cast<size_t>(loss.node)] = {1.0};
        for (int i = loss.node; i >= 0; --i) {
            auto& g = grads_[static_cast<size_t>(i)];
            if (g.empty()) continue;
            if (nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back(*this, g);
        }
    }

    bool has_grad(int node) const { return node >= 0 && !grads_[static_cast<size_t>(node)].empty(); }

    // Gradient of `node`; empty vector if the node was not reached.
    const std::vector<double>& grad(int node) const { return grads_[static_cast<size_t>(node)]; }

    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        BackwardFn back;
        int size;
    };

    static std::uint64_t& next_id() {
        static std::uint64_t n = 1;
        return n;
    }

    int push(int size, BackwardFn fn) {
        nodes_.push_back({std::move(fn), size});
        grads_.emplace_back();
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::uint64_t id_;
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool ran_ = false;
};

namespace detail {
inline Tape*& active_tape() {
    thread_local Tape* t = nullptr;
    return t;
}
}  // namespace detail

// RAII activation of a tape for the current thread. Ops record themselves on
// the active tape whenever at least one operand is attached.
class TapeScope {
public:
    explicit TapeScope(Tape& t) : prev_(detail::active_tape()) { detail::active_tape() = &t; }
    ~TapeScope() { detail::active_tape() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

inline Tape* active_tape() { return detail::active_tape(); }

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw ContractViolation(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
}

// Registers `out` on the active tape when any input is attached.
inline void maybe_record(Tensor& out, std::initializer_list<const Tensor*> inputs,
                         const std::function<Tape::BackwardFn()>& make_back) {
    Tape* t = active_tape();
    if (!t) return;
    bool any = false;
    for (const Tensor* in : inputs) any = any || in->attached();
    if (!any) return;
    out.node = t->record(out.size(), make_back());
}

constexpr double kProbEps = 1e-7;  // BCE/CE clamp

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out(a.shape);
    for (int i = 0; i < a.size(); ++i) out.v[i] = a.v[i] + b.v[i];
    detail::maybe_record(out, {&a, &b}, [&] {
        int an = a.node, bn = b.node;
        return [an, bn](Tape& t, const std::vector<double>& g) {
            if (an >= 0) t.accumulate(an, g);
            if (bn >= 0) t.accumulate(bn, g);
        };
    });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out(a.shape);
    for (int i = 0; i < a.size(); ++i) out.v[i] = a.v[i] - b.v[i];
    detail::maybe_record(out, {&a, &b}, [&] {
        int an = a.node, bn = b.node;
        return [an, bn](Tape& t, const std::vector<double>& g) {
            if (an >= 0) t.accumulate(an, g);
            if (bn >= 0) {
                std::vector<double> ng(g.size());
                for (size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
                t.accumulate(bn, ng);
            }
        };
    });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out(a.shape);
    for (int i = 0; i < a.size(); ++i) out.v[i] = a.v[i] * b.v[i];
    detail::maybe_record(out, {&a, &b}, [&] {
        int an = a.node, bn = b.node;
        std::vector<double> av = a.v, bv = b.v;
        return [an, bn, av, bv](Tape& t, const std::vector<double>& g) {
            if (an >= 0) {
                std::vector<double> ga(g.size());
                for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv[i];
                t.accumulate(an, ga);
            }
            if (bn >= 0) {
                std::vector<double> gb(g.size());
                for (size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av[i];
                t.accumulate(bn, gb);
            }
        };
    });
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape);
    for (int i = 0; i < a.size(); ++i) out.v[i] = a.v[i] * c;
    detail::maybe_record(out, {&a}, [&] {
        int an = a.node;
        return [an, c](Tape& t, const std::vector<double>& g) {
            std::vector<double> ga(g.size());
            for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * c;
            t.accumulate(an, ga);
        };
    });
    return out;
}

inline Tensor add_scalar(const Tensor& a, double c) {
    Tensor out(a.shape);
    for (int i = 0; i < a.size(); ++i) out.v[i] = a.v[i] + c;
    detail::maybe_record(out, {&a}, [&] {
        int an = a.node;
        return [an](Tape& t, const std::vector<double>& g) { t.accumulate(an, g); };
    });
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out(a.shape);
    for (int i = 0; i < a.size(); ++i) out.v[i] = a.v[i] > 0.0 ? a.v[i] : 0.0;
    detail::maybe_record(out, {&a}, [&] {
        int an = a.node;
        std::vector<double> av = a.v;
        return [an, av](Tape& t, const std::vector<double>& g) {
            std::vector<double> ga(g.size());
            for (size_t i = 0; i < g.size(); ++i) ga[i] = av[i] > 0.0 ? g[i] : 0.0;
            t.accumulate(an, ga);
        };
    });
    return out;
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor out(a.shape);
    for (int i = 0; i < a.size(); ++i) out.v[i] = 1.0 / (1.0 + std::exp(-a.v[i]));
    detail::maybe_record(out, {&a}, [&] {
        int an = a.node;
        std::vector<double> y = out.v;
        return [an, y](Tape& t, const std::vector<double>& g) {
            std::vector<double> ga(g.size());
            for (size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * y[i] * (1.0 - y[i]);
            t.accumulate(an, ga);
        };
    });
    return out;
}

inline Tensor absolute(const Tensor& a) {
    Tensor out(a.shape);
    for (int i = 0; i < a.size(); ++i) out.v[i] = std::fabs(a.v[i]);
    detail::maybe_record(out, {&a}, [&] {
        int an = a.node;
        std::vector<double> av = a.v;
        return [an, av](Tape& t, const std::vector<double>& g) {
            std::vector<double> ga(g.size());
            for (size_t i = 0; i < g.size(); ++i)
                ga[i] = av[i] > 0.0 ? g[i] : (av[i] < 0.0 ? -g[i] : 0.0);
            t.accumulate(an, ga);
        };
    });
    return out;
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (Tensor::count(shape) != a.size())
        throw ContractViolation("reshape: cannot view " + shape_str(a.shape) + " as " + shape_str(shape));
    Tensor out(std::move(shape), a.v);
    detail::maybe_record(out, {&a}, [&] {
        int an = a.node;
        return [an](Tape& t, const std::vector<double>& g) { t.accumulate(an, g); };
    });
    return out;
}

inline Tensor flatten(const Tensor& a) { return reshape(a, {a.size()}); }

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ContractViolation("concat: empty input list");
    int rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw ContractViolation("concat: axis out of range");
    std::vector<int> out_shape = parts[0].shape;
    for (size_t p = 1; p < parts.size(); ++p) {
        if (parts[p].rank() != rank) throw ContractViolation("concat: rank mismatch");
        for (int d = 0; d < rank; ++d) {
            if (d == axis) continue;
            if (parts[p].shape[d] != out_shape[d])
                throw ContractViolation("concat: shape mismatch " + shape_str(parts[p].shape) +
                                        " vs " + shape_str(out_shape));
        }
        out_shape[axis] += parts[p].shape[axis];
    }
    // outer = product of dims before axis, inner = product after
    int outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[d];
    for (int d = axis + 1; d < rank; ++d) inner *= out_shape[d];

    Tensor out(out_shape);
    int axis_total = out_shape[axis];
    int offset = 0;
    std::vector<int> part_axis(parts.size()), part_off(parts.size());
    for (size_t p = 0; p < parts.size(); ++p) {
        part_axis[p] = parts[p].shape[axis];
        part_off[p] = offset;
        for (int o = 0; o < outer; ++o)
            for (int a2 = 0; a2 < part_axis[p]; ++a2)
                std::copy_n(parts[p].v.begin() + (static_cast<size_t>(o) * part_axis[p] + a2) * inner, inner,
                            out.v.begin() + (static_cast<size_t>(o) * axis_total + offset + a2) * inner);
        offset += part_axis[p];
    }

    Tape* t = active_tape();
    bool any = false;
    for (const Tensor& p : parts) any = any || p.attached();
    if (t && any) {
        std::vector<int> nodes(parts.size());
        for (size_t p = 0; p < parts.size(); ++p) nodes[p] = parts[p].node;
        out.node = t->record(out.size(), [nodes, part_axis, part_off, outer, inner, axis_total](
                                             Tape& tp, const std::vector<double>& g) {
            for (size_t p = 0; p < nodes.size(); ++p) {
                if (nodes[p] < 0) continue;
                std::vector<double> gp(static_cast<size_t>(outer) * part_axis[p] * inner);
                for (int o = 0; o < outer; ++o)
                    for (int a2 = 0; a2 < part_axis[p]; ++a2)
                        std::copy_n(g.begin() + (static_cast<size_t>(o) * axis_total + part_off[p] + a2) * inner,
                                    inner,
                                    gp.begin() + (static_cast<size_t>(o) * part_axis[p] + a2) * inner);
                tp.accumulate(nodes[p], gp);
            }
        });
    }
    return out;
}

// scalar -> length-n vector; gradient sums back into the scalar
inline Tensor broadcast_scalar(const Tensor& s, int n) {
    if (!s.is_scalar()) throw ContractViolation("broadcast_scalar: input must be scalar");
    Tensor out({n}, s.v[0]);
    detail::maybe_record(out, {&s}, [&] {
        int sn = s.node;
        return [sn](Tape& t, const std::vector<double>& g) {
            double acc = 0.0;
            for (double x : g) acc += x;
            t.accumulate(sn, {acc});
        };
    });
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
        throw ContractViolation("matmul: incompatible shapes " + shape_str(a.shape) + " x " +
                                shape_str(b.shape));
    int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            double av = a.v[static_cast<size_t>(i) * k + p];
            const double* brow = &b.v[static_cast<size_t>(p) * n];
            double* orow = &out.v[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    detail::maybe_record(out, {&a, &b}, [&] {
        int an = a.node, bn = b.node;
        std::vector<double> av = a.v, bv = b.v;
        return [an, bn, av, bv, m, k, n](Tape& t, const std::vector<double>& g) {
            if (an >= 0) {
                std::vector<double> ga(static_cast<size_t>(m) * k, 0.0);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        double gv = g[static_cast<size_t>(i) * n + j];
                        for (int p = 0; p < k; ++p)
                            ga[static_cast<size_t>(i) * k + p] += gv * bv[static_cast<size_t>(p) * n + j];
                    }
                t.accumulate(an, ga);
            }
            if (bn >= 0) {
                std::vector<double> gb(static_cast<size_t>(k) * n, 0.0);
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double av2 = av[static_cast<size_t>(i) * k + p];
                        const double* grow = &g[static_cast<size_t>(i) * n];
                        double* brow = &gb[static_cast<size_t>(p) * n];
                        for (int j = 0; j < n; ++j) brow[j] += av2 * grow[j];
                    }
                t.accumulate(bn, gb);
            }
        };
    });
    return out;
}

// a: [n,m], b: [m] broadcast over rows
inline Tensor add_rowvec(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 1 || a.shape[1] != b.shape[0])
        throw ContractViolation("add_rowvec: incompatible shapes " + shape_str(a.shape) + " + " +
                                shape_str(b.shape));
    int n = a.shape[0], m = a.shape[1];
    Tensor out(a.shape);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j)
            out.v[static_cast<size_t>(i) * m + j] = a.v[static_cast<size_t>(i) * m + j] + b.v[j];
    detail::maybe_record(out, {&a, &b}, [&] {
        int an = a.node, bn = b.node;
        return [an, bn, n, m](Tape& t, const std::vector<double>& g) {
            if (an >= 0) t.accumulate(an, g);
            if (bn >= 0) {
                std::vector<double> gb(static_cast<size_t>(m), 0.0);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < m; ++j) gb[j] += g[static_cast<size_t>(i) * m + j];
                t.accumulate(bn, gb);
            }
        };
    });
    return out;
}

// ---------------------------------------------------------------------------
// conv / pooling
// ---------------------------------------------------------------------------

namespace detail {
struct ConvDims {
    int n, ci, h, w, co, kh, kw, oh, ow;
    bool batched;
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int padding) {
    if (w.rank() != 4) throw ContractViolation("conv2d: weight must be [Co,Ci,kh,kw], got " + shape_str(w.shape));
    ConvDims d{};
    d.batched = x.rank() == 4;
    if (x.rank() == 3) {
        d.n = 1;
        d.ci = x.shape[0];
        d.h = x.shape[1];
        d.w = x.shape[2];
    } else if (x.rank() == 4) {
        d.n = x.shape[0];
        d.ci = x.shape[1];
        d.h = x.shape[2];
        d.w = x.shape[3];
    } else {
        throw ContractViolation("conv2d: input must be [C,H,W] or [N,C,H,W], got " + shape_str(x.shape));
    }
    d.co = w.shape[0];
    d.kh = w.shape[2];
    d.kw = w.shape[3];
    if (w.shape[1] != d.ci)
        throw ContractViolation("conv2d: input channels " + std::to_string(d.ci) +
                                " do not match weight " + shape_str(w.shape));
    if (stride < 1) throw ContractViolation("conv2d: stride must be >= 1");
    d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
    d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
    if (d.oh < 1 || d.ow < 1)
        throw ContractViolation("conv2d: output extent < 1 for input " + shape_str(x.shape));
    return d;
}
}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding) {
    detail::ConvDims d = detail::conv_dims(x, w, stride, padding);
    if (b.rank() != 1 || b.shape[0] != d.co)
        throw ContractViolation("conv2d: bias shape " + shape_str(b.shape) + " must be [" +
                                std::to_string(d.co) + "]");
    std::vector<int> out_shape = d.batched ? std::vector<int>{d.n, d.co, d.oh, d.ow}
                                           : std::vector<int>{d.co, d.oh, d.ow};
    Tensor out(out_shape);
    const size_t in_plane = static_cast<size_t>(d.h) * d.w;
    const size_t out_plane = static_cast<size_t>(d.oh) * d.ow;
    for (int n = 0; n < d.n; ++n) {
        const double* xb = &x.v[static_cast<size_t>(n) * d.ci * in_plane];
        double* ob = &out.v[static_cast<size_t>(n) * d.co * out_plane];
        for (int co = 0; co < d.co; ++co) {
            double* oc = ob + static_cast<size_t>(co) * out_plane;
            for (size_t i = 0; i < out_plane; ++i) oc[i] = b.v[co];
            for (int ci = 0; ci < d.ci; ++ci) {
                const double* xc = xb + static_cast<size_t>(ci) * in_plane;
                const double* wk = &w.v[(static_cast<size_t>(co) * d.ci + ci) * d.kh * d.kw];
                for (int kh = 0; kh < d.kh; ++kh)
                    for (int kw = 0; kw < d.kw; ++kw) {
                        double wv = wk[kh * d.kw + kw];
                        if (wv == 0.0) continue;
                        for (int oh = 0; oh < d.oh; ++oh) {
                            int ih = oh * stride + kh - padding;
                            if (ih < 0 || ih >= d.h) continue;
                            const double* xrow = xc + static_cast<size_t>(ih) * d.w;
                            double* orow = oc + static_cast<size_t>(oh) * d.ow;
                            for (int ow = 0; ow < d.ow; ++ow) {
                                int iw = ow * stride + kw - padding;
                                if (iw < 0 || iw >= d.w) continue;
                                orow[ow] += wv * xrow[iw];
                            }
                        }
                    }
            }
        }
    }
    detail::maybe_record(out, {&x, &w, &b}, [&] {
        int xn = x.node, wn = w.node, bn = b.node;
        std::vector<double> xv = x.v, wv = w.v;
        int s = stride, p = padding;
        return [=](Tape& t, const std::vector<double>& g) {
            const size_t in_plane2 = static_cast<size_t>(d.h) * d.w;
            const size_t out_plane2 = static_cast<size_t>(d.oh) * d.ow;
            std::vector<double> gx, gw, gb;
            if (xn >= 0) gx.assign(xv.size(), 0.0);
            if (wn >= 0) gw.assign(wv.size(), 0.0);
            if (bn >= 0) gb.assign(static_cast<size_t>(d.co), 0.0);
            for (int n = 0; n < d.n; ++n) {
                const double* gbase = &g[static_cast<size_t>(n) * d.co * out_plane2];
                const double* xb = &xv[static_cast<size_t>(n) * d.ci * in_plane2];
                for (int co = 0; co < d.co; ++co) {
                    const double* gc = gbase + static_cast<size_t>(co) * out_plane2;
                    if (bn >= 0)
                        for (size_t i = 0; i < out_plane2; ++i) gb[co] += gc[i];
                    for (int ci = 0; ci < d.ci; ++ci) {
                        const double* xc = xb + static_cast<size_t>(ci) * in_plane2;
                        double* gxc = xn >= 0 ? &gx[static_cast<size_t>(n) * d.ci * in_plane2 +
                                                    static_cast<size_t>(ci) * in_plane2]
                                              : nullptr;
                        const size_t wbase = (static_cast<size_t>(co) * d.ci + ci) * d.kh * d.kw;
                        for (int kh = 0; kh < d.kh; ++kh)
                            for (int kw = 0; kw < d.kw; ++kw) {
                                double wval = wv[wbase + kh * d.kw + kw];
                                double dw_acc = 0.0;
                                for (int oh = 0; oh < d.oh; ++oh) {
                                    int ih = oh * s + kh - p;
                                    if (ih < 0 || ih >= d.h) continue;
                                    const double* grow = gc + static_cast<size_t>(oh) * d.ow;
                                    const double* xrow = xc + static_cast<size_t>(ih) * d.w;
                                    double* gxrow = gxc ? gxc + static_cast<size_t>(ih) * d.w : nullptr;
                                    for (int ow = 0; ow < d.ow; ++ow) {
                                        int iw = ow * s + kw - p;
                                        if (iw < 0 || iw >= d.w) continue;
                                        dw_acc += grow[ow] * xrow[iw];
                                        if (gxrow) gxrow[iw] += grow[ow] * wval;
                                    }
                                }
                                if (wn >= 0) gw[wbase + kh * d.kw + kw] += dw_acc;
                            }
                    }
                }
            }
            if (xn >= 0) t.accumulate(xn, gx);
            if (wn >= 0) t.accumulate(wn, gw);
            if (bn >= 0) t.accumulate(bn, gb);
        };
    });
    return out;
}

// torch-style adaptive average pooling on [C,H,W]
inline Tensor adaptive_avg_pool(const Tensor& x, int out_h, int out_w) {
    if (x.rank() != 3) throw ContractViolation("adaptive_avg_pool: input must be [C,H,W], got " + shape_str(x.shape));
    if (out_h < 1 || out_w < 1) throw ContractViolation("adaptive_avg_pool: output extents must be >= 1");
    int c = x.shape[0], h = x.shape[1], w = x.shape[2];
    Tensor out({c, out_h, out_w});
    auto bin = [](int i, int n, int out_n) {
        int lo = (i * n) / out_n;
        int hi = ((i + 1) * n + out_n - 1) / out_n;
        return std::pair<int, int>(lo, hi);
    };
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < out_h; ++i) {
            auto [r0, r1] = bin(i, h, out_h);
            for (int j = 0; j < out_w; ++j) {
                auto [c0, c1] = bin(j, w, out_w);
                double acc = 0.0;
                for (int r = r0; r < r1; ++r)
                    for (int cc = c0; cc < c1; ++cc) acc += x.v[(static_cast<size_t>(ch) * h + r) * w + cc];
                out.v[(static_cast<size_t>(ch) * out_h + i) * out_w + j] =
                    acc / (static_cast<double>(r1 - r0) * (c1 - c0));
            }
        }
    detail::maybe_record(out, {&x}, [&] {
        int xn = x.node;
        return [xn, c, h, w, out_h, out_w, bin](Tape& t, const std::vector<double>& g) {
            std::vector<double> gx(static_cast<size_t>(c) * h * w, 0.0);
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < out_h; ++i) {
                    auto [r0, r1] = bin(i, h, out_h);
                    for (int j = 0; j < out_w; ++j) {
                        auto [c0, c1] = bin(j, w, out_w);
                        double gv = g[(static_cast<size_t>(ch) * out_h + i) * out_w + j] /
                                    (static_cast<double>(r1 - r0) * (c1 - c0));
                        for (int r = r0; r < r1; ++r)
                            for (int cc = c0; cc < c1; ++cc)
                                gx[(static_cast<size_t>(ch) * h + r) * w + cc] += gv;
                    }
                }
            t.accumulate(xn, gx);
        };
    });
    return out;
}

// Average pooling of a rectangular region of a [C,H,W] map into an
// out_h x out_w grid. Box coordinates are in feature cells, [y0,y1) x [x0,x1);
// each bin covers at least one cell.
inline Tensor roi_avg_pool(const Tensor& x, double y0, double x0, double y1, double x1,
                           int out_h, int out_w) {
    if (x.rank() != 3) throw ContractViolation("roi_avg_pool: input must be [C,H,W], got " + shape_str(x.shape));
    int c = x.shape[0], h = x.shape[1], w = x.shape[2];
    y0 = std::clamp(y0, 0.0, static_cast<double>(h));
    y1 = std::clamp(y1, 0.0, static_cast<double>(h));
    x0 = std::clamp(x0, 0.0, static_cast<double>(w));
    x1 = std::clamp(x1, 0.0, static_cast<double>(w));
    double bh = std::max(y1 - y0, 1e-9) / out_h;
    double bw = std::max(x1 - x0, 1e-9) / out_w;
    // integer cell ranges per bin, clamped to the grid, never empty
    auto rows = std::vector<std::pair<int, int>>(out_h);
    auto cols = std::vector<std::pair<int, int>>(out_w);
    auto make_range = [](double lo, double hi, int n) {
        int a = std::clamp(static_cast<int>(std::floor(lo)), 0, n - 1);
        int b2 = std::clamp(static_cast<int>(std::ceil(hi)), a + 1, n);
        return std::pair<int, int>(a, b2);
    };
    for (int i = 0; i < out_h; ++i) rows[i] = make_range(y0 + i * bh, y0 + (i + 1) * bh, h);
    for (int j = 0; j < out_w; ++j) cols[j] = make_range(x0 + j * bw, x0 + (j + 1) * bw, w);

    Tensor out({c, out_h, out_w});
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < out_h; ++i)
            for (int j = 0; j < out_w; ++j) {
                double acc = 0.0;
                for (int r = rows[i].first; r < rows[i].second; ++r)
                    for (int cc = cols[j].first; cc < cols[j].second; ++cc)
                        acc += x.v[(static_cast<size_t>(ch) * h + r) * w + cc];
                int cnt = (rows[i].second - rows[i].first) * (cols[j].second - cols[j].first);
                out.v[(static_cast<size_t>(ch) * out_h + i) * out_w + j] = acc / cnt;
            }
    detail::maybe_record(out, {&x}, [&] {
        int xn = x.node;
        return [xn, c, h, w, out_h, out_w, rows, cols](Tape& t, const std::vector<double>& g) {
            std::vector<double> gx(static_cast<size_t>(c) * h * w, 0.0);
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < out_h; ++i)
                    for (int j = 0; j < out_w; ++j) {
                        int cnt = (rows[i].second - rows[i].first) * (cols[j].second - cols[j].first);
                        double gv = g[(static_cast<size_t>(ch) * out_h + i) * out_w + j] / cnt;
                        for (int r = rows[i].first; r < rows[i].second; ++r)
                            for (int cc = cols[j].first; cc < cols[j].second; ++cc)
                                gx[(static_cast<size_t>(ch) * h + r) * w + cc] += gv;
                    }
            t.accumulate(xn, gx);
        };
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double x : a.v) acc += x;
    Tensor out = Tensor::scalar(acc);
    detail::maybe_record(out, {&a}, [&] {
        int an = a.node;
        int n = a.size();
        return [an, n](Tape& t, const std::vector<double>& g) {
            t.accumulate(an, std::vector<double>(static_cast<size_t>(n), g[0]));
        };
    });
    return out;
}

inline Tensor mean(const Tensor& a) {
    double acc = 0.0;
    for (double x : a.v) acc += x;
    int n = a.size();
    Tensor out = Tensor::scalar(acc / n);
    detail::maybe_record(out, {&a}, [&] {
        int an = a.node;
        return [an, n](Tape& t, const std::vector<double>& g) {
            t.accumulate(an, std::vector<double>(static_cast<size_t>(n), g[0] / n));
        };
    });
    return out;
}

inline Tensor l2_norm(const Tensor& a) {
    double acc = 0.0;
    for (double x : a.v) acc += x * x;
    double norm = std::sqrt(acc);
    Tensor out = Tensor::scalar(norm);
    detail::maybe_record(out, {&a}, [&] {
        int an = a.node;
        std::vector<double> av = a.v;
        return [an, av, norm](Tape& t, const std::vector<double>& g) {
            std::vector<double> ga(av.size(), 0.0);
            if (norm > 0.0)
                for (size_t i = 0; i < av.size(); ++i) ga[i] = g[0] * av[i] / norm;
            t.accumulate(an, ga);
        };
    });
    return out;
}

// softmax over the last axis
inline Tensor softmax(const Tensor& a) {
    if (a.rank() < 1) throw ContractViolation("softmax: rank must be >= 1");
    int l = a.shape.back();
    int rows = a.size() / l;
    Tensor out(a.shape);
    for (int r = 0; r < rows; ++r) {
        const double* in = &a.v[static_cast<size_t>(r) * l];
        double* o = &out.v[static_cast<size_t>(r) * l];
        double mx = in[0];
        for (int i = 1; i < l; ++i) mx = std::max(mx, in[i]);
        double z = 0.0;
        for (int i = 0; i < l; ++i) {
            o[i] = std::exp(in[i] - mx);
            z += o[i];
        }
        for (int i = 0; i < l; ++i) o[i] /= z;
    }
    detail::maybe_record(out, {&a}, [&] {
        int an = a.node;
        std::vector<double> y = out.v;
        return [an, y, rows, l](Tape& t, const std::vector<double>& g) {
            std::vector<double> ga(y.size());
            for (int r = 0; r < rows; ++r) {
                const double* yr = &y[static_cast<size_t>(r) * l];
                const double* gr = &g[static_cast<size_t>(r) * l];
                double dot = 0.0;
                for (int i = 0; i < l; ++i) dot += gr[i] * yr[i];
                for (int i = 0; i < l; ++i) ga[static_cast<size_t>(r) * l + i] = yr[i] * (gr[i] - dot);
            }
            t.accumulate(an, ga);
        };
    });
    return out;
}

// Mean BCE of probabilities p against targets q (same shape). Inputs are
// clamped to [eps, 1-eps] so the loss stays finite on saturated inputs; the
// clamp has zero gradient outside the open interval. Gradient flows into p
// only (targets are labels).
inline Tensor binary_cross_entropy(const Tensor& p, const Tensor& q) {
    detail::require_same_shape(p, q, "binary_cross_entropy");
    const double eps = detail::kProbEps;
    int n = p.size();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double pc = std::clamp(p.v[i], eps, 1.0 - eps);
        acc += -(q.v[i] * std::log(pc) + (1.0 - q.v[i]) * std::log(1.0 - pc));
    }
    Tensor out = Tensor::scalar(acc / n);
    detail::maybe_record(out, {&p}, [&] {
        int pn = p.node;
        std::vector<double> pv = p.v, qv = q.v;
        return [pn, pv, qv, n, eps](Tape& t, const std::vector<double>& g) {
            std::vector<double> gp(pv.size(), 0.0);
            for (int i = 0; i < n; ++i) {
                if (pv[i] <= eps || pv[i] >= 1.0 - eps) continue;  // clamp region
                gp[i] = g[0] * (-qv[i] / pv[i] + (1.0 - qv[i]) / (1.0 - pv[i])) / n;
            }
            t.accumulate(pn, gp);
        };
    });
    return out;
}

// Mean negative log-likelihood over rows of a probability tensor
// ([L] or [N,L]) at the target class indices, with the same clamp as BCE.
inline Tensor cross_entropy(const Tensor& probs, const std::vector<int>& targets) {
    if (probs.rank() < 1 || probs.rank() > 2)
        throw ContractViolation("cross_entropy: probs must be [L] or [N,L], got " + shape_str(probs.shape));
    int l = probs.shape.back();
    int rows = probs.size() / l;
    if (static_cast<int>(targets.size()) != rows)
        throw ContractViolation("cross_entropy: expected " + std::to_string(rows) + " targets, got " +
                                std::to_string(targets.size()));
    const double eps = detail::kProbEps;
    double acc = 0.0;
    for (int r = 0; r < rows; ++r) {
        int k = targets[r];
        if (k < 0 || k >= l) throw ContractViolation("cross_entropy: target index out of range");
        double pc = std::clamp(probs.v[static_cast<size_t>(r) * l + k], eps, 1.0 - eps);
        acc += -std::log(pc);
    }
    Tensor out = Tensor::scalar(acc / rows);
    detail::maybe_record(out, {&probs}, [&] {
        int pn = probs.node;
        std::vector<double> pv = probs.v;
        std::vector<int> tg = targets;
        return [pn, pv, tg, rows, l, eps](Tape& t, const std::vector<double>& g) {
            std::vector<double> gp(pv.size(), 0.0);
            for (int r = 0; r < rows; ++r) {
                size_t idx = static_cast<size_t>(r) * l + tg[r];
                if (pv[idx] <= eps || pv[idx] >= 1.0 - eps) continue;
                gp[idx] = -g[0] / (pv[idx] * rows);
            }
            t.accumulate(pn, gp);
        };
    });
    return out;
}

// Mean smooth-L1 (Huber with delta=1) between pred and target.
inline Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
    detail::require_same_shape(pred, target, "smooth_l1");
    int n = pred.size();
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        double d = pred.v[i] - target.v[i];
        double ad = std::fabs(d);
        acc += ad < 1.0 ? 0.5 * d * d : ad - 0.5;
    }
    Tensor out = Tensor::scalar(acc / n);
    detail::maybe_record(out, {&pred}, [&] {
        int pn = pred.node;
        std::vector<double> pv = pred.v, tv = target.v;
        return [pn, pv, tv, n](Tape& t, const std::vector<double>& g) {
            std::vector<double> gp(pv.size());
            for (int i = 0; i < n; ++i) {
                double d = pv[i] - tv[i];
                gp[i] = g[0] * (std::fabs(d) < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0)) / n;
            }
            t.accumulate(pn, gp);
        };
    });
    return out;
}

// Shifted cosine similarity sim(a,b) = (cos + 1) / 2, in [0,1].
inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "cosine_similarity");
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (int i = 0; i < a.size(); ++i) {
        dot += a.v[i] * b.v[i];
        na2 += a.v[i] * a.v[i];
        nb2 += b.v[i] * b.v[i];
    }
    double na = std::sqrt(na2), nb = std::sqrt(nb2);
    if (na == 0.0 || nb == 0.0)
        throw ContractViolation("cosine_similarity: undefined for zero-norm input");
    double cosv = dot / (na * nb);
    Tensor out = Tensor::scalar(0.5 * (cosv + 1.0));
    detail::maybe_record(out, {&a, &b}, [&] {
        int an = a.node, bn = b.node;
        std::vector<double> av = a.v, bv = b.v;
        return [an, bn, av, bv, na, nb, cosv](Tape& t, const std::vector<double>& g) {
            double s = 0.5 * g[0];
            if (an >= 0) {
                std::vector<double> ga(av.size());
                for (size_t i = 0; i < av.size(); ++i)
                    ga[i] = s * (bv[i] / (na * nb) - cosv * av[i] / (na * na));
                t.accumulate(an, ga);
            }
            if (bn >= 0) {
                std::vector<double> gb(bv.size());
                for (size_t i = 0; i < bv.size(); ++i)
                    gb[i] = s * (av[i] / (na * nb) - cosv * bv[i] / (nb * nb));
                t.accumulate(bn, gb);
            }
        };
    });
    return out;
}

// Gradient reversal: identity forward, -coeff * upstream in backward.
inline Tensor grad_reverse(const Tensor& x, double coeff = 1.0) {
    if (!x.attached() || !active_tape())
        throw ContractViolation("grad_reverse: input must be attached to an active tape");
    Tensor out(x.shape, x.v);
    int xn = x.node;
    out.node = active_tape()->record(out.size(), [xn, coeff](Tape& t, const std::vector<double>& g) {
        std::vector<double> gx(g.size());
        for (size_t i = 0; i < g.size(); ++i) gx[i] = -coeff * g[i];
        t.accumulate(xn, gx);
    });
    return out;
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

// A named trainable tensor. Values persist across steps; attach() registers
// the parameter as a leaf on the step's tape (once per tape, so shared-weight
// uses accumulate into one node).
struct Parameter {
    std::string name;
    Tensor value;
    std::vector<double> velocity;  // SGD momentum state

    Parameter() = default;
    Parameter(std::string n, Tensor val) : name(std::move(n)), value(std::move(val)) {
        velocity.assign(value.v.size(), 0.0);
    }

    Tensor use() {
        Tape* t = active_tape();
        if (!t) {
            Tensor out = value;
            out.node = -1;
            return out;
        }
        if (tape_id_ != t->id()) {
            tape_id_ = t->id();
            node_ = t->leaf(value.size());
        }
        Tensor out = value;
        out.node = node_;
        return out;
    }

    int current_node() const { return node_; }

private:
    std::uint64_t tape_id_ = 0;
    int node_ = -1;
};

}  // namespace glmsda
