#include "csifall/nn/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "csifall/errors.hpp"

namespace csifall::nn {

Tensor& Node::ensure_grad() {
    if (grad.numel() != value.numel() || grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
    return grad;
}

void Var::zero_grad() {
    if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var parameter(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
}

namespace {

Var make_result(Tensor value, std::vector<std::shared_ptr<Node>> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (any) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(fn);
    }
    return Var(std::move(n));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda, const double* b,
          int ldb, double beta, double* c, int ldc) {
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using In = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
    Eigen::Map<RowMat, 0, Eigen::OuterStride<>> C(c, m, n, Eigen::OuterStride<>(ldc));
    if (beta == 0.0) C.setZero();
    else if (beta != 1.0) C *= beta;
    const In A(a, ta ? k : m, ta ? m : k, Eigen::OuterStride<>(lda));
    const In B(b, tb ? n : k, tb ? k : n, Eigen::OuterStride<>(ldb));
    if (!ta && !tb) C.noalias() += alpha * A * B;
    else if (!ta) C.noalias() += alpha * A * B.transpose();
    else if (!tb) C.noalias() += alpha * A.transpose() * B;
    else C.noalias() += alpha * A.transpose() * B.transpose();
}

// Splits a shape around `axis` into (outer, n, inner).
void split_axis(const Shape& s, int axis, std::size_t& outer, std::size_t& n, std::size_t& inner) {
    if (axis < 0 || axis >= static_cast<int>(s.size())) throw ShapeError("axis out of range");
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[i]);
    n = static_cast<std::size_t>(s[axis]);
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= static_cast<std::size_t>(s[i]);
}

}  // namespace

void backward(const Var& out) {
    if (!out.defined()) throw StateError("backward on undefined Var");
    if (out.numel() != 1) throw ShapeError("backward requires a scalar output");
    if (!out.requires_grad()) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(out.node().get(), 0);
    visited.insert(out.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    out.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return make_result(std::move(out), {a.node(), b.node()}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            auto& p = self.parents[k];
            if (!p->requires_grad) continue;
            Tensor& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    return make_result(std::move(out), {a.node(), b.node()}, [](Node& self) {
        const double sign[2] = {1.0, -1.0};
        for (int k = 0; k < 2; ++k) {
            auto& p = self.parents[k];
            if (!p->requires_grad) continue;
            Tensor& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += sign[k] * self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    return make_result(std::move(out), {a.node(), b.node()}, [](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            Tensor& g = pb->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

Var scale(const Var& a, double k) {
    Tensor out = a.value();
    for (double& v : out.values()) v *= k;
    return make_result(std::move(out), {a.node()}, [k](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += k * self.grad[i];
    });
}

Var add_scalar(const Var& a, double k) {
    Tensor out = a.value();
    for (double& v : out.values()) v += k;
    return make_result(std::move(out), {a.node()}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

Var scale_by(const Var& a, const Var& s) {
    if (s.numel() != 1) throw ShapeError("scale_by expects a single-element scale");
    const double k = s.value()[0];
    Tensor out = a.value();
    for (double& v : out.values()) v *= k;
    return make_result(std::move(out), {a.node(), s.node()}, [](Node& self) {
        auto& pa = self.parents[0];
        auto& ps = self.parents[1];
        const double k = ps->value[0];
        if (pa->requires_grad) {
            Tensor& g = pa->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += k * self.grad[i];
        }
        if (ps->requires_grad) {
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.numel(); ++i) acc += self.grad[i] * pa->value[i];
            ps->ensure_grad()[0] += acc;
        }
    });
}

namespace {

struct Bcast4 {
    int d[4];
    std::size_t sa[4];
    std::size_t sb[4];
};

Bcast4 make_bcast(const Shape& a, const Shape& b) {
    if (a.size() != b.size() || a.size() > 4) {
        throw ShapeError("broadcast requires equal rank <= 4: " + shape_str(a) + " vs " + shape_str(b));
    }
    Bcast4 r{};
    const std::size_t pad = 4 - a.size();
    int da[4], db[4];
    for (std::size_t i = 0; i < 4; ++i) {
        da[i] = i < pad ? 1 : a[i - pad];
        db[i] = i < pad ? 1 : b[i - pad];
        if (db[i] != 1 && db[i] != da[i]) {
            throw ShapeError("cannot broadcast " + shape_str(b) + " to " + shape_str(a));
        }
        r.d[i] = da[i];
    }
    std::size_t acc_a = 1, acc_b = 1;
    for (int i = 3; i >= 0; --i) {
        r.sa[i] = acc_a;
        r.sb[i] = db[i] == 1 ? 0 : acc_b;
        acc_a *= static_cast<std::size_t>(da[i]);
        acc_b *= static_cast<std::size_t>(db[i]);
    }
    return r;
}

template <typename F>
void for_bcast(const Bcast4& bc, F&& f) {
    for (int i0 = 0; i0 < bc.d[0]; ++i0)
        for (int i1 = 0; i1 < bc.d[1]; ++i1)
            for (int i2 = 0; i2 < bc.d[2]; ++i2) {
                std::size_t ia = i0 * bc.sa[0] + i1 * bc.sa[1] + i2 * bc.sa[2];
                std::size_t ib = i0 * bc.sb[0] + i1 * bc.sb[1] + i2 * bc.sb[2];
                for (int i3 = 0; i3 < bc.d[3]; ++i3) f(ia + i3, ib + i3 * bc.sb[3]);
            }
}

}  // namespace

Var mul_bcast(const Var& a, const Var& b) {
    const Bcast4 bc = make_bcast(a.shape(), b.shape());
    Tensor out(a.shape());
    const double* av = a.value().data();
    const double* bv = b.value().data();
    double* ov = out.data();
    for_bcast(bc, [&](std::size_t ia, std::size_t ib) { ov[ia] = av[ia] * bv[ib]; });
    return make_result(std::move(out), {a.node(), b.node()}, [bc](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const double* gy = self.grad.data();
        if (pa->requires_grad) {
            double* ga = pa->ensure_grad().data();
            const double* bv = pb->value.data();
            for_bcast(bc, [&](std::size_t ia, std::size_t ib) { ga[ia] += gy[ia] * bv[ib]; });
        }
        if (pb->requires_grad) {
            double* gb = pb->ensure_grad().data();
            const double* av = pa->value.data();
            for_bcast(bc, [&](std::size_t ia, std::size_t ib) { gb[ib] += gy[ia] * av[ia]; });
        }
    });
}

Var add_bcast(const Var& a, const Var& b) {
    const Bcast4 bc = make_bcast(a.shape(), b.shape());
    Tensor out(a.shape());
    const double* av = a.value().data();
    const double* bv = b.value().data();
    double* ov = out.data();
    for_bcast(bc, [&](std::size_t ia, std::size_t ib) { ov[ia] = av[ia] + bv[ib]; });
    return make_result(std::move(out), {a.node(), b.node()}, [bc](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const double* gy = self.grad.data();
        if (pa->requires_grad) {
            Tensor& ga = pa->ensure_grad();
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += gy[i];
        }
        if (pb->requires_grad) {
            double* gb = pb->ensure_grad().data();
            for_bcast(bc, [&](std::size_t ia, std::size_t ib) { gb[ib] += gy[ia]; });
        }
    });
}

Var square(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.values()) v *= v;
    return make_result(std::move(out), {a.node()}, [](Node& self) {
        auto& p = self.parents[0];
        Tensor& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += 2.0 * p->value[i] * self.grad[i];
    });
}

Var relu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    return make_result(std::move(out), {a.node()}, [](Node& self) {
        auto& p = self.parents[0];
        Tensor& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (p->value[i] > 0.0) g[i] += self.grad[i];
    });
}

namespace {
inline double sigm(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}
}  // namespace

Var sigmoid(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.values()) v = sigm(v);
    return make_result(std::move(out), {a.node()}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const double y = self.value[i];
            g[i] += self.grad[i] * y * (1.0 - y);
        }
    });
}

Var silu(const Var& a) {
    Tensor out = a.value();
    for (double& v : out.values()) v = v * sigm(v);
    return make_result(std::move(out), {a.node()}, [](Node& self) {
        auto& p = self.parents[0];
        Tensor& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const double x = p->value[i];
            const double s = sigm(x);
            g[i] += self.grad[i] * s * (1.0 + x * (1.0 - s));
        }
    });
}

namespace {

struct ConvGeom {
    int c, h, w, o, kh, kw, ho, wo, cg, og;
    Conv2dOptions opt;
};

void im2col(const double* x, const ConvGeom& g, double* col) {
    const int P = g.ho * g.wo;
    for (int c = 0; c < g.cg; ++c)
        for (int i = 0; i < g.kh; ++i)
            for (int j = 0; j < g.kw; ++j) {
                double* row = col + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * P;
                const double* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
                for (int ho = 0; ho < g.ho; ++ho) {
                    const int hi = ho * g.opt.stride_h - g.opt.pad_h + i;
                    double* r = row + static_cast<std::size_t>(ho) * g.wo;
                    if (hi < 0 || hi >= g.h) {
                        std::fill(r, r + g.wo, 0.0);
                        continue;
                    }
                    for (int wo = 0; wo < g.wo; ++wo) {
                        const int wi = wo * g.opt.stride_w - g.opt.pad_w + j;
                        r[wo] = (wi < 0 || wi >= g.w) ? 0.0 : xc[hi * g.w + wi];
                    }
                }
            }
}

void col2im(const double* col, const ConvGeom& g, double* dx) {
    const int P = g.ho * g.wo;
    for (int c = 0; c < g.cg; ++c)
        for (int i = 0; i < g.kh; ++i)
            for (int j = 0; j < g.kw; ++j) {
                const double* row = col + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * P;
                double* xc = dx + static_cast<std::size_t>(c) * g.h * g.w;
                for (int ho = 0; ho < g.ho; ++ho) {
                    const int hi = ho * g.opt.stride_h - g.opt.pad_h + i;
                    if (hi < 0 || hi >= g.h) continue;
                    const double* r = row + static_cast<std::size_t>(ho) * g.wo;
                    for (int wo = 0; wo < g.wo; ++wo) {
                        const int wi = wo * g.opt.stride_w - g.opt.pad_w + j;
                        if (wi >= 0 && wi < g.w) xc[hi * g.w + wi] += r[wo];
                    }
                }
            }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var* bias, const Conv2dOptions& opt) {
    if (x.value().ndim() != 3 || w.value().ndim() != 4) {
        throw ShapeError("conv2d expects x CxHxW and w OxCgxKhxKw, got " + shape_str(x.shape()) + " and " +
                         shape_str(w.shape()));
    }
    ConvGeom g{};
    g.opt = opt;
    g.c = x.value().dim(0);
    g.h = x.value().dim(1);
    g.w = x.value().dim(2);
    g.o = w.value().dim(0);
    g.kh = w.value().dim(2);
    g.kw = w.value().dim(3);
    if (opt.groups < 1 || g.c % opt.groups || g.o % opt.groups) throw ShapeError("conv2d: bad group count");
    g.cg = g.c / opt.groups;
    g.og = g.o / opt.groups;
    if (w.value().dim(1) != g.cg) {
        throw ShapeError("conv2d: weight expects " + std::to_string(w.value().dim(1)) + " input channels per group, got " +
                         std::to_string(g.cg));
    }
    g.ho = (g.h + 2 * opt.pad_h - g.kh) / opt.stride_h + 1;
    g.wo = (g.w + 2 * opt.pad_w - g.kw) / opt.stride_w + 1;
    if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(x.shape()));
    if (bias && bias->numel() != static_cast<std::size_t>(g.o)) throw ShapeError("conv2d: bias size mismatch");

    const int P = g.ho * g.wo;
    const int K = g.cg * g.kh * g.kw;
    Tensor out({g.o, g.ho, g.wo});
    const double* xv = x.value().data();
    const double* wv = w.value().data();
    double* ov = out.data();

    const bool depthwise = opt.groups == g.c && g.o == g.c;
    const bool pointwise = g.kh == 1 && g.kw == 1 && opt.stride_h == 1 && opt.stride_w == 1 && opt.pad_h == 0 &&
                           opt.pad_w == 0;
    std::vector<Tensor> cols;  // per-group im2col buffers kept for backward

    if (depthwise) {
        for (int c = 0; c < g.c; ++c) {
            const double* xc = xv + static_cast<std::size_t>(c) * g.h * g.w;
            const double* wc = wv + static_cast<std::size_t>(c) * g.kh * g.kw;
            double* oc = ov + static_cast<std::size_t>(c) * P;
            for (int ho = 0; ho < g.ho; ++ho)
                for (int wo = 0; wo < g.wo; ++wo) {
                    double acc = 0.0;
                    for (int i = 0; i < g.kh; ++i) {
                        const int hi = ho * opt.stride_h - opt.pad_h + i;
                        if (hi < 0 || hi >= g.h) continue;
                        for (int j = 0; j < g.kw; ++j) {
                            const int wi = wo * opt.stride_w - opt.pad_w + j;
                            if (wi < 0 || wi >= g.w) continue;
                            acc += wc[i * g.kw + j] * xc[hi * g.w + wi];
                        }
                    }
                    oc[ho * g.wo + wo] = acc;
                }
        }
    } else {
        for (int gi = 0; gi < opt.groups; ++gi) {
            const double* xg = xv + static_cast<std::size_t>(gi) * g.cg * g.h * g.w;
            const double* colp = xg;
            Tensor col;
            if (!pointwise) {
                col = Tensor({K, P});
                im2col(xg, g, col.data());
                colp = col.data();
            }
            gemm(false, false, g.og, P, K, 1.0, wv + static_cast<std::size_t>(gi) * g.og * K, K, colp, P, 0.0,
                 ov + static_cast<std::size_t>(gi) * g.og * P, P);
            cols.push_back(std::move(col));
        }
    }
    if (bias) {
        const double* bv = bias->value().data();
        for (int o = 0; o < g.o; ++o)
            for (int p = 0; p < P; ++p) ov[static_cast<std::size_t>(o) * P + p] += bv[o];
    }

    std::vector<std::shared_ptr<Node>> parents{x.node(), w.node()};
    if (bias) parents.push_back(bias->node());
    const bool any_grad = x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad());
    if (!any_grad) cols.clear();

    return make_result(
        std::move(out), std::move(parents),
        [g, depthwise, pointwise, cols = std::move(cols), has_bias = bias != nullptr](Node& self) {
            auto& px = self.parents[0];
            auto& pw = self.parents[1];
            const int P = g.ho * g.wo;
            const int K = g.cg * g.kh * g.kw;
            const double* gy = self.grad.data();
            if (has_bias && self.parents[2]->requires_grad) {
                double* gb = self.parents[2]->ensure_grad().data();
                for (int o = 0; o < g.o; ++o) {
                    double acc = 0.0;
                    for (int p = 0; p < P; ++p) acc += gy[static_cast<std::size_t>(o) * P + p];
                    gb[o] += acc;
                }
            }
            const double* xv = px->value.data();
            const double* wv = pw->value.data();
            if (depthwise) {
                double* gx = px->requires_grad ? px->ensure_grad().data() : nullptr;
                double* gw = pw->requires_grad ? pw->ensure_grad().data() : nullptr;
                for (int c = 0; c < g.c; ++c) {
                    const double* xc = xv + static_cast<std::size_t>(c) * g.h * g.w;
                    const double* wc = wv + static_cast<std::size_t>(c) * g.kh * g.kw;
                    const double* gc = gy + static_cast<std::size_t>(c) * P;
                    for (int ho = 0; ho < g.ho; ++ho)
                        for (int wo = 0; wo < g.wo; ++wo) {
                            const double d = gc[ho * g.wo + wo];
                            if (d == 0.0) continue;
                            for (int i = 0; i < g.kh; ++i) {
                                const int hi = ho * g.opt.stride_h - g.opt.pad_h + i;
                                if (hi < 0 || hi >= g.h) continue;
                                for (int j = 0; j < g.kw; ++j) {
                                    const int wi = wo * g.opt.stride_w - g.opt.pad_w + j;
                                    if (wi < 0 || wi >= g.w) continue;
                                    if (gx) gx[static_cast<std::size_t>(c) * g.h * g.w + hi * g.w + wi] += wc[i * g.kw + j] * d;
                                    if (gw) gw[static_cast<std::size_t>(c) * g.kh * g.kw + i * g.kw + j] += xc[hi * g.w + wi] * d;
                                }
                            }
                        }
                }
                return;
            }
            for (int gi = 0; gi < g.opt.groups; ++gi) {
                const double* gyg = gy + static_cast<std::size_t>(gi) * g.og * P;
                const double* colp = pointwise ? xv + static_cast<std::size_t>(gi) * g.cg * g.h * g.w
                                               : cols[gi].data();
                if (pw->requires_grad) {
                    double* gw = pw->ensure_grad().data() + static_cast<std::size_t>(gi) * g.og * K;
                    gemm(false, true, g.og, K, P, 1.0, gyg, P, colp, P, 1.0, gw, K);
                }
                if (px->requires_grad) {
                    double* gx = px->ensure_grad().data() + static_cast<std::size_t>(gi) * g.cg * g.h * g.w;
                    const double* wg = wv + static_cast<std::size_t>(gi) * g.og * K;
                    if (pointwise) {
                        gemm(true, false, K, P, g.og, 1.0, wg, K, gyg, P, 1.0, gx, P);
                    } else {
                        Tensor dcol({K, P});
                        gemm(true, false, K, P, g.og, 1.0, wg, K, gyg, P, 0.0, dcol.data(), P);
                        col2im(dcol.data(), g, gx);
                    }
                }
            }
        });
}

Var batchnorm_frozen(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
                     const Tensor& running_var, double eps) {
    if (x.value().ndim() != 3) throw ShapeError("batchnorm expects CxHxW");
    const int C = x.value().dim(0);
    const std::size_t hw = x.numel() / C;
    if (gamma.numel() != static_cast<std::size_t>(C) || beta.numel() != static_cast<std::size_t>(C) ||
        running_mean.numel() != static_cast<std::size_t>(C) || running_var.numel() != static_cast<std::size_t>(C)) {
        throw ShapeError("batchnorm parameter size mismatch");
    }
    std::vector<double> inv(C);
    for (int c = 0; c < C; ++c) inv[c] = 1.0 / std::sqrt(running_var[c] + eps);
    Tensor out(x.shape());
    for (int c = 0; c < C; ++c) {
        const double a = gamma.value()[c] * inv[c];
        const double b = beta.value()[c] - running_mean[c] * a;
        for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] = a * x.value()[c * hw + i] + b;
    }
    return make_result(std::move(out), {x.node(), gamma.node(), beta.node()},
                       [inv, mean = running_mean, C, hw](Node& self) {
                           auto& px = self.parents[0];
                           auto& pg = self.parents[1];
                           auto& pb = self.parents[2];
                           for (int c = 0; c < C; ++c) {
                               double sg = 0.0, sb = 0.0;
                               const double a = pg->value[c] * inv[c];
                               for (std::size_t i = 0; i < hw; ++i) {
                                   const double d = self.grad[c * hw + i];
                                   sb += d;
                                   sg += d * (px->value[c * hw + i] - mean[c]) * inv[c];
                                   if (px->requires_grad) px->ensure_grad()[c * hw + i] += a * d;
                               }
                               if (pg->requires_grad) pg->ensure_grad()[c] += sg;
                               if (pb->requires_grad) pb->ensure_grad()[c] += sb;
                           }
                       });
}

Var box_mean_time(const Var& x, int window) {
    if (x.value().ndim() != 3) throw ShapeError("box_mean_time expects CxTxS");
    if (window < 1 || window % 2 == 0) throw ParameterError("box window must be odd and >= 1");
    const int C = x.value().dim(0), T = x.value().dim(1), S = x.value().dim(2);
    const int half = window / 2;
    const double inv = 1.0 / window;
    Tensor out(x.shape());
    const Tensor& xv = x.value();
    for (int c = 0; c < C; ++c)
        for (int t = 0; t < T; ++t)
            for (int s = 0; s < S; ++s) {
                double acc = 0.0;
                for (int k = -half; k <= half; ++k) acc += xv.at(c, std::clamp(t + k, 0, T - 1), s);
                out.at(c, t, s) = acc * inv;
            }
    return make_result(std::move(out), {x.node()}, [C, T, S, half, inv](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int t = 0; t < T; ++t)
                for (int s = 0; s < S; ++s) {
                    const double d = self.grad.at(c, t, s) * inv;
                    for (int k = -half; k <= half; ++k) g.at(c, std::clamp(t + k, 0, T - 1), s) += d;
                }
    });
}

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
    if (a.value().ndim() != 2 || b.value().ndim() != 2) throw ShapeError("matmul expects 2-D operands");
    const int ar = a.value().dim(0), ac = a.value().dim(1);
    const int br = b.value().dim(0), bc = b.value().dim(1);
    const int m = ta ? ac : ar, k = ta ? ar : ac;
    const int kb = tb ? bc : br, n = tb ? br : bc;
    if (k != kb) throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    Tensor out({m, n});
    gemm(ta, tb, m, n, k, 1.0, a.value().data(), ac, b.value().data(), bc, 0.0, out.data(), n);
    return make_result(std::move(out), {a.node(), b.node()}, [ta, tb, m, n, k, ac, bc](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const double* dc = self.grad.data();
        if (pa->requires_grad) {
            double* ga = pa->ensure_grad().data();
            if (!ta) gemm(false, !tb, m, k, n, 1.0, dc, n, pb->value.data(), bc, 1.0, ga, ac);
            else gemm(tb, true, k, m, n, 1.0, pb->value.data(), bc, dc, n, 1.0, ga, ac);
        }
        if (pb->requires_grad) {
            double* gb = pb->ensure_grad().data();
            if (!tb) gemm(!ta, false, k, n, m, 1.0, pa->value.data(), ac, dc, n, 1.0, gb, bc);
            else gemm(true, ta, n, k, m, 1.0, dc, n, pa->value.data(), ac, 1.0, gb, bc);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var* bias) {
    if (x.value().ndim() != 2 || w.value().ndim() != 2) throw ShapeError("linear expects 2-D x and w");
    const int n = x.value().dim(0), in = x.value().dim(1), outd = w.value().dim(0);
    if (w.value().dim(1) != in) {
        throw ShapeError("linear: weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
    }
    if (bias && bias->numel() != static_cast<std::size_t>(outd)) throw ShapeError("linear: bias size mismatch");
    Tensor out({n, outd});
    if (bias) {
        for (int r = 0; r < n; ++r)
            for (int o = 0; o < outd; ++o) out.at(r, o) = bias->value()[o];
    }
    gemm(false, true, n, outd, in, 1.0, x.value().data(), in, w.value().data(), in, bias ? 1.0 : 0.0, out.data(),
         outd);
    std::vector<std::shared_ptr<Node>> parents{x.node(), w.node()};
    if (bias) parents.push_back(bias->node());
    return make_result(std::move(out), std::move(parents), [n, in, outd, has_bias = bias != nullptr](Node& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        const double* dy = self.grad.data();
        if (px->requires_grad)
            gemm(false, false, n, in, outd, 1.0, dy, outd, pw->value.data(), in, 1.0, px->ensure_grad().data(), in);
        if (pw->requires_grad)
            gemm(true, false, outd, in, n, 1.0, dy, outd, px->value.data(), in, 1.0, pw->ensure_grad().data(), in);
        if (has_bias && self.parents[2]->requires_grad) {
            Tensor& gb = self.parents[2]->ensure_grad();
            for (int r = 0; r < n; ++r)
                for (int o = 0; o < outd; ++o) gb[o] += dy[static_cast<std::size_t>(r) * outd + o];
        }
    });
}

Var transpose2d(const Var& a) {
    if (a.value().ndim() != 2) throw ShapeError("transpose2d expects 2-D");
    const int r = a.value().dim(0), c = a.value().dim(1);
    Tensor out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = a.value().at(i, j);
    return make_result(std::move(out), {a.node()}, [r, c](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) g.at(i, j) += self.grad.at(j, i);
    });
}

Var softmax_rows(const Var& a) {
    if (a.value().ndim() != 2) throw ShapeError("softmax_rows expects 2-D");
    const int r = a.value().dim(0), c = a.value().dim(1);
    Tensor out(a.shape());
    for (int i = 0; i < r; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j) mx = std::max(mx, a.value().at(i, j));
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += (out.at(i, j) = std::exp(a.value().at(i, j) - mx));
        for (int j = 0; j < c; ++j) out.at(i, j) /= sum;
    }
    return make_result(std::move(out), {a.node()}, [r, c](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (int i = 0; i < r; ++i) {
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += self.grad.at(i, j) * self.value.at(i, j);
            for (int j = 0; j < c; ++j) g.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
        }
    });
}

Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps) {
    if (a.value().ndim() != 2) throw ShapeError("layer_norm_rows expects 2-D");
    const int r = a.value().dim(0), c = a.value().dim(1);
    if (gamma.numel() != static_cast<std::size_t>(c) || beta.numel() != static_cast<std::size_t>(c)) {
        throw ShapeError("layer_norm: parameter size mismatch");
    }
    Tensor out(a.shape());
    Tensor xhat(a.shape());
    std::vector<double> rstd(r);
    for (int i = 0; i < r; ++i) {
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += a.value().at(i, j);
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = a.value().at(i, j) - mu;
            var += d * d;
        }
        var /= c;
        rstd[i] = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < c; ++j) {
            xhat.at(i, j) = (a.value().at(i, j) - mu) * rstd[i];
            out.at(i, j) = xhat.at(i, j) * gamma.value()[j] + beta.value()[j];
        }
    }
    return make_result(std::move(out), {a.node(), gamma.node(), beta.node()},
                       [r, c, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                           auto& pa = self.parents[0];
                           auto& pg = self.parents[1];
                           auto& pb = self.parents[2];
                           for (int i = 0; i < r; ++i) {
                               double m1 = 0.0, m2 = 0.0;
                               for (int j = 0; j < c; ++j) {
                                   const double dy = self.grad.at(i, j);
                                   const double dxh = dy * pg->value[j];
                                   m1 += dxh;
                                   m2 += dxh * xhat.at(i, j);
                                   if (pg->requires_grad) pg->ensure_grad()[j] += dy * xhat.at(i, j);
                                   if (pb->requires_grad) pb->ensure_grad()[j] += dy;
                               }
                               if (!pa->requires_grad) continue;
                               m1 /= c;
                               m2 /= c;
                               Tensor& g = pa->ensure_grad();
                               for (int j = 0; j < c; ++j) {
                                   const double dxh = self.grad.at(i, j) * pg->value[j];
                                   g.at(i, j) += rstd[i] * (dxh - m1 - xhat.at(i, j) * m2);
                               }
                           }
                       });
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return make_result(std::move(out), {a.node()}, [](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

namespace {
Shape reduced_shape(const Shape& s, int axis, bool keepdim) {
    Shape out = s;
    if (keepdim) out[axis] = 1;
    else out.erase(out.begin() + axis);
    if (out.empty()) out.push_back(1);
    return out;
}
}  // namespace

Var mean_axis(const Var& a, int axis, bool keepdim) {
    std::size_t outer, n, inner;
    split_axis(a.shape(), axis, outer, n, inner);
    Tensor out(reduced_shape(a.shape(), axis, keepdim));
    const double* av = a.value().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += av[(o * n + k) * inner + i];
            out[o * inner + i] = acc / static_cast<double>(n);
        }
    return make_result(std::move(out), {a.node()}, [outer, n, inner](Node& self) {
        double* g = self.parents[0]->ensure_grad().data();
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                const double d = self.grad[o * inner + i] * inv;
                for (std::size_t k = 0; k < n; ++k) g[(o * n + k) * inner + i] += d;
            }
    });
}

Var max_axis(const Var& a, int axis, bool keepdim) {
    std::size_t outer, n, inner;
    split_axis(a.shape(), axis, outer, n, inner);
    Tensor out(reduced_shape(a.shape(), axis, keepdim));
    std::vector<std::size_t> arg(outer * inner);
    const double* av = a.value().data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            std::size_t best = (o * n) * inner + i;
            for (std::size_t k = 1; k < n; ++k) {
                const std::size_t idx = (o * n + k) * inner + i;
                if (av[idx] > av[best]) best = idx;
            }
            arg[o * inner + i] = best;
            out[o * inner + i] = av[best];
        }
    return make_result(std::move(out), {a.node()}, [arg = std::move(arg)](Node& self) {
        double* g = self.parents[0]->ensure_grad().data();
        for (std::size_t j = 0; j < arg.size(); ++j) g[arg[j]] += self.grad[j];
    });
}

Var concat(const std::vector<Var>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of nothing");
    Shape s = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        Shape q = p.shape();
        if (q.size() != s.size()) throw ShapeError("concat rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d)
            if (static_cast<int>(d) != axis && q[d] != s[d]) throw ShapeError("concat shape mismatch");
        total += q[axis];
    }
    s[axis] = total;
    std::size_t outer, n, inner;
    split_axis(s, axis, outer, n, inner);
    Tensor out(s);
    std::vector<int> offsets;
    int off = 0;
    for (const auto& p : parts) {
        const int len = p.shape()[axis];
        offsets.push_back(off);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.value().data() + o * len * inner, len * inner, out.data() + (o * n + off) * inner);
        off += len;
    }
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<int> lens;
    for (const auto& p : parts) {
        parents.push_back(p.node());
        lens.push_back(p.shape()[axis]);
    }
    return make_result(std::move(out), std::move(parents), [outer, n, inner, offsets, lens](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            if (!p->requires_grad) continue;
            double* g = p->ensure_grad().data();
            const std::size_t len = lens[k];
            for (std::size_t o = 0; o < outer; ++o) {
                const double* src = self.grad.data() + (o * n + offsets[k]) * inner;
                double* dst = g + o * len * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        }
    });
}

Var slice(const Var& a, int axis, int start, int length) {
    std::size_t outer, n, inner;
    split_axis(a.shape(), axis, outer, n, inner);
    if (start < 0 || length < 0 || static_cast<std::size_t>(start + length) > n) throw ShapeError("slice out of range");
    Shape s = a.shape();
    s[axis] = length;
    Tensor out(s);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(a.value().data() + (o * n + start) * inner, length * inner, out.data() + o * length * inner);
    return make_result(std::move(out), {a.node()}, [outer, n, inner, start, length](Node& self) {
        double* g = self.parents[0]->ensure_grad().data();
        for (std::size_t o = 0; o < outer; ++o) {
            const double* src = self.grad.data() + o * length * inner;
            double* dst = g + (o * n + start) * inner;
            for (std::size_t i = 0; i < static_cast<std::size_t>(length) * inner; ++i) dst[i] += src[i];
        }
    });
}

Var index_select_rows(const Var& a, const std::vector<int>& rows) {
    if (a.value().ndim() != 2) throw ShapeError("index_select_rows expects 2-D");
    const int r = a.value().dim(0), c = a.value().dim(1);
    Tensor out({static_cast<int>(rows.size()), c});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= r) throw ShapeError("row index out of range");
        std::copy_n(a.value().data() + static_cast<std::size_t>(rows[i]) * c, c, out.data() + i * c);
    }
    return make_result(std::move(out), {a.node()}, [rows, c](Node& self) {
        double* g = self.parents[0]->ensure_grad().data();
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (int j = 0; j < c; ++j) g[static_cast<std::size_t>(rows[i]) * c + j] += self.grad[i * c + j];
    });
}

Var dropout(const Var& a, double p, bool training, std::mt19937_64* rng) {
    if (!training || p <= 0.0) return a;
    if (!rng) throw StateError("dropout in training mode needs an RNG");
    if (p >= 1.0) throw ParameterError("dropout probability must be < 1");
    std::bernoulli_distribution keep(1.0 - p);
    const double s = 1.0 / (1.0 - p);
    Tensor mask(a.shape());
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        mask[i] = keep(*rng) ? s : 0.0;
        out[i] = a.value()[i] * mask[i];
    }
    return make_result(std::move(out), {a.node()}, [mask = std::move(mask)](Node& self) {
        Tensor& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * mask[i];
    });
}

Var focal_loss_logits(const Var& logits, int target, double gamma, double alpha_t) {
    const std::size_t k = logits.numel();
    if (target < 0 || static_cast<std::size_t>(target) >= k) throw ParameterError("focal loss target out of range");
    std::vector<double> p(k);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits.value()[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += (p[j] = std::exp(logits.value()[j] - mx));
    for (double& v : p) v /= sum;
    const double pt = std::max(p[target], 1e-12);
    const double one_m = 1.0 - p[target];
    const double loss = -alpha_t * std::pow(one_m, gamma) * std::log(pt);
    Tensor out({1}, loss);
    return make_result(std::move(out), {logits.node()}, [p, pt, one_m, target, gamma, alpha_t](Node& self) {
        // dL/dp_t, then softmax Jacobian dp_t/dz_j = p_t (delta_tj - p_j).
        double dldp = -alpha_t * std::pow(one_m, gamma) / pt;
        if (gamma != 0.0 && one_m > 0.0) dldp += alpha_t * gamma * std::pow(one_m, gamma - 1.0) * std::log(pt);
        const double up = self.grad[0];
        Tensor& g = self.parents[0]->ensure_grad();
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double jac = p[target] * ((static_cast<int>(j) == target ? 1.0 : 0.0) - p[j]);
            g[j] += up * dldp * jac;
        }
    });
}

}  // namespace csifall::nn
