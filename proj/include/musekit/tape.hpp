#pragma once

#include "musekit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace musekit {

// --------------------------------------------------------------------------
// matmul kernels (row-major, accumulate into C)
// --------------------------------------------------------------------------

// C[m,n] += A[m,k] * B[k,n]
template <class T>
void mm_acc_nn(const T * A, const T * B, T * C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        T * crow = C + (size_t)i * n;
        const T * arow = A + (size_t)i * k;
        for (int p = 0; p < k; ++p) {
            const T a = arow[p];
            const T * brow = B + (size_t)p * n;
#pragma omp simd
            for (int j = 0; j < n; ++j) {
                crow[j] += a * brow[j];
            }
        }
    }
}

// C[m,n] += A[m,k] * B^T where B is row-major [n,k]
template <class T>
void mm_acc_nt(const T * A, const T * B, T * C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T * arow = A + (size_t)i * k;
        T * crow = C + (size_t)i * n;
        for (int j = 0; j < n; ++j) {
            const T * brow = B + (size_t)j * k;
            T acc = 0;
            // simd reduction fixes a lane order per build, so runs of one
            // binary stay bitwise reproducible
#pragma omp simd reduction(+ : acc)
            for (int p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            crow[j] += acc;
        }
    }
}

// C[k,n] += A^T * B where A is row-major [m,k], B is [m,n]
template <class T>
void mm_acc_tn(const T * A, const T * B, T * C, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const T * arow = A + (size_t)i * k;
        const T * brow = B + (size_t)i * n;
        for (int p = 0; p < k; ++p) {
            const T a = arow[p];
            if (a == T(0)) continue;
            T * crow = C + (size_t)p * n;
#pragma omp simd
            for (int j = 0; j < n; ++j) {
                crow[j] += a * brow[j];
            }
        }
    }
}

// --------------------------------------------------------------------------
// reverse-mode tape
// --------------------------------------------------------------------------

struct Var {
    int32_t i = -1;
    bool valid() const { return i >= 0; }
};

// Records primitive ops in execution order; backward() replays adjoints in
// strict reverse order, which fixes the gradient accumulation order and makes
// single-threaded runs bitwise reproducible.
template <class T>
class TapeT {
public:
    using Tensor = TensorT<T>;

    explicit TapeT(bool grad_enabled = true) : grad_enabled_(grad_enabled) {
        // graphs are rebuilt every step, so large activation buffers churn;
        // keep them on the heap instead of round-tripping through mmap
#if defined(__GLIBC__)
        static const bool allocator_tuned = [] {
            mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
            mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
            return true;
        }();
        (void)allocator_tuned;
#endif
    }

    bool grad_enabled() const { return grad_enabled_; }

    void reset() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

    Var leaf(Tensor value, bool requires_grad) {
        return push(std::move(value), requires_grad && grad_enabled_, {});
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    const Tensor & value(Var v) const { return node(v).value; }

    const Tensor & grad(Var v) const {
        const Node & n = node(v);
        require(!n.grad.data.empty(), error_kind::graph, "grad not populated; run backward first");
        return n.grad;
    }

    bool has_grad(Var v) const { return !node(v).grad.data.empty(); }

    T scalar(Var v) const {
        const Tensor & t = value(v);
        require(t.size() == 1, error_kind::shape, "scalar() on non-scalar var");
        return t.data[0];
    }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        const Tensor & va = value(a), & vb = value(b);
        require(va.same_shape(vb), error_kind::shape, "add: shape mismatch");
        Tensor out = va;
        for (int64_t i = 0; i < out.size(); ++i) out[i] += vb[i];
        return unop2(std::move(out), a, b, [](TapeT & t, int32_t oi, int32_t ai, int32_t bi) {
            const Tensor & g = t.nodes_[oi].grad;
            t.accumulate(ai, [&](Tensor & ga) { for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i]; });
            t.accumulate(bi, [&](Tensor & gb) { for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i]; });
        });
    }

    Var sub(Var a, Var b) {
        const Tensor & va = value(a), & vb = value(b);
        require(va.same_shape(vb), error_kind::shape, "sub: shape mismatch");
        Tensor out = va;
        for (int64_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
        return unop2(std::move(out), a, b, [](TapeT & t, int32_t oi, int32_t ai, int32_t bi) {
            const Tensor & g = t.nodes_[oi].grad;
            t.accumulate(ai, [&](Tensor & ga) { for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i]; });
            t.accumulate(bi, [&](Tensor & gb) { for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i]; });
        });
    }

    Var mul(Var a, Var b) {
        const Tensor & va = value(a), & vb = value(b);
        require(va.same_shape(vb), error_kind::shape, "mul: shape mismatch");
        Tensor out = va;
        for (int64_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
        return unop2(std::move(out), a, b, [](TapeT & t, int32_t oi, int32_t ai, int32_t bi) {
            const Tensor & g = t.nodes_[oi].grad;
            const Tensor & va = t.nodes_[ai].value;
            const Tensor & vb = t.nodes_[bi].value;
            t.accumulate(ai, [&](Tensor & ga) { for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i]; });
            t.accumulate(bi, [&](Tensor & gb) { for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i]; });
        });
    }

    Var scale(Var a, double c) {
        Tensor out = value(a);
        for (auto & x : out.data) x = (T)(x * c);
        return unop(std::move(out), a, [c](TapeT & t, int32_t oi, int32_t ai) {
            const Tensor & g = t.nodes_[oi].grad;
            t.accumulate(ai, [&](Tensor & ga) { for (int64_t i = 0; i < g.size(); ++i) ga[i] += (T)(g[i] * c); });
        });
    }

    Var gelu(Var a) {
        static const double c = std::sqrt(2.0 / kPi);
        Tensor out = value(a);
        for (auto & x : out.data) {
            const double xd = (double)x;
            x = (T)(0.5 * xd * (1.0 + std::tanh(c * (xd + 0.044715 * xd * xd * xd))));
        }
        return unop(std::move(out), a, [](TapeT & t, int32_t oi, int32_t ai) {
            const Tensor & g = t.nodes_[oi].grad;
            const Tensor & va = t.nodes_[ai].value;
            t.accumulate(ai, [&](Tensor & ga) {
                for (int64_t i = 0; i < g.size(); ++i) {
                    const double x  = (double)va[i];
                    const double u  = std::sqrt(2.0 / kPi) * (x + 0.044715 * x * x * x);
                    const double th = std::tanh(u);
                    const double du = std::sqrt(2.0 / kPi) * (1.0 + 3.0 * 0.044715 * x * x);
                    ga[i] += (T)((double)g[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du));
                }
            });
        });
    }

    Var leaky_relu(Var a, double slope) {
        Tensor out = value(a);
        for (auto & x : out.data) x = x > T(0) ? x : (T)(x * slope);
        return unop(std::move(out), a, [slope](TapeT & t, int32_t oi, int32_t ai) {
            const Tensor & g = t.nodes_[oi].grad;
            const Tensor & va = t.nodes_[ai].value;
            t.accumulate(ai, [&](Tensor & ga) {
                for (int64_t i = 0; i < g.size(); ++i) {
                    ga[i] += va[i] > T(0) ? g[i] : (T)(g[i] * slope);
                }
            });
        });
    }

    Var sigmoid(Var a) {
        Tensor out = value(a);
        for (auto & x : out.data) x = (T)(1.0 / (1.0 + std::exp(-(double)x)));
        return unop(std::move(out), a, [](TapeT & t, int32_t oi, int32_t ai) {
            const Tensor & g  = t.nodes_[oi].grad;
            const Tensor & vo = t.nodes_[oi].value;
            t.accumulate(ai, [&](Tensor & ga) {
                for (int64_t i = 0; i < g.size(); ++i) {
                    ga[i] += (T)((double)g[i] * (double)vo[i] * (1.0 - (double)vo[i]));
                }
            });
        });
    }

    Var stopgrad(Var a) {
        Tensor out = value(a);
        Var o = push(std::move(out), false, {});
        return o;
    }

    // ---- linear algebra ----

    Var matmul(Var a, Var b) {
        const Tensor & va = value(a), & vb = value(b);
        require(va.rank() == 2 && vb.rank() == 2 && va.cols() == vb.rows(),
                error_kind::shape, "matmul: incompatible shapes " + shape_str(va) + " x " + shape_str(vb));
        const int m = va.rows(), k = va.cols(), n = vb.cols();
        Tensor out = Tensor::zeros({m, n});
        mm_acc_nn(va.data.data(), vb.data.data(), out.data.data(), m, k, n);
        return unop2(std::move(out), a, b, [m, k, n](TapeT & t, int32_t oi, int32_t ai, int32_t bi) {
            const Tensor & g  = t.nodes_[oi].grad;
            const Tensor & va = t.nodes_[ai].value;
            const Tensor & vb = t.nodes_[bi].value;
            t.accumulate(ai, [&](Tensor & ga) { mm_acc_nt(g.data.data(), vb.data.data(), ga.data.data(), m, n, k); });
            t.accumulate(bi, [&](Tensor & gb) { mm_acc_tn(va.data.data(), g.data.data(), gb.data.data(), m, k, n); });
        });
    }

    // x [m,n] + row vector b [n]
    Var bias_add(Var x, Var b) {
        const Tensor & vx = value(x), & vb = value(b);
        require(vx.rank() == 2 && vb.rank() == 1 && vb.dim(0) == vx.cols(),
                error_kind::shape, "bias_add: shape mismatch");
        Tensor out = vx;
        const int m = vx.rows(), n = vx.cols();
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) out.at2(i, j) += vb[j];
        }
        return unop2(std::move(out), x, b, [m, n](TapeT & t, int32_t oi, int32_t xi, int32_t bi) {
            const Tensor & g = t.nodes_[oi].grad;
            t.accumulate(xi, [&](Tensor & gx) { for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i]; });
            t.accumulate(bi, [&](Tensor & gb) {
                for (int i = 0; i < m; ++i) {
                    for (int j = 0; j < n; ++j) gb[j] += g[(int64_t)i * n + j];
                }
            });
        });
    }

    // layer norm over the last dim of a 2D tensor, affine params gain/bias [n]
    Var layernorm(Var x, Var gain, Var bias) {
        const Tensor & vx = value(x), & vg = value(gain), & vb = value(bias);
        require(vx.rank() == 2 && vg.rank() == 1 && vb.rank() == 1 &&
                vg.dim(0) == vx.cols() && vb.dim(0) == vx.cols(),
                error_kind::shape, "layernorm: shape mismatch");
        const int m = vx.rows(), n = vx.cols();
        const double eps = 1e-5;
        Tensor out = Tensor::zeros({m, n});
        for (int i = 0; i < m; ++i) {
            double mu = 0;
            for (int j = 0; j < n; ++j) mu += (double)vx.at2(i, j);
            mu /= n;
            double var = 0;
            for (int j = 0; j < n; ++j) {
                const double d = (double)vx.at2(i, j) - mu;
                var += d * d;
            }
            var /= n;
            const double inv = 1.0 / std::sqrt(var + eps);
            for (int j = 0; j < n; ++j) {
                out.at2(i, j) = (T)((((double)vx.at2(i, j) - mu) * inv) * (double)vg[j] + (double)vb[j]);
            }
        }
        Var o = push(std::move(out), needs_grad(x) || needs_grad(gain) || needs_grad(bias), {x.i, gain.i, bias.i});
        if (node(o).requires_grad) {
            const int32_t oi = o.i, xi = x.i, gi = gain.i, bi = bias.i;
            node(o).backprop = [m, n, eps, oi, xi, gi, bi](TapeT & t) {
                const Tensor & g  = t.nodes_[oi].grad;
                const Tensor & vx = t.nodes_[xi].value;
                const Tensor & vg = t.nodes_[gi].value;
                for (int i = 0; i < m; ++i) {
                    double mu = 0;
                    for (int j = 0; j < n; ++j) mu += (double)vx.at2(i, j);
                    mu /= n;
                    double var = 0;
                    for (int j = 0; j < n; ++j) {
                        const double d = (double)vx.at2(i, j) - mu;
                        var += d * d;
                    }
                    var /= n;
                    const double inv = 1.0 / std::sqrt(var + eps);
                    // xhat, gdy and reductions for this row
                    double sum_gdy = 0, sum_gdy_xhat = 0;
                    std::vector<double> xhat((size_t)n), gdy((size_t)n);
                    for (int j = 0; j < n; ++j) {
                        xhat[(size_t)j] = ((double)vx.at2(i, j) - mu) * inv;
                        gdy[(size_t)j]  = (double)g.at2(i, j) * (double)vg[j];
                        sum_gdy += gdy[(size_t)j];
                        sum_gdy_xhat += gdy[(size_t)j] * xhat[(size_t)j];
                    }
                    t.accumulate(xi, [&](Tensor & gx) {
                        for (int j = 0; j < n; ++j) {
                            gx.at2(i, j) += (T)(inv * (gdy[(size_t)j] - sum_gdy / n - xhat[(size_t)j] * sum_gdy_xhat / n));
                        }
                    });
                    t.accumulate(gi, [&](Tensor & gg) {
                        for (int j = 0; j < n; ++j) gg[j] += (T)((double)g.at2(i, j) * xhat[(size_t)j]);
                    });
                    t.accumulate(bi, [&](Tensor & gb) {
                        for (int j = 0; j < n; ++j) gb[j] += g.at2(i, j);
                    });
                }
            };
        }
        return o;
    }

    // multi-head scaled dot-product attention.
    // q [Lq,D], k/v [Lk,D]; key_valid marks usable key positions (padding
    // masked out); empty vector = all valid.
    Var mha(Var q, Var k, Var v, int heads, std::vector<uint8_t> key_valid) {
        const Tensor & vq = value(q), & vk = value(k), & vv = value(v);
        require(vq.rank() == 2 && vk.rank() == 2 && vv.rank() == 2, error_kind::shape, "mha: rank");
        const int Lq = vq.rows(), Lk = vk.rows(), D = vq.cols();
        require(vk.cols() == D && vv.cols() == D && vv.rows() == Lk, error_kind::shape, "mha: dims");
        require(D % heads == 0, error_kind::shape, "mha: D % heads != 0");
        require(key_valid.empty() || (int)key_valid.size() == Lk, error_kind::shape, "mha: mask length");
        const int Dh = D / heads;
        const double alpha = 1.0 / std::sqrt((double)Dh);

        Tensor out = Tensor::zeros({Lq, D});
        std::vector<T> P((size_t)heads * Lq * Lk);    // row-softmax attention weights, kept for backward
        // head slices copied contiguous so both products run on the blocked
        // kernels; K is gathered transposed to keep the score product's inner
        // loop over the long Lk axis. gather/scatter cost is negligible.
        std::vector<T> qh((size_t)Lq * Dh), khT((size_t)Dh * Lk), vh((size_t)Lk * Dh);
        std::vector<T> oh((size_t)Lq * Dh), sc((size_t)Lq * Lk);
        for (int h = 0; h < heads; ++h) {
            for (int i = 0; i < Lq; ++i) {
                std::memcpy(qh.data() + (size_t)i * Dh, vq.data.data() + (size_t)i * D + h * Dh,
                            sizeof(T) * (size_t)Dh);
            }
            for (int j = 0; j < Lk; ++j) {
                const T * krow = vk.data.data() + (size_t)j * D + h * Dh;
                for (int d = 0; d < Dh; ++d) khT[(size_t)d * Lk + j] = krow[d];
                std::memcpy(vh.data() + (size_t)j * Dh, vv.data.data() + (size_t)j * D + h * Dh,
                            sizeof(T) * (size_t)Dh);
            }
            std::fill(sc.begin(), sc.end(), T(0));
            mm_acc_nn(qh.data(), khT.data(), sc.data(), Lq, Dh, Lk);
            for (int i = 0; i < Lq; ++i) {
                T * prow = P.data() + ((size_t)h * Lq + i) * Lk;
                const T * srow = sc.data() + (size_t)i * Lk;
                double mx = -1e300;
                for (int j = 0; j < Lk; ++j) {
                    if (!key_valid.empty() && !key_valid[(size_t)j]) continue;
                    mx = std::max(mx, (double)srow[j] * alpha);
                }
                double denom = 0;
                for (int j = 0; j < Lk; ++j) {
                    if (!key_valid.empty() && !key_valid[(size_t)j]) {
                        prow[j] = 0;
                        continue;
                    }
                    const double e = std::exp((double)srow[j] * alpha - mx);
                    prow[j] = (T)e;
                    denom += e;
                }
                for (int j = 0; j < Lk; ++j) prow[j] = (T)((double)prow[j] / denom);
            }
            std::fill(oh.begin(), oh.end(), T(0));
            mm_acc_nn(P.data() + (size_t)h * Lq * Lk, vh.data(), oh.data(), Lq, Lk, Dh);
            for (int i = 0; i < Lq; ++i) {
                std::memcpy(out.data.data() + (size_t)i * D + h * Dh, oh.data() + (size_t)i * Dh,
                            sizeof(T) * (size_t)Dh);
            }
        }
        Var o = push(std::move(out), needs_grad(q) || needs_grad(k) || needs_grad(v), {q.i, k.i, v.i});
        if (node(o).requires_grad) {
            const int32_t oi = o.i, qi = q.i, ki = k.i, vi = v.i;
            node(o).backprop = [P = std::move(P), heads, Lq, Lk, D, Dh, alpha, oi, qi, ki, vi](TapeT & t) {
                const Tensor & g  = t.nodes_[oi].grad;
                const Tensor & vq = t.nodes_[qi].value;
                const Tensor & vk = t.nodes_[ki].value;
                const Tensor & vv = t.nodes_[vi].value;
                t.ensure_grad(qi);
                t.ensure_grad(ki);
                t.ensure_grad(vi);
                Tensor & gq = t.nodes_[qi].grad;
                Tensor & gk = t.nodes_[ki].grad;
                Tensor & gv = t.nodes_[vi].grad;
                const bool need_q = t.nodes_[qi].requires_grad;
                const bool need_k = t.nodes_[ki].requires_grad;
                const bool need_v = t.nodes_[vi].requires_grad;
                std::vector<T> qh((size_t)Lq * Dh), kh((size_t)Lk * Dh), vhT((size_t)Dh * Lk);
                std::vector<T> gh((size_t)Lq * Dh), dP((size_t)Lq * Lk), dS((size_t)Lq * Lk);
                std::vector<T> tmp((size_t)std::max(Lq, Lk) * Dh);
                for (int h = 0; h < heads; ++h) {
                    const T * Ph = P.data() + (size_t)h * Lq * Lk;
                    for (int i = 0; i < Lq; ++i) {
                        std::memcpy(qh.data() + (size_t)i * Dh, vq.data.data() + (size_t)i * D + h * Dh,
                                    sizeof(T) * (size_t)Dh);
                        std::memcpy(gh.data() + (size_t)i * Dh, g.data.data() + (size_t)i * D + h * Dh,
                                    sizeof(T) * (size_t)Dh);
                    }
                    for (int j = 0; j < Lk; ++j) {
                        std::memcpy(kh.data() + (size_t)j * Dh, vk.data.data() + (size_t)j * D + h * Dh,
                                    sizeof(T) * (size_t)Dh);
                        const T * vrow = vv.data.data() + (size_t)j * D + h * Dh;
                        for (int d = 0; d < Dh; ++d) vhT[(size_t)d * Lk + j] = vrow[d];
                    }
                    // dP = G V^T; dS = P o (dP - rowsum(dP o P)), alpha folded in
                    std::fill(dP.begin(), dP.end(), T(0));
                    mm_acc_nn(gh.data(), vhT.data(), dP.data(), Lq, Dh, Lk);
                    for (int i = 0; i < Lq; ++i) {
                        const T * prow = Ph + (size_t)i * Lk;
                        const T * dprow = dP.data() + (size_t)i * Lk;
                        T * dsrow = dS.data() + (size_t)i * Lk;
                        double dot_dp_p = 0;
#pragma omp simd reduction(+ : dot_dp_p)
                        for (int j = 0; j < Lk; ++j) dot_dp_p += (double)dprow[j] * (double)prow[j];
                        for (int j = 0; j < Lk; ++j) {
                            dsrow[j] = (T)((double)prow[j] * ((double)dprow[j] - dot_dp_p) * alpha);
                        }
                    }
                    auto scatter_add = [&](Tensor & dst, int rows) {
                        for (int r = 0; r < rows; ++r) {
                            T * drow = dst.data.data() + (size_t)r * D + h * Dh;
                            const T * srow = tmp.data() + (size_t)r * Dh;
#pragma omp simd
                            for (int d = 0; d < Dh; ++d) drow[d] += srow[d];
                        }
                    };
                    if (need_v) {
                        std::fill(tmp.begin(), tmp.end(), T(0));
                        mm_acc_tn(Ph, gh.data(), tmp.data(), Lq, Lk, Dh);
                        scatter_add(gv, Lk);
                    }
                    if (need_q) {
                        std::fill(tmp.begin(), tmp.end(), T(0));
                        mm_acc_nn(dS.data(), kh.data(), tmp.data(), Lq, Lk, Dh);
                        scatter_add(gq, Lq);
                    }
                    if (need_k) {
                        std::fill(tmp.begin(), tmp.end(), T(0));
                        mm_acc_tn(dS.data(), qh.data(), tmp.data(), Lq, Lk, Dh);
                        scatter_add(gk, Lk);
                    }
                }
            };
        }
        return o;
    }

    // gather rows of a [V,D] table; backward scatter-adds
    Var embed_rows(Var table, std::vector<int> indices) {
        const Tensor & vt = value(table);
        require(vt.rank() == 2, error_kind::shape, "embed_rows: table must be 2D");
        const int V = vt.rows(), D = vt.cols();
        const int L = (int)indices.size();
        Tensor out = Tensor::zeros({L, D});
        for (int i = 0; i < L; ++i) {
            require(indices[(size_t)i] >= 0 && indices[(size_t)i] < V, error_kind::token,
                    "embed_rows: index " + std::to_string(indices[(size_t)i]) + " out of range [0," + std::to_string(V) + ")");
            std::memcpy(out.data.data() + (size_t)i * D, vt.data.data() + (size_t)indices[(size_t)i] * D, sizeof(T) * (size_t)D);
        }
        Var o = push(std::move(out), needs_grad(table), {table.i});
        if (node(o).requires_grad) {
            const int32_t oi = o.i, ti = table.i;
            node(o).backprop = [idx = std::move(indices), D, oi, ti](TapeT & t) {
                const Tensor & g = t.nodes_[oi].grad;
                t.accumulate(ti, [&](Tensor & gt) {
                    for (size_t i = 0; i < idx.size(); ++i) {
                        T * dst = gt.data.data() + (size_t)idx[i] * D;
                        const T * src = g.data.data() + i * D;
                        for (int d = 0; d < D; ++d) dst[d] += src[d];
                    }
                });
            };
        }
        return o;
    }

    Var concat_rows(Var a, Var b) {
        const Tensor & va = value(a), & vb = value(b);
        require(va.rank() == 2 && vb.rank() == 2 && va.cols() == vb.cols(),
                error_kind::shape, "concat_rows: shape mismatch");
        const int ra = va.rows(), rb = vb.rows(), nd = va.cols();
        Tensor out = Tensor::zeros({ra + rb, nd});
        std::memcpy(out.data.data(), va.data.data(), sizeof(T) * va.data.size());
        std::memcpy(out.data.data() + va.data.size(), vb.data.data(), sizeof(T) * vb.data.size());
        return unop2(std::move(out), a, b, [ra, rb, nd](TapeT & t, int32_t oi, int32_t ai, int32_t bi) {
            const Tensor & g = t.nodes_[oi].grad;
            t.accumulate(ai, [&](Tensor & ga) {
                for (int64_t i = 0; i < (int64_t)ra * nd; ++i) ga[i] += g[i];
            });
            t.accumulate(bi, [&](Tensor & gb) {
                const int64_t off = (int64_t)ra * nd;
                for (int64_t i = 0; i < (int64_t)rb * nd; ++i) gb[i] += g[off + i];
            });
        });
    }

    // [C,H,W] -> [H*W, C] (cell-major rows, used between conv stacks and
    // token-space ops)
    Var chw_to_rows(Var x) {
        const Tensor & vx = value(x);
        require(vx.rank() == 3, error_kind::shape, "chw_to_rows: rank");
        const int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
        Tensor out = Tensor::zeros({H * W, C});
        for (int c = 0; c < C; ++c) {
            for (int p = 0; p < H * W; ++p) out.at2(p, c) = vx[(int64_t)c * H * W + p];
        }
        return unop(std::move(out), x, [C, H, W](TapeT & t, int32_t oi, int32_t xi) {
            const Tensor & g = t.nodes_[oi].grad;
            t.accumulate(xi, [&](Tensor & gx) {
                for (int c = 0; c < C; ++c) {
                    for (int p = 0; p < H * W; ++p) gx[(int64_t)c * H * W + p] += g.at2(p, c);
                }
            });
        });
    }

    // [H*W, C] -> [C,H,W]
    Var rows_to_chw(Var x, int H, int W) {
        const Tensor & vx = value(x);
        require(vx.rank() == 2 && vx.rows() == H * W, error_kind::shape, "rows_to_chw: shape");
        const int C = vx.cols();
        Tensor out = Tensor::zeros({C, H, W});
        for (int c = 0; c < C; ++c) {
            for (int p = 0; p < H * W; ++p) out[(int64_t)c * H * W + p] = vx.at2(p, c);
        }
        return unop(std::move(out), x, [C, H, W](TapeT & t, int32_t oi, int32_t xi) {
            const Tensor & g = t.nodes_[oi].grad;
            t.accumulate(xi, [&](Tensor & gx) {
                for (int c = 0; c < C; ++c) {
                    for (int p = 0; p < H * W; ++p) gx.at2(p, c) += g[(int64_t)c * H * W + p];
                }
            });
        });
    }

    // conv2d, x [Cin,H,W], w [Cout,Cin,kh,kw], optional bias [Cout]
    // im2col + matmul; stride 1 or 2, symmetric zero padding
    Var conv2d(Var x, Var w, Var b, int stride, int pad) {
        const Tensor & vx = value(x), & vw = value(w);
        require(vx.rank() == 3 && vw.rank() == 4 && vw.dim(1) == vx.dim(0),
                error_kind::shape, "conv2d: shape mismatch " + shape_str(vx) + " w " + shape_str(vw));
        const int Cin = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
        const int Cout = vw.dim(0), kh = vw.dim(2), kw = vw.dim(3);
        const int Ho = (H + 2 * pad - kh) / stride + 1;
        const int Wo = (W + 2 * pad - kw) / stride + 1;
        require(Ho > 0 && Wo > 0, error_kind::shape, "conv2d: empty output");
        const int K = Cin * kh * kw, N = Ho * Wo;

        std::vector<T> col((size_t)K * N);
        im2col(vx, kh, kw, stride, pad, Ho, Wo, col.data());
        Tensor out = Tensor::zeros({Cout, Ho, Wo});
        mm_acc_nn(vw.data.data(), col.data(), out.data.data(), Cout, K, N);
        if (b.valid()) {
            const Tensor & vb = value(b);
            require(vb.rank() == 1 && vb.dim(0) == Cout, error_kind::shape, "conv2d: bias shape");
            for (int c = 0; c < Cout; ++c) {
                for (int p = 0; p < N; ++p) out[(int64_t)c * N + p] += vb[c];
            }
        }
        const bool rg = needs_grad(x) || needs_grad(w) || (b.valid() && needs_grad(b));
        Var o = push(std::move(out), rg, b.valid() ? std::vector<int32_t>{x.i, w.i, b.i} : std::vector<int32_t>{x.i, w.i});
        if (node(o).requires_grad) {
            const int32_t oi = o.i, xi = x.i, wi = w.i, bi = b.valid() ? b.i : -1;
            node(o).backprop = [Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, K, N, oi, xi, wi, bi](TapeT & t) {
                const Tensor & g  = t.nodes_[oi].grad;
                const Tensor & vx = t.nodes_[xi].value;
                const Tensor & vw = t.nodes_[wi].value;
                if (bi >= 0 && t.nodes_[bi].requires_grad) {
                    t.accumulate(bi, [&](Tensor & gb) {
                        for (int c = 0; c < Cout; ++c) {
                            for (int p = 0; p < N; ++p) gb[c] += g[(int64_t)c * N + p];
                        }
                    });
                }
                if (t.nodes_[wi].requires_grad) {
                    std::vector<T> col((size_t)K * N);
                    im2col(vx, kh, kw, stride, pad, Ho, Wo, col.data());
                    t.accumulate(wi, [&](Tensor & gw) {
                        mm_acc_nt(g.data.data(), col.data(), gw.data.data(), Cout, N, K);
                    });
                }
                if (t.nodes_[xi].requires_grad) {
                    std::vector<T> dcol((size_t)K * N, T(0));
                    mm_acc_tn(vw.data.data(), g.data.data(), dcol.data(), Cout, K, N);
                    t.accumulate(xi, [&](Tensor & gx) {
                        col2im_acc(dcol.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo, gx);
                    });
                }
            };
        }
        return o;
    }

    Var upsample2x(Var x) {
        const Tensor & vx = value(x);
        require(vx.rank() == 3, error_kind::shape, "upsample2x: rank");
        const int C = vx.dim(0), H = vx.dim(1), W = vx.dim(2);
        Tensor out = Tensor::zeros({C, 2 * H, 2 * W});
        for (int c = 0; c < C; ++c) {
            for (int y = 0; y < 2 * H; ++y) {
                for (int x2 = 0; x2 < 2 * W; ++x2) {
                    out.at3(c, y, x2) = vx.at3(c, y / 2, x2 / 2);
                }
            }
        }
        return unop(std::move(out), x, [C, H, W](TapeT & t, int32_t oi, int32_t xi) {
            const Tensor & g = t.nodes_[oi].grad;
            t.accumulate(xi, [&](Tensor & gx) {
                for (int c = 0; c < C; ++c) {
                    for (int y = 0; y < 2 * H; ++y) {
                        for (int x2 = 0; x2 < 2 * W; ++x2) {
                            gx.at3(c, y / 2, x2 / 2) += g.at3(c, y, x2);
                        }
                    }
                }
            });
        });
    }

    // ---- reductions / losses ----

    Var mean_all(Var a) {
        const Tensor & va = value(a);
        double s = 0;
        for (const T & x : va.data) s += (double)x;
        const int64_t n = va.size();
        Tensor out = Tensor::from({1}, {(T)(s / (double)n)});
        return unop(std::move(out), a, [n](TapeT & t, int32_t oi, int32_t ai) {
            const T g = t.nodes_[oi].grad[0];
            t.accumulate(ai, [&](Tensor & ga) {
                const T c = (T)((double)g / (double)n);
                for (auto & x : ga.data) x += c;
            });
        });
    }

    Var sum_all(Var a) {
        const Tensor & va = value(a);
        double s = 0;
        for (const T & x : va.data) s += (double)x;
        Tensor out = Tensor::from({1}, {(T)s});
        return unop(std::move(out), a, [](TapeT & t, int32_t oi, int32_t ai) {
            const T g = t.nodes_[oi].grad[0];
            t.accumulate(ai, [&](Tensor & ga) { for (auto & x : ga.data) x += g; });
        });
    }

    Var l1_loss(Var a, Var b) {
        const Tensor & va = value(a), & vb = value(b);
        require(va.same_shape(vb), error_kind::shape, "l1_loss: shape mismatch");
        const int64_t n = va.size();
        double s = 0;
        for (int64_t i = 0; i < n; ++i) s += std::abs((double)va[i] - (double)vb[i]);
        Tensor out = Tensor::from({1}, {(T)(s / (double)n)});
        return unop2(std::move(out), a, b, [n](TapeT & t, int32_t oi, int32_t ai, int32_t bi) {
            const T g = t.nodes_[oi].grad[0];
            const Tensor & va = t.nodes_[ai].value;
            const Tensor & vb = t.nodes_[bi].value;
            const double c = (double)g / (double)n;
            t.accumulate(ai, [&](Tensor & ga) {
                for (int64_t i = 0; i < n; ++i) {
                    const double d = (double)va[i] - (double)vb[i];
                    ga[i] += (T)(d > 0 ? c : (d < 0 ? -c : 0));
                }
            });
            t.accumulate(bi, [&](Tensor & gb) {
                for (int64_t i = 0; i < n; ++i) {
                    const double d = (double)va[i] - (double)vb[i];
                    gb[i] += (T)(d > 0 ? -c : (d < 0 ? c : 0));
                }
            });
        });
    }

    Var mse_loss(Var a, Var b) {
        const Tensor & va = value(a), & vb = value(b);
        require(va.same_shape(vb), error_kind::shape, "mse_loss: shape mismatch");
        const int64_t n = va.size();
        double s = 0;
        for (int64_t i = 0; i < n; ++i) {
            const double d = (double)va[i] - (double)vb[i];
            s += d * d;
        }
        Tensor out = Tensor::from({1}, {(T)(s / (double)n)});
        return unop2(std::move(out), a, b, [n](TapeT & t, int32_t oi, int32_t ai, int32_t bi) {
            const T g = t.nodes_[oi].grad[0];
            const Tensor & va = t.nodes_[ai].value;
            const Tensor & vb = t.nodes_[bi].value;
            const double c = 2.0 * (double)g / (double)n;
            t.accumulate(ai, [&](Tensor & ga) {
                for (int64_t i = 0; i < n; ++i) ga[i] += (T)(c * ((double)va[i] - (double)vb[i]));
            });
            t.accumulate(bi, [&](Tensor & gb) {
                for (int64_t i = 0; i < n; ++i) gb[i] -= (T)(c * ((double)va[i] - (double)vb[i]));
            });
        });
    }

    // hinge loss mean(max(0, 1 - sign*x)); sign +1 for real, -1 for fake
    Var hinge(Var x, double sign) {
        const Tensor & vx = value(x);
        const int64_t n = vx.size();
        double s = 0;
        for (int64_t i = 0; i < n; ++i) s += std::max(0.0, 1.0 - sign * (double)vx[i]);
        Tensor out = Tensor::from({1}, {(T)(s / (double)n)});
        return unop(std::move(out), x, [n, sign](TapeT & t, int32_t oi, int32_t xi) {
            const T g = t.nodes_[oi].grad[0];
            const Tensor & vx = t.nodes_[xi].value;
            const double c = (double)g / (double)n;
            t.accumulate(xi, [&](Tensor & gx) {
                for (int64_t i = 0; i < n; ++i) {
                    if (1.0 - sign * (double)vx[i] > 0) gx[i] += (T)(-sign * c);
                }
            });
        });
    }

    // mean of -log softmax(logits_row)[target] over rows where mask is true.
    // Empty mask yields loss 0 and sets *empty_mask_flag.
    Var masked_cross_entropy(Var logits, const std::vector<int> & targets,
                             const std::vector<uint8_t> & mask, bool * empty_mask_flag = nullptr) {
        const Tensor & vl = value(logits);
        require(vl.rank() == 2, error_kind::shape, "masked_cross_entropy: logits must be 2D");
        const int L = vl.rows(), K = vl.cols();
        require((int)targets.size() == L && (int)mask.size() == L, error_kind::shape,
                "masked_cross_entropy: targets/mask length mismatch");
        int n_masked = 0;
        double loss = 0;
        for (int i = 0; i < L; ++i) {
            if (!mask[(size_t)i]) continue;
            require(targets[(size_t)i] >= 0 && targets[(size_t)i] < K, error_kind::token,
                    "masked_cross_entropy: target out of codebook range");
            ++n_masked;
            loss += -row_log_prob(vl, i, targets[(size_t)i]);
        }
        if (empty_mask_flag) *empty_mask_flag = (n_masked == 0);
        Tensor out = Tensor::from({1}, {n_masked ? (T)(loss / n_masked) : T(0)});
        Var o = push(std::move(out), needs_grad(logits), {logits.i});
        if (node(o).requires_grad && n_masked > 0) {
            const int32_t oi = o.i, li = logits.i;
            node(o).backprop = [targets, mask, L, K, n_masked, oi, li](TapeT & t) {
                const T g = t.nodes_[oi].grad[0];
                const Tensor & vl = t.nodes_[li].value;
                const double c = (double)g / (double)n_masked;
                t.accumulate(li, [&](Tensor & gl) {
                    for (int i = 0; i < L; ++i) {
                        if (!mask[(size_t)i]) continue;
                        double mx = -1e300;
                        for (int j = 0; j < K; ++j) mx = std::max(mx, (double)vl.at2(i, j));
                        double denom = 0;
                        for (int j = 0; j < K; ++j) denom += std::exp((double)vl.at2(i, j) - mx);
                        for (int j = 0; j < K; ++j) {
                            const double p = std::exp((double)vl.at2(i, j) - mx) / denom;
                            gl.at2(i, j) += (T)(c * (p - (j == targets[(size_t)i] ? 1.0 : 0.0)));
                        }
                    }
                });
            };
        }
        return o;
    }

    // ---- backward ----

    void backward(Var loss) {
        require(grad_enabled_, error_kind::graph, "backward on a no-grad tape");
        Node & ln = node(loss);
        require(ln.value.size() == 1, error_kind::graph, "backward: loss must be scalar");
        require(ln.requires_grad, error_kind::graph, "backward: loss does not depend on any parameter");
        ensure_grad(loss.i);
        ln.grad.data[0] = T(1);
        for (int32_t i = loss.i; i >= 0; --i) {
            Node & n = nodes_[i];
            if (n.grad.data.empty() || !n.backprop) continue;
            n.backprop(*this);
        }
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(TapeT &)> backprop;
    };

    std::vector<Node> nodes_;
    bool grad_enabled_ = true;

    Node & node(Var v) {
        require(v.valid() && v.i < (int32_t)nodes_.size(), error_kind::graph, "invalid var");
        return nodes_[(size_t)v.i];
    }
    const Node & node(Var v) const {
        require(v.valid() && v.i < (int32_t)nodes_.size(), error_kind::graph, "invalid var");
        return nodes_[(size_t)v.i];
    }

    bool needs_grad(Var v) const { return node(v).requires_grad; }

    Var push(Tensor value, bool requires_grad, std::vector<int32_t> /*inputs*/) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad && grad_enabled_;
        nodes_.push_back(std::move(n));
        return Var{(int32_t)nodes_.size() - 1};
    }

    void ensure_grad(int32_t i) {
        Node & n = nodes_[(size_t)i];
        if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    }

    template <class F>
    void accumulate(int32_t i, F && f) {
        if (!nodes_[(size_t)i].requires_grad) return;
        ensure_grad(i);
        f(nodes_[(size_t)i].grad);
    }

    template <class F>
    Var unop(Tensor out, Var a, F && back) {
        Var o = push(std::move(out), needs_grad(a), {a.i});
        if (node(o).requires_grad) {
            const int32_t oi = o.i, ai = a.i;
            node(o).backprop = [back, oi, ai](TapeT & t) { back(t, oi, ai); };
        }
        return o;
    }

    template <class F>
    Var unop2(Tensor out, Var a, Var b, F && back) {
        Var o = push(std::move(out), needs_grad(a) || needs_grad(b), {a.i, b.i});
        if (node(o).requires_grad) {
            const int32_t oi = o.i, ai = a.i, bi = b.i;
            node(o).backprop = [back, oi, ai, bi](TapeT & t) { back(t, oi, ai, bi); };
        }
        return o;
    }

    static double row_log_prob(const Tensor & logits, int row, int target) {
        const int K = logits.cols();
        double mx = -1e300;
        for (int j = 0; j < K; ++j) mx = std::max(mx, (double)logits.at2(row, j));
        double denom = 0;
        for (int j = 0; j < K; ++j) denom += std::exp((double)logits.at2(row, j) - mx);
        return ((double)logits.at2(row, target) - mx) - std::log(denom);
    }

    static void im2col(const Tensor & x, int kh, int kw, int stride, int pad,
                       int Ho, int Wo, T * col) {
        const int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
        const int N = Ho * Wo;
        for (int c = 0; c < Cin; ++c) {
            for (int dy = 0; dy < kh; ++dy) {
                for (int dx = 0; dx < kw; ++dx) {
                    T * crow = col + ((size_t)(c * kh + dy) * kw + dx) * N;
                    for (int oy = 0; oy < Ho; ++oy) {
                        const int iy = oy * stride - pad + dy;
                        if (iy < 0 || iy >= H) {
                            for (int ox = 0; ox < Wo; ++ox) crow[oy * Wo + ox] = T(0);
                            continue;
                        }
                        for (int ox = 0; ox < Wo; ++ox) {
                            const int ix = ox * stride - pad + dx;
                            crow[oy * Wo + ox] = (ix < 0 || ix >= W) ? T(0) : x.at3(c, iy, ix);
                        }
                    }
                }
            }
        }
    }

    static void col2im_acc(const T * col, int Cin, int H, int W, int kh, int kw,
                           int stride, int pad, int Ho, int Wo, Tensor & gx) {
        const int N = Ho * Wo;
        for (int c = 0; c < Cin; ++c) {
            for (int dy = 0; dy < kh; ++dy) {
                for (int dx = 0; dx < kw; ++dx) {
                    const T * crow = col + ((size_t)(c * kh + dy) * kw + dx) * N;
                    for (int oy = 0; oy < Ho; ++oy) {
                        const int iy = oy * stride - pad + dy;
                        if (iy < 0 || iy >= H) continue;
                        for (int ox = 0; ox < Wo; ++ox) {
                            const int ix = ox * stride - pad + dx;
                            if (ix < 0 || ix >= W) continue;
                            gx.at3(c, iy, ix) += crow[oy * Wo + ox];
                        }
                    }
                }
            }
        }
    }
};

using Tape  = TapeT<float>;
using DTape = TapeT<double>;

} // namespace musekit
