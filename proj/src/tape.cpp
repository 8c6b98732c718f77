#include "trsp/tape.hpp"

#include <algorithm>
#include <cmath>

namespace trsp {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// C[m,n] += A[m,k] · B[k,n]
void mm_nn(double* c, const double* a, const double* b,
           std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

// C[m,n] += A[m,k] · Bᵀ where B is [n,k]
void mm_nt(double* c, const double* a, const double* b,
           std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * n + j] += acc;
        }
    }
}

// C[m,n] += Aᵀ · B where A is [k,m], B is [k,n]
void mm_tn(double* c, const double* a, const double* b,
           std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double api = a[p * m + i];
            if (api == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
        }
    }
}

}  // namespace

Tape::NodeId Tape::push(Tensor value, Parameter* param) {
    Node node;
    node.value = std::move(value);
    node.param = param;
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Tape::grad_of(NodeId id) {
    Node& node = nodes_[id];
    if (!node.grad_live) {
        node.grad = Tensor::zeros(node.value.shape());
        node.grad_live = true;
    }
    return node.grad;
}

Tape::NodeId Tape::leaf(Parameter& p) {
    check_finite(p.value, "leaf");
    return push(p.value, &p);
}

Tape::NodeId Tape::constant(Tensor v) {
    check_finite(v, "constant");
    return push(std::move(v));
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b, bool trans_b) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    if (av.rank() < 2 || bv.rank() < 2) throw InvariantError("matmul: rank < 2");
    const std::size_t m = av.shape()[av.rank() - 2];
    const std::size_t k = av.shape()[av.rank() - 1];
    const std::size_t bk = trans_b ? bv.shape()[bv.rank() - 1] : bv.shape()[bv.rank() - 2];
    const std::size_t n = trans_b ? bv.shape()[bv.rank() - 2] : bv.shape()[bv.rank() - 1];
    if (k != bk) throw InvariantError("matmul: inner extents mismatch");
    const std::size_t batches = av.size() / (m * k);
    const bool b_batched = bv.rank() > 2;
    if (b_batched && bv.size() / (bk * n) != batches) {
        throw InvariantError("matmul: leading extents mismatch");
    }

    std::vector<std::size_t> out_shape(av.shape().begin(), av.shape().end() - 1);
    out_shape.push_back(n);
    Tensor out(out_shape);
    for (std::size_t s = 0; s < batches; ++s) {
        const double* ap = av.data() + s * m * k;
        const double* bp = bv.data() + (b_batched ? s * k * n : 0);
        double* cp = out.data() + s * m * n;
        if (trans_b) {
            mm_nt(cp, ap, bp, m, k, n);
        } else {
            mm_nn(cp, ap, bp, m, k, n);
        }
    }
    macs_ += static_cast<std::uint64_t>(batches) * m * k * n;
    check_finite(out, "matmul");

    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, a, b, trans_b, m, k, n, batches, b_batched]() {
        const Tensor& g = nodes_[id].grad;
        const Tensor& av2 = nodes_[a].value;
        const Tensor& bv2 = nodes_[b].value;
        Tensor& ga = grad_of(a);
        Tensor& gb = grad_of(b);
        for (std::size_t s = 0; s < batches; ++s) {
            const double* gp = g.data() + s * m * n;
            const double* ap = av2.data() + s * m * k;
            const double* bp = bv2.data() + (b_batched ? s * k * n : 0);
            double* gap = ga.data() + s * m * k;
            double* gbp = gb.data() + (b_batched ? s * k * n : 0);
            if (trans_b) {
                mm_nn(gap, gp, bp, m, n, k);   // dA += dC · B        (B is [n,k])
                mm_tn(gbp, gp, ap, n, m, k);   // dB += dCᵀ · A
            } else {
                mm_nt(gap, gp, bp, m, n, k);   // dA += dC · Bᵀ
                mm_tn(gbp, ap, gp, k, m, n);   // dB += Aᵀ · dC
            }
        }
    };
    return id;
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    if (!av.same_shape(bv)) throw InvariantError("add: shape mismatch");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    check_finite(out, "add");
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, a, b]() {
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad_of(a);
        Tensor& gb = grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] += g[i];
        }
    };
    return id;
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    if (!av.same_shape(bv)) throw InvariantError("sub: shape mismatch");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    check_finite(out, "sub");
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, a, b]() {
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad_of(a);
        Tensor& gb = grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
            gb[i] -= g[i];
        }
    };
    return id;
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
    const Tensor& av = nodes_[a].value;
    const Tensor& bv = nodes_[b].value;
    if (!av.same_shape(bv)) throw InvariantError("mul: shape mismatch");
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    check_finite(out, "mul");
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, a, b]() {
        const Tensor& g = nodes_[id].grad;
        const Tensor& av2 = nodes_[a].value;
        const Tensor& bv2 = nodes_[b].value;
        Tensor& ga = grad_of(a);
        Tensor& gb = grad_of(b);
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * bv2[i];
            gb[i] += g[i] * av2[i];
        }
    };
    return id;
}

Tape::NodeId Tape::scale(NodeId a, double c) {
    const Tensor& av = nodes_[a].value;
    Tensor out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    check_finite(out, "scale");
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, a, c]() {
        const Tensor& g = nodes_[id].grad;
        Tensor& ga = grad_of(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    };
    return id;
}

Tape::NodeId Tape::add_bias(NodeId x, NodeId b) {
    const Tensor& xv = nodes_[x].value;
    const Tensor& bv = nodes_[b].value;
    const std::size_t d = xv.last_extent();
    if (bv.rank() != 1 || bv.size() != d) throw InvariantError("add_bias: bias shape mismatch");
    Tensor out(xv.shape());
    const std::size_t rows = xv.size() / d;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] + bv[j];
    }
    check_finite(out, "add_bias");
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, x, b, d, rows]() {
        const Tensor& g = nodes_[id].grad;
        Tensor& gx = grad_of(x);
        Tensor& gb = grad_of(b);
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                gx[r * d + j] += g[r * d + j];
                gb[j] += g[r * d + j];
            }
        }
    };
    return id;
}

Tape::NodeId Tape::gelu(NodeId x) {
    const Tensor& xv = nodes_[x].value;
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = xv[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    check_finite(out, "gelu");
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, x]() {
        const Tensor& g = nodes_[id].grad;
        const Tensor& xv2 = nodes_[x].value;
        Tensor& gx = grad_of(x);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = xv2[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    };
    return id;
}

Tape::NodeId Tape::softmax_lastaxis(NodeId x, bool causal) {
    const Tensor& xv = nodes_[x].value;
    const std::size_t d = xv.last_extent();
    if (causal) {
        if (xv.rank() < 2 || xv.shape()[xv.rank() - 2] != d) {
            throw InvariantError("softmax: causal mode needs square last two axes");
        }
    }
    const std::size_t rows = xv.size() / d;
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * d;
        double* o = out.data() + r * d;
        // In causal mode row index within its matrix bounds the support.
        const std::size_t limit = causal ? (r % d) + 1 : d;
        double mx = in[0];
        for (std::size_t j = 1; j < limit; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < limit; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (std::size_t j = 0; j < limit; ++j) o[j] /= sum;
        for (std::size_t j = limit; j < d; ++j) o[j] = 0.0;
    }
    check_finite(out, "softmax");
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, x, d, rows, causal]() {
        const Tensor& g = nodes_[id].grad;
        const Tensor& y = nodes_[id].value;
        Tensor& gx = grad_of(x);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g.data() + r * d;
            const double* yr = y.data() + r * d;
            double* gxr = gx.data() + r * d;
            const std::size_t limit = causal ? (r % d) + 1 : d;
            double dot = 0.0;
            for (std::size_t j = 0; j < limit; ++j) dot += gr[j] * yr[j];
            for (std::size_t j = 0; j < limit; ++j) gxr[j] += yr[j] * (gr[j] - dot);
        }
    };
    return id;
}

Tape::NodeId Tape::layernorm(NodeId x, NodeId gamma, NodeId beta, double eps) {
    if (eps <= 0.0) throw InvariantError("layernorm: epsilon must be positive");
    const Tensor& xv = nodes_[x].value;
    const Tensor& gv = nodes_[gamma].value;
    const Tensor& bv = nodes_[beta].value;
    const std::size_t d = xv.last_extent();
    if (gv.size() != d || bv.size() != d) throw InvariantError("layernorm: affine shape mismatch");
    const std::size_t rows = xv.size() / d;

    Tensor out(xv.shape());
    Tensor xhat(xv.shape());
    Tensor inv_std({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = in[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double istd = 1.0 / std::sqrt(var + eps);
        inv_std[r] = istd;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (in[j] - mean) * istd;
            xhat[r * d + j] = h;
            out[r * d + j] = gv[j] * h + bv[j];
        }
    }
    check_finite(out, "layernorm");
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, x, gamma, beta, d, rows,
                       xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
        const Tensor& g = nodes_[id].grad;
        const Tensor& gv2 = nodes_[gamma].value;
        Tensor& gx = grad_of(x);
        Tensor& gg = grad_of(gamma);
        Tensor& gb = grad_of(beta);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g.data() + r * d;
            const double* hr = xhat.data() + r * d;
            double* gxr = gx.data() + r * d;
            double sum_gy = 0.0;
            double sum_gyh = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double gy = gr[j] * gv2[j];
                sum_gy += gy;
                sum_gyh += gy * hr[j];
                gg[j] += gr[j] * hr[j];
                gb[j] += gr[j];
            }
            const double inv_d = 1.0 / static_cast<double>(d);
            for (std::size_t j = 0; j < d; ++j) {
                const double gy = gr[j] * gv2[j];
                gxr[j] += inv_std[r] * (gy - inv_d * sum_gy - hr[j] * inv_d * sum_gyh);
            }
        }
    };
    return id;
}

Tape::NodeId Tape::gather_rows(NodeId table, std::vector<std::size_t> ids,
                               std::vector<std::size_t> out_shape) {
    const Tensor& tv = nodes_[table].value;
    if (tv.rank() != 2) throw InvariantError("gather_rows: table must be rank-2");
    const std::size_t n_rows = tv.shape()[0];
    const std::size_t d = tv.shape()[1];
    std::size_t out_numel = 1;
    for (std::size_t e : out_shape) out_numel *= e;
    if (out_numel != ids.size() * d || out_shape.back() != d) {
        throw InvariantError("gather_rows: output shape mismatch");
    }
    for (std::size_t idx : ids) {
        if (idx >= n_rows) throw DataError("gather_rows: row id out of range");
    }
    Tensor out(std::move(out_shape));
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const double* src = tv.data() + ids[r] * d;
        std::copy(src, src + d, out.data() + r * d);
    }
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, table, d, ids = std::move(ids)]() {
        const Tensor& g = nodes_[id].grad;
        Tensor& gt = grad_of(table);
        for (std::size_t r = 0; r < ids.size(); ++r) {
            const double* src = g.data() + r * d;
            double* dst = gt.data() + ids[r] * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    };
    return id;
}

Tape::NodeId Tape::split_heads(NodeId x, std::size_t heads) {
    const Tensor& xv = nodes_[x].value;
    if (xv.rank() != 3) throw InvariantError("split_heads: expected [B,S,d]");
    const std::size_t b = xv.shape()[0];
    const std::size_t s = xv.shape()[1];
    const std::size_t d = xv.shape()[2];
    if (d % heads != 0) throw InvariantError("split_heads: d not divisible by heads");
    const std::size_t dh = d / heads;
    Tensor out({b, heads, s, dh});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t si = 0; si < s; ++si) {
                const double* src = xv.data() + (bi * s + si) * d + h * dh;
                double* dst = out.data() + ((bi * heads + h) * s + si) * dh;
                std::copy(src, src + dh, dst);
            }
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, x, b, s, d, heads, dh]() {
        const Tensor& g = nodes_[id].grad;
        Tensor& gx = grad_of(x);
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t si = 0; si < s; ++si) {
                    const double* src = g.data() + ((bi * heads + h) * s + si) * dh;
                    double* dst = gx.data() + (bi * s + si) * d + h * dh;
                    for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                }
    };
    return id;
}

Tape::NodeId Tape::merge_heads(NodeId x) {
    const Tensor& xv = nodes_[x].value;
    if (xv.rank() != 4) throw InvariantError("merge_heads: expected [B,H,S,dh]");
    const std::size_t b = xv.shape()[0];
    const std::size_t heads = xv.shape()[1];
    const std::size_t s = xv.shape()[2];
    const std::size_t dh = xv.shape()[3];
    const std::size_t d = heads * dh;
    Tensor out({b, s, d});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t si = 0; si < s; ++si) {
                const double* src = xv.data() + ((bi * heads + h) * s + si) * dh;
                double* dst = out.data() + (bi * s + si) * d + h * dh;
                std::copy(src, src + dh, dst);
            }
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, x, b, s, d, heads, dh]() {
        const Tensor& g = nodes_[id].grad;
        Tensor& gx = grad_of(x);
        for (std::size_t bi = 0; bi < b; ++bi)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t si = 0; si < s; ++si) {
                    const double* src = g.data() + (bi * s + si) * d + h * dh;
                    double* dst = gx.data() + ((bi * heads + h) * s + si) * dh;
                    for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                }
    };
    return id;
}

Tape::NodeId Tape::scale_by_element(NodeId x, NodeId vec, std::size_t idx) {
    const Tensor& xv = nodes_[x].value;
    const Tensor& vv = nodes_[vec].value;
    if (vv.rank() != 1 || idx >= vv.size()) throw InvariantError("scale_by_element: bad index");
    const double c = vv[idx];
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
    check_finite(out, "scale_by_element");
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, x, vec, idx, c]() {
        const Tensor& g = nodes_[id].grad;
        const Tensor& xv2 = nodes_[x].value;
        Tensor& gx = grad_of(x);
        Tensor& gv = grad_of(vec);
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            gx[i] += g[i] * c;
            acc += g[i] * xv2[i];
        }
        gv[idx] += acc;
    };
    return id;
}

Tape::NodeId Tape::cross_entropy(NodeId logits, std::vector<std::size_t> targets) {
    const Tensor& lv = nodes_[logits].value;
    const std::size_t vocab = lv.last_extent();
    const std::size_t rows = lv.size() / vocab;
    if (targets.size() != rows) throw InvariantError("cross_entropy: target count mismatch");
    for (std::size_t t : targets) {
        if (t >= vocab) throw DataError("cross_entropy: target id out of vocab range");
    }
    check_finite(lv, "cross_entropy(logits)");

    Tensor probs(lv.shape());
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* z = lv.data() + r * vocab;
        double* p = probs.data() + r * vocab;
        double mx = z[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, z[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            p[j] = std::exp(z[j] - mx);
            sum += p[j];
        }
        for (std::size_t j = 0; j < vocab; ++j) p[j] /= sum;
        total += (std::log(sum) + mx) - z[targets[r]];
    }
    Tensor out({1}, {total / static_cast<double>(rows)});
    check_finite(out, "cross_entropy");
    NodeId id = push(std::move(out));
    nodes_[id].back = [this, id, logits, vocab, rows,
                       probs = std::move(probs), targets = std::move(targets)]() {
        const double gscale = nodes_[id].grad[0] / static_cast<double>(rows);
        Tensor& gl = grad_of(logits);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* p = probs.data() + r * vocab;
            double* g = gl.data() + r * vocab;
            for (std::size_t j = 0; j < vocab; ++j) g[j] += gscale * p[j];
            g[targets[r]] -= gscale;
        }
    };
    return id;
}

Tape::NodeId Tape::l1_subset(NodeId vec, std::vector<std::size_t> idxs) {
    const Tensor& vv = nodes_[vec].value;
    if (vv.rank() != 1) throw InvariantError("l1_subset: expected rank-1");
    double total = 0.0;
    for (std::size_t i : idxs) {
        if (i >= vv.size()) throw InvariantError("l1_subset: index out of range");
        total += std::abs(vv[i]);
    }
    NodeId id = push(Tensor({1}, {total}));
    nodes_[id].back = [this, id, vec, idxs = std::move(idxs)]() {
        const double go = nodes_[id].grad[0];
        const Tensor& vv2 = nodes_[vec].value;
        Tensor& gv = grad_of(vec);
        for (std::size_t i : idxs) {
            const double s = vv2[i] > 0.0 ? 1.0 : (vv2[i] < 0.0 ? -1.0 : 0.0);
            gv[i] += go * s;
        }
    };
    return id;
}

Tape::NodeId Tape::norm_penalty(NodeId d, Norm flag) {
    const Tensor& dv = nodes_[d].value;
    check_finite(dv, "norm_penalty(input)");
    const std::size_t dim = dv.last_extent();
    const std::size_t rows = dv.size() / dim;
    const double inv_rows = 1.0 / static_cast<double>(rows);

    double total = 0.0;
    Tensor row_norms({rows});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* v = dv.data() + r * dim;
        if (flag == Norm::L1) {
            double s = 0.0;
            for (std::size_t j = 0; j < dim; ++j) s += std::abs(v[j]);
            total += s;
        } else {
            double s = 0.0;
            for (std::size_t j = 0; j < dim; ++j) s += v[j] * v[j];
            row_norms[r] = std::sqrt(s);
            total += row_norms[r];
        }
    }
    NodeId id = push(Tensor({1}, {total * inv_rows}));
    nodes_[id].back = [this, id, d, flag, dim, rows, inv_rows,
                       row_norms = std::move(row_norms)]() {
        const double go = nodes_[id].grad[0] * inv_rows;
        const Tensor& dv2 = nodes_[d].value;
        Tensor& gd = grad_of(d);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* v = dv2.data() + r * dim;
            double* g = gd.data() + r * dim;
            if (flag == Norm::L1) {
                for (std::size_t j = 0; j < dim; ++j) {
                    const double s = v[j] > 0.0 ? 1.0 : (v[j] < 0.0 ? -1.0 : 0.0);
                    g[j] += go * s;
                }
            } else if (row_norms[r] > 0.0) {
                const double inv_norm = 1.0 / row_norms[r];
                for (std::size_t j = 0; j < dim; ++j) g[j] += go * v[j] * inv_norm;
            }
            // zero-norm L2 vector: subgradient 0
        }
    };
    return id;
}

void Tape::backward(NodeId loss) {
    if (loss < 0 || loss >= static_cast<NodeId>(nodes_.size())) {
        throw InvariantError("backward: loss node not on this tape");
    }
    if (nodes_[loss].value.size() != 1) {
        throw InvariantError("backward: loss must be scalar");
    }
    if (backward_done_) {
        throw InvariantError("backward: tape already traversed; reset() first");
    }
    backward_done_ = true;
    grad_of(loss)[0] = 1.0;
    for (NodeId i = loss; i >= 0; --i) {
        Node& node = nodes_[i];
        if (node.grad_live && node.back) node.back();
    }
    for (Node& node : nodes_) {
        if (node.param != nullptr && node.grad_live) {
            Tensor& pg = node.param->grad;
            for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += node.grad[i];
        }
    }
}

void Tape::reset() {
    nodes_.clear();
    backward_done_ = false;
}

Adam::Adam(std::vector<Parameter*> params, Config cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Parameter* p : params_) {
        m_.push_back(Tensor::zeros(p->value.shape()));
        v_.push_back(Tensor::zeros(p->value.shape()));
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Parameter& p = *params_[pi];
        Tensor& m = m_[pi];
        Tensor& v = v_[pi];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
        check_finite(p.value, "adam_step");
        p.zero_grad();
    }
}

}  // namespace trsp
