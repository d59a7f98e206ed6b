#include "matquant/autodiff.hpp"

#include <cmath>
#include <memory>

namespace matquant {

namespace {

void require_same_tape(Var a, Var b) {
    if (a.tape != b.tape) throw ContractError("operands live on different tapes");
}

void require_vector_matches_last_dim(const Tensor& m, const Tensor& v, const char* what) {
    if (v.rank() != 1 || v.dim(0) != m.last_dim())
        throw DimensionError(std::string(what) + ": vector " + v.shape_str() +
                             " does not match last dim of " + m.shape_str());
}

}  // namespace

Var add(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape(a.value(), b.value(), "add");
    Tensor out(a.shape(), a.value().array() + b.value().array());
    int ai = a.id, bi = b.id;
    return a.tape->push("add", std::move(out), [ai, bi](Tape& t, const Tensor& g) {
        t.accum_grad(ai, g);
        t.accum_grad(bi, g);
    });
}

Var sub(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    Tensor out(a.shape(), a.value().array() - b.value().array());
    int ai = a.id, bi = b.id;
    return a.tape->push("sub", std::move(out), [ai, bi](Tape& t, const Tensor& g) {
        t.accum_grad(ai, g);
        t.accum_grad(bi, Tensor(g.shape(), -g.array()));
    });
}

Var mul(Var a, Var b) {
    require_same_tape(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out(a.shape(), a.value().array() * b.value().array());
    int ai = a.id, bi = b.id;
    return a.tape->push("mul", std::move(out), [ai, bi](Tape& t, const Tensor& g) {
        t.accum_grad(ai, Tensor(g.shape(), g.array() * t.value(bi).array()));
        t.accum_grad(bi, Tensor(g.shape(), g.array() * t.value(ai).array()));
    });
}

Var neg(Var a) {
    Tensor out(a.shape(), -a.value().array());
    int ai = a.id;
    return a.tape->push("neg", std::move(out), [ai](Tape& t, const Tensor& g) {
        t.accum_grad(ai, Tensor(g.shape(), -g.array()));
    });
}

Var square(Var a) {
    Tensor out(a.shape(), a.value().array().square());
    int ai = a.id;
    return a.tape->push("square", std::move(out), [ai](Tape& t, const Tensor& g) {
        t.accum_grad(ai, Tensor(g.shape(), 2.0 * g.array() * t.value(ai).array()));
    });
}

Var scale(Var a, Real k) {
    Tensor out(a.shape(), a.value().array() * k);
    int ai = a.id;
    return a.tape->push("scale", std::move(out), [ai, k](Tape& t, const Tensor& g) {
        t.accum_grad(ai, Tensor(g.shape(), g.array() * k));
    });
}

Var add_scalar(Var a, Real k) {
    Tensor out(a.shape(), a.value().array() + k);
    int ai = a.id;
    return a.tape->push("add_scalar", std::move(out), [ai](Tape& t, const Tensor& g) {
        t.accum_grad(ai, g);
    });
}

Var add_rowvec(Var m, Var v) {
    require_same_tape(m, v);
    require_vector_matches_last_dim(m.value(), v.value(), "add_rowvec");
    Tensor out = m.value();
    out.mat().rowwise() += v.value().array().matrix().transpose();
    int mi = m.id, vi = v.id;
    return m.tape->push("add_rowvec", std::move(out), [mi, vi](Tape& t, const Tensor& g) {
        t.accum_grad(mi, g);
        Tensor gv({t.value(vi).dim(0)});
        gv.array() = g.mat().colwise().sum().transpose().array();
        t.accum_grad(vi, gv);
    });
}

Var mul_rowvec(Var m, Var v) {
    require_same_tape(m, v);
    require_vector_matches_last_dim(m.value(), v.value(), "mul_rowvec");
    Tensor out = m.value();
    out.mat().array().rowwise() *= v.value().array().transpose();
    int mi = m.id, vi = v.id;
    return m.tape->push("mul_rowvec", std::move(out), [mi, vi](Tape& t, const Tensor& g) {
        Tensor gm = g;
        gm.mat().array().rowwise() *= t.value(vi).array().transpose();
        t.accum_grad(mi, gm);
        Tensor gv({t.value(vi).dim(0)});
        gv.array() = (g.mat().array() * t.value(mi).mat().array()).colwise().sum().transpose();
        t.accum_grad(vi, gv);
    });
}

Var div_rowvec(Var m, Var v) {
    require_same_tape(m, v);
    require_vector_matches_last_dim(m.value(), v.value(), "div_rowvec");
    if ((v.value().array() == 0.0).any()) throw ContractError("div_rowvec: zero divisor");
    Tensor out = m.value();
    out.mat().array().rowwise() /= v.value().array().transpose();
    int mi = m.id, vi = v.id;
    return m.tape->push("div_rowvec", std::move(out), [mi, vi](Tape& t, const Tensor& g) {
        const ArrayX& vv = t.value(vi).array();
        Tensor gm = g;
        gm.mat().array().rowwise() /= vv.transpose();
        t.accum_grad(mi, gm);
        Tensor gv({t.value(vi).dim(0)});
        gv.array() = -(g.mat().array() * t.value(mi).mat().array()).colwise().sum().transpose() /
                     (vv * vv);
        t.accum_grad(vi, gv);
    });
}

Var mul_colvec(Var m, Var v) {
    require_same_tape(m, v);
    const Tensor& mv = m.value();
    if (v.value().rank() != 1 || v.value().dim(0) != mv.rows_flat())
        throw DimensionError("mul_colvec: vector does not match row count");
    Tensor out = mv;
    out.mat().array().colwise() *= v.value().array();
    int mi = m.id, vi = v.id;
    return m.tape->push("mul_colvec", std::move(out), [mi, vi](Tape& t, const Tensor& g) {
        Tensor gm = g;
        gm.mat().array().colwise() *= t.value(vi).array();
        t.accum_grad(mi, gm);
        Tensor gv({t.value(vi).dim(0)});
        gv.array() = (g.mat().array() * t.value(mi).mat().array()).rowwise().sum();
        t.accum_grad(vi, gv);
    });
}

Var clamp_min(Var a, Real lo) {
    Tensor out(a.shape(), a.value().array().max(lo));
    int ai = a.id;
    return a.tape->push("clamp_min", std::move(out), [ai, lo](Tape& t, const Tensor& g) {
        Tensor ga(g.shape(), (t.value(ai).array() > lo).cast<Real>() * g.array());
        t.accum_grad(ai, ga);
    });
}

Var matmul(Var a, Var b) {
    require_same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    av.require_rank(2);
    bv.require_rank(2);
    if (av.dim(1) != bv.dim(0))
        throw DimensionError("matmul: inner dims disagree " + av.shape_str() + " x " +
                             bv.shape_str());
    Tensor out({av.dim(0), bv.dim(1)});
    out.mat2d().noalias() = av.mat2d() * bv.mat2d();
    int ai = a.id, bi = b.id;
    return a.tape->push("matmul", std::move(out), [ai, bi](Tape& t, const Tensor& g) {
        const Tensor& A = t.value(ai);
        const Tensor& B = t.value(bi);
        Tensor ga(A.shape());
        ga.mat2d().noalias() = g.mat2d() * B.mat2d().transpose();
        t.accum_grad(ai, ga);
        Tensor gb(B.shape());
        gb.mat2d().noalias() = A.mat2d().transpose() * g.mat2d();
        t.accum_grad(bi, gb);
    });
}

Var transpose(Var a) {
    const Tensor& av = a.value();
    av.require_rank(2);
    Tensor out({av.dim(1), av.dim(0)});
    out.mat2d() = av.mat2d().transpose();
    int ai = a.id;
    return a.tape->push("transpose", std::move(out), [ai](Tape& t, const Tensor& g) {
        Tensor ga(t.value(ai).shape());
        ga.mat2d() = g.mat2d().transpose();
        t.accum_grad(ai, ga);
    });
}

Var reshape(Var a, std::vector<Index> shape) {
    Tensor out(std::move(shape), a.value().array());
    int ai = a.id;
    return a.tape->push("reshape", std::move(out), [ai](Tape& t, const Tensor& g) {
        t.accum_grad(ai, Tensor(t.value(ai).shape(), g.array()));
    });
}

Var rows(Var a, Index start, Index count) {
    const Tensor& av = a.value();
    Index d = av.last_dim();
    Index nrows = av.rows_flat();
    if (start < 0 || count <= 0 || start + count > nrows)
        throw DimensionError("rows: slice out of range");
    Tensor out({count, d});
    out.array() = av.array().segment(start * d, count * d);
    int ai = a.id;
    return a.tape->push("rows", std::move(out), [ai, start, count, d](Tape& t, const Tensor& g) {
        Tensor ga = Tensor::zeros(t.value(ai).shape());
        ga.array().segment(start * d, count * d) = g.array();
        t.accum_grad(ai, ga);
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    Tape* tape = parts[0].tape;
    Index d = parts[0].value().last_dim();
    Index total = 0;
    std::vector<int> ids;
    std::vector<Index> counts;
    for (const Var& p : parts) {
        if (p.tape != tape) throw ContractError("operands live on different tapes");
        if (p.value().last_dim() != d) throw DimensionError("concat_rows: widths differ");
        ids.push_back(p.id);
        counts.push_back(p.value().rows_flat());
        total += counts.back();
    }
    Tensor out({total, d});
    Index at = 0;
    for (const Var& p : parts) {
        out.array().segment(at * d, p.value().numel()) = p.value().array();
        at += p.value().rows_flat();
    }
    return tape->push("concat_rows", std::move(out),
                      [ids, counts, d](Tape& t, const Tensor& g) {
                          Index at = 0;
                          for (size_t i = 0; i < ids.size(); ++i) {
                              Tensor gp({counts[i], d});
                              gp.array() = g.array().segment(at * d, counts[i] * d);
                              t.accum_grad(ids[i], gp);
                              at += counts[i];
                          }
                      });
}

Var gather_rows(Var table, const std::vector<int>& idx) {
    const Tensor& tv = table.value();
    tv.require_rank(2);
    Index n = static_cast<Index>(idx.size());
    Index d = tv.dim(1);
    Tensor out({n, d});
    for (Index i = 0; i < n; ++i) {
        int r = idx[static_cast<size_t>(i)];
        if (r < 0 || r >= tv.dim(0)) throw ContractError("gather_rows: index out of range");
        out.array().segment(i * d, d) = tv.array().segment(r * d, d);
    }
    int ti = table.id;
    return table.tape->push("gather_rows", std::move(out), [ti, idx, d](Tape& t, const Tensor& g) {
        Tensor gt = Tensor::zeros(t.value(ti).shape());
        for (size_t i = 0; i < idx.size(); ++i)
            gt.array().segment(idx[i] * d, d) += g.array().segment(static_cast<Index>(i) * d, d);
        t.accum_grad(ti, gt);
    });
}

Var sum(Var a) {
    Tensor out = Tensor::scalar(a.value().array().sum());
    int ai = a.id;
    return a.tape->push("sum", std::move(out), [ai](Tape& t, const Tensor& g) {
        t.accum_grad(ai, Tensor::full(t.value(ai).shape(), g[0]));
    });
}

Var mean(Var a) {
    Real n = static_cast<Real>(a.value().numel());
    Tensor out = Tensor::scalar(a.value().array().sum() / n);
    int ai = a.id;
    return a.tape->push("mean", std::move(out), [ai, n](Tape& t, const Tensor& g) {
        t.accum_grad(ai, Tensor::full(t.value(ai).shape(), g[0] / n));
    });
}

Var silu(Var a) {
    ArrayX sig = 1.0 / (1.0 + (-a.value().array()).exp());
    Tensor out(a.shape(), a.value().array() * sig);
    int ai = a.id;
    return a.tape->push("silu", std::move(out), [ai](Tape& t, const Tensor& g) {
        const ArrayX& x = t.value(ai).array();
        ArrayX s = 1.0 / (1.0 + (-x).exp());
        t.accum_grad(ai, Tensor(g.shape(), g.array() * (s + x * s * (1.0 - s))));
    });
}

Var rmsnorm(Var x, Var gain, Real eps) {
    require_same_tape(x, gain);
    const Tensor& xv = x.value();
    require_vector_matches_last_dim(xv, gain.value(), "rmsnorm");
    Index d = xv.last_dim();
    Tensor out = xv;
    ArrayX inv_rms(xv.rows_flat());
    auto m = out.mat();
    for (Index r = 0; r < m.rows(); ++r) {
        Real ms = m.row(r).squaredNorm() / static_cast<Real>(d);
        inv_rms[r] = 1.0 / std::sqrt(ms + eps);
        m.row(r) *= inv_rms[r];
    }
    m.array().rowwise() *= gain.value().array().transpose();
    int xi = x.id, gi = gain.id;
    return x.tape->push("rmsnorm", std::move(out), [xi, gi, d, eps](Tape& t, const Tensor& g) {
        const Tensor& xt = t.value(xi);
        const ArrayX& gn = t.value(gi).array();
        Tensor gx(xt.shape());
        Tensor gg = Tensor::zeros({d});
        auto xm = xt.mat();
        auto gm = g.mat();
        auto gxm = gx.mat();
        for (Index r = 0; r < xm.rows(); ++r) {
            Real ms = xm.row(r).squaredNorm() / static_cast<Real>(d);
            Real inv = 1.0 / std::sqrt(ms + eps);
            // y_j = gain_j * x_j * inv;  d(inv)/d(x_k) = -inv^3 * x_k / d
            ArrayX xr = xm.row(r).transpose().array();
            ArrayX gr = gm.row(r).transpose().array();
            Real dot = (gr * gn * xr).sum();
            gxm.row(r) = (gr * gn * inv - xr * (dot * inv * inv * inv / static_cast<Real>(d)))
                             .matrix()
                             .transpose();
            gg.array() += gr * xr * inv;
        }
        t.accum_grad(xi, gx);
        t.accum_grad(gi, gg);
    });
}

namespace {

// Row softmax into `out`; rows past `limit(r)` get probability zero.
template <typename LimitFn>
void softmax_rows_impl(const Tensor& a, Tensor& out, LimitFn limit) {
    auto src = a.mat();
    auto dst = out.mat();
    for (Index r = 0; r < src.rows(); ++r) {
        Index n = limit(r);
        Real mx = src.row(r).head(n).maxCoeff();
        ArrayX e = (src.row(r).head(n).transpose().array() - mx).exp();
        Real z = e.sum();
        dst.row(r).setZero();
        dst.row(r).head(n) = (e / z).matrix().transpose();
    }
}

}  // namespace

namespace {

// Shared backward for softmax variants: dL/dx = p * (g - sum(g*p)) per row.
// Rows masked to zero probability contribute zero gradient automatically.
Var push_softmax(Var a, const char* name, Tensor out) {
    if (!a.tape->grad_enabled()) return a.tape->push(name, std::move(out), nullptr);
    auto p = std::make_shared<Tensor>(out);
    int ai = a.id;
    return a.tape->push(name, std::move(out), [ai, p](Tape& t, const Tensor& g) {
        Tensor ga(g.shape());
        auto pm = p->mat();
        auto gm = g.mat();
        auto am = ga.mat();
        for (Index r = 0; r < pm.rows(); ++r) {
            Real dot = (gm.row(r).array() * pm.row(r).array()).sum();
            am.row(r) = (pm.row(r).array() * (gm.row(r).array() - dot)).matrix();
        }
        t.accum_grad(ai, ga);
    });
}

}  // namespace

Var softmax_rows(Var a) {
    const Tensor& av = a.value();
    Tensor out(av.shape());
    Index cols = av.last_dim();
    softmax_rows_impl(av, out, [cols](Index) { return cols; });
    return push_softmax(a, "softmax_rows", std::move(out));
}

Var causal_softmax(Var a) {
    const Tensor& av = a.value();
    av.require_rank(2);
    if (av.dim(0) != av.dim(1)) throw DimensionError("causal_softmax expects a square matrix");
    Tensor out(av.shape());
    softmax_rows_impl(av, out, [](Index r) { return r + 1; });
    return push_softmax(a, "causal_softmax", std::move(out));
}

// ---- fused losses ----

Tensor softmax_value(const Tensor& logits) {
    Tensor out(logits.shape());
    Index cols = logits.last_dim();
    softmax_rows_impl(logits, out, [cols](Index) { return cols; });
    return out;
}

Var softmax_xent(Var logits, const std::vector<int>& targets) {
    const Tensor& lv = logits.value();
    Index n = lv.rows_flat();
    Index v = lv.last_dim();
    if (static_cast<Index>(targets.size()) != n)
        throw DimensionError("softmax_xent: one target per row required");
    Tensor probs = softmax_value(lv);
    Real loss = 0.0;
    auto pm = probs.mat();
    auto lm = lv.mat();
    for (Index r = 0; r < n; ++r) {
        int y = targets[static_cast<size_t>(r)];
        if (y < 0 || y >= v) throw ContractError("softmax_xent: target out of range");
        Real mx = lm.row(r).maxCoeff();
        Real z = (lm.row(r).array() - mx).exp().sum();
        loss += -(lm(r, y) - mx - std::log(z));
    }
    loss /= static_cast<Real>(n);
    auto probs_ptr = std::make_shared<Tensor>(std::move(probs));
    int li = logits.id;
    return logits.tape->push(
        "softmax_xent", Tensor::scalar(loss),
        [li, probs_ptr, targets, n](Tape& t, const Tensor& g) {
            Tensor gl = *probs_ptr;
            auto gm = gl.mat();
            for (Index r = 0; r < n; ++r) gm(r, targets[static_cast<size_t>(r)]) -= 1.0;
            gl.array() *= g[0] / static_cast<Real>(n);
            t.accum_grad(li, gl);
        });
}

Var xent_soft(Var logits, const Tensor& target_probs) {
    const Tensor& lv = logits.value();
    require_same_shape(lv, target_probs, "xent_soft");
    Index n = lv.rows_flat();
    Tensor probs = softmax_value(lv);
    Real loss = 0.0;
    auto lm = lv.mat();
    auto tm = target_probs.mat();
    for (Index r = 0; r < n; ++r) {
        Real mx = lm.row(r).maxCoeff();
        Real logz = std::log((lm.row(r).array() - mx).exp().sum());
        ArrayX logp = lm.row(r).transpose().array() - mx - logz;
        loss += -(tm.row(r).transpose().array() * logp).sum();
    }
    loss /= static_cast<Real>(n);
    auto probs_ptr = std::make_shared<Tensor>(std::move(probs));
    auto tgt_ptr = std::make_shared<Tensor>(target_probs);
    int li = logits.id;
    return logits.tape->push("xent_soft", Tensor::scalar(loss),
                             [li, probs_ptr, tgt_ptr, n](Tape& t, const Tensor& g) {
                                 Tensor gl(probs_ptr->shape());
                                 // d/dlogits of -sum p_t log softmax = softmax - p_t (per row).
                                 gl.array() = probs_ptr->array() - tgt_ptr->array();
                                 gl.array() *= g[0] / static_cast<Real>(n);
                                 t.accum_grad(li, gl);
                             });
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h) {
    Param p(x);
    Tape tape;
    Var loss = f(tape, tape.leaf(p));
    if (loss.value().numel() != 1) throw ContractError("grad_check: f must return a scalar");
    tape.backward(loss);
    Tensor analytic = p.grad;

    double max_rel = 0.0;
    Tensor xp = x;
    for (Index i = 0; i < x.numel(); ++i) {
        Real keep = xp[i];
        xp[i] = keep + h;
        Tape tp(false);
        Real fp = f(tp, tp.constant(xp)).value()[0];
        xp[i] = keep - h;
        Tape tm(false);
        Real fm = f(tm, tm.constant(xp)).value()[0];
        xp[i] = keep;
        double numeric = (fp - fm) / (2.0 * h);
        double denom = std::max(1.0, std::abs(analytic[i]));
        max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
    }
    return max_rel;
}

}  // namespace matquant
