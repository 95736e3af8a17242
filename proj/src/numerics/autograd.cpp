#include "eib/numerics/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "eib/numerics/kernels.hpp"
#include "eib/numerics/precision.hpp"

namespace eib {

using kernels::GemmArgs;
using kernels::Trans;

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

const Tensor& Var::value() const {
    if (tape == nullptr) fail(ErrorKind::StaleTape, "value() on an unbound variable");
    tape->check(*this);
    return tape->value(id);
}

void Tape::check(const Var& v) const {
    if (v.tape != this || v.generation != generation_ || v.id >= nodes_.size()) {
        fail(ErrorKind::StaleTape, "variable does not belong to the current tape recording");
    }
}

Var Tape::constant(Tensor value) {
    round_to_precision(value);
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1, generation_};
}

Var Tape::leaf(const Parameter& p, bool requires_grad) {
    if (auto it = leaf_ids_.find(&p); it != leaf_ids_.end()) {
        nodes_[it->second].requires_grad = nodes_[it->second].requires_grad || requires_grad;
        return Var{this, it->second, generation_};
    }
    Node n;
    n.ref = &p.value;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    leaf_ids_.emplace(&p, nodes_.size() - 1);
    return Var{this, nodes_.size() - 1, generation_};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
    round_to_precision(value);
    Node n;
    n.value = std::move(value);
    for (std::size_t in : inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1, generation_};
}

const Tensor& Tape::value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
}

Tensor& Tape::grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(value(id).shape());
    return n.grad;
}

void Tape::backward(Var loss) {
    check(loss);
    if (backward_done_) fail(ErrorKind::StaleTape, "backward already ran on this recording");
    if (value(loss.id).size() != 1) fail(ErrorKind::InvalidShape, "backward needs a scalar loss");
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id).fill(1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
        round_to_precision(n.grad);
        n.backward(*this, i);
    }
}

Tensor Tape::param_grad(const Parameter& p) const {
    auto it = leaf_ids_.find(&p);
    if (it == leaf_ids_.end() || nodes_[it->second].grad.empty()) return Tensor(p.value.shape());
    Tensor g = nodes_[it->second].grad;
    round_to_precision(g);
    return g;
}

void Tape::reset() {
    nodes_.clear();
    leaf_ids_.clear();
    ++generation_;
    backward_done_ = false;
}

// ---------------------------------------------------------------------------
// plain tensor functions
// ---------------------------------------------------------------------------

namespace {

void require_matrix(const Tensor& t, const char* where) {
    if (t.rank() < 1 || t.rows() == 0 || t.cols() == 0) {
        fail(ErrorKind::InvalidShape, std::string(where) + ": empty dimension in " + shape_string(t.shape()));
    }
}

void check_labels(std::span<const int> labels, std::size_t rows, std::size_t classes, bool allow_ignore) {
    if (labels.size() != rows) {
        fail(ErrorKind::InvalidShape, "label count " + std::to_string(labels.size()) + " != rows " +
                                          std::to_string(rows));
    }
    for (int l : labels) {
        if ((l < 0 && !allow_ignore) || l >= static_cast<int>(classes)) {
            fail(ErrorKind::InvalidLabel, "label " + std::to_string(l) + " outside [0, " +
                                              std::to_string(classes) + ")");
        }
    }
}

Real row_kl(const Real* p, const Real* q, std::size_t n) {
    Real s = 0;
    for (std::size_t j = 0; j < n; ++j) {
        if (p[j] > 0) s += p[j] * (std::log(p[j]) - std::log(std::max(q[j], kKlFloor)));
    }
    return s;
}

// Per-row -ln softmax(z)[label] via log-sum-exp.
Real row_nll(const Real* z, std::size_t n, int label) {
    Real mx = z[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[j]);
    Real s = 0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(z[j] - mx);
    return mx + std::log(s) - z[static_cast<std::size_t>(label)];
}

}  // namespace

Tensor softmax_rows(const Tensor& logits) {
    require_matrix(logits, "softmax_rows");
    Tensor out(logits.shape());
    kernels::softmax_rows(logits.data(), out.data(), logits.rows(), logits.cols());
    return out;
}

Real kl_divergence(const Tensor& p, const Tensor& q) {
    require_same_shape(p, q, "kl_divergence");
    require_matrix(p, "kl_divergence");
    Real total = 0;
    for (std::size_t r = 0; r < p.rows(); ++r) total += row_kl(p.row(r).data(), q.row(r).data(), p.cols());
    return total / static_cast<Real>(p.rows());
}

Real mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    if (a.empty()) return 0;
    Real s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s / static_cast<Real>(a.size());
}

Real cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_matrix(logits, "cross_entropy");
    check_labels(labels, logits.rows(), logits.cols(), false);
    Real s = 0;
    for (std::size_t r = 0; r < logits.rows(); ++r) s += row_nll(logits.row(r).data(), logits.cols(), labels[r]);
    return s / static_cast<Real>(logits.rows());
}

int quantize_code(Real x, int qmax) {
    const Real r = std::round(x);
    if (r > qmax) return qmax;
    if (r < -qmax) return -qmax;
    return static_cast<int>(r);
}

// ---------------------------------------------------------------------------
// tape ops
// ---------------------------------------------------------------------------

namespace ag {

namespace {

Tape& same_tape(Var a, Var b) {
    if (a.tape != b.tape) fail(ErrorKind::StaleTape, "operands recorded on different tapes");
    a.tape->check(a);
    b.tape->check(b);
    return *a.tape;
}

void axpy(std::span<Real> dst, std::span<const Real> src, Real c = 1.0) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += c * src[i];
}

Var scalar_result(Tape& t, Real v, std::vector<std::size_t> in, Tape::BackwardFn fn) {
    return t.record(Tensor::scalar(v), std::move(in), std::move(fn));
}

}  // namespace

Var matmul(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.rows()) {
        fail(ErrorKind::InvalidShape, "matmul " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
    }
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out({m, n});
    kernels::gemm({Trans::No, Trans::No, m, n, k, false}, av.data(), bv.data(), out.data());
    const std::size_t ia = a.id, ib = b.id;
    return t.record(std::move(out), {ia, ib}, [ia, ib, m, n, k](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(ia))
            kernels::gemm({Trans::No, Trans::Yes, m, k, n, true}, g.data(), tp.value(ib).data(), tp.grad(ia).data());
        if (tp.requires_grad(ib))
            kernels::gemm({Trans::Yes, Trans::No, k, n, m, true}, tp.value(ia).data(), g.data(), tp.grad(ib).data());
    });
}

Var matmul_bt(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols() != bv.cols()) {
        fail(ErrorKind::InvalidShape, "matmul_bt " + shape_string(av.shape()) + " x " + shape_string(bv.shape()) + "^T");
    }
    const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
    Tensor out({m, n});
    kernels::gemm({Trans::No, Trans::Yes, m, n, k, false}, av.data(), bv.data(), out.data());
    const std::size_t ia = a.id, ib = b.id;
    return t.record(std::move(out), {ia, ib}, [ia, ib, m, n, k](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(ia))
            kernels::gemm({Trans::No, Trans::No, m, k, n, true}, g.data(), tp.value(ib).data(), tp.grad(ia).data());
        if (tp.requires_grad(ib))
            kernels::gemm({Trans::Yes, Trans::No, n, k, m, true}, g.data(), tp.value(ia).data(), tp.grad(ib).data());
    });
}

Var linear(Var x, Var w, Var bias) {
    Tape& t = same_tape(x, w);
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (wv.rank() != 2 || xv.cols() != wv.rows()) {
        fail(ErrorKind::InvalidShape, "linear " + shape_string(xv.shape()) + " x " + shape_string(wv.shape()));
    }
    const std::size_t m = xv.rows(), k = xv.cols(), n = wv.cols();
    Tensor out({m, n});
    kernels::gemm({Trans::No, Trans::No, m, n, k, false}, xv.data(), wv.data(), out.data());
    std::vector<std::size_t> inputs{x.id, w.id};
    const bool has_bias = bias.valid();
    if (has_bias) {
        same_tape(x, bias);
        const Tensor& bv = bias.value();
        if (bv.size() != n) fail(ErrorKind::InvalidShape, "linear bias size mismatch");
        for (std::size_t r = 0; r < m; ++r) axpy(out.row(r), bv.data());
        inputs.push_back(bias.id);
    }
    const std::size_t ix = x.id, iw = w.id, ibias = has_bias ? bias.id : 0;
    return t.record(std::move(out), inputs, [=](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(ix))
            kernels::gemm({Trans::No, Trans::Yes, m, k, n, true}, g.data(), tp.value(iw).data(), tp.grad(ix).data());
        if (tp.requires_grad(iw))
            kernels::gemm({Trans::Yes, Trans::No, k, n, m, true}, tp.value(ix).data(), g.data(), tp.grad(iw).data());
        if (has_bias && tp.requires_grad(ibias)) {
            Tensor& gb = tp.grad(ibias);
            for (std::size_t r = 0; r < m; ++r) axpy(gb.data(), g.row(r));
        }
    });
}

Var add(Var a, Var b) {
    Tape& t = same_tape(a, b);
    require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    axpy(out.data(), b.value().data());
    const std::size_t ia = a.id, ib = b.id;
    return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(ia)) axpy(tp.grad(ia).data(), g.data());
        if (tp.requires_grad(ib)) axpy(tp.grad(ib).data(), g.data());
    });
}

Var scale(Var a, Real c) {
    Tape& t = *a.tape;
    t.check(a);
    Tensor out = a.value();
    for (Real& v : out.data()) v *= c;
    const std::size_t ia = a.id;
    return t.record(std::move(out), {ia}, [ia, c](Tape& tp, std::size_t self) {
        axpy(tp.grad(ia).data(), tp.grad(self).data(), c);
    });
}

Var weighted_sum(std::span<const Var> terms, std::span<const Real> weights) {
    if (terms.empty() || terms.size() != weights.size()) fail(ErrorKind::InvalidShape, "weighted_sum arity");
    Tape& t = *terms[0].tape;
    Real v = 0;
    std::vector<std::size_t> ids;
    std::vector<Real> ws;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        t.check(terms[i]);
        if (weights[i] == 0) continue;
        v += weights[i] * terms[i].value().item();
        ids.push_back(terms[i].id);
        ws.push_back(weights[i]);
    }
    return scalar_result(t, v, ids, [ids, ws](Tape& tp, std::size_t self) {
        const Real g = tp.grad(self)[0];
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (tp.requires_grad(ids[i])) tp.grad(ids[i])[0] += ws[i] * g;
    });
}

Var gelu(Var x) {
    Tape& t = *x.tape;
    t.check(x);
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    kernels::gelu(xv.data(), out.data());
    const std::size_t ix = x.id;
    return t.record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& xin = tp.value(ix);
        Tensor& gx = tp.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * kernels::gelu_grad(xin[i]);
    });
}

Var tanh(Var x) {
    Tape& t = *x.tape;
    t.check(x);
    Tensor out = x.value();
    for (Real& v : out.data()) v = std::tanh(v);
    const std::size_t ix = x.id;
    return t.record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& y = tp.value(self);
        Tensor& gx = tp.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
    });
}

Var layernorm(Var x, Var gamma, Var beta, Real eps) {
    Tape& t = same_tape(x, gamma);
    same_tape(x, beta);
    const Tensor& xv = x.value();
    const std::size_t n = xv.rows(), d = xv.cols();
    if (gamma.value().size() != d || beta.value().size() != d) fail(ErrorKind::InvalidShape, "layernorm params");
    Tensor out(xv.shape());
    auto mean = std::make_shared<std::vector<Real>>(n);
    auto rstd = std::make_shared<std::vector<Real>>(n);
    kernels::layernorm_rows(xv.data(), gamma.value().data(), beta.value().data(), out.data(), *mean, *rstd, n, d,
                            eps);
    const std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
    return t.record(std::move(out), {ix, ig, ib}, [=](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& xin = tp.value(ix);
        const Tensor& gm = tp.value(ig);
        const bool need_x = tp.requires_grad(ix);
        const bool need_g = tp.requires_grad(ig);
        const bool need_b = tp.requires_grad(ib);
        Tensor* gx = need_x ? &tp.grad(ix) : nullptr;
        Tensor* gg = need_g ? &tp.grad(ig) : nullptr;
        Tensor* gb = need_b ? &tp.grad(ib) : nullptr;
        std::vector<Real> xhat(d), dxhat(d);
        for (std::size_t r = 0; r < n; ++r) {
            const Real mu = (*mean)[r], rs = (*rstd)[r];
            Real sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::size_t j = 0; j < d; ++j) {
                xhat[j] = (xin.at(r, j) - mu) * rs;
                const Real gj = g.at(r, j);
                if (gg) (*gg)[j] += gj * xhat[j];
                if (gb) (*gb)[j] += gj;
                dxhat[j] = gj * gm[j];
                sum_dxhat += dxhat[j];
                sum_dxhat_xhat += dxhat[j] * xhat[j];
            }
            if (!gx) continue;
            const Real inv_d = 1.0 / static_cast<Real>(d);
            for (std::size_t j = 0; j < d; ++j) {
                gx->at(r, j) += rs * (dxhat[j] - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat);
            }
        }
    });
}

Var gather_rows(Var table, std::vector<std::size_t> ids) {
    Tape& t = *table.tape;
    t.check(table);
    const Tensor& tv = table.value();
    const std::size_t d = tv.cols();
    Tensor out({ids.size(), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] >= tv.rows()) fail(ErrorKind::Vocab, "row id " + std::to_string(ids[r]) + " out of range");
        std::copy_n(tv.row(ids[r]).begin(), d, out.row(r).begin());
    }
    const std::size_t it = table.id;
    return t.record(std::move(out), {it}, [it, ids = std::move(ids)](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& gt = tp.grad(it);
        for (std::size_t r = 0; r < ids.size(); ++r) axpy(gt.row(ids[r]), g.row(r));
    });
}

Var select_rows(Var x, std::vector<std::size_t> rows) { return gather_rows(x, std::move(rows)); }

Var masked_mean(Var x, const std::vector<int>& mask, std::size_t batch, std::size_t seq) {
    Tape& t = *x.tape;
    t.check(x);
    const Tensor& xv = x.value();
    if (xv.rows() != batch * seq || mask.size() != batch * seq) fail(ErrorKind::InvalidShape, "masked_mean");
    const std::size_t d = xv.cols();
    Tensor out({batch, d});
    std::vector<Real> inv(batch, 0);
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t cnt = 0;
        for (std::size_t s = 0; s < seq; ++s) {
            if (!mask[b * seq + s]) continue;
            axpy(out.row(b), xv.row(b * seq + s));
            ++cnt;
        }
        if (cnt) inv[b] = 1.0 / static_cast<Real>(cnt);
        for (Real& v : out.row(b)) v *= inv[b];
    }
    const std::size_t ix = x.id;
    return t.record(std::move(out), {ix}, [ix, mask, inv, batch, seq](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad(ix);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t s = 0; s < seq; ++s)
                if (mask[b * seq + s]) axpy(gx.row(b * seq + s), g.row(b), inv[b]);
    });
}

Var attention(Var q, Var k, Var v, const std::vector<int>& mask, AttentionShape s, Tensor* probs_out) {
    Tape& t = same_tape(q, k);
    same_tape(q, v);
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    const std::size_t d = qv.cols();
    if (s.heads == 0 || d % s.heads != 0 || qv.rows() != s.batch * s.seq || kv.shape() != qv.shape() ||
        vv.shape() != qv.shape() || mask.size() != s.batch * s.seq) {
        fail(ErrorKind::InvalidShape, "attention operand shapes");
    }
    const std::size_t dk = d / s.heads, S = s.seq, H = s.heads;
    const Real inv_sqrt = 1.0 / std::sqrt(static_cast<Real>(dk));
    auto probs = std::make_shared<Tensor>(Shape{s.batch, H, S, S});
    Tensor out({s.batch * S, d});
    const long long units = static_cast<long long>(s.batch * H);
#pragma omp parallel for schedule(static) if (s.batch * H * S * S * dk > (1u << 15))
    for (long long u = 0; u < units; ++u) {
        const std::size_t b = static_cast<std::size_t>(u) / H, h = static_cast<std::size_t>(u) % H;
        Real* P = probs->data().data() + (b * H + h) * S * S;
        for (std::size_t i = 0; i < S; ++i) {
            const Real* qi = qv.data().data() + (b * S + i) * d + h * dk;
            Real* prow = P + i * S;
            for (std::size_t j = 0; j < S; ++j) {
                const Real* kj = kv.data().data() + (b * S + j) * d + h * dk;
                Real acc = 0;
                for (std::size_t c = 0; c < dk; ++c) acc += qi[c] * kj[c];
                prow[j] = mask[b * S + j] ? acc * inv_sqrt : kMaskedScore;
            }
            kernels::serial::softmax_rows(std::span<const Real>(prow, S), std::span<Real>(prow, S), 1, S);
            Real* oi = out.data().data() + (b * S + i) * d + h * dk;
            for (std::size_t j = 0; j < S; ++j) {
                const Real* vj = vv.data().data() + (b * S + j) * d + h * dk;
                for (std::size_t c = 0; c < dk; ++c) oi[c] += prow[j] * vj[c];
            }
        }
    }
    round_to_precision(*probs);
    if (probs_out) *probs_out = *probs;
    const std::size_t iq = q.id, ik = k.id, iv = v.id;
    return t.record(std::move(out), {iq, ik, iv}, [=](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& Q = tp.value(iq);
        const Tensor& K = tp.value(ik);
        const Tensor& V = tp.value(iv);
        // Allocate before the parallel region.
        Tensor& gq = tp.grad(iq);
        Tensor& gk = tp.grad(ik);
        Tensor& gv = tp.grad(iv);
        const std::size_t batch = g.rows() / S;
        const long long n_units = static_cast<long long>(batch * H);
#pragma omp parallel for schedule(static) if (batch * H * S * S * dk > (1u << 15))
        for (long long u = 0; u < n_units; ++u) {
            const std::size_t b = static_cast<std::size_t>(u) / H, h = static_cast<std::size_t>(u) % H;
            const Real* P = probs->data().data() + (b * H + h) * S * S;
            std::vector<Real> dp(S), ds(S);
            for (std::size_t i = 0; i < S; ++i) {
                const Real* gi = g.data().data() + (b * S + i) * d + h * dk;
                const Real* prow = P + i * S;
                Real dot = 0;
                for (std::size_t j = 0; j < S; ++j) {
                    const Real* vj = V.data().data() + (b * S + j) * d + h * dk;
                    Real acc = 0;
                    for (std::size_t c = 0; c < dk; ++c) acc += gi[c] * vj[c];
                    dp[j] = acc;
                    dot += acc * prow[j];
                }
                for (std::size_t j = 0; j < S; ++j) ds[j] = prow[j] * (dp[j] - dot) * inv_sqrt;
                const Real* qi = Q.data().data() + (b * S + i) * d + h * dk;
                Real* gqi = gq.data().data() + (b * S + i) * d + h * dk;
                for (std::size_t j = 0; j < S; ++j) {
                    const Real* kj = K.data().data() + (b * S + j) * d + h * dk;
                    Real* gkj = gk.data().data() + (b * S + j) * d + h * dk;
                    Real* gvj = gv.data().data() + (b * S + j) * d + h * dk;
                    for (std::size_t c = 0; c < dk; ++c) {
                        gqi[c] += ds[j] * kj[c];
                        gkj[c] += ds[j] * qi[c];
                        gvj[c] += prow[j] * gi[c];
                    }
                }
            }
        }
    });
}

Var cross_entropy(Var logits, std::vector<int> labels) {
    const Tensor& z = logits.value();
    require_matrix(z, "cross_entropy");
    check_labels(labels, z.rows(), z.cols(), false);
    return masked_cross_entropy(logits, std::move(labels));
}

Var masked_cross_entropy(Var logits, std::vector<int> labels) {
    Tape& t = *logits.tape;
    t.check(logits);
    const Tensor& z = logits.value();
    require_matrix(z, "cross_entropy");
    check_labels(labels, z.rows(), z.cols(), true);
    const std::size_t n = z.cols();
    Real s = 0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < z.rows(); ++r) {
        if (labels[r] < 0) continue;
        s += row_nll(z.row(r).data(), n, labels[r]);
        ++count;
    }
    const Real inv = count ? 1.0 / static_cast<Real>(count) : 0.0;
    const std::size_t iz = logits.id;
    return scalar_result(t, s * inv, {iz}, [iz, inv, n, labels = std::move(labels)](Tape& tp, std::size_t self) {
        const Real g = tp.grad(self)[0] * inv;
        if (g == 0) return;
        const Tensor& zz = tp.value(iz);
        Tensor& gz = tp.grad(iz);
        std::vector<Real> p(n);
        for (std::size_t r = 0; r < zz.rows(); ++r) {
            if (labels[r] < 0) continue;
            kernels::serial::softmax_rows(zz.row(r), p, 1, n);
            p[static_cast<std::size_t>(labels[r])] -= 1.0;
            for (std::size_t j = 0; j < n; ++j) gz.at(r, j) += g * p[j];
        }
    });
}

Var kl_logits(Var target_logits, Var pred_logits, Real temperature) {
    Tape& t = same_tape(target_logits, pred_logits);
    require_same_shape(target_logits.value(), pred_logits.value(), "kl_logits");
    if (!(temperature > 0)) fail(ErrorKind::Spec, "temperature must be positive");
    Tensor zt = target_logits.value();
    Tensor zs = pred_logits.value();
    for (Real& v : zt.data()) v /= temperature;
    for (Real& v : zs.data()) v /= temperature;
    auto p = std::make_shared<Tensor>(softmax_rows(zt));
    auto q = std::make_shared<Tensor>(softmax_rows(zs));
    const std::size_t rows = p->rows(), n = p->cols();
    auto row_vals = std::make_shared<std::vector<Real>>(rows);
    Real total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        (*row_vals)[r] = row_kl(p->row(r).data(), q->row(r).data(), n);
        total += (*row_vals)[r];
    }
    const std::size_t it = target_logits.id, is = pred_logits.id;
    const Real coef = 1.0 / (temperature * static_cast<Real>(rows));
    return scalar_result(t, total / static_cast<Real>(rows), {it, is}, [=](Tape& tp, std::size_t self) {
        const Real g = tp.grad(self)[0] * coef;
        if (tp.requires_grad(is)) {
            Tensor& gs = tp.grad(is);
            for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += g * ((*q)[i] - (*p)[i]);
        }
        if (tp.requires_grad(it)) {
            Tensor& gt = tp.grad(it);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t j = 0; j < n; ++j) {
                    const Real pj = p->at(r, j);
                    if (pj <= 0) continue;
                    const Real lr = std::log(pj) - std::log(std::max(q->at(r, j), kKlFloor));
                    gt.at(r, j) += g * pj * (lr - (*row_vals)[r]);
                }
            }
        }
    });
}

Var mse(Var a, Var b) {
    Tape& t = same_tape(a, b);
    const Real v = eib::mse(a.value(), b.value());
    const std::size_t ia = a.id, ib = b.id;
    const Real inv = a.value().empty() ? 0.0 : 2.0 / static_cast<Real>(a.value().size());
    return scalar_result(t, v, {ia, ib}, [ia, ib, inv](Tape& tp, std::size_t self) {
        const Real g = tp.grad(self)[0] * inv;
        const Tensor& av = tp.value(ia);
        const Tensor& bv = tp.value(ib);
        if (tp.requires_grad(ia)) {
            Tensor& ga = tp.grad(ia);
            for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * (av[i] - bv[i]);
        }
        if (tp.requires_grad(ib)) {
            Tensor& gb = tp.grad(ib);
            for (std::size_t i = 0; i < av.size(); ++i) gb[i] -= g * (av[i] - bv[i]);
        }
    });
}

Var fake_quant(Var w, Var step, int qmax) {
    Tape& t = same_tape(w, step);
    const Real s = step.value().item();
    if (!(s > 0)) fail(ErrorKind::Step, "step size must be positive, got " + std::to_string(s));
    const Tensor& wv = w.value();
    Tensor out(wv.shape());
    for (std::size_t i = 0; i < wv.size(); ++i) out[i] = s * quantize_code(wv[i] / s, qmax);
    const std::size_t iw = w.id, is = step.id;
    return t.record(std::move(out), {iw, is}, [iw, is, qmax](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& wv2 = tp.value(iw);
        const Real s2 = tp.value(is)[0];
        const bool need_w = tp.requires_grad(iw);
        Tensor* gw = need_w ? &tp.grad(iw) : nullptr;
        Real gs = 0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const Real v = wv2[i] / s2;
            const int c = quantize_code(v, qmax);
            const bool inside = v >= -qmax && v <= qmax;
            if (inside) {
                if (gw) (*gw)[i] += g[i];
                gs += g[i] * (c - v);
            } else {
                gs += g[i] * c;
            }
        }
        if (tp.requires_grad(is)) tp.grad(is)[0] += gs;
    });
}

Var fake_quant_fixed(Var x, Real scale, int qmax) {
    Tape& t = *x.tape;
    t.check(x);
    if (!(scale > 0)) fail(ErrorKind::Step, "activation scale must be positive");
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = scale * quantize_code(xv[i] / scale, qmax);
    const std::size_t ix = x.id;
    return t.record(std::move(out), {ix}, [ix, scale, qmax](Tape& tp, std::size_t self) {
        const Tensor& g = tp.grad(self);
        const Tensor& xin = tp.value(ix);
        Tensor& gx = tp.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const Real v = xin[i] / scale;
            if (v >= -qmax && v <= qmax) gx[i] += g[i];
        }
    });
}

}  // namespace ag
}  // namespace eib
