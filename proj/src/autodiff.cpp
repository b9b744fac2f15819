#include "pgat/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "pgat/errors.hpp"

namespace pgat::ad {

namespace {

Precision g_precision = Precision::f64;

inline double round_prec(double v) {
    return g_precision == Precision::f32 ? double(float(v)) : v;
}

void round_buffer(std::vector<double>& buf) {
    if (g_precision == Precision::f32)
        for (double& v : buf) v = double(float(v));
}

struct ParentView {
    const Shape* shape;
    const std::vector<double>* values;
};

[[noreturn]] void fail(const std::string& msg) { throw ValidationError(msg); }

}  // namespace

Precision precision() { return g_precision; }
void set_precision(Precision p) { g_precision = p; }

int numel(const Shape& s) {
    int n = 1;
    for (int e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::Matmul: return "matmul";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::Relu: return "relu";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Exp: return "exp";
        case OpKind::Log: return "log";
        case OpKind::Sum: return "sum";
        case OpKind::Mean: return "mean";
        case OpKind::ReduceMax: return "reduce_max";
        case OpKind::SoftmaxLast: return "softmax_last";
        case OpKind::SquaredL2: return "squared_l2";
        case OpKind::Concat: return "concat";
        case OpKind::StopGrad: return "stop_grad";
        case OpKind::Reshape: return "reshape";
    }
    return "?";
}

const Shape& Tensor::shape() const { return graph->node(id).shape; }
const std::vector<double>& Tensor::values() const { return graph->node(id).values; }
int Tensor::size() const { return numel(shape()); }

double Tensor::scalar() const {
    const auto& v = values();
    if (v.size() != 1) fail(std::string("scalar() on tensor of shape ") + shape_str(shape()));
    return v[0];
}

// ---------------------------------------------------------------------------
// forward kernels, shared by eager emission and tape replay
// ---------------------------------------------------------------------------

namespace {

double stable_sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

void eval_binary(OpKind op, const ParentView& a, const ParentView& b, std::vector<double>& out) {
    const auto& av = *a.values;
    const auto& bv = *b.values;
    size_t na = av.size(), nb = bv.size();
    size_t n = std::max(na, nb);
    out.resize(n);
    auto at = [&](size_t i) { return na == 1 ? av[0] : av[i]; };
    auto bt = [&](size_t i) { return nb == 1 ? bv[0] : bv[i]; };
    switch (op) {
        case OpKind::Add:
            for (size_t i = 0; i < n; ++i) out[i] = at(i) + bt(i);
            break;
        case OpKind::Sub:
            for (size_t i = 0; i < n; ++i) out[i] = at(i) - bt(i);
            break;
        case OpKind::Mul:
            for (size_t i = 0; i < n; ++i) out[i] = at(i) * bt(i);
            break;
        case OpKind::Div:
            for (size_t i = 0; i < n; ++i) out[i] = at(i) / bt(i);
            break;
        default: fail("eval_binary: bad op");
    }
}

void eval_matmul(const ParentView& a, const ParentView& b, std::vector<double>& out) {
    int M = (*a.shape)[0], K = (*a.shape)[1], N = (*b.shape)[1];
    const double* A = a.values->data();
    const double* B = b.values->data();
    out.assign(size_t(M) * N, 0.0);
    for (int m = 0; m < M; ++m) {
        double* orow = &out[size_t(m) * N];
        const double* arow = &A[size_t(m) * K];
        for (int k = 0; k < K; ++k) {
            double av = arow[k];
            if (av == 0.0) continue;
            const double* brow = &B[size_t(k) * N];
            for (int n = 0; n < N; ++n) orow[n] += av * brow[n];
        }
    }
}

void eval_conv2d(const ParentView& x, const ParentView& w, const ParentView& b, std::vector<double>& out) {
    int Ci = (*x.shape)[0], H = (*x.shape)[1], W = (*x.shape)[2];
    int Co = (*w.shape)[0];
    const double* X = x.values->data();
    const double* Wt = w.values->data();
    const double* B = b.values->data();
    out.resize(size_t(Co) * H * W);
    for (int o = 0; o < Co; ++o) {
        double* yo = &out[size_t(o) * H * W];
        std::fill(yo, yo + size_t(H) * W, B[o]);
        for (int c = 0; c < Ci; ++c) {
            const double* xc = &X[size_t(c) * H * W];
            for (int u = 0; u < 3; ++u) {
                int du = u - 1;
                for (int v = 0; v < 3; ++v) {
                    int dv = v - 1;
                    double wv = Wt[((size_t(o) * Ci + c) * 3 + u) * 3 + v];
                    if (wv == 0.0) continue;
                    int i0 = std::max(0, -du), i1 = std::min(H, H - du);
                    int j0 = std::max(0, -dv), j1 = std::min(W, W - dv);
                    for (int i = i0; i < i1; ++i) {
                        const double* xr = &xc[size_t(i + du) * W + dv];
                        double* yr = &yo[size_t(i) * W];
                        for (int j = j0; j < j1; ++j) yr[j] += wv * xr[j];
                    }
                }
            }
        }
    }
}

void eval_forward(OpKind op, const std::vector<ParentView>& ps, const Shape& out_shape,
                  std::vector<double>& out, std::vector<int>* iaux) {
    switch (op) {
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul:
        case OpKind::Div:
            eval_binary(op, ps[0], ps[1], out);
            break;
        case OpKind::Matmul:
            eval_matmul(ps[0], ps[1], out);
            break;
        case OpKind::Conv2d:
            eval_conv2d(ps[0], ps[1], ps[2], out);
            break;
        case OpKind::Relu: {
            const auto& x = *ps[0].values;
            out.resize(x.size());
            for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
            break;
        }
        case OpKind::Sigmoid: {
            const auto& x = *ps[0].values;
            out.resize(x.size());
            for (size_t i = 0; i < x.size(); ++i) out[i] = stable_sigmoid(x[i]);
            break;
        }
        case OpKind::Exp: {
            const auto& x = *ps[0].values;
            out.resize(x.size());
            for (size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
            break;
        }
        case OpKind::Log: {
            const auto& x = *ps[0].values;
            out.resize(x.size());
            for (size_t i = 0; i < x.size(); ++i) out[i] = std::log(std::max(x[i], kLogFloor));
            break;
        }
        case OpKind::Sum: {
            double acc = 0.0;
            for (double v : *ps[0].values) acc += v;
            out.assign(1, acc);
            break;
        }
        case OpKind::Mean: {
            double acc = 0.0;
            for (double v : *ps[0].values) acc += v;
            out.assign(1, acc / double(ps[0].values->size()));
            break;
        }
        case OpKind::ReduceMax: {
            const auto& x = *ps[0].values;
            int k = (*ps[0].shape)[0];
            size_t inner = x.size() / size_t(k);
            out.resize(inner);
            if (iaux) iaux->assign(inner, 0);
            for (size_t p = 0; p < inner; ++p) {
                double best = x[p];
                int arg = 0;
                for (int r = 1; r < k; ++r) {
                    double v = x[size_t(r) * inner + p];
                    if (v > best) {
                        best = v;
                        arg = r;
                    }
                }
                out[p] = best;
                if (iaux) (*iaux)[p] = arg;
            }
            break;
        }
        case OpKind::SoftmaxLast: {
            const auto& x = *ps[0].values;
            int d = ps[0].shape->back();
            size_t rows = x.size() / size_t(d);
            out.resize(x.size());
            for (size_t r = 0; r < rows; ++r) {
                const double* xr = &x[r * size_t(d)];
                double* yr = &out[r * size_t(d)];
                double m = xr[0];
                for (int i = 1; i < d; ++i) m = std::max(m, xr[i]);
                double s = 0.0;
                for (int i = 0; i < d; ++i) {
                    yr[i] = std::exp(xr[i] - m);
                    s += yr[i];
                }
                for (int i = 0; i < d; ++i) yr[i] /= s;
            }
            break;
        }
        case OpKind::SquaredL2: {
            double acc = 0.0;
            for (double v : *ps[0].values) acc += v * v;
            out.assign(1, acc);
            break;
        }
        case OpKind::Concat: {
            out.clear();
            out.reserve(size_t(numel(out_shape)));
            for (const auto& p : ps) out.insert(out.end(), p.values->begin(), p.values->end());
            break;
        }
        case OpKind::StopGrad:
        case OpKind::Reshape:
            out = *ps[0].values;
            break;
        default: fail(std::string("eval_forward: unsupported op ") + op_name(op));
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// graph construction
// ---------------------------------------------------------------------------

int Graph::emit(Node n) {
    round_buffer(n.values);
    int id = int(nodes_.size());
    nodes_.push_back(std::move(n));
    check_finite_forward(id);
    return id;
}

void Graph::check_finite_forward(int id) const {
    const Node& n = nodes_[size_t(id)];
    for (size_t i = 0; i < n.values.size(); ++i) {
        if (!std::isfinite(n.values[i])) {
            std::ostringstream os;
            os << "non-finite forward value at node " << id << " (op " << op_name(n.op) << "), index " << i;
            throw std::runtime_error(os.str());
        }
    }
}

Tensor Graph::leaf(std::vector<double> values, Shape shape, bool requires_grad) {
    if (int(values.size()) != numel(shape))
        fail("leaf: buffer length " + std::to_string(values.size()) + " does not match shape " +
             shape_str(shape));
    Node n;
    n.op = OpKind::Leaf;
    n.shape = std::move(shape);
    n.values = std::move(values);
    n.requires_grad = requires_grad;
    int id = emit(std::move(n));
    if (requires_grad) grad_leaves_.push_back(id);
    return {this, id};
}

Tensor Graph::constant(std::vector<double> values, Shape shape) {
    return leaf(std::move(values), std::move(shape), false);
}

Tensor Graph::constant_like(double v, const Shape& shape) {
    return constant(std::vector<double>(size_t(numel(shape)), v), shape);
}

Tensor Graph::scalar(double v) { return constant({v}, {1}); }

namespace {

void require_same_graph(const std::vector<Tensor>& ts) {
    for (const auto& t : ts) {
        if (!t.valid()) fail("operation on invalid tensor handle");
        if (t.graph != ts[0].graph) fail("operands belong to different graphs");
    }
}

Shape binary_shape(OpKind op, const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa == sb) return sa;
    if (numel(sa) == 1) return sb;
    if (numel(sb) == 1) return sa;
    fail(std::string(op_name(op)) + ": incompatible shapes " + shape_str(sa) + " vs " + shape_str(sb) +
         " (only equal-shape or one-element broadcasting supported)");
}

}  // namespace

Tensor emit_op(Graph& g, OpKind op, const std::vector<Tensor>& parents, Shape out_shape,
               std::vector<int> iaux) {
    Node n;
    n.op = op;
    n.shape = std::move(out_shape);
    n.iaux = std::move(iaux);
    bool rg = false;
    for (const auto& p : parents) {
        n.parents.push_back(p.id);
        rg = rg || g.node(p.id).requires_grad;
    }
    if (op == OpKind::StopGrad) {
        rg = false;
        g.has_stop_grad_ = true;
    }
    n.requires_grad = rg;

    std::vector<ParentView> views;
    views.reserve(parents.size());
    for (const auto& p : parents) views.push_back({&g.node(p.id).shape, &g.node(p.id).values});
    std::vector<int>* aux_out = n.iaux.empty() && op == OpKind::ReduceMax ? &n.iaux : nullptr;
    eval_forward(op, views, n.shape, n.values, aux_out);

    int id = g.emit(std::move(n));
    return {&g, id};
}

Tensor add(Tensor a, Tensor b) {
    require_same_graph({a, b});
    return emit_op(*a.graph, OpKind::Add, {a, b}, binary_shape(OpKind::Add, a, b), {});
}
Tensor sub(Tensor a, Tensor b) {
    require_same_graph({a, b});
    return emit_op(*a.graph, OpKind::Sub, {a, b}, binary_shape(OpKind::Sub, a, b), {});
}
Tensor mul(Tensor a, Tensor b) {
    require_same_graph({a, b});
    return emit_op(*a.graph, OpKind::Mul, {a, b}, binary_shape(OpKind::Mul, a, b), {});
}
Tensor div(Tensor a, Tensor b) {
    require_same_graph({a, b});
    return emit_op(*a.graph, OpKind::Div, {a, b}, binary_shape(OpKind::Div, a, b), {});
}

Tensor matmul(Tensor a, Tensor b) {
    require_same_graph({a, b});
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        fail("matmul: needs [M,K] x [K,N], got " + shape_str(sa) + " x " + shape_str(sb));
    return emit_op(*a.graph, OpKind::Matmul, {a, b}, {sa[0], sb[1]}, {});
}

Tensor conv2d(Tensor x, Tensor w, Tensor b) {
    require_same_graph({x, w, b});
    const Shape& sx = x.shape();
    const Shape& sw = w.shape();
    const Shape& sb = b.shape();
    if (sx.size() != 3) fail("conv2d: input must be [C,H,W], got " + shape_str(sx));
    if (sw.size() != 4 || sw[2] != 3 || sw[3] != 3 || sw[1] != sx[0])
        fail("conv2d: weight must be [Cout," + std::to_string(sx[0]) + ",3,3], got " + shape_str(sw));
    if (sb.size() != 1 || sb[0] != sw[0])
        fail("conv2d: bias must be [" + std::to_string(sw[0]) + "], got " + shape_str(sb));
    return emit_op(*x.graph, OpKind::Conv2d, {x, w, b}, {sw[0], sx[1], sx[2]}, {});
}

namespace {
Tensor unary(OpKind op, Tensor x, Shape out_shape) {
    require_same_graph({x});
    return emit_op(*x.graph, op, {x}, std::move(out_shape), {});
}
}  // namespace

Tensor relu(Tensor x) { return unary(OpKind::Relu, x, x.shape()); }
Tensor sigmoid(Tensor x) { return unary(OpKind::Sigmoid, x, x.shape()); }
Tensor exp(Tensor x) { return unary(OpKind::Exp, x, x.shape()); }
Tensor log(Tensor x) { return unary(OpKind::Log, x, x.shape()); }
Tensor sum(Tensor x) { return unary(OpKind::Sum, x, {1}); }
Tensor mean(Tensor x) { return unary(OpKind::Mean, x, {1}); }
Tensor squared_l2(Tensor x) { return unary(OpKind::SquaredL2, x, {1}); }

Tensor reduce_max(Tensor x) {
    require_same_graph({x});
    const Shape& s = x.shape();
    if (s.empty() || s[0] < 1) fail("reduce_max: needs a leading axis, got " + shape_str(s));
    Shape out(s.begin() + 1, s.end());
    if (out.empty()) out = {1};
    return emit_op(*x.graph, OpKind::ReduceMax, {x}, std::move(out), {});
}

Tensor softmax_last(Tensor x) {
    require_same_graph({x});
    if (x.shape().empty()) fail("softmax_last: rank must be >= 1");
    return unary(OpKind::SoftmaxLast, x, x.shape());
}

Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail("concat: needs at least one operand");
    require_same_graph(parts);
    const Shape& s0 = parts[0].shape();
    int lead = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size() || !std::equal(s.begin() + 1, s.end(), s0.begin() + 1))
            fail("concat: trailing extents differ, " + shape_str(s0) + " vs " + shape_str(s));
        lead += s[0];
    }
    Shape out = s0;
    out[0] = lead;
    return emit_op(*parts[0].graph, OpKind::Concat, parts, std::move(out), {});
}

Tensor stop_gradient(Tensor x) {
    require_same_graph({x});
    return emit_op(*x.graph, OpKind::StopGrad, {x}, x.shape(), {});
}

Tensor reshape(Tensor x, Shape shape) {
    require_same_graph({x});
    if (numel(shape) != x.size())
        fail("reshape: element count mismatch, " + shape_str(x.shape()) + " -> " + shape_str(shape));
    return emit_op(*x.graph, OpKind::Reshape, {x}, std::move(shape), {});
}

Tensor Graph::apply(OpKind kind, const std::vector<Tensor>& operands) {
    auto want = [&](size_t n) {
        if (operands.size() != n)
            fail(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " operands, got " +
                 std::to_string(operands.size()));
    };
    switch (kind) {
        case OpKind::Add: want(2); return ad::add(operands[0], operands[1]);
        case OpKind::Sub: want(2); return ad::sub(operands[0], operands[1]);
        case OpKind::Mul: want(2); return ad::mul(operands[0], operands[1]);
        case OpKind::Div: want(2); return ad::div(operands[0], operands[1]);
        case OpKind::Matmul: want(2); return ad::matmul(operands[0], operands[1]);
        case OpKind::Conv2d: want(3); return ad::conv2d(operands[0], operands[1], operands[2]);
        case OpKind::Relu: want(1); return ad::relu(operands[0]);
        case OpKind::Sigmoid: want(1); return ad::sigmoid(operands[0]);
        case OpKind::Exp: want(1); return ad::exp(operands[0]);
        case OpKind::Log: want(1); return ad::log(operands[0]);
        case OpKind::Sum: want(1); return ad::sum(operands[0]);
        case OpKind::Mean: want(1); return ad::mean(operands[0]);
        case OpKind::ReduceMax: want(1); return ad::reduce_max(operands[0]);
        case OpKind::SoftmaxLast: want(1); return ad::softmax_last(operands[0]);
        case OpKind::SquaredL2: want(1); return ad::squared_l2(operands[0]);
        case OpKind::Concat: return ad::concat(operands);
        case OpKind::StopGrad: want(1); return ad::stop_gradient(operands[0]);
        default: fail(std::string("apply: unsupported op-kind ") + op_name(kind));
    }
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

namespace {

// accumulate src (shaped like the op output) into a possibly one-element parent
void accumulate(std::vector<double>& dst, size_t dst_n, const double* src, size_t n, bool scale_neg = false) {
    if (dst.empty()) dst.assign(dst_n, 0.0);
    double sgn = scale_neg ? -1.0 : 1.0;
    if (dst_n == 1 && n > 1) {
        double acc = 0.0;
        for (size_t i = 0; i < n; ++i) acc += src[i];
        dst[0] += sgn * acc;
    } else {
        for (size_t i = 0; i < n; ++i) dst[i] += sgn * src[i];
    }
}

}  // namespace

GradMap Graph::backward(Tensor root) {
    if (!root.valid() || root.graph != this) fail("backward: root is not a tensor of this graph");
    const Node& rn = node(root.id);
    if (numel(rn.shape) != 1)
        fail("backward: root must have exactly one element, got shape " + shape_str(rn.shape));

    std::vector<std::vector<double>> grads(size_t(root.id) + 1);
    auto buf = [&](int id) -> std::vector<double>& {
        auto& g = grads[size_t(id)];
        if (g.empty()) g.assign(nodes_[size_t(id)].values.size(), 0.0);
        return g;
    };

    if (rn.requires_grad) grads[size_t(root.id)].assign(1, 1.0);

    for (int id = root.id; id >= 0; --id) {
        Node& n = nodes_[size_t(id)];
        auto& gy = grads[size_t(id)];
        if (gy.empty() || !n.requires_grad) continue;
        round_buffer(gy);
        for (size_t i = 0; i < gy.size(); ++i) {
            if (!std::isfinite(gy[i])) {
                std::ostringstream os;
                os << "non-finite gradient at node " << id << " (op " << op_name(n.op) << "), index " << i;
                throw std::runtime_error(os.str());
            }
        }
        if (n.op == OpKind::Leaf || n.op == OpKind::StopGrad) continue;

        auto parent_rg = [&](int k) { return nodes_[size_t(n.parents[size_t(k)])].requires_grad; };
        auto pvals = [&](int k) -> const std::vector<double>& {
            return nodes_[size_t(n.parents[size_t(k)])].values;
        };
        auto pshape = [&](int k) -> const Shape& { return nodes_[size_t(n.parents[size_t(k)])].shape; };

        switch (n.op) {
            case OpKind::Add: {
                for (int k = 0; k < 2; ++k)
                    if (parent_rg(k)) accumulate(buf(n.parents[size_t(k)]), pvals(k).size(), gy.data(), gy.size());
                break;
            }
            case OpKind::Sub: {
                if (parent_rg(0)) accumulate(buf(n.parents[0]), pvals(0).size(), gy.data(), gy.size());
                if (parent_rg(1)) accumulate(buf(n.parents[1]), pvals(1).size(), gy.data(), gy.size(), true);
                break;
            }
            case OpKind::Mul: {
                const auto& av = pvals(0);
                const auto& bv = pvals(1);
                if (parent_rg(0)) {
                    std::vector<double> t(gy.size());
                    for (size_t i = 0; i < gy.size(); ++i) t[i] = gy[i] * (bv.size() == 1 ? bv[0] : bv[i]);
                    accumulate(buf(n.parents[0]), av.size(), t.data(), t.size());
                }
                if (parent_rg(1)) {
                    std::vector<double> t(gy.size());
                    for (size_t i = 0; i < gy.size(); ++i) t[i] = gy[i] * (av.size() == 1 ? av[0] : av[i]);
                    accumulate(buf(n.parents[1]), bv.size(), t.data(), t.size());
                }
                break;
            }
            case OpKind::Div: {
                const auto& av = pvals(0);
                const auto& bv = pvals(1);
                if (parent_rg(0)) {
                    std::vector<double> t(gy.size());
                    for (size_t i = 0; i < gy.size(); ++i) t[i] = gy[i] / (bv.size() == 1 ? bv[0] : bv[i]);
                    accumulate(buf(n.parents[0]), av.size(), t.data(), t.size());
                }
                if (parent_rg(1)) {
                    std::vector<double> t(gy.size());
                    for (size_t i = 0; i < gy.size(); ++i) {
                        double a = av.size() == 1 ? av[0] : av[i];
                        double b = bv.size() == 1 ? bv[0] : bv[i];
                        t[i] = -gy[i] * a / (b * b);
                    }
                    accumulate(buf(n.parents[1]), bv.size(), t.data(), t.size());
                }
                break;
            }
            case OpKind::Matmul: {
                int M = pshape(0)[0], K = pshape(0)[1], N = pshape(1)[1];
                const auto& A = pvals(0);
                const auto& B = pvals(1);
                if (parent_rg(0)) {
                    auto& ga = buf(n.parents[0]);
                    for (int m = 0; m < M; ++m)
                        for (int k = 0; k < K; ++k) {
                            double acc = 0.0;
                            const double* gr = &gy[size_t(m) * N];
                            const double* br = &B[size_t(k) * N];
                            for (int c = 0; c < N; ++c) acc += gr[c] * br[c];
                            ga[size_t(m) * K + k] += acc;
                        }
                }
                if (parent_rg(1)) {
                    auto& gb = buf(n.parents[1]);
                    for (int k = 0; k < K; ++k)
                        for (int m = 0; m < M; ++m) {
                            double a = A[size_t(m) * K + k];
                            if (a == 0.0) continue;
                            const double* gr = &gy[size_t(m) * N];
                            double* gbr = &gb[size_t(k) * N];
                            for (int c = 0; c < N; ++c) gbr[c] += a * gr[c];
                        }
                }
                break;
            }
            case OpKind::Conv2d: {
                int Ci = pshape(0)[0], H = pshape(0)[1], W = pshape(0)[2];
                int Co = pshape(1)[0];
                const auto& X = pvals(0);
                const auto& Wt = pvals(1);
                for (int o = 0; o < Co; ++o) {
                    const double* gyo = &gy[size_t(o) * H * W];
                    if (parent_rg(2)) {
                        double acc = 0.0;
                        for (size_t i = 0; i < size_t(H) * W; ++i) acc += gyo[i];
                        buf(n.parents[2])[size_t(o)] += acc;
                    }
                    for (int c = 0; c < Ci; ++c) {
                        const double* xc = &X[size_t(c) * H * W];
                        for (int u = 0; u < 3; ++u) {
                            int du = u - 1;
                            for (int v = 0; v < 3; ++v) {
                                int dv = v - 1;
                                int i0 = std::max(0, -du), i1 = std::min(H, H - du);
                                int j0 = std::max(0, -dv), j1 = std::min(W, W - dv);
                                size_t widx = ((size_t(o) * Ci + c) * 3 + u) * 3 + v;
                                if (parent_rg(1)) {
                                    double acc = 0.0;
                                    for (int i = i0; i < i1; ++i) {
                                        const double* xr = &xc[size_t(i + du) * W + dv];
                                        const double* gr = &gyo[size_t(i) * W];
                                        for (int j = j0; j < j1; ++j) acc += xr[j] * gr[j];
                                    }
                                    buf(n.parents[1])[widx] += acc;
                                }
                                if (parent_rg(0)) {
                                    double wv = Wt[widx];
                                    if (wv != 0.0) {
                                        double* gxc = &buf(n.parents[0])[size_t(c) * H * W];
                                        for (int i = i0; i < i1; ++i) {
                                            double* gxr = &gxc[size_t(i + du) * W + dv];
                                            const double* gr = &gyo[size_t(i) * W];
                                            for (int j = j0; j < j1; ++j) gxr[j] += wv * gr[j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                break;
            }
            case OpKind::Relu: {
                const auto& x = pvals(0);
                auto& g = buf(n.parents[0]);
                for (size_t i = 0; i < gy.size(); ++i)
                    if (x[i] > 0.0) g[i] += gy[i];
                break;
            }
            case OpKind::Sigmoid: {
                auto& g = buf(n.parents[0]);
                for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * n.values[i] * (1.0 - n.values[i]);
                break;
            }
            case OpKind::Exp: {
                auto& g = buf(n.parents[0]);
                for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * n.values[i];
                break;
            }
            case OpKind::Log: {
                const auto& x = pvals(0);
                auto& g = buf(n.parents[0]);
                for (size_t i = 0; i < gy.size(); ++i)
                    if (x[i] > kLogFloor) g[i] += gy[i] / x[i];
                break;
            }
            case OpKind::Sum: {
                auto& g = buf(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) g[i] += gy[0];
                break;
            }
            case OpKind::Mean: {
                auto& g = buf(n.parents[0]);
                double s = gy[0] / double(g.size());
                for (size_t i = 0; i < g.size(); ++i) g[i] += s;
                break;
            }
            case OpKind::ReduceMax: {
                auto& g = buf(n.parents[0]);
                size_t inner = n.values.size();
                for (size_t p = 0; p < inner; ++p) g[size_t(n.iaux[p]) * inner + p] += gy[p];
                break;
            }
            case OpKind::SoftmaxLast: {
                auto& g = buf(n.parents[0]);
                int d = n.shape.back();
                size_t rows = n.values.size() / size_t(d);
                for (size_t r = 0; r < rows; ++r) {
                    const double* y = &n.values[r * size_t(d)];
                    const double* gr = &gy[r * size_t(d)];
                    double dot = 0.0;
                    for (int i = 0; i < d; ++i) dot += gr[i] * y[i];
                    double* go = &g[r * size_t(d)];
                    for (int i = 0; i < d; ++i) go[i] += y[i] * (gr[i] - dot);
                }
                break;
            }
            case OpKind::SquaredL2: {
                const auto& x = pvals(0);
                auto& g = buf(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * x[i] * gy[0];
                break;
            }
            case OpKind::Concat: {
                size_t off = 0;
                for (size_t k = 0; k < n.parents.size(); ++k) {
                    size_t len = pvals(int(k)).size();
                    if (parent_rg(int(k))) {
                        auto& g = buf(n.parents[k]);
                        for (size_t i = 0; i < len; ++i) g[i] += gy[off + i];
                    }
                    off += len;
                }
                break;
            }
            case OpKind::Reshape: {
                auto& g = buf(n.parents[0]);
                for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
                break;
            }
            default: break;
        }
    }

    GradMap out;
    for (int leaf_id : grad_leaves_) {
        if (leaf_id <= root.id && !grads[size_t(leaf_id)].empty()) {
            round_buffer(grads[size_t(leaf_id)]);
            out[leaf_id] = std::move(grads[size_t(leaf_id)]);
        } else {
            out[leaf_id] = std::vector<double>(nodes_[size_t(leaf_id)].values.size(), 0.0);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// tape replay (finite-difference support)
// ---------------------------------------------------------------------------

double Graph::replay_perturbed(Tensor root, int leaf_id, int coord, double delta,
                               bool stop_grad_frozen) const {
    if (!root.valid() || root.graph != this) fail("replay: root is not a tensor of this graph");
    if (numel(node(root.id).shape) != 1) fail("replay: root must be scalar");
    if (leaf_id < 0 || leaf_id > root.id || node(leaf_id).op != OpKind::Leaf)
        fail("replay: leaf id out of range");

    // restrict evaluation to ancestors of the root
    std::vector<char> needed(size_t(root.id) + 1, 0);
    std::vector<int> stack{root.id};
    needed[size_t(root.id)] = 1;
    while (!stack.empty()) {
        int id = stack.back();
        stack.pop_back();
        for (int p : nodes_[size_t(id)].parents) {
            if (!needed[size_t(p)]) {
                needed[size_t(p)] = 1;
                stack.push_back(p);
            }
        }
    }

    std::vector<std::vector<double>> vals(size_t(root.id) + 1);
    for (int id = 0; id <= root.id; ++id) {
        if (!needed[size_t(id)]) continue;
        const Node& n = nodes_[size_t(id)];
        if (n.op == OpKind::Leaf) {
            vals[size_t(id)] = n.values;
            if (id == leaf_id) {
                vals[size_t(id)][size_t(coord)] = round_prec(vals[size_t(id)][size_t(coord)] + delta);
            }
            continue;
        }
        if (n.op == OpKind::StopGrad && stop_grad_frozen) {
            vals[size_t(id)] = n.values;  // value recorded at build time
            continue;
        }
        std::vector<ParentView> views;
        views.reserve(n.parents.size());
        for (int p : n.parents) views.push_back({&nodes_[size_t(p)].shape, &vals[size_t(p)]});
        eval_forward(n.op, views, n.shape, vals[size_t(id)], nullptr);
        round_buffer(vals[size_t(id)]);
        for (double v : vals[size_t(id)])
            if (!std::isfinite(v))
                throw std::runtime_error("non-finite value during perturbed replay at node " +
                                         std::to_string(id) + " (op " + std::string(op_name(n.op)) + ")");
    }
    return vals[size_t(root.id)][0];
}

}  // namespace pgat::ad
