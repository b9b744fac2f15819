#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace pgat::ad {

using Shape = std::vector<int>;

int numel(const Shape& s);
std::string shape_str(const Shape& s);

// Global numeric precision. f32 keeps the math in double but rounds every
// buffer through float after each operation, so forward values and gradients
// behave like 32-bit storage. Set once per process, not per tensor.
enum class Precision { f64, f32 };
Precision precision();
void set_precision(Precision p);

// Closed primitive set. Reshape is a zero-cost shape adapter (identity on
// values and gradient), not an arithmetic primitive; see docs/autodiff.md.
enum class OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Conv2d,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sum,
    Mean,
    ReduceMax,
    SoftmaxLast,
    SquaredL2,
    Concat,
    StopGrad,
    Reshape,
};

const char* op_name(OpKind k);

class Graph;

// Lightweight handle into a Graph's tape.
struct Tensor {
    Graph* graph = nullptr;
    int id = -1;

    bool valid() const { return graph != nullptr && id >= 0; }
    const Shape& shape() const;
    const std::vector<double>& values() const;
    int size() const;
    double scalar() const;  // requires exactly one element
};

struct Node {
    OpKind op = OpKind::Leaf;
    Shape shape;
    std::vector<double> values;
    std::vector<int> parents;
    std::vector<int> iaux;  // per-op bookkeeping (argmax indices for ReduceMax)
    bool requires_grad = false;
};

// Gradients keyed by node id.
using GradMap = std::unordered_map<int, std::vector<double>>;

// Eager forward evaluation with a record-and-replay tape. Backward walks the
// tape in reverse creation order (reverse topological by construction), each
// node exactly once. Single-threaded per graph; independent graphs may run
// concurrently.
class Graph {
public:
    Tensor leaf(std::vector<double> values, Shape shape, bool requires_grad);
    Tensor constant(std::vector<double> values, Shape shape);
    Tensor constant_like(double v, const Shape& shape);
    Tensor scalar(double v);

    // Generic dispatch; rejects unsupported kinds and arity mismatches.
    Tensor apply(OpKind kind, const std::vector<Tensor>& operands);

    // Reverse pass from a one-element root. The result holds a buffer for
    // every requires-grad leaf (zeros when unreached). Aborts with the node
    // id of the first non-finite gradient.
    GradMap backward(Tensor root);

    // Re-run the tape forward with one leaf coordinate displaced by delta and
    // return the root's value. With stop_grad_frozen, StopGrad nodes emit the
    // values recorded at build time instead of the perturbed ones, which is
    // what a finite-difference check of a stop-gradient graph must see.
    double replay_perturbed(Tensor root, int leaf_id, int coord, double delta, bool stop_grad_frozen) const;

    const Node& node(int id) const { return nodes_[size_t(id)]; }
    int node_count() const { return int(nodes_.size()); }
    const std::vector<int>& grad_leaves() const { return grad_leaves_; }
    bool has_stop_grad() const { return has_stop_grad_; }

private:
    friend Tensor emit_op(Graph&, OpKind, const std::vector<Tensor>&, Shape, std::vector<int>);

    int emit(Node n);
    void check_finite_forward(int id) const;

    std::vector<Node> nodes_;
    std::vector<int> grad_leaves_;
    bool has_stop_grad_ = false;
};

// ---- primitives ----
// Elementwise binaries broadcast a one-element tensor against any shape;
// otherwise shapes must match exactly.
Tensor add(Tensor a, Tensor b);
Tensor sub(Tensor a, Tensor b);
Tensor mul(Tensor a, Tensor b);
Tensor div(Tensor a, Tensor b);
// [M,K] x [K,N] -> [M,N]
Tensor matmul(Tensor a, Tensor b);
// x:[Cin,H,W], w:[Cout,Cin,3,3], b:[Cout] -> [Cout,H,W]; stride 1, zero-pad 1
Tensor conv2d(Tensor x, Tensor w, Tensor b);
Tensor relu(Tensor x);
Tensor sigmoid(Tensor x);
Tensor exp(Tensor x);
// guarded: log(max(x, 1e-12))
Tensor log(Tensor x);
Tensor sum(Tensor x);
Tensor mean(Tensor x);
// [K, inner...] -> [inner...]; max over the leading axis, subgradient to the
// achieving slice, ties to the lowest index
Tensor reduce_max(Tensor x);
Tensor softmax_last(Tensor x);
Tensor squared_l2(Tensor x);
// join along the leading axis; trailing extents must match
Tensor concat(const std::vector<Tensor>& parts);
// identity on values, constant in the backward pass; idempotent
Tensor stop_gradient(Tensor x);
Tensor reshape(Tensor x, Shape shape);

constexpr double kLogFloor = 1e-12;

}  // namespace pgat::ad
