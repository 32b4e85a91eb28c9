#pragma once

// Reverse-mode differentiation on dense 2-D tensors. A Tape records one
// forward pass; backward() walks it once in reverse. The primitive set is
// exactly what the encoder and the training objectives need. Broadcasting
// is limited to scalar*tensor, row-vector bias, and per-group tiling; all
// other shapes must match exactly.

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "msd/errors.hpp"

namespace msd::ad {

// Test hook: when set, the Cholesky log-det backward rule is deliberately
// mis-scaled so gradient-check harnesses can prove they detect seeded bugs.
inline bool g_fault_cholesky_backward = false;

enum class Op : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    AddRow,
    AddTiled,
    Scale,
    MatMul,
    Transpose,
    Reshape,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    GatherRows,
    SumAll,
    MeanAll,
    SumAxis0,
    MeanAxis0,
    SumAxis1,
    MeanAxis1,
    Gelu,
    LayerNorm,
    L2NormRows,
    SoftmaxRows,
    AttnScores,
    AttnApply,
    SpdLogDet,
    Log,
    Exp,
};

template <class S>
class Tape;

template <class S>
struct Tensor {
    Tape<S>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const std::vector<int>& shape() const;
    int rows() const;
    int cols() const;
    std::size_t numel() const;
};

namespace detail {

inline std::size_t numel_of(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    return n;
}

inline bool is_scalar(const std::vector<int>& shape) { return numel_of(shape) == 1; }

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapM = Eigen::Map<EMat<S>>;
template <class S>
using CMapM = Eigen::Map<const EMat<S>>;

}  // namespace detail

template <class S>
struct Node {
    Op op = Op::Leaf;
    std::vector<int> in;
    std::vector<int> shape;
    std::vector<S> val;
    std::vector<S> grad;  // allocated on demand during backward
    bool requires_grad = false;

    // Per-op metadata: slice bounds / axis / group size in a,b; scale factor
    // or epsilon in c; gather indices in idx; saved statistics in aux.
    int a = 0, b = 0;
    double c = 0.0;
    std::vector<int> idx;
    std::vector<S> aux;

    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
};

template <class S>
class Tape {
public:
    Tensor<S> leaf(std::vector<int> shape, std::span<const S> data, bool requires_grad) {
        if (data.size() != detail::numel_of(shape))
            throw ShapeError("leaf data length does not match shape");
        Node<S> n;
        n.op = Op::Leaf;
        n.shape = std::move(shape);
        n.val.assign(data.begin(), data.end());
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    Tensor<S> leaf_zeros(std::vector<int> shape, bool requires_grad) {
        Node<S> n;
        n.op = Op::Leaf;
        n.val.assign(detail::numel_of(shape), S(0));
        n.shape = std::move(shape);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    Tensor<S> scalar(S v, bool requires_grad = false) {
        return leaf({1}, std::span<const S>(&v, 1), requires_grad);
    }

    const Node<S>& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    Node<S>& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }

    std::span<const S> value(Tensor<S> t) const { return node(t.id).val; }
    S value0(Tensor<S> t) const { return node(t.id).val[0]; }

    // Gradient of the last backward() w.r.t. t. Zero-filled for leaves that
    // were never reached. Empty for tensors that do not require grad.
    std::span<const S> grad(Tensor<S> t) const { return node(t.id).grad; }

    void backward(Tensor<S> loss);

    // ---- primitive builders ----
    Tensor<S> add(Tensor<S> a, Tensor<S> b) { return binary(Op::Add, a, b); }
    Tensor<S> sub(Tensor<S> a, Tensor<S> b) { return binary(Op::Sub, a, b); }
    Tensor<S> mul(Tensor<S> a, Tensor<S> b) { return binary(Op::Mul, a, b); }
    Tensor<S> add_row(Tensor<S> x, Tensor<S> bias);
    Tensor<S> add_tiled(Tensor<S> x, Tensor<S> block);
    Tensor<S> scale(Tensor<S> x, double factor);
    Tensor<S> matmul(Tensor<S> a, Tensor<S> b);
    Tensor<S> transpose(Tensor<S> x);
    Tensor<S> reshape(Tensor<S> x, std::vector<int> shape);
    Tensor<S> concat_rows(const std::vector<Tensor<S>>& xs);
    Tensor<S> concat_cols(const std::vector<Tensor<S>>& xs);
    Tensor<S> slice_rows(Tensor<S> x, int r0, int r1);
    Tensor<S> slice_cols(Tensor<S> x, int c0, int c1);
    Tensor<S> gather_rows(Tensor<S> x, std::vector<int> indices);
    Tensor<S> sum_all(Tensor<S> x) { return reduce_all(Op::SumAll, x); }
    Tensor<S> mean_all(Tensor<S> x) { return reduce_all(Op::MeanAll, x); }
    Tensor<S> sum_axis(Tensor<S> x, int axis) {
        return reduce_axis(axis == 0 ? Op::SumAxis0 : Op::SumAxis1, x, axis);
    }
    Tensor<S> mean_axis(Tensor<S> x, int axis) {
        return reduce_axis(axis == 0 ? Op::MeanAxis0 : Op::MeanAxis1, x, axis);
    }
    Tensor<S> gelu(Tensor<S> x);
    Tensor<S> layernorm(Tensor<S> x, Tensor<S> gamma, Tensor<S> beta, double eps = 1e-6);
    Tensor<S> l2norm_rows(Tensor<S> x);
    Tensor<S> softmax_rows(Tensor<S> x);
    Tensor<S> attn_scores(Tensor<S> q, Tensor<S> k, int group);
    Tensor<S> attn_apply(Tensor<S> p, Tensor<S> v, int group);
    Tensor<S> spd_logdet_cholesky(Tensor<S> a);
    Tensor<S> log(Tensor<S> x);
    Tensor<S> exp(Tensor<S> x);

private:
    std::vector<Node<S>> nodes_;

    Tensor<S> push(Node<S>&& n) {
        nodes_.push_back(std::move(n));
        return Tensor<S>{this, static_cast<int>(nodes_.size()) - 1};
    }

    void check_same_tape(Tensor<S> t) const {
        if (t.tape != this) throw ContractError("tensor belongs to a different tape");
    }

    Node<S> make(Op op, std::vector<Tensor<S>> ins, std::vector<int> shape) {
        Node<S> n;
        n.op = op;
        n.shape = std::move(shape);
        for (auto t : ins) {
            check_same_tape(t);
            n.in.push_back(t.id);
            n.requires_grad = n.requires_grad || node(t.id).requires_grad;
        }
        n.val.resize(detail::numel_of(n.shape));
        return n;
    }

    Tensor<S> binary(Op op, Tensor<S> a, Tensor<S> b);
    Tensor<S> reduce_all(Op op, Tensor<S> x);
    Tensor<S> reduce_axis(Op op, Tensor<S> x, int axis);

    void backward_node(int id);
    std::vector<S>& grad_buf(int id) {
        auto& n = node(id);
        if (n.grad.empty()) n.grad.assign(n.val.size(), S(0));
        return n.grad;
    }
};

template <class S>
const std::vector<int>& Tensor<S>::shape() const {
    return tape->node(id).shape;
}
template <class S>
int Tensor<S>::rows() const {
    return tape->node(id).rows();
}
template <class S>
int Tensor<S>::cols() const {
    return tape->node(id).cols();
}
template <class S>
std::size_t Tensor<S>::numel() const {
    return tape->node(id).val.size();
}

// ---------------------------------------------------------------------------
// forward kernels
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> Tape<S>::binary(Op op, Tensor<S> a, Tensor<S> b) {
    if (node(a.id).shape != node(b.id).shape)
        throw ShapeError("elementwise operands must have identical shapes");
    Node<S> n = make(op, {a, b}, node(a.id).shape);
    const auto& va = node(a.id).val;
    const auto& vb = node(b.id).val;
    for (std::size_t i = 0; i < n.val.size(); ++i) {
        switch (op) {
            case Op::Add: n.val[i] = va[i] + vb[i]; break;
            case Op::Sub: n.val[i] = va[i] - vb[i]; break;
            default: n.val[i] = va[i] * vb[i]; break;
        }
    }
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::add_row(Tensor<S> x, Tensor<S> bias) {
    const int c = node(x.id).cols();
    if (static_cast<int>(node(bias.id).val.size()) != c)
        throw ShapeError("row bias length must equal column count");
    Node<S> n = make(Op::AddRow, {x, bias}, node(x.id).shape);
    const auto& vx = node(x.id).val;
    const auto& vb = node(bias.id).val;
    const int r = node(x.id).rows();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            n.val[static_cast<std::size_t>(i) * c + j] = vx[static_cast<std::size_t>(i) * c + j] + vb[j];
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::add_tiled(Tensor<S> x, Tensor<S> block) {
    const int c = node(x.id).cols();
    const int t = node(block.id).rows();
    if (node(block.id).cols() != c) throw ShapeError("tiled block column count mismatch");
    if (t <= 0 || node(x.id).rows() % t != 0)
        throw ShapeError("row count must be a multiple of the tiled block rows");
    Node<S> n = make(Op::AddTiled, {x, block}, node(x.id).shape);
    const auto& vx = node(x.id).val;
    const auto& vb = node(block.id).val;
    const int r = node(x.id).rows();
    for (int i = 0; i < r; ++i) {
        const std::size_t bo = static_cast<std::size_t>(i % t) * c;
        for (int j = 0; j < c; ++j)
            n.val[static_cast<std::size_t>(i) * c + j] = vx[static_cast<std::size_t>(i) * c + j] + vb[bo + j];
    }
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::scale(Tensor<S> x, double factor) {
    Node<S> n = make(Op::Scale, {x}, node(x.id).shape);
    n.c = factor;
    const auto& vx = node(x.id).val;
    const S f = static_cast<S>(factor);
    for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = vx[i] * f;
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::matmul(Tensor<S> a, Tensor<S> b) {
    const auto& na = node(a.id);
    const auto& nb = node(b.id);
    if (na.shape.size() != 2 || nb.shape.size() != 2 || na.cols() != nb.rows())
        throw ShapeError("matmul shape mismatch: (" + std::to_string(na.rows()) + "," +
                         std::to_string(na.cols()) + ") x (" + std::to_string(nb.rows()) + "," +
                         std::to_string(nb.cols()) + ")");
    Node<S> n = make(Op::MatMul, {a, b}, {na.rows(), nb.cols()});
    detail::CMapM<S> ma(node(a.id).val.data(), node(a.id).rows(), node(a.id).cols());
    detail::CMapM<S> mb(node(b.id).val.data(), node(b.id).rows(), node(b.id).cols());
    detail::MapM<S> mo(n.val.data(), n.shape[0], n.shape[1]);
    mo.noalias() = ma * mb;
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::transpose(Tensor<S> x) {
    const auto& nx = node(x.id);
    if (nx.shape.size() != 2) throw ShapeError("transpose expects a 2-D tensor");
    Node<S> n = make(Op::Transpose, {x}, {nx.cols(), nx.rows()});
    detail::CMapM<S> mx(node(x.id).val.data(), node(x.id).rows(), node(x.id).cols());
    detail::MapM<S> mo(n.val.data(), n.shape[0], n.shape[1]);
    mo = mx.transpose();
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::reshape(Tensor<S> x, std::vector<int> shape) {
    if (detail::numel_of(shape) != node(x.id).val.size())
        throw ShapeError("reshape must preserve element count");
    Node<S> n = make(Op::Reshape, {x}, std::move(shape));
    n.val = node(x.id).val;
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::concat_rows(const std::vector<Tensor<S>>& xs) {
    if (xs.empty()) throw ContractError("concat_rows needs at least one input");
    const int c = node(xs[0].id).cols();
    int r = 0;
    for (auto t : xs) {
        if (node(t.id).cols() != c) throw ShapeError("concat_rows column mismatch");
        r += node(t.id).rows();
    }
    Node<S> n = make(Op::ConcatRows, xs, {r, c});
    std::size_t off = 0;
    for (auto t : xs) {
        const auto& v = node(t.id).val;
        std::copy(v.begin(), v.end(), n.val.begin() + off);
        off += v.size();
    }
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::concat_cols(const std::vector<Tensor<S>>& xs) {
    if (xs.empty()) throw ContractError("concat_cols needs at least one input");
    const int r = node(xs[0].id).rows();
    int c = 0;
    for (auto t : xs) {
        if (node(t.id).rows() != r) throw ShapeError("concat_cols row mismatch");
        c += node(t.id).cols();
    }
    Node<S> n = make(Op::ConcatCols, xs, {r, c});
    int coff = 0;
    for (auto t : xs) {
        const auto& src = node(t.id);
        for (int i = 0; i < r; ++i)
            std::copy_n(src.val.begin() + static_cast<std::size_t>(i) * src.cols(), src.cols(),
                        n.val.begin() + static_cast<std::size_t>(i) * c + coff);
        coff += src.cols();
    }
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::slice_rows(Tensor<S> x, int r0, int r1) {
    const auto& nx = node(x.id);
    if (r0 < 0 || r1 > nx.rows() || r0 >= r1) throw ShapeError("slice_rows range invalid");
    Node<S> n = make(Op::SliceRows, {x}, {r1 - r0, nx.cols()});
    n.a = r0;
    n.b = r1;
    const int c = nx.cols();
    std::copy_n(node(x.id).val.begin() + static_cast<std::size_t>(r0) * c,
                static_cast<std::size_t>(r1 - r0) * c, n.val.begin());
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::slice_cols(Tensor<S> x, int c0, int c1) {
    const auto& nx = node(x.id);
    if (c0 < 0 || c1 > nx.cols() || c0 >= c1) throw ShapeError("slice_cols range invalid");
    Node<S> n = make(Op::SliceCols, {x}, {nx.rows(), c1 - c0});
    n.a = c0;
    n.b = c1;
    const int r = nx.rows(), c = nx.cols(), w = c1 - c0;
    const auto& vx = node(x.id).val;
    for (int i = 0; i < r; ++i)
        std::copy_n(vx.begin() + static_cast<std::size_t>(i) * c + c0, w,
                    n.val.begin() + static_cast<std::size_t>(i) * w);
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::gather_rows(Tensor<S> x, std::vector<int> indices) {
    const auto& nx = node(x.id);
    for (int i : indices)
        if (i < 0 || i >= nx.rows()) throw ShapeError("gather_rows index out of range");
    Node<S> n = make(Op::GatherRows, {x}, {static_cast<int>(indices.size()), nx.cols()});
    n.idx = std::move(indices);
    const int c = nx.cols();
    const auto& vx = node(x.id).val;
    for (std::size_t i = 0; i < n.idx.size(); ++i)
        std::copy_n(vx.begin() + static_cast<std::size_t>(n.idx[i]) * c, c, n.val.begin() + i * c);
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::reduce_all(Op op, Tensor<S> x) {
    Node<S> n = make(op, {x}, {1});
    const auto& vx = node(x.id).val;
    long double acc = 0;
    for (S v : vx) acc += v;
    n.val[0] = static_cast<S>(op == Op::MeanAll ? acc / static_cast<long double>(vx.size()) : acc);
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::reduce_axis(Op op, Tensor<S> x, int axis) {
    const auto& nx = node(x.id);
    if (nx.shape.size() != 2) throw ShapeError("axis reduction expects a 2-D tensor");
    if (axis != 0 && axis != 1) throw ShapeError("axis must be 0 or 1");
    const int r = nx.rows(), c = nx.cols();
    Node<S> n = make(op, {x}, axis == 0 ? std::vector<int>{1, c} : std::vector<int>{r, 1});
    n.a = axis;
    const auto& vx = node(x.id).val;
    if (axis == 0) {
        std::vector<long double> acc(static_cast<std::size_t>(c), 0);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) acc[j] += vx[static_cast<std::size_t>(i) * c + j];
        for (int j = 0; j < c; ++j)
            n.val[j] = static_cast<S>(op == Op::MeanAxis0 ? acc[j] / r : acc[j]);
    } else {
        for (int i = 0; i < r; ++i) {
            long double acc = 0;
            for (int j = 0; j < c; ++j) acc += vx[static_cast<std::size_t>(i) * c + j];
            n.val[i] = static_cast<S>(op == Op::MeanAxis1 ? acc / c : acc);
        }
    }
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::gelu(Tensor<S> x) {
    Node<S> n = make(Op::Gelu, {x}, node(x.id).shape);
    const auto& vx = node(x.id).val;
    for (std::size_t i = 0; i < n.val.size(); ++i) {
        const double v = static_cast<double>(vx[i]);
        n.val[i] = static_cast<S>(0.5 * v * (1.0 + std::erf(v * 0.7071067811865475244)));
    }
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::layernorm(Tensor<S> x, Tensor<S> gamma, Tensor<S> beta, double eps) {
    const auto& nx = node(x.id);
    const int c = nx.cols();
    if (static_cast<int>(node(gamma.id).val.size()) != c ||
        static_cast<int>(node(beta.id).val.size()) != c)
        throw ShapeError("layernorm affine parameters must have length equal to the last axis");
    Node<S> n = make(Op::LayerNorm, {x, gamma, beta}, nx.shape);
    n.c = eps;
    const int r = nx.rows();
    n.aux.resize(static_cast<std::size_t>(r) * 2);  // per row: mu, inv_sigma
    const auto& vx = node(x.id).val;
    const auto& vg = node(gamma.id).val;
    const auto& vb = node(beta.id).val;
    for (int i = 0; i < r; ++i) {
        const S* row = vx.data() + static_cast<std::size_t>(i) * c;
        double mu = 0;
        for (int j = 0; j < c; ++j) mu += row[j];
        mu /= c;
        double var = 0;
        for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= c;
        const double inv = 1.0 / std::sqrt(var + eps);
        n.aux[static_cast<std::size_t>(i) * 2] = static_cast<S>(mu);
        n.aux[static_cast<std::size_t>(i) * 2 + 1] = static_cast<S>(inv);
        S* out = n.val.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j)
            out[j] = static_cast<S>((row[j] - mu) * inv) * vg[j] + vb[j];
    }
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::l2norm_rows(Tensor<S> x) {
    const auto& nx = node(x.id);
    const int r = nx.rows(), c = nx.cols();
    Node<S> n = make(Op::L2NormRows, {x}, nx.shape);
    n.aux.resize(static_cast<std::size_t>(r));
    const auto& vx = node(x.id).val;
    for (int i = 0; i < r; ++i) {
        const S* row = vx.data() + static_cast<std::size_t>(i) * c;
        double nrm = 0;
        for (int j = 0; j < c; ++j) nrm += static_cast<double>(row[j]) * row[j];
        nrm = std::sqrt(nrm);
        if (nrm < 1e-20)
            throw ContractError("cannot L2-normalize a zero row (row " + std::to_string(i) + ")");
        n.aux[static_cast<std::size_t>(i)] = static_cast<S>(nrm);
        S* out = n.val.data() + static_cast<std::size_t>(i) * c;
        const S inv = static_cast<S>(1.0 / nrm);
        for (int j = 0; j < c; ++j) out[j] = row[j] * inv;
    }
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::softmax_rows(Tensor<S> x) {
    const auto& nx = node(x.id);
    const int r = nx.rows(), c = nx.cols();
    Node<S> n = make(Op::SoftmaxRows, {x}, nx.shape);
    const auto& vx = node(x.id).val;
    for (int i = 0; i < r; ++i) {
        const S* row = vx.data() + static_cast<std::size_t>(i) * c;
        S* out = n.val.data() + static_cast<std::size_t>(i) * c;
        S mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double denom = 0;
        for (int j = 0; j < c; ++j) {
            const double e = std::exp(static_cast<double>(row[j] - mx));
            out[j] = static_cast<S>(e);
            denom += e;
        }
        const S inv = static_cast<S>(1.0 / denom);
        for (int j = 0; j < c; ++j) out[j] *= inv;
    }
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::attn_scores(Tensor<S> q, Tensor<S> k, int group) {
    const auto& nq = node(q.id);
    const auto& nk = node(k.id);
    if (nq.shape != nk.shape) throw ShapeError("attn_scores operands must match");
    if (group <= 0 || nq.rows() % group != 0)
        throw ShapeError("attn_scores rows must be a multiple of the group size");
    const int g = nq.rows() / group, d = nq.cols();
    Node<S> n = make(Op::AttnScores, {q, k}, {nq.rows(), group});
    n.a = group;
    detail::CMapM<S> mq(node(q.id).val.data(), nq.rows(), d);
    detail::CMapM<S> mk(node(k.id).val.data(), nq.rows(), d);
    detail::MapM<S> mo(n.val.data(), nq.rows(), group);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < g; ++i)
        mo.middleRows(i * group, group).noalias() =
            mq.middleRows(i * group, group) * mk.middleRows(i * group, group).transpose();
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::attn_apply(Tensor<S> p, Tensor<S> v, int group) {
    const auto& np = node(p.id);
    const auto& nv = node(v.id);
    if (np.cols() != group || np.rows() != nv.rows() || np.rows() % group != 0)
        throw ShapeError("attn_apply shape mismatch");
    const int g = np.rows() / group, d = nv.cols();
    Node<S> n = make(Op::AttnApply, {p, v}, {np.rows(), d});
    n.a = group;
    detail::CMapM<S> mp(node(p.id).val.data(), np.rows(), group);
    detail::CMapM<S> mv(node(v.id).val.data(), nv.rows(), d);
    detail::MapM<S> mo(n.val.data(), np.rows(), d);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < g; ++i)
        mo.middleRows(i * group, group).noalias() =
            mp.middleRows(i * group, group) * mv.middleRows(i * group, group);
    return push(std::move(n));
}

namespace detail {

// Lower-triangular Cholesky; throws NotSPDError with the failing pivot.
template <class S>
void cholesky(const S* m, int p, S* l) {
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j <= i; ++j) {
            long double acc = m[static_cast<std::size_t>(i) * p + j];
            for (int k2 = 0; k2 < j; ++k2)
                acc -= static_cast<long double>(l[static_cast<std::size_t>(i) * p + k2]) *
                       l[static_cast<std::size_t>(j) * p + k2];
            if (i == j) {
                if (!(acc > 0))
                    throw NotSPDError("non-positive pivot at index " + std::to_string(i), i);
                l[static_cast<std::size_t>(i) * p + j] = static_cast<S>(std::sqrt(static_cast<double>(acc)));
            } else {
                l[static_cast<std::size_t>(i) * p + j] =
                    static_cast<S>(acc / l[static_cast<std::size_t>(j) * p + j]);
            }
        }
        for (int j = i + 1; j < p; ++j) l[static_cast<std::size_t>(i) * p + j] = S(0);
    }
}

// Inverse of the SPD matrix from its Cholesky factor: solve L Y = I, then
// L^T X = Y.
template <class S>
void spd_inverse_from_cholesky(const S* l, int p, S* x) {
    std::vector<double> y(static_cast<std::size_t>(p) * p, 0.0);
    for (int col = 0; col < p; ++col) {
        for (int i = 0; i < p; ++i) {
            double acc = (i == col) ? 1.0 : 0.0;
            for (int k = 0; k < i; ++k)
                acc -= static_cast<double>(l[static_cast<std::size_t>(i) * p + k]) *
                       y[static_cast<std::size_t>(k) * p + col];
            y[static_cast<std::size_t>(i) * p + col] =
                acc / static_cast<double>(l[static_cast<std::size_t>(i) * p + i]);
        }
    }
    for (int col = 0; col < p; ++col) {
        for (int i = p - 1; i >= 0; --i) {
            double acc = y[static_cast<std::size_t>(i) * p + col];
            for (int k = i + 1; k < p; ++k)
                acc -= static_cast<double>(l[static_cast<std::size_t>(k) * p + i]) *
                       x[static_cast<std::size_t>(k) * p + col];
            x[static_cast<std::size_t>(i) * p + col] =
                static_cast<S>(acc / static_cast<double>(l[static_cast<std::size_t>(i) * p + i]));
        }
    }
}

}  // namespace detail

template <class S>
Tensor<S> Tape<S>::spd_logdet_cholesky(Tensor<S> a) {
    const auto& na = node(a.id);
    if (na.shape.size() != 2 || na.rows() != na.cols())
        throw ShapeError("spd_logdet_cholesky expects a square matrix");
    const int p = na.rows();
    Node<S> n = make(Op::SpdLogDet, {a}, {1});
    // Symmetrize before factorization; the backward rule accounts for it.
    std::vector<S> sym(static_cast<std::size_t>(p) * p);
    const auto& va = node(a.id).val;
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j)
            sym[static_cast<std::size_t>(i) * p + j] =
                (va[static_cast<std::size_t>(i) * p + j] + va[static_cast<std::size_t>(j) * p + i]) / S(2);
    n.aux.resize(static_cast<std::size_t>(p) * p);
    detail::cholesky(sym.data(), p, n.aux.data());
    long double acc = 0;
    for (int i = 0; i < p; ++i) acc += std::log(static_cast<long double>(n.aux[static_cast<std::size_t>(i) * p + i]));
    n.val[0] = static_cast<S>(2 * acc);
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::log(Tensor<S> x) {
    Node<S> n = make(Op::Log, {x}, node(x.id).shape);
    const auto& vx = node(x.id).val;
    for (std::size_t i = 0; i < n.val.size(); ++i) {
        if (!(vx[i] > S(0))) throw ValidationError("log requires strictly positive inputs");
        n.val[i] = std::log(vx[i]);
    }
    return push(std::move(n));
}

template <class S>
Tensor<S> Tape<S>::exp(Tensor<S> x) {
    Node<S> n = make(Op::Exp, {x}, node(x.id).shape);
    const auto& vx = node(x.id).val;
    for (std::size_t i = 0; i < n.val.size(); ++i) n.val[i] = std::exp(vx[i]);
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <class S>
void Tape<S>::backward(Tensor<S> loss) {
    check_same_tape(loss);
    if (!detail::is_scalar(node(loss.id).shape))
        throw ContractError("backward requires a scalar loss");
    if (!node(loss.id).requires_grad)
        throw ContractError("loss does not depend on any differentiable leaf");
    // Fresh pass: clear old gradients, zero-fill differentiable leaves so
    // unreached ones report zeros.
    for (auto& n : nodes_) n.grad.clear();
    for (auto& n : nodes_)
        if (n.op == Op::Leaf && n.requires_grad) n.grad.assign(n.val.size(), S(0));
    grad_buf(loss.id)[0] = S(1);
    for (int id = loss.id; id >= 0; --id) {
        const auto& n = node(id);
        if (n.op == Op::Leaf || !n.requires_grad || n.grad.empty()) continue;
        backward_node(id);
    }
}

template <class S>
void Tape<S>::backward_node(int id) {
    Node<S>& n = node(id);
    const std::vector<S>& g = n.grad;
    auto in_val = [&](int slot) -> const std::vector<S>& { return node(n.in[slot]).val; };
    auto needs = [&](int slot) { return node(n.in[slot]).requires_grad; };

    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::Add:
            for (int s = 0; s < 2; ++s)
                if (needs(s)) {
                    auto& gb = grad_buf(n.in[s]);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                }
            break;
        case Op::Sub:
            if (needs(0)) {
                auto& gb = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
            if (needs(1)) {
                auto& gb = grad_buf(n.in[1]);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
            break;
        case Op::Mul:
            if (needs(0)) {
                auto& gb = grad_buf(n.in[0]);
                const auto& other = in_val(1);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * other[i];
            }
            if (needs(1)) {
                auto& gb = grad_buf(n.in[1]);
                const auto& other = in_val(0);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * other[i];
            }
            break;
        case Op::AddRow: {
            const int r = n.rows(), c = n.cols();
            if (needs(0)) {
                auto& gb = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
            if (needs(1)) {
                auto& gb = grad_buf(n.in[1]);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) gb[j] += g[static_cast<std::size_t>(i) * c + j];
            }
            break;
        }
        case Op::AddTiled: {
            const int r = n.rows(), c = n.cols(), t = node(n.in[1]).rows();
            if (needs(0)) {
                auto& gb = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
            if (needs(1)) {
                auto& gb = grad_buf(n.in[1]);
                for (int i = 0; i < r; ++i) {
                    const std::size_t bo = static_cast<std::size_t>(i % t) * c;
                    for (int j = 0; j < c; ++j) gb[bo + j] += g[static_cast<std::size_t>(i) * c + j];
                }
            }
            break;
        }
        case Op::Scale:
            if (needs(0)) {
                auto& gb = grad_buf(n.in[0]);
                const S f = static_cast<S>(n.c);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * f;
            }
            break;
        case Op::MatMul: {
            const auto& a = node(n.in[0]);
            const auto& b = node(n.in[1]);
            detail::CMapM<S> mg(g.data(), n.rows(), n.cols());
            if (needs(0)) {
                detail::CMapM<S> mb(b.val.data(), b.rows(), b.cols());
                detail::MapM<S> ga(grad_buf(n.in[0]).data(), a.rows(), a.cols());
                ga.noalias() += mg * mb.transpose();
            }
            if (needs(1)) {
                detail::CMapM<S> ma(a.val.data(), a.rows(), a.cols());
                detail::MapM<S> gb(grad_buf(n.in[1]).data(), b.rows(), b.cols());
                gb.noalias() += ma.transpose() * mg;
            }
            break;
        }
        case Op::Transpose:
            if (needs(0)) {
                const auto& x = node(n.in[0]);
                detail::CMapM<S> mg(g.data(), n.rows(), n.cols());
                detail::MapM<S> gx(grad_buf(n.in[0]).data(), x.rows(), x.cols());
                gx += mg.transpose();
            }
            break;
        case Op::Reshape:
            if (needs(0)) {
                auto& gb = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
            break;
        case Op::ConcatRows: {
            std::size_t off = 0;
            for (std::size_t s = 0; s < n.in.size(); ++s) {
                const std::size_t sz = node(n.in[s]).val.size();
                if (needs(static_cast<int>(s))) {
                    auto& gb = grad_buf(n.in[s]);
                    for (std::size_t i = 0; i < sz; ++i) gb[i] += g[off + i];
                }
                off += sz;
            }
            break;
        }
        case Op::ConcatCols: {
            const int r = n.rows(), c = n.cols();
            int coff = 0;
            for (std::size_t s = 0; s < n.in.size(); ++s) {
                const int w = node(n.in[s]).cols();
                if (needs(static_cast<int>(s))) {
                    auto& gb = grad_buf(n.in[s]);
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < w; ++j)
                            gb[static_cast<std::size_t>(i) * w + j] +=
                                g[static_cast<std::size_t>(i) * c + coff + j];
                }
                coff += w;
            }
            break;
        }
        case Op::SliceRows:
            if (needs(0)) {
                const int c = n.cols();
                auto& gb = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i)
                    gb[static_cast<std::size_t>(n.a) * c + i] += g[i];
            }
            break;
        case Op::SliceCols:
            if (needs(0)) {
                const auto& x = node(n.in[0]);
                const int r = n.rows(), w = n.cols(), c = x.cols();
                auto& gb = grad_buf(n.in[0]);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < w; ++j)
                        gb[static_cast<std::size_t>(i) * c + n.a + j] += g[static_cast<std::size_t>(i) * w + j];
            }
            break;
        case Op::GatherRows:
            if (needs(0)) {
                const int c = n.cols();
                auto& gb = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < n.idx.size(); ++i)
                    for (int j = 0; j < c; ++j)
                        gb[static_cast<std::size_t>(n.idx[i]) * c + j] += g[i * c + j];
            }
            break;
        case Op::SumAll:
        case Op::MeanAll:
            if (needs(0)) {
                auto& gb = grad_buf(n.in[0]);
                const S f = n.op == Op::MeanAll ? static_cast<S>(1.0 / static_cast<double>(gb.size()))
                                                : S(1);
                for (auto& v : gb) v += g[0] * f;
            }
            break;
        case Op::SumAxis0:
        case Op::MeanAxis0:
            if (needs(0)) {
                const auto& x = node(n.in[0]);
                const int r = x.rows(), c = x.cols();
                const S f = n.op == Op::MeanAxis0 ? static_cast<S>(1.0 / r) : S(1);
                auto& gb = grad_buf(n.in[0]);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) gb[static_cast<std::size_t>(i) * c + j] += g[j] * f;
            }
            break;
        case Op::SumAxis1:
        case Op::MeanAxis1:
            if (needs(0)) {
                const auto& x = node(n.in[0]);
                const int r = x.rows(), c = x.cols();
                const S f = n.op == Op::MeanAxis1 ? static_cast<S>(1.0 / c) : S(1);
                auto& gb = grad_buf(n.in[0]);
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) gb[static_cast<std::size_t>(i) * c + j] += g[i] * f;
            }
            break;
        case Op::Gelu:
            if (needs(0)) {
                const auto& x = in_val(0);
                auto& gb = grad_buf(n.in[0]);
                constexpr double kInvSqrt2 = 0.7071067811865475244;
                constexpr double kInvSqrt2Pi = 0.3989422804014326779;
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double v = static_cast<double>(x[i]);
                    const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                    gb[i] += g[i] * static_cast<S>(cdf + v * pdf);
                }
            }
            break;
        case Op::LayerNorm: {
            const auto& x = node(n.in[0]);
            const int r = x.rows(), c = x.cols();
            const auto& vg = in_val(1);
            for (int i = 0; i < r; ++i) {
                const S* xrow = x.val.data() + static_cast<std::size_t>(i) * c;
                const S* grow = g.data() + static_cast<std::size_t>(i) * c;
                const double mu = static_cast<double>(n.aux[static_cast<std::size_t>(i) * 2]);
                const double inv = static_cast<double>(n.aux[static_cast<std::size_t>(i) * 2 + 1]);
                double sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (int j = 0; j < c; ++j) {
                    const double xhat = (xrow[j] - mu) * inv;
                    const double dxhat = static_cast<double>(grow[j]) * vg[j];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                if (needs(0)) {
                    auto& gx = grad_buf(n.in[0]);
                    for (int j = 0; j < c; ++j) {
                        const double xhat = (xrow[j] - mu) * inv;
                        const double dxhat = static_cast<double>(grow[j]) * vg[j];
                        gx[static_cast<std::size_t>(i) * c + j] += static_cast<S>(
                            inv * (dxhat - sum_dxhat / c - xhat * sum_dxhat_xhat / c));
                    }
                }
                if (needs(1)) {
                    auto& gg = grad_buf(n.in[1]);
                    for (int j = 0; j < c; ++j)
                        gg[j] += grow[j] * static_cast<S>((xrow[j] - mu) * inv);
                }
                if (needs(2)) {
                    auto& gb2 = grad_buf(n.in[2]);
                    for (int j = 0; j < c; ++j) gb2[j] += grow[j];
                }
            }
            break;
        }
        case Op::L2NormRows:
            if (needs(0)) {
                const int r = n.rows(), c = n.cols();
                auto& gb = grad_buf(n.in[0]);
                for (int i = 0; i < r; ++i) {
                    const S* yrow = n.val.data() + static_cast<std::size_t>(i) * c;
                    const S* grow = g.data() + static_cast<std::size_t>(i) * c;
                    const double inv = 1.0 / static_cast<double>(n.aux[static_cast<std::size_t>(i)]);
                    double dot = 0;
                    for (int j = 0; j < c; ++j) dot += static_cast<double>(grow[j]) * yrow[j];
                    for (int j = 0; j < c; ++j)
                        gb[static_cast<std::size_t>(i) * c + j] +=
                            static_cast<S>((grow[j] - dot * yrow[j]) * inv);
                }
            }
            break;
        case Op::SoftmaxRows:
            if (needs(0)) {
                const int r = n.rows(), c = n.cols();
                auto& gb = grad_buf(n.in[0]);
                for (int i = 0; i < r; ++i) {
                    const S* yrow = n.val.data() + static_cast<std::size_t>(i) * c;
                    const S* grow = g.data() + static_cast<std::size_t>(i) * c;
                    double dot = 0;
                    for (int j = 0; j < c; ++j) dot += static_cast<double>(grow[j]) * yrow[j];
                    for (int j = 0; j < c; ++j)
                        gb[static_cast<std::size_t>(i) * c + j] +=
                            yrow[j] * static_cast<S>(grow[j] - dot);
                }
            }
            break;
        case Op::AttnScores: {
            const auto& q = node(n.in[0]);
            const int t = n.a, gcount = q.rows() / t, d = q.cols();
            detail::CMapM<S> mg(g.data(), q.rows(), t);
            detail::CMapM<S> mq(node(n.in[0]).val.data(), q.rows(), d);
            detail::CMapM<S> mk(node(n.in[1]).val.data(), q.rows(), d);
            if (needs(0)) {
                detail::MapM<S> gq(grad_buf(n.in[0]).data(), q.rows(), d);
#pragma omp parallel for schedule(static)
                for (int i = 0; i < gcount; ++i)
                    gq.middleRows(i * t, t).noalias() += mg.middleRows(i * t, t) * mk.middleRows(i * t, t);
            }
            if (needs(1)) {
                detail::MapM<S> gk(grad_buf(n.in[1]).data(), q.rows(), d);
#pragma omp parallel for schedule(static)
                for (int i = 0; i < gcount; ++i)
                    gk.middleRows(i * t, t).noalias() +=
                        mg.middleRows(i * t, t).transpose() * mq.middleRows(i * t, t);
            }
            break;
        }
        case Op::AttnApply: {
            const auto& p = node(n.in[0]);
            const auto& v = node(n.in[1]);
            const int t = n.a, gcount = p.rows() / t, d = v.cols();
            detail::CMapM<S> mg(g.data(), p.rows(), d);
            detail::CMapM<S> mp(p.val.data(), p.rows(), t);
            detail::CMapM<S> mv(v.val.data(), v.rows(), d);
            if (needs(0)) {
                detail::MapM<S> gp(grad_buf(n.in[0]).data(), p.rows(), t);
#pragma omp parallel for schedule(static)
                for (int i = 0; i < gcount; ++i)
                    gp.middleRows(i * t, t).noalias() +=
                        mg.middleRows(i * t, t) * mv.middleRows(i * t, t).transpose();
            }
            if (needs(1)) {
                detail::MapM<S> gv(grad_buf(n.in[1]).data(), v.rows(), d);
#pragma omp parallel for schedule(static)
                for (int i = 0; i < gcount; ++i)
                    gv.middleRows(i * t, t).noalias() +=
                        mp.middleRows(i * t, t).transpose() * mg.middleRows(i * t, t);
            }
            break;
        }
        case Op::SpdLogDet:
            if (needs(0)) {
                const int p = node(n.in[0]).rows();
                std::vector<S> inv(static_cast<std::size_t>(p) * p);
                detail::spd_inverse_from_cholesky(n.aux.data(), p, inv.data());
                S f = g[0];
                if (g_fault_cholesky_backward) f *= static_cast<S>(1.01);
                auto& gb = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < inv.size(); ++i) gb[i] += f * inv[i];
            }
            break;
        case Op::Log:
            if (needs(0)) {
                const auto& x = in_val(0);
                auto& gb = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] / x[i];
            }
            break;
        case Op::Exp:
            if (needs(0)) {
                auto& gb = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * n.val[i];
            }
            break;
    }
}

}  // namespace msd::ad
