#include "dinocomplete/diff.hpp"

#include "dinocomplete/ssm.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace dinocomplete::diff {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat cmat(const double* p, Eigen::Index rows, Eigen::Index cols) { return {p, rows, cols}; }
MapMat mmat(double* p, Eigen::Index rows, Eigen::Index cols) { return {p, rows, cols}; }

Var make_node(Tensor value, std::vector<Var> parents, const char* op,
              std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) needs = needs || (p && p.requires_grad());
    }
    if (needs) {
        node->requires_grad = true;
        for (auto& p : parents) node->parents.push_back(p.node());
        node->backward_fn = std::move(backward_fn);
    }
    return Var(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

bool wants(const NodePtr& p) { return p && p->requires_grad; }

}  // namespace

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw ShapeError("negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) {
        throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match " +
                         shape_str(shape));
    }
}

std::span<double> Node::grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
}

std::vector<double> Var::grad() const {
    if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
    return node_->grad;
}

Var parameter(Tensor t) {
    auto node = std::make_shared<Node>();
    node->value = std::move(t);
    node->requires_grad = true;
    node->op = "parameter";
    return Var(std::move(node));
}

Var constant(Tensor t) {
    auto node = std::make_shared<Node>();
    node->value = std::move(t);
    node->op = "constant";
    return Var(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Var& loss) {
    if (loss.size() != 1) {
        throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    // Iterative post-order DFS gives a topological order (parents before children).
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// --- elementwise ---------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data()[i];
    return make_node(std::move(out), {a, b}, "add", [](Node& self) {
        for (auto& p : self.parents) {
            if (!wants(p)) continue;
            auto g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.data()[i];
    return make_node(std::move(out), {a, b}, "sub", [](Node& self) {
        const double sign[2] = {1.0, -1.0};
        for (std::size_t k = 0; k < 2; ++k) {
            if (!wants(self.parents[k])) continue;
            auto g = self.parents[k]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.data()[i];
    return make_node(std::move(out), {a, b}, "mul", [](Node& self) {
        const auto& av = self.parents[0]->value.data;
        const auto& bv = self.parents[1]->value.data;
        if (wants(self.parents[0])) {
            auto g = self.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (wants(self.parents[1])) {
            auto g = self.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

namespace {

double unary_value(Unary op, double x) {
    switch (op) {
        case Unary::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
        case Unary::Softplus: return x > 20.0 ? x : std::log1p(std::exp(x));
        case Unary::Exp: return std::exp(x);
        case Unary::Abs: return std::abs(x);
        case Unary::Relu: return x > 0.0 ? x : 0.0;
        case Unary::Tanh: return std::tanh(x);
        case Unary::Neg: return -x;
    }
    return 0.0;
}

// Derivative from input x and output y.
double unary_deriv(Unary op, double x, double y) {
    switch (op) {
        case Unary::Sigmoid: return y * (1.0 - y);
        case Unary::Softplus: return 1.0 / (1.0 + std::exp(-x));
        case Unary::Exp: return y;
        case Unary::Abs: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
        case Unary::Relu: return x > 0.0 ? 1.0 : 0.0;
        case Unary::Tanh: return 1.0 - y * y;
        case Unary::Neg: return -1.0;
    }
    return 0.0;
}

const char* unary_name(Unary op) {
    switch (op) {
        case Unary::Sigmoid: return "sigmoid";
        case Unary::Softplus: return "softplus";
        case Unary::Exp: return "exp";
        case Unary::Abs: return "abs";
        case Unary::Relu: return "relu";
        case Unary::Tanh: return "tanh";
        case Unary::Neg: return "neg";
    }
    return "unary";
}

}  // namespace

Var unary(Unary op, const Var& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = unary_value(op, x.data()[i]);
    return make_node(std::move(out), {x}, unary_name(op), [op](Node& self) {
        const auto& xv = self.parents[0]->value.data;
        auto g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += self.grad[i] * unary_deriv(op, xv[i], self.value.data[i]);
        }
    });
}

Var sigmoid(const Var& x) { return unary(Unary::Sigmoid, x); }
Var softplus(const Var& x) { return unary(Unary::Softplus, x); }
Var exp(const Var& x) { return unary(Unary::Exp, x); }
Var abs(const Var& x) { return unary(Unary::Abs, x); }
Var relu(const Var& x) { return unary(Unary::Relu, x); }
Var tanh(const Var& x) { return unary(Unary::Tanh, x); }
Var neg(const Var& x) { return unary(Unary::Neg, x); }

Var scale(const Var& x, double s) {
    Tensor out = x.value();
    for (auto& v : out.data) v *= s;
    return make_node(std::move(out), {x}, "scale", [s](Node& self) {
        auto g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

Var add_scalar(const Var& x, double s) {
    Tensor out = x.value();
    for (auto& v : out.data) v += s;
    return make_node(std::move(out), {x}, "add_scalar", [](Node& self) {
        auto g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Var mul_channels(const Var& x, const Var& m) {
    if (x.shape().empty() || m.shape().empty() || m.shape()[0] != 1 ||
        x.size() % m.size() != 0 ||
        !std::equal(x.shape().begin() + 1, x.shape().end(), m.shape().begin() + 1,
                    m.shape().end())) {
        throw ShapeError("mul_channels: mask " + shape_str(m.shape()) +
                         " does not broadcast over " + shape_str(x.shape()));
    }
    const std::size_t inner = m.size();
    const std::size_t channels = x.size() / inner;
    Tensor out = x.value();
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < inner; ++i) out.data[c * inner + i] *= m.data()[i];
    return make_node(std::move(out), {x, m}, "mul_channels", [inner, channels](Node& self) {
        const auto& xv = self.parents[0]->value.data;
        const auto& mv = self.parents[1]->value.data;
        if (wants(self.parents[0])) {
            auto g = self.parents[0]->grad_buffer();
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t i = 0; i < inner; ++i) g[c * inner + i] += self.grad[c * inner + i] * mv[i];
        }
        if (wants(self.parents[1])) {
            auto g = self.parents[1]->grad_buffer();
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t i = 0; i < inner; ++i) g[i] += self.grad[c * inner + i] * xv[c * inner + i];
        }
    });
}

// --- structure -----------------------------------------------------------------

Var reshape(const Var& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor out(std::move(shape), x.value().data);
    return make_node(std::move(out), {x}, "reshape", [](Node& self) {
        auto g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Var concat(const Var& a, const Var& b) {
    if (a.shape().size() != b.shape().size() || a.shape().empty() ||
        !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
        throw ShapeError("concat: axis-0 concatenation of " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    Shape s = a.shape();
    s[0] += b.shape()[0];
    Tensor out(s);
    std::copy(a.data().begin(), a.data().end(), out.data.begin());
    std::copy(b.data().begin(), b.data().end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.size()));
    const std::size_t na = a.size();
    return make_node(std::move(out), {a, b}, "concat", [na](Node& self) {
        if (wants(self.parents[0])) {
            auto g = self.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants(self.parents[1])) {
            auto g = self.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
        }
    });
}

Var gather(const Var& x, std::shared_ptr<const std::vector<std::uint32_t>> index, Shape out_shape) {
    if (numel(out_shape) != index->size()) {
        throw ShapeError("gather: index length does not match " + shape_str(out_shape));
    }
    Tensor out(std::move(out_shape));
    const auto& xv = x.data();
    for (std::size_t i = 0; i < index->size(); ++i) {
        const auto src = (*index)[i];
        if (src >= xv.size()) throw ShapeError("gather: index out of range");
        out.data[i] = xv[src];
    }
    return make_node(std::move(out), {x}, "gather", [index](Node& self) {
        auto g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < index->size(); ++i) g[(*index)[i]] += self.grad[i];
    });
}

Var sum(const Var& x) {
    Tensor out(Shape{1});
    out.data[0] = std::accumulate(x.data().begin(), x.data().end(), 0.0);
    return make_node(std::move(out), {x}, "sum", [](Node& self) {
        auto g = self.parents[0]->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

Var mean(const Var& x) {
    if (x.size() == 0) throw ShapeError("mean of an empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

// --- dense ---------------------------------------------------------------------

Var linear(const Var& x, const Var& weight, const Var& bias) {
    if (x.shape().size() != 2 || weight.shape().size() != 2 || x.shape()[1] != weight.shape()[1]) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()) + " (axis 1 must match)");
    }
    const int rows = x.shape()[0];
    const int in = x.shape()[1];
    const int out_dim = weight.shape()[0];
    if (bias && bias.shape() != Shape{out_dim}) {
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " needs [" +
                         std::to_string(out_dim) + "]");
    }
    Tensor out(Shape{rows, out_dim});
    auto y = mmat(out.data.data(), rows, out_dim);
    y.noalias() = cmat(x.data().data(), rows, in) * cmat(weight.data().data(), out_dim, in).transpose();
    if (bias) {
        for (int r = 0; r < rows; ++r)
            for (int o = 0; o < out_dim; ++o) y(r, o) += bias.data()[o];
    }
    std::vector<Var> parents{x, weight};
    if (bias) parents.push_back(bias);
    return make_node(std::move(out), parents, "linear", [rows, in, out_dim](Node& self) {
        const auto dy = cmat(self.grad.data(), rows, out_dim);
        const auto& xp = self.parents[0];
        const auto& wp = self.parents[1];
        if (wants(xp)) {
            auto gx = mmat(xp->grad_buffer().data(), rows, in);
            gx.noalias() += dy * cmat(wp->value.data.data(), out_dim, in);
        }
        if (wants(wp)) {
            auto gw = mmat(wp->grad_buffer().data(), out_dim, in);
            gw.noalias() += dy.transpose() * cmat(xp->value.data.data(), rows, in);
        }
        if (self.parents.size() > 2 && wants(self.parents[2])) {
            auto gb = self.parents[2]->grad_buffer();
            for (int r = 0; r < rows; ++r)
                for (int o = 0; o < out_dim; ++o) gb[o] += dy(r, o);
        }
    });
}

namespace {

// Geometry shared by conv3 and conv3_transpose. The "small" side is the conv
// output / transposed-conv input, the "big" side the conv input / transposed-conv
// output; big position = small position * stride + k - pad. Kernels are laid out
// [small_channels, big_channels, k, k, k].
struct ConvGeom {
    int cs, cb;          // channels on the small and big side
    int ds, hs, ws;      // small spatial dims
    int db, hb, wb;      // big spatial dims
    int k, stride, pad;

    std::size_t small_vox() const { return static_cast<std::size_t>(ds) * hs * ws; }
    std::size_t big_vox() const { return static_cast<std::size_t>(db) * hb * wb; }
    std::size_t col_rows() const { return static_cast<std::size_t>(cb) * k * k * k; }
};

// Visits every (column row, small row, big row, x range) of the im2col matrix.
template <class F>
void for_each_col_row(const ConvGeom& g, F&& fn) {
    for (int b = 0; b < g.cb; ++b)
        for (int kz = 0; kz < g.k; ++kz)
            for (int ky = 0; ky < g.k; ++ky)
                for (int kx = 0; kx < g.k; ++kx) {
                    const std::size_t r = ((static_cast<std::size_t>(b) * g.k + kz) * g.k + ky) * g.k + kx;
                    const int off_x = kx - g.pad;
                    int lo = 0;
                    while (lo < g.ws && lo * g.stride + off_x < 0) ++lo;
                    int hi = g.ws;
                    while (hi > lo && (hi - 1) * g.stride + off_x >= g.wb) --hi;
                    for (int zs = 0; zs < g.ds; ++zs) {
                        const int zb = zs * g.stride + kz - g.pad;
                        if (zb < 0 || zb >= g.db) continue;
                        for (int ys = 0; ys < g.hs; ++ys) {
                            const int yb = ys * g.stride + ky - g.pad;
                            if (yb < 0 || yb >= g.hb) continue;
                            const std::size_t col = (static_cast<std::size_t>(zs) * g.hs + ys) * g.ws;
                            const std::size_t big =
                                ((static_cast<std::size_t>(b) * g.db + zb) * g.hb + yb) * g.wb;
                            fn(r, col, big, off_x, lo, hi);
                        }
                    }
                }
}

// cols[r, small_voxel] = big[...] (zero outside).
void im2col(const ConvGeom& g, const double* big, std::vector<double>& cols) {
    const std::size_t nv = g.small_vox();
    cols.assign(g.col_rows() * nv, 0.0);
    const int s = g.stride;
    for_each_col_row(g, [&](std::size_t r, std::size_t col, std::size_t brow, int off_x, int lo, int hi) {
        double* dst = cols.data() + r * nv + col;
        const double* src = big + brow;
        for (int x = lo; x < hi; ++x) dst[x] = src[x * s + off_x];
    });
}

// big[...] += cols[r, small_voxel].
void col2im(const ConvGeom& g, const std::vector<double>& cols, double* big) {
    const std::size_t nv = g.small_vox();
    const int s = g.stride;
    for_each_col_row(g, [&](std::size_t r, std::size_t col, std::size_t brow, int off_x, int lo, int hi) {
        const double* src = cols.data() + r * nv + col;
        double* dst = big + brow;
        for (int x = lo; x < hi; ++x) dst[x * s + off_x] += src[x];
    });
}

bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

// small[a, :] (+)= K[a, :] * cols
void conv_gather(const ConvGeom& g, const double* kernel, const double* big, double* small) {
    const auto nv = static_cast<Eigen::Index>(g.small_vox());
    auto out = mmat(small, g.cs, nv);
    const auto kmat = cmat(kernel, g.cs, static_cast<Eigen::Index>(g.col_rows()));
    if (is_pointwise(g)) {
        out.noalias() += kmat * cmat(big, g.cb, nv);
        return;
    }
    std::vector<double> cols;
    im2col(g, big, cols);
    out.noalias() += kmat * cmat(cols.data(), static_cast<Eigen::Index>(g.col_rows()), nv);
}

// big += col2im(K^T * small)
void conv_scatter(const ConvGeom& g, const double* kernel, const double* small, double* big) {
    const auto nv = static_cast<Eigen::Index>(g.small_vox());
    const auto kmat = cmat(kernel, g.cs, static_cast<Eigen::Index>(g.col_rows()));
    if (is_pointwise(g)) {
        mmat(big, g.cb, nv).noalias() += kmat.transpose() * cmat(small, g.cs, nv);
        return;
    }
    std::vector<double> cols(g.col_rows() * g.small_vox());
    mmat(cols.data(), static_cast<Eigen::Index>(g.col_rows()), nv).noalias() =
        kmat.transpose() * cmat(small, g.cs, nv);
    col2im(g, cols, big);
}

// dK += small * cols^T
void conv_weight_grad(const ConvGeom& g, const double* small, const double* big, double* dkernel) {
    const auto nv = static_cast<Eigen::Index>(g.small_vox());
    auto dk = mmat(dkernel, g.cs, static_cast<Eigen::Index>(g.col_rows()));
    if (is_pointwise(g)) {
        dk.noalias() += cmat(small, g.cs, nv) * cmat(big, g.cb, nv).transpose();
        return;
    }
    std::vector<double> cols;
    im2col(g, big, cols);
    dk.noalias() += cmat(small, g.cs, nv) *
                    cmat(cols.data(), static_cast<Eigen::Index>(g.col_rows()), nv).transpose();
}

void check_conv_args(const Var& x, const Var& kernel, const Var& bias, int channels_out,
                     int channels_in, const char* op) {
    if (x.shape().size() != 4) {
        throw ShapeError(std::string(op) + ": input must be [C, D, H, W], got " + shape_str(x.shape()));
    }
    const auto& ks = kernel.shape();
    if (ks.size() != 5 || ks[2] != ks[3] || ks[3] != ks[4]) {
        throw ShapeError(std::string(op) + ": kernel must be 5-d with a cubic window, got " +
                         shape_str(ks));
    }
    if (bias && bias.shape() != Shape{channels_out}) {
        throw ShapeError(std::string(op) + ": bias " + shape_str(bias.shape()) + " needs [" +
                         std::to_string(channels_out) + "]");
    }
    (void)channels_in;
}

void add_channel_bias(double* data, int channels, std::size_t nv, std::span<const double> bias) {
    for (int c = 0; c < channels; ++c)
        for (std::size_t i = 0; i < nv; ++i) data[c * nv + i] += bias[c];
}

void bias_grad(const double* grad, int channels, std::size_t nv, std::span<double> gb) {
    for (int c = 0; c < channels; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < nv; ++i) acc += grad[c * nv + i];
        gb[c] += acc;
    }
}

}  // namespace

Var conv3(const Var& x, const Var& kernel, const Var& bias, int stride, int pad) {
    const auto& ks = kernel.shape();
    check_conv_args(x, kernel, bias, ks.empty() ? 0 : ks[0], 0, "conv3");
    if (ks[1] != x.shape()[0]) {
        throw ShapeError("conv3: kernel expects " + std::to_string(ks[1]) +
                         " input channels (axis 1), input has " + std::to_string(x.shape()[0]));
    }
    const int k = ks[2];
    auto out_dim = [&](int n) { return (n + 2 * pad - k) / stride + 1; };
    ConvGeom g{ks[0], ks[1], out_dim(x.shape()[1]), out_dim(x.shape()[2]), out_dim(x.shape()[3]),
               x.shape()[1], x.shape()[2], x.shape()[3], k, stride, pad};
    if (g.ds <= 0 || g.hs <= 0 || g.ws <= 0) throw ShapeError("conv3: output would be empty");
    Tensor out(Shape{g.cs, g.ds, g.hs, g.ws});
    conv_gather(g, kernel.data().data(), x.data().data(), out.data.data());
    if (bias) add_channel_bias(out.data.data(), g.cs, g.small_vox(), bias.data());
    std::vector<Var> parents{x, kernel};
    if (bias) parents.push_back(bias);
    return make_node(std::move(out), parents, "conv3", [g](Node& self) {
        const auto& xp = self.parents[0];
        const auto& kp = self.parents[1];
        if (wants(xp)) conv_scatter(g, kp->value.data.data(), self.grad.data(), xp->grad_buffer().data());
        if (wants(kp)) conv_weight_grad(g, self.grad.data(), xp->value.data.data(), kp->grad_buffer().data());
        if (self.parents.size() > 2 && wants(self.parents[2])) {
            bias_grad(self.grad.data(), g.cs, g.small_vox(), self.parents[2]->grad_buffer());
        }
    });
}

Var conv3_transpose(const Var& x, const Var& kernel, const Var& bias, int stride, int pad) {
    const auto& ks = kernel.shape();
    check_conv_args(x, kernel, bias, ks.empty() ? 0 : ks[1], 0, "conv3_transpose");
    if (ks[0] != x.shape()[0]) {
        throw ShapeError("conv3_transpose: kernel expects " + std::to_string(ks[0]) +
                         " input channels (axis 0), input has " + std::to_string(x.shape()[0]));
    }
    const int k = ks[2];
    auto out_dim = [&](int n) { return (n - 1) * stride - 2 * pad + k; };
    ConvGeom g{ks[0], ks[1], x.shape()[1], x.shape()[2], x.shape()[3],
               out_dim(x.shape()[1]), out_dim(x.shape()[2]), out_dim(x.shape()[3]), k, stride, pad};
    if (g.db <= 0 || g.hb <= 0 || g.wb <= 0) throw ShapeError("conv3_transpose: output would be empty");
    Tensor out(Shape{g.cb, g.db, g.hb, g.wb});
    conv_scatter(g, kernel.data().data(), x.data().data(), out.data.data());
    if (bias) add_channel_bias(out.data.data(), g.cb, g.big_vox(), bias.data());
    std::vector<Var> parents{x, kernel};
    if (bias) parents.push_back(bias);
    return make_node(std::move(out), parents, "conv3_transpose", [g](Node& self) {
        const auto& xp = self.parents[0];
        const auto& kp = self.parents[1];
        if (wants(xp)) conv_gather(g, kp->value.data.data(), self.grad.data(), xp->grad_buffer().data());
        if (wants(kp)) conv_weight_grad(g, xp->value.data.data(), self.grad.data(), kp->grad_buffer().data());
        if (self.parents.size() > 2 && wants(self.parents[2])) {
            bias_grad(self.grad.data(), g.cb, g.big_vox(), self.parents[2]->grad_buffer());
        }
    });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias) {
    if (x.shape().size() != 2 || x.shape()[1] < 2) {
        throw ShapeError("layer_norm: input must be [R, C] with C >= 2, got " + shape_str(x.shape()));
    }
    const int rows = x.shape()[0];
    const int ch = x.shape()[1];
    if (gain.shape() != Shape{ch} || bias.shape() != Shape{ch}) {
        throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(ch) + "]");
    }
    Tensor out(x.shape());
    layer_norm_rows(static_cast<std::size_t>(rows), ch, x.data(), gain.data(), bias.data(), out.data);
    return make_node(std::move(out), {x, gain, bias}, "layer_norm", [rows, ch](Node& self) {
        const auto& xv = self.parents[0]->value.data;
        const auto& gv = self.parents[1]->value.data;
        std::span<double> gx, gg, gb;
        if (wants(self.parents[0])) gx = self.parents[0]->grad_buffer();
        if (wants(self.parents[1])) gg = self.parents[1]->grad_buffer();
        if (wants(self.parents[2])) gb = self.parents[2]->grad_buffer();
        std::vector<double> xhat(ch), dxhat(ch);
        for (int r = 0; r < rows; ++r) {
            const double* xr = xv.data() + static_cast<std::size_t>(r) * ch;
            const double* dy = self.grad.data() + static_cast<std::size_t>(r) * ch;
            double mu = 0.0;
            for (int c = 0; c < ch; ++c) mu += xr[c];
            mu /= ch;
            double var = 0.0;
            for (int c = 0; c < ch; ++c) var += (xr[c] - mu) * (xr[c] - mu);
            var /= ch;
            const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
            double m1 = 0.0, m2 = 0.0;
            for (int c = 0; c < ch; ++c) {
                xhat[c] = (xr[c] - mu) * rstd;
                dxhat[c] = dy[c] * gv[c];
                m1 += dxhat[c];
                m2 += dxhat[c] * xhat[c];
                if (!gg.empty()) gg[c] += dy[c] * xhat[c];
                if (!gb.empty()) gb[c] += dy[c];
            }
            m1 /= ch;
            m2 /= ch;
            if (!gx.empty()) {
                for (int c = 0; c < ch; ++c) {
                    gx[static_cast<std::size_t>(r) * ch + c] += rstd * (dxhat[c] - m1 - xhat[c] * m2);
                }
            }
        }
    });
}

Var selective_scan(const Var& x, const Var& delta, const Var& a, const Var& b, const Var& c,
                   const Var& skip) {
    if (x.shape().size() != 2 || a.shape().size() != 2) {
        throw ShapeError("selective_scan: x must be [L, C] and a [C, N]");
    }
    const auto length = static_cast<std::size_t>(x.shape()[0]);
    const int ch = x.shape()[1];
    const int ns = a.shape()[1];
    const Shape seq_state{static_cast<int>(length), ns};
    if (delta.shape() != x.shape()) throw ShapeError("selective_scan: delta must match x " + shape_str(x.shape()));
    if (a.shape()[0] != ch) throw ShapeError("selective_scan: a axis 0 must equal channels");
    if (b.shape() != seq_state || c.shape() != seq_state) {
        throw ShapeError("selective_scan: b and c must be " + shape_str(seq_state));
    }
    if (skip.shape() != Shape{ch}) throw ShapeError("selective_scan: skip must be [C]");

    const ScanDims dims{length, ch, ns};
    Tensor out(x.shape());
    const bool record = grad_enabled() && (x.requires_grad() || delta.requires_grad() ||
                                           a.requires_grad() || b.requires_grad() ||
                                           c.requires_grad() || skip.requires_grad());
    auto states = std::make_shared<std::vector<double>>();
    selective_scan_forward(dims, x.data(), delta.data(), a.data(), b.data(), c.data(), skip.data(),
                           out.data, record ? states.get() : nullptr);
    return make_node(std::move(out), {x, delta, a, b, c, skip}, "selective_scan",
                     [dims, states](Node& self) {
        // Scratch buffers for inputs that do not need gradients.
        std::vector<std::vector<double>> scratch;
        auto target = [&](std::size_t i) -> std::span<double> {
            if (wants(self.parents[i])) return self.parents[i]->grad_buffer();
            scratch.emplace_back(self.parents[i]->value.size(), 0.0);
            return scratch.back();
        };
        scratch.reserve(6);
        const ScanGrads grads{target(0), target(1), target(2), target(3), target(4), target(5)};
        selective_scan_backward(dims, self.parents[0]->value.data, self.parents[1]->value.data,
                                self.parents[2]->value.data, self.parents[3]->value.data,
                                self.parents[4]->value.data, self.parents[5]->value.data, *states,
                                self.grad, grads);
    });
}

// --- losses --------------------------------------------------------------------

double smooth_l1(double e, double beta) {
    const double ae = std::abs(e);
    return ae < beta ? 0.5 * e * e / beta : ae - 0.5 * beta;
}

Var weighted_smooth_l1(const Var& pred, std::span<const double> target,
                       std::span<const double> weight, double beta) {
    if (target.size() != pred.size() || weight.size() != pred.size()) {
        throw ShapeError("weighted_smooth_l1: target/weights do not match prediction " +
                         shape_str(pred.shape()));
    }
    const double n = static_cast<double>(pred.size());
    double total = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        total += weight[i] * smooth_l1(pred.data()[i] - target[i], beta);
    }
    Tensor out(Shape{1});
    out.data[0] = total / n;
    std::vector<double> t(target.begin(), target.end());
    std::vector<double> w(weight.begin(), weight.end());
    return make_node(std::move(out), {pred}, "weighted_smooth_l1",
                     [t = std::move(t), w = std::move(w), beta, n](Node& self) {
        const auto& pv = self.parents[0]->value.data;
        auto g = self.parents[0]->grad_buffer();
        const double up = self.grad[0] / n;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double e = pv[i] - t[i];
            const double d = std::abs(e) < beta ? e / beta : (e > 0 ? 1.0 : (e < 0 ? -1.0 : 0.0));
            g[i] += up * w[i] * d;
        }
    });
}

DistillTerms distill_loss(const Var& z, std::span<const double> target, const Var& m,
                          std::span<const double> mhat, double lambda_cos, double lambda_mse,
                          double lambda_mask) {
    if (z.shape().size() < 2 || m.shape().empty() || m.shape()[0] != 1) {
        throw ShapeError("distill_loss: z must be [C, ...] and m [1, ...]");
    }
    const std::size_t nv = m.size();
    const std::size_t ch = z.size() / nv;
    if (ch * nv != z.size() || target.size() != z.size() || mhat.size() != nv) {
        throw ShapeError("distill_loss: shapes of z " + shape_str(z.shape()) + ", m " +
                         shape_str(m.shape()) + " and targets do not agree");
    }
    DistillTerms terms;
    std::size_t support = 0;
    double cos_sum = 0.0, mse_sum = 0.0, bce_sum = 0.0;
    const auto& zv = z.data();
    for (std::size_t v = 0; v < nv; ++v) {
        const double mv = std::clamp(m.data()[v], kBceClamp, 1.0 - kBceClamp);
        bce_sum += -(mhat[v] * std::log(mv) + (1.0 - mhat[v]) * std::log(1.0 - mv));
        if (mhat[v] != 1.0) continue;
        ++support;
        double dot = 0.0, nz = 0.0, nt = 0.0, se = 0.0;
        for (std::size_t c = 0; c < ch; ++c) {
            const double a = zv[c * nv + v], b = target[c * nv + v];
            dot += a * b;
            nz += a * a;
            nt += b * b;
            se += (a - b) * (a - b);
        }
        const double denom = std::sqrt(nz) * std::sqrt(nt);
        cos_sum += 1.0 - (denom > 1e-12 ? dot / denom : 0.0);
        mse_sum += se;
    }
    terms.support = support;
    const double s = support ? static_cast<double>(support) : 1.0;
    terms.cos = support ? cos_sum / s : 0.0;
    terms.mse = support ? mse_sum / s : 0.0;
    terms.mask = bce_sum / static_cast<double>(nv);
    Tensor out(Shape{1});
    out.data[0] = lambda_cos * terms.cos + lambda_mse * terms.mse + lambda_mask * terms.mask;

    std::vector<double> t(target.begin(), target.end());
    std::vector<double> mh(mhat.begin(), mhat.end());
    terms.total = make_node(std::move(out), {z, m}, "distill_loss",
                            [t = std::move(t), mh = std::move(mh), nv, ch, support, lambda_cos,
                             lambda_mse, lambda_mask](Node& self) {
        const double up = self.grad[0];
        const auto& zv = self.parents[0]->value.data;
        if (wants(self.parents[0]) && support > 0) {
            auto g = self.parents[0]->grad_buffer();
            const double s = static_cast<double>(support);
            for (std::size_t v = 0; v < nv; ++v) {
                if (mh[v] != 1.0) continue;
                double dot = 0.0, nz = 0.0, nt = 0.0;
                for (std::size_t c = 0; c < ch; ++c) {
                    dot += zv[c * nv + v] * t[c * nv + v];
                    nz += zv[c * nv + v] * zv[c * nv + v];
                    nt += t[c * nv + v] * t[c * nv + v];
                }
                const double rz = std::sqrt(nz), rt = std::sqrt(nt);
                const bool has_cos = rz * rt > 1e-12;
                for (std::size_t c = 0; c < ch; ++c) {
                    const double a = zv[c * nv + v], b = t[c * nv + v];
                    double d = lambda_mse * 2.0 * (a - b);
                    if (has_cos) d += -lambda_cos * (b / (rz * rt) - dot * a / (nz * rz * rt));
                    g[c * nv + v] += up * d / s;
                }
            }
        }
        if (wants(self.parents[1])) {
            const auto& mvals = self.parents[1]->value.data;
            auto g = self.parents[1]->grad_buffer();
            const double scale = up * lambda_mask / static_cast<double>(nv);
            for (std::size_t v = 0; v < nv; ++v) {
                const double mv = mvals[v];
                if (mv <= kBceClamp || mv >= 1.0 - kBceClamp) continue;
                g[v] += scale * (-mh[v] / mv + (1.0 - mh[v]) / (1.0 - mv));
            }
        }
    });
    return terms;
}

// --- gradient checking ---------------------------------------------------------

double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<const double> theta, std::span<const double> analytic, double h) {
    std::vector<double> p(theta.begin(), theta.end());
    double worst = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + h;
        const double fp = f(p);
        p[i] = orig - h;
        const double fm = f(p);
        p[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - fd) / (std::abs(analytic[i]) + std::abs(fd) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

double grad_check_graph(const std::function<Var(const std::vector<Var>&)>& build,
                        const std::vector<Tensor>& inputs, double h) {
    std::vector<Var> leaves;
    for (const auto& t : inputs) leaves.push_back(parameter(t));
    const Var loss = build(leaves);
    backward(loss);
    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto analytic = leaves[k].grad();
        auto f = [&](std::span<const double> theta) {
            NoGradGuard guard;
            std::vector<Var> probe;
            for (std::size_t j = 0; j < inputs.size(); ++j) {
                probe.push_back(j == k ? constant(Tensor(inputs[k].shape,
                                                         std::vector<double>(theta.begin(), theta.end())))
                                       : constant(inputs[j]));
            }
            return build(probe).data()[0];
        };
        worst = std::max(worst, grad_check(f, inputs[k].data, analytic, h));
    }
    return worst;
}

// --- optimizer -----------------------------------------------------------------

void adam_update(std::span<double> param, std::span<const double> grad, std::vector<double>& m,
                 std::vector<double>& v, long step, const AdamConfig& cfg) {
    if (grad.size() != param.size()) throw ShapeError("adam: gradient does not match parameter");
    if (m.size() != param.size()) m.assign(param.size(), 0.0);
    if (v.size() != param.size()) v.assign(param.size(), 0.0);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mh = m[i] / c1;
        const double vh = v[i] / c2;
        param[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
}

void adam_step(std::vector<Var>& params, AdamState& state, const AdamConfig& cfg) {
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), {});
        state.v.assign(params.size(), {});
    }
    ++state.step;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto g = params[i].grad();
        adam_update(params[i].mutable_value().data, g, state.m[i], state.v[i], state.step, cfg);
    }
}

}  // namespace dinocomplete::diff
