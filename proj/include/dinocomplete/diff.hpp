#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dinocomplete::diff {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of 64-bit reals.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<double> d);

    std::size_t size() const { return data.size(); }
    int dim(int axis) const { return shape.at(static_cast<std::size_t>(axis)); }
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";

    std::span<double> grad_buffer();
};

/// Handle to a node of the computation graph.
class Var {
public:
    Var() = default;
    explicit Var(NodePtr node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    std::size_t size() const { return node_->value.size(); }
    std::span<const double> data() const { return node_->value.data; }
    /// Accumulated gradient; zeros when nothing has been accumulated yet.
    std::vector<double> grad() const;
    bool requires_grad() const { return node_->requires_grad; }
    void zero_grad() { node_->grad.clear(); }
    const NodePtr& node() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    NodePtr node_;
};

/// Trainable leaf.
Var parameter(Tensor t);
/// Leaf without gradient.
Var constant(Tensor t);

/// Disables graph recording in its scope (inference).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Reverse-mode sweep from a scalar. Leaves accumulate (+=) d loss / d leaf.
void backward(const Var& loss);

// --- elementwise ---------------------------------------------------------------

enum class Unary { Sigmoid, Softplus, Exp, Abs, Relu, Tanh, Neg };

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var unary(Unary op, const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var exp(const Var& x);
Var abs(const Var& x);
Var relu(const Var& x);
Var tanh(const Var& x);
Var neg(const Var& x);
Var scale(const Var& x, double s);
Var add_scalar(const Var& x, double s);
/// x[C, ...] * m[1, ...] with m broadcast over the leading axis.
Var mul_channels(const Var& x, const Var& m);

// --- structure -----------------------------------------------------------------

Var reshape(const Var& x, Shape shape);
/// Concatenation along axis 0.
Var concat(const Var& a, const Var& b);
/// out.flat[i] = x.flat[index[i]]; backward scatter-adds. Index is shared, not copied.
Var gather(const Var& x, std::shared_ptr<const std::vector<std::uint32_t>> index, Shape out_shape);
Var sum(const Var& x);
Var mean(const Var& x);

// --- dense ---------------------------------------------------------------------

/// x[R, in] W^T + b with W[out, in], b[out] (b may be empty).
Var linear(const Var& x, const Var& weight, const Var& bias = {});

/// Cross-correlation. x[C_in, D, H, W], kernel[C_out, C_in, k, k, k], bias[C_out] (optional).
Var conv3(const Var& x, const Var& kernel, const Var& bias, int stride, int pad);
/// Transposed convolution (adjoint of conv3 in its input). kernel[C_in, C_out, k, k, k];
/// output edge = (in - 1) * stride - 2 pad + k.
Var conv3_transpose(const Var& x, const Var& kernel, const Var& bias, int stride, int pad);

/// Normalizes every row of x[R, C] over C (eps 1e-5) then applies gain[C], bias[C].
Var layer_norm(const Var& x, const Var& gain, const Var& bias);

/// Selective scan over x[L, C] with delta[L, C] (positive), a[C, N], b[L, N],
/// c[L, N], skip[C]. Backward runs the reverse-time adjoint recurrence.
Var selective_scan(const Var& x, const Var& delta, const Var& a, const Var& b, const Var& c,
                   const Var& skip);

// --- losses --------------------------------------------------------------------

/// Smooth-l1 with transition beta: 0.5 e^2 / beta if |e| < beta else |e| - 0.5 beta.
double smooth_l1(double e, double beta);

/// mean_v weight[v] * smooth_l1(pred[v] - target[v]); weights and target are constants.
Var weighted_smooth_l1(const Var& pred, std::span<const double> target,
                       std::span<const double> weight, double beta);

struct DistillTerms {
    Var total;
    double cos = 0.0;
    double mse = 0.0;
    double mask = 0.0;
    std::size_t support = 0;  // voxels with mhat = 1
};

/// z[C, V] against target[C, V]; m[1, V] (probabilities) against mhat[V].
/// Cosine and MSE are averaged over voxels where mhat = 1 (zero if none);
/// BCE over all voxels with m clamped to [1e-7, 1 - 1e-7].
DistillTerms distill_loss(const Var& z, std::span<const double> target, const Var& m,
                          std::span<const double> mhat, double lambda_cos, double lambda_mse,
                          double lambda_mask);

inline constexpr double kBceClamp = 1e-7;

// --- gradient checking ---------------------------------------------------------

/// max_i |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12) with central differences of step h.
double grad_check(const std::function<double(std::span<const double>)>& f,
                  std::span<const double> theta, std::span<const double> analytic, double h = 1e-5);

/// Builds the graph with `build` on parameter leaves initialized from `inputs`,
/// back-propagates, and compares every leaf gradient to finite differences.
double grad_check_graph(const std::function<Var(const std::vector<Var>&)>& build,
                        const std::vector<Tensor>& inputs, double h = 1e-5);

// --- optimizer -----------------------------------------------------------------

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long step = 0;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update of `params` in place using their accumulated grads.
void adam_step(std::vector<Var>& params, AdamState& state, const AdamConfig& cfg);
/// Same update on raw buffers.
void adam_update(std::span<double> param, std::span<const double> grad, std::vector<double>& m,
                 std::vector<double>& v, long step, const AdamConfig& cfg);

}  // namespace dinocomplete::diff
