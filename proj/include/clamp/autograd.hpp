#pragma once

// Minimal reverse-mode automatic differentiation over float64 tensors.
//
// A Var is a handle to a graph node. Operations record their inputs and a
// backward closure only when gradient recording is enabled and at least one
// input requires a gradient; otherwise they produce plain constant nodes.
// Map-shaped arrays use NCHW layout; token matrices are [rows, width].

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "clamp/tensor.hpp"

namespace clamp::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    /// Lazily allocates a zero gradient of the value's shape.
    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var parameter(Tensor value) { return Var(std::move(value), true); }
    static Var scalar(double v, bool requires_grad = false) {
        return Var(Tensor({1}, v), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& value_mut() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    int dim(int axis) const { return node_->value.dim(axis); }
    std::size_t numel() const { return node_->value.numel(); }
    double item() const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on);
    bool has_grad() const { return node_ && !node_->grad.data.empty(); }
    /// Gradient accumulated so far (zeros if none).
    Tensor grad() const;
    void zero_grad();

    /// Back-propagates from this scalar node with seed 1.
    void backward() const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Disables graph recording for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// -- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
/// x * s where s has exactly one element.
Var mul_scalar(const Var& x, const Var& s);
Var add_const(const Var& x, const Tensor& c);
Var relu(const Var& x);
/// x * sigmoid(1.702 x)
Var quick_gelu(const Var& x);

// -- matrices [rows, cols] ---------------------------------------------------
Var matmul(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
/// a [m, k] * b [n, k]^T with every entry summed over k in index order, so
/// an entry depends only on its two rows and reordering rows reorders the
/// result exactly.
Var pairwise_dot(const Var& a, const Var& b);
/// x [m, in] * w[out, in]^T + bias[out]; bias may be undefined.
Var linear(const Var& x, const Var& w, const Var& bias);
/// Adds a [cols] vector to every row.
Var add_row(const Var& x, const Var& row);
Var transpose(const Var& x);
Var softmax_rows(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Rows with norm below eps map to zero rows (and pass no gradient).
Var l2_normalize_rows(const Var& x, double eps = 1e-12);
Var slice_rows(const Var& x, int start, int count);
Var slice_cols(const Var& x, int start, int count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(const Var& table, std::span<const int> rows);
/// Column-wise mean, shape [1, cols].
Var mean_rows(const Var& x);
Var reshape(const Var& x, Shape shape);
Var sum(const Var& x);
Var mean(const Var& x);

// -- feature maps [B, C, H, W] ---------------------------------------------
Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad);
/// w has layout [Cin, Cout, k, k]; output size (H - 1) * stride - 2 * pad + k.
Var conv_transpose2d(const Var& x, const Var& w, const Var& bias, int stride, int pad);
/// Training mode normalises with batch statistics and updates the running
/// buffers in place (unbiased variance, PyTorch convention).
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double momentum = 0.1, double eps = 1e-5);
/// Non-overlapping average pooling with kernel == stride.
Var avg_pool2d(const Var& x, int kernel);
/// Bilinear resize with pixel-centre alignment (align_corners = false).
Var upsample_bilinear(const Var& x, int out_h, int out_w);
Var concat_channels(const Var& a, const Var& b);
Var slice_channels(const Var& x, int start, int count);
Var concat_batch(std::span<const Var> items);
Var slice_batch(const Var& x, int index);
/// Item `index` of a [B, C, H, W] map as a [H * W, C] token matrix.
Var map_to_tokens(const Var& x, int index);
/// Stacks per-item [H * W, C] token matrices into a [B, C, H, W] map.
Var tokens_to_map(std::span<const Var> items, int height, int width);

// -- sampling and losses -----------------------------------------------------
struct GridPoint {
    double u = 0.0;  // column coordinate on the feature grid
    double v = 0.0;  // row coordinate on the feature grid
};

/// Bilinear sampling of a [H * W, C] token grid at continuous grid
/// coordinates, clamped to the border. Rows with keep[n] == false are zero.
Var bilinear_gather(const Var& tokens, int height, int width, std::span<const GridPoint> points,
                    std::span<const bool> keep);

/// Mean squared error over the planes (last two axes) whose mask entry is
/// nonzero; 0 when nothing is kept. mask has numel / plane_size entries.
Var masked_mse(const Var& pred, const Tensor& target, std::span<const double> plane_mask);

/// 0.5 * (CE(M, I) + CE(M^T, I)) restricted to the rows/columns with
/// keep[n] == true, each term averaged over the kept rows.
Var symmetric_diagonal_ce(const Var& m, std::span<const bool> keep);

}  // namespace clamp::ag
