#include "clamp/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace clamp::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

void require(bool cond, const char* op, const std::string& what) {
    if (!cond) throw std::invalid_argument(std::string(op) + ": " + what);
}

void require_rank(const Var& x, int rank, const char* op) {
    require(x.defined(), op, "undefined input");
    require(x.value().rank() == rank, op,
            "expected rank " + std::to_string(rank) + ", got shape " + shape_str(x.shape()));
}

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    const bool need = g_grad_enabled &&
                      std::any_of(inputs.begin(), inputs.end(),
                                  [](const Var& v) { return v.defined() && v.requires_grad(); });
    if (need) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& v : inputs) node->inputs.push_back(v.node());
        node->backward = std::move(backward);
    }
    return Var(std::move(node));
}

/// Input i of the node if it wants a gradient, else nullptr.
Node* wants(Node& self, std::size_t i) {
    if (i >= self.inputs.size()) return nullptr;
    Node* n = self.inputs[i].get();
    return (n && n->requires_grad) ? n : nullptr;
}

/// C = op(A) * op(B) (+ C when accumulate).
void gemm(const double* a, int a_rows, int a_cols, bool ta, const double* b, int b_rows,
          int b_cols, bool tb, double* c, bool accumulate) {
    ConstMap A(a, a_rows, a_cols);
    ConstMap B(b, b_rows, b_cols);
    const int m = ta ? a_cols : a_rows;
    const int n = tb ? b_rows : b_cols;
    MutMap C(c, m, n);
    auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate) {
            C.noalias() += lhs * rhs;
        } else {
            C.noalias() = lhs * rhs;
        }
    };
    if (!ta && !tb) run(A, B);
    else if (ta && !tb) run(A.transpose(), B);
    else if (!ta && tb) run(A, B.transpose());
    else run(A.transpose(), B.transpose());
}

struct ConvGeom {
    int channels, height, width, kernel, stride, pad, out_h, out_w;
};

void im2col(const double* x, const ConvGeom& g, double* col) {
    const int plane = g.out_h * g.out_w;
    for (int c = 0; c < g.channels; ++c) {
        const double* xc = x + static_cast<std::size_t>(c) * g.height * g.width;
        for (int ki = 0; ki < g.kernel; ++ki) {
            for (int kj = 0; kj < g.kernel; ++kj) {
                double* row = col + static_cast<std::size_t>((c * g.kernel + ki) * g.kernel + kj) * plane;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ki;
                    double* dst = row + static_cast<std::size_t>(oy) * g.out_w;
                    if (iy < 0 || iy >= g.height) {
                        std::fill(dst, dst + g.out_w, 0.0);
                        continue;
                    }
                    const double* src = xc + static_cast<std::size_t>(iy) * g.width;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kj;
                        dst[ox] = (ix >= 0 && ix < g.width) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* col, const ConvGeom& g, double* x) {
    const int plane = g.out_h * g.out_w;
    for (int c = 0; c < g.channels; ++c) {
        double* xc = x + static_cast<std::size_t>(c) * g.height * g.width;
        for (int ki = 0; ki < g.kernel; ++ki) {
            for (int kj = 0; kj < g.kernel; ++kj) {
                const double* row =
                    col + static_cast<std::size_t>((c * g.kernel + ki) * g.kernel + kj) * plane;
                for (int oy = 0; oy < g.out_h; ++oy) {
                    const int iy = oy * g.stride - g.pad + ki;
                    if (iy < 0 || iy >= g.height) continue;
                    const double* src = row + static_cast<std::size_t>(oy) * g.out_w;
                    double* dst = xc + static_cast<std::size_t>(iy) * g.width;
                    for (int ox = 0; ox < g.out_w; ++ox) {
                        const int ix = ox * g.stride - g.pad + kj;
                        if (ix >= 0 && ix < g.width) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

struct Lerp {
    int i0, i1;
    double w;  // weight of i1
};

std::vector<Lerp> bilinear_axis(int in, int out) {
    std::vector<Lerp> table(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
        double src = (o + 0.5) * ratio - 0.5;
        if (src < 0.0) src = 0.0;
        int i0 = static_cast<int>(std::floor(src));
        if (i0 > in - 1) i0 = in - 1;
        const int i1 = std::min(i0 + 1, in - 1);
        table[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
    }
    return table;
}

}  // namespace

// ---------------------------------------------------------------------------

Tensor& Node::grad_buffer() {
    if (grad.data.empty() && !value.data.empty()) grad = Tensor(value.shape, 0.0);
    return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

double Var::item() const {
    if (numel() != 1) throw std::logic_error("item() on non-scalar of shape " + shape_str(shape()));
    return value().data[0];
}

void Var::set_requires_grad(bool on) { node_->requires_grad = on; }

Tensor Var::grad() const {
    if (has_grad()) return node_->grad;
    return Tensor(shape(), 0.0);
}

void Var::zero_grad() {
    if (node_) node_->grad = Tensor();
}

void Var::backward() const {
    if (numel() != 1) throw std::logic_error("backward() requires a scalar, got " + shape_str(shape()));
    if (!node_->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child && child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_buffer().data[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.data.empty()) {
            n->backward(*n);
            n->grad = Tensor();  // interior gradients are not kept
        }
    }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// -- elementwise -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (Node* in = wants(self, k)) {
                auto& g = in->grad_buffer();
                for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
            }
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "sub", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (Node* in = wants(self, 1)) {
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require(a.shape() == b.shape(), "mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    return make_op(std::move(out), {a, b}, [](Node& self) {
        const auto& av = self.inputs[0]->value;
        const auto& bv = self.inputs[1]->value;
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (Node* in = wants(self, 1)) {
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

Var scale(const Var& x, double factor) {
    Tensor out = x.value();
    for (auto& v : out.data) v *= factor;
    return make_op(std::move(out), {x}, [factor](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += factor * self.grad[i];
        }
    });
}

Var mul_scalar(const Var& x, const Var& s) {
    require(s.numel() == 1, "mul_scalar", "scale must have one element");
    const double factor = s.value()[0];
    Tensor out = x.value();
    for (auto& v : out.data) v *= factor;
    return make_op(std::move(out), {x, s}, [](Node& self) {
        const double f = self.inputs[1]->value[0];
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += f * self.grad[i];
        }
        if (Node* in = wants(self, 1)) {
            const auto& xv = self.inputs[0]->value;
            double acc = 0.0;
            for (std::size_t i = 0; i < xv.numel(); ++i) acc += xv[i] * self.grad[i];
            in->grad_buffer()[0] += acc;
        }
    });
}

Var add_const(const Var& x, const Tensor& c) {
    require(x.shape() == c.shape, "add_const", shape_str(x.shape()) + " vs " + shape_str(c.shape));
    Tensor out = x.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c[i];
    return make_op(std::move(out), {x}, [](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

Var relu(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
    return make_op(std::move(out), {x}, [](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) {
                if (in->value[i] > 0.0) g[i] += self.grad[i];
            }
        }
    });
}

Var quick_gelu(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.data) v = v / (1.0 + std::exp(-1.702 * v));
    return make_op(std::move(out), {x}, [](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) {
                const double v = in->value[i];
                const double s = 1.0 / (1.0 + std::exp(-1.702 * v));
                g[i] += self.grad[i] * (s + 1.702 * v * s * (1.0 - s));
            }
        }
    });
}

// -- matrices ------------------------------------------------------------------

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const int ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
    const int m = trans_a ? ac : ar;
    const int k = trans_a ? ar : ac;
    const int kb = trans_b ? bc : br;
    const int n = trans_b ? br : bc;
    require(k == kb, "matmul",
            "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor out({m, n});
    gemm(a.value().data.data(), ar, ac, trans_a, b.value().data.data(), br, bc, trans_b,
         out.data.data(), false);
    return make_op(std::move(out), {a, b}, [=](Node& self) {
        const double* av = self.inputs[0]->value.data.data();
        const double* bv = self.inputs[1]->value.data.data();
        const double* g = self.grad.data.data();
        if (Node* in = wants(self, 0)) {
            double* ga = in->grad_buffer().data.data();
            if (!trans_a) {
                // dA[m,k] = dC[m,n] * op(B)^T
                gemm(g, m, n, false, bv, br, bc, !trans_b, ga, true);
            } else {
                // dA[k,m] = op(B)[k,n] * dC^T
                gemm(bv, br, bc, trans_b, g, m, n, true, ga, true);
            }
        }
        if (Node* in = wants(self, 1)) {
            double* gb = in->grad_buffer().data.data();
            if (!trans_b) {
                // dB[k,n] = op(A)^T * dC
                gemm(av, ar, ac, !trans_a, g, m, n, false, gb, true);
            } else {
                // dB[n,k] = dC^T * op(A)
                gemm(g, m, n, true, av, ar, ac, trans_a, gb, true);
            }
        }
    });
}

Var pairwise_dot(const Var& a, const Var& b) {
    require_rank(a, 2, "pairwise_dot");
    require_rank(b, 2, "pairwise_dot");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    require(b.dim(1) == k, "pairwise_dot", "row widths differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out({m, n});
    const double* av = a.value().data.data();
    const double* bv = b.value().data.data();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int e = 0; e < k; ++e) acc += av[static_cast<std::size_t>(i) * k + e] * bv[static_cast<std::size_t>(j) * k + e];
            out.data[static_cast<std::size_t>(i) * n + j] = acc;
        }
    }
    return make_op(std::move(out), {a, b}, [=](Node& self) {
        const double* g = self.grad.data.data();
        // dA = dC * B, dB = dC^T * A
        if (Node* in = wants(self, 0)) {
            gemm(g, m, n, false, self.inputs[1]->value.data.data(), n, k, false, in->grad_buffer().data.data(), true);
        }
        if (Node* in = wants(self, 1)) {
            gemm(g, m, n, true, self.inputs[0]->value.data.data(), m, k, false, in->grad_buffer().data.data(), true);
        }
    });
}

Var add_row(const Var& x, const Var& row) {
    require_rank(x, 2, "add_row");
    const int m = x.dim(0), n = x.dim(1);
    require(static_cast<int>(row.numel()) == n, "add_row", "row width mismatch");
    Tensor out = x.value();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) += row.value()[static_cast<std::size_t>(j)];
    return make_op(std::move(out), {x, row}, [m, n](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (Node* in = wants(self, 1)) {
            auto& g = in->grad_buffer();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) g[static_cast<std::size_t>(j)] += self.grad.at(i, j);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& bias) {
    Var y = matmul(x, w, false, true);
    if (bias.defined()) y = add_row(y, bias);
    return y;
}

Var transpose(const Var& x) {
    require_rank(x, 2, "transpose");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.at(j, i) = x.value().at(i, j);
    return make_op(std::move(out), {x}, [m, n](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) g.at(i, j) += self.grad.at(j, i);
        }
    });
}

Var softmax_rows(const Var& x) {
    require_rank(x, 2, "softmax_rows");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) mx = std::max(mx, x.value().at(i, j));
        double z = 0.0;
        for (int j = 0; j < n; ++j) z += (out.at(i, j) = std::exp(x.value().at(i, j) - mx));
        for (int j = 0; j < n; ++j) out.at(i, j) /= z;
    }
    return make_op(std::move(out), {x}, [m, n](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (int i = 0; i < m; ++i) {
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += self.grad.at(i, j) * self.value.at(i, j);
                for (int j = 0; j < n; ++j)
                    g.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
            }
        }
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    require_rank(x, 2, "layer_norm");
    const int m = x.dim(0), n = x.dim(1);
    require(static_cast<int>(gamma.numel()) == n && static_cast<int>(beta.numel()) == n,
            "layer_norm", "affine width mismatch");
    Tensor out({m, n});
    std::vector<double> rstd(static_cast<std::size_t>(m));
    Tensor xhat({m, n});
    for (int i = 0; i < m; ++i) {
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += x.value().at(i, j);
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = x.value().at(i, j) - mu;
            var += d * d;
        }
        var /= n;
        const double r = 1.0 / std::sqrt(var + eps);
        rstd[static_cast<std::size_t>(i)] = r;
        for (int j = 0; j < n; ++j) {
            const double h = (x.value().at(i, j) - mu) * r;
            xhat.at(i, j) = h;
            out.at(i, j) = h * gamma.value()[static_cast<std::size_t>(j)] +
                           beta.value()[static_cast<std::size_t>(j)];
        }
    }
    return make_op(std::move(out), {x, gamma, beta},
                   [m, n, rstd = std::move(rstd), xhat = std::move(xhat)](Node& self) {
        const auto& gv = self.inputs[1]->value;
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (int i = 0; i < m; ++i) {
                double mean_d = 0.0, mean_dx = 0.0;
                for (int j = 0; j < n; ++j) {
                    const double d = self.grad.at(i, j) * gv[static_cast<std::size_t>(j)];
                    mean_d += d;
                    mean_dx += d * xhat.at(i, j);
                }
                mean_d /= n;
                mean_dx /= n;
                const double r = rstd[static_cast<std::size_t>(i)];
                for (int j = 0; j < n; ++j) {
                    const double d = self.grad.at(i, j) * gv[static_cast<std::size_t>(j)];
                    g.at(i, j) += r * (d - mean_d - xhat.at(i, j) * mean_dx);
                }
            }
        }
        if (Node* in = wants(self, 1)) {
            auto& g = in->grad_buffer();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    g[static_cast<std::size_t>(j)] += self.grad.at(i, j) * xhat.at(i, j);
        }
        if (Node* in = wants(self, 2)) {
            auto& g = in->grad_buffer();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) g[static_cast<std::size_t>(j)] += self.grad.at(i, j);
        }
    });
}

Var l2_normalize_rows(const Var& x, double eps) {
    require_rank(x, 2, "l2_normalize_rows");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out({m, n});
    std::vector<double> norms(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += x.value().at(i, j) * x.value().at(i, j);
        const double nr = std::sqrt(s);
        norms[static_cast<std::size_t>(i)] = nr;
        if (nr < eps) continue;
        for (int j = 0; j < n; ++j) out.at(i, j) = x.value().at(i, j) / nr;
    }
    return make_op(std::move(out), {x}, [m, n, eps, norms = std::move(norms)](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (int i = 0; i < m; ++i) {
                const double nr = norms[static_cast<std::size_t>(i)];
                if (nr < eps) continue;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += self.value.at(i, j) * self.grad.at(i, j);
                for (int j = 0; j < n; ++j)
                    g.at(i, j) += (self.grad.at(i, j) - self.value.at(i, j) * dot) / nr;
            }
        }
    });
}

Var slice_rows(const Var& x, int start, int count) {
    require_rank(x, 2, "slice_rows");
    const int n = x.dim(1);
    require(start >= 0 && count >= 0 && start + count <= x.dim(0), "slice_rows", "range out of bounds");
    const auto first = x.value().data.begin() + static_cast<std::ptrdiff_t>(start) * n;
    Tensor out({count, n}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count) * n));
    return make_op(std::move(out), {x}, [start, n](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            const std::size_t off = static_cast<std::size_t>(start) * n;
            for (std::size_t i = 0; i < self.grad.numel(); ++i) g[off + i] += self.grad[i];
        }
    });
}

Var slice_cols(const Var& x, int start, int count) {
    require_rank(x, 2, "slice_cols");
    const int m = x.dim(0), n = x.dim(1);
    require(start >= 0 && count >= 0 && start + count <= n, "slice_cols", "range out of bounds");
    Tensor out({m, count});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < count; ++j) out.at(i, j) = x.value().at(i, start + j);
    return make_op(std::move(out), {x}, [m, start, count](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < count; ++j) g.at(i, start + j) += self.grad.at(i, j);
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), "concat_rows", "no inputs");
    const int n = parts[0].dim(1);
    int rows = 0;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_rows");
        require(p.dim(1) == n, "concat_rows", "width mismatch");
        rows += p.dim(0);
    }
    Tensor out({rows, n});
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += p.numel();
    }
    return make_op(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [](Node& self) {
        std::size_t o = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            const std::size_t cnt = self.inputs[k]->value.numel();
            if (Node* in = wants(self, k)) {
                auto& g = in->grad_buffer();
                for (std::size_t i = 0; i < cnt; ++i) g[i] += self.grad[o + i];
            }
            o += cnt;
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    require(!parts.empty(), "concat_cols", "no inputs");
    const int m = parts[0].dim(0);
    int cols = 0;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_cols");
        require(p.dim(0) == m, "concat_cols", "row count mismatch");
        cols += p.dim(1);
    }
    Tensor out({m, cols});
    int off = 0;
    for (const auto& p : parts) {
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < p.dim(1); ++j) out.at(i, off + j) = p.value().at(i, j);
        off += p.dim(1);
    }
    return make_op(std::move(out), std::vector<Var>(parts.begin(), parts.end()), [m](Node& self) {
        int o = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            const int w = self.inputs[k]->value.shape[1];
            if (Node* in = wants(self, k)) {
                auto& g = in->grad_buffer();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < w; ++j) g.at(i, j) += self.grad.at(i, o + j);
            }
            o += w;
        }
    });
}

Var gather_rows(const Var& table, std::span<const int> rows) {
    require_rank(table, 2, "gather_rows");
    const int vocab = table.dim(0), n = table.dim(1);
    std::vector<int> idx(rows.begin(), rows.end());
    Tensor out({static_cast<int>(idx.size()), n});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        require(idx[r] >= 0 && idx[r] < vocab, "gather_rows", "row index " + std::to_string(idx[r]) + " out of range");
        for (int j = 0; j < n; ++j) out.at(static_cast<int>(r), j) = table.value().at(idx[r], j);
    }
    return make_op(std::move(out), {table}, [n, idx = std::move(idx)](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (std::size_t r = 0; r < idx.size(); ++r)
                for (int j = 0; j < n; ++j) g.at(idx[r], j) += self.grad.at(static_cast<int>(r), j);
        }
    });
}

Var mean_rows(const Var& x) {
    require_rank(x, 2, "mean_rows");
    const int m = x.dim(0), n = x.dim(1);
    Tensor out({1, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[static_cast<std::size_t>(j)] += x.value().at(i, j) / m;
    return make_op(std::move(out), {x}, [m, n](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) g.at(i, j) += self.grad[static_cast<std::size_t>(j)] / m;
        }
    });
}

Var reshape(const Var& x, Shape shape) {
    Tensor out = x.value().reshaped(std::move(shape));
    return make_op(std::move(out), {x}, [](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value().data) s += v;
    return make_op(Tensor({1}, s), {x}, [](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (auto& v : g.data) v += self.grad[0];
        }
    });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// -- feature maps --------------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
    require_rank(x, 4, "conv2d");
    require_rank(w, 4, "conv2d");
    const int batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int cout = w.dim(0), k = w.dim(2);
    require(w.dim(1) == cin && w.dim(3) == k, "conv2d",
            "weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
    require(!bias.defined() || static_cast<int>(bias.numel()) == cout, "conv2d", "bias size mismatch");
    const ConvGeom g{cin, h, wd, k, stride, pad, (h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1};
    require(g.out_h > 0 && g.out_w > 0, "conv2d", "empty output");
    const int plane = g.out_h * g.out_w;
    const int ckk = cin * k * k;
    Tensor out({batch, cout, g.out_h, g.out_w});
    std::vector<double> col(static_cast<std::size_t>(ckk) * plane);
    for (int b = 0; b < batch; ++b) {
        im2col(x.value().data.data() + static_cast<std::size_t>(b) * cin * h * wd, g, col.data());
        double* ob = out.data.data() + static_cast<std::size_t>(b) * cout * plane;
        gemm(w.value().data.data(), cout, ckk, false, col.data(), ckk, plane, false, ob, false);
        if (bias.defined()) {
            for (int c = 0; c < cout; ++c)
                for (int p = 0; p < plane; ++p) ob[static_cast<std::size_t>(c) * plane + p] += bias.value()[static_cast<std::size_t>(c)];
        }
    }
    return make_op(std::move(out), {x, w, bias}, [=](Node& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        Node* gx = wants(self, 0);
        Node* gw = wants(self, 1);
        Node* gb = wants(self, 2);
        std::vector<double> cbuf(static_cast<std::size_t>(ckk) * plane);
        for (int b = 0; b < batch; ++b) {
            const double* gob = self.grad.data.data() + static_cast<std::size_t>(b) * cout * plane;
            if (gw) {
                im2col(xv.data.data() + static_cast<std::size_t>(b) * cin * h * wd, g, cbuf.data());
                gemm(gob, cout, plane, false, cbuf.data(), ckk, plane, true,
                     gw->grad_buffer().data.data(), true);
            }
            if (gx) {
                gemm(wv.data.data(), cout, ckk, true, gob, cout, plane, false, cbuf.data(), false);
                col2im(cbuf.data(), g, gx->grad_buffer().data.data() + static_cast<std::size_t>(b) * cin * h * wd);
            }
            if (gb) {
                auto& bg = gb->grad_buffer();
                for (int c = 0; c < cout; ++c) {
                    double s = 0.0;
                    for (int p = 0; p < plane; ++p) s += gob[static_cast<std::size_t>(c) * plane + p];
                    bg[static_cast<std::size_t>(c)] += s;
                }
            }
        }
    });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
    require_rank(x, 4, "conv_transpose2d");
    require_rank(w, 4, "conv_transpose2d");
    const int batch = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int cout = w.dim(1), k = w.dim(2);
    require(w.dim(0) == cin && w.dim(3) == k, "conv_transpose2d",
            "weight " + shape_str(w.shape()) + " incompatible with input " + shape_str(x.shape()));
    require(!bias.defined() || static_cast<int>(bias.numel()) == cout, "conv_transpose2d", "bias size mismatch");
    const int oh = (h - 1) * stride - 2 * pad + k;
    const int ow = (wd - 1) * stride - 2 * pad + k;
    require(oh > 0 && ow > 0, "conv_transpose2d", "empty output");
    // The transposed convolution is the adjoint of a convolution on the
    // output map, so it reuses the same column geometry.
    const ConvGeom g{cout, oh, ow, k, stride, pad, h, wd};
    const int plane = h * wd;
    const int ckk = cout * k * k;
    const int oplane = oh * ow;
    Tensor out({batch, cout, oh, ow});
    std::vector<double> col(static_cast<std::size_t>(ckk) * plane);
    for (int b = 0; b < batch; ++b) {
        const double* xb = x.value().data.data() + static_cast<std::size_t>(b) * cin * plane;
        gemm(w.value().data.data(), cin, ckk, true, xb, cin, plane, false, col.data(), false);
        double* ob = out.data.data() + static_cast<std::size_t>(b) * cout * oplane;
        col2im(col.data(), g, ob);
        if (bias.defined()) {
            for (int c = 0; c < cout; ++c)
                for (int p = 0; p < oplane; ++p) ob[static_cast<std::size_t>(c) * oplane + p] += bias.value()[static_cast<std::size_t>(c)];
        }
    }
    return make_op(std::move(out), {x, w, bias}, [=](Node& self) {
        const auto& xv = self.inputs[0]->value;
        const auto& wv = self.inputs[1]->value;
        Node* gx = wants(self, 0);
        Node* gw = wants(self, 1);
        Node* gb = wants(self, 2);
        std::vector<double> cbuf(static_cast<std::size_t>(ckk) * plane);
        for (int b = 0; b < batch; ++b) {
            const double* gob = self.grad.data.data() + static_cast<std::size_t>(b) * cout * oplane;
            if (gx || gw) im2col(gob, g, cbuf.data());
            if (gx) {
                gemm(wv.data.data(), cin, ckk, false, cbuf.data(), ckk, plane, false,
                     gx->grad_buffer().data.data() + static_cast<std::size_t>(b) * cin * plane, true);
            }
            if (gw) {
                const double* xb = xv.data.data() + static_cast<std::size_t>(b) * cin * plane;
                gemm(xb, cin, plane, false, cbuf.data(), ckk, plane, true, gw->grad_buffer().data.data(), true);
            }
            if (gb) {
                auto& bg = gb->grad_buffer();
                for (int c = 0; c < cout; ++c) {
                    double s = 0.0;
                    for (int p = 0; p < oplane; ++p) s += gob[static_cast<std::size_t>(c) * oplane + p];
                    bg[static_cast<std::size_t>(c)] += s;
                }
            }
        }
    });
}

Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, bool training, double momentum, double eps) {
    require_rank(x, 4, "batch_norm2d");
    const int batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    require(static_cast<int>(gamma.numel()) == c && static_cast<int>(beta.numel()) == c &&
                static_cast<int>(running_mean.numel()) == c && static_cast<int>(running_var.numel()) == c,
            "batch_norm2d", "parameter size mismatch");
    const double count = static_cast<double>(batch) * plane;
    std::vector<double> mu(static_cast<std::size_t>(c)), rstd(static_cast<std::size_t>(c));
    const auto& xv = x.value();
    for (int ch = 0; ch < c; ++ch) {
        const auto cu = static_cast<std::size_t>(ch);
        if (training) {
            double s = 0.0;
            for (int b = 0; b < batch; ++b) {
                const double* p = xv.data.data() + (static_cast<std::size_t>(b) * c + ch) * plane;
                for (int i = 0; i < plane; ++i) s += p[i];
            }
            const double m = s / count;
            double v = 0.0;
            for (int b = 0; b < batch; ++b) {
                const double* p = xv.data.data() + (static_cast<std::size_t>(b) * c + ch) * plane;
                for (int i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
            }
            const double var = v / count;
            mu[cu] = m;
            rstd[cu] = 1.0 / std::sqrt(var + eps);
            const double unbiased = count > 1 ? v / (count - 1) : var;
            running_mean[cu] = (1.0 - momentum) * running_mean[cu] + momentum * m;
            running_var[cu] = (1.0 - momentum) * running_var[cu] + momentum * unbiased;
        } else {
            mu[cu] = running_mean[cu];
            rstd[cu] = 1.0 / std::sqrt(running_var[cu] + eps);
        }
    }
    Tensor out(xv.shape);
    for (int b = 0; b < batch; ++b)
        for (int ch = 0; ch < c; ++ch) {
            const auto cu = static_cast<std::size_t>(ch);
            const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
            for (int i = 0; i < plane; ++i)
                out[off + i] = (xv[off + i] - mu[cu]) * rstd[cu] * gamma.value()[cu] + beta.value()[cu];
        }
    return make_op(std::move(out), {x, gamma, beta},
                   [=, mu = std::move(mu), rstd = std::move(rstd)](Node& self) {
        const auto& xin = self.inputs[0]->value;
        const auto& gv = self.inputs[1]->value;
        Node* gx = wants(self, 0);
        Node* gg = wants(self, 1);
        Node* gbeta = wants(self, 2);
        for (int ch = 0; ch < c; ++ch) {
            const auto cu = static_cast<std::size_t>(ch);
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int b = 0; b < batch; ++b) {
                const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
                for (int i = 0; i < plane; ++i) {
                    const double xhat = (xin[off + i] - mu[cu]) * rstd[cu];
                    sum_dy += self.grad[off + i];
                    sum_dy_xhat += self.grad[off + i] * xhat;
                }
            }
            if (gg) gg->grad_buffer()[cu] += sum_dy_xhat;
            if (gbeta) gbeta->grad_buffer()[cu] += sum_dy;
            if (!gx) continue;
            auto& g = gx->grad_buffer();
            const double k = gv[cu] * rstd[cu];
            for (int b = 0; b < batch; ++b) {
                const std::size_t off = (static_cast<std::size_t>(b) * c + ch) * plane;
                for (int i = 0; i < plane; ++i) {
                    if (training) {
                        const double xhat = (xin[off + i] - mu[cu]) * rstd[cu];
                        g[off + i] += k * (self.grad[off + i] - sum_dy / count - xhat * sum_dy_xhat / count);
                    } else {
                        g[off + i] += k * self.grad[off + i];
                    }
                }
            }
        }
    });
}

Var avg_pool2d(const Var& x, int kernel) {
    require_rank(x, 4, "avg_pool2d");
    if (kernel == 1) return x;
    const int batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    require(h % kernel == 0 && w % kernel == 0, "avg_pool2d", "spatial size not divisible by kernel");
    const int oh = h / kernel, ow = w / kernel;
    const double inv = 1.0 / (kernel * kernel);
    Tensor out({batch, c, oh, ow});
    const auto& xv = x.value();
    for (int bc = 0; bc < batch * c; ++bc)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                out[(static_cast<std::size_t>(bc) * oh + i / kernel) * ow + j / kernel] +=
                    xv[(static_cast<std::size_t>(bc) * h + i) * w + j] * inv;
    return make_op(std::move(out), {x}, [=](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (int bc = 0; bc < batch * c; ++bc)
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < w; ++j)
                        g[(static_cast<std::size_t>(bc) * h + i) * w + j] +=
                            self.grad[(static_cast<std::size_t>(bc) * oh + i / kernel) * ow + j / kernel] * inv;
        }
    });
}

Var upsample_bilinear(const Var& x, int out_h, int out_w) {
    require_rank(x, 4, "upsample_bilinear");
    const int batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    require(out_h >= 1 && out_w >= 1, "upsample_bilinear", "empty target");
    const auto ry = bilinear_axis(h, out_h);
    const auto rx = bilinear_axis(w, out_w);
    Tensor out({batch, c, out_h, out_w});
    const auto& xv = x.value();
    for (int bc = 0; bc < batch * c; ++bc) {
        const double* src = xv.data.data() + static_cast<std::size_t>(bc) * h * w;
        double* dst = out.data.data() + static_cast<std::size_t>(bc) * out_h * out_w;
        for (int i = 0; i < out_h; ++i) {
            const auto& ly = ry[static_cast<std::size_t>(i)];
            for (int j = 0; j < out_w; ++j) {
                const auto& lx = rx[static_cast<std::size_t>(j)];
                const double top = src[ly.i0 * w + lx.i0] * (1.0 - lx.w) + src[ly.i0 * w + lx.i1] * lx.w;
                const double bot = src[ly.i1 * w + lx.i0] * (1.0 - lx.w) + src[ly.i1 * w + lx.i1] * lx.w;
                dst[i * out_w + j] = top * (1.0 - ly.w) + bot * ly.w;
            }
        }
    }
    return make_op(std::move(out), {x}, [=](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (int bc = 0; bc < batch * c; ++bc) {
                double* dst = g.data.data() + static_cast<std::size_t>(bc) * h * w;
                const double* src = self.grad.data.data() + static_cast<std::size_t>(bc) * out_h * out_w;
                for (int i = 0; i < out_h; ++i) {
                    const auto& ly = ry[static_cast<std::size_t>(i)];
                    for (int j = 0; j < out_w; ++j) {
                        const auto& lx = rx[static_cast<std::size_t>(j)];
                        const double d = src[i * out_w + j];
                        dst[ly.i0 * w + lx.i0] += d * (1.0 - ly.w) * (1.0 - lx.w);
                        dst[ly.i0 * w + lx.i1] += d * (1.0 - ly.w) * lx.w;
                        dst[ly.i1 * w + lx.i0] += d * ly.w * (1.0 - lx.w);
                        dst[ly.i1 * w + lx.i1] += d * ly.w * lx.w;
                    }
                }
            }
        }
    });
}

Var concat_channels(const Var& a, const Var& b) {
    require_rank(a, 4, "concat_channels");
    require_rank(b, 4, "concat_channels");
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3), "concat_channels",
            "spatial/batch mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int batch = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
    Tensor out({batch, ca + cb, a.dim(2), a.dim(3)});
    for (int n = 0; n < batch; ++n) {
        auto dst = out.data.begin() + static_cast<std::ptrdiff_t>(n * (ca + cb) * plane);
        auto sa = a.value().data.begin() + static_cast<std::ptrdiff_t>(n * ca * plane);
        auto sb = b.value().data.begin() + static_cast<std::ptrdiff_t>(n * cb * plane);
        std::copy(sa, sa + static_cast<std::ptrdiff_t>(ca * plane), dst);
        std::copy(sb, sb + static_cast<std::ptrdiff_t>(cb * plane), dst + static_cast<std::ptrdiff_t>(ca * plane));
    }
    return make_op(std::move(out), {a, b}, [=](Node& self) {
        for (int n = 0; n < batch; ++n) {
            const std::size_t base = n * (ca + cb) * plane;
            if (Node* in = wants(self, 0)) {
                auto& g = in->grad_buffer();
                for (std::size_t i = 0; i < ca * plane; ++i) g[n * ca * plane + i] += self.grad[base + i];
            }
            if (Node* in = wants(self, 1)) {
                auto& g = in->grad_buffer();
                for (std::size_t i = 0; i < cb * plane; ++i) g[n * cb * plane + i] += self.grad[base + ca * plane + i];
            }
        }
    });
}

Var slice_channels(const Var& x, int start, int count) {
    require_rank(x, 4, "slice_channels");
    const int batch = x.dim(0), c = x.dim(1);
    require(start >= 0 && count >= 1 && start + count <= c, "slice_channels", "range out of bounds");
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    Tensor out({batch, count, x.dim(2), x.dim(3)});
    for (int n = 0; n < batch; ++n) {
        auto src = x.value().data.begin() + static_cast<std::ptrdiff_t>((n * c + start) * plane);
        std::copy(src, src + static_cast<std::ptrdiff_t>(count * plane),
                  out.data.begin() + static_cast<std::ptrdiff_t>(n * count * plane));
    }
    return make_op(std::move(out), {x}, [=](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (int n = 0; n < batch; ++n)
                for (std::size_t i = 0; i < count * plane; ++i)
                    g[(n * c + start) * plane + i] += self.grad[n * count * plane + i];
        }
    });
}

Var concat_batch(std::span<const Var> items) {
    require(!items.empty(), "concat_batch", "no inputs");
    Shape s = items[0].shape();
    require(s.size() == 4, "concat_batch", "expected rank-4 items");
    int batch = 0;
    for (const auto& it : items) {
        require(it.value().rank() == 4 && it.dim(1) == s[1] && it.dim(2) == s[2] && it.dim(3) == s[3],
                "concat_batch", "item shape mismatch");
        batch += it.dim(0);
    }
    s[0] = batch;
    Tensor out(s);
    std::size_t off = 0;
    for (const auto& it : items) {
        std::copy(it.value().data.begin(), it.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += it.numel();
    }
    return make_op(std::move(out), std::vector<Var>(items.begin(), items.end()), [](Node& self) {
        std::size_t o = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
            const std::size_t cnt = self.inputs[k]->value.numel();
            if (Node* in = wants(self, k)) {
                auto& g = in->grad_buffer();
                for (std::size_t i = 0; i < cnt; ++i) g[i] += self.grad[o + i];
            }
            o += cnt;
        }
    });
}

Var slice_batch(const Var& x, int index) {
    require_rank(x, 4, "slice_batch");
    require(index >= 0 && index < x.dim(0), "slice_batch", "index out of range");
    const std::size_t item = x.numel() / static_cast<std::size_t>(x.dim(0));
    auto first = x.value().data.begin() + static_cast<std::ptrdiff_t>(index * item);
    Tensor out({1, x.dim(1), x.dim(2), x.dim(3)}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(item)));
    return make_op(std::move(out), {x}, [index, item](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (std::size_t i = 0; i < item; ++i) g[index * item + i] += self.grad[i];
        }
    });
}

Var map_to_tokens(const Var& x, int index) {
    require_rank(x, 4, "map_to_tokens");
    require(index >= 0 && index < x.dim(0), "map_to_tokens", "index out of range");
    const int c = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor out({plane, c});
    const double* src = x.value().data.data() + static_cast<std::size_t>(index) * c * plane;
    for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < plane; ++p) out.at(p, ch) = src[static_cast<std::size_t>(ch) * plane + p];
    return make_op(std::move(out), {x}, [=](Node& self) {
        if (Node* in = wants(self, 0)) {
            double* g = in->grad_buffer().data.data() + static_cast<std::size_t>(index) * c * plane;
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < plane; ++p) g[static_cast<std::size_t>(ch) * plane + p] += self.grad.at(p, ch);
        }
    });
}

Var tokens_to_map(std::span<const Var> items, int height, int width) {
    require(!items.empty(), "tokens_to_map", "no inputs");
    const int plane = height * width;
    const int c = items[0].dim(1);
    for (const auto& it : items) {
        require_rank(it, 2, "tokens_to_map");
        require(it.dim(0) == plane && it.dim(1) == c, "tokens_to_map",
                "token matrix " + shape_str(it.shape()) + " does not fit " + std::to_string(height) + "x" + std::to_string(width));
    }
    const int batch = static_cast<int>(items.size());
    Tensor out({batch, c, height, width});
    for (int b = 0; b < batch; ++b) {
        double* dst = out.data.data() + static_cast<std::size_t>(b) * c * plane;
        for (int p = 0; p < plane; ++p)
            for (int ch = 0; ch < c; ++ch) dst[static_cast<std::size_t>(ch) * plane + p] = items[static_cast<std::size_t>(b)].value().at(p, ch);
    }
    return make_op(std::move(out), std::vector<Var>(items.begin(), items.end()), [=](Node& self) {
        for (int b = 0; b < batch; ++b) {
            if (Node* in = wants(self, static_cast<std::size_t>(b))) {
                auto& g = in->grad_buffer();
                const double* src = self.grad.data.data() + static_cast<std::size_t>(b) * c * plane;
                for (int p = 0; p < plane; ++p)
                    for (int ch = 0; ch < c; ++ch) g.at(p, ch) += src[static_cast<std::size_t>(ch) * plane + p];
            }
        }
    });
}

// -- sampling and losses -------------------------------------------------------

Var bilinear_gather(const Var& tokens, int height, int width, std::span<const GridPoint> points,
                    std::span<const bool> keep) {
    require_rank(tokens, 2, "bilinear_gather");
    require(tokens.dim(0) == height * width, "bilinear_gather", "token count does not match grid");
    require(points.size() == keep.size(), "bilinear_gather", "points/keep size mismatch");
    const int c = tokens.dim(1);
    const int n = static_cast<int>(points.size());
    struct Tap {
        int idx[4];
        double w[4];
        bool on;
    };
    std::vector<Tap> taps(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        Tap& t = taps[static_cast<std::size_t>(k)];
        t.on = keep[static_cast<std::size_t>(k)];
        if (!t.on) continue;
        const double u = std::clamp(points[static_cast<std::size_t>(k)].u, 0.0, static_cast<double>(width - 1));
        const double v = std::clamp(points[static_cast<std::size_t>(k)].v, 0.0, static_cast<double>(height - 1));
        const int x0 = std::min(static_cast<int>(std::floor(u)), width - 1);
        const int y0 = std::min(static_cast<int>(std::floor(v)), height - 1);
        const int x1 = std::min(x0 + 1, width - 1);
        const int y1 = std::min(y0 + 1, height - 1);
        const double wx = u - x0, wy = v - y0;
        t.idx[0] = y0 * width + x0; t.w[0] = (1 - wy) * (1 - wx);
        t.idx[1] = y0 * width + x1; t.w[1] = (1 - wy) * wx;
        t.idx[2] = y1 * width + x0; t.w[2] = wy * (1 - wx);
        t.idx[3] = y1 * width + x1; t.w[3] = wy * wx;
    }
    Tensor out({n, c});
    for (int k = 0; k < n; ++k) {
        const Tap& t = taps[static_cast<std::size_t>(k)];
        if (!t.on) continue;
        for (int q = 0; q < 4; ++q)
            for (int ch = 0; ch < c; ++ch) out.at(k, ch) += t.w[q] * tokens.value().at(t.idx[q], ch);
    }
    return make_op(std::move(out), {tokens}, [n, c, taps = std::move(taps)](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            for (int k = 0; k < n; ++k) {
                const Tap& t = taps[static_cast<std::size_t>(k)];
                if (!t.on) continue;
                for (int q = 0; q < 4; ++q)
                    for (int ch = 0; ch < c; ++ch) g.at(t.idx[q], ch) += t.w[q] * self.grad.at(k, ch);
            }
        }
    });
}

Var masked_mse(const Var& pred, const Tensor& target, std::span<const double> plane_mask) {
    require(pred.shape() == target.shape, "masked_mse",
            "prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape));
    require(pred.value().rank() >= 2, "masked_mse", "need at least two spatial axes");
    const Shape& s = pred.shape();
    const std::size_t plane = static_cast<std::size_t>(s[s.size() - 1]) * s[s.size() - 2];
    const std::size_t planes = pred.numel() / plane;
    require(plane_mask.size() == planes, "masked_mse",
            "mask has " + std::to_string(plane_mask.size()) + " entries, expected " + std::to_string(planes));
    std::vector<double> mask(plane_mask.begin(), plane_mask.end());
    double kept = 0.0;
    for (double m : mask) kept += m != 0.0 ? 1.0 : 0.0;
    double acc = 0.0;
    const double denom = kept * static_cast<double>(plane);
    if (kept > 0) {
        for (std::size_t p = 0; p < planes; ++p) {
            if (mask[p] == 0.0) continue;
            for (std::size_t i = p * plane; i < (p + 1) * plane; ++i) {
                const double d = pred.value()[i] - target[i];
                acc += d * d;
            }
        }
        acc /= denom;
    }
    return make_op(Tensor({1}, acc), {pred}, [=, mask = std::move(mask)](Node& self) {
        if (denom == 0.0) return;
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            const double k = 2.0 * self.grad[0] / denom;
            for (std::size_t p = 0; p < planes; ++p) {
                if (mask[p] == 0.0) continue;
                for (std::size_t i = p * plane; i < (p + 1) * plane; ++i)
                    g[i] += k * (in->value[i] - target[i]);
            }
        }
    });
}

Var symmetric_diagonal_ce(const Var& m, std::span<const bool> keep) {
    require_rank(m, 2, "symmetric_diagonal_ce");
    const int n = m.dim(0);
    require(m.dim(1) == n, "symmetric_diagonal_ce", "matrix must be square");
    require(static_cast<int>(keep.size()) == n, "symmetric_diagonal_ce", "keep size mismatch");
    std::vector<int> idx;
    for (int i = 0; i < n; ++i)
        if (keep[static_cast<std::size_t>(i)]) idx.push_back(i);
    const int v = static_cast<int>(idx.size());
    if (v == 0) return make_op(Tensor({1}, 0.0), {m}, [](Node&) {});

    // row-wise softmax over kept columns, and column-wise over kept rows
    Tensor prow({v, v}), pcol({v, v});
    double loss_rows = 0.0, loss_cols = 0.0;
    const auto& mv = m.value();
    for (int a = 0; a < v; ++a) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int b = 0; b < v; ++b) mx = std::max(mx, mv.at(idx[a], idx[b]));
        double z = 0.0;
        for (int b = 0; b < v; ++b) z += (prow.at(a, b) = std::exp(mv.at(idx[a], idx[b]) - mx));
        for (int b = 0; b < v; ++b) prow.at(a, b) /= z;
        loss_rows += -(mv.at(idx[a], idx[a]) - mx - std::log(z));

        mx = -std::numeric_limits<double>::infinity();
        for (int b = 0; b < v; ++b) mx = std::max(mx, mv.at(idx[b], idx[a]));
        z = 0.0;
        for (int b = 0; b < v; ++b) z += (pcol.at(a, b) = std::exp(mv.at(idx[b], idx[a]) - mx));
        for (int b = 0; b < v; ++b) pcol.at(a, b) /= z;
        loss_cols += -(mv.at(idx[a], idx[a]) - mx - std::log(z));
    }
    const double loss = 0.5 * (loss_rows / v + loss_cols / v);
    return make_op(Tensor({1}, loss), {m},
                   [v, idx = std::move(idx), prow = std::move(prow), pcol = std::move(pcol)](Node& self) {
        if (Node* in = wants(self, 0)) {
            auto& g = in->grad_buffer();
            const double k = 0.5 * self.grad[0] / v;
            for (int a = 0; a < v; ++a)
                for (int b = 0; b < v; ++b) {
                    const double target = a == b ? 1.0 : 0.0;
                    // row a of M against kept columns
                    g.at(idx[a], idx[b]) += k * (prow.at(a, b) - target);
                    // column a of M (row a of M^T): entry M[idx[b], idx[a]]
                    g.at(idx[b], idx[a]) += k * (pcol.at(a, b) - target);
                }
        }
    });
}

}  // namespace clamp::ag
