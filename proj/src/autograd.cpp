#include "consisid/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace csid::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

ConstMatMap cmap(const Buffer& v, int r, int c) { return ConstMatMap(v.data(), r, c); }
MatMap mmap(Buffer& v, int r, int c) { return MatMap(v.data(), r, c); }

void require(bool cond, const char* op, const std::string& msg) {
    if (!cond) throw std::invalid_argument(std::string(op) + ": " + msg);
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

void require_2d(const Var& x, const char* op) {
    require(x && x.shape().size() == 2, op, "expected a 2-D tensor, got " + (x ? shape_str(x.shape()) : "null"));
}

// Builds the result node; the backward closure is kept only if some input
// participates in gradient recording.
Var make_result(Shape shape, Buffer value, std::vector<Var> inputs,
                std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
        node->backward = std::move(backward_fn);
    }
    return Var(std::move(node));
}

inline bool wants(const std::shared_ptr<Node>& p) { return p && p->requires_grad; }

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0) throw std::invalid_argument("negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Buffer& Node::ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
}

Var Var::constant(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size())
        throw std::invalid_argument("Var::constant: data size does not match shape " + shape_str(shape));
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value.assign(data.begin(), data.end());
    return Var(std::move(node));
}

Var Var::zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Var Var::parameter(Shape shape, std::vector<double> data) {
    Var v = constant(std::move(shape), std::move(data));
    v.node_->requires_grad = true;
    return v;
}

Var Var::scalar(double v) { return constant({1}, {v}); }

int Var::rows() const {
    if (node_->shape.size() != 2) throw std::invalid_argument("rows(): not a 2-D tensor");
    return node_->shape[0];
}

int Var::cols() const {
    if (node_->shape.size() != 2) throw std::invalid_argument("cols(): not a 2-D tensor");
    return node_->shape[1];
}

void Var::zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Var::item() const {
    if (numel() != 1) throw std::invalid_argument("item(): tensor has more than one element");
    return node_->value[0];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
    if (!root) throw std::invalid_argument("backward: null root");
    if (root.numel() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS for a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    visited.insert(root.node());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root.node()->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    require(b.rows() == k, "matmul", "inner dims differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Buffer out(static_cast<std::size_t>(m) * n);
    mmap(out, m, n).noalias() = cmap(a.node()->value, m, k) * cmap(b.node()->value, k, n);
    return make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        auto g = cmap(self.grad, m, n);
        if (wants(pa)) mmap(pa->ensure_grad(), m, k).noalias() += g * cmap(pb->value, k, n).transpose();
        if (wants(pb)) mmap(pb->ensure_grad(), k, n).noalias() += cmap(pa->value, m, k).transpose() * g;
    });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
    Var y = matmul(x, weight);
    if (bias) y = add_rowvec(y, bias);
    return y;
}

Var transpose(const Var& x) {
    require_2d(x, "transpose");
    const int r = x.rows(), c = x.cols();
    Buffer out(x.numel());
    mmap(out, c, r) = cmap(x.node()->value, r, c).transpose();
    return make_result({c, r}, std::move(out), {x}, [r, c](Node& self) {
        auto& p = self.parents[0];
        if (wants(p)) mmap(p->ensure_grad(), r, c) += cmap(self.grad, c, r).transpose();
    });
}

Var reshape(const Var& x, Shape shape) {
    require(shape_numel(shape) == x.numel(), "reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
    Buffer out(x.value().begin(), x.value().end());
    return make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
        auto& p = self.parents[0];
        if (!wants(p)) return;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

Var add(const Var& a, const Var& b) {
    require(a.numel() == b.numel(), "add", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Buffer out(a.numel());
    const auto av = a.value(), bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        for (auto& p : self.parents) {
            if (!wants(p)) continue;
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require(a.numel() == b.numel(), "sub", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Buffer out(a.numel());
    const auto av = a.value(), bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (wants(pa)) {
            auto& g = pa->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants(pb)) {
            auto& g = pb->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require(a.numel() == b.numel(), "mul", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Buffer out(a.numel());
    const auto av = a.value(), bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (wants(pa)) {
            auto& g = pa->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (wants(pb)) {
            auto& g = pb->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Buffer out(a.value().begin(), a.value().end());
    for (auto& v : out) v *= s;
    return make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
        auto& p = self.parents[0];
        if (!wants(p)) return;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

Var add_rowvec(const Var& x, const Var& row) {
    require_2d(x, "add_rowvec");
    const int n = x.rows(), d = x.cols();
    require(static_cast<int>(row.numel()) == d, "add_rowvec", "row length " + std::to_string(row.numel()) +
                                                                    " vs cols " + std::to_string(d));
    Buffer out(x.value().begin(), x.value().end());
    const auto rv = row.value();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(i) * d + j] += rv[j];
    return make_result(x.shape(), std::move(out), {x, row}, [n, d](Node& self) {
        auto& px = self.parents[0];
        auto& pr = self.parents[1];
        if (wants(px)) {
            auto& g = px->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants(pr)) {
            auto& g = pr->ensure_grad();
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) g[j] += self.grad[static_cast<std::size_t>(i) * d + j];
        }
    });
}

Var silu(const Var& x) {
    Buffer out(x.numel());
    const auto xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] / (1.0 + std::exp(-xv[i]));
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        auto& p = self.parents[0];
        if (!wants(p)) return;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = p->value[i];
            const double s = 1.0 / (1.0 + std::exp(-v));
            g[i] += self.grad[i] * s * (1.0 + v * (1.0 - s));
        }
    });
}

Var gelu(const Var& x) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    Buffer out(x.numel());
    const auto xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = xv[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(k * (v + 0.044715 * v * v * v)));
    }
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        auto& p = self.parents[0];
        if (!wants(p)) return;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = p->value[i];
            const double u = k * (v + 0.044715 * v * v * v);
            const double t = std::tanh(u);
            const double du = k * (1.0 + 3.0 * 0.044715 * v * v);
            g[i] += self.grad[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
        }
    });
}

Var relu(const Var& x) {
    Buffer out(x.value().begin(), x.value().end());
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    return make_result(x.shape(), std::move(out), {x}, [](Node& self) {
        auto& p = self.parents[0];
        if (!wants(p)) return;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (p->value[i] > 0.0) g[i] += self.grad[i];
    });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
    require_2d(x, "layer_norm");
    const int n = x.rows(), d = x.cols();
    require(static_cast<int>(gain.numel()) == d && static_cast<int>(bias.numel()) == d, "layer_norm",
            "gain/bias length mismatch");
    Buffer out(x.numel());
    Buffer xhat(x.numel());
    Buffer rstd(n);
    const auto xv = x.value();
    const auto gv = gain.value();
    const auto bv = bias.value();
    for (int i = 0; i < n; ++i) {
        const double* row = xv.data() + static_cast<std::size_t>(i) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= d;
        const double r = 1.0 / std::sqrt(var + eps);
        rstd[i] = r;
        for (int j = 0; j < d; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * d + j;
            xhat[idx] = (row[j] - mean) * r;
            out[idx] = xhat[idx] * gv[j] + bv[j];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gain, bias},
                       [n, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                           auto& px = self.parents[0];
                           auto& pg = self.parents[1];
                           auto& pb = self.parents[2];
                           const auto& gv = pg->value;
                           for (int i = 0; i < n; ++i) {
                               const std::size_t base = static_cast<std::size_t>(i) * d;
                               if (wants(pg) || wants(pb)) {
                                   auto* gg = wants(pg) ? pg->ensure_grad().data() : nullptr;
                                   auto* gb = wants(pb) ? pb->ensure_grad().data() : nullptr;
                                   for (int j = 0; j < d; ++j) {
                                       if (gg) gg[j] += self.grad[base + j] * xhat[base + j];
                                       if (gb) gb[j] += self.grad[base + j];
                                   }
                               }
                               if (wants(px)) {
                                   auto& gx = px->ensure_grad();
                                   double sum_dy = 0.0, sum_dy_xhat = 0.0;
                                   for (int j = 0; j < d; ++j) {
                                       const double dyh = self.grad[base + j] * gv[j];
                                       sum_dy += dyh;
                                       sum_dy_xhat += dyh * xhat[base + j];
                                   }
                                   for (int j = 0; j < d; ++j) {
                                       const double dyh = self.grad[base + j] * gv[j];
                                       gx[base + j] +=
                                           rstd[i] * (dyh - sum_dy / d - xhat[base + j] * sum_dy_xhat / d);
                                   }
                               }
                           }
                       });
}

Var attention(const Var& q, const Var& k, const Var& v, int heads) {
    require_2d(q, "attention");
    require_2d(k, "attention");
    require_2d(v, "attention");
    const int nq = q.rows(), nk = k.rows(), d = q.cols();
    require(nk >= 1, "attention", "no keys");
    require(k.cols() == d && v.cols() == d && v.rows() == nk, "attention", "q/k/v shape mismatch");
    require(heads >= 1 && d % heads == 0, "attention", "model dim not divisible by heads");
    const int dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Buffer out(static_cast<std::size_t>(nq) * d, 0.0);
    std::vector<RowMat> probs(heads);
    const auto Q = cmap(q.node()->value, nq, d);
    const auto K = cmap(k.node()->value, nk, d);
    const auto V = cmap(v.node()->value, nk, d);
    auto O = mmap(out, nq, d);
    for (int h = 0; h < heads; ++h) {
        RowMat s = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * inv_sqrt;
        for (int i = 0; i < nq; ++i) {
            const double mx = s.row(i).maxCoeff();
            s.row(i) = (s.row(i).array() - mx).exp();
            s.row(i) /= s.row(i).sum();
        }
        O.middleCols(h * dh, dh).noalias() = s * V.middleCols(h * dh, dh);
        probs[h] = std::move(s);
    }
    return make_result({nq, d}, std::move(out), {q, k, v},
                       [nq, nk, d, dh, heads, inv_sqrt, probs = std::move(probs)](Node& self) {
                           auto& pq = self.parents[0];
                           auto& pk = self.parents[1];
                           auto& pv = self.parents[2];
                           const auto G = cmap(self.grad, nq, d);
                           const auto Q = cmap(pq->value, nq, d);
                           const auto K = cmap(pk->value, nk, d);
                           const auto V = cmap(pv->value, nk, d);
                           for (int h = 0; h < heads; ++h) {
                               const RowMat& P = probs[h];
                               const auto Gh = G.middleCols(h * dh, dh);
                               if (wants(pv))
                                   mmap(pv->ensure_grad(), nk, d).middleCols(h * dh, dh).noalias() +=
                                       P.transpose() * Gh;
                               if (!wants(pq) && !wants(pk)) continue;
                               RowMat dP = Gh * V.middleCols(h * dh, dh).transpose();
                               RowMat dS = P.array() * (dP.colwise() - (dP.array() * P.array()).rowwise().sum().matrix()).array();
                               dS *= inv_sqrt;
                               if (wants(pq))
                                   mmap(pq->ensure_grad(), nq, d).middleCols(h * dh, dh).noalias() +=
                                       dS * K.middleCols(h * dh, dh);
                               if (wants(pk))
                                   mmap(pk->ensure_grad(), nk, d).middleCols(h * dh, dh).noalias() +=
                                       dS.transpose() * Q.middleCols(h * dh, dh);
                           }
                       });
}

Var concat_rows(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_rows", "no inputs");
    const int d = parts.front().cols();
    int n = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_rows");
        require(p.cols() == d, "concat_rows", "column count mismatch");
        n += p.rows();
    }
    Buffer out;
    out.reserve(static_cast<std::size_t>(n) * d);
    std::vector<int> offsets;
    for (const auto& p : parts) {
        offsets.push_back(static_cast<int>(out.size()));
        out.insert(out.end(), p.value().begin(), p.value().end());
    }
    return make_result({n, d}, std::move(out), parts, [offsets = std::move(offsets)](Node& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            if (!wants(p)) continue;
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat_cols", "no inputs");
    const int n = parts.front().rows();
    int d = 0;
    std::vector<int> widths;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols");
        require(p.rows() == n, "concat_cols", "row count mismatch");
        widths.push_back(p.cols());
        d += p.cols();
    }
    Buffer out(static_cast<std::size_t>(n) * d);
    int col = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto pv = parts[k].value();
        const int w = widths[k];
        for (int i = 0; i < n; ++i)
            std::copy_n(pv.data() + static_cast<std::size_t>(i) * w, w, out.data() + static_cast<std::size_t>(i) * d + col);
        col += w;
    }
    return make_result({n, d}, std::move(out), parts, [n, d, widths = std::move(widths)](Node& self) {
        int col = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            const int w = widths[k];
            if (wants(p)) {
                auto& g = p->ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < w; ++j)
                        g[static_cast<std::size_t>(i) * w + j] += self.grad[static_cast<std::size_t>(i) * d + col + j];
            }
            col += w;
        }
    });
}

Var slice_rows(const Var& x, int begin, int end) {
    require_2d(x, "slice_rows");
    require(0 <= begin && begin <= end && end <= x.rows(), "slice_rows", "range out of bounds");
    const int d = x.cols();
    const auto xv = x.value();
    Buffer out(xv.begin() + static_cast<std::ptrdiff_t>(begin) * d,
                            xv.begin() + static_cast<std::ptrdiff_t>(end) * d);
    return make_result({end - begin, d}, std::move(out), {x}, [begin, d](Node& self) {
        auto& p = self.parents[0];
        if (!wants(p)) return;
        auto& g = p->ensure_grad();
        const std::size_t off = static_cast<std::size_t>(begin) * d;
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[off + i] += self.grad[i];
    });
}

Var slice_cols(const Var& x, int begin, int end) {
    require_2d(x, "slice_cols");
    require(0 <= begin && begin <= end && end <= x.cols(), "slice_cols", "range out of bounds");
    const int n = x.rows(), d = x.cols(), w = end - begin;
    Buffer out(static_cast<std::size_t>(n) * w);
    const auto xv = x.value();
    for (int i = 0; i < n; ++i)
        std::copy_n(xv.data() + static_cast<std::size_t>(i) * d + begin, w, out.data() + static_cast<std::size_t>(i) * w);
    return make_result({n, w}, std::move(out), {x}, [n, d, w, begin](Node& self) {
        auto& p = self.parents[0];
        if (!wants(p)) return;
        auto& g = p->ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j)
                g[static_cast<std::size_t>(i) * d + begin + j] += self.grad[static_cast<std::size_t>(i) * w + j];
    });
}

Var gather_rows(const Var& x, std::span<const int> indices) {
    require_2d(x, "gather_rows");
    const int n = x.rows(), d = x.cols();
    std::vector<int> idx(indices.begin(), indices.end());
    Buffer out(idx.size() * static_cast<std::size_t>(d));
    const auto xv = x.value();
    for (std::size_t r = 0; r < idx.size(); ++r) {
        require(idx[r] >= 0 && idx[r] < n, "gather_rows", "index out of range");
        std::copy_n(xv.data() + static_cast<std::size_t>(idx[r]) * d, d, out.data() + r * d);
    }
    const int m = static_cast<int>(idx.size());
    return make_result({m, d}, std::move(out), {x}, [d, idx = std::move(idx)](Node& self) {
        auto& p = self.parents[0];
        if (!wants(p)) return;
        auto& g = p->ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(idx[r]) * d + j] += self.grad[r * d + j];
    });
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int kernel, int stride, int pad) {
    require(x && x.shape().size() == 3, "conv2d", "input must be [C,H,W]");
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    require_2d(weight, "conv2d");
    const int cout = weight.rows();
    const int kk = cin * kernel * kernel;
    require(weight.cols() == kk, "conv2d", "weight must be [Cout, Cin*k*k]");
    require(stride >= 1 && kernel >= 1 && pad >= 0, "conv2d", "bad kernel/stride/pad");
    const int ho = (h + 2 * pad - kernel) / stride + 1;
    const int wo = (w + 2 * pad - kernel) / stride + 1;
    require(ho >= 1 && wo >= 1, "conv2d", "output would be empty");
    const int np = ho * wo;

    // im2col: cols[kk, np]
    Buffer cols(static_cast<std::size_t>(kk) * np, 0.0);
    const auto xv = x.value();
    for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < kernel; ++ky)
            for (int kx = 0; kx < kernel; ++kx) {
                const int row = (c * kernel + ky) * kernel + kx;
                double* dst = cols.data() + static_cast<std::size_t>(row) * np;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix < 0 || ix >= w) continue;
                        dst[oy * wo + ox] = xv[(static_cast<std::size_t>(c) * h + iy) * w + ix];
                    }
                }
            }
    Buffer out(static_cast<std::size_t>(cout) * np);
    auto O = mmap(out, cout, np);
    O.noalias() = cmap(weight.node()->value, cout, kk) * cmap(cols, kk, np);
    if (bias) {
        require(static_cast<int>(bias.numel()) == cout, "conv2d", "bias length mismatch");
        const auto bv = bias.value();
        for (int o = 0; o < cout; ++o) O.row(o).array() += bv[o];
    }
    std::vector<Var> inputs{x, weight};
    if (bias) inputs.push_back(bias);
    return make_result({cout, ho, wo}, std::move(out), std::move(inputs),
                       [=, cols = std::move(cols)](Node& self) {
                           auto& px = self.parents[0];
                           auto& pw = self.parents[1];
                           const auto G = cmap(self.grad, cout, np);
                           if (wants(pw))
                               mmap(pw->ensure_grad(), cout, kk).noalias() += G * cmap(cols, kk, np).transpose();
                           if (self.parents.size() > 2 && wants(self.parents[2])) {
                               auto& gb = self.parents[2]->ensure_grad();
                               for (int o = 0; o < cout; ++o) gb[o] += G.row(o).sum();
                           }
                           if (!wants(px)) return;
                           RowMat dcols = cmap(pw->value, cout, kk).transpose() * G;
                           auto& gx = px->ensure_grad();
                           for (int c = 0; c < cin; ++c)
                               for (int ky = 0; ky < kernel; ++ky)
                                   for (int kx = 0; kx < kernel; ++kx) {
                                       const int row = (c * kernel + ky) * kernel + kx;
                                       for (int oy = 0; oy < ho; ++oy) {
                                           const int iy = oy * stride - pad + ky;
                                           if (iy < 0 || iy >= h) continue;
                                           for (int ox = 0; ox < wo; ++ox) {
                                               const int ix = ox * stride - pad + kx;
                                               if (ix < 0 || ix >= w) continue;
                                               gx[(static_cast<std::size_t>(c) * h + iy) * w + ix] +=
                                                   dcols(row, oy * wo + ox);
                                           }
                                       }
                                   }
                       });
}

Var sum_all(const Var& x) {
    const auto xv = x.value();
    const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
    return make_result({1}, {s}, {x}, [](Node& self) {
        auto& p = self.parents[0];
        if (!wants(p)) return;
        auto& g = p->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.numel())); }

Var mean_rows(const Var& x) {
    require_2d(x, "mean_rows");
    const int n = x.rows(), d = x.cols();
    Buffer out(d, 0.0);
    const auto xv = x.value();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[j] += xv[static_cast<std::size_t>(i) * d + j];
    for (auto& v : out) v /= n;
    return make_result({1, d}, std::move(out), {x}, [n, d](Node& self) {
        auto& p = self.parents[0];
        if (!wants(p)) return;
        auto& g = p->ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(i) * d + j] += self.grad[j] / n;
    });
}

Var mse(const Var& a, const Var& b) {
    require(a.numel() == b.numel() && a.numel() > 0, "mse", "size mismatch");
    const auto av = a.value(), bv = b.value();
    double s = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
    const double n = static_cast<double>(av.size());
    return make_result({1}, {s / n}, {a, b}, [n](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const double g0 = self.grad[0] * 2.0 / n;
        for (std::size_t i = 0; i < pa->value.size(); ++i) {
            const double diff = pa->value[i] - pb->value[i];
            if (wants(pa)) pa->ensure_grad()[i] += g0 * diff;
            if (wants(pb)) pb->ensure_grad()[i] -= g0 * diff;
        }
    });
}

Var masked_mse(const Var& a, const Var& b, std::span<const double> mask) {
    require(a.numel() == b.numel() && a.numel() == mask.size(), "masked_mse", "size mismatch");
    const auto av = a.value(), bv = b.value();
    double s = 0.0, msum = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        s += mask[i] * (av[i] - bv[i]) * (av[i] - bv[i]);
        msum += mask[i];
    }
    const double denom = std::max(msum, 1.0);
    Buffer m(mask.begin(), mask.end());
    return make_result({1}, {s / denom}, {a, b}, [denom, m = std::move(m)](Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const double g0 = self.grad[0] * 2.0 / denom;
        for (std::size_t i = 0; i < pa->value.size(); ++i) {
            const double diff = m[i] * (pa->value[i] - pb->value[i]);
            if (wants(pa)) pa->ensure_grad()[i] += g0 * diff;
            if (wants(pb)) pb->ensure_grad()[i] -= g0 * diff;
        }
    });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
    require_2d(logits, "cross_entropy");
    const int n = logits.rows(), c = logits.cols();
    require(static_cast<int>(labels.size()) == n, "cross_entropy", "label count mismatch");
    Buffer probs(logits.value().begin(), logits.value().end());
    std::vector<int> lab(labels.begin(), labels.end());
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
        require(lab[i] >= 0 && lab[i] < c, "cross_entropy", "label out of range");
        double* row = probs.data() + static_cast<std::size_t>(i) * c;
        const double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        loss += -(row[lab[i]] - mx - std::log(z));
        for (int j = 0; j < c; ++j) row[j] = std::exp(row[j] - mx) / z;
    }
    return make_result({1}, {loss / n}, {logits}, [n, c, probs = std::move(probs), lab = std::move(lab)](Node& self) {
        auto& p = self.parents[0];
        if (!wants(p)) return;
        auto& g = p->ensure_grad();
        const double s = self.grad[0] / n;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                const std::size_t idx = static_cast<std::size_t>(i) * c + j;
                g[idx] += s * (probs[idx] - (j == lab[i] ? 1.0 : 0.0));
            }
    });
}

Var l2_normalize_rows(const Var& x, double eps) {
    require_2d(x, "l2_normalize_rows");
    const int n = x.rows(), d = x.cols();
    Buffer out(x.numel());
    Buffer norms(n);
    const auto xv = x.value();
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += xv[static_cast<std::size_t>(i) * d + j] * xv[static_cast<std::size_t>(i) * d + j];
        norms[i] = std::sqrt(s) + eps;
        for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(i) * d + j] = xv[static_cast<std::size_t>(i) * d + j] / norms[i];
    }
    auto y = out;
    return make_result(x.shape(), std::move(out), {x}, [n, d, norms = std::move(norms), y = std::move(y)](Node& self) {
        auto& p = self.parents[0];
        if (!wants(p)) return;
        auto& g = p->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += self.grad[base + j] * y[base + j];
            for (int j = 0; j < d; ++j) g[base + j] += (self.grad[base + j] - y[base + j] * dot) / norms[i];
        }
    });
}

Var dropout(const Var& x, double p, Rng& rng) {
    require(p >= 0.0 && p < 1.0, "dropout", "probability must be in [0,1)");
    if (p == 0.0) return x;
    Buffer keep(x.numel());
    const double s = 1.0 / (1.0 - p);
    for (auto& k : keep) k = uniform01(rng) >= p ? s : 0.0;
    Buffer out(x.value().begin(), x.value().end());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= keep[i];
    return make_result(x.shape(), std::move(out), {x}, [keep = std::move(keep)](Node& self) {
        auto& pp = self.parents[0];
        if (!wants(pp)) return;
        auto& g = pp->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * keep[i];
    });
}

}  // namespace csid::ag
