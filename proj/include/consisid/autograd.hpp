#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Var is a handle to a graph node. Operations on Vars record a backward
// closure when gradient recording is enabled and at least one input requires
// a gradient; calling backward() on a scalar result accumulates gradients
// into every reachable node that requires one. Graphs are freed when the last
// handle to the root goes away.

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <vector>

#include "consisid/rng.hpp"

namespace csid::ag {

using Shape = std::vector<int>;

// 64-byte aligned storage. Vectorized reductions peel a different prefix for
// each start alignment, so unaligned buffers would make results depend on
// where the heap happened to place them.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_numel(const Shape& shape);

struct Node {
    Buffer value;
    Buffer grad;
    Shape shape;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Buffer& ensure_grad();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Shape shape, std::vector<double> data);
    static Var zeros(Shape shape);
    static Var parameter(Shape shape, std::vector<double> data);
    static Var scalar(double v);

    const Shape& shape() const { return node_->shape; }
    int dim(std::size_t i) const { return node_->shape.at(i); }
    int rows() const;
    int cols() const;
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> value() const { return node_->value; }
    std::span<double> mutable_value() { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad();
    double item() const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Seeds d(root)/d(root) = 1 and propagates. Root must be a scalar.
void backward(const Var& root);

// --- dense ops (row-major, 2-D unless stated) ---

Var matmul(const Var& a, const Var& b);
Var linear(const Var& x, const Var& weight, const Var& bias);  // x[n,in] W[in,out] + b[out]
Var transpose(const Var& x);
Var reshape(const Var& x, Shape shape);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_rowvec(const Var& x, const Var& row);  // x[n,d] + row[d]

Var silu(const Var& x);
Var gelu(const Var& x);
Var relu(const Var& x);

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);

// Multi-head scaled dot-product attention over column blocks of q/k/v.
// q[nq,d], k[nk,d], v[nk,d] -> [nq,d].
Var attention(const Var& q, const Var& k, const Var& v, int heads);

Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& x, int begin, int end);
Var slice_cols(const Var& x, int begin, int end);
Var gather_rows(const Var& x, std::span<const int> indices);

// x[C,H,W] with weight[Cout, Cin*k*k] and bias[Cout] -> [Cout,Ho,Wo].
Var conv2d(const Var& x, const Var& weight, const Var& bias, int kernel, int stride, int pad);

Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var mean_rows(const Var& x);  // [n,d] -> [1,d]
Var mse(const Var& a, const Var& b);
// sum(M * (a-b)^2) / max(sum(M), 1); the mask is treated as a constant.
Var masked_mse(const Var& a, const Var& b, std::span<const double> mask);
Var cross_entropy(const Var& logits, std::span<const int> labels);  // mean over rows
Var l2_normalize_rows(const Var& x, double eps = 1e-8);
Var dropout(const Var& x, double p, Rng& rng);

}  // namespace csid::ag
