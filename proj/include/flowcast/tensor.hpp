#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

namespace flowcast {

using Shape = std::vector<std::size_t>;

/// Thread-local switch for gradient recording. Wrap inference in NoGradGuard
/// to skip tape construction entirely.
namespace grad_mode {

bool enabled();
void set_enabled(bool on);

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

} // namespace grad_mode

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // sized lazily on first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    std::size_t numel() const { return data.size(); }
    double* grad_buf(); // zero-initialised to numel() on first call
};

/// Dense float64 tensor with reverse-mode autodiff. Copies share the
/// underlying storage; ops build a DAG that backward() walks in reverse
/// topological order, accumulating into .grad of requires-grad leaves.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_vector(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t numel() const { return impl_->data.size(); }
    std::size_t dim(std::size_t axis) const;
    bool requires_grad() const { return impl_->requires_grad; }

    std::vector<double>& values() { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }
    const std::vector<double>& grad() const;
    bool has_grad() const { return !impl_->grad.empty(); }

    double item() const;
    double at(std::size_t r, std::size_t c) const; // 2-d convenience

    /// Seeds d(self)/d(self)=1 and accumulates gradients into every
    /// requires-grad ancestor. Self must be scalar. Repeated calls keep
    /// accumulating; call zero_grad() on the leaves between steps.
    void backward() const;
    void zero_grad();

    TensorImpl* impl() const { return impl_.get(); }
    std::shared_ptr<TensorImpl> handle() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ----- elementwise -----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

// ----- linear algebra -----
Tensor matmul(const Tensor& a, const Tensor& b);            // (m,k)·(k,n)
Tensor matmul_transposed(const Tensor& a, const Tensor& b); // (m,k)·(n,k)^T
/// x·W (+ row-broadcast bias). Pass a default-constructed Tensor for no bias.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// ----- shape -----
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis); // 2-d, axis 0 or 1

// ----- reductions / nonlinear -----
Tensor sum(const Tensor& x);
Tensor softmax(const Tensor& x, int axis = -1); // last-axis rows of a 1-d/2-d tensor
Tensor mse(const Tensor& pred, const Tensor& target);

/// 2-d cross-correlation with zero padding. x is (C,H,W), kernel is
/// (OC,C,KH,KW), bias (OC) optional via a default-constructed Tensor.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::size_t stride_h, std::size_t stride_w,
              std::size_t pad_h, std::size_t pad_w);
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::size_t stride = 1, std::size_t pad = 0);

} // namespace flowcast
