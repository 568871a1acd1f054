#include "flowcast/tensor.hpp"

#include "flowcast/errors.hpp"
#include "flowcast/gradcheck.hpp"
#include "flowcast/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <unordered_set>

namespace flowcast {

namespace grad_mode {

namespace {
thread_local bool g_enabled = true;
}

bool enabled() { return g_enabled; }
void set_enabled(bool on) { g_enabled = on; }

NoGradGuard::NoGradGuard() : prev_(g_enabled) { g_enabled = false; }
NoGradGuard::~NoGradGuard() { g_enabled = prev_; }

} // namespace grad_mode

namespace {

using kernels::active;

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, std::vector<double> data, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return impl;
}

/// Result tensor of `op` over `parents`; wires the tape entry only when grad
/// recording is on and some parent needs gradients.
Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> parents, std::function<void(TensorImpl&)> backward_fn) {
    bool needs = false;
    if (grad_mode::enabled())
        for (const Tensor& p : parents)
            if (p.requires_grad()) needs = true;
    auto impl = make_impl(std::move(shape), std::move(data), needs);
    impl->op = op;
    if (needs) {
        impl->parents.reserve(parents.size());
        for (const Tensor& p : parents) impl->parents.push_back(p.handle());
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(impl);
}

} // namespace

double* TensorImpl::grad_buf() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(make_impl(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return Tensor(make_impl(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values, bool requires_grad) {
    if (shape_numel(shape) != values.size())
        throw ShapeError("from_vector: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
    return Tensor(make_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return Tensor(make_impl({1}, {value}, requires_grad));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size())
        throw ShapeError("dim: axis " + std::to_string(axis) + " out of range for " + shape_str(impl_->shape));
    return impl_->shape[axis];
}

const std::vector<double>& Tensor::grad() const {
    if (!impl_->requires_grad)
        throw Error("grad(): tensor does not require gradients");
    impl_->grad_buf(); // a never-touched leaf reads as all zeros
    return impl_->grad;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    if (impl_->shape.size() != 2 || r >= impl_->shape[0] || c >= impl_->shape[1])
        throw ShapeError("at(" + std::to_string(r) + "," + std::to_string(c) + "): shape is " + shape_str(impl_->shape));
    return impl_->data[r * impl_->shape[1] + c];
}

void Tensor::zero_grad() { impl_->grad.clear(); }

void Tensor::backward() const {
    if (numel() != 1) throw ShapeError("backward(): output must be scalar, got " + shape_str(impl_->shape));
    if (!impl_->requires_grad)
        throw Error("backward(): output does not depend on any requires-grad tensor");

    // Iterative post-order DFS; reversed post-order is a valid topological
    // order with the output first.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame { TensorImpl* node; std::size_t next; };
    std::vector<Frame> stack{{impl_.get(), 0}};
    visited.insert(impl_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            TensorImpl* p = f.node->parents[f.next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    // Leaf grads persist across calls (accumulation semantics); intermediate
    // buffers are scratch and reset per call so each backward contributes
    // exactly one gradient of the output.
    for (TensorImpl* node : order)
        if (node->backward_fn && !node->grad.empty()) std::fill(node->grad.begin(), node->grad.end(), 0.0);

    impl_->grad_buf()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_fail(op, a.shape(), b.shape());
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    std::size_t n = a.numel();
    std::vector<double> out(n);
    active().add(a.values().data(), b.values().data(), out.data(), n);
    auto ai = a.handle(), bi = b.handle();
    return make_result("add", a.shape(), std::move(out), {a, b}, [ai, bi, n](TensorImpl& self) {
        if (ai->requires_grad) active().axpy(1.0, self.grad.data(), ai->grad_buf(), n);
        if (bi->requires_grad) active().axpy(1.0, self.grad.data(), bi->grad_buf(), n);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    std::size_t n = a.numel();
    std::vector<double> out(n);
    active().sub(a.values().data(), b.values().data(), out.data(), n);
    auto ai = a.handle(), bi = b.handle();
    return make_result("sub", a.shape(), std::move(out), {a, b}, [ai, bi, n](TensorImpl& self) {
        if (ai->requires_grad) active().axpy(1.0, self.grad.data(), ai->grad_buf(), n);
        if (bi->requires_grad) active().axpy(-1.0, self.grad.data(), bi->grad_buf(), n);
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    std::size_t n = a.numel();
    std::vector<double> out(n);
    active().mul(a.values().data(), b.values().data(), out.data(), n);
    auto ai = a.handle(), bi = b.handle();
    return make_result("mul", a.shape(), std::move(out), {a, b}, [ai, bi, n](TensorImpl& self) {
        const double* g = self.grad.data();
        if (ai->requires_grad) {
            double* ga = ai->grad_buf();
            const double* bv = bi->data.data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
        }
        if (bi->requires_grad) {
            double* gb = bi->grad_buf();
            const double* av = ai->data.data();
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
        }
    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    std::size_t n = a.numel();
    std::vector<double> out(n);
    active().scale(a.values().data(), s, out.data(), n);
    auto ai = a.handle();
    return make_result("mul_scalar", a.shape(), std::move(out), {a}, [ai, s, n](TensorImpl& self) {
        if (ai->requires_grad) active().axpy(s, self.grad.data(), ai->grad_buf(), n);
    });
}

Tensor relu(const Tensor& x) {
    std::size_t n = x.numel();
    std::vector<double> out(n);
    active().relu(x.values().data(), out.data(), n);
    auto xi = x.handle();
    return make_result("relu", x.shape(), std::move(out), {x}, [xi, n](TensorImpl& self) {
        if (xi->requires_grad)
            active().relu_backward(xi->data.data(), self.grad.data(), xi->grad_buf(), n);
    });
}

Tensor sigmoid(const Tensor& x) {
    std::size_t n = x.numel();
    std::vector<double> out(n);
    const double* xv = x.values().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
    auto xi = x.handle();
    return make_result("sigmoid", x.shape(), std::move(out), {x}, [xi, n](TensorImpl& self) {
        if (!xi->requires_grad) return;
        const double* g = self.grad.data();
        const double* y = self.data.data();
        double* gx = xi->grad_buf();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Tensor tanh(const Tensor& x) {
    std::size_t n = x.numel();
    std::vector<double> out(n);
    const double* xv = x.values().data();
    for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(xv[i]);
    auto xi = x.handle();
    return make_result("tanh", x.shape(), std::move(out), {x}, [xi, n](TensorImpl& self) {
        if (!xi->requires_grad) return;
        const double* g = self.grad.data();
        const double* y = self.data.data();
        double* gx = xi->grad_buf();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (1.0 - y[i] * y[i]);
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

namespace {

void check_2d(const char* op, const Tensor& t) {
    if (t.shape().size() != 2)
        throw ShapeError(std::string(op) + ": expected a 2-d tensor, got " + shape_str(t.shape()));
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_2d("matmul", a);
    check_2d("matmul", b);
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) shape_fail("matmul", a.shape(), b.shape());
    std::vector<double> out(m * n, 0.0);
    active().matmul_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    auto ai = a.handle(), bi = b.handle();
    return make_result("matmul", {m, n}, std::move(out), {a, b}, [ai, bi, m, k, n](TensorImpl& self) {
        const double* g = self.grad.data();
        if (ai->requires_grad) active().matmul_nt(g, bi->data.data(), ai->grad_buf(), m, n, k);
        if (bi->requires_grad) active().matmul_tn(ai->data.data(), g, bi->grad_buf(), k, m, n);
    });
}

Tensor matmul_transposed(const Tensor& a, const Tensor& b) {
    check_2d("matmul_transposed", a);
    check_2d("matmul_transposed", b);
    std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) shape_fail("matmul_transposed", a.shape(), b.shape());
    std::vector<double> out(m * n, 0.0);
    active().matmul_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
    auto ai = a.handle(), bi = b.handle();
    return make_result("matmul_transposed", {m, n}, std::move(out), {a, b},
                       [ai, bi, m, k, n](TensorImpl& self) {
                           const double* g = self.grad.data();
                           if (ai->requires_grad) active().matmul_nn(g, bi->data.data(), ai->grad_buf(), m, n, k);
                           if (bi->requires_grad) active().matmul_tn(g, ai->data.data(), bi->grad_buf(), n, m, k);
                       });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    check_2d("linear", x);
    check_2d("linear", w);
    std::size_t r = x.dim(0), c = x.dim(1), o = w.dim(1);
    if (w.dim(0) != c) shape_fail("linear", x.shape(), w.shape());
    if (bias.defined() && bias.numel() != o)
        throw ShapeError("linear: bias has " + std::to_string(bias.numel()) + " elements, expected " + std::to_string(o));
    std::vector<double> out(r * o, 0.0);
    active().matmul_nn(x.values().data(), w.values().data(), out.data(), r, c, o);
    if (bias.defined())
        for (std::size_t i = 0; i < r; ++i)
            active().add(out.data() + i * o, bias.values().data(), out.data() + i * o, o);

    std::vector<Tensor> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    auto xi = x.handle(), wi = w.handle();
    auto biasi = bias.defined() ? bias.handle() : nullptr;
    return make_result("linear", {r, o}, std::move(out), std::move(parents),
                       [xi, wi, biasi, r, c, o](TensorImpl& self) {
                           const double* g = self.grad.data();
                           if (xi->requires_grad) active().matmul_nt(g, wi->data.data(), xi->grad_buf(), r, o, c);
                           if (wi->requires_grad) active().matmul_tn(xi->data.data(), g, wi->grad_buf(), c, r, o);
                           if (biasi && biasi->requires_grad) {
                               double* gb = biasi->grad_buf();
                               for (std::size_t i = 0; i < r; ++i) active().add(gb, g + i * o, gb, o);
                           }
                       });
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    std::size_t n = x.numel();
    auto xi = x.handle();
    return make_result("reshape", std::move(shape), x.values(), {x}, [xi, n](TensorImpl& self) {
        if (xi->requires_grad) active().axpy(1.0, self.grad.data(), xi->grad_buf(), n);
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no tensors given");
    if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
    for (const Tensor& p : parts) check_2d("concat", p);

    std::size_t rows = parts[0].dim(0), cols = parts[0].dim(1);
    for (const Tensor& p : parts) {
        if (axis == 0 && p.dim(1) != cols) shape_fail("concat", parts[0].shape(), p.shape());
        if (axis == 1 && p.dim(0) != rows) shape_fail("concat", parts[0].shape(), p.shape());
    }

    Shape out_shape;
    std::vector<double> out;
    if (axis == 0) {
        std::size_t total = 0;
        for (const Tensor& p : parts) total += p.dim(0);
        out_shape = {total, cols};
        out.reserve(total * cols);
        for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    } else {
        std::size_t total = 0;
        for (const Tensor& p : parts) total += p.dim(1);
        out_shape = {rows, total};
        out.assign(rows * total, 0.0);
        std::size_t col0 = 0;
        for (const Tensor& p : parts) {
            std::size_t pc = p.dim(1);
            for (std::size_t i = 0; i < rows; ++i)
                std::copy_n(p.values().data() + i * pc, pc, out.data() + i * total + col0);
            col0 += pc;
        }
    }

    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const Tensor& p : parts) impls.push_back(p.handle());
    std::size_t total_cols = out_shape[1];
    return make_result("concat", out_shape, std::move(out), parts,
                       [impls, axis, rows, total_cols](TensorImpl& self) {
                           const double* g = self.grad.data();
                           if (axis == 0) {
                               std::size_t off = 0;
                               for (const auto& p : impls) {
                                   std::size_t n = p->data.size();
                                   if (p->requires_grad) active().axpy(1.0, g + off, p->grad_buf(), n);
                                   off += n;
                               }
                           } else {
                               std::size_t col0 = 0;
                               for (const auto& p : impls) {
                                   std::size_t pc = p->shape[1];
                                   if (p->requires_grad) {
                                       double* gp = p->grad_buf();
                                       for (std::size_t i = 0; i < rows; ++i)
                                           active().add(gp + i * pc, g + i * total_cols + col0, gp + i * pc, pc);
                                   }
                                   col0 += pc;
                               }
                           }
                       });
}

// ---------------------------------------------------------------------------
// reductions / nonlinear
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
    std::size_t n = x.numel();
    double s = active().reduce_sum(x.values().data(), n);
    auto xi = x.handle();
    return make_result("sum", {1}, {s}, {x}, [xi, n](TensorImpl& self) {
        if (!xi->requires_grad) return;
        double g = self.grad[0];
        double* gx = xi->grad_buf();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
}

namespace {

// Slice layout of softmax along `axis`: `slices` independent runs of `len`
// elements, slice s element j at offset s*slice_stride + j*elem_stride.
struct SliceView {
    std::size_t slices, len, slice_stride, elem_stride;
};

SliceView softmax_slices(const Shape& shape, int axis) {
    std::size_t rank = shape.size();
    if (rank != 1 && rank != 2)
        throw ShapeError("softmax: expected a 1-d or 2-d tensor, got " + shape_str(shape));
    int resolved = axis < 0 ? axis + static_cast<int>(rank) : axis;
    if (resolved < 0 || resolved >= static_cast<int>(rank))
        throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
    if (rank == 1) return {1, shape[0], 0, 1};
    if (resolved == 1) return {shape[0], shape[1], shape[1], 1}; // rows
    return {shape[1], shape[0], 1, shape[1]};                    // columns
}

} // namespace

Tensor softmax(const Tensor& x, int axis) {
    SliceView v = softmax_slices(x.shape(), axis);
    std::vector<double> out(x.numel());
    std::vector<double> tmp(v.len);
    const double* xv = x.values().data();
    for (std::size_t s = 0; s < v.slices; ++s) {
        const double* base = xv + s * v.slice_stride;
        for (std::size_t j = 0; j < v.len; ++j) tmp[j] = base[j * v.elem_stride];
        double m = active().reduce_max(tmp.data(), v.len);
        for (std::size_t j = 0; j < v.len; ++j) tmp[j] = std::exp(tmp[j] - m);
        double sum = active().reduce_sum(tmp.data(), v.len);
        double inv = 1.0 / sum;
        double* obase = out.data() + s * v.slice_stride;
        for (std::size_t j = 0; j < v.len; ++j) obase[j * v.elem_stride] = tmp[j] * inv;
    }
    auto xi = x.handle();
    return make_result("softmax", x.shape(), std::move(out), {x}, [xi, v](TensorImpl& self) {
        if (!xi->requires_grad) return;
        double* gx = xi->grad_buf();
        for (std::size_t s = 0; s < v.slices; ++s) {
            const double* y = self.data.data() + s * v.slice_stride;
            const double* g = self.grad.data() + s * v.slice_stride;
            double inner = 0.0;
            for (std::size_t j = 0; j < v.len; ++j)
                inner += g[j * v.elem_stride] * y[j * v.elem_stride];
            double* gbase = gx + s * v.slice_stride;
            for (std::size_t j = 0; j < v.len; ++j) {
                std::size_t o = j * v.elem_stride;
                gbase[o] += y[o] * (g[o] - inner);
            }
        }
    });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
    check_same_shape("mse", pred, target);
    Tensor d = sub(pred, target);
    return mul_scalar(sum(mul(d, d)), 1.0 / static_cast<double>(pred.numel()));
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    std::size_t C, H, W, OC, KH, KW, OH, OW, sh, sw;
    long ph, pw;
};

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad, const char* what) {
    std::size_t padded = in + 2 * pad;
    if (padded < k)
        throw ShapeError(std::string("conv2d: kernel ") + what + " " + std::to_string(k) +
                         " exceeds padded input " + std::to_string(padded));
    if ((padded - k) % stride != 0)
        throw ConfigError(std::string("conv2d: ") + what + " extent (" + std::to_string(padded) +
                          " - " + std::to_string(k) + ") is not divisible by stride " +
                          std::to_string(stride));
    return (padded - k) / stride + 1;
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::size_t stride_h, std::size_t stride_w,
              std::size_t pad_h, std::size_t pad_w) {
    if (x.shape().size() != 3)
        throw ShapeError("conv2d: input must be (C,H,W), got " + shape_str(x.shape()));
    if (kernel.shape().size() != 4)
        throw ShapeError("conv2d: kernel must be (OC,C,KH,KW), got " + shape_str(kernel.shape()));
    if (stride_h == 0 || stride_w == 0) throw ShapeError("conv2d: stride must be positive");
    ConvDims d;
    d.C = x.dim(0); d.H = x.dim(1); d.W = x.dim(2);
    d.OC = kernel.dim(0); d.KH = kernel.dim(2); d.KW = kernel.dim(3);
    d.sh = stride_h; d.sw = stride_w;
    d.ph = static_cast<long>(pad_h); d.pw = static_cast<long>(pad_w);
    if (kernel.dim(1) != d.C) shape_fail("conv2d", x.shape(), kernel.shape());
    if (bias.defined() && bias.numel() != d.OC)
        throw ShapeError("conv2d: bias has " + std::to_string(bias.numel()) + " elements, expected " + std::to_string(d.OC));
    d.OH = conv_extent(d.H, d.KH, d.sh, pad_h, "height");
    d.OW = conv_extent(d.W, d.KW, d.sw, pad_w, "width");

    std::vector<double> out(d.OC * d.OH * d.OW, 0.0);
    if (bias.defined())
        for (std::size_t oc = 0; oc < d.OC; ++oc)
            std::fill_n(out.data() + oc * d.OH * d.OW, d.OH * d.OW, bias.values()[oc]);

    const double* xv = x.values().data();
    const double* kv = kernel.values().data();
    const std::size_t plane_in = d.H * d.W, plane_out = d.OH * d.OW;

    if (d.sh == 1 && d.sw == 1) {
        // Row-sliced accumulation: each (oc,ic,kh,kw) tap adds a scaled,
        // shifted input row into the matching output row.
        for (std::size_t oc = 0; oc < d.OC; ++oc)
            for (std::size_t ic = 0; ic < d.C; ++ic)
                for (std::size_t kh = 0; kh < d.KH; ++kh)
                    for (std::size_t kw = 0; kw < d.KW; ++kw) {
                        double kval = kv[((oc * d.C + ic) * d.KH + kh) * d.KW + kw];
                        if (kval == 0.0) continue;
                        long shift = static_cast<long>(kw) - d.pw;
                        std::size_t ow0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                        long ow1l = static_cast<long>(d.W) - shift;
                        std::size_t ow1 = std::min<std::size_t>(d.OW, ow1l < 0 ? 0 : static_cast<std::size_t>(ow1l));
                        if (ow0 >= ow1) continue;
                        for (std::size_t oh = 0; oh < d.OH; ++oh) {
                            long ih = static_cast<long>(oh + kh) - d.ph;
                            if (ih < 0 || ih >= static_cast<long>(d.H)) continue;
                            const double* in_row = xv + ic * plane_in + static_cast<std::size_t>(ih) * d.W + ow0 + shift;
                            double* out_row = out.data() + oc * plane_out + oh * d.OW + ow0;
                            active().axpy(kval, in_row, out_row, ow1 - ow0);
                        }
                    }
    } else {
        for (std::size_t oc = 0; oc < d.OC; ++oc)
            for (std::size_t oh = 0; oh < d.OH; ++oh)
                for (std::size_t ow = 0; ow < d.OW; ++ow) {
                    double acc = out[oc * plane_out + oh * d.OW + ow];
                    for (std::size_t ic = 0; ic < d.C; ++ic)
                        for (std::size_t kh = 0; kh < d.KH; ++kh) {
                            long ih = static_cast<long>(oh * d.sh + kh) - d.ph;
                            if (ih < 0 || ih >= static_cast<long>(d.H)) continue;
                            for (std::size_t kw = 0; kw < d.KW; ++kw) {
                                long iw = static_cast<long>(ow * d.sw + kw) - d.pw;
                                if (iw < 0 || iw >= static_cast<long>(d.W)) continue;
                                acc += kv[((oc * d.C + ic) * d.KH + kh) * d.KW + kw] *
                                       xv[ic * plane_in + static_cast<std::size_t>(ih) * d.W + static_cast<std::size_t>(iw)];
                            }
                        }
                    out[oc * plane_out + oh * d.OW + ow] = acc;
                }
    }

    std::vector<Tensor> parents{x, kernel};
    if (bias.defined()) parents.push_back(bias);
    auto xi = x.handle(), ki = kernel.handle();
    auto biasi = bias.defined() ? bias.handle() : nullptr;
    return make_result("conv2d", {d.OC, d.OH, d.OW}, std::move(out), std::move(parents),
                       [xi, ki, biasi, d, plane_in, plane_out](TensorImpl& self) {
                           const double* g = self.grad.data();
                           if (biasi && biasi->requires_grad) {
                               double* gb = biasi->grad_buf();
                               for (std::size_t oc = 0; oc < d.OC; ++oc)
                                   gb[oc] += active().reduce_sum(g + oc * plane_out, plane_out);
                           }
                           bool need_x = xi->requires_grad, need_k = ki->requires_grad;
                           if (!need_x && !need_k) return;
                           const double* xv = xi->data.data();
                           const double* kv = ki->data.data();
                           double* gx = need_x ? xi->grad_buf() : nullptr;
                           double* gk = need_k ? ki->grad_buf() : nullptr;
                           if (d.sh == 1 && d.sw == 1) {
                               for (std::size_t oc = 0; oc < d.OC; ++oc)
                                   for (std::size_t ic = 0; ic < d.C; ++ic)
                                       for (std::size_t kh = 0; kh < d.KH; ++kh)
                                           for (std::size_t kw = 0; kw < d.KW; ++kw) {
                                               std::size_t kidx = ((oc * d.C + ic) * d.KH + kh) * d.KW + kw;
                                               long shift = static_cast<long>(kw) - d.pw;
                                               std::size_t ow0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
                                               long ow1l = static_cast<long>(d.W) - shift;
                                               std::size_t ow1 = std::min<std::size_t>(d.OW, ow1l < 0 ? 0 : static_cast<std::size_t>(ow1l));
                                               if (ow0 >= ow1) continue;
                                               for (std::size_t oh = 0; oh < d.OH; ++oh) {
                                                   long ih = static_cast<long>(oh + kh) - d.ph;
                                                   if (ih < 0 || ih >= static_cast<long>(d.H)) continue;
                                                   std::size_t in_off = ic * plane_in + static_cast<std::size_t>(ih) * d.W + ow0 + shift;
                                                   const double* g_row = g + oc * plane_out + oh * d.OW + ow0;
                                                   if (need_k) gk[kidx] += active().dot(g_row, xv + in_off, ow1 - ow0);
                                                   if (need_x) active().axpy(kv[kidx], g_row, gx + in_off, ow1 - ow0);
                                               }
                                           }
                           } else {
                               for (std::size_t oc = 0; oc < d.OC; ++oc)
                                   for (std::size_t oh = 0; oh < d.OH; ++oh)
                                       for (std::size_t ow = 0; ow < d.OW; ++ow) {
                                           double go = g[oc * plane_out + oh * d.OW + ow];
                                           if (go == 0.0) continue;
                                           for (std::size_t ic = 0; ic < d.C; ++ic)
                                               for (std::size_t kh = 0; kh < d.KH; ++kh) {
                                                   long ih = static_cast<long>(oh * d.sh + kh) - d.ph;
                                                   if (ih < 0 || ih >= static_cast<long>(d.H)) continue;
                                                   for (std::size_t kw = 0; kw < d.KW; ++kw) {
                                                       long iw = static_cast<long>(ow * d.sw + kw) - d.pw;
                                                       if (iw < 0 || iw >= static_cast<long>(d.W)) continue;
                                                       std::size_t kidx = ((oc * d.C + ic) * d.KH + kh) * d.KW + kw;
                                                       std::size_t in_off = ic * plane_in + static_cast<std::size_t>(ih) * d.W + static_cast<std::size_t>(iw);
                                                       if (need_k) gk[kidx] += go * xv[in_off];
                                                       if (need_x) gx[in_off] += go * kv[kidx];
                                                   }
                                               }
                                       }
                           }
                       });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t pad) {
    return conv2d(x, kernel, bias, stride, stride, pad, pad);
}

// ---------------------------------------------------------------------------
// finite-difference verification
// ---------------------------------------------------------------------------

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
    grad_mode::NoGradGuard guard;
    double v = f().item();
    if (!std::isfinite(v)) throw Error("grad_check: function produced a non-finite value");
    return v;
}

double grad_check_impl(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                       double eps, std::size_t coords, std::uint64_t seed) {
    if (eps <= 0.0) throw ConfigError("grad_check: eps must be positive");
    for (Tensor p : params) p.zero_grad();
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw Error("grad_check: function produced a non-finite value");
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    std::size_t total = 0;
    for (const Tensor& p : params) {
        analytic.push_back(p.grad());
        total += p.numel();
    }

    std::vector<std::pair<std::size_t, std::size_t>> picks; // (param, coord)
    if (coords == 0 || coords >= total) {
        for (std::size_t pi = 0; pi < params.size(); ++pi)
            for (std::size_t i = 0; i < params[pi].numel(); ++i) picks.emplace_back(pi, i);
    } else {
        std::vector<std::size_t> flat(total);
        for (std::size_t i = 0; i < total; ++i) flat[i] = i;
        std::mt19937_64 rng(seed);
        std::shuffle(flat.begin(), flat.end(), rng);
        flat.resize(coords);
        for (std::size_t ix : flat) {
            std::size_t pi = 0;
            while (ix >= params[pi].numel()) ix -= params[pi].numel(), ++pi;
            picks.emplace_back(pi, ix);
        }
    }

    double worst = 0.0;
    for (auto [pi, i] : picks) {
        std::vector<double>& theta = const_cast<Tensor&>(params[pi]).values();
        double orig = theta[i];
        theta[i] = orig + eps;
        double above = eval_scalar(f);
        theta[i] = orig - eps;
        double below = eval_scalar(f);
        theta[i] = orig;
        double numeric = (above - below) / (2.0 * eps);
        double a = analytic[pi][i];
        double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
    return worst;
}

} // namespace

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps) {
    return grad_check_impl(f, params, eps, 0, 0);
}

double grad_check_sampled(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                          double eps, std::size_t coords, std::uint64_t seed) {
    if (coords == 0) throw ConfigError("grad_check_sampled: coordinate count must be positive");
    return grad_check_impl(f, params, eps, coords, seed);
}

} // namespace flowcast
