#ifndef TPG_TENSOR_H
#define TPG_TENSOR_H

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace tpg {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // allocated lazily, same length as data
    bool requires_grad = false;
    const char* op = "leaf";

    // per-forward tape edges; cleared once backward has run
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void()> backward_fn;

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Dense row-major double tensor with reverse-mode autodiff.
// Values are immutable once produced by an op; mutation is only allowed
// on leaves the caller owns (parameters, buffers under construction).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double value, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int64_t numel() const { return impl_->numel(); }
    int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }

    double* data() { return impl_->data.data(); }
    const double* data() const { return impl_->data.data(); }
    std::vector<double>& vec() { return impl_->data; }
    const std::vector<double>& vec() const { return impl_->data; }

    double item() const;              // scalar tensors only
    double at(int64_t flat) const { return impl_->data[static_cast<size_t>(flat)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) { impl_->requires_grad = v; return *this; }

    const std::vector<double>& grad() const { return impl_->grad; }
    void zero_grad() { if (impl_) impl_->grad.assign(impl_->data.size(), 0.0); }

    // Reverse pass from a scalar output. Visits the tape in reverse
    // topological order exactly once, then frees the tape edges.
    void backward();

    bool all_finite() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<TensorImpl> impl) { Tensor t; t.impl_ = std::move(impl); return t; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ---- elementwise / algebra --------------------------------------------------
// Binary ops broadcast trailing-aligned shapes (a dim must match or be 1).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor abs(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor silu(const Tensor& a);

Tensor broadcast_to(const Tensor& a, const Shape& shape);
Shape broadcast_shape(const Shape& a, const Shape& b);

// ---- shape ------------------------------------------------------------------
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor flatten(const Tensor& a);
Tensor transpose(const Tensor& a); // 2-D
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice0(const Tensor& a, int64_t start, int64_t len); // along axis 0

// ---- reductions -------------------------------------------------------------
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);
Tensor mean_axis(const Tensor& a, int axis);

// ---- linear algebra / nn primitives ------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b); // [m,k]x[k,n]
Tensor softmax(const Tensor& a, int axis);
Tensor log_softmax(const Tensor& a, int axis);

// x [Cin,H,W], w [Cout,Cin,kh,kw], optional bias [Cout]; zero padding,
// cross-correlation semantics.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);

// x [C,H,W]; per-group statistics over (C/groups, H, W); affine weight/bias [C]
Tensor group_norm(const Tensor& x, int groups, const Tensor& weight, const Tensor& bias, double eps = 1e-5);

Tensor upsample_nearest2(const Tensor& x); // [C,H,W] -> [C,2H,2W]

Tensor l1_loss(const Tensor& a, const Tensor& b); // mean |a-b|

// ---- verification -----------------------------------------------------------
// Max over all parameter elements of
// |autodiff - central difference| / (|central difference| + 1e-8).
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps = 1e-5);

// Same check restricted to n randomly probed parameter elements.
double grad_check_sampled(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                          int n_probes, double eps, class Rng& rng);

// ---- container file ("TPGT") -------------------------------------------------
// magic "TPGT", version u32, rank u32, extents u64[], payload little-endian f64[].
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);
void write_tensor_bytes(std::vector<uint8_t>& out, const Tensor& t);
Tensor read_tensor_bytes(const uint8_t* bytes, size_t size, size_t& offset);

} // namespace tpg

#endif
