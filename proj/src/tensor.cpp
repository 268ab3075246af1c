#include "tpg/tensor.h"
#include "tpg/rng.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace tpg {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

std::shared_ptr<TensorImpl> make_impl(Shape shape, const char* op) {
    for (int64_t e : shape) {
        if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->data.resize(static_cast<size_t>(shape_numel(shape)));
    impl->shape = std::move(shape);
    impl->op = op;
    return impl;
}

// Registers the backward closure if any input participates in the tape.
void attach(const std::shared_ptr<TensorImpl>& out,
            std::initializer_list<std::shared_ptr<TensorImpl>> inputs,
            std::function<void()> fn) {
    bool needs = false;
    for (const auto& i : inputs)
        if (i && i->requires_grad) needs = true;
    if (!needs) return;
    out->requires_grad = true;
    for (const auto& i : inputs)
        if (i && i->requires_grad) out->parents.push_back(i);
    out->backward_fn = std::move(fn);
}

Shape pad_leading(const Shape& s, size_t rank) {
    Shape r(rank, 1);
    std::copy(s.begin(), s.end(), r.begin() + (rank - s.size()));
    return r;
}

std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

} // namespace

// ---- Tensor basics ----------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    auto impl = make_impl(shape, "leaf");
    impl->requires_grad = requires_grad;
    return wrap(impl);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
    auto impl = make_impl(shape, "leaf");
    std::fill(impl->data.begin(), impl->data.end(), value);
    impl->requires_grad = requires_grad;
    return wrap(impl);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
    if (static_cast<int64_t>(values.size()) != shape_numel(shape))
        throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(shape));
    auto impl = make_impl(shape, "leaf");
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return wrap(impl);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item() requires a single-element tensor, got " + shape_str(shape()));
    return impl_->data[0];
}

bool Tensor::all_finite() const {
    for (double v : impl_->data)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::backward() {
    if (!impl_) throw std::invalid_argument("backward() on undefined tensor");
    if (numel() != 1) throw std::invalid_argument("backward() requires a scalar output, got " + shape_str(shape()));
    impl_->ensure_grad();
    impl_->grad[0] += 1.0;

    // iterative post-order DFS; reversed gives a valid reverse-topological order
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& top = stack.back();
        if (top.second < top.first->parents.size()) {
            TensorImpl* p = top.first->parents[top.second++].get();
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(top.first);
            stack.pop_back();
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn();
    // the tape is per-forward; free it
    for (auto* n : order) {
        n->backward_fn = nullptr;
        n->parents.clear();
    }
}

// ---- broadcasting -----------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const size_t rank = std::max(a.size(), b.size());
    Shape pa = pad_leading(a, rank), pb = pad_leading(b, rank), out(rank);
    for (size_t i = 0; i < rank; ++i) {
        if (pa[i] == pb[i]) out[i] = pa[i];
        else if (pa[i] == 1) out[i] = pb[i];
        else if (pb[i] == 1) out[i] = pa[i];
        else throw std::invalid_argument("shapes not broadcastable: " + shape_str(a) + " vs " + shape_str(b));
    }
    return out;
}

namespace {

// Calls fn(out_flat, in_flat) for every element of `tgt`, where in_flat walks
// `src` with zero stride on broadcast dims. src must be pre-padded to tgt rank.
template <typename F>
void broadcast_walk(const Shape& tgt, const Shape& src, F&& fn) {
    const size_t rank = tgt.size();
    auto sstr = row_major_strides(src);
    for (size_t i = 0; i < rank; ++i)
        if (src[i] == 1 && tgt[i] != 1) sstr[i] = 0;
    const int64_t n = shape_numel(tgt);
    std::vector<int64_t> idx(rank, 0);
    int64_t in_flat = 0;
    for (int64_t out_flat = 0; out_flat < n; ++out_flat) {
        fn(out_flat, in_flat);
        for (int d = static_cast<int>(rank) - 1; d >= 0; --d) {
            idx[d]++;
            in_flat += sstr[d];
            if (idx[d] < tgt[d]) break;
            in_flat -= sstr[d] * tgt[d];
            idx[d] = 0;
        }
    }
}

} // namespace

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    if (a.shape() == shape) return a;
    const Shape src = pad_leading(a.shape(), shape.size());
    for (size_t i = 0; i < shape.size(); ++i)
        if (src[i] != shape[i] && src[i] != 1)
            throw std::invalid_argument("cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
    auto out = make_impl(shape, "broadcast");
    const double* ad = a.data();
    double* od = out->data.data();
    broadcast_walk(shape, src, [&](int64_t of, int64_t inf) { od[of] = ad[inf]; });

    auto ai = a.impl();
    TensorImpl* o = out.get();
    attach(out, {ai}, [ai, o, shape, src]() {
        ai->ensure_grad();
        double* ag = ai->grad.data();
        const double* og = o->grad.data();
        broadcast_walk(shape, src, [&](int64_t of, int64_t inf) { ag[inf] += og[of]; });
    });
    return Tensor::wrap(out);
}

// ---- elementwise binary -----------------------------------------------------

namespace {

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a0, const Tensor& b0, BinOp kind, const char* name) {
    Tensor a = a0, b = b0;
    if (a.shape() != b.shape()) {
        const Shape s = broadcast_shape(a.shape(), b.shape());
        a = broadcast_to(a, s);
        b = broadcast_to(b, s);
    }
    auto out = make_impl(a.shape(), name);
    const int64_t n = out->numel();
    const double* ad = a.data();
    const double* bd = b.data();
    double* od = out->data.data();
    switch (kind) {
        case BinOp::Add: for (int64_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i]; break;
        case BinOp::Sub: for (int64_t i = 0; i < n; ++i) od[i] = ad[i] - bd[i]; break;
        case BinOp::Mul: for (int64_t i = 0; i < n; ++i) od[i] = ad[i] * bd[i]; break;
        case BinOp::Div: for (int64_t i = 0; i < n; ++i) od[i] = ad[i] / bd[i]; break;
    }
    auto ai = a.impl(), bi = b.impl();
    TensorImpl* o = out.get();
    attach(out, {ai, bi}, [ai, bi, o, kind, n]() {
        const double* og = o->grad.data();
        if (ai->requires_grad) {
            ai->ensure_grad();
            double* ag = ai->grad.data();
            switch (kind) {
                case BinOp::Add:
                case BinOp::Sub: for (int64_t i = 0; i < n; ++i) ag[i] += og[i]; break;
                case BinOp::Mul: for (int64_t i = 0; i < n; ++i) ag[i] += og[i] * bi->data[i]; break;
                case BinOp::Div: for (int64_t i = 0; i < n; ++i) ag[i] += og[i] / bi->data[i]; break;
            }
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            double* bg = bi->grad.data();
            switch (kind) {
                case BinOp::Add: for (int64_t i = 0; i < n; ++i) bg[i] += og[i]; break;
                case BinOp::Sub: for (int64_t i = 0; i < n; ++i) bg[i] -= og[i]; break;
                case BinOp::Mul: for (int64_t i = 0; i < n; ++i) bg[i] += og[i] * ai->data[i]; break;
                case BinOp::Div:
                    for (int64_t i = 0; i < n; ++i) {
                        const double bv = bi->data[i];
                        bg[i] -= og[i] * ai->data[i] / (bv * bv);
                    }
                    break;
            }
        }
    });
    return Tensor::wrap(out);
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Div, "div"); }

// ---- elementwise unary --------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, Bwd bwd) {
    auto out = make_impl(a.shape(), name);
    const int64_t n = out->numel();
    const double* ad = a.data();
    double* od = out->data.data();
    for (int64_t i = 0; i < n; ++i) od[i] = fwd(ad[i]);
    auto ai = a.impl();
    TensorImpl* o = out.get();
    attach(out, {ai}, [ai, o, n, bwd]() {
        ai->ensure_grad();
        double* ag = ai->grad.data();
        const double* og = o->grad.data();
        const double* av = ai->data.data();
        const double* ov = o->data.data();
        for (int64_t i = 0; i < n; ++i) ag[i] += og[i] * bwd(av[i], ov[i]);
    });
    return Tensor::wrap(out);
}

} // namespace

Tensor neg(const Tensor& a) {
    return unary(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double c) {
    return unary(a, "scale", [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
    return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor abs(const Tensor& a) {
    return unary(a, "abs", [](double x) { return std::fabs(x); },
                 [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor sqrt(const Tensor& a) {
    return unary(a, "sqrt", [](double x) { return std::sqrt(x); },
                 [](double, double y) { return 0.5 / y; });
}

Tensor silu(const Tensor& a) {
    return unary(a, "silu",
                 [](double x) { return x / (1.0 + std::exp(-x)); },
                 [](double x, double) {
                     const double s = 1.0 / (1.0 + std::exp(-x));
                     return s * (1.0 + x * (1.0 - s));
                 });
}

// ---- shape ops ----------------------------------------------------------------

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_numel(shape) != a.numel())
        throw std::invalid_argument("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
    auto out = make_impl(shape, "reshape");
    out->data = a.impl()->data;
    auto ai = a.impl();
    TensorImpl* o = out.get();
    attach(out, {ai}, [ai, o]() {
        ai->ensure_grad();
        const int64_t n = ai->numel();
        for (int64_t i = 0; i < n; ++i) ai->grad[i] += o->grad[i];
    });
    return Tensor::wrap(out);
}

Tensor flatten(const Tensor& a) { return reshape(a, {a.numel()}); }

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose expects rank 2, got " + shape_str(a.shape()));
    const int64_t m = a.dim(0), n = a.dim(1);
    auto out = make_impl({n, m}, "transpose");
    const double* ad = a.data();
    double* od = out->data.data();
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) od[j * m + i] = ad[i * n + j];
    auto ai = a.impl();
    TensorImpl* o = out.get();
    attach(out, {ai}, [ai, o, m, n]() {
        ai->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) ai->grad[i * n + j] += o->grad[j * m + i];
    });
    return Tensor::wrap(out);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
    const int rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw std::invalid_argument("concat axis out of range");
    Shape out_shape = parts[0].shape();
    int64_t total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != rank) throw std::invalid_argument("concat rank mismatch");
        for (int d = 0; d < rank; ++d)
            if (d != axis && p.dim(d) != out_shape[static_cast<size_t>(d)])
                throw std::invalid_argument("concat shape mismatch: " + shape_str(p.shape()));
        total_axis += p.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total_axis;
    auto out = make_impl(out_shape, "concat");

    int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= out_shape[static_cast<size_t>(d)];
    for (int d = axis + 1; d < rank; ++d) inner *= out_shape[static_cast<size_t>(d)];

    double* od = out->data.data();
    const int64_t out_row = total_axis * inner;
    int64_t axis_off = 0;
    for (const auto& p : parts) {
        const int64_t pa = p.dim(axis);
        const double* pd = p.data();
        for (int64_t ou = 0; ou < outer; ++ou)
            std::memcpy(od + ou * out_row + axis_off * inner, pd + ou * pa * inner,
                        static_cast<size_t>(pa * inner) * sizeof(double));
        axis_off += pa;
    }

    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const auto& p : parts) impls.push_back(p.impl());
    TensorImpl* o = out.get();
    bool needs = false;
    for (const auto& i : impls)
        if (i->requires_grad) needs = true;
    if (needs) {
        out->requires_grad = true;
        for (const auto& i : impls)
            if (i->requires_grad) out->parents.push_back(i);
        std::vector<int64_t> axis_sizes;
        for (const auto& p : parts) axis_sizes.push_back(p.dim(axis));
        out->backward_fn = [impls, o, outer, inner, out_row, axis_sizes]() {
            int64_t off = 0;
            for (size_t k = 0; k < impls.size(); ++k) {
                const int64_t pa = axis_sizes[k];
                if (impls[k]->requires_grad) {
                    impls[k]->ensure_grad();
                    double* pg = impls[k]->grad.data();
                    for (int64_t ou = 0; ou < outer; ++ou) {
                        const double* src = o->grad.data() + ou * out_row + off * inner;
                        double* dst = pg + ou * pa * inner;
                        for (int64_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
                    }
                }
                off += pa;
            }
        };
    }
    return Tensor::wrap(out);
}

Tensor slice0(const Tensor& a, int64_t start, int64_t len) {
    if (a.rank() < 1) throw std::invalid_argument("slice0 needs rank >= 1");
    if (start < 0 || len <= 0 || start + len > a.dim(0))
        throw std::invalid_argument("slice0 range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                                    ") outside extent " + std::to_string(a.dim(0)));
    Shape out_shape = a.shape();
    out_shape[0] = len;
    auto out = make_impl(out_shape, "slice0");
    const int64_t inner = a.numel() / a.dim(0);
    std::memcpy(out->data.data(), a.data() + start * inner, static_cast<size_t>(len * inner) * sizeof(double));
    auto ai = a.impl();
    TensorImpl* o = out.get();
    attach(out, {ai}, [ai, o, start, inner, len]() {
        ai->ensure_grad();
        double* ag = ai->grad.data() + start * inner;
        const double* og = o->grad.data();
        for (int64_t i = 0; i < len * inner; ++i) ag[i] += og[i];
    });
    return Tensor::wrap(out);
}

// ---- reductions -----------------------------------------------------------------

Tensor sum(const Tensor& a) {
    auto out = make_impl({1}, "sum");
    double acc = 0.0;
    for (double v : a.vec()) acc += v;
    out->data[0] = acc;
    auto ai = a.impl();
    TensorImpl* o = out.get();
    attach(out, {ai}, [ai, o]() {
        ai->ensure_grad();
        const double g = o->grad[0];
        for (auto& gv : ai->grad) gv += g;
    });
    return Tensor::wrap(out);
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_axis(const Tensor& a, int axis) {
    const int rank = a.rank();
    if (axis < 0 || axis >= rank) throw std::invalid_argument("sum_axis out of range");
    Shape out_shape;
    for (int d = 0; d < rank; ++d)
        if (d != axis) out_shape.push_back(a.dim(d));
    if (out_shape.empty()) out_shape = {1};
    int64_t outer = 1, inner = 1;
    const int64_t k = a.dim(axis);
    for (int d = 0; d < axis; ++d) outer *= a.dim(d);
    for (int d = axis + 1; d < rank; ++d) inner *= a.dim(d);

    auto out = make_impl(out_shape, "sum_axis");
    const double* ad = a.data();
    double* od = out->data.data();
    std::fill(out->data.begin(), out->data.end(), 0.0);
    for (int64_t ou = 0; ou < outer; ++ou)
        for (int64_t j = 0; j < k; ++j) {
            const double* src = ad + (ou * k + j) * inner;
            double* dst = od + ou * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    auto ai = a.impl();
    TensorImpl* o = out.get();
    attach(out, {ai}, [ai, o, outer, inner, k]() {
        ai->ensure_grad();
        for (int64_t ou = 0; ou < outer; ++ou)
            for (int64_t j = 0; j < k; ++j) {
                double* dst = ai->grad.data() + (ou * k + j) * inner;
                const double* src = o->grad.data() + ou * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
    });
    return Tensor::wrap(out);
}

Tensor mean_axis(const Tensor& a, int axis) {
    return scale(sum_axis(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

// ---- matmul ----------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw std::invalid_argument("matmul inner extents disagree: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    auto out = make_impl({m, n}, "matmul");
    const double* A = a.data();
    const double* B = b.data();
    double* C = out->data.data();
    std::fill(out->data.begin(), out->data.end(), 0.0);
    for (int64_t i = 0; i < m; ++i) {
        double* Ci = C + i * n;
        const double* Ai = A + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const double aip = Ai[p];
            const double* Bp = B + p * n;
            for (int64_t j = 0; j < n; ++j) Ci[j] += aip * Bp[j];
        }
    }
    auto ai = a.impl(), bi = b.impl();
    TensorImpl* o = out.get();
    attach(out, {ai, bi}, [ai, bi, o, m, k, n]() {
        const double* G = o->grad.data();
        if (ai->requires_grad) {
            ai->ensure_grad();
            double* dA = ai->grad.data();
            const double* B = bi->data.data();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t p = 0; p < k; ++p) {
                    const double* Gi = G + i * n;
                    const double* Bp = B + p * n;
                    double acc = 0.0;
                    for (int64_t j = 0; j < n; ++j) acc += Gi[j] * Bp[j];
                    dA[i * k + p] += acc;
                }
        }
        if (bi->requires_grad) {
            bi->ensure_grad();
            double* dB = bi->grad.data();
            const double* A = ai->data.data();
            for (int64_t i = 0; i < m; ++i) {
                const double* Gi = G + i * n;
                const double* Ai = A + i * k;
                for (int64_t p = 0; p < k; ++p) {
                    const double aip = Ai[p];
                    double* dBp = dB + p * n;
                    for (int64_t j = 0; j < n; ++j) dBp[j] += aip * Gi[j];
                }
            }
        }
    });
    return Tensor::wrap(out);
}

// ---- softmax ----------------------------------------------------------------------

namespace {

void lane_dims(const Tensor& a, int axis, int64_t& outer, int64_t& k, int64_t& inner) {
    if (axis < 0 || axis >= a.rank()) throw std::invalid_argument("softmax axis out of range");
    outer = 1;
    inner = 1;
    k = a.dim(axis);
    for (int d = 0; d < axis; ++d) outer *= a.dim(d);
    for (int d = axis + 1; d < a.rank(); ++d) inner *= a.dim(d);
}

} // namespace

Tensor softmax(const Tensor& a, int axis) {
    int64_t outer, k, inner;
    lane_dims(a, axis, outer, k, inner);
    auto out = make_impl(a.shape(), "softmax");
    const double* ad = a.data();
    double* od = out->data.data();
    for (int64_t ou = 0; ou < outer; ++ou)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = ou * k * inner + in;
            double mx = ad[base];
            for (int64_t j = 1; j < k; ++j) mx = std::max(mx, ad[base + j * inner]);
            double s = 0.0;
            for (int64_t j = 0; j < k; ++j) {
                const double e = std::exp(ad[base + j * inner] - mx);
                od[base + j * inner] = e;
                s += e;
            }
            const double invs = 1.0 / s;
            for (int64_t j = 0; j < k; ++j) od[base + j * inner] *= invs;
        }
    auto ai = a.impl();
    TensorImpl* o = out.get();
    attach(out, {ai}, [ai, o, outer, k, inner]() {
        ai->ensure_grad();
        const double* p = o->data.data();
        const double* g = o->grad.data();
        double* ag = ai->grad.data();
        for (int64_t ou = 0; ou < outer; ++ou)
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = ou * k * inner + in;
                double dot = 0.0;
                for (int64_t j = 0; j < k; ++j) dot += p[base + j * inner] * g[base + j * inner];
                for (int64_t j = 0; j < k; ++j)
                    ag[base + j * inner] += p[base + j * inner] * (g[base + j * inner] - dot);
            }
    });
    return Tensor::wrap(out);
}

Tensor log_softmax(const Tensor& a, int axis) {
    int64_t outer, k, inner;
    lane_dims(a, axis, outer, k, inner);
    auto out = make_impl(a.shape(), "log_softmax");
    const double* ad = a.data();
    double* od = out->data.data();
    for (int64_t ou = 0; ou < outer; ++ou)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = ou * k * inner + in;
            double mx = ad[base];
            for (int64_t j = 1; j < k; ++j) mx = std::max(mx, ad[base + j * inner]);
            double s = 0.0;
            for (int64_t j = 0; j < k; ++j) s += std::exp(ad[base + j * inner] - mx);
            const double lse = mx + std::log(s);
            for (int64_t j = 0; j < k; ++j) od[base + j * inner] = ad[base + j * inner] - lse;
        }
    auto ai = a.impl();
    TensorImpl* o = out.get();
    attach(out, {ai}, [ai, o, outer, k, inner]() {
        ai->ensure_grad();
        const double* lp = o->data.data();
        const double* g = o->grad.data();
        double* ag = ai->grad.data();
        for (int64_t ou = 0; ou < outer; ++ou)
            for (int64_t in = 0; in < inner; ++in) {
                const int64_t base = ou * k * inner + in;
                double gs = 0.0;
                for (int64_t j = 0; j < k; ++j) gs += g[base + j * inner];
                for (int64_t j = 0; j < k; ++j)
                    ag[base + j * inner] += g[base + j * inner] - std::exp(lp[base + j * inner]) * gs;
            }
    });
    return Tensor::wrap(out);
}

// ---- conv2d ----------------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
    return conv2d(x, w, Tensor(), stride, padding);
}

namespace {

// Patch matrix layout [K, Ho*Wo] with K = Ci*kh*kw. Row k holds the input
// value each output position reads for that kernel tap (0 in the padding).
// The k order matches the (ci, ky, kx) nesting of a direct convolution, so
// accumulating over rows reproduces the naive summation order bit-for-bit.
struct PatchPlan {
    int64_t Ci, H, W, kh, kw, Ho, Wo;
    int stride, padding;
    int64_t K() const { return Ci * kh * kw; }
    int64_t P() const { return Ho * Wo; }
};

void fill_patches(const PatchPlan& p, const double* x, double* pt) {
    for (int64_t ci = 0; ci < p.Ci; ++ci)
        for (int64_t ky = 0; ky < p.kh; ++ky)
            for (int64_t kx = 0; kx < p.kw; ++kx) {
                double* row = pt + ((ci * p.kh + ky) * p.kw + kx) * p.P();
                for (int64_t oy = 0; oy < p.Ho; ++oy) {
                    const int64_t iy = oy * p.stride + ky - p.padding;
                    double* dst = row + oy * p.Wo;
                    if (iy < 0 || iy >= p.H) {
                        std::fill(dst, dst + p.Wo, 0.0);
                        continue;
                    }
                    const double* src = x + (ci * p.H + iy) * p.W;
                    for (int64_t ox = 0; ox < p.Wo; ++ox) {
                        const int64_t ix = ox * p.stride + kx - p.padding;
                        dst[ox] = (ix < 0 || ix >= p.W) ? 0.0 : src[ix];
                    }
                }
            }
}

// scatter-add of the patch-gradient matrix back into the input gradient
void scatter_patches(const PatchPlan& p, const double* dpt, double* dx) {
    for (int64_t ci = 0; ci < p.Ci; ++ci)
        for (int64_t ky = 0; ky < p.kh; ++ky)
            for (int64_t kx = 0; kx < p.kw; ++kx) {
                const double* row = dpt + ((ci * p.kh + ky) * p.kw + kx) * p.P();
                for (int64_t oy = 0; oy < p.Ho; ++oy) {
                    const int64_t iy = oy * p.stride + ky - p.padding;
                    if (iy < 0 || iy >= p.H) continue;
                    const double* src = row + oy * p.Wo;
                    double* dst = dx + (ci * p.H + iy) * p.W;
                    for (int64_t ox = 0; ox < p.Wo; ++ox) {
                        const int64_t ix = ox * p.stride + kx - p.padding;
                        if (ix >= 0 && ix < p.W) dst[ix] += src[ox];
                    }
                }
            }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
    if (x.rank() != 3) throw std::invalid_argument("conv2d input must be [C,H,W], got " + shape_str(x.shape()));
    if (w.rank() != 4) throw std::invalid_argument("conv2d kernel must be [Co,Ci,kh,kw], got " + shape_str(w.shape()));
    if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: bad stride/padding");
    const int64_t Ci = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int64_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != Ci)
        throw std::invalid_argument("conv2d channel mismatch: input " + shape_str(x.shape()) + " kernel " + shape_str(w.shape()));
    if (kh > H + 2 * padding || kw > W + 2 * padding)
        throw std::invalid_argument("conv2d kernel " + shape_str(w.shape()) + " larger than padded input " + shape_str(x.shape()));
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Co))
        throw std::invalid_argument("conv2d bias must be [Co]");
    const PatchPlan plan{Ci, H, W, kh, kw,
                         (H + 2 * padding - kh) / stride + 1,
                         (W + 2 * padding - kw) / stride + 1,
                         stride, padding};
    const int64_t K = plan.K(), P = plan.P();

    auto patches = std::make_shared<std::vector<double>>(static_cast<size_t>(K * P));
    fill_patches(plan, x.data(), patches->data());

    auto out = make_impl({Co, plan.Ho, plan.Wo}, "conv2d");
    double* od = out->data.data();
    const double* wd = w.data();
    if (bias.defined()) {
        const double* bd = bias.data();
        for (int64_t co = 0; co < Co; ++co) std::fill(od + co * P, od + (co + 1) * P, bd[co]);
    }
    for (int64_t co = 0; co < Co; ++co) {
        double* orow = od + co * P;
        const double* wrow = wd + co * K;
        for (int64_t k = 0; k < K; ++k) {
            const double wv = wrow[k];
            const double* prow = patches->data() + k * P;
            for (int64_t i = 0; i < P; ++i) orow[i] += wv * prow[i];
        }
    }

    auto xi = x.impl(), wi = w.impl();
    auto bimpl = bias.defined() ? bias.impl() : nullptr;
    TensorImpl* o = out.get();
    attach(out, {xi, wi, bimpl}, [xi, wi, bimpl, o, patches, plan, Co, K, P]() {
        const double* G = o->grad.data();
        if (bimpl && bimpl->requires_grad) {
            bimpl->ensure_grad();
            for (int64_t co = 0; co < Co; ++co) {
                double acc = 0.0;
                const double* gp = G + co * P;
                for (int64_t i = 0; i < P; ++i) acc += gp[i];
                bimpl->grad[co] += acc;
            }
        }
        if (wi->requires_grad) {
            wi->ensure_grad();
            for (int64_t co = 0; co < Co; ++co) {
                const double* grow = G + co * P;
                double* wgrow = wi->grad.data() + co * K;
                for (int64_t k = 0; k < K; ++k) {
                    const double* prow = patches->data() + k * P;
                    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
                    int64_t i = 0;
                    for (; i + 4 <= P; i += 4) {
                        a0 += grow[i] * prow[i];
                        a1 += grow[i + 1] * prow[i + 1];
                        a2 += grow[i + 2] * prow[i + 2];
                        a3 += grow[i + 3] * prow[i + 3];
                    }
                    for (; i < P; ++i) a0 += grow[i] * prow[i];
                    wgrow[k] += a0 + a1 + a2 + a3;
                }
            }
        }
        if (xi->requires_grad) {
            xi->ensure_grad();
            std::vector<double> dpt(static_cast<size_t>(K * P), 0.0);
            const double* wd = wi->data.data();
            for (int64_t co = 0; co < Co; ++co) {
                const double* grow = G + co * P;
                const double* wrow = wd + co * K;
                for (int64_t k = 0; k < K; ++k) {
                    const double wv = wrow[k];
                    if (wv == 0.0) continue;
                    double* drow = dpt.data() + k * P;
                    for (int64_t i = 0; i < P; ++i) drow[i] += wv * grow[i];
                }
            }
            scatter_patches(plan, dpt.data(), xi->grad.data());
        }
    });
    return Tensor::wrap(out);
}

// ---- group norm ---------------------------------------------------------------------

Tensor group_norm(const Tensor& x, int groups, const Tensor& weight, const Tensor& bias, double eps) {
    if (x.rank() != 3) throw std::invalid_argument("group_norm input must be [C,H,W]");
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (groups < 1 || C % groups != 0)
        throw std::invalid_argument("group_norm: channels " + std::to_string(C) + " not divisible by groups " + std::to_string(groups));
    if (weight.numel() != C || bias.numel() != C)
        throw std::invalid_argument("group_norm affine parameters must have C elements");
    const int64_t cpg = C / groups;
    const int64_t gsize = cpg * H * W;
    const int64_t hw = H * W;

    auto out = make_impl(x.shape(), "group_norm");
    auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(x.numel()));
    auto invstd = std::make_shared<std::vector<double>>(static_cast<size_t>(groups));
    const double* xd = x.data();
    const double* wd = weight.data();
    const double* bd = bias.data();
    double* od = out->data.data();
    for (int64_t g = 0; g < groups; ++g) {
        const double* xg = xd + g * gsize;
        double mu = 0.0;
        for (int64_t i = 0; i < gsize; ++i) mu += xg[i];
        mu /= static_cast<double>(gsize);
        double var = 0.0;
        for (int64_t i = 0; i < gsize; ++i) {
            const double d = xg[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(gsize);
        const double is = 1.0 / std::sqrt(var + eps);
        (*invstd)[static_cast<size_t>(g)] = is;
        for (int64_t c = 0; c < cpg; ++c) {
            const int64_t ch = g * cpg + c;
            const double wv = wd[ch], bv = bd[ch];
            for (int64_t i = 0; i < hw; ++i) {
                const int64_t idx = ch * hw + i;
                const double xh = (xd[idx] - mu) * is;
                (*xhat)[static_cast<size_t>(idx)] = xh;
                od[idx] = wv * xh + bv;
            }
        }
    }
    auto xi = x.impl(), wi = weight.impl(), bi = bias.impl();
    TensorImpl* o = out.get();
    attach(out, {xi, wi, bi}, [xi, wi, bi, o, xhat, invstd, groups, cpg, hw, gsize]() {
        const double* G = o->grad.data();
        const double* xh = xhat->data();
        if (bi->requires_grad) {
            bi->ensure_grad();
            for (int64_t ch = 0; ch < groups * cpg; ++ch) {
                double acc = 0.0;
                for (int64_t i = 0; i < hw; ++i) acc += G[ch * hw + i];
                bi->grad[ch] += acc;
            }
        }
        if (wi->requires_grad) {
            wi->ensure_grad();
            for (int64_t ch = 0; ch < groups * cpg; ++ch) {
                double acc = 0.0;
                for (int64_t i = 0; i < hw; ++i) acc += G[ch * hw + i] * xh[ch * hw + i];
                wi->grad[ch] += acc;
            }
        }
        if (xi->requires_grad) {
            xi->ensure_grad();
            const double* wv = wi->data.data();
            for (int64_t g = 0; g < groups; ++g) {
                double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                for (int64_t c = 0; c < cpg; ++c) {
                    const int64_t ch = g * cpg + c;
                    for (int64_t i = 0; i < hw; ++i) {
                        const int64_t idx = ch * hw + i;
                        const double dxh = G[idx] * wv[ch];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh[idx];
                    }
                }
                const double inv_n = 1.0 / static_cast<double>(gsize);
                const double is = (*invstd)[static_cast<size_t>(g)];
                for (int64_t c = 0; c < cpg; ++c) {
                    const int64_t ch = g * cpg + c;
                    for (int64_t i = 0; i < hw; ++i) {
                        const int64_t idx = ch * hw + i;
                        const double dxh = G[idx] * wv[ch];
                        xi->grad[idx] += is * (dxh - inv_n * sum_dxh - xh[idx] * inv_n * sum_dxh_xh);
                    }
                }
            }
        }
    });
    return Tensor::wrap(out);
}

// ---- upsample --------------------------------------------------------------------

Tensor upsample_nearest2(const Tensor& x) {
    if (x.rank() != 3) throw std::invalid_argument("upsample_nearest2 input must be [C,H,W]");
    const int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    auto out = make_impl({C, 2 * H, 2 * W}, "upsample2");
    const double* xd = x.data();
    double* od = out->data.data();
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t xq = 0; xq < W; ++xq) {
                const double v = xd[(c * H + y) * W + xq];
                const int64_t b = (c * 2 * H + 2 * y) * 2 * W + 2 * xq;
                od[b] = v;
                od[b + 1] = v;
                od[b + 2 * W] = v;
                od[b + 2 * W + 1] = v;
            }
    auto xi = x.impl();
    TensorImpl* o = out.get();
    attach(out, {xi}, [xi, o, C, H, W]() {
        xi->ensure_grad();
        const double* g = o->grad.data();
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t xq = 0; xq < W; ++xq) {
                    const int64_t b = (c * 2 * H + 2 * y) * 2 * W + 2 * xq;
                    xi->grad[(c * H + y) * W + xq] += g[b] + g[b + 1] + g[b + 2 * W] + g[b + 2 * W + 1];
                }
    });
    return Tensor::wrap(out);
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("l1_loss shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    return mean(abs(sub(a, b)));
}

// ---- gradient checking --------------------------------------------------------------

namespace {

void report_non_finite(const Tensor& out) {
    // walk the tape looking for the first non-finite node
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, size_t>> stack;
    stack.emplace_back(out.impl().get(), 0);
    visited.insert(out.impl().get());
    while (!stack.empty()) {
        auto& top = stack.back();
        if (top.second < top.first->parents.size()) {
            TensorImpl* p = top.first->parents[top.second++].get();
            if (visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(top.first);
            stack.pop_back();
        }
    }
    for (size_t i = 0; i < order.size(); ++i)
        for (double v : order[i]->data)
            if (!std::isfinite(v))
                throw std::runtime_error("non-finite intermediate at op index " + std::to_string(i) +
                                         " (" + order[i]->op + ")");
    throw std::runtime_error("non-finite output with finite intermediates");
}

double check_one(const std::function<Tensor()>& f, const std::vector<double>& ad_grad,
                 Tensor param, int64_t idx, double eps) {
    double* pd = param.data();
    const double orig = pd[idx];
    pd[idx] = orig + eps;
    const double fp = f().item();
    pd[idx] = orig - eps;
    const double fm = f().item();
    pd[idx] = orig;
    const double cd = (fp - fm) / (2.0 * eps);
    const double a = idx < static_cast<int64_t>(ad_grad.size()) ? ad_grad[static_cast<size_t>(idx)] : 0.0;
    return std::fabs(a - cd) / (std::fabs(cd) + 1e-8);
}

std::vector<std::vector<double>> autodiff_grads(const std::function<Tensor()>& f,
                                                const std::vector<Tensor>& params) {
    for (auto p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    Tensor out = f();
    if (!out.all_finite()) report_non_finite(out);
    out.backward();
    std::vector<std::vector<double>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) {
        if (p.grad().empty())
            grads.emplace_back(static_cast<size_t>(p.numel()), 0.0);
        else
            grads.push_back(p.grad());
    }
    return grads;
}

} // namespace

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps) {
    auto grads = autodiff_grads(f, params);
    double worst = 0.0;
    for (size_t p = 0; p < params.size(); ++p)
        for (int64_t i = 0; i < params[p].numel(); ++i)
            worst = std::max(worst, check_one(f, grads[p], params[p], i, eps));
    return worst;
}

double grad_check_sampled(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                          int n_probes, double eps, Rng& rng) {
    auto grads = autodiff_grads(f, params);
    int64_t total = 0;
    for (const auto& p : params) total += p.numel();
    double worst = 0.0;
    for (int probe = 0; probe < n_probes; ++probe) {
        int64_t flat = static_cast<int64_t>(rng.next_below(static_cast<uint64_t>(total)));
        size_t pi = 0;
        while (flat >= params[pi].numel()) {
            flat -= params[pi].numel();
            ++pi;
        }
        worst = std::max(worst, check_one(f, grads[pi], params[pi], flat, eps));
    }
    return worst;
}

// ---- "TPGT" container ----------------------------------------------------------------

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}
uint32_t get_u32(const uint8_t* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}
uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

constexpr uint32_t kTensorVersion = 1;

} // namespace

void write_tensor_bytes(std::vector<uint8_t>& out, const Tensor& t) {
    out.push_back('T');
    out.push_back('P');
    out.push_back('G');
    out.push_back('T');
    put_u32(out, kTensorVersion);
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u64(out, static_cast<uint64_t>(t.dim(i)));
    for (int64_t i = 0; i < t.numel(); ++i) put_u64(out, std::bit_cast<uint64_t>(t.data()[i]));
}

Tensor read_tensor_bytes(const uint8_t* bytes, size_t size, size_t& offset) {
    auto need = [&](size_t n) {
        if (offset + n > size) throw std::runtime_error("truncated tensor record");
    };
    need(12);
    if (std::memcmp(bytes + offset, "TPGT", 4) != 0) throw std::runtime_error("bad tensor magic");
    offset += 4;
    const uint32_t version = get_u32(bytes + offset);
    offset += 4;
    if (version != kTensorVersion) throw std::runtime_error("unsupported tensor version " + std::to_string(version));
    const uint32_t rank = get_u32(bytes + offset);
    offset += 4;
    Shape shape(rank);
    need(8 * rank);
    for (uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<int64_t>(get_u64(bytes + offset));
        offset += 8;
    }
    const int64_t n = shape_numel(shape);
    need(static_cast<size_t>(8 * n));
    std::vector<double> data(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        data[static_cast<size_t>(i)] = std::bit_cast<double>(get_u64(bytes + offset));
        offset += 8;
    }
    return Tensor::from(shape, std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::vector<uint8_t> bytes;
    write_tensor_bytes(bytes, t);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    size_t offset = 0;
    return read_tensor_bytes(bytes.data(), bytes.size(), offset);
}

} // namespace tpg
