#include "triqdef/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>

#include "triqdef/error.hpp"

namespace triqdef::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
    throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const std::string& why) {
    throw ShapeError(op + ": shape " + shape_str(a) + " " + why);
}

Shape broadcast_shape(const std::string& op, const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) shape_fail(op, a, b);
        out[i] = std::max(da, db);
    }
    return out;
}

// Strides of `small` laid against `big` (right aligned), zero on broadcast axes.
std::vector<std::size_t> aligned_strides(const Shape& small, const Shape& big) {
    std::vector<std::size_t> st(big.size(), 0);
    std::size_t s = 1;
    for (std::size_t i = small.size(); i-- > 0;) {
        const std::size_t bi = i + big.size() - small.size();
        st[bi] = small[i] == 1 ? 0 : s;
        s *= small[i];
    }
    return st;
}

bool broadcastable_to(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    for (std::size_t i = 0; i < small.size(); ++i) {
        const std::size_t d = small[small.size() - 1 - i];
        const std::size_t D = big[big.size() - 1 - i];
        if (d != D && d != 1) return false;
    }
    return true;
}

// Visits every index of `big`, passing (big flat index, small flat index).
template <typename F>
void for_each_broadcast(const Shape& small, const Shape& big, F&& f) {
    const auto st = aligned_strides(small, big);
    const std::size_t n = shape_numel(big);
    const std::size_t r = big.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
        f(i, off);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            off += st[d];
            if (idx[d] < big[d]) break;
            off -= st[d] * idx[d];
            idx[d] = 0;
        }
    }
}

Tensor expand_kernel(const Tensor& a, const Shape& shape) {
    std::vector<double> out(shape_numel(shape));
    const double* src = a.data();
    for_each_broadcast(a.shape(), shape, [&](std::size_t i, std::size_t j) { out[i] = src[j]; });
    return Tensor(shape, std::move(out));
}

Tensor sum_to_kernel(const Tensor& a, const Shape& shape) {
    std::vector<double> out(shape_numel(shape), 0.0);
    const double* src = a.data();
    for_each_broadcast(shape, a.shape(), [&](std::size_t i, std::size_t j) { out[j] += src[i]; });
    return Tensor(shape, std::move(out));
}

Tensor map_unary(const Tensor& a, const std::function<double(double)>& f) {
    std::vector<double> out(a.size());
    const double* p = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(p[i]);
    return Tensor(a.shape(), std::move(out));
}

// ---------------------------------------------------------------- unary ops

using UnaryBackward = std::function<Var(const Var& x, const Var& y, const Var& g)>;

class UnaryOp final : public Op {
public:
    UnaryOp(std::string name, std::function<double(double)> f, UnaryBackward b)
        : name_(std::move(name)), f_(std::move(f)), b_(std::move(b)) {}
    std::string_view name() const override { return name_; }
    Tensor forward(std::span<const Tensor> in) const override { return map_unary(in[0], f_); }
    std::vector<Var> backward(const Var& y, const Var& g, std::span<const Var> in,
                              const std::vector<bool>&) const override {
        return {b_(in[0], y, g)};
    }

private:
    std::string name_;
    std::function<double(double)> f_;
    UnaryBackward b_;
};

Var unary(std::string name, const Var& a, std::function<double(double)> f, UnaryBackward b) {
    return ad::apply(std::make_shared<UnaryOp>(std::move(name), std::move(f), std::move(b)), {a});
}

Var mask_from(const Var& x, const std::function<double(double)>& f) { return constant(map_unary(x.value(), f)); }

// --------------------------------------------------------------- binary ops

enum class BinKind { add, sub, mul, div, atan2 };

class BinaryOp final : public Op {
public:
    explicit BinaryOp(BinKind k) : k_(k) {}
    std::string_view name() const override {
        switch (k_) {
        case BinKind::add: return "add";
        case BinKind::sub: return "sub";
        case BinKind::mul: return "mul";
        case BinKind::div: return "div";
        case BinKind::atan2: return "atan2";
        }
        return "binary";
    }
    Tensor forward(std::span<const Tensor> in) const override {
        const Tensor& a = in[0];
        const Tensor& b = in[1];
        std::vector<double> out(a.size());
        const double* pa = a.data();
        const double* pb = b.data();
        const std::size_t n = out.size();
        switch (k_) {
        case BinKind::add: for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] + pb[i]; break;
        case BinKind::sub: for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] - pb[i]; break;
        case BinKind::mul: for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] * pb[i]; break;
        case BinKind::div: for (std::size_t i = 0; i < n; ++i) out[i] = pa[i] / pb[i]; break;
        case BinKind::atan2: for (std::size_t i = 0; i < n; ++i) out[i] = std::atan2(pa[i], pb[i]); break;
        }
        return Tensor(a.shape(), std::move(out));
    }
    std::vector<Var> backward(const Var& y, const Var& g, std::span<const Var> in,
                              const std::vector<bool>& needs) const override {
        const Var& a = in[0];
        const Var& b = in[1];
        std::vector<Var> r(2);
        switch (k_) {
        case BinKind::add:
            r = {g, g};
            break;
        case BinKind::sub:
            r[0] = g;
            if (needs[1]) r[1] = neg(g);
            break;
        case BinKind::mul:
            if (needs[0]) r[0] = mul(g, b);
            if (needs[1]) r[1] = mul(g, a);
            break;
        case BinKind::div:
            if (needs[0]) r[0] = div(g, b);
            if (needs[1]) r[1] = neg(div(mul(g, y), b));
            break;
        case BinKind::atan2: {
            // in[0] = numerator (y coordinate), in[1] = denominator (x coordinate)
            // A tiny floor makes the derivative at the origin 0 instead of NaN.
            const Var r2 = add_scalar(add(square(a), square(b)), 1e-300);
            if (needs[0]) r[0] = div(mul(g, b), r2);
            if (needs[1]) r[1] = neg(div(mul(g, a), r2));
            break;
        }
        }
        return r;
    }

private:
    BinKind k_;
};

Var binary(BinKind k, const char* name, const Var& a, const Var& b) {
    if (a.shape() == b.shape()) return ad::apply(std::make_shared<BinaryOp>(k), {a, b});
    const Shape s = broadcast_shape(name, a.shape(), b.shape());
    const Var ea = a.shape() == s ? a : expand(a, s);
    const Var eb = b.shape() == s ? b : expand(b, s);
    return ad::apply(std::make_shared<BinaryOp>(k), {ea, eb});
}

// ------------------------------------------------------- reductions / shape

class SumAllOp final : public Op {
public:
    std::string_view name() const override { return "sum"; }
    Tensor forward(std::span<const Tensor> in) const override {
        double s = 0.0;
        for (double v : in[0].values()) s += v;
        return Tensor::scalar(s);
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>&) const override {
        return {expand(g, in[0].shape())};
    }
};

class SumToOp final : public Op {
public:
    explicit SumToOp(Shape s) : shape_(std::move(s)) {}
    std::string_view name() const override { return "sum_to"; }
    Tensor forward(std::span<const Tensor> in) const override { return sum_to_kernel(in[0], shape_); }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>&) const override {
        return {expand(g, in[0].shape())};
    }

private:
    Shape shape_;
};

class ExpandOp final : public Op {
public:
    explicit ExpandOp(Shape s) : shape_(std::move(s)) {}
    std::string_view name() const override { return "expand"; }
    Tensor forward(std::span<const Tensor> in) const override { return expand_kernel(in[0], shape_); }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>&) const override {
        return {sum_to(g, in[0].shape())};
    }

private:
    Shape shape_;
};

class ReshapeOp final : public Op {
public:
    explicit ReshapeOp(Shape s) : shape_(std::move(s)) {}
    std::string_view name() const override { return "reshape"; }
    Tensor forward(std::span<const Tensor> in) const override { return in[0].reshaped(shape_); }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>&) const override {
        return {reshape(g, in[0].shape())};
    }

private:
    Shape shape_;
};

// outer = prod(shape[:axis]), inner = prod(shape[axis+1:])
void axis_split(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

class SliceOp final : public Op {
public:
    SliceOp(std::size_t axis, std::size_t start, std::size_t len) : axis_(axis), start_(start), len_(len) {}
    std::string_view name() const override { return "slice"; }
    Tensor forward(std::span<const Tensor> in) const override {
        const Shape& s = in[0].shape();
        std::size_t outer, inner;
        axis_split(s, axis_, outer, inner);
        Shape os = s;
        os[axis_] = len_;
        std::vector<double> out(shape_numel(os));
        const double* p = in[0].data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(p + (o * s[axis_] + start_) * inner, len_ * inner, out.data() + o * len_ * inner);
        }
        return Tensor(os, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>&) const override {
        return {detail::pad_slice(g, axis_, start_, in[0].shape()[axis_])};
    }

private:
    std::size_t axis_, start_, len_;
};

class PadSliceOp final : public Op {
public:
    PadSliceOp(std::size_t axis, std::size_t start, std::size_t full) : axis_(axis), start_(start), full_(full) {}
    std::string_view name() const override { return "pad_slice"; }
    Tensor forward(std::span<const Tensor> in) const override {
        const Shape& s = in[0].shape();
        std::size_t outer, inner;
        axis_split(s, axis_, outer, inner);
        Shape os = s;
        os[axis_] = full_;
        std::vector<double> out(shape_numel(os), 0.0);
        const double* p = in[0].data();
        const std::size_t len = s[axis_];
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(p + o * len * inner, len * inner, out.data() + (o * full_ + start_) * inner);
        }
        return Tensor(os, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>&) const override {
        return {slice(g, axis_, start_, in[0].shape()[axis_])};
    }

private:
    std::size_t axis_, start_, full_;
};

class ConcatOp final : public Op {
public:
    explicit ConcatOp(std::size_t axis) : axis_(axis) {}
    std::string_view name() const override { return "concat"; }
    Tensor forward(std::span<const Tensor> in) const override {
        Shape os = in[0].shape();
        std::size_t total = 0;
        for (const auto& t : in) total += t.shape()[axis_];
        os[axis_] = total;
        std::size_t outer, inner;
        axis_split(os, axis_, outer, inner);
        std::vector<double> out(shape_numel(os));
        for (std::size_t o = 0; o < outer; ++o) {
            double* dst = out.data() + o * total * inner;
            for (const auto& t : in) {
                const std::size_t chunk = t.shape()[axis_] * inner;
                std::copy_n(t.data() + o * chunk, chunk, dst);
                dst += chunk;
            }
        }
        return Tensor(os, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>& needs) const override {
        std::vector<Var> r(in.size());
        std::size_t start = 0;
        for (std::size_t i = 0; i < in.size(); ++i) {
            const std::size_t len = in[i].shape()[axis_];
            if (needs[i]) r[i] = slice(g, axis_, start, len);
            start += len;
        }
        return r;
    }

private:
    std::size_t axis_;
};

class TransposeOp final : public Op {
public:
    std::string_view name() const override { return "transpose"; }
    Tensor forward(std::span<const Tensor> in) const override {
        const std::size_t r = in[0].shape()[0], c = in[0].shape()[1];
        std::vector<double> out(r * c);
        const double* p = in[0].data();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[j * r + i] = p[i * c + j];
        return Tensor({c, r}, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var>, const std::vector<bool>&) const override {
        return {transpose(g)};
    }
};

class MatmulOp final : public Op {
public:
    std::string_view name() const override { return "matmul"; }
    Tensor forward(std::span<const Tensor> in) const override {
        const std::size_t n = in[0].shape()[0], k = in[0].shape()[1], m = in[1].shape()[1];
        std::vector<double> out(n * m);
        MapMat(out.data(), n, m).noalias() = ConstMapMat(in[0].data(), n, k) * ConstMapMat(in[1].data(), k, m);
        return Tensor({n, m}, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>& needs) const override {
        std::vector<Var> r(2);
        if (needs[0]) r[0] = matmul(g, transpose(in[1]));
        if (needs[1]) r[1] = matmul(transpose(in[0]), g);
        return r;
    }
};

// ------------------------------------------------------------- convolution

struct ConvGeom {
    std::size_t n, c, h, w, o, kh, kw, ho, wo, stride, pad;
    std::size_t ckk() const { return c * kh * kw; }
    std::size_t hw_out() const { return ho * wo; }
};

ConvGeom conv_geom(const Shape& x, const Shape& wt, Conv2dOptions opt) {
    if (x.size() != 4 || wt.size() != 4) shape_fail("conv2d", x, wt);
    if (x[1] != wt[1]) shape_fail("conv2d", x, wt);
    if (opt.stride == 0) throw InvalidArgument("conv2d: stride must be positive");
    const std::size_t hp = x[2] + 2 * opt.padding, wp = x[3] + 2 * opt.padding;
    if (hp < wt[2] || wp < wt[3]) shape_fail("conv2d", x, wt);
    ConvGeom g{x[0], x[1], x[2], x[3], wt[0], wt[2], wt[3], 0, 0, opt.stride, opt.padding};
    g.ho = (hp - g.kh) / g.stride + 1;
    g.wo = (wp - g.kw) / g.stride + 1;
    return g;
}

void im2col(const ConvGeom& g, const double* x, double* col) {
    const std::size_t hw = g.hw_out();
    for (std::size_t c = 0; c < g.c; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                double* row = col + ((c * g.kh + ki) * g.kw + kj) * hw;
                for (std::size_t oi = 0; oi < g.ho; ++oi) {
                    const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
                    double* dst = row + oi * g.wo;
                    if (ii < 0 || ii >= static_cast<long>(g.h)) {
                        std::fill_n(dst, g.wo, 0.0);
                        continue;
                    }
                    const double* src = x + (c * g.h + static_cast<std::size_t>(ii)) * g.w;
                    for (std::size_t oj = 0; oj < g.wo; ++oj) {
                        const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
                        dst[oj] = (jj < 0 || jj >= static_cast<long>(g.w)) ? 0.0 : src[jj];
                    }
                }
            }
        }
    }
}

void col2im(const ConvGeom& g, const double* col, double* x) {
    const std::size_t hw = g.hw_out();
    for (std::size_t c = 0; c < g.c; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const double* row = col + ((c * g.kh + ki) * g.kw + kj) * hw;
                for (std::size_t oi = 0; oi < g.ho; ++oi) {
                    const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
                    if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
                    double* dst = x + (c * g.h + static_cast<std::size_t>(ii)) * g.w;
                    const double* src = row + oi * g.wo;
                    for (std::size_t oj = 0; oj < g.wo; ++oj) {
                        const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
                        if (jj >= 0 && jj < static_cast<long>(g.w)) dst[jj] += src[oj];
                    }
                }
            }
        }
    }
}

Tensor conv_forward_kernel(const Tensor& x, const Tensor& w, Conv2dOptions opt) {
    const ConvGeom g = conv_geom(x.shape(), w.shape(), opt);
    std::vector<double> out(g.n * g.o * g.hw_out());
    std::vector<double> col(g.ckk() * g.hw_out());
    const ConstMapMat wm(w.data(), g.o, g.ckk());
    for (std::size_t n = 0; n < g.n; ++n) {
        im2col(g, x.data() + n * g.c * g.h * g.w, col.data());
        MapMat(out.data() + n * g.o * g.hw_out(), g.o, g.hw_out()).noalias() =
            wm * ConstMapMat(col.data(), g.ckk(), g.hw_out());
    }
    return Tensor({g.n, g.o, g.ho, g.wo}, std::move(out));
}

Tensor conv_input_grad_kernel(const Tensor& gout, const Tensor& w, const Shape& xs, Conv2dOptions opt) {
    const ConvGeom g = conv_geom(xs, w.shape(), opt);
    if (gout.shape() != Shape{g.n, g.o, g.ho, g.wo}) shape_fail("conv2d_input_grad", gout.shape(), xs);
    std::vector<double> out(shape_numel(xs), 0.0);
    std::vector<double> col(g.ckk() * g.hw_out());
    const ConstMapMat wm(w.data(), g.o, g.ckk());
    for (std::size_t n = 0; n < g.n; ++n) {
        MapMat(col.data(), g.ckk(), g.hw_out()).noalias() =
            wm.transpose() * ConstMapMat(gout.data() + n * g.o * g.hw_out(), g.o, g.hw_out());
        col2im(g, col.data(), out.data() + n * g.c * g.h * g.w);
    }
    return Tensor(xs, std::move(out));
}

Tensor conv_weight_grad_kernel(const Tensor& x, const Tensor& gout, const Shape& ws, Conv2dOptions opt) {
    const ConvGeom g = conv_geom(x.shape(), ws, opt);
    if (gout.shape() != Shape{g.n, g.o, g.ho, g.wo}) shape_fail("conv2d_weight_grad", gout.shape(), x.shape());
    std::vector<double> out(shape_numel(ws), 0.0);
    std::vector<double> col(g.ckk() * g.hw_out());
    MapMat wm(out.data(), g.o, g.ckk());
    for (std::size_t n = 0; n < g.n; ++n) {
        im2col(g, x.data() + n * g.c * g.h * g.w, col.data());
        wm.noalias() += ConstMapMat(gout.data() + n * g.o * g.hw_out(), g.o, g.hw_out()) *
                        ConstMapMat(col.data(), g.ckk(), g.hw_out()).transpose();
    }
    return Tensor(ws, std::move(out));
}

class Conv2dOp final : public Op {
public:
    explicit Conv2dOp(Conv2dOptions o) : opt_(o) {}
    std::string_view name() const override { return "conv2d"; }
    Tensor forward(std::span<const Tensor> in) const override { return conv_forward_kernel(in[0], in[1], opt_); }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>& needs) const override {
        std::vector<Var> r(2);
        if (needs[0]) r[0] = detail::conv2d_input_grad(g, in[1], in[0].shape(), opt_);
        if (needs[1]) r[1] = detail::conv2d_weight_grad(in[0], g, in[1].shape(), opt_);
        return r;
    }

private:
    Conv2dOptions opt_;
};

// inputs: grad_out, w
class Conv2dInputGradOp final : public Op {
public:
    Conv2dInputGradOp(Shape xs, Conv2dOptions o) : xs_(std::move(xs)), opt_(o) {}
    std::string_view name() const override { return "conv2d_input_grad"; }
    Tensor forward(std::span<const Tensor> in) const override {
        return conv_input_grad_kernel(in[0], in[1], xs_, opt_);
    }
    std::vector<Var> backward(const Var&, const Var& gg, std::span<const Var> in,
                              const std::vector<bool>& needs) const override {
        std::vector<Var> r(2);
        if (needs[0]) r[0] = conv2d(gg, in[1], opt_);
        if (needs[1]) r[1] = detail::conv2d_weight_grad(gg, in[0], in[1].shape(), opt_);
        return r;
    }

private:
    Shape xs_;
    Conv2dOptions opt_;
};

// inputs: x, grad_out
class Conv2dWeightGradOp final : public Op {
public:
    Conv2dWeightGradOp(Shape ws, Conv2dOptions o) : ws_(std::move(ws)), opt_(o) {}
    std::string_view name() const override { return "conv2d_weight_grad"; }
    Tensor forward(std::span<const Tensor> in) const override {
        return conv_weight_grad_kernel(in[0], in[1], ws_, opt_);
    }
    std::vector<Var> backward(const Var&, const Var& gw, std::span<const Var> in,
                              const std::vector<bool>& needs) const override {
        std::vector<Var> r(2);
        if (needs[0]) r[0] = detail::conv2d_input_grad(in[1], gw, in[0].shape(), opt_);
        if (needs[1]) r[1] = conv2d(in[0], gw, opt_);
        return r;
    }

private:
    Shape ws_;
    Conv2dOptions opt_;
};

// ----------------------------------------------------------------- pooling

class GatherOp final : public Op {
public:
    GatherOp(std::vector<std::size_t> idx, Shape out) : idx_(std::move(idx)), out_(std::move(out)) {}
    std::string_view name() const override { return "gather"; }
    Tensor forward(std::span<const Tensor> in) const override {
        std::vector<double> out(idx_.size());
        const double* p = in[0].data();
        for (std::size_t i = 0; i < idx_.size(); ++i) out[i] = p[idx_[i]];
        return Tensor(out_, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>&) const override {
        return {detail::scatter_add(g, idx_, in[0].shape())};
    }

private:
    std::vector<std::size_t> idx_;
    Shape out_;
};

class ScatterAddOp final : public Op {
public:
    ScatterAddOp(std::vector<std::size_t> idx, Shape out) : idx_(std::move(idx)), out_(std::move(out)) {}
    std::string_view name() const override { return "scatter_add"; }
    Tensor forward(std::span<const Tensor> in) const override {
        std::vector<double> out(shape_numel(out_), 0.0);
        const double* p = in[0].data();
        for (std::size_t i = 0; i < idx_.size(); ++i) out[idx_[i]] += p[i];
        return Tensor(out_, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>&) const override {
        return {detail::gather(g, idx_, in[0].shape())};
    }

private:
    std::vector<std::size_t> idx_;
    Shape out_;
};

class SumPoolOp final : public Op {
public:
    explicit SumPoolOp(std::size_t k) : k_(k) {}
    std::string_view name() const override { return "sum_pool2d"; }
    Tensor forward(std::span<const Tensor> in) const override {
        const Shape& s = in[0].shape();
        const std::size_t nc = s[0] * s[1], h = s[2], w = s[3], ho = h / k_, wo = w / k_;
        std::vector<double> out(nc * ho * wo, 0.0);
        const double* p = in[0].data();
        for (std::size_t c = 0; c < nc; ++c)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) out[(c * ho + i / k_) * wo + j / k_] += p[(c * h + i) * w + j];
        return Tensor({s[0], s[1], ho, wo}, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var>, const std::vector<bool>&) const override {
        return {detail::upsample_nearest(g, k_)};
    }

private:
    std::size_t k_;
};

class UpsampleOp final : public Op {
public:
    explicit UpsampleOp(std::size_t k) : k_(k) {}
    std::string_view name() const override { return "upsample_nearest"; }
    Tensor forward(std::span<const Tensor> in) const override {
        const Shape& s = in[0].shape();
        const std::size_t nc = s[0] * s[1], h = s[2], w = s[3], ho = h * k_, wo = w * k_;
        std::vector<double> out(nc * ho * wo);
        const double* p = in[0].data();
        for (std::size_t c = 0; c < nc; ++c)
            for (std::size_t i = 0; i < ho; ++i)
                for (std::size_t j = 0; j < wo; ++j) out[(c * ho + i) * wo + j] = p[(c * h + i / k_) * w + j / k_];
        return Tensor({s[0], s[1], ho, wo}, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var>, const std::vector<bool>&) const override {
        return {sum_pool2d(g, k_)};
    }

private:
    std::size_t k_;
};

class PadReplicateOp final : public Op {
public:
    explicit PadReplicateOp(std::size_t p) : p_(p) {}
    std::string_view name() const override { return "pad_replicate"; }
    Tensor forward(std::span<const Tensor> in) const override {
        const Shape& s = in[0].shape();
        const std::size_t nc = s[0] * s[1], h = s[2], w = s[3], ho = h + 2 * p_, wo = w + 2 * p_;
        std::vector<double> out(nc * ho * wo);
        const double* src = in[0].data();
        for (std::size_t c = 0; c < nc; ++c)
            for (std::size_t i = 0; i < ho; ++i) {
                const std::size_t si = std::min(h - 1, i < p_ ? 0 : i - p_);
                for (std::size_t j = 0; j < wo; ++j) {
                    const std::size_t sj = std::min(w - 1, j < p_ ? 0 : j - p_);
                    out[(c * ho + i) * wo + j] = src[(c * h + si) * w + sj];
                }
            }
        return Tensor({s[0], s[1], ho, wo}, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>&) const override {
        return {detail::pad_replicate_adjoint(g, p_, in[0].shape())};
    }

private:
    std::size_t p_;
};

class PadReplicateAdjointOp final : public Op {
public:
    PadReplicateAdjointOp(std::size_t p, Shape s) : p_(p), s_(std::move(s)) {}
    std::string_view name() const override { return "pad_replicate_adjoint"; }
    Tensor forward(std::span<const Tensor> in) const override {
        const std::size_t nc = s_[0] * s_[1], h = s_[2], w = s_[3], ho = h + 2 * p_, wo = w + 2 * p_;
        std::vector<double> out(nc * h * w, 0.0);
        const double* src = in[0].data();
        for (std::size_t c = 0; c < nc; ++c)
            for (std::size_t i = 0; i < ho; ++i) {
                const std::size_t si = std::min(h - 1, i < p_ ? 0 : i - p_);
                for (std::size_t j = 0; j < wo; ++j) {
                    const std::size_t sj = std::min(w - 1, j < p_ ? 0 : j - p_);
                    out[(c * h + si) * w + sj] += src[(c * ho + i) * wo + j];
                }
            }
        return Tensor(s_, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var>, const std::vector<bool>&) const override {
        return {pad_replicate(g, p_)};
    }

private:
    std::size_t p_;
    Shape s_;
};

// ------------------------------------------------------------ classification

Tensor softmax_kernel(const Tensor& z) {
    const std::size_t n = z.shape()[0], k = z.shape()[1];
    std::vector<double> out(n * k);
    const double* p = z.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = p + i * k;
        const double m = *std::max_element(row, row + k);
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) s += (out[i * k + j] = std::exp(row[j] - m));
        for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= s;
    }
    return Tensor(z.shape(), std::move(out));
}

class SoftmaxOp final : public Op {
public:
    std::string_view name() const override { return "softmax"; }
    Tensor forward(std::span<const Tensor> in) const override { return softmax_kernel(in[0]); }
    std::vector<Var> backward(const Var& y, const Var& g, std::span<const Var>, const std::vector<bool>&) const override {
        const Shape& s = y.shape();
        const Var dot = sum_to(mul(g, y), {s[0], 1});
        return {mul(y, sub(g, dot))};
    }
};

class SoftmaxCrossEntropyOp final : public Op {
public:
    explicit SoftmaxCrossEntropyOp(Tensor t) : targets_(std::move(t)) {
        const std::size_t n = targets_.shape()[0], k = targets_.shape()[1];
        std::vector<double> rs(n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) rs[i] += targets_[i * k + j];
        row_sums_ = Tensor({n, 1}, std::move(rs));
    }
    std::string_view name() const override { return "softmax_cross_entropy"; }
    Tensor forward(std::span<const Tensor> in) const override {
        const std::size_t n = in[0].shape()[0], k = in[0].shape()[1];
        std::vector<double> out(n);
        const double* p = in[0].data();
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = p + i * k;
            const double m = *std::max_element(row, row + k);
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
            const double lse = m + std::log(s);
            double l = 0.0;
            for (std::size_t j = 0; j < k; ++j) l += targets_[i * k + j] * (lse - row[j]);
            out[i] = l;
        }
        return Tensor({n}, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>&) const override {
        const Shape& s = in[0].shape();
        const Var gcol = reshape(g, {s[0], 1});
        const Var d = sub(mul(softmax(in[0]), constant(row_sums_)), constant(targets_));
        return {mul(d, gcol)};
    }

private:
    Tensor targets_;
    Tensor row_sums_;
};

// ------------------------------------------------------------------ patches

void check_windows(const Shape& xs, const Shape& ps, const std::vector<std::size_t>& rows,
                   const std::vector<std::size_t>& cols) {
    if (xs.size() != 4 || ps.size() != 3 || ps[0] != xs[1]) shape_fail("paste_patch", xs, ps);
    if (rows.size() != xs[0] || cols.size() != xs[0]) {
        throw ShapeError("paste_patch: need one location per image, batch " + std::to_string(xs[0]));
    }
    for (std::size_t n = 0; n < xs[0]; ++n) {
        if (rows[n] + ps[1] > xs[2] || cols[n] + ps[2] > xs[3]) {
            throw ShapeError("paste_patch: patch " + shape_str(ps) + " at (" + std::to_string(rows[n]) + "," +
                             std::to_string(cols[n]) + ") exceeds image " + shape_str(xs));
        }
    }
}

class PastePatchOp final : public Op {
public:
    PastePatchOp(std::vector<std::size_t> r, std::vector<std::size_t> c) : rows_(std::move(r)), cols_(std::move(c)) {}
    std::string_view name() const override { return "paste_patch"; }
    Tensor forward(std::span<const Tensor> in) const override {
        const Shape& xs = in[0].shape();
        const Shape& ps = in[1].shape();
        std::vector<double> out = in[0].to_vector();
        const double* p = in[1].data();
        const std::size_t C = xs[1], H = xs[2], W = xs[3];
        for (std::size_t n = 0; n < xs[0]; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < ps[1]; ++i)
                    for (std::size_t j = 0; j < ps[2]; ++j)
                        out[((n * C + c) * H + rows_[n] + i) * W + cols_[n] + j] = p[(c * ps[1] + i) * ps[2] + j];
        return Tensor(xs, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>& needs) const override {
        std::vector<Var> r(2);
        if (needs[0]) {
            const Shape& xs = in[0].shape();
            const Shape& ps = in[1].shape();
            std::vector<double> keep(shape_numel(xs), 1.0);
            for (std::size_t n = 0; n < xs[0]; ++n)
                for (std::size_t c = 0; c < xs[1]; ++c)
                    for (std::size_t i = 0; i < ps[1]; ++i)
                        for (std::size_t j = 0; j < ps[2]; ++j)
                            keep[((n * xs[1] + c) * xs[2] + rows_[n] + i) * xs[3] + cols_[n] + j] = 0.0;
            r[0] = mul(g, constant(Tensor(xs, std::move(keep))));
        }
        if (needs[1]) r[1] = detail::crop_patch_sum(g, in[1].shape(), rows_, cols_);
        return r;
    }

private:
    std::vector<std::size_t> rows_, cols_;
};

class CropPatchSumOp final : public Op {
public:
    CropPatchSumOp(Shape ps, std::vector<std::size_t> r, std::vector<std::size_t> c)
        : ps_(std::move(ps)), rows_(std::move(r)), cols_(std::move(c)) {}
    std::string_view name() const override { return "crop_patch_sum"; }
    Tensor forward(std::span<const Tensor> in) const override {
        const Shape& xs = in[0].shape();
        std::vector<double> out(shape_numel(ps_), 0.0);
        const double* g = in[0].data();
        for (std::size_t n = 0; n < xs[0]; ++n)
            for (std::size_t c = 0; c < xs[1]; ++c)
                for (std::size_t i = 0; i < ps_[1]; ++i)
                    for (std::size_t j = 0; j < ps_[2]; ++j)
                        out[(c * ps_[1] + i) * ps_[2] + j] += g[((n * xs[1] + c) * xs[2] + rows_[n] + i) * xs[3] + cols_[n] + j];
        return Tensor(ps_, std::move(out));
    }
    std::vector<Var> backward(const Var&, const Var& g, std::span<const Var> in,
                              const std::vector<bool>&) const override {
        return {paste_patch(constant(Tensor::zeros(in[0].shape())), g, rows_, cols_)};
    }

private:
    Shape ps_;
    std::vector<std::size_t> rows_, cols_;
};

void require_rank(const char* op, const Var& a, std::size_t r) {
    if (a.shape().size() != r) shape_fail(op, a.shape(), "must have rank " + std::to_string(r));
}

} // namespace

// =================================================================== public

Var add(const Var& a, const Var& b) { return binary(BinKind::add, "add", a, b); }
Var sub(const Var& a, const Var& b) { return binary(BinKind::sub, "sub", a, b); }
Var mul(const Var& a, const Var& b) { return binary(BinKind::mul, "mul", a, b); }
Var div(const Var& a, const Var& b) { return binary(BinKind::div, "div", a, b); }
Var atan2(const Var& y, const Var& x) { return binary(BinKind::atan2, "atan2", y, x); }

Var neg(const Var& a) {
    return unary("neg", a, [](double v) { return -v; }, [](const Var&, const Var&, const Var& g) { return neg(g); });
}

Var add_scalar(const Var& a, double s) {
    return unary("add_scalar", a, [s](double v) { return v + s; },
                 [](const Var&, const Var&, const Var& g) { return g; });
}

Var mul_scalar(const Var& a, double s) {
    return unary("mul_scalar", a, [s](double v) { return v * s; },
                 [s](const Var&, const Var&, const Var& g) { return mul_scalar(g, s); });
}

Var exp(const Var& a) {
    return unary("exp", a, [](double v) { return std::exp(v); },
                 [](const Var&, const Var& y, const Var& g) { return mul(g, y); });
}

Var log(const Var& a) {
    return unary("log", a, [](double v) { return std::log(v); },
                 [](const Var& x, const Var&, const Var& g) { return div(g, x); });
}

Var sqrt(const Var& a) {
    return unary("sqrt", a, [](double v) { return std::sqrt(v); },
                 [](const Var&, const Var& y, const Var& g) { return div(mul_scalar(g, 0.5), y); });
}

Var abs(const Var& a) {
    return unary("abs", a, [](double v) { return std::fabs(v); }, [](const Var& x, const Var&, const Var& g) {
        return mul(g, mask_from(x, [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }));
    });
}

Var square(const Var& a) {
    return unary("square", a, [](double v) { return v * v; },
                 [](const Var& x, const Var&, const Var& g) { return mul(g, mul_scalar(x, 2.0)); });
}

Var sigmoid(const Var& a) {
    return unary("sigmoid", a,
                 [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
                 [](const Var&, const Var& y, const Var& g) { return mul(g, sub(y, square(y))); });
}

Var relu(const Var& a) {
    return unary("relu", a, [](double v) { return v > 0 ? v : 0.0; }, [](const Var& x, const Var&, const Var& g) {
        return mul(g, mask_from(x, [](double v) { return v > 0 ? 1.0 : 0.0; }));
    });
}

Var clip(const Var& a, double lo, double hi) {
    if (lo > hi) throw InvalidArgument("clip: lo > hi");
    return unary("clip", a, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                 [lo, hi](const Var& x, const Var&, const Var& g) {
                     return mul(g, mask_from(x, [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; }));
                 });
}

Var wrap_periodic(const Var& a, double period) {
    return unary("wrap_periodic", a,
                 [period](double v) {
                     double r = std::fmod(v + 0.5 * period, period);
                     if (r < 0) r += period;
                     return r - 0.5 * period;
                 },
                 [](const Var&, const Var&, const Var& g) { return g; });
}

Var sum(const Var& a) { return ad::apply(std::make_shared<SumAllOp>(), {a}); }

Var mean(const Var& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size())); }

Var sum_to(const Var& a, const Shape& shape) {
    if (a.shape() == shape) return a;
    if (!broadcastable_to(shape, a.shape())) shape_fail("sum_to", a.shape(), shape);
    return ad::apply(std::make_shared<SumToOp>(shape), {a});
}

Var expand(const Var& a, const Shape& shape) {
    if (a.shape() == shape) return a;
    if (!broadcastable_to(a.shape(), shape)) shape_fail("expand", a.shape(), shape);
    return ad::apply(std::make_shared<ExpandOp>(shape), {a});
}

Var reshape(const Var& a, Shape shape) {
    if (shape_numel(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
    if (shape == a.shape()) return a;
    return ad::apply(std::make_shared<ReshapeOp>(std::move(shape)), {a});
}

Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length) {
    if (axis >= a.shape().size() || length == 0 || start + length > a.shape()[axis]) {
        shape_fail("slice", a.shape(), "cannot take [" + std::to_string(start) + ", +" + std::to_string(length) +
                                           ") on axis " + std::to_string(axis));
    }
    if (start == 0 && length == a.shape()[axis]) return a;
    return ad::apply(std::make_shared<SliceOp>(axis, start, length), {a});
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw InvalidArgument("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) shape_fail("concat", s0, "has no axis " + std::to_string(axis));
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) shape_fail("concat", s0, s);
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != axis && s[i] != s0[i]) shape_fail("concat", s0, s);
    }
    if (parts.size() == 1) return parts[0];
    return ad::apply(std::make_shared<ConcatOp>(axis), parts);
}

Var transpose(const Var& a) {
    require_rank("transpose", a, 2);
    return ad::apply(std::make_shared<TransposeOp>(), {a});
}

Var matmul(const Var& a, const Var& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        shape_fail("matmul", a.shape(), b.shape());
    }
    return ad::apply(std::make_shared<MatmulOp>(), {a, b});
}

Var conv2d(const Var& x, const Var& w, Conv2dOptions opt) {
    conv_geom(x.shape(), w.shape(), opt);
    return ad::apply(std::make_shared<Conv2dOp>(opt), {x, w});
}

Var max_pool2d(const Var& x, std::size_t k) {
    require_rank("max_pool2d", x, 4);
    const Shape& s = x.shape();
    if (k == 0 || s[2] < k || s[3] < k) shape_fail("max_pool2d", s, "is smaller than window " + std::to_string(k));
    const std::size_t nc = s[0] * s[1], h = s[2], w = s[3], ho = h / k, wo = w / k;
    std::vector<std::size_t> idx(nc * ho * wo);
    const double* p = x.value().data();
    for (std::size_t c = 0; c < nc; ++c)
        for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j) {
                std::size_t best = (c * h + i * k) * w + j * k;
                for (std::size_t a = 0; a < k; ++a)
                    for (std::size_t b = 0; b < k; ++b) {
                        const std::size_t q = (c * h + i * k + a) * w + j * k + b;
                        if (p[q] > p[best]) best = q;
                    }
                idx[(c * ho + i) * wo + j] = best;
            }
    return detail::gather(x, std::move(idx), {s[0], s[1], ho, wo});
}

Var sum_pool2d(const Var& x, std::size_t k) {
    require_rank("sum_pool2d", x, 4);
    if (k == 0 || x.shape()[2] % k || x.shape()[3] % k) {
        shape_fail("sum_pool2d", x.shape(), "is not a multiple of window " + std::to_string(k));
    }
    if (k == 1) return x;
    return ad::apply(std::make_shared<SumPoolOp>(k), {x});
}

Var pad_replicate(const Var& x, std::size_t p) {
    require_rank("pad_replicate", x, 4);
    if (p == 0) return x;
    return ad::apply(std::make_shared<PadReplicateOp>(p), {x});
}

Var softmax(const Var& logits) {
    require_rank("softmax", logits, 2);
    return ad::apply(std::make_shared<SoftmaxOp>(), {logits});
}

Var softmax_cross_entropy(const Var& logits, const Tensor& targets) {
    require_rank("softmax_cross_entropy", logits, 2);
    if (targets.shape() != logits.shape()) shape_fail("softmax_cross_entropy", logits.shape(), targets.shape());
    return ad::apply(std::make_shared<SoftmaxCrossEntropyOp>(targets), {logits});
}

Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
    std::vector<double> out(labels.size() * classes, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
            throw InvalidArgument("one_hot: label " + std::to_string(labels[i]) + " out of range for " +
                                  std::to_string(classes) + " classes");
        }
        out[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
    }
    return Tensor({labels.size(), classes}, std::move(out));
}

Var paste_patch(const Var& x, const Var& patch, const std::vector<std::size_t>& rows,
                const std::vector<std::size_t>& cols) {
    check_windows(x.shape(), patch.shape(), rows, cols);
    return ad::apply(std::make_shared<PastePatchOp>(rows, cols), {x, patch});
}

namespace detail {

Var conv2d_input_grad(const Var& grad_out, const Var& w, const Shape& input_shape, Conv2dOptions opt) {
    return ad::apply(std::make_shared<Conv2dInputGradOp>(input_shape, opt), {grad_out, w});
}

Var conv2d_weight_grad(const Var& x, const Var& grad_out, const Shape& weight_shape, Conv2dOptions opt) {
    return ad::apply(std::make_shared<Conv2dWeightGradOp>(weight_shape, opt), {x, grad_out});
}

Var gather(const Var& a, std::vector<std::size_t> index, Shape out_shape) {
    if (shape_numel(out_shape) != index.size()) shape_fail("gather", a.shape(), out_shape);
    return ad::apply(std::make_shared<GatherOp>(std::move(index), std::move(out_shape)), {a});
}

Var scatter_add(const Var& a, std::vector<std::size_t> index, Shape out_shape) {
    if (a.size() != index.size()) shape_fail("scatter_add", a.shape(), out_shape);
    return ad::apply(std::make_shared<ScatterAddOp>(std::move(index), std::move(out_shape)), {a});
}

Var upsample_nearest(const Var& a, std::size_t k) {
    require_rank("upsample_nearest", a, 4);
    return ad::apply(std::make_shared<UpsampleOp>(k), {a});
}

Var pad_replicate_adjoint(const Var& g, std::size_t p, const Shape& input_shape) {
    return ad::apply(std::make_shared<PadReplicateAdjointOp>(p, input_shape), {g});
}

Var pad_slice(const Var& a, std::size_t axis, std::size_t start, std::size_t full_length) {
    return ad::apply(std::make_shared<PadSliceOp>(axis, start, full_length), {a});
}

Var crop_patch_sum(const Var& g, const Shape& patch_shape, const std::vector<std::size_t>& rows,
                   const std::vector<std::size_t>& cols) {
    check_windows(g.shape(), patch_shape, rows, cols);
    return ad::apply(std::make_shared<CropPatchSumOp>(patch_shape, rows, cols), {g});
}

} // namespace detail

} // namespace triqdef::ad
