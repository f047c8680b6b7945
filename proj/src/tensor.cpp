#include "mtcnn/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace mtcnn {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

[[noreturn]] void shape_fail(const std::string& op, const std::string& what)
{
    throw ShapeError(op + ": " + what);
}

void require_rank(const std::string& op, const Tensor& t, int rank, const char* name)
{
    if (t.rank() != rank) {
        std::ostringstream os;
        os << name << " must be rank " << rank << ", got " << shape_string(t.shape());
        shape_fail(op, os.str());
    }
}

void require_same_shape(const std::string& op, const Tensor& a, const Tensor& b, const char* name)
{
    if (a.shape() != b.shape()) {
        shape_fail(op, std::string(name) + " shape " + shape_string(b.shape()) + " does not match " +
                           shape_string(a.shape()));
    }
}

// Column matrix [C*kh*kw, oh*ow] for one sample.
void im2col(const float* img, int channels, int height, int width, int kh, int kw, int stride,
            int oh, int ow, float* col)
{
    const int cols = oh * ow;
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                float* row = col + static_cast<std::size_t>((c * kh + ky) * kw + kx) * cols;
                for (int y = 0; y < oh; ++y) {
                    const float* src = img + (static_cast<std::size_t>(c) * height + y * stride + ky) * width + kx;
                    float* dst = row + y * ow;
                    if (stride == 1) {
                        std::copy(src, src + ow, dst);
                    } else {
                        for (int x = 0; x < ow; ++x) {
                            dst[x] = src[x * stride];
                        }
                    }
                }
            }
        }
    }
}

void col2im_add(const float* col, int channels, int height, int width, int kh, int kw, int stride,
                int oh, int ow, float* img)
{
    const int cols = oh * ow;
    for (int c = 0; c < channels; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const float* row = col + static_cast<std::size_t>((c * kh + ky) * kw + kx) * cols;
                for (int y = 0; y < oh; ++y) {
                    float* dst = img + (static_cast<std::size_t>(c) * height + y * stride + ky) * width + kx;
                    const float* src = row + y * ow;
                    for (int x = 0; x < ow; ++x) {
                        dst[x * stride] += src[x];
                    }
                }
            }
        }
    }
}

struct ConvGeometry {
    int n, c, h, w, out_c, kh, kw, oh, ow;
};

ConvGeometry check_conv(const std::string& op, const Tensor& input, const Tensor& weights, int stride)
{
    require_rank(op, input, 4, "input");
    require_rank(op, weights, 4, "weights");
    if (stride < 1) {
        shape_fail(op, "stride must be positive");
    }
    ConvGeometry g{};
    g.n = input.dim(0);
    g.c = input.dim(1);
    g.h = input.dim(2);
    g.w = input.dim(3);
    g.out_c = weights.dim(0);
    g.kh = weights.dim(2);
    g.kw = weights.dim(3);
    if (weights.dim(1) != g.c) {
        shape_fail(op, "input channels " + std::to_string(g.c) + " != kernel in_c " +
                           std::to_string(weights.dim(1)));
    }
    if (g.kh > g.h) {
        shape_fail(op, "kernel height " + std::to_string(g.kh) + " exceeds input height " + std::to_string(g.h));
    }
    if (g.kw > g.w) {
        shape_fail(op, "kernel width " + std::to_string(g.kw) + " exceeds input width " + std::to_string(g.w));
    }
    g.oh = conv_output_extent(g.h, g.kh, stride);
    g.ow = conv_output_extent(g.w, g.kw, stride);
    return g;
}

int channel_extent(const Tensor& t)
{
    return t.rank() >= 2 ? t.dim(1) : 1;
}

// Elements per channel block: product of extents after axis 1.
std::size_t inner_extent(const Tensor& t)
{
    std::size_t inner = 1;
    for (int i = 2; i < t.rank(); ++i) {
        inner *= static_cast<std::size_t>(t.dim(i));
    }
    return inner;
}

}  // namespace

std::size_t shape_volume(std::span<const int> shape)
{
    std::size_t v = 1;
    for (int e : shape) {
        v *= static_cast<std::size_t>(e);
    }
    return v;
}

std::string shape_string(std::span<const int> shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(std::vector<int> shape, float fill) : shape_(std::move(shape))
{
    for (int e : shape_) {
        if (e < 1) {
            throw ShapeError("tensor extents must be >= 1, got " + shape_string(shape_));
        }
    }
    data_.assign(shape_volume(shape_), fill);
}

Tensor::Tensor(std::vector<int> shape, std::vector<float> values) : Tensor(std::move(shape))
{
    if (values.size() != data_.size()) {
        throw ShapeError("tensor " + shape_string(shape_) + " needs " + std::to_string(data_.size()) +
                         " values, got " + std::to_string(values.size()));
    }
    std::copy(values.begin(), values.end(), data_.begin());
}

int Tensor::dim(int axis) const
{
    if (axis < 0 || axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape_));
    }
    return shape_[static_cast<std::size_t>(axis)];
}

std::size_t Tensor::index(int n, int c, int h, int w) const
{
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
}

Tensor Tensor::reshaped(std::vector<int> shape) const
{
    Tensor out(std::move(shape));
    if (out.size() != size()) {
        throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(out.shape_));
    }
    out.data_ = data_;
    return out;
}

void Tensor::fill(float v)
{
    std::fill(data_.begin(), data_.end(), v);
}

int conv_output_extent(int in, int kernel, int stride)
{
    return (in - kernel) / stride + 1;
}

int pool_output_extent(int in, int kernel, int stride, bool ceil_mode)
{
    const int span = in - kernel;
    return (ceil_mode ? (span + stride - 1) / stride : span / stride) + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, int stride)
{
    const auto g = check_conv("conv2d", input, weights, stride);
    if (bias.size() != static_cast<std::size_t>(g.out_c)) {
        shape_fail("conv2d", "bias length " + std::to_string(bias.size()) + " != out_c " + std::to_string(g.out_c));
    }
    const int k = g.c * g.kh * g.kw;
    const int p = g.oh * g.ow;
    Tensor out({g.n, g.out_c, g.oh, g.ow});
    FloatBuffer col(static_cast<std::size_t>(k) * p);
    ConstMatMap w(weights.data(), g.out_c, k);
    const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
    const std::size_t out_stride = static_cast<std::size_t>(g.out_c) * p;
    for (int n = 0; n < g.n; ++n) {
        im2col(input.data() + n * in_stride, g.c, g.h, g.w, g.kh, g.kw, stride, g.oh, g.ow, col.data());
        MatMap o(out.data() + n * out_stride, g.out_c, p);
        o.noalias() = w * ConstMatMap(col.data(), k, p);
        for (int oc = 0; oc < g.out_c; ++oc) {
            o.row(oc).array() += bias[static_cast<std::size_t>(oc)];
        }
    }
    return out;
}

LayerGrads conv2d_backward(const Tensor& input, const Tensor& weights, int stride, const Tensor& d_output)
{
    if (input.empty()) {
        throw std::logic_error("conv2d_backward: missing cached input");
    }
    const auto g = check_conv("conv2d_backward", input, weights, stride);
    if (d_output.shape() != std::vector<int>{g.n, g.out_c, g.oh, g.ow}) {
        shape_fail("conv2d_backward", "d_output shape " + shape_string(d_output.shape()) + " does not match forward output");
    }
    const int k = g.c * g.kh * g.kw;
    const int p = g.oh * g.ow;
    LayerGrads grads{Tensor(input.shape()), Tensor(weights.shape()), Tensor({g.out_c})};
    FloatBuffer col(static_cast<std::size_t>(k) * p);
    FloatBuffer d_col(col.size());
    ConstMatMap w(weights.data(), g.out_c, k);
    MatMap dw(grads.d_weights.data(), g.out_c, k);
    const std::size_t in_stride = static_cast<std::size_t>(g.c) * g.h * g.w;
    const std::size_t out_stride = static_cast<std::size_t>(g.out_c) * p;
    for (int n = 0; n < g.n; ++n) {
        ConstMatMap dout(d_output.data() + n * out_stride, g.out_c, p);
        im2col(input.data() + n * in_stride, g.c, g.h, g.w, g.kh, g.kw, stride, g.oh, g.ow, col.data());
        dw.noalias() += dout * ConstMatMap(col.data(), k, p).transpose();
        MatMap(d_col.data(), k, p).noalias() = w.transpose() * dout;
        col2im_add(d_col.data(), g.c, g.h, g.w, g.kh, g.kw, stride, g.oh, g.ow,
                   grads.d_input.data() + n * in_stride);
        for (int oc = 0; oc < g.out_c; ++oc) {
            grads.d_bias[static_cast<std::size_t>(oc)] += dout.row(oc).sum();
        }
    }
    return grads;
}

PoolResult max_pool(const Tensor& input, int kernel, int stride, bool ceil_mode)
{
    require_rank("max_pool", input, 4, "input");
    if (kernel < 1 || stride < 1) {
        shape_fail("max_pool", "kernel and stride must be positive");
    }
    const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
    if (kernel > h) {
        shape_fail("max_pool", "kernel " + std::to_string(kernel) + " exceeds input height " + std::to_string(h));
    }
    if (kernel > w) {
        shape_fail("max_pool", "kernel " + std::to_string(kernel) + " exceeds input width " + std::to_string(w));
    }
    const int oh = pool_output_extent(h, kernel, stride, ceil_mode);
    const int ow = pool_output_extent(w, kernel, stride, ceil_mode);
    PoolResult r{Tensor({n, c, oh, ow}), {}};
    r.argmax.resize(r.output.size());
    std::size_t o = 0;
    for (int b = 0; b < n; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t plane = input.index(b, ch, 0, 0);
            for (int y = 0; y < oh; ++y) {
                const int y0 = y * stride, y1 = std::min(y0 + kernel, h);
                for (int x = 0; x < ow; ++x, ++o) {
                    const int x0 = x * stride, x1 = std::min(x0 + kernel, w);
                    std::size_t best = plane + static_cast<std::size_t>(y0) * w + x0;
                    for (int yy = y0; yy < y1; ++yy) {
                        for (int xx = x0; xx < x1; ++xx) {
                            const std::size_t i = plane + static_cast<std::size_t>(yy) * w + xx;
                            if (input[i] > input[best]) {
                                best = i;
                            }
                        }
                    }
                    r.output[o] = input[best];
                    r.argmax[o] = static_cast<std::int32_t>(best);
                }
            }
        }
    }
    return r;
}

LayerGrads max_pool_backward(const Tensor& input, const PoolResult& forward, const Tensor& d_output)
{
    if (forward.argmax.empty() || input.empty()) {
        throw std::logic_error("max_pool_backward: missing cached argmax");
    }
    require_same_shape("max_pool_backward", forward.output, d_output, "d_output");
    LayerGrads grads{Tensor(input.shape()), {}, {}};
    for (std::size_t i = 0; i < d_output.size(); ++i) {
        grads.d_input[static_cast<std::size_t>(forward.argmax[i])] += d_output[i];
    }
    return grads;
}

Tensor prelu(const Tensor& input, const Tensor& slopes)
{
    const int channels = channel_extent(input);
    if (slopes.size() != static_cast<std::size_t>(channels)) {
        shape_fail("prelu", "slope count " + std::to_string(slopes.size()) + " != channel extent " +
                                std::to_string(channels));
    }
    Tensor out = input;
    const std::size_t inner = inner_extent(input);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float a = slopes[(i / inner) % static_cast<std::size_t>(channels)];
        if (out[i] < 0.0f) {
            out[i] *= a;
        }
    }
    return out;
}

LayerGrads prelu_backward(const Tensor& input, const Tensor& slopes, const Tensor& d_output)
{
    if (input.empty()) {
        throw std::logic_error("prelu_backward: missing cached input");
    }
    require_same_shape("prelu_backward", input, d_output, "d_output");
    const int channels = channel_extent(input);
    if (slopes.size() != static_cast<std::size_t>(channels)) {
        shape_fail("prelu_backward", "slope count mismatch");
    }
    LayerGrads grads{Tensor(input.shape()), Tensor({channels}), {}};
    const std::size_t inner = inner_extent(input);
    for (std::size_t i = 0; i < input.size(); ++i) {
        const std::size_t c = (i / inner) % static_cast<std::size_t>(channels);
        if (input[i] < 0.0f) {
            grads.d_input[i] = slopes[c] * d_output[i];
            grads.d_weights[c] += input[i] * d_output[i];
        } else {
            grads.d_input[i] = d_output[i];
        }
    }
    return grads;
}

Tensor fully_connected(const Tensor& input, const Tensor& weights, const Tensor& bias)
{
    require_rank("fully_connected", weights, 2, "weights");
    if (input.rank() < 1) {
        shape_fail("fully_connected", "input must have a batch axis");
    }
    const int n = input.dim(0);
    const int d_in = static_cast<int>(input.size() / static_cast<std::size_t>(n));
    const int d_out = weights.dim(0);
    if (weights.dim(1) != d_in) {
        shape_fail("fully_connected", "flattened input length " + std::to_string(d_in) + " != weights d_in " +
                                          std::to_string(weights.dim(1)));
    }
    if (bias.size() != static_cast<std::size_t>(d_out)) {
        shape_fail("fully_connected", "bias length " + std::to_string(bias.size()) + " != d_out " + std::to_string(d_out));
    }
    Tensor out({n, d_out});
    MatMap o(out.data(), n, d_out);
    o.noalias() = ConstMatMap(input.data(), n, d_in) * ConstMatMap(weights.data(), d_out, d_in).transpose();
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.data(), d_out);
    return out;
}

LayerGrads fully_connected_backward(const Tensor& input, const Tensor& weights, const Tensor& d_output)
{
    if (input.empty()) {
        throw std::logic_error("fully_connected_backward: missing cached input");
    }
    require_rank("fully_connected_backward", weights, 2, "weights");
    const int n = input.dim(0);
    const int d_in = static_cast<int>(input.size() / static_cast<std::size_t>(n));
    const int d_out = weights.dim(0);
    if (weights.dim(1) != d_in) {
        shape_fail("fully_connected_backward", "flattened input length mismatch");
    }
    if (d_output.shape() != std::vector<int>{n, d_out}) {
        shape_fail("fully_connected_backward", "d_output shape " + shape_string(d_output.shape()) + " does not match forward output");
    }
    LayerGrads grads{Tensor(input.shape()), Tensor(weights.shape()), Tensor({d_out})};
    ConstMatMap dout(d_output.data(), n, d_out);
    ConstMatMap x(input.data(), n, d_in);
    ConstMatMap w(weights.data(), d_out, d_in);
    MatMap(grads.d_weights.data(), d_out, d_in).noalias() = dout.transpose() * x;
    MatMap(grads.d_input.data(), n, d_in).noalias() = dout * w;
    Eigen::Map<Eigen::RowVectorXf>(grads.d_bias.data(), d_out) = dout.colwise().sum();
    return grads;
}

Tensor softmax_channels(const Tensor& input)
{
    const int channels = channel_extent(input);
    if (input.rank() < 2 || channels < 2) {
        shape_fail("softmax_channels", "channel axis extent must be >= 2, got " + shape_string(input.shape()));
    }
    Tensor out(input.shape());
    const std::size_t inner = inner_extent(input);
    const std::size_t outer = input.size() / (inner * static_cast<std::size_t>(channels));
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t s = 0; s < inner; ++s) {
            const std::size_t base = o * channels * inner + s;
            float mx = -std::numeric_limits<float>::infinity();
            for (int c = 0; c < channels; ++c) {
                mx = std::max(mx, input[base + c * inner]);
            }
            float sum = 0.0f;
            for (int c = 0; c < channels; ++c) {
                const float e = std::exp(input[base + c * inner] - mx);
                out[base + c * inner] = e;
                sum += e;
            }
            for (int c = 0; c < channels; ++c) {
                out[base + c * inner] /= sum;
            }
        }
    }
    return out;
}

LayerGrads softmax_backward(const Tensor& output, const Tensor& d_output)
{
    if (output.empty()) {
        throw std::logic_error("softmax_backward: missing cached output");
    }
    require_same_shape("softmax_backward", output, d_output, "d_output");
    const int channels = channel_extent(output);
    const std::size_t inner = inner_extent(output);
    const std::size_t outer = output.size() / (inner * static_cast<std::size_t>(channels));
    LayerGrads grads{Tensor(output.shape()), {}, {}};
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t s = 0; s < inner; ++s) {
            const std::size_t base = o * channels * inner + s;
            float dot = 0.0f;
            for (int c = 0; c < channels; ++c) {
                dot += output[base + c * inner] * d_output[base + c * inner];
            }
            for (int c = 0; c < channels; ++c) {
                const std::size_t i = base + c * inner;
                grads.d_input[i] = output[i] * (d_output[i] - dot);
            }
        }
    }
    return grads;
}

}  // namespace mtcnn
