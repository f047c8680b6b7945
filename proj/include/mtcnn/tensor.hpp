#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtcnn {

/// Raised when tensor extents do not satisfy an operation's contract.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Cache-line aligned storage. Vectorized kernels peel by address, so unaligned
/// buffers would make float sums depend on where the heap put them.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept
    {
    }
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept
    {
        return true;
    }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

/// Dense row-major f32 array. Image data is laid out NCHW.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape, float fill = 0.0f);
    Tensor(std::vector<int> shape, std::vector<float> values);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int axis) const;
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<float> values() { return data_; }
    std::span<const float> values() const { return data_; }
    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    /// Flat offset of (n, c, h, w) in a rank-4 tensor.
    std::size_t index(int n, int c, int h, int w) const;
    float& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
    float at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

    /// Same data, new extents; the element count must not change.
    Tensor reshaped(std::vector<int> shape) const;
    void fill(float v);

    bool operator==(const Tensor& other) const = default;

private:
    std::vector<int> shape_;
    FloatBuffer data_;
};

std::size_t shape_volume(std::span<const int> shape);
std::string shape_string(std::span<const int> shape);

struct PoolResult {
    Tensor output;
    /// For each output element, flat index of the selected input element.
    std::vector<std::int32_t> argmax;
};

/// Gradients of one layer. Parameter gradients are empty for parameter-free layers.
struct LayerGrads {
    Tensor d_input;
    Tensor d_weights;
    Tensor d_bias;
};

/// Valid (unpadded) cross-correlation. weights: [out_c, in_c, kh, kw], bias: [out_c].
Tensor conv2d(const Tensor& input, const Tensor& weights, const Tensor& bias, int stride = 1);

/// Max pooling. In ceil mode trailing windows are truncated at the edge.
PoolResult max_pool(const Tensor& input, int kernel, int stride, bool ceil_mode = true);

/// Per-channel parametric ReLU; channel axis is 1 for rank >= 2.
Tensor prelu(const Tensor& input, const Tensor& slopes);

/// input is flattened to [N, d_in]; weights: [d_out, d_in], bias: [d_out].
Tensor fully_connected(const Tensor& input, const Tensor& weights, const Tensor& bias);

/// Softmax over axis 1 at every remaining position, max-shifted.
Tensor softmax_channels(const Tensor& input);

int pool_output_extent(int in, int kernel, int stride, bool ceil_mode);
int conv_output_extent(int in, int kernel, int stride);

// Per-layer backward passes. Each takes the cached forward state it needs.

LayerGrads conv2d_backward(const Tensor& input, const Tensor& weights, int stride,
                           const Tensor& d_output);
LayerGrads max_pool_backward(const Tensor& input, const PoolResult& forward,
                             const Tensor& d_output);
/// d_weights holds the slope gradients.
LayerGrads prelu_backward(const Tensor& input, const Tensor& slopes, const Tensor& d_output);
LayerGrads fully_connected_backward(const Tensor& input, const Tensor& weights,
                                    const Tensor& d_output);
/// Vector-Jacobian product of softmax_channels given its output.
LayerGrads softmax_backward(const Tensor& output, const Tensor& d_output);

}  // namespace mtcnn
