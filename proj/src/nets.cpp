#include "mtcnn/nets.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <set>

namespace mtcnn {

namespace {

constexpr std::array<char, 4> kMagic{'M', 'T', 'W', '1'};

LayerDesc conv(std::string name, int in, int out, int k, int stride = 1)
{
    return {LayerKind::Conv, std::move(name), in, out, k, stride};
}

LayerDesc act(std::string name, int channels)
{
    return {LayerKind::PRelu, std::move(name), channels, channels, 0, 1};
}

LayerDesc pool(std::string name, int channels, int k, int stride)
{
    return {LayerKind::MaxPool, std::move(name), channels, channels, k, stride};
}

LayerDesc fc(std::string name, int in, int out)
{
    return {LayerKind::FullyConnected, std::move(name), in, out, 0, 1};
}

std::string param_name(const NetworkSpec& spec, const LayerDesc& layer, const char* field)
{
    return spec.prefix() + "." + layer.name + "." + field;
}

void append_params(const NetworkSpec& spec, const LayerDesc& l, std::vector<ParamSpec>& out)
{
    switch (l.kind) {
    case LayerKind::Conv:
        out.push_back({param_name(spec, l, "weight"), {l.out_channels, l.in_channels, l.kernel, l.kernel}});
        out.push_back({param_name(spec, l, "bias"), {l.out_channels}});
        break;
    case LayerKind::FullyConnected:
        out.push_back({param_name(spec, l, "weight"), {l.out_channels, l.in_channels}});
        out.push_back({param_name(spec, l, "bias"), {l.out_channels}});
        break;
    case LayerKind::PRelu:
        out.push_back({param_name(spec, l, "slopes"), {l.out_channels}});
        break;
    case LayerKind::MaxPool:
        break;
    }
}

Tensor apply_layer(const NetworkSpec& spec, const WeightStore& w, const LayerDesc& l, const Tensor& x,
                   PoolResult* pool_out)
{
    switch (l.kind) {
    case LayerKind::Conv:
        return conv2d(x, w.get(param_name(spec, l, "weight")), w.get(param_name(spec, l, "bias")), l.stride);
    case LayerKind::FullyConnected:
        return fully_connected(x, w.get(param_name(spec, l, "weight")), w.get(param_name(spec, l, "bias")));
    case LayerKind::PRelu:
        return prelu(x, w.get(param_name(spec, l, "slopes")));
    case LayerKind::MaxPool: {
        PoolResult r = max_pool(x, l.kernel, l.stride, true);
        Tensor out = std::move(r.output);
        if (pool_out) {
            r.output = out;
            *pool_out = std::move(r);
        }
        return out;
    }
    }
    throw std::logic_error("unknown layer kind");
}

void check_input(const NetworkSpec& spec, const Tensor& input)
{
    if (input.rank() != 4 || input.dim(1) != 3) {
        throw ShapeError(spec.prefix() + ": input must be [N, 3, H, W], got " + shape_string(input.shape()));
    }
    const int h = input.dim(2), w = input.dim(3);
    if (spec.fully_convolutional()) {
        if (h < spec.input_size || w < spec.input_size) {
            throw ShapeError(spec.prefix() + ": input " + std::to_string(h) + "x" + std::to_string(w) +
                             " smaller than " + std::to_string(spec.input_size));
        }
    } else if (h != spec.input_size || w != spec.input_size) {
        throw ShapeError(spec.prefix() + ": input must be " + std::to_string(spec.input_size) + "x" +
                         std::to_string(spec.input_size) + ", got " + std::to_string(h) + "x" + std::to_string(w));
    }
}

// Channel 1 of the softmaxed classifier output, keeping the spatial layout.
Tensor face_channel(const Tensor& prob)
{
    const int n = prob.dim(0);
    std::vector<int> shape = prob.shape();
    shape[1] = 1;
    Tensor out(shape);
    const std::size_t inner = prob.size() / (static_cast<std::size_t>(n) * 2);
    for (int b = 0; b < n; ++b) {
        for (std::size_t s = 0; s < inner; ++s) {
            out[static_cast<std::size_t>(b) * inner + s] = prob[(static_cast<std::size_t>(b) * 2 + 1) * inner + s];
        }
    }
    return out;
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v)
{
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
    }
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::span<const std::uint8_t> take(std::size_t n, const char* what)
    {
        if (bytes_.size() - pos_ < n) {
            throw WeightError(WeightErrorKind::Truncated, std::string("weight file truncated while reading ") + what);
        }
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::uint8_t u8(const char* what) { return take(1, what)[0]; }
    std::uint16_t u16(const char* what)
    {
        auto s = take(2, what);
        return static_cast<std::uint16_t>(s[0] | (s[1] << 8));
    }
    std::uint32_t u32(const char* what)
    {
        auto s = take(4, what);
        return static_cast<std::uint32_t>(s[0]) | (static_cast<std::uint32_t>(s[1]) << 8) |
               (static_cast<std::uint32_t>(s[2]) << 16) | (static_cast<std::uint32_t>(s[3]) << 24);
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string stage_name(Stage stage)
{
    switch (stage) {
    case Stage::PNet: return "pnet";
    case Stage::RNet: return "rnet";
    case Stage::ONet: return "onet";
    }
    return "?";
}

Stage parse_stage(const std::string& name)
{
    if (name == "pnet") return Stage::PNet;
    if (name == "rnet") return Stage::RNet;
    if (name == "onet") return Stage::ONet;
    throw std::invalid_argument("unknown stage '" + name + "' (expected pnet, rnet or onet)");
}

NetworkSpec build_pnet()
{
    return {Stage::PNet,
            12,
            {conv("conv1", 3, 10, 3), act("prelu1", 10), pool("pool1", 10, 2, 2), conv("conv2", 10, 16, 3),
             act("prelu2", 16), conv("conv3", 16, 32, 3), act("prelu3", 32)},
            {conv("conv4_1", 32, 2, 1), conv("conv4_2", 32, 4, 1), conv("conv4_3", 32, 10, 1)}};
}

NetworkSpec build_rnet()
{
    return {Stage::RNet,
            24,
            {conv("conv1", 3, 28, 3), act("prelu1", 28), pool("pool1", 28, 3, 2), conv("conv2", 28, 48, 3),
             act("prelu2", 48), pool("pool2", 48, 3, 2), conv("conv3", 48, 64, 2), act("prelu3", 64),
             fc("fc1", 64 * 3 * 3, 128), act("prelu4", 128)},
            {fc("fc2_1", 128, 2), fc("fc2_2", 128, 4), fc("fc2_3", 128, 10)}};
}

NetworkSpec build_onet()
{
    return {Stage::ONet,
            48,
            {conv("conv1", 3, 32, 3), act("prelu1", 32), pool("pool1", 32, 3, 2), conv("conv2", 32, 64, 3),
             act("prelu2", 64), pool("pool2", 64, 3, 2), conv("conv3", 64, 64, 3), act("prelu3", 64),
             pool("pool3", 64, 2, 2), conv("conv4", 64, 128, 2), act("prelu4", 128), fc("fc1", 128 * 3 * 3, 256),
             act("prelu5", 256)},
            {fc("fc2_1", 256, 2), fc("fc2_2", 256, 4), fc("fc2_3", 256, 10)}};
}

NetworkSpec build_network(Stage stage)
{
    switch (stage) {
    case Stage::PNet: return build_pnet();
    case Stage::RNet: return build_rnet();
    case Stage::ONet: return build_onet();
    }
    throw std::logic_error("unknown stage");
}

std::vector<ParamSpec> network_parameters(const NetworkSpec& spec)
{
    std::vector<ParamSpec> out;
    for (const auto& l : spec.trunk) {
        append_params(spec, l, out);
    }
    for (const auto& h : spec.heads) {
        append_params(spec, h, out);
    }
    return out;
}

int pnet_output_extent(int input_extent)
{
    int e = conv_output_extent(input_extent, 3, 1);
    e = pool_output_extent(e, 2, 2, true);
    e = conv_output_extent(e, 3, 1);
    return conv_output_extent(e, 3, 1);
}

const Tensor& WeightStore::get(const std::string& name) const
{
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw WeightError(WeightErrorKind::MissingParameter, "missing parameter '" + name + "'");
    }
    return it->second;
}

Tensor& WeightStore::get(const std::string& name)
{
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw WeightError(WeightErrorKind::MissingParameter, "missing parameter '" + name + "'");
    }
    return it->second;
}

void WeightStore::merge(const WeightStore& other)
{
    for (const auto& [name, t] : other) {
        if (!insert(name, t)) {
            throw WeightError(WeightErrorKind::DuplicateName, "duplicate parameter '" + name + "' while merging");
        }
    }
}

void validate_weights(const NetworkSpec& spec, const WeightStore& store)
{
    std::set<std::string> expected;
    for (const auto& p : network_parameters(spec)) {
        const Tensor& t = store.get(p.name);
        if (t.shape() != p.shape) {
            throw WeightError(WeightErrorKind::ShapeMismatch, "parameter '" + p.name + "' has shape " +
                                                                  shape_string(t.shape()) + ", expected " +
                                                                  shape_string(p.shape));
        }
        expected.insert(p.name);
    }
    const std::string prefix = spec.prefix() + ".";
    for (const auto& [name, t] : store) {
        if (name.starts_with(prefix) && !expected.contains(name)) {
            throw WeightError(WeightErrorKind::UnexpectedParameter, "unexpected parameter '" + name + "'");
        }
    }
}

WeightStore init_weights(const NetworkSpec& spec, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    WeightStore store;
    for (const auto& p : network_parameters(spec)) {
        Tensor t(p.shape);
        if (p.name.ends_with(".slopes")) {
            t.fill(0.25f);
        } else if (p.name.ends_with(".weight")) {
            const std::size_t receptive = p.shape.size() == 4 ? static_cast<std::size_t>(p.shape[2] * p.shape[3]) : 1;
            const double fan_in = static_cast<double>(p.shape[1] * receptive);
            const double fan_out = static_cast<double>(p.shape[0] * receptive);
            const float limit = static_cast<float>(std::sqrt(6.0 / (fan_in + fan_out)));
            std::uniform_real_distribution<float> dist(-limit, limit);
            for (float& v : t.values()) {
                v = dist(rng);
            }
        }
        store.set(p.name, std::move(t));
    }
    return store;
}

WeightStore zero_weights(const NetworkSpec& spec)
{
    WeightStore store;
    for (const auto& p : network_parameters(spec)) {
        store.set(p.name, Tensor(p.shape));
    }
    return store;
}

std::vector<std::uint8_t> encode_weights(const WeightStore& store)
{
    std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
    put_u32(out, static_cast<std::uint32_t>(store.size()));
    for (const auto& [name, t] : store) {
        if (name.size() > 0xffff) {
            throw WeightError(WeightErrorKind::Io, "parameter name too long: " + name.substr(0, 32) + "...");
        }
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<std::uint8_t>(t.rank()));
        for (int e : t.shape()) {
            put_u32(out, static_cast<std::uint32_t>(e));
        }
        for (float v : t.values()) {
            put_u32(out, std::bit_cast<std::uint32_t>(v));
        }
    }
    return out;
}

WeightStore decode_weights(std::span<const std::uint8_t> bytes)
{
    if (bytes.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
        throw WeightError(WeightErrorKind::BadMagic, "not a weight file (expected magic MTW1)");
    }
    Reader r(bytes.subspan(kMagic.size()));
    const std::uint32_t count = r.u32("tensor count");
    WeightStore store;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t len = r.u16("name length");
        auto name_bytes = r.take(len, "name");
        std::string name(name_bytes.begin(), name_bytes.end());
        const std::uint8_t rank = r.u8("rank");
        if (rank == 0) {
            throw WeightError(WeightErrorKind::ShapeMismatch, "parameter '" + name + "' has rank 0");
        }
        std::vector<int> shape(rank);
        for (auto& e : shape) {
            const std::uint32_t v = r.u32("extent");
            if (v == 0 || v > 0x7fffffffu) {
                throw WeightError(WeightErrorKind::ShapeMismatch, "parameter '" + name + "' has invalid extent");
            }
            e = static_cast<int>(v);
        }
        const std::size_t n = shape_volume(shape);
        auto raw = r.take(n * 4, "tensor data");
        std::vector<float> values(n);
        for (std::size_t k = 0; k < n; ++k) {
            const std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * k]) |
                                       (static_cast<std::uint32_t>(raw[4 * k + 1]) << 8) |
                                       (static_cast<std::uint32_t>(raw[4 * k + 2]) << 16) |
                                       (static_cast<std::uint32_t>(raw[4 * k + 3]) << 24);
            values[k] = std::bit_cast<float>(bits);
        }
        if (!store.insert(name, Tensor(std::move(shape), std::move(values)))) {
            throw WeightError(WeightErrorKind::DuplicateName, "duplicate parameter '" + name + "'");
        }
    }
    if (!r.done()) {
        throw WeightError(WeightErrorKind::Truncated, "trailing bytes after last tensor record");
    }
    return store;
}

void save_weights(const WeightStore& store, const std::filesystem::path& path)
{
    for (const auto& [name, t] : store) {
        for (float v : t.values()) {
            if (!std::isfinite(v)) {
                throw WeightError(WeightErrorKind::NonFinite, "parameter '" + name + "' contains non-finite values");
            }
        }
    }
    const auto bytes = encode_weights(store);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw WeightError(WeightErrorKind::Io, "cannot open " + tmp.string() + " for writing");
        }
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) {
            throw WeightError(WeightErrorKind::Io, "failed writing " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

WeightStore load_weights(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw WeightError(WeightErrorKind::Io, "cannot open weight file " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_weights(bytes);
}

StageOutput forward(const NetworkSpec& spec, const WeightStore& weights, const Tensor& input)
{
    check_input(spec, input);
    validate_weights(spec, weights);
    Tensor x = input;
    for (const auto& l : spec.trunk) {
        x = apply_layer(spec, weights, l, x, nullptr);
    }
    StageOutput out;
    out.face_prob = face_channel(softmax_channels(apply_layer(spec, weights, spec.heads[0], x, nullptr)));
    out.box_offsets = apply_layer(spec, weights, spec.heads[1], x, nullptr);
    out.landmark_offsets = apply_layer(spec, weights, spec.heads[2], x, nullptr);
    return out;
}

ForwardTrace forward_trace(const NetworkSpec& spec, const WeightStore& weights, const Tensor& input)
{
    check_input(spec, input);
    validate_weights(spec, weights);
    ForwardTrace t;
    t.layer_inputs.reserve(spec.trunk.size());
    t.pools.resize(spec.trunk.size());
    Tensor x = input;
    for (std::size_t i = 0; i < spec.trunk.size(); ++i) {
        t.layer_inputs.push_back(x);
        x = apply_layer(spec, weights, spec.trunk[i], x, &t.pools[i]);
    }
    t.cls_logits = apply_layer(spec, weights, spec.heads[0], x, nullptr);
    t.cls_prob = softmax_channels(t.cls_logits);
    t.box = apply_layer(spec, weights, spec.heads[1], x, nullptr);
    t.landmarks = apply_layer(spec, weights, spec.heads[2], x, nullptr);
    t.features = std::move(x);
    return t;
}

WeightStore backward(const NetworkSpec& spec, const WeightStore& weights, const ForwardTrace& trace,
                     const HeadGradients& grads)
{
    if (trace.features.empty() || trace.layer_inputs.size() != spec.trunk.size()) {
        throw std::logic_error(spec.prefix() + ": backward needs a forward trace of this network");
    }
    WeightStore out;
    Tensor d_features(trace.features.shape());

    auto layer_backward = [&](const LayerDesc& l, const Tensor& input, const PoolResult* pool,
                              const Tensor& d_out) -> Tensor {
        switch (l.kind) {
        case LayerKind::Conv: {
            auto g = conv2d_backward(input, weights.get(param_name(spec, l, "weight")), l.stride, d_out);
            out.set(param_name(spec, l, "weight"), std::move(g.d_weights));
            out.set(param_name(spec, l, "bias"), std::move(g.d_bias));
            return std::move(g.d_input);
        }
        case LayerKind::FullyConnected: {
            auto g = fully_connected_backward(input, weights.get(param_name(spec, l, "weight")), d_out);
            out.set(param_name(spec, l, "weight"), std::move(g.d_weights));
            out.set(param_name(spec, l, "bias"), std::move(g.d_bias));
            return std::move(g.d_input);
        }
        case LayerKind::PRelu: {
            auto g = prelu_backward(input, weights.get(param_name(spec, l, "slopes")), d_out);
            out.set(param_name(spec, l, "slopes"), std::move(g.d_weights));
            return std::move(g.d_input);
        }
        case LayerKind::MaxPool:
            return max_pool_backward(input, *pool, d_out).d_input;
        }
        throw std::logic_error("unknown layer kind");
    };

    const std::array<const Tensor*, 3> head_grads{&grads.d_cls_logits, &grads.d_box, &grads.d_landmarks};
    for (std::size_t h = 0; h < 3; ++h) {
        const Tensor* d = head_grads[h];
        if (d->empty()) {
            // Untouched head: zero parameter gradients.
            for (const char* field : {"weight", "bias"}) {
                const auto name = param_name(spec, spec.heads[h], field);
                out.set(name, Tensor(weights.get(name).shape()));
            }
            continue;
        }
        Tensor d_in = layer_backward(spec.heads[h], trace.features, nullptr, *d);
        for (std::size_t i = 0; i < d_in.size(); ++i) {
            d_features[i] += d_in[i];
        }
    }

    Tensor d = std::move(d_features);
    for (std::size_t i = spec.trunk.size(); i-- > 0;) {
        d = layer_backward(spec.trunk[i], trace.layer_inputs[i], &trace.pools[i], d);
    }
    return out;
}

}  // namespace mtcnn
