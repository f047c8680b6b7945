#pragma once

#include "mtcnn/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtcnn {

enum class Stage { PNet, RNet, ONet };

std::string stage_name(Stage stage);
Stage parse_stage(const std::string& name);

enum class LayerKind { Conv, PRelu, MaxPool, FullyConnected };

/// One layer of a stage network. For PRelu, out_channels is the channel count;
/// for FullyConnected, in/out are the flattened feature lengths.
struct LayerDesc {
    LayerKind kind;
    std::string name;
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 0;
    int stride = 1;
};

enum class Head { FaceCls, BoxReg, Landmarks };
inline constexpr std::array<int, 3> kHeadChannels{2, 4, 10};

struct NetworkSpec {
    Stage stage;
    /// Square input side. P-Net is fully convolutional and accepts any side >= this.
    int input_size;
    std::vector<LayerDesc> trunk;
    /// face_cls (2), box_reg (4), landmarks (10), in that order.
    std::array<LayerDesc, 3> heads;

    std::string prefix() const { return stage_name(stage); }
    bool fully_convolutional() const { return stage == Stage::PNet; }
};

NetworkSpec build_pnet();
NetworkSpec build_rnet();
NetworkSpec build_onet();
NetworkSpec build_network(Stage stage);

struct ParamSpec {
    std::string name;
    std::vector<int> shape;
};

/// Every parameter the network needs, e.g. "pnet.conv1.weight", "pnet.prelu1.slopes".
std::vector<ParamSpec> network_parameters(const NetworkSpec& spec);

enum class WeightErrorKind {
    Io,
    BadMagic,
    Truncated,
    DuplicateName,
    MissingParameter,
    ShapeMismatch,
    UnexpectedParameter,
    NonFinite,
};

class WeightError : public std::runtime_error {
public:
    WeightError(WeightErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    WeightErrorKind kind() const { return kind_; }

private:
    WeightErrorKind kind_;
};

/// Named parameter tensors, ordered by name. May hold several stages at once.
class WeightStore {
public:
    using Map = std::map<std::string, Tensor>;

    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);
    bool contains(const std::string& name) const { return params_.contains(name); }
    void set(const std::string& name, Tensor value) { params_[name] = std::move(value); }
    /// Inserts without overwriting; returns false if the name already exists.
    bool insert(const std::string& name, Tensor value) { return params_.emplace(name, std::move(value)).second; }
    void merge(const WeightStore& other);
    std::size_t size() const { return params_.size(); }

    Map::const_iterator begin() const { return params_.begin(); }
    Map::const_iterator end() const { return params_.end(); }
    Map::iterator begin() { return params_.begin(); }
    Map::iterator end() { return params_.end(); }

    bool operator==(const WeightStore& other) const = default;

private:
    Map params_;
};

/// Checks presence and exact shape of every parameter the spec demands, and that no
/// other parameter carries this stage's prefix.
void validate_weights(const NetworkSpec& spec, const WeightStore& store);

/// Xavier-uniform weights, zero biases, PReLU slopes 0.25.
WeightStore init_weights(const NetworkSpec& spec, std::uint64_t seed);
WeightStore zero_weights(const NetworkSpec& spec);

std::vector<std::uint8_t> encode_weights(const WeightStore& store);
WeightStore decode_weights(std::span<const std::uint8_t> bytes);
void save_weights(const WeightStore& store, const std::filesystem::path& path);
WeightStore load_weights(const std::filesystem::path& path);

/// Head outputs of one forward pass. P-Net maps are [N, c, h, w]; R/O-Net outputs [N, c].
struct StageOutput {
    Tensor face_prob;
    Tensor box_offsets;
    Tensor landmark_offsets;
};

StageOutput forward(const NetworkSpec& spec, const WeightStore& weights, const Tensor& input);

/// Everything backward() needs from a forward pass.
struct ForwardTrace {
    std::vector<Tensor> layer_inputs;
    std::vector<PoolResult> pools;
    Tensor features;
    Tensor cls_logits;
    Tensor cls_prob;
    Tensor box;
    Tensor landmarks;
};

ForwardTrace forward_trace(const NetworkSpec& spec, const WeightStore& weights, const Tensor& input);

struct HeadGradients {
    Tensor d_cls_logits;
    Tensor d_box;
    Tensor d_landmarks;
};

/// Parameter gradients, keyed like the weight store.
WeightStore backward(const NetworkSpec& spec, const WeightStore& weights, const ForwardTrace& trace,
                     const HeadGradients& grads);

/// Extent of P-Net output maps for an input extent.
int pnet_output_extent(int input_extent);

}  // namespace mtcnn
