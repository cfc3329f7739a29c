#pragma once

#include <cstdint>
#include <unordered_map>
#include <vector>

#include "metapix/tensor.hpp"

namespace metapix {

enum class OpKind {
    Leaf,
    Add,
    Mul,
    AddScalar,
    MulScalar,
    Exp,
    Relu,
    StepMask,
    Sigmoid,
    Conv2d,
    Conv2dInputGrad,
    Conv2dWeightGrad,
    MaxPool2x2,
    MaxUnpool2x2,
    PoolGather,
    Upsample2x,
    Downsample2xSum,
    ConcatC,
    SliceC,
    PadC,
    LogSoftmaxC,
    ChannelSum,
    ChannelBcast,
    SumAll,
    ScalarBcast,
    GatherC,
    ScatterC,
    AddBias,
    BiasSum,
    BiasBcast,
    Reshape,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::AddScalar: return "add_scalar";
        case OpKind::MulScalar: return "mul_scalar";
        case OpKind::Exp: return "exp";
        case OpKind::Relu: return "relu";
        case OpKind::StepMask: return "step_mask";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Conv2d: return "conv2d";
        case OpKind::Conv2dInputGrad: return "conv2d_input_grad";
        case OpKind::Conv2dWeightGrad: return "conv2d_weight_grad";
        case OpKind::MaxPool2x2: return "maxpool2x2";
        case OpKind::MaxUnpool2x2: return "maxunpool2x2";
        case OpKind::PoolGather: return "pool_gather";
        case OpKind::Upsample2x: return "upsample2x";
        case OpKind::Downsample2xSum: return "downsample2x_sum";
        case OpKind::ConcatC: return "concat_channels";
        case OpKind::SliceC: return "slice_channels";
        case OpKind::PadC: return "pad_channels";
        case OpKind::LogSoftmaxC: return "log_softmax_channel";
        case OpKind::ChannelSum: return "channel_sum";
        case OpKind::ChannelBcast: return "channel_broadcast";
        case OpKind::SumAll: return "sum_all";
        case OpKind::ScalarBcast: return "scalar_broadcast";
        case OpKind::GatherC: return "gather_channel";
        case OpKind::ScatterC: return "scatter_channel";
        case OpKind::AddBias: return "add_bias";
        case OpKind::BiasSum: return "bias_sum";
        case OpKind::BiasBcast: return "bias_broadcast";
        case OpKind::Reshape: return "reshape";
    }
    return "?";
}

struct Attrs {
    int stride = 1;
    int begin = 0;
    int count = 0;
    int channels = 0;
    double scalar = 0.0;
    Shape shape;
    std::shared_ptr<const std::vector<std::int32_t>> indices;
};

template <class Real>
struct Node {
    OpKind kind = OpKind::Leaf;
    Attrs attrs;
    std::vector<int> input_ids;          // -1 for constant inputs
    std::vector<Tensor<Real>> inputs;    // saved value views
    Tensor<Real> out;
};

// Append-only operation record. Node inputs always precede the node, so a
// reverse index sweep is a reverse topological traversal.
template <class Real>
class Tape {
  public:
    Tape() : id_(next_id()) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::uint64_t id() const { return id_; }
    bool alive() const { return alive_; }
    size_t size() const { return nodes_.size(); }

    const Node<Real>& node(int i) const { return nodes_[i]; }

    // Appends a node and stamps graph linkage onto its saved output, so that
    // backward rules referencing the output stay differentiable.
    int add_node(Node<Real> n) {
        require(alive_, "autodiff: recording into a consumed graph");
        nodes_.push_back(std::move(n));
        const int id = int(nodes_.size()) - 1;
        nodes_[id].out.node = id;
        nodes_[id].out.tape_id = id_;
        nodes_[id].out.requires_grad = true;
        return id;
    }

    // Registers `t` as a leaf of this tape (id keyed by the value storage).
    int leaf_id(const Tensor<Real>& t) {
        const void* key = t.values.get();
        auto it = leaf_of_.find(key);
        if (it != leaf_of_.end()) return it->second;
        Node<Real> n;
        n.kind = OpKind::Leaf;
        n.out = t;
        int id = add_node(std::move(n));
        leaf_of_.emplace(key, id);
        return id;
    }

    // Node id of `t` in this tape, or -1.
    int find(const Tensor<Real>& t) const {
        if (t.node >= 0 && t.tape_id == id_) return t.node;
        auto it = leaf_of_.find(t.values.get());
        return it == leaf_of_.end() ? -1 : it->second;
    }

    // Drops all recorded state; the graph cannot be traversed again.
    void consume() {
        alive_ = false;
        nodes_.clear();
        leaf_of_.clear();
    }

  private:
    static std::uint64_t next_id() {
        static std::uint64_t counter = 0;
        return ++counter;
    }

    std::uint64_t id_;
    bool alive_ = true;
    std::vector<Node<Real>> nodes_;
    std::unordered_map<const void*, int> leaf_of_;
};

template <class Real>
struct TapeContext {
    Tape<Real>* tape = nullptr;
    int suspend_depth = 0;
};

template <class Real>
inline TapeContext<Real>& tape_context() {
    static thread_local TapeContext<Real> ctx;
    return ctx;
}

// Binds a tape as the recording target for the current thread.
template <class Real>
class GraphScope {
  public:
    explicit GraphScope(Tape<Real>& t) : prev_(tape_context<Real>().tape) {
        tape_context<Real>().tape = &t;
    }
    ~GraphScope() { tape_context<Real>().tape = prev_; }

    GraphScope(const GraphScope&) = delete;
    GraphScope& operator=(const GraphScope&) = delete;

  private:
    Tape<Real>* prev_;
};

// Explicitly suspends recording; ops compute plain values.
template <class Real>
class NoGradScope {
  public:
    NoGradScope() { ++tape_context<Real>().suspend_depth; }
    ~NoGradScope() { --tape_context<Real>().suspend_depth; }

    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;
};

template <class Real>
inline Tape<Real>* active_tape() {
    auto& ctx = tape_context<Real>();
    return ctx.suspend_depth > 0 ? nullptr : ctx.tape;
}

template <class Real>
inline bool recording_suspended() {
    return tape_context<Real>().suspend_depth > 0;
}

}  // namespace metapix
