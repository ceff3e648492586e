#pragma once

// Minimal reverse-mode automatic differentiation over dense matrices.
//
// A Graph records every operation applied to Var handles; backward() walks the
// tape in reverse and accumulates gradients into the graph nodes and into the
// Parameter objects that were bound with Graph::param. A graph built with
// recording disabled only evaluates values.

#include "selfctl/tensor.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace selfctl {

using Rng = std::mt19937_64;

namespace nn {

struct Parameter {
    std::string name;
    Mat value;
    Mat grad;
};

/// Owns parameters with stable addresses, in creation order.
class ParameterStore {
public:
    Parameter& create(const std::string& name, Eigen::Index rows, Eigen::Index cols);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;

    std::deque<Parameter>& all() { return params_; }
    const std::deque<Parameter>& all() const { return params_; }
    std::size_t scalar_count() const;
    void zero_grad();

private:
    std::deque<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct Var {
    std::int32_t id = -1;
    bool valid() const { return id >= 0; }
};

class Graph {
public:
    using Backward = std::function<void(Graph&, Var out)>;

    /// With param_grads false, bound parameters are treated as constants.
    explicit Graph(bool record = true, bool param_grads = true);
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return record_; }

    Var constant(Mat value);
    /// Leaf that receives a gradient (used for input-sensitivity checks).
    Var input(Mat value);
    /// Binds a parameter; repeated calls with the same parameter share one node.
    Var param(Parameter& p);

    const Mat& value(Var v) const { return nodes_[v.id].value; }
    bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
    /// Gradient of the last backward() target; empty if none reached this node.
    const Mat& grad(Var v) const { return nodes_[v.id].grad; }
    /// Gradient buffer, zero-initialised on first access.
    Mat& grad_buffer(Var v);

    /// Seeds d(loss)/d(loss) = 1 (loss must be 1x1), propagates to every node
    /// and adds parameter gradients into Parameter::grad.
    void backward(Var loss);
    /// Same, with an explicit seed gradient of the shape of `out`.
    void backward(Var out, const Mat& seed);
    /// Drops node gradients so another backward() can run on the same tape.
    void clear_grads();

    /// Records a node. `fn` is dropped unless recording and some parent needs a gradient.
    Var push(Mat value, std::initializer_list<Var> parents, Backward fn);
    Var push(Mat value, const std::vector<Var>& parents, Backward fn);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat value;
        Mat grad;
        Backward backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
    };
    void run_backward(Var out);

    bool record_;
    bool param_grads_;
    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, std::int32_t> param_nodes_;
};

// Elementwise / shape ops. All shapes must agree unless noted.
Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double s);
/// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(Graph& g, Var a, Var row);
Var matmul(Graph& g, Var a, Var b);
/// x (n x in) * W (in x out) + b (1 x out).
Var linear(Graph& g, Var x, Var weight, Var bias);
Var gelu(Graph& g, Var a);
Var silu(Graph& g, Var a);
/// Per-row normalisation to zero mean / unit variance, then * gamma + beta (1 x m each).
Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps = 1e-6);
/// Output row i is src row idx[i]; repeated indices accumulate in backward.
Var gather_rows(Graph& g, Var src, std::vector<Eigen::Index> idx);
Var concat_rows(Graph& g, const std::vector<Var>& parts);
/// Rows [begin, begin + n).
Var slice_rows(Graph& g, Var src, Eigen::Index begin, Eigen::Index n);
/// Scalar sum of all entries of a (.) weights, weights a constant.
Var weighted_sum(Graph& g, Var a, const Mat& weights);
/// Scalar mean over rows of the squared row-norm of (a - target).
Var mean_row_sq_error(Graph& g, Var a, const Mat& target);

/// Disallowed attention logits receive this additive bias.
inline constexpr double kMaskedLogit = -1e9;

/// One sequence inside a row-stacked batch, with its additive attention bias
/// (0 where allowed, kMaskedLogit where not).
struct AttentionSpan {
    Eigen::Index offset = 0;
    Eigen::Index length = 0;
    std::shared_ptr<const Mat> bias;
};

/// Row-wise softmax(q k^T / sqrt(d) + bias).
Mat attention_weights(const Eigen::Ref<const Mat>& q, const Eigen::Ref<const Mat>& k,
                      const Eigen::Ref<const Mat>& bias);

/// Multi-head scaled dot-product attention. qkv has 3*width columns laid out
/// [q | k | v], each split into `heads` contiguous head slices; result has
/// `width` columns. Every row must belong to exactly one span.
Var multi_head_attention(Graph& g, Var qkv, const std::vector<AttentionSpan>& spans, int heads);

/// Additive bias matrix for an attention mask given as an allow predicate.
template <class Allowed>
std::shared_ptr<const Mat> make_attention_bias(Eigen::Index n, Allowed&& allowed) {
    auto bias = std::make_shared<Mat>(n, n);
    for (Eigen::Index q = 0; q < n; ++q)
        for (Eigen::Index k = 0; k < n; ++k) (*bias)(q, k) = allowed(q, k) ? 0.0 : kMaskedLogit;
    return bias;
}

// Initialisers.
void init_xavier_uniform(Parameter& p, Rng& rng);
void init_normal(Parameter& p, double stddev, Rng& rng);
void init_constant(Parameter& p, double value);

/// Adam with bias correction; optional global-norm gradient clipping.
class Adam {
public:
    struct Options {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double clip_norm = 0.0; ///< 0 disables clipping
    };

    Adam(ParameterStore& store, Options opts);
    /// Applies one update from the accumulated gradients; returns the pre-clip gradient norm.
    double step();
    std::int64_t steps_taken() const { return t_; }

private:
    ParameterStore& store_;
    Options opts_;
    std::vector<Mat> m_, v_;
    std::int64_t t_ = 0;
};

bool all_finite(const Mat& m);

} // namespace nn

using nn::Var;

} // namespace selfctl
