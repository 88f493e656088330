#ifndef CELLTOSG_NN_HPP
#define CELLTOSG_NN_HPP

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Sparse>

#include "common.hpp"

/**
 * @file nn.hpp
 * @brief Dense and graph layers with hand-written backward passes.
 *
 * States are matrices with one row per graph entity. Every layer computes a
 * pre-activation that is affine in its inputs, followed by an elementwise
 * activation. Backward functions accumulate into a gradient object of the
 * same type as the parameters.
 */

namespace celltosg::nn {

enum class Activation { tanh, identity };

inline Matrix activate(Activation a, Matrix pre) {
    if (a == Activation::tanh) {
        pre = pre.array().tanh().matrix();
    }
    return pre;
}

/** d(loss)/d(pre) from d(loss)/d(out), using the stored output. */
inline Matrix activation_backward(Activation a, const Matrix& out, const Matrix& dout) {
    if (a == Activation::tanh) {
        return (dout.array() * (1.0 - out.array().square())).matrix();
    }
    return dout;
}

using SparseOp = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/** Xavier-uniform fill. */
inline void xavier(Matrix& w, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    for (Eigen::Index j = 0; j < w.cols(); ++j) {
        for (Eigen::Index i = 0; i < w.rows(); ++i) {
            w(i, j) = (2.0 * celltosg::detail::uniform01(rng) - 1.0) * bound;
        }
    }
}

/** Row-wise affine map: `pre = x W^T + 1 b^T`. */
struct Dense {
    Matrix weight; // out x in
    Matrix bias;   // out x 1

    Dense() = default;
    Dense(Eigen::Index out, Eigen::Index in) : weight(Matrix::Zero(out, in)), bias(Matrix::Zero(out, 1)) {}

    Eigen::Index in_width() const { return weight.cols(); }
    Eigen::Index out_width() const { return weight.rows(); }

    Matrix pre(const Matrix& x) const {
        Matrix p = x * weight.transpose();
        p.rowwise() += bias.col(0).transpose();
        return p;
    }

    /** Accumulate parameter gradients into `grad`; returns d(loss)/d(x). */
    Matrix backward(const Matrix& x, const Matrix& dpre, Dense& grad) const {
        grad.weight.noalias() += dpre.transpose() * x;
        grad.bias.noalias() += dpre.colwise().sum().transpose();
        return dpre * weight;
    }

    void init(Rng& rng) {
        xavier(weight, rng);
        bias.setZero();
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
    template <typename F>
    void visit(const std::string& prefix, F&& f) const {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

/**
 * @brief Message-passing layer: `pre = x Ws^T + (A x) Wn^T + 1 b^T`.
 *
 * `A` is the layer's aggregation operator (mean over neighbors, or the
 * symmetric-normalized adjacency with self-loops).
 */
struct GraphLayer {
    Matrix self_weight;     // out x in
    Matrix neighbor_weight; // out x in
    Matrix bias;            // out x 1

    GraphLayer() = default;
    GraphLayer(Eigen::Index out, Eigen::Index in) :
        self_weight(Matrix::Zero(out, in)), neighbor_weight(Matrix::Zero(out, in)), bias(Matrix::Zero(out, 1)) {}

    Eigen::Index in_width() const { return self_weight.cols(); }
    Eigen::Index out_width() const { return self_weight.rows(); }

    Matrix pre(const Matrix& x, const Matrix& aggregated) const {
        Matrix p = x * self_weight.transpose() + aggregated * neighbor_weight.transpose();
        p.rowwise() += bias.col(0).transpose();
        return p;
    }

    Matrix backward(const Matrix& x, const Matrix& aggregated, const SparseOp& op, const Matrix& dpre,
                    GraphLayer& grad) const {
        grad.self_weight.noalias() += dpre.transpose() * x;
        grad.neighbor_weight.noalias() += dpre.transpose() * aggregated;
        grad.bias.noalias() += dpre.colwise().sum().transpose();
        Matrix through = dpre * neighbor_weight;
        Matrix dx = dpre * self_weight;
        dx += op.transpose() * through;
        return dx;
    }

    void init(Rng& rng) {
        xavier(self_weight, rng);
        xavier(neighbor_weight, rng);
        bias.setZero();
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".self_weight", self_weight);
        f(prefix + ".neighbor_weight", neighbor_weight);
        f(prefix + ".bias", bias);
    }
    template <typename F>
    void visit(const std::string& prefix, F&& f) const {
        f(prefix + ".self_weight", self_weight);
        f(prefix + ".neighbor_weight", neighbor_weight);
        f(prefix + ".bias", bias);
    }
};

/**
 * @brief MLP with `tanh` hidden layers and a linear scalar output.
 *
 * With no hidden layers this is a single affine map.
 */
struct Mlp {
    std::vector<Dense> hidden;
    Dense output;

    Mlp() = default;
    Mlp(Eigen::Index in, std::size_t hidden_width, std::size_t hidden_layers) {
        Eigen::Index width = in;
        for (std::size_t l = 0; l < hidden_layers; ++l) {
            hidden.emplace_back(static_cast<Eigen::Index>(hidden_width), width);
            width = static_cast<Eigen::Index>(hidden_width);
        }
        output = Dense(1, width);
    }

    struct Cache {
        std::vector<Matrix> inputs; // input of each hidden layer, then of the output layer
    };

    /** Scalar output per row of `z`. */
    Vector forward(const Matrix& z, Cache* cache = nullptr) const {
        Matrix cur = z;
        if (cache) {
            cache->inputs.clear();
        }
        for (const auto& layer : hidden) {
            if (cache) {
                cache->inputs.push_back(cur);
            }
            cur = activate(Activation::tanh, layer.pre(cur));
        }
        if (cache) {
            cache->inputs.push_back(cur);
        }
        return output.pre(cur).col(0);
    }

    /** Returns d(loss)/d(z) given d(loss)/d(output). */
    Matrix backward(const Cache& cache, const Vector& dout, Mlp& grad) const {
        Matrix d = dout;
        d = output.backward(cache.inputs.back(), d, grad.output);
        for (std::size_t l = hidden.size(); l-- > 0;) {
            // the stored input of layer l+1 is the tanh output of layer l
            d = activation_backward(Activation::tanh, cache.inputs[l + 1], d);
            d = hidden[l].backward(cache.inputs[l], d, grad.hidden[l]);
        }
        return d;
    }

    void init(Rng& rng) {
        for (auto& h : hidden) {
            h.init(rng);
        }
        output.init(rng);
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        for (std::size_t l = 0; l < hidden.size(); ++l) {
            hidden[l].visit(prefix + ".hidden" + std::to_string(l), f);
        }
        output.visit(prefix + ".output", f);
    }
    template <typename F>
    void visit(const std::string& prefix, F&& f) const {
        for (std::size_t l = 0; l < hidden.size(); ++l) {
            hidden[l].visit(prefix + ".hidden" + std::to_string(l), f);
        }
        output.visit(prefix + ".output", f);
    }
};

/**
 * @brief Omic encoder, cross-modal fusion and the two propagation stages.
 *
 * Forward: `X' = act(omic(x))`, `H' = act(cross([X' | S]))`, internal graph
 * layers over the transcript/protein operator, an optional per-entity
 * `pre_mlp`, then global graph layers over the PPI operator.
 */
struct Encoder {
    Dense omic;
    Dense cross;
    std::vector<GraphLayer> internal;
    std::optional<Dense> pre_mlp;
    std::vector<GraphLayer> global;

    struct Shape {
        Eigen::Index input_width = 1;
        Eigen::Index fused_width = 8;  // d'
        Eigen::Index output_width = 8; // d
        Eigen::Index text_width = 0;   // total width of the concatenated text embeddings
        std::size_t layers_internal = 1;
        std::size_t layers_global = 1;
        bool with_pre_mlp = true;
    };

    Encoder() = default;
    explicit Encoder(const Shape& s) :
        omic(s.fused_width, s.input_width), cross(s.fused_width, s.fused_width + s.text_width) {
        Eigen::Index width = s.fused_width;
        for (std::size_t l = 0; l < s.layers_internal; ++l) {
            internal.emplace_back(s.output_width, width);
            width = s.output_width;
        }
        if (s.with_pre_mlp) {
            pre_mlp = Dense(s.output_width, width);
            width = s.output_width;
        }
        for (std::size_t l = 0; l < s.layers_global; ++l) {
            global.emplace_back(s.output_width, width);
        }
    }

    struct Cache {
        Matrix input;
        Matrix omic_out;
        Matrix cross_in;
        Matrix cross_out;
        std::vector<Matrix> internal_in, internal_agg, internal_out;
        Matrix pre_in, pre_out;
        std::vector<Matrix> global_in, global_agg, global_out;
    };

    /** Fused states `H'` (omic encoder then cross fusion). */
    Matrix fuse(const Matrix& input, const Matrix& text, Activation act, Cache* c = nullptr) const {
        Matrix xo = activate(act, omic.pre(input));
        Matrix cat(xo.rows(), xo.cols() + text.cols());
        cat << xo, text;
        Matrix h = activate(act, cross.pre(cat));
        if (c) {
            c->input = input;
            c->omic_out = std::move(xo);
            c->cross_in = std::move(cat);
            c->cross_out = h;
        }
        return h;
    }

    Matrix run_internal(Matrix h, const SparseOp& op, Activation act, Cache* c = nullptr) const {
        for (const auto& layer : internal) {
            Matrix agg = op * h;
            Matrix out = activate(act, layer.pre(h, agg));
            if (c) {
                c->internal_in.push_back(std::move(h));
                c->internal_agg.push_back(std::move(agg));
                c->internal_out.push_back(out);
            }
            h = std::move(out);
        }
        return h;
    }

    Matrix run_pre_mlp(Matrix h, Activation act, Cache* c = nullptr) const {
        if (!pre_mlp) {
            return h;
        }
        Matrix out = activate(act, pre_mlp->pre(h));
        if (c) {
            c->pre_in = std::move(h);
            c->pre_out = out;
        }
        return out;
    }

    Matrix run_global(Matrix h, const SparseOp& op, Activation act, Cache* c = nullptr) const {
        for (const auto& layer : global) {
            Matrix agg = op * h;
            Matrix out = activate(act, layer.pre(h, agg));
            if (c) {
                c->global_in.push_back(std::move(h));
                c->global_agg.push_back(std::move(agg));
                c->global_out.push_back(out);
            }
            h = std::move(out);
        }
        return h;
    }

    Matrix forward(const Matrix& input, const Matrix& text, const SparseOp& internal_op, const SparseOp& global_op,
                   Activation act, Cache* c = nullptr) const {
        if (c) {
            *c = Cache{};
        }
        Matrix h = fuse(input, text, act, c);
        h = run_internal(std::move(h), internal_op, act, c);
        h = run_pre_mlp(std::move(h), act, c);
        return run_global(std::move(h), global_op, act, c);
    }

    /** Accumulates parameter gradients; returns d(loss)/d(input). */
    Matrix backward(const Cache& c, const SparseOp& internal_op, const SparseOp& global_op, Activation act,
                    Matrix dout, Encoder& grad) const {
        for (std::size_t l = global.size(); l-- > 0;) {
            Matrix dpre = activation_backward(act, c.global_out[l], dout);
            dout = global[l].backward(c.global_in[l], c.global_agg[l], global_op, dpre, grad.global[l]);
        }
        if (pre_mlp) {
            Matrix dpre = activation_backward(act, c.pre_out, dout);
            dout = pre_mlp->backward(c.pre_in, dpre, *grad.pre_mlp);
        }
        for (std::size_t l = internal.size(); l-- > 0;) {
            Matrix dpre = activation_backward(act, c.internal_out[l], dout);
            dout = internal[l].backward(c.internal_in[l], c.internal_agg[l], internal_op, dpre, grad.internal[l]);
        }
        Matrix dpre = activation_backward(act, c.cross_out, dout);
        Matrix dcat = cross.backward(c.cross_in, dpre, grad.cross);
        Matrix dxo = dcat.leftCols(c.omic_out.cols());
        dpre = activation_backward(act, c.omic_out, dxo);
        return omic.backward(c.input, dpre, grad.omic);
    }

    void init(Rng& rng) {
        omic.init(rng);
        cross.init(rng);
        for (auto& l : internal) {
            l.init(rng);
        }
        if (pre_mlp) {
            pre_mlp->init(rng);
        }
        for (auto& l : global) {
            l.init(rng);
        }
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        omic.visit(prefix + ".omic", f);
        cross.visit(prefix + ".cross", f);
        for (std::size_t l = 0; l < internal.size(); ++l) {
            internal[l].visit(prefix + ".internal" + std::to_string(l), f);
        }
        if (pre_mlp) {
            pre_mlp->visit(prefix + ".pre_mlp", f);
        }
        for (std::size_t l = 0; l < global.size(); ++l) {
            global[l].visit(prefix + ".global" + std::to_string(l), f);
        }
    }
    template <typename F>
    void visit(const std::string& prefix, F&& f) const {
        omic.visit(prefix + ".omic", f);
        cross.visit(prefix + ".cross", f);
        for (std::size_t l = 0; l < internal.size(); ++l) {
            internal[l].visit(prefix + ".internal" + std::to_string(l), f);
        }
        if (pre_mlp) {
            pre_mlp->visit(prefix + ".pre_mlp", f);
        }
        for (std::size_t l = 0; l < global.size(); ++l) {
            global[l].visit(prefix + ".global" + std::to_string(l), f);
        }
    }
};

/** Same structure as `p`, every tensor zero. */
template <typename Params>
Params zeros_like(const Params& p) {
    Params z = p;
    z.visit("", [](const std::string&, Matrix& m) { m.setZero(); });
    return z;
}

/** `p += scale * g`, tensor by tensor. Both must share a structure. */
template <typename Params>
void axpy(Params& p, const Params& g, double scale) {
    std::vector<const Matrix*> grads;
    g.visit("", [&](const std::string&, const Matrix& m) { grads.push_back(&m); });
    std::size_t i = 0;
    p.visit("", [&](const std::string&, Matrix& m) { m += scale * *grads[i++]; });
}

template <typename Params>
bool all_finite(const Params& p) {
    bool ok = true;
    p.visit("", [&](const std::string&, const Matrix& m) { ok = ok && m.allFinite(); });
    return ok;
}

/**
 * Mean-over-neighbors operator: row i averages the rows listed in
 * `neighbors[i]`; rows with no neighbors are zero.
 */
inline SparseOp mean_operator(const std::vector<std::vector<std::size_t>>& neighbors) {
    const auto n = static_cast<Eigen::Index>(neighbors.size());
    std::vector<Eigen::Triplet<double>> trips;
    for (std::size_t i = 0; i < neighbors.size(); ++i) {
        const double w = neighbors[i].empty() ? 0.0 : 1.0 / static_cast<double>(neighbors[i].size());
        for (std::size_t j : neighbors[i]) {
            trips.emplace_back(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j), w);
        }
    }
    SparseOp op(n, n);
    op.setFromTriplets(trips.begin(), trips.end());
    return op;
}

/**
 * Symmetric-normalized adjacency with self-loops,
 * `D^-1/2 (A + I) D^-1/2`, for an undirected graph given as neighbor lists.
 */
inline SparseOp symmetric_operator(const std::vector<std::vector<std::size_t>>& neighbors) {
    const auto n = static_cast<Eigen::Index>(neighbors.size());
    std::vector<double> inv_sqrt(neighbors.size());
    for (std::size_t i = 0; i < neighbors.size(); ++i) {
        inv_sqrt[i] = 1.0 / std::sqrt(static_cast<double>(neighbors[i].size() + 1));
    }
    std::vector<Eigen::Triplet<double>> trips;
    for (std::size_t i = 0; i < neighbors.size(); ++i) {
        trips.emplace_back(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i), inv_sqrt[i] * inv_sqrt[i]);
        for (std::size_t j : neighbors[i]) {
            trips.emplace_back(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j), inv_sqrt[i] * inv_sqrt[j]);
        }
    }
    SparseOp op(n, n);
    op.setFromTriplets(trips.begin(), trips.end());
    return op;
}

} // namespace celltosg::nn

#endif
