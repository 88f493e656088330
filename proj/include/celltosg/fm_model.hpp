#ifndef CELLTOSG_FM_MODEL_HPP
#define CELLTOSG_FM_MODEL_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "graph_builder.hpp"
#include "nn.hpp"
#include "stats.hpp"

/**
 * @file fm_model.hpp
 * @brief Masked-edge self-supervised pretraining of the graph foundation model.
 *
 * Each sample (cell) is one scalar feature per entity. Parameters are shared
 * across samples. The encoder fuses omic and text embeddings, propagates over
 * transcript -> protein edges, applies a per-entity MLP and propagates over
 * the visible PPI edges. Two decoders read the final embeddings: an edge
 * decoder `sigmoid(MLP(h_i * h_j))` and a degree regressor `MLP(h_m)`.
 */

namespace celltosg::fm {

using Edge = std::pair<std::size_t, std::size_t>;

/** Masking ratio intended for the full-size PPI graph. */
inline constexpr double full_scale_mask_ratio = 1e-5;

/** Probabilities are clamped to [eps, 1 - eps] before taking logs. */
inline constexpr double probability_floor = 1e-7;

struct ModelConfig {
    std::size_t d_prime = 16; ///< fusion width
    std::size_t d = 16;       ///< embedding width
    double mask_ratio = 0.1;
    double lambda_edge = 1.0;
    double lambda_deg = 1.0;
    /** Negatives per visible positive edge. */
    double neg_ratio = 1.0;
    std::size_t layers_internal = 1;
    std::size_t layers_global = 2;
    /** Hidden width of both decoders; 0 makes them a single affine map. */
    std::size_t decoder_hidden = 16;
    double learning_rate = 0.05;
    std::size_t epochs = 100;
    std::uint64_t seed = 0;
    /** Let transcripts also aggregate from their proteins. */
    bool internal_undirected = false;
    bool resample_negatives = true;
    /** Run the finite-difference check on a micro-instance before training. */
    bool check_gradients = true;
    nn::Activation activation = nn::Activation::tanh;

    void validate() const {
        if (d_prime == 0 || d == 0) {
            throw InputError("model config: widths must be at least 1");
        }
        if (!(mask_ratio > 0 && mask_ratio < 1)) {
            throw InputError("model config: mask_ratio must lie in (0, 1)");
        }
        if (!(lambda_edge > 0) || !(lambda_deg > 0)) {
            throw InputError("model config: loss weights must be positive");
        }
        if (!(neg_ratio > 0)) {
            throw InputError("model config: neg_ratio must be positive");
        }
        if (layers_internal == 0) {
            throw InputError("model config: need at least one internal layer");
        }
        if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) {
            throw InputError("model config: learning_rate must be finite and non-negative");
        }
    }

    nlohmann::json to_json() const {
        return {{"d_prime", d_prime},
                {"d", d},
                {"mask_ratio", mask_ratio},
                {"lambda_edge", lambda_edge},
                {"lambda_deg", lambda_deg},
                {"neg_ratio", neg_ratio},
                {"layers_internal", layers_internal},
                {"layers_global", layers_global},
                {"decoder_hidden", decoder_hidden},
                {"learning_rate", learning_rate},
                {"epochs", epochs},
                {"seed", seed},
                {"internal_undirected", internal_undirected},
                {"resample_negatives", resample_negatives},
                {"check_gradients", check_gradients},
                {"activation", activation == nn::Activation::tanh ? "tanh" : "identity"}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        try {
            c.d_prime = j.value("d_prime", c.d_prime);
            c.d = j.value("d", c.d);
            c.mask_ratio = j.value("mask_ratio", c.mask_ratio);
            c.lambda_edge = j.value("lambda_edge", c.lambda_edge);
            c.lambda_deg = j.value("lambda_deg", c.lambda_deg);
            c.neg_ratio = j.value("neg_ratio", c.neg_ratio);
            c.layers_internal = j.value("layers_internal", c.layers_internal);
            c.layers_global = j.value("layers_global", c.layers_global);
            c.decoder_hidden = j.value("decoder_hidden", c.decoder_hidden);
            c.learning_rate = j.value("learning_rate", c.learning_rate);
            c.epochs = j.value("epochs", c.epochs);
            c.seed = j.value("seed", c.seed);
            c.internal_undirected = j.value("internal_undirected", c.internal_undirected);
            c.resample_negatives = j.value("resample_negatives", c.resample_negatives);
            c.check_gradients = j.value("check_gradients", c.check_gradients);
            c.activation = j.value("activation", std::string("tanh")) == "identity" ? nn::Activation::identity
                                                                                    : nn::Activation::tanh;
        } catch (const nlohmann::json::exception& e) {
            throw InputError(std::string("model config: ") + e.what());
        }
        return c;
    }
};

/**
 * @brief All trainable tensors. Shapes depend on the config and the text
 * embedding width, not on the graph size.
 */
struct ModelParams {
    nn::Encoder encoder;
    nn::Mlp edge_decoder;
    nn::Mlp degree_decoder;

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        encoder.visit(prefix + "encoder", f);
        edge_decoder.visit(prefix + "edge_decoder", f);
        degree_decoder.visit(prefix + "degree_decoder", f);
    }
    template <typename F>
    void visit(const std::string& prefix, F&& f) const {
        encoder.visit(prefix + "encoder", f);
        edge_decoder.visit(prefix + "edge_decoder", f);
        degree_decoder.visit(prefix + "degree_decoder", f);
    }
};

/** Zero-initialized parameters for `cfg` with text embeddings of width `text_dim` (per field). */
inline ModelParams make_params(const ModelConfig& cfg, std::size_t text_dim) {
    nn::Encoder::Shape shape;
    shape.input_width = 1;
    shape.fused_width = static_cast<Eigen::Index>(cfg.d_prime);
    shape.output_width = static_cast<Eigen::Index>(cfg.d);
    shape.text_width = static_cast<Eigen::Index>(3 * text_dim);
    shape.layers_internal = cfg.layers_internal;
    shape.layers_global = cfg.layers_global;
    shape.with_pre_mlp = true;
    ModelParams p;
    p.encoder = nn::Encoder(shape);
    const std::size_t hidden_layers = cfg.decoder_hidden ? 1 : 0;
    p.edge_decoder = nn::Mlp(static_cast<Eigen::Index>(cfg.d), cfg.decoder_hidden, hidden_layers);
    p.degree_decoder = nn::Mlp(static_cast<Eigen::Index>(cfg.d), cfg.decoder_hidden, hidden_layers);
    return p;
}

/** Xavier-initialized parameters drawn from `rng`. */
inline ModelParams init_params(const ModelConfig& cfg, std::size_t text_dim, Rng& rng) {
    ModelParams p = make_params(cfg, text_dim);
    p.encoder.init(rng);
    p.edge_decoder.init(rng);
    p.degree_decoder.init(rng);
    return p;
}

/** Text embeddings side by side: `[names | descriptions | sequences]`. */
inline Matrix concat_text(const TextEmbeddings& t) {
    Matrix out(t.names.rows(), t.names.cols() + t.descriptions.cols() + t.sequences.cols());
    out << t.names, t.descriptions, t.sequences;
    return out;
}

/**
 * Aggregation operator for internal propagation: each protein averages its
 * transcripts. When `undirected`, transcripts also average their proteins.
 */
inline nn::SparseOp internal_operator(std::size_t num_entities, std::span<const Edge> internal, bool undirected) {
    std::vector<std::vector<std::size_t>> nb(num_entities);
    for (const auto& [t, p] : internal) {
        nb[p].push_back(t);
        if (undirected) {
            nb[t].push_back(p);
        }
    }
    return nn::mean_operator(nb);
}

/** Undirected, deduplicated neighbor lists over `edges`. */
inline std::vector<std::vector<std::size_t>> undirected_neighbors(std::size_t num_entities, std::span<const Edge> edges) {
    std::vector<std::set<std::size_t>> sets(num_entities);
    for (const auto& [a, b] : edges) {
        if (a != b) {
            sets[a].insert(b);
            sets[b].insert(a);
        }
    }
    std::vector<std::vector<std::size_t>> nb(num_entities);
    for (std::size_t i = 0; i < num_entities; ++i) {
        nb[i].assign(sets[i].begin(), sets[i].end());
    }
    return nb;
}

/** Operator for global propagation over the visible PPI edges (treated as undirected). */
inline nn::SparseOp global_operator(std::size_t num_entities, std::span<const Edge> visible) {
    return nn::symmetric_operator(undirected_neighbors(num_entities, visible));
}

/** Undirected PPI degree of every entity (transcripts have degree 0). */
inline Vector ppi_degrees(std::size_t num_entities, std::span<const Edge> ppi) {
    const auto nb = undirected_neighbors(num_entities, ppi);
    Vector deg(static_cast<Eigen::Index>(num_entities));
    for (std::size_t i = 0; i < num_entities; ++i) {
        deg(static_cast<Eigen::Index>(i)) = static_cast<double>(nb[i].size());
    }
    return deg;
}

/**
 * @brief Split of the PPI edges into masked and visible parts, plus sampled
 * non-edges.
 */
struct MaskPlan {
    std::vector<Edge> masked;
    std::vector<Edge> visible;
    std::vector<Edge> negatives;
};

inline std::pair<std::size_t, std::size_t> unordered(const Edge& e) {
    return {std::min(e.first, e.second), std::max(e.first, e.second)};
}

/**
 * Draw `count` distinct protein pairs that are not PPI edges in either
 * direction and not self-pairs. Fewer are returned if the graph has fewer
 * non-edges.
 */
inline std::vector<Edge> sample_negatives(std::size_t first_protein, std::size_t num_entities, std::span<const Edge> ppi,
                                          std::size_t count, Rng& rng) {
    std::set<std::pair<std::size_t, std::size_t>> edges;
    for (const auto& e : ppi) {
        edges.insert(unordered(e));
    }
    const std::size_t np = num_entities - first_protein;
    const std::size_t all_pairs = np < 2 ? 0 : np * (np - 1) / 2;
    const std::size_t available = all_pairs - std::min(all_pairs, edges.size());
    count = std::min(count, available);

    std::vector<Edge> out;
    std::set<std::pair<std::size_t, std::size_t>> taken;
    if (count * 2 > available) {
        // dense regime: enumerate the complement and sample from it
        std::vector<Edge> complement;
        for (std::size_t a = first_protein; a < num_entities; ++a) {
            for (std::size_t b = a + 1; b < num_entities; ++b) {
                if (!edges.count({a, b})) {
                    complement.emplace_back(a, b);
                }
            }
        }
        return celltosg::detail::sample_without_replacement(std::move(complement), count, rng);
    }
    while (out.size() < count) {
        const std::size_t a = first_protein + celltosg::detail::uniform_index(rng, np);
        const std::size_t b = first_protein + celltosg::detail::uniform_index(rng, np);
        if (a == b) {
            continue;
        }
        const auto key = unordered({a, b});
        if (edges.count(key) || !taken.insert(key).second) {
            continue;
        }
        out.emplace_back(a, b);
    }
    return out;
}

/**
 * Mask each PPI edge independently with probability `p`. An edge and its
 * reciprocal share one draw so that a masked interaction cannot leak through
 * its reverse direction. Negatives number `round(neg_ratio * |visible|)`.
 */
inline MaskPlan sample_mask(const TosgGraph& graph, double p, double neg_ratio, Rng& rng) {
    const auto& ppi = graph.edges.ppi;
    if (ppi.empty()) {
        throw InputError("sample_mask: graph has no PPI edges");
    }
    if (!(p >= 0 && p <= 1)) {
        throw InputError("sample_mask: p must lie in [0, 1]");
    }
    std::map<std::pair<std::size_t, std::size_t>, bool> decision;
    MaskPlan plan;
    for (const auto& e : ppi) {
        const auto key = unordered(e);
        auto it = decision.find(key);
        if (it == decision.end()) {
            it = decision.emplace(key, celltosg::detail::uniform01(rng) < p).first;
        }
        (it->second ? plan.masked : plan.visible).push_back(e);
    }
    const auto count = static_cast<std::size_t>(std::llround(neg_ratio * static_cast<double>(plan.visible.size())));
    plan.negatives = sample_negatives(graph.entities.num_transcripts(), graph.num_entities(), ppi, count, rng);
    return plan;
}

/** Input column for sample `n`: one scalar per entity. */
inline Matrix sample_input(const Matrix& features, Eigen::Index n) { return features.row(n).transpose(); }

/** Fused embeddings `H'` for one sample. */
inline Matrix encode(const ModelParams& params, const Matrix& x, const Matrix& text, nn::Activation act = nn::Activation::tanh) {
    if (!x.allFinite() || !text.allFinite()) {
        throw InputError("encode: non-finite input");
    }
    return params.encoder.fuse(x, text, act);
}

inline Matrix propagate_internal(const ModelParams& params, const Matrix& fused, const nn::SparseOp& op,
                                 nn::Activation act = nn::Activation::tanh) {
    return params.encoder.run_internal(fused, op, act);
}

/** `pre_mlp` followed by the global layers over `op` (built from visible edges only). */
inline Matrix propagate_global(const ModelParams& params, const Matrix& internal_states, const nn::SparseOp& op,
                               nn::Activation act = nn::Activation::tanh) {
    return params.encoder.run_global(params.encoder.run_pre_mlp(internal_states, act), op, act);
}

inline double sigmoid(double s) { return 1.0 / (1.0 + std::exp(-s)); }

/** Edge probability `sigmoid(MLP(h_i * h_j))`; symmetric in its arguments. */
inline double edge_probability(const nn::Mlp& decoder, const Vector& hi, const Vector& hj) {
    Matrix z = hi.cwiseProduct(hj).transpose();
    return sigmoid(decoder.forward(z)(0));
}

/** Edge probabilities for a list of pairs over embeddings `h`. */
inline Vector edge_probabilities(const nn::Mlp& decoder, const Matrix& h, std::span<const Edge> pairs) {
    Matrix z(static_cast<Eigen::Index>(pairs.size()), h.cols());
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        z.row(static_cast<Eigen::Index>(k)) = h.row(static_cast<Eigen::Index>(pairs[k].first))
                                                  .cwiseProduct(h.row(static_cast<Eigen::Index>(pairs[k].second)));
    }
    Vector s = decoder.forward(z);
    return s.unaryExpr([](double v) { return sigmoid(v); });
}

struct LossParts {
    double total = 0;
    double edge = 0;
    double deg = 0;
};

/** Operators and targets that stay fixed while training on one mask plan. */
struct TrainingContext {
    nn::SparseOp internal_op;
    nn::SparseOp global_op;
    Vector degrees;
    Matrix text;
};

inline TrainingContext make_context(const TosgGraph& graph, const MaskPlan& plan, const TextEmbeddings& text,
                                    const ModelConfig& cfg) {
    const std::size_t m = graph.num_entities();
    if (static_cast<std::size_t>(text.names.rows()) != m) {
        throw InputError("text embeddings have " + std::to_string(text.names.rows()) + " rows, graph has " +
                         std::to_string(m) + " entities");
    }
    return {internal_operator(m, graph.edges.internal, cfg.internal_undirected), global_operator(m, plan.visible),
            ppi_degrees(m, graph.edges.ppi), concat_text(text)};
}

namespace detail {

// BCE over one pair list. `positive` selects log(u) vs log(1 - u).
// Adds d(loss)/d(h) into dh when grad is requested.
inline double edge_term(const nn::Mlp& decoder, const Matrix& h, std::span<const Edge> pairs, bool positive, double scale,
                        nn::Mlp* grad, Matrix* dh) {
    if (pairs.empty()) {
        return 0;
    }
    const auto count = static_cast<Eigen::Index>(pairs.size());
    Matrix z(count, h.cols());
    for (Eigen::Index k = 0; k < count; ++k) {
        z.row(k) = h.row(static_cast<Eigen::Index>(pairs[static_cast<std::size_t>(k)].first))
                       .cwiseProduct(h.row(static_cast<Eigen::Index>(pairs[static_cast<std::size_t>(k)].second)));
    }
    nn::Mlp::Cache cache;
    const Vector s = decoder.forward(z, grad ? &cache : nullptr);
    double sum = 0;
    Vector ds(count);
    for (Eigen::Index k = 0; k < count; ++k) {
        const double u = sigmoid(s(k));
        const double uc = std::clamp(u, probability_floor, 1.0 - probability_floor);
        const bool clamped = (uc != u);
        if (positive) {
            sum += std::log(uc);
            ds(k) = clamped ? 0.0 : -(1.0 - u);
        } else {
            sum += std::log(1.0 - uc);
            ds(k) = clamped ? 0.0 : u;
        }
    }
    const double mean = sum / static_cast<double>(count);
    if (grad) {
        ds *= scale / static_cast<double>(count);
        const Matrix dz = decoder.backward(cache, ds, *grad);
        for (Eigen::Index k = 0; k < count; ++k) {
            const auto i = static_cast<Eigen::Index>(pairs[static_cast<std::size_t>(k)].first);
            const auto j = static_cast<Eigen::Index>(pairs[static_cast<std::size_t>(k)].second);
            const Eigen::RowVectorXd hi = h.row(i);
            dh->row(i) += dz.row(k).cwiseProduct(h.row(j));
            dh->row(j) += dz.row(k).cwiseProduct(hi);
        }
    }
    return mean;
}

} // namespace detail

/**
 * Per-sample losses from final embeddings `h`:
 * `L_edge = -(mean log u(E+) + mean log(1 - u(E-)))`,
 * `L_deg = mean over entities of (v(h_m) - deg(m))^2`.
 */
inline LossParts sample_loss(const ModelParams& params, const ModelConfig& cfg, const Matrix& h, std::span<const Edge> positives,
                             std::span<const Edge> negatives, const Vector& degrees) {
    LossParts parts;
    const double lp = detail::edge_term(params.edge_decoder, h, positives, true, 0, nullptr, nullptr);
    const double ln = detail::edge_term(params.edge_decoder, h, negatives, false, 0, nullptr, nullptr);
    parts.edge = -(lp + ln);
    const Vector v = params.degree_decoder.forward(h);
    parts.deg = (v - degrees).squaredNorm() / static_cast<double>(h.rows());
    parts.total = cfg.lambda_edge * parts.edge + cfg.lambda_deg * parts.deg;
    return parts;
}

/**
 * Dataset-averaged loss `L_pre` over all samples (rows of `features`), and
 * optionally its gradient. Final embeddings of each sample are written to
 * `embeddings` when given.
 */
inline LossParts loss_and_gradient(const ModelParams& params, const ModelConfig& cfg, const TrainingContext& ctx,
                                   const Matrix& features, std::span<const Edge> positives, std::span<const Edge> negatives,
                                   ModelParams* grad, std::vector<Matrix>* embeddings = nullptr) {
    const auto n = features.rows();
    if (n == 0) {
        throw InputError("loss: no samples");
    }
    if (features.cols() != ctx.degrees.size()) {
        throw InputError("loss: feature width does not match the graph");
    }
    if (embeddings) {
        embeddings->assign(static_cast<std::size_t>(n), Matrix());
    }
    const double weight = 1.0 / static_cast<double>(n);
    LossParts total;
    nn::Encoder::Cache cache;
    for (Eigen::Index s = 0; s < n; ++s) {
        const Matrix x = sample_input(features, s);
        const Matrix h = params.encoder.forward(x, ctx.text, ctx.internal_op, ctx.global_op, cfg.activation, grad ? &cache : nullptr);

        Matrix dh;
        if (grad) {
            dh = Matrix::Zero(h.rows(), h.cols());
        }
        const double edge_scale = weight * cfg.lambda_edge;
        const double lp = detail::edge_term(params.edge_decoder, h, positives, true, edge_scale, grad ? &grad->edge_decoder : nullptr,
                                            grad ? &dh : nullptr);
        const double ln = detail::edge_term(params.edge_decoder, h, negatives, false, edge_scale,
                                            grad ? &grad->edge_decoder : nullptr, grad ? &dh : nullptr);
        nn::Mlp::Cache deg_cache;
        const Vector v = params.degree_decoder.forward(h, grad ? &deg_cache : nullptr);
        const Vector r = v - ctx.degrees;
        const double ldeg = r.squaredNorm() / static_cast<double>(h.rows());

        const double ledge = -(lp + ln);
        total.edge += weight * ledge;
        total.deg += weight * ldeg;
        total.total += weight * (cfg.lambda_edge * ledge + cfg.lambda_deg * ldeg);

        if (grad) {
            const Vector dv = r * (2.0 * weight * cfg.lambda_deg / static_cast<double>(h.rows()));
            dh += params.degree_decoder.backward(deg_cache, dv, grad->degree_decoder);
            params.encoder.backward(cache, ctx.internal_op, ctx.global_op, cfg.activation, std::move(dh), grad->encoder);
        }
        if (embeddings) {
            (*embeddings)[static_cast<std::size_t>(s)] = h;
        }
    }
    return total;
}

struct Reconstruction {
    double auc = 0;
    /** Share of masked edges scored above 0.5. */
    double recovered_fraction = 0;
};

/**
 * Score masked edges against negatives. Each pair's score is its edge
 * probability averaged over samples.
 */
inline Reconstruction evaluate_reconstruction(const std::vector<Matrix>& embeddings, std::span<const Edge> masked,
                                              std::span<const Edge> negatives, const nn::Mlp& decoder) {
    if (masked.empty()) {
        throw InputError("evaluate_reconstruction: no masked edges");
    }
    if (negatives.empty()) {
        throw InputError("evaluate_reconstruction: no negative pairs");
    }
    if (embeddings.empty()) {
        throw InputError("evaluate_reconstruction: no samples");
    }
    Vector pos = Vector::Zero(static_cast<Eigen::Index>(masked.size()));
    Vector neg = Vector::Zero(static_cast<Eigen::Index>(negatives.size()));
    for (const auto& h : embeddings) {
        pos += edge_probabilities(decoder, h, masked);
        neg += edge_probabilities(decoder, h, negatives);
    }
    pos /= static_cast<double>(embeddings.size());
    neg /= static_cast<double>(embeddings.size());
    Reconstruction r;
    r.auc = stats::auc(std::span<const double>(pos.data(), static_cast<std::size_t>(pos.size())),
                       std::span<const double>(neg.data(), static_cast<std::size_t>(neg.size())));
    r.recovered_fraction = static_cast<double>((pos.array() > 0.5).count()) / static_cast<double>(pos.size());
    return r;
}

/** Per-tensor comparison of analytic and finite-difference gradients. */
struct GradientCheck {
    struct Entry {
        std::string name;
        double relative_error = 0;
    };
    std::vector<Entry> tensors;

    double max_relative_error() const {
        double m = 0;
        for (const auto& t : tensors) {
            m = std::max(m, t.relative_error);
        }
        return m;
    }
};

/**
 * Compare `analytic` with central differences of `loss` around `params`,
 * perturbing every scalar by +/- `step`. The error per tensor is
 * `|g_a - g_n| / max(|g_a| + |g_n|, 1e-12)` in the Euclidean norm.
 */
template <typename Params, typename LossFn>
GradientCheck finite_difference_check(Params params, const Params& analytic, LossFn&& loss, double step = 1e-5) {
    std::vector<Matrix*> slots;
    std::vector<std::string> names;
    params.visit("", [&](const std::string& name, Matrix& m) {
        slots.push_back(&m);
        names.push_back(name);
    });
    std::vector<const Matrix*> ana;
    analytic.visit("", [&](const std::string&, const Matrix& m) { ana.push_back(&m); });

    GradientCheck out;
    for (std::size_t t = 0; t < slots.size(); ++t) {
        Matrix& m = *slots[t];
        Matrix numeric(m.rows(), m.cols());
        for (Eigen::Index k = 0; k < m.size(); ++k) {
            const double orig = m.data()[k];
            m.data()[k] = orig + step;
            const double up = loss(params);
            m.data()[k] = orig - step;
            const double down = loss(params);
            m.data()[k] = orig;
            numeric.data()[k] = (up - down) / (2 * step);
        }
        const double diff = (numeric - *ana[t]).norm();
        const double denom = std::max(numeric.norm() + ana[t]->norm(), 1e-12);
        out.tensors.push_back({names[t], diff / denom});
    }
    return out;
}

/**
 * @brief A fixed 6-entity, 8-edge instance (2 transcripts, 4 proteins,
 * 3 internal and 5 PPI edges) used to validate gradients.
 */
struct MicroInstance {
    TosgGraph graph;
    Matrix features;
    TextEmbeddings text;
    MaskPlan plan;
};

inline MicroInstance micro_instance(std::size_t text_dim = 3) {
    MicroInstance mi;
    // entities: t0=0, t1=1, p0=2, p1=3, p2=4, p3=5; p3 has no transcript
    auto& ent = mi.graph.entities;
    ent.transcript_ids = {"t0", "t1"};
    ent.protein_ids = {"p0", "p1", "p2", "p3"};
    ent.feature_ids = {"f0", "f1"};
    ent.feature_to_transcript = {0, 1};
    mi.graph.edges.internal = {{0, 2}, {1, 3}, {1, 4}};
    mi.graph.edges.ppi = {{2, 3}, {3, 4}, {4, 5}, {2, 5}, {2, 4}};
    mi.graph.text = TextBundle::blank(6);

    Rng rng(20240607);
    mi.features = Matrix(2, 6);
    for (Eigen::Index i = 0; i < mi.features.size(); ++i) {
        mi.features.data()[i] = 2.0 * celltosg::detail::uniform01(rng) - 1.0;
    }
    auto fill = [&](Matrix& m) {
        m.resize(6, static_cast<Eigen::Index>(text_dim));
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = celltosg::detail::standard_normal(rng) * 0.5;
        }
    };
    fill(mi.text.names);
    fill(mi.text.descriptions);
    fill(mi.text.sequences);

    const auto& e = mi.graph.edges.ppi;
    mi.plan.masked = {e[2]};
    mi.plan.visible = {e[0], e[1], e[3], e[4]};
    mi.plan.negatives = {{3, 5}};
    return mi;
}

/**
 * Finite-difference check of `loss_and_gradient` on the micro-instance using
 * the architecture of `cfg` with `d = d' = 4`.
 */
inline GradientCheck gradient_check(ModelConfig cfg, double step = 1e-5) {
    cfg.d = 4;
    cfg.d_prime = 4;
    if (cfg.decoder_hidden) {
        cfg.decoder_hidden = 4;
    }
    const MicroInstance mi = micro_instance();
    const TrainingContext ctx = make_context(mi.graph, mi.plan, mi.text, cfg);
    Rng rng(cfg.seed ^ 0x5eedULL);
    ModelParams params = init_params(cfg, static_cast<std::size_t>(mi.text.dim()), rng);
    // non-zero biases so that every tensor carries gradient signal
    params.visit("", [&](const std::string& name, Matrix& m) {
        if (name.ends_with(".bias")) {
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                m.data()[i] = 0.2 * (2.0 * celltosg::detail::uniform01(rng) - 1.0);
            }
        }
    });

    ModelParams grad = nn::zeros_like(params);
    loss_and_gradient(params, cfg, ctx, mi.features, mi.plan.visible, mi.plan.negatives, &grad);
    return finite_difference_check(params, grad, [&](const ModelParams& p) {
        return loss_and_gradient(p, cfg, ctx, mi.features, mi.plan.visible, mi.plan.negatives, nullptr).total;
    }, step);
}

/** Thrown when the training loss stops being finite. */
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(std::size_t epoch) :
        std::runtime_error("training diverged at epoch " + std::to_string(epoch)), my_epoch(epoch) {}
    std::size_t epoch() const { return my_epoch; }

private:
    std::size_t my_epoch;
};

struct EpochRecord {
    std::size_t epoch = 0;
    LossParts loss;
    /** Masked-edge AUC at the start of the epoch. */
    double auc = 0;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochRecord> history;
    MaskPlan plan;
    /** Fixed negatives used to score masked edges. */
    std::vector<Edge> eval_negatives;
    double gradient_check_error = 0;
};

/** Gradient tolerance enforced before training. */
inline constexpr double gradient_tolerance = 1e-4;

/**
 * Full-batch gradient descent on `L_pre`.
 *
 * One mask plan is drawn for the whole run; negatives are redrawn every
 * epoch unless `resample_negatives` is off. Each history entry records the
 * loss and masked-edge AUC at the parameters the epoch started from. With
 * `check_gradients`, analytic gradients are first validated on the
 * micro-instance and a mismatch aborts.
 */
inline TrainResult train(const TosgGraph& graph, const Matrix& features, const TextEmbeddings& text, const ModelConfig& cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    if (!features.allFinite()) {
        throw InputError("train: features contain non-finite values");
    }
    if (static_cast<std::size_t>(features.cols()) != graph.num_entities()) {
        throw InputError("train: feature width " + std::to_string(features.cols()) + " does not match " +
                         std::to_string(graph.num_entities()) + " entities");
    }

    TrainResult res;
    if (cfg.check_gradients) {
        const auto check = gradient_check(cfg);
        res.gradient_check_error = check.max_relative_error();
        if (!(res.gradient_check_error < gradient_tolerance)) {
            throw std::runtime_error("gradient check failed: relative error " + std::to_string(res.gradient_check_error));
        }
    }

    Rng rng(cfg.seed);
    res.params = init_params(cfg, static_cast<std::size_t>(text.dim()), rng);
    res.plan = sample_mask(graph, cfg.mask_ratio, cfg.neg_ratio, rng);
    if (!res.plan.masked.empty()) {
        res.eval_negatives = sample_negatives(graph.entities.num_transcripts(), graph.num_entities(), graph.edges.ppi,
                                              res.plan.masked.size(), rng);
    }
    const TrainingContext ctx = make_context(graph, res.plan, text, cfg);

    std::vector<Matrix> embeddings;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        if (epoch > 0 && cfg.resample_negatives) {
            res.plan.negatives = sample_negatives(graph.entities.num_transcripts(), graph.num_entities(), graph.edges.ppi,
                                                  res.plan.negatives.size(), rng);
        }
        ModelParams grad = nn::zeros_like(res.params);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = loss_and_gradient(res.params, cfg, ctx, features, res.plan.visible, res.plan.negatives, &grad, &embeddings);
        if (!std::isfinite(rec.loss.total) || !nn::all_finite(grad)) {
            throw DivergenceError(epoch);
        }
        if (!res.plan.masked.empty() && !res.eval_negatives.empty()) {
            rec.auc = evaluate_reconstruction(embeddings, res.plan.masked, res.eval_negatives, res.params.edge_decoder).auc;
        }
        res.history.push_back(rec);
        if (on_epoch) {
            on_epoch(rec);
        }
        nn::axpy(res.params, grad, -cfg.learning_rate);
    }
    return res;
}

/** Final embeddings of every sample, propagating over `visible` PPI edges. */
inline std::vector<Matrix> embed(const ModelParams& params, const ModelConfig& cfg, const TosgGraph& graph, const Matrix& features,
                                 const TextEmbeddings& text, std::span<const Edge> visible) {
    const auto m = graph.num_entities();
    const auto iop = internal_operator(m, graph.edges.internal, cfg.internal_undirected);
    const auto gop = global_operator(m, visible);
    const Matrix t = concat_text(text);
    std::vector<Matrix> out;
    for (Eigen::Index s = 0; s < features.rows(); ++s) {
        out.push_back(params.encoder.forward(sample_input(features, s), t, iop, gop, cfg.activation));
    }
    return out;
}

/** Score masked edges of a finished run against its held-out negatives. */
inline Reconstruction evaluate(const TrainResult& run, const ModelConfig& cfg, const TosgGraph& graph, const Matrix& features,
                               const TextEmbeddings& text) {
    const auto h = embed(run.params, cfg, graph, features, text, run.plan.visible);
    return evaluate_reconstruction(h, run.plan.masked, run.eval_negatives, run.params.edge_decoder);
}

inline void write_history(const std::filesystem::path& path, std::span<const EpochRecord> history) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out << "epoch,l_total,l_edge,l_deg,auc\n";
    char line[160];
    for (const auto& r : history) {
        std::snprintf(line, sizeof(line), "%zu,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.loss.total, r.loss.edge, r.loss.deg, r.auc);
        out << line;
    }
}

inline constexpr char checkpoint_magic[8] = {'C', 'T', 'O', 'S', 'G', 'F', 'M', '\0'};
inline constexpr std::uint32_t checkpoint_version = 1;

/**
 * Binary checkpoint: 8-byte magic, u32 version, u64 header length, a JSON
 * header (config, text width, tensor names and shapes, extra metadata), then
 * every tensor as little-endian float32 in declaration order, column-major.
 */
inline void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& cfg,
                            std::size_t text_dim, const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json header;
    header["config"] = cfg.to_json();
    header["text_dim"] = text_dim;
    header["seed"] = cfg.seed;
    header["extra"] = extra;
    auto& tensors = header["tensors"] = nlohmann::json::array();
    params.visit("", [&](const std::string& name, const Matrix& m) {
        tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    });
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(checkpoint_magic, sizeof(checkpoint_magic));
    const std::uint32_t version = checkpoint_version;
    out.write(reinterpret_cast<const char*>(&version), sizeof(version));
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    params.visit("", [&](const std::string&, const Matrix& m) {
        std::vector<float> buf(static_cast<std::size_t>(m.size()));
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            buf[static_cast<std::size_t>(i)] = static_cast<float>(m.data()[i]);
        }
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    });
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

struct Checkpoint {
    ModelConfig config;
    std::size_t text_dim = 0;
    ModelParams params;
    nlohmann::json extra;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    char magic[sizeof(checkpoint_magic)];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || std::memcmp(magic, checkpoint_magic, sizeof(magic)) != 0) {
        throw InputError(path.string() + ": not a model checkpoint");
    }
    if (version != checkpoint_version) {
        throw InputError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ": bad checkpoint header: " + e.what());
    }

    Checkpoint ck;
    ck.config = ModelConfig::from_json(header.at("config"));
    ck.text_dim = header.at("text_dim").get<std::size_t>();
    ck.extra = header.value("extra", nlohmann::json::object());
    ck.params = make_params(ck.config, ck.text_dim);
    const auto& tensors = header.at("tensors");
    std::size_t t = 0;
    ck.params.visit("", [&](const std::string& name, Matrix& m) {
        if (t >= tensors.size() || tensors[t].at("name") != name || tensors[t].at("rows") != m.rows() ||
            tensors[t].at("cols") != m.cols()) {
            throw InputError(path.string() + ": tensor layout does not match config at '" + name + "'");
        }
        std::vector<float> buf(static_cast<std::size_t>(m.size()));
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = buf[static_cast<std::size_t>(i)];
        }
        ++t;
    });
    if (!in || t != tensors.size()) {
        throw InputError(path.string() + ": truncated checkpoint");
    }
    return ck;
}

} // namespace celltosg::fm

#endif
