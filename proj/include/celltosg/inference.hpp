#ifndef CELLTOSG_INFERENCE_HPP
#define CELLTOSG_INFERENCE_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "common.hpp"
#include "csv.hpp"
#include "fm_model.hpp"
#include "graph_builder.hpp"
#include "nn.hpp"
#include "stats.hpp"

/**
 * @file inference.hpp
 * @brief Downstream classification on pretrained embeddings, attention
 * affinities over PPI edges, node importance and core-subgraph extraction.
 */

namespace celltosg::inference {

using fm::Edge;

/**
 * @brief Downstream encoder stack and linear classifier.
 *
 * The encoder consumes pretrained embeddings (width d) and repeats the
 * fusion, internal and global stages. Query/key maps for attention start
 * as identity and are not trained by the classification loss.
 */
struct DownstreamHead {
    nn::Encoder encoder;
    nn::Dense classifier; // classes x d
    Matrix w_query;
    Matrix w_key;

    std::size_t num_classes() const { return static_cast<std::size_t>(classifier.out_width()); }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        encoder.visit(prefix + "encoder", f);
        classifier.visit(prefix + "classifier", f);
    }
    template <typename F>
    void visit(const std::string& prefix, F&& f) const {
        encoder.visit(prefix + "encoder", f);
        classifier.visit(prefix + "classifier", f);
    }
};

struct HeadConfig {
    std::size_t num_classes = 2;
    std::size_t layers_internal = 1;
    std::size_t layers_global = 1;
    double learning_rate = 0.1;
    std::size_t epochs = 200;
    std::uint64_t seed = 0;
    nn::Activation activation = nn::Activation::tanh;

    void validate() const {
        if (num_classes < 2) {
            throw InputError("head config: need at least two classes");
        }
        if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) {
            throw InputError("head config: learning_rate must be finite and non-negative");
        }
    }
};

/** Head with zero classifier weights; encoder weights drawn from `rng`. */
inline DownstreamHead init_head(std::size_t d, const HeadConfig& cfg, Rng& rng) {
    cfg.validate();
    nn::Encoder::Shape shape;
    shape.input_width = static_cast<Eigen::Index>(d);
    shape.fused_width = static_cast<Eigen::Index>(d);
    shape.output_width = static_cast<Eigen::Index>(d);
    shape.text_width = 0;
    shape.layers_internal = cfg.layers_internal;
    shape.layers_global = cfg.layers_global;
    shape.with_pre_mlp = false;
    DownstreamHead head;
    head.encoder = nn::Encoder(shape);
    head.encoder.init(rng);
    head.classifier = nn::Dense(static_cast<Eigen::Index>(cfg.num_classes), static_cast<Eigen::Index>(d));
    head.w_query = Matrix::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    head.w_key = head.w_query;
    return head;
}

/** Propagation operators shared by all samples of one graph. */
struct GraphOps {
    nn::SparseOp internal;
    nn::SparseOp global;

    static GraphOps full(const TosgGraph& graph, bool internal_undirected = false) {
        const auto m = graph.num_entities();
        return {fm::internal_operator(m, graph.edges.internal, internal_undirected), fm::global_operator(m, graph.edges.ppi)};
    }
};

/** Pretrained embeddings `H` of every sample over the full, unmasked PPI graph. */
inline std::vector<Matrix> pretrained_embeddings(const fm::ModelParams& params, const fm::ModelConfig& cfg, const TosgGraph& graph,
                                                 const Matrix& features, const TextEmbeddings& text) {
    return fm::embed(params, cfg, graph, features, text, graph.edges.ppi);
}

inline Vector softmax(const Vector& logits) {
    const double mx = logits.maxCoeff();
    Vector e = (logits.array() - mx).exp().matrix();
    return e / e.sum();
}

/** Final downstream states `Z` (M x d) for one sample. */
inline Matrix head_states(const DownstreamHead& head, const Matrix& h, const GraphOps& ops, nn::Activation act,
                          nn::Encoder::Cache* cache = nullptr) {
    return head.encoder.forward(h, Matrix(h.rows(), 0), ops.internal, ops.global, act, cache);
}

/** Class probabilities from the mean-pooled downstream states. */
inline Vector classify(const DownstreamHead& head, const Matrix& h, const GraphOps& ops,
                       nn::Activation act = nn::Activation::tanh) {
    if (!h.allFinite()) {
        throw InputError("classify: non-finite embeddings");
    }
    const Matrix z = head_states(head, h, ops, act);
    const Matrix pooled = z.colwise().mean();
    return softmax(head.classifier.pre(pooled).row(0).transpose());
}

/** Mean cross-entropy over samples, with gradient accumulated into `grad` when given. */
inline double head_loss(const DownstreamHead& head, const std::vector<Matrix>& h, std::span<const std::size_t> labels,
                        const GraphOps& ops, nn::Activation act, DownstreamHead* grad) {
    if (h.size() != labels.size()) {
        throw InputError("head_loss: " + std::to_string(h.size()) + " samples but " + std::to_string(labels.size()) + " labels");
    }
    if (h.empty()) {
        throw InputError("head_loss: no samples");
    }
    const double weight = 1.0 / static_cast<double>(h.size());
    double loss = 0;
    nn::Encoder::Cache cache;
    for (std::size_t s = 0; s < h.size(); ++s) {
        if (labels[s] >= head.num_classes()) {
            throw InputError("label " + std::to_string(labels[s]) + " out of range for " + std::to_string(head.num_classes()) +
                             " classes");
        }
        const Matrix z = head_states(head, h[s], ops, act, grad ? &cache : nullptr);
        const Matrix pooled = z.colwise().mean();
        const Vector p = softmax(head.classifier.pre(pooled).row(0).transpose());
        loss -= weight * std::log(std::max(p(static_cast<Eigen::Index>(labels[s])), fm::probability_floor));
        if (grad) {
            Matrix dlogits = (p * weight).transpose();
            dlogits(0, static_cast<Eigen::Index>(labels[s])) -= weight;
            const Matrix dpooled = head.classifier.backward(pooled, dlogits, grad->classifier);
            Matrix dz = Matrix::Ones(z.rows(), 1) * (dpooled / static_cast<double>(z.rows()));
            head.encoder.backward(cache, ops.internal, ops.global, act, std::move(dz), grad->encoder);
        }
    }
    return loss;
}

struct HeadTrainResult {
    DownstreamHead head;
    std::vector<double> loss_history;
};

/** Full-batch gradient descent on the cross-entropy of the downstream head. */
inline HeadTrainResult train_head(const std::vector<Matrix>& h, std::span<const std::size_t> labels, const GraphOps& ops,
                                  const HeadConfig& cfg) {
    cfg.validate();
    if (h.empty()) {
        throw InputError("train_head: no samples");
    }
    for (std::size_t label : labels) {
        if (label >= cfg.num_classes) {
            throw InputError("label " + std::to_string(label) + " out of range for " + std::to_string(cfg.num_classes) + " classes");
        }
    }
    Rng rng(cfg.seed);
    HeadTrainResult res;
    res.head = init_head(static_cast<std::size_t>(h.front().cols()), cfg, rng);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        DownstreamHead grad = nn::zeros_like(res.head);
        const double loss = head_loss(res.head, h, labels, ops, cfg.activation, &grad);
        if (!std::isfinite(loss) || !nn::all_finite(grad)) {
            throw fm::DivergenceError(epoch);
        }
        res.loss_history.push_back(loss);
        nn::axpy(res.head, grad, -cfg.learning_rate);
    }
    return res;
}

/** Argmax predictions for every sample. */
inline std::vector<std::size_t> predict(const DownstreamHead& head, const std::vector<Matrix>& h, const GraphOps& ops,
                                        nn::Activation act = nn::Activation::tanh) {
    std::vector<std::size_t> out;
    for (const auto& x : h) {
        Eigen::Index best = 0;
        classify(head, x, ops, act).maxCoeff(&best);
        out.push_back(static_cast<std::size_t>(best));
    }
    return out;
}

inline double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> truth) {
    if (predicted.size() != truth.size() || truth.empty()) {
        throw InputError("accuracy: size mismatch or empty input");
    }
    std::size_t hit = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        hit += predicted[i] == truth[i];
    }
    return static_cast<double>(hit) / static_cast<double>(truth.size());
}

/**
 * Directed attention weight of every PPI edge, aligned with `ppi`.
 *
 * `score(i, j) = (Z_i Wq) . (Z_j Wk) / sqrt(d)`, kept only on PPI pairs and
 * softmax-normalized over each source's outgoing edges.
 */
inline std::vector<double> attention_affinity(const Matrix& z, const Matrix& w_query, const Matrix& w_key,
                                              std::span<const Edge> ppi) {
    if (!z.allFinite()) {
        throw InputError("attention_affinity: non-finite states");
    }
    const Matrix q = z * w_query;
    const Matrix k = z * w_key;
    const double scale = 1.0 / std::sqrt(static_cast<double>(z.cols()));
    std::vector<double> score(ppi.size());
    std::map<std::size_t, double> row_max;
    for (std::size_t e = 0; e < ppi.size(); ++e) {
        const auto [i, j] = ppi[e];
        score[e] = q.row(static_cast<Eigen::Index>(i)).dot(k.row(static_cast<Eigen::Index>(j))) * scale;
        auto [it, fresh] = row_max.emplace(i, score[e]);
        if (!fresh) {
            it->second = std::max(it->second, score[e]);
        }
    }
    std::map<std::size_t, double> row_sum;
    for (std::size_t e = 0; e < ppi.size(); ++e) {
        score[e] = std::exp(score[e] - row_max[ppi[e].first]);
        row_sum[ppi[e].first] += score[e];
    }
    for (std::size_t e = 0; e < ppi.size(); ++e) {
        score[e] /= row_sum[ppi[e].first];
    }
    return score;
}

inline std::vector<double> attention_affinity(const DownstreamHead& head, const Matrix& z, std::span<const Edge> ppi) {
    return attention_affinity(z, head.w_query, head.w_key, ppi);
}

using GenePair = std::pair<std::string, std::string>;

/** @brief Undirected gene-pair weights, keys ordered `first < second`. */
struct GroupWeights {
    std::map<GenePair, double> weights;
    /** Entities on PPI edges that have no gene mapping. */
    std::set<std::size_t> unmapped_entities;
};

/**
 * Collapse per-sample directed edge weights into undirected gene-pair
 * weights. Within a sample, weights sharing (source gene, target gene) are
 * summed and the two directions of a gene pair are averaged; a pair seen in
 * only one direction keeps that direction's sum. Gene self-pairs are
 * dropped. Results are summed across samples.
 */
inline GroupWeights aggregate_group(const std::vector<std::vector<double>>& samples, std::span<const Edge> ppi,
                                    const std::vector<std::optional<std::string>>& gene_of) {
    GroupWeights out;
    for (const auto& w : samples) {
        if (w.size() != ppi.size()) {
            throw InputError("aggregate_group: sample has " + std::to_string(w.size()) + " weights for " +
                             std::to_string(ppi.size()) + " edges");
        }
        std::map<GenePair, double> directed;
        for (std::size_t e = 0; e < ppi.size(); ++e) {
            const auto [a, b] = ppi[e];
            if (a >= gene_of.size() || b >= gene_of.size()) {
                throw InputError("aggregate_group: gene map shorter than entity count");
            }
            if (!gene_of[a] || !gene_of[b]) {
                if (!gene_of[a]) {
                    out.unmapped_entities.insert(a);
                }
                if (!gene_of[b]) {
                    out.unmapped_entities.insert(b);
                }
                continue;
            }
            if (*gene_of[a] == *gene_of[b]) {
                continue;
            }
            directed[{*gene_of[a], *gene_of[b]}] += w[e];
        }
        for (const auto& [key, value] : directed) {
            const auto& [g1, g2] = key;
            auto rev = directed.find({g2, g1});
            if (rev == directed.end()) {
                out.weights[std::minmax(g1, g2)] += value;
            } else if (g1 < g2) {
                out.weights[{g1, g2}] += 0.5 * (value + rev->second);
            }
        }
    }
    return out;
}

struct NodeScores {
    std::vector<std::string> genes;
    std::vector<double> attention;
    std::vector<double> expression;
    std::vector<double> importance;
    std::vector<double> p_value;

    std::size_t size() const { return genes.size(); }
};

/** Min-max scaling of each column over all rows; constant columns become 0. */
inline Matrix minmax_columns(const Matrix& x) {
    Matrix out = Matrix::Zero(x.rows(), x.cols());
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
        const double lo = x.col(c).minCoeff(), hi = x.col(c).maxCoeff();
        if (hi > lo) {
            out.col(c) = (x.col(c).array() - lo) / (hi - lo);
        }
    }
    return out;
}

/**
 * Node attention, expression, importance and significance per gene.
 *
 * @param expr cohort expression, samples x transcripts
 * @param transcript_gene gene of each expression column
 * @param in_target whether each sample belongs to the target (disease) group
 *
 * Each expression column is min-max scaled across the cohort. A gene is
 * represented by its transcript with the highest cohort-mean scaled value;
 * its expression score is that transcript's target-group mean, and its
 * p-value compares target vs remaining samples on the same transcript.
 * Genes come from both the weight map and the expression columns.
 */
inline NodeScores node_scores(const GroupWeights& weights, const Matrix& expr, const std::vector<std::string>& transcript_gene,
                              const std::vector<bool>& in_target) {
    if (static_cast<std::size_t>(expr.cols()) != transcript_gene.size()) {
        throw InputError("node_scores: expression has " + std::to_string(expr.cols()) + " columns, gene map has " +
                         std::to_string(transcript_gene.size()));
    }
    if (static_cast<std::size_t>(expr.rows()) != in_target.size()) {
        throw InputError("node_scores: group vector does not match sample count");
    }
    const auto n_target = std::count(in_target.begin(), in_target.end(), true);
    if (n_target == 0 || n_target == static_cast<long>(in_target.size())) {
        throw InputError("node_scores: both groups must be non-empty");
    }

    std::set<std::string> genes(transcript_gene.begin(), transcript_gene.end());
    std::map<std::string, std::pair<double, std::size_t>> incident;
    for (const auto& [pair, w] : weights.weights) {
        genes.insert(pair.first);
        genes.insert(pair.second);
        for (const auto* g : {&pair.first, &pair.second}) {
            auto& slot = incident[*g];
            slot.first += w;
            ++slot.second;
        }
    }

    const Matrix scaled = minmax_columns(expr);
    const Vector cohort_mean = scaled.colwise().mean().transpose();
    std::map<std::string, Eigen::Index> best;
    for (std::size_t c = 0; c < transcript_gene.size(); ++c) {
        const auto ci = static_cast<Eigen::Index>(c);
        auto [it, fresh] = best.emplace(transcript_gene[c], ci);
        if (!fresh && cohort_mean(ci) > cohort_mean(it->second)) {
            it->second = ci;
        }
    }

    NodeScores out;
    for (const auto& g : genes) {
        out.genes.push_back(g);
        const auto inc = incident.find(g);
        const double att = inc == incident.end() ? 0.0 : inc->second.first / static_cast<double>(inc->second.second);
        double ex = 0, p = 1;
        if (auto b = best.find(g); b != best.end()) {
            std::vector<double> target, rest;
            for (Eigen::Index s = 0; s < scaled.rows(); ++s) {
                (in_target[static_cast<std::size_t>(s)] ? target : rest).push_back(scaled(s, b->second));
            }
            ex = std::accumulate(target.begin(), target.end(), 0.0) / static_cast<double>(target.size());
            p = stats::mann_whitney_u(target, rest).p_value;
        }
        out.attention.push_back(att);
        out.expression.push_back(ex);
        out.importance.push_back(att * ex);
        out.p_value.push_back(p);
    }
    return out;
}

inline constexpr std::size_t default_xi = 120;
inline constexpr std::size_t default_epsilon = 3;
inline constexpr double significance_level = 0.05;

struct CoreEdge {
    std::size_t a = 0; // index into CoreSubgraph::nodes
    std::size_t b = 0;
    double weight = 0;
};

struct CoreSubgraph {
    /** Indices into the NodeScores the core was extracted from, ascending. */
    std::vector<std::size_t> nodes;
    std::vector<std::string> genes;
    std::vector<bool> significant;
    std::vector<CoreEdge> edges;
};

/** Node ranking: importance, then attention (both descending), then lower id. */
inline std::vector<std::size_t> rank_nodes(const NodeScores& s) {
    std::vector<std::size_t> order(s.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (s.importance[a] != s.importance[b]) {
            return s.importance[a] > s.importance[b];
        }
        if (s.attention[a] != s.attention[b]) {
            return s.attention[a] > s.attention[b];
        }
        return a < b;
    });
    return order;
}

/** Weighted undirected graph over node ids, as adjacency maps. */
using Adjacency = std::map<std::size_t, std::map<std::size_t, double>>;

/** Largest connected component; ties go to the component holding the smallest id. */
inline std::set<std::size_t> largest_component(const Adjacency& adj) {
    std::set<std::size_t> seen, best;
    for (const auto& [start, unused] : adj) {
        if (seen.count(start)) {
            continue;
        }
        std::set<std::size_t> comp{start};
        std::vector<std::size_t> stack{start};
        seen.insert(start);
        while (!stack.empty()) {
            const auto v = stack.back();
            stack.pop_back();
            for (const auto& [u, w] : adj.at(v)) {
                if (seen.insert(u).second) {
                    comp.insert(u);
                    stack.push_back(u);
                }
            }
        }
        // components are discovered in ascending order of their smallest id
        if (comp.size() > best.size()) {
            best = std::move(comp);
        }
    }
    return best;
}

/**
 * For every node of degree at least 2 with more than `epsilon` leaf
 * neighbors, keep `epsilon` leaves and drop the rest. Significant leaves are
 * kept first, then heavier edges, then lower ids. Leaves are determined once,
 * before any removal. Returns the removed nodes.
 */
inline std::set<std::size_t> prune_stars(Adjacency& adj, const std::vector<double>& p_value, std::size_t epsilon) {
    std::set<std::size_t> removed;
    std::map<std::size_t, std::vector<std::size_t>> leaves_of;
    for (const auto& [v, nb] : adj) {
        if (nb.size() == 1) {
            const auto hub = nb.begin()->first;
            if (adj.at(hub).size() >= 2) {
                leaves_of[hub].push_back(v);
            }
        }
    }
    for (auto& [hub, leaves] : leaves_of) {
        if (leaves.size() <= epsilon) {
            continue;
        }
        const auto& nb = adj.at(hub);
        std::sort(leaves.begin(), leaves.end(), [&](std::size_t a, std::size_t b) {
            const bool sa = p_value[a] < significance_level, sb = p_value[b] < significance_level;
            if (sa != sb) {
                return sa;
            }
            if (nb.at(a) != nb.at(b)) {
                return nb.at(a) > nb.at(b);
            }
            return a < b;
        });
        for (std::size_t k = epsilon; k < leaves.size(); ++k) {
            removed.insert(leaves[k]);
        }
    }
    for (const auto v : removed) {
        for (const auto& [u, w] : adj.at(v)) {
            adj.at(u).erase(v);
        }
        adj.erase(v);
    }
    return removed;
}

/**
 * Top-`xi` nodes by rank, induced on the weighted edges, reduced to the
 * largest connected component, then star-pruned with `epsilon`.
 */
inline CoreSubgraph extract_core(const NodeScores& scores, const GroupWeights& weights, std::size_t xi = default_xi,
                                 std::size_t epsilon = default_epsilon) {
    if (xi == 0) {
        throw InputError("extract_core: xi must be at least 1");
    }
    CoreSubgraph core;
    if (scores.size() == 0) {
        return core;
    }
    std::map<std::string, std::size_t> id;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        id[scores.genes[i]] = i;
    }
    const auto order = rank_nodes(scores);
    const std::set<std::size_t> top(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(xi, order.size())));

    Adjacency adj;
    for (const auto v : top) {
        adj[v];
    }
    for (const auto& [pair, w] : weights.weights) {
        const auto a = id.find(pair.first), b = id.find(pair.second);
        if (a == id.end() || b == id.end() || !top.count(a->second) || !top.count(b->second)) {
            continue;
        }
        adj[a->second][b->second] = w;
        adj[b->second][a->second] = w;
    }

    const auto keep = largest_component(adj);
    for (auto it = adj.begin(); it != adj.end();) {
        it = keep.count(it->first) ? std::next(it) : adj.erase(it);
    }
    prune_stars(adj, scores.p_value, epsilon);

    std::map<std::size_t, std::size_t> local;
    for (const auto& [v, nb] : adj) {
        local[v] = core.nodes.size();
        core.nodes.push_back(v);
        core.genes.push_back(scores.genes[v]);
        core.significant.push_back(scores.p_value[v] < significance_level);
    }
    for (const auto& [v, nb] : adj) {
        for (const auto& [u, w] : nb) {
            if (v < u) {
                core.edges.push_back({local[v], local[u], w});
            }
        }
    }
    return core;
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    return out;
}

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace detail

/** Edge list with columns gene1, gene2, weight, flag1, flag2. */
inline void write_core_tsv(const std::filesystem::path& path, const CoreSubgraph& core) {
    auto out = detail::open_out(path);
    out << "gene1\tgene2\tweight\tflag1\tflag2\n";
    for (const auto& e : core.edges) {
        out << core.genes[e.a] << '\t' << core.genes[e.b] << '\t' << detail::fmt(e.weight) << '\t' << int(core.significant[e.a])
            << '\t' << int(core.significant[e.b]) << '\n';
    }
}

inline void write_core_dot(const std::filesystem::path& path, const CoreSubgraph& core) {
    auto out = detail::open_out(path);
    auto q = [](const std::string& s) {
        std::string r = "\"";
        for (char c : s) {
            if (c == '"' || c == '\\') {
                r += '\\';
            }
            r += c;
        }
        return r + '"';
    };
    out << "graph core {\n";
    for (std::size_t i = 0; i < core.genes.size(); ++i) {
        out << "  " << q(core.genes[i]) << (core.significant[i] ? " [style=filled, fillcolor=salmon]" : "") << ";\n";
    }
    for (const auto& e : core.edges) {
        out << "  " << q(core.genes[e.a]) << " -- " << q(core.genes[e.b]) << " [weight=" << detail::fmt(e.weight) << "];\n";
    }
    out << "}\n";
}

inline void write_node_scores(const std::filesystem::path& path, const NodeScores& s) {
    csv::Table t;
    t.header = {"gene", "attention", "expression", "importance", "p_value"};
    for (std::size_t i = 0; i < s.size(); ++i) {
        t.rows.push_back({s.genes[i], detail::fmt(s.attention[i]), detail::fmt(s.expression[i]), detail::fmt(s.importance[i]),
                          detail::fmt(s.p_value[i])});
    }
    csv::write(path, t);
}

} // namespace celltosg::inference

#endif
