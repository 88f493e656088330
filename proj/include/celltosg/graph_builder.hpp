#ifndef CELLTOSG_GRAPH_BUILDER_HPP
#define CELLTOSG_GRAPH_BUILDER_HPP

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "csv.hpp"
#include "npy.hpp"
#include "shard_store.hpp"

/**
 * @file graph_builder.hpp
 * @brief Assembly of the text-omic signaling graph: transcript and protein
 * entities, internal (transcript -> protein) and PPI edges, and per-entity text.
 */

namespace celltosg {

/** One row of the feature/transcript/protein mapping table. */
struct MappingRow {
    /** Measured feature; empty if the transcript has no measurement. */
    std::string feature_id;
    std::string transcript_id;
    /** Protein produced by the transcript; empty if none. */
    std::string protein_id;
    std::size_t line = 0;
};

struct PpiRow {
    std::string src_protein;
    std::string dst_protein;
    std::size_t line = 0;
};

/**
 * @brief Dense entity indexing.
 *
 * Transcripts occupy `[0, M_t)` and proteins `[M_t, M)`.
 */
struct EntityTable {
    std::vector<std::string> transcript_ids;
    std::vector<std::string> protein_ids;

    /** Measured features in matrix column order. */
    std::vector<std::string> feature_ids;

    /** Transcript entity for each measured feature, if mapped. */
    std::vector<std::optional<std::size_t>> feature_to_transcript;

    std::size_t num_transcripts() const { return transcript_ids.size(); }
    std::size_t num_proteins() const { return protein_ids.size(); }
    std::size_t size() const { return transcript_ids.size() + protein_ids.size(); }
    std::size_t num_features() const { return feature_ids.size(); }

    bool is_protein(std::size_t entity) const { return entity >= num_transcripts(); }

    const std::string& id(std::size_t entity) const {
        return entity < num_transcripts() ? transcript_ids[entity] : protein_ids[entity - num_transcripts()];
    }
};

struct EdgeSets {
    /** (transcript entity, protein entity) */
    std::vector<std::pair<std::size_t, std::size_t>> internal;

    /** Directed (protein entity, protein entity), as given. */
    std::vector<std::pair<std::size_t, std::size_t>> ppi;
};

/** Names, descriptions and biochemical sequences, one entry per entity. */
struct TextBundle {
    std::vector<std::string> names;
    std::vector<std::string> descriptions;
    std::vector<std::string> sequences;

    static TextBundle blank(std::size_t m) {
        TextBundle t;
        t.names.assign(m, "");
        t.descriptions.assign(m, "");
        t.sequences.assign(m, "");
        return t;
    }

    std::size_t size() const { return names.size(); }
};

/**
 * @brief The text-omic signaling graph. Topology is shared by all samples;
 * only node features vary.
 */
struct TosgGraph {
    EntityTable entities;
    EdgeSets edges;
    TextBundle text;

    std::size_t num_entities() const { return entities.size(); }
};

namespace detail {

template <typename Row>
std::string row_label(const Row& row, std::size_t pos) {
    return row.line ? "line " + std::to_string(row.line) : "row " + std::to_string(pos);
}

} // namespace detail

/**
 * Build the graph from a mapping table and PPI list.
 *
 * Transcripts and proteins are indexed in order of first appearance in the
 * mapping table. Every mapping row with a protein yields one internal edge
 * (repeats of the same pair collapse). PPI endpoints must be proteins named
 * in the mapping; duplicates and self-loops are rejected.
 *
 * @param feature_order Matrix column order of the measured features. When
 * empty, features are ordered by first appearance in the mapping.
 * @param text Per-entity text; an empty bundle is expanded to blanks.
 */
inline TosgGraph build_graph(std::span<const MappingRow> mapping, std::span<const PpiRow> ppi, TextBundle text = {},
                             std::vector<std::string> feature_order = {}) {
    TosgGraph g;
    auto& ent = g.entities;

    std::unordered_map<std::string, std::size_t> transcript_pos;
    std::unordered_map<std::string, std::size_t> protein_pos;
    for (std::size_t i = 0; i < mapping.size(); ++i) {
        const auto& row = mapping[i];
        if (row.transcript_id.empty()) {
            throw InputError("mapping " + detail::row_label(row, i) + ": empty transcript_id");
        }
        if (transcript_pos.emplace(row.transcript_id, ent.transcript_ids.size()).second) {
            ent.transcript_ids.push_back(row.transcript_id);
        }
        if (!row.protein_id.empty() && protein_pos.emplace(row.protein_id, ent.protein_ids.size()).second) {
            ent.protein_ids.push_back(row.protein_id);
        }
    }
    const std::size_t mt = ent.transcript_ids.size();

    std::unordered_map<std::string, std::size_t> feature_pos;
    if (feature_order.empty()) {
        for (const auto& row : mapping) {
            if (!row.feature_id.empty() && feature_pos.emplace(row.feature_id, feature_order.size()).second) {
                feature_order.push_back(row.feature_id);
            }
        }
    } else {
        for (std::size_t f = 0; f < feature_order.size(); ++f) {
            if (!feature_pos.emplace(feature_order[f], f).second) {
                throw InputError("duplicate feature id '" + feature_order[f] + "'");
            }
        }
    }
    ent.feature_ids = std::move(feature_order);
    ent.feature_to_transcript.assign(ent.feature_ids.size(), std::nullopt);

    std::set<std::pair<std::size_t, std::size_t>> internal_seen;
    for (std::size_t i = 0; i < mapping.size(); ++i) {
        const auto& row = mapping[i];
        const std::size_t t = transcript_pos.at(row.transcript_id);
        if (!row.feature_id.empty()) {
            auto it = feature_pos.find(row.feature_id);
            if (it == feature_pos.end()) {
                throw InputError("mapping " + detail::row_label(row, i) + ": feature '" + row.feature_id +
                                 "' is not a matrix column");
            }
            auto& slot = ent.feature_to_transcript[it->second];
            if (slot && *slot != t) {
                throw InputError("mapping " + detail::row_label(row, i) + ": feature '" + row.feature_id +
                                 "' mapped to two transcripts");
            }
            slot = t;
        }
        if (!row.protein_id.empty()) {
            const std::size_t p = mt + protein_pos.at(row.protein_id);
            if (internal_seen.emplace(t, p).second) {
                g.edges.internal.emplace_back(t, p);
            }
        }
    }

    std::set<std::pair<std::size_t, std::size_t>> ppi_seen;
    for (std::size_t i = 0; i < ppi.size(); ++i) {
        const auto& row = ppi[i];
        auto a = protein_pos.find(row.src_protein);
        auto b = protein_pos.find(row.dst_protein);
        if (a == protein_pos.end() || b == protein_pos.end()) {
            const std::string& bad = (a == protein_pos.end()) ? row.src_protein : row.dst_protein;
            throw InputError("ppi " + detail::row_label(row, i) + ": endpoint '" + bad + "' is not a declared protein");
        }
        const std::size_t src = mt + a->second;
        const std::size_t dst = mt + b->second;
        if (src == dst) {
            throw InputError("ppi " + detail::row_label(row, i) + ": self-loop on '" + row.src_protein + "'");
        }
        if (!ppi_seen.emplace(src, dst).second) {
            throw InputError("ppi " + detail::row_label(row, i) + ": duplicate pair (" + row.src_protein + ", " +
                             row.dst_protein + ")");
        }
        g.edges.ppi.emplace_back(src, dst);
    }

    const std::size_t m = ent.size();
    if (text.names.empty() && text.descriptions.empty() && text.sequences.empty()) {
        text = TextBundle::blank(m);
    }
    if (text.names.size() != m || text.descriptions.size() != m || text.sequences.size() != m) {
        throw InputError("text bundle must have one entry per entity (" + std::to_string(m) + ")");
    }
    g.text = std::move(text);
    return g;
}

/**
 * Lay measured features out over all M entities. Transcript entities carry
 * their mapped measurement; unmapped transcripts and every protein are zero.
 */
inline Matrix expand_features(const RowMatrixF& values, const EntityTable& entities) {
    if (static_cast<std::size_t>(values.cols()) != entities.num_features()) {
        throw InputError("expand_features: block has " + std::to_string(values.cols()) + " columns, expected " +
                         std::to_string(entities.num_features()));
    }
    Matrix out = Matrix::Zero(values.rows(), static_cast<Eigen::Index>(entities.size()));
    for (std::size_t f = 0; f < entities.num_features(); ++f) {
        if (const auto& t = entities.feature_to_transcript[f]) {
            out.col(static_cast<Eigen::Index>(*t)) = values.col(static_cast<Eigen::Index>(f)).cast<double>();
        }
    }
    return out;
}

inline Matrix expand_features(const ExpressionBlock& block, const EntityTable& entities) {
    return expand_features(block.values, entities);
}

/** Name, description and sequence embeddings, each M x dim. */
struct TextEmbeddings {
    Matrix names;
    Matrix descriptions;
    Matrix sequences;

    Eigen::Index dim() const { return names.cols(); }
};

/**
 * Deterministic stand-in for frozen text/sequence encoders: each string is
 * hashed together with its field kind and `seed`, expanded to a Gaussian
 * vector and scaled to unit norm. Empty strings map to the zero vector.
 */
inline TextEmbeddings pseudo_text_embed(const TextBundle& text, std::size_t dim, std::uint64_t seed) {
    if (dim == 0) {
        throw InputError("pseudo_text_embed: dim must be at least 1");
    }
    auto embed = [&](const std::vector<std::string>& strings, char kind) {
        Matrix out = Matrix::Zero(static_cast<Eigen::Index>(strings.size()), static_cast<Eigen::Index>(dim));
        for (std::size_t i = 0; i < strings.size(); ++i) {
            if (strings[i].empty()) {
                continue;
            }
            std::uint64_t h = celltosg::detail::fnv1a(std::string_view(&kind, 1));
            h = celltosg::detail::fnv1a(strings[i], h);
            Rng rng(celltosg::detail::splitmix64(h ^ celltosg::detail::splitmix64(seed)));
            auto row = out.row(static_cast<Eigen::Index>(i));
            for (std::size_t d = 0; d < dim; ++d) {
                row(static_cast<Eigen::Index>(d)) = celltosg::detail::standard_normal(rng);
            }
            row.normalize();
        }
        return out;
    };
    return {embed(text.names, 'n'), embed(text.descriptions, 'd'), embed(text.sequences, 's')};
}

/** Load precomputed M x dim embeddings (NPY) in entity order. */
inline TextEmbeddings load_embeddings(const std::filesystem::path& names, const std::filesystem::path& descriptions,
                                      const std::filesystem::path& sequences, std::size_t num_entities) {
    TextEmbeddings e{npy::read_matrix(names), npy::read_matrix(descriptions), npy::read_matrix(sequences)};
    for (const Matrix* m : {&e.names, &e.descriptions, &e.sequences}) {
        if (static_cast<std::size_t>(m->rows()) != num_entities) {
            throw InputError("embedding matrix has " + std::to_string(m->rows()) + " rows, expected " +
                             std::to_string(num_entities));
        }
        if (m->cols() != e.names.cols()) {
            throw InputError("embedding matrices disagree in width");
        }
    }
    return e;
}

inline std::vector<MappingRow> load_mapping(const std::filesystem::path& path) {
    const auto table = csv::read(path);
    const long f = table.column("feature_id"), t = table.column("transcript_id"), p = table.column("protein_id");
    if (f < 0 || t < 0 || p < 0) {
        throw InputError(path.string() + ": mapping needs columns feature_id, transcript_id, protein_id");
    }
    std::vector<MappingRow> rows;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& r = table.rows[i];
        rows.push_back({r[static_cast<std::size_t>(f)], r[static_cast<std::size_t>(t)], r[static_cast<std::size_t>(p)], table.lines[i]});
    }
    return rows;
}

inline std::vector<PpiRow> load_ppi(const std::filesystem::path& path) {
    const auto table = csv::read(path);
    const long s = table.column("src_protein"), d = table.column("dst_protein");
    if (s < 0 || d < 0) {
        throw InputError(path.string() + ": PPI list needs columns src_protein, dst_protein");
    }
    std::vector<PpiRow> rows;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& r = table.rows[i];
        rows.push_back({r[static_cast<std::size_t>(s)], r[static_cast<std::size_t>(d)], table.lines[i]});
    }
    return rows;
}

/**
 * Read per-entity text keyed by (kind, entity_id); kind is "transcript" or
 * "protein". Entities without a row get empty strings.
 */
inline TextBundle load_text(const std::filesystem::path& path, const EntityTable& entities) {
    const auto table = csv::read(path);
    const long k = table.column("kind"), id = table.column("entity_id"), n = table.column("name"),
               d = table.column("description"), s = table.column("sequence");
    if (k < 0 || id < 0 || n < 0 || d < 0 || s < 0) {
        throw InputError(path.string() + ": text table needs columns kind, entity_id, name, description, sequence");
    }
    std::map<std::pair<std::string, std::string>, std::size_t> index;
    for (std::size_t i = 0; i < entities.size(); ++i) {
        index[{entities.is_protein(i) ? "protein" : "transcript", entities.id(i)}] = i;
    }
    TextBundle text = TextBundle::blank(entities.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        auto it = index.find({row[static_cast<std::size_t>(k)], row[static_cast<std::size_t>(id)]});
        if (it == index.end()) {
            throw InputError(path.string() + ":" + std::to_string(table.lines[r]) + ": unknown entity " +
                             row[static_cast<std::size_t>(k)] + " '" + row[static_cast<std::size_t>(id)] + "'");
        }
        text.names[it->second] = row[static_cast<std::size_t>(n)];
        text.descriptions[it->second] = row[static_cast<std::size_t>(d)];
        text.sequences[it->second] = row[static_cast<std::size_t>(s)];
    }
    return text;
}

inline nlohmann::json graph_to_json(const TosgGraph& g) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["transcripts"] = g.entities.transcript_ids;
    j["proteins"] = g.entities.protein_ids;
    j["features"] = g.entities.feature_ids;
    std::vector<long> f2t;
    for (const auto& t : g.entities.feature_to_transcript) {
        f2t.push_back(t ? static_cast<long>(*t) : -1L);
    }
    j["feature_to_transcript"] = f2t;
    j["internal_edges"] = g.edges.internal;
    j["ppi_edges"] = g.edges.ppi;
    j["text"] = {{"names", g.text.names}, {"descriptions", g.text.descriptions}, {"sequences", g.text.sequences}};
    return j;
}

inline TosgGraph graph_from_json(const nlohmann::json& j) {
    TosgGraph g;
    try {
        g.entities.transcript_ids = j.at("transcripts").get<std::vector<std::string>>();
        g.entities.protein_ids = j.at("proteins").get<std::vector<std::string>>();
        g.entities.feature_ids = j.at("features").get<std::vector<std::string>>();
        for (long t : j.at("feature_to_transcript").get<std::vector<long>>()) {
            g.entities.feature_to_transcript.push_back(t < 0 ? std::nullopt : std::optional<std::size_t>(static_cast<std::size_t>(t)));
        }
        g.edges.internal = j.at("internal_edges").get<std::vector<std::pair<std::size_t, std::size_t>>>();
        g.edges.ppi = j.at("ppi_edges").get<std::vector<std::pair<std::size_t, std::size_t>>>();
        const auto& text = j.at("text");
        g.text.names = text.at("names").get<std::vector<std::string>>();
        g.text.descriptions = text.at("descriptions").get<std::vector<std::string>>();
        g.text.sequences = text.at("sequences").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed graph file: ") + e.what());
    }
    const std::size_t mt = g.entities.num_transcripts();
    const std::size_t m = g.entities.size();
    for (const auto& [t, p] : g.edges.internal) {
        if (t >= mt || p < mt || p >= m) {
            throw InputError("graph file: internal edge endpoint out of range");
        }
    }
    for (const auto& [a, b] : g.edges.ppi) {
        if (a < mt || b < mt || a >= m || b >= m || a == b) {
            throw InputError("graph file: ppi edge endpoint out of range");
        }
    }
    if (g.text.size() != m) {
        throw InputError("graph file: text bundle size mismatch");
    }
    return g;
}

inline void save_graph(const std::filesystem::path& path, const TosgGraph& g) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out << graph_to_json(g).dump() << '\n';
}

inline TosgGraph load_graph(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path.string() + ": " + e.what());
    }
    return graph_from_json(j);
}

} // namespace celltosg

#endif
