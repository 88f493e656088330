// End-to-end run on a synthetic cohort: retrieval, balancing, donor split,
// pretraining, head training and core extraction. Prints a short report.

#include <cstdio>

#include <celltosg/celltosg.hpp>

using namespace celltosg;

namespace {

struct Synthetic {
    TosgGraph graph;
    std::vector<AttributeRecord> records;
    RowMatrixF expression;
};

/** 30 proteins on a ring with chords; donors 0..9 are "asthma", 10..19 "normal". */
Synthetic make_synthetic(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t genes = 30;
    std::vector<MappingRow> mapping;
    std::vector<PpiRow> ppi;
    for (std::size_t i = 0; i < genes; ++i) {
        mapping.push_back({"f" + std::to_string(i), "T" + std::to_string(i), "G" + std::to_string(i), 0});
        ppi.push_back({"G" + std::to_string(i), "G" + std::to_string((i + 1) % genes), 0});
        if (i % 5 == 0) {
            ppi.push_back({"G" + std::to_string(i), "G" + std::to_string((i + 7) % genes), 0});
        }
    }
    Synthetic s;
    s.graph = build_graph(mapping, ppi);

    const char* stages[] = {"child", "adult", "aged"};
    const std::size_t donors = 20, per_donor = 6;
    s.expression.resize(static_cast<Eigen::Index>(donors * per_donor), static_cast<Eigen::Index>(genes));
    for (std::size_t d = 0; d < donors; ++d) {
        const bool sick = d < 10;
        for (std::size_t k = 0; k < per_donor; ++k) {
            const std::size_t row = d * per_donor + k;
            AttributeRecord rec;
            rec.dataset_id = d % 2 ? "dsB" : "dsA";
            rec.tissue_general = "lung";
            rec.matrix_file_path = "synthetic";
            rec.matrix_row_idx = row;
            rec.donor_id = "donor" + std::to_string(d);
            rec.disease_BMG_name = sick ? "asthma" : "normal";
            rec.development_stage_category = stages[d % 3];
            rec.sex_normalized = d % 4 < 2 ? Sex::female : Sex::male;
            s.records.push_back(rec);
            for (std::size_t g = 0; g < genes; ++g) {
                double v = 1.0 + 0.3 * celltosg::detail::standard_normal(rng);
                if (sick && g >= 3 && g <= 6) {
                    v += 1.5;
                }
                s.expression(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(g)) = static_cast<float>(v);
            }
        }
    }
    return s;
}

} // namespace

int main() {
    const auto s = make_synthetic(11);
    std::printf("graph: %zu transcripts, %zu proteins, %zu ppi edges\n", s.graph.entities.num_transcripts(),
                s.graph.entities.num_proteins(), s.graph.edges.ppi.size());

    retrieval::Query lung;
    lung.constraints["tissue_general"] = {"lung"};
    const auto hits = retrieval::phase1_extract(s.records, lung);
    std::printf("query tissue_general=lung: %zu rows\n", hits.size());

    retrieval::TaskConfig task;
    task.balance_field = "disease_BMG_name";
    task.control_value = "normal";
    task.match_keys = {"development_stage_category", "sex_normalized"};
    task.age_key_index = 0;
    task.age_order = {"child", "adult", "aged"};
    task.tolerance = 1;
    const auto cohort = retrieval::phase2_balance(s.records, lung, task);
    std::printf("balanced cohort: %zu rows in %zu strata\n", cohort.rows.size(), cohort.strata.size());

    const auto split = retrieval::donor_split(s.records, cohort.rows, 0.25, 0.3, 2);
    std::printf("donor split: %zu train / %zu test\n", split.train.size(), split.test.size());

    const Matrix features = expand_features(s.expression, s.graph.entities);
    const auto text = pseudo_text_embed(s.graph.text, 4, 0);
    fm::ModelConfig cfg;
    cfg.d = cfg.d_prime = 8;
    cfg.epochs = 15;
    cfg.lambda_deg = 0.001;
    cfg.seed = 3;
    const auto run = fm::train(s.graph, features, text, cfg);
    const auto rec = fm::evaluate(run, cfg, s.graph, features, text);
    std::printf("pretraining: %zu epochs, masked-edge AUC %.3f, recovered %.3f\n", run.history.size(), rec.auc,
                rec.recovered_fraction);

    const auto h = inference::pretrained_embeddings(run.params, cfg, s.graph, features, text);
    const auto ops = inference::GraphOps::full(s.graph);
    std::vector<std::size_t> y;
    std::vector<bool> target;
    for (const auto& r : s.records) {
        y.push_back(r.disease_BMG_name == "asthma" ? 1 : 0);
        target.push_back(y.back() == 1);
    }
    inference::HeadConfig hc;
    const auto head = inference::train_head(h, y, ops, hc);
    std::printf("head training accuracy: %.3f\n", inference::accuracy(inference::predict(head.head, h, ops), y));

    std::vector<std::optional<std::string>> gene_of(s.graph.entities.size());
    for (std::size_t i = 0; i < gene_of.size(); ++i) {
        gene_of[i] = s.graph.entities.id(i);
    }
    std::vector<std::string> feature_gene;
    for (std::size_t f = 0; f < s.graph.entities.num_features(); ++f) {
        feature_gene.push_back("G" + std::to_string(f));
        gene_of[*s.graph.entities.feature_to_transcript[f]] = feature_gene.back();
    }
    std::vector<std::vector<double>> weights;
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (target[i]) {
            const Matrix z = inference::head_states(head.head, h[i], ops, hc.activation);
            weights.push_back(inference::attention_affinity(head.head, z, s.graph.edges.ppi));
        }
    }
    const auto agg = inference::aggregate_group(weights, s.graph.edges.ppi, gene_of);
    const auto scores = inference::node_scores(agg, s.expression.cast<double>(), feature_gene, target);
    const auto core = inference::extract_core(scores, agg, 10, 3);
    std::printf("core: %zu nodes, %zu edges\n", core.nodes.size(), core.edges.size());
    for (const auto& e : core.edges) {
        std::printf("  %s -- %s  %.4f%s%s\n", core.genes[e.a].c_str(), core.genes[e.b].c_str(), e.weight,
                    core.significant[e.a] ? "  *" : "", core.significant[e.b] ? "*" : "");
    }
    return 0;
}
