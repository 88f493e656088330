// celltosg: command-line driver for the storage, retrieval, graph,
// pretraining and core-extraction pipeline.
//
// A dataset directory holds shards/ (manifest + NPY parts), attributes.csv
// and graph.json. Every command writes resolved_config.json into its output
// directory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include <celltosg/celltosg.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace celltosg;

namespace {

constexpr const char* tool_version = "0.1.0";

/** Thrown for flag combinations CLI11 cannot express. */
struct UsageError : InputError {
    using InputError::InputError;
};

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + p.string());
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) {
    try {
        return json::parse(read_text(p));
    } catch (const json::parse_error& e) {
        throw InputError(p.string() + ": " + e.what());
    }
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + p.string() + " for writing");
    }
    out << j.dump(2) << '\n';
}

void write_indices(const fs::path& p, std::span<const std::size_t> rows) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + p.string() + " for writing");
    }
    for (auto r : rows) {
        out << r << '\n';
    }
}

fs::path prepare_output(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create " + dir + ": " + ec.message());
    }
    return dir;
}

json file_digest(const fs::path& p) {
    const auto bytes = read_text(p);
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(celltosg::detail::fnv1a(bytes)));
    return {{"path", p.generic_string()}, {"bytes", bytes.size()}, {"fnv1a64", hex}};
}

/** Command, parameters and input fingerprints; no timestamps so reruns match byte for byte. */
void write_provenance(const fs::path& out_dir, const std::string& command, const json& params,
                      const std::vector<fs::path>& inputs) {
    json j;
    j["tool"] = "celltosg";
    j["version"] = tool_version;
    j["command"] = command;
    j["parameters"] = params;
    j["inputs"] = json::array();
    for (const auto& p : inputs) {
        j["inputs"].push_back(file_digest(p));
    }
    write_json(out_dir / "resolved_config.json", j);
}

struct Dataset {
    fs::path root;
    std::vector<AttributeRecord> records;
    TosgGraph graph;

    fs::path shards() const { return root / "shards"; }
    std::vector<fs::path> files() const {
        return {root / "attributes.csv", root / "graph.json", shards() / manifest_filename};
    }
};

Dataset open_dataset(const std::string& dir) {
    Dataset d;
    d.root = dir;
    d.records = load_attributes(d.root / "attributes.csv");
    d.graph = load_graph(d.root / "graph.json");
    return d;
}

/** Expression rows for the given attribute records, as entity-aligned features. */
std::pair<ExpressionBlock, Matrix> load_features(const Dataset& d, std::span<const std::size_t> records) {
    ShardReader reader(d.shards());
    std::vector<AttributeRecord> picked;
    for (auto r : records) {
        if (r >= d.records.size()) {
            throw InputError("cohort row " + std::to_string(r) + " is outside the attribute table");
        }
        picked.push_back(d.records[r]);
    }
    const auto global = resolve_pointers(picked, reader);
    auto block = reader.read_rows(global);
    if (block.values.cols() != static_cast<Eigen::Index>(d.graph.entities.num_features())) {
        throw InputError("shard width " + std::to_string(block.values.cols()) + " does not match " +
                         std::to_string(d.graph.entities.num_features()) + " graph features");
    }
    Matrix feats = expand_features(block, d.graph.entities);
    return {std::move(block), std::move(feats)};
}

struct CohortFile {
    std::vector<std::size_t> rows;
    std::vector<std::string> labels;
};

CohortFile read_cohort(const fs::path& p) {
    const auto j = read_json(p);
    CohortFile c;
    try {
        c.rows = j.at("rows").get<std::vector<std::size_t>>();
        c.labels = j.at("labels").get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw InputError(p.string() + ": " + e.what());
    }
    if (c.rows.size() != c.labels.size()) {
        throw InputError(p.string() + ": rows and labels differ in length");
    }
    return c;
}

json cohort_json(std::span<const std::size_t> rows, std::span<const std::string> labels, const std::string& label_column) {
    return {{"rows", rows}, {"labels", labels}, {"label_column", label_column}, {"size", rows.size()}};
}

/** Matrix from NPY (float32 or float64) or from a CSV whose header names the features. */
std::pair<RowMatrixF, std::vector<std::string>> read_expression(const fs::path& p) {
    if (p.extension() == ".npy") {
        return {npy::read_matrix(p).cast<float>(), {}};
    }
    const auto t = csv::read(p);
    RowMatrixF m(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(t.header.size()));
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        for (std::size_t c = 0; c < t.header.size(); ++c) {
            const auto& cell = t.rows[r][c];
            std::size_t used = 0;
            double v = 0;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != cell.size()) {
                throw InputError(p.string() + ":" + std::to_string(t.lines[r]) + ": '" + cell + "' is not a number");
            }
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = static_cast<float>(v);
        }
    }
    return {std::move(m), t.header};
}

// ---------------------------------------------------------------- build

struct BuildArgs {
    std::string matrix, attributes, mapping, ppi, text, output_dir;
    std::size_t shard_size = ShardManifest::default_shard_size;
};

int cmd_build(const BuildArgs& a) {
    const auto mapping = load_mapping(a.mapping);
    const auto ppi = load_ppi(a.ppi);
    auto [matrix, header] = read_expression(a.matrix);
    auto records = load_attributes(a.attributes);
    if (records.size() != static_cast<std::size_t>(matrix.rows())) {
        throw InputError(a.attributes + ": " + std::to_string(records.size()) + " records for " +
                         std::to_string(matrix.rows()) + " matrix rows");
    }

    TosgGraph graph = build_graph(mapping, ppi, {}, header);
    if (!a.text.empty()) {
        graph.text = load_text(a.text, graph.entities);
    }
    if (static_cast<std::size_t>(matrix.cols()) != graph.entities.num_features()) {
        throw InputError(a.matrix + ": " + std::to_string(matrix.cols()) + " columns for " +
                         std::to_string(graph.entities.num_features()) + " mapped features");
    }

    const fs::path out = prepare_output(a.output_dir);
    const auto manifest = write_shards(matrix, a.shard_size, out / "shards");
    // row i of the input matrix is record i; pointers are rewritten to the new shards
    for (std::size_t i = 0; i < records.size(); ++i) {
        records[i].matrix_file_path = manifest.shard_paths[manifest.shard_of(i)];
        records[i].matrix_row_idx = manifest.local_row(i);
    }
    write_attributes(out / "attributes.csv", records);
    save_graph(out / "graph.json", graph);

    const ShardReader reader(out / "shards");
    const auto issues = validate_pointers(records, reader);
    json report;
    report["rows"] = manifest.num_rows;
    report["features"] = manifest.num_cols;
    report["shards"] = manifest.num_shards();
    report["transcripts"] = graph.entities.num_transcripts();
    report["proteins"] = graph.entities.num_proteins();
    report["internal_edges"] = graph.edges.internal.size();
    report["ppi_edges"] = graph.edges.ppi.size();
    std::size_t unmapped = 0;
    for (const auto& t : graph.entities.feature_to_transcript) {
        unmapped += !t.has_value();
    }
    report["unmapped_features"] = unmapped;
    report["pointer_issues"] = json::array();
    for (const auto& i : issues) {
        report["pointer_issues"].push_back(i.message);
    }
    write_json(out / "build_report.json", report);

    std::vector<fs::path> inputs{a.matrix, a.attributes, a.mapping, a.ppi};
    if (!a.text.empty()) {
        inputs.emplace_back(a.text);
    }
    write_provenance(out, "build", {{"shard_size", a.shard_size}}, inputs);
    if (!issues.empty()) {
        throw InputError(issues.front().message);
    }
    return 0;
}

// ---------------------------------------------------------------- preprocess

struct PreprocessArgs {
    std::string data, config, output_dir;
    std::optional<double> target_sum;
    std::optional<std::size_t> n_hvg, n_pcs, group_size, knn_k;
    std::optional<std::uint64_t> seed;
};

template <typename T>
void overlay(json& j, const char* key, const std::optional<T>& v) {
    if (v) {
        j[key] = *v;
    }
}

int cmd_preprocess(const PreprocessArgs& a) {
    json cfg_json = a.config.empty() ? json::object() : read_json(a.config);
    overlay(cfg_json, "target_sum", a.target_sum);
    overlay(cfg_json, "n_hvg", a.n_hvg);
    overlay(cfg_json, "n_pcs", a.n_pcs);
    overlay(cfg_json, "metacell_group_size", a.group_size);
    overlay(cfg_json, "knn_k", a.knn_k);
    overlay(cfg_json, "seed", a.seed);
    preprocess::PreprocessConfig cfg;
    try {
        cfg.target_sum = cfg_json.value("target_sum", cfg.target_sum);
        cfg.n_hvg = cfg_json.value("n_hvg", cfg.n_hvg);
        cfg.n_pcs = cfg_json.value("n_pcs", cfg.n_pcs);
        cfg.metacell_group_size = cfg_json.value("metacell_group_size", cfg.metacell_group_size);
        cfg.knn_k = cfg_json.value("knn_k", cfg.knn_k);
        cfg.seed = cfg_json.value("seed", cfg.seed);
        cfg.kmeans_iterations = cfg_json.value("kmeans_iterations", cfg.kmeans_iterations);
    } catch (const json::exception& e) {
        throw InputError(std::string("preprocess config: ") + e.what());
    }

    const Dataset d = open_dataset(a.data);
    ShardReader reader(d.shards());
    const auto global = resolve_pointers(d.records, reader);
    const auto block = reader.read_rows(global);
    std::vector<std::size_t> ids(d.records.size());
    std::iota(ids.begin(), ids.end(), 0);
    const auto cells = preprocess::build_metacells(block.values.cast<double>(), d.records, cfg, ids);

    RowMatrixF m(static_cast<Eigen::Index>(cells.size()), block.values.cols());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        m.row(static_cast<Eigen::Index>(i)) = cells[i].expression.transpose().cast<float>();
    }
    const fs::path out = prepare_output(a.output_dir);
    const auto manifest = write_shards(m, ShardManifest::default_shard_size, out / "shards");
    std::vector<AttributeRecord> recs;
    csv::Table members;
    members.header = {"metacell", "record"};
    for (std::size_t i = 0; i < cells.size(); ++i) {
        auto rec = cells[i].attributes;
        rec.matrix_file_path = manifest.shard_paths[manifest.shard_of(i)];
        rec.matrix_row_idx = manifest.local_row(i);
        recs.push_back(rec);
        for (auto r : cells[i].member_rows) {
            members.rows.push_back({std::to_string(i), std::to_string(r)});
        }
    }
    write_attributes(out / "attributes.csv", recs);
    csv::write(out / "members.csv", members);
    save_graph(out / "graph.json", d.graph);

    json params = cfg_json;
    params["target_sum"] = cfg.target_sum;
    params["n_hvg"] = cfg.n_hvg;
    params["n_pcs"] = cfg.n_pcs;
    params["metacell_group_size"] = cfg.metacell_group_size;
    params["knn_k"] = cfg.knn_k;
    params["seed"] = cfg.seed;
    params["kmeans_iterations"] = cfg.kmeans_iterations;
    params["metacells"] = cells.size();
    write_provenance(out, "preprocess", params, d.files());
    return 0;
}

// ---------------------------------------------------------------- query / balance / split

struct QueryArgs {
    std::string data, conditions, conditions_file, task, label_column = "disease_BMG_name", extract_mode = "inference",
                                                               output_dir;
    std::optional<double> sample_ratio;
    std::optional<std::size_t> sample_size;
    bool shuffle = false;
    bool stratified_balancing = false;
    std::uint64_t seed = 0;
    double test_fraction = 0.2;
    double cap = 0.3;
    std::size_t min_count = 0;
};

retrieval::Query parse_conditions(const QueryArgs& a) {
    if (!a.conditions.empty() && !a.conditions_file.empty()) {
        throw UsageError("--conditions and --conditions-file are mutually exclusive");
    }
    if (!a.conditions_file.empty()) {
        return retrieval::Query::from_json(read_json(a.conditions_file));
    }
    if (a.conditions.empty()) {
        return {};
    }
    try {
        return retrieval::Query::from_json(json::parse(a.conditions));
    } catch (const json::parse_error& e) {
        throw InputError(std::string("--conditions: ") + e.what());
    }
}

void write_split(const fs::path& out, const Dataset& d, std::span<const std::size_t> rows, std::span<const std::string> labels,
                 const QueryArgs& a, json& summary) {
    // the split works on distinct records; labels follow their rows
    std::map<std::size_t, std::string> label_of;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        label_of.emplace(rows[i], labels[i]);
    }
    std::vector<std::size_t> distinct;
    for (const auto& [r, l] : label_of) {
        distinct.push_back(r);
    }
    const auto split = retrieval::donor_split(d.records, distinct, a.test_fraction, a.cap, a.seed);
    std::set<std::size_t> test_set(split.test.begin(), split.test.end());

    std::vector<std::size_t> train_rows, test_rows;
    std::vector<std::string> train_labels, test_labels;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const bool to_test = test_set.count(rows[i]) > 0;
        (to_test ? test_rows : train_rows).push_back(rows[i]);
        (to_test ? test_labels : train_labels).push_back(labels[i]);
    }
    if (a.min_count > 0) {
        auto up = retrieval::upsample_rare(train_rows, train_labels, a.min_count, a.seed);
        for (const auto& c : up.empty_classes) {
            warn("class '" + c + "' has no training rows");
        }
        train_rows = std::move(up.rows);
        train_labels = std::move(up.labels);
    }
    write_json(out / "train.json", cohort_json(train_rows, train_labels, a.label_column));
    write_json(out / "test.json", cohort_json(test_rows, test_labels, a.label_column));
    write_indices(out / "train_indices.txt", train_rows);
    write_indices(out / "test_indices.txt", test_rows);
    summary["train_size"] = train_rows.size();
    summary["test_size"] = test_rows.size();
}

int cmd_query(QueryArgs a, bool force_balance) {
    if (a.sample_ratio && a.sample_size) {
        throw UsageError("sample_ratio and sample_size are mutually exclusive");
    }
    if (a.extract_mode != "inference" && a.extract_mode != "train") {
        throw UsageError("--extract-mode must be 'inference' or 'train'");
    }
    if (a.min_count > 0 && a.extract_mode != "train") {
        throw UsageError("--min-count applies to extract_mode=train only");
    }
    a.stratified_balancing = a.stratified_balancing || force_balance;
    if (!AttributeRecord::is_attribute(a.label_column)) {
        throw InputError("unknown label column '" + a.label_column + "'");
    }
    const Dataset d = open_dataset(a.data);
    const auto query = parse_conditions(a);

    std::vector<std::size_t> rows;
    std::vector<std::string> labels;
    json cohort;
    json params;
    std::vector<fs::path> inputs = d.files();
    if (a.stratified_balancing) {
        if (a.task.empty()) {
            throw UsageError("stratified balancing needs --task");
        }
        inputs.emplace_back(a.task);
        const auto task = retrieval::TaskConfig::from_json(read_json(a.task));
        const auto bal = retrieval::phase2_balance(d.records, query, task);
        rows = bal.rows;
        labels = bal.labels;
        if (a.label_column != task.balance_field) {
            for (std::size_t i = 0; i < rows.size(); ++i) {
                labels[i] = retrieval::value_of(d.records[rows[i]], a.label_column);
            }
        }
        cohort = bal.to_json();
        params["task"] = task.to_json();
    } else {
        rows = retrieval::phase1_extract(d.records, query);
        for (auto r : rows) {
            labels.push_back(retrieval::value_of(d.records[r], a.label_column));
        }
    }

    retrieval::SampleSpec spec;
    spec.ratio = a.sample_ratio;
    spec.size = a.sample_size;
    spec.shuffle = a.shuffle;
    spec.seed = a.seed;
    retrieval::subsample(rows, labels, spec);

    if (rows.empty()) {
        warn("the query selected no rows");
    }
    const fs::path out = prepare_output(a.output_dir);
    json full = cohort_json(rows, labels, a.label_column);
    if (a.stratified_balancing) {
        full["strata"] = cohort["strata"];
        full["reference_is_control"] = cohort["reference_is_control"];
    }
    write_json(out / "cohort.json", full);
    write_indices(out / "indices.txt", rows);

    json summary{{"size", rows.size()}};
    if (a.extract_mode == "train") {
        write_split(out, d, rows, labels, a, summary);
    }
    write_json(out / "summary.json", summary);

    params["conditions"] = query.to_json();
    params["label_column"] = a.label_column;
    params["stratified_balancing"] = a.stratified_balancing;
    params["extract_mode"] = a.extract_mode;
    params["sample_ratio"] = a.sample_ratio ? json(*a.sample_ratio) : json(nullptr);
    params["sample_size"] = a.sample_size ? json(*a.sample_size) : json(nullptr);
    params["shuffle"] = a.shuffle;
    params["seed"] = a.seed;
    if (a.extract_mode == "train") {
        params["test_fraction"] = a.test_fraction;
        params["cap"] = a.cap;
        params["min_count"] = a.min_count;
    }
    write_provenance(out, a.stratified_balancing ? "balance" : "query", params, inputs);
    return 0;
}

struct SplitArgs {
    std::string data, cohort, output_dir;
    double test_fraction = 0.2;
    double cap = 0.3;
    std::uint64_t seed = 0;
    std::size_t min_count = 0;
};

int cmd_split(const SplitArgs& s) {
    const Dataset d = open_dataset(s.data);
    const auto c = read_cohort(s.cohort);
    const auto label_column = read_json(s.cohort).value("label_column", std::string("disease_BMG_name"));
    QueryArgs a;
    a.test_fraction = s.test_fraction;
    a.cap = s.cap;
    a.seed = s.seed;
    a.min_count = s.min_count;
    a.label_column = label_column;
    const fs::path out = prepare_output(s.output_dir);
    json summary;
    write_split(out, d, c.rows, c.labels, a, summary);
    write_json(out / "summary.json", summary);
    auto inputs = d.files();
    inputs.emplace_back(s.cohort);
    write_provenance(out, "split",
                     {{"test_fraction", s.test_fraction}, {"cap", s.cap}, {"seed", s.seed}, {"min_count", s.min_count}},
                     inputs);
    return 0;
}

// ---------------------------------------------------------------- pretrain

struct PretrainArgs {
    std::string data, cohort, config, output_dir;
    std::optional<std::size_t> epochs, d, d_prime, layers_internal, layers_global;
    std::optional<double> learning_rate, mask_ratio, lambda_edge, lambda_deg, neg_ratio;
    std::optional<std::uint64_t> seed;
    std::size_t text_dim = 8;
    bool skip_gradient_check = false;
};

int cmd_pretrain(const PretrainArgs& a) {
    json cfg_json = a.config.empty() ? json::object() : read_json(a.config);
    overlay(cfg_json, "epochs", a.epochs);
    overlay(cfg_json, "d", a.d);
    overlay(cfg_json, "d_prime", a.d_prime);
    overlay(cfg_json, "layers_internal", a.layers_internal);
    overlay(cfg_json, "layers_global", a.layers_global);
    overlay(cfg_json, "learning_rate", a.learning_rate);
    overlay(cfg_json, "mask_ratio", a.mask_ratio);
    overlay(cfg_json, "lambda_edge", a.lambda_edge);
    overlay(cfg_json, "lambda_deg", a.lambda_deg);
    overlay(cfg_json, "neg_ratio", a.neg_ratio);
    overlay(cfg_json, "seed", a.seed);
    if (a.skip_gradient_check) {
        cfg_json["check_gradients"] = false;
    }
    const auto cfg = fm::ModelConfig::from_json(cfg_json);
    cfg.validate();
    if (a.text_dim == 0) {
        throw InputError("--text-dim must be at least 1");
    }

    const Dataset d = open_dataset(a.data);
    std::vector<std::size_t> rows;
    std::vector<fs::path> inputs = d.files();
    if (!a.cohort.empty()) {
        rows = read_cohort(a.cohort).rows;
        inputs.emplace_back(a.cohort);
    } else {
        rows.resize(d.records.size());
        std::iota(rows.begin(), rows.end(), 0);
    }
    if (rows.empty()) {
        throw InputError("pretrain: no samples selected");
    }
    const auto [block, features] = load_features(d, rows);
    const auto text = pseudo_text_embed(d.graph.text, a.text_dim, cfg.seed);

    const fs::path out = prepare_output(a.output_dir);
    const auto run = fm::train(d.graph, features, text, cfg);
    fm::write_history(out / "history.csv", run.history);
    json eval{{"epochs", cfg.epochs},
              {"masked_edges", run.plan.masked.size()},
              {"visible_edges", run.plan.visible.size()},
              {"samples", rows.size()},
              {"gradient_check_max_relative_error", run.gradient_check_error}};
    if (!run.plan.masked.empty() && !run.eval_negatives.empty()) {
        const auto r = fm::evaluate(run, cfg, d.graph, features, text);
        eval["auc"] = r.auc;
        eval["recovered_fraction"] = r.recovered_fraction;
    } else {
        warn("no masked edges; reconstruction was not evaluated");
    }
    write_json(out / "eval.json", eval);
    fm::save_checkpoint(out / "checkpoint.bin", run.params, cfg, a.text_dim, {{"text_seed", cfg.seed}});

    json params = cfg.to_json();
    params["text_dim"] = a.text_dim;
    write_provenance(out, "pretrain", params, inputs);
    return 0;
}

// ---------------------------------------------------------------- infer-core

struct InferArgs {
    std::string data, checkpoint, cohort, target_label, output_dir;
    std::size_t xi = inference::default_xi;
    std::size_t epsilon = inference::default_epsilon;
    std::size_t head_epochs = 200;
    double head_learning_rate = 0.1;
    std::uint64_t seed = 0;
};

int cmd_infer_core(const InferArgs& a) {
    if (a.xi == 0) {
        throw InputError("--xi must be at least 1");
    }
    const Dataset d = open_dataset(a.data);
    const auto ck = fm::load_checkpoint(a.checkpoint);
    const auto cohort = read_cohort(a.cohort);
    if (cohort.rows.empty()) {
        throw InputError(a.cohort + ": empty cohort");
    }

    std::set<std::string> classes(cohort.labels.begin(), cohort.labels.end());
    if (!classes.count(a.target_label)) {
        throw InputError("target label '" + a.target_label + "' does not occur in the cohort");
    }
    if (classes.size() < 2) {
        throw InputError("the cohort needs at least two label classes");
    }
    const std::vector<std::string> class_list(classes.begin(), classes.end());
    std::vector<std::size_t> y;
    std::vector<bool> in_target;
    for (const auto& l : cohort.labels) {
        y.push_back(static_cast<std::size_t>(std::find(class_list.begin(), class_list.end(), l) - class_list.begin()));
        in_target.push_back(l == a.target_label);
    }

    const auto [block, features] = load_features(d, cohort.rows);
    const auto text_seed = ck.extra.value("text_seed", ck.config.seed);
    const auto text = pseudo_text_embed(d.graph.text, ck.text_dim, text_seed);
    const auto h = inference::pretrained_embeddings(ck.params, ck.config, d.graph, features, text);

    inference::HeadConfig hc;
    hc.num_classes = class_list.size();
    hc.epochs = a.head_epochs;
    hc.learning_rate = a.head_learning_rate;
    hc.seed = a.seed;
    const auto ops = inference::GraphOps::full(d.graph, ck.config.internal_undirected);
    const auto head_run = inference::train_head(h, y, ops, hc);
    const double train_acc = inference::accuracy(inference::predict(head_run.head, h, ops), y);

    // gene label: the protein an entity codes for, else its own id
    const auto& ent = d.graph.entities;
    std::vector<std::optional<std::string>> gene_of(ent.size());
    for (std::size_t i = 0; i < ent.size(); ++i) {
        gene_of[i] = ent.id(i);
    }
    for (const auto& [t, p] : d.graph.edges.internal) {
        if (gene_of[t] == ent.id(t)) {
            gene_of[t] = ent.id(p);
        }
    }
    std::vector<std::string> feature_gene;
    for (std::size_t f = 0; f < ent.num_features(); ++f) {
        const auto& t = ent.feature_to_transcript[f];
        feature_gene.push_back(t ? *gene_of[*t] : ent.feature_ids[f]);
    }

    std::vector<std::vector<double>> target_weights;
    for (std::size_t s = 0; s < h.size(); ++s) {
        if (in_target[s]) {
            const Matrix z = inference::head_states(head_run.head, h[s], ops, hc.activation);
            target_weights.push_back(inference::attention_affinity(head_run.head, z, d.graph.edges.ppi));
        }
    }
    const auto weights = inference::aggregate_group(target_weights, d.graph.edges.ppi, gene_of);
    if (!weights.unmapped_entities.empty()) {
        warn(std::to_string(weights.unmapped_entities.size()) + " entities lack a gene label");
    }
    const auto scores = inference::node_scores(weights, block.values.cast<double>(), feature_gene, in_target);
    const auto core = inference::extract_core(scores, weights, a.xi, a.epsilon);

    const fs::path out = prepare_output(a.output_dir);
    inference::write_node_scores(out / "node_scores.csv", scores);
    inference::write_core_tsv(out / "core.tsv", core);
    inference::write_core_dot(out / "core.dot", core);
    write_json(out / "head_report.json", {{"classes", class_list},
                                          {"train_accuracy", train_acc},
                                          {"final_loss", head_run.loss_history.empty() ? 0.0 : head_run.loss_history.back()},
                                          {"core_nodes", core.nodes.size()},
                                          {"core_edges", core.edges.size()}});
    auto inputs = d.files();
    inputs.emplace_back(a.checkpoint);
    inputs.emplace_back(a.cohort);
    write_provenance(out, "infer-core",
                     {{"target_label", a.target_label},
                      {"xi", a.xi},
                      {"epsilon", a.epsilon},
                      {"head_epochs", a.head_epochs},
                      {"head_learning_rate", a.head_learning_rate},
                      {"seed", a.seed}},
                     inputs);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Text-omic signaling graph toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", tool_version);

    BuildArgs build;
    auto* b = app.add_subcommand("build", "Shard an expression matrix and assemble the graph");
    b->add_option("--matrix", build.matrix, "Expression matrix (.npy or .csv with feature header)")->required();
    b->add_option("--attributes", build.attributes, "Attribute CSV aligned with matrix rows")->required();
    b->add_option("--mapping", build.mapping, "feature_id,transcript_id,protein_id CSV")->required();
    b->add_option("--ppi", build.ppi, "src_protein,dst_protein CSV")->required();
    b->add_option("--text", build.text, "Per-entity text CSV");
    b->add_option("--shard-size", build.shard_size, "Rows per shard")->check(CLI::PositiveNumber);
    b->add_option("--output-dir,--output_dir", build.output_dir)->required();

    PreprocessArgs pre;
    auto* p = app.add_subcommand("preprocess", "Normalize, reduce and aggregate cells into meta-cells");
    p->add_option("--data", pre.data, "Dataset directory")->required();
    p->add_option("--config", pre.config, "JSON preprocessing config");
    p->add_option("--target-sum", pre.target_sum);
    p->add_option("--n-hvg", pre.n_hvg);
    p->add_option("--n-pcs", pre.n_pcs);
    p->add_option("--group-size", pre.group_size, "Cells per meta-cell");
    p->add_option("--knn-k", pre.knn_k);
    p->add_option("--seed", pre.seed);
    p->add_option("--output-dir,--output_dir", pre.output_dir)->required();

    QueryArgs query;
    auto add_query_options = [&](CLI::App* c) {
        c->add_option("--data", query.data, "Dataset directory")->required();
        c->add_option("--conditions", query.conditions, "JSON object of attribute constraints");
        c->add_option("--conditions-file", query.conditions_file);
        c->add_option("--task", query.task, "JSON task config for stratified balancing");
        c->add_option("--label-column,--label_column", query.label_column);
        c->add_option("--sample-ratio,--sample_ratio", query.sample_ratio);
        c->add_option("--sample-size,--sample_size", query.sample_size);
        c->add_flag("--shuffle", query.shuffle);
        c->add_option("--extract-mode,--extract_mode", query.extract_mode, "inference or train");
        c->add_option("--test-fraction", query.test_fraction);
        c->add_option("--cap", query.cap, "Largest test share of rows");
        c->add_option("--min-count", query.min_count, "Upsample training classes below this count");
        c->add_option("--seed", query.seed);
        c->add_option("--output-dir,--output_dir", query.output_dir)->required();
    };
    auto* q = app.add_subcommand("query", "Conjunctive retrieval, optionally balanced");
    add_query_options(q);
    q->add_flag("--stratified-balancing,--stratified_balancing", query.stratified_balancing);
    auto* bal = app.add_subcommand("balance", "Stratified case/control retrieval");
    add_query_options(bal);

    SplitArgs split;
    auto* s = app.add_subcommand("split", "Donor-level train/test split of a cohort");
    s->add_option("--data", split.data)->required();
    s->add_option("--cohort", split.cohort)->required();
    s->add_option("--test-fraction", split.test_fraction);
    s->add_option("--cap", split.cap);
    s->add_option("--seed", split.seed);
    s->add_option("--min-count", split.min_count);
    s->add_option("--output-dir,--output_dir", split.output_dir)->required();

    PretrainArgs pt;
    auto* t = app.add_subcommand("pretrain", "Masked-edge pretraining");
    t->add_option("--data", pt.data)->required();
    t->add_option("--cohort", pt.cohort, "Cohort JSON restricting the samples");
    t->add_option("--config", pt.config, "JSON model config");
    t->add_option("--epochs", pt.epochs);
    t->add_option("--d", pt.d);
    t->add_option("--d-prime", pt.d_prime);
    t->add_option("--layers-internal", pt.layers_internal);
    t->add_option("--layers-global", pt.layers_global);
    t->add_option("--learning-rate", pt.learning_rate);
    t->add_option("--mask-ratio", pt.mask_ratio);
    t->add_option("--lambda-edge", pt.lambda_edge);
    t->add_option("--lambda-deg", pt.lambda_deg);
    t->add_option("--neg-ratio", pt.neg_ratio);
    t->add_option("--seed", pt.seed);
    t->add_option("--text-dim", pt.text_dim, "Width of each pseudo text embedding");
    t->add_flag("--skip-gradient-check", pt.skip_gradient_check);
    t->add_option("--output-dir,--output_dir", pt.output_dir)->required();

    InferArgs inf;
    auto* ic = app.add_subcommand("infer-core", "Train the downstream head and extract the core subgraph");
    ic->add_option("--data", inf.data)->required();
    ic->add_option("--checkpoint", inf.checkpoint)->required();
    ic->add_option("--cohort", inf.cohort, "Cohort JSON with labels")->required();
    ic->add_option("--target-label", inf.target_label, "Label of the target group")->required();
    ic->add_option("--xi", inf.xi);
    ic->add_option("--epsilon", inf.epsilon);
    ic->add_option("--head-epochs", inf.head_epochs);
    ic->add_option("--head-learning-rate", inf.head_learning_rate);
    ic->add_option("--seed", inf.seed);
    ic->add_option("--output-dir,--output_dir", inf.output_dir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (b->parsed()) return cmd_build(build);
        if (p->parsed()) return cmd_preprocess(pre);
        if (q->parsed()) return cmd_query(query, false);
        if (bal->parsed()) return cmd_query(query, true);
        if (s->parsed()) return cmd_split(split);
        if (t->parsed()) return cmd_pretrain(pt);
        if (ic->parsed()) return cmd_infer_core(inf);
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
