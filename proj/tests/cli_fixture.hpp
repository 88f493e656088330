#ifndef CELLTOSG_TESTS_CLI_FIXTURE_HPP
#define CELLTOSG_TESTS_CLI_FIXTURE_HPP

// Small on-disk inputs for driving the command-line tool, plus a helper to
// run it.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <celltosg/celltosg.hpp>

namespace support {

namespace fs = std::filesystem;

struct CliInputs {
    fs::path matrix, attributes, mapping, ppi, text;
};

/**
 * 12 donors x 5 rows over 14 features. Features f0..f11 map one to one onto
 * proteins P0..P11; f12 is a second transcript of P0 and f13 has no protein.
 * Donors d0..d5 are "flu", the rest "normal"; flu rows are raised on f1..f3.
 */
inline CliInputs write_cli_inputs(const fs::path& dir, std::uint64_t seed = 5) {
    fs::create_directories(dir);
    CliInputs in{dir / "matrix.npy", dir / "attributes.csv", dir / "mapping.csv", dir / "ppi.csv", dir / "text.csv"};

    celltosg::csv::Table map;
    map.header = {"feature_id", "transcript_id", "protein_id"};
    for (int i = 0; i < 12; ++i) {
        map.rows.push_back({"f" + std::to_string(i), "T" + std::to_string(i), "P" + std::to_string(i)});
    }
    map.rows.push_back({"f12", "T12", "P0"});
    map.rows.push_back({"f13", "T13", ""});
    celltosg::csv::write(in.mapping, map);

    celltosg::csv::Table ppi;
    ppi.header = {"src_protein", "dst_protein"};
    for (int i = 0; i < 12; ++i) {
        ppi.rows.push_back({"P" + std::to_string(i), "P" + std::to_string((i + 1) % 12)});
    }
    ppi.rows.push_back({"P1", "P5"});
    ppi.rows.push_back({"P3", "P2"}); // reverse of a ring edge
    ppi.rows.push_back({"P3", "P8"});
    celltosg::csv::write(in.ppi, ppi);

    celltosg::csv::Table text;
    text.header = {"kind", "entity_id", "name", "description", "sequence"};
    text.rows.push_back({"protein", "P1", "KIN1", "kinase", "MKT"});
    text.rows.push_back({"transcript", "T2", "T2-201", "", "AUG"});
    celltosg::csv::write(in.text, text);

    celltosg::Rng rng(seed);
    const std::size_t rows = 60, cols = 14;
    celltosg::RowMatrixF m(rows, cols);
    celltosg::csv::Table attrs;
    attrs.header = {"source", "dataset_id", "suspension_type", "tissue_general", "tissue", "matrix_file_path",
                    "matrix_row_idx", "donor_id", "CMT_name", "disease_BMG_name", "development_stage_category",
                    "sex_normalized"};
    const char* stages[] = {"child", "adult", "aged"};
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t donor = r / 5;
        const bool flu = donor < 6;
        for (std::size_t c = 0; c < cols; ++c) {
            double v = 2.0 + 0.5 * celltosg::detail::standard_normal(rng);
            if (flu && c >= 1 && c <= 3) {
                v += 3.0;
            }
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = static_cast<float>(std::max(v, 0.0));
        }
        attrs.rows.push_back({"atlas", donor % 2 ? "ds2" : "ds1", "cell", "lung", "lung", "input.npy", std::to_string(r),
                              "d" + std::to_string(donor), r % 2 ? "T cell" : "B cell", flu ? "flu" : "normal",
                              stages[donor % 3], donor % 4 < 2 ? "male" : "female"});
    }
    celltosg::npy::write(in.matrix, m);
    celltosg::csv::write(in.attributes, attrs);
    return in;
}

struct CliResult {
    int code = -1;
    std::string err;
};

/** Run the tool with `args` (already shell-quoted); stderr is captured. */
inline CliResult run_cli(const std::string& exe, const std::string& args, const fs::path& scratch) {
    const auto err_path = scratch / "stderr.txt";
    const std::string cmd = "'" + exe + "' " + args + " > /dev/null 2> '" + err_path.string() + "'";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(err_path);
    std::stringstream ss;
    ss << in.rdbuf();
    r.err = ss.str();
    return r;
}

inline std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/** True when both trees hold the same relative paths with identical bytes. */
inline bool same_tree(const fs::path& a, const fs::path& b, std::string* first_diff = nullptr) {
    std::map<std::string, std::string> fa, fb;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (e.is_regular_file()) fa[fs::relative(e.path(), a).generic_string()] = slurp(e.path());
    }
    for (const auto& e : fs::recursive_directory_iterator(b)) {
        if (e.is_regular_file()) fb[fs::relative(e.path(), b).generic_string()] = slurp(e.path());
    }
    if (fa == fb) {
        return true;
    }
    if (first_diff) {
        for (const auto& [k, v] : fa) {
            if (!fb.count(k) || fb[k] != v) {
                *first_diff = k;
                break;
            }
        }
        if (first_diff->empty()) *first_diff = "extra file in second tree";
    }
    return false;
}

} // namespace support

#endif
