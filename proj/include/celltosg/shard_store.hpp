#ifndef CELLTOSG_SHARD_STORE_HPP
#define CELLTOSG_SHARD_STORE_HPP

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"
#include "csv.hpp"
#include "npy.hpp"

/**
 * @file shard_store.hpp
 * @brief Row-sharded float32 expression storage and the aligned attribute table.
 */

namespace celltosg {

/**
 * @brief Index of a row-sharded matrix corpus.
 *
 * Global row `g` lives in shard `g / shard_size` at local row `g % shard_size`.
 * Every shard except possibly the last holds exactly `shard_size` rows.
 */
struct ShardManifest {
    static constexpr std::size_t default_shard_size = 10000;
    static constexpr int format_version = 1;

    std::size_t shard_size = default_shard_size;
    std::size_t num_rows = 0;
    std::size_t num_cols = 0;

    /** Shard files relative to the directory holding the manifest. */
    std::vector<std::string> shard_paths;

    std::size_t num_shards() const { return shard_paths.size(); }

    std::size_t shard_of(std::size_t global) const { return global / shard_size; }
    std::size_t local_row(std::size_t global) const { return global % shard_size; }

    std::size_t rows_in_shard(std::size_t shard) const {
        const std::size_t start = shard * shard_size;
        return std::min(shard_size, num_rows - start);
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["format_version"] = format_version;
        j["shard_size"] = shard_size;
        j["num_rows"] = num_rows;
        j["num_cols"] = num_cols;
        j["shard_paths"] = shard_paths;
        return j;
    }

    static ShardManifest from_json(const nlohmann::json& j) {
        ShardManifest m;
        try {
            m.shard_size = j.at("shard_size").get<std::size_t>();
            m.num_rows = j.at("num_rows").get<std::size_t>();
            m.num_cols = j.at("num_cols").get<std::size_t>();
            m.shard_paths = j.at("shard_paths").get<std::vector<std::string>>();
        } catch (const nlohmann::json::exception& e) {
            throw InputError(std::string("malformed shard manifest: ") + e.what());
        }
        if (m.shard_size == 0) {
            throw InputError("shard manifest: shard_size must be positive");
        }
        const std::size_t expected = (m.num_rows + m.shard_size - 1) / m.shard_size;
        if (m.shard_paths.size() != expected) {
            throw InputError("shard manifest: expected " + std::to_string(expected) + " shards, found " +
                             std::to_string(m.shard_paths.size()));
        }
        return m;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out) {
            throw IoError("cannot open " + path.string() + " for writing");
        }
        out << to_json().dump(2) << '\n';
    }

    static ShardManifest load(const std::filesystem::path& path) {
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
        return from_json(j);
    }
};

inline constexpr const char* manifest_filename = "manifest.json";

/**
 * @brief Materialized subset of rows.
 *
 * `values.row(i)` holds global row `row_ids[i]`.
 */
struct ExpressionBlock {
    std::vector<std::size_t> row_ids;
    RowMatrixF values;
};

/**
 * Split `matrix` into NPY shards of `shard_size` rows under `dir`, and write
 * the manifest sidecar next to them.
 */
inline ShardManifest write_shards(const RowMatrixF& matrix, std::size_t shard_size, const std::filesystem::path& dir) {
    if (shard_size == 0) {
        throw InputError("write_shards: shard_size must be at least 1");
    }
    if (matrix.cols() == 0) {
        throw InputError("write_shards: zero-column matrix");
    }
    if (matrix.rows() == 0) {
        throw InputError("write_shards: empty matrix");
    }

    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create " + dir.string() + ": " + ec.message());
    }

    ShardManifest manifest;
    manifest.shard_size = shard_size;
    manifest.num_rows = static_cast<std::size_t>(matrix.rows());
    manifest.num_cols = static_cast<std::size_t>(matrix.cols());

    const std::size_t nshards = (manifest.num_rows + shard_size - 1) / shard_size;
    for (std::size_t s = 0; s < nshards; ++s) {
        char name[32];
        std::snprintf(name, sizeof(name), "part_%05zu.npy", s);
        const std::size_t start = s * shard_size;
        const std::size_t count = std::min(shard_size, manifest.num_rows - start);
        const float* begin = matrix.data() + start * manifest.num_cols;
        npy::write(dir / name, std::span<const float>(begin, count * manifest.num_cols), count, manifest.num_cols);
        manifest.shard_paths.emplace_back(name);
    }
    manifest.save(dir / manifest_filename);
    return manifest;
}

/**
 * @brief Reads arbitrary row subsets from a shard directory.
 *
 * Only the requested rows are pulled off disk; each shard containing at least
 * one requested row is opened exactly once per `read_rows()` call. Reading is
 * const and the object may be shared between threads as long as the stats
 * counter is not relied upon.
 */
class ShardReader {
public:
    ShardReader(ShardManifest manifest, std::filesystem::path root) :
        my_manifest(std::move(manifest)), my_root(std::move(root)) {}

    explicit ShardReader(const std::filesystem::path& root) :
        ShardReader(ShardManifest::load(root / manifest_filename), root) {}

    const ShardManifest& manifest() const { return my_manifest; }
    const std::filesystem::path& root() const { return my_root; }

    /** Number of shard files opened over the lifetime of this reader. */
    std::size_t files_opened() const { return my_files_opened; }

    ExpressionBlock read_rows(std::span<const std::size_t> indices) {
        const std::size_t ncols = my_manifest.num_cols;
        for (std::size_t g : indices) {
            if (g >= my_manifest.num_rows) {
                throw InputError("read_rows: index " + std::to_string(g) + " out of range [0, " +
                                 std::to_string(my_manifest.num_rows) + ")");
            }
        }

        ExpressionBlock block;
        block.row_ids.assign(indices.begin(), indices.end());
        block.values.resize(static_cast<Eigen::Index>(indices.size()), static_cast<Eigen::Index>(ncols));

        // shard -> (local row, output position), visited in file order
        std::map<std::size_t, std::vector<std::pair<std::size_t, std::size_t>>> plan;
        for (std::size_t pos = 0; pos < indices.size(); ++pos) {
            plan[my_manifest.shard_of(indices[pos])].emplace_back(my_manifest.local_row(indices[pos]), pos);
        }

        for (auto& [shard, wanted] : plan) {
            std::sort(wanted.begin(), wanted.end());
            const auto path = my_root / my_manifest.shard_paths[shard];
            std::ifstream in(path, std::ios::binary);
            if (!in) {
                throw IoError("cannot open shard " + path.string());
            }
            ++my_files_opened;
            const npy::Header h = npy::parse_header(in, path.string());
            if (h.descr != "<f4" || h.fortran_order || h.rows() != my_manifest.rows_in_shard(shard) ||
                h.cols() != ncols) {
                throw InputError(path.string() + ": shard header does not match manifest");
            }
            const auto row_bytes = static_cast<std::streamoff>(ncols * sizeof(float));
            for (const auto& [local, pos] : wanted) {
                in.seekg(static_cast<std::streamoff>(h.data_offset) + static_cast<std::streamoff>(local) * row_bytes);
                in.read(reinterpret_cast<char*>(block.values.row(static_cast<Eigen::Index>(pos)).data()), row_bytes);
                if (!in) {
                    throw IoError(path.string() + ": short read at row " + std::to_string(local));
                }
            }
        }
        return block;
    }

    ExpressionBlock read_all() {
        std::vector<std::size_t> all(my_manifest.num_rows);
        for (std::size_t i = 0; i < all.size(); ++i) {
            all[i] = i;
        }
        return read_rows(all);
    }

    /** Global index addressed by a (shard path, local row) pointer, if it exists. */
    std::optional<std::size_t> resolve(const std::string& shard_path, std::size_t local_row) const {
        const std::string wanted = normalize_path(shard_path);
        for (std::size_t s = 0; s < my_manifest.shard_paths.size(); ++s) {
            if (normalize_path(my_manifest.shard_paths[s]) == wanted) {
                if (local_row < my_manifest.rows_in_shard(s)) {
                    return s * my_manifest.shard_size + local_row;
                }
                return std::nullopt;
            }
        }
        return std::nullopt;
    }

private:
    static std::string normalize_path(const std::string& p) {
        std::string out = std::filesystem::path(p).lexically_normal().generic_string();
        while (!out.empty() && out.front() == '/') {
            out.erase(out.begin());
        }
        return out;
    }

    ShardManifest my_manifest;
    std::filesystem::path my_root;
    std::size_t my_files_opened = 0;
};

/** Convenience wrapper: read `indices` from the shard directory at `root`. */
inline ExpressionBlock read_rows(const ShardManifest& manifest, const std::filesystem::path& root,
                                 std::span<const std::size_t> indices) {
    ShardReader reader(manifest, root);
    return reader.read_rows(indices);
}

enum class SuspensionType { cell, nucleus };
enum class Sex { male, female, unknown };

inline std::string to_string(SuspensionType s) { return s == SuspensionType::cell ? "cell" : "nucleus"; }

inline std::string to_string(Sex s) {
    switch (s) {
    case Sex::male:
        return "male";
    case Sex::female:
        return "female";
    default:
        return "unknown";
    }
}

inline std::optional<SuspensionType> parse_suspension_type(std::string_view s) {
    if (s == "cell") {
        return SuspensionType::cell;
    }
    if (s == "nucleus") {
        return SuspensionType::nucleus;
    }
    return std::nullopt;
}

inline std::optional<Sex> parse_sex(std::string_view s) {
    if (s == "male") {
        return Sex::male;
    }
    if (s == "female") {
        return Sex::female;
    }
    if (s == "unknown") {
        return Sex::unknown;
    }
    return std::nullopt;
}

/**
 * @brief One row of cohort metadata.
 *
 * Column names follow the released attribute table. Optional columns that are
 * absent from the CSV, or empty in a given row, are left unset.
 */
struct AttributeRecord {
    std::optional<std::string> source;
    std::string dataset_id;
    SuspensionType suspension_type = SuspensionType::cell;
    std::string tissue_general;
    std::optional<std::string> tissue;
    std::string matrix_file_path;
    std::size_t matrix_row_idx = 0;
    std::string donor_id;
    std::optional<std::string> CMT_id;
    std::optional<std::string> CMT_name;
    std::string disease_BMG_name;
    std::optional<std::string> disease_BMG_id;
    std::optional<std::string> development_stage_category;
    Sex sex_normalized = Sex::unknown;

    /** All attribute names, in canonical column order. */
    static const std::vector<std::string>& names() {
        static const std::vector<std::string> all{
            "source",   "dataset_id",       "suspension_type", "tissue_general",
            "tissue",   "matrix_file_path", "matrix_row_idx",  "donor_id",
            "CMT_id",   "CMT_name",         "disease_BMG_name", "disease_BMG_id",
            "development_stage_category",  "sex_normalized"};
        return all;
    }

    static const std::vector<std::string>& required_names() {
        static const std::vector<std::string> req{"dataset_id",     "suspension_type", "tissue_general",
                                                  "matrix_file_path", "matrix_row_idx", "donor_id",
                                                  "disease_BMG_name", "sex_normalized"};
        return req;
    }

    static bool is_attribute(std::string_view name) {
        const auto& all = names();
        return std::find(all.begin(), all.end(), name) != all.end();
    }

    /**
     * Value of attribute `name` as text; unset optionals give `std::nullopt`.
     * Throws `InputError` for names outside the schema.
     */
    std::optional<std::string> get(std::string_view name) const {
        if (name == "source") return source;
        if (name == "dataset_id") return dataset_id;
        if (name == "suspension_type") return to_string(suspension_type);
        if (name == "tissue_general") return tissue_general;
        if (name == "tissue") return tissue;
        if (name == "matrix_file_path") return matrix_file_path;
        if (name == "matrix_row_idx") return std::to_string(matrix_row_idx);
        if (name == "donor_id") return donor_id;
        if (name == "CMT_id") return CMT_id;
        if (name == "CMT_name") return CMT_name;
        if (name == "disease_BMG_name") return disease_BMG_name;
        if (name == "disease_BMG_id") return disease_BMG_id;
        if (name == "development_stage_category") return development_stage_category;
        if (name == "sex_normalized") return to_string(sex_normalized);
        throw InputError("unknown attribute '" + std::string(name) + "'");
    }

    /** Set attribute `name` from text. Empty text clears optional fields. */
    void set(std::string_view name, const std::string& value) {
        auto opt = [&](std::optional<std::string>& field) {
            if (value.empty()) {
                field.reset();
            } else {
                field = value;
            }
        };
        if (name == "source") opt(source);
        else if (name == "dataset_id") dataset_id = value;
        else if (name == "suspension_type") {
            auto parsed = parse_suspension_type(value);
            if (!parsed) {
                throw InputError("suspension_type must be 'cell' or 'nucleus', got '" + value + "'");
            }
            suspension_type = *parsed;
        } else if (name == "tissue_general") tissue_general = value;
        else if (name == "tissue") opt(tissue);
        else if (name == "matrix_file_path") matrix_file_path = value;
        else if (name == "matrix_row_idx") {
            std::size_t used = 0;
            unsigned long long parsed = 0;
            try {
                if (value.empty() || value.front() == '-' || value.front() == '+') {
                    throw std::invalid_argument("sign");
                }
                parsed = std::stoull(value, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || used != value.size()) {
                throw InputError("matrix_row_idx is not a non-negative integer: '" + value + "'");
            }
            matrix_row_idx = static_cast<std::size_t>(parsed);
        } else if (name == "donor_id") donor_id = value;
        else if (name == "CMT_id") opt(CMT_id);
        else if (name == "CMT_name") opt(CMT_name);
        else if (name == "disease_BMG_name") disease_BMG_name = value;
        else if (name == "disease_BMG_id") opt(disease_BMG_id);
        else if (name == "development_stage_category") opt(development_stage_category);
        else if (name == "sex_normalized") {
            auto parsed = parse_sex(value);
            if (!parsed) {
                throw InputError("sex_normalized must be male, female or unknown, got '" + value + "'");
            }
            sex_normalized = *parsed;
        } else {
            throw InputError("unknown attribute '" + std::string(name) + "'");
        }
    }
};

/**
 * Parse an attribute table. The header must contain every required column;
 * unknown extra columns are ignored.
 */
inline std::vector<AttributeRecord> parse_attributes(const csv::Table& table, const std::string& label = "attributes") {
    std::vector<std::string> missing;
    for (const auto& name : AttributeRecord::required_names()) {
        if (table.column(name) < 0) {
            missing.push_back(name);
        }
    }
    if (!missing.empty()) {
        std::string msg = label + ": missing required column(s):";
        for (const auto& m : missing) {
            msg += " " + m;
        }
        throw InputError(msg);
    }

    std::vector<std::pair<std::string, std::size_t>> present;
    for (const auto& name : AttributeRecord::names()) {
        const long col = table.column(name);
        if (col >= 0) {
            present.emplace_back(name, static_cast<std::size_t>(col));
        }
    }

    std::vector<AttributeRecord> records;
    records.reserve(table.rows.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        AttributeRecord rec;
        for (const auto& [name, col] : present) {
            try {
                rec.set(name, table.rows[r][col]);
            } catch (const InputError& e) {
                throw InputError(label + ":" + std::to_string(table.lines[r]) + ": " + e.what());
            }
        }
        records.push_back(std::move(rec));
    }
    return records;
}

inline std::vector<AttributeRecord> load_attributes(const std::filesystem::path& csv_path) {
    return parse_attributes(csv::read(csv_path), csv_path.string());
}

inline csv::Table attributes_table(std::span<const AttributeRecord> records) {
    csv::Table table;
    table.header = AttributeRecord::names();
    for (const auto& rec : records) {
        std::vector<std::string> row;
        for (const auto& name : table.header) {
            row.push_back(rec.get(name).value_or(""));
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

inline void write_attributes(const std::filesystem::path& path, std::span<const AttributeRecord> records) {
    csv::write(path, attributes_table(records));
}

struct PointerIssue {
    std::size_t record;
    std::string message;
};

/**
 * Check that every record's (matrix_file_path, matrix_row_idx) pointer
 * resolves to a stored row. Returns one issue per dangling pointer.
 */
inline std::vector<PointerIssue> validate_pointers(std::span<const AttributeRecord> records, const ShardReader& reader) {
    std::vector<PointerIssue> issues;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (!reader.resolve(records[i].matrix_file_path, records[i].matrix_row_idx)) {
            issues.push_back({i, "record " + std::to_string(i) + ": pointer (" + records[i].matrix_file_path + ", " +
                                     std::to_string(records[i].matrix_row_idx) + ") does not resolve"});
        }
    }
    return issues;
}

/** Global row index for each record; throws on the first dangling pointer. */
inline std::vector<std::size_t> resolve_pointers(std::span<const AttributeRecord> records, const ShardReader& reader) {
    std::vector<std::size_t> out;
    out.reserve(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        auto g = reader.resolve(records[i].matrix_file_path, records[i].matrix_row_idx);
        if (!g) {
            throw InputError("record " + std::to_string(i) + ": pointer (" + records[i].matrix_file_path + ", " +
                             std::to_string(records[i].matrix_row_idx) + ") does not resolve");
        }
        out.push_back(*g);
    }
    return out;
}

} // namespace celltosg

#endif
