#ifndef CELLTOSG_CSV_HPP
#define CELLTOSG_CSV_HPP

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"

/**
 * @file csv.hpp
 * @brief RFC-4180 CSV reading and writing (UTF-8 only).
 */

namespace celltosg::csv {

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /** 1-based source line where each row starts, for error messages. */
    std::vector<std::size_t> lines;

    /** Column position by name, or -1 if absent. */
    long column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) {
                return static_cast<long>(i);
            }
        }
        return -1;
    }
};

namespace detail {

inline bool valid_utf8(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
        const auto c = static_cast<unsigned char>(s[i]);
        std::size_t extra;
        if (c < 0x80) {
            extra = 0;
        } else if ((c >> 5) == 0x6) {
            extra = 1;
        } else if ((c >> 4) == 0xe) {
            extra = 2;
        } else if ((c >> 3) == 0x1e) {
            extra = 3;
        } else {
            return false;
        }
        if (i + extra >= s.size() && extra > 0) {
            return false;
        }
        for (std::size_t k = 1; k <= extra; ++k) {
            if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) {
                return false;
            }
        }
        i += extra + 1;
    }
    return true;
}

} // namespace detail

/**
 * Parse CSV text. Quoted fields may contain commas, doubled quotes and line
 * breaks. Both LF and CRLF record terminators are accepted. The first record
 * is the header.
 */
inline Table parse(std::string_view text, const std::string& label = "csv") {
    if (text.size() >= 3 && text.substr(0, 3) == "\xEF\xBB\xBF") {
        text.remove_prefix(3);
    }
    if (!detail::valid_utf8(text)) {
        throw InputError(label + ": input is not valid UTF-8");
    }

    std::vector<std::vector<std::string>> records;
    std::vector<std::size_t> lines;
    std::vector<std::string> record;
    std::string field;
    bool in_quotes = false;
    bool field_was_quoted = false;
    std::size_t line = 1;
    std::size_t record_line = 1;

    auto end_field = [&]() {
        record.push_back(std::move(field));
        field.clear();
        field_was_quoted = false;
    };
    auto end_record = [&]() {
        end_field();
        // skip blank lines
        if (!(record.size() == 1 && record[0].empty())) {
            records.push_back(std::move(record));
            lines.push_back(record_line);
        }
        record.clear();
    };

    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                if (c == '\n') {
                    ++line;
                }
                field.push_back(c);
            }
            continue;
        }
        switch (c) {
        case '"':
            if (!field.empty() || field_was_quoted) {
                throw InputError(label + ":" + std::to_string(line) + ": stray quote inside unquoted field");
            }
            in_quotes = true;
            field_was_quoted = true;
            break;
        case ',':
            end_field();
            break;
        case '\r':
            if (i + 1 < text.size() && text[i + 1] == '\n') {
                break;
            }
            [[fallthrough]];
        case '\n':
            end_record();
            ++line;
            record_line = line;
            break;
        default:
            if (field_was_quoted) {
                throw InputError(label + ":" + std::to_string(line) + ": characters after closing quote");
            }
            field.push_back(c);
        }
    }
    if (in_quotes) {
        throw InputError(label + ": unterminated quoted field");
    }
    if (!field.empty() || !record.empty() || field_was_quoted) {
        end_record();
    }

    Table table;
    if (records.empty()) {
        return table;
    }
    table.header = std::move(records.front());
    const std::size_t width = table.header.size();
    for (std::size_t r = 1; r < records.size(); ++r) {
        if (records[r].size() != width) {
            throw InputError(label + ":" + std::to_string(lines[r]) + ": expected " + std::to_string(width) +
                             " fields, found " + std::to_string(records[r].size()));
        }
        table.rows.push_back(std::move(records[r]));
        table.lines.push_back(lines[r]);
    }
    return table;
}

inline Table read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse(buffer.str(), path.string());
}

inline std::string quote(const std::string& value) {
    if (value.find_first_of(",\"\r\n") == std::string::npos) {
        return value;
    }
    std::string out = "\"";
    for (char c : value) {
        if (c == '"') {
            out.push_back('"');
        }
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

inline void write_record(std::ostream& out, const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) {
            out << ',';
        }
        out << quote(fields[i]);
    }
    out << '\n';
}

inline void write(const std::filesystem::path& path, const Table& table) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    write_record(out, table.header);
    for (const auto& row : table.rows) {
        write_record(out, row);
    }
}

} // namespace celltosg::csv

#endif
