#ifndef CELLTOSG_NPY_HPP
#define CELLTOSG_NPY_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <regex>
#include <string>
#include <vector>

#include "common.hpp"

/**
 * @file npy.hpp
 * @brief Minimal NPY v1.0 reader/writer for 2-D little-endian float matrices.
 *
 * Writing always produces `'<f4'`, C-order. Reading accepts `'<f4'` and `'<f8'`
 * so that externally produced embedding matrices can be loaded too.
 */

namespace celltosg::npy {

static_assert(std::endian::native == std::endian::little, "NPY payloads are written as host little-endian");

inline constexpr char magic[] = "\x93NUMPY";
inline constexpr std::size_t magic_size = 6;
inline constexpr std::size_t preamble_size = magic_size + 2 + 2;
inline constexpr std::size_t alignment = 64;

struct Header {
    std::string descr;
    bool fortran_order = false;
    std::vector<std::size_t> shape;

    /** Byte offset of the first payload element. */
    std::size_t data_offset = 0;

    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    std::size_t item_size() const { return descr == "<f8" ? 8 : 4; }
};

/**
 * Full preamble (magic, version, header length, padded dict) for a C-order
 * float32 matrix. The dict is padded with spaces so the payload starts on a
 * 64-byte boundary, and the padding ends in a newline.
 */
inline std::string make_header(std::size_t rows, std::size_t cols) {
    std::string dict = "{'descr': '<f4', 'fortran_order': False, 'shape': (" + std::to_string(rows) + ", " +
                       std::to_string(cols) + "), }";
    const std::size_t unpadded = preamble_size + dict.size() + 1;
    const std::size_t padding = (alignment - unpadded % alignment) % alignment;
    dict.append(padding, ' ');
    dict.push_back('\n');

    std::string out(magic, magic_size);
    out.push_back('\x01');
    out.push_back('\x00');
    const auto len = static_cast<std::uint16_t>(dict.size());
    out.push_back(static_cast<char>(len & 0xff));
    out.push_back(static_cast<char>(len >> 8));
    out += dict;
    return out;
}

/**
 * Parse and validate a v1.0 header from the start of `in`.
 * Throws `InputError` on any deviation from the format rules.
 */
inline Header parse_header(std::istream& in, const std::string& label = "npy") {
    char pre[preamble_size];
    if (!in.read(pre, preamble_size)) {
        throw InputError(label + ": truncated NPY preamble");
    }
    if (std::memcmp(pre, magic, magic_size) != 0) {
        throw InputError(label + ": bad NPY magic");
    }
    if (pre[6] != 1 || pre[7] != 0) {
        throw InputError(label + ": unsupported NPY version " + std::to_string(int(pre[6])) + "." +
                         std::to_string(int(pre[7])));
    }
    const std::size_t len = static_cast<unsigned char>(pre[8]) | (static_cast<std::size_t>(static_cast<unsigned char>(pre[9])) << 8);
    std::string dict(len, '\0');
    if (!in.read(dict.data(), static_cast<std::streamsize>(len))) {
        throw InputError(label + ": truncated NPY header");
    }
    if ((preamble_size + len) % alignment != 0) {
        throw InputError(label + ": NPY header not aligned to 64 bytes");
    }
    if (dict.empty() || dict.back() != '\n') {
        throw InputError(label + ": NPY header not newline-terminated");
    }

    Header h;
    h.data_offset = preamble_size + len;

    static const std::regex descr_re(R"('descr'\s*:\s*'([^']*)')");
    static const std::regex fortran_re(R"('fortran_order'\s*:\s*(True|False))");
    static const std::regex shape_re(R"('shape'\s*:\s*\(([^)]*)\))");
    std::smatch m;
    if (!std::regex_search(dict, m, descr_re)) {
        throw InputError(label + ": NPY header lacks descr");
    }
    h.descr = m[1];
    if (!std::regex_search(dict, m, fortran_re)) {
        throw InputError(label + ": NPY header lacks fortran_order");
    }
    h.fortran_order = (m[1] == "True");
    if (!std::regex_search(dict, m, shape_re)) {
        throw InputError(label + ": NPY header lacks shape");
    }
    const std::string dims = m[1];
    static const std::regex int_re(R"(\d+)");
    for (auto it = std::sregex_iterator(dims.begin(), dims.end(), int_re); it != std::sregex_iterator(); ++it) {
        h.shape.push_back(std::stoull(it->str()));
    }
    if (h.shape.empty() || h.shape.size() > 2) {
        throw InputError(label + ": only 1-D and 2-D NPY arrays are supported");
    }
    if (h.descr != "<f4" && h.descr != "<f8") {
        throw InputError(label + ": unsupported NPY dtype " + h.descr);
    }
    return h;
}

inline Header read_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return parse_header(in, path.string());
}

/** Write `data` (rows x cols, row-major) as a float32 NPY file. */
inline void write(const std::filesystem::path& path, std::span<const float> data, std::size_t rows, std::size_t cols) {
    if (data.size() != rows * cols) {
        throw InputError("npy::write: payload size does not match shape");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    const std::string header = make_header(rows, cols);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(float)));
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

inline void write(const std::filesystem::path& path, const RowMatrixF& matrix) {
    write(path, std::span<const float>(matrix.data(), static_cast<std::size_t>(matrix.size())),
          static_cast<std::size_t>(matrix.rows()), static_cast<std::size_t>(matrix.cols()));
}

/** Read a whole NPY file into a float32 row-major matrix (1-D arrays become a single column). */
inline RowMatrixF read_f32(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    const Header h = parse_header(in, path.string());
    if (h.fortran_order) {
        throw InputError(path.string() + ": Fortran-ordered arrays are not supported");
    }
    RowMatrixF out(static_cast<Eigen::Index>(h.rows()), static_cast<Eigen::Index>(h.cols()));
    const std::size_t count = h.rows() * h.cols();
    if (h.descr == "<f4") {
        in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(count * 4));
    } else {
        std::vector<double> buffer(count);
        in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(count * 8));
        for (std::size_t i = 0; i < count; ++i) {
            out.data()[i] = static_cast<float>(buffer[i]);
        }
    }
    if (!in) {
        throw InputError(path.string() + ": truncated NPY payload");
    }
    return out;
}

/** Read an NPY file into a double matrix. */
inline Matrix read_matrix(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    const Header h = parse_header(in, path.string());
    if (h.fortran_order) {
        throw InputError(path.string() + ": Fortran-ordered arrays are not supported");
    }
    Matrix out(static_cast<Eigen::Index>(h.rows()), static_cast<Eigen::Index>(h.cols()));
    const std::size_t count = h.rows() * h.cols();
    if (h.descr == "<f8") {
        std::vector<double> buffer(count);
        in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(count * 8));
        for (std::size_t r = 0; r < h.rows(); ++r) {
            for (std::size_t c = 0; c < h.cols(); ++c) {
                out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = buffer[r * h.cols() + c];
            }
        }
    } else {
        std::vector<float> buffer(count);
        in.read(reinterpret_cast<char*>(buffer.data()), static_cast<std::streamsize>(count * 4));
        for (std::size_t r = 0; r < h.rows(); ++r) {
            for (std::size_t c = 0; c < h.cols(); ++c) {
                out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = buffer[r * h.cols() + c];
            }
        }
    }
    if (!in) {
        throw InputError(path.string() + ": truncated NPY payload");
    }
    return out;
}

inline void write_matrix(const std::filesystem::path& path, const Matrix& matrix) {
    RowMatrixF tmp = matrix.cast<float>();
    write(path, tmp);
}

} // namespace celltosg::npy

#endif
