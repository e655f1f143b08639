#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "dare/error.hpp"
#include "dare/geom.hpp"

namespace dare {

inline constexpr std::string_view kVersion = "1.0.0";

enum class CloudFormat { ply_ascii, ply_binary, xyz };

namespace io_detail {

static_assert(std::endian::native == std::endian::little, "binary PLY I/O assumes a little-endian host");

enum class PlyType { i8, u8, i16, u16, i32, u32, f32, f64 };

inline PlyType parse_ply_type(const std::string& s, std::size_t line) {
    if (s == "char" || s == "int8") return PlyType::i8;
    if (s == "uchar" || s == "uint8") return PlyType::u8;
    if (s == "short" || s == "int16") return PlyType::i16;
    if (s == "ushort" || s == "uint16") return PlyType::u16;
    if (s == "int" || s == "int32") return PlyType::i32;
    if (s == "uint" || s == "uint32") return PlyType::u32;
    if (s == "float" || s == "float32") return PlyType::f32;
    if (s == "double" || s == "float64") return PlyType::f64;
    throw ParseError("PLY header line " + std::to_string(line) + ": unknown property type '" + s + "'");
}

inline std::size_t type_size(PlyType t) {
    switch (t) {
        case PlyType::i8: case PlyType::u8: return 1;
        case PlyType::i16: case PlyType::u16: return 2;
        case PlyType::i32: case PlyType::u32: case PlyType::f32: return 4;
        case PlyType::f64: return 8;
    }
    return 0;
}

template <typename T>
T load(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

inline double read_binary(PlyType t, const char* p) {
    switch (t) {
        case PlyType::i8: return load<std::int8_t>(p);
        case PlyType::u8: return load<std::uint8_t>(p);
        case PlyType::i16: return load<std::int16_t>(p);
        case PlyType::u16: return load<std::uint16_t>(p);
        case PlyType::i32: return load<std::int32_t>(p);
        case PlyType::u32: return load<std::uint32_t>(p);
        case PlyType::f32: return load<float>(p);
        case PlyType::f64: return load<double>(p);
    }
    return 0.0;
}

struct PlyProperty {
    std::string name;
    PlyType type = PlyType::f32;
    bool is_list = false;
    PlyType count_type = PlyType::u8;
};

struct PlyElement {
    std::string name;
    std::size_t count = 0;
    std::vector<PlyProperty> props;
};

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline int find_prop(const PlyElement& e, std::string_view name) {
    for (std::size_t i = 0; i < e.props.size(); ++i)
        if (e.props[i].name == name) return static_cast<int>(i);
    return -1;
}

inline void require_finite(double v, const std::string& where) {
    if (!std::isfinite(v)) throw ParseError(where + ": non-finite value");
}

inline PointCloud assemble(const std::vector<double>& values, std::size_t n, std::size_t stride, int ix, int iy,
                           int iz, int inx, int iny, int inz, int iw) {
    PointCloud c;
    c.points.resize(n);
    const bool normals = inx >= 0 && iny >= 0 && inz >= 0;
    if (normals) c.normals.emplace(n);
    if (iw >= 0) c.weights.emplace(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double* row = values.data() + j * stride;
        c.points[j] = {row[ix], row[iy], row[iz]};
        if (normals) {
            Vec3 v(row[inx], row[iny], row[inz]);
            const double len = v.norm();
            (*c.normals)[j] = len > 0.0 ? Vec3(v / len) : Vec3::UnitZ();
        }
        if (iw >= 0) (*c.weights)[j] = row[iw];
    }
    return c;
}

inline PointCloud parse_ply(const std::string& data, const std::string& name) {
    std::size_t pos = 0, line_no = 0;
    auto next_line = [&]() -> std::string {
        if (pos >= data.size()) throw ParseError(name + ": unexpected end of PLY header");
        std::size_t end = data.find('\n', pos);
        if (end == std::string::npos) end = data.size();
        std::string line = data.substr(pos, end - pos);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        pos = end + 1;
        ++line_no;
        return line;
    };

    if (next_line() != "ply") throw ParseError(name + ": line 1: missing 'ply' magic");
    std::string format;
    std::vector<PlyElement> elements;
    for (;;) {
        const std::string line = next_line();
        std::istringstream ls(line);
        std::string kw;
        ls >> kw;
        const std::string where = name + ": header line " + std::to_string(line_no);
        if (kw.empty() || kw == "comment" || kw == "obj_info") continue;
        if (kw == "end_header") break;
        if (kw == "format") {
            std::string ver;
            ls >> format >> ver;
            if (format != "ascii" && format != "binary_little_endian")
                throw ParseError(where + ": unsupported format '" + format + "'");
        } else if (kw == "element") {
            PlyElement e;
            long long count = -1;
            ls >> e.name >> count;
            if (!ls || count < 0) throw ParseError(where + ": malformed element line");
            e.count = static_cast<std::size_t>(count);
            elements.push_back(std::move(e));
        } else if (kw == "property") {
            if (elements.empty()) throw ParseError(where + ": property before element");
            PlyProperty p;
            std::string t;
            ls >> t;
            if (t == "list") {
                std::string ct, vt;
                ls >> ct >> vt >> p.name;
                p.is_list = true;
                p.count_type = parse_ply_type(ct, line_no);
                p.type = parse_ply_type(vt, line_no);
            } else {
                p.type = parse_ply_type(t, line_no);
                ls >> p.name;
            }
            if (p.name.empty()) throw ParseError(where + ": malformed property line");
            elements.back().props.push_back(std::move(p));
        } else {
            throw ParseError(where + ": unexpected keyword '" + kw + "'");
        }
    }
    if (format.empty()) throw ParseError(name + ": PLY header has no format line");

    const PlyElement* vertex = nullptr;
    for (const auto& e : elements)
        if (e.name == "vertex") vertex = &e;
    if (!vertex) throw ParseError(name + ": PLY has no vertex element");
    const int ix = find_prop(*vertex, "x"), iy = find_prop(*vertex, "y"), iz = find_prop(*vertex, "z");
    if (ix < 0 || iy < 0 || iz < 0) throw ParseError(name + ": vertex element lacks x/y/z");
    for (const auto& p : vertex->props)
        if (p.is_list) throw ParseError(name + ": list properties on vertices are not supported");
    const int inx = find_prop(*vertex, "nx"), iny = find_prop(*vertex, "ny"), inz = find_prop(*vertex, "nz");
    const int iw = find_prop(*vertex, "weight");
    const std::size_t stride = vertex->props.size();
    std::vector<double> values;
    values.reserve(vertex->count * stride);

    if (format == "ascii") {
        for (const auto& e : elements) {
            for (std::size_t r = 0; r < e.count; ++r) {
                const std::size_t this_line = line_no + 1;
                const std::string line = [&] {
                    try {
                        return next_line();
                    } catch (const ParseError&) {
                        throw ParseError(name + ": short payload at line " + std::to_string(this_line));
                    }
                }();
                if (&e != vertex) continue;
                std::istringstream ls(line);
                for (std::size_t q = 0; q < stride; ++q) {
                    std::string tok;
                    if (!(ls >> tok)) throw ParseError(name + ": line " + std::to_string(this_line) + ": too few values");
                    double v = 0.0;
                    try {
                        std::size_t used = 0;
                        v = std::stod(tok, &used);
                        if (used != tok.size()) throw std::invalid_argument(tok);
                    } catch (const std::exception&) {
                        throw ParseError(name + ": line " + std::to_string(this_line) + ": bad number '" + tok + "'");
                    }
                    require_finite(v, name + ": line " + std::to_string(this_line));
                    values.push_back(v);
                }
            }
        }
    } else {
        for (const auto& e : elements) {
            for (std::size_t r = 0; r < e.count; ++r) {
                for (const auto& p : e.props) {
                    const std::size_t offset = pos;
                    auto need = [&](std::size_t bytes) {
                        if (pos + bytes > data.size())
                            throw ParseError(name + ": short payload at byte " + std::to_string(offset));
                    };
                    if (p.is_list) {
                        need(type_size(p.count_type));
                        const auto cnt = static_cast<std::size_t>(read_binary(p.count_type, data.data() + pos));
                        pos += type_size(p.count_type);
                        need(cnt * type_size(p.type));
                        pos += cnt * type_size(p.type);
                        continue;
                    }
                    need(type_size(p.type));
                    const double v = read_binary(p.type, data.data() + pos);
                    pos += type_size(p.type);
                    if (&e == vertex) {
                        require_finite(v, name + ": byte " + std::to_string(offset));
                        values.push_back(v);
                    }
                }
            }
        }
    }
    PointCloud c = assemble(values, vertex->count, stride, ix, iy, iz, inx, iny, inz, iw);
    if (c.weights)
        for (double w : *c.weights)
            if (!(w > 0.0)) throw ParseError(name + ": non-positive weight");
    return c;
}

inline PointCloud parse_xyz(const std::string& data, const std::string& name) {
    std::istringstream in(data);
    std::string line;
    std::size_t line_no = 0;
    std::vector<double> values;
    std::size_t cols = 0, rows = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        std::string tok;
        std::size_t n = 0;
        while (ls >> tok) {
            double v = 0.0;
            try {
                std::size_t used = 0;
                v = std::stod(tok, &used);
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw ParseError(name + ": line " + std::to_string(line_no) + ": bad number '" + tok + "'");
            }
            require_finite(v, name + ": line " + std::to_string(line_no));
            values.push_back(v);
            ++n;
        }
        if (n != 3 && n != 6) throw ParseError(name + ": line " + std::to_string(line_no) + ": expected 3 or 6 columns");
        if (cols == 0) cols = n;
        if (n != cols) throw ParseError(name + ": line " + std::to_string(line_no) + ": inconsistent column count");
        ++rows;
    }
    if (cols == 6) return assemble(values, rows, 6, 0, 1, 2, 3, 4, 5, -1);
    return assemble(values, rows, 3, 0, 1, 2, -1, -1, -1, -1);
}

inline std::string lower_extension(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    return ext;
}

}  // namespace io_detail

/// Reads PLY (ASCII or binary little-endian) or whitespace-separated XYZ
/// (3 or 6 columns), chosen by extension. Points keep file order.
inline PointCloud read_point_cloud(const std::filesystem::path& path) {
    const std::string data = io_detail::read_file(path);
    const std::string ext = io_detail::lower_extension(path);
    if (ext == ".ply" || data.rfind("ply", 0) == 0) return io_detail::parse_ply(data, path.string());
    return io_detail::parse_xyz(data, path.string());
}

inline CloudFormat format_for_path(const std::filesystem::path& path) {
    return io_detail::lower_extension(path) == ".ply" ? CloudFormat::ply_binary : CloudFormat::xyz;
}

/// ASCII output carries 9 significant digits; binary PLY stores doubles bit-exactly.
inline void write_point_cloud(const PointCloud& cloud, const std::filesystem::path& path, CloudFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot write '" + path.string() + "'");
    const bool normals = cloud.normals.has_value();
    const bool weights = cloud.weights.has_value();
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.9g", v);
        return std::string(buf);
    };

    if (format == CloudFormat::xyz) {
        for (std::size_t j = 0; j < cloud.size(); ++j) {
            const auto& p = cloud.points[j];
            out << num(p.x()) << ' ' << num(p.y()) << ' ' << num(p.z());
            if (normals) {
                const auto& n = (*cloud.normals)[j];
                out << ' ' << num(n.x()) << ' ' << num(n.y()) << ' ' << num(n.z());
            }
            out << '\n';
        }
    } else {
        const bool ascii = format == CloudFormat::ply_ascii;
        const char* type = ascii ? "float" : "double";
        out << "ply\n"
            << "format " << (ascii ? "ascii" : "binary_little_endian") << " 1.0\n"
            << "comment generator: dare-reg " << kVersion << "\n"
            << "element vertex " << cloud.size() << "\n";
        for (const char* n : {"x", "y", "z"}) out << "property " << type << ' ' << n << "\n";
        if (normals)
            for (const char* n : {"nx", "ny", "nz"}) out << "property " << type << ' ' << n << "\n";
        if (weights) out << "property " << type << " weight\n";
        out << "end_header\n";
        for (std::size_t j = 0; j < cloud.size(); ++j) {
            double row[7];
            std::size_t k = 0;
            for (int a = 0; a < 3; ++a) row[k++] = cloud.points[j][a];
            if (normals)
                for (int a = 0; a < 3; ++a) row[k++] = (*cloud.normals)[j][a];
            if (weights) row[k++] = (*cloud.weights)[j];
            if (ascii) {
                for (std::size_t q = 0; q < k; ++q) out << (q ? " " : "") << num(row[q]);
                out << '\n';
            } else {
                out.write(reinterpret_cast<const char*>(row), static_cast<std::streamsize>(k * sizeof(double)));
            }
        }
    }
    if (!out) throw ParseError("failed writing '" + path.string() + "'");
}

inline void write_point_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
    write_point_cloud(cloud, path, format_for_path(path));
}

/// Per-set rigid transforms plus provenance metadata.
struct TransformFile {
    std::vector<RigidTransform> transforms;
    std::vector<double> objective_trace;
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json extra = nlohmann::json::object();
};

inline std::string format_real(double v) {
    if (!std::isfinite(v)) return "null";
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Serialises with every real at 17 significant digits. Output is a pure
/// function of the contents.
inline std::string to_json_text(const TransformFile& tf) {
    std::string s = "{\n  \"generator\": \"dare-reg ";
    s += kVersion;
    s += "\",\n  \"sets\": [";
    for (std::size_t i = 0; i < tf.transforms.size(); ++i) {
        const auto& t = tf.transforms[i];
        s += i ? ",\n    " : "\n    ";
        s += "{\"set_id\": " + std::to_string(i) + ", \"rotation\": [";
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) s += (r || c ? ", " : "") + format_real(t.rotation()(r, c));
        s += "], \"translation\": [";
        for (int a = 0; a < 3; ++a) s += (a ? ", " : "") + format_real(t.translation()[a]);
        s += "]}";
    }
    s += tf.transforms.empty() ? "],\n" : "\n  ],\n";
    s += "  \"objective_trace\": [";
    for (std::size_t i = 0; i < tf.objective_trace.size(); ++i) s += (i ? ", " : "") + format_real(tf.objective_trace[i]);
    s += "],\n  \"config\": " + tf.config.dump();
    for (const auto& [key, value] : tf.extra.items()) s += ",\n  \"" + key + "\": " + value.dump();
    s += "\n}\n";
    return s;
}

inline void write_transform_file(const TransformFile& tf, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ParseError("cannot write '" + path.string() + "'");
    out << to_json_text(tf);
    if (!out) throw ParseError("failed writing '" + path.string() + "'");
}

/// Parses a transform file. Rotations must be orthonormal within 1e-6; those
/// off by more than 1e-9 are re-projected onto SO(3).
inline TransformFile parse_transform_file(const std::string& text, const std::string& name = "<json>") {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(name + ": " + e.what());
    }
    TransformFile tf;
    try {
        const auto& sets = j.at("sets");
        std::vector<std::pair<std::size_t, RigidTransform>> items;
        for (const auto& s : sets) {
            const auto rot = s.at("rotation").get<std::vector<double>>();
            const auto tr = s.at("translation").get<std::vector<double>>();
            if (rot.size() != 9 || tr.size() != 3) throw ParseError(name + ": rotation needs 9 and translation 3 values");
            Mat3 r;
            for (int a = 0; a < 9; ++a) r(a / 3, a % 3) = rot[static_cast<std::size_t>(a)];
            if (!is_rotation(r, 1e-6)) throw ParseError(name + ": rotation of set " + s.at("set_id").dump() + " is not orthonormal");
            items.emplace_back(s.at("set_id").get<std::size_t>(),
                               RigidTransform(is_rotation(r) ? r : nearest_rotation(r), Vec3(tr[0], tr[1], tr[2])));
        }
        std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        for (auto& [id, t] : items) tf.transforms.push_back(t);
        if (j.contains("objective_trace")) {
            for (const auto& v : j["objective_trace"])
                tf.objective_trace.push_back(v.is_null() ? std::nan("") : v.get<double>());
        }
        if (j.contains("config")) tf.config = j["config"];
        for (const auto& [key, value] : j.items())
            if (key != "sets" && key != "objective_trace" && key != "config" && key != "generator") tf.extra[key] = value;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(name + ": " + e.what());
    }
    return tf;
}

inline TransformFile read_transform_file(const std::filesystem::path& path) {
    return parse_transform_file(io_detail::read_file(path), path.string());
}

}  // namespace dare
