#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ntku/error.hpp"
#include "ntku/models.hpp"
#include "ntku/params.hpp"

namespace ntku {

inline nlohmann::json spec_to_json(const ModelSpec& s) {
    nlohmann::json j;
    j["architecture"] = std::string(to_string(s.architecture));
    j["layer_sizes"] = s.layer_sizes;
    j["input_dim"] = s.input_dim;
    j["num_classes"] = s.num_classes;
    j["head_bias"] = s.head_bias;
    j["norm_eps"] = s.norm_eps;
    if (s.architecture == Architecture::AttnPrompt) {
        j["prompt_length"] = s.prompt_length;
        j["embed_dim"] = s.embed_dim;
        j["seq_len"] = s.seq_len;
        j["mask_prompt_slots"] = s.mask_prompt_slots;
    }
    if (s.architecture == Architecture::CnnBn) {
        j["kernel_size"] = s.kernel_size;
        j["in_channels"] = s.in_channels;
        j["out_channels"] = s.out_channels;
        j["groups"] = s.groups;
    }
    return j;
}

inline ModelSpec spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    try {
        s.architecture = architecture_from_string(j.at("architecture").get<std::string>());
        s.layer_sizes = j.value("layer_sizes", std::vector<std::size_t>{});
        s.input_dim = j.at("input_dim").get<std::size_t>();
        s.num_classes = j.at("num_classes").get<std::size_t>();
        s.head_bias = j.value("head_bias", true);
        s.norm_eps = j.value("norm_eps", 1e-5);
        s.prompt_length = j.value("prompt_length", s.prompt_length);
        s.embed_dim = j.value("embed_dim", s.embed_dim);
        s.seq_len = j.value("seq_len", s.seq_len);
        s.mask_prompt_slots = j.value("mask_prompt_slots", false);
        s.kernel_size = j.value("kernel_size", s.kernel_size);
        s.in_channels = j.value("in_channels", s.in_channels);
        s.out_channels = j.value("out_channels", s.out_channels);
        s.groups = j.value("groups", s.groups);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::InvalidConfig, std::string("model spec: ") + e.what());
    }
    s.validate();
    return s;
}

namespace detail {

inline void put_f64le(std::string& out, double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>(bits & 0xFFu));
        bits >>= 8;
    }
}

inline double get_f64le(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) {
        bits = (bits << 8) | p[i];
    }
    return std::bit_cast<double>(bits);
}

inline void write_layout(std::ostringstream& os, const char* section, const ParamVector& pv) {
    os << section << ' ' << pv.layout().size() << ' ' << pv.size() << '\n';
    for (const auto& t : pv.layout()) {
        os << "tensor " << t.name << ' ' << to_string(t.role) << ' ' << t.offset << ' '
           << t.shape.size();
        for (auto s : t.shape) {
            os << ' ' << s;
        }
        os << '\n';
    }
}

inline std::string next_line(std::istream& in) {
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::BadFormat,
            "checkpoint header ended early");
    return line;
}

inline std::vector<TensorInfo> read_layout(std::istream& in, const char* section,
                                           std::size_t& total) {
    std::istringstream head(next_line(in));
    std::string tag;
    std::size_t count = 0;
    head >> tag >> count >> total;
    require(tag == section && static_cast<bool>(head), ErrorCode::BadFormat,
            std::string("expected '") + section + "' section");
    std::vector<TensorInfo> out;
    for (std::size_t i = 0; i < count; ++i) {
        std::istringstream ls(next_line(in));
        std::string kw, role;
        TensorInfo t;
        std::size_t rank = 0;
        ls >> kw >> t.name >> role >> t.offset >> rank;
        require(kw == "tensor" && static_cast<bool>(ls), ErrorCode::BadFormat, "bad tensor line");
        t.role = tensor_role_from_string(role);
        t.shape.resize(rank);
        for (auto& s : t.shape) {
            ls >> s;
        }
        require(static_cast<bool>(ls), ErrorCode::BadFormat, "bad tensor shape");
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace detail

/// Serializes a model. Layout (see docs/checkpoint_format.md):
///
///   NTKU-CHECKPOINT 1
///   spec <single-line JSON ModelSpec>
///   params <tensor count> <value count>
///   tensor <name> <role> <offset> <rank> <dims...>     (one per tensor)
///   buffers <tensor count> <value count>
///   tensor ...
///   payload <value count> f64le
///   <params then buffers as IEEE-754 binary64, little-endian>
[[nodiscard]] inline std::string serialize_model(const Model& m) {
    std::ostringstream os;
    os << "NTKU-CHECKPOINT 1\n";
    os << "spec " << spec_to_json(m.spec).dump() << '\n';
    detail::write_layout(os, "params", m.params);
    detail::write_layout(os, "buffers", m.buffers);
    os << "payload " << (m.params.size() + m.buffers.size()) << " f64le\n";
    std::string out = os.str();
    out.reserve(out.size() + 8 * (m.params.size() + m.buffers.size()));
    for (double v : m.params.values()) detail::put_f64le(out, v);
    for (double v : m.buffers.values()) detail::put_f64le(out, v);
    return out;
}

[[nodiscard]] inline Model deserialize_model(const std::string& bytes) {
    std::istringstream in(bytes);
    require(detail::next_line(in) == "NTKU-CHECKPOINT 1", ErrorCode::BadMagic,
            "not a checkpoint (missing NTKU-CHECKPOINT 1)");
    const std::string spec_line = detail::next_line(in);
    require(spec_line.starts_with("spec "), ErrorCode::BadFormat, "missing spec line");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(spec_line.substr(5));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::BadFormat, std::string("spec JSON: ") + e.what());
    }
    Model m = build_model(spec_from_json(j));
    std::size_t n_params = 0, n_buffers = 0;
    const auto params = detail::read_layout(in, "params", n_params);
    const auto buffers = detail::read_layout(in, "buffers", n_buffers);
    require(params == m.params.layout() && buffers == m.buffers.layout(), ErrorCode::BadFormat,
            "checkpoint layout does not match its spec");
    require(n_params == m.params.size() && n_buffers == m.buffers.size(), ErrorCode::BadFormat,
            "checkpoint value counts do not match layout");
    std::istringstream pl(detail::next_line(in));
    std::string kw, enc;
    std::size_t count = 0;
    pl >> kw >> count >> enc;
    require(kw == "payload" && enc == "f64le" && count == n_params + n_buffers,
            ErrorCode::BadFormat, "bad payload line");
    const auto start = static_cast<std::size_t>(in.tellg());
    require(bytes.size() - start == 8 * count, ErrorCode::TruncatedFile,
            "payload holds " + std::to_string(bytes.size() - start) + " bytes, expected " +
                std::to_string(8 * count));
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + start);
    auto pv = m.params.values();
    for (std::size_t i = 0; i < pv.size(); ++i, p += 8) pv[i] = detail::get_f64le(p);
    auto bv = m.buffers.values();
    for (std::size_t i = 0; i < bv.size(); ++i, p += 8) bv[i] = detail::get_f64le(p);
    return m;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorCode::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorCode::Io, "cannot write " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(f), ErrorCode::Io, "short write to " + path.string());
}

inline void save_model(const Model& m, const std::filesystem::path& path) {
    write_file(path, serialize_model(m));
}

[[nodiscard]] inline Model load_model(const std::filesystem::path& path) {
    return deserialize_model(read_file(path));
}

}  // namespace ntku
