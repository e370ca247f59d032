#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "capiqa/model.hpp"

namespace capiqa {

// File layout: "CAPQ1" | u64 LE header length | header JSON | LE f32 blob.
// Tensors are the model parameters in registration order followed by the
// frozen text rows ("buffer.text_rows"). Optimizer state is not stored.
inline constexpr std::string_view kCheckpointMagic = "CAPQ1";
inline constexpr const char* kTextRowsName = "buffer.text_rows";

struct CheckpointTensor {
    std::string name;
    Shape shape;
    std::size_t offset = 0;  // bytes into the blob
};

struct Checkpoint {
    ModelConfig config;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<CheckpointTensor> tensors;
    std::vector<float> blob;

    const CheckpointTensor* find(const std::string& name) const {
        for (const auto& t : tensors) {
            if (t.name == name) return &t;
        }
        return nullptr;
    }

    std::span<const float> values(const CheckpointTensor& t) const { return {blob.data() + t.offset / 4, numel(t.shape)}; }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

inline void put_f32(std::string& out, float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline float get_f32(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return std::bit_cast<float>(bits);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    nlohmann::json table = nlohmann::json::array();
    for (const auto& t : ck.tensors) {
        table.push_back({{"name", t.name}, {"shape", t.shape}, {"dtype", "f32"}, {"offset", t.offset}});
    }
    const nlohmann::json header = {
        {"config", ck.config}, {"meta", ck.meta}, {"tensors", table}, {"blob_bytes", ck.blob.size() * 4}};
    const std::string h = header.dump();
    std::string out(kCheckpointMagic);
    detail::put_u64(out, h.size());
    out += h;
    out.reserve(out.size() + ck.blob.size() * 4);
    for (const float f : ck.blob) detail::put_f32(out, f);
    return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
    const std::size_t prefix = kCheckpointMagic.size() + 8;
    if (bytes.size() < prefix || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
        throw ParseError("checkpoint: bad magic");
    }
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint64_t hlen = detail::get_u64(raw + kCheckpointMagic.size());
    if (hlen > bytes.size() - prefix) throw ParseError("checkpoint: header length exceeds file size");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(prefix, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: malformed header: ") + e.what());
    }

    Checkpoint ck;
    std::size_t blob_bytes = 0;
    try {
        ck.config = header.at("config").get<ModelConfig>();
        ck.meta = header.value("meta", nlohmann::json::object());
        blob_bytes = header.at("blob_bytes").get<std::size_t>();
        std::size_t expected_offset = 0;
        for (const auto& row : header.at("tensors")) {
            CheckpointTensor t;
            t.name = row.at("name").get<std::string>();
            t.shape = row.at("shape").get<Shape>();
            t.offset = row.at("offset").get<std::size_t>();
            if (row.at("dtype").get<std::string>() != "f32") throw ParseError("checkpoint: tensor '" + t.name + "' is not f32");
            if (t.shape.empty() || numel(t.shape) == 0) throw ParseError("checkpoint: tensor '" + t.name + "' has an empty shape");
            if (t.offset != expected_offset) throw ParseError("checkpoint: tensor '" + t.name + "' has a bad offset");
            expected_offset += numel(t.shape) * 4;
            ck.tensors.push_back(std::move(t));
        }
        if (expected_offset != blob_bytes) throw ParseError("checkpoint: shape table does not match blob size");
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("checkpoint: invalid header: ") + e.what());
    }

    const std::size_t blob_start = prefix + hlen;
    if (bytes.size() - blob_start != blob_bytes) {
        throw ParseError("checkpoint: blob is " + std::to_string(bytes.size() - blob_start) + " bytes, expected " +
                         std::to_string(blob_bytes) + " (truncated or padded)");
    }
    ck.blob.resize(blob_bytes / 4);
    for (std::size_t i = 0; i < ck.blob.size(); ++i) ck.blob[i] = detail::get_f32(raw + blob_start + 4 * i);
    return ck;
}

template <class T>
Checkpoint make_checkpoint(const CapIqaModel<T>& model, nlohmann::json meta = nlohmann::json::object()) {
    Checkpoint ck;
    ck.config = model.config();
    ck.meta = std::move(meta);
    auto append = [&](const std::string& name, const Tensor<T>& t) {
        ck.tensors.push_back({name, t.shape(), ck.blob.size() * 4});
        for (const T v : t.data()) ck.blob.push_back(static_cast<float>(v));
    };
    for (const auto& p : model.parameters().all()) append(p.name, p.tensor);
    append(kTextRowsName, model.text());
    return ck;
}

/// Copies checkpoint tensors into an existing model. The model's tensor table
/// must match the checkpoint exactly; the first difference is reported.
template <class T>
void load_into(CapIqaModel<T>& model, const Checkpoint& ck) {
    const auto& params = model.parameters().all();
    const std::size_t expected = params.size() + 1;
    for (std::size_t i = 0; i < std::max(expected, ck.tensors.size()); ++i) {
        const std::string want = i < params.size() ? params[i].name : (i == params.size() ? kTextRowsName : "<none>");
        if (i >= ck.tensors.size()) throw ConfigError("checkpoint lacks tensor '" + want + "'");
        const auto& t = ck.tensors[i];
        if (i >= expected) throw ConfigError("checkpoint has unexpected tensor '" + t.name + "'");
        if (t.name != want) throw ConfigError("checkpoint tensor '" + t.name + "' where model expects '" + want + "'");
        if (i < params.size() && t.shape != params[i].tensor.shape()) {
            throw ConfigError("checkpoint tensor '" + t.name + "' has shape " + to_string(t.shape) + ", model expects " +
                              to_string(params[i].tensor.shape()));
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto src = ck.values(ck.tensors[i]);
        auto dst = params[i].tensor;
        auto out = dst.mutable_data();
        for (std::size_t k = 0; k < src.size(); ++k) out[k] = static_cast<T>(src[k]);
    }
    const auto& rows = ck.tensors.back();
    const auto src = ck.values(rows);
    model.set_text_rows(Tensor<T>(rows.shape, std::vector<T>(src.begin(), src.end())));
}

template <class T>
CapIqaModel<T> model_from_checkpoint(const Checkpoint& ck) {
    CapIqaModel<T> model(ck.config, default_prior(ck.config.prompt_dim));
    load_into(model, ck);
    return model;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("failed reading '" + path + "'");
    return bytes;
}

inline void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path + "'");
}

template <class T>
void save(const CapIqaModel<T>& model, const std::string& path, const nlohmann::json& meta = nlohmann::json::object()) {
    write_file(path, serialize_checkpoint(make_checkpoint(model, meta)));
}

inline Checkpoint load_checkpoint(const std::string& path) { return parse_checkpoint(read_file(path)); }

template <class T>
CapIqaModel<T> load(const std::string& path) {
    return model_from_checkpoint<T>(load_checkpoint(path));
}

}  // namespace capiqa
