#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowse/common.hpp"
#include "flowse/config.hpp"
#include "flowse/model.hpp"
#include "flowse/training.hpp"

namespace flowse {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

// Serialized training state. Round-trips bit-exactly, optimizer moments and
// step counter included.
struct Checkpoint {
    PipelineConfig config;
    ModelParams<float> params;
    AdamState opt;
    int64_t step = 0;
};

inline Checkpoint make_checkpoint(const PipelineConfig& cfg, uint64_t init_seed) {
    Checkpoint ckpt;
    ckpt.config = cfg;
    ckpt.params = init_params<float>(cfg.model, init_seed);
    ckpt.opt = make_opt_state(cfg.model);
    ckpt.step = 0;
    return ckpt;
}

namespace ckptdetail {

inline constexpr char kMagic[4] = {'F', 'S', 'E', '1'};
inline constexpr uint32_t kVersion = 1;

// The three tensor groups stored in a checkpoint, in file order.
template <typename F>
inline void visit_checkpoint_tensors(Checkpoint& ckpt, F&& f) {
    visit_params(ckpt.params, ckpt.config.model,
                 [&](const std::string& name, Mat<float>& m, int, int, InitKind) {
                     f("param/" + name, m);
                 });
    visit_params(ckpt.opt.m, ckpt.config.model,
                 [&](const std::string& name, Mat<float>& m, int, int, InitKind) {
                     f("adam_m/" + name, m);
                 });
    visit_params(ckpt.opt.v, ckpt.config.model,
                 [&](const std::string& name, Mat<float>& m, int, int, InitKind) {
                     f("adam_v/" + name, m);
                 });
}

}  // namespace ckptdetail

// File layout: magic "FSE1", u32 version, u32 header length, UTF-8 JSON
// header (config values, step, tensor table with name/shape/offset), then the
// tensor data as raw little-endian float32 at the listed offsets.
inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt_in) {
    Checkpoint& ckpt = const_cast<Checkpoint&>(ckpt_in);  // visit needs mutable refs

    nlohmann::json header;
    header["step"] = ckpt.step;
    header["opt_t"] = ckpt.opt.t;
    nlohmann::json config_obj = nlohmann::json::object();
    for (const auto& key : config_key_names()) {
        config_obj[key] = config_get(ckpt.config, key);
    }
    header["config"] = config_obj;

    nlohmann::json table = nlohmann::json::array();
    uint64_t offset = 0;
    std::vector<const Mat<float>*> order;
    ckptdetail::visit_checkpoint_tensors(ckpt, [&](const std::string& name, Mat<float>& m) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["rows"] = m.rows;
        entry["cols"] = m.cols;
        entry["offset"] = offset;
        table.push_back(entry);
        order.push_back(&m);
        offset += m.size() * sizeof(float);
    });
    header["tensors"] = table;

    const std::string header_text = header.dump();

    std::vector<uint8_t> bytes;
    bytes.reserve(12 + header_text.size() + offset);
    bytes.insert(bytes.end(), ckptdetail::kMagic, ckptdetail::kMagic + 4);
    auto put_u32 = [&](uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            bytes.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xFF));
        }
    };
    put_u32(ckptdetail::kVersion);
    put_u32(static_cast<uint32_t>(header_text.size()));
    bytes.insert(bytes.end(), header_text.begin(), header_text.end());
    for (const Mat<float>* m : order) {
        const size_t start = bytes.size();
        bytes.resize(start + m->size() * sizeof(float));
        std::memcpy(bytes.data() + start, m->v.data(), m->size() * sizeof(float));
    }

    // Write to a temp file then rename, so an interrupted run never leaves a
    // half-written checkpoint behind.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw IoError("cannot open checkpoint for writing: " + tmp);
        }
        f.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
        if (!f) {
            throw IoError("short write: " + tmp);
        }
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open checkpoint: " + path);
    }
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());

    if (bytes.size() < 12) {
        throw FormatError("checkpoint truncated at offset " + std::to_string(bytes.size()) +
                          ": missing fixed header");
    }
    if (std::memcmp(bytes.data(), ckptdetail::kMagic, 4) != 0) {
        throw FormatError("bad checkpoint magic at offset 0 (want FSE1)");
    }
    auto get_u32 = [&](size_t at) {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<uint32_t>(bytes[at + i]) << (8 * i);
        }
        return v;
    };
    const uint32_t version = get_u32(4);
    if (version != ckptdetail::kVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version) +
                          " at offset 4");
    }
    const uint32_t header_len = get_u32(8);
    if (12 + static_cast<size_t>(header_len) > bytes.size()) {
        throw FormatError("checkpoint truncated at offset " + std::to_string(bytes.size()) +
                          ": header claims " + std::to_string(header_len) + " bytes");
    }

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + header_len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }

    Checkpoint ckpt;
    int64_t opt_t = 0;
    try {
        for (auto& [key, value] : header.at("config").items()) {
            config_set(ckpt.config, key, value.get<std::string>());
        }
        ckpt.step = header.at("step").get<int64_t>();
        opt_t = header.at("opt_t").get<int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint header missing fields: ") + e.what());
    }
    ckpt.config.validate();

    struct Entry {
        int rows = 0;
        int cols = 0;
        uint64_t offset = 0;
    };
    std::vector<std::pair<std::string, Entry>> entries;
    try {
        for (const auto& item : header.at("tensors")) {
            Entry e;
            e.rows = item.at("rows").get<int>();
            e.cols = item.at("cols").get<int>();
            e.offset = item.at("offset").get<uint64_t>();
            entries.emplace_back(item.at("name").get<std::string>(), e);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint tensor table malformed: ") + e.what());
    }

    const size_t data_start = 12 + header_len;
    const size_t data_len = bytes.size() - data_start;

    ckpt.params = zero_params<float>(ckpt.config.model);
    ckpt.opt = make_opt_state(ckpt.config.model);

    size_t cursor = 0;
    ckptdetail::visit_checkpoint_tensors(ckpt, [&](const std::string& name, Mat<float>& m) {
        if (cursor >= entries.size() || entries[cursor].first != name) {
            throw FormatError("checkpoint tensor table: expected '" + name + "' at index " +
                              std::to_string(cursor));
        }
        const Entry& e = entries[cursor].second;
        if (e.rows != m.rows || e.cols != m.cols) {
            throw FormatError("checkpoint tensor '" + name + "' has shape [" +
                              std::to_string(e.rows) + "x" + std::to_string(e.cols) +
                              "], config expects [" + std::to_string(m.rows) + "x" +
                              std::to_string(m.cols) + "]");
        }
        const uint64_t nbytes = m.size() * sizeof(float);
        if (e.offset + nbytes > data_len) {
            throw FormatError("checkpoint truncated: tensor '" + name + "' needs bytes [" +
                              std::to_string(data_start + e.offset) + ", " +
                              std::to_string(data_start + e.offset + nbytes) + ") but file ends at " +
                              std::to_string(bytes.size()));
        }
        std::memcpy(m.v.data(), bytes.data() + data_start + e.offset, nbytes);
        ++cursor;
    });
    if (cursor != entries.size()) {
        throw FormatError("checkpoint tensor table has " + std::to_string(entries.size()) +
                          " entries, expected " + std::to_string(cursor));
    }
    ckpt.opt.t = opt_t;
    validate_params(ckpt.params, ckpt.config.model);
    return ckpt;
}

// Rejects a checkpoint whose tensor shapes do not match the given model
// config (e.g. loading a tiny checkpoint under the paper preset).
inline void ensure_checkpoint_matches(const Checkpoint& ckpt, const ModelConfig& expected) {
    const auto want = param_shapes(expected);
    const auto have = param_shapes(ckpt.config.model);
    if (want.size() != have.size()) {
        throw DomainError("checkpoint shape mismatch: " + std::to_string(have.size()) +
                          " tensors vs " + std::to_string(want.size()) + " expected");
    }
    for (size_t i = 0; i < want.size(); ++i) {
        if (want[i].name != have[i].name || want[i].rows != have[i].rows ||
            want[i].cols != have[i].cols) {
            throw DomainError("checkpoint shape mismatch at tensor '" + have[i].name + "': [" +
                              std::to_string(have[i].rows) + "x" + std::to_string(have[i].cols) +
                              "] vs expected [" + std::to_string(want[i].rows) + "x" +
                              std::to_string(want[i].cols) + "]");
        }
    }
}

}  // namespace flowse
