#pragma once

#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "emcomm/bytes.hpp"
#include "emcomm/error.hpp"

namespace emcomm {

inline constexpr const char* tool_version = "0.1.0";

// Git blob object id: sha1("blob <size>\0" + content), lowercase hex.
inline std::string git_blob_hash(std::span<const std::uint8_t> content) {
    const std::string header = "blob " + std::to_string(content.size()) + std::string(1, '\0');
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx) throw std::runtime_error("sha1: context allocation failed");
    const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                    EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                    EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                    EVP_DigestFinal_ex(ctx, md, &len) == 1;
    EVP_MD_CTX_free(ctx);
    if (!ok) throw std::runtime_error("sha1: digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

inline std::string git_blob_hash_file(const std::string& path) { return git_blob_hash(read_file_bytes(path)); }

// Writes to a sibling temporary file, then renames over the target.
inline void write_file_atomic(const std::string& path, std::string_view content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw io_error("cannot write " + tmp);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) throw io_error("write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw io_error("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

inline void write_file_atomic(const std::string& path, std::span<const std::uint8_t> content) {
    write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(content.data()), content.size()));
}

struct RunManifest {
    std::string command;
    nlohmann::ordered_json config;
    std::uint64_t seed = 0;
    nlohmann::ordered_json input_hashes = nlohmann::ordered_json::object();
    nlohmann::ordered_json outputs = nlohmann::ordered_json::object();
    nlohmann::ordered_json extra = nlohmann::ordered_json::object();

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["command"] = command;
        j["tool_version"] = tool_version;
        j["seed"] = seed;
        j["config"] = config;
        j["input_hashes"] = input_hashes;
        j["outputs"] = outputs;
        for (const auto& [k, v] : extra.items()) j[k] = v;
        return j;
    }

    void write(const std::string& path) const { write_file_atomic(path, to_json().dump(2) + "\n"); }
};

inline nlohmann::ordered_json read_json_file(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    try {
        return nlohmann::ordered_json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw format_error(path + ": " + e.what());
    }
}

} // namespace emcomm
