#pragma once

// Versioned named-tensor container used for every checkpoint this project
// writes. Entries are stored sorted by name so identical contents always
// produce identical bytes; that is what makes content hashes meaningful.
//
// Layout (little endian):
//   "TOONCKPT" | u32 version | u32 meta_len | meta (JSON text)
//   u32 count | count x { u32 name_len | name | u8 dtype | u32 ndim | i64 dims[ndim] | raw data }

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace toon {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class TensorArchive {
public:
    void put(const std::string& name, const torch::Tensor& t);
    bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
    const torch::Tensor& get(const std::string& name) const;

    /// Names that start with `prefix` (e.g. "temporal/").
    std::vector<std::string> names_with_prefix(std::string_view prefix) const;
    std::vector<std::string> names() const;
    bool has_section(std::string_view prefix) const { return !names_with_prefix(prefix).empty(); }

    std::string& metadata() { return metadata_; }
    const std::string& metadata() const { return metadata_; }

    std::string serialize() const;
    static TensorArchive deserialize(std::string_view bytes);

    void save(const std::filesystem::path& path) const;
    static TensorArchive load(const std::filesystem::path& path);

private:
    std::map<std::string, torch::Tensor> tensors_;
    std::string metadata_;
};

/// Copy every named parameter/buffer of `module` into `archive` as `section` + name,
/// with torch's "a.b.c" names rewritten to "a/b/c".
void export_module(const torch::nn::Module& module, const std::string& section, TensorArchive& archive);

/// Inverse of export_module. Every parameter of `module` must be present unless
/// `allow_missing` is set; returns the number of tensors loaded.
std::size_t import_module(torch::nn::Module& module, const std::string& section, const TensorArchive& archive,
                          bool allow_missing = false);

/// Hex SHA-1 over a byte string.
std::string sha1_hex(std::string_view bytes);

/// git-style blob hash: sha1("blob <len>\0" + bytes).
std::string git_blob_hash(std::string_view bytes);

/// Content hash of a file on disk (git blob hash of its bytes).
std::string file_content_hash(const std::filesystem::path& path);

/// Hash of a list of named tensors (names and raw values); used by freeze audits.
std::string tensors_hash(const std::vector<std::pair<std::string, torch::Tensor>>& tensors);

}  // namespace toon
