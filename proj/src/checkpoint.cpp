#include "toon/checkpoint.hpp"

#include "toon/errors.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

namespace toon {

namespace {

constexpr std::array<char, 8> kMagic{'T', 'O', 'O', 'N', 'C', 'K', 'P', 'T'};

enum class DTypeTag : std::uint8_t { F32 = 0, F64 = 1, I64 = 2, U8 = 3 };

DTypeTag tag_of(torch::ScalarType st) {
    switch (st) {
        case torch::kFloat32: return DTypeTag::F32;
        case torch::kFloat64: return DTypeTag::F64;
        case torch::kInt64: return DTypeTag::I64;
        case torch::kUInt8: return DTypeTag::U8;
        default: throw ParameterError("checkpoint: unsupported dtype " + std::string(c10::toString(st)));
    }
}

torch::ScalarType scalar_of(DTypeTag tag) {
    switch (tag) {
        case DTypeTag::F32: return torch::kFloat32;
        case DTypeTag::F64: return torch::kFloat64;
        case DTypeTag::I64: return torch::kInt64;
        case DTypeTag::U8: return torch::kUInt8;
    }
    throw IoError("checkpoint: unknown dtype tag");
}

template <typename T>
void write_pod(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <typename T>
    T pod() {
        T v;
        std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
        return v;
    }

    std::string_view take(std::size_t n) {
        if (pos_ + n > bytes_.size()) throw IoError("checkpoint: truncated data");
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

std::string dotted_to_slashed(std::string name) {
    std::replace(name.begin(), name.end(), '.', '/');
    return name;
}

}  // namespace

void TensorArchive::put(const std::string& name, const torch::Tensor& t) {
    tensors_[name] = t.detach().to(torch::kCPU).contiguous().clone();
}

const torch::Tensor& TensorArchive::get(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw IoError("checkpoint: missing tensor '" + name + "'");
    return it->second;
}

std::vector<std::string> TensorArchive::names_with_prefix(std::string_view prefix) const {
    std::vector<std::string> out;
    for (const auto& [name, _] : tensors_)
        if (std::string_view(name).substr(0, prefix.size()) == prefix) out.push_back(name);
    return out;
}

std::vector<std::string> TensorArchive::names() const { return names_with_prefix(""); }

std::string TensorArchive::serialize() const {
    std::string out(kMagic.data(), kMagic.size());
    write_pod<std::uint32_t>(out, kCheckpointVersion);
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(metadata_.size()));
    out += metadata_;
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensors_.size()));
    for (const auto& [name, t] : tensors_) {
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(tag_of(t.scalar_type())));
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
        for (auto d : t.sizes()) write_pod<std::int64_t>(out, d);
        out.append(static_cast<const char*>(t.data_ptr()), t.numel() * t.element_size());
    }
    return out;
}

TensorArchive TensorArchive::deserialize(std::string_view bytes) {
    Reader r(bytes);
    auto magic = r.take(kMagic.size());
    if (!std::equal(magic.begin(), magic.end(), kMagic.begin())) throw IoError("checkpoint: bad magic");
    auto version = r.pod<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    TensorArchive a;
    a.metadata_ = std::string(r.take(r.pod<std::uint32_t>()));
    auto count = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name(r.take(r.pod<std::uint32_t>()));
        auto st = scalar_of(static_cast<DTypeTag>(r.pod<std::uint8_t>()));
        auto ndim = r.pod<std::uint32_t>();
        std::vector<std::int64_t> dims(ndim);
        for (auto& d : dims) d = r.pod<std::int64_t>();
        auto t = torch::empty(dims, torch::TensorOptions().dtype(st));
        auto raw = r.take(t.numel() * t.element_size());
        std::memcpy(t.data_ptr(), raw.data(), raw.size());
        a.tensors_.emplace(std::move(name), std::move(t));
    }
    return a;
}

void TensorArchive::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    auto bytes = serialize();
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read checkpoint " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return deserialize(ss.str());
}

void export_module(const torch::nn::Module& module, const std::string& section, TensorArchive& archive) {
    for (const auto& p : module.named_parameters(true)) archive.put(section + dotted_to_slashed(p.key()), p.value());
    for (const auto& b : module.named_buffers(true)) archive.put(section + dotted_to_slashed(b.key()), b.value());
}

std::size_t import_module(torch::nn::Module& module, const std::string& section, const TensorArchive& archive,
                          bool allow_missing) {
    torch::NoGradGuard no_grad;
    std::size_t loaded = 0;
    auto load_into = [&](const std::string& key, torch::Tensor& dst) {
        auto name = section + dotted_to_slashed(key);
        if (!archive.contains(name)) {
            if (allow_missing) return;
            throw IoError("checkpoint: missing tensor '" + name + "'");
        }
        const auto& src = archive.get(name);
        if (src.sizes() != dst.sizes())
            throw IoError("checkpoint: shape mismatch for '" + name + "'");
        dst.copy_(src);
        ++loaded;
    };
    for (auto& p : module.named_parameters(true)) load_into(p.key(), p.value());
    for (auto& b : module.named_buffers(true)) load_into(b.key(), b.value());
    return loaded;
}

std::string sha1_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha1(), nullptr);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string hex;
    for (unsigned int i = 0; i < len; ++i) {
        hex += kHex[md[i] >> 4];
        hex += kHex[md[i] & 0xF];
    }
    return hex;
}

std::string git_blob_hash(std::string_view bytes) {
    std::string buf = "blob " + std::to_string(bytes.size());
    buf.push_back('\0');
    buf.append(bytes);
    return sha1_hex(buf);
}

std::string file_content_hash(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return git_blob_hash(ss.str());
}

std::string tensors_hash(const std::vector<std::pair<std::string, torch::Tensor>>& tensors) {
    std::string buf;
    for (const auto& [name, t] : tensors) {
        auto c = t.detach().to(torch::kCPU).contiguous();
        buf += name;
        buf.push_back('\0');
        buf.append(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size());
    }
    return sha1_hex(buf);
}

}  // namespace toon
