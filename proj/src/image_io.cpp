#include "toon/image_io.hpp"

#include "toon/errors.hpp"

#include <fstream>

namespace toon {

namespace {

torch::Tensor to_bytes_hwc(const torch::Tensor& image) {
    auto u8 = ((image.detach().to(torch::kFloat32).clamp(-1, 1) + 1.0) * 127.5).round().to(torch::kUInt8);
    return u8.permute({1, 2, 0}).contiguous();
}

void write_netpbm(const std::filesystem::path& path, const torch::Tensor& image, const char* magic) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write " + path.string());
    auto hwc = to_bytes_hwc(image);
    f << magic << "\n" << image.size(2) << " " << image.size(1) << "\n255\n";
    f.write(static_cast<const char*>(hwc.data_ptr()), hwc.numel());
}

std::string next_token(std::istream& in) {
    std::string tok;
    while (in >> tok) {
        if (tok[0] == '#') {
            std::string rest;
            std::getline(in, rest);
            continue;
        }
        return tok;
    }
    throw IoError("netpbm: unexpected end of header");
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const torch::Tensor& frame) {
    if (frame.dim() != 3 || frame.size(0) != 3) throw ContractError("write_ppm expects [3,H,W]");
    write_netpbm(path, frame, "P6");
}

void write_pgm(const std::filesystem::path& path, const torch::Tensor& gray) {
    if (gray.dim() != 3 || gray.size(0) != 1) throw ContractError("write_pgm expects [1,H,W]");
    write_netpbm(path, gray, "P5");
}

torch::Tensor read_netpbm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read image " + path.string());
    auto magic = next_token(f);
    std::int64_t channels = 0;
    if (magic == "P6") channels = 3;
    else if (magic == "P5") channels = 1;
    else throw IoError(path.string() + ": only binary PPM (P6) and PGM (P5) are supported");
    auto width = std::stoll(next_token(f));
    auto height = std::stoll(next_token(f));
    auto maxval = std::stoll(next_token(f));
    if (maxval != 255) throw IoError(path.string() + ": only 8-bit images are supported");
    f.get();  // single whitespace after header
    auto hwc = torch::empty({height, width, channels}, torch::kUInt8);
    f.read(static_cast<char*>(hwc.data_ptr()), hwc.numel());
    if (f.gcount() != hwc.numel()) throw IoError(path.string() + ": truncated pixel data");
    return hwc.permute({2, 0, 1}).to(torch::kFloat32) / 127.5 - 1.0;
}

torch::Tensor quantize_u8(const torch::Tensor& image) {
    return ((image.clamp(-1, 1) + 1.0) * 127.5).round() / 127.5 - 1.0;
}

}  // namespace toon
