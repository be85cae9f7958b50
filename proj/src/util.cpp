#include "cardiotwin/util.hpp"

#include "cardiotwin/error.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <fstream>
#include <memory>
#include <numbers>
#include <sstream>

namespace cardiotwin {

std::string_view errc_name(Errc code) noexcept {
    switch (code) {
        case Errc::config: return "config";
        case Errc::parse: return "parse";
        case Errc::version: return "version";
        case Errc::validation: return "validation";
        case Errc::routing: return "routing";
        case Errc::transport: return "transport";
        case Errc::parameter: return "parameter";
        case Errc::numeric: return "numeric";
        case Errc::shape: return "shape";
        case Errc::degenerate_input: return "degenerate_input";
        case Errc::reference: return "reference";
        case Errc::io: return "io";
    }
    return "unknown";
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

double unit_uniform(std::uint64_t key) noexcept {
    return static_cast<double>(splitmix64(key) >> 11) * 0x1.0p-53;
}

double unit_gaussian(std::uint64_t key) noexcept {
    // u1 in (0, 1] so the log is finite.
    const double u1 = 1.0 - unit_uniform(key);
    const double u2 = unit_uniform(hash_combine(key, 0x5bd1e995ULL));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string sha256_hex(std::string_view bytes) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
        fail(Errc::io, "sha256 digest failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[digest[i] >> 4]);
        out.push_back(kHex[digest[i] & 0xf]);
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path) {
    return sha256_hex(read_file(path));
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::io, "cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(Errc::io, "cannot open " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) lines.push_back(std::move(line));
    }
    return lines;
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Errc::io, "cannot write " + path.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) fail(Errc::io, "short write to " + path.string());
}

}  // namespace cardiotwin
