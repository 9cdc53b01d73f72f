#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

namespace editlab {

// Streaming FNV-1a (64-bit). Used for content hashes of models, benchmarks
// and config files; not cryptographic.
class Fnv64 {
  public:
    Fnv64& update(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h_ ^= p[i];
            h_ *= 0x100000001b3ull;
        }
        return *this;
    }
    Fnv64& update_u64(std::uint64_t v) { return update(&v, sizeof(v)); }
    Fnv64& update_i64(std::int64_t v) { return update(&v, sizeof(v)); }
    Fnv64& update_double(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof(bits));
        return update_u64(bits);
    }
    Fnv64& update_doubles(std::span<const double> v) {
        return update(v.data(), v.size() * sizeof(double));
    }
    Fnv64& update_str(std::string_view s) {
        update_u64(s.size());
        return update(s.data(), s.size());
    }
    std::uint64_t digest() const { return h_; }

  private:
    std::uint64_t h_ = 0xcbf29ce484222325ull;
};

inline std::uint64_t fnv64(std::string_view s) { return Fnv64{}.update_str(s).digest(); }

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace editlab
