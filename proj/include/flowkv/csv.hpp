#pragma once

#include <charconv>
#include <cstdint>
#include <string>

namespace flowkv {

/// Shortest round-trip decimal form; keeps CSV output reproducible
/// byte-for-byte for a given build.
inline std::string fmt_double(double x) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    (void)ec;
    return std::string(buf, p);
}

class CsvRow {
public:
    CsvRow& add(const std::string& s) {
        if (!line_.empty()) line_ += ',';
        line_ += s;
        return *this;
    }
    CsvRow& add(const char* s) { return add(std::string(s)); }
    CsvRow& add(double x) { return add(fmt_double(x)); }
    CsvRow& add(std::int64_t x) { return add(std::to_string(x)); }
    CsvRow& add(std::uint64_t x) { return add(std::to_string(x)); }
    CsvRow& add(int x) { return add(std::to_string(x)); }

    std::string str() const { return line_; }

private:
    std::string line_;
};

}  // namespace flowkv
