#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "evaluator.hpp"

namespace mlci {

// Testset manifest: ordered example ids plus any labels already known.
struct Manifest {
    std::vector<std::string> ids;
    LabelSet labels;
};

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    if (in.bad()) throw IoError("cannot read '" + path.string() + "'");
    return std::move(buf).str();
}

// Splits CSV lines into (first field, rest-of-line) pairs, tolerating CRLF
// endings and a UTF-8 BOM. The first line must be the expected header.
inline std::vector<std::pair<std::string, std::string>> read_two_column_csv(
    const std::filesystem::path& path, std::string_view expected_header) {
    std::string text = read_file(path);
    std::string_view rest(text);
    if (rest.substr(0, 3) == "\xEF\xBB\xBF") rest.remove_prefix(3);

    std::vector<std::pair<std::string, std::string>> rows;
    bool header_seen = false;
    while (!rest.empty()) {
        std::size_t eol = rest.find('\n');
        std::string_view line = rest.substr(0, eol);
        rest.remove_prefix(eol == std::string_view::npos ? rest.size() : eol + 1);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        if (!header_seen) {
            if (line != expected_header)
                throw IoError("'" + path.string() + "': expected header '" +
                              std::string(expected_header) + "', got '" + std::string(line) +
                              "'");
            header_seen = true;
            continue;
        }
        std::size_t comma = line.find(',');
        if (comma == std::string_view::npos)
            throw IoError("'" + path.string() + "': row without a comma: '" +
                          std::string(line) + "'");
        rows.emplace_back(std::string(line.substr(0, comma)),
                          std::string(line.substr(comma + 1)));
    }
    if (!header_seen) throw IoError("'" + path.string() + "' is empty");
    return rows;
}

}  // namespace detail

inline PredictionSet load_predictions(const std::filesystem::path& path,
                                      std::string model_id = {}) {
    PredictionSet set;
    set.model_id = model_id.empty() ? path.filename().string() : std::move(model_id);
    for (auto& [id, label] : detail::read_two_column_csv(path, "example_id,label")) {
        if (!set.entries.emplace(std::move(id), std::move(label)).second)
            throw IoError("'" + path.string() + "': duplicate example_id");
    }
    if (set.entries.empty()) throw IoError("'" + path.string() + "' contains no predictions");
    return set;
}

inline LabelSet load_labels(const std::filesystem::path& path) {
    LabelSet set;
    for (auto& [id, label] : detail::read_two_column_csv(path, "example_id,label"))
        set.entries.insert_or_assign(std::move(id), std::move(label));
    return set;
}

// Manifest rows may leave the label column empty for unlabeled examples.
inline Manifest load_manifest(const std::filesystem::path& path) {
    Manifest m;
    std::unordered_set<std::string> seen;
    for (auto& [id, label] : detail::read_two_column_csv(path, "example_id,label")) {
        if (!seen.insert(id).second)
            throw IoError("'" + path.string() + "': duplicate example_id '" + id + "'");
        if (!label.empty()) m.labels.entries.emplace(id, std::move(label));
        m.ids.push_back(std::move(id));
    }
    return m;
}

inline std::string render_manifest(const Manifest& m) {
    std::string out = "example_id,label\n";
    for (const std::string& id : m.ids) {
        out += id;
        out += ',';
        auto it = m.labels.entries.find(id);
        if (it != m.labels.entries.end()) out += it->second;
        out += '\n';
    }
    return out;
}

// Write-then-rename so readers never observe a torn file.
inline void atomic_write_file(const std::filesystem::path& path, std::string_view content) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp.string() + "'");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) throw IoError("cannot write '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot replace '" + path.string() + "': " + ec.message());
}

inline std::uint64_t fnv1a64(std::string_view data) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return s;
}

}  // namespace mlci
