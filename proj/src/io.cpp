#include "recalx/io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <vector>

#include "recalx/error.hpp"

namespace recalx {
namespace {

std::vector<std::string> split_row(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) {
        cells.push_back(cell);
    }
    if (!line.empty() && line.back() == ',') {
        cells.emplace_back();
    }
    return cells;
}

std::string trim(std::string s) {
    auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

}  // namespace

Dataset parse_dataset_csv(const std::string& text, std::optional<std::size_t> class_count) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) {
        throw ParseError("dataset CSV is empty", 1, 0);
    }
    if (!line.empty() && line.back() == '\r') {
        line.pop_back();
    }
    const auto header = split_row(line);
    std::size_t label_col = header.size();
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (trim(header[c]) == "label") {
            if (label_col != header.size()) {
                throw ParseError("dataset CSV has more than one `label` column", 1, c + 1);
            }
            label_col = c;
        }
    }
    if (label_col == header.size()) {
        throw ParseError("dataset CSV header has no `label` column", 1, 0);
    }

    Dataset data;
    data.feature_count = header.size() - 1;
    int max_label = -1;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto cells = split_row(line);
        if (cells.size() != header.size()) {
            throw ParseError("row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                                 " cells, header has " + std::to_string(header.size()),
                             row, 0);
        }
        Instance x;
        x.reserve(data.feature_count);
        int label = 0;
        for (std::size_t c = 0; c < cells.size(); ++c) {
            const std::string cell = trim(cells[c]);
            const char* first = cell.data();
            const char* last = cell.data() + cell.size();
            if (c == label_col) {
                auto [ptr, ec] = std::from_chars(first, last, label);
                if (cell.empty() || ec != std::errc{} || ptr != last || label < 0) {
                    throw ParseError("row " + std::to_string(row) + ", column " + std::to_string(c + 1) +
                                         ": label `" + cell + "` is not a nonnegative integer",
                                     row, c + 1);
                }
            } else {
                double value = 0.0;
                auto [ptr, ec] = std::from_chars(first, last, value);
                if (cell.empty() || ec != std::errc{} || ptr != last || !std::isfinite(value)) {
                    throw ParseError("row " + std::to_string(row) + ", column " + std::to_string(c + 1) +
                                         ": `" + cell + "` is not a finite number",
                                     row, c + 1);
                }
                x.push_back(value);
            }
        }
        max_label = std::max(max_label, label);
        data.instances.push_back(std::move(x));
        data.labels.push_back(label);
    }
    data.class_count = class_count.value_or(static_cast<std::size_t>(std::max(max_label + 1, 2)));
    data.validate();
    return data;
}

Dataset read_dataset_csv(const std::filesystem::path& path, std::optional<std::size_t> class_count) {
    return parse_dataset_csv(read_text_file(path), class_count);
}

std::string dataset_to_csv(const Dataset& data) {
    std::string out;
    for (std::size_t j = 0; j < data.feature_count; ++j) {
        out += "x" + std::to_string(j) + ",";
    }
    out += "label\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        for (double v : data.instances[i]) {
            out += format_double(v);
            out += ',';
        }
        out += std::to_string(data.labels[i]);
        out += '\n';
    }
    return out;
}

void write_dataset_csv(const std::filesystem::path& path, const Dataset& data) {
    write_text_file(path, dataset_to_csv(data));
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw InvalidInput("cannot open " + path.string());
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw InvalidInput("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw InvalidInput("write failed for " + path.string());
    }
}

}  // namespace recalx
