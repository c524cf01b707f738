#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "recalx/error.hpp"

namespace recalx::detail {

inline const nlohmann::json& require_field(const nlohmann::json& j, const std::string& key,
                                           const std::string& context) {
    if (!j.is_object() || !j.contains(key)) {
        throw ParseError(context + ": missing field `" + key + "`");
    }
    return j.at(key);
}

inline double json_to_double(const nlohmann::json& j, const std::string& context) {
    if (!j.is_number()) {
        throw ParseError(context + ": expected a number");
    }
    return j.get<double>();
}

inline std::size_t json_to_count(const nlohmann::json& j, const std::string& context) {
    if (!j.is_number_integer() || j.get<long long>() < 0) {
        throw ParseError(context + ": expected a nonnegative integer");
    }
    return j.get<std::size_t>();
}

inline std::vector<double> json_to_doubles(const nlohmann::json& j, const std::string& context) {
    if (!j.is_array()) {
        throw ParseError(context + ": expected an array of numbers");
    }
    std::vector<double> out;
    out.reserve(j.size());
    for (const auto& v : j) {
        out.push_back(json_to_double(v, context));
    }
    return out;
}

inline std::vector<std::vector<double>> json_to_matrix(const nlohmann::json& j, const std::string& context) {
    if (!j.is_array()) {
        throw ParseError(context + ": expected an array of rows");
    }
    std::vector<std::vector<double>> out;
    out.reserve(j.size());
    for (const auto& row : j) {
        out.push_back(json_to_doubles(row, context));
    }
    return out;
}

}  // namespace recalx::detail
