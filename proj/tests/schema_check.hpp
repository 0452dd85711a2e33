#pragma once

// Test-only JSON Schema checker for the keywords the published schemas use:
// type, required, properties, items, enum, minimum, maximum.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace test_schema {

using nlohmann::json;

inline bool has_type(const json& v, const std::string& t) {
    if (t == "object") return v.is_object();
    if (t == "array") return v.is_array();
    if (t == "string") return v.is_string();
    if (t == "boolean") return v.is_boolean();
    if (t == "null") return v.is_null();
    if (t == "integer") return v.is_number_integer();
    if (t == "number") return v.is_number();
    return false;
}

inline void check(const json& schema, const json& v, const std::string& path, std::vector<std::string>& errors) {
    if (schema.contains("type")) {
        const json& t = schema["type"];
        bool ok = false;
        if (t.is_string())
            ok = has_type(v, t.get<std::string>());
        else
            for (const auto& alt : t) ok = ok || has_type(v, alt.get<std::string>());
        if (!ok) {
            errors.push_back(path + ": expected type " + t.dump() + ", got " + v.type_name());
            return;
        }
    }
    if (schema.contains("enum")) {
        bool found = false;
        for (const auto& e : schema["enum"]) found = found || e == v;
        if (!found) errors.push_back(path + ": value " + v.dump() + " not in enum");
    }
    if (v.is_number()) {
        if (schema.contains("minimum") && v.get<double>() < schema["minimum"].get<double>()) errors.push_back(path + ": below minimum");
        if (schema.contains("maximum") && v.get<double>() > schema["maximum"].get<double>()) errors.push_back(path + ": above maximum");
    }
    if (v.is_object()) {
        if (schema.contains("required"))
            for (const auto& key : schema["required"])
                if (!v.contains(key.get<std::string>())) errors.push_back(path + ": missing required key " + key.dump());
        if (schema.contains("properties"))
            for (const auto& [key, sub] : schema["properties"].items())
                if (v.contains(key)) check(sub, v[key], path + "." + key, errors);
    }
    if (v.is_array() && schema.contains("items"))
        for (std::size_t i = 0; i < v.size(); ++i) check(schema["items"], v[i], path + "[" + std::to_string(i) + "]", errors);
}

inline std::vector<std::string> validate(const json& schema, const json& document) {
    std::vector<std::string> errors;
    check(schema, document, "$", errors);
    return errors;
}

inline json load_schema(const std::string& name) {
    std::ifstream in(std::filesystem::path(SIDA_SCHEMA_DIR) / name);
    return json::parse(in);
}

}  // namespace test_schema
