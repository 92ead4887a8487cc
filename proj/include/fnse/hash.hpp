#pragma once
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace fnse {

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view data);

// Hash of the compact dump of j (object keys are sorted by nlohmann::json).
inline std::string json_hash(const nlohmann::json& j) { return sha256_hex(j.dump()); }

}  // namespace fnse
