#pragma once

#include "looplens/model.hpp"

#include <string>

namespace looplens {

// Weight container: a u64 little-endian header length, a UTF-8 JSON header
// terminated by a newline (version, config, tensor index with byte offsets
// into the payload), then a contiguous little-endian float32 payload with
// every tensor stored row-major. Files written here reload and re-save
// byte-identically.
void save_weights(const ModelWeights& weights, const std::string& path);
ModelWeights load_weights(const std::string& path);

// Header JSON of a weight file, without reading the payload.
std::string inspect_weights(const std::string& path);

}  // namespace looplens
