#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ildlab/model.hpp"
#include "ildlab/tensor.hpp"

namespace ildlab::checkpoint {

// A checkpoint is two files: <prefix>.json (manifest: config, tensor names,
// shapes, byte offsets) and <prefix>.bin (flat little-endian f64 blob).
// Round trips are bit-exact.

void save_model(const std::string& prefix, const TransformerModel& model);
TransformerModel load_model(const std::string& prefix);

// Generic named-tensor store for auxiliary state (e.g. a learned projection).
void save_tensors(const std::string& prefix,
                  const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& prefix);

} // namespace ildlab::checkpoint
