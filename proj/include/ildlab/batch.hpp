#pragma once

#include <cstddef>
#include <vector>

#include "ildlab/errors.hpp"

namespace ildlab {

// Reserved token ids shared by the tokenizer, generators, and models.
inline constexpr std::size_t PAD_ID = 0;
inline constexpr std::size_t CLS_ID = 1;
inline constexpr std::size_t SEP_ID = 2;
inline constexpr std::size_t FIRST_CONTENT_ID = 3;

// A dense batch of tokenized examples. tokens/mask are row-major [batch, seq];
// mask is 1.0 on real tokens and 0.0 on [PAD]. clean_labels always carries the
// uncorrupted labels; labels may be noisy on train splits.
struct Batch {
    std::size_t batch_size = 0;
    std::size_t seq_len = 0;
    std::vector<std::size_t> tokens;
    std::vector<double> mask;
    std::vector<std::size_t> labels;
    std::vector<std::size_t> clean_labels;

    void validate() const {
        if (tokens.size() != batch_size * seq_len || mask.size() != tokens.size())
            throw DataError("batch: tokens/mask sizes disagree with geometry");
        if (labels.size() != batch_size || clean_labels.size() != batch_size)
            throw DataError("batch: label count disagrees with batch size");
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (mask[i] != 0.0 && mask[i] != 1.0)
                throw DataError("batch: mask entries must be 0 or 1");
            if ((mask[i] == 0.0) != (tokens[i] == PAD_ID))
                throw DataError("batch: mask must mark exactly the non-pad positions");
        }
    }
};

} // namespace ildlab
