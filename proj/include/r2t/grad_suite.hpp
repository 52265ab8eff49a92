#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace r2t {

struct GradResult {
  std::string kind;
  double max_rel_error = 0.0;
};

// One random-shape gradient check per differentiable primitive.
std::vector<GradResult> primitive_grad_suite(std::uint64_t seed);

// Encoder -> extractor -> decoder losses on a toy config. Proposal boxes are
// held fixed and each cascade stage's input boxes are detached from the
// previous stage, so stages 2 and 3 are probed on their own parameters.
std::vector<GradResult> composed_grad_suite(std::uint64_t seed);

}  // namespace r2t
