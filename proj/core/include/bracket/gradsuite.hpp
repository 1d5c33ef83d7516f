#pragma once

#include <string>
#include <vector>

namespace bracket::gradsuite {

struct OpResult {
  std::string name;
  double max_rel_err = 0.0;
};

// Central-finite-difference checks of every differentiable operator on
// randomized small shapes, in 64-bit mode, across `seeds` seeds.
std::vector<OpResult> run_op_suite(int seeds);

// The full network loss (tone-mapped L1 of forward(T) against GT) on a
// micro configuration, checked coordinate-sampled per parameter tensor.
OpResult run_full_network_check(int seeds, long coords_per_tensor = 2);

// max over everything; convenience for the CLI gate
double run_all(int seeds, std::vector<OpResult>* detail = nullptr);

}  // namespace bracket::gradsuite
