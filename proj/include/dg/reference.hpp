#pragma once

// Straightforward double-precision forward pass of the toy model, written
// independently of the optimised f32 path. Serves as the oracle for
// finite-difference gradient checks and forward-pass equivalence tests.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "dg/checkpoint.hpp"

namespace dg::reference {

using ParamsF64 = std::map<std::string, std::vector<double>>;

ParamsF64 to_f64(const Checkpoint& ckpt);

/// Logits [seq * vocab], row-major.
std::vector<double> logits(const ArchConfig& arch, const ParamsF64& params, std::span<const int> tokens);

/// Mean cross-entropy over masked targets (target t predicted from row t-1); 0 if the mask is empty.
double masked_xent(const ArchConfig& arch, const ParamsF64& params, std::span<const int> tokens,
                   std::span<const std::uint8_t> mask);

} // namespace dg::reference
