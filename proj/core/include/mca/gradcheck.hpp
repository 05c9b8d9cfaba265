#pragma once

// Finite-difference verification of analytic gradients in double precision.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mca/tensor.hpp"

namespace mca {

/// Maps the current inputs to an output tensor of any shape.
using GradFn = std::function<TensorD(const std::vector<TensorD>&)>;

struct GradcheckOptions {
  double step = 1e-4;         // finite-difference step h
  double error_floor = 1e-4;  // denominator floor of the relative error
};

/// Largest relative error over every element of every input that requires a
/// gradient, comparing backprop against a fourth-order central difference of
/// the scalar projection sum(r * f(inputs)) with fixed random weights r.
double max_gradient_error(const GradFn& fn, std::vector<TensorD> inputs, std::mt19937_64& rng,
                          const GradcheckOptions& opts = {});

struct GradcheckResult {
  std::string op;
  int trials = 0;
  double max_rel_error = 0.0;
  double threshold = 0.0;
  bool passed() const { return max_rel_error <= threshold; }
};

/// Individually checkable ops, in report order.
std::vector<std::string> gradcheck_ops();

/// Expands a group name ("all", "mca-block") or returns {op}. Throws
/// ConfigError for unknown names.
std::vector<std::string> resolve_gradcheck_ops(const std::string& name);

/// Random shapes and values per trial. moment3 additionally runs a
/// constant-input case whose exact gradient is zero.
GradcheckResult run_gradcheck(const std::string& op, int trials, std::uint64_t seed = 0);

}  // namespace mca
