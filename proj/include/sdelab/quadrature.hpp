#pragma once

#include <functional>
#include <string>
#include <string_view>

namespace sdelab {

// Adaptive Gauss-Kronrod integral of a smooth scalar function on [a, b].
double integrate(const std::function<double(double)>& f, double a, double b,
                 double rel_tol = 1e-12);

// 64-bit FNV-1a content hash, rendered as 16 hex digits.
std::string content_hash(std::string_view text);

}  // namespace sdelab
