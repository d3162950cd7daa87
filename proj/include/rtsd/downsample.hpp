#ifndef RTSD_DOWNSAMPLE_HPP
#define RTSD_DOWNSAMPLE_HPP

#include <vector>

#include "rtsd/errors.hpp"

namespace rtsd {

// Block-averages the two lateral dimensions of an array laid out as
// (outer, M, N, inner) row-major: each non-overlapping factor x factor block
// is replaced by its arithmetic mean. outer/inner cover any leading time or
// trailing depth dimensions.
std::vector<double> downsample_lateral(const std::vector<double>& data, size_t outer, int M,
                                       int N, size_t inner, int factor);

}  // namespace rtsd

#endif
