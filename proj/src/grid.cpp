#include "rtsd/grid.hpp"

#include <algorithm>

namespace rtsd {

std::vector<Offset> drift_offsets(Species s) {
  std::vector<Offset> out;
  out.reserve(18);
  const std::array<int, 2> dzs =
      s == Species::electron ? std::array<int, 2>{1, 2} : std::array<int, 2>{-2, -1};
  for (int dx = -1; dx <= 1; ++dx)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dz : dzs) out.push_back({dx, dy, dz});
  std::sort(out.begin(), out.end(), [](const Offset& a, const Offset& b) {
    return std::array<int, 3>{a.dx, a.dy, a.dz} < std::array<int, 3>{b.dx, b.dy, b.dz};
  });
  return out;
}

int on_axis_offset(Species s) {
  const auto offs = drift_offsets(s);
  const Offset axis{0, 0, s == Species::electron ? 1 : -1};
  for (size_t o = 0; o < offs.size(); ++o)
    if (offs[o] == axis) return static_cast<int>(o);
  return -1;  // unreachable
}

}  // namespace rtsd
