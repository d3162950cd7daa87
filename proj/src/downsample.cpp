#include "rtsd/downsample.hpp"

namespace rtsd {

std::vector<double> downsample_lateral(const std::vector<double>& data, size_t outer, int M,
                                       int N, size_t inner, int factor) {
  if (factor < 1) throw ValidationError("downsample: factor must be >= 1");
  if (M % factor != 0 || N % factor != 0)
    throw ValidationError("downsample: lateral dimensions not divisible by factor");
  if (data.size() != outer * static_cast<size_t>(M) * N * inner)
    throw ValidationError("downsample: array size does not match declared shape");
  const int Mc = M / factor, Nc = N / factor;
  std::vector<double> out(outer * static_cast<size_t>(Mc) * Nc * inner, 0.0);
  const double inv = 1.0 / (factor * factor);
  for (size_t t = 0; t < outer; ++t) {
    const size_t src_t = t * static_cast<size_t>(M) * N * inner;
    const size_t dst_t = t * static_cast<size_t>(Mc) * Nc * inner;
    for (int I = 0; I < Mc; ++I)
      for (int J = 0; J < Nc; ++J) {
        const size_t dst = dst_t + (static_cast<size_t>(I) * Nc + J) * inner;
        for (int di = 0; di < factor; ++di)
          for (int dj = 0; dj < factor; ++dj) {
            const size_t src =
                src_t +
                (static_cast<size_t>(I * factor + di) * N + (J * factor + dj)) * inner;
            for (size_t x = 0; x < inner; ++x) out[dst + x] += data[src + x];
          }
        for (size_t x = 0; x < inner; ++x) out[dst + x] *= inv;
      }
  }
  return out;
}

}  // namespace rtsd
