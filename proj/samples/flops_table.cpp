// Prints dense/sparse MAC counts of the ViT-L reference model for a range of
// masking ratios.
#include <cstdio>

#include "stmae/perf.hpp"

int main() {
  const stmae::MaeConfig cfg;  // 16x224x224x3 clips, 2x16x16 patches, ViT-L encoder
  std::printf("%6s %10s %10s %8s\n", "ratio", "dense_G", "sparse_G", "gain");
  for (double r : {0.0, 0.5, 0.75, 0.9, 0.95}) {
    const auto rep = stmae::mae_flops(cfg, r);
    std::printf("%6.2f %10.1f %10.1f %7.2fx\n", r, rep.dense_total / 1e9, rep.sparse_total / 1e9, rep.speedup);
  }
}
