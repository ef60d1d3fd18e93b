#include "fixtures.hpp"

#include <chrono>
#include <cstdio>

int main() {
  try {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& m = fixtures::model();
    const auto& tc = fixtures::transcoder();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("subject model %s\ntranscoder for %s (%d x %d features)\nready in %.1f s\n", m.hash().c_str(),
                tc.model_hash().c_str(), tc.n_layers(), tc.features(), secs);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fixture preparation failed: %s\n", e.what());
    return 1;
  }
  return 0;
}
