#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string_view>

#include "advgen/kernels.hpp"

namespace advgen::kernels {
namespace {

const KernelTable* detect() {
  // ADVGEN_ISA=scalar pins the reference path for the whole process.
  if (const char* env = std::getenv("ADVGEN_ISA"); env && std::string_view(env) == "scalar") {
    return &scalar_table();
  }
  if (const KernelTable* t = avx2_table()) return t;
  return &scalar_table();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{detect()};
  return current;
}

}  // namespace

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

void force_isa(Isa isa) {
  switch (isa) {
    case Isa::kScalar:
      slot().store(&scalar_table());
      return;
    case Isa::kAvx2:
      if (const KernelTable* t = avx2_table()) {
        slot().store(t);
        return;
      }
      throw std::invalid_argument("AVX2/FMA kernels are not available on this CPU");
  }
}

void reset_isa() { slot().store(detect()); }

}  // namespace advgen::kernels
