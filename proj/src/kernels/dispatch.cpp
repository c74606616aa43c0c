#include <atomic>
#include <cstdlib>
#include <string>

#include "gscollab/error.hpp"
#include "gscollab/kernels/kernels.hpp"

namespace gscollab::kernels {

#ifndef GSCOLLAB_HAVE_AVX2
const KernelTable* avx2_table() { return nullptr; }
#endif

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::Scalar:
      return true;
    case Isa::Avx2:
#if defined(GSCOLLAB_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
      return avx2_table() != nullptr && __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

Isa best_isa() { return isa_supported(Isa::Avx2) ? Isa::Avx2 : Isa::Scalar; }

namespace {

const KernelTable& table_for(Isa isa) {
  if (!isa_supported(isa)) throw InvalidArgument("kernel ISA not supported on this build/CPU");
  return isa == Isa::Avx2 ? *avx2_table() : scalar_table();
}

const KernelTable* initial_table() {
  if (const char* env = std::getenv("GSCOLLAB_KERNELS")) {
    const std::string want(env);
    if (want == "scalar") return &scalar_table();
    if (want == "avx2" && isa_supported(Isa::Avx2)) return avx2_table();
  }
  return &table_for(best_isa());
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{initial_table()};
  return current;
}

}  // namespace

const KernelTable& active() { return *slot().load(std::memory_order_acquire); }

void select(Isa isa) { slot().store(&table_for(isa), std::memory_order_release); }

ScopedIsa::ScopedIsa(Isa isa) : previous_(active().isa) { select(isa); }

ScopedIsa::~ScopedIsa() { select(previous_); }

}  // namespace gscollab::kernels
