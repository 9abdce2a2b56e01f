// Test plugin: a deliberately mundane kernel whose cost per iteration is
// easy to reason about. Exercises the dlopen path end to end.

#include <cstdint>

extern "C" {
typedef struct synmirror_kernel_v1 {
    unsigned long long flops_per_iteration;
    void (*run)(unsigned long long iterations);
} synmirror_kernel_v1;
}

namespace {

volatile double sink = 0.0;

void run(unsigned long long iterations) {
    double acc = 1.0000001;
    for (unsigned long long i = 0; i < iterations; ++i) {
        // 64 dependent multiply-adds per iteration
        for (int k = 0; k < 64; ++k) acc = acc * 1.0000001 + 1e-12;
    }
    sink = acc;
}

}  // namespace

extern "C" const synmirror_kernel_v1* synmirror_kernel(void) {
    static const synmirror_kernel_v1 desc{128ull, &run};
    return &desc;
}
