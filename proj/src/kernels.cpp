#include "metapix/kernels.hpp"

namespace metapix::kernels {

Backend& backend() {
#ifdef _OPENMP
    static Backend b = Backend::Parallel;
#else
    static Backend b = Backend::Serial;
#endif
    return b;
}

}  // namespace metapix::kernels
