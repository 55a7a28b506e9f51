#include "rigidreg/tensor.hpp"

// Tensor is header-only; this unit anchors the target.
