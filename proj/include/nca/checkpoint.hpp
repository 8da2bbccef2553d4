#pragma once

#include <cstdint>

#include "nca/tensor.hpp"

namespace nca::io {

inline constexpr int kCheckpointVersion = 1;

// u64 values travel in f32 tensors as four 16-bit limbs, least significant first.
Tensor encode_u64(uint64_t v);
uint64_t decode_u64(const Tensor& t);

}  // namespace nca::io
