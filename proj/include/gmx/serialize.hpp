#pragma once

#include <string>

#include "gmx/param_store.hpp"

namespace gmx {

// GMXW weight archive, little-endian:
//   magic "GMXW" | u32 version=1 | u32 tensor_count
//   per tensor: u32 name_len | name bytes | u32 ndim | u32 dims[ndim]
//               | u32 dtype (0 = f32) | f32 data[numel]
// Values are stored as f32; the f64 -> f32 cast is lossy and round-trips
// compare at f32 precision.

// Writes to a temp file in the same directory, then renames (atomic publish).
void save_weights(const std::string& path, const ParamStore& store);

// Validates the whole archive against the store (names, shapes, count)
// before mutating anything; on any error the store is untouched.
void load_weights(const std::string& path, const ParamStore& store);

}  // namespace gmx
