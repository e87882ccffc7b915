#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "rainforge/tensor.hpp"

namespace rainforge {

// "RFT1" tensor record: 4 magic bytes, rank as u64, each extent as u64,
// then numel little-endian f32 values. f64 tensors are narrowed on write.

void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
void write_string(std::ostream& os, const std::string& s);
std::string read_string(std::istream& is, uint64_t max_len = (1ull << 32));

void write_tensor(std::ostream& os, const Tensor& t);
/// Reads one record as an f32 tensor.
Tensor read_tensor(std::istream& is);

using TensorTable = std::vector<std::pair<std::string, Tensor>>;

/// u64 count, then (name, RFT1 record) per entry.
void write_tensor_table(std::ostream& os, const TensorTable& table);
TensorTable read_tensor_table(std::istream& is);

}  // namespace rainforge
