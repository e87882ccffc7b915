#include "rainforge/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <istream>
#include <ostream>

namespace rainforge {

namespace {

constexpr std::array<char, 4> kTensorMagic = {'R', 'F', 'T', '1'};
constexpr uint64_t kMaxRank = 16;

template <class U>
void write_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> buf;
  for (size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf.data(), buf.size());
  if (!os) throw Error("write failed");
}

template <class U>
U read_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> buf;
  is.read(reinterpret_cast<char*>(buf.data()), buf.size());
  if (!is) throw Error("unexpected end of file");
  U v = 0;
  for (size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u32(std::ostream& os, uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, uint64_t v) { write_le(os, v); }
uint32_t read_u32(std::istream& is) { return read_le<uint32_t>(is); }
uint64_t read_u64(std::istream& is) { return read_le<uint64_t>(is); }

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!os) throw Error("write failed");
}

std::string read_string(std::istream& is, uint64_t max_len) {
  const uint64_t n = read_u64(is);
  if (n > max_len) throw Error("corrupt string length " + std::to_string(n));
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw Error("unexpected end of file");
  return s;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), kTensorMagic.size());
  write_u64(os, static_cast<uint64_t>(t.dim()));
  for (int64_t e : t.shape()) write_u64(os, static_cast<uint64_t>(e));
  Tensor f = t.dtype() == DType::f32 ? t : t.to(DType::f32);
  for (float v : f.data<float>()) write_le(os, std::bit_cast<uint32_t>(v));
}

Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kTensorMagic) throw Error("bad tensor header: expected magic RFT1");
  const uint64_t rank = read_u64(is);
  if (rank == 0 || rank > kMaxRank) throw Error("bad tensor header: rank " + std::to_string(rank));
  Shape shape;
  uint64_t count = 1;
  for (uint64_t i = 0; i < rank; ++i) {
    const uint64_t e = read_u64(is);
    if (e == 0 || e > (1ull << 31)) throw Error("bad tensor header: extent " + std::to_string(e));
    count *= e;
    if (count > (1ull << 34)) throw Error("bad tensor header: tensor too large");
    shape.push_back(static_cast<int64_t>(e));
  }
  Tensor t = make_tensor(shape, DType::f32);
  for (auto& v : t.mutable_data<float>()) v = std::bit_cast<float>(read_le<uint32_t>(is));
  return t;
}

void write_tensor_table(std::ostream& os, const TensorTable& table) {
  write_u64(os, table.size());
  for (const auto& [name, t] : table) {
    write_string(os, name);
    write_tensor(os, t);
  }
}

TensorTable read_tensor_table(std::istream& is) {
  const uint64_t count = read_u64(is);
  if (count > (1ull << 24)) throw Error("bad tensor table: " + std::to_string(count) + " entries");
  TensorTable table;
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = read_string(is, 1 << 12);
    table.emplace_back(std::move(name), read_tensor(is));
  }
  return table;
}

}  // namespace rainforge
