#pragma once

// Internal helpers for raw little-endian float32 tensor blobs.

#include <bit>
#include <cstdint>
#include <fstream>
#include <vector>

#include "textrefiner/errors.hpp"
#include "textrefiner/matrix.hpp"

namespace textrefiner::detail {

static_assert(std::endian::native == std::endian::little,
              "blob formats are little-endian; big-endian hosts are unsupported");
static_assert(sizeof(float) == 4);

inline std::vector<float> narrow_f32(const numkit::Matrix& m) {
  std::vector<float> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    out[i] = static_cast<float>(m.data()[i]);
  }
  return out;
}

inline void widen_into(const std::vector<float>& src, numkit::Matrix& dst) {
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst.data()[i] = static_cast<double>(src[i]);
  }
}

// Round every entry through float32 so in-memory values match a file
// round-trip exactly.
inline void quantize_f32(numkit::Matrix& m) {
  for (double& v : m.data()) {
    v = static_cast<double>(static_cast<float>(v));
  }
}

inline void write_f32_blob(std::ostream& out, const numkit::Matrix& m) {
  const auto floats = narrow_f32(m);
  out.write(reinterpret_cast<const char*>(floats.data()),
            static_cast<std::streamsize>(floats.size() * sizeof(float)));
}

inline void read_f32_blob(std::istream& in, numkit::Matrix& m, const std::string& name) {
  std::vector<float> floats(m.size());
  in.read(reinterpret_cast<char*>(floats.data()),
          static_cast<std::streamsize>(floats.size() * sizeof(float)));
  if (in.gcount() != static_cast<std::streamsize>(floats.size() * sizeof(float))) {
    throw FormatError(FormatError::Kind::Truncated,
                      name + ": expected " + std::to_string(floats.size() * sizeof(float)) +
                          " bytes, got " + std::to_string(in.gcount()));
  }
  widen_into(floats, m);
}

}  // namespace textrefiner::detail
