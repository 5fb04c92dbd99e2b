#pragma once

// Versioned binary container for model parameters.
//
// Layout (little-endian):
//   magic    8 bytes  "ADVGCKPT"
//   version  u32
//   n_meta   u32, then n_meta x (u32 len, key bytes, u32 len, value bytes)
//   n_arrays u32, then n_arrays x (u32 len, name bytes, u64 rows, u64 cols,
//                                  rows*cols IEEE-754 doubles)
// Entries are written in key order, so equal contents give equal bytes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "advgen/matrix.hpp"

namespace advgen {

inline constexpr char kCheckpointMagic[8] = {'A', 'D', 'V', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::map<std::string, Matrix> arrays;

  const Matrix& array(const std::string& name) const;
  const std::string& meta_value(const std::string& key) const;
  long long meta_int(const std::string& key) const;
};

// Writes via a temporary file and rename.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace advgen
