#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "irs/tensor.hpp"

namespace irs {

// Single-file tensor container:
//   8 bytes  magic "IRSCKPT1"
//   u64 LE   header length H
//   H bytes  JSON header {format_version, dtype, tensors: [{name, shape, offset, bytes}], meta}
//   raw little-endian float32 buffers, offsets relative to the end of the header
struct Checkpoint {
  static constexpr int kFormatVersion = 1;

  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, nn::Tensor<float>> tensors;

  const nn::Tensor<float>& at(const std::string& name) const;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Atomically replace `path` with `bytes` (write to a sibling temp file, then rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace irs
