#include "irs/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace irs {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'I', 'R', 'S', 'C', 'K', 'P', 'T', '1'};

}  // namespace

const nn::Tensor<float>& Checkpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("checkpoint has no tensor named '" + name + "'");
  return it->second;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["format_version"] = Checkpoint::kFormatVersion;
  header["dtype"] = "float32";
  header["meta"] = ckpt.meta;
  auto entries = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, tensor] : ckpt.tensors) {
    const std::size_t bytes = tensor.size() * sizeof(float);
    entries.push_back({{"name", name}, {"shape", tensor.shape()}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  header["tensors"] = entries;
  const std::string text = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += text;
  for (const auto& [name, tensor] : ckpt.tensors) {
    out.append(reinterpret_cast<const char*>(tensor.data()), tensor.size() * sizeof(float));
  }
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  if (raw.size() < sizeof(kMagic) + 8 || std::memcmp(raw.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(path.string() + " is not a checkpoint file");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, raw.data() + sizeof(kMagic), sizeof(len));
  const std::size_t body = sizeof(kMagic) + 8 + len;
  if (body > raw.size()) throw FormatError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(raw.substr(sizeof(kMagic) + 8, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  if (header.value("format_version", 0) != Checkpoint::kFormatVersion) {
    throw FormatError(path.string() + ": unsupported format version " + header["format_version"].dump());
  }
  if (header.value("dtype", "") != "float32") throw FormatError(path.string() + ": unsupported dtype");

  Checkpoint ckpt;
  ckpt.meta = header["meta"];
  for (const auto& entry : header["tensors"]) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<nn::Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const auto bytes = entry.at("bytes").get<std::size_t>();
    if (bytes != nn::shape_size(shape) * sizeof(float) || body + offset + bytes > raw.size()) {
      throw FormatError(path.string() + ": tensor '" + name + "' extends past end of file");
    }
    std::vector<float> data(nn::shape_size(shape));
    std::memcpy(data.data(), raw.data() + body + offset, bytes);
    ckpt.tensors.emplace(name, nn::Tensor<float>(shape, std::move(data)));
  }
  return ckpt;
}

}  // namespace irs
