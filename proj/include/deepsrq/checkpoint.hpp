#ifndef DEEPSRQ_CHECKPOINT_HPP
#define DEEPSRQ_CHECKPOINT_HPP

// Checkpoint container:
//
//   "DSRQ" | u16 version | u32 header length | UTF-8 JSON header |
//   float32 LE tensor payloads (row-major, offsets in the header) |
//   u32 CRC32 of every preceding byte
//
// All integers are little-endian.

#include "deepsrq/model.hpp"
#include "deepsrq/optim.hpp"

#include <json.hpp>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepsrq {

inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class CheckpointErrc { IoFailure, VersionMismatch, ChecksumMismatch, BadFormat };

inline const char* to_string(CheckpointErrc c) {
  switch (c) {
    case CheckpointErrc::IoFailure: return "IoFailure";
    case CheckpointErrc::VersionMismatch: return "VersionMismatch";
    case CheckpointErrc::ChecksumMismatch: return "ChecksumMismatch";
    case CheckpointErrc::BadFormat: return "BadFormat";
  }
  return "Unknown";
}

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  CheckpointErrc code() const noexcept { return code_; }

 private:
  CheckpointErrc code_;
};

struct OptimizerSnapshot {
  SgdConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor<float>> velocities;  // same order as the network's parameters
};

/// Everything a checkpoint carries besides the network itself. `extra` is
/// free-form JSON (training configuration, epoch, seed, ...).
struct CheckpointMeta {
  nlohmann::json extra = nlohmann::json::object();
  std::optional<OptimizerSnapshot> optimizer;
};

struct LoadedCheckpoint {
  TwoStreamNet<float> net;
  CheckpointMeta meta;
  nlohmann::json header;
};

namespace detail {

inline void append_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(static_cast<std::uint8_t>(v));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void append_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t read_u32(const std::vector<std::uint8_t>& b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) | (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

inline void append_floats(std::vector<std::uint8_t>& b, std::span<const float> values) {
  for (float f : values) append_u32(b, std::bit_cast<std::uint32_t>(f));
}

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = crc32(crc, bytes.data() + off, n);
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(TwoStreamNet<float>& net, const CheckpointMeta& meta) {
  struct Entry {
    std::string name;
    const Tensor<float>* tensor;
  };
  std::vector<Entry> entries;
  for (auto& np : net.named_params()) entries.push_back({np.name, &np.param->value});
  const auto names = net.named_params();
  if (meta.optimizer) {
    if (!meta.optimizer->velocities.empty() && meta.optimizer->velocities.size() != names.size())
      throw CheckpointError(CheckpointErrc::BadFormat, "optimizer velocity count does not match parameters");
    for (std::size_t i = 0; i < meta.optimizer->velocities.size(); ++i)
      entries.push_back({"optimizer/velocity/" + names[i].name, &meta.optimizer->velocities[i]});
  }

  nlohmann::json dir = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : entries) {
    dir.push_back({{"name", e.name}, {"shape", e.tensor->shape()}, {"offset", offset}});
    offset += e.tensor->size() * sizeof(float);
  }
  nlohmann::json header = {{"format", "deepsrq-checkpoint"},
                           {"network", net.config()},
                           {"parameter_count", net.param_count()},
                           {"metadata", meta.extra},
                           {"tensors", dir},
                           {"payload_bytes", offset}};
  if (meta.optimizer)
    header["optimizer"] = {{"learning_rate", meta.optimizer->config.learning_rate},
                           {"decay", meta.optimizer->config.decay},
                           {"momentum", meta.optimizer->config.momentum},
                           {"step", meta.optimizer->step},
                           {"has_velocity", !meta.optimizer->velocities.empty()}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> bytes{'D', 'S', 'R', 'Q'};
  detail::append_u16(bytes, kCheckpointVersion);
  detail::append_u32(bytes, static_cast<std::uint32_t>(text.size()));
  bytes.insert(bytes.end(), text.begin(), text.end());
  for (const auto& e : entries) detail::append_floats(bytes, e.tensor->values());
  detail::append_u32(bytes, detail::crc32_of(bytes));
  return bytes;
}

inline LoadedCheckpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "DSRQ", 4) != 0)
    throw CheckpointError(CheckpointErrc::BadFormat, "missing DSRQ magic");
  if (bytes.size() < 6) throw CheckpointError(CheckpointErrc::ChecksumMismatch, "file truncated");
  const auto version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrc::VersionMismatch,
                          "checkpoint version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
  if (bytes.size() < 14) throw CheckpointError(CheckpointErrc::ChecksumMismatch, "file truncated");
  const std::size_t body = bytes.size() - 4;
  if (detail::read_u32(bytes, body) != detail::crc32_of(std::span(bytes.data(), body)))
    throw CheckpointError(CheckpointErrc::ChecksumMismatch, "CRC32 mismatch (truncated or corrupted file)");

  const std::uint32_t header_len = detail::read_u32(bytes, 6);
  const std::size_t payload_start = 10 + static_cast<std::size_t>(header_len);
  if (payload_start > body) throw CheckpointError(CheckpointErrc::BadFormat, "header length out of range");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 10, bytes.begin() + static_cast<std::ptrdiff_t>(payload_start));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrc::BadFormat, std::string("header JSON: ") + e.what());
  }

  try {
    TwoStreamNet<float> net(header.at("network").get<TwoStreamConfig>());
    auto read_tensor = [&](const nlohmann::json& entry, const Shape& expected) {
      const auto shape = entry.at("shape").get<Shape>();
      if (shape != expected)
        throw CheckpointError(CheckpointErrc::BadFormat, "tensor " + entry.at("name").get<std::string>() +
                                                              " has shape " + shape_string(shape));
      const std::size_t off = payload_start + entry.at("offset").get<std::size_t>();
      const std::size_t n = shape_size(shape);
      if (off + n * sizeof(float) > body) throw CheckpointError(CheckpointErrc::BadFormat, "tensor payload out of range");
      Tensor<float> t(shape);
      for (std::size_t i = 0; i < n; ++i) t[i] = std::bit_cast<float>(detail::read_u32(bytes, off + 4 * i));
      return t;
    };

    std::map<std::string, const nlohmann::json*> by_name;
    for (const auto& entry : header.at("tensors")) by_name[entry.at("name").get<std::string>()] = &entry;

    auto params = net.named_params();
    for (auto& np : params) {
      auto it = by_name.find(np.name);
      if (it == by_name.end()) throw CheckpointError(CheckpointErrc::BadFormat, "missing tensor " + np.name);
      np.param->value = read_tensor(*it->second, np.param->value.shape());
    }

    CheckpointMeta meta;
    meta.extra = header.value("metadata", nlohmann::json::object());
    if (header.contains("optimizer")) {
      const auto& o = header["optimizer"];
      OptimizerSnapshot snap;
      snap.config = {o.at("learning_rate").get<double>(), o.at("decay").get<double>(), o.at("momentum").get<double>()};
      snap.step = o.at("step").get<std::uint64_t>();
      if (o.value("has_velocity", false))
        for (auto& np : params) {
          auto it = by_name.find("optimizer/velocity/" + np.name);
          if (it == by_name.end()) throw CheckpointError(CheckpointErrc::BadFormat, "missing velocity for " + np.name);
          snap.velocities.push_back(read_tensor(*it->second, np.param->value.shape()));
        }
      meta.optimizer = std::move(snap);
    }
    return {std::move(net), std::move(meta), std::move(header)};
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrc::BadFormat, std::string("header: ") + e.what());
  } catch (const NnError& e) {
    throw CheckpointError(CheckpointErrc::BadFormat, std::string("network config: ") + e.what());
  }
}

/// Atomic write (temp file + rename).
inline void save_checkpoint(TwoStreamNet<float>& net, const CheckpointMeta& meta, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(net, meta);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointErrc::IoFailure, "cannot open " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.close();
    if (!out) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw CheckpointError(CheckpointErrc::IoFailure, "write failed: " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw CheckpointError(CheckpointErrc::IoFailure, "rename to " + path.string() + " failed");
  }
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrc::IoFailure, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace deepsrq

#endif  // DEEPSRQ_CHECKPOINT_HPP
