#ifndef MINUTIAE_NN_CHECKPOINT_HPP_
#define MINUTIAE_NN_CHECKPOINT_HPP_

#include "minutiae/nn/layers.hpp"
#include "minutiae/nn/optim.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace minutiae::nn {

/// Entry kinds beyond the persisted layer kinds.
inline constexpr std::uint8_t kMomentumEntry = 16;
inline constexpr std::uint8_t kCenterEntry = 17;

struct CheckpointEntry {
  std::uint8_t kind = 0;
  std::vector<std::array<int, 4>> shapes;
};

/// Versioned binary container:
///   magic "MNTCKPT\x1a", u32 version, u32-length-prefixed model tag and
///   key=value metadata text, u32 entry count, per entry {u8 kind,
///   u32 tensor count, 4 x u32 dims per tensor}, then every tensor as
///   little-endian float32 in manifest order.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string model;
  std::map<std::string, std::string> meta;
  std::vector<CheckpointEntry> manifest;
  std::vector<Tensor<float>> tensors;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b);
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Appends one manifest entry per persistable layer under `root`.
void capture_layers(Layer<float>& root, Checkpoint& ckpt);
/// Restores tensors captured by capture_layers starting at manifest entry
/// `first`; returns the index one past the last consumed entry.
size_t restore_layers(Layer<float>& root, const Checkpoint& ckpt, size_t first = 0);

// Metadata helpers: shortest round-trip formatting, strict parsing, and
// lookup that throws std::runtime_error naming the missing key.
std::string format_double(double v);
double parse_double(const std::string& s);
const std::string& meta_at(const Checkpoint& ckpt, const std::string& key);

void capture_optimizer(const OptimState<float>& state, Checkpoint& ckpt);
void restore_optimizer(const Checkpoint& ckpt, OptimState<float>& state);

}  // namespace minutiae::nn

#endif  // MINUTIAE_NN_CHECKPOINT_HPP_
