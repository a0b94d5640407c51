#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "g2aps/loss/oim.hpp"
#include "g2aps/nn/optim.hpp"
#include "json.hpp"

namespace g2aps::train {

inline constexpr char kCheckpointMagic[8] = {'G', '2', 'A', 'P', 'S', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> values;
};

/// Everything needed to resume training or evaluate: metadata (config
/// snapshot, completed epochs, metrics history), parameters, both OIM
/// states and the optimizer's momentum buffers.
struct Checkpoint {
  nlohmann::json meta;
  std::vector<NamedArray> parameters;
  loss::OimState oim_student;
  loss::OimState oim_teacher;
  std::vector<std::vector<float>> momentum;
};

/// Binary layout: magic, version, length-prefixed JSON metadata, tensors,
/// OIM states, momentum buffers, then a 64-bit FNV-1a checksum of all
/// preceding bytes.
std::string serialize_checkpoint(const Checkpoint& c);
/// Throws IntegrityError on a bad magic, version, checksum or truncation.
Checkpoint deserialize_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::uint64_t fnv1a64(const void* data, std::size_t size);

/// Snapshot of parameter values.
std::vector<NamedArray> capture_parameters(const nn::ParameterList& params);
/// Copies values into matching parameters; throws IntegrityError when a
/// name is missing or a shape differs.
void restore_parameters(const std::vector<NamedArray>& saved, const nn::ParameterList& params);

}  // namespace g2aps::train
