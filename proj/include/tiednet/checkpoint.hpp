#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "tiednet/model.hpp"
#include "tiednet/optim.hpp"

// Binary checkpoint, little-endian:
//   "PECK" | u32 version (1) | u64 record count | u32 config length | config
//   then per record: u32 name length | name | u8 dtype (0 f32, 1 f64) |
//   u8 ndim | u64 dims[ndim] | raw row-major data.
// Model parameters are stored under their own names, once per Parameter, so
// a tied weight has one record. Optimizer slots are stored as
// "optim/<param>.<slot>" and the scalar train state as one f64 record
// "train/state".

namespace tiednet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::unique_ptr<Model> model;
  std::optional<TrainState> state;
};

struct CheckpointRecord {
  std::string name;
  Tensor value;
};

void save_checkpoint(const Model& model, const TrainState* state,
                     const std::string& path);
std::vector<std::uint8_t> encode_checkpoint(const Model& model,
                                            const TrainState* state);

// Rebuilds the model from the stored config and restores every record.
Checkpoint load_checkpoint(const std::string& path);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

// Restores into an existing model; ShapeError when the stored config or any
// record disagrees with it. Nothing is modified unless the whole file is valid.
std::optional<TrainState> load_into(Model& model, const std::string& path);

// Low-level view of a file: config JSON and records in file order.
struct RawCheckpoint {
  std::uint32_t version = 0;
  std::string config_json;
  std::vector<CheckpointRecord> records;
};
RawCheckpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> read_file(const std::string& path);

}  // namespace tiednet
