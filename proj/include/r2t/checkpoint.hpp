#pragma once

#include <memory>
#include <string>

#include "r2t/config.hpp"
#include "r2t/model.hpp"

// Binary layout: magic line, u64 header length, JSON header (model config,
// train config, vocabulary text and hash, parameter names and shapes),
// u64 value count, raw little-endian doubles, u64 FNV-1a of all preceding bytes.
namespace r2t {

std::string checkpoint_bytes(Model& model, const TrainConfig& train);
void save_checkpoint(Model& model, const TrainConfig& train, const std::string& path);

struct LoadedCheckpoint {
  std::unique_ptr<Model> model;
  TrainConfig train;
};

// IntegrityError on a bad magic, checksum, truncation or a vocabulary whose
// hash differs from the recorded one.
LoadedCheckpoint checkpoint_from_bytes(std::string_view bytes);
LoadedCheckpoint load_checkpoint(const std::string& path);

// Loads into an existing model. Refuses (ConfigError) when the stored model
// config differs, naming the fields, or when the vocabulary hashes differ,
// quoting both.
void load_checkpoint_into(Model& model, const std::string& path);

}  // namespace r2t
