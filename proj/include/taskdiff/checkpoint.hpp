#pragma once

#include <map>
#include <string>
#include <vector>

#include "taskdiff/denoiser.hpp"
#include "taskdiff/schedule.hpp"
#include "taskdiff/taskspace.hpp"

namespace td {

// Flat named-tensor container behind every artifact on disk.
using NamedTensors = std::map<std::string, Tensor>;

// TDF1 file: magic "TDF1", version u32, entry count u32, then per entry the
// name (u32 length + UTF-8), rank u32, dims u64 each, raw f32 payload, all
// little-endian, closed by a CRC32 of everything after the version word.
// Writes go to a temp file first and rename into place.
void save_checkpoint(const std::string& path, const NamedTensors& entries);
NamedTensors load_checkpoint(const std::string& path);

// Everything a command needs to resume work with a trained model. The
// predictor and embedder sections are optional and empty when untrained.
struct ModelBundle {
  DenoiserConfig cfg;
  DenoiserParams params;
  TaskEmbeddingTable table;
  DiffusionSchedule schedule;
  TaskPredictor predictor;
  NamedTensors embedder;
};

// Sections: denoiser/*, table/*, registry/names, config/*, schedule/*,
// predictor/*, embedder/*. Strings and 64-bit values ride as byte tensors so
// every entry stays raw f32.
NamedTensors pack_model(const ModelBundle& m);
// Inverse of pack_model. Rejects checkpoints whose task registry disagrees
// with this build's registry, since table rows are indexed by it.
ModelBundle unpack_model(const NamedTensors& entries);

void save_model(const std::string& path, const ModelBundle& m);
ModelBundle load_model(const std::string& path);

// Byte-exact encodings used for the non-f32 oddments inside checkpoints.
Tensor bytes_to_tensor(const std::string& bytes);
std::string tensor_to_bytes(const Tensor& t);
Tensor u64_to_tensor(uint64_t value);
uint64_t tensor_to_u64(const Tensor& t);
Tensor f64_to_tensor(double value);
double tensor_to_f64(const Tensor& t);

}  // namespace td
