#pragma once

#include <string>
#include <vector>

#include "fpro/model.hpp"

namespace fpro {

// Binary checkpoint, little-endian:
//   magic "FPRO" | u32 version | u64 len + config key=value block (UTF-8)
//   u32 tensor_count | records { u32 name_len, name, u8 dtype, u32 rank,
//   u64 dims[rank], raw data } | u32 CRC32 of everything after the version.
// Model parameters and buffers are stored by name; optimizer moments ride
// along under "opt." names.

struct CheckpointMeta {
    int64_t iteration = 0;
    uint64_t rng_counter = 0;
};

struct CheckpointHeader {
    ModelConfig config;
    uint64_t seed = 0;
    std::string precision;  // "f32" or "f64"
    CheckpointMeta meta;
};

template <typename T>
void save_checkpoint(const std::string& path, FproModel<T>& model, const CheckpointMeta& meta = {},
                     const NamedVectors<T>& optimizer_state = {});

// Parses only the header block (config, seed, precision, run counters).
CheckpointHeader read_checkpoint_header(const std::string& path);

template <typename T>
FproModel<T> load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr,
                             NamedVectors<T>* optimizer_state = nullptr);

}  // namespace fpro
