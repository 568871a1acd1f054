#pragma once

#include "flowcast/dataflow.hpp"
#include "flowcast/models.hpp"

#include <string>

namespace flowcast {

/// A trained model bundled with everything needed to reuse it: the
/// normalization fitted on its training range and the split ratios that
/// produced that range.
struct CheckpointData {
    Model model;
    NormalizationParams norm;
    SplitRatios ratios;
};

/// Binary checkpoint layout:
///   bytes 0-7   magic "FLOWCKPT"
///   bytes 8-11  format version (u32, little-endian)
///   bytes 12-19 header length (u64, little-endian)
///   ...         JSON header (model config, normalization, ratios,
///               parameter manifest with name/shape/element offset)
///   ...         parameter payload, float64 little-endian, manifest order
///   last 8      FNV-1a checksum (u64) over header bytes || payload bytes
///
/// Saving the result of a load reproduces the original file byte for byte.
void save_checkpoint(const Model& model, const NormalizationParams& norm,
                     const SplitRatios& ratios, const std::string& path);

/// Validates magic, version, structural sizes, and checksum before any model
/// is constructed; corruption anywhere surfaces as DataError.
CheckpointData load_checkpoint(const std::string& path);

} // namespace flowcast
