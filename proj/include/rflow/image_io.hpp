#pragma once

#include <string>
#include <vector>

#include "rflow/scenes.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

// Binary PPM (P6) from a [3,H,W] tensor; values clamped to [0,1].
void write_ppm(const std::string& path, const Tensor& image);

// Binary PGM (P5) from a [1,H,W] or [H,W] tensor; values clamped to [0,1].
void write_pgm(const std::string& path, const Tensor& image);

// Flat f64 little-endian dump of named tensors plus a JSON sidecar giving
// per-tensor offsets (in doubles) and shapes, the scene description, and the
// prompt word ids.
void export_sample(const Sample& sample, const std::string& path_prefix);

// Reads a tensor back from an exported .bin given its sidecar entry.
Tensor read_tensor_slice(const std::string& bin_path, int64_t offset, const Shape& shape);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace rflow
