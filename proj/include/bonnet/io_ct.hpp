#pragma once

#include <cstdint>
#include <string>

#include "bonnet/volume.hpp"
#include "bonnet/voxgrid.hpp"

namespace bonnet {

// 64-bit FNV-1a over a byte range; the trailing checksum of the cache and
// checkpoint formats.
uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 14695981039346656037ull);

// Whole-file helpers shared by the binary formats.
std::vector<unsigned char> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const void* data, size_t len);

// ---------------------------------------------------------------------------
// RAWZ: raw little-endian payload + UTF-8 JSON sidecar manifest (path+".json")
// with keys shape, spacing_mm, kind. Payload layout follows VolumeMeta's
// linear rule (x fastest).
// ---------------------------------------------------------------------------

void write_rawz(const std::string& path, const HuVolume& volume);
void write_rawz(const std::string& path, const LabelVolume& volume);

VolumeMeta read_rawz_meta(const std::string& path);
HuVolume read_rawz_hu(const std::string& path);
LabelVolume read_rawz_labels(const std::string& path);

// RAWZ with kind=labels_u16; readable by read_rawz_labels.
void export_mask(const std::string& path, const LabelVolume& mask);

// ---------------------------------------------------------------------------
// NIfTI-1 ingestion (read-only): single-file .nii, optionally gzipped, magic
// "n+1\0", datatype 4 (i16) or 16 (f32), ndim 3, little-endian.
// HU = stored*scl_slope + scl_inter, slope 0 treated as 1.
// ---------------------------------------------------------------------------

HuVolume read_nifti1(const std::string& path);

// ---------------------------------------------------------------------------
// BNC1 sparse cache (little-endian):
//   "BNC1" | u32 version=1 | u8 has_labels | u64 N | u32 C
//   | coords  N x (i32 x, i32 y, i32 z)
//   | features N*C f32 row-major
//   | labels  N u16            (only when has_labels=1)
//   | u64 FNV-1a over all preceding bytes
// ---------------------------------------------------------------------------

void write_cache(const std::string& path, const SparseTensorF& st);
SparseTensorF read_cache(const std::string& path);

} // namespace bonnet
