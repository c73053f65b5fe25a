// Tractogram file I/O. Binary format "TRGM" (little-endian) round-trips
// bit-exactly; the text format is line oriented and human diffable.
// Keypoint sets are exported as CSV with columns k,r,a,s.

#pragma once

#include <string>

#include "streg/tractogram.hpp"

namespace streg {

enum class TractogramFormat { Binary, Text };

// Binary layout: magic "TRGM", u32 version=1, u32 N, u32 P (0 if variable),
// then per streamline: u32 point count, u32 bundle label (0xFFFFFFFF =
// unlabeled), point-count x 3 float32 (r,a,s in mm).
//
// Text layout: header "TRGM v1 N=<n>", then one streamline per line:
// "label;r,a,s r,a,s ...".

Tractogram load_tractogram(const std::string& path, TractogramFormat format);
void save_tractogram(const Tractogram& t, const std::string& path, TractogramFormat format);

/// Guess the format from the leading bytes of the file.
TractogramFormat detect_tractogram_format(const std::string& path);
Tractogram load_tractogram_auto(const std::string& path);

} // namespace streg
