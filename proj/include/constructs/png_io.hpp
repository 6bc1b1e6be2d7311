#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace constructs {

// 8-bit interleaved pixel buffer, row-major, channels innermost.
struct PngBuffer {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;
};

// Reads an 8-bit grayscale or RGB PNG. Palette images are expanded; anything
// else (16-bit, alpha) is rejected so datasets stay within the storage format.
PngBuffer read_png(const std::string& path);

// Writes with pinned encoder settings (compression level 6, no filtering) so
// identical pixels always produce identical bytes on disk.
void write_png(const std::string& path, const PngBuffer& img);

}  // namespace constructs
