#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "stg/error.hpp"
#include "stg/tensor.hpp"

namespace stg {

// Whole-file atomic write: temp file in the same directory, then rename.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path dir = path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw RuntimeFault("atomic_write_file: cannot open " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw RuntimeFault("atomic_write_file: short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw RuntimeFault("atomic_write_file: rename to " + path.string() + " failed: " +
                       ec.message());
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFault("read_file: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void append_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void append_f64_le(std::string& out, double d) {
  std::uint64_t v;
  static_assert(sizeof(v) == sizeof(d));
  std::memcpy(&v, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const std::string& bytes;
  std::size_t pos = 0;
  std::string context;

  bool exhausted() const { return pos >= bytes.size(); }
  std::size_t remaining() const { return bytes.size() - pos; }

  void require(std::size_t n, const char* what) {
    if (remaining() < n)
      throw ValidationError(context + ": truncated while reading " + what);
  }
  std::uint32_t u32_le(const char* what) {
    require(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  double f64_le(const char* what) {
    require(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 8;
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
};

// One frame to binary PGM (P5, maxval 255). Pixel mapping: clamp((v+1)/2, 0, 1)
// scaled to 255 and rounded half-up, so v=0 lands on 128 exactly.
inline std::string pgm_bytes(const double* frame, std::size_t h, std::size_t w) {
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    const double v = frame[p];
    if (!std::isfinite(v)) throw RuntimeFault("pgm_bytes: non-finite pixel");
    double u = (v + 1.0) / 2.0;
    u = u < 0.0 ? 0.0 : (u > 1.0 ? 1.0 : u);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::floor(u * 255.0 + 0.5))));
  }
  return out;
}

// video [f,1,h,w] -> dir/frame_0000.pgm ...
inline void export_frames(const Tensor& video, const std::filesystem::path& dir) {
  if (video.shape.size() != 4 || video.shape[1] != 1)
    throw ValidationError("export_frames: expected video [f,1,h,w], got " +
                          shape_str(video.shape));
  check_finite(video, "export_frames");
  const std::size_t f = video.shape[0], h = video.shape[2], w = video.shape[3];
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < f; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04zu.pgm", i);
    atomic_write_file(dir / name, pgm_bytes(video.data.data() + i * h * w, h, w));
  }
}

}  // namespace stg
