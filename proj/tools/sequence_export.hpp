#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lpat/error.hpp"
#include "lpat/synthetic.hpp"

namespace lpat::tools {

/// Writes a 3×H×W frame (values around [-0.5, 0.5]) as an 8-bit RGB PNG.
template <typename T>
void write_png(const std::string& path, const Array<T>& frame) {
  const std::size_t h = frame.dim(1), w = frame.dim(2);
  std::vector<png_byte> pixels(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = (static_cast<double>(frame.at(c, y, x)) + 0.5) * 255.0;
        pixels[(y * w + x) * 3 + c] = static_cast<png_byte>(std::clamp(std::lround(v), 0L, 255L));
      }

  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw FormatError("cannot open " + path + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw FormatError("libpng failed writing " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_bytep> rows(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = pixels.data() + y * w * 3;
  png_set_rows(png, info, rows.data());
  png_write_png(png, info, PNG_TRANSFORM_IDENTITY, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline nlohmann::json gt_json(const std::vector<BoundingBox>& boxes) {
  auto out = nlohmann::json::array();
  for (std::size_t f = 0; f < boxes.size(); ++f)
    out.push_back({{"frame", f}, {"x1", boxes[f].x1}, {"y1", boxes[f].y1}, {"x2", boxes[f].x2}, {"y2", boxes[f].y2}});
  return out;
}

/// frame_0000.png ... plus gt.json in dir.
template <typename T>
void export_sequence(const SyntheticSequence<T>& seq, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t f = 0; f < seq.frames.size(); ++f) {
    char name[32];
    std::snprintf(name, sizeof name, "frame_%04zu.png", f);
    write_png((std::filesystem::path(dir) / name).string(), seq.frames[f]);
  }
  std::ofstream os(std::filesystem::path(dir) / "gt.json");
  if (!os) throw FormatError("cannot write gt.json in " + dir);
  os << gt_json(seq.gt).dump(2) << '\n';
}

}  // namespace lpat::tools
