#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace cosam {

/// Minimal dependency-free PNG writer (stored deflate blocks). Pixels are
/// 8-bit RGB, row-major, size 3*h*w.
void write_png_rgb(const std::filesystem::path& path, const std::vector<uint8_t>& rgb, int w, int h);

/// Simple drawing canvas for the plot command.
struct Canvas {
    int w, h;
    std::vector<uint8_t> rgb;

    Canvas(int width, int height, uint8_t r = 255, uint8_t g = 255, uint8_t b = 255);
    void set(int x, int y, uint8_t r, uint8_t g, uint8_t b);
    void line(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b);
    void rect(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b);
    void save(const std::filesystem::path& path) const;
};

}  // namespace cosam
