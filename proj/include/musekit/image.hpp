#pragma once

#include "musekit/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace musekit {

// 8-bit RGB raster, row-major, origin top-left.
struct SceneImage {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels;    // 3 bytes per pixel

    static SceneImage filled(int w, int h, uint8_t r, uint8_t g, uint8_t b);
    uint8_t * at(int x, int y) { return pixels.data() + 3 * ((size_t)y * width + x); }
    const uint8_t * at(int x, int y) const { return pixels.data() + 3 * ((size_t)y * width + x); }
    bool same_pixels(const SceneImage & o) const {
        return width == o.width && height == o.height && pixels == o.pixels;
    }
};

// boolean mask raster (true = selected)
struct PixelMask {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> bits;    // one byte per pixel, 0/1

    static PixelMask empty(int w, int h);
    uint8_t & at(int x, int y) { return bits[(size_t)y * width + x]; }
    uint8_t at(int x, int y) const { return bits[(size_t)y * width + x]; }
    int64_t count() const;
    void set_rect(int x0, int y0, int w, int h, bool value = true);
};

// binary PPM; header is exactly "P6\n<w> <h>\n255\n"
void write_ppm(const SceneImage & img, const std::string & path);
SceneImage read_ppm(const std::string & path);

// masks as PBM: writes P4 (packed), reads P1 or P4; 1 bits select
void write_pbm(const PixelMask & mask, const std::string & path);
PixelMask read_pbm(const std::string & path);

// [3,H,W] float tensor in [0,1] <-> 8-bit image (round-to-nearest on write)
Tensor image_to_tensor(const SceneImage & img);
SceneImage tensor_to_image(const Tensor & t);

// 2x2 box-filter downsample (dimensions must be even)
SceneImage decimate2x(const SceneImage & img);

// peak signal-to-noise ratio over 8-bit values; identical images give +inf
double psnr(const SceneImage & a, const SceneImage & b);

} // namespace musekit
