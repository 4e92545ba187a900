#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "simmc/errors.hpp"

namespace simmc {

// Interleaved-RGB raster with channel values in [0,1]. Pixel (y,x,c) lives
// at (y*width + x)*3 + c.
struct RasterImage {
    int height = 0;
    int width = 0;
    std::vector<double> pix;

    RasterImage() = default;
    RasterImage(int h, int w) : height(h), width(w), pix(static_cast<size_t>(h) * w * 3, 0.0) {
        if (h <= 0 || w <= 0) throw ShapeError("raster dimensions must be positive");
    }

    double& at(int y, int x, int c) { return pix[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const {
        return pix[(static_cast<size_t>(y) * width + x) * 3 + c];
    }

    void set_rgb(int y, int x, double r, double g, double b) {
        at(y, x, 0) = r;
        at(y, x, 1) = g;
        at(y, x, 2) = b;
    }
};

// Nearest-neighbor resample. Integer upscales duplicate source pixels
// exactly, so an NxN -> 2Nx2N resize is lossless per-pixel.
inline RasterImage nearest_resize(const RasterImage& src, int nh, int nw) {
    if (nh <= 0 || nw <= 0) throw ShapeError("resize target must be positive");
    RasterImage dst(nh, nw);
    for (int y = 0; y < nh; ++y) {
        int sy = static_cast<int>(static_cast<int64_t>(y) * src.height / nh);
        for (int x = 0; x < nw; ++x) {
            int sx = static_cast<int>(static_cast<int64_t>(x) * src.width / nw);
            for (int c = 0; c < 3; ++c) dst.at(y, x, c) = src.at(sy, sx, c);
        }
    }
    return dst;
}

// Crop [y0, y0+h) x [x0, x0+w); must lie inside the source.
inline RasterImage crop(const RasterImage& src, int y0, int x0, int h, int w) {
    if (y0 < 0 || x0 < 0 || y0 + h > src.height || x0 + w > src.width)
        throw ShapeError("crop outside image bounds");
    RasterImage dst(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) dst.at(y, x, c) = src.at(y0 + y, x0 + x, c);
    return dst;
}

}  // namespace simmc
