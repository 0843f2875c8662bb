#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "bdlab/common.hpp"

namespace bdlab {

/// H x W x C field of unit-interval pixels, row-major with channels innermost.
class ImageGrid {
  public:
    ImageGrid() = default;

    ImageGrid(int height, int width, int channels, double fill = 0.0)
        : h_(height), w_(width), c_(channels) {
        if (height <= 0 || width <= 0 || channels <= 0) throw Error("image dimensions must be positive");
        px_.assign(static_cast<std::size_t>(height) * width * channels, clamp01(fill));
    }

    int height() const { return h_; }
    int width() const { return w_; }
    int channels() const { return c_; }
    std::size_t size() const { return px_.size(); }

    double at(int y, int x, int ch) const { return px_[index(y, x, ch)]; }
    void set(int y, int x, int ch, double v) { px_[index(y, x, ch)] = clamp01(v); }

    const std::vector<double> &pixels() const { return px_; }

    bool same_shape(const ImageGrid &o) const { return h_ == o.h_ && w_ == o.w_ && c_ == o.c_; }

    friend bool operator==(const ImageGrid &, const ImageGrid &) = default;

    static double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

  private:
    std::size_t index(int y, int x, int ch) const {
        return (static_cast<std::size_t>(y) * w_ + x) * c_ + ch;
    }

    int h_ = 0, w_ = 0, c_ = 0;
    std::vector<double> px_;
};

/// Pixelwise alpha * a + (1 - alpha) * b, clamped to [0,1].
inline ImageGrid blend(const ImageGrid &a, const ImageGrid &b, double alpha) {
    if (!a.same_shape(b)) throw Error("blend: shape mismatch");
    ImageGrid out(a.height(), a.width(), a.channels());
    for (int y = 0; y < a.height(); ++y)
        for (int x = 0; x < a.width(); ++x)
            for (int c = 0; c < a.channels(); ++c)
                out.set(y, x, c, alpha * a.at(y, x, c) + (1.0 - alpha) * b.at(y, x, c));
    return out;
}

inline double max_abs_diff(const ImageGrid &a, const ImageGrid &b) {
    if (!a.same_shape(b)) throw Error("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.pixels()[i] - b.pixels()[i]));
    return m;
}

// Binary PPM (P6), 8-bit. Round trip is exact to within 1/255 per channel.

inline void write_ppm(const std::string &path, const ImageGrid &img) {
    if (img.channels() != 3) throw Error("PPM export requires 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write image: " + path);
    out << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
    for (double v : img.pixels()) {
        const auto q = static_cast<unsigned char>(std::lround(ImageGrid::clamp01(v) * 255.0));
        out.put(static_cast<char>(q));
    }
}

inline ImageGrid read_ppm(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open image: " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw Error("not a binary PPM: " + path);
    auto next_int = [&] {
        in >> std::ws;
        while (in.peek() == '#') {
            std::string comment;
            std::getline(in, comment);
            in >> std::ws;
        }
        int v = 0;
        in >> v;
        return v;
    };
    const int w = next_int(), h = next_int(), maxval = next_int();
    if (w <= 0 || h <= 0 || maxval != 255) throw Error("unsupported PPM header: " + path);
    in.get();
    ImageGrid img(h, w, 3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                const int byte = in.get();
                if (byte == EOF) throw Error("truncated PPM: " + path);
                img.set(y, x, c, byte / 255.0);
            }
    return img;
}

} // namespace bdlab
