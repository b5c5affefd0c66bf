#include "musekit/image.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace musekit {

SceneImage SceneImage::filled(int w, int h, uint8_t r, uint8_t g, uint8_t b) {
    SceneImage img;
    img.width = w;
    img.height = h;
    img.pixels.resize((size_t)w * h * 3);
    for (size_t i = 0; i < (size_t)w * h; ++i) {
        img.pixels[3 * i + 0] = r;
        img.pixels[3 * i + 1] = g;
        img.pixels[3 * i + 2] = b;
    }
    return img;
}

PixelMask PixelMask::empty(int w, int h) {
    PixelMask m;
    m.width = w;
    m.height = h;
    m.bits.assign((size_t)w * h, 0);
    return m;
}

int64_t PixelMask::count() const {
    int64_t n = 0;
    for (uint8_t b : bits) n += b ? 1 : 0;
    return n;
}

void PixelMask::set_rect(int x0, int y0, int w, int h, bool value) {
    for (int y = y0; y < y0 + h; ++y) {
        for (int x = x0; x < x0 + w; ++x) {
            if (x >= 0 && x < width && y >= 0 && y < height) at(x, y) = value ? 1 : 0;
        }
    }
}

namespace {

struct ByteReader {
    std::string buf;
    size_t pos = 0;

    [[noreturn]] void bad(const std::string & msg) const {
        fail(error_kind::format, msg + " at byte " + std::to_string(pos));
    }
    int peek() const { return pos < buf.size() ? (unsigned char)buf[pos] : -1; }
    int take() { return pos < buf.size() ? (unsigned char)buf[pos++] : -1; }
    // netpbm token scan: whitespace separates tokens, '#' comments run to newline
    void skip_space_and_comments() {
        for (;;) {
            int c = peek();
            if (c == '#') {
                while (c != -1 && c != '\n') c = take();
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                take();
            } else {
                return;
            }
        }
    }
    int read_uint(const char * what) {
        skip_space_and_comments();
        if (peek() < '0' || peek() > '9') bad(std::string("expected unsigned integer for ") + what);
        long v = 0;
        while (peek() >= '0' && peek() <= '9') {
            v = v * 10 + (take() - '0');
            if (v > 1 << 30) bad(std::string("oversized value for ") + what);
        }
        return (int)v;
    }
};

ByteReader slurp(const std::string & path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), error_kind::io, "cannot open: " + path);
    ByteReader r;
    r.buf.assign((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return r;
}

} // namespace

void write_ppm(const SceneImage & img, const std::string & path) {
    require(img.width > 0 && img.height > 0 &&
                img.pixels.size() == (size_t)img.width * img.height * 3,
            error_kind::shape, "write_ppm: malformed image");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), error_kind::io, "cannot open for write: " + path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char *>(img.pixels.data()), (std::streamsize)img.pixels.size());
    os.flush();
    require(os.good(), error_kind::io, "write failed: " + path);
}

SceneImage read_ppm(const std::string & path) {
    ByteReader r = slurp(path);
    if (r.take() != 'P' || r.take() != '6') r.bad("not a P6 ppm (bad magic)");
    const int w = r.read_uint("width");
    const int h = r.read_uint("height");
    const int maxval = r.read_uint("maxval");
    if (maxval != 255) r.bad("unsupported maxval " + std::to_string(maxval));
    const int sep = r.take();
    if (sep != '\n' && sep != ' ' && sep != '\t' && sep != '\r') r.bad("missing whitespace after maxval");
    const size_t need = (size_t)w * h * 3;
    if (r.buf.size() - r.pos < need) r.bad("truncated pixel payload");
    SceneImage img;
    img.width = w;
    img.height = h;
    img.pixels.assign(r.buf.begin() + (long)r.pos, r.buf.begin() + (long)(r.pos + need));
    return img;
}

void write_pbm(const PixelMask & mask, const std::string & path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    require(os.good(), error_kind::io, "cannot open for write: " + path);
    os << "P4\n" << mask.width << " " << mask.height << "\n";
    const int rowbytes = (mask.width + 7) / 8;
    std::vector<uint8_t> row((size_t)rowbytes);
    for (int y = 0; y < mask.height; ++y) {
        std::fill(row.begin(), row.end(), 0);
        for (int x = 0; x < mask.width; ++x) {
            if (mask.at(x, y)) row[(size_t)x / 8] |= (uint8_t)(0x80 >> (x % 8));
        }
        os.write(reinterpret_cast<const char *>(row.data()), rowbytes);
    }
    os.flush();
    require(os.good(), error_kind::io, "write failed: " + path);
}

PixelMask read_pbm(const std::string & path) {
    ByteReader r = slurp(path);
    if (r.take() != 'P') r.bad("not a pbm (bad magic)");
    const int variant = r.take();
    if (variant != '1' && variant != '4') r.bad("unsupported pbm variant");
    const int w = r.read_uint("width");
    const int h = r.read_uint("height");
    PixelMask m = PixelMask::empty(w, h);
    if (variant == '1') {
        for (int i = 0; i < w * h; ++i) {
            r.skip_space_and_comments();
            const int c = r.take();
            if (c != '0' && c != '1') r.bad("expected 0 or 1 in P1 payload");
            m.bits[(size_t)i] = (uint8_t)(c == '1');
        }
    } else {
        const int sep = r.take();
        if (sep != '\n' && sep != ' ' && sep != '\t' && sep != '\r') r.bad("missing whitespace after header");
        const int rowbytes = (w + 7) / 8;
        if (r.buf.size() - r.pos < (size_t)rowbytes * h) r.bad("truncated pbm payload");
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const uint8_t byte = (uint8_t)r.buf[r.pos + (size_t)y * rowbytes + x / 8];
                m.at(x, y) = (byte >> (7 - x % 8)) & 1;
            }
        }
    }
    return m;
}

Tensor image_to_tensor(const SceneImage & img) {
    Tensor t = Tensor::zeros({3, img.height, img.width});
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const uint8_t * p = img.at(x, y);
            for (int c = 0; c < 3; ++c) t.at3(c, y, x) = (float)p[c] / 255.0f;
        }
    }
    return t;
}

SceneImage tensor_to_image(const Tensor & t) {
    require(t.rank() == 3 && t.dim(0) == 3, error_kind::shape, "tensor_to_image: want [3,H,W]");
    SceneImage img = SceneImage::filled(t.dim(2), t.dim(1), 0, 0, 0);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            uint8_t * p = img.at(x, y);
            for (int c = 0; c < 3; ++c) {
                const double v = std::min(1.0, std::max(0.0, (double)t.at3(c, y, x)));
                p[c] = (uint8_t)std::lround(v * 255.0);
            }
        }
    }
    return img;
}

SceneImage decimate2x(const SceneImage & img) {
    require(img.width % 2 == 0 && img.height % 2 == 0, error_kind::shape,
            "decimate2x: dimensions must be even");
    SceneImage out = SceneImage::filled(img.width / 2, img.height / 2, 0, 0, 0);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            for (int c = 0; c < 3; ++c) {
                const int s = img.at(2 * x, 2 * y)[c] + img.at(2 * x + 1, 2 * y)[c] +
                              img.at(2 * x, 2 * y + 1)[c] + img.at(2 * x + 1, 2 * y + 1)[c];
                out.at(x, y)[c] = (uint8_t)((s + 2) / 4);
            }
        }
    }
    return out;
}

double psnr(const SceneImage & a, const SceneImage & b) {
    require(a.width == b.width && a.height == b.height, error_kind::shape, "psnr: size mismatch");
    double mse = 0;
    for (size_t i = 0; i < a.pixels.size(); ++i) {
        const double d = (double)a.pixels[i] - (double)b.pixels[i];
        mse += d * d;
    }
    mse /= (double)a.pixels.size();
    if (mse == 0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

} // namespace musekit
