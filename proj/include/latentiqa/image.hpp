#pragma once

// RGB images in [0,1], binary/ASCII PNM I/O and the pinned bilinear
// resampler used for preprocessing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#ifdef LIQA_WITH_OPENCV
#include <opencv2/imgcodecs.hpp>
#endif

#include "error.hpp"

namespace liqa {

/// Interleaved RGB, row-major, channel order R,G,B, values in [0,1].
struct Image {
    int width = 0;
    int height = 0;
    std::vector<float> data;

    Image() = default;
    Image(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, 0.0f) {}

    float& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    float at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    friend bool operator==(const Image&, const Image&) = default;
};

namespace pnm_detail {

inline std::string next_token(std::istream& in) {
    std::string tok;
    char ch = 0;
    while (in.get(ch)) {
        if (ch == '#') {
            std::string skip;
            std::getline(in, skip);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!tok.empty()) break;
            continue;
        }
        tok += ch;
    }
    return tok;
}

inline int to_int(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        int v = std::stoi(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        fail(ErrorKind::Decode, "bad PNM " + what + " '" + s + "'");
    }
}

} // namespace pnm_detail

/// Reads P2/P3/P5/P6. Grey images are replicated to three channels.
inline Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
    const std::string magic = pnm_detail::next_token(in);
    require(magic == "P2" || magic == "P3" || magic == "P5" || magic == "P6", ErrorKind::Decode,
            path.string() + " is not a PNM image");
    const int w = pnm_detail::to_int(pnm_detail::next_token(in), "width");
    const int h = pnm_detail::to_int(pnm_detail::next_token(in), "height");
    const int maxval = pnm_detail::to_int(pnm_detail::next_token(in), "maxval");
    require(w > 0 && h > 0 && maxval > 0 && maxval < 65536, ErrorKind::Decode, "bad PNM header in " + path.string());
    const bool colour = magic == "P3" || magic == "P6";
    const bool binary = magic == "P5" || magic == "P6";
    const int samples = colour ? 3 : 1;
    const std::size_t count = static_cast<std::size_t>(w) * h * samples;
    std::vector<int> raw(count);
    if (binary) {
        const int bytes = maxval < 256 ? 1 : 2;
        std::vector<unsigned char> buf(count * bytes);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        require(static_cast<std::size_t>(in.gcount()) == buf.size(), ErrorKind::Decode, "truncated PNM " + path.string());
        for (std::size_t i = 0; i < count; ++i)
            raw[i] = bytes == 1 ? buf[i] : (buf[2 * i] << 8) | buf[2 * i + 1];
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            const std::string tok = pnm_detail::next_token(in);
            require(!tok.empty(), ErrorKind::Decode, "truncated PNM " + path.string());
            raw[i] = pnm_detail::to_int(tok, "sample");
        }
    }
    Image img(w, h);
    for (std::size_t p = 0; p < static_cast<std::size_t>(w) * h; ++p)
        for (int c = 0; c < 3; ++c)
            img.data[p * 3 + c] = static_cast<float>(raw[p * samples + (colour ? c : 0)]) / static_cast<float>(maxval);
    return img;
}

/// Writes 8-bit binary P6, rounding to the nearest level.
inline void write_ppm(const std::filesystem::path& path, const Image& img) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    std::vector<unsigned char> buf(img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i)
        buf[i] = static_cast<unsigned char>(std::lround(std::clamp(img.data[i], 0.0f, 1.0f) * 255.0f));
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    require(static_cast<bool>(out), ErrorKind::Io, "short write to " + path.string());
}

inline Image read_image(const std::filesystem::path& path) {
    require(std::filesystem::exists(path), ErrorKind::Io, "image not found: " + path.string());
    std::string ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (ext == ".ppm" || ext == ".pgm" || ext == ".pnm") return read_pnm(path);
#ifdef LIQA_WITH_OPENCV
    cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
    require(!bgr.empty(), ErrorKind::Decode, "cannot decode " + path.string());
    Image img(bgr.cols, bgr.rows);
    for (int y = 0; y < bgr.rows; ++y)
        for (int x = 0; x < bgr.cols; ++x) {
            const auto& px = bgr.at<cv::Vec3b>(y, x);
            img.at(y, x, 0) = px[2] / 255.0f;
            img.at(y, x, 1) = px[1] / 255.0f;
            img.at(y, x, 2) = px[0] / 255.0f;
        }
    return img;
#else
    return read_pnm(path);
#endif
}

/// Bilinear resampling with pixel-centre alignment: output pixel (x, y)
/// samples the source at ((x + 0.5) * sw / dw - 0.5, ...), coordinates are
/// clamped to the edge pixels. Equal sizes reproduce the input exactly.
inline Image resize_bilinear(const Image& src, int dst_w, int dst_h) {
    require(dst_w > 0 && dst_h > 0 && src.width > 0 && src.height > 0, ErrorKind::InvalidConfig, "empty resize");
    if (dst_w == src.width && dst_h == src.height) return src;
    Image dst(dst_w, dst_h);
    const double sx = static_cast<double>(src.width) / dst_w;
    const double sy = static_cast<double>(src.height) / dst_h;
    for (int y = 0; y < dst_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.height - 1));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < dst_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.width - 1));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const double top = (1.0 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c);
                const double bot = (1.0 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c);
                dst.at(y, x, c) = static_cast<float>((1.0 - wy) * top + wy * bot);
            }
        }
    }
    return dst;
}

/// Square resize to the model resolution (aspect ratio is not preserved).
inline Image preprocess(const Image& img, int target_resolution) {
    require(target_resolution > 0, ErrorKind::InvalidConfig, "target resolution must be positive");
    return resize_bilinear(img, target_resolution, target_resolution);
}

inline Image preprocess(const std::filesystem::path& path, int target_resolution) {
    return preprocess(read_image(path), target_resolution);
}

} // namespace liqa
