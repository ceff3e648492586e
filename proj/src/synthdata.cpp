#include "selfctl/synthdata.hpp"

#include "selfctl/image_io.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace selfctl::synth {

namespace {

std::array<double, 3> rgb_of(const std::string& color) {
    if (color == "red") return {1.0, 0.0, 0.0};
    if (color == "green") return {0.0, 1.0, 0.0};
    if (color == "blue") return {0.0, 0.0, 1.0};
    throw std::invalid_argument("unknown colour '" + color + "'");
}

bool known_shape(const std::string& shape) {
    return std::find(kShapes.begin(), kShapes.end(), shape) != kShapes.end();
}

constexpr double kLitThreshold = 0.2;
constexpr int kMinProbeSize = 4;
constexpr int kMaxProbeSize = 9;

} // namespace

double luminance(const Image& image, std::size_t y, std::size_t x) {
    double s = 0.0;
    for (std::size_t c = 0; c < image.channels; ++c) s += image.at(y, x, c);
    return s / static_cast<double>(image.channels);
}

Image silhouette(const std::string& shape, int size, int top, int left) {
    if (!known_shape(shape)) throw std::invalid_argument("unknown shape '" + shape + "'");
    Image img(kCanvas, kCanvas, 1);
    const double r = size / 2.0;
    const double cy = top + r, cx = left + r;
    const int bar = std::max(2, static_cast<int>(std::lround(size / 3.0)));
    const int bar_lo = (size - bar) / 2;
    for (int y = top; y < top + size; ++y)
        for (int x = left; x < left + size; ++x) {
            if (y < 0 || x < 0 || y >= static_cast<int>(kCanvas) || x >= static_cast<int>(kCanvas)) continue;
            bool on = false;
            if (shape == "square") {
                on = true;
            } else if (shape == "circle") {
                const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
                on = dy * dy + dx * dx <= r * r;
            } else {
                const int iy = y - top, ix = x - left;
                on = (iy >= bar_lo && iy < bar_lo + bar) || (ix >= bar_lo && ix < bar_lo + bar);
            }
            if (on) img.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x), 0) = 1.0;
        }
    return img;
}

Sample make_sample(const std::string& color, const std::string& shape, const Jitter& jitter, Rng& rng) {
    const auto rgb = rgb_of(color);
    if (!known_shape(shape)) throw std::invalid_argument("unknown shape '" + shape + "'");
    if (jitter.min_size < 1 || jitter.max_size < jitter.min_size || jitter.max_size > static_cast<int>(kCanvas) ||
        jitter.max_offset < 0)
        throw std::invalid_argument("invalid jitter bounds");

    std::uniform_int_distribution<int> size_dist(jitter.min_size, jitter.max_size);
    const int size = size_dist(rng);
    std::uniform_int_distribution<int> offset_dist(-jitter.max_offset, jitter.max_offset);
    const int base = (static_cast<int>(kCanvas) - size) / 2;
    const int hi = static_cast<int>(kCanvas) - size;
    const int top = std::clamp(base + offset_dist(rng), 0, hi);
    const int left = std::clamp(base + offset_dist(rng), 0, hi);

    Sample s;
    s.color = color;
    s.shape = shape;
    s.caption = color + " " + shape;
    s.condition = silhouette(shape, size, top, left);
    s.target = Image(kCanvas, kCanvas, 3);
    for (std::size_t y = 0; y < kCanvas; ++y)
        for (std::size_t x = 0; x < kCanvas; ++x)
            if (s.condition.at(y, x, 0) > 0.5)
                for (std::size_t c = 0; c < 3; ++c) s.target.at(y, x, c) = rgb[c];
    return s;
}

std::vector<Sample> make_dataset(std::size_t count, const Jitter& jitter, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t cls = i % 9;
        out.push_back(make_sample(kColors[cls / 3], kShapes[cls % 3], jitter, rng));
    }
    return out;
}

std::vector<std::string> all_captions() {
    std::vector<std::string> captions;
    for (const auto& c : kColors)
        for (const auto& s : kShapes) captions.push_back(c + " " + s);
    return captions;
}

ProbeResult probe_classify(const Image& image) {
    if (image.height != kCanvas || image.width != kCanvas || image.channels != 3)
        throw std::invalid_argument("probe expects a 16x16x3 image");

    std::vector<double> lum(kCanvas * kCanvas);
    std::array<double, 3> channel_sum{0.0, 0.0, 0.0};
    std::size_t lit = 0;
    for (std::size_t y = 0; y < kCanvas; ++y)
        for (std::size_t x = 0; x < kCanvas; ++x) {
            const double l = luminance(image, y, x);
            lum[y * kCanvas + x] = l;
            if (l > kLitThreshold) {
                ++lit;
                for (std::size_t c = 0; c < 3; ++c) channel_sum[c] += image.at(y, x, c);
            }
        }
    ProbeResult result;
    if (lit == 0) return result;
    result.color = kColors[static_cast<std::size_t>(
        std::max_element(channel_sum.begin(), channel_sum.end()) - channel_sum.begin())];

    const double n = static_cast<double>(lum.size());
    double mean = 0.0;
    for (double v : lum) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : lum) var += (v - mean) * (v - mean);
    if (var <= 0.0) {
        result.shape = "square"; // uniformly lit canvas
        return result;
    }

    double best = -2.0;
    for (const auto& shape : kShapes)
        for (int size = kMinProbeSize; size <= kMaxProbeSize; ++size)
            for (int top = 0; top + size <= static_cast<int>(kCanvas); ++top)
                for (int left = 0; left + size <= static_cast<int>(kCanvas); ++left) {
                    const Image t = silhouette(shape, size, top, left);
                    double tmean = 0.0;
                    for (double v : t.pixels) tmean += v;
                    tmean /= n;
                    double cov = 0.0, tvar = 0.0;
                    for (std::size_t i = 0; i < lum.size(); ++i) {
                        const double dt = t.pixels[i] - tmean;
                        cov += (lum[i] - mean) * dt;
                        tvar += dt * dt;
                    }
                    const double ncc = cov / std::sqrt(var * tvar);
                    if (ncc > best) {
                        best = ncc;
                        result.shape = shape;
                    }
                }
    return result;
}

void export_dataset(const std::vector<Sample>& samples, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir / "manifest.jsonl");
    if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.jsonl").string());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "%05zu", i);
        const std::string target = std::string("target_") + stem + ".png";
        const std::string cond = std::string("cond_") + stem + ".png";
        write_png(dir / target, samples[i].target);
        write_png(dir / cond, samples[i].condition);
        nlohmann::json rec = {{"target", target},
                              {"condition", cond},
                              {"caption", samples[i].caption},
                              {"color", samples[i].color},
                              {"shape", samples[i].shape}};
        manifest << rec.dump() << '\n';
    }
}

} // namespace selfctl::synth
