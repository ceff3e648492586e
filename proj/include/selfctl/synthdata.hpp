#pragma once

#include "selfctl/nn.hpp"
#include "selfctl/tokenize.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace selfctl::synth {

inline constexpr std::size_t kCanvas = 16;
inline const std::array<std::string, 3> kColors{"red", "green", "blue"};
inline const std::array<std::string, 3> kShapes{"square", "circle", "cross"};

/// Placement randomisation. The default is no jitter: a centred 6-pixel shape.
struct Jitter {
    int max_offset = 0;
    int min_size = 6;
    int max_size = 6;

    static Jitter none() { return {}; }
    static Jitter standard() { return {3, 5, 8}; }
};

struct Sample {
    Image target;    ///< 16 x 16 x 3
    Image condition; ///< 16 x 16 x 1 silhouette
    std::string caption;
    std::string color;
    std::string shape;
};

/// Mean of the channels; the condition image is this value thresholded.
double luminance(const Image& image, std::size_t y, std::size_t x);

/// Binary silhouette of `shape` with side `size`, top-left corner (top, left), on a 16x16 canvas.
Image silhouette(const std::string& shape, int size, int top, int left);

/// Throws std::invalid_argument for an unknown colour or shape.
Sample make_sample(const std::string& color, const std::string& shape, const Jitter& jitter, Rng& rng);

/// `count` samples cycling through the 9 classes (exactly balanced when count
/// is a multiple of 9), deterministic in the seed.
std::vector<Sample> make_dataset(std::size_t count, const Jitter& jitter, std::uint64_t seed);

std::vector<std::string> all_captions();

struct ProbeResult {
    std::string color = "none";
    std::string shape = "none";
};

/// Colour = argmax of the mean channel over pixels with luminance > 0.2; shape =
/// best normalised cross-correlation with the canonical silhouettes over all
/// sizes and translations. All-dark images give "none"/"none".
ProbeResult probe_classify(const Image& image);

/// Writes manifest.jsonl plus target_XXXXX.png / cond_XXXXX.png files.
void export_dataset(const std::vector<Sample>& samples, const std::filesystem::path& dir);

} // namespace selfctl::synth
