#pragma once

#include "selfctl/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace selfctl {

/// Height x width x channels image, interleaved HWC, values nominally in [0, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<double> pixels;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0)
        : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

    double& at(std::size_t y, std::size_t x, std::size_t ch) { return pixels[(y * width + x) * channels + ch]; }
    double at(std::size_t y, std::size_t x, std::size_t ch) const { return pixels[(y * width + x) * channels + ch]; }
    bool operator==(const Image&) const = default;
};

/// Continuous patch tokens, one row per patch in row-major patch order.
/// Within a token the layout is channel-major: (channel, dy, dx).
struct ImageTokenGrid {
    Mat tokens;
    std::size_t grid_h = 0;
    std::size_t grid_w = 0;
    std::size_t patch_size = 0;
    std::size_t channels = 0;

    std::size_t num_patches() const { return grid_h * grid_w; }
    std::size_t token_dim() const { return patch_size * patch_size * channels; }
};

/// Pixels in [0,1] map to token values 2x-1. Throws std::invalid_argument if
/// the image sides are not multiples of patch_size.
ImageTokenGrid patchify(const Image& image, std::size_t patch_size);
/// Inverse of patchify; output clipped to [0,1].
Image unpatchify(const ImageTokenGrid& grid);

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kUnknownId = 1;

/// Word vocabulary; ids 0 (padding) and 1 (unknown) are reserved, words are
/// numbered contiguously from 2 in insertion order.
class TextVocab {
public:
    TextVocab() = default;
    static TextVocab from_captions(const std::vector<std::string>& captions);
    /// One word per line; line n (1-based) gets id n + 1.
    static TextVocab load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    /// Adds the word if absent and returns its id.
    std::int32_t add(const std::string& word);
    std::int32_t id(const std::string& word) const;
    std::size_t size() const { return words_.size() + 2; }
    const std::vector<std::string>& words() const { return words_; }

    bool operator==(const TextVocab& other) const { return words_ == other.words_; }

private:
    std::vector<std::string> words_;
    std::unordered_map<std::string, std::int32_t> index_;
};

struct EncodedText {
    std::vector<std::int32_t> ids;
    std::size_t length = 0;
};

/// Lowercased whitespace tokenization, padded or truncated to max_len.
EncodedText encode_text(const std::string& caption, const TextVocab& vocab, std::size_t max_len);

std::vector<std::string> split_words(const std::string& caption);

} // namespace selfctl
