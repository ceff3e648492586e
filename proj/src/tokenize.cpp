#include "selfctl/tokenize.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace selfctl {

ImageTokenGrid patchify(const Image& image, std::size_t patch_size) {
    if (patch_size == 0) throw std::invalid_argument("patch_size must be positive");
    if (image.height == 0 || image.width == 0 || image.channels == 0)
        throw std::invalid_argument("cannot patchify an empty image");
    if (image.height % patch_size != 0 || image.width % patch_size != 0)
        throw std::invalid_argument("image " + std::to_string(image.height) + "x" +
                                    std::to_string(image.width) + " not divisible by patch size " +
                                    std::to_string(patch_size));

    ImageTokenGrid grid;
    grid.grid_h = image.height / patch_size;
    grid.grid_w = image.width / patch_size;
    grid.patch_size = patch_size;
    grid.channels = image.channels;
    grid.tokens.resize(static_cast<Eigen::Index>(grid.num_patches()),
                       static_cast<Eigen::Index>(grid.token_dim()));

    for (std::size_t gy = 0; gy < grid.grid_h; ++gy)
        for (std::size_t gx = 0; gx < grid.grid_w; ++gx) {
            const auto row = static_cast<Eigen::Index>(gy * grid.grid_w + gx);
            Eigen::Index col = 0;
            for (std::size_t c = 0; c < image.channels; ++c)
                for (std::size_t dy = 0; dy < patch_size; ++dy)
                    for (std::size_t dx = 0; dx < patch_size; ++dx)
                        grid.tokens(row, col++) =
                            2.0 * image.at(gy * patch_size + dy, gx * patch_size + dx, c) - 1.0;
        }
    return grid;
}

Image unpatchify(const ImageTokenGrid& grid) {
    if (static_cast<std::size_t>(grid.tokens.rows()) != grid.num_patches() ||
        static_cast<std::size_t>(grid.tokens.cols()) != grid.token_dim())
        throw std::invalid_argument("token matrix does not match grid geometry");

    const std::size_t p = grid.patch_size;
    Image image(grid.grid_h * p, grid.grid_w * p, grid.channels);
    for (std::size_t gy = 0; gy < grid.grid_h; ++gy)
        for (std::size_t gx = 0; gx < grid.grid_w; ++gx) {
            const auto row = static_cast<Eigen::Index>(gy * grid.grid_w + gx);
            Eigen::Index col = 0;
            for (std::size_t c = 0; c < grid.channels; ++c)
                for (std::size_t dy = 0; dy < p; ++dy)
                    for (std::size_t dx = 0; dx < p; ++dx) {
                        const double v = 0.5 * (grid.tokens(row, col++) + 1.0);
                        image.at(gy * p + dy, gx * p + dx, c) = std::clamp(v, 0.0, 1.0);
                    }
        }
    return image;
}

std::vector<std::string> split_words(const std::string& caption) {
    std::vector<std::string> words;
    std::istringstream is(caption);
    std::string w;
    while (is >> w) {
        std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
        words.push_back(w);
    }
    return words;
}

TextVocab TextVocab::from_captions(const std::vector<std::string>& captions) {
    TextVocab vocab;
    for (const auto& caption : captions)
        for (const auto& w : split_words(caption)) vocab.add(w);
    return vocab;
}

TextVocab TextVocab::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocabulary file " + path.string());
    TextVocab vocab;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) throw std::runtime_error("empty line in vocabulary file " + path.string());
        if (vocab.index_.count(line)) throw std::runtime_error("duplicate vocabulary word '" + line + "'");
        vocab.add(line);
    }
    return vocab;
}

void TextVocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocabulary file " + path.string());
    for (const auto& w : words_) out << w << '\n';
}

std::int32_t TextVocab::add(const std::string& word) {
    if (auto it = index_.find(word); it != index_.end()) return it->second;
    const auto id = static_cast<std::int32_t>(words_.size() + 2);
    words_.push_back(word);
    index_.emplace(word, id);
    return id;
}

std::int32_t TextVocab::id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnknownId : it->second;
}

EncodedText encode_text(const std::string& caption, const TextVocab& vocab, std::size_t max_len) {
    if (max_len == 0) throw std::invalid_argument("max_len must be >= 1");
    EncodedText out;
    out.ids.assign(max_len, kPadId);
    for (const auto& w : split_words(caption)) {
        if (out.length == max_len) break;
        out.ids[out.length++] = vocab.id(w);
    }
    return out;
}

} // namespace selfctl
