#include "selfctl/checkpoint.hpp"

#include "selfctl/config.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace selfctl {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[] = "SELFCTL1\n";
constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

template <class T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ostream& os, const std::string& s) {
    put<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <class T>
T get(std::istream& is, const std::string& what) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw ConfigError("truncated checkpoint (" + what + ")");
    return v;
}

std::string get_string(std::istream& is, const std::string& what, std::uint64_t limit = 1u << 24) {
    const auto n = get<std::uint64_t>(is, what);
    if (n > limit) throw ConfigError("corrupt checkpoint (" + what + " length)");
    std::string s(n, '\0');
    if (!is.read(s.data(), static_cast<std::streamsize>(n))) throw ConfigError("truncated checkpoint (" + what + ")");
    return s;
}

struct Header {
    ModelConfig config;
    TextVocab vocab;
};

Header read_header(std::istream& is) {
    char magic[kMagicLen];
    if (!is.read(magic, kMagicLen) || std::memcmp(magic, kMagic, kMagicLen) != 0)
        throw ConfigError("not a checkpoint (bad magic)");
    Header h;
    h.config = parse_model_config(get_string(is, "config"));
    std::istringstream words(get_string(is, "vocabulary"));
    std::string w;
    while (std::getline(words, w))
        if (!w.empty()) h.vocab.add(w);
    return h;
}

void read_tensors(std::istream& is, MarModel& model) {
    auto& params = model.params().all();
    const auto count = get<std::uint64_t>(is, "tensor count");
    if (count != params.size())
        throw ConfigError("checkpoint/config mismatch: " + std::to_string(count) + " tensors, model has " +
                          std::to_string(params.size()));
    for (auto& p : params) {
        const std::string name = get_string(is, "tensor name", 4096);
        const auto rows = get<std::int64_t>(is, "tensor rows");
        const auto cols = get<std::int64_t>(is, "tensor cols");
        if (name != p.name || rows != p.value.rows() || cols != p.value.cols())
            throw ConfigError("checkpoint/config mismatch at tensor '" + name + "' (" + std::to_string(rows) + "x" +
                              std::to_string(cols) + "), expected '" + p.name + "' (" +
                              std::to_string(p.value.rows()) + "x" + std::to_string(p.value.cols()) + ")");
        if (!is.read(reinterpret_cast<char*>(p.value.data()),
                     static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.value.size()))))
            throw ConfigError("truncated checkpoint (tensor " + name + ")");
    }
    if (is.peek() != std::char_traits<char>::eof()) throw ConfigError("trailing bytes after checkpoint tensors");
}

std::ifstream open(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open checkpoint " + path.string());
    return in;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const MarModel& model) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write checkpoint " + tmp.string());
        os.write(kMagic, kMagicLen);
        put_string(os, model_config_to_ini(model.config()));
        std::string words;
        for (const auto& w : model.vocab().words()) words += w + "\n";
        put_string(os, words);
        const auto& params = model.params().all();
        put<std::uint64_t>(os, params.size());
        for (const auto& p : params) {
            put_string(os, p.name);
            put<std::int64_t>(os, p.value.rows());
            put<std::int64_t>(os, p.value.cols());
            os.write(reinterpret_cast<const char*>(p.value.data()),
                     static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p.value.size())));
        }
        if (!os) throw std::runtime_error("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::unique_ptr<MarModel> load_checkpoint(const std::filesystem::path& path) {
    auto in = open(path);
    Header h = read_header(in);
    std::unique_ptr<MarModel> model;
    try {
        model = std::make_unique<MarModel>(h.config, h.vocab, 0);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("checkpoint carries an invalid configuration: ") + e.what());
    }
    read_tensors(in, *model);
    return model;
}

void load_parameters(const std::filesystem::path& path, MarModel& model) {
    auto in = open(path);
    Header h = read_header(in);
    if (!(h.config == model.config()) || !(h.vocab == model.vocab()))
        throw ConfigError("checkpoint/config mismatch: " + path.string() + " was written for a different model");
    read_tensors(in, model);
}

} // namespace selfctl
