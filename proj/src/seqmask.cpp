#include "selfctl/seqmask.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>
#include <stdexcept>

namespace selfctl {

std::string to_string(IntraMode mode) {
    return mode == IntraMode::Causal ? "causal" : "bidirectional";
}

IntraMode parse_intra_mode(const std::string& text) {
    std::string t = text;
    std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
    if (t == "causal" || t == "c") return IntraMode::Causal;
    if (t == "bidirectional" || t == "b" || t == "bi") return IntraMode::Bidirectional;
    throw std::invalid_argument("unknown attention mode '" + text + "'");
}

SegmentLayout::SegmentLayout(std::size_t text_len, std::size_t imgcond_len, std::size_t gen_len)
    : text_len_(text_len), imgcond_len_(imgcond_len), gen_len_(gen_len) {
    if (gen_len == 0) throw std::invalid_argument("layout needs at least one generated token");
}

std::size_t SegmentLayout::length(Segment s) const {
    switch (s) {
    case Segment::Text: return text_len_;
    case Segment::ImageCond: return imgcond_len_;
    case Segment::Generated: return gen_len_;
    }
    return 0;
}

std::size_t SegmentLayout::offset(Segment s) const {
    switch (s) {
    case Segment::Text: return 0;
    case Segment::ImageCond: return text_len_;
    case Segment::Generated: return text_len_ + imgcond_len_;
    }
    return 0;
}

Segment SegmentLayout::segment_of(std::size_t pos) const {
    if (pos >= total_len()) throw std::out_of_range("position outside layout");
    if (pos < text_len_) return Segment::Text;
    if (pos < text_len_ + imgcond_len_) return Segment::ImageCond;
    return Segment::Generated;
}

IntraMode AttentionPolicy::intra(Segment s) const {
    switch (s) {
    case Segment::Text: return text;
    case Segment::ImageCond: return imgcond;
    case Segment::Generated: return gen;
    }
    return gen;
}

AttentionPolicy ablation_policy(int option) {
    if (option < 1 || option > 8)
        throw std::out_of_range("ablation option must be in 1..8, got " + std::to_string(option));
    // Rows enumerate (text, image, multimodal) as binary digits, causal = 0.
    const int bits = option - 1;
    auto mode = [&](int bit) { return (bits >> bit) & 1 ? IntraMode::Bidirectional : IntraMode::Causal; };
    return AttentionPolicy{mode(2), mode(1), IntraMode::Bidirectional, mode(0)};
}

int ablation_option(const AttentionPolicy& policy) {
    if (policy.gen != IntraMode::Bidirectional) return 0;
    auto bit = [](IntraMode m) { return m == IntraMode::Bidirectional ? 1 : 0; };
    return 1 + 4 * bit(policy.text) + 2 * bit(policy.imgcond) + bit(policy.cross);
}

std::string to_string(const AttentionPolicy& p) {
    return to_string(p.text) + "," + to_string(p.imgcond) + "," + to_string(p.gen) + "," +
           to_string(p.cross);
}

AttentionPolicy parse_policy(const std::string& text) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) parts.push_back(item);
    if (parts.size() != 4)
        throw std::invalid_argument("policy needs 4 comma-separated modes, got '" + text + "'");
    return AttentionPolicy{parse_intra_mode(parts[0]), parse_intra_mode(parts[1]),
                           parse_intra_mode(parts[2]), parse_intra_mode(parts[3])};
}

AttentionMask::AttentionMask(std::size_t n, bool fill) : n_(n), bits_(n * n, fill ? 1 : 0) {}

AttentionMask AttentionMask::slice(const std::vector<std::size_t>& positions) const {
    AttentionMask out(positions.size());
    for (std::size_t i = 0; i < positions.size(); ++i)
        for (std::size_t j = 0; j < positions.size(); ++j)
            out.set(i, j, allowed(positions[i], positions[j]));
    return out;
}

AttentionMask AttentionMask::block(std::size_t begin, std::size_t len) const {
    if (begin + len > n_) throw std::out_of_range("mask block outside matrix");
    AttentionMask out(len);
    for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < len; ++j) out.set(i, j, allowed(begin + i, begin + j));
    return out;
}

std::string AttentionMask::rows_string() const {
    std::string s;
    s.reserve(n_ * (n_ + 1));
    for (std::size_t q = 0; q < n_; ++q) {
        for (std::size_t k = 0; k < n_; ++k) s.push_back(allowed(q, k) ? '1' : '0');
        s.push_back('\n');
    }
    return s;
}

AttentionMask intra_mask(std::size_t n, IntraMode mode) {
    AttentionMask m(n, mode == IntraMode::Bidirectional);
    if (mode == IntraMode::Causal)
        for (std::size_t q = 0; q < n; ++q)
            for (std::size_t k = 0; k <= q; ++k) m.set(q, k, true);
    return m;
}

AttentionMask build_attention_mask(const SegmentLayout& layout, const AttentionPolicy& policy) {
    const std::size_t n = layout.total_len();
    AttentionMask m(n);
    constexpr Segment kSegments[] = {Segment::Text, Segment::ImageCond, Segment::Generated};

    for (Segment qs : kSegments) {
        const std::size_t q0 = layout.offset(qs), qn = layout.length(qs);
        for (Segment ks : kSegments) {
            const std::size_t k0 = layout.offset(ks), kn = layout.length(ks);
            if (qs == ks) {
                const AttentionMask inner = intra_mask(qn, policy.intra(qs));
                for (std::size_t i = 0; i < qn; ++i)
                    for (std::size_t j = 0; j < qn; ++j) m.set(q0 + i, q0 + j, inner.allowed(i, j));
                continue;
            }
            const bool visible = policy.cross == IntraMode::Bidirectional || ks < qs;
            if (!visible) continue;
            for (std::size_t i = 0; i < qn; ++i)
                for (std::size_t j = 0; j < kn; ++j) m.set(q0 + i, k0 + j, true);
        }
    }
    return m;
}

AttentionMask reachability(const AttentionMask& mask, std::size_t depth) {
    if (depth == 0) throw std::invalid_argument("reachability depth must be >= 1");
    const std::size_t n = mask.size();
    AttentionMask step = mask;
    for (std::size_t i = 0; i < n; ++i) step.set(i, i, true);

    AttentionMask reach = step;
    for (std::size_t d = 1; d < depth; ++d) {
        AttentionMask next(n);
        for (std::size_t q = 0; q < n; ++q)
            for (std::size_t mid = 0; mid < n; ++mid) {
                if (!step.allowed(q, mid)) continue;
                for (std::size_t k = 0; k < n; ++k)
                    if (reach.allowed(mid, k)) next.set(q, k, true);
            }
        if (next == reach) break;
        reach = std::move(next);
    }
    return reach;
}

std::string format_mask_dump(const SegmentLayout& layout, const AttentionPolicy& policy,
                             const AttentionMask& mask) {
    std::ostringstream os;
    os << "layout=" << layout.text_len() << ',' << layout.imgcond_len() << ',' << layout.gen_len()
       << " policy=" << to_string(policy) << '\n'
       << mask.rows_string();
    return os.str();
}

} // namespace selfctl
