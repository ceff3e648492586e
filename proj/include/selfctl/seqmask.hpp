#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace selfctl {

/// Which of the three segments a sequence position belongs to. The order of
/// the enumerators is the order of the segments in the sequence.
enum class Segment : std::uint8_t { Text = 0, ImageCond = 1, Generated = 2 };

enum class IntraMode : std::uint8_t { Causal, Bidirectional };

std::string to_string(IntraMode mode);
IntraMode parse_intra_mode(const std::string& text);

/// Lengths of the text-condition, image-condition and generated segments of
/// one sequence, laid out as [text, imgcond, gen].
class SegmentLayout {
public:
    SegmentLayout(std::size_t text_len, std::size_t imgcond_len, std::size_t gen_len);

    std::size_t text_len() const { return text_len_; }
    std::size_t imgcond_len() const { return imgcond_len_; }
    std::size_t gen_len() const { return gen_len_; }
    std::size_t total_len() const { return text_len_ + imgcond_len_ + gen_len_; }
    std::size_t condition_len() const { return text_len_ + imgcond_len_; }

    std::size_t length(Segment s) const;
    /// First position of segment `s`.
    std::size_t offset(Segment s) const;
    Segment segment_of(std::size_t pos) const;

    bool operator==(const SegmentLayout&) const = default;

private:
    std::size_t text_len_;
    std::size_t imgcond_len_;
    std::size_t gen_len_;
};

struct AttentionPolicy {
    IntraMode text = IntraMode::Causal;
    IntraMode imgcond = IntraMode::Bidirectional;
    IntraMode gen = IntraMode::Bidirectional;
    /// Causal: later segments see all of the earlier segments and nothing of
    /// the later ones. Bidirectional: every cross-segment pair is visible.
    IntraMode cross = IntraMode::Causal;

    IntraMode intra(Segment s) const;
    bool operator==(const AttentionPolicy&) const = default;
};

/// The proposed configuration: causal text, bidirectional image condition and
/// generated tokens, group-causal across segments.
inline constexpr AttentionPolicy kDefaultPolicy{IntraMode::Causal, IntraMode::Bidirectional,
                                               IntraMode::Bidirectional, IntraMode::Causal};

/// The eight ablation rows, in table order (text, image, multimodal), with the
/// generated segment fixed to bidirectional. Throws std::out_of_range unless
/// 1 <= option <= 8.
AttentionPolicy ablation_policy(int option);

/// Inverse of ablation_policy; returns 0 if the policy has a causal generated
/// segment and so is not one of the eight rows.
int ablation_option(const AttentionPolicy& policy);

std::string to_string(const AttentionPolicy& policy);
/// Parses "text,imgcond,gen,cross" where each field is causal/bidirectional
/// (abbreviations c/b accepted).
AttentionPolicy parse_policy(const std::string& text);

/// Square boolean matrix; allowed(q, k) is true iff query q may attend to key k.
class AttentionMask {
public:
    AttentionMask() = default;
    explicit AttentionMask(std::size_t n, bool fill = false);

    std::size_t size() const { return n_; }
    bool allowed(std::size_t q, std::size_t k) const { return bits_[q * n_ + k] != 0; }
    void set(std::size_t q, std::size_t k, bool v) { bits_[q * n_ + k] = v ? 1 : 0; }

    /// Restriction to the given positions (rows and columns), in the given order.
    AttentionMask slice(const std::vector<std::size_t>& positions) const;
    /// Square sub-block [begin, begin + len).
    AttentionMask block(std::size_t begin, std::size_t len) const;

    /// One line of '1'/'0' characters per query row.
    std::string rows_string() const;

    bool operator==(const AttentionMask&) const = default;

private:
    std::size_t n_ = 0;
    std::vector<std::uint8_t> bits_;
};

AttentionMask intra_mask(std::size_t n, IntraMode mode);
AttentionMask build_attention_mask(const SegmentLayout& layout, const AttentionPolicy& policy);

/// Influence of input k on output q through `depth` stacked layers that each
/// use `mask` (the boolean matrix power of mask-with-self-loops). depth >= 1.
AttentionMask reachability(const AttentionMask& mask, std::size_t depth);

/// Text dump: header `layout=t,c,g policy=text,imgcond,gen,cross` and one row per query.
std::string format_mask_dump(const SegmentLayout& layout, const AttentionPolicy& policy,
                             const AttentionMask& mask);

} // namespace selfctl
