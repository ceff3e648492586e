#pragma once

#include "selfctl/errors.hpp"
#include "selfctl/nn.hpp"
#include "selfctl/seqmask.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace selfctl {


struct BackboneConfig {
    int width = 256;
    int depth_enc = 4;
    int depth_dec = 4;
    int heads = 4;
    int mlp_ratio = 4;
    int token_dim = 48;      ///< generated-token dimension
    int cond_token_dim = 16; ///< image-condition token dimension
    int text_vocab_size = 8;
    int max_text_len = 4;
    int max_cond_len = 16;
    int max_gen_len = 16;

    /// Throws std::invalid_argument on a violated invariant.
    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

/// A row-stacked batch of sequences sharing one layout and policy. Sample b
/// owns text ids [b*T, (b+1)*T), condition rows [b*C, (b+1)*C) and generated
/// rows [b*G, (b+1)*G).
struct SequenceBatch {
    std::size_t batch_size = 0;
    SegmentLayout layout{0, 0, 1};
    AttentionPolicy policy = kDefaultPolicy;
    std::vector<std::int32_t> text_ids;
    Mat cond_tokens;
    Mat gen_tokens;
    /// true = the generated token at that position is known (fed to the encoder).
    std::vector<std::uint8_t> visible;
    /// Per sample: replace the text / image-condition segment by the learned null embedding.
    std::vector<std::uint8_t> null_text;
    std::vector<std::uint8_t> null_cond;

    void validate(const BackboneConfig& cfg) const;
};

struct BackboneOutput {
    /// One conditioning vector per generated position, row b*G + i.
    Var z;
    Var encoder_out;
    Var decoder_out;
    /// Encoder rows owned by sample b start at encoder_offsets[b]; their sequence
    /// positions are encoder_positions[b] (conditions first, always present).
    std::vector<Eigen::Index> encoder_offsets;
    std::vector<std::vector<std::size_t>> encoder_positions;
};

/// MAE-style encoder/decoder transformer over [text | image condition | generated]
/// tokens. Every attention layer applies the mask of the batch's layout and policy;
/// the encoder sees conditions plus visible generated tokens only.
class Backbone {
public:
    Backbone(nn::ParameterStore& store, BackboneConfig cfg, Rng& init_rng);

    const BackboneConfig& config() const { return cfg_; }

    /// Token + positional + segment embeddings for every position, (B*N) x width.
    /// Hidden generated positions carry the [MASK] embedding.
    Var embed(nn::Graph& g, const SequenceBatch& batch, Var cond_tokens, Var gen_tokens) const;
    Var embed(nn::Graph& g, const SequenceBatch& batch) const;

    BackboneOutput forward(nn::Graph& g, const SequenceBatch& batch, Var cond_tokens, Var gen_tokens) const;
    BackboneOutput forward(nn::Graph& g, const SequenceBatch& batch) const;

    /// Encoder and decoder hidden states at the condition positions, stacked
    /// (encoder rows of every sample, then decoder rows).
    Var condition_states(nn::Graph& g, const SequenceBatch& batch, const BackboneOutput& out) const;

private:
    struct Linear {
        nn::Parameter* w = nullptr;
        nn::Parameter* b = nullptr;
    };
    struct Norm {
        nn::Parameter* gamma = nullptr;
        nn::Parameter* beta = nullptr;
    };
    struct Block {
        Norm ln1, ln2;
        Linear qkv, proj, fc1, fc2;
    };

    Linear make_linear(nn::ParameterStore& s, const std::string& name, int in, int out, Rng& rng);
    Norm make_norm(nn::ParameterStore& s, const std::string& name, int dim);
    nn::Parameter* make_table(nn::ParameterStore& s, const std::string& name, int rows, int cols, Rng& rng);

    /// Rows [0, split) and [split, end) go through separate products, so the
    /// first block's values never depend on how many rows follow it.
    Var apply(nn::Graph& g, const Linear& l, Var x, Eigen::Index split = 0) const;
    Var apply(nn::Graph& g, const Norm& n, Var x) const;
    /// `order` (may be empty) gathers x into span order for attention; `inverse` maps back.
    Var apply_block(nn::Graph& g, const Block& blk, Var x, const std::vector<nn::AttentionSpan>& spans,
                    Eigen::Index split = 0, const std::vector<Eigen::Index>& order = {},
                    const std::vector<Eigen::Index>& inverse = {}) const;
    Var positional(nn::Graph& g, const SequenceBatch& batch, nn::Parameter* pos, nn::Parameter* seg) const;

    BackboneConfig cfg_;
    nn::Parameter* text_table_ = nullptr;
    nn::Parameter* null_text_ = nullptr;
    nn::Parameter* null_cond_ = nullptr;
    nn::Parameter* mask_token_ = nullptr;
    nn::Parameter* pos_ = nullptr;
    nn::Parameter* seg_ = nullptr;
    nn::Parameter* dec_pos_ = nullptr;
    nn::Parameter* dec_seg_ = nullptr;
    Linear cond_in_, gen_in_, dec_in_;
    std::vector<Block> encoder_, decoder_;
    Norm enc_norm_, dec_norm_;
};

/// Largest |d(condition output)/d(generated input)| over the batch. With
/// projections == 0 the full Jacobian is formed (one backward pass per
/// condition output entry); otherwise the maximum is taken over that many
/// random projections of the condition outputs.
double max_condition_sensitivity(const Backbone& backbone, const SequenceBatch& batch, std::size_t projections,
                                 Rng& rng);

} // namespace selfctl
