#include "selfctl/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace selfctl {

using nn::Graph;

void BackboneConfig::validate() const {
    auto positive = [](int v, const char* name) {
        if (v < 1) throw std::invalid_argument(std::string("backbone.") + name + " must be >= 1");
    };
    positive(width, "width");
    positive(depth_enc, "depth_enc");
    positive(depth_dec, "depth_dec");
    positive(heads, "heads");
    positive(mlp_ratio, "mlp_ratio");
    positive(token_dim, "token_dim");
    positive(cond_token_dim, "cond_token_dim");
    positive(text_vocab_size, "text_vocab_size");
    positive(max_gen_len, "max_gen_len");
    if (max_text_len < 0 || max_cond_len < 0) throw std::invalid_argument("backbone: negative segment capacity");
    if (width % heads != 0) throw std::invalid_argument("backbone.width must be divisible by backbone.heads");
}

void SequenceBatch::validate(const BackboneConfig& cfg) const {
    const std::size_t B = batch_size, T = layout.text_len(), C = layout.imgcond_len(), G = layout.gen_len();
    if (B == 0) throw std::invalid_argument("empty batch");
    if (T > static_cast<std::size_t>(cfg.max_text_len) || C > static_cast<std::size_t>(cfg.max_cond_len) ||
        G > static_cast<std::size_t>(cfg.max_gen_len))
        throw std::invalid_argument("layout exceeds backbone segment capacity");
    if (text_ids.size() != B * T) throw std::invalid_argument("text_ids size does not match layout");
    if (static_cast<std::size_t>(cond_tokens.rows()) != B * C ||
        (C > 0 && cond_tokens.cols() != cfg.cond_token_dim))
        throw std::invalid_argument("cond_tokens shape does not match layout");
    if (static_cast<std::size_t>(gen_tokens.rows()) != B * G || gen_tokens.cols() != cfg.token_dim)
        throw std::invalid_argument("gen_tokens shape does not match layout");
    if (visible.size() != B * G) throw std::invalid_argument("visibility flags do not match layout");
    if (null_text.size() != B || null_cond.size() != B)
        throw std::invalid_argument("null-condition flags do not match batch size");
    for (auto id : text_ids)
        if (id < 0 || id >= cfg.text_vocab_size)
            throw std::out_of_range("text id " + std::to_string(id) + " outside vocabulary of size " +
                                    std::to_string(cfg.text_vocab_size));
}

Backbone::Linear Backbone::make_linear(nn::ParameterStore& s, const std::string& name, int in, int out, Rng& rng) {
    Linear l;
    l.w = &s.create(name + ".w", in, out);
    l.b = &s.create(name + ".b", 1, out);
    nn::init_xavier_uniform(*l.w, rng);
    return l;
}

Backbone::Norm Backbone::make_norm(nn::ParameterStore& s, const std::string& name, int dim) {
    Norm n;
    n.gamma = &s.create(name + ".gamma", 1, dim);
    n.beta = &s.create(name + ".beta", 1, dim);
    nn::init_constant(*n.gamma, 1.0);
    return n;
}

nn::Parameter* Backbone::make_table(nn::ParameterStore& s, const std::string& name, int rows, int cols, Rng& rng) {
    nn::Parameter& p = s.create(name, rows, cols);
    nn::init_normal(p, 0.02, rng);
    return &p;
}

Backbone::Backbone(nn::ParameterStore& store, BackboneConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int w = cfg_.width;
    const int max_pos = std::max({cfg_.max_text_len, cfg_.max_cond_len, cfg_.max_gen_len, 1});

    text_table_ = make_table(store, "backbone.text_embed", cfg_.text_vocab_size, w, rng);
    null_text_ = make_table(store, "backbone.null_text", std::max(cfg_.max_text_len, 1), w, rng);
    null_cond_ = make_table(store, "backbone.null_cond", std::max(cfg_.max_cond_len, 1), w, rng);
    mask_token_ = make_table(store, "backbone.mask_token", 1, w, rng);
    pos_ = make_table(store, "backbone.pos_embed", max_pos, w, rng);
    seg_ = make_table(store, "backbone.seg_embed", 3, w, rng);
    cond_in_ = make_linear(store, "backbone.cond_in", cfg_.cond_token_dim, w, rng);
    gen_in_ = make_linear(store, "backbone.gen_in", cfg_.token_dim, w, rng);

    auto make_block = [&](const std::string& name) {
        Block b;
        b.ln1 = make_norm(store, name + ".ln1", w);
        b.qkv = make_linear(store, name + ".qkv", w, 3 * w, rng);
        b.proj = make_linear(store, name + ".proj", w, w, rng);
        b.ln2 = make_norm(store, name + ".ln2", w);
        b.fc1 = make_linear(store, name + ".fc1", w, cfg_.mlp_ratio * w, rng);
        b.fc2 = make_linear(store, name + ".fc2", cfg_.mlp_ratio * w, w, rng);
        return b;
    };
    for (int i = 0; i < cfg_.depth_enc; ++i) encoder_.push_back(make_block("backbone.enc." + std::to_string(i)));
    enc_norm_ = make_norm(store, "backbone.enc_norm", w);

    dec_in_ = make_linear(store, "backbone.dec_in", w, w, rng);
    dec_pos_ = make_table(store, "backbone.dec_pos_embed", max_pos, w, rng);
    dec_seg_ = make_table(store, "backbone.dec_seg_embed", 3, w, rng);
    for (int i = 0; i < cfg_.depth_dec; ++i) decoder_.push_back(make_block("backbone.dec." + std::to_string(i)));
    dec_norm_ = make_norm(store, "backbone.dec_norm", w);
}

Var Backbone::apply(Graph& g, const Linear& l, Var x, Eigen::Index split) const {
    const Eigen::Index n = g.value(x).rows();
    if (split <= 0 || split >= n) return nn::linear(g, x, g.param(*l.w), g.param(*l.b));
    return nn::concat_rows(g, {nn::linear(g, nn::slice_rows(g, x, 0, split), g.param(*l.w), g.param(*l.b)),
                               nn::linear(g, nn::slice_rows(g, x, split, n - split), g.param(*l.w), g.param(*l.b))});
}

Var Backbone::apply(Graph& g, const Norm& n, Var x) const {
    return nn::layer_norm(g, x, g.param(*n.gamma), g.param(*n.beta));
}

Var Backbone::apply_block(Graph& g, const Block& blk, Var x, const std::vector<nn::AttentionSpan>& spans,
                          Eigen::Index split, const std::vector<Eigen::Index>& order,
                          const std::vector<Eigen::Index>& inverse) const {
    Var qkv = apply(g, blk.qkv, apply(g, blk.ln1, x), split);
    if (!order.empty()) qkv = nn::gather_rows(g, qkv, order);
    Var attn = nn::multi_head_attention(g, qkv, spans, cfg_.heads);
    if (!inverse.empty()) attn = nn::gather_rows(g, attn, inverse);
    Var h = nn::add(g, x, apply(g, blk.proj, attn, split));
    Var mlp = apply(g, blk.fc2, nn::gelu(g, apply(g, blk.fc1, apply(g, blk.ln2, h), split)), split);
    return nn::add(g, h, mlp);
}

// Positional rows restart at 0 in every segment; the segment embedding tells
// the segments apart. Result is tiled over the batch, (B*N) x width.
Var Backbone::positional(Graph& g, const SequenceBatch& batch, nn::Parameter* pos, nn::Parameter* seg) const {
    const auto& L = batch.layout;
    std::vector<Eigen::Index> pos_idx, seg_idx;
    const std::size_t N = L.total_len();
    pos_idx.reserve(N * batch.batch_size);
    seg_idx.reserve(N * batch.batch_size);
    for (std::size_t b = 0; b < batch.batch_size; ++b)
        for (std::size_t j = 0; j < N; ++j) {
            const Segment s = L.segment_of(j);
            pos_idx.push_back(static_cast<Eigen::Index>(j - L.offset(s)));
            seg_idx.push_back(static_cast<Eigen::Index>(s));
        }
    return nn::add(g, nn::gather_rows(g, g.param(*pos), std::move(pos_idx)),
                   nn::gather_rows(g, g.param(*seg), std::move(seg_idx)));
}

Var Backbone::embed(Graph& g, const SequenceBatch& batch) const {
    Var cond = g.constant(batch.cond_tokens);
    Var gen = g.constant(batch.gen_tokens);
    return embed(g, batch, cond, gen);
}

Var Backbone::embed(Graph& g, const SequenceBatch& batch, Var cond_tokens, Var gen_tokens) const {
    batch.validate(cfg_);
    const auto& L = batch.layout;
    const std::size_t B = batch.batch_size, T = L.text_len(), C = L.imgcond_len(), G = L.gen_len();
    const std::size_t N = L.total_len();

    // Every embedding row is gathered from one stacked source table:
    // [text table | null text | cond linear | null cond | gen linear | mask].
    std::vector<Var> sources{g.param(*text_table_), g.param(*null_text_)};
    Eigen::Index off_null_text = text_table_->value.rows();
    Eigen::Index off_cond = off_null_text + null_text_->value.rows();
    Eigen::Index off_null_cond = off_cond;
    if (C > 0) {
        sources.push_back(apply(g, cond_in_, cond_tokens));
        off_null_cond = off_cond + static_cast<Eigen::Index>(B * C);
    }
    sources.push_back(g.param(*null_cond_));
    const Eigen::Index off_gen = off_null_cond + null_cond_->value.rows();
    sources.push_back(apply(g, gen_in_, gen_tokens));
    const Eigen::Index off_mask = off_gen + static_cast<Eigen::Index>(B * G);
    sources.push_back(g.param(*mask_token_));
    Var table = nn::concat_rows(g, sources);

    std::vector<Eigen::Index> idx;
    idx.reserve(B * N);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < T; ++t)
            idx.push_back(batch.null_text[b] ? off_null_text + static_cast<Eigen::Index>(t)
                                             : static_cast<Eigen::Index>(batch.text_ids[b * T + t]));
        for (std::size_t c = 0; c < C; ++c)
            idx.push_back(batch.null_cond[b] ? off_null_cond + static_cast<Eigen::Index>(c)
                                             : off_cond + static_cast<Eigen::Index>(b * C + c));
        for (std::size_t i = 0; i < G; ++i)
            idx.push_back(batch.visible[b * G + i] ? off_gen + static_cast<Eigen::Index>(b * G + i) : off_mask);
    }
    return nn::add(g, nn::gather_rows(g, table, std::move(idx)), positional(g, batch, pos_, seg_));
}

BackboneOutput Backbone::forward(Graph& g, const SequenceBatch& batch) const {
    Var cond = g.constant(batch.cond_tokens);
    Var gen = g.constant(batch.gen_tokens);
    return forward(g, batch, cond, gen);
}

BackboneOutput Backbone::forward(Graph& g, const SequenceBatch& batch, Var cond_tokens, Var gen_tokens) const {
    Var x = embed(g, batch, cond_tokens, gen_tokens);
    const auto& L = batch.layout;
    const std::size_t B = batch.batch_size, G = L.gen_len(), N = L.total_len();
    const std::size_t n_cond = L.condition_len();
    const AttentionMask full = build_attention_mask(L, batch.policy);

    BackboneOutput out;
    std::vector<Eigen::Index> enc_rows;
    std::vector<nn::AttentionSpan> enc_spans;
    Eigen::Index row = 0;
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<std::size_t> positions;
        for (std::size_t j = 0; j < n_cond; ++j) positions.push_back(j);
        for (std::size_t i = 0; i < G; ++i)
            if (batch.visible[b * G + i]) positions.push_back(n_cond + i);
        for (auto p : positions) enc_rows.push_back(static_cast<Eigen::Index>(b * N + p));

        const AttentionMask sub = full.slice(positions);
        const auto n = static_cast<Eigen::Index>(positions.size());
        enc_spans.push_back({row, n, nn::make_attention_bias(n, [&](Eigen::Index q, Eigen::Index k) {
                                 return sub.allowed(static_cast<std::size_t>(q), static_cast<std::size_t>(k));
                             })});
        out.encoder_offsets.push_back(row);
        out.encoder_positions.push_back(std::move(positions));
        row += n;
    }

    // Encoder: conditions and visible generated tokens only. Internally the
    // rows are held condition-first (every sample's conditions, then every
    // visible generated token) so the condition rows keep the same place in
    // each product however many tokens are revealed; attention runs in span
    // order through a permutation.
    const Eigen::Index n_enc = row;
    const auto split = static_cast<Eigen::Index>(B * n_cond);
    std::vector<Eigen::Index> internal_rows, to_span(static_cast<std::size_t>(n_enc)),
        to_internal(static_cast<std::size_t>(n_enc));
    internal_rows.reserve(static_cast<std::size_t>(n_enc));
    {
        Eigen::Index cond_next = 0, gen_next = split;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t r = 0; r < out.encoder_positions[b].size(); ++r) {
                const Eigen::Index span_row = out.encoder_offsets[b] + static_cast<Eigen::Index>(r);
                const Eigen::Index internal = r < n_cond ? cond_next++ : gen_next++;
                to_internal[static_cast<std::size_t>(span_row)] = internal;
                to_span[static_cast<std::size_t>(internal)] = span_row;
            }
        for (Eigen::Index i = 0; i < n_enc; ++i)
            internal_rows.push_back(enc_rows[static_cast<std::size_t>(to_span[static_cast<std::size_t>(i)])]);
    }
    Var h = nn::gather_rows(g, x, internal_rows);
    for (const auto& blk : encoder_) h = apply_block(g, blk, h, enc_spans, split, to_internal, to_span);
    Var normed = apply(g, enc_norm_, h);
    out.encoder_out = nn::gather_rows(g, normed, to_internal);

    // Decoder: full sequence, [MASK] at hidden generated positions.
    Var projected = apply(g, dec_in_, normed, split);
    const Eigen::Index mask_row = g.value(projected).rows();
    Var source = nn::concat_rows(g, {projected, g.param(*mask_token_)});
    std::vector<Eigen::Index> dec_idx(B * N, mask_row);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t r = 0; r < out.encoder_positions[b].size(); ++r)
            dec_idx[b * N + out.encoder_positions[b][r]] =
                to_internal[static_cast<std::size_t>(out.encoder_offsets[b] + static_cast<Eigen::Index>(r))];
    Var d = nn::add(g, nn::gather_rows(g, source, std::move(dec_idx)), positional(g, batch, dec_pos_, dec_seg_));

    auto full_bias = nn::make_attention_bias(static_cast<Eigen::Index>(N), [&](Eigen::Index q, Eigen::Index k) {
        return full.allowed(static_cast<std::size_t>(q), static_cast<std::size_t>(k));
    });
    std::vector<nn::AttentionSpan> dec_spans;
    for (std::size_t b = 0; b < B; ++b)
        dec_spans.push_back({static_cast<Eigen::Index>(b * N), static_cast<Eigen::Index>(N), full_bias});
    for (const auto& blk : decoder_) d = apply_block(g, blk, d, dec_spans);
    out.decoder_out = apply(g, dec_norm_, d);

    std::vector<Eigen::Index> z_rows;
    z_rows.reserve(B * G);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < G; ++i) z_rows.push_back(static_cast<Eigen::Index>(b * N + n_cond + i));
    out.z = nn::gather_rows(g, out.decoder_out, std::move(z_rows));

    if (!nn::all_finite(g.value(out.z)))
        throw NumericalError("backbone forward produced non-finite activations");
    return out;
}

Var Backbone::condition_states(Graph& g, const SequenceBatch& batch, const BackboneOutput& out) const {
    const std::size_t n_cond = batch.layout.condition_len();
    const std::size_t N = batch.layout.total_len();
    if (n_cond == 0) throw std::invalid_argument("layout has no condition positions");
    std::vector<Eigen::Index> enc_rows, dec_rows;
    for (std::size_t b = 0; b < batch.batch_size; ++b)
        for (std::size_t j = 0; j < n_cond; ++j) {
            enc_rows.push_back(out.encoder_offsets[b] + static_cast<Eigen::Index>(j));
            dec_rows.push_back(static_cast<Eigen::Index>(b * N + j));
        }
    return nn::concat_rows(g, {nn::gather_rows(g, out.encoder_out, std::move(enc_rows)),
                               nn::gather_rows(g, out.decoder_out, std::move(dec_rows))});
}

double max_condition_sensitivity(const Backbone& backbone, const SequenceBatch& batch, std::size_t projections,
                                 Rng& rng) {
    Graph g(/*record=*/true, /*param_grads=*/false);
    Var cond = g.constant(batch.cond_tokens);
    Var gen = g.input(batch.gen_tokens);
    const BackboneOutput out = backbone.forward(g, batch, cond, gen);
    Var states = backbone.condition_states(g, batch, out);
    const Mat& sv = g.value(states);

    double worst = 0.0;
    auto absorb = [&] {
        const Mat& gg = g.grad(gen);
        if (gg.size() > 0) worst = std::max(worst, gg.cwiseAbs().maxCoeff());
    };
    if (projections == 0) {
        Mat seed = Mat::Zero(sv.rows(), sv.cols());
        for (Eigen::Index i = 0; i < sv.size(); ++i) {
            seed.data()[i] = 1.0;
            g.backward(states, seed);
            absorb();
            seed.data()[i] = 0.0;
        }
    } else {
        std::normal_distribution<double> normal;
        for (std::size_t p = 0; p < projections; ++p) {
            Mat seed(sv.rows(), sv.cols());
            for (Eigen::Index i = 0; i < seed.size(); ++i) seed.data()[i] = normal(rng);
            seed /= seed.norm();
            g.backward(states, seed);
            absorb();
        }
    }
    return worst;
}

} // namespace selfctl
