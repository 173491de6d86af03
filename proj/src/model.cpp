#include "ildlab/model.hpp"

#include <cmath>

#include "ildlab/rng.hpp"

namespace ildlab {

std::size_t ModelConfig::head_dim() const {
    validate();
    return hidden_dim / num_heads;
}

void ModelConfig::validate() const {
    if (num_layers == 0 || hidden_dim == 0 || num_heads == 0 || ffn_dim == 0 ||
        vocab_size == 0 || num_classes == 0)
        throw ConfigError("model config: all extents must be positive");
    if (hidden_dim % num_heads != 0)
        throw ConfigError("model config: hidden_dim " + std::to_string(hidden_dim) +
                          " not divisible by num_heads " + std::to_string(num_heads));
    if (max_seq_len < 2)
        throw ConfigError("model config: max_seq_len must be at least 2");
    if (vocab_size <= FIRST_CONTENT_ID)
        throw ConfigError("model config: vocab_size must exceed the reserved token ids");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0)
        throw ConfigError("model config: dropout_rate must lie in [0,1)");
}

namespace {

Tensor init_weight(Shape shape, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.v())
        v = rng.truncated_normal(0.02);
    return t;
}

} // namespace

TransformerModel::TransformerModel(ModelConfig cfg, std::uint64_t init_seed)
    : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng = Rng::stream(init_seed, "model_init");
    const std::size_t d = cfg_.hidden_dim;
    const std::size_t dk = cfg_.head_dim();
    tok_emb_ = init_weight({cfg_.vocab_size, d}, rng);
    pos_emb_ = init_weight({cfg_.max_seq_len, d}, rng);
    layers_.resize(cfg_.num_layers);
    for (auto& l : layers_) {
        for (std::size_t a = 0; a < cfg_.num_heads; ++a) {
            l.wq.push_back(init_weight({d, dk}, rng));
            l.bq.push_back(Tensor::zeros({dk}));
            l.wk.push_back(init_weight({d, dk}, rng));
            l.bk.push_back(Tensor::zeros({dk}));
            l.wv.push_back(init_weight({d, dk}, rng));
            l.bv.push_back(Tensor::zeros({dk}));
        }
        l.wo = init_weight({d, d}, rng);
        l.bo = Tensor::zeros({d});
        l.ln1_g = Tensor::full({d}, 1.0);
        l.ln1_b = Tensor::zeros({d});
        l.w1 = init_weight({d, cfg_.ffn_dim}, rng);
        l.b1 = Tensor::zeros({cfg_.ffn_dim});
        l.w2 = init_weight({cfg_.ffn_dim, d}, rng);
        l.b2 = Tensor::zeros({d});
        l.ln2_g = Tensor::full({d}, 1.0);
        l.ln2_b = Tensor::zeros({d});
    }
    head_w_ = init_weight({d, cfg_.num_classes}, rng);
    head_b_ = Tensor::zeros({cfg_.num_classes});
}

namespace {

Tensor deep_copy(const Tensor& t) {
    return Tensor(t.shape, t.v());
}

} // namespace

TransformerModel TransformerModel::init_student_truncated(const TransformerModel& teacher,
                                                          std::size_t m,
                                                          std::uint64_t head_seed) {
    if (m == 0 || m > teacher.cfg_.num_layers)
        throw ConfigError("truncated init: student depth " + std::to_string(m) +
                          " not in 1.." + std::to_string(teacher.cfg_.num_layers));
    ModelConfig cfg = teacher.cfg_;
    cfg.num_layers = m;
    TransformerModel student(cfg, head_seed);
    student.tok_emb_ = deep_copy(teacher.tok_emb_);
    student.pos_emb_ = deep_copy(teacher.pos_emb_);
    for (std::size_t l = 0; l < m; ++l) {
        LayerParams& dst = student.layers_[l];
        const LayerParams& src = teacher.layers_[l];
        for (std::size_t a = 0; a < cfg.num_heads; ++a) {
            dst.wq[a] = deep_copy(src.wq[a]);
            dst.bq[a] = deep_copy(src.bq[a]);
            dst.wk[a] = deep_copy(src.wk[a]);
            dst.bk[a] = deep_copy(src.bk[a]);
            dst.wv[a] = deep_copy(src.wv[a]);
            dst.bv[a] = deep_copy(src.bv[a]);
        }
        dst.wo = deep_copy(src.wo);
        dst.bo = deep_copy(src.bo);
        dst.ln1_g = deep_copy(src.ln1_g);
        dst.ln1_b = deep_copy(src.ln1_b);
        dst.w1 = deep_copy(src.w1);
        dst.b1 = deep_copy(src.b1);
        dst.w2 = deep_copy(src.w2);
        dst.b2 = deep_copy(src.b2);
        dst.ln2_g = deep_copy(src.ln2_g);
        dst.ln2_b = deep_copy(src.ln2_b);
    }
    return student;
}

Tensor TransformerModel::embed(const Batch& batch, Tape* tape) const {
    batch.validate();
    if (batch.seq_len > cfg_.max_seq_len)
        throw DataError("embed: sequence length " + std::to_string(batch.seq_len) +
                        " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    for (std::size_t id : batch.tokens)
        if (id >= cfg_.vocab_size)
            throw DataError("embed: token id " + std::to_string(id) +
                            " outside vocabulary of size " + std::to_string(cfg_.vocab_size));
    const std::size_t b = batch.batch_size, s = batch.seq_len;
    auto bind = [&](const Tensor& p) { return tape ? tape->leaf(p) : p; };
    std::vector<std::size_t> pos_ids(b * s);
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < s; ++j)
            pos_ids[i * s + j] = j;
    Tensor tok = embedding_lookup(bind(tok_emb_), batch.tokens, {b, s});
    Tensor pos = embedding_lookup(bind(pos_emb_), pos_ids, {b, s});
    return add(tok, pos);
}

ForwardTrace TransformerModel::forward(const Batch& batch, bool train_mode, Tape* tape,
                                       Rng* dropout_rng) const {
    Tensor h0 = embed(batch, tape);
    return forward_embedded(h0, batch.mask, train_mode, tape, dropout_rng);
}

ForwardTrace TransformerModel::forward_embedded(const Tensor& h0,
                                                const std::vector<double>& mask,
                                                bool train_mode, Tape* tape,
                                                Rng* dropout_rng) const {
    if (h0.rank() != 3 || h0.dim(2) != cfg_.hidden_dim)
        throw DimError("forward: embeddings " + shape_str(h0.shape) + " vs hidden_dim " +
                       std::to_string(cfg_.hidden_dim));
    const std::size_t b = h0.dim(0), s = h0.dim(1);
    if (mask.size() != b * s)
        throw DimError("forward: mask size " + std::to_string(mask.size()) +
                       " vs batch geometry " + shape_str(h0.shape));
    const bool drop = train_mode && cfg_.dropout_rate > 0.0;
    if (drop && dropout_rng == nullptr)
        throw ContractError("forward: train_mode with dropout needs an rng");

    auto bind = [&](const Tensor& p) { return tape ? tape->leaf(p) : p; };

    // additive key mask, [batch, seq, seq]: -1e9 on pad keys
    Tensor mask_bias = Tensor::zeros({b, s, s});
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t k = 0; k < s; ++k)
            if (mask[i * s + k] == 0.0)
                for (std::size_t q = 0; q < s; ++q)
                    mask_bias.v()[(i * s + q) * s + k] = -1e9;

    ForwardTrace trace;
    trace.batch_size = b;
    trace.seq_len = s;
    trace.row_mask = mask;
    trace.hidden.push_back(h0);
    trace.cls.push_back(select_pos(h0, 0));

    const std::size_t dk = cfg_.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    Tensor h = h0;
    if (drop)
        h = dropout(h, cfg_.dropout_rate, *dropout_rng);
    for (const LayerParams& l : layers_) {
        std::vector<Tensor> head_ctx;
        std::vector<Tensor> head_attn;
        for (std::size_t a = 0; a < cfg_.num_heads; ++a) {
            Tensor q = add_bias(linear(h, bind(l.wq[a])), bind(l.bq[a]));
            Tensor k = add_bias(linear(h, bind(l.wk[a])), bind(l.bk[a]));
            Tensor v = add_bias(linear(h, bind(l.wv[a])), bind(l.bv[a]));
            Tensor scores = add(scale(bmm_nt(q, k), inv_sqrt_dk), mask_bias);
            Tensor attn = softmax_rows(scores);
            head_attn.push_back(attn);
            Tensor attn_used = drop ? dropout(attn, cfg_.dropout_rate, *dropout_rng) : attn;
            head_ctx.push_back(bmm(attn_used, v));
        }
        Tensor mo = add_bias(linear(concat_lastdim(head_ctx), bind(l.wo)), bind(l.bo));
        if (drop)
            mo = dropout(mo, cfg_.dropout_rate, *dropout_rng);
        h = layer_norm(add(h, mo), bind(l.ln1_g), bind(l.ln1_b));
        Tensor f = add_bias(linear(gelu(add_bias(linear(h, bind(l.w1)), bind(l.b1))),
                                   bind(l.w2)),
                            bind(l.b2));
        if (drop)
            f = dropout(f, cfg_.dropout_rate, *dropout_rng);
        h = layer_norm(add(h, f), bind(l.ln2_g), bind(l.ln2_b));
        trace.hidden.push_back(h);
        trace.cls.push_back(select_pos(h, 0));
        trace.attn.push_back(std::move(head_attn));
    }
    trace.logits = add_bias(linear(select_pos(h, 0), bind(head_w_)), bind(head_b_));
    return trace;
}

std::vector<std::pair<std::string, Tensor>> TransformerModel::named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("tok_emb", tok_emb_);
    out.emplace_back("pos_emb", pos_emb_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerParams& l = layers_[i];
        const std::string base = "layers." + std::to_string(i) + ".";
        for (std::size_t a = 0; a < cfg_.num_heads; ++a) {
            const std::string h = base + "heads." + std::to_string(a) + ".";
            out.emplace_back(h + "wq", l.wq[a]);
            out.emplace_back(h + "bq", l.bq[a]);
            out.emplace_back(h + "wk", l.wk[a]);
            out.emplace_back(h + "bk", l.bk[a]);
            out.emplace_back(h + "wv", l.wv[a]);
            out.emplace_back(h + "bv", l.bv[a]);
        }
        out.emplace_back(base + "wo", l.wo);
        out.emplace_back(base + "bo", l.bo);
        out.emplace_back(base + "ln1_g", l.ln1_g);
        out.emplace_back(base + "ln1_b", l.ln1_b);
        out.emplace_back(base + "w1", l.w1);
        out.emplace_back(base + "b1", l.b1);
        out.emplace_back(base + "w2", l.w2);
        out.emplace_back(base + "b2", l.b2);
        out.emplace_back(base + "ln2_g", l.ln2_g);
        out.emplace_back(base + "ln2_b", l.ln2_b);
    }
    out.emplace_back("head_w", head_w_);
    out.emplace_back("head_b", head_b_);
    return out;
}

std::size_t TransformerModel::param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_params())
        n += t.size();
    return n;
}

TransformerModel TransformerModel::clone() const {
    TransformerModel out;
    out.cfg_ = cfg_;
    out.tok_emb_ = deep_copy(tok_emb_);
    out.pos_emb_ = deep_copy(pos_emb_);
    out.layers_.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerParams& src = layers_[i];
        LayerParams& dst = out.layers_[i];
        for (std::size_t a = 0; a < cfg_.num_heads; ++a) {
            dst.wq.push_back(deep_copy(src.wq[a]));
            dst.bq.push_back(deep_copy(src.bq[a]));
            dst.wk.push_back(deep_copy(src.wk[a]));
            dst.bk.push_back(deep_copy(src.bk[a]));
            dst.wv.push_back(deep_copy(src.wv[a]));
            dst.bv.push_back(deep_copy(src.bv[a]));
        }
        dst.wo = deep_copy(src.wo);
        dst.bo = deep_copy(src.bo);
        dst.ln1_g = deep_copy(src.ln1_g);
        dst.ln1_b = deep_copy(src.ln1_b);
        dst.w1 = deep_copy(src.w1);
        dst.b1 = deep_copy(src.b1);
        dst.w2 = deep_copy(src.w2);
        dst.b2 = deep_copy(src.b2);
        dst.ln2_g = deep_copy(src.ln2_g);
        dst.ln2_b = deep_copy(src.ln2_b);
    }
    out.head_w_ = deep_copy(head_w_);
    out.head_b_ = deep_copy(head_b_);
    return out;
}

} // namespace ildlab
