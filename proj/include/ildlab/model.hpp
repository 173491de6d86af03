#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ildlab/batch.hpp"
#include "ildlab/tensor.hpp"

namespace ildlab {

class Rng;

struct ModelConfig {
    std::size_t num_layers = 2;
    std::size_t hidden_dim = 64;
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 128;
    std::size_t vocab_size = 64;
    std::size_t max_seq_len = 16;
    std::size_t num_classes = 2;
    double dropout_rate = 0.1;

    std::size_t head_dim() const;
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

// Everything a distillation objective can read from one forward pass.
// hidden[0] is the embedding output; hidden[l] for l in 1..num_layers are the
// encoder outputs. attn[l-1][a] is layer l's head-a attention, [batch,seq,seq],
// recorded before attention dropout so each row is a distribution. cls[l] is
// hidden[l] at position 0. row_mask repeats the batch pad mask, one entry per
// (batch,seq) row.
struct ForwardTrace {
    std::size_t batch_size = 0;
    std::size_t seq_len = 0;
    std::vector<Tensor> hidden;
    std::vector<std::vector<Tensor>> attn;
    std::vector<Tensor> cls;
    Tensor logits;
    std::vector<double> row_mask;
};

struct LayerParams {
    std::vector<Tensor> wq, bq, wk, bk, wv, bv;
    Tensor wo, bo;
    Tensor ln1_g, ln1_b;
    Tensor w1, b1, w2, b2;
    Tensor ln2_g, ln2_b;
};

// Post-layer-norm Transformer encoder with GELU feed-forward, learned
// absolute positional embeddings, per-head QKV projections, and a task head
// reading the final [CLS] vector.
class TransformerModel {
public:
    TransformerModel(ModelConfig cfg, std::uint64_t init_seed);

    // Student sharing the teacher's embeddings and bottom m layers
    // (bit-identical copies); the task head is freshly initialized.
    static TransformerModel init_student_truncated(const TransformerModel& teacher,
                                                   std::size_t m, std::uint64_t head_seed);

    const ModelConfig& config() const { return cfg_; }

    // Token + positional embeddings, [batch, seq, hidden]. Deterministic;
    // dropout is applied inside forward_embedded, not here.
    Tensor embed(const Batch& batch, Tape* tape = nullptr) const;

    ForwardTrace forward(const Batch& batch, bool train_mode = false, Tape* tape = nullptr,
                         Rng* dropout_rng = nullptr) const;
    // Same encoder on precomputed (possibly mixed) embeddings. mask is
    // row-major [batch, seq].
    ForwardTrace forward_embedded(const Tensor& h0, const std::vector<double>& mask,
                                  bool train_mode = false, Tape* tape = nullptr,
                                  Rng* dropout_rng = nullptr) const;

    // Stable ordered registry; tensors share the model's storage, so writing
    // through them (optimizers, checkpoint load) mutates the model.
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    std::size_t param_count() const;

    TransformerModel clone() const;

private:
    TransformerModel() = default;

    ModelConfig cfg_;
    Tensor tok_emb_;
    Tensor pos_emb_;
    std::vector<LayerParams> layers_;
    Tensor head_w_;
    Tensor head_b_;
};

} // namespace ildlab
