#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>

#include "ildlab/checkpoint.hpp"
#include "ildlab/model.hpp"
#include "ildlab/rng.hpp"

using namespace ildlab;

namespace {

using Params = std::map<std::string, Tensor>;

Params param_map(const TransformerModel& m) {
    Params p;
    for (auto& [name, t] : m.named_params())
        p.emplace(name, t);
    return p;
}

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.num_layers = 2;
    cfg.hidden_dim = 8;
    cfg.num_heads = 2;
    cfg.ffn_dim = 16;
    cfg.vocab_size = 12;
    cfg.max_seq_len = 8;
    cfg.num_classes = 3;
    cfg.dropout_rate = 0.0;
    return cfg;
}

Batch toy_batch() {
    Batch b;
    b.batch_size = 2;
    b.seq_len = 5;
    b.tokens = {CLS_ID, 4, 5, 6, PAD_ID, CLS_ID, 7, 8, 9, 10};
    b.mask = {1, 1, 1, 1, 0, 1, 1, 1, 1, 1};
    b.labels = {0, 1};
    b.clean_labels = {0, 1};
    return b;
}

// From-scratch forward with plain loops, no tensor library. Used as the
// independent oracle for the traced forward.
struct OracleOut {
    std::vector<std::vector<double>> hidden;
    std::vector<std::vector<std::vector<double>>> attn;
    std::vector<double> logits;
};

double oracle_gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

std::vector<double> oracle_layer_norm(const std::vector<double>& x, const Tensor& g,
                                      const Tensor& b, std::size_t rows, std::size_t d) {
    std::vector<double> y(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            mean += x[r * d + j];
        mean /= d;
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            var += (x[r * d + j] - mean) * (x[r * d + j] - mean);
        var /= d;
        const double inv = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t j = 0; j < d; ++j)
            y[r * d + j] = g.v()[j] * ((x[r * d + j] - mean) * inv) + b.v()[j];
    }
    return y;
}

OracleOut oracle_forward(const Params& p, const ModelConfig& cfg, const Batch& batch) {
    const std::size_t B = batch.batch_size, S = batch.seq_len, D = cfg.hidden_dim;
    const std::size_t A = cfg.num_heads, K = D / A, F = cfg.ffn_dim, C = cfg.num_classes;
    const auto& tok = p.at("tok_emb").v();
    const auto& pos = p.at("pos_emb").v();
    OracleOut out;
    std::vector<double> h(B * S * D);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < S; ++t)
            for (std::size_t d = 0; d < D; ++d)
                h[(b * S + t) * D + d] =
                    tok[batch.tokens[b * S + t] * D + d] + pos[t * D + d];
    out.hidden.push_back(h);

    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const std::string base = "layers." + std::to_string(l) + ".";
        std::vector<double> cat(B * S * D, 0.0);
        std::vector<std::vector<double>> layer_attn;
        for (std::size_t a = 0; a < A; ++a) {
            const std::string hb = base + "heads." + std::to_string(a) + ".";
            const auto& wq = p.at(hb + "wq").v();
            const auto& bq = p.at(hb + "bq").v();
            const auto& wk = p.at(hb + "wk").v();
            const auto& bk = p.at(hb + "bk").v();
            const auto& wv = p.at(hb + "wv").v();
            const auto& bv = p.at(hb + "bv").v();
            std::vector<double> q(B * S * K), k(B * S * K), v(B * S * K);
            for (std::size_t r = 0; r < B * S; ++r)
                for (std::size_t x = 0; x < K; ++x) {
                    double sq = bq[x], sk = bk[x], sv = bv[x];
                    for (std::size_t d = 0; d < D; ++d) {
                        sq += h[r * D + d] * wq[d * K + x];
                        sk += h[r * D + d] * wk[d * K + x];
                        sv += h[r * D + d] * wv[d * K + x];
                    }
                    q[r * K + x] = sq;
                    k[r * K + x] = sk;
                    v[r * K + x] = sv;
                }
            std::vector<double> attn(B * S * S);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < S; ++i) {
                    std::vector<double> row(S);
                    for (std::size_t j = 0; j < S; ++j) {
                        double s = 0.0;
                        for (std::size_t x = 0; x < K; ++x)
                            s += q[(b * S + i) * K + x] * k[(b * S + j) * K + x];
                        row[j] = s / std::sqrt(static_cast<double>(K)) +
                                 (batch.mask[b * S + j] == 0.0 ? -1e9 : 0.0);
                    }
                    double z = 0.0;
                    for (std::size_t j = 0; j < S; ++j)
                        z += std::exp(row[j]);
                    for (std::size_t j = 0; j < S; ++j)
                        attn[(b * S + i) * S + j] = std::exp(row[j]) / z;
                }
            layer_attn.push_back(attn);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < S; ++i)
                    for (std::size_t x = 0; x < K; ++x) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < S; ++j)
                            s += attn[(b * S + i) * S + j] * v[(b * S + j) * K + x];
                        cat[(b * S + i) * D + a * K + x] = s;
                    }
        }
        out.attn.push_back(std::move(layer_attn));
        const auto& wo = p.at(base + "wo").v();
        const auto& bo = p.at(base + "bo").v();
        std::vector<double> res(B * S * D);
        for (std::size_t r = 0; r < B * S; ++r)
            for (std::size_t d = 0; d < D; ++d) {
                double s = bo[d];
                for (std::size_t e = 0; e < D; ++e)
                    s += cat[r * D + e] * wo[e * D + d];
                res[r * D + d] = h[r * D + d] + s;
            }
        std::vector<double> h1 =
            oracle_layer_norm(res, p.at(base + "ln1_g"), p.at(base + "ln1_b"), B * S, D);
        const auto& w1 = p.at(base + "w1").v();
        const auto& b1 = p.at(base + "b1").v();
        const auto& w2 = p.at(base + "w2").v();
        const auto& b2 = p.at(base + "b2").v();
        std::vector<double> ff(B * S * D);
        for (std::size_t r = 0; r < B * S; ++r) {
            std::vector<double> mid(F);
            for (std::size_t f = 0; f < F; ++f) {
                double s = b1[f];
                for (std::size_t d = 0; d < D; ++d)
                    s += h1[r * D + d] * w1[d * F + f];
                mid[f] = oracle_gelu(s);
            }
            for (std::size_t d = 0; d < D; ++d) {
                double s = b2[d];
                for (std::size_t f = 0; f < F; ++f)
                    s += mid[f] * w2[f * D + d];
                ff[r * D + d] = h1[r * D + d] + s;
            }
        }
        h = oracle_layer_norm(ff, p.at(base + "ln2_g"), p.at(base + "ln2_b"), B * S, D);
        out.hidden.push_back(h);
    }
    const auto& hw = p.at("head_w").v();
    const auto& hb = p.at("head_b").v();
    out.logits.resize(B * C);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < C; ++c) {
            double s = hb[c];
            for (std::size_t d = 0; d < D; ++d)
                s += h[(b * S) * D + d] * hw[d * C + c];
            out.logits[b * C + c] = s;
        }
    return out;
}

} // namespace

TEST_CASE("two-layer forward matches the straight-line oracle") {
    TransformerModel model(toy_config(), 314);
    Batch batch = toy_batch();
    ForwardTrace trace = model.forward(batch);
    OracleOut want = oracle_forward(param_map(model), model.config(), batch);

    REQUIRE(trace.hidden.size() == 3);
    for (std::size_t l = 0; l < trace.hidden.size(); ++l)
        for (std::size_t i = 0; i < trace.hidden[l].size(); ++i)
            CHECK(std::abs(trace.hidden[l].v()[i] - want.hidden[l][i]) < 1e-10);
    REQUIRE(trace.attn.size() == 2);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t i = 0; i < trace.attn[l][a].size(); ++i)
                CHECK(std::abs(trace.attn[l][a].v()[i] - want.attn[l][a][i]) < 1e-10);
    for (std::size_t i = 0; i < trace.logits.size(); ++i)
        CHECK(std::abs(trace.logits.v()[i] - want.logits[i]) < 1e-10);
}

TEST_CASE("attention rows are stochastic and pads get no mass") {
    TransformerModel model(toy_config(), 7);
    Batch batch = toy_batch();
    ForwardTrace trace = model.forward(batch);
    const std::size_t S = batch.seq_len;
    for (const auto& layer : trace.attn)
        for (const auto& head : layer)
            for (std::size_t b = 0; b < batch.batch_size; ++b)
                for (std::size_t i = 0; i < S; ++i) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < S; ++j) {
                        const double a = head.v()[(b * S + i) * S + j];
                        s += a;
                        if (batch.mask[b * S + j] == 0.0)
                            CHECK(a < 1e-12);
                    }
                    CHECK(std::abs(s - 1.0) < 1e-10);
                }
}

TEST_CASE("zero query and key weights give uniform attention over valid keys") {
    TransformerModel model(toy_config(), 8);
    Params p = param_map(model);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t a = 0; a < 2; ++a) {
            const std::string hb = "layers." + std::to_string(l) + ".heads." +
                                   std::to_string(a) + ".";
            std::fill(p.at(hb + "wq").v().begin(), p.at(hb + "wq").v().end(), 0.0);
            std::fill(p.at(hb + "wk").v().begin(), p.at(hb + "wk").v().end(), 0.0);
        }
    Batch batch = toy_batch();
    ForwardTrace trace = model.forward(batch);
    const std::size_t S = batch.seq_len;
    for (const auto& layer : trace.attn)
        for (const auto& head : layer)
            for (std::size_t b = 0; b < batch.batch_size; ++b) {
                std::size_t valid = 0;
                for (std::size_t j = 0; j < S; ++j)
                    valid += batch.mask[b * S + j] != 0.0;
                for (std::size_t i = 0; i < S; ++i)
                    for (std::size_t j = 0; j < S; ++j) {
                        const double a = head.v()[(b * S + i) * S + j];
                        const double want =
                            batch.mask[b * S + j] == 0.0 ? 0.0 : 1.0 / valid;
                        CHECK(std::abs(a - want) < 1e-12);
                    }
            }
}

TEST_CASE("single-token sequences have degenerate attention") {
    ModelConfig cfg = toy_config();
    TransformerModel model(cfg, 9);
    Batch b;
    b.batch_size = 2;
    b.seq_len = 1;
    b.tokens = {CLS_ID, CLS_ID};
    b.mask = {1, 1};
    b.labels = {0, 0};
    b.clean_labels = {0, 0};
    ForwardTrace trace = model.forward(b);
    for (const auto& layer : trace.attn)
        for (const auto& head : layer)
            for (double a : head.v())
                CHECK(a == 1.0);
}

TEST_CASE("forward on embeddings equals forward on tokens") {
    TransformerModel model(toy_config(), 10);
    Batch batch = toy_batch();
    Tensor h0 = model.embed(batch);
    ForwardTrace via_embed = model.forward_embedded(h0, batch.mask);
    ForwardTrace direct = model.forward(batch);
    for (std::size_t i = 0; i < direct.logits.size(); ++i)
        CHECK(via_embed.logits.v()[i] == direct.logits.v()[i]);
    for (std::size_t l = 0; l < direct.hidden.size(); ++l)
        for (std::size_t i = 0; i < direct.hidden[l].size(); ++i)
            CHECK(via_embed.hidden[l].v()[i] == direct.hidden[l].v()[i]);
}

TEST_CASE("same token at two positions differs by the positional delta") {
    TransformerModel model(toy_config(), 11);
    Batch b;
    b.batch_size = 1;
    b.seq_len = 2;
    b.tokens = {5, 5};
    b.mask = {1, 1};
    b.labels = {0};
    b.clean_labels = {0};
    Tensor e = model.embed(b);
    Params p = param_map(model);
    const auto& pos = p.at("pos_emb").v();
    const std::size_t D = model.config().hidden_dim;
    for (std::size_t d = 0; d < D; ++d) {
        const double delta = e.v()[d] - e.v()[D + d];
        CHECK(std::abs(delta - (pos[d] - pos[D + d])) < 1e-12);
    }
}

TEST_CASE("forward is deterministic in eval mode") {
    TransformerModel model(toy_config(), 12);
    Batch batch = toy_batch();
    ForwardTrace t1 = model.forward(batch);
    ForwardTrace t2 = model.forward(batch);
    for (std::size_t i = 0; i < t1.logits.size(); ++i)
        CHECK(t1.logits.v()[i] == t2.logits.v()[i]);
}

TEST_CASE("permuting the batch permutes outputs identically") {
    TransformerModel model(toy_config(), 13);
    Batch batch = toy_batch();
    Batch swapped;
    swapped.batch_size = 2;
    swapped.seq_len = 5;
    swapped.tokens.assign(batch.tokens.begin() + 5, batch.tokens.end());
    swapped.tokens.insert(swapped.tokens.end(), batch.tokens.begin(),
                          batch.tokens.begin() + 5);
    swapped.mask.assign(batch.mask.begin() + 5, batch.mask.end());
    swapped.mask.insert(swapped.mask.end(), batch.mask.begin(), batch.mask.begin() + 5);
    swapped.labels = {batch.labels[1], batch.labels[0]};
    swapped.clean_labels = swapped.labels;
    ForwardTrace a = model.forward(batch);
    ForwardTrace b = model.forward(swapped);
    const std::size_t C = model.config().num_classes;
    for (std::size_t c = 0; c < C; ++c) {
        CHECK(a.logits.v()[c] == b.logits.v()[C + c]);
        CHECK(a.logits.v()[C + c] == b.logits.v()[c]);
    }
}

TEST_CASE("train mode with dropout needs an rng and changes activations") {
    ModelConfig cfg = toy_config();
    cfg.dropout_rate = 0.1;
    TransformerModel model(cfg, 14);
    Batch batch = toy_batch();
    CHECK_THROWS_AS(model.forward(batch, true), ContractError);
    Rng rng(5);
    ForwardTrace dropped = model.forward(batch, true, nullptr, &rng);
    ForwardTrace clean = model.forward(batch);
    bool differs = false;
    for (std::size_t i = 0; i < clean.logits.size(); ++i)
        differs |= dropped.logits.v()[i] != clean.logits.v()[i];
    CHECK(differs);
}

TEST_CASE("config validation rejects bad geometry") {
    ModelConfig cfg = toy_config();
    cfg.hidden_dim = 9;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.max_seq_len = 1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = toy_config();
    cfg.num_layers = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("forward rejects out-of-vocab tokens and overlong sequences") {
    TransformerModel model(toy_config(), 15);
    Batch bad = toy_batch();
    bad.tokens[1] = 99;
    CHECK_THROWS_AS(model.forward(bad), DataError);
    Batch longb;
    longb.batch_size = 1;
    longb.seq_len = 9;
    longb.tokens.assign(9, CLS_ID);
    longb.mask.assign(9, 1.0);
    longb.labels = {0};
    longb.clean_labels = {0};
    CHECK_THROWS_AS(model.forward(longb), DataError);
}

TEST_CASE("parameter count is a pure function of config") {
    ModelConfig cfg = toy_config();
    TransformerModel m1(cfg, 1), m2(cfg, 999);
    CHECK(m1.param_count() == m2.param_count());
    const std::size_t D = cfg.hidden_dim, K = cfg.head_dim(), A = cfg.num_heads;
    const std::size_t per_layer = A * 3 * (D * K + K) + (D * D + D) + 2 * D +
                                  (D * cfg.ffn_dim + cfg.ffn_dim) +
                                  (cfg.ffn_dim * D + D) + 2 * D;
    const std::size_t want = cfg.vocab_size * D + cfg.max_seq_len * D +
                             cfg.num_layers * per_layer + D * cfg.num_classes +
                             cfg.num_classes;
    CHECK(m1.param_count() == want);
}

TEST_CASE("same init seed reproduces parameters exactly") {
    TransformerModel m1(toy_config(), 77), m2(toy_config(), 77);
    auto p1 = m1.named_params(), p2 = m2.named_params();
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i)
        for (std::size_t j = 0; j < p1[i].second.size(); ++j)
            CHECK(p1[i].second.v()[j] == p2[i].second.v()[j]);
}

TEST_CASE("truncated init copies embeddings and bottom layers bit-for-bit") {
    ModelConfig cfg = toy_config();
    cfg.num_layers = 4;
    TransformerModel teacher(cfg, 21);
    TransformerModel student = TransformerModel::init_student_truncated(teacher, 2, 22);
    CHECK(student.config().num_layers == 2);
    Params tp = param_map(teacher), sp = param_map(student);
    for (const auto& [name, t] : sp) {
        if (name == "head_w" || name == "head_b")
            continue;
        const auto& src = tp.at(name);
        REQUIRE(src.shape == t.shape);
        for (std::size_t i = 0; i < t.size(); ++i)
            CHECK(t.v()[i] == src.v()[i]);
        CHECK(t.values.get() != src.values.get());
    }
    bool head_differs = false;
    for (std::size_t i = 0; i < sp.at("head_w").size(); ++i)
        head_differs |= sp.at("head_w").v()[i] != tp.at("head_w").v()[i];
    CHECK(head_differs);
    CHECK_THROWS_AS(TransformerModel::init_student_truncated(teacher, 5, 1), ConfigError);
}

TEST_CASE("full-depth truncated student matches teacher hidden states") {
    ModelConfig cfg = toy_config();
    TransformerModel teacher(cfg, 23);
    TransformerModel student =
        TransformerModel::init_student_truncated(teacher, cfg.num_layers, 24);
    Batch batch = toy_batch();
    ForwardTrace tt = teacher.forward(batch);
    ForwardTrace st = student.forward(batch);
    for (std::size_t l = 0; l < tt.hidden.size(); ++l)
        for (std::size_t i = 0; i < tt.hidden[l].size(); ++i)
            CHECK(st.hidden[l].v()[i] == tt.hidden[l].v()[i]);
}

TEST_CASE("checkpoint round trip is bit-exact") {
    TransformerModel model(toy_config(), 55);
    const std::string prefix = "ckpt_roundtrip_test";
    checkpoint::save_model(prefix, model);
    TransformerModel loaded = checkpoint::load_model(prefix);
    CHECK(loaded.config() == model.config());
    auto pa = model.named_params(), pb = loaded.named_params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        for (std::size_t j = 0; j < pa[i].second.size(); ++j)
            CHECK(pa[i].second.v()[j] == pb[i].second.v()[j]);
    }
    Batch batch = toy_batch();
    ForwardTrace ta = model.forward(batch);
    ForwardTrace tb = loaded.forward(batch);
    for (std::size_t i = 0; i < ta.logits.size(); ++i)
        CHECK(ta.logits.v()[i] == tb.logits.v()[i]);
    std::remove((prefix + ".json").c_str());
    std::remove((prefix + ".bin").c_str());
}

TEST_CASE("loading a missing checkpoint raises a data error") {
    CHECK_THROWS_AS(checkpoint::load_model("no_such_checkpoint"), DataError);
}

TEST_CASE("auxiliary tensor store round trips") {
    std::vector<std::pair<std::string, Tensor>> ts;
    ts.emplace_back("proj", Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    ts.emplace_back("bias", Tensor({3}, {0.5, -0.5, 0.25}));
    const std::string prefix = "aux_roundtrip_test";
    checkpoint::save_tensors(prefix, ts);
    auto back = checkpoint::load_tensors(prefix);
    REQUIRE(back.size() == 2);
    CHECK(back[0].first == "proj");
    CHECK(back[0].second.shape == Shape{2, 3});
    for (std::size_t i = 0; i < 6; ++i)
        CHECK(back[0].second.v()[i] == ts[0].second.v()[i]);
    std::remove((prefix + ".json").c_str());
    std::remove((prefix + ".bin").c_str());
}

TEST_CASE("gradients flow through a full forward to every used parameter") {
    TransformerModel model(toy_config(), 99);
    Batch batch = toy_batch();
    Tape tape;
    ForwardTrace trace = model.forward(batch, false, &tape);
    Tensor loss = cross_entropy_labels(trace.logits, batch.labels);
    tape.backward(loss);
    for (auto& [name, t] : model.named_params()) {
        double norm = 0.0;
        for (double g : tape.grad(t))
            norm += g * g;
        INFO(name);
        CHECK(norm > 0.0);
    }
}
