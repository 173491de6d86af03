#include "ildlab/tensor.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>
#include <utility>

#include "ildlab/rng.hpp"

namespace ildlab {

std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s)
        n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i)
        os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

Tensor::Tensor() : values(std::make_shared<std::vector<double>>()) {}

Tensor::Tensor(Shape s, std::vector<double> v)
    : shape(std::move(s)), values(std::make_shared<std::vector<double>>(std::move(v))) {
    if (numel(shape) != values->size())
        throw DimError("tensor: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values->size()) + " values");
}

Tensor Tensor::zeros(Shape s) {
    std::vector<double> v(numel(s), 0.0);
    return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::full(Shape s, double x) {
    std::vector<double> v(numel(s), x);
    return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::scalar(double x) {
    return Tensor(Shape{}, std::vector<double>{x});
}

std::size_t Tensor::dim(std::size_t i) const {
    if (i >= shape.size())
        throw DimError("tensor: axis " + std::to_string(i) + " out of range for " +
                       shape_str(shape));
    return shape[i];
}

double Tensor::item() const {
    if (size() != 1)
        throw ContractError("item: tensor has " + std::to_string(size()) + " values");
    return (*values)[0];
}

// ---- tape ----------------------------------------------------------------

Tensor Tape::leaf(const Tensor& t) {
    if (t.tracked()) {
        if (t.tape != this)
            throw ContractError("leaf: tensor already tracked on another tape");
        return t;
    }
    Tensor out = t;
    out.tape = this;
    const auto it = leaf_nodes_.find(t.values.get());
    if (it != leaf_nodes_.end()) {
        out.node = it->second;
        return out;
    }
    out.node = record(t.size(), nullptr);
    leaf_nodes_.emplace(t.values.get(), out.node);
    return out;
}

int Tape::record(std::size_t nvals, Pull pull) {
    if (done_)
        throw ContractError("tape: recording after backward");
    nodes_.push_back(Node{nvals, std::move(pull)});
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::accumulate(int node, const double* g, std::size_t n) {
    auto& slot = grads_[static_cast<std::size_t>(node)];
    if (slot.empty()) {
        slot.assign(g, g + n);
        return;
    }
    for (std::size_t i = 0; i < n; ++i)
        slot[i] += g[i];
}

void Tape::backward(const Tensor& loss) {
    if (done_)
        throw ContractError("backward: tape already consumed");
    if (loss.tape != this)
        throw ContractError("backward: loss not recorded on this tape");
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape));
    grads_.assign(nodes_.size(), {});
    const double seed = 1.0;
    accumulate(loss.node, &seed, 1);
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (grads_[i].empty() || !nodes_[i].pull)
            continue;
        nodes_[i].pull(*this, grads_[i]);
    }
    done_ = true;
}

std::vector<double> Tape::grad(const Tensor& t) const {
    if (!done_)
        throw ContractError("grad: backward has not run");
    int node = -1;
    if (t.tracked()) {
        if (t.tape != this)
            throw ContractError("grad: tensor tracked on another tape");
        node = t.node;
    } else {
        const auto it = leaf_nodes_.find(t.values.get());
        if (it != leaf_nodes_.end())
            node = it->second;
    }
    if (node < 0)
        return std::vector<double>(t.size(), 0.0);
    const auto& slot = grads_[static_cast<std::size_t>(node)];
    if (slot.empty())
        return std::vector<double>(t.size(), 0.0);
    return slot;
}

// ---- kernels ---------------------------------------------------------------

namespace kern {

void mm_acc(const double* __restrict a, const double* __restrict b, double* __restrict c,
            std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const double ail = ai[l];
            const double* bl = b + l * n;
            for (std::size_t j = 0; j < n; ++j)
                ci[j] += ail * bl[j];
        }
    }
}

void mm_nt_acc(const double* __restrict a, const double* __restrict b, double* __restrict c,
               std::size_t m, std::size_t k, std::size_t n) {
    // Dot products over k; lane-split accumulators keep the sum order fixed
    // while still letting the compiler vectorize the lane loop.
    constexpr std::size_t W = 8;
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc[W] = {0, 0, 0, 0, 0, 0, 0, 0};
            std::size_t l = 0;
            for (; l + W <= k; l += W)
                for (std::size_t w = 0; w < W; ++w)
                    acc[w] += ai[l + w] * bj[l + w];
            double tail = 0.0;
            for (; l < k; ++l)
                tail += ai[l] * bj[l];
            const double s01 = acc[0] + acc[1];
            const double s23 = acc[2] + acc[3];
            const double s45 = acc[4] + acc[5];
            const double s67 = acc[6] + acc[7];
            ci[j] += ((s01 + s23) + (s45 + s67)) + tail;
        }
    }
}

void mm_tn_acc(const double* __restrict a, const double* __restrict b, double* __restrict c,
               std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t l = 0; l < k; ++l) {
        const double* al = a + l * m;
        const double* bl = b + l * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double ali = al[i];
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j)
                ci[j] += ali * bl[j];
        }
    }
}

} // namespace kern

// ---- op helpers ------------------------------------------------------------

namespace {

Tape* op_tape(std::initializer_list<const Tensor*> ts, const char* op) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->tracked())
            continue;
        if (tape == nullptr)
            tape = t->tape;
        else if (tape != t->tape)
            throw ContractError(std::string(op) + ": operands live on different tapes");
    }
    return tape;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape)
        throw DimError(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                       shape_str(b.shape));
}

void require_rank(const Tensor& t, std::size_t r, const char* op) {
    if (t.rank() != r)
        throw DimError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                       shape_str(t.shape));
}

std::size_t last_dim(const Tensor& t, const char* op) {
    if (t.rank() == 0)
        throw DimError(std::string(op) + ": scalar input");
    return t.shape.back();
}

Tensor finish(Shape shape, std::vector<double> vals, Tape* tape, Tape::Pull pull) {
    Tensor out(std::move(shape), std::move(vals));
    if (tape != nullptr) {
        out.tape = tape;
        out.node = tape->record(out.size(), std::move(pull));
    }
    return out;
}

} // namespace

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tape* tape = op_tape({&a, &b}, "add");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = a.v()[i] + b.v()[i];
    return finish(a.shape, std::move(y), tape, [a, b](Tape& t, const std::vector<double>& g) {
        if (a.tracked())
            t.accumulate(a.node, g.data(), g.size());
        if (b.tracked())
            t.accumulate(b.node, g.data(), g.size());
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tape* tape = op_tape({&a, &b}, "sub");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = a.v()[i] - b.v()[i];
    return finish(a.shape, std::move(y), tape, [a, b](Tape& t, const std::vector<double>& g) {
        if (a.tracked())
            t.accumulate(a.node, g.data(), g.size());
        if (b.tracked()) {
            std::vector<double> gb(g.size());
            for (std::size_t i = 0; i < g.size(); ++i)
                gb[i] = -g[i];
            t.accumulate(b.node, gb.data(), gb.size());
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tape* tape = op_tape({&a, &b}, "mul");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = a.v()[i] * b.v()[i];
    return finish(a.shape, std::move(y), tape, [a, b](Tape& t, const std::vector<double>& g) {
        std::vector<double> buf(g.size());
        if (a.tracked()) {
            for (std::size_t i = 0; i < g.size(); ++i)
                buf[i] = g[i] * b.v()[i];
            t.accumulate(a.node, buf.data(), buf.size());
        }
        if (b.tracked()) {
            for (std::size_t i = 0; i < g.size(); ++i)
                buf[i] = g[i] * a.v()[i];
            t.accumulate(b.node, buf.data(), buf.size());
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    Tape* tape = op_tape({&a}, "scale");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = a.v()[i] * c;
    return finish(a.shape, std::move(y), tape, [a, c](Tape& t, const std::vector<double>& g) {
        std::vector<double> ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i)
            ga[i] = g[i] * c;
        t.accumulate(a.node, ga.data(), ga.size());
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    Tape* tape = op_tape({&a}, "add_scalar");
    std::vector<double> y(a.size());
    for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = a.v()[i] + c;
    return finish(a.shape, std::move(y), tape, [a](Tape& t, const std::vector<double>& g) {
        t.accumulate(a.node, g.data(), g.size());
    });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
    require_rank(bias, 1, "add_bias");
    const std::size_t d = last_dim(x, "add_bias");
    if (bias.dim(0) != d)
        throw DimError("add_bias: bias " + shape_str(bias.shape) + " vs input " +
                       shape_str(x.shape));
    Tape* tape = op_tape({&x, &bias}, "add_bias");
    const std::size_t rows = x.size() / d;
    std::vector<double> y(x.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j)
            y[r * d + j] = x.v()[r * d + j] + bias.v()[j];
    return finish(x.shape, std::move(y), tape,
                  [x, bias, rows, d](Tape& t, const std::vector<double>& g) {
                      if (x.tracked())
                          t.accumulate(x.node, g.data(), g.size());
                      if (bias.tracked()) {
                          std::vector<double> gb(d, 0.0);
                          for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < d; ++j)
                                  gb[j] += g[r * d + j];
                          t.accumulate(bias.node, gb.data(), gb.size());
                      }
                  });
}

// ---- matrix products --------------------------------------------------------

namespace {

// shared backward for a [rows,k] x [k,n] product with flat row-major buffers
void pull_linear(Tape& t, const std::vector<double>& g, const Tensor& x, const Tensor& w,
                 std::size_t rows, std::size_t k, std::size_t n) {
    if (x.tracked()) {
        std::vector<double> gx(rows * k, 0.0);
        kern::mm_nt_acc(g.data(), w.v().data(), gx.data(), rows, n, k);
        t.accumulate(x.node, gx.data(), gx.size());
    }
    if (w.tracked()) {
        std::vector<double> gw(k * n, 0.0);
        kern::mm_tn_acc(x.v().data(), g.data(), gw.data(), k, rows, n);
        t.accumulate(w.node, gw.data(), gw.size());
    }
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    if (a.dim(1) != b.dim(0))
        throw DimError("matmul: inner dims disagree, " + shape_str(a.shape) + " x " +
                       shape_str(b.shape));
    Tape* tape = op_tape({&a, &b}, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> y(m * n, 0.0);
    kern::mm_acc(a.data(), b.data(), y.data(), m, k, n);
    return finish(Shape{m, n}, std::move(y), tape,
                  [a, b, m, k, n](Tape& t, const std::vector<double>& g) {
                      pull_linear(t, g, a, b, m, k, n);
                  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul_nt");
    require_rank(b, 2, "matmul_nt");
    if (a.dim(1) != b.dim(1))
        throw DimError("matmul_nt: inner dims disagree, " + shape_str(a.shape) + " x " +
                       shape_str(b.shape) + "^T");
    Tape* tape = op_tape({&a, &b}, "matmul_nt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    std::vector<double> y(m * n, 0.0);
    kern::mm_nt_acc(a.data(), b.data(), y.data(), m, k, n);
    return finish(Shape{m, n}, std::move(y), tape,
                  [a, b, m, k, n](Tape& t, const std::vector<double>& g) {
                      if (a.tracked()) {
                          std::vector<double> ga(m * k, 0.0);
                          kern::mm_acc(g.data(), b.v().data(), ga.data(), m, n, k);
                          t.accumulate(a.node, ga.data(), ga.size());
                      }
                      if (b.tracked()) {
                          std::vector<double> gb(n * k, 0.0);
                          kern::mm_tn_acc(g.data(), a.v().data(), gb.data(), n, m, k);
                          t.accumulate(b.node, gb.data(), gb.size());
                      }
                  });
}

Tensor linear(const Tensor& x, const Tensor& w) {
    require_rank(w, 2, "linear");
    const std::size_t k = last_dim(x, "linear");
    if (w.dim(0) != k)
        throw DimError("linear: input " + shape_str(x.shape) + " vs weight " +
                       shape_str(w.shape));
    Tape* tape = op_tape({&x, &w}, "linear");
    const std::size_t rows = x.size() / k;
    const std::size_t n = w.dim(1);
    std::vector<double> y(rows * n, 0.0);
    kern::mm_acc(x.data(), w.data(), y.data(), rows, k, n);
    Shape out_shape(x.shape.begin(), x.shape.end() - 1);
    out_shape.push_back(n);
    return finish(std::move(out_shape), std::move(y), tape,
                  [x, w, rows, k, n](Tape& t, const std::vector<double>& g) {
                      pull_linear(t, g, x, w, rows, k, n);
                  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    require_rank(a, 3, "bmm");
    require_rank(b, 3, "bmm");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw DimError("bmm: " + shape_str(a.shape) + " x " + shape_str(b.shape));
    Tape* tape = op_tape({&a, &b}, "bmm");
    const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<double> y(nb * m * n, 0.0);
    for (std::size_t q = 0; q < nb; ++q)
        kern::mm_acc(a.data() + q * m * k, b.data() + q * k * n, y.data() + q * m * n, m, k, n);
    return finish(Shape{nb, m, n}, std::move(y), tape,
                  [a, b, nb, m, k, n](Tape& t, const std::vector<double>& g) {
                      if (a.tracked()) {
                          std::vector<double> ga(nb * m * k, 0.0);
                          for (std::size_t q = 0; q < nb; ++q)
                              kern::mm_nt_acc(g.data() + q * m * n, b.v().data() + q * k * n,
                                              ga.data() + q * m * k, m, n, k);
                          t.accumulate(a.node, ga.data(), ga.size());
                      }
                      if (b.tracked()) {
                          std::vector<double> gb(nb * k * n, 0.0);
                          for (std::size_t q = 0; q < nb; ++q)
                              kern::mm_tn_acc(a.v().data() + q * m * k, g.data() + q * m * n,
                                              gb.data() + q * k * n, k, m, n);
                          t.accumulate(b.node, gb.data(), gb.size());
                      }
                  });
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    require_rank(a, 3, "bmm_nt");
    require_rank(b, 3, "bmm_nt");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw DimError("bmm_nt: " + shape_str(a.shape) + " x " + shape_str(b.shape) + "^T");
    Tape* tape = op_tape({&a, &b}, "bmm_nt");
    const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    std::vector<double> y(nb * m * n, 0.0);
    for (std::size_t q = 0; q < nb; ++q)
        kern::mm_nt_acc(a.data() + q * m * k, b.data() + q * n * k, y.data() + q * m * n, m, k,
                        n);
    return finish(Shape{nb, m, n}, std::move(y), tape,
                  [a, b, nb, m, k, n](Tape& t, const std::vector<double>& g) {
                      if (a.tracked()) {
                          std::vector<double> ga(nb * m * k, 0.0);
                          for (std::size_t q = 0; q < nb; ++q)
                              kern::mm_acc(g.data() + q * m * n, b.v().data() + q * n * k,
                                           ga.data() + q * m * k, m, n, k);
                          t.accumulate(a.node, ga.data(), ga.size());
                      }
                      if (b.tracked()) {
                          std::vector<double> gb(nb * n * k, 0.0);
                          for (std::size_t q = 0; q < nb; ++q)
                              kern::mm_tn_acc(g.data() + q * m * n, a.v().data() + q * m * k,
                                              gb.data() + q * n * k, n, m, k);
                          t.accumulate(b.node, gb.data(), gb.size());
                      }
                  });
}

// ---- structural ------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape s) {
    if (numel(s) != x.size())
        throw DimError("reshape: " + shape_str(x.shape) + " -> " + shape_str(s));
    Tape* tape = op_tape({&x}, "reshape");
    Tensor out;
    out.shape = std::move(s);
    out.values = x.values;
    if (tape != nullptr) {
        out.tape = tape;
        out.node = tape->record(out.size(), [x](Tape& t, const std::vector<double>& g) {
            t.accumulate(x.node, g.data(), g.size());
        });
    }
    return out;
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
    if (parts.empty())
        throw ContractError("concat_lastdim: no inputs");
    Shape lead(parts[0].shape.begin(), parts[0].shape.end() - 1);
    std::vector<const Tensor*> ptrs;
    std::size_t total = 0;
    for (const Tensor& p : parts) {
        if (p.rank() == 0 ||
            Shape(p.shape.begin(), p.shape.end() - 1) != lead)
            throw DimError("concat_lastdim: leading dims disagree, " + shape_str(p.shape) +
                           " vs " + shape_str(parts[0].shape));
        total += p.shape.back();
        ptrs.push_back(&p);
    }
    Tape* tape = nullptr;
    for (const Tensor& p : parts) {
        Tape* t = op_tape({&p}, "concat_lastdim");
        if (t != nullptr) {
            if (tape != nullptr && tape != t)
                throw ContractError("concat_lastdim: operands live on different tapes");
            tape = t;
        }
    }
    const std::size_t rows = numel(lead);
    std::vector<double> y(rows * total);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t d = p.shape.back();
        for (std::size_t r = 0; r < rows; ++r)
            std::memcpy(y.data() + r * total + off, p.data() + r * d, d * sizeof(double));
        off += d;
    }
    Shape out_shape = lead;
    out_shape.push_back(total);
    std::vector<Tensor> held = parts;
    return finish(std::move(out_shape), std::move(y), tape,
                  [held, rows, total](Tape& t, const std::vector<double>& g) {
                      std::size_t off = 0;
                      for (const Tensor& p : held) {
                          const std::size_t d = p.shape.back();
                          if (p.tracked()) {
                              std::vector<double> gp(rows * d);
                              for (std::size_t r = 0; r < rows; ++r)
                                  std::memcpy(gp.data() + r * d, g.data() + r * total + off,
                                              d * sizeof(double));
                              t.accumulate(p.node, gp.data(), gp.size());
                          }
                          off += d;
                      }
                  });
}

Tensor select_pos(const Tensor& x, std::size_t pos) {
    require_rank(x, 3, "select_pos");
    const std::size_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
    if (pos >= s)
        throw DimError("select_pos: position " + std::to_string(pos) + " out of range for " +
                       shape_str(x.shape));
    Tape* tape = op_tape({&x}, "select_pos");
    std::vector<double> y(b * d);
    for (std::size_t i = 0; i < b; ++i)
        std::memcpy(y.data() + i * d, x.data() + (i * s + pos) * d, d * sizeof(double));
    return finish(Shape{b, d}, std::move(y), tape,
                  [x, b, s, d, pos](Tape& t, const std::vector<double>& g) {
                      std::vector<double> gx(b * s * d, 0.0);
                      for (std::size_t i = 0; i < b; ++i)
                          std::memcpy(gx.data() + (i * s + pos) * d, g.data() + i * d,
                                      d * sizeof(double));
                      t.accumulate(x.node, gx.data(), gx.size());
                  });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids,
                        Shape out_lead) {
    require_rank(table, 2, "embedding_lookup");
    if (numel(out_lead) != ids.size())
        throw DimError("embedding_lookup: " + std::to_string(ids.size()) +
                       " ids vs lead shape " + shape_str(out_lead));
    const std::size_t v = table.dim(0), d = table.dim(1);
    for (std::size_t id : ids)
        if (id >= v)
            throw DimError("embedding_lookup: id " + std::to_string(id) +
                           " out of vocabulary of size " + std::to_string(v));
    Tape* tape = op_tape({&table}, "embedding_lookup");
    std::vector<double> y(ids.size() * d);
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::memcpy(y.data() + r * d, table.data() + ids[r] * d, d * sizeof(double));
    Shape out_shape = std::move(out_lead);
    out_shape.push_back(d);
    return finish(std::move(out_shape), std::move(y), tape,
                  [table, ids, v, d](Tape& t, const std::vector<double>& g) {
                      std::vector<double> gt(v * d, 0.0);
                      for (std::size_t r = 0; r < ids.size(); ++r)
                          for (std::size_t j = 0; j < d; ++j)
                              gt[ids[r] * d + j] += g[r * d + j];
                      t.accumulate(table.node, gt.data(), gt.size());
                  });
}

// ---- nonlinearities ---------------------------------------------------------

Tensor gelu(const Tensor& x) {
    Tape* tape = op_tape({&x}, "gelu");
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double xi = x.v()[i];
        y[i] = 0.5 * xi * (1.0 + std::erf(xi * std::numbers::sqrt2 / 2.0));
    }
    return finish(x.shape, std::move(y), tape, [x](Tape& t, const std::vector<double>& g) {
        std::vector<double> gx(g.size());
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double xi = x.v()[i];
            const double cdf = 0.5 * (1.0 + std::erf(xi * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * xi * xi);
            gx[i] = g[i] * (cdf + xi * pdf);
        }
        t.accumulate(x.node, gx.data(), gx.size());
    });
}

Tensor softmax_rows(const Tensor& x) {
    const std::size_t d = last_dim(x, "softmax_rows");
    Tape* tape = op_tape({&x}, "softmax_rows");
    const std::size_t rows = x.size() / d;
    auto yv = std::make_shared<std::vector<double>>(x.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * d;
        double* yr = yv->data() + r * d;
        double mx = xr[0];
        for (std::size_t j = 1; j < d; ++j)
            mx = std::max(mx, xr[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            z += yr[j];
        }
        for (std::size_t j = 0; j < d; ++j)
            yr[j] /= z;
    }
    Tensor out;
    out.shape = x.shape;
    out.values = yv;
    if (tape != nullptr) {
        out.tape = tape;
        out.node = tape->record(out.size(),
                                [x, yv, rows, d](Tape& t, const std::vector<double>& g) {
                                    std::vector<double> gx(g.size());
                                    for (std::size_t r = 0; r < rows; ++r) {
                                        double dot = 0.0;
                                        for (std::size_t j = 0; j < d; ++j)
                                            dot += g[r * d + j] * (*yv)[r * d + j];
                                        for (std::size_t j = 0; j < d; ++j)
                                            gx[r * d + j] =
                                                (*yv)[r * d + j] * (g[r * d + j] - dot);
                                    }
                                    t.accumulate(x.node, gx.data(), gx.size());
                                });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require_rank(gain, 1, "layer_norm");
    require_rank(bias, 1, "layer_norm");
    const std::size_t d = last_dim(x, "layer_norm");
    if (gain.dim(0) != d || bias.dim(0) != d)
        throw DimError("layer_norm: params " + shape_str(gain.shape) + "/" +
                       shape_str(bias.shape) + " vs input " + shape_str(x.shape));
    Tape* tape = op_tape({&x, &gain, &bias}, "layer_norm");
    const std::size_t rows = x.size() / d;
    std::vector<double> y(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mean) * is;
            (*xhat)[r * d + j] = h;
            y[r * d + j] = gain.v()[j] * h + bias.v()[j];
        }
    }
    return finish(x.shape, std::move(y), tape,
                  [x, gain, bias, xhat, inv_std, rows, d](Tape& t,
                                                          const std::vector<double>& g) {
                      if (x.tracked()) {
                          std::vector<double> gx(x.size());
                          for (std::size_t r = 0; r < rows; ++r) {
                              const double* gr = g.data() + r * d;
                              const double* hr = xhat->data() + r * d;
                              double m1 = 0.0, m2 = 0.0;
                              for (std::size_t j = 0; j < d; ++j) {
                                  const double dh = gr[j] * gain.v()[j];
                                  m1 += dh;
                                  m2 += dh * hr[j];
                              }
                              m1 /= static_cast<double>(d);
                              m2 /= static_cast<double>(d);
                              const double is = (*inv_std)[r];
                              for (std::size_t j = 0; j < d; ++j) {
                                  const double dh = gr[j] * gain.v()[j];
                                  gx[r * d + j] = is * (dh - m1 - hr[j] * m2);
                              }
                          }
                          t.accumulate(x.node, gx.data(), gx.size());
                      }
                      if (gain.tracked()) {
                          std::vector<double> gg(d, 0.0);
                          for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < d; ++j)
                                  gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                          t.accumulate(gain.node, gg.data(), gg.size());
                      }
                      if (bias.tracked()) {
                          std::vector<double> gb(d, 0.0);
                          for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < d; ++j)
                                  gb[j] += g[r * d + j];
                          t.accumulate(bias.node, gb.data(), gb.size());
                      }
                  });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw ContractError("dropout: rate must lie in [0,1)");
    if (rate == 0.0)
        return x;
    Tape* tape = op_tape({&x}, "dropout");
    auto mask = std::make_shared<std::vector<double>>(x.size());
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double m = rng.uniform() < rate ? 0.0 : keep_scale;
        (*mask)[i] = m;
        y[i] = x.v()[i] * m;
    }
    return finish(x.shape, std::move(y), tape, [x, mask](Tape& t, const std::vector<double>& g) {
        std::vector<double> gx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i)
            gx[i] = g[i] * (*mask)[i];
        t.accumulate(x.node, gx.data(), gx.size());
    });
}

Tensor l2_normalize_rows(const Tensor& x, double tol) {
    const std::size_t d = last_dim(x, "l2_normalize_rows");
    Tape* tape = op_tape({&x}, "l2_normalize_rows");
    const std::size_t rows = x.size() / d;
    auto yv = std::make_shared<std::vector<double>>(x.size());
    auto norms = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * d;
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            s += xr[j] * xr[j];
        const double n = std::sqrt(s);
        if (n < tol)
            throw NumericError("l2_normalize_rows: row " + std::to_string(r) +
                               " has near-zero norm");
        (*norms)[r] = n;
        for (std::size_t j = 0; j < d; ++j)
            (*yv)[r * d + j] = xr[j] / n;
    }
    Tensor out;
    out.shape = x.shape;
    out.values = yv;
    if (tape != nullptr) {
        out.tape = tape;
        out.node = tape->record(
            out.size(), [x, yv, norms, rows, d](Tape& t, const std::vector<double>& g) {
                std::vector<double> gx(x.size());
                for (std::size_t r = 0; r < rows; ++r) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j)
                        dot += g[r * d + j] * (*yv)[r * d + j];
                    const double n = (*norms)[r];
                    for (std::size_t j = 0; j < d; ++j)
                        gx[r * d + j] = (g[r * d + j] - (*yv)[r * d + j] * dot) / n;
                }
                t.accumulate(x.node, gx.data(), gx.size());
            });
    }
    return out;
}

Tensor mixup(const Tensor& a, const Tensor& b, double lam) {
    require_same_shape(a, b, "mixup");
    if (!(lam >= 0.0 && lam <= 1.0))
        throw ContractError("mixup: lambda must lie in [0,1]");
    Tape* tape = op_tape({&a, &b}, "mixup");
    Tensor out;
    out.shape = a.shape;
    if (lam == 1.0) {
        out.values = a.values;
    } else if (lam == 0.0) {
        out.values = b.values;
    } else {
        out.values = std::make_shared<std::vector<double>>(a.size());
        for (std::size_t i = 0; i < a.size(); ++i)
            (*out.values)[i] = lam * a.v()[i] + (1.0 - lam) * b.v()[i];
    }
    if (tape != nullptr) {
        out.tape = tape;
        out.node = tape->record(out.size(), [a, b, lam](Tape& t, const std::vector<double>& g) {
            std::vector<double> buf(g.size());
            if (a.tracked() && lam != 0.0) {
                for (std::size_t i = 0; i < g.size(); ++i)
                    buf[i] = lam * g[i];
                t.accumulate(a.node, buf.data(), buf.size());
            }
            if (b.tracked() && lam != 1.0) {
                for (std::size_t i = 0; i < g.size(); ++i)
                    buf[i] = (1.0 - lam) * g[i];
                t.accumulate(b.node, buf.data(), buf.size());
            }
        });
    }
    return out;
}

Tensor detach(const Tensor& x) {
    Tensor out;
    out.shape = x.shape;
    out.values = x.values;
    return out;
}

Tensor sum_all(const Tensor& x) {
    Tape* tape = op_tape({&x}, "sum_all");
    double s = 0.0;
    for (double v : x.v())
        s += v;
    return finish(Shape{}, {s}, tape, [x](Tape& t, const std::vector<double>& g) {
        std::vector<double> gx(x.size(), g[0]);
        t.accumulate(x.node, gx.data(), gx.size());
    });
}

Tensor mean_all(const Tensor& x) {
    if (x.size() == 0)
        throw ContractError("mean_all: empty tensor");
    Tape* tape = op_tape({&x}, "mean_all");
    double s = 0.0;
    for (double v : x.v())
        s += v;
    const double n = static_cast<double>(x.size());
    return finish(Shape{}, {s / n}, tape, [x, n](Tape& t, const std::vector<double>& g) {
        std::vector<double> gx(x.size(), g[0] / n);
        t.accumulate(x.node, gx.data(), gx.size());
    });
}

// ---- losses ------------------------------------------------------------------

namespace {

void require_row_stochastic(const Tensor& p, std::size_t d, const char* op, const char* which) {
    const std::size_t rows = p.size() / d;
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = p.v()[r * d + j];
            if (v < 0.0)
                throw ContractError(std::string(op) + ": " + which + " row " +
                                    std::to_string(r) + " has a negative entry");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6)
            throw ContractError(std::string(op) + ": " + which + " row " + std::to_string(r) +
                                " sums to " + std::to_string(s));
    }
}

} // namespace

Tensor kld_rows(const Tensor& p, const Tensor& q, double eps) {
    require_same_shape(p, q, "kld_rows");
    const std::size_t d = last_dim(p, "kld_rows");
    require_row_stochastic(p, d, "kld_rows", "reference");
    require_row_stochastic(q, d, "kld_rows", "candidate");
    Tape* tape = op_tape({&p, &q}, "kld_rows");
    const std::size_t rows = p.size() / d;
    const double inv_rows = 1.0 / static_cast<double>(rows);
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i)
        total += p.v()[i] * (std::log(p.v()[i] + eps) - std::log(q.v()[i] + eps));
    return finish(Shape{}, {total * inv_rows}, tape,
                  [p, q, eps, inv_rows](Tape& t, const std::vector<double>& g) {
                      const double c = g[0] * inv_rows;
                      std::vector<double> buf(p.size());
                      if (p.tracked()) {
                          for (std::size_t i = 0; i < p.size(); ++i) {
                              const double pi = p.v()[i];
                              buf[i] = c * (std::log(pi + eps) - std::log(q.v()[i] + eps) +
                                            pi / (pi + eps));
                          }
                          t.accumulate(p.node, buf.data(), buf.size());
                      }
                      if (q.tracked()) {
                          for (std::size_t i = 0; i < p.size(); ++i)
                              buf[i] = -c * p.v()[i] / (q.v()[i] + eps);
                          t.accumulate(q.node, buf.data(), buf.size());
                      }
                  });
}

Tensor mse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse");
    if (a.size() == 0)
        throw ContractError("mse: empty tensors");
    Tape* tape = op_tape({&a, &b}, "mse");
    const double inv_n = 1.0 / static_cast<double>(a.size());
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double c = a.v()[i] - b.v()[i];
        total += c * c;
    }
    return finish(Shape{}, {total * inv_n}, tape,
                  [a, b, inv_n](Tape& t, const std::vector<double>& g) {
                      const double c = 2.0 * g[0] * inv_n;
                      std::vector<double> buf(a.size());
                      if (a.tracked()) {
                          for (std::size_t i = 0; i < a.size(); ++i)
                              buf[i] = c * (a.v()[i] - b.v()[i]);
                          t.accumulate(a.node, buf.data(), buf.size());
                      }
                      if (b.tracked()) {
                          for (std::size_t i = 0; i < a.size(); ++i)
                              buf[i] = -c * (a.v()[i] - b.v()[i]);
                          t.accumulate(b.node, buf.data(), buf.size());
                      }
                  });
}

Tensor mse_masked(const Tensor& a, const Tensor& b, const std::vector<double>& row_mask) {
    require_same_shape(a, b, "mse_masked");
    const std::size_t d = last_dim(a, "mse_masked");
    const std::size_t rows = a.size() / d;
    if (row_mask.size() != rows)
        throw DimError("mse_masked: mask of size " + std::to_string(row_mask.size()) +
                       " vs " + std::to_string(rows) + " rows");
    std::size_t live = 0;
    for (double m : row_mask)
        if (m != 0.0)
            ++live;
    if (live == 0)
        throw NumericError("mse_masked: mask excludes every row");
    Tape* tape = op_tape({&a, &b}, "mse_masked");
    const double inv_n = 1.0 / static_cast<double>(live * d);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (row_mask[r] == 0.0)
            continue;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = a.v()[r * d + j] - b.v()[r * d + j];
            total += c * c;
        }
    }
    return finish(Shape{}, {total * inv_n}, tape,
                  [a, b, row_mask, rows, d, inv_n](Tape& t, const std::vector<double>& g) {
                      const double c = 2.0 * g[0] * inv_n;
                      std::vector<double> buf(a.size(), 0.0);
                      if (a.tracked()) {
                          for (std::size_t r = 0; r < rows; ++r) {
                              if (row_mask[r] == 0.0)
                                  continue;
                              for (std::size_t j = 0; j < d; ++j)
                                  buf[r * d + j] =
                                      c * (a.v()[r * d + j] - b.v()[r * d + j]);
                          }
                          t.accumulate(a.node, buf.data(), buf.size());
                      }
                      if (b.tracked()) {
                          std::fill(buf.begin(), buf.end(), 0.0);
                          for (std::size_t r = 0; r < rows; ++r) {
                              if (row_mask[r] == 0.0)
                                  continue;
                              for (std::size_t j = 0; j < d; ++j)
                                  buf[r * d + j] =
                                      -c * (a.v()[r * d + j] - b.v()[r * d + j]);
                          }
                          t.accumulate(b.node, buf.data(), buf.size());
                      }
                  });
}

namespace {

// softmax of z/temp, row-major [rows, d]
std::vector<double> softened(const Tensor& z, double temp, std::size_t rows, std::size_t d) {
    std::vector<double> p(z.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* zr = z.data() + r * d;
        double mx = zr[0] / temp;
        for (std::size_t j = 1; j < d; ++j)
            mx = std::max(mx, zr[j] / temp);
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            p[r * d + j] = std::exp(zr[j] / temp - mx);
            s += p[r * d + j];
        }
        for (std::size_t j = 0; j < d; ++j)
            p[r * d + j] /= s;
    }
    return p;
}

} // namespace

Tensor soft_cross_entropy(const Tensor& zt, const Tensor& zs, double temp) {
    require_same_shape(zt, zs, "soft_cross_entropy");
    if (temp <= 0.0)
        throw ContractError("soft_cross_entropy: temperature must be positive");
    const std::size_t d = last_dim(zs, "soft_cross_entropy");
    const std::size_t rows = zs.size() / d;
    Tape* tape = op_tape({&zs}, "soft_cross_entropy");
    auto pt = std::make_shared<std::vector<double>>(softened(zt, temp, rows, d));
    auto ps = std::make_shared<std::vector<double>>(softened(zs, temp, rows, d));
    const double inv_rows = 1.0 / static_cast<double>(rows);
    double total = 0.0;
    for (std::size_t i = 0; i < zs.size(); ++i)
        total -= (*pt)[i] * std::log((*ps)[i]);
    return finish(Shape{}, {total * inv_rows}, tape,
                  [zs, pt, ps, temp, inv_rows](Tape& t, const std::vector<double>& g) {
                      const double c = g[0] * inv_rows / temp;
                      std::vector<double> buf(zs.size());
                      for (std::size_t i = 0; i < zs.size(); ++i)
                          buf[i] = c * ((*ps)[i] - (*pt)[i]);
                      t.accumulate(zs.node, buf.data(), buf.size());
                  });
}

Tensor cross_entropy_labels(const Tensor& z, const std::vector<std::size_t>& y) {
    require_rank(z, 2, "cross_entropy_labels");
    const std::size_t rows = z.dim(0), d = z.dim(1);
    if (y.size() != rows)
        throw DimError("cross_entropy_labels: " + std::to_string(y.size()) + " labels vs " +
                       std::to_string(rows) + " rows");
    for (std::size_t l : y)
        if (l >= d)
            throw DimError("cross_entropy_labels: label " + std::to_string(l) +
                           " out of range for " + std::to_string(d) + " classes");
    Tape* tape = op_tape({&z}, "cross_entropy_labels");
    auto p = std::make_shared<std::vector<double>>(softened(z, 1.0, rows, d));
    const double inv_rows = 1.0 / static_cast<double>(rows);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r)
        total -= std::log((*p)[r * d + y[r]]);
    return finish(Shape{}, {total * inv_rows}, tape,
                  [z, p, y, rows, d, inv_rows](Tape& t, const std::vector<double>& g) {
                      const double c = g[0] * inv_rows;
                      std::vector<double> buf(z.size());
                      for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < d; ++j)
                              buf[r * d + j] =
                                  c * ((*p)[r * d + j] - (y[r] == j ? 1.0 : 0.0));
                      t.accumulate(z.node, buf.data(), buf.size());
                  });
}

} // namespace ildlab
