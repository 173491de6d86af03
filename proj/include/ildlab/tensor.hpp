#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "ildlab/errors.hpp"

namespace ildlab {

class Rng;
class Tape;

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Dense row-major tensor of f64. Storage is shared (copies are O(1)); values
// are treated as immutable once a tensor has entered an op on a tape. A
// tensor is "tracked" when tape != nullptr; ops propagate tracking.
struct Tensor {
    Shape shape;
    std::shared_ptr<std::vector<double>> values;
    Tape* tape = nullptr;
    int node = -1;

    Tensor();
    Tensor(Shape s, std::vector<double> v);

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, double x);
    static Tensor scalar(double x);

    std::size_t size() const { return values->size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const;
    const std::vector<double>& v() const { return *values; }
    std::vector<double>& v() { return *values; }
    const double* data() const { return values->data(); }
    double* data() { return values->data(); }
    double item() const;
    bool tracked() const { return tape != nullptr; }
};

// Reverse-mode tape. Ops record one node each; backward walks nodes in
// reverse creation order, pulling each node's output gradient into its
// parents. Nodes never reached from the loss keep empty gradients and read
// back as zeros. One backward per tape; a second call is a contract error.
class Tape {
public:
    using Pull = std::function<void(Tape&, const std::vector<double>&)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Enters t as a tracked leaf (shares storage with t). Entering the same
    // storage twice binds to the same node, so gradients of a parameter used
    // in several places accumulate in one slot.
    Tensor leaf(const Tensor& t);

    void backward(const Tensor& loss);
    bool backward_done() const { return done_; }

    // Gradient of the loss w.r.t. a tracked tensor, or w.r.t. an untracked
    // tensor whose storage was entered via leaf(). Zeros if unreached.
    std::vector<double> grad(const Tensor& t) const;

    std::size_t num_nodes() const { return nodes_.size(); }

    // Recording interface for op implementations.
    int record(std::size_t nvals, Pull pull);
    void accumulate(int node, const double* g, std::size_t n);

private:
    struct Node {
        std::size_t nvals;
        Pull pull;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    std::unordered_map<const void*, int> leaf_nodes_;
    bool done_ = false;
};

// ---- ops ----------------------------------------------------------------
// All ops validate shapes (DimError) and tape consistency (ContractError).
// Outputs are tracked iff at least one input is tracked.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

// x: [..., D], bias: [D]
Tensor add_bias(const Tensor& x, const Tensor& bias);

// [m,k] x [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// [m,k] x [n,k]^T -> [m,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// x: [..., K], w: [K, N] -> [..., N]; rows = product of leading dims
Tensor linear(const Tensor& x, const Tensor& w);
// batched: [B,m,k] x [B,k,n] -> [B,m,n]
Tensor bmm(const Tensor& a, const Tensor& b);
// batched: [B,m,k] x [B,n,k]^T -> [B,m,n]
Tensor bmm_nt(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& x, Shape s);
Tensor concat_lastdim(const std::vector<Tensor>& parts);
// x: [B,S,D] -> [B,D] at sequence position pos
Tensor select_pos(const Tensor& x, std::size_t pos);
// table: [V,D]; ids are row indices; out: out_lead + [D]
Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids,
                        Shape out_lead);

Tensor gelu(const Tensor& x);
// softmax over the last dim
Tensor softmax_rows(const Tensor& x);
// x: [..., D], gain/bias: [D]; per-row normalization, population variance
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
// inverted dropout; rate==0 returns x untouched and consumes no draws
Tensor dropout(const Tensor& x, double rate, Rng& rng);
// rows normalized to unit L2 norm; NumericError on a near-zero row
Tensor l2_normalize_rows(const Tensor& x, double tol = 1e-12);

// lam*a + (1-lam)*b; lam==1 / lam==0 short-circuit to bitwise copies
Tensor mixup(const Tensor& a, const Tensor& b, double lam);

Tensor detach(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// mean over rows of sum_k p*(log(p+eps)-log(q+eps)); both inputs must be
// row-stochastic within 1e-6
Tensor kld_rows(const Tensor& p, const Tensor& q, double eps = 1e-8);
Tensor mse(const Tensor& a, const Tensor& b);
// a,b: [..., D]; row_mask has one entry per row; masked-out rows drop out of
// numerator and denominator
Tensor mse_masked(const Tensor& a, const Tensor& b, const std::vector<double>& row_mask);
// -mean_rows sum_k softmax(zt/t)*log softmax(zs/t); zt is not differentiated
Tensor soft_cross_entropy(const Tensor& zt, const Tensor& zs, double temp);
Tensor cross_entropy_labels(const Tensor& z, const std::vector<std::size_t>& y);

// ---- raw kernels (deterministic, fixed accumulation order) --------------
namespace kern {
// C[m,n] += A[m,k]*B[k,n]
void mm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n);
// C[m,n] += A[m,k]*B[n,k]^T
void mm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n);
// C[m,n] += A[k,m]^T*B[k,n]
void mm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n);
} // namespace kern

} // namespace ildlab
