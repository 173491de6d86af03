#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ildlab/data.hpp"
#include "ildlab/model.hpp"
#include "ildlab/rng.hpp"

namespace ildlab {

struct ProbeReport {
    std::string kind;
    std::vector<double> grid;   // grid parameter per point, declared order
    std::vector<double> values; // one value per grid point, all finite
    std::map<std::string, double> summary;
};

std::string probe_to_json(const ProbeReport& report);

// Mean training cross-entropy (labels as stored, so noisy pools are scored
// against their noisy labels) under N(0, sigma^2 I) perturbations of the
// embedding vectors, dropout off. Draws share their noise directions
// across sigma values, so curves over sigma use common random numbers;
// sigma = 0 skips the perturbation and reproduces the clean loss exactly.
ProbeReport noise_robustness_probe(const TransformerModel& model,
                                   const std::vector<Example>& pool,
                                   const std::vector<double>& sigmas,
                                   std::size_t draws_per_sigma, std::uint64_t seed,
                                   std::size_t batch_size = 32);

// Trains a softmax regression on the frozen mean-pooled non-pad hidden
// states of the given layer (0 = embeddings, 1..L = encoder layers) over
// the train split, full batch from a zero init, and returns dev accuracy
// against clean labels. Deterministic.
double linear_probe(const TransformerModel& model, const Dataset& ds, std::size_t layer,
                    std::size_t iters = 200, double lr = 0.1, std::size_t batch_size = 64);

struct SurfaceReport {
    std::vector<double> alphas; // axis values, declared order
    std::vector<double> betas;
    std::vector<double> losses; // row-major [alpha][beta]
};

// f(a, b) = mean training cross-entropy at parameters
// theta0 + a (theta1 - theta0) + b (theta2 - theta0), over an
// [lo, hi] x [lo, hi] grid. The three models must share one layout.
SurfaceReport loss_surface(const TransformerModel& m0, const TransformerModel& m1,
                           const TransformerModel& m2, const std::vector<Example>& pool,
                           std::size_t grid_n = 25, double lo = -1.0, double hi = 2.0,
                           std::size_t batch_size = 32);

std::string surface_to_csv(const SurfaceReport& report);

// Two-node quadrature for the symmetric Beta(alpha, alpha) weight,
// exact for polynomial integrands up to degree three.
struct Quadrature {
    double node1 = 0.0, weight1 = 0.0;
    double node2 = 0.0, weight2 = 0.0;
};

Quadrature beta_quadrature(double alpha);

struct BetaMomentReport {
    double alpha = 0.0;
    double e_lambda_closed = 0.0, e_lambda_quadrature = 0.0;
    double e_lambda_sq_closed = 0.0, e_lambda_sq_quadrature = 0.0;
    double max_abs_diff = 0.0;
};

// Quadrature moments against E[lambda] = 1/2 and
// E[lambda^2] = (alpha+1)/(4 alpha+2).
BetaMomentReport beta_moment_check(double alpha);

// A mixing curriculum whose second-order expansion is exact: a linear map
// u = W h and a quadratic joint loss l(u, y) = 0.5 z' H z + b' z over
// z = [u; y], with a positive-definite H, evaluated on a finite point set.
struct TaylorSetup {
    std::vector<std::vector<double>> W;       // out_dim x in_dim
    std::vector<std::vector<double>> hessian; // joint (out_dim + y_dim) square
    std::vector<double> b;                    // joint linear term
    std::vector<std::vector<double>> h;       // points, in_dim each
    std::vector<std::vector<double>> y;       // points, y_dim each
    double alpha = 1.0;

    void validate() const;
};

TaylorSetup random_taylor_setup(Rng& rng, std::size_t points, std::size_t in_dim,
                                std::size_t out_dim, std::size_t y_dim, double alpha);

struct TheoremReport {
    double l_std = 0.0;
    double l_mix_numeric = 0.0;         // exact quadrature of the mixed loss
    double l_mix_taylor = 0.0;          // pre-completed-square expansion
    double l_mix_completed_square = 0.0;
    double max_abs_diff = 0.0;
};

// Checks that the mixed loss computed three ways agrees: by quadrature,
// by the second-order expansion around each anchor point (exact here), and
// by the completed-square rearrangement that needs the inverse joint
// Hessian. A non-positive-definite Hessian is a contract error.
TheoremReport verify_theorem1(const TaylorSetup& setup);

std::string theorem_to_json(const TheoremReport& report);

} // namespace ildlab
