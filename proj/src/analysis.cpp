#include "ildlab/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

#include "ildlab/errors.hpp"
#include "ildlab/tensor.hpp"

namespace ildlab {

namespace {

using json = nlohmann::json;

double mean_ce_eval(const TransformerModel& model, const std::vector<Example>& pool,
                    std::size_t batch_size) {
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    double loss_sum = 0.0;
    for (std::size_t i = 0; i < pool.size(); i += batch_size) {
        const std::size_t count = std::min(batch_size, pool.size() - i);
        const Batch b = gather_batch(pool, order, i, count);
        const ForwardTrace tr = model.forward(b);
        loss_sum += cross_entropy_labels(tr.logits, b.labels).item() *
                    static_cast<double>(count);
    }
    return loss_sum / static_cast<double>(pool.size());
}

// Dense helpers for the theorem verifier; everything is row-major.
std::vector<double> matvec(const std::vector<std::vector<double>>& m,
                           const std::vector<double>& x) {
    std::vector<double> out(m.size(), 0.0);
    for (std::size_t r = 0; r < m.size(); ++r)
        for (std::size_t c = 0; c < x.size(); ++c)
            out[r] += m[r][c] * x[c];
    return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += a[i] * b[i];
    return s;
}

// Returns false when the matrix is not numerically positive definite.
bool cholesky(const std::vector<std::vector<double>>& a, std::vector<std::vector<double>>& l) {
    const std::size_t n = a.size();
    l.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a[i][j];
            for (std::size_t k = 0; k < j; ++k)
                s -= l[i][k] * l[j][k];
            if (i == j) {
                if (!(s > 1e-12))
                    return false;
                l[i][i] = std::sqrt(s);
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    return true;
}

std::vector<double> cholesky_solve(const std::vector<std::vector<double>>& l,
                                   const std::vector<double>& rhs) {
    const std::size_t n = rhs.size();
    std::vector<double> y(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double s = rhs[i];
        for (std::size_t k = 0; k < i; ++k)
            s -= l[i][k] * y[k];
        y[i] = s / l[i][i];
    }
    std::vector<double> x(n, 0.0);
    for (std::size_t ii = n; ii-- > 0;) {
        double s = y[ii];
        for (std::size_t k = ii + 1; k < n; ++k)
            s -= l[k][ii] * x[k];
        x[ii] = s / l[ii][ii];
    }
    return x;
}

} // namespace

std::string probe_to_json(const ProbeReport& report) {
    return json{{"kind", report.kind},
                {"grid", report.grid},
                {"values", report.values},
                {"summary", report.summary}}
        .dump(2);
}

ProbeReport noise_robustness_probe(const TransformerModel& model,
                                   const std::vector<Example>& pool,
                                   const std::vector<double>& sigmas,
                                   std::size_t draws_per_sigma, std::uint64_t seed,
                                   std::size_t batch_size) {
    if (pool.empty())
        throw DataError("noise probe: empty example pool");
    if (sigmas.empty())
        throw ConfigError("noise probe: empty sigma grid");
    for (double s : sigmas)
        if (!(s >= 0.0))
            throw ConfigError("noise probe: sigma must be nonnegative");
    if (draws_per_sigma == 0)
        throw ConfigError("noise probe: need at least one draw");
    if (batch_size == 0)
        throw ConfigError("noise probe: batch size must be positive");

    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    struct Prepared {
        Batch batch;
        Tensor h0;
    };
    std::vector<Prepared> prepared;
    for (std::size_t i = 0; i < pool.size(); i += batch_size) {
        const std::size_t count = std::min(batch_size, pool.size() - i);
        Batch b = gather_batch(pool, order, i, count);
        Tensor h0 = model.embed(b);
        prepared.push_back({std::move(b), std::move(h0)});
    }

    const double n = static_cast<double>(pool.size());
    ProbeReport report;
    report.kind = "noise_robustness";
    report.grid = sigmas;
    for (double sigma : sigmas) {
        double value = 0.0;
        if (sigma == 0.0) {
            for (const Prepared& p : prepared) {
                const ForwardTrace tr = model.forward_embedded(p.h0, p.batch.mask);
                value += cross_entropy_labels(tr.logits, p.batch.labels).item() *
                         static_cast<double>(p.batch.batch_size);
            }
            value /= n;
        } else {
            for (std::size_t d = 0; d < draws_per_sigma; ++d) {
                // One stream per (draw, batch), shared across sigmas:
                // common random numbers keep the curves comparable.
                double draw_loss = 0.0;
                for (std::size_t bi = 0; bi < prepared.size(); ++bi) {
                    const Prepared& p = prepared[bi];
                    Rng noise = Rng::stream(seed, "noise_draw_" + std::to_string(d) +
                                                      "_batch_" + std::to_string(bi));
                    Tensor h = Tensor(p.h0.shape, p.h0.v());
                    for (double& x : *h.values)
                        x += sigma * noise.normal();
                    const ForwardTrace tr = model.forward_embedded(h, p.batch.mask);
                    draw_loss += cross_entropy_labels(tr.logits, p.batch.labels).item() *
                                 static_cast<double>(p.batch.batch_size);
                }
                value += draw_loss / n;
            }
            value /= static_cast<double>(draws_per_sigma);
        }
        if (!std::isfinite(value))
            throw NumericError("noise probe: loss is not finite at sigma " +
                               std::to_string(sigma));
        report.values.push_back(value);
    }
    report.summary["min"] = *std::min_element(report.values.begin(), report.values.end());
    report.summary["max"] = *std::max_element(report.values.begin(), report.values.end());
    report.summary["clean_loss"] = report.values.front();
    return report;
}

double linear_probe(const TransformerModel& model, const Dataset& ds, std::size_t layer,
                    std::size_t iters, double lr, std::size_t batch_size) {
    if (layer > model.config().num_layers)
        throw ConfigError("linear probe: layer " + std::to_string(layer) + " out of range");
    if (iters == 0 || !(lr > 0.0) || batch_size == 0)
        throw ConfigError("linear probe: bad training knobs");

    const std::size_t d = model.config().hidden_dim;
    const auto features = [&](const std::vector<Example>& pool, std::vector<double>& x) {
        std::vector<std::size_t> order(pool.size());
        std::iota(order.begin(), order.end(), 0);
        x.assign(pool.size() * d, 0.0);
        std::size_t row = 0;
        for (std::size_t i = 0; i < pool.size(); i += batch_size) {
            const std::size_t count = std::min(batch_size, pool.size() - i);
            const Batch b = gather_batch(pool, order, i, count);
            const ForwardTrace tr = model.forward(b);
            const auto& hv = tr.hidden[layer].v();
            for (std::size_t r = 0; r < count; ++r, ++row) {
                double live = 0.0;
                for (std::size_t s = 0; s < b.seq_len; ++s) {
                    const double m = b.mask[r * b.seq_len + s];
                    live += m;
                    if (m != 0.0)
                        for (std::size_t k = 0; k < d; ++k)
                            x[row * d + k] += hv[(r * b.seq_len + s) * d + k];
                }
                for (std::size_t k = 0; k < d; ++k)
                    x[row * d + k] /= live;
            }
        }
    };

    std::vector<double> xtr, xdev;
    features(ds.train, xtr);
    features(ds.dev, xdev);
    std::vector<std::size_t> ytr;
    ytr.reserve(ds.train.size());
    for (const Example& ex : ds.train)
        ytr.push_back(ex.label);

    const std::size_t classes = ds.spec.num_classes;
    const Tensor x_train({ds.train.size(), d}, std::move(xtr));
    Tensor w = Tensor::zeros({classes, d});
    Tensor bias = Tensor::zeros({classes});

    // Plain full-batch gradient descent from zero: deterministic, convex.
    for (std::size_t it = 0; it < iters; ++it) {
        Tape tape;
        const Tensor logits =
            add_bias(matmul_nt(tape.leaf(x_train), tape.leaf(w)), tape.leaf(bias));
        const Tensor loss = cross_entropy_labels(logits, ytr);
        tape.backward(loss);
        const auto gw = tape.grad(w);
        const auto gb = tape.grad(bias);
        for (std::size_t k = 0; k < w.size(); ++k)
            (*w.values)[k] -= lr * gw[k];
        for (std::size_t k = 0; k < bias.size(); ++k)
            (*bias.values)[k] -= lr * gb[k];
    }

    double correct = 0.0;
    const auto& wv = w.v();
    const auto& bv = bias.v();
    for (std::size_t r = 0; r < ds.dev.size(); ++r) {
        std::size_t best = 0;
        double best_z = -1e300;
        for (std::size_t c = 0; c < classes; ++c) {
            double z = bv[c];
            for (std::size_t k = 0; k < d; ++k)
                z += wv[c * d + k] * xdev[r * d + k];
            if (z > best_z) {
                best_z = z;
                best = c;
            }
        }
        correct += best == ds.dev[r].clean_label;
    }
    return correct / static_cast<double>(ds.dev.size());
}

SurfaceReport loss_surface(const TransformerModel& m0, const TransformerModel& m1,
                           const TransformerModel& m2, const std::vector<Example>& pool,
                           std::size_t grid_n, double lo, double hi, std::size_t batch_size) {
    if (!(m0.config() == m1.config()) || !(m0.config() == m2.config()))
        throw ConfigError("loss surface: parameter layouts disagree");
    if (grid_n < 2)
        throw ConfigError("loss surface: need at least a 2x2 grid");
    if (!(hi > lo))
        throw ConfigError("loss surface: empty grid range");
    if (pool.empty())
        throw DataError("loss surface: empty example pool");

    const auto p0 = m0.named_params();
    const auto p1 = m1.named_params();
    const auto p2 = m2.named_params();
    TransformerModel work = m0.clone();
    const auto pw = work.named_params();

    SurfaceReport report;
    for (std::size_t i = 0; i < grid_n; ++i) {
        const double t = static_cast<double>(i) / static_cast<double>(grid_n - 1);
        report.alphas.push_back(lo + t * (hi - lo));
    }
    report.betas = report.alphas;
    report.losses.reserve(grid_n * grid_n);
    for (double a : report.alphas) {
        for (double b : report.betas) {
            for (std::size_t p = 0; p < pw.size(); ++p) {
                const auto& t0 = p0[p].second.v();
                const auto& t1 = p1[p].second.v();
                const auto& t2 = p2[p].second.v();
                auto& out = *pw[p].second.values;
                for (std::size_t k = 0; k < out.size(); ++k)
                    out[k] = t0[k] + a * (t1[k] - t0[k]) + b * (t2[k] - t0[k]);
            }
            report.losses.push_back(mean_ce_eval(work, pool, batch_size));
        }
    }
    return report;
}

std::string surface_to_csv(const SurfaceReport& report) {
    std::string out = "alpha,beta,loss\n";
    char line[96];
    std::size_t idx = 0;
    for (double a : report.alphas)
        for (double b : report.betas) {
            std::snprintf(line, sizeof line, "%.17g,%.17g,%.17g\n", a, b,
                          report.losses[idx++]);
            out += line;
        }
    return out;
}

Quadrature beta_quadrature(double alpha) {
    if (!(alpha > 0.0))
        throw ConfigError("beta_quadrature: alpha must be positive");
    // Raw moments of Beta(alpha, alpha): m_k = prod_r (alpha+r)/(2 alpha+r).
    const double m1 = 0.5;
    const double m2 = (alpha + 1.0) / (4.0 * alpha + 2.0);
    const double m3 = m2 * (alpha + 2.0) / (2.0 * alpha + 2.0);
    // Monic degree-2 orthogonal polynomial x^2 + c x + d for this measure.
    const double det = m1 * m1 - m2;
    const double c = (m3 - m1 * m2) / det;
    const double d = (m2 * m2 - m1 * m3) / det;
    const double disc = c * c - 4.0 * d;
    if (!(disc > 0.0))
        throw NumericError("beta_quadrature: degenerate node polynomial");
    const double r = std::sqrt(disc);
    Quadrature q;
    q.node1 = (-c - r) / 2.0;
    q.node2 = (-c + r) / 2.0;
    q.weight2 = (m1 - q.node1) / (q.node2 - q.node1);
    q.weight1 = 1.0 - q.weight2;
    return q;
}

BetaMomentReport beta_moment_check(double alpha) {
    const Quadrature q = beta_quadrature(alpha);
    BetaMomentReport rep;
    rep.alpha = alpha;
    rep.e_lambda_closed = 0.5;
    rep.e_lambda_sq_closed = (alpha + 1.0) / (4.0 * alpha + 2.0);
    rep.e_lambda_quadrature = q.weight1 * q.node1 + q.weight2 * q.node2;
    rep.e_lambda_sq_quadrature =
        q.weight1 * q.node1 * q.node1 + q.weight2 * q.node2 * q.node2;
    rep.max_abs_diff = std::max(std::abs(rep.e_lambda_quadrature - rep.e_lambda_closed),
                                std::abs(rep.e_lambda_sq_quadrature - rep.e_lambda_sq_closed));
    return rep;
}

void TaylorSetup::validate() const {
    if (!(alpha > 0.0))
        throw ConfigError("taylor setup: alpha must be positive");
    if (h.empty() || h.size() != y.size())
        throw ConfigError("taylor setup: need matching nonempty point lists");
    if (W.empty() || W[0].empty())
        throw ConfigError("taylor setup: empty linear map");
    const std::size_t in_dim = W[0].size();
    const std::size_t out_dim = W.size();
    for (const auto& row : W)
        if (row.size() != in_dim)
            throw ConfigError("taylor setup: ragged linear map");
    const std::size_t y_dim = y[0].size();
    const std::size_t joint = out_dim + y_dim;
    for (const auto& hi : h)
        if (hi.size() != in_dim)
            throw ConfigError("taylor setup: point width disagrees with the map");
    for (const auto& yi : y)
        if (yi.size() != y_dim)
            throw ConfigError("taylor setup: ragged labels");
    if (hessian.size() != joint || b.size() != joint)
        throw ConfigError("taylor setup: joint dimension mismatch");
    for (const auto& row : hessian)
        if (row.size() != joint)
            throw ConfigError("taylor setup: ragged hessian");
    for (std::size_t i = 0; i < joint; ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (std::abs(hessian[i][j] - hessian[j][i]) > 1e-12)
                throw ConfigError("taylor setup: hessian is not symmetric");
}

TaylorSetup random_taylor_setup(Rng& rng, std::size_t points, std::size_t in_dim,
                                std::size_t out_dim, std::size_t y_dim, double alpha) {
    if (points == 0 || in_dim == 0 || out_dim == 0 || y_dim == 0)
        throw ConfigError("random_taylor_setup: zero dimension");
    TaylorSetup s;
    s.alpha = alpha;
    const std::size_t joint = out_dim + y_dim;
    s.W.assign(out_dim, std::vector<double>(in_dim, 0.0));
    for (auto& row : s.W)
        for (double& v : row)
            v = 0.5 * rng.normal();
    std::vector<std::vector<double>> q(joint, std::vector<double>(joint, 0.0));
    for (auto& row : q)
        for (double& v : row)
            v = rng.normal();
    s.hessian.assign(joint, std::vector<double>(joint, 0.0));
    for (std::size_t i = 0; i < joint; ++i)
        for (std::size_t j = 0; j < joint; ++j) {
            for (std::size_t k = 0; k < joint; ++k)
                s.hessian[i][j] += q[k][i] * q[k][j];
            if (i == j)
                s.hessian[i][j] += 0.1;
        }
    s.b.assign(joint, 0.0);
    for (double& v : s.b)
        v = 0.3 * rng.normal();
    s.h.assign(points, std::vector<double>(in_dim, 0.0));
    s.y.assign(points, std::vector<double>(y_dim, 0.0));
    for (auto& p : s.h)
        for (double& v : p)
            v = rng.normal();
    for (auto& p : s.y)
        for (double& v : p)
            v = rng.normal();
    return s;
}

TheoremReport verify_theorem1(const TaylorSetup& setup) {
    setup.validate();
    const double alpha = setup.alpha;
    const std::size_t n = setup.h.size();
    const std::size_t out_dim = setup.W.size();
    const std::size_t y_dim = setup.y[0].size();
    const std::size_t joint = out_dim + y_dim;

    // z_i = [W h_i; y_i]
    std::vector<std::vector<double>> z(n, std::vector<double>(joint, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        const auto u = matvec(setup.W, setup.h[i]);
        std::copy(u.begin(), u.end(), z[i].begin());
        std::copy(setup.y[i].begin(), setup.y[i].end(), z[i].begin() + out_dim);
    }

    const auto loss_at = [&](const std::vector<double>& zz) {
        return 0.5 * dot(zz, matvec(setup.hessian, zz)) + dot(setup.b, zz);
    };

    std::vector<std::vector<double>> l;
    if (!cholesky(setup.hessian, l))
        throw ContractError("verify_theorem1: joint hessian is not positive definite");

    TheoremReport rep;
    const double inv_n = 1.0 / static_cast<double>(n);
    const double inv_n2 = inv_n * inv_n;
    for (std::size_t j = 0; j < n; ++j)
        rep.l_std += loss_at(z[j]);
    rep.l_std *= inv_n;

    // Gradients and solves at each anchor point j.
    std::vector<std::vector<double>> grad(n), hinv_grad(n);
    for (std::size_t j = 0; j < n; ++j) {
        grad[j] = matvec(setup.hessian, z[j]);
        for (std::size_t k = 0; k < joint; ++k)
            grad[j][k] += setup.b[k];
        hinv_grad[j] = cholesky_solve(l, grad[j]);
    }

    const Quadrature quad = beta_quadrature(alpha);
    const double m2 = (alpha + 1.0) / (4.0 * alpha + 2.0);
    const double k_cs = (2.0 * alpha + 1.0) / (alpha + 1.0);

    double numeric = 0.0, taylor_corr = 0.0, cs_norm = 0.0, cs_const = 0.0;
    std::vector<double> mixed(joint), v(joint), shifted(joint);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t k = 0; k < joint; ++k) {
                mixed[k] = quad.node1 * z[i][k] + (1.0 - quad.node1) * z[j][k];
                v[k] = z[i][k] - z[j][k];
            }
            numeric += quad.weight1 * loss_at(mixed);
            for (std::size_t k = 0; k < joint; ++k)
                mixed[k] = quad.node2 * z[i][k] + (1.0 - quad.node2) * z[j][k];
            numeric += quad.weight2 * loss_at(mixed);

            const auto hv = matvec(setup.hessian, v);
            taylor_corr += 0.5 * dot(grad[j], v) + 0.5 * m2 * dot(v, hv);

            for (std::size_t k = 0; k < joint; ++k)
                shifted[k] = v[k] + k_cs * hinv_grad[j][k];
            cs_norm += dot(shifted, matvec(setup.hessian, shifted));
        }
        cs_const += dot(grad[i], hinv_grad[i]);
    }
    rep.l_mix_numeric = numeric * inv_n2;
    rep.l_mix_taylor = rep.l_std + taylor_corr * inv_n2;
    rep.l_mix_completed_square = rep.l_std +
                                 (alpha + 1.0) / (8.0 * alpha + 4.0) * inv_n2 * cs_norm -
                                 (2.0 * alpha + 1.0) / (4.0 * alpha + 4.0) * inv_n * cs_const;
    rep.max_abs_diff =
        std::max({std::abs(rep.l_mix_numeric - rep.l_mix_taylor),
                  std::abs(rep.l_mix_taylor - rep.l_mix_completed_square),
                  std::abs(rep.l_mix_numeric - rep.l_mix_completed_square)});
    return rep;
}

std::string theorem_to_json(const TheoremReport& report) {
    return json{{"l_std", report.l_std},
                {"l_mix_numeric", report.l_mix_numeric},
                {"l_mix_taylor", report.l_mix_taylor},
                {"l_mix_completed_square", report.l_mix_completed_square},
                {"max_abs_diff", report.max_abs_diff}}
        .dump(2);
}

} // namespace ildlab
