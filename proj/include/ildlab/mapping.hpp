#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ildlab/distill.hpp"

namespace ildlab {

enum class MappingStrategy { Last, Uniform, Emd };

struct MappingSpec {
    MappingStrategy strategy = MappingStrategy::Last;
    std::size_t teacher_layers = 1;
    std::size_t student_layers = 1;
    std::size_t emd_refresh_interval = 100;

    void validate() const;
};

struct TransportPlan {
    std::size_t teacher_layers = 0;
    std::size_t student_layers = 0;
    std::vector<double> flow; // row-major [teacher_layers x student_layers]
    double total_cost = 0.0;

    double at(std::size_t i, std::size_t j) const {
        return flow[i * student_layers + j];
    }
    // Pairs carrying weight f[i][j] * M, so a permutation plan at L = M
    // degenerates to weight-1 layer-to-layer mapping.
    std::vector<LayerPair> pairs(double support_tol = 1e-12) const;
    std::string to_json_string() const;
};

std::vector<LayerPair> map_last(std::size_t teacher_layers, std::size_t student_layers);
std::vector<LayerPair> map_uniform(std::size_t teacher_layers, std::size_t student_layers);

// Exact optimal transport between uniform marginals (1/L over teacher
// layers, 1/M over student layers) for the given pairwise costs.
TransportPlan map_emd(const std::vector<std::vector<double>>& cost);

// Pairwise detached distillation losses between all (teacher layer,
// student layer) combinations, used as the transport cost matrix. Uses the
// objectives enabled in the config (default both, summed).
std::vector<std::vector<double>> emd_costs(const ForwardTrace& trace_t,
                                           const ForwardTrace& trace_s,
                                           const ObjectiveConfig& objective);

} // namespace ildlab
