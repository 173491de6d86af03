#include "ildlab/mapping.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "ildlab/errors.hpp"

namespace ildlab {

void MappingSpec::validate() const {
    if (teacher_layers < 1 || student_layers < 1)
        throw ConfigError("mapping spec: layer counts must be at least 1");
    if (strategy == MappingStrategy::Uniform && teacher_layers % student_layers != 0)
        throw ConfigError("mapping spec: uniform mapping needs teacher layers divisible "
                          "by student layers");
    if (emd_refresh_interval < 1)
        throw ConfigError("mapping spec: emd refresh interval must be at least 1");
}

std::vector<LayerPair> TransportPlan::pairs(double support_tol) const {
    std::vector<LayerPair> out;
    const double m = static_cast<double>(student_layers);
    for (std::size_t i = 0; i < teacher_layers; ++i)
        for (std::size_t j = 0; j < student_layers; ++j)
            if (at(i, j) > support_tol)
                out.push_back({i + 1, j + 1, at(i, j) * m});
    return out;
}

std::string TransportPlan::to_json_string() const {
    nlohmann::json j;
    j["teacher_layers"] = teacher_layers;
    j["student_layers"] = student_layers;
    j["total_cost"] = total_cost;
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < teacher_layers; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t k = 0; k < student_layers; ++k)
            row.push_back(at(i, k));
        rows.push_back(row);
    }
    j["flow"] = rows;
    return j.dump();
}

std::vector<LayerPair> map_last(std::size_t teacher_layers, std::size_t student_layers) {
    if (teacher_layers < 1 || student_layers < 1)
        throw ConfigError("map_last: layer counts must be at least 1");
    return {{teacher_layers, student_layers, 1.0}};
}

std::vector<LayerPair> map_uniform(std::size_t teacher_layers, std::size_t student_layers) {
    if (teacher_layers < 1 || student_layers < 1)
        throw ConfigError("map_uniform: layer counts must be at least 1");
    if (teacher_layers % student_layers != 0)
        throw ConfigError("map_uniform: " + std::to_string(teacher_layers) +
                          " teacher layers not divisible by " +
                          std::to_string(student_layers) + " student layers");
    const std::size_t stride = teacher_layers / student_layers;
    std::vector<LayerPair> out;
    for (std::size_t k = 1; k <= student_layers; ++k)
        out.push_back({k * stride, k, 1.0});
    return out;
}

namespace {

// Min-cost flow by successive shortest paths. Node layout: 0 = source,
// 1..L = teacher layers, L+1..L+M = student layers, L+M+1 = sink.
// Capacities are integers (marginals scaled by L*M) stored in doubles.
struct FlowEdge {
    int to;
    double cap;
    double cost;
    int rev;
};

class FlowGraph {
public:
    explicit FlowGraph(int n) : adj_(n) {}

    void add(int a, int b, double cap, double cost) {
        adj_[a].push_back({b, cap, cost, static_cast<int>(adj_[b].size())});
        adj_[b].push_back({a, 0.0, -cost, static_cast<int>(adj_[a].size()) - 1});
    }

    std::vector<FlowEdge>& at(int v) { return adj_[v]; }
    int size() const { return static_cast<int>(adj_.size()); }

    // Bellman-Ford on the residual graph (reverse arcs carry negative
    // costs, so Dijkstra is not applicable without potentials).
    bool shortest_path(int s, int t, std::vector<int>& prev_node,
                       std::vector<int>& prev_edge) {
        const double inf = std::numeric_limits<double>::infinity();
        std::vector<double> dist(adj_.size(), inf);
        dist[s] = 0.0;
        prev_node.assign(adj_.size(), -1);
        prev_edge.assign(adj_.size(), -1);
        for (int round = 0; round < size(); ++round) {
            bool changed = false;
            for (int u = 0; u < size(); ++u) {
                if (dist[u] == inf)
                    continue;
                for (std::size_t e = 0; e < adj_[u].size(); ++e) {
                    const FlowEdge& ed = adj_[u][e];
                    if (ed.cap < 0.5)
                        continue;
                    if (dist[u] + ed.cost < dist[ed.to]) {
                        dist[ed.to] = dist[u] + ed.cost;
                        prev_node[ed.to] = u;
                        prev_edge[ed.to] = static_cast<int>(e);
                        changed = true;
                    }
                }
            }
            if (!changed)
                break;
        }
        return dist[t] != inf;
    }

private:
    std::vector<std::vector<FlowEdge>> adj_;
};

} // namespace

TransportPlan map_emd(const std::vector<std::vector<double>>& cost) {
    const std::size_t L = cost.size();
    if (L == 0)
        throw DimError("map_emd: empty cost matrix");
    const std::size_t M = cost[0].size();
    if (M == 0)
        throw DimError("map_emd: empty cost row");
    for (const auto& row : cost) {
        if (row.size() != M)
            throw DimError("map_emd: ragged cost matrix");
        for (double c : row) {
            if (!std::isfinite(c))
                throw ContractError("map_emd: non-finite cost");
            if (c < 0.0)
                throw ContractError("map_emd: negative cost");
        }
    }

    const int n = static_cast<int>(L + M) + 2;
    const int src = 0, snk = n - 1;
    FlowGraph g(n);
    const double lm = static_cast<double>(L * M);
    for (std::size_t i = 0; i < L; ++i)
        g.add(src, static_cast<int>(i) + 1, static_cast<double>(M), 0.0);
    for (std::size_t j = 0; j < M; ++j)
        g.add(static_cast<int>(L + j) + 1, snk, static_cast<double>(L), 0.0);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < M; ++j)
            g.add(static_cast<int>(i) + 1, static_cast<int>(L + j) + 1,
                  static_cast<double>(M), cost[i][j]);

    double pushed = 0.0;
    std::vector<int> prev_node, prev_edge;
    while (pushed < lm - 0.5) {
        if (!g.shortest_path(src, snk, prev_node, prev_edge))
            throw NumericError("map_emd: transport network disconnected");
        double bottleneck = lm - pushed;
        for (int v = snk; v != src; v = prev_node[v]) {
            const FlowEdge& e = g.at(prev_node[v])[prev_edge[v]];
            if (e.cap < bottleneck)
                bottleneck = e.cap;
        }
        for (int v = snk; v != src; v = prev_node[v]) {
            FlowEdge& e = g.at(prev_node[v])[prev_edge[v]];
            e.cap -= bottleneck;
            g.at(v)[e.rev].cap += bottleneck;
        }
        pushed += bottleneck;
    }

    TransportPlan plan;
    plan.teacher_layers = L;
    plan.student_layers = M;
    plan.flow.assign(L * M, 0.0);
    plan.total_cost = 0.0;
    for (std::size_t i = 0; i < L; ++i)
        for (const FlowEdge& e : g.at(static_cast<int>(i) + 1)) {
            if (e.to < static_cast<int>(L) + 1 || e.to > static_cast<int>(L + M))
                continue;
            const std::size_t j = static_cast<std::size_t>(e.to) - L - 1;
            const double units = static_cast<double>(M) - e.cap;
            plan.flow[i * M + j] = units / lm;
            plan.total_cost += plan.flow[i * M + j] * cost[i][j];
        }
    return plan;
}

namespace {

ForwardTrace detached(const ForwardTrace& t) {
    ForwardTrace out;
    out.batch_size = t.batch_size;
    out.seq_len = t.seq_len;
    out.row_mask = t.row_mask;
    for (const auto& h : t.hidden)
        out.hidden.push_back(detach(h));
    for (const auto& layer : t.attn) {
        out.attn.emplace_back();
        for (const auto& head : layer)
            out.attn.back().push_back(detach(head));
    }
    for (const auto& c : t.cls)
        out.cls.push_back(detach(c));
    out.logits = detach(t.logits);
    return out;
}

} // namespace

std::vector<std::vector<double>> emd_costs(const ForwardTrace& trace_t,
                                           const ForwardTrace& trace_s,
                                           const ObjectiveConfig& objective) {
    objective.validate();
    const ForwardTrace dt = detached(trace_t);
    const ForwardTrace ds = detached(trace_s);
    const std::size_t L = dt.attn.size();
    const std::size_t M = ds.attn.size();
    std::vector<std::vector<double>> cost(L, std::vector<double>(M, 0.0));
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < M; ++j) {
            const std::vector<LayerPair> one{{i + 1, j + 1, 1.0}};
            double c = 0.0;
            if (objective.mha_enabled)
                c += loss_mha(dt, ds, one, objective.mha_metric).item();
            if (objective.ir_enabled)
                c += objective.ir_variant == IrVariant::Pool
                         ? loss_ir_pool(dt, ds, one, objective.projection).item()
                         : loss_ir_patience(dt, ds, one).item();
            cost[i][j] = c;
        }
    return cost;
}

} // namespace ildlab
