#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ildlab/crild.hpp"
#include "ildlab/data.hpp"
#include "ildlab/distill.hpp"
#include "ildlab/mapping.hpp"
#include "ildlab/model.hpp"

namespace ildlab {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam over a fixed parameter list with bias correction and global-norm
// gradient clipping. Parameter tensors share storage with the model, so
// step() updates the model in place.
class Adam {
public:
    explicit Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig cfg = {});

    // Pulls every parameter's gradient from the tape (zeros when a
    // parameter is unreached), clips, applies one update. Returns the
    // pre-clip global gradient norm.
    double step(const Tape& tape, double lr, double clip_norm);

    std::size_t steps_taken() const { return t_; }

private:
    std::vector<std::pair<std::string, Tensor>> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

// Linear ramp to the peak rate over the first ceil(frac * total) steps,
// constant afterwards. step is 0-based.
double warmup_lr(double peak, std::size_t step, std::size_t total_steps, double frac);

struct TrainHyper {
    std::size_t epochs = 10;
    double lr = 1e-3;
    std::size_t batch_size = 32;
    double clip_norm = 1.0;
    double warmup_frac = 0.1;

    void validate() const;
};

struct StepRecord {
    std::string phase; // teacher | ild | pld | joint
    std::size_t step = 0;
    double lr = 0.0;
    double total = 0.0;
    double l_mha = 0.0;
    double l_ir = 0.0;
    double r_mha = 0.0;
    double r_ir = 0.0;
    double l_pl = 0.0;
    double lambda = 1.0;
};

// Per-epoch snapshot. train_loss averages the step totals of the epoch.
// train_accuracy is meaningful only for phases that score unmixed inputs
// (teacher training, PLD, joint); it is 0 for pure ILD epochs. Dev metrics
// always come from an eval-mode pass scored against clean labels.
struct EpochRecord {
    std::string phase;
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    double dev_loss = 0.0;
    double dev_accuracy = 0.0;
};

struct RunReport {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    double final_dev_metric = 0.0;
    double wall_time_seconds = 0.0;
    std::string config_echo; // JSON snapshot of the resolved recipe
    std::uint64_t seed = 0;
};

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

// Eval-mode cross-entropy and accuracy against clean labels.
EvalResult evaluate(const TransformerModel& model, const std::vector<Example>& pool,
                    std::size_t batch_size);

// Supervised fine-tuning with Adam, warmup schedule, and shuffled batches.
// A non-empty checkpoint_prefix gets the final model written there; on a
// NaN loss the run aborts with a NumericError after saving the last
// epoch-end parameters to the same prefix.
std::pair<TransformerModel, RunReport> train_teacher(const ModelConfig& cfg,
                                                     const Dataset& ds,
                                                     const TrainHyper& hyper,
                                                     std::uint64_t seed,
                                                     const std::string& checkpoint_prefix = "");

enum class DistillMethod { KdOnly, Ild, Crild };
enum class PhaseOrder { Sequential, Joint };

// Full distillation recipe. Sequential plans run every ILD step before the
// first PLD step; joint plans sum the ILD and PLD losses on each batch and
// run for ild_epochs at ild_lr. KdOnly skips the ILD phase entirely.
struct DistillPlan {
    DistillMethod method = DistillMethod::Ild;
    MappingSpec mapping;
    ObjectiveConfig objective;
    CRConfig cr;
    std::size_t ild_epochs = 20;
    std::size_t pld_epochs = 4;
    double ild_lr = 5e-4;
    double pld_lr = 2e-4;
    std::size_t batch_size = 32;
    PhaseOrder phase_order = PhaseOrder::Sequential;
    double clip_norm = 1.0;
    double warmup_frac = 0.1;
    std::optional<double> fixed_lambda; // ablation: bypass the Beta draw

    void validate() const;
};

std::string plan_to_json(const DistillPlan& plan);

// Executes the plan against a frozen teacher, starting from a copy of
// student_init. The ILD phase consumes the supplementary dataset when one
// is given (sequential plans only); PLD always consumes the target. Dev
// metrics are computed on the target dev split throughout.
std::pair<TransformerModel, RunReport> distill(const DistillPlan& plan,
                                               const TransformerModel& teacher,
                                               const TransformerModel& student_init,
                                               const Dataset& target,
                                               const Dataset* supplementary = nullptr,
                                               std::uint64_t seed = 0);

// <prefix>.jsonl gets one record per epoch; <prefix>.json the summary.
void save_report(const std::string& prefix, const RunReport& report);

struct NamedPlan {
    std::string name;
    DistillPlan plan;
};

struct CellResult {
    std::string plan;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double metric = 0.0;
    RunReport report;
};

// Aggregates cover succeeded seeds only; stddev is the sample standard
// deviation (0 when fewer than two runs succeeded).
struct PlanAggregate {
    std::string plan;
    std::size_t seeds = 0;
    std::size_t succeeded = 0;
    double mean = 0.0;
    double stddev = 0.0;
};

struct GridReport {
    std::vector<CellResult> cells;
    std::vector<PlanAggregate> aggregates;
    bool all_ok = false;
};

using CellRunner = std::function<RunReport(const NamedPlan&, std::uint64_t)>;

// Runs every (plan, seed) cell through run_cell. Cells are independent; a
// throwing cell is recorded as failed and the rest continue.
GridReport run_experiment_grid(const std::vector<NamedPlan>& plans,
                               const std::vector<std::uint64_t>& seeds,
                               const CellRunner& run_cell);

std::string grid_to_json(const GridReport& grid);

} // namespace ildlab
