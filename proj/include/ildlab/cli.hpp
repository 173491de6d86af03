#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ildlab/data.hpp"
#include "ildlab/model.hpp"
#include "ildlab/pipeline.hpp"

namespace ildlab::cli {

// The JSON schema every experiment config is validated against. The same
// text ships as configs/schema.json; a test pins the two together.
const std::string& schema_text();

// Collects every violation (unknown keys, wrong types, missing required
// fields, enum and bound violations) and throws one ConfigError whose
// message lists them as dotted field paths.
void validate_config(const nlohmann::json& config);

// Applies one dotted-path override ("plans.0.ild_epochs=3"). The value is
// parsed as JSON when possible and falls back to a raw string. New keys may
// be created; validation afterwards rejects the unknown ones.
void apply_override(nlohmann::json& config, const std::string& spec);

struct SupplementaryRequest {
    std::size_t size = 0;
    std::size_t effective_len = 0;
    double rho = 0.0;
};

// A config resolved into engine types. Everything downstream is a pure
// function of this struct, so byte-idempotent artifacts follow from the
// determinism of the engine.
struct Experiment {
    nlohmann::json echo; // post-override document, revalidated on load
    std::uint64_t seed = 0;
    std::string out_dir;
    TaskSpec task;
    std::optional<SupplementaryRequest> supplementary;
    ModelConfig teacher;
    TrainHyper teacher_hyper;
    std::size_t student_layers = 0;
    std::vector<NamedPlan> plans;
    std::vector<bool> plan_uses_supplementary;
    std::vector<std::uint64_t> seeds; // grid seeds; falls back to {seed}
    std::size_t workers = 1;
    nlohmann::json probes; // raw probe requests, may be empty
};

// Validates, then maps the document onto engine types. --seed and --out
// overrides are applied by the caller before this point.
Experiment resolve_config(const nlohmann::json& config);

// Deterministic dataset builders shared by every command.
Dataset build_target(const Experiment& ex);
Dataset build_supplementary(const Experiment& ex);

int cmd_gen(const Experiment& ex);
int cmd_train_teacher(const Experiment& ex);
int cmd_distill(const Experiment& ex);
int cmd_probe(const Experiment& ex);
int cmd_grid(const Experiment& ex);

// Full entry point: loads the config, applies overrides, validates,
// resolves, dispatches, and converts errors into a nonzero exit plus a
// FAILED marker in the output directory when one is known.
int run_command(const std::string& command, const std::string& config_path,
                std::optional<std::uint64_t> seed_override,
                std::optional<std::string> out_override,
                const std::vector<std::string>& overrides);

} // namespace ildlab::cli
