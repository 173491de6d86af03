#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ildlab/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"ildlab: distillation experiments on synthetic tasks"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::vector<std::string> overrides;

    const auto add = [&](const std::string& name, const std::string& desc) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", config_path, "experiment config JSON")
            ->required();
        sub->add_option("--seed", seed, "override the global seed");
        sub->add_option("--out", out, "override the output directory");
        sub->add_option("--override", overrides,
                        "dotted-path config override, key=value (repeatable)");
        return sub;
    };
    add("gen", "write the task (and supplementary) datasets");
    add("train-teacher", "train and checkpoint the teacher");
    add("distill", "run every configured plan once at the global seed");
    add("probe", "run the configured probes on distilled students");
    add("grid", "run plans x seeds and aggregate the results");

    CLI11_PARSE(app, argc, argv);
    const std::string cmd = app.get_subcommands().front()->get_name();
    return ildlab::cli::run_command(cmd, config_path, seed, out, overrides);
}
