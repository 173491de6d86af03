#include "ildlab/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "ildlab/analysis.hpp"
#include "ildlab/checkpoint.hpp"
#include "ildlab/errors.hpp"

namespace ildlab::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr const char* kSchema = R"({
  "type": "object",
  "fields": {
    "version": {"type": "integer", "required": true, "min": 1},
    "seed": {"type": "integer", "min": 0},
    "out_dir": {"type": "string"},
    "task": {"type": "object", "required": true, "fields": {
      "family": {"type": "string", "enum": ["single", "pair"]},
      "rule_seed": {"type": "integer", "min": 0},
      "perturb_seed": {"type": "integer", "min": 0},
      "vocab_size": {"type": "integer", "min": 1},
      "num_classes": {"type": "integer", "min": 2},
      "nominal_seq_len": {"type": "integer", "min": 1},
      "effective_len_target": {"type": "integer", "min": 1},
      "dataset_size": {"type": "integer", "min": 5},
      "similarity_rho": {"type": "number", "min": 0},
      "label_noise_rate": {"type": "number", "min": 0},
      "regression": {"type": "boolean"}
    }},
    "supplementary": {"type": "object", "fields": {
      "size": {"type": "integer", "required": true, "min": 5},
      "effective_len": {"type": "integer", "required": true, "min": 1},
      "rho": {"type": "number", "required": true, "min": 0}
    }},
    "teacher": {"type": "object", "required": true, "fields": {
      "num_layers": {"type": "integer", "min": 1},
      "hidden_dim": {"type": "integer", "min": 1},
      "num_heads": {"type": "integer", "min": 1},
      "ffn_dim": {"type": "integer", "min": 1},
      "dropout_rate": {"type": "number", "min": 0}
    }},
    "teacher_hyper": {"type": "object", "fields": {
      "epochs": {"type": "integer", "min": 0},
      "lr": {"type": "number"},
      "batch_size": {"type": "integer", "min": 1},
      "clip_norm": {"type": "number"},
      "warmup_frac": {"type": "number", "min": 0}
    }},
    "student_layers": {"type": "integer", "min": 1},
    "plans": {"type": "array", "items": {"type": "object", "fields": {
      "name": {"type": "string", "required": true},
      "method": {"type": "string", "required": true, "enum": ["kd_only", "ild", "crild"]},
      "mapping": {"type": "object", "fields": {
        "strategy": {"type": "string", "enum": ["last", "uniform", "emd"]},
        "emd_refresh_interval": {"type": "integer", "min": 1}
      }},
      "objective": {"type": "object", "fields": {
        "mha_enabled": {"type": "boolean"},
        "mha_metric": {"type": "string", "enum": ["kld", "mse"]},
        "ir_enabled": {"type": "boolean"},
        "ir_variant": {"type": "string", "enum": ["pool", "patience"]},
        "pl_temperature": {"type": "number"}
      }},
      "cr": {"type": "object", "fields": {
        "alpha": {"type": "number"},
        "warmup_T": {"type": "integer", "min": 1},
        "w_mha_cr": {"type": "number", "min": 0},
        "w_ir_cr": {"type": "number", "min": 0},
        "detach_targets": {"type": "boolean"},
        "include_original_batch": {"type": "boolean"}
      }},
      "ild_epochs": {"type": "integer", "min": 0},
      "pld_epochs": {"type": "integer", "min": 0},
      "ild_lr": {"type": "number"},
      "pld_lr": {"type": "number"},
      "batch_size": {"type": "integer", "min": 1},
      "phase_order": {"type": "string", "enum": ["sequential", "joint"]},
      "clip_norm": {"type": "number"},
      "warmup_frac": {"type": "number", "min": 0},
      "fixed_lambda": {"type": "number", "min": 0},
      "use_supplementary": {"type": "boolean"}
    }}},
    "seeds": {"type": "array", "items": {"type": "integer", "min": 0}},
    "workers": {"type": "integer", "min": 1},
    "probes": {"type": "object", "fields": {
      "noise": {"type": "object", "fields": {
        "sigmas": {"type": "array", "required": true, "items": {"type": "number", "min": 0}},
        "draws": {"type": "integer", "min": 1},
        "pool": {"type": "string", "enum": ["train", "dev"]}
      }},
      "linear": {"type": "object", "fields": {
        "layer": {"type": "integer", "required": true, "min": 0}
      }},
      "surface": {"type": "object", "fields": {
        "plan_a": {"type": "string", "required": true},
        "plan_b": {"type": "string", "required": true},
        "grid_n": {"type": "integer", "min": 2},
        "lo": {"type": "number"},
        "hi": {"type": "number"},
        "pool": {"type": "string", "enum": ["train", "dev"]}
      }}
    }}
  }
}
)";

void check_node(const json& node, const json& schema, const std::string& path,
                std::vector<std::string>& errs) {
    const std::string type = schema.at("type");
    const std::string where = path.empty() ? "(root)" : path;
    if (type == "object") {
        if (!node.is_object()) {
            errs.push_back(where + ": expected an object");
            return;
        }
        const json fields = schema.value("fields", json::object());
        for (const auto& [name, field_schema] : fields.items()) {
            const std::string child = path.empty() ? name : path + "." + name;
            if (node.contains(name))
                check_node(node.at(name), field_schema, child, errs);
            else if (field_schema.value("required", false))
                errs.push_back(child + ": required field is missing");
        }
        for (const auto& [name, value] : node.items()) {
            (void)value;
            if (!fields.contains(name))
                errs.push_back((path.empty() ? name : path + "." + name) +
                               ": unknown key");
        }
    } else if (type == "array") {
        if (!node.is_array()) {
            errs.push_back(where + ": expected an array");
            return;
        }
        const json& items = schema.at("items");
        for (std::size_t i = 0; i < node.size(); ++i)
            check_node(node[i], items, path + "[" + std::to_string(i) + "]", errs);
    } else if (type == "string") {
        if (!node.is_string()) {
            errs.push_back(where + ": expected a string");
            return;
        }
        if (schema.contains("enum")) {
            const auto& allowed = schema.at("enum");
            if (std::find(allowed.begin(), allowed.end(), node) == allowed.end())
                errs.push_back(where + ": '" + node.get<std::string>() +
                               "' is not one of " + allowed.dump());
        }
    } else if (type == "integer" || type == "number") {
        const bool ok = type == "integer" ? node.is_number_integer() : node.is_number();
        if (!ok) {
            errs.push_back(where + ": expected " +
                           (type == "integer" ? "an integer" : "a number"));
            return;
        }
        if (schema.contains("min") && node.get<double>() < schema.at("min").get<double>())
            errs.push_back(where + ": below minimum " + schema.at("min").dump());
    } else if (type == "boolean") {
        if (!node.is_boolean())
            errs.push_back(where + ": expected a boolean");
    }
}

std::vector<std::string> split_path(const std::string& dotted) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : dotted) {
        if (c == '.') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(cur);
    return parts;
}

bool all_digits(const std::string& s) {
    return !s.empty() && std::all_of(s.begin(), s.end(),
                                     [](char c) { return c >= '0' && c <= '9'; });
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ConfigError("cannot read '" + path + "'");
    return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot write '" + path + "'");
    out << content;
}

void echo_config(const Experiment& ex, const std::string& dir) {
    write_text_file(dir + "/config.json", ex.echo.dump(2) + "\n");
}

// wall_time_seconds is the one run-to-run varying field; artifacts stay
// byte-stable by reporting timing on stdout instead.
void persist_report(const std::string& prefix, RunReport report) {
    report.wall_time_seconds = 0.0;
    save_report(prefix, report);
}

TransformerModel ensure_teacher(const Experiment& ex, const Dataset& target) {
    const std::string prefix = ex.out_dir + "/teacher";
    if (fs::exists(prefix + ".json") && fs::exists(prefix + ".bin")) {
        TransformerModel model = checkpoint::load_model(prefix);
        if (!(model.config() == ex.teacher))
            throw ConfigError("teacher checkpoint at '" + prefix +
                              "' was built from a different model config; delete it "
                              "or change out_dir");
        return model;
    }
    auto [model, report] = train_teacher(ex.teacher, target, ex.teacher_hyper, ex.seed, prefix);
    persist_report(ex.out_dir + "/teacher_report", report);
    return model;
}

TransformerModel student_init_for(const TransformerModel& teacher, const Experiment& ex,
                                  std::uint64_t seed) {
    return TransformerModel::init_student_truncated(teacher, ex.student_layers,
                                                    Rng::derive(seed, "student_init"));
}

struct DistillArtifacts {
    TransformerModel student;
    RunReport report;
};

DistillArtifacts run_plan_cell(const Experiment& ex, const TransformerModel& teacher,
                               std::size_t plan_index, std::uint64_t seed,
                               const Dataset& target, const Dataset* supp,
                               const std::string& dir) {
    const NamedPlan& np = ex.plans[plan_index];
    const Dataset* supp_for_plan =
        ex.plan_uses_supplementary[plan_index] ? supp : nullptr;
    const TransformerModel init = student_init_for(teacher, ex, seed);
    auto [student, report] = distill(np.plan, teacher, init, target, supp_for_plan, seed);
    fs::create_directories(dir);
    checkpoint::save_model(dir + "/student", student);
    persist_report(dir + "/report", report);
    echo_config(ex, dir);
    return {std::move(student), std::move(report)};
}

const std::vector<Example>& pick_pool(const Dataset& ds, const json& request) {
    return request.value("pool", std::string("train")) == "dev" ? ds.dev : ds.train;
}

std::size_t find_plan(const Experiment& ex, const std::string& name,
                      const std::string& field) {
    for (std::size_t i = 0; i < ex.plans.size(); ++i)
        if (ex.plans[i].name == name)
            return i;
    throw ConfigError(field + ": unknown plan '" + name + "'");
}

} // namespace

const std::string& schema_text() {
    static const std::string text = kSchema;
    return text;
}

void validate_config(const json& config) {
    static const json schema = json::parse(kSchema);
    std::vector<std::string> errs;
    check_node(config, schema, "", errs);
    if (!errs.empty()) {
        std::string msg = "config validation failed:";
        for (const std::string& e : errs)
            msg += "\n  " + e;
        throw ConfigError(msg);
    }
}

void apply_override(json& config, const std::string& spec) {
    const std::size_t eq = spec.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("override '" + spec + "': expected key=value");
    const std::string key = spec.substr(0, eq);
    const std::string raw = spec.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded())
        value = raw;

    json* cur = &config;
    const std::vector<std::string> parts = split_path(key);
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const std::string& part = parts[i];
        if (part.empty())
            throw ConfigError("override '" + spec + "': empty path segment");
        const bool last = i + 1 == parts.size();
        if (cur->is_array()) {
            if (!all_digits(part))
                throw ConfigError("override '" + spec + "': '" + part +
                                  "' is not an array index");
            const std::size_t idx = std::stoull(part);
            if (idx >= cur->size())
                throw ConfigError("override '" + spec + "': index " + part +
                                  " is out of range");
            cur = &(*cur)[idx];
        } else if (cur->is_object() || cur->is_null()) {
            cur = &(*cur)[part];
        } else {
            throw ConfigError("override '" + spec + "': '" + part +
                              "' descends into a scalar");
        }
        if (last)
            *cur = value;
    }
}

Experiment resolve_config(const json& config) {
    validate_config(config);
    if (config.at("version").get<int>() != 1)
        throw ConfigError("version: only version 1 is supported");

    Experiment ex;
    ex.echo = config;
    ex.seed = config.value("seed", 0);
    if (!config.contains("out_dir"))
        throw ConfigError("out_dir: required (set it in the config or pass --out)");
    ex.out_dir = config.at("out_dir");

    const json& t = config.at("task");
    ex.task.family = t.value("family", std::string("single")) == "pair"
                         ? TaskFamily::SentencePair
                         : TaskFamily::SingleSentence;
    ex.task.rule_seed = t.value("rule_seed", 0);
    ex.task.perturb_seed = t.value("perturb_seed", 0);
    ex.task.vocab_size = t.value("vocab_size", ex.task.vocab_size);
    ex.task.num_classes = t.value("num_classes", ex.task.num_classes);
    ex.task.nominal_seq_len = t.value("nominal_seq_len", ex.task.nominal_seq_len);
    ex.task.effective_len_target =
        t.value("effective_len_target", ex.task.effective_len_target);
    ex.task.dataset_size = t.value("dataset_size", ex.task.dataset_size);
    ex.task.similarity_rho = t.value("similarity_rho", 0.0);
    ex.task.label_noise_rate = t.value("label_noise_rate", 0.0);
    ex.task.regression = t.value("regression", false);
    try {
        ex.task.validate();
    } catch (const Error& e) {
        throw ConfigError(std::string("task: ") + e.what());
    }

    if (config.contains("supplementary")) {
        const json& s = config.at("supplementary");
        ex.supplementary = SupplementaryRequest{s.at("size"), s.at("effective_len"),
                                                s.at("rho")};
    }

    const json& m = config.at("teacher");
    ex.teacher.num_layers = m.value("num_layers", ex.teacher.num_layers);
    ex.teacher.hidden_dim = m.value("hidden_dim", ex.teacher.hidden_dim);
    ex.teacher.num_heads = m.value("num_heads", ex.teacher.num_heads);
    ex.teacher.ffn_dim = m.value("ffn_dim", ex.teacher.ffn_dim);
    ex.teacher.dropout_rate = m.value("dropout_rate", ex.teacher.dropout_rate);
    ex.teacher.vocab_size = ex.task.vocab_size;
    ex.teacher.max_seq_len = ex.task.nominal_seq_len;
    ex.teacher.num_classes = ex.task.num_classes;
    try {
        ex.teacher.validate();
    } catch (const Error& e) {
        throw ConfigError(std::string("teacher: ") + e.what());
    }

    const json h = config.value("teacher_hyper", json::object());
    ex.teacher_hyper.epochs = h.value("epochs", ex.teacher_hyper.epochs);
    ex.teacher_hyper.lr = h.value("lr", ex.teacher_hyper.lr);
    ex.teacher_hyper.batch_size = h.value("batch_size", ex.teacher_hyper.batch_size);
    ex.teacher_hyper.clip_norm = h.value("clip_norm", ex.teacher_hyper.clip_norm);
    ex.teacher_hyper.warmup_frac = h.value("warmup_frac", ex.teacher_hyper.warmup_frac);

    ex.student_layers = config.value("student_layers", ex.teacher.num_layers);
    if (ex.student_layers > ex.teacher.num_layers)
        throw ConfigError("student_layers: exceeds the teacher depth");

    for (std::size_t i = 0; i < config.value("plans", json::array()).size(); ++i) {
        const json& p = config.at("plans")[i];
        const std::string where = "plans[" + std::to_string(i) + "]";
        NamedPlan np;
        np.name = p.at("name");
        if (np.name.empty() ||
            !std::all_of(np.name.begin(), np.name.end(), [](char c) {
                return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
            }))
            throw ConfigError(where + ".name: use letters, digits, _ or -");
        for (const NamedPlan& other : ex.plans)
            if (other.name == np.name)
                throw ConfigError(where + ".name: duplicate plan name '" + np.name + "'");

        DistillPlan& plan = np.plan;
        const std::string method = p.at("method");
        plan.method = method == "kd_only" ? DistillMethod::KdOnly
                      : method == "ild"   ? DistillMethod::Ild
                                          : DistillMethod::Crild;
        const json mp = p.value("mapping", json::object());
        const std::string strategy = mp.value("strategy", std::string("last"));
        plan.mapping.strategy = strategy == "uniform" ? MappingStrategy::Uniform
                                : strategy == "emd"   ? MappingStrategy::Emd
                                                      : MappingStrategy::Last;
        plan.mapping.teacher_layers = ex.teacher.num_layers;
        plan.mapping.student_layers = ex.student_layers;
        plan.mapping.emd_refresh_interval =
            mp.value("emd_refresh_interval", plan.mapping.emd_refresh_interval);

        const json op = p.value("objective", json::object());
        plan.objective.mha_enabled = op.value("mha_enabled", plan.objective.mha_enabled);
        plan.objective.mha_metric = op.value("mha_metric", std::string("kld")) == "mse"
                                        ? MhaMetric::MSE
                                        : MhaMetric::KLD;
        plan.objective.ir_enabled = op.value("ir_enabled", plan.objective.ir_enabled);
        plan.objective.ir_variant = op.value("ir_variant", std::string("pool")) == "patience"
                                        ? IrVariant::Patience
                                        : IrVariant::Pool;
        plan.objective.pl_temperature =
            op.value("pl_temperature", plan.objective.pl_temperature);

        const json cp = p.value("cr", json::object());
        plan.cr.alpha = cp.value("alpha", plan.cr.alpha);
        plan.cr.warmup_T = cp.value("warmup_T", plan.cr.warmup_T);
        plan.cr.w_mha_cr = cp.value("w_mha_cr", plan.cr.w_mha_cr);
        plan.cr.w_ir_cr = cp.value("w_ir_cr", plan.cr.w_ir_cr);
        plan.cr.detach_targets = cp.value("detach_targets", plan.cr.detach_targets);
        plan.cr.include_original_batch =
            cp.value("include_original_batch", plan.cr.include_original_batch);

        plan.ild_epochs = p.value("ild_epochs", plan.ild_epochs);
        plan.pld_epochs = p.value("pld_epochs", plan.pld_epochs);
        plan.ild_lr = p.value("ild_lr", plan.ild_lr);
        plan.pld_lr = p.value("pld_lr", plan.pld_lr);
        plan.batch_size = p.value("batch_size", plan.batch_size);
        plan.phase_order = p.value("phase_order", std::string("sequential")) == "joint"
                               ? PhaseOrder::Joint
                               : PhaseOrder::Sequential;
        plan.clip_norm = p.value("clip_norm", plan.clip_norm);
        plan.warmup_frac = p.value("warmup_frac", plan.warmup_frac);
        if (p.contains("fixed_lambda"))
            plan.fixed_lambda = p.at("fixed_lambda").get<double>();

        const bool use_supp = p.value("use_supplementary", false);
        if (use_supp && !ex.supplementary)
            throw ConfigError(where +
                              ".use_supplementary: no supplementary block configured");
        try {
            plan.validate();
        } catch (const Error& e) {
            throw ConfigError(where + ": " + e.what());
        }
        ex.plans.push_back(std::move(np));
        ex.plan_uses_supplementary.push_back(use_supp);
    }

    for (const auto& s : config.value("seeds", json::array()))
        ex.seeds.push_back(s.get<std::uint64_t>());
    if (ex.seeds.empty())
        ex.seeds.push_back(ex.seed);
    ex.workers = config.value("workers", 1);
    ex.probes = config.value("probes", json::object());
    return ex;
}

Dataset build_target(const Experiment& ex) {
    return generate_task(ex.task, Rng::derive(ex.seed, "task_data"));
}

Dataset build_supplementary(const Experiment& ex) {
    if (!ex.supplementary)
        throw ConfigError("supplementary: no supplementary block configured");
    Rng rule_rng = Rng::stream(ex.task.rule_seed, "supp_rule");
    return make_supplementary(ex.task, ex.supplementary->size,
                              ex.supplementary->effective_len, ex.supplementary->rho,
                              rule_rng, Rng::derive(ex.seed, "supp_data"));
}

int cmd_gen(const Experiment& ex) {
    const Dataset target = build_target(ex);
    save_dataset(ex.out_dir + "/task.jsonl", target);
    std::printf("gen: task.jsonl train=%zu dev=%zu\n", target.train.size(),
                target.dev.size());
    if (ex.supplementary) {
        const Dataset supp = build_supplementary(ex);
        save_dataset(ex.out_dir + "/supplementary.jsonl", supp);
        std::printf("gen: supplementary.jsonl train=%zu dev=%zu\n", supp.train.size(),
                    supp.dev.size());
    }
    echo_config(ex, ex.out_dir);
    return 0;
}

int cmd_train_teacher(const Experiment& ex) {
    const Dataset target = build_target(ex);
    const auto start = std::chrono::steady_clock::now();
    auto [model, report] =
        train_teacher(ex.teacher, target, ex.teacher_hyper, ex.seed, ex.out_dir + "/teacher");
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    persist_report(ex.out_dir + "/teacher_report", report);
    echo_config(ex, ex.out_dir);
    std::printf("train-teacher: dev_acc=%.4f (%.1fs)\n", report.final_dev_metric, secs);
    return 0;
}

int cmd_distill(const Experiment& ex) {
    if (ex.plans.empty())
        throw ConfigError("plans: at least one plan is required");
    const Dataset target = build_target(ex);
    Dataset supp;
    const bool any_supp =
        std::find(ex.plan_uses_supplementary.begin(), ex.plan_uses_supplementary.end(),
                  true) != ex.plan_uses_supplementary.end();
    if (any_supp)
        supp = build_supplementary(ex);
    const TransformerModel teacher = ensure_teacher(ex, target);

    for (std::size_t i = 0; i < ex.plans.size(); ++i) {
        const auto start = std::chrono::steady_clock::now();
        const DistillArtifacts cell =
            run_plan_cell(ex, teacher, i, ex.seed, target, any_supp ? &supp : nullptr,
                          ex.out_dir + "/" + ex.plans[i].name);
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                .count();
        std::printf("distill: %-16s dev_acc=%.4f (%.1fs)\n", ex.plans[i].name.c_str(),
                    cell.report.final_dev_metric, secs);
    }
    echo_config(ex, ex.out_dir);
    return 0;
}

int cmd_probe(const Experiment& ex) {
    if (ex.probes.empty())
        throw ConfigError("probes: nothing requested");
    if (ex.plans.empty())
        throw ConfigError("plans: probes need at least one plan");
    const Dataset target = build_target(ex);
    Dataset supp;
    const bool any_supp =
        std::find(ex.plan_uses_supplementary.begin(), ex.plan_uses_supplementary.end(),
                  true) != ex.plan_uses_supplementary.end();
    if (any_supp)
        supp = build_supplementary(ex);
    const TransformerModel teacher = ensure_teacher(ex, target);

    ModelConfig expected_student = ex.teacher;
    expected_student.num_layers = ex.student_layers;

    std::vector<TransformerModel> students;
    for (std::size_t i = 0; i < ex.plans.size(); ++i) {
        const std::string dir = ex.out_dir + "/" + ex.plans[i].name;
        const std::string prefix = dir + "/student";
        if (fs::exists(prefix + ".json") && fs::exists(prefix + ".bin")) {
            TransformerModel model = checkpoint::load_model(prefix);
            if (!(model.config() == expected_student))
                throw ConfigError("student checkpoint at '" + prefix +
                                  "' does not match the configured student; delete it "
                                  "or change out_dir");
            students.push_back(std::move(model));
        } else {
            students.push_back(run_plan_cell(ex, teacher, i, ex.seed, target,
                                             any_supp ? &supp : nullptr, dir)
                                   .student);
        }
    }

    json summary;
    if (ex.probes.contains("noise")) {
        const json& req = ex.probes.at("noise");
        const std::vector<double> sigmas = req.at("sigmas").get<std::vector<double>>();
        const std::size_t draws = req.value("draws", 8);
        const auto& pool = pick_pool(target, req);
        for (std::size_t i = 0; i < ex.plans.size(); ++i) {
            const ProbeReport rep = noise_robustness_probe(
                students[i], pool, sigmas, draws, Rng::derive(ex.seed, "noise_probe"));
            write_text_file(ex.out_dir + "/" + ex.plans[i].name + "/noise_probe.json",
                            probe_to_json(rep) + "\n");
            summary["noise"][ex.plans[i].name] = rep.summary;
        }
    }
    if (ex.probes.contains("linear")) {
        const std::size_t layer = ex.probes.at("linear").at("layer");
        json accs;
        for (std::size_t i = 0; i < ex.plans.size(); ++i)
            accs[ex.plans[i].name] = linear_probe(students[i], target, layer);
        write_text_file(ex.out_dir + "/linear_probe.json", accs.dump(2) + "\n");
        summary["linear"] = accs;
    }
    if (ex.probes.contains("surface")) {
        const json& req = ex.probes.at("surface");
        const std::size_t ia = find_plan(ex, req.at("plan_a"), "probes.surface.plan_a");
        const std::size_t ib = find_plan(ex, req.at("plan_b"), "probes.surface.plan_b");
        const TransformerModel init = student_init_for(teacher, ex, ex.seed);
        const SurfaceReport rep = loss_surface(
            init, students[ia], students[ib], pick_pool(target, req),
            req.value("grid_n", 9), req.value("lo", -1.0), req.value("hi", 2.0));
        write_text_file(ex.out_dir + "/surface.csv", surface_to_csv(rep));
        summary["surface"] = {{"file", "surface.csv"},
                              {"plan_a", ex.plans[ia].name},
                              {"plan_b", ex.plans[ib].name}};
    }
    write_text_file(ex.out_dir + "/probe_summary.json", summary.dump(2) + "\n");
    echo_config(ex, ex.out_dir);
    std::printf("probe: wrote probe_summary.json\n");
    return 0;
}

int cmd_grid(const Experiment& ex) {
    if (ex.plans.empty())
        throw ConfigError("plans: at least one plan is required");
    const Dataset target = build_target(ex);
    Dataset supp;
    const bool any_supp =
        std::find(ex.plan_uses_supplementary.begin(), ex.plan_uses_supplementary.end(),
                  true) != ex.plan_uses_supplementary.end();
    if (any_supp)
        supp = build_supplementary(ex);
    const TransformerModel teacher = ensure_teacher(ex, target);

    const auto cell_dir = [&](const std::string& plan, std::uint64_t seed) {
        return ex.out_dir + "/grid/" + plan + "_s" + std::to_string(seed);
    };
    const auto plan_index = [&](const NamedPlan& np) {
        for (std::size_t i = 0; i < ex.plans.size(); ++i)
            if (&ex.plans[i] == &np)
                return i;
        return find_plan(ex, np.name, "grid");
    };
    const CellRunner runner = [&](const NamedPlan& np, std::uint64_t seed) {
        return run_plan_cell(ex, teacher, plan_index(np), seed, target,
                             any_supp ? &supp : nullptr, cell_dir(np.name, seed))
            .report;
    };

    GridReport grid;
    const std::size_t pool_size = std::min(ex.workers, ex.plans.size() * ex.seeds.size());
    if (pool_size <= 1) {
        grid = run_experiment_grid(ex.plans, ex.seeds, runner);
    } else {
        // Precompute the cells on a worker pool, then replay the results
        // through the sequential aggregator so both paths share it.
        struct Slot {
            bool ok = false;
            std::string error;
            RunReport report;
        };
        std::vector<Slot> slots(ex.plans.size() * ex.seeds.size());
        std::atomic<std::size_t> next{0};
        const auto worker = [&] {
            while (true) {
                const std::size_t k = next.fetch_add(1);
                if (k >= slots.size())
                    return;
                const NamedPlan& np = ex.plans[k / ex.seeds.size()];
                const std::uint64_t seed = ex.seeds[k % ex.seeds.size()];
                try {
                    slots[k].report = runner(np, seed);
                    slots[k].ok = true;
                } catch (const std::exception& e) {
                    slots[k].error = e.what();
                }
            }
        };
        std::vector<std::thread> threads;
        for (std::size_t w = 0; w < pool_size; ++w)
            threads.emplace_back(worker);
        for (std::thread& th : threads)
            th.join();
        grid = run_experiment_grid(
            ex.plans, ex.seeds, [&](const NamedPlan& np, std::uint64_t seed) {
                std::size_t si = 0;
                for (const std::uint64_t s : ex.seeds) {
                    if (s == seed)
                        break;
                    ++si;
                }
                const Slot& slot = slots[plan_index(np) * ex.seeds.size() + si];
                if (!slot.ok)
                    throw ConfigError(slot.error);
                return slot.report;
            });
    }

    for (const CellResult& cell : grid.cells)
        if (!cell.ok) {
            fs::create_directories(cell_dir(cell.plan, cell.seed));
            write_text_file(cell_dir(cell.plan, cell.seed) + "/FAILED",
                            cell.error + "\n");
        }
    write_text_file(ex.out_dir + "/grid_summary.json", grid_to_json(grid) + "\n");
    echo_config(ex, ex.out_dir);
    for (const PlanAggregate& agg : grid.aggregates)
        std::printf("grid: %-16s mean=%.4f sd=%.4f (%zu/%zu ok)\n", agg.plan.c_str(),
                    agg.mean, agg.stddev, agg.succeeded, agg.seeds);
    return grid.all_ok ? 0 : 1;
}

int run_command(const std::string& command, const std::string& config_path,
                std::optional<std::uint64_t> seed_override,
                std::optional<std::string> out_override,
                const std::vector<std::string>& overrides) {
    std::string out_dir;
    try {
        json config = json::parse(read_text_file(config_path), nullptr, false);
        if (config.is_discarded())
            throw ConfigError("'" + config_path + "' is not valid JSON");
        for (const std::string& ov : overrides)
            apply_override(config, ov);
        if (seed_override)
            config["seed"] = *seed_override;
        if (out_override)
            config["out_dir"] = *out_override;
        if (config.contains("out_dir") && config.at("out_dir").is_string())
            out_dir = config.at("out_dir").get<std::string>();

        const Experiment ex = resolve_config(config);
        out_dir = ex.out_dir;
        fs::create_directories(out_dir);
        fs::remove(out_dir + "/FAILED");

        if (command == "gen")
            return cmd_gen(ex);
        if (command == "train-teacher")
            return cmd_train_teacher(ex);
        if (command == "distill")
            return cmd_distill(ex);
        if (command == "probe")
            return cmd_probe(ex);
        if (command == "grid")
            return cmd_grid(ex);
        throw ConfigError("unknown command '" + command + "'");
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        if (!out_dir.empty()) {
            std::error_code ec;
            fs::create_directories(out_dir, ec);
            if (!ec) {
                std::ofstream marker(out_dir + "/FAILED", std::ios::trunc);
                marker << e.what() << "\n";
            }
        }
        return 1;
    }
}

} // namespace ildlab::cli
