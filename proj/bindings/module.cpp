#include <optional>

#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ildlab/analysis.hpp"
#include "ildlab/checkpoint.hpp"
#include "ildlab/data.hpp"
#include "ildlab/errors.hpp"
#include "ildlab/mapping.hpp"
#include "ildlab/model.hpp"
#include "ildlab/pipeline.hpp"

namespace py = pybind11;
using namespace ildlab;

PYBIND11_MODULE(_ildlab, m) {
    m.doc() = "intermediate-layer distillation laboratory";
    m.attr("__version__") = "0.1.0";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);

    py::class_<Rng>(m, "Rng")
        .def_static("stream", &Rng::stream, py::arg("root_seed"), py::arg("purpose"))
        .def_static("derive", &Rng::derive, py::arg("root_seed"), py::arg("purpose"))
        .def("uniform", py::overload_cast<>(&Rng::uniform))
        .def("normal", py::overload_cast<>(&Rng::normal))
        .def("beta", &Rng::beta, py::arg("alpha"), py::arg("beta"))
        .def("permutation", &Rng::permutation, py::arg("n"));

    py::enum_<TaskFamily>(m, "TaskFamily")
        .value("SingleSentence", TaskFamily::SingleSentence)
        .value("SentencePair", TaskFamily::SentencePair);

    py::class_<TaskSpec>(m, "TaskSpec")
        .def(py::init<>())
        .def_readwrite("family", &TaskSpec::family)
        .def_readwrite("rule_seed", &TaskSpec::rule_seed)
        .def_readwrite("perturb_seed", &TaskSpec::perturb_seed)
        .def_readwrite("vocab_size", &TaskSpec::vocab_size)
        .def_readwrite("num_classes", &TaskSpec::num_classes)
        .def_readwrite("nominal_seq_len", &TaskSpec::nominal_seq_len)
        .def_readwrite("effective_len_target", &TaskSpec::effective_len_target)
        .def_readwrite("dataset_size", &TaskSpec::dataset_size)
        .def_readwrite("similarity_rho", &TaskSpec::similarity_rho)
        .def_readwrite("label_noise_rate", &TaskSpec::label_noise_rate)
        .def_readwrite("regression", &TaskSpec::regression)
        .def("validate", &TaskSpec::validate);

    py::class_<Example>(m, "Example")
        .def_readonly("tokens", &Example::tokens)
        .def_readonly("mask", &Example::mask)
        .def_readonly("label", &Example::label)
        .def_readonly("clean_label", &Example::clean_label);

    py::class_<Dataset>(m, "Dataset")
        .def_readonly("spec", &Dataset::spec)
        .def_readonly("train", &Dataset::train)
        .def_readonly("dev", &Dataset::dev);

    m.def("rule_groups", &rule_groups, py::arg("spec"));
    m.def("generate_task", &generate_task, py::arg("spec"), py::arg("data_seed"));
    m.def("inject_label_noise", &inject_label_noise, py::arg("dataset"), py::arg("p"),
          py::arg("rng"));
    m.def("downsample", &downsample, py::arg("dataset"), py::arg("n"), py::arg("rng"));
    m.def("make_supplementary", &make_supplementary, py::arg("target"), py::arg("size"),
          py::arg("effective_len"), py::arg("rho"), py::arg("rng"), py::arg("data_seed"));
    m.def("save_dataset", &save_dataset, py::arg("path"), py::arg("dataset"));
    m.def("load_dataset", &load_dataset, py::arg("path"));

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("num_layers", &ModelConfig::num_layers)
        .def_readwrite("hidden_dim", &ModelConfig::hidden_dim)
        .def_readwrite("num_heads", &ModelConfig::num_heads)
        .def_readwrite("ffn_dim", &ModelConfig::ffn_dim)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("max_seq_len", &ModelConfig::max_seq_len)
        .def_readwrite("num_classes", &ModelConfig::num_classes)
        .def_readwrite("dropout_rate", &ModelConfig::dropout_rate)
        .def("validate", &ModelConfig::validate)
        .def(py::self == py::self);

    py::class_<TransformerModel>(m, "TransformerModel")
        .def(py::init<ModelConfig, std::uint64_t>(), py::arg("config"),
             py::arg("init_seed"))
        .def_static("init_student_truncated", &TransformerModel::init_student_truncated,
                    py::arg("teacher"), py::arg("num_layers"), py::arg("head_seed"))
        .def_property_readonly("config", &TransformerModel::config)
        .def("param_count", &TransformerModel::param_count)
        .def("clone", &TransformerModel::clone);

    m.def(
        "save_model",
        [](const std::string& prefix, const TransformerModel& model) {
            checkpoint::save_model(prefix, model);
        },
        py::arg("prefix"), py::arg("model"));
    m.def(
        "load_model", [](const std::string& prefix) { return checkpoint::load_model(prefix); },
        py::arg("prefix"));

    py::class_<LayerPair>(m, "LayerPair")
        .def_readonly("teacher_layer", &LayerPair::teacher_layer)
        .def_readonly("student_layer", &LayerPair::student_layer)
        .def_readonly("weight", &LayerPair::weight);

    py::class_<TransportPlan>(m, "TransportPlan")
        .def_readonly("teacher_layers", &TransportPlan::teacher_layers)
        .def_readonly("student_layers", &TransportPlan::student_layers)
        .def_readonly("flow", &TransportPlan::flow)
        .def_readonly("total_cost", &TransportPlan::total_cost)
        .def("pairs", &TransportPlan::pairs, py::arg("support_tol") = 1e-12);

    m.def("map_last", &map_last, py::arg("teacher_layers"), py::arg("student_layers"));
    m.def("map_uniform", &map_uniform, py::arg("teacher_layers"),
          py::arg("student_layers"));
    m.def("map_emd", &map_emd, py::arg("cost"));

    py::enum_<MhaMetric>(m, "MhaMetric")
        .value("KLD", MhaMetric::KLD)
        .value("MSE", MhaMetric::MSE);
    py::enum_<IrVariant>(m, "IrVariant")
        .value("Pool", IrVariant::Pool)
        .value("Patience", IrVariant::Patience);
    py::enum_<MappingStrategy>(m, "MappingStrategy")
        .value("Last", MappingStrategy::Last)
        .value("Uniform", MappingStrategy::Uniform)
        .value("Emd", MappingStrategy::Emd);
    py::enum_<PairingRule>(m, "PairingRule")
        .value("UniformOther", PairingRule::UniformOther);
    py::enum_<DistillMethod>(m, "DistillMethod")
        .value("KdOnly", DistillMethod::KdOnly)
        .value("Ild", DistillMethod::Ild)
        .value("Crild", DistillMethod::Crild);
    py::enum_<PhaseOrder>(m, "PhaseOrder")
        .value("Sequential", PhaseOrder::Sequential)
        .value("Joint", PhaseOrder::Joint);

    py::class_<MappingSpec>(m, "MappingSpec")
        .def(py::init<>())
        .def_readwrite("strategy", &MappingSpec::strategy)
        .def_readwrite("teacher_layers", &MappingSpec::teacher_layers)
        .def_readwrite("student_layers", &MappingSpec::student_layers)
        .def_readwrite("emd_refresh_interval", &MappingSpec::emd_refresh_interval);

    py::class_<ObjectiveConfig>(m, "ObjectiveConfig")
        .def(py::init<>())
        .def_readwrite("mha_enabled", &ObjectiveConfig::mha_enabled)
        .def_readwrite("mha_metric", &ObjectiveConfig::mha_metric)
        .def_readwrite("ir_enabled", &ObjectiveConfig::ir_enabled)
        .def_readwrite("ir_variant", &ObjectiveConfig::ir_variant)
        .def_readwrite("pl_temperature", &ObjectiveConfig::pl_temperature);

    py::class_<CRConfig>(m, "CRConfig")
        .def(py::init<>())
        .def_readwrite("alpha", &CRConfig::alpha)
        .def_readwrite("warmup_T", &CRConfig::warmup_T)
        .def_readwrite("w_mha_cr", &CRConfig::w_mha_cr)
        .def_readwrite("w_ir_cr", &CRConfig::w_ir_cr)
        .def_readwrite("pairing", &CRConfig::pairing)
        .def_readwrite("detach_targets", &CRConfig::detach_targets)
        .def_readwrite("include_original_batch", &CRConfig::include_original_batch);

    py::class_<TrainHyper>(m, "TrainHyper")
        .def(py::init<>())
        .def_readwrite("epochs", &TrainHyper::epochs)
        .def_readwrite("lr", &TrainHyper::lr)
        .def_readwrite("batch_size", &TrainHyper::batch_size)
        .def_readwrite("clip_norm", &TrainHyper::clip_norm)
        .def_readwrite("warmup_frac", &TrainHyper::warmup_frac);

    py::class_<DistillPlan>(m, "DistillPlan")
        .def(py::init<>())
        .def_readwrite("method", &DistillPlan::method)
        .def_readwrite("mapping", &DistillPlan::mapping)
        .def_readwrite("objective", &DistillPlan::objective)
        .def_readwrite("cr", &DistillPlan::cr)
        .def_readwrite("ild_epochs", &DistillPlan::ild_epochs)
        .def_readwrite("pld_epochs", &DistillPlan::pld_epochs)
        .def_readwrite("ild_lr", &DistillPlan::ild_lr)
        .def_readwrite("pld_lr", &DistillPlan::pld_lr)
        .def_readwrite("batch_size", &DistillPlan::batch_size)
        .def_readwrite("phase_order", &DistillPlan::phase_order)
        .def_readwrite("clip_norm", &DistillPlan::clip_norm)
        .def_readwrite("warmup_frac", &DistillPlan::warmup_frac)
        .def_readwrite("fixed_lambda", &DistillPlan::fixed_lambda)
        .def("validate", &DistillPlan::validate);
    m.def("plan_to_json", &plan_to_json, py::arg("plan"));

    py::class_<StepRecord>(m, "StepRecord")
        .def_readonly("phase", &StepRecord::phase)
        .def_readonly("step", &StepRecord::step)
        .def_readonly("lr", &StepRecord::lr)
        .def_readonly("total", &StepRecord::total)
        .def_readonly("l_mha", &StepRecord::l_mha)
        .def_readonly("l_ir", &StepRecord::l_ir)
        .def_readonly("r_mha", &StepRecord::r_mha)
        .def_readonly("r_ir", &StepRecord::r_ir)
        .def_readonly("l_pl", &StepRecord::l_pl)
        .def_readonly("lambda_", &StepRecord::lambda);

    py::class_<EpochRecord>(m, "EpochRecord")
        .def_readonly("phase", &EpochRecord::phase)
        .def_readonly("epoch", &EpochRecord::epoch)
        .def_readonly("train_loss", &EpochRecord::train_loss)
        .def_readonly("train_accuracy", &EpochRecord::train_accuracy)
        .def_readonly("dev_loss", &EpochRecord::dev_loss)
        .def_readonly("dev_accuracy", &EpochRecord::dev_accuracy);

    py::class_<RunReport>(m, "RunReport")
        .def_readonly("steps", &RunReport::steps)
        .def_readonly("epochs", &RunReport::epochs)
        .def_readonly("final_dev_metric", &RunReport::final_dev_metric)
        .def_readonly("wall_time_seconds", &RunReport::wall_time_seconds)
        .def_readonly("config_echo", &RunReport::config_echo)
        .def_readonly("seed", &RunReport::seed);
    m.def("save_report", &save_report, py::arg("prefix"), py::arg("report"));

    py::class_<EvalResult>(m, "EvalResult")
        .def_readonly("loss", &EvalResult::loss)
        .def_readonly("accuracy", &EvalResult::accuracy);
    m.def("evaluate", &evaluate, py::arg("model"), py::arg("pool"),
          py::arg("batch_size") = 32);

    m.def("train_teacher", &train_teacher, py::arg("config"), py::arg("dataset"),
          py::arg("hyper"), py::arg("seed"), py::arg("checkpoint_prefix") = "");
    m.def(
        "distill",
        [](const DistillPlan& plan, const TransformerModel& teacher,
           const TransformerModel& student_init, const Dataset& target,
           std::optional<Dataset> supplementary, std::uint64_t seed) {
            return distill(plan, teacher, student_init, target,
                           supplementary ? &*supplementary : nullptr, seed);
        },
        py::arg("plan"), py::arg("teacher"), py::arg("student_init"), py::arg("target"),
        py::arg("supplementary") = std::nullopt, py::arg("seed") = 0);

    py::class_<ProbeReport>(m, "ProbeReport")
        .def_readonly("kind", &ProbeReport::kind)
        .def_readonly("grid", &ProbeReport::grid)
        .def_readonly("values", &ProbeReport::values)
        .def_readonly("summary", &ProbeReport::summary);
    m.def("probe_to_json", &probe_to_json, py::arg("report"));
    m.def("noise_robustness_probe", &noise_robustness_probe, py::arg("model"),
          py::arg("pool"), py::arg("sigmas"), py::arg("draws_per_sigma"), py::arg("seed"),
          py::arg("batch_size") = 32);
    m.def("linear_probe", &linear_probe, py::arg("model"), py::arg("dataset"),
          py::arg("layer"), py::arg("iters") = 200, py::arg("lr") = 0.1,
          py::arg("batch_size") = 64);

    py::class_<SurfaceReport>(m, "SurfaceReport")
        .def_readonly("alphas", &SurfaceReport::alphas)
        .def_readonly("betas", &SurfaceReport::betas)
        .def_readonly("losses", &SurfaceReport::losses);
    m.def("loss_surface", &loss_surface, py::arg("m0"), py::arg("m1"), py::arg("m2"),
          py::arg("pool"), py::arg("grid_n") = 25, py::arg("lo") = -1.0,
          py::arg("hi") = 2.0, py::arg("batch_size") = 32);
    m.def("surface_to_csv", &surface_to_csv, py::arg("report"));

    py::class_<Quadrature>(m, "Quadrature")
        .def_readonly("node1", &Quadrature::node1)
        .def_readonly("weight1", &Quadrature::weight1)
        .def_readonly("node2", &Quadrature::node2)
        .def_readonly("weight2", &Quadrature::weight2);
    m.def("beta_quadrature", &beta_quadrature, py::arg("alpha"));

    py::class_<BetaMomentReport>(m, "BetaMomentReport")
        .def_readonly("alpha", &BetaMomentReport::alpha)
        .def_readonly("e_lambda_closed", &BetaMomentReport::e_lambda_closed)
        .def_readonly("e_lambda_quadrature", &BetaMomentReport::e_lambda_quadrature)
        .def_readonly("e_lambda_sq_closed", &BetaMomentReport::e_lambda_sq_closed)
        .def_readonly("e_lambda_sq_quadrature", &BetaMomentReport::e_lambda_sq_quadrature)
        .def_readonly("max_abs_diff", &BetaMomentReport::max_abs_diff);
    m.def("beta_moment_check", &beta_moment_check, py::arg("alpha"));

    py::class_<TaylorSetup>(m, "TaylorSetup")
        .def(py::init<>())
        .def_readwrite("W", &TaylorSetup::W)
        .def_readwrite("hessian", &TaylorSetup::hessian)
        .def_readwrite("b", &TaylorSetup::b)
        .def_readwrite("h", &TaylorSetup::h)
        .def_readwrite("y", &TaylorSetup::y)
        .def_readwrite("alpha", &TaylorSetup::alpha)
        .def("validate", &TaylorSetup::validate);
    m.def("random_taylor_setup", &random_taylor_setup, py::arg("rng"), py::arg("points"),
          py::arg("in_dim"), py::arg("out_dim"), py::arg("y_dim"), py::arg("alpha"));

    py::class_<TheoremReport>(m, "TheoremReport")
        .def_readonly("l_std", &TheoremReport::l_std)
        .def_readonly("l_mix_numeric", &TheoremReport::l_mix_numeric)
        .def_readonly("l_mix_taylor", &TheoremReport::l_mix_taylor)
        .def_readonly("l_mix_completed_square", &TheoremReport::l_mix_completed_square)
        .def_readonly("max_abs_diff", &TheoremReport::max_abs_diff);
    m.def("verify_theorem1", &verify_theorem1, py::arg("setup"));
    m.def("theorem_to_json", &theorem_to_json, py::arg("report"));
}
