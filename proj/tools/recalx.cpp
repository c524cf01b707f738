#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "cli_support.hpp"
#include "recalx/calibrate.hpp"
#include "recalx/error.hpp"
#include "recalx/explain.hpp"
#include "recalx/external_model.hpp"
#include "recalx/io.hpp"
#include "recalx/theory.hpp"

namespace fs = std::filesystem;
using namespace recalx;
using namespace recalx::cli;

namespace {

struct SynthArgs {
    std::string kind = "planted-informative";
    ProblemDims dims;
    std::vector<double> label_prior;
    std::size_t train = 1000;
    std::size_t val = 1000;
    std::size_t eval = 1000;
};

struct FitArgs {
    ModelSource model;
    std::string data;
    std::string groups;
    std::size_t bins = 10;
    std::size_t samples = 10;
    bool strict_bins = false;
};

struct ReportArgs {
    ModelSource model;
    std::string data;
    std::string profile;
    std::string groups;
    std::string problem;
    std::size_t bins = 10;
    std::size_t samples = 10;
    std::size_t clusters = 100;
};

struct ExplainArgs {
    ModelSource model;
    std::string data;
    std::string profile;
    std::string groups;
    std::string problem;
    std::string method = "shapley";
    bool exact = false;
    bool enumerate = false;
    std::size_t rows = 20;
    std::size_t budget = 2000;
    double kernel_width = 0.25;
    double ridge = 1e-6;
};

struct VerifyArgs {
    ModelSource model;
    std::string problem;
    std::string profile;
    std::string groups;
    double delta = 0.05;
    std::size_t trials = 100;
};

struct CheckArgs {
    std::string command;
    std::string reference;
    double timeout = 10.0;
    std::size_t instances = 1000;
    double tolerance = 1e-9;
};

struct Common {
    std::uint64_t seed = 0;
    std::string out_dir = ".";
    std::string config;
};

void add_common(CLI::App& cmd, Common& common) {
    cmd.add_option("--seed", common.seed, "Master seed");
    cmd.add_option("--out-dir", common.out_dir, "Directory for output files");
    cmd.add_option("--config", common.config, "JSON file whose keys mirror flag names; flags override it");
}

void finish(const CLI::App& cmd, const Common& common) {
    write_json(fs::path(common.out_dir) / "config.json", config_snapshot(cmd));
}

RecalibratedModel recalibrated(const ModelHandle& model, const PerturbationSpec& spec, const std::string& profile,
                               std::size_t neutral_bins) {
    if (profile.empty()) {
        return RecalibratedModel::neutral(model, spec, neutral_bins);
    }
    return RecalibratedModel(model, spec, TemperatureProfile::from_json(read_json_file(profile)));
}

// ---------------------------------------------------------------------------

int run_synth(const SynthArgs& a, const Common& c) {
    ProblemDims dims = a.dims;
    if (!a.label_prior.empty()) {
        dims.label_prior = a.label_prior;
    }
    const auto problem = generate_problem(parse_problem_kind(a.kind), dims, c.seed);
    const fs::path out(c.out_dir);
    write_json(out / "problem.json", problem.to_json());
    const SeedSpec seed(c.seed);
    const std::pair<const char*, std::size_t> splits[] = {{"train", a.train}, {"val", a.val}, {"eval", a.eval}};
    std::uint64_t index = 0;
    for (const auto& [name, rows] : splits) {
        Rng rng = derive_rng(seed, std::string("split-") + name, index++);
        write_dataset_csv(out / (std::string(name) + ".csv"), problem.sample_dataset(rows, rng));
    }
    std::cerr << "wrote problem.json and " << a.train << "/" << a.val << "/" << a.eval << " rows to " << c.out_dir
              << "\n";
    return kOk;
}

int run_fit(const FitArgs& a, const Common& c) {
    const auto model = load_model(a.model);
    const auto& meta = model->metadata();
    const auto data = read_dataset_csv(a.data, meta.classes);
    const auto spec = load_perturbation_spec(a.groups, meta.features);
    FitOptions opts;
    opts.bins = a.bins;
    opts.samples_per_instance = a.samples;
    opts.seed = SeedSpec(c.seed);
    opts.strict_bins = a.strict_bins;
    const auto profile = fit_recalx(*model, data, spec, opts);
    write_json(fs::path(c.out_dir) / "profile.json", profile.to_json());
    for (std::size_t b = 0; b < profile.temperatures.size(); ++b) {
        const auto& d = profile.diagnostics[b];
        std::cerr << "bin " << b + 1 << ": T=" << format_double(profile.temperatures[b])
                  << (d.feasible ? "" : " (unreachable)") << (d.at_boundary ? " (at search boundary)" : "") << "\n";
    }
    return kOk;
}

int run_calib_report(const ReportArgs& a, const Common& c) {
    const auto model = load_model(a.model);
    const auto& meta = model->metadata();
    const auto data = read_dataset_csv(a.data, meta.classes);
    const auto spec = load_perturbation_spec(a.groups, meta.features);
    const auto after = recalibrated(model, spec, a.profile, a.bins);
    const auto before = RecalibratedModel::neutral(model, spec, after.profile().bins.count());

    std::optional<SyntheticProblem> problem;
    CurveOptions opts;
    opts.samples_per_instance = a.samples;
    opts.cluster_count = a.clusters;
    opts.seed = SeedSpec(c.seed);
    if (!a.problem.empty()) {
        problem = load_problem(a.problem);
        opts.exact_oracle = exact_bin_ce_oracle(*problem);
    }
    const auto report = calibration_report(before, after, data, opts);
    const fs::path out(c.out_dir);
    write_text_file(out / "calibration_report.csv", report.to_csv());
    write_text_file(out / "calibration_report.svg", calibration_svg(report));
    double max_before = 0.0, max_after = 0.0;
    for (const auto& r : report.rows) {
        max_before = std::max(max_before, r.ce_before);
        max_after = std::max(max_after, r.ce_after);
    }
    std::cerr << "estimator " << report.estimator << ": max bin CE " << format_double(max_before) << " -> "
              << format_double(max_after) << "\n";
    return kOk;
}

struct RunMetrics {
    nlohmann::json alignment = nlohmann::json::array();
    nlohmann::json localization = nlohmann::json::array();
    double alignment_sum = 0.0;
    double localization_sum = 0.0;
    std::size_t alignment_n = 0;
    std::size_t localization_n = 0;

    void add(const Attribution& phi, const SyntheticProblem& problem) {
        std::vector<double> reference(problem.features, 0.0);
        for (std::size_t i : problem.informative) {
            reference[i] = 1.0;
        }
        try {
            const double s = spearman_alignment(phi.scores, reference);
            alignment.push_back(s);
            alignment_sum += s;
            ++alignment_n;
        } catch (const UndefinedMetric&) {
            alignment.push_back(nullptr);
        }
        try {
            const double l = localization_score(phi.scores, problem.informative_region());
            localization.push_back(l);
            localization_sum += l;
            ++localization_n;
        } catch (const UndefinedMetric&) {
            localization.push_back(nullptr);
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j = {{"alignment", alignment}, {"localization", localization}};
        j["mean_alignment"] = alignment_n ? nlohmann::json(alignment_sum / alignment_n) : nlohmann::json(nullptr);
        j["mean_localization"] =
            localization_n ? nlohmann::json(localization_sum / localization_n) : nlohmann::json(nullptr);
        j["undefined_alignment"] = alignment.size() - alignment_n;
        j["undefined_localization"] = localization.size() - localization_n;
        return j;
    }
};

Attribution explain_one(const RecalibratedModel& model, const Instance& x, const ExplainArgs& a, std::uint64_t seed) {
    const auto v = model_value_function(model, x);
    const std::size_t g = v.unit_count();
    if (a.method == "shapley") {
        if (a.exact || g <= kMaxSummaryUnits) {
            return shapley_exact(v);
        }
        return shapley_sampled(v, a.budget, seed);
    }
    LimeOptions opts;
    opts.samples = a.budget;
    opts.kernel_width = a.kernel_width;
    opts.ridge = a.ridge;
    opts.seed = seed;
    opts.enumerate_all = a.enumerate;
    return lime_explain(v, opts);
}

int run_explain(const ExplainArgs& a, const Common& c) {
    const auto model = load_model(a.model);
    const auto& meta = model->metadata();
    const auto data = read_dataset_csv(a.data, meta.classes);
    const auto spec = load_perturbation_spec(a.groups, meta.features);
    std::optional<SyntheticProblem> problem;
    if (!a.problem.empty()) {
        problem = load_problem(a.problem);
        if (problem->informative.empty()) {
            problem.reset();
        } else if (spec.unit_count() != problem->features) {
            throw InvalidInput("ground-truth metrics need one unit per feature; drop --groups or --problem");
        }
    }

    struct Run {
        std::string suffix;
        RecalibratedModel model;
        nlohmann::json attributions = nlohmann::json::array();
        std::string csv = "row,unit_index,score\n";
        RunMetrics metrics;
    };
    std::vector<Run> runs;
    runs.push_back({a.profile.empty() ? "" : "_base", RecalibratedModel::neutral(model, spec, 10), {}, {}, {}});
    if (!a.profile.empty()) {
        runs.push_back({"", recalibrated(model, spec, a.profile, 10), {}, {}, {}});
    }
    for (auto& run : runs) {
        run.csv = "row,unit_index,score\n";
    }

    const std::size_t rows = std::min(a.rows, data.size());
    const SeedSpec seed(c.seed);
    for (auto& run : runs) {
        for (std::size_t r = 0; r < rows; ++r) {
            const auto phi = explain_one(run.model, data.instances[r], a, seed.child("explain-row", r).key());
            auto j = phi.to_json();
            j["row"] = r;
            j["predicted_class"] = phi.target_class;
            run.attributions.push_back(j);
            for (std::size_t i = 0; i < phi.scores.size(); ++i) {
                run.csv += std::to_string(r) + "," + std::to_string(i) + "," + format_double(phi.scores[i]) + "\n";
            }
            if (problem) {
                run.metrics.add(phi, *problem);
            }
        }
    }

    const fs::path out(c.out_dir);
    for (const auto& run : runs) {
        write_json(out / ("attributions" + run.suffix + ".json"), run.attributions);
        write_text_file(out / ("attributions" + run.suffix + ".csv"), run.csv);
    }
    if (problem) {
        nlohmann::json metrics = {{"rows", rows}, {"reference", "informative features"}};
        if (runs.size() == 2) {
            metrics["before"] = runs[0].metrics.to_json();
            metrics["after"] = runs[1].metrics.to_json();
        } else {
            metrics["model"] = runs[0].metrics.to_json();
        }
        write_json(out / "metrics.json", metrics);
    }
    std::cerr << "explained " << rows << " rows with " << a.method << "\n";
    return kOk;
}

int run_verify(const VerifyArgs& a, const Common& c) {
    const auto problem = load_problem(a.problem);
    ModelSource source = a.model;
    if (source.model.empty()) {
        source.model = "bayes:" + a.problem;
    }
    const auto model = load_model(source);
    const auto spec = load_perturbation_spec(a.groups, problem.features);
    const auto recal = recalibrated(model, spec, a.profile, 10);
    const auto predictor = a.profile.empty() ? SubsetPredictor::from_model(*model)
                                             : SubsetPredictor::from_recalibrated(recal);

    const auto rows = verify_decomposition(problem, predictor, spec);
    LocalBoundOptions bound_opts;
    bound_opts.delta = a.delta;
    bound_opts.trials = a.trials;
    bound_opts.seed = c.seed;
    const auto bound = verify_local_bound(problem, predictor, spec, bound_opts);

    double max_residual = 0.0;
    for (const auto& r : rows) {
        max_residual = std::max(max_residual, std::abs(r.residual));
    }
    const fs::path out(c.out_dir);
    write_text_file(out / "decomposition.csv", decomposition_to_csv(rows));
    auto bound_json = bound.to_json();
    bound_json["max_residual"] = max_residual;
    write_json(out / "local_bound.json", bound_json);
    std::cerr << "max |residual| " << format_double(max_residual) << "; bound satisfied in " << bound.satisfied << "/"
              << bound.trials.size() << " trials (worst ratio " << format_double(bound.worst_ratio) << ")\n";
    return max_residual <= 1e-9 ? kOk : kVerificationFailed;
}

int run_model_check(const CheckArgs& a, const Common& c) {
    ConformanceOptions opts;
    opts.timeout_seconds = a.timeout;
    opts.agreement_instances = a.instances;
    opts.agreement_tolerance = a.tolerance;
    opts.seed = c.seed;
    if (!a.reference.empty()) {
        opts.reference = load_linear_model(a.reference);
    }
    const auto report = run_model_check(a.command, opts);
    nlohmann::json checks = nlohmann::json::array();
    for (const auto& check : report.checks) {
        std::cout << (check.passed ? "PASS " : "FAIL ") << check.name;
        if (!check.detail.empty()) {
            std::cout << ": " << check.detail;
        }
        std::cout << "\n";
        checks.push_back({{"name", check.name}, {"passed", check.passed}, {"detail", check.detail}});
    }
    write_json(fs::path(c.out_dir) / "model_check.json",
               {{"command", report.command}, {"passed", report.passed()}, {"checks", checks}});
    return report.passed() ? kOk : kVerificationFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Recalibrate classifiers for perturbation-based explanations and check the exact theory on "
                 "finite problems"};
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    Common common;
    SynthArgs synth;
    FitArgs fit;
    ReportArgs report;
    ExplainArgs explain;
    VerifyArgs verify;
    CheckArgs check;

    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic problem and sample train/val/eval splits");
    add_common(*synth_cmd, common);
    synth_cmd->add_option("--kind", synth.kind, "random-table | noisy-parity | planted-informative");
    synth_cmd->add_option("--features", synth.dims.features, "d");
    synth_cmd->add_option("--cardinality", synth.dims.cardinality, "V");
    synth_cmd->add_option("--classes", synth.dims.classes, "K");
    synth_cmd->add_option("--informative", synth.dims.informative, "Size of the informative feature set");
    synth_cmd->add_option("--concentration", synth.dims.concentration, "Dirichlet concentration");
    synth_cmd->add_option("--noise", synth.dims.noise, "Label noise for noisy-parity");
    synth_cmd->add_option("--label-prior", synth.label_prior, "P(Y) for planted-informative");
    synth_cmd->add_option("--train", synth.train, "Training rows");
    synth_cmd->add_option("--val", synth.val, "Validation rows");
    synth_cmd->add_option("--eval", synth.eval, "Evaluation rows");

    auto* fit_cmd = app.add_subcommand("fit", "Fit per-bin temperatures on perturbed validation data");
    add_common(*fit_cmd, common);
    add_model_options(*fit_cmd, fit.model);
    fit_cmd->add_option("--data", fit.data, "Validation CSV")->required();
    fit_cmd->add_option("--groups", fit.groups, "Feature groups JSON");
    fit_cmd->add_option("--bins", fit.bins, "Number of perturbation-level bins")->check(CLI::PositiveNumber);
    fit_cmd->add_option("--samples", fit.samples, "Masks per validation point and bin")->check(CLI::PositiveNumber);
    fit_cmd->add_flag("--strict-bins", fit.strict_bins, "Fail on bins no subset size can reach");

    auto* report_cmd = app.add_subcommand("calib-report", "Per-bin calibration error before and after recalibration");
    add_common(*report_cmd, common);
    add_model_options(*report_cmd, report.model);
    report_cmd->add_option("--data", report.data, "Evaluation CSV")->required();
    report_cmd->add_option("--profile", report.profile, "Temperature profile JSON");
    report_cmd->add_option("--groups", report.groups, "Feature groups JSON");
    report_cmd->add_option("--problem", report.problem, "Problem JSON; enables exact calibration error");
    report_cmd->add_option("--bins", report.bins, "Bins when no profile is given")->check(CLI::PositiveNumber);
    report_cmd->add_option("--samples", report.samples, "Masks per evaluation point and bin")
        ->check(CLI::PositiveNumber);
    report_cmd->add_option("--clusters", report.clusters, "Clusters for the plug-in estimator")
        ->check(CLI::PositiveNumber);

    auto* explain_cmd = app.add_subcommand("explain", "Attribute predictions to features");
    add_common(*explain_cmd, common);
    add_model_options(*explain_cmd, explain.model);
    explain_cmd->add_option("--data", explain.data, "CSV of rows to explain")->required();
    explain_cmd->add_option("--profile", explain.profile, "Temperature profile JSON; also runs the base model");
    explain_cmd->add_option("--groups", explain.groups, "Feature groups JSON");
    explain_cmd->add_option("--problem", explain.problem, "Problem JSON with informative features");
    explain_cmd->add_option("--method", explain.method, "shapley | lime")
        ->check(CLI::IsMember({"shapley", "lime"}));
    explain_cmd->add_flag("--exact", explain.exact, "Exact Shapley values regardless of unit count");
    explain_cmd->add_flag("--enumerate", explain.enumerate, "LIME on all 2^g masks");
    explain_cmd->add_option("--rows", explain.rows, "Explain the first N rows");
    explain_cmd->add_option("--budget", explain.budget, "Permutations (sampled Shapley) or samples (LIME)")
        ->check(CLI::PositiveNumber);
    explain_cmd->add_option("--kernel-width", explain.kernel_width, "LIME kernel width")->check(CLI::PositiveNumber);
    explain_cmd->add_option("--ridge", explain.ridge, "LIME ridge penalty")->check(CLI::NonNegativeNumber);

    auto* verify_cmd = app.add_subcommand("verify", "Check the loss decomposition and the local explanation bound");
    add_common(*verify_cmd, common);
    add_model_options(*verify_cmd, verify.model, false);
    verify_cmd->add_option("--problem", verify.problem, "Problem JSON")->required();
    verify_cmd->add_option("--profile", verify.profile, "Temperature profile JSON");
    verify_cmd->add_option("--groups", verify.groups, "Feature groups JSON");
    verify_cmd->add_option("--delta", verify.delta, "Failure probability of the bound");
    verify_cmd->add_option("--trials", verify.trials, "Instances drawn from P_X");

    auto* check_cmd = app.add_subcommand("model-check", "Run protocol conformance checks against an adapter");
    add_common(*check_cmd, common);
    check_cmd->add_option("--command", check.command, "Shell command that starts the adapter")->required();
    check_cmd->add_option("--reference", check.reference, "Linear model JSON the adapter hosts");
    check_cmd->add_option("--timeout", check.timeout, "Per-request timeout in seconds")->check(CLI::PositiveNumber);
    check_cmd->add_option("--instances", check.instances, "Instances for the agreement check");
    check_cmd->add_option("--tolerance", check.tolerance, "Agreement tolerance");

    try {
        auto args = expand_config_args(argc, argv);
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }

    try {
        int code = kOk;
        CLI::App* cmd = app.get_subcommands().front();
        if (cmd == synth_cmd) {
            code = run_synth(synth, common);
        } else if (cmd == fit_cmd) {
            code = run_fit(fit, common);
        } else if (cmd == report_cmd) {
            code = run_calib_report(report, common);
        } else if (cmd == explain_cmd) {
            code = run_explain(explain, common);
        } else if (cmd == verify_cmd) {
            code = run_verify(verify, common);
        } else {
            code = run_model_check(check, common);
        }
        finish(*cmd, common);
        return code;
    } catch (const TransportError& e) {
        std::cerr << "model transport error: " << e.what() << "\n";
        return kTransport;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }
}
