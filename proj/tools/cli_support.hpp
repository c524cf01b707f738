#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "recalx/calibrate.hpp"
#include "recalx/models.hpp"
#include "recalx/perturb.hpp"

namespace recalx::cli {

enum ExitCode : int { kOk = 0, kVerificationFailed = 1, kUsage = 2, kTransport = 3 };

/// Arguments after the program name, with `--config <file>` entries spliced in
/// right after the subcommand. Flags given on the command line win.
std::vector<std::string> expand_config_args(int argc, char** argv);

/// Resolved options of a parsed subcommand, keyed by long flag name.
/// `--config`, `--out-dir` and `--help` are left out.
nlohmann::json config_snapshot(const CLI::App& command);

struct ModelSource {
    std::string model;
    double miscalibrate = 1.0;
    std::size_t workers = 1;
    double timeout = 30.0;
};

void add_model_options(CLI::App& command, ModelSource& source, bool required = true);
/// linear:<file> | table:<file> | bayes:<problem> | exec:<command>, optionally
/// wrapped with logits scaled by `miscalibrate`.
ModelHandle load_model(const ModelSource& source);

/// Zero baseline, or the file given to --groups: either an array of index
/// arrays or {"groups": [...], "baseline": [...]}.
PerturbationSpec load_perturbation_spec(const std::string& groups_path, std::size_t features);

/// Two series (before/after) against bin midpoints in an 800×500 viewBox.
std::string calibration_svg(const CalibrationReport& report);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace recalx::cli
