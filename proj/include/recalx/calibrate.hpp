#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "recalx/core.hpp"
#include "recalx/models.hpp"
#include "recalx/perturb.hpp"
#include "recalx/random.hpp"

namespace recalx {

/// softmax(z / T). T = 1 reproduces softmax(z) bit for bit.
ProbVector softmax_with_temperature(std::span<const double> logits, double temperature);

/// -log softmax(z / T)_label, computed as logsumexp(z/T) - z_label/T.
double cross_entropy_with_temperature(std::span<const double> logits, int label, double temperature);

/// Mean of cross_entropy_with_temperature over a fixed batch.
double mean_cross_entropy(std::span<const LogitVector> logits, std::span<const int> labels, double temperature);

struct TemperatureSearchOptions {
    double min_temperature = 0.01;
    double max_temperature = 100.0;
    /// Width of the final bracket in log T.
    double log_tolerance = 1e-4;
};

struct TemperatureSearch {
    double temperature = 1.0;
    double loss = 0.0;
    bool at_boundary = false;
    std::size_t evaluations = 0;
};

/// Golden-section search over log T within the bounds. The result is never worse
/// than T = 1 on the supplied loss.
TemperatureSearch minimize_temperature(const std::function<double(double)>& loss,
                                       const TemperatureSearchOptions& options = {});

struct BinFitDiagnostics {
    std::size_t samples = 0;
    bool feasible = true;
    bool fitted = false;
    bool at_boundary = false;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

/// Per-bin temperatures fitted by ReCalX.
struct TemperatureProfile {
    PerturbationLevelBins bins{10};
    std::vector<double> temperatures;
    std::vector<BinFitDiagnostics> diagnostics;
    std::size_t samples_per_instance = 0;
    std::uint64_t seed = 0;

    /// All temperatures 1.
    static TemperatureProfile neutral(std::size_t bin_count);

    double temperature_for_level(double level) const;
    void validate() const;

    nlohmann::json to_json() const;
    static TemperatureProfile from_json(const nlohmann::json& j);
};

struct FitOptions {
    std::size_t bins = 10;
    std::size_t samples_per_instance = 10;
    SeedSpec seed;
    /// Throw InfeasibleBin instead of leaving an unreachable bin at T = 1.
    bool strict_bins = false;
    /// Instances per model call.
    std::size_t eval_batch = 4096;
    TemperatureSearchOptions search;
};

/// Bin-wise temperature scaling on perturbed validation samples. For every bin,
/// each validation point gets `samples_per_instance` masks drawn inside the bin;
/// perturbed logits are evaluated once and the mean cross-entropy is minimized
/// over T_b. Bins whose batch is empty or holds a single label keep T_b = 1.
TemperatureProfile fit_recalx(const Model& model, const Dataset& validation, const PerturbationSpec& spec,
                              const FitOptions& options);

/// A base model that answers (x, S) queries with the temperature of λ(S)'s bin.
class RecalibratedModel {
public:
    RecalibratedModel(ModelHandle base, PerturbationSpec spec, TemperatureProfile profile);

    /// Neutral profile: behaves exactly like the base model under π.
    static RecalibratedModel neutral(ModelHandle base, PerturbationSpec spec, std::size_t bin_count = 10);

    const Model& base() const noexcept { return *base_; }
    const ModelHandle& base_handle() const noexcept { return base_; }
    const PerturbationSpec& spec() const noexcept { return spec_; }
    const TemperatureProfile& profile() const noexcept { return profile_; }

    ProbVector predict(const Instance& x, const SubsetMask& observed) const;
    std::vector<ProbVector> predict(std::span<const Instance> xs, std::span<const SubsetMask> masks) const;
    /// Inputs already perturbed with subset S; `level` is λ(S).
    std::vector<ProbVector> predict_perturbed(std::span<const Instance> perturbed, double level) const;

private:
    ModelHandle base_;
    PerturbationSpec spec_;
    TemperatureProfile profile_;
};

ProbVector recal_predict(const RecalibratedModel& model, const Instance& x, const SubsetMask& observed);

/// Plug-in estimate of E[D_KL(P_{Y|f(X)} ‖ f(X))]. Predictions are grouped
/// exactly (1e-9 resolution) when there are at most `cluster_count` distinct
/// vectors, otherwise by 50 Lloyd iterations of k-means seeded with `seed`.
double ce_kl_plugin(std::span<const ProbVector> predictions, std::span<const int> labels,
                    std::size_t cluster_count, std::uint64_t seed = 0);

/// Exact per-bin calibration error for a recalibrated model, when available.
using BinCeOracle = std::function<double(std::size_t bin, const RecalibratedModel&)>;

struct CurveOptions {
    std::size_t samples_per_instance = 10;
    std::size_t cluster_count = 100;
    SeedSpec seed;
    BinCeOracle exact_oracle;
};

struct BinCalibration {
    std::size_t bin = 0;
    double lower = 0.0;
    double upper = 0.0;
    double ce = 0.0;
    std::size_t samples = 0;
    bool feasible = true;
};

/// Calibration error per bin of the model's profile. Masks come from the seed
/// alone, so two models evaluated with equal options see identical masks.
std::vector<BinCalibration> calibration_curve(const RecalibratedModel& model, const Dataset& evaluation,
                                              const CurveOptions& options);

struct CalibrationRow {
    double bin_lo = 0.0;
    double bin_hi = 0.0;
    double ce_before = 0.0;
    double ce_after = 0.0;
    std::size_t n = 0;
};

struct CalibrationReport {
    std::vector<CalibrationRow> rows;
    std::string estimator;
    std::uint64_t seed = 0;

    /// Header `bin_lo,bin_hi,ce_before,ce_after,n`.
    std::string to_csv() const;
};

CalibrationReport calibration_report(const RecalibratedModel& before, const RecalibratedModel& after,
                                     const Dataset& evaluation, const CurveOptions& options);

}  // namespace recalx
