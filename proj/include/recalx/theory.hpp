#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "recalx/calibrate.hpp"
#include "recalx/core.hpp"
#include "recalx/models.hpp"
#include "recalx/perturb.hpp"
#include "recalx/random.hpp"

namespace recalx {

inline constexpr std::size_t kMaxProblemFeatures = 8;
inline constexpr std::size_t kMaxProblemCardinality = 4;
inline constexpr std::size_t kMaxProblemClasses = 4;

/// Finite joint distribution P(X, Y). Features take values 1..V; 0 is the
/// perturbation sentinel and never a data value.
///
/// `joint[code * K + y]` where `code` reads x as base-V digits (x_i - 1),
/// feature 0 most significant.
struct SyntheticProblem {
    std::size_t cardinality = 2;
    std::size_t features = 1;
    std::size_t classes = 2;
    std::vector<double> joint;
    /// Ground-truth informative features; empty when unknown.
    std::vector<std::size_t> informative;

    /// V^d.
    std::size_t support_size() const noexcept;
    Instance point(std::size_t code) const;
    std::size_t code_of(const Instance& x) const;
    double probability(std::size_t code, int label) const { return joint.at(code * classes + static_cast<std::size_t>(label)); }
    std::vector<double> feature_marginal() const;
    std::vector<double> label_marginal() const;

    /// Throws InvalidInput on dimension limits, negative entries or a total off 1 by more than 1e-9.
    void validate() const;

    /// Zero baseline over the d features.
    PerturbationSpec perturbation_spec() const { return PerturbationSpec::zeros(features); }
    /// Informative features as an observed-unit mask over the d features.
    SubsetMask informative_region() const;

    Dataset sample_dataset(std::size_t rows, Rng& rng) const;

    /// {"cardinality","features","classes","joint","informative"}
    nlohmann::json to_json() const;
    static SyntheticProblem from_json(const nlohmann::json& j);
};

SyntheticProblem load_problem(const std::filesystem::path& path);

enum class ProblemKind { random_table, noisy_parity, planted_informative };

ProblemKind parse_problem_kind(const std::string& name);
std::string to_string(ProblemKind kind);

struct ProblemDims {
    std::size_t features = 6;
    std::size_t cardinality = 3;
    std::size_t classes = 3;
    /// Size of the informative set (noisy-parity, planted-informative).
    std::size_t informative = 2;
    /// Dirichlet concentration for random tables and class-conditional feature laws.
    double concentration = 1.0;
    /// P(Y) for planted-informative; drawn from Dirichlet(1) when absent.
    std::optional<std::vector<double>> label_prior;
    /// Label flip probability for noisy-parity.
    double noise = 0.1;
};

/// Every joint entry is strictly positive.
///
/// - random-table: Dirichlet(concentration) over all V^d·K cells.
/// - noisy-parity: uniform X; Y = Σ_{i∈I}(x_i - 1) mod K, replaced by a uniformly
///   chosen other class with probability `noise`.
/// - planted-informative: P(y)·Π_{i∈I} P(x_i | y)·Π_{j∉I} P(x_j), so Y is
///   independent of the features outside I.
SyntheticProblem generate_problem(ProblemKind kind, const ProblemDims& dims, std::uint64_t seed);

/// Logits log P(Y | X_S = x_S), where S is the set of nonzero coordinates of the
/// input. Tabulated over all (V+1)^d inputs at construction.
class BayesSubsetModel final : public Model {
public:
    explicit BayesSubsetModel(const SyntheticProblem& problem, std::string name = "bayes");

    const ModelMetadata& metadata() const override { return meta_; }

protected:
    std::vector<LogitVector> evaluate(std::span<const Instance> batch) const override;

private:
    ModelMetadata meta_;
    std::size_t cardinality_;
    std::vector<double> logits_;
};

/// TableModel over all (V+1)^d inputs with logits drawn uniformly from [-3, 3].
std::shared_ptr<TableModel> random_table_model(const SyntheticProblem& problem, std::uint64_t seed);

/// f_S^π evaluated on inputs that are already perturbed with S.
struct SubsetPredictor {
    std::size_t classes = 0;
    std::function<std::vector<ProbVector>(std::span<const Instance>, const SubsetMask&)> predict;

    /// softmax of the model's logits. Keeps a reference to `model`.
    static SubsetPredictor from_model(const Model& model);
    /// Temperature of λ(S)'s bin. Keeps a reference to `model`.
    static SubsetPredictor from_recalibrated(const RecalibratedModel& model);
};

/// Loss expectations use probabilities clamped below at kProbabilityFloor.
double exact_predictive_power(const SyntheticProblem& problem, const SubsetPredictor& model,
                              const PerturbationSpec& spec, const SubsetMask& subset);
double exact_mutual_information(const SyntheticProblem& problem, const SubsetPredictor& model,
                                const PerturbationSpec& spec, const SubsetMask& subset);
double exact_ce_kl(const SyntheticProblem& problem, const SubsetPredictor& model, const PerturbationSpec& spec,
                   const SubsetMask& subset);
/// E_x[D_KL(P_Y ‖ f_∅^π(x))].
double baseline_bias(const SyntheticProblem& problem, const SubsetPredictor& model, const PerturbationSpec& spec);

struct DecompositionResult {
    SubsetMask mask;
    double v = 0.0;
    double bias = 0.0;
    double mi = 0.0;
    double ce = 0.0;
    /// v - (bias + mi - ce)
    double residual = 0.0;
};

/// All four terms for every subset, in binary-counter order.
std::vector<DecompositionResult> verify_decomposition(const SyntheticProblem& problem, const SubsetPredictor& model,
                                                      const PerturbationSpec& spec);
/// Header `mask,v,bias,mi,ce,residual`; masks print unit 0 first.
std::string decomposition_to_csv(std::span<const DecompositionResult> rows);

/// Maps every input π(x, S) on the support to log P(Y | f_S^π(X) = f_S^π(x)).
/// Inputs outside the perturbed support get uniform logits.
std::shared_ptr<TableModel> calibrated_counterpart(const SyntheticProblem& problem, const SubsetPredictor& model,
                                                   const PerturbationSpec& spec, const SubsetMask& subset);

struct LocalBoundOptions {
    double delta = 0.05;
    std::size_t trials = 100;
    std::uint64_t seed = 0;
};

struct LocalBoundTrial {
    std::size_t code = 0;
    int target_class = 0;
    double lhs = 0.0;
};

/// Instances x are drawn from P_X; φ and φ* are exact Shapley values of the
/// target-class probability under the model and under the per-subset calibrated
/// counterparts. The bound reads (1/g)‖φ - φ*‖² ≤ 2·CE_max + √(8 log(1/δ)).
struct LocalBoundReport {
    double delta = 0.05;
    std::uint64_t seed = 0;
    double ce_max = 0.0;
    double rhs = 0.0;
    std::size_t satisfied = 0;
    std::vector<LocalBoundTrial> trials;
    double worst_lhs = 0.0;
    double worst_ratio = 0.0;

    double fraction_satisfied() const;
    nlohmann::json to_json() const;
};

LocalBoundReport verify_local_bound(const SyntheticProblem& problem, const SubsetPredictor& model,
                                    const PerturbationSpec& spec, const LocalBoundOptions& options);

/// Exact calibration error of the recalibrated model over (X, S) with S drawn the
/// way bin sampling draws it: a uniform feasible perturbed count, then a uniform
/// subset of that count. Predictions are pooled across subsets. Returns 0 for an
/// infeasible bin.
double exact_bin_ce(const SyntheticProblem& problem, const RecalibratedModel& model, std::size_t bin);

/// Binds exact_bin_ce to a problem for calibration_curve. The problem must outlive the oracle.
BinCeOracle exact_bin_ce_oracle(const SyntheticProblem& problem);

}  // namespace recalx
