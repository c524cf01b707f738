#include "recalx/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json_util.hpp"
#include "recalx/error.hpp"
#include "recalx/explain.hpp"
#include "recalx/io.hpp"

namespace recalx {
namespace {

constexpr double kGroupResolution = 1e-12;

std::size_t int_pow(std::size_t base, std::size_t exp) {
    std::size_t out = 1;
    for (std::size_t i = 0; i < exp; ++i) {
        out *= base;
    }
    return out;
}

std::size_t checked_problem_size(std::size_t features, std::size_t cardinality, std::size_t classes) {
    if (features < 1 || features > kMaxProblemFeatures) {
        throw LimitExceeded("synthetic problems need 1 <= d <= " + std::to_string(kMaxProblemFeatures) + ", got " +
                            std::to_string(features));
    }
    if (cardinality < 1 || cardinality > kMaxProblemCardinality) {
        throw LimitExceeded("synthetic problems need 1 <= V <= " + std::to_string(kMaxProblemCardinality) +
                            ", got " + std::to_string(cardinality));
    }
    if (classes < 2 || classes > kMaxProblemClasses) {
        throw LimitExceeded("synthetic problems need 2 <= K <= " + std::to_string(kMaxProblemClasses) + ", got " +
                            std::to_string(classes));
    }
    return int_pow(cardinality, features) * classes;
}

void normalize(std::vector<double>& p) {
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& v : p) {
        v /= total;
    }
}

// Dirichlet draw floored at `floor` and renormalized, so every entry is positive.
std::vector<double> positive_dirichlet(Rng& rng, std::size_t dim, double alpha, double floor) {
    auto p = dirichlet(rng, dim, alpha);
    for (double& v : p) {
        v = std::max(v, floor);
    }
    normalize(p);
    return p;
}

std::vector<std::size_t> random_informative_set(Rng& rng, std::size_t features, std::size_t count) {
    if (count < 1 || count > features) {
        throw InvalidInput("informative set size must be in 1..d, got " + std::to_string(count));
    }
    std::vector<std::size_t> idx(features);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<bool> observed_features(const PerturbationSpec& spec, const SubsetMask& subset) {
    if (subset.size() != spec.unit_count()) {
        throw InvalidInput("mask has " + std::to_string(subset.size()) + " units, expected " +
                           std::to_string(spec.unit_count()));
    }
    std::vector<bool> out(spec.feature_count(), false);
    for (std::size_t u = 0; u < subset.size(); ++u) {
        if (!subset.observed(u)) {
            continue;
        }
        if (spec.groups) {
            for (std::size_t j : spec.groups->group(u)) {
                out[j] = true;
            }
        } else {
            out[u] = true;
        }
    }
    return out;
}

// The distinct inputs π(x, S) over the support, with P(π(X,S) = input, Y = y).
// Cell ids are the observed digits read as a base-V number.
struct SubsetCells {
    std::vector<Instance> inputs;
    std::vector<double> joint;
    std::vector<std::size_t> observed;
    std::size_t cardinality = 0;
    std::size_t features = 0;

    std::size_t cell_of(std::size_t code) const {
        std::size_t cell = 0;
        for (std::size_t j : observed) {
            const std::size_t digit = (code / int_pow(cardinality, features - 1 - j)) % cardinality;
            cell = cell * cardinality + digit;
        }
        return cell;
    }
};

SubsetCells subset_cells(const SyntheticProblem& problem, const PerturbationSpec& spec, const SubsetMask& subset) {
    if (spec.feature_count() != problem.features) {
        throw InvalidInput("perturbation spec has " + std::to_string(spec.feature_count()) +
                           " features, problem has " + std::to_string(problem.features));
    }
    const auto obs = observed_features(spec, subset);
    SubsetCells cells;
    cells.cardinality = problem.cardinality;
    cells.features = problem.features;
    for (std::size_t j = 0; j < problem.features; ++j) {
        if (obs[j]) {
            cells.observed.push_back(j);
        }
    }
    const std::size_t count = int_pow(problem.cardinality, cells.observed.size());
    const std::size_t k = problem.classes;
    cells.inputs.resize(count);
    cells.joint.assign(count * k, 0.0);
    std::vector<bool> filled(count, false);
    for (std::size_t code = 0; code < problem.support_size(); ++code) {
        const std::size_t c = cells.cell_of(code);
        if (!filled[c]) {
            cells.inputs[c] = apply_perturbation(problem.point(code), subset, spec);
            filled[c] = true;
        }
        for (std::size_t y = 0; y < k; ++y) {
            cells.joint[c * k + y] += problem.joint[code * k + y];
        }
    }
    return cells;
}

std::vector<ProbVector> predict_cells(const SubsetPredictor& model, const SubsetCells& cells,
                                      const SubsetMask& subset, std::size_t classes) {
    if (model.classes != classes) {
        throw InvalidInput("model predicts " + std::to_string(model.classes) + " classes, problem has " +
                           std::to_string(classes));
    }
    auto preds = model.predict(cells.inputs, subset);
    if (preds.size() != cells.inputs.size()) {
        throw InvalidInput("subset predictor returned the wrong number of predictions");
    }
    return preds;
}

double clamped_log(double q) { return std::log(std::max(q, kProbabilityFloor)); }

struct SubsetTerms {
    double loss = 0.0;
    double mi = 0.0;
    double ce = 0.0;
};

// Groups predictions, then accumulates expected loss, I(f_S; Y) and CE_KL from
// cell masses.
SubsetTerms subset_terms(std::span<const ProbVector> preds, std::span<const double> joint, std::size_t k,
                         std::span<const double> label_marginal) {
    const auto grouping = group_vectors(preds, kGroupResolution);
    const std::size_t groups = grouping.group_count();
    std::vector<double> gy(groups * k, 0.0);
    std::vector<double> gmass(groups, 0.0);
    for (std::size_t c = 0; c < preds.size(); ++c) {
        const std::size_t g = grouping.group_of[c];
        for (std::size_t y = 0; y < k; ++y) {
            gy[g * k + y] += joint[c * k + y];
            gmass[g] += joint[c * k + y];
        }
    }

    SubsetTerms t;
    for (std::size_t g = 0; g < groups; ++g) {
        for (std::size_t y = 0; y < k; ++y) {
            const double p = gy[g * k + y];
            if (p > 0.0) {
                t.mi += p * std::log(p / (gmass[g] * label_marginal[y]));
            }
        }
    }
    for (std::size_t c = 0; c < preds.size(); ++c) {
        const std::size_t g = grouping.group_of[c];
        for (std::size_t y = 0; y < k; ++y) {
            const double p = joint[c * k + y];
            if (p > 0.0) {
                const double log_q = clamped_log(preds[c][y]);
                t.loss -= p * log_q;
                t.ce += p * (std::log(gy[g * k + y] / gmass[g]) - log_q);
            }
        }
    }
    t.mi = std::max(t.mi, 0.0);
    return t;
}

SubsetTerms terms_for_subset(const SyntheticProblem& problem, const SubsetPredictor& model,
                             const PerturbationSpec& spec, const SubsetMask& subset) {
    const auto cells = subset_cells(problem, spec, subset);
    const auto preds = predict_cells(model, cells, subset, problem.classes);
    return subset_terms(preds, cells.joint, problem.classes, problem.label_marginal());
}

double binomial(std::size_t n, std::size_t k) {
    double out = 1.0;
    for (std::size_t j = 1; j <= k; ++j) {
        out = out * static_cast<double>(n - k + j) / static_cast<double>(j);
    }
    return std::round(out);
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t SyntheticProblem::support_size() const noexcept { return int_pow(cardinality, features); }

Instance SyntheticProblem::point(std::size_t code) const {
    if (code >= support_size()) {
        throw InvalidInput("support code " + std::to_string(code) + " out of range");
    }
    Instance x(features);
    for (std::size_t j = features; j-- > 0;) {
        x[j] = static_cast<double>(code % cardinality + 1);
        code /= cardinality;
    }
    return x;
}

std::size_t SyntheticProblem::code_of(const Instance& x) const {
    if (x.size() != features) {
        throw InvalidInput("instance has " + std::to_string(x.size()) + " features, problem has " +
                           std::to_string(features));
    }
    std::size_t code = 0;
    for (double v : x) {
        if (!(v >= 1.0 && v <= static_cast<double>(cardinality)) || v != std::floor(v)) {
            throw InvalidInput("feature value " + format_double(v) + " is not in 1.." + std::to_string(cardinality));
        }
        code = code * cardinality + static_cast<std::size_t>(v) - 1;
    }
    return code;
}

std::vector<double> SyntheticProblem::feature_marginal() const {
    std::vector<double> out(support_size(), 0.0);
    for (std::size_t code = 0; code < out.size(); ++code) {
        for (std::size_t y = 0; y < classes; ++y) {
            out[code] += joint[code * classes + y];
        }
    }
    return out;
}

std::vector<double> SyntheticProblem::label_marginal() const {
    std::vector<double> out(classes, 0.0);
    for (std::size_t i = 0; i < joint.size(); ++i) {
        out[i % classes] += joint[i];
    }
    return out;
}

void SyntheticProblem::validate() const {
    const std::size_t expected = checked_problem_size(features, cardinality, classes);
    if (joint.size() != expected) {
        throw InvalidInput("joint table has " + std::to_string(joint.size()) + " entries, expected V^d*K = " +
                           std::to_string(expected));
    }
    double total = 0.0;
    for (double p : joint) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw InvalidInput("joint table entries must be finite and nonnegative");
        }
        total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw InvalidInput("joint table sums to " + format_double(total) + ", expected 1");
    }
    std::vector<bool> seen(features, false);
    for (std::size_t i : informative) {
        if (i >= features || seen[i]) {
            throw InvalidInput("informative indices must be distinct and below d");
        }
        seen[i] = true;
    }
}

SubsetMask SyntheticProblem::informative_region() const {
    return SubsetMask::from_indices(features, informative);
}

Dataset SyntheticProblem::sample_dataset(std::size_t rows, Rng& rng) const {
    std::vector<double> cumulative(joint.size());
    std::partial_sum(joint.begin(), joint.end(), cumulative.begin());
    const double total = cumulative.back();
    Dataset data;
    data.feature_count = features;
    data.class_count = classes;
    data.instances.reserve(rows);
    data.labels.reserve(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double u = rng.uniform() * total;
        auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
        auto cell = static_cast<std::size_t>(std::distance(cumulative.begin(), it));
        cell = std::min(cell, joint.size() - 1);
        while (joint[cell] == 0.0 && cell > 0) {
            --cell;
        }
        data.instances.push_back(point(cell / classes));
        data.labels.push_back(static_cast<int>(cell % classes));
    }
    return data;
}

nlohmann::json SyntheticProblem::to_json() const {
    nlohmann::json j = {
        {"cardinality", cardinality}, {"features", features}, {"classes", classes}, {"joint", joint}};
    if (!informative.empty()) {
        j["informative"] = informative;
    }
    return j;
}

SyntheticProblem SyntheticProblem::from_json(const nlohmann::json& j) {
    SyntheticProblem p;
    p.cardinality = detail::json_to_count(detail::require_field(j, "cardinality", "problem"), "cardinality");
    p.features = detail::json_to_count(detail::require_field(j, "features", "problem"), "features");
    p.classes = detail::json_to_count(detail::require_field(j, "classes", "problem"), "classes");
    p.joint = detail::json_to_doubles(detail::require_field(j, "joint", "problem"), "joint");
    if (j.contains("informative") && !j.at("informative").is_null()) {
        for (const auto& idx : j.at("informative")) {
            p.informative.push_back(detail::json_to_count(idx, "informative"));
        }
    }
    p.validate();
    return p;
}

SyntheticProblem load_problem(const std::filesystem::path& path) {
    return SyntheticProblem::from_json(read_json_file(path));
}

ProblemKind parse_problem_kind(const std::string& name) {
    if (name == "random-table") {
        return ProblemKind::random_table;
    }
    if (name == "noisy-parity") {
        return ProblemKind::noisy_parity;
    }
    if (name == "planted-informative") {
        return ProblemKind::planted_informative;
    }
    throw InvalidInput("unknown problem kind \"" + name +
                       "\" (expected random-table, noisy-parity or planted-informative)");
}

std::string to_string(ProblemKind kind) {
    switch (kind) {
        case ProblemKind::random_table:
            return "random-table";
        case ProblemKind::noisy_parity:
            return "noisy-parity";
        case ProblemKind::planted_informative:
            return "planted-informative";
    }
    return "unknown";
}

SyntheticProblem generate_problem(ProblemKind kind, const ProblemDims& dims, std::uint64_t seed) {
    SyntheticProblem p;
    p.features = dims.features;
    p.cardinality = dims.cardinality;
    p.classes = dims.classes;
    const std::size_t total = checked_problem_size(p.features, p.cardinality, p.classes);
    if (!(dims.concentration > 0.0) || !std::isfinite(dims.concentration)) {
        throw InvalidInput("concentration must be positive");
    }
    Rng rng = derive_rng(SeedSpec(seed), "problem-" + to_string(kind), 0);
    const std::size_t k = p.classes;
    const std::size_t n = p.support_size();

    switch (kind) {
        case ProblemKind::random_table:
            p.joint = positive_dirichlet(rng, total, dims.concentration, 1e-12);
            break;

        case ProblemKind::noisy_parity: {
            if (!(dims.noise > 0.0 && dims.noise < 1.0)) {
                throw InvalidInput("noisy-parity needs noise in (0, 1)");
            }
            p.informative = random_informative_set(rng, p.features, dims.informative);
            p.joint.assign(total, 0.0);
            for (std::size_t code = 0; code < n; ++code) {
                const Instance x = p.point(code);
                std::size_t parity = 0;
                for (std::size_t i : p.informative) {
                    parity += static_cast<std::size_t>(x[i]) - 1;
                }
                parity %= k;
                for (std::size_t y = 0; y < k; ++y) {
                    const double py = y == parity ? 1.0 - dims.noise : dims.noise / static_cast<double>(k - 1);
                    p.joint[code * k + y] = py / static_cast<double>(n);
                }
            }
            break;
        }

        case ProblemKind::planted_informative: {
            p.informative = random_informative_set(rng, p.features, dims.informative);
            std::vector<double> prior;
            if (dims.label_prior) {
                prior = *dims.label_prior;
                if (prior.size() != k || std::any_of(prior.begin(), prior.end(), [](double v) { return !(v > 0.0); })) {
                    throw InvalidInput("label prior must have K strictly positive entries");
                }
                normalize(prior);
            } else {
                prior = positive_dirichlet(rng, k, 1.0, 1e-6);
            }
            std::vector<bool> is_informative(p.features, false);
            for (std::size_t i : p.informative) {
                is_informative[i] = true;
            }
            // conditional[j][y][v] for informative j, marginal[j][v] otherwise.
            std::vector<std::vector<std::vector<double>>> conditional(p.features);
            std::vector<std::vector<double>> marginal(p.features);
            for (std::size_t j = 0; j < p.features; ++j) {
                if (is_informative[j]) {
                    for (std::size_t y = 0; y < k; ++y) {
                        conditional[j].push_back(positive_dirichlet(rng, p.cardinality, dims.concentration, 1e-6));
                    }
                } else {
                    marginal[j] = positive_dirichlet(rng, p.cardinality, 1.0, 1e-6);
                }
            }
            p.joint.assign(total, 0.0);
            for (std::size_t code = 0; code < n; ++code) {
                const Instance x = p.point(code);
                for (std::size_t y = 0; y < k; ++y) {
                    double prob = prior[y];
                    for (std::size_t j = 0; j < p.features; ++j) {
                        const auto v = static_cast<std::size_t>(x[j]) - 1;
                        prob *= is_informative[j] ? conditional[j][y][v] : marginal[j][v];
                    }
                    p.joint[code * k + y] = prob;
                }
            }
            normalize(p.joint);
            break;
        }
    }
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------

BayesSubsetModel::BayesSubsetModel(const SyntheticProblem& problem, std::string name)
    : meta_{std::move(name), problem.features, problem.classes}, cardinality_(problem.cardinality) {
    problem.validate();
    const std::size_t d = problem.features;
    const std::size_t k = problem.classes;
    const std::size_t radix = cardinality_ + 1;
    const std::size_t codes = int_pow(radix, d);

    // Joint mass P(X_S = x_S, Y = y) for every extended code, digit 0 = marginalized.
    std::vector<double> mass(codes * k, 0.0);
    for (std::size_t code = 0; code < problem.support_size(); ++code) {
        std::size_t ext = 0;
        std::size_t rest = code;
        std::size_t place = 1;
        for (std::size_t j = 0; j < d; ++j) {
            ext += (rest % cardinality_ + 1) * place;
            rest /= cardinality_;
            place *= radix;
        }
        for (std::size_t y = 0; y < k; ++y) {
            mass[ext * k + y] = problem.joint[code * k + y];
        }
    }
    for (std::size_t j = 0, stride = 1; j < d; ++j, stride *= radix) {
        for (std::size_t ext = 0; ext < codes; ++ext) {
            if ((ext / stride) % radix != 0) {
                continue;
            }
            for (std::size_t y = 0; y < k; ++y) {
                double sum = 0.0;
                for (std::size_t v = 1; v <= cardinality_; ++v) {
                    sum += mass[(ext + v * stride) * k + y];
                }
                mass[ext * k + y] = sum;
            }
        }
    }

    logits_.assign(codes * k, 0.0);
    for (std::size_t ext = 0; ext < codes; ++ext) {
        double total = 0.0;
        for (std::size_t y = 0; y < k; ++y) {
            total += mass[ext * k + y];
        }
        if (total <= 0.0) {
            continue;
        }
        for (std::size_t y = 0; y < k; ++y) {
            logits_[ext * k + y] = std::log(std::max(mass[ext * k + y] / total, std::numeric_limits<double>::min()));
        }
    }
}

std::vector<LogitVector> BayesSubsetModel::evaluate(std::span<const Instance> batch) const {
    const std::size_t k = meta_.classes;
    const std::size_t radix = cardinality_ + 1;
    std::vector<LogitVector> out;
    out.reserve(batch.size());
    for (const auto& x : batch) {
        // Digits are stored least significant first for feature d-1, matching the constructor.
        std::size_t ext = 0;
        std::size_t place = 1;
        for (std::size_t j = x.size(); j-- > 0;) {
            const double v = x[j];
            if (!(v >= 0.0 && v <= static_cast<double>(cardinality_)) || v != std::floor(v)) {
                throw InvalidInput("Bayes model input " + format_double(v) + " is not in 0.." +
                                   std::to_string(cardinality_));
            }
            ext += static_cast<std::size_t>(v) * place;
            place *= radix;
        }
        out.emplace_back(logits_.begin() + static_cast<std::ptrdiff_t>(ext * k),
                         logits_.begin() + static_cast<std::ptrdiff_t>((ext + 1) * k));
    }
    return out;
}

std::shared_ptr<TableModel> random_table_model(const SyntheticProblem& problem, std::uint64_t seed) {
    problem.validate();
    Rng rng = derive_rng(SeedSpec(seed), "random-table-model", 0);
    const std::size_t radix = problem.cardinality + 1;
    const std::size_t codes = int_pow(radix, problem.features);
    std::vector<TableModel::Entry> entries;
    entries.reserve(codes);
    for (std::size_t ext = 0; ext < codes; ++ext) {
        Instance x(problem.features);
        std::size_t rest = ext;
        for (std::size_t j = problem.features; j-- > 0;) {
            x[j] = static_cast<double>(rest % radix);
            rest /= radix;
        }
        LogitVector z(problem.classes);
        for (double& v : z) {
            v = rng.uniform(-3.0, 3.0);
        }
        entries.push_back({std::move(x), std::move(z)});
    }
    return std::make_shared<TableModel>(problem.features, problem.classes, std::move(entries), LogitVector{},
                                        "random-table");
}

SubsetPredictor SubsetPredictor::from_model(const Model& model) {
    return {model.metadata().classes, [&model](std::span<const Instance> inputs, const SubsetMask&) {
                const auto logits = model.eval_logits(inputs);
                std::vector<ProbVector> out;
                out.reserve(logits.size());
                for (const auto& z : logits) {
                    out.push_back(softmax(z));
                }
                return out;
            }};
}

SubsetPredictor SubsetPredictor::from_recalibrated(const RecalibratedModel& model) {
    return {model.base().metadata().classes, [&model](std::span<const Instance> inputs, const SubsetMask& subset) {
                return model.predict_perturbed(inputs, perturbation_level(subset, model.spec()));
            }};
}

// ---------------------------------------------------------------------------

double exact_predictive_power(const SyntheticProblem& problem, const SubsetPredictor& model,
                              const PerturbationSpec& spec, const SubsetMask& subset) {
    const double empty_loss = terms_for_subset(problem, model, spec, SubsetMask::empty(spec.unit_count())).loss;
    return empty_loss - terms_for_subset(problem, model, spec, subset).loss;
}

double exact_mutual_information(const SyntheticProblem& problem, const SubsetPredictor& model,
                                const PerturbationSpec& spec, const SubsetMask& subset) {
    return terms_for_subset(problem, model, spec, subset).mi;
}

double exact_ce_kl(const SyntheticProblem& problem, const SubsetPredictor& model, const PerturbationSpec& spec,
                   const SubsetMask& subset) {
    return std::max(terms_for_subset(problem, model, spec, subset).ce, 0.0);
}

double baseline_bias(const SyntheticProblem& problem, const SubsetPredictor& model, const PerturbationSpec& spec) {
    const SubsetMask empty = SubsetMask::empty(spec.unit_count());
    const auto cells = subset_cells(problem, spec, empty);
    const auto preds = predict_cells(model, cells, empty, problem.classes);
    const auto py = problem.label_marginal();
    const std::size_t k = problem.classes;
    double bias = 0.0;
    for (std::size_t c = 0; c < preds.size(); ++c) {
        double cell_mass = 0.0;
        for (std::size_t y = 0; y < k; ++y) {
            cell_mass += cells.joint[c * k + y];
        }
        double kl = 0.0;
        for (std::size_t y = 0; y < k; ++y) {
            if (py[y] > 0.0) {
                kl += py[y] * (std::log(py[y]) - clamped_log(preds[c][y]));
            }
        }
        bias += cell_mass * kl;
    }
    return bias;
}

std::vector<DecompositionResult> verify_decomposition(const SyntheticProblem& problem, const SubsetPredictor& model,
                                                      const PerturbationSpec& spec) {
    const std::size_t g = spec.unit_count();
    if (g > kMaxProblemFeatures) {
        throw LimitExceeded("decomposition check enumerates at most 2^" + std::to_string(kMaxProblemFeatures) +
                            " subsets");
    }
    const auto masks = enumerate_subsets(g);
    const double bias = baseline_bias(problem, model, spec);
    const double empty_loss = terms_for_subset(problem, model, spec, masks.front()).loss;
    std::vector<DecompositionResult> out;
    out.reserve(masks.size());
    for (const auto& mask : masks) {
        const auto t = terms_for_subset(problem, model, spec, mask);
        DecompositionResult r;
        r.mask = mask;
        r.v = empty_loss - t.loss;
        r.bias = bias;
        r.mi = t.mi;
        r.ce = t.ce;
        r.residual = r.v - (r.bias + r.mi - r.ce);
        out.push_back(std::move(r));
    }
    return out;
}

std::string decomposition_to_csv(std::span<const DecompositionResult> rows) {
    std::string out = "mask,v,bias,mi,ce,residual\n";
    for (const auto& r : rows) {
        out += r.mask.to_string() + "," + format_double(r.v) + "," + format_double(r.bias) + "," +
               format_double(r.mi) + "," + format_double(r.ce) + "," + format_double(r.residual) + "\n";
    }
    return out;
}

std::shared_ptr<TableModel> calibrated_counterpart(const SyntheticProblem& problem, const SubsetPredictor& model,
                                                   const PerturbationSpec& spec, const SubsetMask& subset) {
    const auto cells = subset_cells(problem, spec, subset);
    const auto preds = predict_cells(model, cells, subset, problem.classes);
    const std::size_t k = problem.classes;
    const auto grouping = group_vectors(preds, kGroupResolution);
    std::vector<double> gy(grouping.group_count() * k, 0.0);
    for (std::size_t c = 0; c < preds.size(); ++c) {
        for (std::size_t y = 0; y < k; ++y) {
            gy[grouping.group_of[c] * k + y] += cells.joint[c * k + y];
        }
    }
    std::vector<TableModel::Entry> entries;
    entries.reserve(preds.size());
    for (std::size_t c = 0; c < preds.size(); ++c) {
        const std::size_t g = grouping.group_of[c];
        const double mass = std::accumulate(gy.begin() + static_cast<std::ptrdiff_t>(g * k),
                                            gy.begin() + static_cast<std::ptrdiff_t>((g + 1) * k), 0.0);
        LogitVector z(k, 0.0);
        if (mass > 0.0) {
            for (std::size_t y = 0; y < k; ++y) {
                z[y] = std::log(std::max(gy[g * k + y] / mass, std::numeric_limits<double>::min()));
            }
        }
        entries.push_back({cells.inputs[c], std::move(z)});
    }
    return std::make_shared<TableModel>(problem.features, k, std::move(entries), LogitVector{}, "counterpart");
}

double LocalBoundReport::fraction_satisfied() const {
    return trials.empty() ? 1.0 : static_cast<double>(satisfied) / static_cast<double>(trials.size());
}

nlohmann::json LocalBoundReport::to_json() const {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& t : trials) {
        rows.push_back({{"code", t.code}, {"target_class", t.target_class}, {"lhs", t.lhs}});
    }
    return {{"delta", delta},
            {"seed", seed},
            {"probability_space", "x ~ P_X"},
            {"ce_max", ce_max},
            {"rhs", rhs},
            {"trials", trials.size()},
            {"satisfied", satisfied},
            {"fraction_satisfied", fraction_satisfied()},
            {"worst_lhs", worst_lhs},
            {"worst_ratio", worst_ratio},
            {"per_trial", rows}};
}

LocalBoundReport verify_local_bound(const SyntheticProblem& problem, const SubsetPredictor& model,
                                    const PerturbationSpec& spec, const LocalBoundOptions& options) {
    if (!(options.delta > 0.0 && options.delta < 1.0)) {
        throw InvalidInput("delta must be in (0, 1)");
    }
    const std::size_t g = spec.unit_count();
    if (g > kMaxProblemFeatures) {
        throw LimitExceeded("local bound check enumerates at most 2^" + std::to_string(kMaxProblemFeatures) +
                            " subsets");
    }
    const std::size_t k = problem.classes;
    const auto masks = enumerate_subsets(g);

    struct SubsetTables {
        SubsetCells cells;
        std::vector<ProbVector> preds;
        std::vector<double> calibrated;  // cell * K + y
    };
    std::vector<SubsetTables> tables;
    tables.reserve(masks.size());
    LocalBoundReport report;
    report.delta = options.delta;
    report.seed = options.seed;
    for (const auto& mask : masks) {
        SubsetTables t;
        t.cells = subset_cells(problem, spec, mask);
        t.preds = predict_cells(model, t.cells, mask, k);
        const auto grouping = group_vectors(t.preds, kGroupResolution);
        std::vector<double> gy(grouping.group_count() * k, 0.0);
        std::vector<double> gmass(grouping.group_count(), 0.0);
        for (std::size_t c = 0; c < t.preds.size(); ++c) {
            for (std::size_t y = 0; y < k; ++y) {
                gy[grouping.group_of[c] * k + y] += t.cells.joint[c * k + y];
                gmass[grouping.group_of[c]] += t.cells.joint[c * k + y];
            }
        }
        t.calibrated.assign(t.preds.size() * k, 0.0);
        for (std::size_t c = 0; c < t.preds.size(); ++c) {
            const std::size_t grp = grouping.group_of[c];
            for (std::size_t y = 0; y < k; ++y) {
                t.calibrated[c * k + y] = gmass[grp] > 0.0 ? gy[grp * k + y] / gmass[grp] : 1.0 / static_cast<double>(k);
            }
        }
        const auto terms = subset_terms(t.preds, t.cells.joint, k, problem.label_marginal());
        report.ce_max = std::max(report.ce_max, std::max(terms.ce, 0.0));
        tables.push_back(std::move(t));
    }
    report.rhs = 2.0 * report.ce_max + std::sqrt(8.0 * std::log(1.0 / options.delta));

    Rng rng = derive_rng(SeedSpec(options.seed), "local-bound", 0);
    const auto px = problem.feature_marginal();
    const std::size_t full = masks.size() - 1;
    for (std::size_t trial = 0; trial < options.trials; ++trial) {
        const std::size_t code = rng.categorical(px);
        const auto& top = tables[full];
        const auto target = argmax(top.preds[top.cells.cell_of(code)]);
        std::vector<double> v(masks.size());
        std::vector<double> v_star(masks.size());
        for (std::size_t s = 0; s < masks.size(); ++s) {
            const std::size_t c = tables[s].cells.cell_of(code);
            v[s] = tables[s].preds[c][target];
            v_star[s] = tables[s].calibrated[c * k + target];
        }
        const auto phi = shapley_exact(tabulated_value_function(std::move(v), static_cast<int>(target)));
        const auto phi_star = shapley_exact(tabulated_value_function(std::move(v_star), static_cast<int>(target)));
        double lhs = 0.0;
        for (std::size_t i = 0; i < g; ++i) {
            const double diff = phi.scores[i] - phi_star.scores[i];
            lhs += diff * diff;
        }
        lhs /= static_cast<double>(g);
        report.trials.push_back({code, static_cast<int>(target), lhs});
        if (lhs <= report.rhs) {
            ++report.satisfied;
        }
        report.worst_lhs = std::max(report.worst_lhs, lhs);
    }
    report.worst_ratio = report.worst_lhs / report.rhs;
    return report;
}

// ---------------------------------------------------------------------------

double exact_bin_ce(const SyntheticProblem& problem, const RecalibratedModel& model, std::size_t bin) {
    const auto& spec = model.spec();
    if (spec.groups && !spec.groups->equal_sizes()) {
        throw InvalidInput("exact bin calibration error needs ungrouped or equal-size groups");
    }
    const std::size_t g = spec.unit_count();
    if (g > kMaxProblemFeatures) {
        throw LimitExceeded("exact bin calibration error enumerates at most 2^" +
                            std::to_string(kMaxProblemFeatures) + " subsets");
    }
    const auto& bins = model.profile().bins;
    const auto counts = feasible_perturbed_counts(bin, bins, g);
    if (counts.empty()) {
        return 0.0;
    }
    const std::size_t k = problem.classes;

    std::vector<ProbVector> preds;
    std::vector<double> joint;
    for (const auto& mask : enumerate_subsets(g)) {
        const std::size_t m = g - mask.observed_count();
        if (std::find(counts.begin(), counts.end(), m) == counts.end()) {
            continue;
        }
        const double weight = 1.0 / (static_cast<double>(counts.size()) * binomial(g, m));
        const auto cells = subset_cells(problem, spec, mask);
        auto p = model.predict_perturbed(cells.inputs, perturbation_level(mask, spec));
        std::move(p.begin(), p.end(), std::back_inserter(preds));
        for (double v : cells.joint) {
            joint.push_back(weight * v);
        }
    }
    return std::max(subset_terms(preds, joint, k, problem.label_marginal()).ce, 0.0);
}

BinCeOracle exact_bin_ce_oracle(const SyntheticProblem& problem) {
    return [&problem](std::size_t bin, const RecalibratedModel& model) { return exact_bin_ce(problem, model, bin); };
}

}  // namespace recalx
