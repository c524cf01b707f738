#include "recalx/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "json_util.hpp"
#include "recalx/error.hpp"

namespace recalx {
namespace {

void check_temperature(double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw InvalidInput("temperature must be a finite positive number, got " + format_double(temperature));
    }
}

template <typename F>
auto with_transport_context(const std::string& context, F&& body) {
    try {
        return body();
    } catch (const TimeoutError& e) {
        throw TimeoutError(context + ": " + e.message(), e.request_id());
    } catch (const ProtocolError& e) {
        throw ProtocolError(context + ": " + e.message(), e.request_id());
    } catch (const TransportError& e) {
        throw TransportError(context + ": " + e.message(), e.request_id());
    }
}

std::vector<LogitVector> eval_in_batches(const Model& model, const std::vector<Instance>& inputs,
                                         std::size_t batch_size) {
    std::vector<LogitVector> out;
    out.reserve(inputs.size());
    const std::span<const Instance> all(inputs);
    for (std::size_t first = 0; first < inputs.size(); first += batch_size) {
        const std::size_t count = std::min(batch_size, inputs.size() - first);
        auto part = with_transport_context(
            "samples " + std::to_string(first) + ".." + std::to_string(first + count - 1),
            [&] { return model.eval_logits(all.subspan(first, count)); });
        std::move(part.begin(), part.end(), std::back_inserter(out));
    }
    return out;
}

bool bin_is_feasible(std::size_t bin, const PerturbationLevelBins& bins, const PerturbationSpec& spec) {
    return !feasible_perturbed_counts(bin, bins, spec.unit_count()).empty();
}

void check_dataset_against(const Dataset& data, const Model& model, const PerturbationSpec& spec) {
    data.validate();
    if (data.size() == 0) {
        throw InvalidInput("dataset is empty");
    }
    if (data.feature_count != model.metadata().features || data.feature_count != spec.feature_count()) {
        throw InvalidInput("dataset, model and perturbation spec disagree on the feature count");
    }
    if (data.class_count > model.metadata().classes) {
        throw InvalidInput("dataset has more classes than the model outputs");
    }
}

// Weighted k-means on distinct prediction vectors; returns the cluster of each.
std::vector<std::size_t> kmeans_assign(const std::vector<std::vector<double>>& points,
                                       const std::vector<double>& weights, std::size_t k, std::uint64_t seed,
                                       int iterations) {
    const std::size_t n = points.size();
    const std::size_t dim = points.front().size();
    auto dist2 = [dim](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            const double t = a[j] - b[j];
            s += t * t;
        }
        return s;
    };

    Rng rng = derive_rng(SeedSpec(seed), "kmeans++", 0);
    std::vector<std::vector<double>> centers;
    centers.reserve(k);
    centers.push_back(points[rng.categorical(weights)]);
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    while (centers.size() < k) {
        std::vector<double> score(n);
        for (std::size_t i = 0; i < n; ++i) {
            nearest[i] = std::min(nearest[i], dist2(points[i], centers.back()));
            score[i] = weights[i] * nearest[i];
        }
        centers.push_back(points[rng.categorical(score)]);
    }

    std::vector<std::size_t> assign(n, 0);
    for (int it = 0; it < iterations; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double dd = dist2(points[i], centers[c]);
                if (dd < best) {
                    best = dd;
                    assign[i] = c;
                }
            }
        }
        std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
        std::vector<double> mass(k, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < dim; ++j) {
                sums[assign[i]][j] += weights[i] * points[i][j];
            }
            mass[assign[i]] += weights[i];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (mass[c] > 0.0) {
                for (std::size_t j = 0; j < dim; ++j) {
                    centers[c][j] = sums[c][j] / mass[c];
                }
            }
        }
    }
    return assign;
}

}  // namespace

ProbVector softmax_with_temperature(std::span<const double> logits, double temperature) {
    check_temperature(temperature);
    if (temperature == 1.0) {
        return softmax(logits);
    }
    std::vector<double> scaled(logits.begin(), logits.end());
    for (double& z : scaled) {
        z /= temperature;
    }
    return softmax(scaled);
}

double cross_entropy_with_temperature(std::span<const double> logits, int label, double temperature) {
    check_temperature(temperature);
    if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
        throw InvalidInput("label outside the logit vector");
    }
    std::vector<double> scaled(logits.begin(), logits.end());
    for (double& z : scaled) {
        z /= temperature;
    }
    return log_sum_exp(scaled) - scaled[static_cast<std::size_t>(label)];
}

double mean_cross_entropy(std::span<const LogitVector> logits, std::span<const int> labels, double temperature) {
    if (logits.size() != labels.size() || logits.empty()) {
        throw InvalidInput("mean_cross_entropy needs equal, nonzero numbers of logits and labels");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        total += cross_entropy_with_temperature(logits[i], labels[i], temperature);
    }
    return total / static_cast<double>(logits.size());
}

TemperatureSearch minimize_temperature(const std::function<double(double)>& loss,
                                       const TemperatureSearchOptions& options) {
    if (!(options.min_temperature > 0.0) || !(options.max_temperature > options.min_temperature) ||
        !(options.log_tolerance > 0.0)) {
        throw InvalidInput("temperature search needs 0 < min < max and a positive tolerance");
    }
    const double lo_bound = std::log(options.min_temperature);
    const double hi_bound = std::log(options.max_temperature);
    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;

    TemperatureSearch result;
    auto f = [&](double log_t) {
        ++result.evaluations;
        return loss(std::exp(log_t));
    };

    double a = lo_bound;
    double b = hi_bound;
    double c = b - inv_phi * (b - a);
    double d = a + inv_phi * (b - a);
    double fc = f(c);
    double fd = f(d);
    while (b - a > options.log_tolerance) {
        if (fc < fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    const double mid = 0.5 * (a + b);
    result.temperature = std::exp(mid);
    result.loss = f(mid);
    result.at_boundary = (a == lo_bound) || (b == hi_bound);

    if (options.min_temperature <= 1.0 && 1.0 <= options.max_temperature) {
        const double unit_loss = loss(1.0);
        ++result.evaluations;
        if (!(result.loss <= unit_loss)) {
            result.temperature = 1.0;
            result.loss = unit_loss;
            result.at_boundary = false;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------

TemperatureProfile TemperatureProfile::neutral(std::size_t bin_count) {
    TemperatureProfile p;
    p.bins = PerturbationLevelBins(bin_count);
    p.temperatures.assign(bin_count, 1.0);
    p.diagnostics.assign(bin_count, BinFitDiagnostics{});
    return p;
}

double TemperatureProfile::temperature_for_level(double level) const {
    return temperatures.at(bins.bin_of(level) - 1);
}

void TemperatureProfile::validate() const {
    if (temperatures.size() != bins.count()) {
        throw InvalidInput("temperature profile has " + std::to_string(temperatures.size()) + " temperatures for " +
                           std::to_string(bins.count()) + " bins");
    }
    for (double t : temperatures) {
        check_temperature(t);
    }
}

nlohmann::json TemperatureProfile::to_json() const {
    nlohmann::json diag;
    std::vector<std::size_t> samples;
    std::vector<bool> feasible, fitted, at_boundary;
    std::vector<double> initial, final_loss;
    for (const auto& d : diagnostics) {
        samples.push_back(d.samples);
        feasible.push_back(d.feasible);
        fitted.push_back(d.fitted);
        at_boundary.push_back(d.at_boundary);
        initial.push_back(d.initial_loss);
        final_loss.push_back(d.final_loss);
    }
    diag["samples"] = samples;
    diag["feasible"] = feasible;
    diag["fitted"] = fitted;
    diag["at_boundary"] = at_boundary;
    diag["initial_loss"] = initial;
    diag["final_loss"] = final_loss;
    diag["samples_per_instance"] = samples_per_instance;
    diag["seed"] = seed;
    return {{"bins", bins.count()}, {"edges", bins.edges()}, {"temperatures", temperatures}, {"diagnostics", diag}};
}

TemperatureProfile TemperatureProfile::from_json(const nlohmann::json& j) {
    TemperatureProfile p;
    const std::size_t b = detail::json_to_count(detail::require_field(j, "bins", "temperature profile"), "bins");
    p.bins = PerturbationLevelBins(b);
    p.temperatures =
        detail::json_to_doubles(detail::require_field(j, "temperatures", "temperature profile"), "temperatures");
    if (j.contains("edges")) {
        const auto edges = detail::json_to_doubles(j.at("edges"), "edges");
        const auto expected = p.bins.edges();
        if (edges.size() != expected.size()) {
            throw ParseError("temperature profile: edges do not match the bin count");
        }
        for (std::size_t e = 0; e < edges.size(); ++e) {
            if (std::abs(edges[e] - expected[e]) > 1e-12) {
                throw ParseError("temperature profile: only equal-width edges are supported");
            }
        }
    }
    p.diagnostics.assign(b, BinFitDiagnostics{});
    if (j.contains("diagnostics") && j.at("diagnostics").is_object()) {
        const auto& d = j.at("diagnostics");
        auto fill = [&](const char* key, auto setter) {
            if (d.contains(key) && d.at(key).is_array() && d.at(key).size() == b) {
                for (std::size_t i = 0; i < b; ++i) {
                    setter(p.diagnostics[i], d.at(key)[i]);
                }
            }
        };
        fill("samples", [](BinFitDiagnostics& x, const nlohmann::json& v) { x.samples = v.get<std::size_t>(); });
        fill("feasible", [](BinFitDiagnostics& x, const nlohmann::json& v) { x.feasible = v.get<bool>(); });
        fill("fitted", [](BinFitDiagnostics& x, const nlohmann::json& v) { x.fitted = v.get<bool>(); });
        fill("at_boundary", [](BinFitDiagnostics& x, const nlohmann::json& v) { x.at_boundary = v.get<bool>(); });
        fill("initial_loss", [](BinFitDiagnostics& x, const nlohmann::json& v) { x.initial_loss = v.get<double>(); });
        fill("final_loss", [](BinFitDiagnostics& x, const nlohmann::json& v) { x.final_loss = v.get<double>(); });
        if (d.contains("samples_per_instance")) {
            p.samples_per_instance = d.at("samples_per_instance").get<std::size_t>();
        }
        if (d.contains("seed")) {
            p.seed = d.at("seed").get<std::uint64_t>();
        }
    }
    p.validate();
    return p;
}

// ---------------------------------------------------------------------------

TemperatureProfile fit_recalx(const Model& model, const Dataset& validation, const PerturbationSpec& spec,
                              const FitOptions& options) {
    if (options.bins < 1) {
        throw InvalidInput("fit_recalx needs at least one bin");
    }
    if (options.samples_per_instance < 1) {
        throw InvalidInput("fit_recalx needs at least one perturbation sample per instance (M >= 1)");
    }
    if (options.eval_batch < 1) {
        throw InvalidInput("fit_recalx needs a positive evaluation batch size");
    }
    check_dataset_against(validation, model, spec);

    TemperatureProfile profile = TemperatureProfile::neutral(options.bins);
    profile.samples_per_instance = options.samples_per_instance;
    profile.seed = options.seed.master();
    const auto& bins = profile.bins;

    for (std::size_t b = 1; b <= bins.count(); ++b) {
        auto& diag = profile.diagnostics[b - 1];
        if (!bin_is_feasible(b, bins, spec)) {
            if (options.strict_bins) {
                throw InfeasibleBin("bin " + std::to_string(b) + " of " + std::to_string(bins.count()) +
                                        " is unreachable with " + std::to_string(spec.unit_count()) + " units",
                                    b);
            }
            diag.feasible = false;
            continue;
        }

        Rng rng = derive_rng(options.seed, "recalx-bin", b);
        std::vector<Instance> perturbed;
        std::vector<int> labels;
        perturbed.reserve(validation.size() * options.samples_per_instance);
        labels.reserve(perturbed.capacity());
        for (std::size_t i = 0; i < validation.size(); ++i) {
            for (std::size_t j = 0; j < options.samples_per_instance; ++j) {
                const SubsetMask mask = sample_subset_in_bin(b, bins, spec, rng);
                perturbed.push_back(apply_perturbation(validation.instances[i], mask, spec));
                labels.push_back(validation.labels[i]);
            }
        }
        const auto logits = with_transport_context("fitting bin " + std::to_string(b),
                                                   [&] { return eval_in_batches(model, perturbed, options.eval_batch); });

        diag.samples = logits.size();
        auto loss = [&](double t) { return mean_cross_entropy(logits, labels, t); };
        diag.initial_loss = loss(1.0);
        const bool single_label =
            std::all_of(labels.begin(), labels.end(), [&](int y) { return y == labels.front(); });
        if (single_label) {
            diag.final_loss = diag.initial_loss;
            continue;
        }
        const auto search = minimize_temperature(loss, options.search);
        profile.temperatures[b - 1] = search.temperature;
        diag.final_loss = search.loss;
        diag.at_boundary = search.at_boundary;
        diag.fitted = true;
    }
    return profile;
}

// ---------------------------------------------------------------------------

RecalibratedModel::RecalibratedModel(ModelHandle base, PerturbationSpec spec, TemperatureProfile profile)
    : base_(std::move(base)), spec_(std::move(spec)), profile_(std::move(profile)) {
    if (!base_) {
        throw InvalidInput("recalibrated model needs a base model");
    }
    if (spec_.feature_count() != base_->metadata().features) {
        throw InvalidInput("perturbation spec and base model disagree on the feature count");
    }
    profile_.validate();
}

RecalibratedModel RecalibratedModel::neutral(ModelHandle base, PerturbationSpec spec, std::size_t bin_count) {
    return RecalibratedModel(std::move(base), std::move(spec), TemperatureProfile::neutral(bin_count));
}

ProbVector RecalibratedModel::predict(const Instance& x, const SubsetMask& observed) const {
    return predict(std::span<const Instance>(&x, 1), std::span<const SubsetMask>(&observed, 1)).front();
}

std::vector<ProbVector> RecalibratedModel::predict(std::span<const Instance> xs,
                                                   std::span<const SubsetMask> masks) const {
    if (xs.size() != masks.size()) {
        throw InvalidInput("predict needs one mask per instance");
    }
    std::vector<Instance> perturbed;
    perturbed.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        perturbed.push_back(apply_perturbation(xs[i], masks[i], spec_));
    }
    const auto logits = base_->eval_logits(perturbed);
    std::vector<ProbVector> out;
    out.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double t = profile_.temperature_for_level(perturbation_level(masks[i], spec_));
        out.push_back(softmax_with_temperature(logits[i], t));
    }
    return out;
}

std::vector<ProbVector> RecalibratedModel::predict_perturbed(std::span<const Instance> perturbed,
                                                             double level) const {
    const double t = profile_.temperature_for_level(level);
    const auto logits = base_->eval_logits(perturbed);
    std::vector<ProbVector> out;
    out.reserve(logits.size());
    for (const auto& z : logits) {
        out.push_back(softmax_with_temperature(z, t));
    }
    return out;
}

ProbVector recal_predict(const RecalibratedModel& model, const Instance& x, const SubsetMask& observed) {
    return model.predict(x, observed);
}

// ---------------------------------------------------------------------------

double ce_kl_plugin(std::span<const ProbVector> predictions, std::span<const int> labels, std::size_t cluster_count,
                    std::uint64_t seed) {
    if (predictions.empty()) {
        throw InvalidInput("ce_kl_plugin: empty input");
    }
    if (predictions.size() != labels.size()) {
        throw InvalidInput("ce_kl_plugin: predictions and labels differ in length");
    }
    if (cluster_count < 1) {
        throw InvalidInput("ce_kl_plugin: cluster_count must be >= 1");
    }
    const std::size_t k = predictions.front().size();
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        if (predictions[i].size() != k) {
            throw InvalidInput("ce_kl_plugin: predictions differ in length");
        }
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
            throw InvalidInput("ce_kl_plugin: label outside the prediction vector");
        }
    }

    const auto distinct = group_vectors(predictions, 1e-9);
    std::vector<std::size_t> cluster_of = distinct.group_of;
    std::size_t clusters = distinct.group_count();
    if (clusters > cluster_count) {
        std::vector<double> weights(distinct.group_count(), 0.0);
        for (std::size_t g : distinct.group_of) {
            weights[g] += 1.0;
        }
        const auto rep_cluster = kmeans_assign(distinct.representatives, weights, cluster_count, seed, 50);
        for (auto& c : cluster_of) {
            c = rep_cluster[c];
        }
        clusters = cluster_count;
    }

    std::vector<std::vector<double>> label_counts(clusters, std::vector<double>(k, 0.0));
    std::vector<std::vector<double>> prediction_sums(clusters, std::vector<double>(k, 0.0));
    std::vector<double> sizes(clusters, 0.0);
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const std::size_t c = cluster_of[i];
        label_counts[c][static_cast<std::size_t>(labels[i])] += 1.0;
        for (std::size_t j = 0; j < k; ++j) {
            prediction_sums[c][j] += predictions[i][j];
        }
        sizes[c] += 1.0;
    }

    const double n = static_cast<double>(predictions.size());
    double ce = 0.0;
    for (std::size_t c = 0; c < clusters; ++c) {
        if (sizes[c] == 0.0) {
            continue;
        }
        double kl = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const double p = label_counts[c][j] / sizes[c];
            if (p == 0.0) {
                continue;
            }
            const double q = std::max(prediction_sums[c][j] / sizes[c], kProbabilityFloor);
            kl += p * std::log(p / q);
        }
        ce += (sizes[c] / n) * kl;
    }
    return std::max(ce, 0.0);
}

std::vector<BinCalibration> calibration_curve(const RecalibratedModel& model, const Dataset& evaluation,
                                              const CurveOptions& options) {
    if (options.samples_per_instance < 1) {
        throw InvalidInput("calibration_curve needs at least one mask per instance");
    }
    check_dataset_against(evaluation, model.base(), model.spec());
    const auto& bins = model.profile().bins;
    const auto& spec = model.spec();

    std::vector<BinCalibration> out;
    for (std::size_t b = 1; b <= bins.count(); ++b) {
        BinCalibration row{b, bins.lower(b), bins.upper(b), 0.0, 0, true};
        if (!bin_is_feasible(b, bins, spec)) {
            row.feasible = false;
            out.push_back(row);
            continue;
        }
        Rng rng = derive_rng(options.seed, "curve-bin", b);
        std::vector<Instance> xs;
        std::vector<SubsetMask> masks;
        std::vector<int> labels;
        for (std::size_t i = 0; i < evaluation.size(); ++i) {
            for (std::size_t j = 0; j < options.samples_per_instance; ++j) {
                masks.push_back(sample_subset_in_bin(b, bins, spec, rng));
                xs.push_back(evaluation.instances[i]);
                labels.push_back(evaluation.labels[i]);
            }
        }
        row.samples = masks.size();
        if (options.exact_oracle) {
            row.ce = options.exact_oracle(b, model);
        } else {
            const auto preds = with_transport_context("calibration curve bin " + std::to_string(b),
                                                      [&] { return model.predict(xs, masks); });
            row.ce = ce_kl_plugin(preds, labels, options.cluster_count, options.seed.child("kmeans", b).key());
        }
        out.push_back(row);
    }
    return out;
}

std::string CalibrationReport::to_csv() const {
    std::string out = "bin_lo,bin_hi,ce_before,ce_after,n\n";
    for (const auto& r : rows) {
        out += format_double(r.bin_lo) + "," + format_double(r.bin_hi) + "," + format_double(r.ce_before) + "," +
               format_double(r.ce_after) + "," + std::to_string(r.n) + "\n";
    }
    return out;
}

CalibrationReport calibration_report(const RecalibratedModel& before, const RecalibratedModel& after,
                                     const Dataset& evaluation, const CurveOptions& options) {
    if (before.profile().bins.count() != after.profile().bins.count()) {
        throw InvalidInput("before/after models use different bin counts");
    }
    const auto curve_before = calibration_curve(before, evaluation, options);
    const auto curve_after = calibration_curve(after, evaluation, options);
    CalibrationReport report;
    report.estimator =
        options.exact_oracle ? "exact" : "plugin-kmeans-" + std::to_string(options.cluster_count);
    report.seed = options.seed.master();
    for (std::size_t i = 0; i < curve_before.size(); ++i) {
        report.rows.push_back({curve_before[i].lower, curve_before[i].upper, curve_before[i].ce, curve_after[i].ce,
                               curve_before[i].samples});
    }
    return report;
}

}  // namespace recalx
