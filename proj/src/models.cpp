#include "recalx/models.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json_util.hpp"
#include "recalx/error.hpp"
#include "recalx/io.hpp"

namespace recalx {

std::vector<LogitVector> Model::eval_logits(std::span<const Instance> batch) const {
    const auto& meta = metadata();
    for (std::size_t i = 0; i < batch.size(); ++i) {
        if (batch[i].size() != meta.features) {
            throw InvalidInput("model `" + meta.name + "`: instance " + std::to_string(i) + " has " +
                               std::to_string(batch[i].size()) + " features, expected " +
                               std::to_string(meta.features));
        }
        if (!all_finite(batch[i])) {
            throw InvalidInput("model `" + meta.name + "`: instance " + std::to_string(i) + " has non-finite values");
        }
    }
    if (batch.empty()) {
        return {};
    }
    auto out = evaluate(batch);
    if (out.size() != batch.size()) {
        throw NumericError("model `" + meta.name + "` returned " + std::to_string(out.size()) +
                           " outputs for a batch of " + std::to_string(batch.size()));
    }
    for (const auto& z : out) {
        if (z.size() != meta.classes || !all_finite(z)) {
            throw NumericError("model `" + meta.name + "` produced malformed or non-finite logits");
        }
    }
    return out;
}

LogitVector Model::eval_logits(const Instance& x) const {
    return eval_logits(std::span<const Instance>(&x, 1)).front();
}

// ---------------------------------------------------------------------------

LinearSoftmaxModel::LinearSoftmaxModel(std::vector<std::vector<double>> weights, std::vector<double> bias,
                                       std::string name)
    : weights_(std::move(weights)), bias_(std::move(bias)) {
    if (weights_.size() < 2 || weights_.front().empty()) {
        throw InvalidInput("linear model needs a K×d weight matrix with K >= 2 and d >= 1");
    }
    const std::size_t d = weights_.front().size();
    for (const auto& row : weights_) {
        if (row.size() != d || !all_finite(row)) {
            throw InvalidInput("linear model weight rows must have equal length and finite entries");
        }
    }
    if (bias_.empty()) {
        bias_.assign(weights_.size(), 0.0);
    }
    if (bias_.size() != weights_.size() || !all_finite(bias_)) {
        throw InvalidInput("linear model bias must have one finite entry per class");
    }
    meta_ = {std::move(name), d, weights_.size()};
}

std::vector<LogitVector> LinearSoftmaxModel::evaluate(std::span<const Instance> batch) const {
    std::vector<LogitVector> out;
    out.reserve(batch.size());
    for (const auto& x : batch) {
        LogitVector z(bias_);
        for (std::size_t k = 0; k < weights_.size(); ++k) {
            z[k] += std::inner_product(weights_[k].begin(), weights_[k].end(), x.begin(), 0.0);
        }
        out.push_back(std::move(z));
    }
    return out;
}

LinearSoftmaxModel LinearSoftmaxModel::from_json(const nlohmann::json& j, std::string name) {
    auto weights = detail::json_to_matrix(detail::require_field(j, "weights", "linear model"), "weights");
    std::vector<double> bias;
    if (j.contains("bias")) {
        bias = detail::json_to_doubles(j.at("bias"), "bias");
    }
    return LinearSoftmaxModel(std::move(weights), std::move(bias), std::move(name));
}

nlohmann::json LinearSoftmaxModel::to_json() const {
    return {{"weights", weights_}, {"bias", bias_}};
}

// ---------------------------------------------------------------------------

TableModel::TableModel(std::size_t features, std::size_t classes, std::vector<Entry> entries,
                       LogitVector default_logits, std::string name)
    : meta_{std::move(name), features, classes}, default_(std::move(default_logits)) {
    if (features < 1 || classes < 2) {
        throw InvalidInput("table model needs d >= 1 and K >= 2");
    }
    if (default_.empty()) {
        default_.assign(classes, 0.0);
    }
    if (default_.size() != classes || !all_finite(default_)) {
        throw InvalidInput("table model default logits must be K finite values");
    }
    for (const auto& e : entries) {
        if (e.x.size() != features || e.logits.size() != classes || !all_finite(e.logits) ||
            !all_finite(e.x)) {
            throw InvalidInput("table model entry has wrong dimensions or non-finite values");
        }
    }
    std::vector<std::size_t> order(entries.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return entries[a].x < entries[b].x; });
    for (std::size_t r = 1; r < order.size(); ++r) {
        if (entries[order[r]].x == entries[order[r - 1]].x) {
            throw InvalidInput("table model has duplicate entries");
        }
    }
    keys_.reserve(entries.size() * features);
    logits_.reserve(entries.size() * classes);
    for (std::size_t idx : order) {
        keys_.insert(keys_.end(), entries[idx].x.begin(), entries[idx].x.end());
        logits_.insert(logits_.end(), entries[idx].logits.begin(), entries[idx].logits.end());
    }
}

std::vector<LogitVector> TableModel::evaluate(std::span<const Instance> batch) const {
    const std::size_t d = meta_.features;
    const std::size_t rows = keys_.size() / d;
    auto row_less = [&](std::size_t r, const Instance& x) {
        return std::lexicographical_compare(keys_.begin() + r * d, keys_.begin() + (r + 1) * d, x.begin(),
                                            x.end());
    };
    std::vector<LogitVector> out;
    out.reserve(batch.size());
    for (const auto& x : batch) {
        std::size_t lo = 0;
        std::size_t hi = rows;
        while (lo < hi) {
            const std::size_t mid = lo + (hi - lo) / 2;
            if (row_less(mid, x)) {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        if (lo < rows && std::equal(x.begin(), x.end(), keys_.begin() + lo * d)) {
            const auto first = logits_.begin() + lo * meta_.classes;
            out.emplace_back(first, first + meta_.classes);
        } else {
            out.push_back(default_);
        }
    }
    return out;
}

TableModel TableModel::from_json(const nlohmann::json& j, std::string name) {
    const auto d = detail::json_to_count(detail::require_field(j, "features", "table model"), "features");
    const auto k = detail::json_to_count(detail::require_field(j, "classes", "table model"), "classes");
    std::vector<Entry> entries;
    const auto& list = detail::require_field(j, "entries", "table model");
    if (!list.is_array()) {
        throw ParseError("table model: `entries` must be an array");
    }
    for (const auto& e : list) {
        entries.push_back({detail::json_to_doubles(detail::require_field(e, "x", "table entry"), "x"),
                           detail::json_to_doubles(detail::require_field(e, "logits", "table entry"), "logits")});
    }
    LogitVector fallback;
    if (j.contains("default")) {
        fallback = detail::json_to_doubles(j.at("default"), "default");
    }
    return TableModel(d, k, std::move(entries), std::move(fallback), std::move(name));
}

// ---------------------------------------------------------------------------

MiscalibrationWrapper::MiscalibrationWrapper(ModelHandle inner, double scale, std::vector<double> offset)
    : inner_(std::move(inner)), scale_(scale), offset_(std::move(offset)) {
    if (!inner_) {
        throw InvalidInput("miscalibration wrapper needs an inner model");
    }
    if (!(scale_ > 0.0) || !std::isfinite(scale_)) {
        throw InvalidInput("miscalibration scale must be a finite positive number");
    }
    const auto& im = inner_->metadata();
    if (offset_.empty()) {
        offset_.assign(im.classes, 0.0);
    }
    if (offset_.size() != im.classes || !all_finite(offset_)) {
        throw InvalidInput("miscalibration offset must have K finite entries");
    }
    meta_ = {im.name + "*" + format_double(scale_), im.features, im.classes};
}

std::vector<LogitVector> MiscalibrationWrapper::evaluate(std::span<const Instance> batch) const {
    auto out = inner_->eval_logits(batch);
    for (auto& z : out) {
        for (std::size_t k = 0; k < z.size(); ++k) {
            z[k] = scale_ * z[k] + offset_[k];
        }
    }
    return out;
}

std::shared_ptr<LinearSoftmaxModel> load_linear_model(const std::filesystem::path& path) {
    return std::make_shared<LinearSoftmaxModel>(
        LinearSoftmaxModel::from_json(read_json_file(path), path.stem().string()));
}

std::shared_ptr<TableModel> load_table_model(const std::filesystem::path& path) {
    return std::make_shared<TableModel>(TableModel::from_json(read_json_file(path), path.stem().string()));
}

}  // namespace recalx
