#pragma once

#include <algorithm>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "recalx/core.hpp"

namespace recalx {

struct ModelMetadata {
    std::string name;
    std::size_t features = 0;
    std::size_t classes = 0;
};

/// Black-box classifier exposing logits for batches of instances.
///
/// Implementations override `evaluate`; `eval_logits` wraps it with dimension
/// and finiteness checks so every model obeys the same contract: one finite
/// logit vector of length K per input instance, in input order.
class Model {
public:
    virtual ~Model() = default;

    virtual const ModelMetadata& metadata() const = 0;

    std::vector<LogitVector> eval_logits(std::span<const Instance> batch) const;
    LogitVector eval_logits(const Instance& x) const;

protected:
    virtual std::vector<LogitVector> evaluate(std::span<const Instance> batch) const = 0;
};

using ModelHandle = std::shared_ptr<const Model>;

/// z(x) = W x + b with W of shape K×d.
class LinearSoftmaxModel final : public Model {
public:
    LinearSoftmaxModel(std::vector<std::vector<double>> weights, std::vector<double> bias,
                       std::string name = "linear");

    const ModelMetadata& metadata() const override { return meta_; }
    const std::vector<std::vector<double>>& weights() const noexcept { return weights_; }
    const std::vector<double>& bias() const noexcept { return bias_; }

    /// {"weights": [[...] × K], "bias": [...]}
    static LinearSoftmaxModel from_json(const nlohmann::json& j, std::string name = "linear");
    nlohmann::json to_json() const;

protected:
    std::vector<LogitVector> evaluate(std::span<const Instance> batch) const override;

private:
    ModelMetadata meta_;
    std::vector<std::vector<double>> weights_;
    std::vector<double> bias_;
};

/// Exact lookup from instance value tuples to logits, with a default for misses.
class TableModel final : public Model {
public:
    struct Entry {
        Instance x;
        LogitVector logits;
    };

    /// `default_logits` empty means all zeros (uniform prediction).
    TableModel(std::size_t features, std::size_t classes, std::vector<Entry> entries,
               LogitVector default_logits = {}, std::string name = "table");

    const ModelMetadata& metadata() const override { return meta_; }
    std::size_t entry_count() const noexcept { return keys_.size() / std::max<std::size_t>(meta_.features, 1); }
    const LogitVector& default_logits() const noexcept { return default_; }

    /// {"features": d, "classes": K, "entries": [{"x": [...], "logits": [...]}], "default": [...]}
    static TableModel from_json(const nlohmann::json& j, std::string name = "table");

protected:
    std::vector<LogitVector> evaluate(std::span<const Instance> batch) const override;

private:
    ModelMetadata meta_;
    // Row-major keys sorted lexicographically; row r of `logits_` belongs to key r.
    std::vector<double> keys_;
    std::vector<double> logits_;
    LogitVector default_;
};

/// Wrapped logits c·z(x) + offset; manufactures over/under-confidence.
class MiscalibrationWrapper final : public Model {
public:
    MiscalibrationWrapper(ModelHandle inner, double scale, std::vector<double> offset = {});

    const ModelMetadata& metadata() const override { return meta_; }
    double scale() const noexcept { return scale_; }
    const std::vector<double>& offset() const noexcept { return offset_; }

protected:
    std::vector<LogitVector> evaluate(std::span<const Instance> batch) const override;

private:
    ModelHandle inner_;
    ModelMetadata meta_;
    double scale_;
    std::vector<double> offset_;
};

std::shared_ptr<LinearSoftmaxModel> load_linear_model(const std::filesystem::path& path);
std::shared_ptr<TableModel> load_table_model(const std::filesystem::path& path);

}  // namespace recalx
