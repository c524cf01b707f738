#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <sys/types.h>

#include "recalx/models.hpp"

namespace recalx {

/// A child process started through /bin/sh whose stdin and stdout are one end of
/// a Unix socket pair. Line-oriented I/O with per-call timeouts.
class ModelProcess {
public:
    explicit ModelProcess(const std::string& command);
    ~ModelProcess();

    ModelProcess(const ModelProcess&) = delete;
    ModelProcess& operator=(const ModelProcess&) = delete;

    /// Sends `line` plus a newline. Throws TimeoutError or TransportError.
    void write_line(const std::string& line, double timeout_seconds);
    /// Next line without its newline. Throws TimeoutError, or TransportError on EOF.
    std::string read_line(double timeout_seconds);
    /// Exit status once the child exits (-1 when killed by a signal); nullopt on timeout.
    std::optional<int> wait_exit(double timeout_seconds);
    void kill();

    pid_t pid() const noexcept { return pid_; }
    bool running() const noexcept { return !exited_; }

private:
    pid_t pid_ = -1;
    int fd_ = -1;
    std::string buffer_;
    bool exited_ = false;
    int exit_status_ = -1;
};

namespace protocol {

std::string hello_request();
std::string shutdown_request();
std::string logits_request(std::uint64_t id, std::span<const Instance> batch);

/// Validates {"name":str,"features":int,"classes":int}; throws ProtocolError.
ModelMetadata parse_hello_reply(const std::string& line);
/// Validates {"id":int,"logits":[[num,...],...]} against the pending request.
std::vector<LogitVector> parse_logits_reply(const std::string& line, std::uint64_t expected_id,
                                            std::size_t expected_rows, std::size_t classes);

}  // namespace protocol

/// Sends hello and returns the declared metadata.
ModelMetadata handshake(ModelProcess& process, double timeout_seconds);

struct ExternalModelOptions {
    std::string command;
    double timeout_seconds = 30.0;
    std::size_t workers = 1;
    /// Largest number of instances sent in one logits request.
    std::size_t max_batch = 512;
};

/// Model served by one or more external worker processes speaking the
/// newline-delimited JSON protocol. Each worker has at most one request in
/// flight; large batches are split into chunks spread over the workers.
class ExternalModelClient final : public Model {
public:
    explicit ExternalModelClient(ExternalModelOptions options);
    ~ExternalModelClient() override;

    const ModelMetadata& metadata() const override { return meta_; }
    const ExternalModelOptions& options() const noexcept { return options_; }

    /// Sends shutdown to every worker and reaps them. Idempotent.
    void shutdown();

protected:
    std::vector<LogitVector> evaluate(std::span<const Instance> batch) const override;

private:
    struct Worker {
        std::unique_ptr<ModelProcess> process;
        std::mutex mutex;
        bool broken = false;
    };

    std::vector<LogitVector> request(Worker& worker, std::span<const Instance> chunk) const;

    ExternalModelOptions options_;
    ModelMetadata meta_;
    std::vector<std::unique_ptr<Worker>> workers_;
    mutable std::atomic<std::uint64_t> next_id_{1};
};

/// One line of a protocol conformance run.
struct ConformanceCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

struct ConformanceOptions {
    double timeout_seconds = 10.0;
    /// When set, logits must match this model within `agreement_tolerance`.
    std::shared_ptr<const LinearSoftmaxModel> reference;
    std::size_t agreement_instances = 1000;
    double agreement_tolerance = 1e-9;
    std::uint64_t seed = 0;
};

struct ConformanceReport {
    std::string command;
    std::vector<ConformanceCheck> checks;

    bool passed() const;
};

/// Exercises hello, logits, malformed-input resilience and shutdown against an adapter.
ConformanceReport run_model_check(const std::string& command, const ConformanceOptions& options);

}  // namespace recalx
