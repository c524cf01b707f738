#include "recalx/external_model.hpp"

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstring>
#include <exception>
#include <iterator>
#include <thread>

#include <poll.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "recalx/error.hpp"
#include "recalx/random.hpp"

namespace recalx {
namespace {

using Clock = std::chrono::steady_clock;

Clock::time_point deadline_after(double seconds) {
    return Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(seconds));
}

int remaining_ms(Clock::time_point deadline) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
    return left <= 0 ? 0 : static_cast<int>(std::min<long long>(left, 1 << 30));
}

std::string errno_text(const char* what) {
    return std::string(what) + ": " + std::strerror(errno);
}

}  // namespace

ModelProcess::ModelProcess(const std::string& command) {
    int sv[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0) {
        throw TransportError(errno_text("socketpair"));
    }
    pid_ = ::fork();
    if (pid_ < 0) {
        ::close(sv[0]);
        ::close(sv[1]);
        throw TransportError(errno_text("fork"));
    }
    if (pid_ == 0) {
        // dup2 clears close-on-exec on the new descriptors.
        ::dup2(sv[1], STDIN_FILENO);
        ::dup2(sv[1], STDOUT_FILENO);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(sv[1]);
    fd_ = sv[0];
}

ModelProcess::~ModelProcess() {
    if (!exited_) {
        kill();
    }
    if (fd_ >= 0) {
        ::close(fd_);
    }
}

void ModelProcess::write_line(const std::string& line, double timeout_seconds) {
    const std::string payload = line + "\n";
    const auto deadline = deadline_after(timeout_seconds);
    std::size_t sent = 0;
    while (sent < payload.size()) {
        pollfd pfd{fd_, POLLOUT, 0};
        const int ready = ::poll(&pfd, 1, remaining_ms(deadline));
        if (ready < 0) {
            if (errno == EINTR) {
                continue;
            }
            throw TransportError(errno_text("poll"));
        }
        if (ready == 0) {
            throw TimeoutError("timed out writing to model process");
        }
        const ssize_t n = ::send(fd_, payload.data() + sent, payload.size() - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) {
                continue;
            }
            throw TransportError(errno_text("write to model process"));
        }
        sent += static_cast<std::size_t>(n);
    }
}

std::string ModelProcess::read_line(double timeout_seconds) {
    const auto deadline = deadline_after(timeout_seconds);
    for (;;) {
        const auto newline = buffer_.find('\n');
        if (newline != std::string::npos) {
            std::string line = buffer_.substr(0, newline);
            buffer_.erase(0, newline + 1);
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            return line;
        }
        pollfd pfd{fd_, POLLIN, 0};
        const int ready = ::poll(&pfd, 1, remaining_ms(deadline));
        if (ready < 0) {
            if (errno == EINTR) {
                continue;
            }
            throw TransportError(errno_text("poll"));
        }
        if (ready == 0) {
            throw TimeoutError("no reply from model process within " + std::to_string(timeout_seconds) + " s");
        }
        char chunk[65536];
        const ssize_t n = ::recv(fd_, chunk, sizeof(chunk), 0);
        if (n < 0) {
            if (errno == EINTR || errno == EAGAIN) {
                continue;
            }
            throw TransportError(errno_text("read from model process"));
        }
        if (n == 0) {
            throw TransportError("model process closed its output");
        }
        buffer_.append(chunk, static_cast<std::size_t>(n));
    }
}

std::optional<int> ModelProcess::wait_exit(double timeout_seconds) {
    if (exited_) {
        return exit_status_;
    }
    const auto deadline = deadline_after(timeout_seconds);
    for (;;) {
        int status = 0;
        const pid_t r = ::waitpid(pid_, &status, WNOHANG);
        if (r == pid_) {
            exited_ = true;
            exit_status_ = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
            return exit_status_;
        }
        if (r < 0 && errno != EINTR) {
            exited_ = true;
            return exit_status_;
        }
        if (Clock::now() >= deadline) {
            return std::nullopt;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
}

void ModelProcess::kill() {
    if (exited_ || pid_ <= 0) {
        return;
    }
    ::kill(pid_, SIGKILL);
    int status = 0;
    while (::waitpid(pid_, &status, 0) < 0 && errno == EINTR) {
    }
    exited_ = true;
    exit_status_ = -1;
}

// ---------------------------------------------------------------------------

namespace protocol {

std::string hello_request() {
    return R"({"op":"hello"})";
}

std::string shutdown_request() {
    return R"({"op":"shutdown"})";
}

std::string logits_request(std::uint64_t id, std::span<const Instance> batch) {
    nlohmann::json j;
    j["op"] = "logits";
    j["id"] = id;
    j["batch"] = nlohmann::json::array();
    for (const auto& x : batch) {
        j["batch"].push_back(x);
    }
    return j.dump();
}

namespace {

nlohmann::json parse_reply(const std::string& line, std::optional<std::uint64_t> id) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
        throw ProtocolError("malformed reply (not JSON): " + line.substr(0, 200), id);
    }
    if (!j.is_object()) {
        throw ProtocolError("malformed reply (not a JSON object)", id);
    }
    if (j.contains("error")) {
        throw ProtocolError("adapter reported error: " + j["error"].dump(), id);
    }
    return j;
}

}  // namespace

ModelMetadata parse_hello_reply(const std::string& line) {
    const auto j = parse_reply(line, std::nullopt);
    for (const char* field : {"name", "features", "classes"}) {
        if (!j.contains(field)) {
            throw ProtocolError(std::string("missing field `") + field + "` in hello reply");
        }
    }
    if (!j["name"].is_string()) {
        throw ProtocolError("hello reply field `name` must be a string");
    }
    if (!j["features"].is_number_integer() || !j["classes"].is_number_integer()) {
        throw ProtocolError("hello reply fields `features` and `classes` must be integers");
    }
    const auto d = j["features"].get<long long>();
    const auto k = j["classes"].get<long long>();
    if (d < 1) {
        throw ProtocolError("hello reply declares features=" + std::to_string(d) + " (must be >= 1)");
    }
    if (k < 2) {
        throw ProtocolError("hello reply declares classes=" + std::to_string(k) + " (must be >= 2)");
    }
    return {j["name"].get<std::string>(), static_cast<std::size_t>(d), static_cast<std::size_t>(k)};
}

std::vector<LogitVector> parse_logits_reply(const std::string& line, std::uint64_t expected_id,
                                            std::size_t expected_rows, std::size_t classes) {
    const auto j = parse_reply(line, expected_id);
    if (!j.contains("id")) {
        throw ProtocolError("missing field `id` in logits reply", expected_id);
    }
    if (!j["id"].is_number_integer() || j["id"].get<long long>() < 0 ||
        j["id"].get<std::uint64_t>() != expected_id) {
        throw ProtocolError("id mismatch: expected " + std::to_string(expected_id) + ", got " + j["id"].dump(),
                            expected_id);
    }
    if (!j.contains("logits")) {
        throw ProtocolError("missing field `logits` in logits reply", expected_id);
    }
    const auto& rows = j["logits"];
    if (!rows.is_array() || rows.size() != expected_rows) {
        throw ProtocolError("logits reply must hold " + std::to_string(expected_rows) + " rows", expected_id);
    }
    std::vector<LogitVector> out;
    out.reserve(expected_rows);
    for (const auto& row : rows) {
        if (!row.is_array() || row.size() != classes) {
            throw ProtocolError("logits row must hold " + std::to_string(classes) + " numbers", expected_id);
        }
        LogitVector z;
        z.reserve(classes);
        for (const auto& v : row) {
            if (!v.is_number()) {
                throw ProtocolError("logits row contains a non-number", expected_id);
            }
            z.push_back(v.get<double>());
        }
        if (!all_finite(z)) {
            throw ProtocolError("logits row contains non-finite values", expected_id);
        }
        out.push_back(std::move(z));
    }
    return out;
}

}  // namespace protocol

ModelMetadata handshake(ModelProcess& process, double timeout_seconds) {
    process.write_line(protocol::hello_request(), timeout_seconds);
    return protocol::parse_hello_reply(process.read_line(timeout_seconds));
}

// ---------------------------------------------------------------------------

ExternalModelClient::ExternalModelClient(ExternalModelOptions options) : options_(std::move(options)) {
    if (options_.command.empty()) {
        throw InvalidInput("external model needs a launch command");
    }
    if (options_.workers < 1 || options_.max_batch < 1 || !(options_.timeout_seconds > 0.0)) {
        throw InvalidInput("external model needs workers >= 1, max_batch >= 1 and a positive timeout");
    }
    for (std::size_t w = 0; w < options_.workers; ++w) {
        auto worker = std::make_unique<Worker>();
        worker->process = std::make_unique<ModelProcess>(options_.command);
        const auto meta = handshake(*worker->process, options_.timeout_seconds);
        if (w == 0) {
            meta_ = meta;
        } else if (meta.features != meta_.features || meta.classes != meta_.classes) {
            throw ProtocolError("worker " + std::to_string(w) + " declared different dimensions");
        }
        workers_.push_back(std::move(worker));
    }
}

ExternalModelClient::~ExternalModelClient() {
    try {
        shutdown();
    } catch (...) {
        // Destructor must not throw; processes are killed by ModelProcess.
    }
}

void ExternalModelClient::shutdown() {
    for (auto& worker : workers_) {
        std::lock_guard lock(worker->mutex);
        auto& process = *worker->process;
        if (!process.running()) {
            continue;
        }
        try {
            process.write_line(protocol::shutdown_request(), 2.0);
        } catch (const TransportError&) {
        }
        if (!process.wait_exit(2.0)) {
            process.kill();
        }
        worker->broken = true;
    }
}

std::vector<LogitVector> ExternalModelClient::request(Worker& worker, std::span<const Instance> chunk) const {
    std::lock_guard lock(worker.mutex);
    const std::uint64_t id = next_id_.fetch_add(1);
    if (worker.broken) {
        throw TransportError("model worker is unavailable after an earlier failure", id);
    }
    try {
        worker.process->write_line(protocol::logits_request(id, chunk), options_.timeout_seconds);
        return protocol::parse_logits_reply(worker.process->read_line(options_.timeout_seconds), id, chunk.size(),
                                            meta_.classes);
    } catch (const ProtocolError&) {
        worker.broken = true;
        throw;
    } catch (const TransportError& e) {
        // The stream may be out of step with our request ids; never reuse it.
        worker.broken = true;
        worker.process->kill();
        if (e.request_id()) {
            throw;
        }
        if (dynamic_cast<const TimeoutError*>(&e)) {
            throw TimeoutError(e.message(), id);
        }
        throw TransportError(e.message(), id);
    }
}

std::vector<LogitVector> ExternalModelClient::evaluate(std::span<const Instance> batch) const {
    const std::size_t chunk_size = options_.max_batch;
    const std::size_t chunks = (batch.size() + chunk_size - 1) / chunk_size;
    std::vector<std::vector<LogitVector>> results(chunks);
    std::vector<std::exception_ptr> errors(chunks);

    auto run_worker = [&](std::size_t w) {
        for (std::size_t c = w; c < chunks; c += workers_.size()) {
            const std::size_t first = c * chunk_size;
            const std::size_t count = std::min(chunk_size, batch.size() - first);
            try {
                results[c] = request(*workers_[w], batch.subspan(first, count));
            } catch (...) {
                errors[c] = std::current_exception();
                return;
            }
        }
    };

    const std::size_t active = std::min(workers_.size(), chunks);
    if (active <= 1) {
        run_worker(0);
    } else {
        std::vector<std::jthread> threads;
        threads.reserve(active);
        for (std::size_t w = 0; w < active; ++w) {
            threads.emplace_back(run_worker, w);
        }
    }
    for (const auto& err : errors) {
        if (err) {
            std::rethrow_exception(err);
        }
    }
    std::vector<LogitVector> out;
    out.reserve(batch.size());
    for (auto& r : results) {
        std::move(r.begin(), r.end(), std::back_inserter(out));
    }
    return out;
}

// ---------------------------------------------------------------------------

bool ConformanceReport::passed() const {
    return !checks.empty() &&
           std::all_of(checks.begin(), checks.end(), [](const ConformanceCheck& c) { return c.passed; });
}

ConformanceReport run_model_check(const std::string& command, const ConformanceOptions& options) {
    ConformanceReport report;
    report.command = command;
    auto& checks = report.checks;
    const double timeout = options.timeout_seconds;
    std::size_t reply_line = 0;

    auto fail_detail = [&](const std::exception& e) {
        return "reply line " + std::to_string(reply_line) + ": " + e.what();
    };

    std::unique_ptr<ModelProcess> process;
    try {
        process = std::make_unique<ModelProcess>(command);
    } catch (const std::exception& e) {
        checks.push_back({"launch", false, e.what()});
        return report;
    }
    checks.push_back({"launch", true, "process started"});

    ModelMetadata meta;
    try {
        process->write_line(protocol::hello_request(), timeout);
        ++reply_line;
        meta = protocol::parse_hello_reply(process->read_line(timeout));
        checks.push_back({"hello", true,
                          "name=" + meta.name + " features=" + std::to_string(meta.features) +
                              " classes=" + std::to_string(meta.classes)});
    } catch (const std::exception& e) {
        checks.push_back({"hello", false, fail_detail(e)});
        return report;
    }

    Rng rng = derive_rng(SeedSpec(options.seed), "model-check", 0);
    auto random_batch = [&](std::size_t n) {
        std::vector<Instance> batch(n, Instance(meta.features));
        for (auto& x : batch) {
            for (double& v : x) {
                v = rng.uniform(-2.0, 2.0);
            }
        }
        return batch;
    };

    std::uint64_t next_id = 1;
    auto logits_round_trip = [&](std::span<const Instance> batch) {
        const std::uint64_t id = next_id++;
        process->write_line(protocol::logits_request(id, batch), timeout);
        ++reply_line;
        return protocol::parse_logits_reply(process->read_line(timeout), id, batch.size(), meta.classes);
    };

    bool stream_ok = true;
    try {
        const auto batch = random_batch(8);
        logits_round_trip(batch);
        checks.push_back({"logits", true, "8 instances"});
    } catch (const std::exception& e) {
        checks.push_back({"logits", false, fail_detail(e)});
        stream_ok = false;
    }

    if (stream_ok && options.reference) {
        const auto& ref = *options.reference;
        if (ref.metadata().features != meta.features || ref.metadata().classes != meta.classes) {
            checks.push_back({"agreement", false, "reference model dimensions differ from hello"});
        } else {
            try {
                const auto batch = random_batch(options.agreement_instances);
                std::vector<LogitVector> remote;
                for (std::size_t first = 0; first < batch.size(); first += 250) {
                    const std::size_t count = std::min<std::size_t>(250, batch.size() - first);
                    auto part = logits_round_trip(std::span<const Instance>(batch).subspan(first, count));
                    std::move(part.begin(), part.end(), std::back_inserter(remote));
                }
                const auto local = ref.eval_logits(batch);
                double worst = 0.0;
                for (std::size_t i = 0; i < local.size(); ++i) {
                    for (std::size_t k = 0; k < meta.classes; ++k) {
                        worst = std::max(worst, std::abs(local[i][k] - remote[i][k]));
                    }
                }
                checks.push_back({"agreement", worst <= options.agreement_tolerance,
                                  "max |Δlogit| = " + format_double(worst) + " over " +
                                      std::to_string(batch.size()) + " instances"});
            } catch (const std::exception& e) {
                checks.push_back({"agreement", false, fail_detail(e)});
                stream_ok = false;
            }
        }
    }

    if (stream_ok) {
        try {
            process->write_line("this is not json", timeout);
            ++reply_line;
            const std::string reply = process->read_line(timeout);
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(reply);
            } catch (const nlohmann::json::parse_error&) {
            }
            if (!j.is_object() || !j.contains("error")) {
                checks.push_back({"malformed-input", false,
                                  "reply line " + std::to_string(reply_line) + ": expected an error object"});
            } else {
                logits_round_trip(random_batch(2));
                checks.push_back({"malformed-input", true, "error reply, session survived"});
            }
        } catch (const std::exception& e) {
            checks.push_back({"malformed-input", false, fail_detail(e)});
            stream_ok = false;
        }
    }

    try {
        process->write_line(protocol::shutdown_request(), timeout);
        const auto status = process->wait_exit(timeout);
        if (!status) {
            checks.push_back({"shutdown", false, "process still running after shutdown"});
            process->kill();
        } else {
            checks.push_back({"shutdown", *status == 0, "exit status " + std::to_string(*status)});
        }
    } catch (const std::exception& e) {
        checks.push_back({"shutdown", false, e.what()});
    }
    return report;
}

}  // namespace recalx
