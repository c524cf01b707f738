#include <doctest.h>

#include <filesystem>

#include "recalx/error.hpp"
#include "recalx/external_model.hpp"
#include "recalx/io.hpp"
#include "recalx/random.hpp"

using namespace recalx;

namespace {

std::shared_ptr<LinearSoftmaxModel> reference_model() {
    return std::make_shared<LinearSoftmaxModel>(
        std::vector<std::vector<double>>{{0.25, -1.5, 2.0}, {1.0, 0.0, -0.75}, {-0.1, 0.3, 0.6}},
        std::vector<double>{0.0, 0.5, -0.5});
}

std::string adapter_command(const std::string& mode) {
    static const auto weights = [] {
        const auto path = std::filesystem::temp_directory_path() / "recalx_external_test" / "weights.json";
        write_text_file(path, reference_model()->to_json().dump());
        return path;
    }();
    return std::string(RECALX_FAKE_ADAPTER) + " " + mode + " " + weights.string();
}

std::vector<Instance> random_batch(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Instance> out(n, Instance(3));
    for (auto& x : out) {
        for (double& v : x) {
            v = rng.normal();
        }
    }
    return out;
}

}  // namespace

TEST_CASE("protocol message parsing") {
    const auto meta = protocol::parse_hello_reply(R"({"name":"m","features":2,"classes":3})");
    CHECK(meta.features == 2);
    CHECK(meta.classes == 3);
    CHECK_THROWS_AS(protocol::parse_hello_reply(R"({"name":"m","features":2})"), ProtocolError);
    CHECK_THROWS_AS(protocol::parse_hello_reply(R"({"name":"m","features":2,"classes":0})"), ProtocolError);
    CHECK_THROWS_AS(protocol::parse_hello_reply("not json"), ProtocolError);

    const auto z = protocol::parse_logits_reply(R"({"id":4,"logits":[[1,2],[3,4]]})", 4, 2, 2);
    CHECK(z[1] == LogitVector{3.0, 4.0});
    CHECK_THROWS_AS(protocol::parse_logits_reply(R"({"id":5,"logits":[[1,2],[3,4]]})", 4, 2, 2), ProtocolError);
    CHECK_THROWS_AS(protocol::parse_logits_reply(R"({"id":4,"logits":[[1,2]]})", 4, 2, 2), ProtocolError);
    CHECK_THROWS_AS(protocol::parse_logits_reply(R"({"id":4,"logits":[[1],[3,4]]})", 4, 2, 2), ProtocolError);
    CHECK_THROWS_AS(protocol::parse_logits_reply(R"({"id":4,"error":"boom"})", 4, 2, 2), ProtocolError);
}

TEST_CASE("external client agrees with the in-process model") {
    const auto ref = reference_model();
    const auto batch = random_batch(1200, 3);
    const auto expect = ref->eval_logits(batch);
    for (std::size_t workers : {1, 3}) {
        ExternalModelOptions opts;
        opts.command = adapter_command("good");
        opts.workers = workers;
        opts.max_batch = 100;
        opts.timeout_seconds = 10.0;
        ExternalModelClient client(opts);
        CHECK(client.metadata().features == 3);
        CHECK(client.metadata().classes == 3);
        const auto got = client.eval_logits(batch);
        REQUIRE(got.size() == expect.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            for (std::size_t k = 0; k < 3; ++k) {
                CHECK(std::abs(got[i][k] - expect[i][k]) <= 1e-12);
            }
        }
        client.shutdown();
        client.shutdown();
    }
}

TEST_CASE("transport failures surface as typed errors") {
    const auto batch = random_batch(4, 1);

    ExternalModelOptions silent;
    silent.command = adapter_command("silent");
    silent.timeout_seconds = 0.3;
    ExternalModelClient quiet(silent);
    CHECK_THROWS_AS(quiet.eval_logits(batch), TimeoutError);

    ExternalModelOptions crash;
    crash.command = adapter_command("crash");
    crash.timeout_seconds = 5.0;
    ExternalModelClient dying(crash);
    try {
        dying.eval_logits(batch);
        FAIL("expected a transport error");
    } catch (const TransportError& e) {
        CHECK(e.request_id().has_value());
    }

    ExternalModelOptions wrong;
    wrong.command = adapter_command("wrong-id");
    wrong.timeout_seconds = 5.0;
    ExternalModelClient mismatched(wrong);
    CHECK_THROWS_AS(mismatched.eval_logits(batch), ProtocolError);

    ExternalModelOptions missing;
    missing.command = adapter_command("missing-classes");
    missing.timeout_seconds = 5.0;
    CHECK_THROWS_AS(ExternalModelClient{missing}, ProtocolError);
}

TEST_CASE("conformance reports") {
    ConformanceOptions opts;
    opts.timeout_seconds = 5.0;
    opts.reference = reference_model();
    opts.agreement_instances = 200;

    const auto good = run_model_check(adapter_command("good"), opts);
    CHECK(good.passed());
    CHECK(good.checks.size() == 6);

    auto detail_of = [](const ConformanceReport& r, const std::string& name) -> std::pair<bool, std::string> {
        for (const auto& c : r.checks) {
            if (c.name == name) {
                return {c.passed, c.detail};
            }
        }
        return {true, ""};
    };

    const auto wrong = run_model_check(adapter_command("wrong-id"), opts);
    CHECK_FALSE(wrong.passed());
    const auto [logits_ok, logits_detail] = detail_of(wrong, "logits");
    CHECK_FALSE(logits_ok);
    CHECK(logits_detail.find("id mismatch") != std::string::npos);

    const auto missing = run_model_check(adapter_command("missing-classes"), opts);
    CHECK_FALSE(missing.passed());
    const auto [hello_ok, hello_detail] = detail_of(missing, "hello");
    CHECK_FALSE(hello_ok);
    CHECK(hello_detail.find("missing field") != std::string::npos);

    const auto nonzero = run_model_check(adapter_command("exit-nonzero"), opts);
    CHECK_FALSE(detail_of(nonzero, "shutdown").first);

    const auto shape = run_model_check(adapter_command("bad-shape"), opts);
    CHECK_FALSE(detail_of(shape, "logits").first);
}
