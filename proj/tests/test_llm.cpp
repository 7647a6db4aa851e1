#include <doctest.h>

#include <atomic>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "gradelab/errors.hpp"
#include "gradelab/llm.hpp"
#include "gradelab/rng.hpp"
#include "test_support.hpp"

using namespace gradelab;
using nlohmann::json;
namespace ts = testsupport;

namespace {

TaskEnvelope grade_envelope(const std::vector<std::string>& ids, int version = 0) {
    TaskEnvelope e;
    e.task = TaskKind::grade;
    e.question_id = "q1";
    e.rubric_version = version;
    e.answer_ids = ids;
    return e;
}

}  // namespace

TEST_CASE("envelope digest and embedding round-trip") {
    TaskEnvelope e = grade_envelope({"a01", "a02"});
    e.params["seed"] = 42;
    CHECK(envelope_digest(e) == envelope_digest(e));

    TaskEnvelope other = e;
    other.params["seed"] = 43;
    CHECK(envelope_digest(other) != envelope_digest(e));

    const PromptBundle bundle = make_bundle("system", {"please grade"}, e, 0.0, 256);
    REQUIRE(bundle.user_messages.size() == 1);
    const auto extracted = extract_envelope(bundle.user_messages.back());
    REQUIRE(extracted.has_value());
    CHECK(*extracted == e);
    CHECK(envelope_from_json(envelope_to_json(e)) == e);
}

TEST_CASE("parse_structured accepts prose plus fenced block") {
    const std::string text =
        "The grading went well overall.\n\n```json\n"
        R"({"scores":[{"answer_id":"a1","score":11,"feedback":"solid"}]})"
        "\n```\nThanks!";
    const ParsedReply reply = parse_structured(text, ReplySchema::grade, 15.0);
    REQUIRE(reply.scores.size() == 1);
    CHECK(reply.scores.front().answer_id == "a1");
    CHECK(reply.scores.front().score == 11.0);
    CHECK(reply.scores.front().feedback == "solid");
}

TEST_CASE("parse_structured takes the first valid block") {
    const std::string two_valid =
        "```json\n{\"scores\":[{\"answer_id\":\"a1\",\"score\":3}]}\n```\n"
        "```json\n{\"scores\":[{\"answer_id\":\"a1\",\"score\":9}]}\n```\n";
    CHECK(parse_structured(two_valid, ReplySchema::grade, 15.0).scores.front().score == 3.0);

    const std::string first_broken =
        "```json\n{broken\n```\n"
        "```json\n{\"scores\":[{\"answer_id\":\"a1\",\"score\":9}]}\n```\n";
    CHECK(parse_structured(first_broken, ReplySchema::grade, 15.0).scores.front().score == 9.0);

    // wrong-shape block is skipped, not fatal
    const std::string wrong_shape_first =
        "```json\n{\"flags\":[]}\n```\n"
        "```json\n{\"scores\":[{\"answer_id\":\"a1\",\"score\":4}]}\n```\n";
    CHECK(parse_structured(wrong_shape_first, ReplySchema::grade, 15.0).scores.front().score ==
          4.0);
}

TEST_CASE("parse_structured range and schema errors") {
    CHECK_THROWS_AS(parse_structured(ts::grade_reply_json({{"a1", 99.0}}), ReplySchema::grade,
                                     15.0),
                    ParseError);
    CHECK_THROWS_AS(parse_structured("no json here at all", ReplySchema::grade, 15.0),
                    ParseError);
    CHECK_THROWS_AS(parse_structured("```json\n{\"flags\":[{\"answer_id\":\"a1\","
                                     "\"reason\":\"bogus\"}]}\n```",
                                     ReplySchema::review, 15.0),
                    ParseError);
    // bare JSON without fences still parses
    CHECK(parse_structured(R"({"scores":[{"answer_id":"a1","score":7}]})", ReplySchema::grade,
                           15.0)
              .scores.front()
              .score == 7.0);
    // review flags parse with reasons
    const ParsedReply r = parse_structured(
        ts::review_reply_json({{"a2", "inconsistency"}}), ReplySchema::review, 15.0);
    REQUIRE(r.flags.size() == 1);
    CHECK(r.flags.front().reason == "inconsistency");
}

TEST_CASE("parse_structured never crashes on arbitrary input") {
    auto rng = seeded_rng(12345);
    const std::string alphabet = "{}[]\"`json:,0123456789.aeXY \n";
    for (int i = 0; i < 500; ++i) {
        std::string text;
        const std::size_t len = uniform_below(rng, 200);
        for (std::size_t j = 0; j < len; ++j) {
            text += alphabet[uniform_below(rng, alphabet.size())];
        }
        try {
            parse_structured(text, i % 2 ? ReplySchema::grade : ReplySchema::review, 15.0);
        } catch (const ParseError&) {
            // the only acceptable failure mode
        }
    }
    CHECK(true);
}

TEST_CASE("scripted backend replays queued replies") {
    ScriptedBackend backend;
    const TaskEnvelope e = grade_envelope({"a01"});
    backend.enqueue(e, "X");
    backend.enqueue(e, "Y");

    const PromptBundle bundle = make_bundle("s", {"u"}, e, 0.0, 64);
    CHECK(backend.complete(bundle).text == "X");
    CHECK(backend.complete(bundle).text == "Y");
    CHECK_THROWS_AS(backend.complete(bundle), BackendError);
    CHECK(backend.call_log().size() == 3);
}

TEST_CASE("scripted backend loads fixtures") {
    ts::TempDir tmp;
    const TaskEnvelope e = grade_envelope({"a01"});
    ts::write_file(tmp.path() / "fx.jsonl",
                   json{{"envelope_digest", envelope_digest(e)}, {"reply_text", "canned"}}.dump() +
                       "\n");
    BackendConfig config;
    config.kind = BackendKind::scripted;
    config.fixture_path = (tmp.path() / "fx.jsonl").string();
    const auto backend = make_backend(config);
    CHECK(backend->complete(make_bundle("s", {"u"}, e, 0.0, 64)).text == "canned");
    CHECK(backend->offline());
    CHECK(backend->network_attempts() == 0);
}

TEST_CASE("recording backend captures replayable fixtures") {
    const Corpus corpus = ts::make_corpus({11.0});
    ts::TempDir tmp;
    BackendConfig config;
    config.kind = BackendKind::simulated;
    config.record_path = (tmp.path() / "rec.jsonl").string();
    const auto recorder = make_backend(config, &corpus);

    const PromptBundle bundle = make_bundle("s", {"u"}, grade_envelope({"a01"}), 0.0, 64);
    const std::string live = recorder->complete(bundle).text;

    BackendConfig replay;
    replay.kind = BackendKind::scripted;
    replay.fixture_path = (tmp.path() / "rec.jsonl").string();
    CHECK(make_backend(replay)->complete(bundle).text == live);
}

TEST_CASE("simulated grade equals the oracle at zero noise") {
    const Corpus corpus = ts::make_corpus({11.0, 7.0});
    const std::string reply = simulated_reply(grade_envelope({"a01", "a02"}), corpus, 5, 0.0);
    const ParsedReply parsed = parse_structured(reply, ReplySchema::grade, 15.0);
    REQUIRE(parsed.scores.size() == 2);
    CHECK(parsed.scores[0].score == 11.0);
    CHECK(parsed.scores[1].score == 7.0);

    // pure function of (seed, envelope)
    CHECK(simulated_reply(grade_envelope({"a01", "a02"}), corpus, 5, 0.0) == reply);
}

TEST_CASE("simulated grades are order-independent and rounded") {
    const Corpus corpus = ts::make_corpus({11.0, 7.0, 3.0});
    const double sigma = 2.0;
    const std::string forward =
        simulated_reply(grade_envelope({"a01", "a02", "a03"}), corpus, 5, sigma);
    const ParsedReply fwd = parse_structured(forward, ReplySchema::grade, 15.0);
    // single-answer envelopes see the same per-answer draws
    for (const auto& s : fwd.scores) {
        const ParsedReply solo = parse_structured(
            simulated_reply(grade_envelope({s.answer_id}), corpus, 5, sigma), ReplySchema::grade,
            15.0);
        CHECK(solo.scores.front().score == s.score);
        CHECK(s.score == std::floor(s.score));  // integral after round-half-up
    }
}

TEST_CASE("simulated review applies the deviation threshold") {
    const Corpus corpus = ts::make_corpus({3.5, 8.0});
    TaskEnvelope e;
    e.task = TaskKind::review;
    e.question_id = "q1";
    e.answer_ids = {"a01", "a02"};
    e.params["scores"] = json{{"a01", 14.5}, {"a02", 8.0}};

    // |14.5 - 3.5| = 11 > max(2*1, 0.25*15) = 3.75 -> flagged; a02 is exact
    const ParsedReply parsed =
        parse_structured(simulated_reply(e, corpus, 5, 1.0), ReplySchema::review, 15.0);
    REQUIRE(parsed.flags.size() == 1);
    CHECK(parsed.flags.front().answer_id == "a01");
    CHECK(parsed.flags.front().reason == "rubric_deviation");

    // just inside the threshold: |7.2 - 8.0| = 0.8 < 3.75
    e.params["scores"] = json{{"a01", 3.5}, {"a02", 7.2}};
    CHECK(parse_structured(simulated_reply(e, corpus, 5, 1.0), ReplySchema::review, 15.0)
              .flags.empty());
}

TEST_CASE("simulated rubric refinement appends an iteration marker") {
    const Corpus corpus = ts::make_corpus({11.0});
    TaskEnvelope e;
    e.task = TaskKind::generate_rubric;
    e.question_id = "q1";
    e.rubric_version = 1;
    e.answer_ids = {"a01"};
    e.params["iteration"] = 2;
    e.params["rubric_body"] = "BODY";
    const std::string reply = simulated_reply(e, corpus, 5, 0.0);
    CHECK(reply == "BODY\n\n[iteration 2 refinement]");
    CHECK(simulated_reply(e, corpus, 5, 0.0) == reply);
}

TEST_CASE("simulated backend requires an oracle") {
    BackendConfig config;
    config.kind = BackendKind::simulated;
    CHECK_THROWS_AS(make_backend(config, nullptr), ValidationError);
}

namespace {

struct StubServer {
    httplib::Server server;
    int port = 0;
    std::thread thread;
    std::atomic<int> hits{0};

    ~StubServer() {
        server.stop();
        if (thread.joinable()) thread.join();
    }

    void start() {
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }

    std::string url() const { return "http://127.0.0.1:" + std::to_string(port) + "/v1"; }
};

json chat_completion(const std::string& content) {
    return {{"id", "cmpl-1"},
            {"model", "stub-model"},
            {"choices", json::array({{{"index", 0},
                                      {"message", {{"role", "assistant"}, {"content", content}}},
                                      {"finish_reason", "stop"}}})},
            {"usage", {{"prompt_tokens", 12}, {"completion_tokens", 5}}}};
}

BackendConfig stub_config(const StubServer& stub, int retries = 2) {
    BackendConfig config;
    config.kind = BackendKind::openai_compatible;
    config.base_url = stub.url();
    config.model = "stub-model";
    config.api_key_env = "GRADELAB_TEST_KEY";
    config.retries = retries;
    config.backoff_ms = 1;
    return config;
}

}  // namespace

TEST_CASE("openai client sends a conformant request") {
    setenv("GRADELAB_TEST_KEY", "sk-test-123", 1);
    StubServer stub;
    json seen_body;
    std::string seen_auth;
    std::string seen_path;
    stub.server.Post("/v1/chat/completions",
                     [&](const httplib::Request& req, httplib::Response& res) {
                         ++stub.hits;
                         seen_body = json::parse(req.body);
                         seen_auth = req.get_header_value("Authorization");
                         seen_path = req.path;
                         res.set_content(chat_completion("stub says hi").dump(),
                                         "application/json");
                     });
    stub.start();

    const auto backend = make_backend(stub_config(stub));
    TaskEnvelope e = grade_envelope({"a01"});
    const PromptBundle bundle = make_bundle("be strict", {"grade this"}, e, 0.25, 333);
    const LlmResponse res = backend->complete(bundle);

    CHECK(res.text == "stub says hi");
    CHECK(res.model == "stub-model");
    CHECK(res.prompt_tokens == 12);
    CHECK(stub.hits == 1);
    CHECK(backend->network_attempts() == 1);

    CHECK(seen_path == "/v1/chat/completions");
    CHECK(seen_auth == "Bearer sk-test-123");
    CHECK(seen_body["model"] == "stub-model");
    CHECK(seen_body["temperature"] == 0.25);
    CHECK(seen_body["max_tokens"] == 333);
    REQUIRE(seen_body["messages"].size() == 2);
    CHECK(seen_body["messages"][0]["role"] == "system");
    CHECK(seen_body["messages"][0]["content"] == "be strict");
    CHECK(seen_body["messages"][1]["role"] == "user");
    const std::string user = seen_body["messages"][1]["content"];
    CHECK(extract_envelope(user).has_value());  // envelope rides along on the wire
}

TEST_CASE("openai client retries transient failures with a budget") {
    setenv("GRADELAB_TEST_KEY", "sk-test-123", 1);
    StubServer stub;
    stub.server.Post("/v1/chat/completions",
                     [&](const httplib::Request&, httplib::Response& res) {
                         ++stub.hits;
                         res.status = 503;
                         res.set_content("overloaded", "text/plain");
                     });
    stub.start();

    const auto backend = make_backend(stub_config(stub, 3));
    const PromptBundle bundle = make_bundle("s", {"u"}, grade_envelope({"a01"}), 0.0, 64);
    CHECK_THROWS_AS(backend->complete(bundle), BackendError);
    CHECK(stub.hits == 4);  // first attempt + exactly `retries` retries
    CHECK(backend->network_attempts() == 4);
}

TEST_CASE("openai client recovers when a retry succeeds") {
    setenv("GRADELAB_TEST_KEY", "sk-test-123", 1);
    StubServer stub;
    stub.server.Post("/v1/chat/completions",
                     [&](const httplib::Request&, httplib::Response& res) {
                         if (++stub.hits < 3) {
                             res.status = 503;
                             res.set_content("overloaded", "text/plain");
                         } else {
                             res.set_content(chat_completion("eventually").dump(),
                                             "application/json");
                         }
                     });
    stub.start();
    const auto backend = make_backend(stub_config(stub, 3));
    CHECK(backend->complete(make_bundle("s", {"u"}, grade_envelope({"a01"}), 0.0, 64)).text ==
          "eventually");
    CHECK(stub.hits == 3);
}

TEST_CASE("openai client never retries auth failures") {
    setenv("GRADELAB_TEST_KEY", "sk-bad", 1);
    StubServer stub;
    stub.server.Post("/v1/chat/completions",
                     [&](const httplib::Request&, httplib::Response& res) {
                         ++stub.hits;
                         res.status = 401;
                         res.set_content("{\"error\":\"invalid key\"}", "application/json");
                     });
    stub.start();

    const auto backend = make_backend(stub_config(stub, 5));
    try {
        backend->complete(make_bundle("s", {"u"}, grade_envelope({"a01"}), 0.0, 64));
        FAIL("expected an auth error");
    } catch (const BackendError& e) {
        CHECK(e.kind == BackendError::Kind::auth);
    }
    CHECK(stub.hits == 1);
}

TEST_CASE("openai client surfaces context-length errors distinctly") {
    setenv("GRADELAB_TEST_KEY", "sk-test-123", 1);
    StubServer stub;
    stub.server.Post("/v1/chat/completions",
                     [&](const httplib::Request&, httplib::Response& res) {
                         ++stub.hits;
                         res.status = 400;
                         res.set_content(
                             "{\"error\":{\"code\":\"context_length_exceeded\"}}",
                             "application/json");
                     });
    stub.start();
    const auto backend = make_backend(stub_config(stub, 5));
    CHECK_THROWS_AS(backend->complete(make_bundle("s", {"u"}, grade_envelope({"a01"}), 0.0, 64)),
                    ContextBudgetError);
    CHECK(stub.hits == 1);
}

TEST_CASE("openai client requires the api key variable") {
    unsetenv("GRADELAB_MISSING_KEY");
    BackendConfig config;
    config.kind = BackendKind::openai_compatible;
    config.base_url = "http://127.0.0.1:9";
    config.api_key_env = "GRADELAB_MISSING_KEY";
    const auto backend = make_backend(config);
    try {
        backend->complete(make_bundle("s", {"u"}, grade_envelope({"a01"}), 0.0, 64));
        FAIL("expected an auth error");
    } catch (const BackendError& e) {
        CHECK(e.kind == BackendError::Kind::auth);
    }
    CHECK(backend->network_attempts() == 0);

    BackendConfig no_url;
    no_url.kind = BackendKind::openai_compatible;
    CHECK_THROWS_AS(make_backend(no_url), ValidationError);
}

TEST_CASE("request_structured re-asks once then fails") {
    ScriptedBackend backend;
    const TaskEnvelope e = grade_envelope({"a01"});
    backend.enqueue(e, "garbage");
    backend.enqueue(e, ts::grade_reply_json({{"a01", 9.0}}));
    const PromptBundle bundle = make_bundle("s", {"u"}, e, 0.0, 64);

    const StructuredReply ok = request_structured(backend, bundle, ReplySchema::grade, 15.0);
    CHECK(ok.parsed.scores.front().score == 9.0);
    CHECK(backend.call_log().size() == 2);

    // two bad replies exhaust the re-ask budget
    backend.enqueue(e, "still garbage");
    backend.enqueue(e, "more garbage");
    CHECK_THROWS_AS(request_structured(backend, bundle, ReplySchema::grade, 15.0), ParseError);
    CHECK(backend.call_log().size() == 4);
}
