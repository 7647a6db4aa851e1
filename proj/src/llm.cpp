#include "gradelab/llm.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "gradelab/errors.hpp"
#include "gradelab/rng.hpp"

namespace gradelab {

using nlohmann::json;

std::string to_string(TaskKind t) {
    switch (t) {
        case TaskKind::generate_rubric: return "generate_rubric";
        case TaskKind::grade: return "grade";
        case TaskKind::review: return "review";
    }
    return "grade";
}

TaskKind task_kind_from_string(const std::string& s) {
    if (s == "generate_rubric") return TaskKind::generate_rubric;
    if (s == "grade") return TaskKind::grade;
    if (s == "review") return TaskKind::review;
    throw ParseError("unknown task kind: " + s);
}

std::string to_string(BackendKind k) {
    switch (k) {
        case BackendKind::openai_compatible: return "openai_compatible";
        case BackendKind::scripted: return "scripted";
        case BackendKind::simulated: return "simulated";
    }
    return "simulated";
}

BackendKind backend_kind_from_string(const std::string& s) {
    if (s == "openai_compatible") return BackendKind::openai_compatible;
    if (s == "scripted") return BackendKind::scripted;
    if (s == "simulated") return BackendKind::simulated;
    throw ValidationError("unknown backend kind: " + s);
}

json envelope_to_json(const TaskEnvelope& e) {
    json params = json::object();
    for (const auto& [k, v] : e.params) params[k] = v;
    return json{{"task", to_string(e.task)},
                {"question_id", e.question_id},
                {"rubric_version", e.rubric_version},
                {"answer_ids", e.answer_ids},
                {"params", params}};
}

TaskEnvelope envelope_from_json(const json& j) {
    TaskEnvelope e;
    e.task = task_kind_from_string(j.at("task").get<std::string>());
    e.question_id = j.at("question_id").get<std::string>();
    e.rubric_version = j.at("rubric_version").get<int>();
    e.answer_ids = j.at("answer_ids").get<std::vector<std::string>>();
    for (const auto& [k, v] : j.at("params").items()) e.params[k] = v;
    return e;
}

std::string envelope_digest(const TaskEnvelope& e) {
    const std::uint64_t h = fnv1a64(envelope_to_json(e).dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {
constexpr const char* kEnvelopeFenceOpen = "```task-envelope\n";
constexpr const char* kEnvelopeFenceClose = "\n```";
}  // namespace

PromptBundle make_bundle(std::string system, std::vector<std::string> user_messages,
                         TaskEnvelope envelope, double temperature, int max_tokens) {
    PromptBundle bundle;
    bundle.system = std::move(system);
    bundle.user_messages = std::move(user_messages);
    bundle.temperature = temperature;
    bundle.max_tokens = max_tokens;

    const std::string block =
        std::string("\n\n") + kEnvelopeFenceOpen + envelope_to_json(envelope).dump() +
        kEnvelopeFenceClose + "\n";
    if (bundle.user_messages.empty()) {
        bundle.user_messages.push_back(block);
    } else {
        bundle.user_messages.back() += block;
    }
    bundle.task_envelope = std::move(envelope);
    return bundle;
}

std::optional<TaskEnvelope> extract_envelope(const std::string& user_message) {
    const auto open = user_message.rfind(kEnvelopeFenceOpen);
    if (open == std::string::npos) return std::nullopt;
    const auto start = open + std::string(kEnvelopeFenceOpen).size();
    const auto close = user_message.find(kEnvelopeFenceClose, start);
    if (close == std::string::npos) return std::nullopt;
    try {
        return envelope_from_json(json::parse(user_message.substr(start, close - start)));
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

json backend_config_to_json(const BackendConfig& c) {
    json j{{"kind", to_string(c.kind)},
           {"model", c.model},
           {"api_key_env", c.api_key_env},
           {"retries", c.retries},
           {"backoff_ms", c.backoff_ms},
           {"seed", c.seed},
           {"noise_sigma", c.noise_sigma}};
    if (c.base_url) j["base_url"] = *c.base_url;
    if (c.fixture_path) j["fixture_path"] = *c.fixture_path;
    if (c.record_path) j["record_path"] = *c.record_path;
    return j;
}

BackendConfig backend_config_from_json(const json& j) {
    BackendConfig c;
    c.kind = backend_kind_from_string(j.value("kind", "simulated"));
    if (j.contains("base_url") && !j["base_url"].is_null()) {
        c.base_url = j["base_url"].get<std::string>();
    }
    c.model = j.value("model", c.model);
    c.api_key_env = j.value("api_key_env", c.api_key_env);
    c.retries = j.value("retries", c.retries);
    c.backoff_ms = j.value("backoff_ms", c.backoff_ms);
    c.seed = j.value("seed", c.seed);
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    if (j.contains("fixture_path")) c.fixture_path = j["fixture_path"].get<std::string>();
    if (j.contains("record_path")) c.record_path = j["record_path"].get<std::string>();
    return c;
}

std::vector<std::string> Backend::call_log() const {
    std::lock_guard lock(log_mutex_);
    return calls_;
}

void Backend::log_call(const std::string& digest) {
    std::lock_guard lock(log_mutex_);
    calls_.push_back(digest);
}

// ---------------------------------------------------------------------------
// scripted

ScriptedBackend::ScriptedBackend(const BackendConfig& config) : model_(config.model) {
    if (config.fixture_path) load_fixture(*config.fixture_path);
}

void ScriptedBackend::enqueue(const TaskEnvelope& envelope, std::string reply) {
    enqueue_digest(envelope_digest(envelope), std::move(reply));
}

void ScriptedBackend::enqueue_digest(const std::string& digest, std::string reply) {
    std::lock_guard lock(mutex_);
    queues_[digest].push_back(std::move(reply));
}

void ScriptedBackend::load_fixture(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open scripted fixture " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            enqueue_digest(j.at("envelope_digest").get<std::string>(),
                           j.at("reply_text").get<std::string>());
        } catch (const json::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

std::size_t ScriptedBackend::pending() const {
    std::lock_guard lock(mutex_);
    std::size_t n = 0;
    for (const auto& [_, q] : queues_) n += q.size();
    return n;
}

LlmResponse ScriptedBackend::complete(const PromptBundle& bundle) {
    const std::string digest = envelope_digest(bundle.task_envelope);
    log_call(digest);
    std::string reply;
    {
        std::lock_guard lock(mutex_);
        auto it = queues_.find(digest);
        if (it == queues_.end() || it->second.empty()) {
            throw BackendError(BackendError::Kind::replay_miss,
                               "no scripted reply for envelope digest " + digest + " (task=" +
                                   to_string(bundle.task_envelope.task) + ", question=" +
                                   bundle.task_envelope.question_id + ")");
        }
        reply = it->second.front();
        it->second.erase(it->second.begin());
    }
    LlmResponse res;
    res.text = std::move(reply);
    res.model = model_;
    res.completion_tokens = static_cast<int>(res.text.size() / 4);
    return res;
}

// ---------------------------------------------------------------------------
// simulated

SimulatedBackend::SimulatedBackend(const BackendConfig& config, const Corpus* oracle)
    : config_(config), oracle_(oracle) {
    if (!oracle_) {
        throw ValidationError("simulated backend requires a corpus oracle");
    }
}

LlmResponse SimulatedBackend::complete(const PromptBundle& bundle) {
    log_call(envelope_digest(bundle.task_envelope));
    LlmResponse res;
    res.text = simulated_reply(bundle.task_envelope, *oracle_, config_.seed, config_.noise_sigma);
    res.model = config_.model;
    res.completion_tokens = static_cast<int>(res.text.size() / 4);
    return res;
}

std::string simulated_reply(const TaskEnvelope& e, const Corpus& oracle, std::uint64_t seed,
                            double sigma) {
    const Question* q = oracle.find_question(e.question_id);
    if (!q) throw ValidationError("simulated backend: unknown question " + e.question_id);

    std::uint64_t envelope_seed = 0;
    if (auto it = e.params.find("seed"); it != e.params.end()) {
        envelope_seed = it->second.get<std::uint64_t>();
    }
    const std::uint64_t base = mix64(seed ^ mix64(envelope_seed));

    auto oracle_final = [&](const std::string& id) {
        const auto final_score = oracle.human_final(id);
        if (!final_score) {
            throw ValidationError("simulated backend: no ground-truth score for answer " + id);
        }
        return *final_score;
    };

    switch (e.task) {
        case TaskKind::grade: {
            json scores = json::array();
            for (const auto& id : e.answer_ids) {
                double noisy = oracle_final(id);
                if (sigma > 0.0) {
                    auto rng = seeded_rng(derive_seed(base, "sim-grade", id));
                    noisy += gaussian(rng) * sigma;
                }
                const double score = std::clamp(std::floor(noisy + 0.5), 0.0, q->full_points);
                scores.push_back({{"answer_id", id},
                                  {"feedback", "answer " + id + " scored against rubric v" +
                                                   std::to_string(e.rubric_version)},
                                  {"score", score}});
            }
            return "Scores for " + std::to_string(e.answer_ids.size()) +
                   " answer(s) follow.\n\n```json\n" + json{{"scores", scores}}.dump() +
                   "\n```\n";
        }
        case TaskKind::review: {
            auto it = e.params.find("scores");
            if (it == e.params.end()) {
                throw ValidationError("review envelope carries no listed scores");
            }
            const double threshold = std::max(2.0 * sigma, 0.25 * q->full_points);
            json flags = json::array();
            for (const auto& id : e.answer_ids) {
                if (!it->second.contains(id)) {
                    throw ValidationError("review envelope lists no score for answer " + id);
                }
                const double listed = it->second[id].get<double>();
                const double expected = oracle_final(id);
                if (std::abs(listed - expected) > threshold) {
                    char detail[96];
                    std::snprintf(detail, sizeof(detail),
                                  "listed score %.2f is far from the rubric-consistent %.2f",
                                  listed, expected);
                    flags.push_back(
                        {{"answer_id", id}, {"detail", detail}, {"reason", "rubric_deviation"}});
                }
            }
            return "Reviewed " + std::to_string(e.answer_ids.size()) +
                   " pair(s).\n\n```json\n" + json{{"flags", flags}}.dump() + "\n```\n";
        }
        case TaskKind::generate_rubric: {
            auto body_it = e.params.find("rubric_body");
            if (body_it == e.params.end()) {
                throw ValidationError("generate_rubric envelope carries no rubric_body");
            }
            int iteration = e.rubric_version + 1;
            if (auto iter_it = e.params.find("iteration"); iter_it != e.params.end()) {
                iteration = iter_it->second.get<int>();
            }
            return body_it->second.get<std::string>() + "\n\n[iteration " +
                   std::to_string(iteration) + " refinement]";
        }
    }
    throw ValidationError("unknown task kind in envelope");
}

// ---------------------------------------------------------------------------
// openai-compatible

namespace {

// scheme://host[:port][/prefix] -> (origin, prefix)
std::pair<std::string, std::string> split_base_url(const std::string& base_url) {
    const auto scheme_end = base_url.find("://");
    if (scheme_end == std::string::npos) {
        throw ValidationError("base_url must include a scheme: " + base_url);
    }
    const auto path_start = base_url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {base_url, ""};
    std::string origin = base_url.substr(0, path_start);
    std::string prefix = base_url.substr(path_start);
    while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
    return {origin, prefix};
}

bool is_transient_status(int status) {
    return status == 408 || status == 429 || (status >= 500 && status < 600);
}

bool mentions_context_length(const std::string& body) {
    return body.find("context_length") != std::string::npos ||
           body.find("maximum context length") != std::string::npos;
}

}  // namespace

OpenAiBackend::OpenAiBackend(const BackendConfig& config) : config_(config) {
    if (!config_.base_url || config_.base_url->empty()) {
        throw ValidationError("openai_compatible backend requires base_url");
    }
    if (config_.api_key_env.empty()) {
        throw ValidationError("openai_compatible backend requires api_key_env");
    }
    std::tie(origin_, path_prefix_) = split_base_url(*config_.base_url);
}

int OpenAiBackend::network_attempts() const {
    std::lock_guard lock(attempts_mutex_);
    return attempts_;
}

LlmResponse OpenAiBackend::complete(const PromptBundle& bundle) {
    log_call(envelope_digest(bundle.task_envelope));

    const char* key = std::getenv(config_.api_key_env.c_str());
    if (!key || !*key) {
        throw BackendError(BackendError::Kind::auth,
                           "environment variable " + config_.api_key_env + " is not set");
    }

    json messages = json::array();
    if (!bundle.system.empty()) {
        messages.push_back({{"role", "system"}, {"content", bundle.system}});
    }
    for (const auto& m : bundle.user_messages) {
        messages.push_back({{"role", "user"}, {"content", m}});
    }
    const std::string body = json{{"model", config_.model},
                                  {"messages", messages},
                                  {"temperature", bundle.temperature},
                                  {"max_tokens", bundle.max_tokens}}
                                 .dump();

    const std::string path = path_prefix_ + "/chat/completions";
    const httplib::Headers headers{{"Authorization", std::string("Bearer ") + key}};

    std::string last_error;
    const auto started = std::chrono::steady_clock::now();
    for (int attempt = 0; attempt <= config_.retries; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(
                std::chrono::milliseconds(config_.backoff_ms * (1 << (attempt - 1))));
        }
        {
            std::lock_guard lock(attempts_mutex_);
            ++attempts_;
        }
        httplib::Client client(origin_);
        client.set_connection_timeout(10, 0);
        client.set_read_timeout(120, 0);
        auto res = client.Post(path, headers, body, "application/json");
        if (!res) {
            last_error = "connection failed: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 401 || res->status == 403) {
            throw BackendError(BackendError::Kind::auth,
                               "authentication rejected (HTTP " + std::to_string(res->status) +
                                   "): " + res->body);
        }
        if (res->status == 400 && mentions_context_length(res->body)) {
            throw ContextBudgetError("request exceeds the model context window: " + res->body);
        }
        if (is_transient_status(res->status)) {
            last_error = "HTTP " + std::to_string(res->status) + ": " + res->body;
            continue;
        }
        if (res->status != 200) {
            throw BackendError(BackendError::Kind::other,
                               "HTTP " + std::to_string(res->status) + ": " + res->body);
        }

        json parsed;
        try {
            parsed = json::parse(res->body);
        } catch (const json::exception& e) {
            throw BackendError(BackendError::Kind::other,
                               std::string("malformed completion response: ") + e.what());
        }
        LlmResponse out;
        try {
            out.text = parsed.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception& e) {
            throw BackendError(BackendError::Kind::other,
                               std::string("completion response missing content: ") + e.what());
        }
        out.model = parsed.value("model", config_.model);
        if (parsed.contains("usage")) {
            out.prompt_tokens = parsed["usage"].value("prompt_tokens", 0);
            out.completion_tokens = parsed["usage"].value("completion_tokens", 0);
        }
        out.latency = std::chrono::duration_cast<std::chrono::milliseconds>(
            std::chrono::steady_clock::now() - started);
        if (out.text.empty()) {
            throw BackendError(BackendError::Kind::other, "backend returned an empty completion");
        }
        return out;
    }
    throw BackendError(BackendError::Kind::transport,
                       "gave up after " + std::to_string(config_.retries + 1) + " attempt(s): " +
                           last_error);
}

// ---------------------------------------------------------------------------
// recording

RecordingBackend::RecordingBackend(std::shared_ptr<Backend> inner, std::filesystem::path path)
    : inner_(std::move(inner)), path_(std::move(path)) {}

LlmResponse RecordingBackend::complete(const PromptBundle& bundle) {
    LlmResponse res = inner_->complete(bundle);
    const json record{{"envelope_digest", envelope_digest(bundle.task_envelope)},
                      {"reply_text", res.text}};
    std::lock_guard lock(write_mutex_);
    std::ofstream out(path_, std::ios::app);
    if (!out) throw IoError("cannot append recording to " + path_.string());
    out << record.dump() << "\n";
    return res;
}

std::shared_ptr<Backend> make_backend(const BackendConfig& config, const Corpus* oracle) {
    std::shared_ptr<Backend> backend;
    switch (config.kind) {
        case BackendKind::openai_compatible:
            backend = std::make_shared<OpenAiBackend>(config);
            break;
        case BackendKind::scripted:
            backend = std::make_shared<ScriptedBackend>(config);
            break;
        case BackendKind::simulated:
            backend = std::make_shared<SimulatedBackend>(config, oracle);
            break;
    }
    if (config.record_path) {
        backend = std::make_shared<RecordingBackend>(backend, *config.record_path);
    }
    return backend;
}

// ---------------------------------------------------------------------------
// structured-output parsing

namespace {

std::vector<std::string> fenced_blocks(const std::string& text) {
    std::vector<std::string> blocks;
    std::string current;
    bool inside = false;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto eol = text.find('\n', pos);
        const std::string line =
            text.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
        std::size_t first = line.find_first_not_of(" \t");
        const bool fence = first != std::string::npos && line.compare(first, 3, "```") == 0;
        if (fence) {
            if (inside) {
                blocks.push_back(current);
                current.clear();
                inside = false;
            } else {
                inside = true;
            }
        } else if (inside) {
            current += line;
            current += '\n';
        }
        if (eol == std::string::npos) break;
        pos = eol + 1;
    }
    return blocks;
}

// Structural match only; content checks happen after a block is chosen.
bool matches_grade_shape(const json& j) {
    if (!j.is_object() || !j.contains("scores") || !j["scores"].is_array()) return false;
    for (const auto& item : j["scores"]) {
        if (!item.is_object()) return false;
        if (!item.contains("answer_id") || !item["answer_id"].is_string()) return false;
        if (!item.contains("score") || !item["score"].is_number()) return false;
    }
    return true;
}

bool matches_review_shape(const json& j) {
    if (!j.is_object() || !j.contains("flags") || !j["flags"].is_array()) return false;
    for (const auto& item : j["flags"]) {
        if (!item.is_object()) return false;
        if (!item.contains("answer_id") || !item["answer_id"].is_string()) return false;
        if (!item.contains("reason") || !item["reason"].is_string()) return false;
    }
    return true;
}

ParsedReply typed_reply(const json& j, ReplySchema schema, double full_points) {
    ParsedReply reply;
    if (schema == ReplySchema::grade) {
        for (const auto& item : j["scores"]) {
            ParsedScore s;
            s.answer_id = item["answer_id"].get<std::string>();
            s.score = item["score"].get<double>();
            if (s.score < 0.0 || s.score > full_points) {
                throw ParseError("score " + item["score"].dump() + " for answer " + s.answer_id +
                                 " outside [0, " + std::to_string(full_points) + "]");
            }
            s.feedback = item.value("feedback", "");
            reply.scores.push_back(std::move(s));
        }
    } else {
        for (const auto& item : j["flags"]) {
            ParsedFlag f;
            f.answer_id = item["answer_id"].get<std::string>();
            f.reason = item["reason"].get<std::string>();
            if (f.reason != "rubric_deviation" && f.reason != "inconsistency") {
                throw ParseError("unknown review flag reason: " + f.reason);
            }
            f.detail = item.value("detail", "");
            reply.flags.push_back(std::move(f));
        }
    }
    return reply;
}

}  // namespace

ParsedReply parse_structured(const std::string& text, ReplySchema schema, double full_points) {
    auto shape_ok = [&](const json& j) {
        return schema == ReplySchema::grade ? matches_grade_shape(j) : matches_review_shape(j);
    };

    for (const auto& block : fenced_blocks(text)) {
        json j = json::parse(block, nullptr, false);
        if (j.is_discarded() || !shape_ok(j)) continue;
        return typed_reply(j, schema, full_points);
    }
    // no fenced match; accept a bare JSON reply
    json whole = json::parse(text, nullptr, false);
    if (!whole.is_discarded() && shape_ok(whole)) {
        return typed_reply(whole, schema, full_points);
    }
    throw ParseError("reply contains no fenced JSON block matching the expected schema");
}

PromptBundle with_followup(const PromptBundle& bundle, const std::string& message) {
    auto messages = bundle.user_messages;
    messages.push_back(message);
    return make_bundle(bundle.system, std::move(messages), bundle.task_envelope,
                       bundle.temperature, bundle.max_tokens);
}

StructuredReply request_structured(Backend& backend, const PromptBundle& bundle,
                                   ReplySchema schema, double full_points,
                                   const std::function<void(const ParsedReply&)>& check) {
    auto attempt = [&](const PromptBundle& b) {
        const LlmResponse res = backend.complete(b);
        ParsedReply parsed = parse_structured(res.text, schema, full_points);
        if (check) check(parsed);
        return StructuredReply{std::move(parsed), res.model};
    };
    try {
        return attempt(bundle);
    } catch (const ParseError& first) {
        const PromptBundle retry = with_followup(
            bundle, std::string("The previous reply could not be used (") + first.what() +
                        "). Reply again with exactly one fenced JSON block in the required "
                        "schema.");
        try {
            return attempt(retry);
        } catch (const BackendError& e) {
            // surface the original parse problem, not the exhausted replay queue
            throw ParseError(std::string(first.what()) + " (re-ask failed: " + e.what() + ")");
        }
    }
}

}  // namespace gradelab
