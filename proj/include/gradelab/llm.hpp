#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gradelab/corpus.hpp"

namespace gradelab {

enum class TaskKind { generate_rubric, grade, review };

std::string to_string(TaskKind t);
TaskKind task_kind_from_string(const std::string& s);

// Machine-readable descriptor embedded in every prompt. Offline backends
// answer from this block alone; live models read the surrounding
// instructions. Params are kept in a sorted map so serialization is
// canonical and digests are stable.
struct TaskEnvelope {
    TaskKind task = TaskKind::grade;
    std::string question_id;
    int rubric_version = 0;
    std::vector<std::string> answer_ids;
    std::map<std::string, nlohmann::json> params;

    bool operator==(const TaskEnvelope&) const = default;
};

nlohmann::json envelope_to_json(const TaskEnvelope& e);
TaskEnvelope envelope_from_json(const nlohmann::json& j);

// 16-hex-digit key used by the scripted backend and recorded fixtures.
std::string envelope_digest(const TaskEnvelope& e);

struct PromptBundle {
    std::string system;
    std::vector<std::string> user_messages;
    TaskEnvelope task_envelope;
    double temperature = 0.0;
    int max_tokens = 1024;
};

// Builds a bundle and appends the fenced envelope block to the final user
// message. All prompt builders go through here.
PromptBundle make_bundle(std::string system, std::vector<std::string> user_messages,
                         TaskEnvelope envelope, double temperature, int max_tokens);

// Recovers the envelope block embedded by make_bundle (round-trip check and
// external tooling).
std::optional<TaskEnvelope> extract_envelope(const std::string& user_message);

struct LlmResponse {
    std::string text;
    std::string model;
    int prompt_tokens = 0;
    int completion_tokens = 0;
    std::chrono::milliseconds latency{0};
};

enum class BackendKind { openai_compatible, scripted, simulated };

std::string to_string(BackendKind k);
BackendKind backend_kind_from_string(const std::string& s);

struct BackendConfig {
    BackendKind kind = BackendKind::simulated;
    std::optional<std::string> base_url;  // required for openai_compatible
    std::string model = "sim-grader";
    std::string api_key_env = "OPENAI_API_KEY";
    int retries = 2;          // transient-failure retries beyond the first attempt
    int backoff_ms = 100;     // doubled per retry
    std::uint64_t seed = 0;   // simulated noise stream
    double noise_sigma = 0.0; // simulated score noise, in points
    std::optional<std::string> fixture_path;  // scripted replies, jsonl
    std::optional<std::string> record_path;   // capture replies for later replay
};

nlohmann::json backend_config_to_json(const BackendConfig& c);
BackendConfig backend_config_from_json(const nlohmann::json& j);

class Backend {
public:
    virtual ~Backend() = default;

    virtual LlmResponse complete(const PromptBundle& bundle) = 0;
    virtual bool offline() const = 0;
    // Network attempts issued so far; always 0 for offline backends.
    virtual int network_attempts() const { return 0; }

    std::vector<std::string> call_log() const;

protected:
    void log_call(const std::string& digest);

private:
    mutable std::mutex log_mutex_;
    std::vector<std::string> calls_;
};

// Replays canned replies keyed by envelope digest. Multiple replies under
// one digest form a FIFO queue, which is how re-ask fixtures are scripted.
class ScriptedBackend : public Backend {
public:
    ScriptedBackend() = default;
    explicit ScriptedBackend(const BackendConfig& config);

    void enqueue(const TaskEnvelope& envelope, std::string reply);
    void enqueue_digest(const std::string& digest, std::string reply);
    void load_fixture(const std::filesystem::path& path);
    std::size_t pending() const;

    LlmResponse complete(const PromptBundle& bundle) override;
    bool offline() const override { return true; }

private:
    mutable std::mutex mutex_;
    std::map<std::string, std::vector<std::string>> queues_;
    std::string model_ = "scripted";
};

// Seeded noisy oracle around the corpus ground truth; stands in for the
// grader LLM in offline runs. Draws are keyed by (seed, answer_id), never by
// call order.
class SimulatedBackend : public Backend {
public:
    SimulatedBackend(const BackendConfig& config, const Corpus* oracle);

    LlmResponse complete(const PromptBundle& bundle) override;
    bool offline() const override { return true; }

private:
    BackendConfig config_;
    const Corpus* oracle_;
};

// Chat-completions client: POST {base_url}/chat/completions with bearer auth
// from the environment. Retries transient failures with exponential backoff;
// never retries auth failures.
class OpenAiBackend : public Backend {
public:
    explicit OpenAiBackend(const BackendConfig& config);

    LlmResponse complete(const PromptBundle& bundle) override;
    bool offline() const override { return false; }
    int network_attempts() const override;

private:
    BackendConfig config_;
    std::string origin_;       // scheme://host[:port]
    std::string path_prefix_;  // e.g. /v1
    mutable std::mutex attempts_mutex_;
    int attempts_ = 0;
};

// Decorator that appends every (digest, reply) pair to a fixture file so a
// run can be replayed through ScriptedBackend.
class RecordingBackend : public Backend {
public:
    RecordingBackend(std::shared_ptr<Backend> inner, std::filesystem::path path);

    LlmResponse complete(const PromptBundle& bundle) override;
    bool offline() const override { return inner_->offline(); }
    int network_attempts() const override { return inner_->network_attempts(); }

private:
    std::shared_ptr<Backend> inner_;
    std::filesystem::path path_;
    std::mutex write_mutex_;
};

// Oracle may be null except for the simulated kind.
std::shared_ptr<Backend> make_backend(const BackendConfig& config, const Corpus* oracle = nullptr);

// Deterministic stand-in replies; exposed for tests and the simulated
// backend. grade: noisy rounded oracle scores. review: flags pairs whose
// listed score strays from the oracle by more than max(2*sigma, 0.25*full).
// generate_rubric: echoes the prior body plus an iteration marker line.
std::string simulated_reply(const TaskEnvelope& envelope, const Corpus& oracle,
                            std::uint64_t seed, double sigma);

enum class ReplySchema { grade, review };

struct ParsedScore {
    std::string answer_id;
    double score = 0.0;
    std::string feedback;
};

struct ParsedFlag {
    std::string answer_id;
    std::string reason;  // "rubric_deviation" or "inconsistency"
    std::string detail;
};

struct ParsedReply {
    std::vector<ParsedScore> scores;
    std::vector<ParsedFlag> flags;
};

// Extracts the first fenced JSON block matching the schema; prose around the
// block is fine. Blocks that are valid JSON of the wrong shape are skipped;
// a shape-correct block with an out-of-range score is an error, not a skip.
ParsedReply parse_structured(const std::string& text, ReplySchema schema, double full_points);

// Appends a follow-up user message and re-embeds the envelope so it stays in
// the final message; the digest is unchanged.
PromptBundle with_followup(const PromptBundle& bundle, const std::string& message);

struct StructuredReply {
    ParsedReply parsed;
    std::string model;
};

// One request plus at most one corrective re-ask on a parse/content failure.
// `check` may throw ParseError to reject a structurally valid reply.
StructuredReply request_structured(Backend& backend, const PromptBundle& bundle,
                                   ReplySchema schema, double full_points,
                                   const std::function<void(const ParsedReply&)>& check = {});

// Shared defaults: grading and review must be repeatable, drafting benefits
// from variety.
inline constexpr double kGradingTemperature = 0.0;
inline constexpr double kRubricTemperature = 0.7;
inline constexpr int kGradeMaxTokens = 1024;
inline constexpr int kRubricMaxTokens = 2048;

}  // namespace gradelab
