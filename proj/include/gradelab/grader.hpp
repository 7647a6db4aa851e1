#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gradelab/corpus.hpp"
#include "gradelab/llm.hpp"

namespace gradelab {

enum class StrategyKind { baseline, one_shot, self_reflection, batching };
enum class ExampleSelector { median_score, first_labeled };

std::string to_string(StrategyKind k);
StrategyKind strategy_kind_from_string(const std::string& s);

struct GradingStrategy {
    StrategyKind kind = StrategyKind::baseline;
    int reflection_rounds = 2;  // self_reflection only
    int batch_size = 10;        // batching only, >= 2
    ExampleSelector example_selector = ExampleSelector::median_score;
    // Character-count proxy for the model context window; batching prompts
    // beyond it raise ContextBudgetError.
    std::size_t context_budget_chars = 65536;
};

void validate(const GradingStrategy& strategy);

// A human-labeled (answer, score) pair, used as the one-shot example and by
// rubric refinement.
struct LabeledPair {
    std::string answer_id;
    double score = 0.0;
    std::optional<std::string> rationale;

    bool operator==(const LabeledPair&) const = default;
};

struct GradeRecord {
    std::string answer_id;
    double score = 0.0;
    std::string feedback;
    StrategyKind strategy = StrategyKind::baseline;
    int rubric_version = 0;
    int repetition = 0;
    std::string model;
    std::optional<double> initial_score;               // self_reflection
    std::optional<std::vector<double>> reflection_trace;  // one entry per round

    bool operator==(const GradeRecord&) const = default;
};

struct GradeFailure {
    std::string answer_id;
    int repetition = 0;
    std::string message;
};

struct GradingOutcome {
    std::vector<GradeRecord> records;   // ascending answer id within a repetition
    std::vector<GradeFailure> failures;
    std::vector<std::string> warnings;
};

nlohmann::json grade_record_to_json(const GradeRecord& r);
GradeRecord grade_record_from_json(const nlohmann::json& j);

// Extra envelope params (repetition seed etc.) shared by the builders.
using EnvelopeParams = std::map<std::string, nlohmann::json>;

// One prompt for one answer (baseline/one_shot/reflection turn) or a whole
// batch. one_shot requires `example`. The envelope never records the
// strategy: strategies differ only in prompt text.
PromptBundle build_grading_prompt(const GradingStrategy& strategy, const Question& q,
                                  const Rubric& rubric, const std::vector<const Answer*>& answers,
                                  const std::optional<LabeledPair>& example,
                                  const Corpus& corpus, const EnvelopeParams& params = {});

GradeRecord grade_once(const Question& q, const Rubric& rubric, const Answer& answer,
                       const GradingStrategy& strategy, Backend& backend, const Corpus& corpus,
                       const std::optional<LabeledPair>& example = std::nullopt,
                       const EnvelopeParams& params = {});

// Initial grade plus `rounds` reflection turns; each turn feeds the previous
// score and feedback back. A failed turn keeps the last good score and is
// recorded in `failures`.
GradeRecord grade_reflect(const Question& q, const Rubric& rubric, const Answer& answer,
                          int rounds, Backend& backend, const Corpus& corpus,
                          const EnvelopeParams& params = {},
                          std::vector<GradeFailure>* failures = nullptr);

// Ascending-id chunks of `batch_size`; each reply must score every listed
// answer exactly once. Missing/duplicated ids trigger one re-ask, then
// per-answer failures. A context-budget overflow halves the chunk once.
GradingOutcome grade_batch(const Question& q, const Rubric& rubric,
                           std::vector<const Answer*> answers, int batch_size, Backend& backend,
                           const Corpus& corpus, const GradingStrategy& strategy,
                           const EnvelopeParams& params = {});

// Picks the one-shot example from the human-labeled answers of `q`.
std::optional<LabeledPair> choose_example(const Corpus& corpus, const Question& q,
                                          ExampleSelector selector);

// R full passes over all answers of q; pass r derives its seed from
// (seed, r) so repetitions are independently reproducible.
GradingOutcome run_grading(const Corpus& corpus, const Question& q, const Rubric& rubric,
                           const GradingStrategy& strategy, int repetitions, Backend& backend,
                           std::uint64_t seed, int parallelism = 4);

}  // namespace gradelab
