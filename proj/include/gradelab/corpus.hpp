#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace gradelab {

enum class DatasetTag { os, mohler, synthetic };

enum class Granularity {
    coarse_human,           // standard answer only
    fine_human,             // standard answer plus explicit criteria
    generated_random,
    generated_distribution,
};

std::string to_string(DatasetTag tag);
std::string to_string(Granularity g);
DatasetTag dataset_tag_from_string(const std::string& s);
Granularity granularity_from_string(const std::string& s);

struct Question {
    std::string id;
    std::string text;
    double full_points = 0.0;
    std::optional<std::string> supplementary;  // code, attached materials
    DatasetTag dataset_tag = DatasetTag::synthetic;

    bool operator==(const Question&) const = default;
};

struct Rubric {
    std::string question_id;
    int version = 0;
    std::string body;
    Granularity granularity = Granularity::coarse_human;
    std::optional<std::string> lineage;  // ref of version-1, empty for version 0

    bool operator==(const Rubric&) const = default;
};

// Stable identifier used as the lineage pointer of the next version.
std::string rubric_ref(const Rubric& r);

struct Answer {
    std::string id;
    std::string question_id;
    std::string student_id;
    std::string text;

    bool operator==(const Answer&) const = default;
};

enum class ScorerKind { human_final, human_individual, llm, injected };

struct Scorer {
    ScorerKind kind = ScorerKind::human_final;
    int index = -1;  // grader index, human_individual only

    bool operator==(const Scorer&) const = default;
};

struct ScoredAnswer {
    std::string answer_id;
    double score = 0.0;
    Scorer scorer;
    std::optional<std::string> rationale;

    bool operator==(const ScoredAnswer&) const = default;
};

struct InjectionRecord {
    std::string answer_id;
    double original_score = 0.0;
    double injected_score = 0.0;
    std::uint64_t seed = 0;

    bool operator==(const InjectionRecord&) const = default;
};

struct Corpus {
    DatasetTag tag = DatasetTag::synthetic;
    std::vector<Question> questions;
    std::vector<Rubric> rubrics;  // dataset-provided rubrics, all version 0
    std::vector<Answer> answers;
    std::vector<ScoredAnswer> human_scores;  // per-grader entries plus the resolved final

    const Question* find_question(const std::string& id) const;
    const Answer* find_answer(const std::string& id) const;
    // Ascending answer id; all sampling and batching starts from this order.
    std::vector<const Answer*> answers_for(const std::string& question_id) const;
    std::optional<double> human_final(const std::string& answer_id) const;
    const Rubric* rubric_for(const std::string& question_id, Granularity g) const;

    bool operator==(const Corpus&) const = default;
};

// Throws ValidationError on any invariant breach (bounds, duplicate ids,
// empty texts, dangling references).
void validate(const Corpus& corpus);

// `path` is a question JSON file or a directory of them (sorted by filename).
Corpus load_os_dataset(const std::filesystem::path& path);
// Writes one <question_id>.json per question.
void save_os_dataset(const Corpus& corpus, const std::filesystem::path& dir);

// Tabular file: header row, then
// question_id, question, desired_answer, student_answer, score1, score2.
// Tab- or comma-separated (sniffed from the header).
Corpus load_mohler_dataset(const std::filesystem::path& path);
void save_mohler_dataset(const Corpus& corpus, const std::filesystem::path& file);

// Arithmetic mean; errors on an empty list.
double resolve_human_final(const std::vector<double>& scores);

struct InjectionResult {
    std::vector<ScoredAnswer> pairs;         // input with injected scores swapped in
    std::vector<InjectionRecord> records;    // ground truth for detection scoring
};

// Replaces ceil(fraction*n) scores with perturbed values. Perturbation is
// clamp(old +/- delta, 0, full) with delta ~ U[0.3, 0.6]*full; the direction
// flips when clamping would leave |new - old| under 0.3*full, so every
// injected pair is unambiguously anomalous. Draws are keyed by
// (seed, answer_id).
InjectionResult inject_anomalies(const std::vector<ScoredAnswer>& pairs, double full_points,
                                 double fraction, std::uint64_t seed);

nlohmann::json question_to_json(const Question& q);
nlohmann::json rubric_to_json(const Rubric& r);
nlohmann::json scored_answer_to_json(const ScoredAnswer& s);
nlohmann::json injection_to_json(const InjectionRecord& r);
Rubric rubric_from_json(const nlohmann::json& j);
ScoredAnswer scored_answer_from_json(const nlohmann::json& j);
InjectionRecord injection_from_json(const nlohmann::json& j);

}  // namespace gradelab
