#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gradelab/corpus.hpp"
#include "gradelab/llm.hpp"

namespace gradelab {

enum class ReviewRounds { single, regrouped };
enum class CombineMode { union_of_rounds, intersection_of_rounds };
enum class ReviewRound { initial, regrouped };
enum class FindingReason { rubric_deviation, inconsistency };

std::string to_string(ReviewRounds r);
std::string to_string(CombineMode m);
std::string to_string(ReviewRound r);
std::string to_string(FindingReason r);
ReviewRounds review_rounds_from_string(const std::string& s);
CombineMode combine_mode_from_string(const std::string& s);

struct ReviewConfig {
    int group_size = 10;     // c, sized so a group fits the context budget
    int subgroup_count = 2;  // k
    ReviewRounds rounds = ReviewRounds::regrouped;
    CombineMode combine = CombineMode::union_of_rounds;
    std::uint64_t seed = 0;
};

void validate(const ReviewConfig& cfg);

// One (answer_id, listed score) pair under review.
using ScoredPair = std::pair<std::string, double>;

struct ReviewGroup {
    std::string group_id;
    ReviewRound round = ReviewRound::initial;
    std::vector<ScoredPair> members;
};

struct ReviewFinding {
    std::string answer_id;
    FindingReason reason = FindingReason::rubric_deviation;
    std::string detail;
    ReviewRound round = ReviewRound::initial;
    std::string group_id;

    bool operator==(const ReviewFinding&) const = default;
};

nlohmann::json finding_to_json(const ReviewFinding& f);
ReviewFinding finding_from_json(const nlohmann::json& j);

// Seeded shuffle, then chunks of c. A single leftover merges into the last
// group; two or more leftovers form their own group.
std::vector<ReviewGroup> partition_groups(const std::vector<ScoredPair>& pairs, int c,
                                          std::uint64_t seed);

// One prompt per group listing every (answer, score) pair; the model checks
// scores against the rubric and against each other. Flags for ids outside
// the group are dropped with a warning.
std::vector<ReviewFinding> review_group(const Question& q, const Rubric& rubric,
                                        const ReviewGroup& group, Backend& backend,
                                        const Corpus& corpus, std::uint64_t seed,
                                        std::vector<std::string>* warnings = nullptr);

// Splits each group into k contiguous sub-groups and reassembles them so
// every new group draws from min(k, #groups) distinct parents and every pair
// lands in exactly one new group.
std::vector<ReviewGroup> regroup(const std::vector<ReviewGroup>& groups, int k,
                                 std::uint64_t seed);

struct ReviewOutcome {
    std::vector<ReviewFinding> findings;      // all rounds, (round, group, answer) order
    std::vector<std::string> regrade_queue;   // combined flag set, ascending, deduplicated
    std::vector<std::string> unreviewed_groups;
    std::vector<std::string> warnings;
};

ReviewOutcome run_review(const Question& q, const Rubric& rubric,
                         const std::vector<ScoredPair>& pairs, const ReviewConfig& cfg,
                         Backend& backend, const Corpus& corpus, int parallelism = 4);

// (TP + TN) / total over the injected-anomaly ground truth.
double detection_accuracy(const std::vector<std::string>& flagged_ids,
                          const std::vector<InjectionRecord>& truth, std::size_t total);
double detection_accuracy(const std::vector<ReviewFinding>& findings,
                          const std::vector<InjectionRecord>& truth, std::size_t total);

}  // namespace gradelab
