#pragma once

#include <cstdint>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "gradelab/corpus.hpp"
#include "gradelab/grader.hpp"
#include "gradelab/llm.hpp"

namespace gradelab {

enum class SamplingMethod { random, distribution_aware };

std::string to_string(SamplingMethod m);
SamplingMethod sampling_method_from_string(const std::string& s);

struct GenerationConfig {
    SamplingMethod method = SamplingMethod::distribution_aware;
    int sample_size = 5;   // m, labels per iteration; must stay well below the pool
    int iterations = 2;    // t
    int strata_count = 5;  // k, distribution_aware only
    std::uint64_t seed = 0;
    bool exclude_used = true;  // never label the same answer twice across iterations
};

void validate(const GenerationConfig& cfg, std::size_t pool_size);

struct Stratum {
    double lower = 0.0;
    double upper = 0.0;  // inclusive only on the last stratum
    std::vector<std::string> answer_ids;  // ascending
};

struct ScoreDistribution {
    std::vector<Stratum> strata;       // k equal-width bins over [0, full_points]
    std::vector<double> proportions;   // |B_l| / graded count
};

struct SampleBatch {
    int iteration = 0;
    SamplingMethod method = SamplingMethod::random;
    std::vector<std::string> answer_ids;  // ascending, distinct
    std::vector<int> allocation;          // per-stratum counts, distribution_aware only
};

// Uniform sample without replacement from pool \ used; clamps to whatever
// remains. Sampled ids are added to `used`.
SampleBatch sample_random(const std::vector<std::string>& pool, int m, std::uint64_t seed,
                          std::set<std::string>& used, int iteration = 0);

struct InitialGrades {
    std::vector<ScoredAnswer> scores;  // scorer = llm, ascending answer id
    std::vector<GradeFailure> failures;
};

// One baseline LLM score per answer under the current rubric; per-answer
// failures are recorded and the answers left out of stratification.
InitialGrades initial_grade_all(const Question& q, const Rubric& rubric, const Corpus& corpus,
                                Backend& backend, std::uint64_t seed, int parallelism = 4);

// k equal-width bins over [0, full_points]; the top edge closes the last bin.
ScoreDistribution stratify(const std::vector<ScoredAnswer>& scores, int k, double full_points);

struct Allocation {
    std::vector<int> ceil_quota;  // ceil(p_l * m) before any trimming
    std::vector<int> quota;       // after capacity caps and largest-first trimming
};

// Per-stratum label quotas: start at ceil(p_l*m), cap at |B_l|, then while
// the total exceeds m decrement the largest quota (ties to the lowest
// stratum), never below 1 for a non-empty stratum.
Allocation allocate(const ScoreDistribution& distribution, int m);

// Grade-all, stratify over the not-yet-used answers, allocate, then sample
// each stratum without replacement.
SampleBatch sample_distribution_aware(const Question& q, const Rubric& rubric,
                                      const Corpus& corpus, const GenerationConfig& cfg,
                                      Backend& backend, std::set<std::string>& used,
                                      int iteration, int parallelism = 4,
                                      std::vector<GradeFailure>* failures = nullptr);

enum class LabelSource { dataset_lookup, interactive };

std::string to_string(LabelSource s);
LabelSource label_source_from_string(const std::string& s);

// dataset_lookup reads the resolved human score for every batch member;
// interactive prompts on the terminal (score in [0, full], optional
// rationale) and re-prompts until the input is valid.
std::vector<LabeledPair> human_label(const SampleBatch& batch, const Corpus& corpus,
                                     LabelSource source, std::istream& in = std::cin,
                                     std::ostream& out = std::cout);

// Instruction + question + current rubric + the labeled pairs + the output
// contract (a rubric with a sample answer and itemized criteria).
PromptBundle build_rubric_prompt(const Question& q, const Rubric& current,
                                 const std::vector<LabeledPair>& labeled_pairs,
                                 const Corpus& corpus);

class RunStore;

// One refinement step: the backend reply text becomes the next version's
// body. Appends to `store` when given.
Rubric refine_rubric(const Rubric& current, const std::vector<LabeledPair>& labeled_pairs,
                     const Question& q, Backend& backend, const Corpus& corpus,
                     Granularity granularity, RunStore* store = nullptr);

struct GenerationResult {
    std::vector<Rubric> chain;  // r0..rt, consecutive versions, linked lineage
    std::vector<SampleBatch> batches;
    std::vector<std::vector<LabeledPair>> labels;
    std::vector<std::string> warnings;  // pool exhaustion, grading failures
};

// The full iteration loop: sample, label, prompt, refine, t times. Runs dry
// (with a warning) if exclude_used exhausts the pool early.
GenerationResult run_generation(const Question& q, const Rubric& r0, const Corpus& corpus,
                                const GenerationConfig& cfg, Backend& backend,
                                LabelSource labels = LabelSource::dataset_lookup,
                                RunStore* store = nullptr, int parallelism = 4,
                                std::istream& in = std::cin, std::ostream& out = std::cout);

}  // namespace gradelab
