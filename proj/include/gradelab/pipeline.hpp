#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gradelab/corpus.hpp"
#include "gradelab/grader.hpp"
#include "gradelab/llm.hpp"
#include "gradelab/metrics.hpp"
#include "gradelab/review.hpp"
#include "gradelab/rubric_gen.hpp"
#include "gradelab/run_store.hpp"

namespace gradelab {

struct CorpusConfig {
    std::string path;
    DatasetTag format = DatasetTag::os;
};

// One JSON document mirrors this struct; CLI flags override file values.
struct RunConfig {
    std::string run_id = "run";
    std::uint64_t master_seed = 0;
    std::string store_root = "runs";
    std::string question_id;  // empty selects the first question
    CorpusConfig corpus;
    BackendConfig backend;
    GenerationConfig generation;
    GradingStrategy strategy;
    ReviewConfig review;
    int repetitions = 1;
    LabelSource labels = LabelSource::dataset_lookup;
    int parallelism = 4;
    bool regrade = false;
    std::map<std::string, int> batch_size_overrides;  // per-question batching sizes
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& path);

// Identity of everything that shapes results; run_id and store location are
// deliberately excluded so identical configs produce identical stores.
std::string config_fingerprint(const RunConfig& config);

Corpus load_corpus(const CorpusConfig& config);
const Question& resolve_question(const Corpus& corpus, const std::string& question_id);
// Human rubric the generation loop starts from: fine-grained if the corpus
// has one, else coarse.
const Rubric& starting_rubric(const Corpus& corpus, const Question& q);

struct PipelineSummary {
    std::string run_id;
    std::string store_dir;
    int rubric_versions = 0;
    int grade_records = 0;
    int grade_failures = 0;
    int findings = 0;
    std::vector<std::string> regrade_queue;
    std::optional<ExperimentReport> report;
    std::optional<ExperimentReport> regrade_report;
    std::vector<std::string> warnings;
};

// rubric -> grade -> review -> eval, checkpointed per stage. An existing run
// with a matching fingerprint resumes; completed stages are not recomputed.
// `until` stops after the named stage.
PipelineSummary run_pipeline(const RunConfig& config, const std::string& until = "");

// Stage pieces shared with the CLI subcommands.
std::vector<Rubric> stage_rubric(const RunConfig& config, const Corpus& corpus,
                                 const Question& q, Backend& backend, RunStore& store);
GradingOutcome stage_grade(const RunConfig& config, const Corpus& corpus, const Question& q,
                           const Rubric& rubric, Backend& backend, RunStore& store);
ReviewOutcome stage_review(const RunConfig& config, const Corpus& corpus, const Question& q,
                           const Rubric& rubric, Backend& backend, RunStore& store);

// Latest stored score per answer (grade records, injected lines override).
std::vector<ScoredPair> review_basis(const RunStore& store, const std::string& question_id);
// Final rubric of the stored chain.
Rubric stored_final_rubric(const RunStore& store, const std::string& question_id);

// Comparison drivers. Each returns the rendered table and persists
// per-row reports to the run store.
std::string experiment_rubrics(const RunConfig& config);
std::string experiment_strategies(const RunConfig& config);
std::string experiment_review(const RunConfig& config, double fraction,
                              const std::vector<std::uint64_t>& seeds);

// Applies ceil(fraction*n) score perturbations to the stored grades and
// writes both the perturbed scores and the ground-truth records.
std::vector<InjectionRecord> cmd_inject(const RunConfig& config, double fraction,
                                        std::uint64_t seed);

// Renders the stored aggregate report for a finished run.
std::string cmd_eval(const RunConfig& config, TableFormat format);

}  // namespace gradelab
