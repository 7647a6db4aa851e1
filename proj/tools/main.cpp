#include <cstdint>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gradelab/errors.hpp"
#include "gradelab/pipeline.hpp"
#include "gradelab/rng.hpp"

using namespace gradelab;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitBackend = 3;
constexpr int kExitData = 4;

// The rubric the CLI grades/reviews with: an explicit stored version, else
// the newest stored version, else the corpus rubric.
Rubric select_rubric(const RunStore& store, const Corpus& corpus, const Question& q,
                     int version) {
    const auto loaded = store.load(RunStore::kRubrics);
    std::optional<Rubric> best;
    for (const auto& j : loaded.records) {
        Rubric r = rubric_from_json(j);
        if (r.question_id != q.id) continue;
        if (version >= 0 && r.version == version) return r;
        if (!best || r.version > best->version) best = std::move(r);
    }
    if (version >= 0) {
        throw ValidationError("run store has no rubric version " + std::to_string(version) +
                              " for question " + q.id);
    }
    if (best) return *best;
    return starting_rubric(corpus, q);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<std::uint64_t> seeds;
    std::size_t pos = 0;
    while (pos < csv.size()) {
        const auto comma = csv.find(',', pos);
        const std::string token =
            csv.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (!token.empty()) seeds.push_back(std::stoull(token));
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return seeds;
}

}  // namespace

int main(int argc, char** argv) {
    RunConfig config;
    // the config file loads first; every flag below overrides it
    for (int i = 1; i < argc - 1; ++i) {
        const std::string arg = argv[i];
        if (arg == "--config" || arg == "-c") {
            try {
                config = load_run_config(argv[i + 1]);
            } catch (const Error& e) {
                std::cerr << "error: " << e.what() << "\n";
                return kExitConfig;
            }
        }
    }

    CLI::App app{"LLM-assisted grading pipeline: rubric generation, grading, review"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand
    std::string config_path;
    app.add_option("-c,--config", config_path, "JSON run configuration");

    app.add_option("--run-id", config.run_id, "run identifier inside the store");
    app.add_option("--seed", config.master_seed, "master seed");
    app.add_option("--store-root", config.store_root, "run store directory");
    app.add_option("--question", config.question_id, "question id (default: first)");
    app.add_option("--corpus", config.corpus.path, "dataset path");
    std::string corpus_format;
    app.add_option("--format", corpus_format, "corpus format: os|mohler");
    std::string backend_kind;
    app.add_option("--backend", backend_kind, "backend: simulated|scripted|openai");
    app.add_option("--model", config.backend.model, "model name");
    std::string base_url;
    app.add_option("--base-url", base_url, "OpenAI-compatible endpoint base url");
    app.add_option("--api-key-env", config.backend.api_key_env,
                   "environment variable holding the API key");
    app.add_option("--retries", config.backend.retries, "transient-failure retries");
    app.add_option("--sigma", config.backend.noise_sigma, "simulated noise, in points");
    app.add_option("--backend-seed", config.backend.seed, "simulated noise seed");
    std::string fixture_path;
    app.add_option("--fixture", fixture_path, "scripted replies fixture (jsonl)");
    std::string record_path;
    app.add_option("--record", record_path, "record replies for replay (jsonl)");
    app.add_option("--reps", config.repetitions, "grading repetitions");
    app.add_option("--parallelism", config.parallelism, "max in-flight requests");

    auto* ingest = app.add_subcommand("ingest", "load, validate and summarize a dataset");
    std::string ingest_out;
    ingest->add_option("--out", ingest_out, "write the normalized dataset here");

    auto* rubric_gen = app.add_subcommand("rubric-gen", "iterative rubric refinement");
    std::string gen_method;
    rubric_gen->add_option("--method", gen_method, "random|distribution");
    rubric_gen->add_option("--m", config.generation.sample_size, "labels per iteration");
    rubric_gen->add_option("--t", config.generation.iterations, "iterations");
    rubric_gen->add_option("--k", config.generation.strata_count, "strata");
    std::uint64_t stage_seed = 0;
    auto* stage_seed_opt =
        rubric_gen->add_option("--stage-seed", stage_seed, "sampling seed (default: derived)");
    std::string labels_mode;
    rubric_gen->add_option("--labels", labels_mode, "lookup|interactive");

    auto* grade = app.add_subcommand("grade", "grade all answers of a question");
    int rubric_version = -1;
    grade->add_option("--rubric-version", rubric_version, "stored rubric version to grade with");
    std::string strategy_name;
    grade->add_option("--strategy", strategy_name, "baseline|one-shot|reflect|batch");
    grade->add_option("--batch-size", config.strategy.batch_size, "answers per batch request");
    grade->add_option("--rounds", config.strategy.reflection_rounds, "reflection rounds");

    auto* review = app.add_subcommand("review", "post-grading anomaly review");
    int review_rubric_version = -1;
    review->add_option("--rubric-version", review_rubric_version, "stored rubric version");
    review->add_option("--c", config.review.group_size, "group size");
    review->add_option("--k", config.review.subgroup_count, "sub-groups per group");
    std::string rounds_mode;
    review->add_option("--rounds", rounds_mode, "single|regrouped");
    std::string combine_mode;
    review->add_option("--combine", combine_mode, "union|intersection");

    auto* inject = app.add_subcommand("inject", "perturb stored scores to plant anomalies");
    double inject_fraction = 0.2;
    std::uint64_t inject_seed = 0;
    inject->add_option("--fraction", inject_fraction, "fraction of pairs to perturb")->required();
    inject->add_option("--inject-seed", inject_seed, "injection seed");

    auto* eval = app.add_subcommand("eval", "render metrics for a stored run");
    std::string eval_run;
    eval->add_option("--run", eval_run, "run id (default: --run-id)");
    std::string eval_against = "human_final";
    eval->add_option("--against", eval_against, "reference scores (human_final)");
    std::string eval_format = "markdown";
    eval->add_option("--eval-format", eval_format, "markdown|csv");

    auto* label = app.add_subcommand("label", "interactively label sampled answers");
    int label_m = 5;
    label->add_option("--m", label_m, "how many answers to sample");
    std::string label_out;
    label->add_option("--out", label_out, "write labeled pairs here (jsonl)");

    auto* pipeline = app.add_subcommand("pipeline", "run rubric-gen, grade, review, eval");
    std::string until;
    pipeline->add_option("--until", until, "stop after this stage: rubric|grade|review");
    pipeline->add_flag("--regrade", config.regrade, "re-grade the review queue");

    auto* exp_rubrics =
        app.add_subcommand("exp-rubrics", "compare grading under rubric granularities");
    auto* exp_strategies =
        app.add_subcommand("exp-strategies", "compare grading prompt strategies");
    auto* exp_review = app.add_subcommand("exp-review", "measure anomaly detection accuracy");
    double exp_fraction = 0.2;
    exp_review->add_option("--fraction", exp_fraction, "injected fraction");
    std::string exp_seeds = "1,2,3,4,5";
    exp_review->add_option("--seeds", exp_seeds, "comma-separated seed list");

    CLI11_PARSE(app, argc, argv);

    try {
        if (!corpus_format.empty()) config.corpus.format = dataset_tag_from_string(corpus_format);
        if (!backend_kind.empty()) {
            config.backend.kind = backend_kind == "openai"
                                      ? BackendKind::openai_compatible
                                      : backend_kind_from_string(backend_kind);
        }
        if (!base_url.empty()) config.backend.base_url = base_url;
        if (!fixture_path.empty()) config.backend.fixture_path = fixture_path;
        if (!record_path.empty()) config.backend.record_path = record_path;
        if (!gen_method.empty()) {
            config.generation.method = sampling_method_from_string(gen_method);
        }
        if (!labels_mode.empty()) config.labels = label_source_from_string(labels_mode);
        if (!strategy_name.empty()) {
            config.strategy.kind = strategy_kind_from_string(strategy_name);
        }
        if (!rounds_mode.empty()) config.review.rounds = review_rounds_from_string(rounds_mode);
        if (!combine_mode.empty()) config.review.combine = combine_mode_from_string(combine_mode);

        if (*ingest) {
            const Corpus corpus = load_corpus(config.corpus);
            std::cout << "dataset: " << to_string(corpus.tag) << "\n"
                      << "questions: " << corpus.questions.size() << "\n"
                      << "answers: " << corpus.answers.size() << "\n"
                      << "rubrics: " << corpus.rubrics.size() << "\n";
            for (const auto& q : corpus.questions) {
                std::cout << "  " << q.id << " (full points " << q.full_points
                          << "): " << corpus.answers_for(q.id).size() << " answers\n";
            }
            if (!ingest_out.empty()) {
                if (corpus.tag == DatasetTag::mohler) save_mohler_dataset(corpus, ingest_out);
                else save_os_dataset(corpus, ingest_out);
                std::cout << "normalized copy written to " << ingest_out << "\n";
            }
        } else if (*rubric_gen) {
            const Corpus corpus = load_corpus(config.corpus);
            const Question& q = resolve_question(corpus, config.question_id);
            GenerationConfig gen = config.generation;
            gen.seed = stage_seed_opt->count() ? stage_seed
                                               : derive_seed(config.master_seed, "rubric-stage");
            validate(gen, corpus.answers_for(q.id).size());
            RunStore store(config.store_root, config.run_id);
            const auto backend = make_backend(config.backend, &corpus);
            const GenerationResult result =
                run_generation(q, starting_rubric(corpus, q), corpus, gen, *backend,
                               config.labels, &store, config.parallelism);
            for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";
            std::cout << "rubric chain: versions 0.." << result.chain.back().version << "\n\n"
                      << result.chain.back().body << "\n";
        } else if (*grade) {
            const Corpus corpus = load_corpus(config.corpus);
            const Question& q = resolve_question(corpus, config.question_id);
            validate(config.strategy);
            RunStore store(config.store_root, config.run_id);
            const Rubric rubric = select_rubric(store, corpus, q, rubric_version);
            const auto backend = make_backend(config.backend, &corpus);
            const GradingOutcome outcome =
                run_grading(corpus, q, rubric, config.strategy, config.repetitions, *backend,
                            derive_seed(config.master_seed, "grade-stage"), config.parallelism);
            for (const auto& rec : outcome.records) {
                nlohmann::json j = grade_record_to_json(rec);
                j["kind"] = "grade";
                store.append(RunStore::kGrades, j);
            }
            for (const auto& f : outcome.failures) {
                store.append(RunStore::kGrades,
                             nlohmann::json{{"kind", "grade_failure"},
                                            {"answer_id", f.answer_id},
                                            {"repetition", f.repetition},
                                            {"message", f.message}});
            }
            for (const auto& w : outcome.warnings) std::cerr << "warning: " << w << "\n";
            std::cout << outcome.records.size() << " grade records (" << outcome.failures.size()
                      << " failures) -> " << store.dir().string() << "\n";
        } else if (*review) {
            const Corpus corpus = load_corpus(config.corpus);
            const Question& q = resolve_question(corpus, config.question_id);
            validate(config.review);
            RunStore store(config.store_root, config.run_id);
            const Rubric rubric = select_rubric(store, corpus, q, review_rubric_version);
            const auto backend = make_backend(config.backend, &corpus);
            const ReviewOutcome outcome = stage_review(config, corpus, q, rubric, *backend, store);
            for (const auto& w : outcome.warnings) std::cerr << "warning: " << w << "\n";
            std::cout << outcome.findings.size() << " findings; regrade queue:";
            for (const auto& id : outcome.regrade_queue) std::cout << " " << id;
            std::cout << "\n";
        } else if (*inject) {
            const auto records = cmd_inject(config, inject_fraction, inject_seed);
            std::cout << records.size() << " scores perturbed; ground truth in "
                      << (RunStore(config.store_root, config.run_id).dir() / "injections.jsonl")
                             .string()
                      << "\n";
        } else if (*eval) {
            if (eval_against != "human_final") {
                throw ValidationError("only --against human_final is supported");
            }
            RunConfig eval_config = config;
            if (!eval_run.empty()) eval_config.run_id = eval_run;
            const TableFormat format =
                eval_format == "csv" ? TableFormat::csv : TableFormat::markdown;
            std::cout << cmd_eval(eval_config, format);
        } else if (*label) {
            const Corpus corpus = load_corpus(config.corpus);
            const Question& q = resolve_question(corpus, config.question_id);
            std::vector<std::string> pool;
            for (const Answer* a : corpus.answers_for(q.id)) pool.push_back(a->id);
            std::set<std::string> used;
            const SampleBatch batch =
                sample_random(pool, label_m, derive_seed(config.master_seed, "label"), used);
            const auto labels =
                human_label(batch, corpus, LabelSource::interactive, std::cin, std::cout);
            std::ofstream out;
            if (!label_out.empty()) out.open(label_out);
            for (const auto& pair : labels) {
                nlohmann::json j{{"answer_id", pair.answer_id}, {"score", pair.score}};
                if (pair.rationale) j["rationale"] = *pair.rationale;
                std::cout << j.dump() << "\n";
                if (out.is_open()) out << j.dump() << "\n";
            }
        } else if (*pipeline) {
            const PipelineSummary summary = run_pipeline(config, until);
            std::cout << "run " << summary.run_id << " -> " << summary.store_dir << "\n"
                      << "rubric versions: " << summary.rubric_versions << "\n"
                      << "grade records: " << summary.grade_records << " ("
                      << summary.grade_failures << " failures)\n"
                      << "findings: " << summary.findings << "; regrade queue:";
            for (const auto& id : summary.regrade_queue) std::cout << " " << id;
            std::cout << "\n";
            if (summary.report) {
                std::cout << "\n" << emit_table(*summary.report, TableFormat::markdown);
            }
            if (summary.regrade_report) {
                std::cout << "\nafter regrade:\n"
                          << emit_table(*summary.regrade_report, TableFormat::markdown);
            }
        } else if (*exp_rubrics) {
            std::cout << experiment_rubrics(config);
        } else if (*exp_strategies) {
            std::cout << experiment_strategies(config);
        } else if (*exp_review) {
            std::cout << experiment_review(config, exp_fraction, parse_seed_list(exp_seeds));
        }
        return kExitOk;
    } catch (const ValidationError& e) {
        std::cerr << "config/validation error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ContextBudgetError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return kExitBackend;
    } catch (const BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return kExitBackend;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return kExitData;
    } catch (const IoError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}
