#include "gradelab/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "gradelab/errors.hpp"
#include "gradelab/rng.hpp"

namespace gradelab {

using nlohmann::json;

namespace {

GenerationConfig generation_from_json(const json& j) {
    GenerationConfig cfg;
    if (j.contains("method")) cfg.method = sampling_method_from_string(j["method"]);
    cfg.sample_size = j.value("sample_size", cfg.sample_size);
    cfg.iterations = j.value("iterations", cfg.iterations);
    cfg.strata_count = j.value("strata_count", cfg.strata_count);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.exclude_used = j.value("exclude_used", cfg.exclude_used);
    return cfg;
}

json generation_to_json(const GenerationConfig& cfg) {
    return {{"method", to_string(cfg.method)},
            {"sample_size", cfg.sample_size},
            {"iterations", cfg.iterations},
            {"strata_count", cfg.strata_count},
            {"seed", cfg.seed},
            {"exclude_used", cfg.exclude_used}};
}

GradingStrategy strategy_from_json(const json& j) {
    GradingStrategy s;
    if (j.contains("kind")) s.kind = strategy_kind_from_string(j["kind"]);
    s.reflection_rounds = j.value("reflection_rounds", s.reflection_rounds);
    s.batch_size = j.value("batch_size", s.batch_size);
    if (j.contains("example_selector")) {
        const std::string sel = j["example_selector"];
        if (sel == "median_score") s.example_selector = ExampleSelector::median_score;
        else if (sel == "first_labeled") s.example_selector = ExampleSelector::first_labeled;
        else throw ValidationError("unknown example selector: " + sel);
    }
    s.context_budget_chars = j.value("context_budget_chars", s.context_budget_chars);
    return s;
}

json strategy_to_json(const GradingStrategy& s) {
    return {{"kind", to_string(s.kind)},
            {"reflection_rounds", s.reflection_rounds},
            {"batch_size", s.batch_size},
            {"example_selector",
             s.example_selector == ExampleSelector::median_score ? "median_score"
                                                                 : "first_labeled"},
            {"context_budget_chars", s.context_budget_chars}};
}

ReviewConfig review_from_json(const json& j) {
    ReviewConfig cfg;
    cfg.group_size = j.value("group_size", cfg.group_size);
    cfg.subgroup_count = j.value("subgroup_count", cfg.subgroup_count);
    if (j.contains("rounds")) cfg.rounds = review_rounds_from_string(j["rounds"]);
    if (j.contains("combine")) cfg.combine = combine_mode_from_string(j["combine"]);
    cfg.seed = j.value("seed", cfg.seed);
    return cfg;
}

json review_to_json(const ReviewConfig& cfg) {
    return {{"group_size", cfg.group_size},
            {"subgroup_count", cfg.subgroup_count},
            {"rounds", to_string(cfg.rounds)},
            {"combine", to_string(cfg.combine)},
            {"seed", cfg.seed}};
}

std::string cell2(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", x);
    return buf;
}

std::string render_comparison(const std::vector<std::pair<std::string, MetricRow>>& rows) {
    std::ostringstream out;
    out << "| method | MAE | RMSE | NRMSE | Pearson |\n|---|---|---|---|---|\n";
    for (const auto& [label, row] : rows) {
        out << "| " << label << " | " << cell2(row.mae) << " | " << cell2(row.rmse) << " | "
            << cell2(row.nrmse) << " | " << (row.pearson ? cell2(*row.pearson) : "n/a")
            << " |\n";
    }
    return out.str();
}

}  // namespace

RunConfig run_config_from_json(const json& j) {
    RunConfig config;
    config.run_id = j.value("run_id", config.run_id);
    config.master_seed = j.value("seed", config.master_seed);
    config.store_root = j.value("store_root", config.store_root);
    config.question_id = j.value("question_id", config.question_id);
    if (j.contains("corpus")) {
        config.corpus.path = j["corpus"].value("path", "");
        if (j["corpus"].contains("format")) {
            config.corpus.format = dataset_tag_from_string(j["corpus"]["format"]);
        }
    }
    if (j.contains("backend")) config.backend = backend_config_from_json(j["backend"]);
    if (j.contains("generation")) config.generation = generation_from_json(j["generation"]);
    if (j.contains("strategy")) config.strategy = strategy_from_json(j["strategy"]);
    if (j.contains("review")) config.review = review_from_json(j["review"]);
    config.repetitions = j.value("repetitions", config.repetitions);
    if (j.contains("labels")) config.labels = label_source_from_string(j["labels"]);
    config.parallelism = j.value("parallelism", config.parallelism);
    config.regrade = j.value("regrade", config.regrade);
    if (j.contains("batch_size_overrides")) {
        for (const auto& [k, v] : j["batch_size_overrides"].items()) {
            config.batch_size_overrides[k] = v.get<int>();
        }
    }
    return config;
}

json run_config_to_json(const RunConfig& config) {
    json overrides = json::object();
    for (const auto& [k, v] : config.batch_size_overrides) overrides[k] = v;
    return {{"run_id", config.run_id},
            {"seed", config.master_seed},
            {"store_root", config.store_root},
            {"question_id", config.question_id},
            {"corpus", {{"path", config.corpus.path}, {"format", to_string(config.corpus.format)}}},
            {"backend", backend_config_to_json(config.backend)},
            {"generation", generation_to_json(config.generation)},
            {"strategy", strategy_to_json(config.strategy)},
            {"review", review_to_json(config.review)},
            {"repetitions", config.repetitions},
            {"labels", to_string(config.labels)},
            {"parallelism", config.parallelism},
            {"regrade", config.regrade},
            {"batch_size_overrides", overrides}};
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

std::string config_fingerprint(const RunConfig& config) {
    json j = run_config_to_json(config);
    j.erase("run_id");
    j.erase("store_root");
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

Corpus load_corpus(const CorpusConfig& config) {
    if (config.path.empty()) throw ValidationError("corpus path is not configured");
    switch (config.format) {
        case DatasetTag::mohler: return load_mohler_dataset(config.path);
        case DatasetTag::os:
        case DatasetTag::synthetic: return load_os_dataset(config.path);
    }
    throw ValidationError("unsupported corpus format");
}

const Question& resolve_question(const Corpus& corpus, const std::string& question_id) {
    if (corpus.questions.empty()) throw ValidationError("corpus has no questions");
    if (question_id.empty()) return corpus.questions.front();
    const Question* q = corpus.find_question(question_id);
    if (!q) throw ValidationError("no such question in corpus: " + question_id);
    return *q;
}

const Rubric& starting_rubric(const Corpus& corpus, const Question& q) {
    if (const Rubric* fine = corpus.rubric_for(q.id, Granularity::fine_human)) return *fine;
    if (const Rubric* coarse = corpus.rubric_for(q.id, Granularity::coarse_human)) return *coarse;
    throw ValidationError("corpus provides no human rubric for question " + q.id);
}

namespace {

GradingStrategy effective_strategy(const RunConfig& config, const Question& q) {
    GradingStrategy s = config.strategy;
    if (auto it = config.batch_size_overrides.find(q.id);
        it != config.batch_size_overrides.end()) {
        s.batch_size = it->second;
    }
    return s;
}

void persist_grading(RunStore& store, const GradingOutcome& outcome, const char* record_kind) {
    for (const auto& rec : outcome.records) {
        json j = grade_record_to_json(rec);
        j["kind"] = record_kind;
        store.append(RunStore::kGrades, j);
    }
    for (const auto& f : outcome.failures) {
        store.append(RunStore::kGrades, json{{"kind", "grade_failure"},
                                             {"answer_id", f.answer_id},
                                             {"repetition", f.repetition},
                                             {"message", f.message}});
    }
}

void persist_review(RunStore& store, const ReviewOutcome& outcome) {
    for (const auto& f : outcome.findings) {
        json j = finding_to_json(f);
        j["kind"] = "finding";
        store.append(RunStore::kReviews, j);
    }
    for (const auto& g : outcome.unreviewed_groups) {
        store.append(RunStore::kReviews, json{{"kind", "unreviewed"}, {"group_id", g}});
    }
    for (const auto& w : outcome.warnings) {
        store.append(RunStore::kReviews, json{{"kind", "warning"}, {"message", w}});
    }
    store.append(RunStore::kReviews,
                 json{{"kind", "regrade_queue"}, {"answer_ids", outcome.regrade_queue}});
}

// Aggregates LLM scores vs the resolved human scores, one row per repetition.
ExperimentReport evaluate_records(const Corpus& corpus, const Question& q,
                                  const std::vector<GradeRecord>& records,
                                  const std::string& fingerprint) {
    if (records.empty()) throw ValidationError("no grade records to evaluate");
    int max_rep = 0;
    for (const auto& r : records) max_rep = std::max(max_rep, r.repetition);

    std::vector<RepetitionResult> rows;
    for (int rep = 0; rep <= max_rep; ++rep) {
        ScorePairVector v;
        v.full_points = q.full_points;
        std::vector<const GradeRecord*> of_rep;
        for (const auto& r : records) {
            if (r.repetition == rep) of_rep.push_back(&r);
        }
        std::sort(of_rep.begin(), of_rep.end(), [](const GradeRecord* a, const GradeRecord* b) {
            return a->answer_id < b->answer_id;
        });
        for (const GradeRecord* r : of_rep) {
            const auto human = corpus.human_final(r->answer_id);
            if (!human) continue;  // unlabeled answers cannot be evaluated
            v.human.push_back(*human);
            v.predicted.push_back(r->score);
        }
        if (v.human.empty()) continue;
        rows.push_back({fingerprint, compute_metrics(v)});
    }
    return aggregate(rows);
}

}  // namespace

std::vector<Rubric> stage_rubric(const RunConfig& config, const Corpus& corpus, const Question& q,
                                 Backend& backend, RunStore& store) {
    GenerationConfig gen = config.generation;
    gen.seed = derive_seed(config.master_seed, "rubric-stage");
    const GenerationResult result = run_generation(q, starting_rubric(corpus, q), corpus, gen,
                                                   backend, config.labels, &store,
                                                   config.parallelism);
    return result.chain;
}

GradingOutcome stage_grade(const RunConfig& config, const Corpus& corpus, const Question& q,
                           const Rubric& rubric, Backend& backend, RunStore& store) {
    const GradingOutcome outcome =
        run_grading(corpus, q, rubric, effective_strategy(config, q), config.repetitions, backend,
                    derive_seed(config.master_seed, "grade-stage"), config.parallelism);
    persist_grading(store, outcome, "grade");
    return outcome;
}

std::vector<ScoredPair> review_basis(const RunStore& store, const std::string&) {
    const auto loaded = store.load(RunStore::kGrades);
    std::map<std::string, double> latest;
    for (const auto& j : loaded.records) {
        const std::string kind = j.value("kind", "grade");
        if (kind == "grade" || kind == "injected" || kind == "regrade") {
            latest[j.at("answer_id").get<std::string>()] = j.at("score").get<double>();
        }
    }
    std::vector<ScoredPair> pairs(latest.begin(), latest.end());
    return pairs;
}

Rubric stored_final_rubric(const RunStore& store, const std::string& question_id) {
    const auto loaded = store.load(RunStore::kRubrics);
    std::optional<Rubric> best;
    for (const auto& j : loaded.records) {
        Rubric r = rubric_from_json(j);
        if (r.question_id != question_id) continue;
        if (!best || r.version > best->version) best = std::move(r);
    }
    if (!best) throw ValidationError("run store has no rubric for question " + question_id);
    return *best;
}

ReviewOutcome stage_review(const RunConfig& config, const Corpus& corpus, const Question& q,
                           const Rubric& rubric, Backend& backend, RunStore& store) {
    ReviewConfig rcfg = config.review;
    rcfg.seed = derive_seed(config.master_seed, "review-stage");
    const auto pairs = review_basis(store, q.id);
    if (pairs.size() < 2) {
        throw ValidationError("review needs at least two graded answers in the run store");
    }
    const ReviewOutcome outcome =
        run_review(q, rubric, pairs, rcfg, backend, corpus, config.parallelism);
    persist_review(store, outcome);
    return outcome;
}

PipelineSummary run_pipeline(const RunConfig& config, const std::string& until) {
    // validate everything config-driven before touching any backend
    const Corpus corpus = load_corpus(config.corpus);
    const Question& q = resolve_question(corpus, config.question_id);
    validate(config.generation, corpus.answers_for(q.id).size());
    validate(effective_strategy(config, q));
    validate(config.review);
    if (config.repetitions < 1) throw ValidationError("repetitions must be >= 1");

    const std::string fingerprint = config_fingerprint(config);
    RunStore store(config.store_root, config.run_id);
    const std::string existing = store.checkpoint_fingerprint();
    if (!existing.empty() && existing != fingerprint) {
        throw ValidationError("run '" + config.run_id +
                              "' already exists with a different config; choose a new run id");
    }
    auto completed = store.completed_stages();
    auto is_done = [&](const std::string& stage) {
        return std::find(completed.begin(), completed.end(), stage) != completed.end();
    };

    const auto backend = make_backend(config.backend, &corpus);
    PipelineSummary summary;
    summary.run_id = config.run_id;
    summary.store_dir = store.dir().string();

    auto finish = [&]() {
        const auto rubrics = store.load(RunStore::kRubrics);
        summary.rubric_versions = static_cast<int>(rubrics.records.size());
        const auto grades = store.load(RunStore::kGrades);
        for (const auto& j : grades.records) {
            const std::string kind = j.value("kind", "grade");
            if (kind == "grade") ++summary.grade_records;
            if (kind == "grade_failure") ++summary.grade_failures;
        }
        const auto reviews = store.load(RunStore::kReviews);
        for (const auto& j : reviews.records) {
            const std::string kind = j.value("kind", "");
            if (kind == "finding") ++summary.findings;
            if (kind == "regrade_queue") {
                summary.regrade_queue = j.at("answer_ids").get<std::vector<std::string>>();
            }
        }
        const auto reports = store.load(RunStore::kReports);
        for (const auto& j : reports.records) {
            if (j.value("kind", "") != "report") continue;
            if (j.value("label", "") == "grades") summary.report = report_from_json(j["report"]);
            if (j.value("label", "") == "after_regrade") {
                summary.regrade_report = report_from_json(j["report"]);
            }
        }
        return summary;
    };

    // rubric stage
    if (!is_done("rubric")) {
        store.reset_kind(RunStore::kRubrics);
        stage_rubric(config, corpus, q, *backend, store);
        store.mark_stage("rubric", fingerprint);
    }
    if (until == "rubric") return finish();
    const Rubric final_rubric = stored_final_rubric(store, q.id);

    // grade stage
    if (!is_done("grade")) {
        store.reset_kind(RunStore::kGrades);
        stage_grade(config, corpus, q, final_rubric, *backend, store);
        store.mark_stage("grade", fingerprint);
    }
    if (until == "grade") return finish();

    // review stage
    if (!is_done("review")) {
        store.reset_kind(RunStore::kReviews);
        stage_review(config, corpus, q, final_rubric, *backend, store);
        store.mark_stage("review", fingerprint);
    }
    if (until == "review") return finish();

    // optional regrade of flagged answers
    if (config.regrade && !is_done("regrade")) {
        std::vector<std::string> queue;
        for (const auto& j : store.load(RunStore::kReviews).records) {
            if (j.value("kind", "") == "regrade_queue") {
                queue = j.at("answer_ids").get<std::vector<std::string>>();
            }
        }
        if (!queue.empty()) {
            Corpus subset = corpus;
            subset.answers.clear();
            const std::set<std::string> wanted(queue.begin(), queue.end());
            for (const auto& a : corpus.answers) {
                if (wanted.count(a.id)) subset.answers.push_back(a);
            }
            const GradingOutcome regraded = run_grading(
                subset, q, final_rubric, effective_strategy(config, q), 1, *backend,
                derive_seed(config.master_seed, "regrade-stage"), config.parallelism);
            persist_grading(store, regraded, "regrade");
        }
        store.mark_stage("regrade", fingerprint);
    }

    // eval stage
    if (!is_done("eval")) {
        store.reset_kind(RunStore::kReports);
        std::vector<GradeRecord> records;
        std::map<std::string, GradeRecord> regraded;
        for (const auto& j : store.load(RunStore::kGrades).records) {
            const std::string kind = j.value("kind", "grade");
            if (kind == "grade") {
                json plain = j;
                plain.erase("kind");
                records.push_back(grade_record_from_json(plain));
            } else if (kind == "regrade") {
                json plain = j;
                plain.erase("kind");
                GradeRecord r = grade_record_from_json(plain);
                regraded[r.answer_id] = r;
            }
        }
        const ExperimentReport report =
            evaluate_records(corpus, q, records, fingerprint + "/" + q.id);
        store.append(RunStore::kReports,
                     json{{"kind", "report"}, {"label", "grades"}, {"report", report_to_json(report)}});
        if (!regraded.empty()) {
            std::vector<GradeRecord> final_records;
            std::set<std::string> seen;
            for (const auto& r : records) {
                if (r.repetition != 0 || seen.count(r.answer_id)) continue;
                seen.insert(r.answer_id);
                auto it = regraded.find(r.answer_id);
                GradeRecord chosen = it != regraded.end() ? it->second : r;
                chosen.repetition = 0;
                final_records.push_back(std::move(chosen));
            }
            const ExperimentReport after = evaluate_records(
                corpus, q, final_records, fingerprint + "/" + q.id + "/after_regrade");
            store.append(RunStore::kReports, json{{"kind", "report"},
                                                  {"label", "after_regrade"},
                                                  {"report", report_to_json(after)}});
        }
        store.mark_stage("eval", fingerprint);
    }
    return finish();
}

std::string experiment_rubrics(const RunConfig& config) {
    const Corpus corpus = load_corpus(config.corpus);
    const Question& q = resolve_question(corpus, config.question_id);
    const auto backend = make_backend(config.backend, &corpus);
    RunStore store(config.store_root, config.run_id);
    const std::string fingerprint = config_fingerprint(config);

    std::vector<std::pair<std::string, MetricRow>> table_rows;
    std::ostringstream notes;

    auto grade_and_report = [&](const std::string& label, const Rubric& rubric) {
        const GradingOutcome outcome = run_grading(
            corpus, q, rubric, effective_strategy(config, q), config.repetitions, *backend,
            derive_seed(config.master_seed, "exp-rubrics/" + label), config.parallelism);
        const ExperimentReport report =
            evaluate_records(corpus, q, outcome.records, fingerprint + "/" + label);
        store.append(RunStore::kReports,
                     json{{"kind", "report"}, {"label", label}, {"report", report_to_json(report)}});
        table_rows.push_back({label, report.mean});
    };

    auto generated_rubric = [&](SamplingMethod method, const std::string& label) {
        GenerationConfig gen = config.generation;
        gen.method = method;
        gen.seed = derive_seed(config.master_seed, "exp-rubrics-gen/" + label);
        const GenerationResult result =
            run_generation(q, starting_rubric(corpus, q), corpus, gen, *backend, config.labels,
                           &store, config.parallelism);
        return result.chain.back();
    };

    // The open-ended corpora carry both human rubrics; a Mohler-shaped corpus
    // has only the standard answer, so it compares coarse vs one generated
    // rubric.
    if (corpus.tag == DatasetTag::mohler) {
        grade_and_report("coarse-human", *corpus.rubric_for(q.id, Granularity::coarse_human));
        const std::string label = config.generation.method == SamplingMethod::random
                                      ? "generated-random"
                                      : "generated-distribution";
        grade_and_report(label, generated_rubric(config.generation.method, label));
    } else {
        for (const auto& [granularity, label] :
             std::vector<std::pair<Granularity, std::string>>{
                 {Granularity::coarse_human, "coarse-human"},
                 {Granularity::fine_human, "fine-human"}}) {
            const Rubric* rubric = corpus.rubric_for(q.id, granularity);
            if (!rubric) {
                notes << "warning: corpus has no " << label << " rubric for " << q.id
                      << "; row skipped\n";
                continue;
            }
            grade_and_report(label, *rubric);
        }
        grade_and_report("generated-random",
                         generated_rubric(SamplingMethod::random, "generated-random"));
        grade_and_report("generated-distribution",
                         generated_rubric(SamplingMethod::distribution_aware,
                                          "generated-distribution"));
    }
    return notes.str() + render_comparison(table_rows);
}

std::string experiment_strategies(const RunConfig& config) {
    const Corpus corpus = load_corpus(config.corpus);
    const Question& q = resolve_question(corpus, config.question_id);
    const auto backend = make_backend(config.backend, &corpus);
    RunStore store(config.store_root, config.run_id);
    const std::string fingerprint = config_fingerprint(config);
    const Rubric& rubric = starting_rubric(corpus, q);

    std::vector<std::pair<std::string, MetricRow>> table_rows;
    for (const StrategyKind kind :
         {StrategyKind::baseline, StrategyKind::one_shot, StrategyKind::self_reflection,
          StrategyKind::batching}) {
        GradingStrategy strategy = effective_strategy(config, q);
        strategy.kind = kind;
        const std::string label = to_string(kind);
        const GradingOutcome outcome = run_grading(
            corpus, q, rubric, strategy, config.repetitions, *backend,
            derive_seed(config.master_seed, "exp-strategies/" + label), config.parallelism);
        const ExperimentReport report =
            evaluate_records(corpus, q, outcome.records, fingerprint + "/" + label);
        store.append(RunStore::kReports,
                     json{{"kind", "report"}, {"label", label}, {"report", report_to_json(report)}});
        table_rows.push_back({label, report.mean});
    }
    std::ostringstream head;
    head << "strategy comparison, question " << q.id << ", batch size "
         << effective_strategy(config, q).batch_size << "\n";
    return head.str() + render_comparison(table_rows);
}

std::string experiment_review(const RunConfig& config, double fraction,
                              const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw ValidationError("experiment needs at least one seed");
    const Corpus corpus = load_corpus(config.corpus);
    const Question& q = resolve_question(corpus, config.question_id);
    const auto backend = make_backend(config.backend, &corpus);
    RunStore store(config.store_root, config.run_id);
    const Rubric& rubric = starting_rubric(corpus, q);

    double sum_single = 0.0;
    double sum_regrouped = 0.0;
    for (const std::uint64_t seed : seeds) {
        GradingStrategy baseline;
        const GradingOutcome graded =
            run_grading(corpus, q, rubric, baseline, 1, *backend,
                        derive_seed(seed, "exp-review-grade"), config.parallelism);
        std::vector<ScoredAnswer> pairs;
        for (const auto& rec : graded.records) {
            pairs.push_back({rec.answer_id, rec.score, {ScorerKind::llm, -1}, {}});
        }
        const InjectionResult injected = inject_anomalies(pairs, q.full_points, fraction, seed);
        std::vector<ScoredPair> basis;
        for (const auto& p : injected.pairs) basis.push_back({p.answer_id, p.score});

        ReviewConfig single_cfg = config.review;
        single_cfg.rounds = ReviewRounds::single;
        single_cfg.seed = derive_seed(seed, "exp-review-single");
        const ReviewOutcome single =
            run_review(q, rubric, basis, single_cfg, *backend, corpus, config.parallelism);

        ReviewConfig regroup_cfg = config.review;
        regroup_cfg.rounds = ReviewRounds::regrouped;
        regroup_cfg.seed = derive_seed(seed, "exp-review-regroup");
        const ReviewOutcome regrouped =
            run_review(q, rubric, basis, regroup_cfg, *backend, corpus, config.parallelism);

        const double acc_single =
            detection_accuracy(single.regrade_queue, injected.records, basis.size());
        const double acc_regrouped =
            detection_accuracy(regrouped.regrade_queue, injected.records, basis.size());
        sum_single += acc_single;
        sum_regrouped += acc_regrouped;
        store.append(RunStore::kReports, json{{"kind", "review_accuracy"},
                                              {"seed", seed},
                                              {"fraction", fraction},
                                              {"single", acc_single},
                                              {"regrouped", acc_regrouped}});
    }
    const double n = static_cast<double>(seeds.size());
    std::ostringstream out;
    out << "anomaly detection accuracy, question " << q.id << ", fraction " << fraction << ", "
        << seeds.size() << " seed(s)\n"
        << "| method | mean accuracy |\n|---|---|\n"
        << "| single-round | " << cell2(sum_single / n) << " |\n"
        << "| regrouped | " << cell2(sum_regrouped / n) << " |\n";
    return out.str();
}

std::vector<InjectionRecord> cmd_inject(const RunConfig& config, double fraction,
                                        std::uint64_t seed) {
    const Corpus corpus = load_corpus(config.corpus);
    const Question& q = resolve_question(corpus, config.question_id);
    RunStore store(config.store_root, config.run_id);

    const auto basis = review_basis(store, q.id);
    if (basis.empty()) {
        throw ValidationError("run store has no grades to inject into; grade first");
    }
    std::vector<ScoredAnswer> pairs;
    for (const auto& [id, score] : basis) pairs.push_back({id, score, {ScorerKind::llm, -1}, {}});
    const InjectionResult result = inject_anomalies(pairs, q.full_points, fraction, seed);

    std::set<std::string> changed;
    for (const auto& r : result.records) changed.insert(r.answer_id);
    for (const auto& p : result.pairs) {
        if (!changed.count(p.answer_id)) continue;
        json j = scored_answer_to_json(p);
        j["kind"] = "injected";
        store.append(RunStore::kGrades, j);
    }
    for (const auto& r : result.records) {
        store.append(RunStore::kInjections, injection_to_json(r));
    }
    return result.records;
}

std::string cmd_eval(const RunConfig& config, TableFormat format) {
    RunStore store(config.store_root, config.run_id);
    const auto reports = store.load(RunStore::kReports);
    std::optional<ExperimentReport> latest;
    for (const auto& j : reports.records) {
        if (j.value("kind", "") == "report" && j.value("label", "") == "grades") {
            latest = report_from_json(j["report"]);
        }
    }
    if (!latest) {
        // no eval stage ran yet; evaluate what the store holds
        const Corpus corpus = load_corpus(config.corpus);
        const Question& q = resolve_question(corpus, config.question_id);
        std::vector<GradeRecord> records;
        for (const auto& j : store.load(RunStore::kGrades).records) {
            if (j.value("kind", "grade") != "grade") continue;
            json plain = j;
            plain.erase("kind");
            records.push_back(grade_record_from_json(plain));
        }
        latest = evaluate_records(corpus, q, records, config_fingerprint(config) + "/" + q.id);
        store.append(RunStore::kReports, json{{"kind", "report"},
                                              {"label", "grades"},
                                              {"report", report_to_json(*latest)}});
    }
    return emit_table(*latest, format);
}

}  // namespace gradelab
