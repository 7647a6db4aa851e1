// Acceptance suite: one criterion per entry, one pass/fail line each.
// Everything runs offline against the shipped fixture; the wire check talks
// to a local stub server only.

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "gradelab/corpus.hpp"
#include "gradelab/errors.hpp"
#include "gradelab/grader.hpp"
#include "gradelab/llm.hpp"
#include "gradelab/metrics.hpp"
#include "gradelab/pipeline.hpp"
#include "gradelab/review.hpp"
#include "gradelab/rng.hpp"
#include "gradelab/rubric_gen.hpp"
#include "test_support.hpp"

using namespace gradelab;
using nlohmann::json;
namespace ts = testsupport;
namespace fs = std::filesystem;

namespace {

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void expect(bool condition, const std::string& message) {
    if (!condition) throw Failure(message);
}

std::string fmt(double x) {
    std::ostringstream out;
    out << x;
    return out.str();
}

// --- 1 -----------------------------------------------------------------

namespace bruteforce {

double mae(const std::vector<double>& a, const std::vector<double>& b) {
    long double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += fabsl((long double)a[i] - (long double)b[i]);
    return (double)(acc / (long double)a.size());
}

double rmse(const std::vector<double>& a, const std::vector<double>& b) {
    long double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const long double d = (long double)a[i] - (long double)b[i];
        acc += d * d;
    }
    return (double)sqrtl(acc / (long double)a.size());
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const long double n = (long double)a.size();
    long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sx += a[i];
        sy += b[i];
        sxx += (long double)a[i] * a[i];
        syy += (long double)b[i] * b[i];
        sxy += (long double)a[i] * b[i];
    }
    return (double)((n * sxy - sx * sy) / (sqrtl(n * sxx - sx * sx) * sqrtl(n * syy - sy * sy)));
}

}  // namespace bruteforce

void criterion_metric_oracle() {
    auto rng = seeded_rng(424242);
    for (int i = 0; i < 1000; ++i) {
        ScorePairVector v;
        v.full_points = std::vector<double>{5, 15, 19, 20}[uniform_below(rng, 4)];
        const std::size_t n = 2 + uniform_below(rng, 49);
        for (std::size_t j = 0; j < n; ++j) {
            v.human.push_back(uniform_range(rng, 0.0, v.full_points));
            v.predicted.push_back(uniform_range(rng, 0.0, v.full_points));
        }
        const double m = mae(v);
        const double r = rmse(v);
        expect(std::abs(m - bruteforce::mae(v.human, v.predicted)) <= 1e-12, "mae mismatch");
        expect(std::abs(r - bruteforce::rmse(v.human, v.predicted)) <= 1e-12, "rmse mismatch");
        expect(std::abs(nrmse(v) - bruteforce::rmse(v.human, v.predicted) / v.full_points) <=
                   1e-12,
               "nrmse mismatch");
        expect(std::abs(pearson(v) - bruteforce::pearson(v.human, v.predicted)) <= 1e-12,
               "pearson mismatch");
        expect(r >= m - 1e-12, "rmse must dominate mae");
    }
}

// --- 2 -----------------------------------------------------------------

void criterion_paper_numbers() {
    auto rounded2 = [](double x) { return std::round(x * 100.0) / 100.0; };
    const double q1_coarse = nrmse_from_rmse(8.98, 19.0);
    const double q1_fine = nrmse_from_rmse(5.62, 19.0);
    expect(rounded2(q1_coarse) == 0.47,
           "nrmse(8.98, 19) rounded to " + fmt(rounded2(q1_coarse)) + ", want 0.47");
    expect(rounded2(q1_fine) == 0.30,
           "nrmse(5.62, 19) rounded to " + fmt(rounded2(q1_fine)) + ", want 0.30");
}

// --- 3 -----------------------------------------------------------------

void criterion_sampler_fidelity() {
    auto rng = seeded_rng(515151);
    const int n = 40;
    const int k = 5;
    const double full = 15.0;
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<ScoredAnswer> scores;
        for (int i = 0; i < n; ++i) {
            char id[8];
            std::snprintf(id, sizeof(id), "a%02d", i);
            scores.push_back({id, uniform_range(rng, 0.0, full), {ScorerKind::llm, -1}, {}});
        }
        const int m = std::vector<int>{5, 8, 10}[uniform_below(rng, 3)];
        const ScoreDistribution dist = stratify(scores, k, full);
        const Allocation alloc = allocate(dist, m);

        int capacity = 0;
        int total = 0;
        for (int l = 0; l < k; ++l) {
            const int count = static_cast<int>(dist.strata[l].answer_ids.size());
            capacity += count;
            const int expected_ceil =
                count == 0 ? 0 : static_cast<int>(std::ceil((double)count * m / n));
            expect(alloc.ceil_quota[l] == expected_ceil,
                   "pre-trim quota " + fmt(alloc.ceil_quota[l]) + " != ceil(p*m) " +
                       fmt(expected_ceil));
            expect(alloc.quota[l] <= count, "quota exceeds stratum population");
            total += alloc.quota[l];
        }
        expect(total == std::min(m, capacity), "post-trim total " + fmt(total) + " != min(m, capacity)");
    }
}

// --- 4 -----------------------------------------------------------------

RunConfig fixture_run_config(const fs::path& store_root, const std::string& run_id) {
    RunConfig config;
    config.run_id = run_id;
    config.master_seed = 42;
    config.store_root = store_root.string();
    config.corpus.path = (ts::fixture_dir() / "os").string();
    config.corpus.format = DatasetTag::os;
    config.backend.kind = BackendKind::simulated;
    config.backend.noise_sigma = 0.0;
    config.generation.sample_size = 5;
    config.generation.iterations = 2;
    config.repetitions = 1;
    return config;
}

void criterion_pipeline_determinism() {
    ts::TempDir tmp;
    const fs::path fixture = tmp.path() / "replies.jsonl";
    RunConfig record = fixture_run_config(tmp.path() / "stores", "recording");
    record.backend.record_path = fixture.string();
    run_pipeline(record);

    RunConfig replay = fixture_run_config(tmp.path() / "stores", "r1");
    replay.backend.kind = BackendKind::scripted;
    replay.backend.fixture_path = fixture.string();
    run_pipeline(replay);
    replay.run_id = "r2";
    run_pipeline(replay);

    std::map<std::string, std::string> a, b;
    for (const char* run : {"r1", "r2"}) {
        for (const auto& entry :
             fs::recursive_directory_iterator(tmp.path() / "stores" / run)) {
            if (!entry.is_regular_file()) continue;
            const std::string rel =
                fs::relative(entry.path(), tmp.path() / "stores" / run).string();
            (run == std::string("r1") ? a : b)[rel] = ts::read_file(entry.path());
        }
    }
    expect(!a.empty(), "run store r1 is empty");
    expect(a == b, "replayed run stores are not byte-identical");
}

// --- 5 -----------------------------------------------------------------

void criterion_zero_noise_sanity() {
    ts::TempDir tmp;
    const PipelineSummary summary = run_pipeline(fixture_run_config(tmp.path(), "clean"));
    expect(summary.report.has_value(), "pipeline produced no report");
    expect(summary.report->mean.mae == 0.0,
           "zero-noise MAE is " + fmt(summary.report->mean.mae) + ", want 0");
    expect(summary.report->mean.rmse == 0.0,
           "zero-noise RMSE is " + fmt(summary.report->mean.rmse) + ", want 0");
    expect(summary.regrade_queue.empty(), "zero-noise review queue is not empty");
}

// --- 6 -----------------------------------------------------------------

void criterion_review_direction() {
    const Corpus corpus = ts::os_fixture();
    const Question& q = *corpus.find_question("q1");
    const Rubric& rubric = *corpus.rubric_for("q1", Granularity::fine_human);
    const double fraction = 0.2;

    BackendConfig bc;
    bc.kind = BackendKind::simulated;
    bc.noise_sigma = 0.1 * q.full_points;
    const auto backend = make_backend(bc, &corpus);

    double sum_single = 0, sum_regrouped = 0;
    const int trials = 20;
    for (std::uint64_t seed = 1; seed <= trials; ++seed) {
        GradingStrategy baseline;
        const GradingOutcome graded = run_grading(
            corpus, q, rubric, baseline, 1, *backend, derive_seed(seed, "exp-review-grade"), 4);
        expect(graded.records.size() == 40, "grading pass incomplete");
        std::vector<ScoredAnswer> pairs;
        for (const auto& rec : graded.records) {
            pairs.push_back({rec.answer_id, rec.score, {ScorerKind::llm, -1}, {}});
        }
        const InjectionResult injected = inject_anomalies(pairs, q.full_points, fraction, seed);
        std::vector<ScoredPair> basis;
        for (const auto& p : injected.pairs) basis.push_back({p.answer_id, p.score});

        ReviewConfig single_cfg;
        single_cfg.group_size = 10;
        single_cfg.subgroup_count = 2;
        single_cfg.rounds = ReviewRounds::single;
        single_cfg.seed = derive_seed(seed, "review-single");
        const double acc_single = detection_accuracy(
            run_review(q, rubric, basis, single_cfg, *backend, corpus).regrade_queue,
            injected.records, basis.size());

        ReviewConfig regroup_cfg = single_cfg;
        regroup_cfg.rounds = ReviewRounds::regrouped;
        regroup_cfg.seed = derive_seed(seed, "review-regroup");
        const double acc_regrouped = detection_accuracy(
            run_review(q, rubric, basis, regroup_cfg, *backend, corpus).regrade_queue,
            injected.records, basis.size());

        expect(acc_single >= 0.0 && acc_single <= 1.0, "single accuracy out of range");
        expect(acc_regrouped >= 0.0 && acc_regrouped <= 1.0, "regrouped accuracy out of range");
        sum_single += acc_single;
        sum_regrouped += acc_regrouped;
    }
    const double mean_single = sum_single / trials;
    const double mean_regrouped = sum_regrouped / trials;
    expect(mean_regrouped >= mean_single,
           "regrouped mean " + fmt(mean_regrouped) + " below single-round mean " +
               fmt(mean_single));
    expect(mean_single >= 1.0 - fraction,
           "single-round mean " + fmt(mean_single) + " below the all-negative baseline 0.80");
    expect(mean_regrouped >= 1.0 - fraction,
           "regrouped mean " + fmt(mean_regrouped) + " below the all-negative baseline 0.80");
    expect(mean_single <= 1.0 && mean_regrouped <= 1.0, "accuracy exceeded 1.0");
}

// --- 7 -----------------------------------------------------------------

void criterion_batch_completeness() {
    const Corpus corpus = ts::os_fixture();
    const Question& q = *corpus.find_question("q1");
    const Rubric& rubric = *corpus.rubric_for("q1", Granularity::fine_human);
    BackendConfig bc;
    bc.kind = BackendKind::simulated;
    const auto backend = make_backend(bc, &corpus);
    GradingStrategy strategy;
    strategy.kind = StrategyKind::batching;

    for (const int batch_size : {10, 20, 30, 40}) {
        const GradingOutcome outcome = grade_batch(q, rubric, corpus.answers_for("q1"),
                                                   batch_size, *backend, corpus, strategy);
        expect(outcome.failures.empty(),
               "batch size " + fmt(batch_size) + " produced failures");
        expect(outcome.records.size() == 40,
               "batch size " + fmt(batch_size) + " produced " + fmt(outcome.records.size()) +
                   " records, want 40");
        std::set<std::string> ids;
        for (const auto& rec : outcome.records) ids.insert(rec.answer_id);
        expect(ids.size() == 40, "duplicate answer ids in batch output");
    }

    // one scripted miss followed by a complete re-ask reply
    const auto answers = corpus.answers_for("q1");
    ScriptedBackend scripted;
    GradingStrategy batching10 = strategy;
    batching10.batch_size = 10;
    for (std::size_t start = 0; start < answers.size(); start += 10) {
        const std::vector<const Answer*> chunk(answers.begin() + start,
                                               answers.begin() + start + 10);
        const auto envelope =
            build_grading_prompt(batching10, q, rubric, chunk, {}, corpus).task_envelope;
        std::vector<std::pair<std::string, double>> full_reply;
        for (const Answer* a : chunk) full_reply.push_back({a->id, *corpus.human_final(a->id)});
        if (start == 0) {
            auto missing_one = full_reply;
            missing_one.pop_back();
            scripted.enqueue(envelope, ts::grade_reply_json(missing_one));
        }
        scripted.enqueue(envelope, ts::grade_reply_json(full_reply));
    }
    const GradingOutcome outcome =
        grade_batch(q, rubric, answers, 10, scripted, corpus, batching10);
    expect(outcome.failures.empty(), "re-ask fixture still produced failures");
    expect(outcome.records.size() == 40, "re-ask fixture produced " +
                                             fmt(outcome.records.size()) + " records, want 40");
    std::set<std::string> ids;
    for (const auto& rec : outcome.records) ids.insert(rec.answer_id);
    expect(ids.size() == 40, "duplicate ids under the re-ask fixture");
    expect(scripted.call_log().size() == 5, "expected 4 batch requests plus 1 re-ask");
}

// --- 8 -----------------------------------------------------------------

void criterion_rubric_chain() {
    const Corpus corpus = ts::os_fixture();
    const Question& q = *corpus.find_question("q1");
    const Rubric& r0 = *corpus.rubric_for("q1", Granularity::fine_human);
    BackendConfig bc;
    bc.kind = BackendKind::simulated;
    const auto backend = make_backend(bc, &corpus);

    GenerationConfig cfg;
    cfg.method = SamplingMethod::distribution_aware;
    cfg.sample_size = 5;
    cfg.iterations = 2;
    cfg.strata_count = 5;
    cfg.seed = 77;
    cfg.exclude_used = true;

    const GenerationResult result =
        run_generation(q, r0, corpus, cfg, *backend, LabelSource::dataset_lookup);
    expect(result.chain.size() == 3, "chain has " + fmt(result.chain.size()) + " versions, want 3");
    for (int v = 0; v < 3; ++v) {
        expect(result.chain[v].version == v, "versions are not consecutive");
    }
    expect(!result.chain[0].lineage.has_value(), "version 0 must have no lineage");
    for (int v = 1; v < 3; ++v) {
        expect(result.chain[v].lineage == rubric_ref(result.chain[v - 1]),
               "lineage pointer of v" + fmt(v) + " does not resolve to v" + fmt(v - 1));
    }
    std::set<std::string> labeled;
    for (const auto& labels : result.labels) {
        for (const auto& pair : labels) labeled.insert(pair.answer_id);
    }
    expect(labeled.size() == 10, "labeled " + fmt(labeled.size()) + " distinct answers, want 10");
}

// --- 9 -----------------------------------------------------------------

void criterion_wire_conformance() {
    setenv("GRADELAB_ACCEPT_KEY", "sk-acceptance", 1);

    httplib::Server server;
    std::atomic<int> hits{0};
    json seen_body;
    std::string seen_auth;
    int mode = 0;  // 0: ok, 1: always 503, 2: always 401
    server.Post("/v1/chat/completions", [&](const httplib::Request& req,
                                            httplib::Response& res) {
        ++hits;
        seen_body = json::parse(req.body);
        seen_auth = req.get_header_value("Authorization");
        if (mode == 1) {
            res.status = 503;
            res.set_content("busy", "text/plain");
        } else if (mode == 2) {
            res.status = 401;
            res.set_content("denied", "text/plain");
        } else {
            res.set_content(
                json{{"model", "stub"},
                     {"choices",
                      json::array({{{"message", {{"role", "assistant"}, {"content", "ok"}}}}})}}
                    .dump(),
                "application/json");
        }
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread thread([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    BackendConfig config;
    config.kind = BackendKind::openai_compatible;
    config.base_url = "http://127.0.0.1:" + std::to_string(port) + "/v1";
    config.model = "stub";
    config.api_key_env = "GRADELAB_ACCEPT_KEY";
    config.retries = 3;
    config.backoff_ms = 1;

    TaskEnvelope envelope;
    envelope.task = TaskKind::grade;
    envelope.question_id = "q1";
    envelope.answer_ids = {"a01"};
    const PromptBundle bundle = make_bundle("system text", {"user text"}, envelope, 0.5, 200);

    try {
        const auto backend = make_backend(config);
        expect(backend->complete(bundle).text == "ok", "stub reply not surfaced");
        expect(hits == 1, "success path needed more than one request");
        expect(seen_auth == "Bearer sk-acceptance", "missing or wrong bearer token");
        expect(seen_body.contains("model") && seen_body["model"] == "stub", "body lacks model");
        expect(seen_body.contains("temperature") && seen_body["temperature"] == 0.5,
               "body lacks temperature");
        expect(seen_body.contains("messages") && seen_body["messages"].size() == 2,
               "body lacks the message sequence");

        mode = 1;
        hits = 0;
        bool threw = false;
        try {
            backend->complete(bundle);
        } catch (const BackendError&) {
            threw = true;
        }
        expect(threw, "503 storm must end in a transport error");
        expect(hits == 4, "503 handling made " + fmt(hits.load()) + " attempts, want retries+1 = 4");

        mode = 2;
        hits = 0;
        threw = false;
        try {
            backend->complete(bundle);
        } catch (const BackendError& e) {
            threw = e.kind == BackendError::Kind::auth;
        }
        expect(threw, "401 must raise an auth error");
        expect(hits == 1, "401 handling made " + fmt(hits.load()) + " attempts, want exactly 1");
    } catch (...) {
        server.stop();
        thread.join();
        throw;
    }
    server.stop();
    thread.join();
}

// --- 10 ----------------------------------------------------------------

void criterion_loader_round_trips() {
    const Corpus os = ts::os_fixture();
    validate(os);
    ts::TempDir tmp;
    save_os_dataset(os, tmp.path() / "os");
    expect(load_os_dataset(tmp.path() / "os") == os, "OS corpus round-trip is not identity");

    const Corpus mohler = ts::mohler_fixture();
    validate(mohler);
    save_mohler_dataset(mohler, tmp.path() / "m.csv");
    expect(load_mohler_dataset(tmp.path() / "m.csv") == mohler,
           "Mohler corpus round-trip is not identity");

    const Corpus fig2 = ts::fig2_fixture();
    expect(fig2.human_final("a01").value() == 11.0,
           "grader triple (13,10,10) resolved to " + fmt(*fig2.human_final("a01")) +
               ", want 11.0");
    bool found_pair = false;
    for (const auto& a : mohler.answers) {
        std::vector<double> grades;
        for (const auto& s : mohler.human_scores) {
            if (s.answer_id == a.id && s.scorer.kind == ScorerKind::human_individual) {
                grades.push_back(s.score);
            }
        }
        if (grades == std::vector<double>{5.0, 3.0}) {
            found_pair = true;
            expect(mohler.human_final(a.id).value() == 4.0,
                   "grade pair (5,3) resolved to " + fmt(*mohler.human_final(a.id)) +
                       ", want 4.0");
        }
    }
    expect(found_pair, "fixture lacks the (5,3) grade pair");
}

}  // namespace

int main() {
    struct Criterion {
        int number;
        const char* name;
        std::function<void()> run;
    };
    const std::vector<Criterion> criteria{
        {1, "metric oracle equivalence (1000 vectors, 1e-12)", criterion_metric_oracle},
        {2, "published nrmse cross-check (8.98/19 -> 0.47, 5.62/19 -> 0.30)",
         criterion_paper_numbers},
        {3, "stratified sampler fidelity (200 seeded score sets)", criterion_sampler_fidelity},
        {4, "pipeline determinism (byte-identical replayed stores)",
         criterion_pipeline_determinism},
        {5, "zero-noise oracle sanity (MAE = RMSE = 0, empty queue)",
         criterion_zero_noise_sanity},
        {6, "review direction (regrouped >= single >= 0.80 over 20 seeds)",
         criterion_review_direction},
        {7, "batch completeness (sizes 10/20/30/40 plus one-miss re-ask)",
         criterion_batch_completeness},
        {8, "rubric chain integrity (versions 0..2, 10 distinct labels)",
         criterion_rubric_chain},
        {9, "wire conformance (body, bearer auth, 503 retries, 401 no-retry)",
         criterion_wire_conformance},
        {10, "loader round-trips (OS and Mohler, published grader means)",
         criterion_loader_round_trips},
    };

    int failures = 0;
    for (const auto& criterion : criteria) {
        const auto started = std::chrono::steady_clock::now();
        std::string error;
        try {
            criterion.run();
        } catch (const std::exception& e) {
            error = e.what();
        }
        const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                            std::chrono::steady_clock::now() - started)
                            .count();
        if (error.empty()) {
            std::printf("[PASS] %2d. %s (%lld ms)\n", criterion.number, criterion.name,
                        static_cast<long long>(ms));
        } else {
            ++failures;
            std::printf("[FAIL] %2d. %s (%lld ms)\n           %s\n", criterion.number,
                        criterion.name, static_cast<long long>(ms), error.c_str());
        }
    }
    if (failures) {
        std::printf("%d of %zu acceptance criteria failed\n", failures, criteria.size());
        return 1;
    }
    std::printf("all %zu acceptance criteria passed\n", criteria.size());
    return 0;
}
