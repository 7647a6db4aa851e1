#include "gradelab/rubric_gen.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gradelab/errors.hpp"
#include "gradelab/parallel.hpp"
#include "gradelab/rng.hpp"
#include "gradelab/run_store.hpp"

namespace gradelab {

std::string to_string(SamplingMethod m) {
    return m == SamplingMethod::random ? "random" : "distribution_aware";
}

SamplingMethod sampling_method_from_string(const std::string& s) {
    if (s == "random") return SamplingMethod::random;
    if (s == "distribution_aware" || s == "distribution") return SamplingMethod::distribution_aware;
    throw ValidationError("unknown sampling method: " + s);
}

std::string to_string(LabelSource s) {
    return s == LabelSource::dataset_lookup ? "lookup" : "interactive";
}

LabelSource label_source_from_string(const std::string& s) {
    if (s == "lookup" || s == "dataset_lookup") return LabelSource::dataset_lookup;
    if (s == "interactive") return LabelSource::interactive;
    throw ValidationError("unknown label source: " + s);
}

void validate(const GenerationConfig& cfg, std::size_t pool_size) {
    if (cfg.sample_size < 1) throw ValidationError("sample_size must be >= 1");
    if (cfg.iterations < 1) throw ValidationError("iterations must be >= 1");
    if (static_cast<std::size_t>(cfg.sample_size) >= pool_size) {
        throw ValidationError("sample_size " + std::to_string(cfg.sample_size) +
                              " must be smaller than the answer pool of " +
                              std::to_string(pool_size));
    }
    if (cfg.method == SamplingMethod::distribution_aware && cfg.strata_count < 2) {
        throw ValidationError("distribution_aware sampling needs strata_count >= 2");
    }
}

SampleBatch sample_random(const std::vector<std::string>& pool, int m, std::uint64_t seed,
                          std::set<std::string>& used, int iteration) {
    std::vector<std::string> remaining;
    for (const auto& id : pool) {
        if (!used.count(id)) remaining.push_back(id);
    }
    if (remaining.empty()) throw ValidationError("answer pool is exhausted");
    std::sort(remaining.begin(), remaining.end());

    auto rng = seeded_rng(seed);
    seeded_shuffle(remaining, rng);
    const std::size_t take = std::min<std::size_t>(remaining.size(), static_cast<std::size_t>(m));

    SampleBatch batch;
    batch.iteration = iteration;
    batch.method = SamplingMethod::random;
    batch.answer_ids.assign(remaining.begin(), remaining.begin() + take);
    std::sort(batch.answer_ids.begin(), batch.answer_ids.end());
    for (const auto& id : batch.answer_ids) used.insert(id);
    return batch;
}

InitialGrades initial_grade_all(const Question& q, const Rubric& rubric, const Corpus& corpus,
                                Backend& backend, std::uint64_t seed, int parallelism) {
    GradingStrategy baseline;
    GradingOutcome outcome =
        run_grading(corpus, q, rubric, baseline, 1, backend, seed, parallelism);
    InitialGrades result;
    for (const auto& rec : outcome.records) {
        result.scores.push_back({rec.answer_id, rec.score, {ScorerKind::llm, -1}, rec.feedback});
    }
    result.failures = std::move(outcome.failures);
    return result;
}

ScoreDistribution stratify(const std::vector<ScoredAnswer>& scores, int k, double full_points) {
    if (k < 2) throw ValidationError("stratify needs k >= 2");
    if (scores.empty()) throw ValidationError("stratify needs at least one graded answer");
    if (!(full_points > 0.0)) throw ValidationError("full_points must be positive");

    const double width = full_points / static_cast<double>(k);
    ScoreDistribution dist;
    dist.strata.resize(k);
    for (int l = 0; l < k; ++l) {
        dist.strata[l].lower = width * l;
        dist.strata[l].upper = l == k - 1 ? full_points : width * (l + 1);
    }
    for (const auto& s : scores) {
        if (s.score < 0.0 || s.score > full_points) {
            throw ValidationError("score " + std::to_string(s.score) + " outside [0, " +
                                  std::to_string(full_points) + "]");
        }
        int l = static_cast<int>(std::floor(s.score / width));
        if (l >= k) l = k - 1;  // the top edge belongs to the last stratum
        dist.strata[l].answer_ids.push_back(s.answer_id);
    }
    const double n = static_cast<double>(scores.size());
    for (auto& stratum : dist.strata) {
        std::sort(stratum.answer_ids.begin(), stratum.answer_ids.end());
        dist.proportions.push_back(static_cast<double>(stratum.answer_ids.size()) / n);
    }
    return dist;
}

Allocation allocate(const ScoreDistribution& distribution, int m) {
    const std::size_t k = distribution.strata.size();
    std::size_t total = 0;
    std::size_t nonempty = 0;
    for (const auto& s : distribution.strata) {
        total += s.answer_ids.size();
        if (!s.answer_ids.empty()) ++nonempty;
    }
    if (m < static_cast<int>(nonempty)) {
        throw ValidationError("sample size " + std::to_string(m) + " is smaller than the " +
                              std::to_string(nonempty) + " non-empty strata");
    }

    Allocation alloc;
    alloc.ceil_quota.resize(k, 0);
    for (std::size_t l = 0; l < k; ++l) {
        const std::size_t count = distribution.strata[l].answer_ids.size();
        if (count == 0) continue;
        // integer ceil of (count/total)*m, exact
        alloc.ceil_quota[l] =
            static_cast<int>((count * static_cast<std::size_t>(m) + total - 1) / total);
    }
    alloc.quota = alloc.ceil_quota;
    for (std::size_t l = 0; l < k; ++l) {
        alloc.quota[l] = std::min<int>(alloc.quota[l],
                                       static_cast<int>(distribution.strata[l].answer_ids.size()));
    }

    // The ceilings overshoot m by up to k-1; shave the largest quota first so
    // the sample keeps tracking the distribution.
    auto sum = [&] {
        int s = 0;
        for (int q : alloc.quota) s += q;
        return s;
    };
    while (sum() > m) {
        std::size_t target = k;
        for (std::size_t l = 0; l < k; ++l) {
            if (alloc.quota[l] <= 1) continue;
            if (target == k || alloc.quota[l] > alloc.quota[target]) target = l;
        }
        if (target == k) break;  // everything at its floor of 1
        --alloc.quota[target];
    }
    return alloc;
}

SampleBatch sample_distribution_aware(const Question& q, const Rubric& rubric,
                                      const Corpus& corpus, const GenerationConfig& cfg,
                                      Backend& backend, std::set<std::string>& used,
                                      int iteration, int parallelism,
                                      std::vector<GradeFailure>* failures) {
    const std::uint64_t iter_seed =
        derive_seed(cfg.seed, "distr-grade", std::to_string(iteration));
    InitialGrades grades = initial_grade_all(q, rubric, corpus, backend, iter_seed, parallelism);
    if (failures) {
        for (auto& f : grades.failures) failures->push_back(std::move(f));
    }

    std::vector<ScoredAnswer> available;
    for (const auto& s : grades.scores) {
        if (!cfg.exclude_used || !used.count(s.answer_id)) available.push_back(s);
    }
    if (available.empty()) throw ValidationError("answer pool is exhausted");

    SampleBatch batch;
    batch.iteration = iteration;
    batch.method = SamplingMethod::distribution_aware;

    if (available.size() <= static_cast<std::size_t>(cfg.sample_size)) {
        // fewer answers than the label budget: take everything
        for (const auto& s : available) batch.answer_ids.push_back(s.answer_id);
        std::sort(batch.answer_ids.begin(), batch.answer_ids.end());
        for (const auto& id : batch.answer_ids) used.insert(id);
        return batch;
    }

    const ScoreDistribution dist = stratify(available, cfg.strata_count, q.full_points);
    const Allocation alloc = allocate(dist, cfg.sample_size);
    batch.allocation = alloc.quota;

    for (std::size_t l = 0; l < dist.strata.size(); ++l) {
        const int quota = alloc.quota[l];
        if (quota == 0) continue;
        std::vector<std::string> ids = dist.strata[l].answer_ids;
        auto rng = seeded_rng(derive_seed(
            cfg.seed, "distr-sample", std::to_string(iteration) + "/" + std::to_string(l)));
        seeded_shuffle(ids, rng);
        for (int i = 0; i < quota; ++i) batch.answer_ids.push_back(ids[i]);
    }
    std::sort(batch.answer_ids.begin(), batch.answer_ids.end());
    for (const auto& id : batch.answer_ids) used.insert(id);
    return batch;
}

std::vector<LabeledPair> human_label(const SampleBatch& batch, const Corpus& corpus,
                                     LabelSource source, std::istream& in, std::ostream& out) {
    std::vector<LabeledPair> labels;
    for (const auto& id : batch.answer_ids) {
        const Answer* answer = corpus.find_answer(id);
        if (!answer) throw ValidationError("batch references unknown answer " + id);
        const Question* q = corpus.find_question(answer->question_id);

        if (source == LabelSource::dataset_lookup) {
            const auto final_score = corpus.human_final(id);
            if (!final_score) {
                throw ValidationError("no human label available for answer " + id);
            }
            labels.push_back({id, *final_score, std::nullopt});
            continue;
        }

        out << "\n--- label answer " << id << " ---\n"
            << "Question: " << (q ? q->text : answer->question_id) << "\n"
            << "Answer: " << answer->text << "\n";
        double score = 0.0;
        for (;;) {
            out << "Score [0.." << (q ? q->full_points : 0.0) << "]: " << std::flush;
            std::string line;
            if (!std::getline(in, line)) {
                throw IoError("input closed while labeling answer " + id);
            }
            try {
                std::size_t pos = 0;
                score = std::stod(line, &pos);
                if (pos == line.size() && q && score >= 0.0 && score <= q->full_points) break;
            } catch (const std::exception&) {
            }
            out << "Enter a number between 0 and " << (q ? q->full_points : 0.0) << ".\n";
        }
        out << "Rationale (optional): " << std::flush;
        std::string rationale;
        if (!std::getline(in, rationale)) rationale.clear();
        labels.push_back(
            {id, score, rationale.empty() ? std::nullopt : std::optional<std::string>(rationale)});
    }
    return labels;
}

namespace {

constexpr const char* kRubricSystem =
    "You design grading rubrics for course assignments. Given a question, the current rubric, "
    "and a set of human-graded sample answers, produce an improved rubric that stays faithful "
    "to how the human grader allocated points.";

}  // namespace

PromptBundle build_rubric_prompt(const Question& q, const Rubric& current,
                                 const std::vector<LabeledPair>& labeled_pairs,
                                 const Corpus& corpus) {
    if (labeled_pairs.empty()) {
        throw ValidationError("rubric refinement needs at least one labeled pair");
    }
    std::ostringstream content;
    content << "Question " << q.id << " (full points: " << q.full_points << "):\n"
            << q.text << "\n";
    if (q.supplementary) content << "\nSupplementary material:\n" << *q.supplementary << "\n";
    content << "\nCurrent rubric (version " << current.version << "):\n" << current.body << "\n";
    content << "\nHuman-graded sample answers:\n";
    for (const auto& pair : labeled_pairs) {
        const Answer* a = corpus.find_answer(pair.answer_id);
        content << "\nAnswer [" << pair.answer_id << "]:\n"
                << (a ? a->text : "(text unavailable)") << "\n"
                << "Human score: " << pair.score << "\n";
        if (pair.rationale) content << "Human rationale: " << *pair.rationale << "\n";
    }
    content << "\nRewrite the rubric so an examiner who has never seen these answers would "
               "reproduce the human scores. Output the complete rubric as plain text with:\n"
               "1. a sample answer, and\n"
               "2. itemized scoring criteria, each stating the points it awards; the points "
               "must total "
            << q.full_points << ".\nOutput only the rubric text.\n";

    TaskEnvelope envelope;
    envelope.task = TaskKind::generate_rubric;
    envelope.question_id = q.id;
    envelope.rubric_version = current.version;
    for (const auto& pair : labeled_pairs) envelope.answer_ids.push_back(pair.answer_id);
    std::sort(envelope.answer_ids.begin(), envelope.answer_ids.end());
    envelope.params["iteration"] = current.version + 1;
    envelope.params["rubric_body"] = current.body;
    return make_bundle(kRubricSystem, {content.str()}, std::move(envelope), kRubricTemperature,
                       kRubricMaxTokens);
}

Rubric refine_rubric(const Rubric& current, const std::vector<LabeledPair>& labeled_pairs,
                     const Question& q, Backend& backend, const Corpus& corpus,
                     Granularity granularity, RunStore* store) {
    if (current.question_id != q.id) {
        throw ValidationError("rubric belongs to question " + current.question_id + ", not " +
                              q.id);
    }
    const PromptBundle bundle = build_rubric_prompt(q, current, labeled_pairs, corpus);
    const LlmResponse res = backend.complete(bundle);
    if (res.text.empty()) throw BackendError(BackendError::Kind::other, "empty rubric reply");

    Rubric next;
    next.question_id = q.id;
    next.version = current.version + 1;
    next.body = res.text;
    next.granularity = granularity;
    next.lineage = rubric_ref(current);
    if (store) store->append(RunStore::kRubrics, rubric_to_json(next));
    return next;
}

GenerationResult run_generation(const Question& q, const Rubric& r0, const Corpus& corpus,
                                const GenerationConfig& cfg, Backend& backend, LabelSource labels,
                                RunStore* store, int parallelism, std::istream& in,
                                std::ostream& out) {
    const auto pool_answers = corpus.answers_for(q.id);
    validate(cfg, pool_answers.size());
    if (r0.question_id != q.id) {
        throw ValidationError("starting rubric belongs to a different question");
    }

    std::vector<std::string> pool;
    for (const Answer* a : pool_answers) pool.push_back(a->id);

    GenerationResult result;
    result.chain.push_back(r0);
    if (store) store->append(RunStore::kRubrics, rubric_to_json(r0));

    const Granularity granularity = cfg.method == SamplingMethod::random
                                        ? Granularity::generated_random
                                        : Granularity::generated_distribution;
    std::set<std::string> used;
    for (int iteration = 1; iteration <= cfg.iterations; ++iteration) {
        std::size_t remaining = 0;
        for (const auto& id : pool) {
            if (!cfg.exclude_used || !used.count(id)) ++remaining;
        }
        if (remaining == 0) {
            result.warnings.push_back("answer pool exhausted before iteration " +
                                      std::to_string(iteration) + "; stopping early");
            break;
        }

        std::set<std::string> no_exclusions;  // scratch set when reuse is allowed
        std::set<std::string>& used_ref = cfg.exclude_used ? used : no_exclusions;

        SampleBatch batch;
        std::vector<GradeFailure> grade_failures;
        if (cfg.method == SamplingMethod::random) {
            batch = sample_random(pool, cfg.sample_size,
                                  derive_seed(cfg.seed, "random-sample",
                                              std::to_string(iteration)),
                                  used_ref, iteration);
        } else {
            batch = sample_distribution_aware(q, result.chain.back(), corpus, cfg, backend,
                                              used_ref, iteration, parallelism, &grade_failures);
        }
        for (const auto& f : grade_failures) {
            result.warnings.push_back("iteration " + std::to_string(iteration) +
                                      ": initial grading failed for " + f.answer_id + ": " +
                                      f.message);
        }

        const auto labeled = human_label(batch, corpus, labels, in, out);
        Rubric next = refine_rubric(result.chain.back(), labeled, q, backend, corpus, granularity,
                                    store);
        result.batches.push_back(std::move(batch));
        result.labels.push_back(labeled);
        result.chain.push_back(std::move(next));
    }
    return result;
}

}  // namespace gradelab
