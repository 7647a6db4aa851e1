#include "gradelab/grader.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "gradelab/errors.hpp"
#include "gradelab/parallel.hpp"
#include "gradelab/rng.hpp"

namespace gradelab {

using nlohmann::json;

std::string to_string(StrategyKind k) {
    switch (k) {
        case StrategyKind::baseline: return "baseline";
        case StrategyKind::one_shot: return "one_shot";
        case StrategyKind::self_reflection: return "self_reflection";
        case StrategyKind::batching: return "batching";
    }
    return "baseline";
}

StrategyKind strategy_kind_from_string(const std::string& s) {
    if (s == "baseline") return StrategyKind::baseline;
    if (s == "one_shot" || s == "one-shot") return StrategyKind::one_shot;
    if (s == "self_reflection" || s == "reflect") return StrategyKind::self_reflection;
    if (s == "batching" || s == "batch") return StrategyKind::batching;
    throw ValidationError("unknown grading strategy: " + s);
}

void validate(const GradingStrategy& strategy) {
    if (strategy.kind == StrategyKind::batching && strategy.batch_size < 2) {
        throw ValidationError("batching needs batch_size >= 2");
    }
    if (strategy.kind == StrategyKind::self_reflection && strategy.reflection_rounds < 1) {
        throw ValidationError("self_reflection needs reflection_rounds >= 1");
    }
}

json grade_record_to_json(const GradeRecord& r) {
    json j{{"answer_id", r.answer_id},
           {"score", r.score},
           {"feedback", r.feedback},
           {"strategy", to_string(r.strategy)},
           {"rubric_version", r.rubric_version},
           {"repetition", r.repetition},
           {"model", r.model}};
    if (r.initial_score) j["initial_score"] = *r.initial_score;
    if (r.reflection_trace) j["reflection_trace"] = *r.reflection_trace;
    return j;
}

GradeRecord grade_record_from_json(const json& j) {
    GradeRecord r;
    r.answer_id = j.at("answer_id").get<std::string>();
    r.score = j.at("score").get<double>();
    r.feedback = j.at("feedback").get<std::string>();
    r.strategy = strategy_kind_from_string(j.at("strategy").get<std::string>());
    r.rubric_version = j.at("rubric_version").get<int>();
    r.repetition = j.at("repetition").get<int>();
    r.model = j.at("model").get<std::string>();
    if (j.contains("initial_score")) r.initial_score = j["initial_score"].get<double>();
    if (j.contains("reflection_trace")) {
        r.reflection_trace = j["reflection_trace"].get<std::vector<double>>();
    }
    return r;
}

namespace {

constexpr const char* kGradingSystem =
    "You are a meticulous teaching assistant. Grade each student answer strictly against the "
    "provided rubric, award partial credit exactly where the rubric allows it, and justify "
    "every score in one or two sentences.";

std::string fmt_points(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", x);
    return buf;
}

std::string render_grading_request(const Question& q, const Rubric& rubric,
                                   const std::vector<const Answer*>& answers,
                                   const std::optional<LabeledPair>& example,
                                   const Corpus& corpus) {
    std::ostringstream out;
    out << "Question " << q.id << " (full points: " << fmt_points(q.full_points) << "):\n"
        << q.text << "\n";
    if (q.supplementary) {
        out << "\nSupplementary material:\n" << *q.supplementary << "\n";
    }
    out << "\nRubric (version " << rubric.version << "):\n" << rubric.body << "\n";
    if (example) {
        const Answer* ea = corpus.find_answer(example->answer_id);
        out << "\nWorked example, a previously graded answer:\n"
            << "Answer: " << (ea ? ea->text : example->answer_id) << "\n"
            << "Awarded score: " << fmt_points(example->score) << "\n";
        if (example->rationale) out << "Grader rationale: " << *example->rationale << "\n";
    }
    for (const Answer* a : answers) {
        out << "\nStudent answer [" << a->id << "]:\n" << a->text << "\n";
    }
    out << "\nScore every student answer listed above against the rubric. Reply with one fenced "
           "JSON block:\n"
           "```json\n"
           "{\"scores\": [{\"answer_id\": \"...\", \"score\": <number>, \"feedback\": \"<short "
           "justification>\"}]}\n"
           "```\n"
        << "Each score must lie between 0 and " << fmt_points(q.full_points)
        << ". Include exactly one entry per answer id.\n";
    return out.str();
}

std::vector<const Answer*> sorted_by_id(std::vector<const Answer*> answers) {
    std::sort(answers.begin(), answers.end(),
              [](const Answer* a, const Answer* b) { return a->id < b->id; });
    return answers;
}

}  // namespace

PromptBundle build_grading_prompt(const GradingStrategy& strategy, const Question& q,
                                  const Rubric& rubric, const std::vector<const Answer*>& answers,
                                  const std::optional<LabeledPair>& example, const Corpus& corpus,
                                  const EnvelopeParams& params) {
    if (answers.empty()) throw ValidationError("no answers to grade");
    if (strategy.kind != StrategyKind::batching && answers.size() != 1) {
        throw ValidationError("only the batching strategy grades several answers per prompt");
    }
    if (strategy.kind == StrategyKind::one_shot && !example) {
        throw ValidationError("one_shot grading needs a labeled example");
    }
    const auto sorted = sorted_by_id(answers);
    const std::string content = render_grading_request(
        q, rubric, sorted, strategy.kind == StrategyKind::one_shot ? example : std::nullopt,
        corpus);
    if (strategy.kind == StrategyKind::batching &&
        content.size() > strategy.context_budget_chars) {
        throw ContextBudgetError("batching prompt of " + std::to_string(content.size()) +
                                 " chars exceeds the context budget of " +
                                 std::to_string(strategy.context_budget_chars) +
                                 "; use a smaller batch");
    }

    TaskEnvelope envelope;
    envelope.task = TaskKind::grade;
    envelope.question_id = q.id;
    envelope.rubric_version = rubric.version;
    for (const Answer* a : sorted) envelope.answer_ids.push_back(a->id);
    envelope.params = params;
    return make_bundle(kGradingSystem, {content}, std::move(envelope), kGradingTemperature,
                       kGradeMaxTokens);
}

GradeRecord grade_once(const Question& q, const Rubric& rubric, const Answer& answer,
                       const GradingStrategy& strategy, Backend& backend, const Corpus& corpus,
                       const std::optional<LabeledPair>& example, const EnvelopeParams& params) {
    if (strategy.kind != StrategyKind::baseline && strategy.kind != StrategyKind::one_shot) {
        throw ValidationError("grade_once handles the baseline and one_shot strategies");
    }
    const PromptBundle bundle =
        build_grading_prompt(strategy, q, rubric, {&answer}, example, corpus, params);
    auto check = [&](const ParsedReply& p) {
        if (p.scores.size() != 1 || p.scores.front().answer_id != answer.id) {
            throw ParseError("reply must contain exactly one score for answer " + answer.id);
        }
    };
    const auto reply = request_structured(backend, bundle, ReplySchema::grade, q.full_points, check);

    GradeRecord rec;
    rec.answer_id = answer.id;
    rec.score = reply.parsed.scores.front().score;
    rec.feedback = reply.parsed.scores.front().feedback;
    rec.strategy = strategy.kind;
    rec.rubric_version = rubric.version;
    rec.model = reply.model;
    return rec;
}

GradeRecord grade_reflect(const Question& q, const Rubric& rubric, const Answer& answer,
                          int rounds, Backend& backend, const Corpus& corpus,
                          const EnvelopeParams& params, std::vector<GradeFailure>* failures) {
    if (rounds < 1) throw ValidationError("self_reflection needs at least one round");

    auto check = [&](const ParsedReply& p) {
        if (p.scores.size() != 1 || p.scores.front().answer_id != answer.id) {
            throw ParseError("reply must contain exactly one score for answer " + answer.id);
        }
    };

    GradingStrategy initial_strategy;  // baseline prompt shape
    const PromptBundle first =
        build_grading_prompt(initial_strategy, q, rubric, {&answer}, std::nullopt, corpus, params);
    auto reply = request_structured(backend, first, ReplySchema::grade, q.full_points, check);

    double current = reply.parsed.scores.front().score;
    const double initial = current;
    std::string feedback = reply.parsed.scores.front().feedback;
    std::string model = reply.model;

    const std::string content =
        render_grading_request(q, rubric, {&answer}, std::nullopt, corpus);
    std::vector<double> trace;
    for (int round = 1; round <= rounds; ++round) {
        std::ostringstream instruction;
        instruction << "Earlier you scored answer " << answer.id << " at " << current
                    << " with this feedback: " << (feedback.empty() ? "(none)" : feedback)
                    << "\nReflect on whether that score follows the rubric exactly and correct "
                       "it if needed. Reply again with the same fenced JSON schema. Reflection "
                       "round "
                    << round << " of " << rounds << ".";
        TaskEnvelope envelope;
        envelope.task = TaskKind::grade;
        envelope.question_id = q.id;
        envelope.rubric_version = rubric.version;
        envelope.answer_ids = {answer.id};
        envelope.params = params;
        const PromptBundle turn =
            make_bundle(kGradingSystem, {content, instruction.str()}, std::move(envelope),
                        kGradingTemperature, kGradeMaxTokens);
        try {
            auto turn_reply = request_structured(backend, turn, ReplySchema::grade, q.full_points, check);
            current = turn_reply.parsed.scores.front().score;
            feedback = turn_reply.parsed.scores.front().feedback;
            model = turn_reply.model;
        } catch (const Error& e) {
            // keep the last good score; the failed turn is visible in `failures`
            if (failures) {
                failures->push_back(
                    {answer.id, 0, "reflection round " + std::to_string(round) + ": " + e.what()});
            }
        }
        trace.push_back(current);
    }

    GradeRecord rec;
    rec.answer_id = answer.id;
    rec.score = current;
    rec.feedback = feedback;
    rec.strategy = StrategyKind::self_reflection;
    rec.rubric_version = rubric.version;
    rec.model = model;
    rec.initial_score = initial;
    rec.reflection_trace = trace;
    return rec;
}

namespace {

struct ChunkEval {
    std::map<std::string, ParsedScore> accepted;
    std::vector<std::string> missing;
    std::vector<std::string> duplicated;
    std::vector<std::string> unknown;

    bool complete() const { return missing.empty() && duplicated.empty(); }
    std::string describe() const {
        std::ostringstream out;
        out << "reply must score each listed answer exactly once;";
        if (!missing.empty()) {
            out << " missing:";
            for (const auto& id : missing) out << " " << id;
            out << ";";
        }
        if (!duplicated.empty()) {
            out << " duplicated:";
            for (const auto& id : duplicated) out << " " << id;
            out << ";";
        }
        return out.str();
    }
};

ChunkEval evaluate_chunk(const ParsedReply& reply, const std::vector<const Answer*>& chunk) {
    ChunkEval ev;
    std::set<std::string> requested;
    for (const Answer* a : chunk) requested.insert(a->id);
    std::map<std::string, int> counts;
    std::map<std::string, ParsedScore> first_seen;
    for (const auto& s : reply.scores) {
        if (!requested.count(s.answer_id)) {
            ev.unknown.push_back(s.answer_id);
            continue;
        }
        if (++counts[s.answer_id] == 1) first_seen[s.answer_id] = s;
    }
    for (const Answer* a : chunk) {
        const int c = counts.count(a->id) ? counts[a->id] : 0;
        if (c == 0) ev.missing.push_back(a->id);
        else if (c > 1) ev.duplicated.push_back(a->id);
        else ev.accepted[a->id] = first_seen[a->id];
    }
    return ev;
}

void grade_chunk(const Question& q, const Rubric& rubric, const std::vector<const Answer*>& chunk,
                 Backend& backend, const Corpus& corpus, const GradingStrategy& strategy,
                 const EnvelopeParams& params, GradingOutcome& out) {
    const PromptBundle bundle =
        build_grading_prompt(strategy, q, rubric, chunk, std::nullopt, corpus, params);

    std::optional<ParsedReply> parsed;
    std::string model;
    std::string problem;
    auto attempt = [&](const PromptBundle& b) {
        const LlmResponse res = backend.complete(b);
        model = res.model;
        parsed = parse_structured(res.text, ReplySchema::grade, q.full_points);
    };

    try {
        attempt(bundle);
    } catch (const ParseError& e) {
        problem = e.what();
        parsed.reset();
    }

    std::optional<ChunkEval> eval;
    if (parsed) {
        eval = evaluate_chunk(*parsed, chunk);
        if (!eval->complete()) problem = eval->describe();
    }

    if (!parsed || !eval->complete()) {
        const PromptBundle retry =
            with_followup(bundle, "The previous reply could not be used (" + problem +
                                      "). Reply again with exactly one fenced JSON block "
                                      "scoring every listed answer id exactly once.");
        try {
            attempt(retry);
            eval = evaluate_chunk(*parsed, chunk);
        } catch (const ParseError& e) {
            if (!eval) {
                for (const Answer* a : chunk) out.failures.push_back({a->id, 0, e.what()});
                return;
            }
            // keep the salvageable first reply
        } catch (const BackendError& e) {
            if (!eval) {
                for (const Answer* a : chunk) {
                    out.failures.push_back(
                        {a->id, 0, problem + " (re-ask failed: " + e.what() + ")"});
                }
                return;
            }
        }
    }

    for (const auto& id : eval->unknown) {
        out.warnings.push_back("discarded score for unlisted answer id " + id);
    }
    for (const Answer* a : chunk) {
        auto it = eval->accepted.find(a->id);
        if (it == eval->accepted.end()) {
            out.failures.push_back({a->id, 0, eval->describe()});
            continue;
        }
        GradeRecord rec;
        rec.answer_id = a->id;
        rec.score = it->second.score;
        rec.feedback = it->second.feedback;
        rec.strategy = StrategyKind::batching;
        rec.rubric_version = rubric.version;
        rec.model = model;
        out.records.push_back(std::move(rec));
    }
}

}  // namespace

GradingOutcome grade_batch(const Question& q, const Rubric& rubric,
                           std::vector<const Answer*> answers, int batch_size, Backend& backend,
                           const Corpus& corpus, const GradingStrategy& strategy,
                           const EnvelopeParams& params) {
    if (batch_size < 2) throw ValidationError("batching needs batch_size >= 2");
    GradingStrategy batching = strategy;
    batching.kind = StrategyKind::batching;
    batching.batch_size = batch_size;

    answers = sorted_by_id(std::move(answers));
    GradingOutcome out;
    for (std::size_t start = 0; start < answers.size();
         start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end =
            std::min(answers.size(), start + static_cast<std::size_t>(batch_size));
        const std::vector<const Answer*> chunk(answers.begin() + start, answers.begin() + end);
        try {
            grade_chunk(q, rubric, chunk, backend, corpus, batching, params, out);
        } catch (const ContextBudgetError&) {
            // halve once, then give up on a half that still overflows
            const std::size_t mid = chunk.size() / 2;
            const std::vector<std::vector<const Answer*>> halves = {
                {chunk.begin(), chunk.begin() + mid}, {chunk.begin() + mid, chunk.end()}};
            for (const auto& half : halves) {
                if (half.empty()) continue;
                try {
                    grade_chunk(q, rubric, half, backend, corpus, batching, params, out);
                } catch (const ContextBudgetError& e) {
                    for (const Answer* a : half) out.failures.push_back({a->id, 0, e.what()});
                }
            }
        }
    }
    return out;
}

std::optional<LabeledPair> choose_example(const Corpus& corpus, const Question& q,
                                          ExampleSelector selector) {
    std::vector<LabeledPair> labeled;
    for (const Answer* a : corpus.answers_for(q.id)) {
        if (auto final_score = corpus.human_final(a->id)) {
            labeled.push_back({a->id, *final_score, std::nullopt});
        }
    }
    if (labeled.empty()) return std::nullopt;
    if (selector == ExampleSelector::first_labeled) return labeled.front();
    std::sort(labeled.begin(), labeled.end(), [](const LabeledPair& a, const LabeledPair& b) {
        return std::tie(a.score, a.answer_id) < std::tie(b.score, b.answer_id);
    });
    return labeled[(labeled.size() - 1) / 2];  // lower median; ties fall to the lower id
}

GradingOutcome run_grading(const Corpus& corpus, const Question& q, const Rubric& rubric,
                           const GradingStrategy& strategy, int repetitions, Backend& backend,
                           std::uint64_t seed, int parallelism) {
    validate(strategy);
    if (repetitions < 1) throw ValidationError("repetitions must be >= 1");
    const auto answers = corpus.answers_for(q.id);

    std::optional<LabeledPair> example;
    if (strategy.kind == StrategyKind::one_shot) {
        example = choose_example(corpus, q, strategy.example_selector);
        if (!example) {
            throw ValidationError("one_shot grading needs at least one human-labeled answer");
        }
    }

    GradingOutcome all;
    for (int rep = 0; rep < repetitions; ++rep) {
        EnvelopeParams params;
        params["seed"] = derive_seed(seed, "rep", std::to_string(rep));

        GradingOutcome pass;
        if (strategy.kind == StrategyKind::batching) {
            pass = grade_batch(q, rubric, answers, strategy.batch_size, backend, corpus, strategy,
                               params);
        } else {
            struct PerAnswer {
                std::optional<GradeRecord> record;
                std::vector<GradeFailure> failures;
            };
            const auto results = parallel_map<PerAnswer>(
                answers.size(), parallelism, [&](std::size_t i) {
                    PerAnswer pa;
                    try {
                        if (strategy.kind == StrategyKind::self_reflection) {
                            pa.record =
                                grade_reflect(q, rubric, *answers[i], strategy.reflection_rounds,
                                              backend, corpus, params, &pa.failures);
                        } else {
                            pa.record = grade_once(q, rubric, *answers[i], strategy, backend,
                                                   corpus, example, params);
                        }
                    } catch (const Error& e) {
                        pa.failures.push_back({answers[i]->id, 0, e.what()});
                    }
                    return pa;
                });
            for (const auto& pa : results) {
                if (pa.record) pass.records.push_back(*pa.record);
                for (const auto& f : pa.failures) pass.failures.push_back(f);
            }
        }

        for (auto& r : pass.records) {
            r.repetition = rep;
            all.records.push_back(std::move(r));
        }
        for (auto& f : pass.failures) {
            f.repetition = rep;
            all.failures.push_back(std::move(f));
        }
        for (auto& w : pass.warnings) all.warnings.push_back(std::move(w));
    }
    return all;
}

}  // namespace gradelab
