#include "gradelab/review.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "gradelab/errors.hpp"
#include "gradelab/parallel.hpp"
#include "gradelab/rng.hpp"

namespace gradelab {

using nlohmann::json;

std::string to_string(ReviewRounds r) {
    return r == ReviewRounds::single ? "single" : "regrouped";
}

std::string to_string(CombineMode m) {
    return m == CombineMode::union_of_rounds ? "union" : "intersection";
}

std::string to_string(ReviewRound r) {
    return r == ReviewRound::initial ? "initial" : "regrouped";
}

std::string to_string(FindingReason r) {
    return r == FindingReason::rubric_deviation ? "rubric_deviation" : "inconsistency";
}

ReviewRounds review_rounds_from_string(const std::string& s) {
    if (s == "single") return ReviewRounds::single;
    if (s == "regrouped") return ReviewRounds::regrouped;
    throw ValidationError("unknown review rounds mode: " + s);
}

CombineMode combine_mode_from_string(const std::string& s) {
    if (s == "union") return CombineMode::union_of_rounds;
    if (s == "intersection") return CombineMode::intersection_of_rounds;
    throw ValidationError("unknown combine mode: " + s);
}

void validate(const ReviewConfig& cfg) {
    if (cfg.group_size < 2) throw ValidationError("review group size must be >= 2");
    if (cfg.subgroup_count < 2) throw ValidationError("subgroup count must be >= 2");
    if (cfg.subgroup_count > cfg.group_size) {
        throw ValidationError("subgroup count cannot exceed the group size");
    }
}

json finding_to_json(const ReviewFinding& f) {
    return {{"answer_id", f.answer_id},
            {"reason", to_string(f.reason)},
            {"detail", f.detail},
            {"round", to_string(f.round)},
            {"group_id", f.group_id}};
}

ReviewFinding finding_from_json(const json& j) {
    ReviewFinding f;
    f.answer_id = j.at("answer_id").get<std::string>();
    const std::string reason = j.at("reason").get<std::string>();
    if (reason == "rubric_deviation") f.reason = FindingReason::rubric_deviation;
    else if (reason == "inconsistency") f.reason = FindingReason::inconsistency;
    else throw ParseError("unknown finding reason: " + reason);
    f.detail = j.value("detail", "");
    f.round = j.at("round").get<std::string>() == "initial" ? ReviewRound::initial
                                                            : ReviewRound::regrouped;
    f.group_id = j.at("group_id").get<std::string>();
    return f;
}

std::vector<ReviewGroup> partition_groups(const std::vector<ScoredPair>& pairs, int c,
                                          std::uint64_t seed) {
    if (pairs.size() < 2) throw ValidationError("need at least two pairs to review");
    if (c < 2) throw ValidationError("group size must be >= 2");

    std::vector<ScoredPair> shuffled = pairs;
    std::sort(shuffled.begin(), shuffled.end());
    auto rng = seeded_rng(seed);
    seeded_shuffle(shuffled, rng);

    const std::size_t n = shuffled.size();
    const std::size_t full = n / static_cast<std::size_t>(c);
    std::vector<ReviewGroup> groups;
    if (full == 0) {
        // fewer pairs than one group; review them together
        groups.push_back({"initial-0", ReviewRound::initial, shuffled});
        return groups;
    }
    for (std::size_t g = 0; g < full; ++g) {
        ReviewGroup group;
        group.group_id = "initial-" + std::to_string(g);
        group.round = ReviewRound::initial;
        group.members.assign(shuffled.begin() + g * c, shuffled.begin() + (g + 1) * c);
        groups.push_back(std::move(group));
    }
    const std::size_t remainder = n - full * static_cast<std::size_t>(c);
    if (remainder == 1) {
        groups.back().members.push_back(shuffled.back());
    } else if (remainder >= 2) {
        ReviewGroup group;
        group.group_id = "initial-" + std::to_string(full);
        group.round = ReviewRound::initial;
        group.members.assign(shuffled.end() - remainder, shuffled.end());
        groups.push_back(std::move(group));
    }
    return groups;
}

namespace {

constexpr const char* kReviewSystem =
    "You audit grading results for fairness and consistency. Be conservative: flag only clear "
    "anomalies, and say why.";

std::string render_review_request(const Question& q, const Rubric& rubric,
                                  const ReviewGroup& group, const Corpus& corpus) {
    std::ostringstream out;
    out << "Question " << q.id << " (full points: " << q.full_points << "):\n" << q.text << "\n";
    out << "\nRubric (version " << rubric.version << "):\n" << rubric.body << "\n";
    out << "\nGraded answers under review:\n";
    for (const auto& [id, score] : group.members) {
        const Answer* a = corpus.find_answer(id);
        out << "\nAnswer [" << id << "] (listed score: " << score << "):\n"
            << (a ? a->text : "(text unavailable)") << "\n";
    }
    out << "\nCheck two things:\n"
           "1. whether any listed score deviates significantly from what the rubric requires "
           "for that answer;\n"
           "2. whether the scores in this set are significantly inconsistent with one "
           "another.\n"
           "Reply with one fenced JSON block:\n"
           "```json\n"
           "{\"flags\": [{\"answer_id\": \"...\", \"reason\": \"rubric_deviation\" | "
           "\"inconsistency\", \"detail\": \"...\"}]}\n"
           "```\n"
           "Use an empty list when nothing is anomalous. Only flag answer ids shown above.\n";
    return out.str();
}

}  // namespace

std::vector<ReviewFinding> review_group(const Question& q, const Rubric& rubric,
                                        const ReviewGroup& group, Backend& backend,
                                        const Corpus& corpus, std::uint64_t seed,
                                        std::vector<std::string>* warnings) {
    if (group.members.empty()) throw ValidationError("empty review group");

    TaskEnvelope envelope;
    envelope.task = TaskKind::review;
    envelope.question_id = q.id;
    envelope.rubric_version = rubric.version;
    json scores = json::object();
    for (const auto& [id, score] : group.members) {
        envelope.answer_ids.push_back(id);
        scores[id] = score;
    }
    std::sort(envelope.answer_ids.begin(), envelope.answer_ids.end());
    envelope.params["scores"] = scores;
    envelope.params["group_id"] = group.group_id;
    envelope.params["seed"] = seed;

    const PromptBundle bundle =
        make_bundle(kReviewSystem, {render_review_request(q, rubric, group, corpus)},
                    std::move(envelope), kGradingTemperature, kGradeMaxTokens);
    const auto reply = request_structured(backend, bundle, ReplySchema::review, q.full_points);

    std::set<std::string> member_ids;
    for (const auto& [id, _] : group.members) member_ids.insert(id);

    std::vector<ReviewFinding> findings;
    std::set<std::string> seen;
    for (const auto& flag : reply.parsed.flags) {
        if (!member_ids.count(flag.answer_id)) {
            if (warnings) {
                warnings->push_back("group " + group.group_id + ": discarded flag for " +
                                    flag.answer_id + ", which is not a member");
            }
            continue;
        }
        if (!seen.insert(flag.answer_id).second) continue;  // one finding per pair per group
        ReviewFinding f;
        f.answer_id = flag.answer_id;
        f.reason = flag.reason == "inconsistency" ? FindingReason::inconsistency
                                                  : FindingReason::rubric_deviation;
        f.detail = flag.detail;
        f.round = group.round;
        f.group_id = group.group_id;
        findings.push_back(std::move(f));
    }
    std::sort(findings.begin(), findings.end(),
              [](const ReviewFinding& a, const ReviewFinding& b) {
                  return a.answer_id < b.answer_id;
              });
    return findings;
}

std::vector<ReviewGroup> regroup(const std::vector<ReviewGroup>& groups, int k,
                                 std::uint64_t seed) {
    if (k < 2) throw ValidationError("subgroup count must be >= 2");
    if (groups.empty()) throw ValidationError("nothing to regroup");
    for (const auto& g : groups) {
        if (g.members.size() < static_cast<std::size_t>(k)) {
            throw ValidationError("group " + g.group_id + " has " +
                                  std::to_string(g.members.size()) +
                                  " members, fewer than the " + std::to_string(k) +
                                  " sub-groups requested");
        }
    }

    const std::size_t group_count = groups.size();
    // contiguous near-equal split of each group into k sub-groups
    std::vector<std::vector<std::vector<ScoredPair>>> subs(group_count);
    for (std::size_t g = 0; g < group_count; ++g) {
        const auto& members = groups[g].members;
        const std::size_t base = members.size() / static_cast<std::size_t>(k);
        const std::size_t extra = members.size() % static_cast<std::size_t>(k);
        std::size_t pos = 0;
        for (int j = 0; j < k; ++j) {
            const std::size_t len = base + (static_cast<std::size_t>(j) < extra ? 1 : 0);
            subs[g].emplace_back(members.begin() + pos, members.begin() + pos + len);
            pos += len;
        }
    }

    // One rotation offset per sub-group slot; distinct offsets guarantee that
    // a new group draws from min(k, #groups) different parents.
    std::vector<std::size_t> rotation(group_count);
    for (std::size_t i = 0; i < group_count; ++i) rotation[i] = i;
    auto rng = seeded_rng(seed);
    seeded_shuffle(rotation, rng);

    std::vector<ReviewGroup> result;
    for (std::size_t i = 0; i < group_count; ++i) {
        ReviewGroup group;
        group.group_id = "regrouped-" + std::to_string(i);
        group.round = ReviewRound::regrouped;
        for (int j = 0; j < k; ++j) {
            const std::size_t parent =
                (i + rotation[static_cast<std::size_t>(j) % group_count]) % group_count;
            const auto& piece = subs[parent][j];
            group.members.insert(group.members.end(), piece.begin(), piece.end());
        }
        result.push_back(std::move(group));
    }
    return result;
}

ReviewOutcome run_review(const Question& q, const Rubric& rubric,
                         const std::vector<ScoredPair>& pairs, const ReviewConfig& cfg,
                         Backend& backend, const Corpus& corpus, int parallelism) {
    validate(cfg);
    ReviewOutcome out;

    const auto initial =
        partition_groups(pairs, cfg.group_size, derive_seed(cfg.seed, "partition"));

    struct GroupResult {
        std::vector<ReviewFinding> findings;
        std::vector<std::string> warnings;
        bool unreviewed = false;
        std::string group_id;
    };
    auto review_round = [&](const std::vector<ReviewGroup>& groups) {
        return parallel_map<GroupResult>(groups.size(), parallelism, [&](std::size_t i) {
            GroupResult r;
            r.group_id = groups[i].group_id;
            try {
                r.findings =
                    review_group(q, rubric, groups[i], backend, corpus, cfg.seed, &r.warnings);
            } catch (const Error& e) {
                r.unreviewed = true;
                r.warnings.push_back("group " + groups[i].group_id + " unreviewed: " + e.what());
            }
            return r;
        });
    };
    auto absorb = [&](const std::vector<GroupResult>& results, std::set<std::string>& flagged) {
        for (const auto& r : results) {
            if (r.unreviewed) out.unreviewed_groups.push_back(r.group_id);
            for (const auto& w : r.warnings) out.warnings.push_back(w);
            for (const auto& f : r.findings) {
                flagged.insert(f.answer_id);
                out.findings.push_back(f);
            }
        }
    };

    std::set<std::string> round1_ids;
    absorb(review_round(initial), round1_ids);

    std::set<std::string> combined = round1_ids;
    if (cfg.rounds == ReviewRounds::regrouped) {
        std::set<std::string> round2_ids;
        const auto second = regroup(initial, cfg.subgroup_count, derive_seed(cfg.seed, "regroup"));
        absorb(review_round(second), round2_ids);
        if (cfg.combine == CombineMode::union_of_rounds) {
            combined.insert(round2_ids.begin(), round2_ids.end());
        } else {
            std::set<std::string> both;
            for (const auto& id : round1_ids) {
                if (round2_ids.count(id)) both.insert(id);
            }
            combined = std::move(both);
        }
    }
    out.regrade_queue.assign(combined.begin(), combined.end());
    return out;
}

double detection_accuracy(const std::vector<std::string>& flagged_ids,
                          const std::vector<InjectionRecord>& truth, std::size_t total) {
    if (total == 0) throw ValidationError("detection_accuracy needs a positive total");
    std::set<std::string> flagged(flagged_ids.begin(), flagged_ids.end());
    std::set<std::string> injected;
    for (const auto& r : truth) injected.insert(r.answer_id);

    std::size_t tp = 0;
    for (const auto& id : flagged) {
        if (injected.count(id)) ++tp;
    }
    const std::size_t either = flagged.size() + injected.size() - tp;
    const std::size_t tn = total >= either ? total - either : 0;
    return static_cast<double>(tp + tn) / static_cast<double>(total);
}

double detection_accuracy(const std::vector<ReviewFinding>& findings,
                          const std::vector<InjectionRecord>& truth, std::size_t total) {
    std::vector<std::string> ids;
    for (const auto& f : findings) ids.push_back(f.answer_id);
    return detection_accuracy(ids, truth, total);
}

}  // namespace gradelab
