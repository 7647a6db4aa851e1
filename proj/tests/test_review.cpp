#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "gradelab/errors.hpp"
#include "gradelab/review.hpp"
#include "gradelab/rng.hpp"
#include "test_support.hpp"

using namespace gradelab;
namespace ts = testsupport;

namespace {

BackendConfig sim_config(double sigma = 0.0, std::uint64_t seed = 0) {
    BackendConfig config;
    config.kind = BackendKind::simulated;
    config.noise_sigma = sigma;
    config.seed = seed;
    return config;
}

std::vector<ScoredPair> oracle_pairs(const Corpus& corpus, const std::string& q) {
    std::vector<ScoredPair> pairs;
    for (const Answer* a : corpus.answers_for(q)) {
        pairs.push_back({a->id, *corpus.human_final(a->id)});
    }
    return pairs;
}

std::multiset<std::string> member_ids(const std::vector<ReviewGroup>& groups) {
    std::multiset<std::string> ids;
    for (const auto& g : groups) {
        for (const auto& [id, _] : g.members) ids.insert(id);
    }
    return ids;
}

TaskEnvelope review_envelope(const Question& q, const Rubric& rubric, const ReviewGroup& group,
                             std::uint64_t seed) {
    TaskEnvelope e;
    e.task = TaskKind::review;
    e.question_id = q.id;
    e.rubric_version = rubric.version;
    nlohmann::json scores = nlohmann::json::object();
    for (const auto& [id, score] : group.members) {
        e.answer_ids.push_back(id);
        scores[id] = score;
    }
    std::sort(e.answer_ids.begin(), e.answer_ids.end());
    e.params["scores"] = scores;
    e.params["group_id"] = group.group_id;
    e.params["seed"] = seed;
    return e;
}

}  // namespace

TEST_CASE("partition_groups chunks a seeded shuffle") {
    const Corpus corpus = ts::os_fixture();
    const auto pairs = oracle_pairs(corpus, "q1");
    REQUIRE(pairs.size() == 40);

    const auto groups = partition_groups(pairs, 10, 3);
    REQUIRE(groups.size() == 4);
    for (const auto& g : groups) CHECK(g.members.size() == 10);
    CHECK(member_ids(groups) == member_ids({{"", ReviewRound::initial, pairs}}));

    const auto again = partition_groups(pairs, 10, 3);
    for (std::size_t i = 0; i < groups.size(); ++i) {
        CHECK(groups[i].members == again[i].members);
    }
    CHECK(partition_groups(pairs, 10, 4).front().members != groups.front().members);
}

TEST_CASE("partition remainder rules") {
    std::vector<ScoredPair> seven;
    for (int i = 0; i < 7; ++i) seven.push_back({"a" + std::to_string(i), 1.0 * i});

    const auto groups = partition_groups(seven, 3, 1);
    REQUIRE(groups.size() == 2);
    CHECK(groups[0].members.size() == 3);
    CHECK(groups[1].members.size() == 4);  // the single leftover merges

    std::vector<ScoredPair> eight = seven;
    eight.push_back({"a7", 7.0});
    const auto own = partition_groups(eight, 3, 1);
    REQUIRE(own.size() == 3);
    CHECK(own[2].members.size() == 2);  // two leftovers form their own group

    std::vector<ScoredPair> three{{"a0", 1}, {"a1", 2}, {"a2", 3}};
    CHECK(partition_groups(three, 10, 1).size() == 1);  // fewer than one full group

    CHECK_THROWS_AS(partition_groups({{"a0", 1}}, 3, 1), ValidationError);
}

TEST_CASE("regroup rotates sub-groups across parents") {
    // two parents of four, k=2: every new group takes one half from each
    std::vector<ReviewGroup> parents{
        {"initial-0", ReviewRound::initial, {{"a", 1}, {"b", 2}, {"c", 3}, {"d", 4}}},
        {"initial-1", ReviewRound::initial, {{"e", 5}, {"f", 6}, {"g", 7}, {"h", 8}}}};

    const auto regrouped = regroup(parents, 2, 9);
    REQUIRE(regrouped.size() == 2);

    std::set<std::set<std::string>> got;
    for (const auto& g : regrouped) {
        std::set<std::string> ids;
        for (const auto& [id, _] : g.members) ids.insert(id);
        got.insert(ids);
    }
    const std::set<std::set<std::string>> expected{{"a", "b", "g", "h"}, {"c", "d", "e", "f"}};
    CHECK(got == expected);
    for (const auto& g : regrouped) CHECK(g.round == ReviewRound::regrouped);

    CHECK_THROWS_AS(regroup(parents, 1, 9), ValidationError);
    std::vector<ReviewGroup> small{{"g", ReviewRound::initial, {{"a", 1}}}};
    CHECK_THROWS_AS(regroup(small, 2, 9), ValidationError);
}

TEST_CASE("regroup conserves members and mixes parents") {
    auto rng = seeded_rng(41);
    for (int trial = 0; trial < 40; ++trial) {
        const int group_count = 2 + static_cast<int>(uniform_below(rng, 5));
        const int k = 2 + static_cast<int>(uniform_below(rng, 3));
        std::vector<ReviewGroup> parents;
        std::map<std::string, std::string> parent_of;
        int serial = 0;
        for (int g = 0; g < group_count; ++g) {
            ReviewGroup group;
            group.group_id = "initial-" + std::to_string(g);
            group.round = ReviewRound::initial;
            const int size = k + static_cast<int>(uniform_below(rng, 8));
            for (int i = 0; i < size; ++i) {
                const std::string id = "a" + std::to_string(++serial);
                group.members.push_back({id, static_cast<double>(i)});
                parent_of[id] = group.group_id;
            }
            parents.push_back(std::move(group));
        }

        const auto regrouped = regroup(parents, k, rng());
        CHECK(regrouped.size() == parents.size());
        CHECK(member_ids(regrouped) == member_ids(parents));

        const std::size_t expected_mix =
            std::min<std::size_t>(static_cast<std::size_t>(k), parents.size());
        for (const auto& g : regrouped) {
            std::set<std::string> sources;
            for (const auto& [id, _] : g.members) sources.insert(parent_of[id]);
            CHECK(sources.size() >= expected_mix);
        }
    }
}

TEST_CASE("review_group flags the injected member only") {
    const Corpus corpus = ts::make_corpus({3.0, 5.0, 7.0, 9.0});
    const Question& q = *corpus.find_question("q1");
    const Rubric& rubric = *corpus.rubric_for("q1", Granularity::fine_human);
    const auto backend = make_backend(sim_config(1.0, 2), &corpus);

    ReviewGroup group;
    group.group_id = "initial-0";
    group.round = ReviewRound::initial;
    group.members = {{"a01", 3.0}, {"a02", 11.0}, {"a03", 7.0}, {"a04", 9.0}};  // a02 is +6

    const auto findings = review_group(q, rubric, group, *backend, corpus, 2);
    REQUIRE(findings.size() == 1);
    CHECK(findings.front().answer_id == "a02");
    CHECK(findings.front().reason == FindingReason::rubric_deviation);
    CHECK(findings.front().group_id == "initial-0");

    // untouched scores at zero sigma: nothing to flag
    const auto clean_backend = make_backend(sim_config(), &corpus);
    ReviewGroup clean = group;
    clean.members[1].second = 5.0;
    CHECK(review_group(q, rubric, clean, *clean_backend, corpus, 2).empty());
}

TEST_CASE("review_group discards flags outside the group") {
    const Corpus corpus = ts::make_corpus({3.0, 5.0});
    const Question& q = *corpus.find_question("q1");
    const Rubric& rubric = *corpus.rubric_for("q1", Granularity::fine_human);

    ReviewGroup group;
    group.group_id = "initial-0";
    group.round = ReviewRound::initial;
    group.members = {{"a01", 3.0}, {"a02", 5.0}};

    ScriptedBackend backend;
    backend.enqueue(review_envelope(q, rubric, group, 2),
                    ts::review_reply_json({{"a01", "inconsistency"}, {"zz", "inconsistency"}}));
    std::vector<std::string> warnings;
    const auto findings = review_group(q, rubric, group, backend, corpus, 2, &warnings);
    REQUIRE(findings.size() == 1);
    CHECK(findings.front().answer_id == "a01");
    REQUIRE(warnings.size() == 1);
    CHECK(warnings.front().find("zz") != std::string::npos);
}

TEST_CASE("run_review single round carries the initial tag and queue") {
    const Corpus corpus = ts::os_fixture();
    const Question& q = *corpus.find_question("q1");
    const Rubric& rubric = *corpus.rubric_for("q1", Granularity::fine_human);
    const auto backend = make_backend(sim_config(), &corpus);

    ReviewConfig cfg;
    cfg.rounds = ReviewRounds::single;
    cfg.seed = 5;
    const ReviewOutcome clean =
        run_review(q, rubric, oracle_pairs(corpus, "q1"), cfg, *backend, corpus);
    CHECK(clean.findings.empty());
    CHECK(clean.regrade_queue.empty());
    CHECK(clean.unreviewed_groups.empty());

    // perturb three pairs far beyond the threshold
    auto pairs = oracle_pairs(corpus, "q1");
    std::set<std::string> injected;
    for (std::size_t i : {3u, 17u, 31u}) {
        pairs[i].second = pairs[i].second >= 7.5 ? pairs[i].second - 7.0 : pairs[i].second + 7.0;
        injected.insert(pairs[i].first);
    }
    const ReviewOutcome flagged = run_review(q, rubric, pairs, cfg, *backend, corpus);
    CHECK(flagged.regrade_queue.size() == 3);
    for (const auto& f : flagged.findings) {
        CHECK(f.round == ReviewRound::initial);
        CHECK(injected.count(f.answer_id) == 1);
    }
}

TEST_CASE("regrouped rounds combine by union or intersection") {
    const Corpus corpus = ts::make_corpus({3.0, 5.0, 7.0, 9.0, 2.0, 4.0, 6.0, 8.0});
    const Question& q = *corpus.find_question("q1");
    const Rubric& rubric = *corpus.rubric_for("q1", Granularity::fine_human);
    const auto pairs = oracle_pairs(corpus, "q1");

    ReviewConfig cfg;
    cfg.group_size = 4;
    cfg.subgroup_count = 2;
    cfg.rounds = ReviewRounds::regrouped;
    cfg.seed = 13;

    // script round 1 to stay silent and round 2 to flag one answer
    auto scripted = [&](CombineMode combine) {
        ScriptedBackend backend;
        const auto initial = partition_groups(pairs, cfg.group_size,
                                              derive_seed(cfg.seed, "partition"));
        for (const auto& g : initial) {
            backend.enqueue(review_envelope(q, rubric, g, cfg.seed), ts::review_reply_json({}));
        }
        const auto second = regroup(initial, cfg.subgroup_count,
                                    derive_seed(cfg.seed, "regroup"));
        bool first_group = true;
        for (const auto& g : second) {
            backend.enqueue(review_envelope(q, rubric, g, cfg.seed),
                            first_group ? ts::review_reply_json(
                                              {{g.members.front().first, "inconsistency"}})
                                        : ts::review_reply_json({}));
            first_group = false;
        }
        ReviewConfig mode_cfg = cfg;
        mode_cfg.combine = combine;
        return run_review(q, rubric, pairs, mode_cfg, backend, corpus);
    };

    const ReviewOutcome with_union = scripted(CombineMode::union_of_rounds);
    CHECK(with_union.regrade_queue.size() == 1);
    REQUIRE(with_union.findings.size() == 1);
    CHECK(with_union.findings.front().round == ReviewRound::regrouped);

    const ReviewOutcome with_intersection = scripted(CombineMode::intersection_of_rounds);
    CHECK(with_intersection.regrade_queue.empty());  // only round 2 flagged it
    CHECK(with_intersection.findings.size() == 1);   // the finding itself is still reported

    // union is always a superset of intersection
    std::set<std::string> u(with_union.regrade_queue.begin(), with_union.regrade_queue.end());
    for (const auto& id : with_intersection.regrade_queue) CHECK(u.count(id) == 1);
}

TEST_CASE("persistent parse failures mark the group unreviewed") {
    const Corpus corpus = ts::make_corpus({3.0, 5.0, 7.0, 9.0});
    const Question& q = *corpus.find_question("q1");
    const Rubric& rubric = *corpus.rubric_for("q1", Granularity::fine_human);
    const auto pairs = oracle_pairs(corpus, "q1");

    ReviewConfig cfg;
    cfg.group_size = 4;
    cfg.rounds = ReviewRounds::single;
    cfg.seed = 3;

    ScriptedBackend backend;
    const auto groups = partition_groups(pairs, cfg.group_size, derive_seed(cfg.seed, "partition"));
    REQUIRE(groups.size() == 1);
    backend.enqueue(review_envelope(q, rubric, groups.front(), cfg.seed), "nonsense");
    backend.enqueue(review_envelope(q, rubric, groups.front(), cfg.seed), "still nonsense");

    const ReviewOutcome outcome = run_review(q, rubric, pairs, cfg, backend, corpus);
    REQUIRE(outcome.unreviewed_groups.size() == 1);
    CHECK(outcome.unreviewed_groups.front() == "initial-0");
    CHECK(outcome.findings.empty());
}

TEST_CASE("detection accuracy counts hits and true negatives") {
    std::vector<InjectionRecord> truth;
    for (int i = 0; i < 8; ++i) {
        truth.push_back({"inj" + std::to_string(i), 10.0, 2.0, 1});
    }

    // perfect detection
    std::vector<std::string> all;
    for (const auto& r : truth) all.push_back(r.answer_id);
    CHECK(detection_accuracy(all, truth, 40) == doctest::Approx(1.0));

    // 6 hits + 2 spurious: (6 + 30) / 40
    std::vector<std::string> partial(all.begin(), all.begin() + 6);
    partial.push_back("clean1");
    partial.push_back("clean2");
    CHECK(detection_accuracy(partial, truth, 40) == doctest::Approx(0.90));

    // saying nothing scores the all-negative baseline
    CHECK(detection_accuracy(std::vector<std::string>{}, truth, 40) == doctest::Approx(0.80));

    // no anomalies, no flags: perfect
    CHECK(detection_accuracy(std::vector<std::string>{}, {}, 40) == doctest::Approx(1.0));

    CHECK_THROWS_AS(detection_accuracy(std::vector<std::string>{}, truth, 0), ValidationError);

    auto rng = seeded_rng(0);
    for (int i = 0; i < 50; ++i) {
        std::vector<std::string> flags;
        for (int j = 0; j < 12; ++j) {
            if (uniform_below(rng, 2)) flags.push_back("inj" + std::to_string(j));
        }
        const double acc = detection_accuracy(flags, truth, 40);
        CHECK(acc >= 0.0);
        CHECK(acc <= 1.0);
    }
}

TEST_CASE("review config validation") {
    ReviewConfig cfg;
    cfg.group_size = 1;
    CHECK_THROWS_AS(validate(cfg), ValidationError);
    cfg.group_size = 4;
    cfg.subgroup_count = 5;
    CHECK_THROWS_AS(validate(cfg), ValidationError);
    cfg.subgroup_count = 2;
    validate(cfg);
}

TEST_CASE("finding json round-trip") {
    const ReviewFinding f{"a07", FindingReason::inconsistency, "odd score", ReviewRound::regrouped,
                          "regrouped-1"};
    CHECK(finding_from_json(finding_to_json(f)) == f);
}
