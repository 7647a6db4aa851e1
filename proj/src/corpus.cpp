#include "gradelab/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "gradelab/errors.hpp"
#include "gradelab/rng.hpp"

namespace gradelab {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(DatasetTag tag) {
    switch (tag) {
        case DatasetTag::os: return "os";
        case DatasetTag::mohler: return "mohler";
        case DatasetTag::synthetic: return "synthetic";
    }
    return "synthetic";
}

std::string to_string(Granularity g) {
    switch (g) {
        case Granularity::coarse_human: return "coarse_human";
        case Granularity::fine_human: return "fine_human";
        case Granularity::generated_random: return "generated_random";
        case Granularity::generated_distribution: return "generated_distribution";
    }
    return "coarse_human";
}

DatasetTag dataset_tag_from_string(const std::string& s) {
    if (s == "os") return DatasetTag::os;
    if (s == "mohler") return DatasetTag::mohler;
    if (s == "synthetic") return DatasetTag::synthetic;
    throw ValidationError("unknown dataset tag: " + s);
}

Granularity granularity_from_string(const std::string& s) {
    if (s == "coarse_human") return Granularity::coarse_human;
    if (s == "fine_human") return Granularity::fine_human;
    if (s == "generated_random") return Granularity::generated_random;
    if (s == "generated_distribution") return Granularity::generated_distribution;
    throw ValidationError("unknown rubric granularity: " + s);
}

std::string rubric_ref(const Rubric& r) {
    return r.question_id + "/" + to_string(r.granularity) + "/v" + std::to_string(r.version);
}

const Question* Corpus::find_question(const std::string& id) const {
    for (const auto& q : questions) {
        if (q.id == id) return &q;
    }
    return nullptr;
}

const Answer* Corpus::find_answer(const std::string& id) const {
    for (const auto& a : answers) {
        if (a.id == id) return &a;
    }
    return nullptr;
}

std::vector<const Answer*> Corpus::answers_for(const std::string& question_id) const {
    std::vector<const Answer*> out;
    for (const auto& a : answers) {
        if (a.question_id == question_id) out.push_back(&a);
    }
    std::sort(out.begin(), out.end(),
              [](const Answer* a, const Answer* b) { return a->id < b->id; });
    return out;
}

std::optional<double> Corpus::human_final(const std::string& answer_id) const {
    for (const auto& s : human_scores) {
        if (s.answer_id == answer_id && s.scorer.kind == ScorerKind::human_final) {
            return s.score;
        }
    }
    return std::nullopt;
}

const Rubric* Corpus::rubric_for(const std::string& question_id, Granularity g) const {
    for (const auto& r : rubrics) {
        if (r.question_id == question_id && r.granularity == g) return &r;
    }
    return nullptr;
}

void validate(const Corpus& corpus) {
    std::set<std::string> question_ids;
    std::map<std::string, double> full_by_question;
    for (const auto& q : corpus.questions) {
        if (q.id.empty()) throw ValidationError("question with empty id");
        if (!question_ids.insert(q.id).second) {
            throw ValidationError("duplicate question id: " + q.id);
        }
        if (!(q.full_points > 0.0)) {
            throw ValidationError("question " + q.id + ": full_points must be positive");
        }
        full_by_question[q.id] = q.full_points;
    }

    for (const auto& r : corpus.rubrics) {
        if (!question_ids.count(r.question_id)) {
            throw ValidationError("rubric references unknown question: " + r.question_id);
        }
        if (r.body.empty()) {
            throw ValidationError("empty rubric body for question " + r.question_id);
        }
        if (r.version == 0 && r.lineage) {
            throw ValidationError("rubric version 0 cannot have lineage (" + r.question_id + ")");
        }
        if (r.version > 0 && !r.lineage) {
            throw ValidationError("rubric version " + std::to_string(r.version) +
                                  " missing lineage (" + r.question_id + ")");
        }
        if (r.version < 0) throw ValidationError("negative rubric version");
    }

    std::set<std::string> answer_ids;
    std::set<std::pair<std::string, std::string>> question_student;
    std::map<std::string, std::string> answer_question;
    for (const auto& a : corpus.answers) {
        if (a.text.empty()) throw ValidationError("answer " + a.id + " has empty text");
        if (!answer_ids.insert(a.id).second) {
            throw ValidationError("duplicate answer id: " + a.id);
        }
        if (!question_ids.count(a.question_id)) {
            throw ValidationError("answer " + a.id + " references unknown question " +
                                  a.question_id);
        }
        if (!question_student.insert({a.question_id, a.student_id}).second) {
            throw ValidationError("student " + a.student_id + " answers question " +
                                  a.question_id + " more than once");
        }
        answer_question[a.id] = a.question_id;
    }

    for (const auto& s : corpus.human_scores) {
        auto it = answer_question.find(s.answer_id);
        if (it == answer_question.end()) {
            throw ValidationError("score references unknown answer: " + s.answer_id);
        }
        const double full = full_by_question.at(it->second);
        if (s.score < 0.0 || s.score > full) {
            throw ValidationError("score " + std::to_string(s.score) + " for answer " +
                                  s.answer_id + " outside [0, " + std::to_string(full) + "]");
        }
    }
}

namespace {

void canonicalize(Corpus& corpus) {
    std::sort(corpus.questions.begin(), corpus.questions.end(),
              [](const Question& a, const Question& b) { return a.id < b.id; });
    std::sort(corpus.rubrics.begin(), corpus.rubrics.end(), [](const Rubric& a, const Rubric& b) {
        return std::tie(a.question_id, a.granularity, a.version) <
               std::tie(b.question_id, b.granularity, b.version);
    });
    std::sort(corpus.answers.begin(), corpus.answers.end(), [](const Answer& a, const Answer& b) {
        return std::tie(a.question_id, a.id) < std::tie(b.question_id, b.id);
    });
    std::sort(corpus.human_scores.begin(), corpus.human_scores.end(),
              [](const ScoredAnswer& a, const ScoredAnswer& b) {
                  const int ka = a.scorer.kind == ScorerKind::human_final ? 1 : 0;
                  const int kb = b.scorer.kind == ScorerKind::human_final ? 1 : 0;
                  return std::tie(a.answer_id, ka, a.scorer.index) <
                         std::tie(b.answer_id, kb, b.scorer.index);
              });
}

json parse_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return j;
}

void load_os_question_file(const fs::path& path, Corpus& corpus) {
    const json j = parse_json_file(path);
    try {
        Question q;
        q.id = j.at("id").get<std::string>();
        q.text = j.at("text").get<std::string>();
        q.full_points = j.at("full_points").get<double>();
        if (j.contains("supplementary") && !j["supplementary"].is_null()) {
            q.supplementary = j["supplementary"].get<std::string>();
        }
        q.dataset_tag = DatasetTag::os;
        corpus.questions.push_back(q);

        for (const auto& rj : j.value("rubrics", json::array())) {
            Rubric r;
            r.question_id = q.id;
            r.version = 0;
            r.granularity = granularity_from_string(rj.at("granularity").get<std::string>());
            r.body = rj.at("body").get<std::string>();
            corpus.rubrics.push_back(r);
        }

        for (const auto& aj : j.value("answers", json::array())) {
            Answer a;
            a.id = aj.at("id").get<std::string>();
            a.question_id = q.id;
            a.student_id = aj.at("student_id").get<std::string>();
            a.text = aj.at("text").get<std::string>();
            corpus.answers.push_back(a);

            std::vector<double> grades;
            for (const auto& g : aj.at("human_scores")) grades.push_back(g.get<double>());
            if (grades.empty()) throw ParseError("answer " + a.id + " has no human_scores");
            for (std::size_t i = 0; i < grades.size(); ++i) {
                corpus.human_scores.push_back(
                    {a.id, grades[i], {ScorerKind::human_individual, static_cast<int>(i)}, {}});
            }
            corpus.human_scores.push_back(
                {a.id, resolve_human_final(grades), {ScorerKind::human_final, -1}, {}});
        }
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

// Minimal CSV with double-quote escaping; fields may contain the delimiter
// and newlines when quoted.
std::vector<std::vector<std::string>> parse_delimited(const std::string& text, char delim) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"' && field.empty()) {
            quoted = true;
            any = true;
        } else if (c == delim) {
            row.push_back(field);
            field.clear();
            any = true;
        } else if (c == '\n') {
            if (any || !field.empty()) {
                row.push_back(field);
                rows.push_back(row);
            }
            row.clear();
            field.clear();
            any = false;
        } else if (c == '\r') {
            // swallow
        } else {
            field += c;
            any = true;
        }
    }
    if (quoted) throw ParseError("unterminated quoted field");
    if (any || !field.empty()) {
        row.push_back(field);
        rows.push_back(row);
    }
    return rows;
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out += c;
    }
    out += "\"";
    return out;
}

double parse_score_field(const std::string& s) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
        if (pos != s.size()) throw ParseError("trailing characters in score: '" + s + "'");
        return v;
    } catch (const std::invalid_argument&) {
        throw ParseError("not a number: '" + s + "'");
    } catch (const std::out_of_range&) {
        throw ParseError("score out of numeric range: '" + s + "'");
    }
}

}  // namespace

Corpus load_os_dataset(const fs::path& path) {
    Corpus corpus;
    corpus.tag = DatasetTag::os;
    if (fs::is_directory(path)) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(path)) {
            if (entry.path().extension() == ".json") files.push_back(entry.path());
        }
        if (files.empty()) throw IoError("no .json question files in " + path.string());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) load_os_question_file(f, corpus);
    } else if (fs::exists(path)) {
        load_os_question_file(path, corpus);
    } else {
        throw IoError("no such path: " + path.string());
    }
    canonicalize(corpus);
    validate(corpus);
    return corpus;
}

void save_os_dataset(const Corpus& corpus, const fs::path& dir) {
    fs::create_directories(dir);
    for (const auto& q : corpus.questions) {
        json j;
        j["id"] = q.id;
        j["text"] = q.text;
        j["full_points"] = q.full_points;
        if (q.supplementary) j["supplementary"] = *q.supplementary;
        j["rubrics"] = json::array();
        for (const auto& r : corpus.rubrics) {
            if (r.question_id != q.id) continue;
            j["rubrics"].push_back({{"granularity", to_string(r.granularity)}, {"body", r.body}});
        }
        j["answers"] = json::array();
        for (const auto& a : corpus.answers) {
            if (a.question_id != q.id) continue;
            std::vector<double> grades;
            for (const auto& s : corpus.human_scores) {
                if (s.answer_id == a.id && s.scorer.kind == ScorerKind::human_individual) {
                    grades.push_back(s.score);
                }
            }
            j["answers"].push_back({{"id", a.id},
                                    {"student_id", a.student_id},
                                    {"text", a.text},
                                    {"human_scores", grades}});
        }
        std::ofstream out(dir / (q.id + ".json"));
        if (!out) throw IoError("cannot write " + (dir / (q.id + ".json")).string());
        out << j.dump(2) << "\n";
    }
}

Corpus load_mohler_dataset(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();

    const auto first_newline = text.find('\n');
    const std::string header_line = text.substr(0, first_newline);
    const char delim = header_line.find('\t') != std::string::npos ? '\t' : ',';

    const auto rows = parse_delimited(text, delim);
    if (rows.empty()) throw ParseError(path.string() + ": empty file");
    const auto& header = rows.front();
    if (header.size() < 6 || header[0] != "question_id") {
        throw ParseError(path.string() + ": missing or malformed header row");
    }

    constexpr double kFullPoints = 5.0;
    Corpus corpus;
    corpus.tag = DatasetTag::mohler;
    std::map<std::string, int> per_question_count;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& row = rows[i];
        if (row.size() != 6) {
            throw ParseError(path.string() + ": row " + std::to_string(i + 1) + " has " +
                             std::to_string(row.size()) + " fields, expected 6");
        }
        const std::string& qid = row[0];
        if (!per_question_count.count(qid)) {
            Question q;
            q.id = qid;
            q.text = row[1];
            q.full_points = kFullPoints;
            q.dataset_tag = DatasetTag::mohler;
            corpus.questions.push_back(q);
            // the desired answer doubles as the coarse rubric
            Rubric r;
            r.question_id = qid;
            r.version = 0;
            r.granularity = Granularity::coarse_human;
            r.body = row[2];
            corpus.rubrics.push_back(r);
            per_question_count[qid] = 0;
        }
        const int n = ++per_question_count[qid];
        char sid[16];
        std::snprintf(sid, sizeof(sid), "s%02d", n);

        Answer a;
        a.id = qid + "_" + sid;
        a.question_id = qid;
        a.student_id = sid;
        a.text = row[3];
        corpus.answers.push_back(a);

        const double g1 = parse_score_field(row[4]);
        const double g2 = parse_score_field(row[5]);
        corpus.human_scores.push_back({a.id, g1, {ScorerKind::human_individual, 0}, {}});
        corpus.human_scores.push_back({a.id, g2, {ScorerKind::human_individual, 1}, {}});
        corpus.human_scores.push_back(
            {a.id, resolve_human_final({g1, g2}), {ScorerKind::human_final, -1}, {}});
    }
    canonicalize(corpus);
    validate(corpus);
    return corpus;
}

void save_mohler_dataset(const Corpus& corpus, const fs::path& file) {
    std::ofstream out(file);
    if (!out) throw IoError("cannot write " + file.string());
    out << "question_id,question,desired_answer,student_answer,score1,score2\n";
    for (const auto& q : corpus.questions) {
        const Rubric* coarse = corpus.rubric_for(q.id, Granularity::coarse_human);
        const std::string desired = coarse ? coarse->body : "";
        for (const auto& a : corpus.answers) {
            if (a.question_id != q.id) continue;
            std::vector<double> grades;
            for (const auto& s : corpus.human_scores) {
                if (s.answer_id == a.id && s.scorer.kind == ScorerKind::human_individual) {
                    grades.push_back(s.score);
                }
            }
            json g1 = grades.size() > 0 ? grades[0] : 0.0;
            json g2 = grades.size() > 1 ? grades[1] : 0.0;
            out << csv_escape(q.id) << "," << csv_escape(q.text) << "," << csv_escape(desired)
                << "," << csv_escape(a.text) << "," << g1.dump() << "," << g2.dump() << "\n";
        }
    }
}

double resolve_human_final(const std::vector<double>& scores) {
    if (scores.empty()) throw ValidationError("cannot resolve a final score from no scores");
    double acc = 0.0;
    for (double s : scores) acc += s;
    return acc / static_cast<double>(scores.size());
}

InjectionResult inject_anomalies(const std::vector<ScoredAnswer>& pairs, double full_points,
                                 double fraction, std::uint64_t seed) {
    if (pairs.empty()) throw ValidationError("inject_anomalies: no pairs");
    if (!(fraction > 0.0 && fraction < 1.0)) {
        throw ValidationError("injection fraction must lie in (0,1)");
    }
    if (!(full_points > 0.0)) throw ValidationError("full_points must be positive");

    const std::size_t n = pairs.size();
    const std::size_t count =
        static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return pairs[a].answer_id < pairs[b].answer_id;
    });
    auto rng = seeded_rng(derive_seed(seed, "inject-select"));
    seeded_shuffle(order, rng);

    InjectionResult result;
    result.pairs = pairs;
    const double floor_delta = 0.3 * full_points;
    for (std::size_t i = 0; i < count; ++i) {
        ScoredAnswer& target = result.pairs[order[i]];
        auto prng = seeded_rng(derive_seed(seed, "inject-perturb", target.answer_id));
        const double delta = uniform_range(prng, floor_delta, 0.6 * full_points);
        double direction = uniform_below(prng, 2) == 0 ? 1.0 : -1.0;
        double injected =
            std::clamp(target.score + direction * delta, 0.0, full_points);
        if (std::abs(injected - target.score) + 1e-12 < floor_delta) {
            injected = std::clamp(target.score - direction * delta, 0.0, full_points);
        }
        result.records.push_back({target.answer_id, target.score, injected, seed});
        target.score = injected;
        target.scorer = {ScorerKind::injected, -1};
        target.rationale = std::nullopt;
    }
    std::sort(result.records.begin(), result.records.end(),
              [](const InjectionRecord& a, const InjectionRecord& b) {
                  return a.answer_id < b.answer_id;
              });
    return result;
}

json question_to_json(const Question& q) {
    json j{{"id", q.id},
           {"text", q.text},
           {"full_points", q.full_points},
           {"dataset_tag", to_string(q.dataset_tag)}};
    if (q.supplementary) j["supplementary"] = *q.supplementary;
    return j;
}

json rubric_to_json(const Rubric& r) {
    json j{{"question_id", r.question_id},
           {"version", r.version},
           {"body", r.body},
           {"granularity", to_string(r.granularity)}};
    if (r.lineage) j["lineage"] = *r.lineage;
    return j;
}

Rubric rubric_from_json(const json& j) {
    Rubric r;
    r.question_id = j.at("question_id").get<std::string>();
    r.version = j.at("version").get<int>();
    r.body = j.at("body").get<std::string>();
    r.granularity = granularity_from_string(j.at("granularity").get<std::string>());
    if (j.contains("lineage")) r.lineage = j["lineage"].get<std::string>();
    return r;
}

json scored_answer_to_json(const ScoredAnswer& s) {
    json scorer{{"kind", [&] {
                     switch (s.scorer.kind) {
                         case ScorerKind::human_final: return "human_final";
                         case ScorerKind::human_individual: return "human_individual";
                         case ScorerKind::llm: return "llm";
                         case ScorerKind::injected: return "injected";
                     }
                     return "llm";
                 }()}};
    if (s.scorer.kind == ScorerKind::human_individual) scorer["index"] = s.scorer.index;
    json j{{"answer_id", s.answer_id}, {"score", s.score}, {"scorer", scorer}};
    if (s.rationale) j["rationale"] = *s.rationale;
    return j;
}

ScoredAnswer scored_answer_from_json(const json& j) {
    ScoredAnswer s;
    s.answer_id = j.at("answer_id").get<std::string>();
    s.score = j.at("score").get<double>();
    const std::string kind = j.at("scorer").at("kind").get<std::string>();
    if (kind == "human_final") s.scorer.kind = ScorerKind::human_final;
    else if (kind == "human_individual") s.scorer.kind = ScorerKind::human_individual;
    else if (kind == "llm") s.scorer.kind = ScorerKind::llm;
    else if (kind == "injected") s.scorer.kind = ScorerKind::injected;
    else throw ParseError("unknown scorer kind: " + kind);
    s.scorer.index = j.at("scorer").value("index", -1);
    if (j.contains("rationale")) s.rationale = j["rationale"].get<std::string>();
    return s;
}

json injection_to_json(const InjectionRecord& r) {
    return {{"answer_id", r.answer_id},
            {"original_score", r.original_score},
            {"injected_score", r.injected_score},
            {"seed", r.seed}};
}

InjectionRecord injection_from_json(const json& j) {
    InjectionRecord r;
    r.answer_id = j.at("answer_id").get<std::string>();
    r.original_score = j.at("original_score").get<double>();
    r.injected_score = j.at("injected_score").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
}

}  // namespace gradelab
