#include "gradelab/run_store.hpp"

#include <fstream>

#include "gradelab/errors.hpp"

namespace gradelab {

namespace fs = std::filesystem;
using nlohmann::json;

RunStore::RunStore(fs::path root, std::string run_id)
    : dir_(root / run_id), run_id_(std::move(run_id)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create run directory " + dir_.string() + ": " + ec.message());
}

fs::path RunStore::kind_path(const std::string& kind) const {
    return dir_ / (kind + ".jsonl");
}

fs::path RunStore::checkpoint_path() const {
    return dir_ / "checkpoint.json";
}

void RunStore::append(const std::string& kind, const json& record) {
    std::ofstream out(kind_path(kind), std::ios::app);
    if (!out) throw IoError("cannot append to " + kind_path(kind).string());
    out << record.dump() << "\n";
    if (!out) throw IoError("write failed on " + kind_path(kind).string());
}

RunStore::LoadResult RunStore::load(const std::string& kind) const {
    LoadResult result;
    std::ifstream in(kind_path(kind));
    if (!in) return result;  // nothing appended yet
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            result.records.push_back(json::parse(line));
        } catch (const json::exception& e) {
            result.corrupt.push_back({lineno, e.what()});
        }
    }
    return result;
}

std::vector<std::string> RunStore::completed_stages() const {
    std::ifstream in(checkpoint_path());
    if (!in) return {};
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("corrupt checkpoint " + checkpoint_path().string() + ": " + e.what());
    }
    return j.value("completed", std::vector<std::string>{});
}

std::string RunStore::checkpoint_fingerprint() const {
    std::ifstream in(checkpoint_path());
    if (!in) return {};
    json j;
    try {
        in >> j;
    } catch (const json::exception&) {
        return {};
    }
    return j.value("fingerprint", std::string{});
}

void RunStore::mark_stage(const std::string& stage, const std::string& config_fingerprint) {
    auto stages = completed_stages();
    for (const auto& s : stages) {
        if (s == stage) return;
    }
    stages.push_back(stage);
    json j{{"completed", stages}, {"fingerprint", config_fingerprint}};
    std::ofstream out(checkpoint_path(), std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + checkpoint_path().string());
    out << j.dump(2) << "\n";
}

void RunStore::reset_kind(const std::string& kind) {
    std::error_code ec;
    fs::remove(kind_path(kind), ec);
}

}  // namespace gradelab
