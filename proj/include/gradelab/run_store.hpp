#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace gradelab {

// Append-only line-delimited JSON, one file per artifact kind, one directory
// per run. Single writer; readers may load at any time.
class RunStore {
public:
    static constexpr const char* kRubrics = "rubrics";
    static constexpr const char* kGrades = "grades";
    static constexpr const char* kReviews = "reviews";
    static constexpr const char* kInjections = "injections";
    static constexpr const char* kReports = "reports";

    RunStore(std::filesystem::path root, std::string run_id);

    const std::filesystem::path& dir() const { return dir_; }
    const std::string& run_id() const { return run_id_; }

    void append(const std::string& kind, const nlohmann::json& record);

    struct Corruption {
        std::size_t line = 0;  // 1-based
        std::string message;
    };
    struct LoadResult {
        std::vector<nlohmann::json> records;
        std::vector<Corruption> corrupt;  // bad lines, reported not fatal
    };
    LoadResult load(const std::string& kind) const;

    // Pipeline checkpointing: stages marked complete are skipped on resume.
    std::vector<std::string> completed_stages() const;
    void mark_stage(const std::string& stage, const std::string& config_fingerprint);
    std::string checkpoint_fingerprint() const;  // empty when no checkpoint yet
    // Drops a stage's artifact file so an interrupted stage can restart
    // without duplicating records.
    void reset_kind(const std::string& kind);

private:
    std::filesystem::path dir_;
    std::string run_id_;

    std::filesystem::path kind_path(const std::string& kind) const;
    std::filesystem::path checkpoint_path() const;
};

}  // namespace gradelab
