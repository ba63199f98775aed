#pragma once

// Versioned CSV and JSON renderings of evaluation results. The schemas are
// documented in docs/reports.md; every CSV starts with a header row whose
// column names carry their units.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "triqdef/evaluation.hpp"

namespace triqdef::reports {

inline constexpr const char* kCleanSchema = "triqdef.clean/1";
inline constexpr const char* kTransferSchema = "triqdef.transfer/1";
inline constexpr const char* kAlignSchema = "triqdef.align/1";
inline constexpr const char* kAblationSchema = "triqdef.ablation/1";
inline constexpr const char* kSweepSchema = "triqdef.sweep/1";

nlohmann::json clean_json(const std::map<int, double>& accuracy);
std::string clean_csv(const std::map<int, double>& accuracy);

nlohmann::json transfer_json(const evaluation::TransferReport& r);
/// Inverse of transfer_json. Throws DataError on schema violations.
evaluation::TransferReport transfer_from_json(const nlohmann::json& j);
std::string transfer_csv(const evaluation::TransferReport& r);

nlohmann::json align_json(const std::vector<evaluation::SimilarityEntry>& entries);
std::string align_csv(const std::vector<evaluation::SimilarityEntry>& entries);

/// One row of an ablation or sweep table.
struct SummaryRow {
    std::string variant;          // e.g. "full", "w/o FDP", "alpha=0.5"
    std::string split;            // "seen" or "unseen"
    double cross_bit_asr = 0.0;   // mean over source != target cells
    double mean_asr = 0.0;        // mean over all cells
    std::map<int, double> clean_accuracy;
};

nlohmann::json summary_json(const char* schema, const std::vector<SummaryRow>& rows);
std::string summary_csv(const std::vector<SummaryRow>& rows);

/// Writes <dir>/<stem>.json and <dir>/<stem>.csv.
void write(const std::string& dir, const std::string& stem, const nlohmann::json& j, const std::string& csv);

} // namespace triqdef::reports
