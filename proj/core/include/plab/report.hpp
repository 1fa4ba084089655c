#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "plab/analysis.hpp"
#include "plab/optim.hpp"
#include "plab/sweeps.hpp"

namespace plab {

struct RunSummary {
  ManifestEntry entry;
  RunRecord record;  // without parameters
  TauEstimate tau;
  PlateauMeasure plateau;
  DeltaZOnset onset;
  int fiber_size = 1;
};

RunSummary summarize_run(const RunRecord& rec, double alpha = 0.5);
std::vector<RunSummary> load_sweep(const std::filesystem::path& sweep_dir, double alpha = 0.5);

// Table names understood by report_csv.
const std::vector<std::string>& report_tables();
// Tables that make sense for a sweep family.
std::vector<std::string> default_tables(SweepFamily family);

std::string report_csv(const std::filesystem::path& sweep_dir, const std::string& table, double alpha = 0.5,
                       int resamples = 10000, std::uint64_t seed = 42);

// Writes <sweep>/reports/<table>.csv for each table plus SVG plots; returns
// the written paths.
std::vector<std::filesystem::path> write_reports(const std::filesystem::path& sweep_dir,
                                                 const std::vector<std::string>& tables, double alpha = 0.5,
                                                 int resamples = 10000, std::uint64_t seed = 42);

// Human-readable one-run summary (tau, plateau, onset, status).
std::string run_summary_text(const RunRecord& rec, double alpha = 0.5);

}  // namespace plab
