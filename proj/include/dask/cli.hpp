#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "dask/config.hpp"

namespace dask {

/// Process exit statuses.
enum ExitCode : int { exit_ok = 0, exit_usage = 1, exit_invalid = 2, exit_runtime = 3 };

/// Report layout shared by run (metrics.json) and ablate (table.json rows).
nlohmann::json report_json(const MetricsReport& report);
/// metrics.json: report plus seed, variant, config hash, resolved config and step history.
nlohmann::json metrics_json(const MetricsReport& report, const ExperimentConfig& cfg,
                            const std::vector<StepRecord>& history);
/// Empty when `j` follows the metrics.json schema, otherwise the first problem found.
std::string metrics_schema_error(const nlohmann::json& j);

/// Entry point of the dask command-line tool. Messages go to stderr.
int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);

}  // namespace dask
