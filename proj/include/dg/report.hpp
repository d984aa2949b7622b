#pragma once

// Table-shaped CSV and markdown output for evaluation reports and sweeps.

#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dg/harness.hpp"

namespace dg {

/// Columns: scenario,variant,bits,score,asr,refusal,utility,asr_no_trigger,score_no_trigger,n_eval.
void write_reports_csv(std::span<const EvalReport> reports, std::ostream& out, bool header = true);
void write_reports_markdown(std::span<const EvalReport> reports, std::ostream& out);

/// One long-form sweep observation.
struct SweepRow {
    std::uint64_t seed = 0;
    int bits = 0;
    std::string metric;
    double value = 0.0;
};

inline constexpr const char* kSweepCsvHeader = "seed,bits,metric,value";

/// Rows for the k-bit report of one sweep cell (asr, score, refusal, utility, asr_no_trigger).
std::vector<SweepRow> sweep_rows(std::uint64_t seed, const EvalReport& r);
void write_sweep_rows(std::span<const SweepRow> rows, std::ostream& out);
/// Parses a long-form sweep CSV; throws FormatError on malformed lines.
std::vector<SweepRow> read_sweep_csv(std::istream& in);

/// metric -> bits -> mean over seeds.
std::map<std::string, std::map<int, double>> sweep_means(std::span<const SweepRow> rows);
void write_sweep_markdown(std::span<const SweepRow> rows, std::ostream& out);

/// Spearman rank correlation with average ranks for ties. Returns NaN when
/// either input is constant.
double spearman(std::span<const double> x, std::span<const double> y);

} // namespace dg
