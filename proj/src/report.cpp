#include "dg/report.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "dg/error.hpp"

namespace dg {

void write_reports_csv(std::span<const EvalReport> reports, std::ostream& out, bool header) {
    if (header) out << "scenario,variant,bits,score,asr,refusal,utility,asr_no_trigger,score_no_trigger,n_eval\n";
    for (const auto& r : reports)
        out << scenario_name(r.scenario.kind) << ',' << r.variant << ',' << r.bits << ',' << r.mean_score << ','
            << r.asr << ',' << r.refusal_rate << ',' << r.utility_acc << ',' << r.asr_no_trigger << ','
            << r.mean_score_no_trigger << ',' << r.n_eval << '\n';
}

void write_reports_markdown(std::span<const EvalReport> reports, std::ostream& out) {
    out << "| scenario | variant | score | ASR | ASR w/o trigger | refusal | utility |\n";
    out << "|---|---|---|---|---|---|---|\n";
    out << std::fixed << std::setprecision(3);
    for (const auto& r : reports)
        out << "| " << scenario_name(r.scenario.kind) << " | " << r.variant << " | " << r.mean_score << " | " << r.asr
            << " | " << r.asr_no_trigger << " | " << r.refusal_rate << " | " << r.utility_acc << " |\n";
    out << std::defaultfloat;
}

std::vector<SweepRow> sweep_rows(std::uint64_t seed, const EvalReport& r) {
    return {{seed, r.bits, "asr", r.asr},
            {seed, r.bits, "score", r.mean_score},
            {seed, r.bits, "refusal", r.refusal_rate},
            {seed, r.bits, "utility", r.utility_acc},
            {seed, r.bits, "asr_no_trigger", r.asr_no_trigger}};
}

void write_sweep_rows(std::span<const SweepRow> rows, std::ostream& out) {
    for (const auto& r : rows) out << r.seed << ',' << r.bits << ',' << r.metric << ',' << r.value << '\n';
}

std::vector<SweepRow> read_sweep_csv(std::istream& in) {
    std::vector<SweepRow> rows;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (first && line == kSweepCsvHeader) {
            first = false;
            continue;
        }
        first = false;
        std::stringstream ss(line);
        std::string seed, bits, metric, value;
        if (!std::getline(ss, seed, ',') || !std::getline(ss, bits, ',') || !std::getline(ss, metric, ',') ||
            !std::getline(ss, value))
            throw FormatError("malformed sweep row: " + line);
        try {
            rows.push_back({std::stoull(seed), std::stoi(bits), metric, std::stod(value)});
        } catch (const std::exception&) {
            throw FormatError("malformed sweep row: " + line);
        }
    }
    return rows;
}

std::map<std::string, std::map<int, double>> sweep_means(std::span<const SweepRow> rows) {
    std::map<std::string, std::map<int, std::pair<double, int>>> acc;
    for (const auto& r : rows) {
        auto& [sum, n] = acc[r.metric][r.bits];
        sum += r.value;
        ++n;
    }
    std::map<std::string, std::map<int, double>> out;
    for (const auto& [metric, by_bits] : acc)
        for (const auto& [bits, sn] : by_bits) out[metric][bits] = sn.first / sn.second;
    return out;
}

void write_sweep_markdown(std::span<const SweepRow> rows, std::ostream& out) {
    auto means = sweep_means(rows);
    std::set<int> bits;
    for (const auto& [m, by] : means)
        for (const auto& [b, v] : by) bits.insert(b);
    out << "| metric |";
    for (int b : bits) out << " " << b << "-bit |";
    out << "\n|---|";
    for (std::size_t i = 0; i < bits.size(); ++i) out << "---|";
    out << "\n" << std::fixed << std::setprecision(3);
    for (const auto& [metric, by] : means) {
        out << "| " << metric << " |";
        for (int b : bits) {
            auto it = by.find(b);
            if (it == by.end())
                out << " - |";
            else
                out << " " << it->second << " |";
        }
        out << "\n";
    }
    out << std::defaultfloat;
}

namespace {
std::vector<double> ranks(std::span<const double> v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}
} // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw InputError("spearman: need two equal-length series of length >= 2");
    auto rx = ranks(x), ry = ranks(y);
    double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
    double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0 || syy == 0) return std::nan("");
    return sxy / std::sqrt(sxx * syy);
}

} // namespace dg
