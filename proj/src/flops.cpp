#include "oaf/flops.hpp"

#include <sstream>

namespace oaf {

namespace flops {

namespace {
thread_local FlopCounter* g_active = nullptr;
thread_local bool g_count_only = false;
thread_local std::vector<std::string> g_scope;
} // namespace

FlopCounter* active() { return g_active; }
void set_active(FlopCounter* counter) { g_active = counter; }
bool count_only() { return g_count_only; }
void set_count_only(bool on) { g_count_only = on; }

std::string scope_label() {
    std::string out;
    for (const auto& s : g_scope) {
        if (!out.empty()) out += '.';
        out += s;
    }
    return out;
}

void push_scope(const std::string& name) { g_scope.push_back(name); }
void pop_scope() { g_scope.pop_back(); }

void add(const char* op, long long n) {
    if (!g_active || n == 0) return;
    std::string label = scope_label();
    if (label.empty())
        label = op;
    else {
        label += '.';
        label += op;
    }
    g_active->add(label, n);
}

} // namespace flops

FlopReport flop_report(const FlopCounter& counter) {
    FlopReport report;
    report.rows.reserve(counter.per_op().size());
    for (const auto& [label, n] : counter.per_op())
        report.rows.push_back({label, n});
    report.total = counter.total();
    return report;
}

std::string FlopReport::to_text() const {
    std::ostringstream os;
    os << "flops by op\n";
    for (const auto& row : rows)
        os << "  " << row.label << "  " << row.flops << "\n";
    os << "total_flops " << total << "\n";
    if (params_total > 0) os << "params_total " << params_total << "\n";
    if (n_views > 0) os << "n_views " << n_views << "\n";
    if (marginal_per_view > 0) os << "marginal_per_view " << marginal_per_view << "\n";
    return os.str();
}

std::string FlopReport::to_kv() const {
    std::ostringstream os;
    for (const auto& row : rows)
        os << row.label << "=" << row.flops << "\n";
    os << "total=" << total << "\n";
    if (params_total > 0) os << "params=" << params_total << "\n";
    if (n_views > 0) os << "views=" << n_views << "\n";
    if (marginal_per_view > 0) os << "marginal_per_view=" << marginal_per_view << "\n";
    return os.str();
}

} // namespace oaf
