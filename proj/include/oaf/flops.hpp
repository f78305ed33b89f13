#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace oaf {

// FLOP convention (used by every op and by the analytic oracles in tests):
//   multiply-accumulate          2   (matmul 2*M*K*N, convNd 2*prod)
//   add/sub/mul/abs/clamp/lrelu  1 per element
//   sigmoid                      4 per element
//   gelu                         5 per element
//   softmax, layer_norm          5 per element (exp/sub/div/max amortized)
//   bias add                     1 per output element
//   bilinear upsample            8 per output element
//   reductions (sum/mean/max)    1 per input element
//   data movement (reshape, permute, concat, slice) 0
class FlopCounter {
public:
    void add(const std::string& label, long long n) {
        per_op_[label] += n;
        total_ += n;
    }
    long long total() const { return total_; }
    const std::map<std::string, long long>& per_op() const { return per_op_; }
    void clear() {
        per_op_.clear();
        total_ = 0;
    }

private:
    std::map<std::string, long long> per_op_;
    long long total_ = 0;
};

// Hierarchical FLOP summary: one row per module.stage.op label, plus whole
// model totals filled in by the model-level profiler.
struct FlopReport {
    struct Row {
        std::string label; // "module.stage.op"
        long long flops = 0;
    };
    std::vector<Row> rows; // sorted by label
    long long total = 0;
    long long params_total = 0;     // 0 unless produced by the model profiler
    long long marginal_per_view = 0; // FLOPs(N+1) - FLOPs(N)
    int n_views = 0;

    std::string to_text() const;
    std::string to_kv() const; // one "module.stage.op=flops" line per row
};

FlopReport flop_report(const FlopCounter& counter);

namespace flops {

// Thread-local recording context. When no counter is active, ops skip
// recording entirely. In count-only mode ops also skip their arithmetic and
// produce value-less shells: shape logic and tallies stay identical, which is
// what makes profiling big configs cheap.
FlopCounter* active();
void set_active(FlopCounter* counter);
bool count_only();
void set_count_only(bool on);
std::string scope_label();
void push_scope(const std::string& name);
void pop_scope();
void add(const char* op, long long n);

struct Scope {
    explicit Scope(const std::string& name) { push_scope(name); }
    ~Scope() { pop_scope(); }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;
};

struct CountGuard {
    explicit CountGuard(FlopCounter* counter, bool shell_mode = false)
        : prev_(active()), prev_count_only_(count_only()) {
        set_active(counter);
        set_count_only(shell_mode);
    }
    ~CountGuard() {
        set_active(prev_);
        set_count_only(prev_count_only_);
    }
    CountGuard(const CountGuard&) = delete;
    CountGuard& operator=(const CountGuard&) = delete;

private:
    FlopCounter* prev_;
    bool prev_count_only_;
};

} // namespace flops
} // namespace oaf
