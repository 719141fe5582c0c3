#pragma once

#include "leakfix/corpus.hpp"
#include "leakfix/rewrite.hpp"

#include <string>
#include <vector>

namespace leakfix {

struct PipelineConfig {
    Program program;
    BindingFn binding;
    size_t input_len = 16;
    ModelConfig model = ModelConfig::default_config();
    size_t traces_fix = 10000;     // per campaign while fixing
    size_t traces_verify = 100000; // final re-verification
    int fixed_input_count = 5;
    std::vector<std::vector<uint8_t>> explicit_fixed_inputs; // overrides count
    int max_iterations = 20;
    double threshold = 4.5;
    uint64_t seed = 1;
    std::string out_dir; // empty = no files written
};

struct PipelineResult {
    Program final_program;
    std::vector<size_t> flagged_per_iteration;
    TTestReport final_report; // fresh-seed, fresh-input verification
    size_t remaining_flags = 0;
    size_t before_count = 0, after_count = 0;
    double overhead_ratio = 1.0;
    RewriteLog log;
    bool converged = false; // no flags, or no further applicable fixes
};

// The emulate / test / rewrite loop: campaigns over all fixed inputs are
// aggregated by max |t|, flagged slots rewritten, repeated until a fresh
// campaign flags nothing or no rule applies; then a verification campaign
// with a fresh seed and fresh fixed inputs measures what remains.
PipelineResult run_pipeline(const PipelineConfig& config);

struct TrendRow {
    size_t n_fixed_inputs = 0;
    double mean_flagged = 0.0;
    double ci_low = 0.0, ci_high = 0.0; // 95% over the repetitions
};

// Repeats input selection 10 times per count and reports the mean and 95%
// confidence interval of the number of distinct flagged slots discovered.
std::vector<TrendRow> leak_trend(const PipelineConfig& config,
                                 const std::vector<size_t>& input_counts, int repetitions = 10);

// Binding for plain (non-corpus) programs: the input goes to a region named
// "input" xored with fresh mask bytes that also land in "mask" (when those
// regions exist); r7 always receives a fresh random word.
BindingFn generic_binding(const Program& p);

} // namespace leakfix
