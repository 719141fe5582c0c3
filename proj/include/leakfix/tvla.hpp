#pragma once

#include "leakfix/model.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace leakfix {

struct Welford {
    uint64_t n = 0;
    double mean = 0.0;
    double m2 = 0.0;

    void update(double x) {
        n += 1;
        double delta = x - mean;
        mean += delta / static_cast<double>(n);
        m2 += delta * (x - mean);
    }
    double variance() const { return n >= 2 ? m2 / static_cast<double>(n - 1) : 0.0; }
    static Welford merged(const Welford& a, const Welford& b);
};

// Welch's two-sample t statistic. Degenerate inputs (both variances zero):
// equal means give 0, unequal means give the +/-inf sentinel.
double welch_t(const Welford& a, const Welford& b);

enum class Cause {
    None = 0,
    OperandInteraction,
    RegisterOverwrite,
    Bus,
    MemoryOverwrite,
    StoreLatch,
    ByteAdjacency,
    RotationAlignment,
};
const char* cause_name(Cause c);
Cause cause_from_name(const std::string& s);

struct SlotStats {
    size_t slot = 0;
    size_t static_index = 0;
    Mnemonic mnemonic = Mnemonic::Nop;
    int source_line = 0;
    double t_total = 0.0;
    std::array<double, kNumComponents> t_comp{};
    uint64_t n_fixed = 0, n_random = 0;
    Cause cause = Cause::None;

    bool flagged() const { return cause != Cause::None; }
    double max_abs_t() const;
};

struct TTestReport {
    std::vector<SlotStats> slots;
    double threshold = 4.5;

    size_t flagged_count() const;
    std::vector<size_t> flagged_static_indices() const;
    double max_abs_t() const;
    std::string to_csv() const;
    static TTestReport from_csv(const std::string& text);
};

// Fills the initial machine state for one trace: the plain input vector goes
// to its region masked with trace-fresh randomness, mask regions get the
// masks, and r7 receives a fresh random word.
using BindingFn = std::function<void(MachineState&, std::span<const uint8_t> input, Rng&)>;

struct CampaignSpec {
    const Program* program = nullptr;
    size_t n_traces = 10000; // total; half fixed, half random, interleaved
    std::vector<std::vector<uint8_t>> fixed_inputs;
    size_t input_len = 0;
    double threshold = 4.5;
    uint64_t seed = 0;
    BindingFn binding;
};

struct CampaignError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One fixed-vs-random campaign for a single fixed input.
TTestReport run_single_campaign(const CampaignSpec& spec, const ModelConfig& model,
                                std::span<const uint8_t> fixed_input, uint64_t seed);

// All fixed inputs of the spec, aggregated by largest absolute t per entry.
TTestReport run_campaign(const CampaignSpec& spec, const ModelConfig& model);

TTestReport aggregate_max(std::span<const TTestReport> reports);

// Attribution: the flagged mapped component with the largest |t| names the
// cause; ties resolve toward the more specific storage effect.
Cause classify_cause(const SlotStats& s, Mnemonic m, double threshold);

std::vector<uint8_t> random_input(size_t len, Rng& rng);

} // namespace leakfix
