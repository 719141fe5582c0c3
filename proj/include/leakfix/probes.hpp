#pragma once

#include "leakfix/tvla.hpp"

#include <array>
#include <string>
#include <vector>

namespace leakfix {

// The 20-instruction probe universe (the modeled rows with two operands).
extern const std::array<Mnemonic, 20> kProbeUniverse;

enum class ProbedOperand { First, Second };

struct ProbeSpec {
    Mnemonic first = Mnemonic::Str;
    Mnemonic second = Mnemonic::Eors;
    int spacer_count = 9;
    ProbedOperand probed_operand = ProbedOperand::Second;
    size_t n_runs = 10000;
};

enum class Dominance { None = 0, First, Second, SameStorage };
const char* dominance_name(Dominance d);

struct InteractionVerdict {
    Mnemonic first = Mnemonic::Nop, second = Mnemonic::Nop;
    bool correlated = false;
    double peak_abs_r = 0.0;
    Dominance dominance = Dominance::None;
};

// Where a probed instruction carries its value of interest.
enum class ValueSource { Op1, Op2, Result };

// A generated probe program plus the run-time randomization plan and the
// slots whose values feed the correlation target.
struct ProbeProgram {
    Program program;
    size_t first_slot = 0;  // static index of the first probed instruction
    size_t second_slot = 0; // static index of the second probed instruction
    ValueSource first_src = ValueSource::Op2;
    ValueSource second_src = ValueSource::Op2;
    // fixed register values (addresses, constant operands)
    std::vector<std::pair<uint8_t, uint32_t>> reg_init;
    // per-run randomization: registers with width-limited fresh draws
    struct RegDraw {
        uint8_t reg;
        uint32_t mask; // random bits under this mask, rest zero
    };
    std::vector<RegDraw> reg_draws;
    struct CellDraw {
        uint32_t addr;
        uint32_t mask;
    };
    std::vector<CellDraw> cell_draws;
};

struct PearsonError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Sample Pearson correlation; throws PearsonError on zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

// Listing-shaped probe: first instruction, spacer_count `movs r7, r7`
// spacers, second instruction, with operand registers from disjoint sets and
// memory cells in a dedicated data region.
ProbeProgram gen_probe(const ProbeSpec& spec);

// Runs the probe battery for the ordered pair. Correlates, per slot, the
// emulated sample against HD(first value, second value) at the spaced
// arrangement and at the adjacent (zero spacer) arrangement; the model keeps
// pipeline operand effects at distance one, storage effects at any distance.
InteractionVerdict probe_interaction(const ProbeSpec& spec, const ModelConfig& model,
                                     uint64_t seed);

// Dominance probe: first, spacers, second (operating on the mask register per
// the middle-instruction convention), spacers, first again. The pair's
// dominant instruction is the one whose probed value survives the other, read
// at the second instance.
Dominance probe_dominance(Mnemonic first, Mnemonic second, const ModelConfig& model,
                          uint64_t seed, size_t n_runs = 10000,
                          double threshold = 0.1);

struct MatrixResult {
    std::array<std::array<InteractionVerdict, 20>, 20> cells{};

    std::string to_csv() const;
    // text grid: 'o' same storage, '<' row dominates, '^' column dominates,
    // '.' no interaction
    std::string to_grid() const;
    static MatrixResult parse_grid(const std::string& text);
};

MatrixResult build_matrix(const ModelConfig& model, uint64_t seed, size_t n_runs = 10000,
                          double threshold = 0.1);

// Correlation of each slot's total sample (or one raw component) against a
// per-run value pair; shared by probes and tests.
struct ProbeRunData {
    std::vector<std::vector<double>> slot_totals;      // [slot][run]
    std::vector<uint32_t> first_values, second_values; // per run
    std::vector<std::vector<double>> slot_component;   // [slot][run] for pick_component
};
ProbeRunData run_probe(const ProbeProgram& probe, const ModelConfig& model, uint64_t seed,
                       size_t n_runs, int pick_component = -1);

} // namespace leakfix
