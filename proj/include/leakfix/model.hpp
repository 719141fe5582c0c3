#pragma once

#include "leakfix/machine.hpp"
#include "leakfix/rng.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <optional>
#include <string>

namespace leakfix {

inline int hw(uint32_t x) { return std::popcount(x); }
inline int hd(uint32_t x, uint32_t y) { return std::popcount(x ^ y); }

enum class Group { Alu = 0, Shift, Mul, Load, Store, Neutral };
constexpr int kNumGroups = 6;       // Neutral has no model coefficients
constexpr int kNumModelGroups = 5;  // groups with indicator slots

Group group_of(Mnemonic m);
const char* group_name(Group g);

// The 25 model components. Twelve value/transition scalars, two blocks of
// five instruction-group indicators, and three reserved slots that are
// identically zero (unmodeled effects kept explicit).
enum Component : int {
    kWOp1 = 0,   // HW(op1)
    kWOp2,       // HW(op2)
    kWResult,    // HW(result)
    kTOp1,       // HD(op1, previous op1)
    kTOp2,       // HD(op2, previous op2)
    kXOps,       // HW(op1 ^ op2)
    kAOps,       // HW(op1 & op2)
    kTDest,      // HD(result, overwritten destination value)
    kTBus,       // HD(new bus word, previous bus word)
    kTMemcell,   // HD(stored word, overwritten memory word)
    kTLatch,     // HD(store-latch register value, op2); data-processing only
    kBAdj,       // sum of adjacent-byte HDs of the accessed memory word
    kGPrevBase,  // 5 indicators: previous instruction's group
    kGNextBase = kGPrevBase + kNumModelGroups, // 5 indicators: next group
    kReservedBase = kGNextBase + kNumModelGroups, // 3 slots, always zero
    kNumComponents = kReservedBase + 3,
};
static_assert(kNumComponents == 25);

const char* component_name(int c);
int component_index(const std::string& name); // -1 if unknown

using ComponentVector = std::array<double, kNumComponents>;

struct ModelConfig {
    // coefficient vector per group (Neutral row stays zero)
    std::array<ComponentVector, kNumGroups> coeff{};
    double noise_sigma = 0.0;

    // Transition components weighted 1.0 in the groups where the effect is
    // observable; everything else zero. Detection is scale-invariant at zero
    // noise, so unit weights suffice until fitted coefficients are supplied.
    static ModelConfig default_config();
    static ModelConfig unit_config(); // 1.0 everywhere (for hand checks)
    static ModelConfig zero_config();

    static ModelConfig load(const std::string& path);
    static ModelConfig parse_text(const std::string& text);
    std::string to_text() const;
};

// Microarchitectural shadow state threaded through a trace.
struct LeakState {
    uint32_t prev_op1 = 0, prev_op2 = 0;
    uint32_t bus_word = 0;                  // most recent aligned memory word
    std::optional<uint8_t> latch_ref;       // most recently stored register
    std::optional<uint8_t> latch_pending;   // becomes latch_ref one step later
    Group prev_group = Group::Neutral;
    bool has_prev = false;
    // Register file as the latch machinery sees it: writes become visible one
    // instruction late, so entries lag the architectural file by one
    // completed write.
    std::array<uint32_t, 16> delayed_regs{};
    std::optional<std::pair<uint8_t, uint32_t>> staged_write;

    static LeakState initial(const MachineState& init);
};

struct PowerSample {
    size_t slot = 0;
    double total = 0.0;
    ComponentVector raw{};      // pre-weighting component values
    ComponentVector weighted{}; // raw * group coefficient
};

// Computes the sample for one executed instruction and advances the shadow
// state. next_instr is the one-instruction lookahead within the same basic
// block (null at a block boundary). noise_rng may be null when sigma is 0.
PowerSample leak_step(const ExecRecord& exec, LeakState& lstate, const Instruction* next_instr,
                      const ModelConfig& config, Rng* noise_rng);

std::vector<PowerSample> emulate_power(const Program& p, const MachineState& init,
                                       const ModelConfig& config, uint64_t seed);

// Static indices that start a basic block (branch targets, fall-ins after
// branches); lookahead stops at these.
std::vector<uint8_t> block_leaders(const Program& p);

// One emulated trace with records and samples side by side; buffers reused.
void emulate_trace(const Program& p, MachineState& state, const std::vector<uint8_t>& leaders,
                   const ModelConfig& config, Rng* noise_rng, std::vector<ExecRecord>& records,
                   std::vector<PowerSample>& samples, size_t max_steps = kDefaultMaxSteps);

} // namespace leakfix
