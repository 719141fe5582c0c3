#pragma once

#include "leakfix/frontend.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

namespace leakfix {

struct EmuError : std::runtime_error {
    size_t slot;
    int source_line;
    EmuError(size_t slot_, int line_, const std::string& msg)
        : std::runtime_error("slot " + std::to_string(slot_) + " (line " +
                             std::to_string(line_) + "): " + msg),
          slot(slot_), source_line(line_) {}
};

// Flat byte arena covering the program's data regions and the stack.
// Reads of bytes never initialized (declared data, stack, or a prior write)
// are errors; they would silently bias the statistics downstream.
struct MemArena {
    uint32_t base = 0;
    std::vector<uint8_t> bytes;
    std::vector<uint8_t> touched; // 1 = readable

    bool contains(uint32_t addr, uint32_t len) const {
        return addr >= base && addr + len <= base + bytes.size() && addr + len >= addr;
    }
};

struct MachineState {
    std::array<uint32_t, 16> regs{};
    bool n = false, z = false, c = false, v = false;
    MemArena mem;
    uint32_t pc = 0;
    uint64_t cycle_count = 0; // executed instructions; proxy for cycles

    static constexpr int kSp = 13;

    uint32_t read_word(uint32_t addr) const;
    uint16_t read_half(uint32_t addr) const;
    uint8_t read_byte(uint32_t addr) const;
    void write_word(uint32_t addr, uint32_t value);
    void write_half(uint32_t addr, uint16_t value);
    void write_byte(uint32_t addr, uint8_t value);
    // the 4-byte aligned word containing addr, regardless of access width
    uint32_t aligned_word_at(uint32_t addr) const;
};

struct MemEffect {
    uint32_t addr = 0;      // effective byte address of the access
    uint32_t old_word = 0;  // aligned word before the access
    uint32_t new_word = 0;  // aligned word after the access
    bool store = false;
    uint8_t width = 4;
};

struct ExecRecord {
    size_t slot = 0;         // dynamic index
    size_t static_index = 0; // index into Program::text
    const Instruction* instr = nullptr;
    // Operand framing: data-processing ops read the destination's prior value
    // as op1 and the second operand as op2. Stores carry (address, stored
    // register value); loads carry (base value, effective address) with the
    // loaded value in result.
    uint32_t op1 = 0, op2 = 0;
    bool has_result = false;
    uint32_t result = 0;
    bool has_dest = false;
    uint8_t dest_reg = 0;
    uint32_t dest_old = 0;
    std::optional<MemEffect> mem;
};

// Builds the initial state for a program: data regions populated, stack
// zero-filled, sp at the top of the stack.
MachineState make_initial_state(const Program& p);

// Executes one instruction; mutates state (pc, regs, flags, memory) and
// returns the record of everything read and written.
ExecRecord step(MachineState& state, const Instruction& ins, size_t slot, size_t static_index);

struct RunResult {
    MachineState final_state;
    std::vector<ExecRecord> records;
};

constexpr size_t kDefaultMaxSteps = 100000;

RunResult run(const Program& p, MachineState init, size_t max_steps = kDefaultMaxSteps);

// In-place variant for hot loops; appends to records.
void run_into(const Program& p, MachineState& state, std::vector<ExecRecord>& records,
              size_t max_steps = kDefaultMaxSteps);

} // namespace leakfix
