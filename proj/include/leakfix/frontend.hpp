#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace leakfix {

// The instruction dialect: the 12 data-processing rows and 8 memory rows of the
// modeled universe, plus branches/compare-immediate/nop so kernels can loop.
enum class Mnemonic {
    // data-processing, register forms
    Eors, Adds, Ands, Bics, Cmps, Movs, Orrs, Subs, Lsls, Lsrs, Rors, Muls,
    // memory
    Ldr, Ldrb, Ldrh, Str, Strb, Strh, Push, Pop,
    // control flow
    B, Beq, Bne,
    // immediate forms
    CmpImm, MovsImm, AddsImm, SubsImm, LslsImm, LsrsImm,
    Nop,
};

constexpr int kNumMnemonics = static_cast<int>(Mnemonic::Nop) + 1;

struct Reg {
    uint8_t index = 0;
    bool operator==(const Reg&) const = default;
};
struct Imm {
    uint32_t value = 0;
    bool operator==(const Imm&) const = default;
};
struct MemOp {
    uint8_t base = 0;
    uint32_t offset = 0;
    bool operator==(const MemOp&) const = default;
};
struct LabelRef {
    std::string name;
    bool operator==(const LabelRef&) const = default;
};
using Operand = std::variant<Reg, Imm, MemOp, LabelRef>;

struct Instruction {
    Mnemonic op = Mnemonic::Nop;
    std::vector<Operand> operands;
    int source_line = 0;
    // empty = original user code; otherwise the id of the rule (or generator)
    // that introduced the instruction. Only inserted instructions may touch r7.
    std::string inserted_by;
    uint64_t uid = 0;

    bool is_inserted() const { return !inserted_by.empty(); }
};

struct DataRegion {
    std::string name;
    uint32_t base = 0;
    std::vector<uint8_t> bytes;
};

constexpr uint32_t kDefaultStackBase = 0x8000; // full-descending; sp starts here
constexpr uint32_t kDefaultStackSize = 0x100;

struct Program {
    std::vector<Instruction> text;
    std::map<std::string, size_t> labels; // name -> instruction index
    std::vector<DataRegion> data;
    uint32_t stack_base = kDefaultStackBase;
    uint32_t stack_size = kDefaultStackSize;
    uint64_t next_uid = 1;

    static constexpr int reserved_mask_register = 7;

    uint64_t take_uid() { return next_uid++; }
    const DataRegion* find_region(const std::string& name) const;
};

struct ParseError : std::runtime_error {
    int line;
    ParseError(int line_, const std::string& msg)
        : std::runtime_error("line " + std::to_string(line_) + ": " + msg), line(line_) {}
};

Program parse(const std::string& source);
std::string emit(const Program& p);

// Structural equality: mnemonics, operands, labels, data, provenance.
// uids and source lines are ignored.
bool structurally_equal(const Program& a, const Program& b);

const char* mnemonic_name(Mnemonic m);
std::string instruction_text(const Instruction& ins);

bool is_load(Mnemonic m);   // ldr, ldrb, ldrh, pop
bool is_store(Mnemonic m);  // str, strb, strh, push
bool is_memory(Mnemonic m);
bool is_branch(Mnemonic m);
bool is_shift(Mnemonic m); // lsls, lsrs, rors and their immediate forms
bool writes_flags(Mnemonic m);
bool reads_flags(Mnemonic m); // beq, bne
// destination register, if the instruction writes one
std::optional<uint8_t> dest_register(const Instruction& ins);
// every register the instruction reads or writes (for the r7 reservation check)
std::vector<uint8_t> touched_registers(const Instruction& ins);

// Builder used by probe generators and tests; validates operand shape.
Instruction make_ins(Mnemonic m, std::vector<Operand> ops, std::string inserted_by = "");

} // namespace leakfix
