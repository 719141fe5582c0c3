#include "leakfix/machine.hpp"

#include <algorithm>

namespace leakfix {

namespace {

thread_local size_t t_slot = 0;
thread_local int t_line = 0;

[[noreturn]] void fail(const std::string& msg) { throw EmuError(t_slot, t_line, msg); }

} // namespace

uint8_t MachineState::read_byte(uint32_t addr) const {
    if (!mem.contains(addr, 1)) fail("read outside declared data/stack");
    size_t i = addr - mem.base;
    if (!mem.touched[i]) fail("read of uninitialized memory");
    return mem.bytes[i];
}

uint16_t MachineState::read_half(uint32_t addr) const {
    if (addr % 2) fail("unaligned halfword access");
    return static_cast<uint16_t>(read_byte(addr)) |
           (static_cast<uint16_t>(read_byte(addr + 1)) << 8);
}

uint32_t MachineState::read_word(uint32_t addr) const {
    if (addr % 4) fail("unaligned word access");
    uint32_t v = 0;
    for (int i = 0; i < 4; i++) v |= static_cast<uint32_t>(read_byte(addr + i)) << (8 * i);
    return v;
}

void MachineState::write_byte(uint32_t addr, uint8_t value) {
    if (!mem.contains(addr, 1)) fail("write outside declared data/stack");
    size_t i = addr - mem.base;
    mem.bytes[i] = value;
    mem.touched[i] = 1;
}

void MachineState::write_half(uint32_t addr, uint16_t value) {
    if (addr % 2) fail("unaligned halfword access");
    write_byte(addr, static_cast<uint8_t>(value));
    write_byte(addr + 1, static_cast<uint8_t>(value >> 8));
}

void MachineState::write_word(uint32_t addr, uint32_t value) {
    if (addr % 4) fail("unaligned word access");
    for (int i = 0; i < 4; i++) write_byte(addr + i, static_cast<uint8_t>(value >> (8 * i)));
}

// Microarchitectural view: the full word crossing the bus. Bytes never
// architecturally written read as zero here instead of erroring.
uint32_t MachineState::aligned_word_at(uint32_t addr) const {
    uint32_t base = addr & ~3u;
    uint32_t v = 0;
    for (int i = 0; i < 4; i++) {
        uint32_t a = base + i;
        uint8_t byte = 0;
        if (mem.contains(a, 1) && mem.touched[a - mem.base]) byte = mem.bytes[a - mem.base];
        v |= static_cast<uint32_t>(byte) << (8 * i);
    }
    return v;
}

MachineState make_initial_state(const Program& p) {
    MachineState s;
    uint32_t lo = p.stack_base - p.stack_size;
    uint32_t hi = p.stack_base;
    for (const auto& d : p.data) {
        lo = std::min(lo, d.base);
        hi = std::max(hi, d.base + static_cast<uint32_t>(d.bytes.size()));
    }
    s.mem.base = lo;
    s.mem.bytes.assign(hi - lo, 0);
    s.mem.touched.assign(hi - lo, 0);
    for (const auto& d : p.data) {
        std::copy(d.bytes.begin(), d.bytes.end(), s.mem.bytes.begin() + (d.base - lo));
        std::fill_n(s.mem.touched.begin() + (d.base - lo), d.bytes.size(), 1);
    }
    // the stack reads back as zero until written
    std::fill_n(s.mem.touched.begin() + (p.stack_base - p.stack_size - lo), p.stack_size, 1);
    s.regs[MachineState::kSp] = p.stack_base;
    return s;
}

namespace {

void set_nz(MachineState& s, uint32_t r) {
    s.n = (r >> 31) != 0;
    s.z = r == 0;
}

uint32_t do_adds(MachineState& s, uint32_t a, uint32_t b) {
    uint64_t wide = static_cast<uint64_t>(a) + b;
    uint32_t r = static_cast<uint32_t>(wide);
    s.c = wide > 0xFFFFFFFFULL;
    s.v = ((~(a ^ b)) & (a ^ r)) >> 31;
    set_nz(s, r);
    return r;
}

uint32_t do_subs(MachineState& s, uint32_t a, uint32_t b) {
    uint32_t r = a - b;
    s.c = a >= b; // no borrow
    s.v = ((a ^ b) & (a ^ r)) >> 31;
    set_nz(s, r);
    return r;
}

uint32_t do_shift(MachineState& s, Mnemonic op, uint32_t value, uint32_t amount_reg) {
    uint32_t a = amount_reg & 0xFF;
    uint32_t r = value;
    if (op == Mnemonic::Lsls || op == Mnemonic::LslsImm) {
        if (a == 0) {
        } else if (a < 32) {
            s.c = (value >> (32 - a)) & 1;
            r = value << a;
        } else {
            s.c = (a == 32) ? (value & 1) : false;
            r = 0;
        }
    } else if (op == Mnemonic::Lsrs || op == Mnemonic::LsrsImm) {
        if (a == 0) {
        } else if (a < 32) {
            s.c = (value >> (a - 1)) & 1;
            r = value >> a;
        } else {
            s.c = (a == 32) ? (value >> 31) & 1 : false;
            r = 0;
        }
    } else { // rors
        if (a != 0) {
            uint32_t e = a & 31;
            if (e != 0) r = (value >> e) | (value << (32 - e));
            s.c = (r >> 31) & 1;
        }
    }
    set_nz(s, r);
    return r;
}

} // namespace

ExecRecord step(MachineState& s, const Instruction& ins, size_t slot, size_t static_index) {
    t_slot = slot;
    t_line = ins.source_line;

    ExecRecord rec;
    rec.slot = slot;
    rec.static_index = static_index;
    rec.instr = &ins;

    auto reg_of = [&](size_t i) { return std::get<Reg>(ins.operands[i]).index; };
    auto imm_of = [&](size_t i) { return std::get<Imm>(ins.operands[i]).value; };

    auto write_dest = [&](uint8_t rd, uint32_t value) {
        rec.has_dest = true;
        rec.dest_reg = rd;
        rec.dest_old = s.regs[rd];
        rec.has_result = true;
        rec.result = value;
        s.regs[rd] = value;
    };

    uint32_t next_pc = s.pc + 1;

    switch (ins.op) {
    case Mnemonic::Eors:
    case Mnemonic::Adds:
    case Mnemonic::Ands:
    case Mnemonic::Bics:
    case Mnemonic::Movs:
    case Mnemonic::Orrs:
    case Mnemonic::Subs:
    case Mnemonic::Muls:
    case Mnemonic::Lsls:
    case Mnemonic::Lsrs:
    case Mnemonic::Rors: {
        uint8_t rd = reg_of(0), rm = reg_of(1);
        uint32_t a = s.regs[rd], b = s.regs[rm];
        rec.op1 = a;
        rec.op2 = b;
        uint32_t r = 0;
        switch (ins.op) {
        case Mnemonic::Eors: r = a ^ b; set_nz(s, r); break;
        case Mnemonic::Ands: r = a & b; set_nz(s, r); break;
        case Mnemonic::Bics: r = a & ~b; set_nz(s, r); break;
        case Mnemonic::Orrs: r = a | b; set_nz(s, r); break;
        case Mnemonic::Movs: r = b; set_nz(s, r); break;
        case Mnemonic::Muls: r = a * b; set_nz(s, r); break;
        case Mnemonic::Adds: r = do_adds(s, a, b); break;
        case Mnemonic::Subs: r = do_subs(s, a, b); break;
        default: r = do_shift(s, ins.op, a, b); break;
        }
        write_dest(rd, r);
        break;
    }
    case Mnemonic::Cmps: {
        uint8_t rn = reg_of(0), rm = reg_of(1);
        rec.op1 = s.regs[rn];
        rec.op2 = s.regs[rm];
        do_subs(s, rec.op1, rec.op2);
        break;
    }
    case Mnemonic::CmpImm: {
        uint8_t rn = reg_of(0);
        rec.op1 = s.regs[rn];
        rec.op2 = imm_of(1);
        do_subs(s, rec.op1, rec.op2);
        break;
    }
    case Mnemonic::MovsImm:
    case Mnemonic::AddsImm:
    case Mnemonic::SubsImm:
    case Mnemonic::LslsImm:
    case Mnemonic::LsrsImm: {
        uint8_t rd = reg_of(0);
        uint32_t a = s.regs[rd], b = imm_of(1);
        rec.op1 = a;
        rec.op2 = b;
        uint32_t r = 0;
        switch (ins.op) {
        case Mnemonic::MovsImm: r = b; set_nz(s, r); break;
        case Mnemonic::AddsImm: r = do_adds(s, a, b); break;
        case Mnemonic::SubsImm: r = do_subs(s, a, b); break;
        default: r = do_shift(s, ins.op, a, b); break;
        }
        write_dest(rd, r);
        break;
    }
    case Mnemonic::Ldr:
    case Mnemonic::Ldrb:
    case Mnemonic::Ldrh: {
        uint8_t rt = reg_of(0);
        const MemOp& mo = std::get<MemOp>(ins.operands[1]);
        uint32_t addr = s.regs[mo.base] + mo.offset;
        rec.op1 = s.regs[mo.base];
        rec.op2 = addr;
        uint32_t v;
        uint8_t width;
        if (ins.op == Mnemonic::Ldr) {
            v = s.read_word(addr);
            width = 4;
        } else if (ins.op == Mnemonic::Ldrh) {
            v = s.read_half(addr);
            width = 2;
        } else {
            v = s.read_byte(addr);
            width = 1;
        }
        uint32_t word = s.aligned_word_at(addr);
        rec.mem = MemEffect{addr, word, word, false, width};
        write_dest(rt, v);
        break;
    }
    case Mnemonic::Str:
    case Mnemonic::Strb:
    case Mnemonic::Strh: {
        uint8_t rt = reg_of(0);
        const MemOp& mo = std::get<MemOp>(ins.operands[1]);
        uint32_t addr = s.regs[mo.base] + mo.offset;
        rec.op1 = addr;
        rec.op2 = s.regs[rt];
        uint32_t old_word = s.aligned_word_at(addr);
        if (ins.op == Mnemonic::Str)
            s.write_word(addr, rec.op2);
        else if (ins.op == Mnemonic::Strh)
            s.write_half(addr, static_cast<uint16_t>(rec.op2));
        else
            s.write_byte(addr, static_cast<uint8_t>(rec.op2));
        uint32_t new_word = s.aligned_word_at(addr);
        rec.mem = MemEffect{addr, old_word, new_word,
                            true, static_cast<uint8_t>(ins.op == Mnemonic::Str    ? 4
                                                       : ins.op == Mnemonic::Strh ? 2
                                                                                  : 1)};
        break;
    }
    case Mnemonic::Push: {
        uint8_t rt = reg_of(0);
        uint32_t sp = s.regs[MachineState::kSp] - 4;
        uint32_t old_word = s.aligned_word_at(sp);
        s.write_word(sp, s.regs[rt]);
        s.regs[MachineState::kSp] = sp;
        rec.op1 = sp;
        rec.op2 = s.regs[rt];
        rec.mem = MemEffect{sp, old_word, s.regs[rt], true, 4};
        break;
    }
    case Mnemonic::Pop: {
        uint8_t rt = reg_of(0);
        uint32_t sp = s.regs[MachineState::kSp];
        uint32_t v = s.read_word(sp);
        s.regs[MachineState::kSp] = sp + 4;
        rec.op1 = sp;
        rec.op2 = sp;
        rec.mem = MemEffect{sp, v, v, false, 4};
        write_dest(rt, v);
        break;
    }
    case Mnemonic::B:
    case Mnemonic::Beq:
    case Mnemonic::Bne:
        // target resolved by run(); flagged here via the label operand
        break;
    case Mnemonic::Nop:
        break;
    }

    s.pc = next_pc;
    s.cycle_count++;
    return rec;
}

void run_into(const Program& p, MachineState& state, std::vector<ExecRecord>& records,
              size_t max_steps) {
    state.pc = 0;
    size_t steps = 0;
    while (state.pc < p.text.size()) {
        if (steps >= max_steps)
            throw EmuError(steps, 0, "max_steps exceeded (possible runaway loop)");
        const Instruction& ins = p.text[state.pc];
        size_t static_index = state.pc;
        ExecRecord rec = step(state, ins, records.size(), static_index);
        if (is_branch(ins.op)) {
            bool take = ins.op == Mnemonic::B || (ins.op == Mnemonic::Beq && state.z) ||
                        (ins.op == Mnemonic::Bne && !state.z);
            if (take) {
                const auto& label = std::get<LabelRef>(ins.operands[0]);
                auto it = p.labels.find(label.name);
                if (it == p.labels.end())
                    throw EmuError(records.size(), ins.source_line, "unresolved branch target");
                state.pc = static_cast<uint32_t>(it->second);
            }
        }
        records.push_back(rec);
        // stack must remain within its region
        uint32_t sp = state.regs[MachineState::kSp];
        if (sp < p.stack_base - p.stack_size || sp > p.stack_base)
            throw EmuError(records.size() - 1, ins.source_line, "sp left the stack region");
        steps++;
    }
}

RunResult run(const Program& p, MachineState init, size_t max_steps) {
    RunResult r;
    r.final_state = std::move(init);
    run_into(p, r.final_state, r.records, max_steps);
    return r;
}

} // namespace leakfix
