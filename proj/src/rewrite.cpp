#include "leakfix/rewrite.hpp"

#include <algorithm>
#include <map>
#include <sstream>

namespace leakfix {

const char* const kOperandWipe = "operand-wipe";
const char* const kRegisterWipe = "register-wipe";
const char* const kRotationMask = "rotation-mask";
const char* const kLoadShadow = "load-shadow";
const char* const kStoreShadow = "store-shadow";
const char* const kByteSplitStore = "byte-split-store";

namespace {

constexpr uint8_t kMaskReg = Program::reserved_mask_register;
constexpr uint8_t kScratchSelect = 0; // byte-split scratch registers (r0, r6)
constexpr uint8_t kScratchByte = 6;

Instruction tag(Instruction ins, const char* rule, Program& p, int line) {
    ins.inserted_by = rule;
    ins.uid = p.take_uid();
    ins.source_line = line;
    return ins;
}

// Inserts before `index`, shifting labels so loop entries execute the
// inserted code too.
void insert_before(Program& p, size_t index, std::vector<Instruction> seq) {
    for (auto& [name, li] : p.labels)
        if (li >= index) li += seq.size();
    p.text.insert(p.text.begin() + index, std::make_move_iterator(seq.begin()),
                  std::make_move_iterator(seq.end()));
}

} // namespace

bool flags_safe_to_insert(const Program& p, size_t index) {
    // Inserted flag-writers clobber whatever was live at `index`. Walk
    // forward: a flag consumer before any original flag-setter means the
    // clobbered flags were observable.
    for (size_t i = index; i < p.text.size(); i++) {
        const Instruction& ins = p.text[i];
        if (reads_flags(ins.op)) return false;
        if (writes_flags(ins.op)) return true;
        if (ins.op == Mnemonic::B) return true; // leaves the block
    }
    return true;
}

std::string rule_for(Cause cause, const Instruction& ins) {
    switch (cause) {
    case Cause::OperandInteraction:
        return kOperandWipe;
    case Cause::RegisterOverwrite:
        return dest_register(ins) ? kRegisterWipe : "";
    case Cause::RotationAlignment:
        return is_shift(ins.op) ? kRotationMask : "";
    case Cause::Bus:
        if (is_load(ins.op)) return kLoadShadow;
        if (is_store(ins.op)) return kStoreShadow;
        return "";
    case Cause::MemoryOverwrite:
        return is_store(ins.op) ? kStoreShadow : "";
    case Cause::StoreLatch:
        // the latch re-points to the mask register via a push/pop pair; the
        // pop targets r7 so no live register is clobbered
        return kLoadShadow;
    case Cause::ByteAdjacency:
        return ins.op == Mnemonic::Str ? kByteSplitStore : "";
    default:
        return "";
    }
}

namespace {

int apply_operand_wipe(Program& p, size_t index) {
    const Instruction& at = p.text[index];
    if (!flags_safe_to_insert(p, index))
        throw RewriteError("operand-wipe refused: a later branch consumes flags set before "
                           "the flagged instruction");
    insert_before(p, index,
                  {tag(make_ins(Mnemonic::Movs, {Reg{kMaskReg}, Reg{kMaskReg}}), kOperandWipe, p,
                       at.source_line)});
    return 1;
}

int apply_register_wipe(Program& p, size_t index) {
    const Instruction& at = p.text[index];
    auto dest = dest_register(at);
    if (!dest) throw RewriteError("register-wipe needs an instruction with a destination");
    if (!flags_safe_to_insert(p, index))
        throw RewriteError("register-wipe refused: a later branch consumes flags set before "
                           "the flagged instruction");
    insert_before(p, index,
                  {tag(make_ins(Mnemonic::Movs, {Reg{*dest}, Reg{kMaskReg}}), kRegisterWipe, p,
                       at.source_line)});
    return 1;
}

int apply_rotation_mask(Program& p, size_t index) {
    Instruction at = p.text[index];
    if (!is_shift(at.op)) throw RewriteError("rotation-mask applies to shift/rotate only");
    uint8_t rd = std::get<Reg>(at.operands[0]).index;
    Operand amount = at.operands[1]; // register or immediate; both shift r7 alike
    int line = at.source_line;
    Mnemonic shift_op = at.op;
    // mask, shift value and mask together, unmask; Z/N settle on the final
    // unmask exactly as the original shift would
    std::vector<Instruction> seq;
    seq.push_back(tag(make_ins(Mnemonic::Eors, {Reg{rd}, Reg{kMaskReg}}), kRotationMask, p, line));
    seq.push_back(at); // the original shift stays in place, uid intact
    seq.push_back(tag(make_ins(shift_op, {Reg{kMaskReg}, amount}), kRotationMask, p, line));
    seq.push_back(tag(make_ins(Mnemonic::Eors, {Reg{rd}, Reg{kMaskReg}}), kRotationMask, p, line));

    for (auto& [name, li] : p.labels)
        if (li > index) li += 3;
    p.text.erase(p.text.begin() + index);
    p.text.insert(p.text.begin() + index, std::make_move_iterator(seq.begin()),
                  std::make_move_iterator(seq.end()));
    return 3;
}

int apply_load_shadow(Program& p, size_t index) {
    const Instruction& at = p.text[index];
    // pops to the load destination when there is one; otherwise the pair
    // only re-points the bus and store latch onto the mask register
    uint8_t target = kMaskReg;
    if (is_load(at.op)) target = std::get<Reg>(at.operands[0]).index;
    int line = at.source_line;
    insert_before(p, index,
                  {tag(make_ins(Mnemonic::Push, {Reg{kMaskReg}}), kLoadShadow, p, line),
                   tag(make_ins(Mnemonic::Pop, {Reg{target}}), kLoadShadow, p, line)});
    return 2;
}

int apply_store_shadow(Program& p, size_t index) {
    const Instruction& at = p.text[index];
    if (!is_store(at.op)) throw RewriteError("store-shadow applies to stores only");
    int line = at.source_line;
    std::vector<Instruction> seq;
    if (at.op == Mnemonic::Push) {
        // no addressable operand: pre-touch the slot through the stack
        seq.push_back(tag(make_ins(Mnemonic::Push, {Reg{kMaskReg}}), kStoreShadow, p, line));
        seq.push_back(tag(make_ins(Mnemonic::Pop, {Reg{kMaskReg}}), kStoreShadow, p, line));
    } else {
        seq.push_back(
            tag(make_ins(at.op, {Reg{kMaskReg}, at.operands[1]}), kStoreShadow, p, line));
    }
    insert_before(p, index, std::move(seq));
    return static_cast<int>(at.op == Mnemonic::Push ? 2 : 1);
}

int apply_byte_split_store(Program& p, size_t index) {
    Instruction at = p.text[index];
    if (at.op != Mnemonic::Str) throw RewriteError("byte-split-store applies to word stores");
    uint8_t rs = std::get<Reg>(at.operands[0]).index;
    MemOp mo = std::get<MemOp>(at.operands[1]);
    if (rs == kScratchSelect || rs == kScratchByte || mo.base == kScratchSelect ||
        mo.base == kScratchByte)
        throw RewriteError("byte-split-store register collision with scratch r0/r6; remap the "
                           "store to other registers first");
    if (mo.offset + 3 > 31)
        throw RewriteError("byte-split-store offset exceeds byte-addressable range");
    if (!flags_safe_to_insert(p, index))
        throw RewriteError("byte-split-store refused: a later branch consumes flags set "
                           "before the flagged instruction");

    int line = at.source_line;
    auto I = [&](Mnemonic m, std::vector<Operand> ops) {
        return tag(make_ins(m, std::move(ops)), kByteSplitStore, p, line);
    };
    std::vector<Instruction> seq;
    seq.push_back(I(Mnemonic::Push, {Reg{kScratchByte}}));
    seq.push_back(I(Mnemonic::Push, {Reg{kScratchSelect}}));
    for (uint32_t byte = 0; byte < 4; byte++) {
        uint32_t sh = 8 * byte;
        if (byte == 0) {
            seq.push_back(I(Mnemonic::MovsImm, {Reg{kScratchSelect}, Imm{0xFF}}));
            seq.push_back(I(Mnemonic::Movs, {Reg{kScratchByte}, Reg{rs}}));
            seq.push_back(I(Mnemonic::Ands, {Reg{kMaskReg}, Reg{kMaskReg}}));
            seq.push_back(I(Mnemonic::Ands, {Reg{kScratchByte}, Reg{kScratchSelect}}));
            seq.push_back(I(Mnemonic::LslsImm, {Reg{kScratchSelect}, Imm{0}}));
        } else {
            seq.push_back(I(Mnemonic::Movs, {Reg{kScratchByte}, Reg{kMaskReg}}));
            seq.push_back(I(Mnemonic::Movs, {Reg{kScratchByte}, Reg{rs}}));
            seq.push_back(I(Mnemonic::MovsImm, {Reg{kScratchSelect}, Imm{0xFF}}));
            seq.push_back(I(Mnemonic::LslsImm, {Reg{kScratchSelect}, Imm{sh}}));
            seq.push_back(I(Mnemonic::Ands, {Reg{kMaskReg}, Reg{kMaskReg}}));
            seq.push_back(I(Mnemonic::Ands, {Reg{kScratchByte}, Reg{kScratchSelect}}));
            seq.push_back(I(Mnemonic::LsrsImm, {Reg{kScratchSelect}, Imm{sh}}));
            seq.push_back(I(Mnemonic::LsrsImm, {Reg{kScratchByte}, Imm{sh}}));
        }
        // select mask first, data byte second: two stores per byte
        seq.push_back(I(Mnemonic::Strb, {Reg{kScratchSelect}, MemOp{mo.base, mo.offset + byte}}));
        seq.push_back(I(Mnemonic::Strb, {Reg{kScratchByte}, MemOp{mo.base, mo.offset + byte}}));
    }
    seq.push_back(I(Mnemonic::Pop, {Reg{kScratchSelect}}));
    seq.push_back(I(Mnemonic::Pop, {Reg{kScratchByte}}));

    int inserted = static_cast<int>(seq.size()) - 1;
    for (auto& [name, li] : p.labels)
        if (li > index) li += seq.size() - 1;
    p.text.erase(p.text.begin() + index);
    p.text.insert(p.text.begin() + index, std::make_move_iterator(seq.begin()),
                  std::make_move_iterator(seq.end()));
    return inserted;
}

// Precedence among rules when several dynamic slots flag one instruction:
// most specific transformation first.
int rule_rank(const std::string& rule) {
    if (rule == kByteSplitStore) return 0;
    if (rule == kStoreShadow) return 1;
    if (rule == kLoadShadow) return 2;
    if (rule == kRotationMask) return 3;
    if (rule == kRegisterWipe) return 4;
    if (rule == kOperandWipe) return 5;
    return 6;
}

} // namespace

int apply_rule(Program& p, size_t static_index, Cause cause) {
    if (static_index >= p.text.size()) throw RewriteError("rule index out of range");
    std::string rule = rule_for(cause, p.text[static_index]);
    if (rule.empty())
        throw RewriteError(std::string("no rule applies to cause `") + cause_name(cause) +
                           "` at `" + instruction_text(p.text[static_index]) + "`");
    if (rule == kOperandWipe) return apply_operand_wipe(p, static_index);
    if (rule == kRegisterWipe) return apply_register_wipe(p, static_index);
    if (rule == kRotationMask) return apply_rotation_mask(p, static_index);
    if (rule == kLoadShadow) return apply_load_shadow(p, static_index);
    if (rule == kStoreShadow) return apply_store_shadow(p, static_index);
    if (rule == kByteSplitStore) return apply_byte_split_store(p, static_index);
    throw RewriteError("unknown rule " + rule);
}

std::vector<RewriteLogEntry> fix_iteration(Program& p, const TTestReport& report,
                                           RewriteState& state, RewriteLog& log) {
    // gather flagged causes per static instruction
    std::map<size_t, std::vector<Cause>> flagged;
    for (const auto& s : report.slots)
        if (s.flagged()) flagged[s.static_index].push_back(s.cause);

    std::vector<RewriteLogEntry> entries;
    // descending static order keeps pending indices stable across insertions
    for (auto it = flagged.rbegin(); it != flagged.rend(); ++it) {
        size_t index = it->first;
        const Instruction& ins = p.text[index];
        uint64_t uid = ins.uid;

        // pick the most specific applicable rule not yet applied to this uid
        std::string best_rule;
        Cause best_cause = Cause::None;
        for (Cause c : it->second) {
            std::string r = rule_for(c, ins);
            if (r.empty()) {
                log.skipped.push_back("line " + std::to_string(ins.source_line) + ": cause " +
                                      cause_name(c) + " has no applicable rule for `" +
                                      instruction_text(ins) + "`");
                continue;
            }
            if (state.applied[uid].count(r)) continue; // idempotence guard
            if (best_rule.empty() || rule_rank(r) < rule_rank(best_rule)) {
                best_rule = r;
                best_cause = c;
            }
        }
        if (best_rule.empty()) continue;
        try {
            int inserted = apply_rule(p, index, best_cause);
            state.applied[uid].insert(best_rule);
            entries.push_back(RewriteLogEntry{ins.source_line, index, best_rule, inserted});
        } catch (const RewriteError& e) {
            state.applied[uid].insert(best_rule); // do not retry a refused fix
            log.skipped.push_back(std::string("line ") + std::to_string(ins.source_line) + ": " +
                                  e.what());
        }
    }
    log.entries.insert(log.entries.end(), entries.begin(), entries.end());
    return entries;
}

Program strip_inserted(const Program& p) {
    Program out = p;
    out.text.clear();
    std::map<size_t, size_t> index_map;
    for (size_t i = 0; i < p.text.size(); i++) {
        index_map[i] = out.text.size();
        if (!p.text[i].is_inserted()) out.text.push_back(p.text[i]);
    }
    index_map[p.text.size()] = out.text.size();
    for (auto& [name, li] : out.labels) li = index_map[li];
    return out;
}

EquivResult semantic_equiv_check(const Program& original, const Program& rewritten,
                                 size_t n_random_states, uint64_t seed, const BindingFn& binding,
                                 size_t input_len) {
    EquivResult res;
    for (size_t k = 0; k < n_random_states; k++) {
        Rng rng = make_rng(seed, k);
        MachineState init = make_initial_state(original);
        if (binding) {
            std::vector<uint8_t> input = random_input(input_len, rng);
            binding(init, input, rng); // bound once; the state is then cloned
        } else {
            for (uint8_t r = 0; r < 13; r++) init.regs[r] = rand_u32(rng);
            init.regs[14] = rand_u32(rng);
            init.regs[MachineState::kSp] = original.stack_base;
            for (auto& d : original.data) {
                for (size_t i = 0; i < d.bytes.size(); i++)
                    init.mem.bytes[d.base + i - init.mem.base] = rand_u8(rng);
            }
        }
        MachineState init2 = make_initial_state(rewritten);
        // same architectural start modulo arena shape
        init2.regs = init.regs;
        for (size_t i = 0; i < init.mem.bytes.size(); i++) {
            uint32_t addr = init.mem.base + static_cast<uint32_t>(i);
            if (init2.mem.contains(addr, 1)) {
                init2.mem.bytes[addr - init2.mem.base] = init.mem.bytes[i];
                init2.mem.touched[addr - init2.mem.base] = init.mem.touched[i];
            }
        }

        RunResult a, b;
        try {
            a = run(original, init);
            b = run(rewritten, init2);
        } catch (const EmuError& e) {
            res.equivalent = false;
            res.first_difference = std::string("execution fault: ") + e.what();
            return res;
        }

        for (uint8_t r = 0; r < 16; r++) {
            if (r == Program::reserved_mask_register) continue;
            if (a.final_state.regs[r] != b.final_state.regs[r]) {
                res.equivalent = false;
                std::ostringstream os;
                os << "state " << k << ": r" << int(r) << " " << std::hex
                   << a.final_state.regs[r] << " vs " << b.final_state.regs[r];
                res.first_difference = os.str();
                return res;
            }
        }
        // memory outside the stack region must agree
        uint32_t stack_lo = original.stack_base - original.stack_size;
        for (const auto& d : original.data) {
            for (size_t i = 0; i < d.bytes.size(); i++) {
                uint32_t addr = d.base + static_cast<uint32_t>(i);
                if (addr >= stack_lo && addr < original.stack_base) continue;
                uint8_t va = a.final_state.mem.bytes[addr - a.final_state.mem.base];
                uint8_t vb = b.final_state.mem.bytes[addr - b.final_state.mem.base];
                if (va != vb) {
                    res.equivalent = false;
                    std::ostringstream os;
                    os << "state " << k << ": mem[0x" << std::hex << addr << "] " << int(va)
                       << " vs " << int(vb);
                    res.first_difference = os.str();
                    return res;
                }
            }
        }
    }
    return res;
}

std::string RewriteLog::to_text() const {
    std::ostringstream out;
    out << "iterations: " << iterations << "\n";
    out << "fixpoint_reached: " << (fixpoint_reached ? "yes" : "no") << "\n";
    for (const auto& e : entries)
        out << "line " << e.source_line << " index " << e.static_index << ": " << e.rule << " (+"
            << e.inserted_count << " instructions)\n";
    for (const auto& s : skipped) out << "skipped: " << s << "\n";
    return out.str();
}

} // namespace leakfix
