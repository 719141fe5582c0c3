#include "leakfix/frontend.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <sstream>

namespace leakfix {

namespace {

struct MnemonicInfo {
    const char* name;
    Mnemonic m;
};

// Text keyword per register-form mnemonic. Immediate forms share the keyword
// and are selected by operand shape; `cmp` is the immediate-only compare.
const MnemonicInfo kRegisterForms[] = {
    {"eors", Mnemonic::Eors}, {"adds", Mnemonic::Adds}, {"ands", Mnemonic::Ands},
    {"bics", Mnemonic::Bics}, {"cmps", Mnemonic::Cmps}, {"movs", Mnemonic::Movs},
    {"orrs", Mnemonic::Orrs}, {"subs", Mnemonic::Subs}, {"lsls", Mnemonic::Lsls},
    {"lsrs", Mnemonic::Lsrs}, {"rors", Mnemonic::Rors}, {"muls", Mnemonic::Muls},
    {"ldr", Mnemonic::Ldr},   {"ldrb", Mnemonic::Ldrb}, {"ldrh", Mnemonic::Ldrh},
    {"str", Mnemonic::Str},   {"strb", Mnemonic::Strb}, {"strh", Mnemonic::Strh},
    {"push", Mnemonic::Push}, {"pop", Mnemonic::Pop},   {"b", Mnemonic::B},
    {"beq", Mnemonic::Beq},   {"bne", Mnemonic::Bne},   {"cmp", Mnemonic::CmpImm},
    {"nop", Mnemonic::Nop},
};

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

bool parse_u32(const std::string& tok, uint32_t& out) {
    std::string t = tok;
    int base = 10;
    if (t.size() > 2 && t[0] == '0' && (t[1] == 'x' || t[1] == 'X')) {
        base = 16;
        t = t.substr(2);
    }
    uint64_t v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v, base);
    if (ec != std::errc() || p != t.data() + t.size() || v > 0xFFFFFFFFULL) return false;
    out = static_cast<uint32_t>(v);
    return true;
}

bool parse_reg(const std::string& tok, uint8_t& out) {
    std::string t = lower(tok);
    if (t.size() < 2 || t[0] != 'r') return false;
    uint32_t idx;
    if (!parse_u32(t.substr(1), idx) || idx > 15) return false;
    out = static_cast<uint8_t>(idx);
    return true;
}

std::vector<std::string> split_operands(const std::string& s) {
    std::vector<std::string> out;
    int depth = 0;
    std::string cur;
    for (char ch : s) {
        if (ch == '[' || ch == '{') depth++;
        if (ch == ']' || ch == '}') depth--;
        if (ch == ',' && depth == 0) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    if (!trim(cur).empty()) out.push_back(trim(cur));
    return out;
}

struct Shape {
    int nreg_ops;      // register operands for the register form
    bool imm_form;     // an immediate second operand selects another mnemonic
    Mnemonic imm_mnemonic;
};

bool alu_two_reg(Mnemonic m) {
    switch (m) {
    case Mnemonic::Eors:
    case Mnemonic::Adds:
    case Mnemonic::Ands:
    case Mnemonic::Bics:
    case Mnemonic::Cmps:
    case Mnemonic::Movs:
    case Mnemonic::Orrs:
    case Mnemonic::Subs:
    case Mnemonic::Lsls:
    case Mnemonic::Lsrs:
    case Mnemonic::Rors:
    case Mnemonic::Muls:
        return true;
    default:
        return false;
    }
}

uint32_t max_offset(Mnemonic m) {
    switch (m) {
    case Mnemonic::Ldr:
    case Mnemonic::Str:
        return 124; // 5-bit word-scaled
    case Mnemonic::Ldrh:
    case Mnemonic::Strh:
        return 62;
    default:
        return 31;
    }
}

uint32_t offset_align(Mnemonic m) {
    switch (m) {
    case Mnemonic::Ldr:
    case Mnemonic::Str:
        return 4;
    case Mnemonic::Ldrh:
    case Mnemonic::Strh:
        return 2;
    default:
        return 1;
    }
}

void check_register_use(const Instruction& ins, int line) {
    for (uint8_t r : touched_registers(ins)) {
        if (r == 13 || r == 15)
            throw ParseError(line, std::string("register r") + std::to_string(r) +
                                       " is not addressable in this dialect");
        if (r == Program::reserved_mask_register && !ins.is_inserted())
            throw ParseError(line, "mask-register-reserved: r7 may only appear in "
                                   "rule-inserted code");
    }
}

} // namespace

const DataRegion* Program::find_region(const std::string& name) const {
    for (const auto& d : data)
        if (d.name == name) return &d;
    return nullptr;
}

const char* mnemonic_name(Mnemonic m) {
    switch (m) {
    case Mnemonic::Eors: return "eors";
    case Mnemonic::Adds: return "adds";
    case Mnemonic::Ands: return "ands";
    case Mnemonic::Bics: return "bics";
    case Mnemonic::Cmps: return "cmps";
    case Mnemonic::Movs: return "movs";
    case Mnemonic::Orrs: return "orrs";
    case Mnemonic::Subs: return "subs";
    case Mnemonic::Lsls: return "lsls";
    case Mnemonic::Lsrs: return "lsrs";
    case Mnemonic::Rors: return "rors";
    case Mnemonic::Muls: return "muls";
    case Mnemonic::Ldr: return "ldr";
    case Mnemonic::Ldrb: return "ldrb";
    case Mnemonic::Ldrh: return "ldrh";
    case Mnemonic::Str: return "str";
    case Mnemonic::Strb: return "strb";
    case Mnemonic::Strh: return "strh";
    case Mnemonic::Push: return "push";
    case Mnemonic::Pop: return "pop";
    case Mnemonic::B: return "b";
    case Mnemonic::Beq: return "beq";
    case Mnemonic::Bne: return "bne";
    case Mnemonic::CmpImm: return "cmp";
    case Mnemonic::MovsImm: return "movs";
    case Mnemonic::AddsImm: return "adds";
    case Mnemonic::SubsImm: return "subs";
    case Mnemonic::LslsImm: return "lsls";
    case Mnemonic::LsrsImm: return "lsrs";
    case Mnemonic::Nop: return "nop";
    }
    return "?";
}

bool is_load(Mnemonic m) {
    return m == Mnemonic::Ldr || m == Mnemonic::Ldrb || m == Mnemonic::Ldrh || m == Mnemonic::Pop;
}
bool is_store(Mnemonic m) {
    return m == Mnemonic::Str || m == Mnemonic::Strb || m == Mnemonic::Strh || m == Mnemonic::Push;
}
bool is_memory(Mnemonic m) { return is_load(m) || is_store(m); }
bool is_branch(Mnemonic m) { return m == Mnemonic::B || m == Mnemonic::Beq || m == Mnemonic::Bne; }
bool is_shift(Mnemonic m) {
    return m == Mnemonic::Lsls || m == Mnemonic::Lsrs || m == Mnemonic::Rors ||
           m == Mnemonic::LslsImm || m == Mnemonic::LsrsImm;
}
bool writes_flags(Mnemonic m) {
    if (is_memory(m) || is_branch(m) || m == Mnemonic::Nop) return false;
    return true; // every data-processing form, including compares
}
bool reads_flags(Mnemonic m) { return m == Mnemonic::Beq || m == Mnemonic::Bne; }

std::optional<uint8_t> dest_register(const Instruction& ins) {
    switch (ins.op) {
    case Mnemonic::Cmps:
    case Mnemonic::CmpImm:
    case Mnemonic::Nop:
    case Mnemonic::B:
    case Mnemonic::Beq:
    case Mnemonic::Bne:
    case Mnemonic::Str:
    case Mnemonic::Strb:
    case Mnemonic::Strh:
    case Mnemonic::Push:
        return std::nullopt;
    default:
        return std::get<Reg>(ins.operands.at(0)).index;
    }
}

std::vector<uint8_t> touched_registers(const Instruction& ins) {
    std::vector<uint8_t> out;
    for (const auto& op : ins.operands) {
        if (const Reg* r = std::get_if<Reg>(&op)) out.push_back(r->index);
        if (const MemOp* m = std::get_if<MemOp>(&op)) out.push_back(m->base);
    }
    return out;
}

Instruction make_ins(Mnemonic m, std::vector<Operand> ops, std::string inserted_by) {
    Instruction ins;
    ins.op = m;
    ins.operands = std::move(ops);
    ins.inserted_by = std::move(inserted_by);
    return ins;
}

Program parse(const std::string& source) {
    Program p;
    std::istringstream in(source);
    std::string raw;
    int line_no = 0;
    DataRegion* open_region = nullptr;
    std::vector<std::pair<std::string, int>> branch_refs; // label, line

    while (std::getline(in, raw)) {
        line_no++;
        std::string inserted_by;
        std::string line = raw;
        size_t semi = line.find(';');
        if (semi != std::string::npos) {
            std::string comment = trim(line.substr(semi + 1));
            if (comment.rfind("@fix:", 0) == 0) inserted_by = trim(comment.substr(5));
            line = line.substr(0, semi);
        }
        line = trim(line);
        if (line.empty()) continue;

        // directives
        if (line[0] == '.') {
            std::istringstream ls(line);
            std::string word;
            ls >> word;
            word = lower(word);
            if (word == ".data") {
                std::string name, base_tok;
                ls >> name >> base_tok;
                uint32_t base;
                if (name.empty() || !parse_u32(base_tok, base))
                    throw ParseError(line_no, "expected `.data <name> <base>`");
                if (base % 4 != 0)
                    throw ParseError(line_no, "data region base must be word-aligned");
                if (p.find_region(name))
                    throw ParseError(line_no, "duplicate data region `" + name + "`");
                p.data.push_back(DataRegion{name, base, {}});
                open_region = &p.data.back();
            } else if (word == ".byte" || word == ".word") {
                if (!open_region)
                    throw ParseError(line_no, word + " outside a .data block");
                std::string tok;
                while (ls >> tok) {
                    uint32_t v;
                    if (!parse_u32(tok, v)) throw ParseError(line_no, "bad value `" + tok + "`");
                    if (word == ".byte") {
                        if (v > 0xFF) throw ParseError(line_no, "byte value out of range");
                        open_region->bytes.push_back(static_cast<uint8_t>(v));
                    } else {
                        for (int i = 0; i < 4; i++)
                            open_region->bytes.push_back(static_cast<uint8_t>(v >> (8 * i)));
                    }
                }
            } else if (word == ".stack") {
                std::string base_tok, size_tok;
                ls >> base_tok >> size_tok;
                uint32_t base, size;
                if (!parse_u32(base_tok, base) || !parse_u32(size_tok, size) || base % 4 != 0)
                    throw ParseError(line_no, "expected `.stack <aligned base> <size>`");
                p.stack_base = base;
                p.stack_size = size;
            } else {
                throw ParseError(line_no, "unknown directive `" + word + "`");
            }
            continue;
        }

        // labels
        if (line.back() == ':') {
            open_region = nullptr;
            std::string name = trim(line.substr(0, line.size() - 1));
            if (name.empty() || !std::isalpha(static_cast<unsigned char>(name[0])))
                throw ParseError(line_no, "bad label name");
            if (p.labels.count(name)) throw ParseError(line_no, "duplicate label `" + name + "`");
            p.labels[name] = p.text.size();
            continue;
        }

        open_region = nullptr;

        // instruction
        std::string mnem, rest;
        size_t sp = line.find_first_of(" \t");
        if (sp == std::string::npos) {
            mnem = lower(line);
        } else {
            mnem = lower(line.substr(0, sp));
            rest = trim(line.substr(sp));
        }
        Mnemonic m{};
        bool found = false;
        for (const auto& info : kRegisterForms)
            if (mnem == info.name) {
                m = info.m;
                found = true;
                break;
            }
        if (!found) throw ParseError(line_no, "unknown mnemonic `" + mnem + "`");

        auto ops = split_operands(rest);
        auto bad = [&](const std::string& why) { return ParseError(line_no, why); };

        auto parse_imm_tok = [&](const std::string& tok, uint32_t& v) {
            if (tok.empty() || tok[0] != '#') return false;
            return parse_u32(trim(tok.substr(1)), v);
        };

        std::vector<Instruction> parsed;
        if (m == Mnemonic::Nop) {
            if (!ops.empty()) throw bad("nop takes no operands");
            parsed.push_back(make_ins(m, {}, inserted_by));
        } else if (is_branch(m)) {
            if (ops.size() != 1) throw bad("branch needs one label");
            parsed.push_back(make_ins(m, {LabelRef{ops[0]}}, inserted_by));
            branch_refs.emplace_back(ops[0], line_no);
        } else if (m == Mnemonic::CmpImm) {
            uint8_t rn;
            uint32_t v;
            if (ops.size() != 2 || !parse_reg(ops[0], rn) || !parse_imm_tok(ops[1], v))
                throw bad("expected `cmp rN, #imm`");
            if (v > 255) throw bad("immediate out of 8-bit range");
            parsed.push_back(make_ins(m, {Reg{rn}, Imm{v}}, inserted_by));
        } else if (m == Mnemonic::Push || m == Mnemonic::Pop) {
            if (ops.size() != 1 || ops[0].size() < 3 || ops[0].front() != '{' ||
                ops[0].back() != '}')
                throw bad("expected `push {rA, rB, ...}`");
            auto regs_toks = split_operands(ops[0].substr(1, ops[0].size() - 2));
            std::vector<uint8_t> regs;
            for (auto& t : regs_toks) {
                uint8_t r;
                if (!parse_reg(t, r)) throw bad("bad register in list `" + t + "`");
                regs.push_back(r);
            }
            if (regs.empty()) throw bad("empty register list");
            // Multi-register lists expand to single-register operations with
            // the lowest-numbered register at the lowest address, so a
            // matching push/pop pair round-trips: push expands high-to-low,
            // pop low-to-high.
            if (m == Mnemonic::Push) std::reverse(regs.begin(), regs.end());
            for (uint8_t r : regs) parsed.push_back(make_ins(m, {Reg{r}}, inserted_by));
        } else if (is_memory(m)) {
            uint8_t rt;
            if (ops.size() != 2 || !parse_reg(ops[0], rt)) throw bad("expected `" + mnem + " rT, [rB(, #off)]`");
            std::string memop = ops[1];
            if (memop.size() < 4 || memop.front() != '[' || memop.back() != ']')
                throw bad("expected memory operand [rB] or [rB, #off]");
            auto inner = split_operands(memop.substr(1, memop.size() - 2));
            uint8_t rb;
            uint32_t off = 0;
            if (inner.empty() || !parse_reg(inner[0], rb)) throw bad("bad base register");
            if (inner.size() == 2) {
                if (!parse_imm_tok(inner[1], off)) throw bad("bad offset");
            } else if (inner.size() > 2) {
                throw bad("bad memory operand");
            }
            if (off > max_offset(m)) throw bad("offset exceeds encodable range");
            if (off % offset_align(m) != 0) throw bad("offset not aligned for access width");
            parsed.push_back(make_ins(m, {Reg{rt}, MemOp{rb, off}}, inserted_by));
        } else {
            // data-processing: register or immediate second operand
            uint8_t rd, rm2;
            uint32_t v;
            if (ops.size() != 2 || !parse_reg(ops[0], rd)) throw bad("expected two operands");
            if (parse_reg(ops[1], rm2)) {
                parsed.push_back(make_ins(m, {Reg{rd}, Reg{rm2}}, inserted_by));
            } else if (parse_imm_tok(ops[1], v)) {
                Mnemonic im;
                uint32_t limit;
                switch (m) {
                case Mnemonic::Movs: im = Mnemonic::MovsImm; limit = 255; break;
                case Mnemonic::Adds: im = Mnemonic::AddsImm; limit = 255; break;
                case Mnemonic::Subs: im = Mnemonic::SubsImm; limit = 255; break;
                case Mnemonic::Lsls: im = Mnemonic::LslsImm; limit = 31; break;
                case Mnemonic::Lsrs: im = Mnemonic::LsrsImm; limit = 31; break;
                default:
                    throw bad("`" + mnem + "` has no immediate form");
                }
                if (v > limit) throw bad("immediate out of range for `" + mnem + "`");
                parsed.push_back(make_ins(im, {Reg{rd}, Imm{v}}, inserted_by));
            } else {
                throw bad("bad second operand `" + ops[1] + "`");
            }
        }

        for (auto& ins : parsed) {
            ins.source_line = line_no;
            ins.uid = p.take_uid();
            check_register_use(ins, line_no);
            if (!alu_two_reg(ins.op) && ins.op != Mnemonic::Nop && !is_branch(ins.op) &&
                ins.op != Mnemonic::CmpImm && ins.op != Mnemonic::MovsImm &&
                ins.op != Mnemonic::AddsImm && ins.op != Mnemonic::SubsImm &&
                ins.op != Mnemonic::LslsImm && ins.op != Mnemonic::LsrsImm &&
                !is_memory(ins.op)) {
                throw bad("internal: unhandled mnemonic");
            }
            p.text.push_back(std::move(ins));
        }
    }

    for (auto& [label, ln] : branch_refs)
        if (!p.labels.count(label))
            throw ParseError(ln, "unresolved label `" + label + "`");

    // disjoint, non-empty address layout
    std::vector<std::pair<uint32_t, uint32_t>> spans;
    for (const auto& d : p.data) {
        if (d.bytes.empty()) throw ParseError(0, "data region `" + d.name + "` is empty");
        spans.emplace_back(d.base, d.base + static_cast<uint32_t>(d.bytes.size()));
    }
    spans.emplace_back(p.stack_base - p.stack_size, p.stack_base);
    std::sort(spans.begin(), spans.end());
    for (size_t i = 1; i < spans.size(); i++)
        if (spans[i].first < spans[i - 1].second)
            throw ParseError(0, "data/stack regions overlap");

    return p;
}

std::string instruction_text(const Instruction& ins) {
    std::ostringstream out;
    out << mnemonic_name(ins.op);
    bool first = true;
    for (const auto& op : ins.operands) {
        out << (first ? " " : ", ");
        first = false;
        if (const Reg* r = std::get_if<Reg>(&op)) {
            if (ins.op == Mnemonic::Push || ins.op == Mnemonic::Pop)
                out << "{r" << int(r->index) << "}";
            else
                out << "r" << int(r->index);
        } else if (const Imm* i = std::get_if<Imm>(&op)) {
            out << "#" << i->value;
        } else if (const MemOp* mo = std::get_if<MemOp>(&op)) {
            out << "[r" << int(mo->base);
            if (mo->offset) out << ", #" << mo->offset;
            out << "]";
        } else if (const LabelRef* l = std::get_if<LabelRef>(&op)) {
            out << l->name;
        }
    }
    return out.str();
}

std::string emit(const Program& p) {
    std::ostringstream out;
    for (const auto& d : p.data) {
        out << ".data " << d.name << " 0x" << std::hex << d.base << std::dec << "\n";
        out << ".byte";
        for (uint8_t b : d.bytes) out << " " << unsigned(b);
        out << "\n";
    }
    if (p.stack_base != kDefaultStackBase || p.stack_size != kDefaultStackSize)
        out << ".stack 0x" << std::hex << p.stack_base << std::dec << " " << p.stack_size << "\n";

    std::map<size_t, std::vector<std::string>> labels_at;
    for (const auto& [name, idx] : p.labels) labels_at[idx].push_back(name);

    for (size_t i = 0; i < p.text.size(); i++) {
        if (auto it = labels_at.find(i); it != labels_at.end())
            for (const auto& name : it->second) out << name << ":\n";
        const Instruction& ins = p.text[i];
        out << "    " << instruction_text(ins);
        if (ins.is_inserted()) out << " ; @fix:" << ins.inserted_by;
        out << "\n";
    }
    if (auto it = labels_at.find(p.text.size()); it != labels_at.end())
        for (const auto& name : it->second) out << name << ":\n";
    return out.str();
}

bool structurally_equal(const Program& a, const Program& b) {
    if (a.text.size() != b.text.size() || a.labels != b.labels) return false;
    if (a.stack_base != b.stack_base || a.stack_size != b.stack_size) return false;
    if (a.data.size() != b.data.size()) return false;
    for (size_t i = 0; i < a.data.size(); i++) {
        if (a.data[i].name != b.data[i].name || a.data[i].base != b.data[i].base ||
            a.data[i].bytes != b.data[i].bytes)
            return false;
    }
    for (size_t i = 0; i < a.text.size(); i++) {
        const auto& x = a.text[i];
        const auto& y = b.text[i];
        if (x.op != y.op || x.operands != y.operands || x.inserted_by != y.inserted_by)
            return false;
    }
    return true;
}

} // namespace leakfix
