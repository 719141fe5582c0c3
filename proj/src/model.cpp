#include "leakfix/model.hpp"

#include <fstream>
#include <sstream>

namespace leakfix {

Group group_of(Mnemonic m) {
    switch (m) {
    case Mnemonic::Eors:
    case Mnemonic::Adds:
    case Mnemonic::Ands:
    case Mnemonic::Bics:
    case Mnemonic::Cmps:
    case Mnemonic::Movs:
    case Mnemonic::Orrs:
    case Mnemonic::Subs:
    case Mnemonic::MovsImm:
    case Mnemonic::AddsImm:
    case Mnemonic::SubsImm:
        return Group::Alu;
    case Mnemonic::Lsls:
    case Mnemonic::Lsrs:
    case Mnemonic::Rors:
    case Mnemonic::LslsImm:
    case Mnemonic::LsrsImm:
        return Group::Shift;
    case Mnemonic::Muls:
        return Group::Mul;
    case Mnemonic::Ldr:
    case Mnemonic::Ldrb:
    case Mnemonic::Ldrh:
    case Mnemonic::Pop:
        return Group::Load;
    case Mnemonic::Str:
    case Mnemonic::Strb:
    case Mnemonic::Strh:
    case Mnemonic::Push:
        return Group::Store;
    default:
        return Group::Neutral; // branches, cmp-immediate, nop
    }
}

const char* group_name(Group g) {
    switch (g) {
    case Group::Alu: return "alu";
    case Group::Shift: return "shift";
    case Group::Mul: return "mul";
    case Group::Load: return "load";
    case Group::Store: return "store";
    case Group::Neutral: return "neutral";
    }
    return "?";
}

const char* component_name(int c) {
    static const char* kNames[kNumComponents] = {
        "w_op1",     "w_op2",      "w_result",   "t_op1",       "t_op2",
        "x_ops",     "a_ops",      "t_dest",     "t_bus",       "t_memcell",
        "t_latch",   "b_adj",      "g_prev_alu", "g_prev_shift","g_prev_mul",
        "g_prev_load","g_prev_store","g_next_alu","g_next_shift","g_next_mul",
        "g_next_load","g_next_store","zero0",     "zero1",       "zero2",
    };
    return (c >= 0 && c < kNumComponents) ? kNames[c] : "?";
}

int component_index(const std::string& name) {
    for (int i = 0; i < kNumComponents; i++)
        if (name == component_name(i)) return i;
    return -1;
}

ModelConfig ModelConfig::zero_config() { return ModelConfig{}; }

ModelConfig ModelConfig::unit_config() {
    ModelConfig c;
    for (int g = 0; g < kNumGroups; g++) {
        if (g == static_cast<int>(Group::Neutral)) continue;
        for (int i = 0; i < kNumComponents; i++) c.coeff[g][i] = 1.0;
        for (int i = kReservedBase; i < kNumComponents; i++) c.coeff[g][i] = 0.0;
    }
    return c;
}

ModelConfig ModelConfig::default_config() {
    ModelConfig c;
    auto set = [&](Group g, std::initializer_list<int> comps) {
        for (int i : comps) c.coeff[static_cast<int>(g)][i] = 1.0;
    };
    set(Group::Alu, {kTOp1, kTOp2, kTDest, kTLatch});
    set(Group::Shift, {kTOp1, kTOp2, kTDest, kTLatch});
    set(Group::Mul, {kTOp1, kTOp2, kTDest, kTLatch});
    set(Group::Load, {kTOp1, kTOp2, kTDest, kTBus, kBAdj});
    set(Group::Store, {kTOp1, kTOp2, kTBus, kTMemcell, kBAdj});
    return c;
}

std::string ModelConfig::to_text() const {
    std::ostringstream out;
    for (int g = 0; g < kNumGroups; g++) {
        if (g == static_cast<int>(Group::Neutral)) continue;
        for (int i = 0; i < kNumComponents; i++) {
            if (coeff[g][i] != 0.0)
                out << group_name(static_cast<Group>(g)) << "." << component_name(i) << " = "
                    << coeff[g][i] << "\n";
        }
    }
    out << "noise.sigma = " << noise_sigma << "\n";
    return out.str();
}

ModelConfig ModelConfig::parse_text(const std::string& text) {
    ModelConfig c;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        size_t semi = line.find('#');
        if (semi != std::string::npos) line = line.substr(0, semi);
        std::istringstream ls(line);
        std::string key, eq;
        double value;
        if (!(ls >> key)) continue;
        if (!(ls >> eq >> value) || eq != "=")
            throw std::runtime_error("model config line " + std::to_string(line_no) +
                                     ": expected `key = value`");
        if (key == "noise.sigma") {
            if (value < 0) throw std::runtime_error("noise.sigma must be non-negative");
            c.noise_sigma = value;
            continue;
        }
        size_t dot = key.find('.');
        if (dot == std::string::npos)
            throw std::runtime_error("model config line " + std::to_string(line_no) +
                                     ": unknown key `" + key + "`");
        std::string g = key.substr(0, dot), comp = key.substr(dot + 1);
        int gi = -1;
        for (int i = 0; i < kNumGroups; i++)
            if (g == group_name(static_cast<Group>(i))) gi = i;
        int ci = component_index(comp);
        if (gi < 0 || gi == static_cast<int>(Group::Neutral) || ci < 0)
            throw std::runtime_error("model config line " + std::to_string(line_no) +
                                     ": unknown key `" + key + "`");
        if (!std::isfinite(value))
            throw std::runtime_error("model config: coefficient must be finite");
        c.coeff[gi][ci] = value;
    }
    return c;
}

ModelConfig ModelConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open model config " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_text(ss.str());
}

LeakState LeakState::initial(const MachineState& init) {
    LeakState l;
    l.delayed_regs = init.regs;
    return l;
}

PowerSample leak_step(const ExecRecord& exec, LeakState& ls, const Instruction* next_instr,
                      const ModelConfig& config, Rng* noise_rng) {
    PowerSample s;
    s.slot = exec.slot;
    Group g = group_of(exec.instr->op);

    auto& raw = s.raw;
    raw[kWOp1] = hw(exec.op1);
    raw[kWOp2] = hw(exec.op2);
    raw[kWResult] = exec.has_result ? hw(exec.result) : 0;
    raw[kTOp1] = hd(exec.op1, ls.prev_op1);
    raw[kTOp2] = hd(exec.op2, ls.prev_op2);
    raw[kXOps] = hw(exec.op1 ^ exec.op2);
    raw[kAOps] = hw(exec.op1 & exec.op2);
    raw[kTDest] = exec.has_dest ? hd(exec.result, exec.dest_old) : 0;

    if (exec.mem) {
        uint32_t new_bus = exec.mem->new_word;
        raw[kTBus] = hd(new_bus, ls.bus_word);
        raw[kBAdj] = hd((new_bus >> 0) & 0xFF, (new_bus >> 8) & 0xFF) +
                     hd((new_bus >> 8) & 0xFF, (new_bus >> 16) & 0xFF) +
                     hd((new_bus >> 16) & 0xFF, (new_bus >> 24) & 0xFF);
        if (exec.mem->store) raw[kTMemcell] = hd(exec.mem->new_word, exec.mem->old_word);
    }

    bool data_processing = g == Group::Alu || g == Group::Shift || g == Group::Mul;
    if (data_processing && ls.latch_ref)
        raw[kTLatch] = hd(ls.delayed_regs[*ls.latch_ref], exec.op2);

    if (ls.has_prev && ls.prev_group != Group::Neutral)
        raw[kGPrevBase + static_cast<int>(ls.prev_group)] = 1;
    if (next_instr) {
        Group ng = group_of(next_instr->op);
        if (ng != Group::Neutral) raw[kGNextBase + static_cast<int>(ng)] = 1;
    }

    const ComponentVector& w = config.coeff[static_cast<int>(g)];
    double total = 0;
    for (int i = 0; i < kNumComponents; i++) {
        s.weighted[i] = raw[i] * w[i];
        total += s.weighted[i];
    }
    if (config.noise_sigma > 0 && noise_rng) {
        std::normal_distribution<double> gauss(0.0, config.noise_sigma);
        total += gauss(*noise_rng);
    }
    s.total = total;

    // -- advance the shadow state --
    ls.prev_op1 = exec.op1;
    ls.prev_op2 = exec.op2;
    ls.prev_group = g;
    ls.has_prev = true;
    // A store stages its register; the stage becomes the active reference one
    // instruction later, so effects re-point from the second instruction on.
    if (ls.latch_pending) {
        ls.latch_ref = ls.latch_pending;
        ls.latch_pending.reset();
    }
    if (is_store(exec.instr->op))
        ls.latch_pending = std::get<Reg>(exec.instr->operands[0]).index;
    // Register writes reach the latch's view of the file one instruction late.
    if (ls.staged_write) ls.delayed_regs[ls.staged_write->first] = ls.staged_write->second;
    if (exec.has_dest)
        ls.staged_write = std::make_pair(exec.dest_reg, exec.result);
    else
        ls.staged_write.reset();
    if (exec.mem) ls.bus_word = exec.mem->new_word;

    return s;
}

std::vector<uint8_t> block_leaders(const Program& p) {
    std::vector<uint8_t> leaders(p.text.size() + 1, 0);
    if (!p.text.empty()) leaders[0] = 1;
    for (size_t i = 0; i < p.text.size(); i++) {
        if (is_branch(p.text[i].op) && i + 1 < p.text.size()) leaders[i + 1] = 1;
    }
    for (const auto& [name, idx] : p.labels)
        if (idx < leaders.size()) leaders[idx] = 1;
    return leaders;
}

void emulate_trace(const Program& p, MachineState& state, const std::vector<uint8_t>& leaders,
                   const ModelConfig& config, Rng* noise_rng, std::vector<ExecRecord>& records,
                   std::vector<PowerSample>& samples, size_t max_steps) {
    records.clear();
    samples.clear();
    LeakState ls = LeakState::initial(state); // snapshot before execution
    run_into(p, state, records, max_steps);
    samples.reserve(records.size());
    for (size_t i = 0; i < records.size(); i++) {
        const Instruction* next = nullptr;
        if (i + 1 < records.size()) {
            const ExecRecord& cur = records[i];
            const ExecRecord& nxt = records[i + 1];
            // lookahead only within a straight-line block
            if (nxt.static_index == cur.static_index + 1 && !is_branch(cur.instr->op) &&
                !leaders[nxt.static_index])
                next = nxt.instr;
        }
        samples.push_back(leak_step(records[i], ls, next, config, noise_rng));
    }
}

std::vector<PowerSample> emulate_power(const Program& p, const MachineState& init,
                                       const ModelConfig& config, uint64_t seed) {
    Rng noise = make_rng(seed, 0x9e1);
    auto leaders = block_leaders(p);
    MachineState state = init;
    LeakState ls = LeakState::initial(init);
    std::vector<ExecRecord> records;
    run_into(p, state, records);
    std::vector<PowerSample> samples;
    samples.reserve(records.size());
    for (size_t i = 0; i < records.size(); i++) {
        const Instruction* next = nullptr;
        if (i + 1 < records.size()) {
            if (records[i + 1].static_index == records[i].static_index + 1 &&
                !is_branch(records[i].instr->op) && !leaders[records[i + 1].static_index])
                next = records[i + 1].instr;
        }
        samples.push_back(leak_step(records[i], ls, next, config, &noise));
    }
    return samples;
}

} // namespace leakfix
