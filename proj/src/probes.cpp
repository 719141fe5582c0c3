#include "leakfix/probes.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <future>
#include <iomanip>
#include <sstream>
#include <thread>

namespace leakfix {

// Table row/column order of the probed universe.
const std::array<Mnemonic, 20> kProbeUniverse = {
    Mnemonic::Eors, Mnemonic::Adds, Mnemonic::Ands, Mnemonic::Bics, Mnemonic::Cmps,
    Mnemonic::Movs, Mnemonic::Orrs, Mnemonic::Subs, Mnemonic::Lsls, Mnemonic::Rors,
    Mnemonic::Lsrs, Mnemonic::Muls, Mnemonic::Str,  Mnemonic::Strb, Mnemonic::Strh,
    Mnemonic::Ldr,  Mnemonic::Ldrb, Mnemonic::Ldrh, Mnemonic::Pop,  Mnemonic::Push,
};

const char* dominance_name(Dominance d) {
    switch (d) {
    case Dominance::None: return "none";
    case Dominance::First: return "first";
    case Dominance::Second: return "second";
    case Dominance::SameStorage: return "same-storage";
    }
    return "?";
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2)
        throw PearsonError("pearson needs equal lengths >= 2");
    double n = static_cast<double>(x.size());
    double sx = 0, sy = 0;
    for (size_t i = 0; i < x.size(); i++) {
        sx += x[i];
        sy += y[i];
    }
    double mx = sx / n, my = sy / n;
    double sxx = 0, syy = 0, sxy = 0;
    for (size_t i = 0; i < x.size(); i++) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0 || syy == 0) throw PearsonError("undefined correlation: zero variance");
    return sxy / std::sqrt(sxx * syy);
}

namespace {

constexpr uint32_t kCellBase = 0x200;
constexpr uint32_t kSpacerValue = 0x55555555; // fixed r7 pattern; spacer
                                              // transitions carry no variance
constexpr const char* kProbeTag = "probe";

uint32_t const_for_reg(uint8_t reg) { return static_cast<uint32_t>(splitmix64(0xF1C5ED00 + reg)); }

uint32_t width_mask(Mnemonic m) {
    switch (m) {
    case Mnemonic::Strb:
    case Mnemonic::Ldrb:
        return 0xFF;
    case Mnemonic::Strh:
    case Mnemonic::Ldrh:
        return 0xFFFF;
    default:
        return 0xFFFFFFFF;
    }
}

struct Placed {
    size_t index = 0;
    ValueSource src = ValueSource::Op2;
};

// Assembles probe programs: fresh registers per role from a fixed pool,
// one memory cell per memory instruction, spacers on the mask register.
struct Builder {
    ProbeProgram out;
    std::vector<uint8_t> pool = {0, 1, 2, 3, 4, 5, 6, 8, 9, 10, 11, 12, 14};
    size_t pool_i = 0;
    uint32_t next_cell = kCellBase;
    int stack_depth = 0;

    uint8_t fresh() {
        if (pool_i >= pool.size()) throw std::runtime_error("probe register pool exhausted");
        return pool[pool_i++];
    }

    uint8_t fresh_const() {
        uint8_t r = fresh();
        out.reg_init.emplace_back(r, const_for_reg(r));
        return r;
    }

    uint8_t fresh_random(uint32_t mask) {
        uint8_t r = fresh();
        out.reg_draws.push_back({r, mask});
        return r;
    }

    uint8_t fresh_addr(uint32_t cell_addr) {
        uint8_t r = fresh();
        out.reg_init.emplace_back(r, cell_addr);
        return r;
    }

    uint32_t cell(bool randomize, uint32_t mask) {
        uint32_t a = next_cell;
        next_cell += 16;
        if (randomize) out.cell_draws.push_back({a, mask});
        return a;
    }

    size_t ins(Mnemonic m, std::vector<Operand> ops) {
        Instruction i = make_ins(m, std::move(ops), kProbeTag);
        i.uid = out.program.take_uid();
        out.program.text.push_back(std::move(i));
        return out.program.text.size() - 1;
    }

    void spacers(int n) {
        for (int k = 0; k < n; k++) ins(Mnemonic::Movs, {Reg{7}, Reg{7}});
    }

    void count_pop() {
        if (stack_depth > 0) stack_depth--;
    }

    Placed place(Mnemonic m, ProbedOperand probed) {
        Placed pl;
        switch (group_of(m)) {
        case Group::Alu:
        case Group::Shift:
        case Group::Mul: {
            uint8_t rd, rm;
            if (probed == ProbedOperand::First) {
                rd = fresh_random(0xFFFFFFFF);
                rm = fresh_const();
                pl.src = ValueSource::Op1;
            } else {
                rd = fresh_const();
                rm = fresh_random(0xFFFFFFFF);
                pl.src = ValueSource::Op2;
            }
            pl.index = ins(m, {Reg{rd}, Reg{rm}});
            return pl;
        }
        case Group::Store: {
            if (m == Mnemonic::Push) {
                uint8_t rv = fresh_random(0xFFFFFFFF);
                stack_depth++;
                pl.index = ins(m, {Reg{rv}});
            } else {
                uint8_t rv = fresh_random(width_mask(m));
                uint8_t ra = fresh_addr(cell(false, 0));
                pl.index = ins(m, {Reg{rv}, MemOp{ra, 0}});
            }
            pl.src = ValueSource::Op2;
            return pl;
        }
        case Group::Load: {
            uint8_t rd = fresh_const();
            if (m == Mnemonic::Pop) {
                count_pop();
                pl.index = ins(m, {Reg{rd}});
            } else {
                uint8_t ra = fresh_addr(cell(true, width_mask(m)));
                pl.index = ins(m, {Reg{rd}, MemOp{ra, 0}});
            }
            pl.src = ValueSource::Result;
            return pl;
        }
        default:
            throw std::runtime_error("mnemonic outside the probe universe");
        }
    }

    // Middle instruction of a dominance probe: operates on the mask register
    // (or a throwaway cell) so it perturbs storage without carrying either
    // probed value.
    void place_middle(Mnemonic m) {
        switch (group_of(m)) {
        case Group::Alu:
        case Group::Shift:
        case Group::Mul:
            ins(m, {Reg{fresh_const()}, Reg{7}});
            return;
        case Group::Store:
            if (m == Mnemonic::Push) {
                stack_depth++;
                ins(m, {Reg{7}});
            } else {
                ins(m, {Reg{7}, MemOp{fresh_addr(cell(false, 0)), 0}});
            }
            return;
        case Group::Load:
            if (m == Mnemonic::Pop) {
                count_pop();
                ins(m, {Reg{fresh_const()}});
            } else {
                ins(m, {Reg{fresh_const()}, MemOp{fresh_addr(cell(true, 0xFFFFFFFF)), 0}});
            }
            return;
        default:
            throw std::runtime_error("mnemonic outside the probe universe");
        }
    }

    // Stack priming plus a decoy store so prologue state carries no probed
    // value into the measured window.
    void prologue(std::initializer_list<Mnemonic> seq) {
        int depth = 0, primes = 0;
        for (Mnemonic m : seq) {
            if (m == Mnemonic::Push) depth++;
            if (m == Mnemonic::Pop) {
                if (depth == 0)
                    primes++;
                else
                    depth--;
            }
        }
        if (primes == 0) return;
        for (int i = 0; i < primes; i++) {
            uint8_t p = fresh_random(0xFFFFFFFF);
            stack_depth++;
            ins(Mnemonic::Push, {Reg{p}});
        }
        uint8_t decoy = fresh_random(0xFFFFFFFF);
        ins(Mnemonic::Str, {Reg{decoy}, MemOp{fresh_addr(cell(false, 0)), 0}});
        spacers(1);
    }

    ProbeProgram finish() {
        if (next_cell > kCellBase) {
            DataRegion region;
            region.name = "cells";
            region.base = kCellBase;
            region.bytes.assign(next_cell - kCellBase, 0);
            out.program.data.push_back(std::move(region));
        }
        return std::move(out);
    }
};

// first, spacers, middle(second), spacers, first-again; the self-survival
// arrangement. first/second slots mark the two instances of `first`.
ProbeProgram build_self_probe(Mnemonic first, Mnemonic second) {
    Builder b;
    b.prologue({first, second, first});
    Placed a1 = b.place(first, ProbedOperand::Second);
    b.spacers(3);
    b.place_middle(second);
    b.spacers(3);
    Placed a2 = b.place(first, ProbedOperand::Second);
    b.out.first_slot = a1.index;
    b.out.second_slot = a2.index;
    b.out.first_src = a1.src;
    b.out.second_src = a2.src;
    return b.finish();
}

uint32_t extract(const ExecRecord& r, ValueSource src) {
    switch (src) {
    case ValueSource::Op1: return r.op1;
    case ValueSource::Op2: return r.op2;
    case ValueSource::Result: return r.result;
    }
    return 0;
}

struct PeakResult {
    double peak = 0;
    int slot = -1;
    bool degenerate = false;
};

PeakResult peak_correlation(const ProbeRunData& data,
                            const std::vector<std::vector<double>>* series = nullptr,
                            int only_slot = -1) {
    PeakResult res;
    size_t n = data.first_values.size();
    std::vector<double> target(n);
    for (size_t i = 0; i < n; i++)
        target[i] = hd(data.first_values[i], data.second_values[i]);
    bool varies = false;
    for (double t : target)
        if (t != target[0]) {
            varies = true;
            break;
        }
    if (!varies) {
        res.degenerate = true;
        return res;
    }
    const auto& rows = series ? *series : data.slot_totals;
    for (size_t s = 0; s < rows.size(); s++) {
        if (only_slot >= 0 && s != static_cast<size_t>(only_slot)) continue;
        double r;
        try {
            r = pearson(rows[s], target);
        } catch (const PearsonError&) {
            continue; // constant sample at this slot
        }
        if (std::abs(r) > std::abs(res.peak)) {
            res.peak = r;
            res.slot = static_cast<int>(s);
        }
    }
    return res;
}

} // namespace

ProbeProgram gen_probe(const ProbeSpec& spec) {
    Builder b;
    b.prologue({spec.first, spec.second});
    Placed a = b.place(spec.first, spec.probed_operand);
    b.spacers(spec.spacer_count);
    Placed c = b.place(spec.second, spec.probed_operand);
    b.out.first_slot = a.index;
    b.out.second_slot = c.index;
    b.out.first_src = a.src;
    b.out.second_src = c.src;
    return b.finish();
}

ProbeRunData run_probe(const ProbeProgram& probe, const ModelConfig& model, uint64_t seed,
                       size_t n_runs, int pick_component) {
    const Program& prog = probe.program;
    ProbeRunData data;
    MachineState init_template = make_initial_state(prog);
    for (uint8_t r = 0; r < 16; r++) init_template.regs[r] = 0;
    init_template.regs[MachineState::kSp] = prog.stack_base;
    init_template.regs[7] = kSpacerValue;
    for (const auto& [reg, val] : probe.reg_init) init_template.regs[reg] = val;

    auto leaders = block_leaders(prog);
    std::vector<ExecRecord> records;
    std::vector<PowerSample> samples;
    int first_dyn = -1, second_dyn = -1;

    for (size_t run = 0; run < n_runs; run++) {
        Rng rng = make_rng(seed, run);
        MachineState state = init_template;
        for (const auto& d : probe.reg_draws) state.regs[d.reg] = rand_u32(rng) & d.mask;
        for (const auto& d : probe.cell_draws) {
            uint32_t w = rand_u32(rng) & d.mask;
            for (int i = 0; i < 4; i++)
                state.mem.bytes[d.addr + i - state.mem.base] = static_cast<uint8_t>(w >> (8 * i));
        }
        emulate_trace(prog, state, leaders, model, &rng, records, samples);

        if (data.slot_totals.empty()) {
            data.slot_totals.resize(records.size());
            if (pick_component >= 0) data.slot_component.resize(records.size());
            for (size_t i = 0; i < records.size(); i++) {
                if (records[i].static_index == probe.first_slot) first_dyn = static_cast<int>(i);
                if (records[i].static_index == probe.second_slot) second_dyn = static_cast<int>(i);
            }
            if (first_dyn < 0 || second_dyn < 0) throw std::runtime_error("probe slots not reached");
        }
        for (size_t i = 0; i < records.size(); i++) {
            data.slot_totals[i].push_back(samples[i].total);
            if (pick_component >= 0)
                data.slot_component[i].push_back(samples[i].raw[pick_component]);
        }
        data.first_values.push_back(extract(records[first_dyn], probe.first_src));
        data.second_values.push_back(extract(records[second_dyn], probe.second_src));
    }
    return data;
}

InteractionVerdict probe_interaction(const ProbeSpec& spec, const ModelConfig& model,
                                     uint64_t seed) {
    InteractionVerdict v;
    v.first = spec.first;
    v.second = spec.second;

    // Storage-mediated interactions survive the spacer window; pipeline
    // operand effects live at distance one. Probe both arrangements.
    ProbeProgram spaced = gen_probe(spec);
    PeakResult r_spaced =
        peak_correlation(run_probe(spaced, model, derive_seed(seed, 1), spec.n_runs));

    ProbeSpec adj = spec;
    adj.spacer_count = 0;
    ProbeProgram adjacent = gen_probe(adj);
    PeakResult r_adj =
        peak_correlation(run_probe(adjacent, model, derive_seed(seed, 2), spec.n_runs));

    v.peak_abs_r = std::max(std::abs(r_spaced.peak), std::abs(r_adj.peak));
    v.correlated = v.peak_abs_r >= 0.1;
    if (v.correlated)
        v.dominance =
            probe_dominance(spec.first, spec.second, model, derive_seed(seed, 3), spec.n_runs, 0.1);
    return v;
}

Dominance probe_dominance(Mnemonic first, Mnemonic second, const ModelConfig& model, uint64_t seed,
                          size_t n_runs, double threshold) {
    auto survival = [&](Mnemonic a, Mnemonic b, uint64_t s) {
        ProbeProgram p = build_self_probe(a, b);
        ProbeRunData data = run_probe(p, model, s, n_runs);
        // visibility is read at the second instance of the first instruction;
        // probes are straight-line so dynamic slots equal static indices
        PeakResult r = peak_correlation(data, nullptr, static_cast<int>(p.second_slot));
        return std::abs(r.peak);
    };
    double s_first = survival(first, second, derive_seed(seed, 10));
    double s_second = survival(second, first, derive_seed(seed, 11));
    bool f1 = s_first >= threshold, f2 = s_second >= threshold;
    if (f1 && !f2) return Dominance::First;
    if (f2 && !f1) return Dominance::Second;
    return Dominance::SameStorage;
}

MatrixResult build_matrix(const ModelConfig& model, uint64_t seed, size_t n_runs,
                          double threshold) {
    MatrixResult m;
    std::vector<std::pair<int, int>> pairs;
    for (int i = 0; i < 20; i++)
        for (int j = 0; j < 20; j++) pairs.emplace_back(i, j);

    size_t workers = std::max<size_t>(1, std::thread::hardware_concurrency());
    std::atomic<size_t> next{0};
    auto work = [&]() {
        for (;;) {
            size_t k = next.fetch_add(1);
            if (k >= pairs.size()) return;
            auto [i, j] = pairs[k];
            ProbeSpec spec;
            spec.first = kProbeUniverse[i];
            spec.second = kProbeUniverse[j];
            spec.n_runs = n_runs;
            InteractionVerdict v = probe_interaction(spec, model, derive_seed(seed, k));
            if (v.correlated && v.peak_abs_r < threshold) {
                v.correlated = false;
                v.dominance = Dominance::None;
            }
            m.cells[i][j] = v;
        }
    };
    std::vector<std::future<void>> futs;
    for (size_t w = 1; w < workers; w++) futs.push_back(std::async(std::launch::async, work));
    work();
    for (auto& f : futs) f.get();
    return m;
}

std::string MatrixResult::to_csv() const {
    std::ostringstream out;
    out << "first,second,correlated,peak_abs_r,dominance\n";
    for (int i = 0; i < 20; i++)
        for (int j = 0; j < 20; j++) {
            const auto& v = cells[i][j];
            out << mnemonic_name(kProbeUniverse[i]) << "," << mnemonic_name(kProbeUniverse[j])
                << "," << (v.correlated ? 1 : 0) << "," << std::setprecision(4) << v.peak_abs_r
                << "," << dominance_name(v.dominance) << "\n";
        }
    return out.str();
}

namespace {
char glyph_of(const InteractionVerdict& v) {
    if (!v.correlated) return '.';
    switch (v.dominance) {
    case Dominance::SameStorage: return 'o';
    case Dominance::First: return '<';
    case Dominance::Second: return '^';
    default: return '.';
    }
}
} // namespace

std::string MatrixResult::to_grid() const {
    std::ostringstream out;
    out << std::left << std::setw(6) << "#";
    for (int j = 0; j < 20; j++) out << std::setw(5) << mnemonic_name(kProbeUniverse[j]);
    out << "\n";
    for (int i = 0; i < 20; i++) {
        out << std::setw(6) << mnemonic_name(kProbeUniverse[i]);
        for (int j = 0; j < 20; j++) out << std::setw(5) << glyph_of(cells[i][j]);
        out << "\n";
    }
    return out.str();
}

MatrixResult MatrixResult::parse_grid(const std::string& text) {
    MatrixResult m;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty matrix grid");
    int row = 0;
    while (std::getline(in, line) && row < 20) {
        std::istringstream ls(line);
        std::string name;
        ls >> name;
        if (name.empty()) continue;
        for (int j = 0; j < 20; j++) {
            std::string g;
            if (!(ls >> g) || g.size() != 1) throw std::runtime_error("bad matrix grid row");
            InteractionVerdict v;
            v.first = kProbeUniverse[row];
            v.second = kProbeUniverse[j];
            v.correlated = g[0] != '.';
            v.dominance = g[0] == 'o'   ? Dominance::SameStorage
                          : g[0] == '<' ? Dominance::First
                          : g[0] == '^' ? Dominance::Second
                                        : Dominance::None;
            m.cells[row][j] = v;
        }
        row++;
    }
    if (row != 20) throw std::runtime_error("matrix grid needs 20 rows");
    return m;
}

} // namespace leakfix
