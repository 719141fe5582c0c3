#include "leakfix/tvla.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <sstream>
#include <thread>

namespace leakfix {

Welford Welford::merged(const Welford& a, const Welford& b) {
    if (a.n == 0) return b;
    if (b.n == 0) return a;
    Welford m;
    m.n = a.n + b.n;
    double delta = b.mean - a.mean;
    double na = static_cast<double>(a.n), nb = static_cast<double>(b.n);
    m.mean = a.mean + delta * nb / (na + nb);
    m.m2 = a.m2 + b.m2 + delta * delta * na * nb / (na + nb);
    return m;
}

double welch_t(const Welford& a, const Welford& b) {
    double va = a.variance() / static_cast<double>(a.n);
    double vb = b.variance() / static_cast<double>(b.n);
    double num = a.mean - b.mean;
    double denom = std::sqrt(va + vb);
    if (denom == 0.0) {
        if (num == 0.0) return 0.0;
        return num > 0 ? std::numeric_limits<double>::infinity()
                       : -std::numeric_limits<double>::infinity();
    }
    return num / denom;
}

const char* cause_name(Cause c) {
    switch (c) {
    case Cause::None: return "none";
    case Cause::OperandInteraction: return "operand-interaction";
    case Cause::RegisterOverwrite: return "register-overwrite";
    case Cause::Bus: return "bus";
    case Cause::MemoryOverwrite: return "memory-overwrite";
    case Cause::StoreLatch: return "store-latch";
    case Cause::ByteAdjacency: return "byte-adjacency";
    case Cause::RotationAlignment: return "rotation-alignment";
    }
    return "?";
}

Cause cause_from_name(const std::string& s) {
    for (int i = 0; i <= static_cast<int>(Cause::RotationAlignment); i++)
        if (s == cause_name(static_cast<Cause>(i))) return static_cast<Cause>(i);
    throw std::runtime_error("unknown cause `" + s + "`");
}

double SlotStats::max_abs_t() const {
    double m = std::abs(t_total);
    for (double t : t_comp) m = std::max(m, std::abs(t));
    return m;
}

size_t TTestReport::flagged_count() const {
    size_t n = 0;
    for (const auto& s : slots)
        if (s.flagged()) n++;
    return n;
}

std::vector<size_t> TTestReport::flagged_static_indices() const {
    std::vector<size_t> out;
    for (const auto& s : slots)
        if (s.flagged()) out.push_back(s.static_index);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
}

double TTestReport::max_abs_t() const {
    double m = 0;
    for (const auto& s : slots) m = std::max(m, s.max_abs_t());
    return m;
}

// Attribution walks the mapped components from most to least specific storage
// effect; the flagged one with the largest |t| names the cause.
Cause classify_cause(const SlotStats& s, Mnemonic m, double threshold) {
    if (s.max_abs_t() < threshold) return Cause::None;
    struct Mapped {
        int comp;
        Cause cause;
    };
    const Mapped order[] = {
        {kTMemcell, Cause::MemoryOverwrite},
        {kTBus, Cause::Bus},
        {kTLatch, Cause::StoreLatch},
        {kBAdj, Cause::ByteAdjacency},
        {kTDest, is_shift(m) ? Cause::RotationAlignment : Cause::RegisterOverwrite},
        {kTOp1, Cause::OperandInteraction},
        {kTOp2, Cause::OperandInteraction},
    };
    double best = 0;
    Cause cause = Cause::None;
    for (const auto& e : order) {
        double t = std::abs(s.t_comp[e.comp]);
        if (t >= threshold && t > best) {
            best = t;
            cause = e.cause;
        }
    }
    // A slot can exceed the threshold only through the total or an unmapped
    // component; the generic operand wipe is the mildest applicable fix.
    if (cause == Cause::None) cause = Cause::OperandInteraction;
    return cause;
}

std::vector<uint8_t> random_input(size_t len, Rng& rng) {
    std::vector<uint8_t> v(len);
    for (auto& b : v) b = rand_u8(rng);
    return v;
}

namespace {

struct SlotAccum {
    Welford total[2];
    Welford comp[2][kNumComponents];
};

struct ShardResult {
    std::vector<SlotAccum> accums;
    std::vector<Mnemonic> shape; // mnemonic per slot, for divergence checks
    std::vector<size_t> static_indices;
    std::vector<int> source_lines;
    uint64_t n[2] = {0, 0};
};

ShardResult run_shard(const CampaignSpec& spec, const ModelConfig& model,
                      std::span<const uint8_t> fixed_input, uint64_t seed,
                      const std::vector<uint8_t>& labels, size_t begin, size_t end,
                      const std::vector<uint8_t>& leaders) {
    ShardResult res;
    MachineState init_template = make_initial_state(*spec.program);
    std::vector<ExecRecord> records;
    std::vector<PowerSample> samples;
    for (size_t t = begin; t < end; t++) {
        Rng rng = make_rng(seed, t);
        int cls = labels[t]; // 0 fixed, 1 random
        std::vector<uint8_t> input;
        if (cls == 0)
            input.assign(fixed_input.begin(), fixed_input.end());
        else
            input = random_input(spec.input_len, rng);
        MachineState state = init_template;
        spec.binding(state, input, rng);
        emulate_trace(*spec.program, state, leaders, model, &rng, records, samples);

        if (res.accums.empty()) {
            res.accums.resize(records.size());
            res.shape.reserve(records.size());
            for (const auto& r : records) {
                res.shape.push_back(r.instr->op);
                res.static_indices.push_back(r.static_index);
                res.source_lines.push_back(r.instr->source_line);
            }
        } else if (records.size() != res.accums.size()) {
            throw CampaignError("traces diverge in control flow; campaigns require "
                                "constant-trace programs");
        }
        for (size_t i = 0; i < records.size(); i++) {
            if (records[i].instr->op != res.shape[i])
                throw CampaignError("traces diverge in control flow; campaigns require "
                                    "constant-trace programs");
            res.accums[i].total[cls].update(samples[i].total);
            for (int c = 0; c < kNumComponents; c++)
                res.accums[i].comp[cls][c].update(samples[i].raw[c]);
        }
        res.n[cls]++;
    }
    return res;
}

void merge_shards(ShardResult& into, const ShardResult& from) {
    if (into.accums.empty()) {
        into = from;
        return;
    }
    if (from.accums.empty()) return;
    if (from.accums.size() != into.accums.size() || from.shape != into.shape)
        throw CampaignError("traces diverge in control flow; campaigns require "
                            "constant-trace programs");
    for (size_t i = 0; i < into.accums.size(); i++) {
        for (int cls = 0; cls < 2; cls++) {
            into.accums[i].total[cls] =
                Welford::merged(into.accums[i].total[cls], from.accums[i].total[cls]);
            for (int c = 0; c < kNumComponents; c++)
                into.accums[i].comp[cls][c] =
                    Welford::merged(into.accums[i].comp[cls][c], from.accums[i].comp[cls][c]);
        }
    }
    into.n[0] += from.n[0];
    into.n[1] += from.n[1];
}

} // namespace

TTestReport run_single_campaign(const CampaignSpec& spec, const ModelConfig& model,
                                std::span<const uint8_t> fixed_input, uint64_t seed) {
    if (!spec.program || !spec.binding) throw CampaignError("campaign needs program and binding");
    if (spec.n_traces % 2 != 0) throw CampaignError("n_traces must be even");
    if (spec.threshold <= 0) throw CampaignError("threshold must be positive");

    // exact half/half class split, randomly interleaved
    std::vector<uint8_t> labels(spec.n_traces, 0);
    for (size_t i = spec.n_traces / 2; i < spec.n_traces; i++) labels[i] = 1;
    Rng label_rng = make_rng(seed, 0xC1A55);
    std::shuffle(labels.begin(), labels.end(), label_rng);

    auto leaders = block_leaders(*spec.program);

    // fixed-size shards merged in order: deterministic regardless of the
    // number of workers
    const size_t shard_size = 2048;
    size_t n_shards = (spec.n_traces + shard_size - 1) / shard_size;
    size_t workers = std::min<size_t>(std::thread::hardware_concurrency(), n_shards);
    std::vector<ShardResult> results(n_shards);
    if (workers <= 1) {
        for (size_t sh = 0; sh < n_shards; sh++)
            results[sh] = run_shard(spec, model, fixed_input, seed, labels, sh * shard_size,
                                    std::min(spec.n_traces, (sh + 1) * shard_size), leaders);
    } else {
        std::vector<std::future<ShardResult>> futs;
        for (size_t sh = 0; sh < n_shards; sh++)
            futs.push_back(std::async(std::launch::async, [&, sh] {
                return run_shard(spec, model, fixed_input, seed, labels, sh * shard_size,
                                 std::min(spec.n_traces, (sh + 1) * shard_size), leaders);
            }));
        for (size_t sh = 0; sh < n_shards; sh++) results[sh] = futs[sh].get();
    }
    ShardResult all;
    for (auto& r : results) merge_shards(all, r);

    TTestReport report;
    report.threshold = spec.threshold;
    report.slots.resize(all.accums.size());
    for (size_t i = 0; i < all.accums.size(); i++) {
        SlotStats& s = report.slots[i];
        s.slot = i;
        s.static_index = all.static_indices[i];
        s.mnemonic = all.shape[i];
        s.source_line = all.source_lines[i];
        s.n_fixed = all.n[0];
        s.n_random = all.n[1];
        s.t_total = welch_t(all.accums[i].total[0], all.accums[i].total[1]);
        for (int c = 0; c < kNumComponents; c++)
            s.t_comp[c] = welch_t(all.accums[i].comp[0][c], all.accums[i].comp[1][c]);
        s.cause = classify_cause(s, s.mnemonic, spec.threshold);
    }
    return report;
}

TTestReport run_campaign(const CampaignSpec& spec, const ModelConfig& model) {
    if (spec.fixed_inputs.empty()) throw CampaignError("campaign needs at least one fixed input");
    std::vector<TTestReport> reports;
    for (size_t k = 0; k < spec.fixed_inputs.size(); k++)
        reports.push_back(
            run_single_campaign(spec, model, spec.fixed_inputs[k], derive_seed(spec.seed, k)));
    return aggregate_max(reports);
}

TTestReport aggregate_max(std::span<const TTestReport> reports) {
    if (reports.empty()) throw CampaignError("nothing to aggregate");
    TTestReport out = reports[0];
    for (size_t r = 1; r < reports.size(); r++) {
        const TTestReport& rep = reports[r];
        if (rep.slots.size() != out.slots.size())
            throw CampaignError("aggregate over mismatched slot counts");
        for (size_t i = 0; i < out.slots.size(); i++) {
            SlotStats& a = out.slots[i];
            const SlotStats& b = rep.slots[i];
            if (b.mnemonic != a.mnemonic) throw CampaignError("aggregate over mismatched programs");
            if (std::abs(b.t_total) > std::abs(a.t_total)) a.t_total = b.t_total;
            for (int c = 0; c < kNumComponents; c++)
                if (std::abs(b.t_comp[c]) > std::abs(a.t_comp[c])) a.t_comp[c] = b.t_comp[c];
            a.n_fixed += b.n_fixed;
            a.n_random += b.n_random;
        }
    }
    for (auto& s : out.slots) s.cause = classify_cause(s, s.mnemonic, out.threshold);
    return out;
}

std::string TTestReport::to_csv() const {
    std::ostringstream out;
    out << "slot,instr_index,mnemonic,source_line,t_total";
    for (int c = 0; c < kNumComponents; c++) out << ",t_" << component_name(c);
    out << ",cause\n";
    out.precision(17);
    for (const auto& s : slots) {
        out << s.slot << "," << s.static_index << "," << mnemonic_name(s.mnemonic) << ","
            << s.source_line << "," << s.t_total;
        for (int c = 0; c < kNumComponents; c++) out << "," << s.t_comp[c];
        out << "," << cause_name(s.cause) << "\n";
    }
    return out.str();
}

TTestReport TTestReport::from_csv(const std::string& text) {
    TTestReport rep;
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty report csv");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cols;
        std::string cur;
        for (char ch : line) {
            if (ch == ',') {
                cols.push_back(cur);
                cur.clear();
            } else
                cur.push_back(ch);
        }
        cols.push_back(cur);
        if (cols.size() != size_t(5 + kNumComponents + 1))
            throw std::runtime_error("bad report csv row");
        SlotStats s;
        s.slot = std::stoull(cols[0]);
        s.static_index = std::stoull(cols[1]);
        s.source_line = std::stoi(cols[3]);
        s.t_total = std::stod(cols[4]);
        for (int c = 0; c < kNumComponents; c++) s.t_comp[c] = std::stod(cols[5 + c]);
        s.cause = cause_from_name(cols[5 + kNumComponents]);
        rep.slots.push_back(s);
    }
    return rep;
}

} // namespace leakfix
