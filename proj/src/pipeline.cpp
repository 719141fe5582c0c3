#include "leakfix/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <future>
#include <sstream>

namespace leakfix {

namespace {

std::vector<std::vector<uint8_t>> draw_inputs(size_t count, size_t len, uint64_t seed,
                                              uint64_t stream) {
    Rng rng = make_rng(seed, stream);
    std::vector<std::vector<uint8_t>> out;
    for (size_t i = 0; i < count; i++) out.push_back(random_input(len, rng));
    return out;
}

TTestReport campaign_over_inputs(const Program& p, const PipelineConfig& cfg,
                                 const std::vector<std::vector<uint8_t>>& inputs, size_t traces,
                                 uint64_t seed) {
    CampaignSpec spec;
    spec.program = &p;
    spec.n_traces = traces;
    spec.input_len = cfg.input_len;
    spec.threshold = cfg.threshold;
    spec.binding = cfg.binding;
    // campaigns over the fixed inputs run concurrently only through the
    // sharded trace loop; reports merge by largest |t|
    std::vector<TTestReport> reports;
    for (size_t k = 0; k < inputs.size(); k++)
        reports.push_back(run_single_campaign(spec, cfg.model, inputs[k], derive_seed(seed, k)));
    return aggregate_max(reports);
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << content;
}

} // namespace

BindingFn generic_binding(const Program& p) {
    const DataRegion* input_region = p.find_region("input");
    const DataRegion* mask_region = p.find_region("mask");
    uint32_t input_base = input_region ? input_region->base : 0;
    size_t input_size = input_region ? input_region->bytes.size() : 0;
    uint32_t mask_base = mask_region ? mask_region->base : 0;
    size_t mask_size = mask_region ? mask_region->bytes.size() : 0;
    return [=](MachineState& s, std::span<const uint8_t> in, Rng& rng) {
        s.regs[Program::reserved_mask_register] = rand_u32(rng);
        if (input_size) {
            for (size_t i = 0; i < input_size; i++) {
                uint8_t m = mask_size ? rand_u8(rng) : 0;
                uint8_t v = i < in.size() ? in[i] : 0;
                s.mem.bytes[input_base + i - s.mem.base] = v ^ m;
                if (mask_size && i < mask_size) s.mem.bytes[mask_base + i - s.mem.base] = m;
            }
        }
    };
}

PipelineResult run_pipeline(const PipelineConfig& config) {
    PipelineResult result;
    Program program = config.program;
    result.before_count = program.text.size();

    std::vector<std::vector<uint8_t>> fix_inputs = config.explicit_fixed_inputs;
    if (fix_inputs.empty())
        fix_inputs = draw_inputs(static_cast<size_t>(config.fixed_input_count), config.input_len,
                                 config.seed, 0xF1D0);

    RewriteState rw_state;
    result.log.iterations = 0;
    bool zero_flags = false, no_more_fixes = false;
    for (int iter = 0; iter < config.max_iterations; iter++) {
        TTestReport report = campaign_over_inputs(program, config, fix_inputs, config.traces_fix,
                                                  derive_seed(config.seed, 100 + iter));
        size_t flags = report.flagged_count();
        result.flagged_per_iteration.push_back(flags);
        if (flags == 0) {
            zero_flags = true;
            break;
        }
        auto applied = fix_iteration(program, report, rw_state, result.log);
        result.log.iterations++;
        if (applied.empty()) {
            no_more_fixes = true;
            break;
        }
    }
    result.log.fixpoint_reached = zero_flags || no_more_fixes;

    // verification: fresh seed, fresh fixed inputs, larger campaign
    auto verify_inputs = draw_inputs(fix_inputs.size(), config.input_len,
                                     derive_seed(config.seed, 0xFE12), 0xB0B);
    result.final_report = campaign_over_inputs(program, config, verify_inputs,
                                               config.traces_verify,
                                               derive_seed(config.seed, 0xE00));
    result.remaining_flags = result.final_report.flagged_count();
    result.converged = result.log.fixpoint_reached;

    result.after_count = program.text.size();
    result.overhead_ratio =
        static_cast<double>(result.after_count) / static_cast<double>(result.before_count);
    result.final_program = std::move(program);

    if (!config.out_dir.empty()) {
        std::filesystem::create_directories(config.out_dir);
        write_file(config.out_dir + "/fixed.s", emit(result.final_program));
        write_file(config.out_dir + "/final_report.csv", result.final_report.to_csv());
        write_file(config.out_dir + "/rewrite_log.txt", result.log.to_text());
        std::ostringstream sum;
        sum << "instructions_before = " << result.before_count << "\n";
        sum << "instructions_after = " << result.after_count << "\n";
        sum << "overhead_ratio = " << result.overhead_ratio << "\n";
        sum << "remaining_flags = " << result.remaining_flags << "\n";
        sum << "iterations = " << result.log.iterations << "\n";
        sum << "flagged_per_iteration =";
        for (size_t f : result.flagged_per_iteration) sum << " " << f;
        sum << "\n";
        write_file(config.out_dir + "/summary.txt", sum.str());
        // plot-ready trace of |t| per slot plus a gnuplot script
        std::ostringstream plot;
        plot << "slot t_total\n";
        for (const auto& s : result.final_report.slots)
            plot << s.slot << " " << s.t_total << "\n";
        write_file(config.out_dir + "/final_t.dat", plot.str());
        write_file(config.out_dir + "/plot_t.gp",
                   "set xlabel 'instruction slot'\nset ylabel 't'\n"
                   "plot 'final_t.dat' using 1:2 with lines title 't-statistic', "
                   "4.5 with lines dt 2 title 'threshold', -4.5 with lines dt 2 notitle\n");
    }
    return result;
}

std::vector<TrendRow> leak_trend(const PipelineConfig& config,
                                 const std::vector<size_t>& input_counts, int repetitions) {
    std::vector<TrendRow> rows;
    for (size_t count : input_counts) {
        TrendRow row;
        row.n_fixed_inputs = count;
        std::vector<double> observed;
        for (int rep = 0; rep < repetitions; rep++) {
            if (count == 0) {
                observed.push_back(0);
                continue;
            }
            auto inputs = draw_inputs(count, config.input_len,
                                      derive_seed(config.seed, 0x77E0 + rep), count);
            TTestReport agg = campaign_over_inputs(config.program, config, inputs,
                                                   config.traces_fix,
                                                   derive_seed(config.seed, 0x300 + rep));
            observed.push_back(static_cast<double>(agg.flagged_count()));
        }
        double mean = 0;
        for (double x : observed) mean += x;
        mean /= observed.size();
        double var = 0;
        for (double x : observed) var += (x - mean) * (x - mean);
        var = observed.size() > 1 ? var / (observed.size() - 1) : 0.0;
        // 95% CI, Student t with n-1 df (t_{0.975,9} for the default 10 reps)
        double tcrit = repetitions == 10 ? 2.262157 : 1.959964;
        double half = tcrit * std::sqrt(var / observed.size());
        row.mean_flagged = mean;
        row.ci_low = mean - half;
        row.ci_high = mean + half;
        rows.push_back(row);
    }
    return rows;
}

} // namespace leakfix
