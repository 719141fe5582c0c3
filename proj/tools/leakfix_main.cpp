#include "leakfix/pipeline.hpp"
#include "leakfix/probes.hpp"

#include "CLI11.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace leakfix;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << content;
}

struct CommonOpts {
    std::string asm_path;
    std::string corpus_dir = "corpus";
    std::string corpus_name;
    std::string model_path;
    size_t traces = 10000;
    double threshold = 4.5;
    double noise_sigma = -1;
    uint64_t seed = 1;
    std::string out_dir = "out";
    int fixed_inputs = 1;
};

ModelConfig load_model(const CommonOpts& o) {
    ModelConfig m = o.model_path.empty() ? ModelConfig::default_config()
                                         : ModelConfig::load(o.model_path);
    if (o.noise_sigma >= 0) m.noise_sigma = o.noise_sigma;
    return m;
}

// Either a named corpus entry or any .s file with the generic input binding.
struct Subject {
    Program program;
    BindingFn binding;
    size_t input_len = 16;
    std::string name;
};

Subject resolve_subject(const CommonOpts& o) {
    Subject s;
    if (!o.corpus_name.empty()) {
        auto entries = load_corpus(o.corpus_dir);
        const CorpusEntry& e = corpus_entry(entries, o.corpus_name);
        s.program = e.program;
        s.binding = e.binding;
        s.input_len = e.input_len;
        s.name = e.name;
        return s;
    }
    if (o.asm_path.empty()) throw std::runtime_error("need --asm <file> or --corpus <entry>");
    s.program = parse(read_file(o.asm_path));
    s.binding = generic_binding(s.program);
    const DataRegion* in = s.program.find_region("input");
    s.input_len = in ? in->bytes.size() : 16;
    s.name = std::filesystem::path(o.asm_path).stem().string();
    return s;
}

void add_common(CLI::App* cmd, CommonOpts& o, bool with_subject = true) {
    if (with_subject) {
        cmd->add_option("--asm", o.asm_path, "assembly file");
        cmd->add_option("--corpus", o.corpus_name, "corpus entry name");
        cmd->add_option("--corpus-dir", o.corpus_dir, "corpus directory");
    }
    cmd->add_option("--model", o.model_path, "model config file");
    cmd->add_option("--traces", o.traces, "traces per campaign");
    cmd->add_option("--threshold", o.threshold, "|t| leakage threshold");
    cmd->add_option("--noise-sigma", o.noise_sigma, "gaussian noise sigma");
    cmd->add_option("--seed", o.seed, "campaign seed");
    cmd->add_option("--out", o.out_dir, "output directory");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"power-leakage emulation, detection, and assembly rewriting"};
    app.require_subcommand(1);
    CommonOpts o;

    std::string check_file;
    auto* check = app.add_subcommand("check", "parse and validate an assembly file");
    check->add_option("file", check_file)->required();

    auto* trace = app.add_subcommand("trace", "dump one execution with power samples as CSV");
    add_common(trace, o);

    auto* campaign = app.add_subcommand("campaign", "fixed-vs-random t-test campaign");
    add_common(campaign, o);
    campaign->add_option("--fixed-inputs", o.fixed_inputs, "number of fixed inputs");

    std::string report_path, rewrite_out;
    auto* rewrite = app.add_subcommand("rewrite", "apply rules at slots flagged by a report");
    rewrite->add_option("asm", o.asm_path)->required();
    rewrite->add_option("report", report_path)->required();
    rewrite->add_option("--out", rewrite_out, "output .s path");

    size_t matrix_runs = 10000;
    auto* matrix = app.add_subcommand("matrix", "instruction-pair interaction matrix");
    add_common(matrix, o, false);
    matrix->add_option("--runs", matrix_runs, "runs per probe");

    std::string counts_str = "1,5,10";
    auto* trend = app.add_subcommand("trend", "flagged slots vs number of fixed inputs");
    add_common(trend, o);
    trend->add_option("--counts", counts_str, "comma list of input counts");

    auto* runcmd = app.add_subcommand("run", "full emulate/test/rewrite loop");
    add_common(runcmd, o);
    runcmd->add_option("--fixed-inputs", o.fixed_inputs, "number of fixed inputs");
    size_t verify_traces = 100000;
    int max_iter = 20;
    runcmd->add_option("--verify-traces", verify_traces, "traces for final verification");
    runcmd->add_option("--max-iterations", max_iter, "rewrite iteration bound");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*check) {
            parse(read_file(check_file));
            std::cout << "ok\n";
            return 0;
        }
        if (*trace) {
            Subject s = resolve_subject(o);
            ModelConfig model = load_model(o);
            MachineState init = make_initial_state(s.program);
            Rng rng = make_rng(o.seed, 0);
            std::vector<uint8_t> input = random_input(s.input_len, rng);
            s.binding(init, input, rng);
            auto leaders = block_leaders(s.program);
            std::vector<ExecRecord> records;
            std::vector<PowerSample> samples;
            MachineState state = init;
            emulate_trace(s.program, state, leaders, model, &rng, records, samples);
            std::cout << "slot,instr_index,mnemonic,source_line,op1,op2,result,total";
            for (int c = 0; c < kNumComponents; c++) std::cout << "," << component_name(c);
            std::cout << "\n";
            for (size_t i = 0; i < records.size(); i++) {
                const auto& r = records[i];
                std::cout << r.slot << "," << r.static_index << "," << mnemonic_name(r.instr->op)
                          << "," << r.instr->source_line << "," << r.op1 << "," << r.op2 << ","
                          << (r.has_result ? std::to_string(r.result) : std::string("-")) << ","
                          << samples[i].total;
                for (int c = 0; c < kNumComponents; c++) std::cout << "," << samples[i].raw[c];
                std::cout << "\n";
            }
            return 0;
        }
        if (*campaign) {
            Subject s = resolve_subject(o);
            ModelConfig model = load_model(o);
            CampaignSpec spec;
            spec.program = &s.program;
            spec.n_traces = o.traces;
            spec.input_len = s.input_len;
            spec.threshold = o.threshold;
            spec.seed = o.seed;
            spec.binding = s.binding;
            Rng rng = make_rng(o.seed, 0xF1D0);
            for (int k = 0; k < o.fixed_inputs; k++)
                spec.fixed_inputs.push_back(random_input(s.input_len, rng));
            TTestReport rep = run_campaign(spec, model);
            std::filesystem::create_directories(o.out_dir);
            std::string path = o.out_dir + "/" + s.name + "_report.csv";
            write_file(path, rep.to_csv());
            std::cout << "flagged slots: " << rep.flagged_count() << ", max |t| = "
                      << rep.max_abs_t() << "\nreport: " << path << "\n";
            return rep.flagged_count() == 0 ? 0 : 2;
        }
        if (*rewrite) {
            Program p = parse(read_file(o.asm_path));
            TTestReport rep = TTestReport::from_csv(read_file(report_path));
            RewriteState state;
            RewriteLog log;
            fix_iteration(p, rep, state, log);
            log.iterations = 1;
            std::string out_path = rewrite_out.empty()
                                       ? o.asm_path + ".fixed.s"
                                       : rewrite_out;
            write_file(out_path, emit(p));
            std::cout << log.to_text() << "rewritten: " << out_path << "\n";
            return 0;
        }
        if (*matrix) {
            ModelConfig model = load_model(o);
            MatrixResult m = build_matrix(model, o.seed, matrix_runs);
            std::filesystem::create_directories(o.out_dir);
            write_file(o.out_dir + "/matrix.csv", m.to_csv());
            write_file(o.out_dir + "/matrix.txt", m.to_grid());
            std::cout << m.to_grid();
            return 0;
        }
        if (*trend) {
            Subject s = resolve_subject(o);
            PipelineConfig cfg;
            cfg.program = s.program;
            cfg.binding = s.binding;
            cfg.input_len = s.input_len;
            cfg.model = load_model(o);
            cfg.traces_fix = o.traces;
            cfg.threshold = o.threshold;
            cfg.seed = o.seed;
            std::vector<size_t> counts;
            std::stringstream cs(counts_str);
            std::string tok;
            while (std::getline(cs, tok, ',')) counts.push_back(std::stoul(tok));
            auto rows = leak_trend(cfg, counts);
            std::cout << "n_inputs,mean_flagged,ci_low,ci_high\n";
            for (const auto& r : rows)
                std::cout << r.n_fixed_inputs << "," << r.mean_flagged << "," << r.ci_low << ","
                          << r.ci_high << "\n";
            return 0;
        }
        if (*runcmd) {
            Subject s = resolve_subject(o);
            PipelineConfig cfg;
            cfg.program = s.program;
            cfg.binding = s.binding;
            cfg.input_len = s.input_len;
            cfg.model = load_model(o);
            cfg.traces_fix = o.traces;
            cfg.traces_verify = verify_traces;
            cfg.fixed_input_count = o.fixed_inputs;
            cfg.max_iterations = max_iter;
            cfg.threshold = o.threshold;
            cfg.seed = o.seed;
            cfg.out_dir = o.out_dir;
            PipelineResult res = run_pipeline(cfg);
            std::cout << "iterations: " << res.log.iterations << "\n"
                      << "flags per iteration:";
            for (size_t f : res.flagged_per_iteration) std::cout << " " << f;
            std::cout << "\ninstructions: " << res.before_count << " -> " << res.after_count
                      << " (x" << res.overhead_ratio << ")\n"
                      << "remaining flags at verification: " << res.remaining_flags << "\n"
                      << "outputs in " << o.out_dir << "\n";
            return res.remaining_flags == 0 ? 0 : 2;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
