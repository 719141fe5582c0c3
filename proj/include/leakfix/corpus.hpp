#pragma once

#include "leakfix/tvla.hpp"

#include <functional>
#include <string>
#include <vector>

namespace leakfix {

// A masked kernel with its input binding, reference semantics, and the
// leakage causes a fresh campaign is expected to flag.
struct CorpusEntry {
    std::string name;
    std::string file;
    std::string binding_name;
    std::string description;
    Program program;
    size_t input_len = 0;
    BindingFn binding;
    // plain-input reference semantics
    std::function<std::vector<uint8_t>(std::span<const uint8_t>)> reference;
    // binds with the given seed, runs the program, and unmasks the outputs by
    // replaying the binding's mask draws; compared against reference()
    std::function<std::vector<uint8_t>(const Program&, std::span<const uint8_t> input,
                                       uint64_t seed)>
        run_plain;
    std::vector<Cause> expected_causes;
};

struct CorpusError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::vector<CorpusEntry> load_corpus(const std::string& dir);
const CorpusEntry& corpus_entry(const std::vector<CorpusEntry>& entries, const std::string& name);

// Shared-mask binding for the row-rotation kernel: the whole state is masked
// with one replicated byte mask and the rotation amounts are 8/16/24. Used by
// leakage-demonstration tests; deliberately not rule-fixable at the loads.
BindingFn shiftrows_shared_mask_binding();

} // namespace leakfix
