#pragma once

#include "leakfix/tvla.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

namespace leakfix {

// Rule ids; these appear in provenance markers and logs.
extern const char* const kOperandWipe;   // insert `movs r7, r7`
extern const char* const kRegisterWipe;  // insert `movs <dest>, r7`
extern const char* const kRotationMask;  // Fig-style masked rotation sequence
extern const char* const kLoadShadow;    // insert `push {r7}; pop {dest}`
extern const char* const kStoreShadow;   // insert `str r7, [addr]` (width-matched)
extern const char* const kByteSplitStore;// split word store into double byte stores

struct RewriteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RewriteLogEntry {
    int source_line = 0;
    size_t static_index = 0;
    std::string rule;
    int inserted_count = 0;
};

struct RewriteLog {
    std::vector<RewriteLogEntry> entries;
    std::vector<std::string> skipped; // human-readable notes for refused fixes
    bool fixpoint_reached = false;
    int iterations = 0;

    std::string to_text() const;
};

// Persistent per-uid record of applied rules; keeps repeated reports from
// stacking the same fix onto one instruction.
struct RewriteState {
    std::map<uint64_t, std::set<std::string>> applied;
};

// Rule for a cause at a given instruction; empty when no rule applies.
std::string rule_for(Cause cause, const Instruction& ins);

// Applies the rule selected by `cause` at the instruction with this static
// index. Returns the number of instructions inserted (replacements count the
// net growth). Throws RewriteError on pattern mismatch or operand collisions.
int apply_rule(Program& p, size_t static_index, Cause cause);

// One pass over a report: every flagged slot gets its cause's rule, most
// specific rule first when several dynamic slots flag one instruction,
// processed in descending static order so insertions do not shift pending
// indices. Returns the log entries of this pass.
std::vector<RewriteLogEntry> fix_iteration(Program& p, const TTestReport& report,
                                           RewriteState& state, RewriteLog& log);

// Runs both programs from n random initial states and compares the final
// architectural state modulo r7, the stack region, and flags.
struct EquivResult {
    bool equivalent = true;
    std::string first_difference;
};
EquivResult semantic_equiv_check(const Program& original, const Program& rewritten,
                                 size_t n_random_states, uint64_t seed,
                                 const BindingFn& binding = {}, size_t input_len = 0);

// True when inserting flag-writing instructions before `index` cannot change
// a conditional branch decision (conservative straight-line scan).
bool flags_safe_to_insert(const Program& p, size_t index);

// Strips rule-inserted instructions (for insertion-only rules this recovers
// the original program).
Program strip_inserted(const Program& p);

} // namespace leakfix
