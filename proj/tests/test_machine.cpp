#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "leakfix/machine.hpp"
#include "leakfix/rng.hpp"

#include <cstring>

using namespace leakfix;

namespace {

Program prog(const std::string& src) { return parse(src); }

MachineState fresh(const Program& p) { return make_initial_state(p); }

// independent little-endian byte-array memory model used as the oracle for
// word composition
struct ByteOracle {
    uint8_t bytes[16] = {};
    uint32_t word(int off) const {
        return bytes[off] | (bytes[off + 1] << 8) | (bytes[off + 2] << 16) |
               (uint32_t(bytes[off + 3]) << 24);
    }
};

uint32_t rotr32(uint32_t x, unsigned k) {
    k &= 31;
    return k ? (x >> k) | (x << (32 - k)) : x;
}

} // namespace

TEST_CASE("xor and rotate basics") {
    Program p = prog("eors r3, r4\n");
    MachineState s = fresh(p);
    s.regs[3] = 0xF0;
    s.regs[4] = 0x0F;
    ExecRecord r = step(s, p.text[0], 0, 0);
    CHECK(s.regs[3] == 0xFF);
    CHECK_FALSE(s.z);
    CHECK(r.op1 == 0xF0);
    CHECK(r.op2 == 0x0F);
    CHECK(r.dest_old == 0xF0);

    Program q = prog("rors r2, r3\n");
    MachineState t = fresh(q);
    t.regs[2] = 0x000000FF;
    t.regs[3] = 8;
    step(t, q.text[0], 0, 0);
    CHECK(t.regs[2] == 0xFF000000);
}

TEST_CASE("byte store places the byte in the top lane of its word") {
    Program p = prog(".data d 0x300\n.byte 0x44 0x33 0x22 0x11\nstrb r5, [r3]\n");
    MachineState s = fresh(p);
    s.regs[3] = 0x303;
    s.regs[5] = 0xAB;
    ExecRecord r = step(s, p.text[0], 0, 0);
    CHECK(s.aligned_word_at(0x300) == 0xAB223344);

    // independent compose oracle
    ByteOracle oracle;
    oracle.bytes[0] = 0x44;
    oracle.bytes[1] = 0x33;
    oracle.bytes[2] = 0x22;
    oracle.bytes[3] = 0x11;
    CHECK(oracle.word(0) == 0x11223344);
    oracle.bytes[3] = 0xAB;
    CHECK(oracle.word(0) == s.aligned_word_at(0x300));
    REQUIRE(r.mem.has_value());
    CHECK(r.mem->old_word == 0x11223344);
    CHECK(r.mem->new_word == 0xAB223344);
}

TEST_CASE("adds/subs flags match a 64-bit widened reference on random pairs") {
    Program p = prog("adds r0, r1\nsubs r2, r3\n");
    MachineState s = fresh(p);
    Rng rng = make_rng(42, 0);
    for (int i = 0; i < 1000000; i++) {
        uint32_t a = rand_u32(rng), b = rand_u32(rng);
        s.regs[0] = a;
        s.regs[1] = b;
        step(s, p.text[0], 0, 0);
        uint64_t wide = uint64_t(a) + uint64_t(b);
        int64_t swide = int64_t(int32_t(a)) + int64_t(int32_t(b));
        CHECK(s.regs[0] == uint32_t(wide));
        CHECK(s.c == (wide > 0xFFFFFFFFull));
        CHECK(s.v == (swide != int64_t(int32_t(uint32_t(wide)))));

        s.regs[2] = a;
        s.regs[3] = b;
        step(s, p.text[1], 0, 0);
        int64_t sdiff = int64_t(int32_t(a)) - int64_t(int32_t(b));
        CHECK(s.regs[2] == uint32_t(a - b));
        CHECK(s.c == (a >= b));
        CHECK(s.v == (sdiff != int64_t(int32_t(a - b))));
    }
}

TEST_CASE("narrow stores leave all other bytes untouched") {
    Program p = prog(".data d 0x300\n.byte 1 2 3 4 5 6 7 8\nstrb r0, [r1, #2]\nstrh r2, [r1, #4]\n");
    MachineState before = fresh(p);
    MachineState s = before;
    s.regs[0] = 0xDEADBEEF;
    s.regs[1] = 0x300;
    s.regs[2] = 0xCAFEBABE;
    step(s, p.text[0], 0, 0);
    step(s, p.text[1], 1, 1);
    for (uint32_t a = 0x300; a < 0x308; a++) {
        uint8_t expect = before.mem.bytes[a - before.mem.base];
        if (a == 0x302) expect = 0xEF;
        if (a == 0x304) expect = 0xBE;
        if (a == 0x305) expect = 0xBA;
        CHECK(s.mem.bytes[a - s.mem.base] == expect);
    }
}

TEST_CASE("run executes straight-line code one record per instruction") {
    std::string src = ".data d 0x300\n.byte 0 0 0 0\nstr r1, [r2]\n";
    for (int i = 0; i < 9; i++) src += "movs r0, r0\n";
    src += "eors r3, r4\n";
    Program p = prog(src);
    MachineState s = fresh(p);
    s.regs[2] = 0x300;
    RunResult r = run(p, s);
    CHECK(r.records.size() == 11);
    CHECK(r.final_state.cycle_count == 11);
}

TEST_CASE("taken branch skips the fall-through slot") {
    Program p = prog("movs r1, #0\ncmp r1, #0\nbeq skip\nmovs r2, #9\nskip:\nmovs r3, #1\n");
    RunResult r = run(p, fresh(p));
    REQUIRE(r.records.size() == 4);
    CHECK(r.records[3].static_index == 4);
    CHECK(r.final_state.regs[2] == 0);
    CHECK(r.final_state.regs[3] == 1);
}

TEST_CASE("row-rotation program leaves rotated rows in memory") {
    Program p = prog(".data state 0x300\n"
                     ".word 0x00010203 0x04050607 0x08090a0b 0x0c0d0e0f\n"
                     "ldr r4, [r1, #4]\n"
                     "rors r4, r5\n"
                     "str r4, [r1, #4]\n"
                     "ldr r4, [r1, #8]\n"
                     "rors r4, r6\n"
                     "str r4, [r1, #8]\n"
                     "ldr r4, [r1, #12]\n"
                     "rors r4, r3\n"
                     "str r4, [r1, #12]\n");
    MachineState s = fresh(p);
    s.regs[1] = 0x300;
    s.regs[5] = 8;
    s.regs[6] = 16;
    s.regs[3] = 24;
    RunResult r = run(p, s);
    CHECK(r.records.size() == 9);
    // reference: independent 32-bit rotates of the original words
    CHECK(r.final_state.aligned_word_at(0x300) == 0x00010203u);
    CHECK(r.final_state.aligned_word_at(0x304) == rotr32(0x04050607u, 8));
    CHECK(r.final_state.aligned_word_at(0x308) == rotr32(0x08090a0bu, 16));
    CHECK(r.final_state.aligned_word_at(0x30C) == rotr32(0x0c0d0e0fu, 24));
}

TEST_CASE("determinism: identical runs produce identical records") {
    Program p = prog(".data d 0x300\n.byte 9 9 9 9\nldr r1, [r2]\nadds r1, r3\nstr r1, [r2]\n");
    MachineState s = fresh(p);
    s.regs[2] = 0x300;
    s.regs[3] = 77;
    RunResult a = run(p, s);
    RunResult b = run(p, s);
    REQUIRE(a.records.size() == b.records.size());
    for (size_t i = 0; i < a.records.size(); i++) {
        CHECK(a.records[i].op1 == b.records[i].op1);
        CHECK(a.records[i].op2 == b.records[i].op2);
        CHECK(a.records[i].result == b.records[i].result);
    }
    CHECK(a.final_state.regs == b.final_state.regs);
}

TEST_CASE("push/pop round-trip through the stack region") {
    Program p = prog("push {r1, r2}\nmovs r1, #0\nmovs r2, #0\npop {r1, r2}\n");
    MachineState s = fresh(p);
    s.regs[1] = 0x11111111;
    s.regs[2] = 0x22222222;
    RunResult r = run(p, s);
    CHECK(r.final_state.regs[1] == 0x11111111);
    CHECK(r.final_state.regs[2] == 0x22222222);
    CHECK(r.final_state.regs[MachineState::kSp] == p.stack_base);
}

TEST_CASE("error paths") {
    // unaligned word access
    Program p1 = prog(".data d 0x300\n.byte 0 0 0 0 0 0 0 0\nldr r1, [r2]\n");
    MachineState s1 = fresh(p1);
    s1.regs[2] = 0x302;
    CHECK_THROWS_AS(run(p1, s1), EmuError);

    // read of memory never declared or written
    Program p2 = prog("ldr r1, [r2]\n");
    MachineState s2 = fresh(p2);
    s2.regs[2] = 0x1000;
    CHECK_THROWS_AS(run(p2, s2), EmuError);

    // runaway loop hits max_steps
    Program p3 = prog("top:\nmovs r1, #1\nb top\n");
    CHECK_THROWS_WITH_AS(run(p3, fresh(p3), 100), doctest::Contains("max_steps"), EmuError);

    // pop past the stack top leaves the region
    Program p4 = prog("pop {r1}\n");
    CHECK_THROWS_AS(run(p4, fresh(p4)), EmuError);
}

TEST_CASE("uninitialized stack reads as zero after priming") {
    Program p = prog("pop {r1}\n");
    MachineState s = fresh(p);
    s.regs[MachineState::kSp] = p.stack_base - 8; // pretend something pushed
    RunResult r = run(p, s);
    CHECK(r.final_state.regs[1] == 0);
}
