#include "leakfix/corpus.hpp"

#include <fstream>
#include <sstream>

namespace leakfix {

namespace {

uint32_t word_at(std::span<const uint8_t> b, size_t off) {
    return static_cast<uint32_t>(b[off]) | (static_cast<uint32_t>(b[off + 1]) << 8) |
           (static_cast<uint32_t>(b[off + 2]) << 16) | (static_cast<uint32_t>(b[off + 3]) << 24);
}

void put_word(std::vector<uint8_t>& v, size_t off, uint32_t w) {
    for (int i = 0; i < 4; i++) v[off + i] = static_cast<uint8_t>(w >> (8 * i));
}

void poke_word(MachineState& s, uint32_t addr, uint32_t w) {
    for (int i = 0; i < 4; i++) {
        s.mem.bytes[addr + i - s.mem.base] = static_cast<uint8_t>(w >> (8 * i));
        s.mem.touched[addr + i - s.mem.base] = 1;
    }
}

void poke_byte(MachineState& s, uint32_t addr, uint8_t b) {
    s.mem.bytes[addr - s.mem.base] = b;
    s.mem.touched[addr - s.mem.base] = 1;
}

uint32_t peek_word(const MachineState& s, uint32_t addr) {
    uint32_t w = 0;
    for (int i = 0; i < 4; i++)
        w |= static_cast<uint32_t>(s.mem.bytes[addr + i - s.mem.base]) << (8 * i);
    return w;
}

uint32_t rotr(uint32_t x, unsigned k) {
    k &= 31;
    return k ? (x >> k) | (x << (32 - k)) : x;
}

constexpr uint8_t kMask = Program::reserved_mask_register;

// ---- shiftrows: rows at #4 and #8 share one mask word ----
// amounts: row1 rotated by 0, row2 by 16, row3 by 24
struct ShiftrowsDraws {
    uint32_t m0, m_shared, m3, r4init, r7;
};
ShiftrowsDraws shiftrows_draw(Rng& rng) {
    return {rand_u32(rng), rand_u32(rng), rand_u32(rng), rand_u32(rng), rand_u32(rng)};
}
void shiftrows_bind(MachineState& s, std::span<const uint8_t> in, const ShiftrowsDraws& d) {
    s.regs[1] = 0x300;
    s.regs[5] = 0;
    s.regs[6] = 16;
    s.regs[3] = 24;
    s.regs[4] = d.r4init;
    s.regs[kMask] = d.r7;
    poke_word(s, 0x300, word_at(in, 0) ^ d.m0);
    poke_word(s, 0x304, word_at(in, 4) ^ d.m_shared);
    poke_word(s, 0x308, word_at(in, 8) ^ d.m_shared);
    poke_word(s, 0x30C, word_at(in, 12) ^ d.m3);
}

// ---- reg-reuse: r1 and r2 carry words under one mask ----
struct RegReuseDraws {
    uint32_t m, r3init, r7;
};
RegReuseDraws reg_reuse_draw(Rng& rng) { return {rand_u32(rng), rand_u32(rng), rand_u32(rng)}; }
void reg_reuse_bind(MachineState& s, std::span<const uint8_t> in, const RegReuseDraws& d) {
    s.regs[1] = word_at(in, 0) ^ d.m;
    s.regs[2] = word_at(in, 4) ^ d.m;
    s.regs[3] = d.r3init;
    s.regs[4] = 0x400;
    s.regs[kMask] = d.r7;
}

// ---- bus-bytes: secrets at 0x300 and 0x400 under one byte mask ----
struct BusBytesDraws {
    uint8_t m, f1, f2, f3, g1, g2, g3, r5;
    uint32_t r6init, r0, r7;
};
BusBytesDraws bus_bytes_draw(Rng& rng) {
    BusBytesDraws d;
    d.m = rand_u8(rng);
    d.f1 = rand_u8(rng);
    d.f2 = rand_u8(rng);
    d.f3 = rand_u8(rng);
    d.g1 = rand_u8(rng);
    d.g2 = rand_u8(rng);
    d.g3 = rand_u8(rng);
    d.r5 = rand_u8(rng);
    d.r6init = rand_u32(rng);
    d.r0 = rand_u32(rng);
    d.r7 = rand_u32(rng);
    return d;
}
void bus_bytes_bind(MachineState& s, std::span<const uint8_t> in, const BusBytesDraws& d) {
    s.regs[3] = 0x303;
    s.regs[4] = 0x402;
    s.regs[5] = d.r5;
    s.regs[6] = d.r6init;
    s.regs[0] = d.r0;
    s.regs[kMask] = d.r7;
    poke_byte(s, 0x300, in[0] ^ d.m);
    poke_byte(s, 0x301, d.f1);
    poke_byte(s, 0x302, d.f2);
    poke_byte(s, 0x303, d.f3);
    poke_byte(s, 0x400, in[1] ^ d.m);
    poke_byte(s, 0x401, d.g1);
    poke_byte(s, 0x402, d.g2);
    poke_byte(s, 0x403, d.g3);
}

// ---- store-latch: r2 and r4 carry words under one mask ----
struct StoreLatchDraws {
    uint32_t m, r5init, r1init, r0, r7;
};
StoreLatchDraws store_latch_draw(Rng& rng) {
    return {rand_u32(rng), rand_u32(rng), rand_u32(rng), rand_u32(rng), rand_u32(rng)};
}
void store_latch_bind(MachineState& s, std::span<const uint8_t> in, const StoreLatchDraws& d) {
    s.regs[2] = word_at(in, 0) ^ d.m;
    s.regs[4] = word_at(in, 4) ^ d.m;
    s.regs[5] = d.r5init;
    s.regs[1] = d.r1init;
    s.regs[3] = 0x300;
    s.regs[0] = d.r0;
    s.regs[kMask] = d.r7;
}

// ---- masked-and: 2-share AND gadget ----
struct MaskedAndDraws {
    uint32_t y1, z1, r, r0init, r6init, r7;
};
MaskedAndDraws masked_and_draw(Rng& rng) {
    return {rand_u32(rng), rand_u32(rng), rand_u32(rng),
            rand_u32(rng), rand_u32(rng), rand_u32(rng)};
}
void masked_and_bind(MachineState& s, std::span<const uint8_t> in, const MaskedAndDraws& d) {
    uint32_t y = word_at(in, 0), z = word_at(in, 4);
    s.regs[1] = y ^ d.y1;
    s.regs[2] = d.y1;
    s.regs[3] = z ^ d.z1;
    s.regs[4] = d.z1;
    s.regs[5] = d.r;
    s.regs[0] = d.r0init;
    s.regs[6] = d.r6init;
    s.regs[8] = 0x400;
    s.regs[kMask] = d.r7;
}

// ---- quarter-round: a/b arithmetically masked, d under a halfword-
// replicated boolean mask, e under a byte-replicated mask ----
struct QuarterDraws {
    uint32_t ma, mb, r0init, r2init, r3init, r4init, r7;
    uint16_t mh;
    uint8_t me;
};
QuarterDraws quarter_draw(Rng& rng) {
    QuarterDraws d;
    d.ma = rand_u32(rng);
    d.mb = rand_u32(rng);
    d.mh = static_cast<uint16_t>(rng());
    d.me = rand_u8(rng);
    d.r0init = rand_u32(rng);
    d.r2init = rand_u32(rng);
    d.r3init = rand_u32(rng);
    d.r4init = rand_u32(rng);
    d.r7 = rand_u32(rng);
    return d;
}
void quarter_bind(MachineState& s, std::span<const uint8_t> in, const QuarterDraws& d) {
    s.regs[1] = 0x300;
    s.regs[5] = 16;
    s.regs[6] = 0x340;
    s.regs[0] = d.r0init;
    s.regs[2] = d.r2init;
    s.regs[3] = d.r3init;
    s.regs[4] = d.r4init;
    s.regs[kMask] = d.r7;
    uint32_t mhh = (static_cast<uint32_t>(d.mh) << 16) | d.mh;
    uint32_t mee = 0x01010101u * d.me;
    poke_word(s, 0x300, word_at(in, 0) + d.ma);
    poke_word(s, 0x304, word_at(in, 4) + d.mb);
    poke_word(s, 0x308, word_at(in, 8) ^ mhh);
    poke_word(s, 0x30C, word_at(in, 12) ^ mee);
}

// ---- null-mix: everything fresh ----
struct NullMixDraws {
    uint32_t m1, m2, r4, r2init, r3init, r5init, r7;
};
NullMixDraws null_mix_draw(Rng& rng) {
    return {rand_u32(rng), rand_u32(rng), rand_u32(rng), rand_u32(rng),
            rand_u32(rng), rand_u32(rng), rand_u32(rng)};
}
void null_mix_bind(MachineState& s, std::span<const uint8_t> in, const NullMixDraws& d) {
    s.regs[1] = 0x300;
    s.regs[6] = 0x340;
    s.regs[0] = 8;
    s.regs[4] = d.r4;
    s.regs[2] = d.r2init;
    s.regs[3] = d.r3init;
    s.regs[5] = d.r5init;
    s.regs[kMask] = d.r7;
    poke_word(s, 0x300, word_at(in, 0) ^ d.m1);
    poke_word(s, 0x304, word_at(in, 4) ^ d.m2);
}

std::string read_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw CorpusError("cannot open corpus file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::string trim_ws(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace

BindingFn shiftrows_shared_mask_binding() {
    return [](MachineState& s, std::span<const uint8_t> in, Rng& rng) {
        uint8_t m = rand_u8(rng);
        uint32_t mw = 0x01010101u * m;
        s.regs[1] = 0x300;
        s.regs[5] = 8;
        s.regs[6] = 16;
        s.regs[3] = 24;
        s.regs[4] = rand_u32(rng);
        s.regs[kMask] = rand_u32(rng);
        for (int w = 0; w < 4; w++) poke_word(s, 0x300 + 4 * w, word_at(in, 4 * w) ^ mw);
    };
}

std::vector<CorpusEntry> load_corpus(const std::string& dir) {
    std::string manifest = read_file(dir + "/manifest.txt");
    std::vector<CorpusEntry> entries;
    std::istringstream in(manifest);
    std::string line;
    while (std::getline(in, line)) {
        line = trim_ws(line);
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cols;
        std::string cur;
        for (char ch : line) {
            if (ch == '|') {
                cols.push_back(trim_ws(cur));
                cur.clear();
            } else
                cur.push_back(ch);
        }
        cols.push_back(trim_ws(cur));
        if (cols.size() != 5) throw CorpusError("bad manifest row: " + line);

        CorpusEntry e;
        e.name = cols[0];
        e.file = cols[1];
        e.binding_name = cols[2];
        e.input_len = std::stoul(cols[3]);
        if (cols[4] != "-") {
            std::istringstream cs(cols[4]);
            std::string c;
            while (std::getline(cs, c, ',')) e.expected_causes.push_back(cause_from_name(trim_ws(c)));
        }
        e.program = parse(read_file(dir + "/" + e.file));

        const std::string b = e.binding_name;
        if (b == "shiftrows-rows12-shared") {
            e.binding = [](MachineState& s, std::span<const uint8_t> in, Rng& rng) {
                shiftrows_bind(s, in, shiftrows_draw(rng));
            };
            e.reference = [](std::span<const uint8_t> in) {
                std::vector<uint8_t> out(16);
                put_word(out, 0, word_at(in, 0));
                put_word(out, 4, word_at(in, 4));
                put_word(out, 8, rotr(word_at(in, 8), 16));
                put_word(out, 12, rotr(word_at(in, 12), 24));
                return out;
            };
            e.run_plain = [](const Program& p, std::span<const uint8_t> in, uint64_t seed) {
                Rng rng = make_rng(seed, 0);
                ShiftrowsDraws d = shiftrows_draw(rng);
                MachineState init = make_initial_state(p);
                shiftrows_bind(init, in, d);
                MachineState fin = run(p, init).final_state;
                std::vector<uint8_t> out(16);
                put_word(out, 0, peek_word(fin, 0x300) ^ d.m0);
                put_word(out, 4, peek_word(fin, 0x304) ^ d.m_shared);
                put_word(out, 8, peek_word(fin, 0x308) ^ rotr(d.m_shared, 16));
                put_word(out, 12, peek_word(fin, 0x30C) ^ rotr(d.m3, 24));
                return out;
            };
        } else if (b == "reg-reuse") {
            e.binding = [](MachineState& s, std::span<const uint8_t> in, Rng& rng) {
                reg_reuse_bind(s, in, reg_reuse_draw(rng));
            };
            e.reference = [](std::span<const uint8_t> in) {
                return std::vector<uint8_t>(in.begin() + 4, in.begin() + 8);
            };
            e.run_plain = [](const Program& p, std::span<const uint8_t> in, uint64_t seed) {
                Rng rng = make_rng(seed, 0);
                RegReuseDraws d = reg_reuse_draw(rng);
                MachineState init = make_initial_state(p);
                reg_reuse_bind(init, in, d);
                MachineState fin = run(p, init).final_state;
                std::vector<uint8_t> out(4);
                put_word(out, 0, peek_word(fin, 0x400) ^ d.m);
                return out;
            };
        } else if (b == "bus-bytes") {
            e.binding = [](MachineState& s, std::span<const uint8_t> in, Rng& rng) {
                bus_bytes_bind(s, in, bus_bytes_draw(rng));
            };
            e.reference = [](std::span<const uint8_t> in) {
                return std::vector<uint8_t>(in.begin(), in.begin() + 2);
            };
            e.run_plain = [](const Program& p, std::span<const uint8_t> in, uint64_t seed) {
                Rng rng = make_rng(seed, 0);
                BusBytesDraws d = bus_bytes_draw(rng);
                MachineState init = make_initial_state(p);
                bus_bytes_bind(init, in, d);
                MachineState fin = run(p, init).final_state;
                return std::vector<uint8_t>{
                    static_cast<uint8_t>(fin.mem.bytes[0x300 - fin.mem.base] ^ d.m),
                    static_cast<uint8_t>(fin.mem.bytes[0x400 - fin.mem.base] ^ d.m)};
            };
        } else if (b == "store-latch") {
            e.binding = [](MachineState& s, std::span<const uint8_t> in, Rng& rng) {
                store_latch_bind(s, in, store_latch_draw(rng));
            };
            e.reference = [](std::span<const uint8_t> in) {
                return std::vector<uint8_t>(in.begin() + 4, in.begin() + 8);
            };
            e.run_plain = [](const Program& p, std::span<const uint8_t> in, uint64_t seed) {
                Rng rng = make_rng(seed, 0);
                StoreLatchDraws d = store_latch_draw(rng);
                MachineState init = make_initial_state(p);
                store_latch_bind(init, in, d);
                MachineState fin = run(p, init).final_state;
                std::vector<uint8_t> out(4);
                // out cell holds r1init ^ (z ^ m); strip both masks
                put_word(out, 0, peek_word(fin, 0x304) ^ d.r1init ^ d.m);
                return out;
            };
        } else if (b == "masked-and") {
            e.binding = [](MachineState& s, std::span<const uint8_t> in, Rng& rng) {
                masked_and_bind(s, in, masked_and_draw(rng));
            };
            e.reference = [](std::span<const uint8_t> in) {
                std::vector<uint8_t> out(4);
                put_word(out, 0, word_at(in, 0) & word_at(in, 4));
                return out;
            };
            e.run_plain = [](const Program& p, std::span<const uint8_t> in, uint64_t seed) {
                Rng rng = make_rng(seed, 0);
                MaskedAndDraws d = masked_and_draw(rng);
                MachineState init = make_initial_state(p);
                masked_and_bind(init, in, d);
                MachineState fin = run(p, init).final_state;
                std::vector<uint8_t> out(4);
                put_word(out, 0, peek_word(fin, 0x400) ^ peek_word(fin, 0x404));
                return out;
            };
        } else if (b == "quarter-round") {
            e.binding = [](MachineState& s, std::span<const uint8_t> in, Rng& rng) {
                quarter_bind(s, in, quarter_draw(rng));
            };
            e.reference = [](std::span<const uint8_t> in) {
                // out0 = a + b; out1 = zext(e0) ^ rot16(d)
                std::vector<uint8_t> out(8);
                put_word(out, 0, word_at(in, 0) + word_at(in, 4));
                put_word(out, 4, static_cast<uint32_t>(in[12]) ^ rotr(word_at(in, 8), 16));
                return out;
            };
            e.run_plain = [](const Program& p, std::span<const uint8_t> in, uint64_t seed) {
                Rng rng = make_rng(seed, 0);
                QuarterDraws d = quarter_draw(rng);
                MachineState init = make_initial_state(p);
                quarter_bind(init, in, d);
                MachineState fin = run(p, init).final_state;
                uint32_t mhh = (static_cast<uint32_t>(d.mh) << 16) | d.mh;
                std::vector<uint8_t> out(8);
                // out0 = (a+ma)+(b+mb): subtract the arithmetic masks;
                // out1 = zext(e0^me) ^ rot16(d)^mhh: strip both boolean masks
                // (rot16 leaves the halfword-replicated mask in place)
                put_word(out, 0, peek_word(fin, 0x340) - d.ma - d.mb);
                put_word(out, 4, peek_word(fin, 0x344) ^ static_cast<uint32_t>(d.me) ^ mhh);
                return out;
            };
        } else if (b == "null-mix") {
            e.binding = [](MachineState& s, std::span<const uint8_t> in, Rng& rng) {
                null_mix_bind(s, in, null_mix_draw(rng));
            };
            e.reference = [](std::span<const uint8_t> in) {
                std::vector<uint8_t> out(8);
                put_word(out, 0, word_at(in, 0) ^ word_at(in, 4));
                put_word(out, 4, word_at(in, 4));
                return out;
            };
            e.run_plain = [](const Program& p, std::span<const uint8_t> in, uint64_t seed) {
                Rng rng = make_rng(seed, 0);
                NullMixDraws d = null_mix_draw(rng);
                MachineState init = make_initial_state(p);
                null_mix_bind(init, in, d);
                MachineState fin = run(p, init).final_state;
                std::vector<uint8_t> out(8);
                put_word(out, 0, peek_word(fin, 0x340) ^ d.m1 ^ d.m2);
                put_word(out, 4, peek_word(fin, 0x344) ^ d.m2);
                return out;
            };
        } else {
            throw CorpusError("unknown binding `" + b + "` in manifest");
        }
        entries.push_back(std::move(e));
    }
    if (entries.empty()) throw CorpusError("empty corpus manifest");
    return entries;
}

const CorpusEntry& corpus_entry(const std::vector<CorpusEntry>& entries, const std::string& name) {
    for (const auto& e : entries)
        if (e.name == name) return e;
    throw CorpusError("no corpus entry named `" + name + "`");
}

} // namespace leakfix
