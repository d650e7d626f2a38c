#include "omni/wav.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace omni {

namespace {

[[noreturn]] void parse_fail(const std::string& what) {
    throw std::runtime_error("wav: " + what);
}

uint32_t rd_u32(std::istream& is, const char* chunk) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) parse_fail(std::string(chunk) + ": chunk truncated");
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint16_t rd_u16(std::istream& is, const char* chunk) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    if (!is) parse_fail(std::string(chunk) + ": chunk truncated");
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

void wr_u32(std::ostream& os, uint32_t v) {
    char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                 static_cast<char>(v >> 24)};
    os.write(b, 4);
}

void wr_u16(std::ostream& os, uint16_t v) {
    char b[2] = {static_cast<char>(v), static_cast<char>(v >> 8)};
    os.write(b, 2);
}

} // namespace

Waveform wav_read(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) parse_fail("cannot open " + path);

    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "RIFF", 4) != 0) parse_fail("not a RIFF/WAVE file");
    rd_u32(is, "RIFF");
    char wave[4];
    is.read(wave, 4);
    if (!is || std::memcmp(wave, "WAVE", 4) != 0) parse_fail("not a RIFF/WAVE file");

    Waveform w;
    bool have_fmt = false;
    while (true) {
        char id[4];
        is.read(id, 4);
        if (!is) {
            if (have_fmt) parse_fail("data: chunk missing");
            parse_fail("fmt : chunk missing");
        }
        uint32_t chunk_size = rd_u32(is, "chunk header");
        if (std::memcmp(id, "fmt ", 4) == 0) {
            uint16_t format = rd_u16(is, "fmt ");
            uint16_t channels = rd_u16(is, "fmt ");
            uint32_t rate = rd_u32(is, "fmt ");
            rd_u32(is, "fmt "); // byte rate
            rd_u16(is, "fmt "); // block align
            uint16_t bits = rd_u16(is, "fmt ");
            if (format != 1)
                parse_fail("fmt : audio format " + std::to_string(format) + " is not PCM");
            if (channels != 1)
                parse_fail("fmt : " + std::to_string(channels) + " channels, mono required");
            if (bits != 16)
                parse_fail("fmt : " + std::to_string(bits) + "-bit samples, 16-bit required");
            w.sample_rate = static_cast<int>(rate);
            if (chunk_size > 16) is.seekg(chunk_size - 16, std::ios::cur);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            if (!have_fmt) parse_fail("fmt : chunk missing before data");
            size_t n = chunk_size / 2;
            w.samples.resize(n);
            for (size_t i = 0; i < n; ++i) {
                uint16_t u = rd_u16(is, "data");
                int16_t s;
                std::memcpy(&s, &u, 2);
                w.samples[i] = static_cast<double>(s) / 32767.0;
            }
            return w;
        } else {
            // skip unknown chunk (word-aligned)
            is.seekg(chunk_size + (chunk_size & 1), std::ios::cur);
            if (!is) parse_fail(std::string(id, 4) + ": chunk truncated");
        }
    }
}

void wav_write(const std::string& path, const Waveform& w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("wav: cannot open " + path + " for writing");
    uint32_t data_bytes = static_cast<uint32_t>(w.samples.size() * 2);
    os.write("RIFF", 4);
    wr_u32(os, 36 + data_bytes);
    os.write("WAVE", 4);
    os.write("fmt ", 4);
    wr_u32(os, 16);
    wr_u16(os, 1); // PCM
    wr_u16(os, 1); // mono
    wr_u32(os, static_cast<uint32_t>(w.sample_rate));
    wr_u32(os, static_cast<uint32_t>(w.sample_rate * 2));
    wr_u16(os, 2);
    wr_u16(os, 16);
    os.write("data", 4);
    wr_u32(os, data_bytes);
    for (double x : w.samples) {
        double c = std::clamp(x, -1.0, 1.0);
        int16_t s = static_cast<int16_t>(std::lround(c * 32767.0));
        wr_u16(os, static_cast<uint16_t>(s));
    }
    if (!os) throw std::runtime_error("wav: write failed for " + path);
}

} // namespace omni
