#pragma once

// Minimal RIFF/WAVE support: 16-bit PCM, mono.  Anything else is rejected
// loudly rather than resampled or converted.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "sitok/errors.hpp"

namespace sitok {

struct WavData {
    int sample_rate = 0;
    std::vector<double> samples;  // in [-1, 1)
};

namespace wav_detail {

inline std::uint32_t read_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
           std::uint32_t(p[3]) << 24;
}

inline std::uint16_t read_u16(const unsigned char* p) {
    return std::uint16_t(p[0]) | std::uint16_t(p[1]) << 8;
}

inline void put_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u16(std::string& s, std::uint16_t v) {
    for (int i = 0; i < 2; ++i) s.push_back(char((v >> (8 * i)) & 0xff));
}

}  // namespace wav_detail

inline WavData read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open wav file: " + path);
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
    if (raw.size() < 44 || std::memcmp(raw.data(), "RIFF", 4) != 0 ||
        std::memcmp(raw.data() + 8, "WAVE", 4) != 0)
        throw data_error("not a RIFF/WAVE file: " + path);

    WavData out;
    bool have_fmt = false;
    std::size_t pos = 12;
    while (pos + 8 <= raw.size()) {
        const char* id = reinterpret_cast<const char*>(raw.data() + pos);
        const std::uint32_t sz = wav_detail::read_u32(raw.data() + pos + 4);
        const std::size_t body = pos + 8;
        if (body + sz > raw.size()) throw data_error("truncated wav chunk in " + path);
        if (std::memcmp(id, "fmt ", 4) == 0) {
            if (sz < 16) throw data_error("short fmt chunk in " + path);
            const auto fmt = wav_detail::read_u16(raw.data() + body);
            const auto channels = wav_detail::read_u16(raw.data() + body + 2);
            const auto rate = wav_detail::read_u32(raw.data() + body + 4);
            const auto bits = wav_detail::read_u16(raw.data() + body + 14);
            if (fmt != 1 || bits != 16)
                throw data_error(path + ": only 16-bit PCM supported");
            if (channels != 1) throw data_error(path + ": only mono supported");
            out.sample_rate = int(rate);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            if (!have_fmt) throw data_error(path + ": data chunk before fmt");
            out.samples.reserve(sz / 2);
            for (std::size_t i = 0; i + 1 < sz; i += 2) {
                const std::int16_t v =
                    std::int16_t(wav_detail::read_u16(raw.data() + body + i));
                out.samples.push_back(double(v) / 32768.0);
            }
            return out;
        }
        pos = body + sz + (sz & 1);  // chunks are word-aligned
    }
    throw data_error(path + ": no data chunk");
}

inline void write_wav(const std::string& path, const std::vector<double>& samples,
                      int sample_rate) {
    std::string body;
    body.reserve(samples.size() * 2 + 44);
    for (double s : samples) {
        double clamped = s < -1.0 ? -1.0 : (s > 32767.0 / 32768.0 ? 32767.0 / 32768.0 : s);
        const auto v = std::int16_t(std::lround(clamped * 32768.0));
        wav_detail::put_u16(body, std::uint16_t(v));
    }
    std::string head;
    head += "RIFF";
    wav_detail::put_u32(head, std::uint32_t(36 + body.size()));
    head += "WAVEfmt ";
    wav_detail::put_u32(head, 16);
    wav_detail::put_u16(head, 1);  // PCM
    wav_detail::put_u16(head, 1);  // mono
    wav_detail::put_u32(head, std::uint32_t(sample_rate));
    wav_detail::put_u32(head, std::uint32_t(sample_rate * 2));
    wav_detail::put_u16(head, 2);
    wav_detail::put_u16(head, 16);
    head += "data";
    wav_detail::put_u32(head, std::uint32_t(body.size()));

    std::ofstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot write wav file: " + path);
    f.write(head.data(), std::streamsize(head.size()));
    f.write(body.data(), std::streamsize(body.size()));
    if (!f) throw data_error("short write to " + path);
}

}  // namespace sitok
