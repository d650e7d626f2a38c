#pragma once

#include <string>
#include <vector>

namespace omni {

// Time-domain audio. The tokenizer consumes 16 kHz; the flow decoder's
// paper preset targets 24 kHz.
struct Waveform {
    int sample_rate = 16000;
    std::vector<double> samples; // [-1, 1]

    double duration() const {
        return static_cast<double>(samples.size()) / sample_rate;
    }
};

// RIFF/WAVE, PCM 16-bit, mono only. Samples are scaled symmetrically by
// 32767, so a write/read round trip stays within one quantization step.
Waveform wav_read(const std::string& path);
void wav_write(const std::string& path, const Waveform& w);

} // namespace omni
