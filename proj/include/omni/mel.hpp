#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "omni/tensor.hpp"
#include "omni/wav.hpp"

namespace omni {

// Log-Mel energies, row-major [n_mels][frames].
//
// Analysis convention (tests depend on it): the signal is center-padded
// by n_fft/2 reflected samples on each side, windowed with a periodic
// Hann, and the trailing frame is dropped, giving exactly
// floor(len / hop) frames -- 100 frames per second at the 16 kHz /
// n_fft 400 / hop 160 defaults. Power is floored at 1e-10 before the
// natural log.
struct MelSpectrogram {
    size_t n_mels = 0;
    size_t frame_count = 0;
    size_t n_fft = 0;
    size_t hop_length = 0;
    int sample_rate = 0;
    std::vector<double> values; // [n_mels][frame_count]

    double at(size_t mel, size_t t) const { return values[mel * frame_count + t]; }
    double& at(size_t mel, size_t t) { return values[mel * frame_count + t]; }
};

constexpr double kMelPowerFloor = 1e-10;
constexpr double kLogMelFloor = -23.025850929940457; // log(1e-10)

// Triangular Mel filterbank (HTK mel scale, peak-1 triangles) over FFT
// bins 0..n_fft/2.
struct MelFilterbank {
    size_t n_fft = 0;
    size_t n_mels = 0;
    int sample_rate = 0;
    std::vector<double> weights; // [n_mels][n_fft/2+1]

    static MelFilterbank build(size_t n_fft, size_t n_mels, int sample_rate);

    size_t bins() const { return n_fft / 2 + 1; }
    double weight(size_t mel, size_t bin) const { return weights[mel * bins() + bin]; }
    // Peak frequency of filter m in Hz.
    double center_freq(size_t mel) const;
};

// Complex short-time spectrum, [n_fft/2+1][frames].
struct Spectrogram {
    size_t n_fft = 0;
    size_t hop_length = 0;
    size_t frame_count = 0;
    std::vector<double> re;
    std::vector<double> im;
};

Spectrogram stft(const Waveform& w, size_t n_fft, size_t hop);
Waveform istft(const Spectrogram& s, int sample_rate);

struct MelConfig {
    size_t n_fft = 400;
    size_t hop = 160;
    size_t n_mels = 80;
};

MelSpectrogram mel_spectrogram(const Waveform& w, size_t n_fft = 400, size_t hop = 160,
                               size_t n_mels = 80);

// Sum over (n_fft, hop) scales of the mean L1 distance between the two
// signals' log-Mel spectrograms. A pseudometric over waveforms of equal
// rate and length.
double multi_scale_mel_loss(const Waveform& a, const Waveform& b,
                            const std::vector<std::pair<size_t, size_t>>& scales);

// Differentiable Mel-domain form for predicted spectrograms: the scales
// are temporal mean-poolings of the [n_mels, T] inputs; factor 1 is the
// native resolution.
Tensor multi_scale_mel_loss(const Tensor& pred_mel, const Tensor& target_mel,
                            const std::vector<size_t>& pool_factors = {1, 2, 4});

inline std::vector<std::pair<size_t, size_t>> default_mel_scales() {
    return {{512, 128}, {1024, 256}, {2048, 512}};
}

// Phase reconstruction without a learned vocoder. Mel bins expand to
// linear bins through the transpose of the filterbank with per-bin
// normalization; phases start at zero and are refined by the classic
// analysis/synthesis loop. iters counts reconstructions, so iters=1 is
// the zero-phase inverse.
Waveform griffin_lim(const MelSpectrogram& m, size_t iters);

// Mean-power argmax bin over all frames; the spectral-peak oracle used
// by reconstruction tests.
size_t dominant_frequency_bin(const Waveform& w, size_t n_fft, size_t hop);

Tensor mel_to_tensor(const MelSpectrogram& m);
MelSpectrogram mel_from_tensor(const Tensor& t, size_t n_fft = 400, size_t hop = 160,
                               int sample_rate = 16000);

// Fixture export in the shared checkpoint tensor format.
void save_mel_fixture(const std::string& path, const MelSpectrogram& m);

} // namespace omni
