#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "omni/checkpoint.hpp"
#include "omni/mel.hpp"
#include "omni/rng.hpp"
#include "omni/tensor.hpp"
#include "omni/wav.hpp"
#include "testutil.hpp"

using namespace omni;

namespace {

Waveform sine(double freq, double dur, int sr = 16000, double amp = 0.5) {
    Waveform w;
    w.sample_rate = sr;
    const size_t n = static_cast<size_t>(std::llround(dur * sr));
    w.samples.resize(n);
    for (size_t i = 0; i < n; ++i)
        w.samples[i] = amp * std::sin(2.0 * M_PI * freq * static_cast<double>(i) / sr);
    return w;
}

Waveform silence(double dur, int sr = 16000) {
    Waveform w;
    w.sample_rate = sr;
    w.samples.assign(static_cast<size_t>(std::llround(dur * sr)), 0.0);
    return w;
}

Waveform noise(double dur, uint64_t seed, int sr = 16000, double amp = 0.3) {
    Rng rng(seed);
    Waveform w;
    w.sample_rate = sr;
    w.samples.resize(static_cast<size_t>(std::llround(dur * sr)));
    for (double& s : w.samples) s = amp * (2.0 * rng.uniform() - 1.0);
    return w;
}

std::string tmp_path(const std::string& name) { return "/tmp/omni_signal_" + name; }

std::vector<char> slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<char>& bytes) {
    std::ofstream os(path, std::ios::binary);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Independently computed reference: mean L1 log-Mel distance between one
// second of silence and a 0.5-amplitude 440 Hz tone, summed over the
// three default scales. Pinned after first computation; guards against
// regressions anywhere in the window/FFT/filterbank chain.
constexpr double kSilenceToneLoss = 22.847286605539235;

} // namespace

TEST_CASE("wav round trip stays within one quantization step") {
    Waveform w = noise(0.25, 77, 16000, 0.9);
    const std::string p = tmp_path("rt.wav");
    wav_write(p, w);
    Waveform r = wav_read(p);
    CHECK(r.sample_rate == 16000);
    REQUIRE(r.samples.size() == w.samples.size());
    double worst = 0.0;
    for (size_t i = 0; i < w.samples.size(); ++i)
        worst = std::max(worst, std::abs(w.samples[i] - r.samples[i]));
    CHECK(worst <= 1.0 / 32767.0);
    std::remove(p.c_str());
}

TEST_CASE("wav rejects non-RIFF input") {
    const std::string p = tmp_path("rifx.wav");
    wav_write(p, sine(440.0, 0.05));
    std::vector<char> bytes = slurp(p);
    bytes[3] = 'X'; // RIFF -> RIFX
    spit(p, bytes);
    CHECK_THROWS_WITH_AS(wav_read(p), doctest::Contains("not a RIFF/WAVE file"),
                         std::runtime_error);
    std::remove(p.c_str());
}

TEST_CASE("wav rejects float PCM and stereo") {
    const std::string p = tmp_path("fmt.wav");
    wav_write(p, sine(440.0, 0.05));
    std::vector<char> good = slurp(p);

    std::vector<char> bad = good;
    bad[20] = 3; // format tag 3 = IEEE float
    spit(p, bad);
    CHECK_THROWS_WITH_AS(wav_read(p), doctest::Contains("is not PCM"), std::runtime_error);

    bad = good;
    bad[22] = 2; // channel count
    spit(p, bad);
    CHECK_THROWS_WITH_AS(wav_read(p), doctest::Contains("mono required"), std::runtime_error);

    bad = good;
    bad.resize(bad.size() - 10); // truncate payload
    bad[4] = static_cast<char>(bad.size() - 8);
    spit(p, bad);
    CHECK_THROWS_AS(wav_read(p), std::runtime_error);
    std::remove(p.c_str());
}

TEST_CASE("wav skips unknown chunks before data") {
    Waveform w = sine(440.0, 0.05);
    const std::string p = tmp_path("list.wav");
    wav_write(p, w);
    std::vector<char> bytes = slurp(p);

    // Splice a 6-byte junk chunk (odd payload, so with pad byte) between
    // fmt and data. fmt chunk occupies bytes 12..35.
    std::vector<char> junk = {'j', 'u', 'n', 'k', 5, 0, 0, 0, 1, 2, 3, 4, 5, 0};
    bytes.insert(bytes.begin() + 36, junk.begin(), junk.end());
    const uint32_t riff_size = static_cast<uint32_t>(bytes.size() - 8);
    for (int i = 0; i < 4; ++i) bytes[4 + i] = static_cast<char>((riff_size >> (8 * i)) & 0xff);
    spit(p, bytes);

    Waveform r = wav_read(p);
    REQUIRE(r.samples.size() == w.samples.size());
    double worst = 0.0;
    for (size_t i = 0; i < w.samples.size(); ++i)
        worst = std::max(worst, std::abs(w.samples[i] - r.samples[i]));
    CHECK(worst <= 1.0 / 32767.0);
    std::remove(p.c_str());
}

TEST_CASE("mel frame count is floor(len/hop) at 100 frames per second") {
    MelSpectrogram m = mel_spectrogram(sine(440.0, 2.0));
    CHECK(m.frame_count == 200);
    CHECK(m.n_mels == 80);
    CHECK(m.sample_rate == 16000);

    CHECK(mel_spectrogram(sine(440.0, 1.0)).frame_count == 100);
    CHECK(mel_spectrogram(sine(440.0, 0.7)).frame_count == 70);

    // Non-multiple lengths floor.
    Waveform w = sine(440.0, 1.0);
    w.samples.resize(16000 + 159);
    CHECK(mel_spectrogram(w).frame_count == 100);
    w.samples.resize(16000 + 160);
    CHECK(mel_spectrogram(w).frame_count == 101);
}

TEST_CASE("stft rejects waveforms shorter than the window") {
    Waveform w = silence(0.01); // 160 samples < 400
    CHECK_THROWS_WITH_AS(stft(w, 400, 160), doctest::Contains("shorter than n_fft"),
                         std::runtime_error);
}

TEST_CASE("silence maps to the exact log power floor") {
    MelSpectrogram m = mel_spectrogram(silence(0.5));
    REQUIRE(m.values.size() == 80u * 50u);
    for (double v : m.values) CHECK(v == kLogMelFloor);
}

TEST_CASE("tone energy peaks in the mel band nearest the tone") {
    MelSpectrogram m = mel_spectrogram(sine(440.0, 1.0));
    const MelFilterbank fb = MelFilterbank::build(400, 80, 16000);

    size_t expected = 0;
    double best = 1e300;
    for (size_t b = 0; b < 80; ++b) {
        const double d = std::abs(fb.center_freq(b) - 440.0);
        if (d < best) {
            best = d;
            expected = b;
        }
    }

    // Mean log energy per band over all frames.
    size_t argmax = 0;
    double best_e = -1e300;
    for (size_t b = 0; b < 80; ++b) {
        double e = 0.0;
        for (size_t t = 0; t < m.frame_count; ++t) e += m.at(b, t);
        if (e > best_e) {
            best_e = e;
            argmax = b;
        }
    }
    CHECK(argmax == expected);
}

TEST_CASE("filterbank triangles are nonnegative with unit peaks and ordered centers") {
    const MelFilterbank fb = MelFilterbank::build(400, 80, 16000);
    REQUIRE(fb.weights.size() == 80 * fb.bins());
    for (double w : fb.weights) CHECK(w >= 0.0);
    for (size_t b = 0; b < 80; ++b) {
        double peak = 0.0;
        for (size_t k = 0; k < fb.bins(); ++k) peak = std::max(peak, fb.weight(b, k));
        CHECK(peak > 0.0);
        CHECK(peak <= 1.0 + 1e-12);
    }
    for (size_t b = 1; b < 80; ++b) CHECK(fb.center_freq(b) > fb.center_freq(b - 1));
    CHECK(fb.center_freq(79) < 8000.0);
}

TEST_CASE("istft inverts stft exactly in the interior") {
    Waveform w = noise(0.2, 5);
    Waveform r = istft(stft(w, 400, 160), w.sample_rate);
    REQUIRE(r.samples.size() == (w.samples.size() / 160) * 160);
    double worst = 0.0;
    for (size_t i = 0; i < r.samples.size(); ++i)
        worst = std::max(worst, std::abs(r.samples[i] - w.samples[i]));
    CHECK(worst < 1e-9);
}

TEST_CASE("multi-scale loss is a pseudometric over waveforms") {
    Waveform a = sine(440.0, 0.5);
    Waveform b = noise(0.5, 3);
    const auto scales = default_mel_scales();
    CHECK(multi_scale_mel_loss(a, a, scales) == 0.0);
    const double ab = multi_scale_mel_loss(a, b, scales);
    const double ba = multi_scale_mel_loss(b, a, scales);
    CHECK(ab == ba);
    CHECK(ab > 0.0);

    Waveform shorter = sine(440.0, 0.4);
    CHECK_THROWS_WITH_AS(multi_scale_mel_loss(a, shorter, scales),
                         doctest::Contains("lengths differ"), std::runtime_error);
    Waveform other_rate = sine(440.0, 0.5, 8000);
    other_rate.samples.resize(a.samples.size());
    CHECK_THROWS_WITH_AS(multi_scale_mel_loss(a, other_rate, scales),
                         doctest::Contains("sample rates differ"), std::runtime_error);
}

TEST_CASE("multi-scale loss reproduces the pinned silence-vs-tone value") {
    const double v =
        multi_scale_mel_loss(silence(1.0), sine(440.0, 1.0), default_mel_scales());
    CHECK(v == doctest::Approx(kSilenceToneLoss).epsilon(1e-9));
}

TEST_CASE("tensor multi-scale loss matches hand computation and is differentiable") {
    // 2x4 inputs, factors {1,2}: by hand,
    //   factor 1: mean |p-q| over 8 cells
    //   factor 2: mean |pool(p)-pool(q)| over 4 cells
    Tensor p = Tensor::from_data({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}, true);
    Tensor q = Tensor::from_data({2, 4}, {0, 2, 3, 4, 5, 6, 7, 4});
    const double f1 = (1.0 + 0.0 + 0.0 + 0.0 + 0.0 + 0.0 + 0.0 + 4.0) / 8.0;
    // pools: p {1.5,3.5,5.5,7.5} q {1.0,3.5,5.5,5.5}
    const double f2 = (0.5 + 0.0 + 0.0 + 2.0) / 4.0;
    Tensor loss = multi_scale_mel_loss(p, q, {1, 2});
    CHECK(loss.value() == doctest::Approx(f1 + f2).epsilon(1e-12));

    CHECK(multi_scale_mel_loss(q, q, {1, 2}).value() == 0.0);

    // Gradient against central differences, away from |.| kinks.
    Rng rng(11);
    std::vector<double> xd(24), yd(24);
    for (size_t i = 0; i < 24; ++i) {
        xd[i] = rng.normal();
        yd[i] = xd[i] + (rng.uniform() < 0.5 ? -0.7 : 0.9);
    }
    Tensor x = Tensor::from_data({3, 8}, xd, true);
    Tensor y = Tensor::from_data({3, 8}, yd);
    auto f = [&](const std::vector<Tensor>& leaves) {
        return multi_scale_mel_loss(leaves[0], y, {1, 2, 4});
    };
    std::vector<Tensor> leaves = {x};
    CHECK(testutil::max_grad_rel_err(f, leaves) < 1e-6);

    CHECK_THROWS_WITH_AS(multi_scale_mel_loss(p, q, {8}), doctest::Contains("pool factor"),
                         std::runtime_error);
}

TEST_CASE("griffin-lim keeps the spectral peak and improves with iterations") {
    Waveform tone = sine(440.0, 0.5);
    const size_t tone_bin = dominant_frequency_bin(tone, 400, 160);
    CHECK(tone_bin == 11); // 440 Hz / (16000/400) Hz per bin

    MelSpectrogram m = mel_spectrogram(tone);
    Waveform g1 = griffin_lim(m, 1);
    Waveform g32 = griffin_lim(m, 32);
    REQUIRE(g32.samples.size() == tone.samples.size());

    const size_t peak = dominant_frequency_bin(g32, 400, 160);
    CHECK(std::abs(static_cast<long>(peak) - static_cast<long>(tone_bin)) <= 1);

    const auto scales = default_mel_scales();
    const double l1 = multi_scale_mel_loss(tone, g1, scales);
    const double l32 = multi_scale_mel_loss(tone, g32, scales);
    CHECK(l32 <= l1 + 1e-12);

    // Deterministic: two runs agree bit for bit.
    Waveform again = griffin_lim(m, 32);
    CHECK(again.samples == g32.samples);
}

TEST_CASE("griffin-lim of an all-floor spectrogram is near silence") {
    MelSpectrogram m;
    m.n_mels = 80;
    m.frame_count = 40;
    m.n_fft = 400;
    m.hop_length = 160;
    m.sample_rate = 16000;
    m.values.assign(80 * 40, kLogMelFloor);
    Waveform w = griffin_lim(m, 4);
    double rms = 0.0;
    for (double s : w.samples) rms += s * s;
    rms = std::sqrt(rms / static_cast<double>(w.samples.size()));
    CHECK(rms < 1e-3);
    CHECK_THROWS_WITH_AS(griffin_lim(m, 0), doctest::Contains("at least 1"), std::runtime_error);
}

TEST_CASE("mel fixtures round trip through the checkpoint format") {
    MelSpectrogram m = mel_spectrogram(sine(523.25, 0.3));
    const std::string p = tmp_path("fix.ckpt");
    save_mel_fixture(p, m);
    auto loaded = load_checkpoint_map(p);
    REQUIRE(loaded.count("mel.meta") == 1);
    REQUIRE(loaded.count("mel.values") == 1);
    const Tensor& meta = loaded.at("mel.meta");
    CHECK(meta.at(0) == 16000.0);
    CHECK(meta.at(1) == 400.0);
    CHECK(meta.at(2) == 160.0);
    CHECK(meta.at(3) == 80.0);
    const Tensor& vals = loaded.at("mel.values");
    REQUIRE(vals.shape() == std::vector<size_t>{80, m.frame_count});
    CHECK(vals.data() == m.values);
    std::remove(p.c_str());
}
