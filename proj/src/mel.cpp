#include "omni/mel.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <stdexcept>

#include "omni/checkpoint.hpp"

namespace omni {

namespace {

constexpr double kPi = 3.14159265358979323846;

bool is_pow2(size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 transform. inverse=true applies the 1/n
// scaling as well.
void fft_radix2(std::vector<double>& re, std::vector<double>& im, bool inverse) {
    const size_t n = re.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = (inverse ? 2.0 : -2.0) * kPi / static_cast<double>(len);
        const double wr = std::cos(ang), wi = std::sin(ang);
        for (size_t i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (size_t k = 0; k < len / 2; ++k) {
                const size_t a = i + k, b = i + k + len / 2;
                const double tr = re[b] * cr - im[b] * ci;
                const double ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                const double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
    if (inverse) {
        const double s = 1.0 / static_cast<double>(n);
        for (size_t i = 0; i < n; ++i) {
            re[i] *= s;
            im[i] *= s;
        }
    }
}

// Cached cos/sin tables for direct transforms at non-power-of-two sizes
// (the 400-sample analysis window in particular).
struct DftTables {
    size_t n = 0;
    size_t half = 0;
    std::vector<double> cosv; // [half+1][n]
    std::vector<double> sinv;
};

const DftTables& dft_tables(size_t n) {
    static std::map<size_t, DftTables> cache;
    static std::mutex mu;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(n);
    if (it != cache.end()) return it->second;
    DftTables t;
    t.n = n;
    t.half = n / 2;
    t.cosv.resize((t.half + 1) * n);
    t.sinv.resize((t.half + 1) * n);
    for (size_t k = 0; k <= t.half; ++k)
        for (size_t i = 0; i < n; ++i) {
            const double ang = 2.0 * kPi * static_cast<double>(k) * static_cast<double>(i) /
                               static_cast<double>(n);
            t.cosv[k * n + i] = std::cos(ang);
            t.sinv[k * n + i] = std::sin(ang);
        }
    return cache.emplace(n, std::move(t)).first->second;
}

// Real forward transform: frame (length n) to bins 0..n/2.
void rdft(const std::vector<double>& frame, size_t n, double* out_re, double* out_im) {
    const size_t half = n / 2;
    if (is_pow2(n)) {
        std::vector<double> re(frame.begin(), frame.end());
        std::vector<double> im(n, 0.0);
        fft_radix2(re, im, false);
        for (size_t k = 0; k <= half; ++k) {
            out_re[k] = re[k];
            out_im[k] = im[k];
        }
        return;
    }
    const DftTables& t = dft_tables(n);
    for (size_t k = 0; k <= half; ++k) {
        double sr = 0.0, si = 0.0;
        const double* c = &t.cosv[k * n];
        const double* s = &t.sinv[k * n];
        for (size_t i = 0; i < n; ++i) {
            sr += frame[i] * c[i];
            si -= frame[i] * s[i];
        }
        out_re[k] = sr;
        out_im[k] = si;
    }
}

// Inverse of rdft assuming a conjugate-symmetric full spectrum.
void irdft(const double* in_re, const double* in_im, size_t n, std::vector<double>& frame) {
    const size_t half = n / 2;
    frame.assign(n, 0.0);
    if (is_pow2(n)) {
        std::vector<double> re(n, 0.0), im(n, 0.0);
        for (size_t k = 0; k <= half; ++k) {
            re[k] = in_re[k];
            im[k] = in_im[k];
        }
        for (size_t k = half + 1; k < n; ++k) {
            re[k] = in_re[n - k];
            im[k] = -in_im[n - k];
        }
        fft_radix2(re, im, true);
        for (size_t i = 0; i < n; ++i) frame[i] = re[i];
        return;
    }
    const DftTables& t = dft_tables(n);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (size_t k = 0; k <= half; ++k) {
        // k and n-k are conjugate pairs with equal real contribution, so
        // interior bins count twice.
        double w = 2.0;
        if (k == 0 || (n % 2 == 0 && k == half)) w = 1.0;
        const double* c = &t.cosv[k * n];
        const double* s = &t.sinv[k * n];
        const double re = in_re[k] * w * inv_n;
        const double im = in_im[k] * w * inv_n;
        for (size_t i = 0; i < n; ++i) frame[i] += re * c[i] - im * s[i];
    }
}

std::vector<double> hann_periodic(size_t n) {
    std::vector<double> w(n);
    for (size_t i = 0; i < n; ++i)
        w[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(n));
    return w;
}

// Reflected sample for a virtual padded signal of half-window margin on
// each side.
double reflect_sample(const std::vector<double>& x, long idx) {
    const long n = static_cast<long>(x.size());
    if (idx < 0) idx = -idx;
    if (idx >= n) idx = 2 * n - 2 - idx;
    return x[static_cast<size_t>(idx)];
}

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

} // namespace

MelFilterbank MelFilterbank::build(size_t n_fft, size_t n_mels, int sample_rate) {
    if (n_fft < 2 || n_mels == 0 || sample_rate <= 0)
        throw std::runtime_error("MelFilterbank::build: invalid parameters");
    MelFilterbank fb;
    fb.n_fft = n_fft;
    fb.n_mels = n_mels;
    fb.sample_rate = sample_rate;
    const size_t bins = n_fft / 2 + 1;
    fb.weights.assign(n_mels * bins, 0.0);

    const double mel_max = hz_to_mel(sample_rate / 2.0);
    std::vector<double> pts(n_mels + 2);
    for (size_t i = 0; i < pts.size(); ++i)
        pts[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(n_mels + 1));

    const double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(n_fft);
    for (size_t m = 0; m < n_mels; ++m) {
        const double lo = pts[m], mid = pts[m + 1], hi = pts[m + 2];
        for (size_t k = 0; k < bins; ++k) {
            const double f = bin_hz * static_cast<double>(k);
            const double up = (f - lo) / (mid - lo);
            const double down = (hi - f) / (hi - mid);
            fb.weights[m * bins + k] = std::max(0.0, std::min(up, down));
        }
    }
    return fb;
}

double MelFilterbank::center_freq(size_t mel) const {
    const double mel_max = hz_to_mel(sample_rate / 2.0);
    return mel_to_hz(mel_max * static_cast<double>(mel + 1) / static_cast<double>(n_mels + 1));
}

Spectrogram stft(const Waveform& w, size_t n_fft, size_t hop) {
    if (hop == 0) throw std::runtime_error("stft: hop must be positive");
    if (w.samples.size() < n_fft)
        throw std::runtime_error("stft: waveform shorter than n_fft (" +
                                 std::to_string(w.samples.size()) + " < " +
                                 std::to_string(n_fft) + " samples)");
    const size_t frames = w.samples.size() / hop;
    const size_t bins = n_fft / 2 + 1;
    const long pad = static_cast<long>(n_fft / 2);
    const std::vector<double> win = hann_periodic(n_fft);

    Spectrogram s;
    s.n_fft = n_fft;
    s.hop_length = hop;
    s.frame_count = frames;
    s.re.assign(bins * frames, 0.0);
    s.im.assign(bins * frames, 0.0);

    std::vector<double> frame(n_fft);
    std::vector<double> fre(bins), fim(bins);
    for (size_t t = 0; t < frames; ++t) {
        const long start = static_cast<long>(t * hop) - pad;
        for (size_t i = 0; i < n_fft; ++i)
            frame[i] = reflect_sample(w.samples, start + static_cast<long>(i)) * win[i];
        rdft(frame, n_fft, fre.data(), fim.data());
        for (size_t k = 0; k < bins; ++k) {
            s.re[k * frames + t] = fre[k];
            s.im[k * frames + t] = fim[k];
        }
    }
    return s;
}

Waveform istft(const Spectrogram& s, int sample_rate) {
    const size_t n_fft = s.n_fft, hop = s.hop_length, frames = s.frame_count;
    const size_t bins = n_fft / 2 + 1;
    if (frames == 0) throw std::runtime_error("istft: empty spectrogram");
    const std::vector<double> win = hann_periodic(n_fft);
    const size_t padded_len = (frames - 1) * hop + n_fft;
    std::vector<double> acc(padded_len, 0.0), den(padded_len, 0.0);

    std::vector<double> fre(bins), fim(bins), frame;
    for (size_t t = 0; t < frames; ++t) {
        for (size_t k = 0; k < bins; ++k) {
            fre[k] = s.re[k * frames + t];
            fim[k] = s.im[k * frames + t];
        }
        irdft(fre.data(), fim.data(), n_fft, frame);
        const size_t off = t * hop;
        for (size_t i = 0; i < n_fft; ++i) {
            acc[off + i] += frame[i] * win[i];
            den[off + i] += win[i] * win[i];
        }
    }

    Waveform out;
    out.sample_rate = sample_rate;
    out.samples.assign(frames * hop, 0.0);
    const size_t pad = n_fft / 2;
    for (size_t i = 0; i < out.samples.size(); ++i) {
        const size_t j = i + pad;
        if (j < padded_len && den[j] > 1e-8) out.samples[i] = acc[j] / den[j];
    }
    return out;
}

MelSpectrogram mel_spectrogram(const Waveform& w, size_t n_fft, size_t hop, size_t n_mels) {
    const Spectrogram s = stft(w, n_fft, hop);
    const MelFilterbank fb = MelFilterbank::build(n_fft, n_mels, w.sample_rate);
    const size_t bins = n_fft / 2 + 1;
    const size_t frames = s.frame_count;

    MelSpectrogram m;
    m.n_mels = n_mels;
    m.frame_count = frames;
    m.n_fft = n_fft;
    m.hop_length = hop;
    m.sample_rate = w.sample_rate;
    m.values.assign(n_mels * frames, 0.0);

    std::vector<double> power(bins);
    for (size_t t = 0; t < frames; ++t) {
        for (size_t k = 0; k < bins; ++k) {
            const double re = s.re[k * frames + t], im = s.im[k * frames + t];
            power[k] = re * re + im * im;
        }
        for (size_t mel = 0; mel < n_mels; ++mel) {
            double e = 0.0;
            const double* row = &fb.weights[mel * bins];
            for (size_t k = 0; k < bins; ++k) e += row[k] * power[k];
            m.values[mel * frames + t] = std::log(std::max(e, kMelPowerFloor));
        }
    }
    return m;
}

double multi_scale_mel_loss(const Waveform& a, const Waveform& b,
                            const std::vector<std::pair<size_t, size_t>>& scales) {
    if (a.sample_rate != b.sample_rate)
        throw std::runtime_error("multi_scale_mel_loss: sample rates differ");
    if (a.samples.size() != b.samples.size())
        throw std::runtime_error("multi_scale_mel_loss: lengths differ (" +
                                 std::to_string(a.samples.size()) + " vs " +
                                 std::to_string(b.samples.size()) + " samples)");
    if (scales.empty()) throw std::runtime_error("multi_scale_mel_loss: no scales");
    double total = 0.0;
    for (const auto& [n_fft, hop] : scales) {
        const MelSpectrogram ma = mel_spectrogram(a, n_fft, hop);
        const MelSpectrogram mb = mel_spectrogram(b, n_fft, hop);
        double acc = 0.0;
        for (size_t i = 0; i < ma.values.size(); ++i)
            acc += std::abs(ma.values[i] - mb.values[i]);
        total += acc / static_cast<double>(ma.values.size());
    }
    return total;
}

Tensor multi_scale_mel_loss(const Tensor& pred_mel, const Tensor& target_mel,
                            const std::vector<size_t>& pool_factors) {
    if (pool_factors.empty())
        throw std::runtime_error("multi_scale_mel_loss: no pool factors");
    Tensor total = Tensor::scalar(0.0);
    for (size_t f : pool_factors) {
        if (f == 0 || pred_mel.cols() / f == 0)
            throw std::runtime_error("multi_scale_mel_loss: pool factor " + std::to_string(f) +
                                     " exceeds frame count " + std::to_string(pred_mel.cols()));
        Tensor p = f == 1 ? pred_mel : mean_pool1d(pred_mel, f);
        Tensor q = f == 1 ? target_mel : mean_pool1d(target_mel, f);
        total = add(total, l1_loss(p, q));
    }
    return total;
}

Waveform griffin_lim(const MelSpectrogram& m, size_t iters) {
    if (iters == 0) throw std::runtime_error("griffin_lim: iters must be at least 1");
    if (m.n_fft == 0 || m.hop_length == 0 || m.frame_count == 0)
        throw std::runtime_error("griffin_lim: incomplete spectrogram header");
    const MelFilterbank fb = MelFilterbank::build(m.n_fft, m.n_mels, m.sample_rate);
    const size_t bins = m.n_fft / 2 + 1;
    const size_t frames = m.frame_count;

    std::vector<double> colsum(bins, 0.0);
    for (size_t mel = 0; mel < m.n_mels; ++mel)
        for (size_t k = 0; k < bins; ++k) colsum[k] += fb.weights[mel * bins + k];

    // Target linear magnitudes from the normalized filterbank transpose.
    std::vector<double> mag(bins * frames, 0.0);
    for (size_t t = 0; t < frames; ++t) {
        for (size_t k = 0; k < bins; ++k) {
            if (colsum[k] <= 1e-12) continue;
            double p = 0.0;
            for (size_t mel = 0; mel < m.n_mels; ++mel)
                p += fb.weights[mel * bins + k] * std::exp(m.at(mel, t));
            mag[k * frames + t] = std::sqrt(p / colsum[k]);
        }
    }

    Spectrogram s;
    s.n_fft = m.n_fft;
    s.hop_length = m.hop_length;
    s.frame_count = frames;
    s.re = mag;
    s.im.assign(mag.size(), 0.0);

    Waveform x = istft(s, m.sample_rate);
    for (size_t it = 1; it < iters; ++it) {
        Spectrogram est = stft(x, m.n_fft, m.hop_length);
        for (size_t i = 0; i < mag.size(); ++i) {
            const double amp = std::hypot(est.re[i], est.im[i]);
            if (amp > 1e-12) {
                est.re[i] *= mag[i] / amp;
                est.im[i] *= mag[i] / amp;
            } else {
                est.re[i] = mag[i];
                est.im[i] = 0.0;
            }
        }
        x = istft(est, m.sample_rate);
    }
    return x;
}

size_t dominant_frequency_bin(const Waveform& w, size_t n_fft, size_t hop) {
    const Spectrogram s = stft(w, n_fft, hop);
    const size_t bins = n_fft / 2 + 1;
    size_t best = 0;
    double best_p = -1.0;
    for (size_t k = 0; k < bins; ++k) {
        double p = 0.0;
        for (size_t t = 0; t < s.frame_count; ++t) {
            const double re = s.re[k * s.frame_count + t], im = s.im[k * s.frame_count + t];
            p += re * re + im * im;
        }
        if (p > best_p) {
            best_p = p;
            best = k;
        }
    }
    return best;
}

Tensor mel_to_tensor(const MelSpectrogram& m) {
    return Tensor::from_data({m.n_mels, m.frame_count}, m.values);
}

MelSpectrogram mel_from_tensor(const Tensor& t, size_t n_fft, size_t hop, int sample_rate) {
    MelSpectrogram m;
    m.n_mels = t.rows();
    m.frame_count = t.cols();
    m.n_fft = n_fft;
    m.hop_length = hop;
    m.sample_rate = sample_rate;
    m.values = t.data();
    return m;
}

void save_mel_fixture(const std::string& path, const MelSpectrogram& m) {
    std::vector<double> meta = {static_cast<double>(m.sample_rate), static_cast<double>(m.n_fft),
                                static_cast<double>(m.hop_length), static_cast<double>(m.n_mels)};
    save_checkpoint(path, {{"mel.meta", Tensor::from_data({4}, meta)},
                           {"mel.values", mel_to_tensor(m)}});
}

} // namespace omni
