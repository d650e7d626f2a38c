#include "omni/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "omni/hash.hpp"

namespace omni {

namespace {

constexpr double kPi = 3.14159265358979323846;

bool ascii_space(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

// Byte length of a sentence terminator starting at i, or 0. Covers
// . ! ? and the fullwidth forms U+3002, U+FF01, U+FF1F.
size_t terminal_len(const std::string& t, size_t i) {
    const char c = t[i];
    if (c == '.' || c == '!' || c == '?') return 1;
    if (i + 3 <= t.size()) {
        const auto a = static_cast<unsigned char>(t[i]);
        const auto b = static_cast<unsigned char>(t[i + 1]);
        const auto d = static_cast<unsigned char>(t[i + 2]);
        if (a == 0xE3 && b == 0x80 && d == 0x82) return 3;
        if (a == 0xEF && b == 0xBC && (d == 0x81 || d == 0x9F)) return 3;
    }
    return 0;
}

} // namespace

std::string Document::joined() const {
    std::string out;
    for (const std::string& s : sentences) out += s;
    return out;
}

Document segment_sentences(const std::string& text, std::string id, std::string source) {
    if (text.empty()) throw std::invalid_argument("segment: empty text");
    Document doc;
    doc.id = std::move(id);
    doc.source = std::move(source);
    size_t start = 0;
    size_t i = 0;
    while (i < text.size()) {
        const size_t tl = terminal_len(text, i);
        if (tl == 0) {
            ++i;
            continue;
        }
        i += tl;
        // Interior punctuation ("3.14") does not close a sentence.
        if (i < text.size() && !ascii_space(text[i])) continue;
        while (i < text.size() && ascii_space(text[i])) ++i;
        doc.sentences.push_back(text.substr(start, i - start));
        start = i;
    }
    if (start < text.size()) doc.sentences.push_back(text.substr(start));
    return doc;
}

VoiceBank VoiceBank::default_bank() {
    VoiceBank b;
    b.voices.reserve(kVoiceCount);
    for (size_t v = 0; v < kVoiceCount; ++v) {
        VoiceProfile p;
        p.base_pitch_hz = 90.0 + 5.5 * static_cast<double>(v);
        p.formant1_hz = 380.0 + 16.0 * static_cast<double>(v);
        p.formant2_hz = 1350.0 + 28.0 * static_cast<double>(v);
        p.rate_cps = 10.0 + static_cast<double>(v % 7);
        b.voices.push_back(p);
    }
    return b;
}

const VoiceProfile& VoiceBank::voice(size_t id) const {
    if (id >= voices.size())
        throw std::out_of_range("voice " + std::to_string(id) + " of a " +
                                std::to_string(voices.size()) + "-voice bank");
    return voices[id];
}

Waveform synth_speech(const std::string& transcript, const VoiceProfile& voice,
                      int sample_rate) {
    Waveform w;
    w.sample_rate = sample_rate;
    const auto seg = static_cast<size_t>(
        std::max<long long>(1, std::llround(sample_rate / voice.rate_cps)));
    w.samples.reserve(seg * transcript.size());
    for (const char ch : transcript) {
        const auto c = static_cast<unsigned char>(ch);
        if (ascii_space(ch)) {
            w.samples.insert(w.samples.end(), seg, 0.0);
            continue;
        }
        // Chromatic pitch inflection around the base, formants nudged by
        // character class; the sine mix stays inside [-0.85, 0.85].
        const double f0 = voice.base_pitch_hz * std::pow(2.0, ((c % 12) - 6) / 24.0);
        const double f1 = voice.formant1_hz + 25.0 * (c % 7);
        const double f2 = voice.formant2_hz + 40.0 * (c % 11);
        for (size_t k = 0; k < seg; ++k) {
            const double t = static_cast<double>(k) / sample_rate;
            const double env = std::sin(kPi * (static_cast<double>(k) + 0.5) / seg);
            w.samples.push_back(env * (0.45 * std::sin(2.0 * kPi * f0 * t) +
                                       0.25 * std::sin(2.0 * kPi * f1 * t) +
                                       0.15 * std::sin(2.0 * kPi * f2 * t)));
        }
    }
    return w;
}

SampleItem SampleItem::text_span(std::string s) {
    SampleItem it;
    it.kind = Kind::Text;
    it.text = std::move(s);
    return it;
}

SampleItem SampleItem::audio_span(Waveform w, std::string transcript, size_t voice) {
    SampleItem it;
    it.kind = Kind::Audio;
    it.wav = std::move(w);
    it.text = std::move(transcript);
    it.voice_id = voice;
    return it;
}

size_t CrossModalSample::audio_count() const {
    size_t n = 0;
    for (const SampleItem& it : items)
        if (it.kind == SampleItem::Kind::Audio) ++n;
    return n;
}

const char* const kListenPrompt =
    "Please listen to the following audio describing the content of the image. "
    "Your task is to supplement additional information by combining the audio "
    "with the image upon completion of listening";

CrossModalSample audify_quarter(const Document& doc, const VoiceBank& bank, uint64_t seed) {
    const size_t n = doc.sentences.size();
    if (n == 0) throw std::invalid_argument("audify: document has no sentences");
    const auto k = static_cast<size_t>(std::llround(static_cast<double>(n) / 4.0));

    Rng rng(seed);
    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t{0});
    for (size_t i = 0; i < k; ++i)
        std::swap(idx[i], idx[i + rng.below(n - i)]);
    std::vector<char> audify(n, 0);
    for (size_t i = 0; i < k; ++i) audify[idx[i]] = 1;

    CrossModalSample s;
    s.id = doc.id;
    s.task_prompt = kListenPrompt;
    s.items.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        if (!audify[i]) {
            s.items.push_back(SampleItem::text_span(doc.sentences[i]));
            continue;
        }
        const size_t vid = rng.below(bank.voices.size());
        s.items.push_back(SampleItem::audio_span(synth_speech(doc.sentences[i], bank.voice(vid)),
                                                 doc.sentences[i], vid));
    }
    return s;
}

uint64_t document_seed(uint64_t global_seed, const std::string& doc_id) {
    return Rng(global_seed ^ fnv1a64(doc_id)).next_u64();
}

std::vector<double> video_frame_sample(double duration_s, double fps, size_t max_frames) {
    if (!(duration_s > 0.0)) throw std::invalid_argument("video duration must be positive");
    if (!(fps > 0.0) || max_frames == 0)
        throw std::invalid_argument("fps and max_frames must be positive");
    std::vector<double> out;
    const double natural = std::ceil(duration_s * fps);
    if (natural <= static_cast<double>(max_frames)) {
        const auto n = static_cast<size_t>(natural);
        out.reserve(n);
        for (size_t i = 0; i < n; ++i) out.push_back(static_cast<double>(i) / fps);
    } else {
        out.reserve(max_frames);
        for (size_t i = 0; i < max_frames; ++i)
            out.push_back(duration_s * static_cast<double>(i) / static_cast<double>(max_frames));
    }
    return out;
}

std::pair<size_t, size_t> frame_resize(size_t w, size_t h) {
    if (w == 0 || h == 0) throw std::invalid_argument("frame sides must be positive");
    const double bw = w >= h ? 1120.0 : 560.0;
    const double bh = w >= h ? 560.0 : 1120.0;
    const double s = std::min({1.0, bw / static_cast<double>(w), bh / static_cast<double>(h)});
    return {static_cast<size_t>(std::llround(w * s)), static_cast<size_t>(std::llround(h * s))};
}

void MixtureSpec::validate() const {
    if (weights.empty()) throw std::invalid_argument("mixture: no sources");
    double sum = 0.0;
    for (const auto& [name, w] : weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("mixture: negative weight for " + name);
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw std::invalid_argument("mixture: weights sum to " + std::to_string(sum) +
                                    ", expected 1");
}

MixtureSampler::MixtureSampler(const MixtureSpec& spec, const std::vector<std::string>& sources,
                               uint64_t seed)
    : sources_(sources), rng_(seed) {
    spec.validate();
    if (sources.size() != spec.weights.size())
        throw std::invalid_argument("mixture: " + std::to_string(spec.weights.size()) +
                                    " weights for " + std::to_string(sources.size()) +
                                    " sources");
    double acc = 0.0;
    cdf_.reserve(sources.size());
    for (size_t i = 0; i < sources.size(); ++i) {
        if (sources[i] != spec.weights[i].first)
            throw std::invalid_argument("mixture: source '" + sources[i] +
                                        "' does not match weight entry '" +
                                        spec.weights[i].first + "'");
        acc += spec.weights[i].second;
        cdf_.push_back(acc);
    }
    cdf_.back() = 1.0;
}

size_t MixtureSampler::next_index() {
    const double u = rng_.uniform();
    for (size_t i = 0; i < cdf_.size(); ++i)
        if (u < cdf_[i]) return i;
    return cdf_.size() - 1;
}

const std::string& MixtureSampler::next() { return sources_[next_index()]; }

void write_samples(const std::vector<CrossModalSample>& samples, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    const fs::path manifest = fs::path(dir) / "manifest.jsonl";
    std::ofstream mf(manifest, std::ios::trunc);
    if (!mf) throw std::runtime_error("cannot write " + manifest.string());
    for (const CrossModalSample& s : samples) {
        nlohmann::json j;
        j["id"] = s.id;
        j["prompt"] = s.task_prompt;
        nlohmann::json items = nlohmann::json::array();
        for (size_t i = 0; i < s.items.size(); ++i) {
            const SampleItem& it = s.items[i];
            if (it.kind == SampleItem::Kind::Text) {
                items.push_back({{"t", "text"}, {"s", it.text}});
            } else {
                const std::string wav_name = s.id + "_" + std::to_string(i) + ".wav";
                wav_write((fs::path(dir) / wav_name).string(), it.wav);
                items.push_back({{"t", "audio"},
                                 {"wav", wav_name},
                                 {"transcript", it.text},
                                 {"voice", it.voice_id}});
            }
        }
        j["items"] = std::move(items);
        mf << j.dump() << '\n';
    }
}

std::vector<CrossModalSample> read_samples(const std::string& dir) {
    namespace fs = std::filesystem;
    const fs::path manifest = fs::path(dir) / "manifest.jsonl";
    std::ifstream mf(manifest);
    if (!mf) throw std::runtime_error("cannot read " + manifest.string());
    std::vector<CrossModalSample> out;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        const nlohmann::json j = nlohmann::json::parse(line);
        CrossModalSample s;
        s.id = j.at("id").get<std::string>();
        s.task_prompt = j.at("prompt").get<std::string>();
        for (const nlohmann::json& ij : j.at("items")) {
            const std::string t = ij.at("t").get<std::string>();
            if (t == "text") {
                s.items.push_back(SampleItem::text_span(ij.at("s").get<std::string>()));
            } else if (t == "audio") {
                Waveform w = wav_read((fs::path(dir) / ij.at("wav").get<std::string>()).string());
                s.items.push_back(SampleItem::audio_span(std::move(w),
                                                         ij.at("transcript").get<std::string>(),
                                                         ij.at("voice").get<size_t>()));
            } else {
                throw std::runtime_error("manifest: unknown item type '" + t + "'");
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace omni
