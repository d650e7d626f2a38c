#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "omni/rng.hpp"
#include "omni/wav.hpp"

namespace omni {

// Sentence-segmented text. The sentences are an exact partition: their
// concatenation reproduces the source text byte for byte.
struct Document {
    std::string id;
    std::vector<std::string> sentences;
    std::string source;

    std::string joined() const;
};

// Splits after terminal punctuation (. ! ? and their fullwidth forms)
// when whitespace or the end of input follows; the punctuation and the
// whitespace run stay with the sentence they close.
Document segment_sentences(const std::string& text, std::string id = "",
                           std::string source = "");

// One synthetic speaker: a fundamental plus two formant bands and a
// speaking rate, enough to make voices distinguishable and every
// (voice, transcript) pair map to one fixed waveform.
struct VoiceProfile {
    double base_pitch_hz = 120.0;
    double formant1_hz = 500.0;
    double formant2_hz = 1500.0;
    double rate_cps = 12.0; // characters per second
};

constexpr size_t kVoiceCount = 44;

struct VoiceBank {
    std::vector<VoiceProfile> voices;

    static VoiceBank default_bank(); // exactly kVoiceCount entries
    const VoiceProfile& voice(size_t id) const;
};

// Formant-stub synthesis: one pitched, enveloped segment per
// character, silence for whitespace. Pure function of its arguments.
Waveform synth_speech(const std::string& transcript, const VoiceProfile& voice,
                      int sample_rate = 16000);

struct SampleItem {
    enum class Kind { Text, Audio };
    Kind kind = Kind::Text;
    std::string text; // the span itself, or the audio transcript
    Waveform wav;     // audio only
    size_t voice_id = 0;

    static SampleItem text_span(std::string s);
    static SampleItem audio_span(Waveform w, std::string transcript, size_t voice);
};

struct CrossModalSample {
    std::string id;
    std::vector<SampleItem> items;
    std::string task_prompt;

    size_t audio_count() const;
};

// Prompt attached to audified samples.
extern const char* const kListenPrompt;

// Replaces round(n/4) sentences, chosen uniformly without replacement,
// with stub speech in a seeded voice. The transcript of every audio
// span is exactly the sentence it replaced.
CrossModalSample audify_quarter(const Document& doc, const VoiceBank& bank, uint64_t seed);

// Stable per-document stream derived from the run seed and the id, so
// shards can process documents in any order.
uint64_t document_seed(uint64_t global_seed, const std::string& doc_id);

// Frame timestamps in seconds: 1/fps spacing from zero while the count
// fits, otherwise max_frames timestamps spread evenly over the clip.
std::vector<double> video_frame_sample(double duration_s, double fps = 1.0,
                                       size_t max_frames = 32);

// Aspect-preserving fit into 1120x560 (landscape) or 560x1120
// (portrait). Frames already inside the box pass through untouched;
// nothing is ever upscaled.
std::pair<size_t, size_t> frame_resize(size_t w, size_t h);

struct MixtureSpec {
    std::vector<std::pair<std::string, double>> weights;

    void validate() const; // nonnegative, sums to 1
};

// Seeded categorical stream over named sources. The source list must
// match the spec entry for entry.
class MixtureSampler {
public:
    MixtureSampler(const MixtureSpec& spec, const std::vector<std::string>& sources,
                   uint64_t seed);

    size_t next_index();
    const std::string& next(); // name of the drawn source

private:
    std::vector<std::string> sources_;
    std::vector<double> cdf_;
    Rng rng_;
};

// Manifest serialization: <dir>/manifest.jsonl plus one WAV per audio
// span. read_samples loads the waveforms back, so a write/read round
// trip preserves everything but WAV quantization.
void write_samples(const std::vector<CrossModalSample>& samples, const std::string& dir);
std::vector<CrossModalSample> read_samples(const std::string& dir);

} // namespace omni
