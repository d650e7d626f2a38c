#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "omni/adam.hpp"
#include "omni/mel.hpp"
#include "omni/nn.hpp"
#include "omni/rvq.hpp"
#include "omni/tensor.hpp"
#include "omni/wav.hpp"

namespace omni {

// Character vocabulary of the transcript head: a-z, space, and a
// terminator that doubles as the start symbol.
constexpr size_t kCharVocab = 28;
constexpr size_t kCharSpace = 26;
constexpr size_t kCharEos = 27;

std::vector<size_t> encode_transcript(const std::string& text);
std::string decode_transcript(const std::vector<size_t>& ids);

// Log-Mel values are affinely squashed so the power floor sits at -1
// and unit power at +1 before entering the encoder.
constexpr double kMelNormScale = 11.512925464970229;

struct AudioTokenSeq {
    std::vector<CodeFrame> frames;
    double frame_rate = 12.5; // frames per second
    double source_duration = 0.0;
};

void write_tokens(const std::string& path, const AudioTokenSeq& seq);
AudioTokenSeq read_tokens(const std::string& path);

struct CodecLosses {
    double mel_recon = 0.0;
    double commitment = 0.0; // raw squared gap, pre-weight
    double transcript_ce = 0.0;
    double total = 0.0;
};

struct CodecConfig {
    int sample_rate = 16000;
    size_t n_fft = 400;
    size_t hop = 160; // 100 Mel frames per second
    size_t mel_bins = 80;
    size_t downsample = 8; // three stride-2 stages, 12.5 token frames per second
    size_t hidden = 32;    // conv channel width
    size_t latent = 64;    // RVQ dimension
    RvqConfig rvq;         // rvq.dim forced to latent
    size_t lm_dim = 64;
    size_t lm_layers = 2;
    size_t lm_heads = 4;
    double w_mel = 1.0;
    double w_commit = 0.25;
    double w_ce = 1.0;
    double lr = 1e-3;
    double ema_decay = 0.99;
    uint64_t seed = 1234;
};

// Waveform to discrete audio tokens and back. The token rate follows
// from the front end: 100 Mel frames per second, tail cropped to a
// multiple of 8, three stride-2 stages, so a d-second clip yields
// floor(100 d / 8) token frames.
//
// Training optimizes three objectives at once: multi-scale Mel
// reconstruction through the decoder, a commitment pull between encoder
// outputs and their quantization, and transcript cross-entropy through
// a frozen character LM that only the audio-side projection can adapt
// to.
class AudioCodec {
public:
    explicit AudioCodec(const CodecConfig& cfg);

    const CodecConfig& config() const { return cfg_; }
    const RvqStack& rvq() const { return rvq_; }

    // Pre-quantization latents, [tokens, latent]. Differentiable.
    Tensor encode_latents(const Tensor& norm_mel) const;
    // Normalized Mel prediction, [mel_bins, 8 tokens]. Differentiable.
    Tensor decode_latents(const Tensor& latents) const;

    AudioTokenSeq encode(const Waveform& w) const;
    MelSpectrogram decode_mel(const AudioTokenSeq& seq) const;
    Waveform decode_wav(const AudioTokenSeq& seq, size_t griffin_lim_iters = 32) const;

    // Normalized log-Mel of a waveform, cropped to a multiple of the
    // downsample factor, as a constant [mel_bins, T] tensor.
    Tensor norm_mel(const Waveform& w) const;

    // Logits of the frozen LM over transcript positions, given audio
    // latent rows and a teacher-forced character sequence. Throws if
    // any frozen weight has been flagged trainable.
    Tensor transcript_logits(const Tensor& latents, const std::vector<size_t>& chars) const;

    CodecLosses train_step(const std::vector<std::pair<Waveform, std::string>>& batch);

    std::vector<Tensor> trainable_params() const;
    NamedTensors named_tensors() const; // codec weights plus rvq codebooks
    void save(const std::string& path) const;
    void load(const std::string& path);

    const std::vector<Tensor>& frozen_lm_params() const { return lm_params_; }
    void set_lm_trainable_for_test(bool trainable);

    double min_duration() const; // seconds needed for one token frame
    Tensor latents_of(const AudioTokenSeq& seq) const; // dequantized rows, [tokens, latent]

private:
    Tensor lm_head_logits(const Tensor& rows) const;

    CodecConfig cfg_;
    Rng rng_;

    Conv1d enc_stem_;
    struct Stage {
        Conv1d res1, res2, down;
    };
    std::vector<Stage> enc_stages_;
    Conv1d enc_out_;

    Conv1d dec_in_;
    struct UpStage {
        Conv1d up, res1, res2;
    };
    std::vector<UpStage> dec_stages_;
    Conv1d dec_head_;

    RvqStack rvq_;

    // Frozen transcript LM: token table, transformer, output head.
    Tensor lm_embed_;
    Transformer lm_;
    Linear lm_out_;
    std::vector<Tensor> lm_params_;
    Linear audio_proj_; // trainable bridge into the LM width

    std::unique_ptr<Adam> opt_;
};

// Mean |target - prediction| per cell between the normalized Mel of w
// and the decode of its own encoding. The scalar quality number used by
// round-trip evaluation.
double roundtrip_mel_l1(const AudioCodec& codec, const Waveform& w);

} // namespace omni
