#include "omni/codec.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "omni/checkpoint.hpp"

namespace omni {

namespace {

void write_u32(std::ofstream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32(std::ifstream& is, const char* what) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error(std::string("tokens: truncated ") + what);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

CodecConfig fixed_config(CodecConfig cfg) {
    cfg.rvq.dim = cfg.latent;
    cfg.rvq.ema_decay = cfg.ema_decay;
    if (cfg.downsample != 8)
        throw std::runtime_error("codec: downsample factor must be 8, got " +
                                 std::to_string(cfg.downsample));
    if ((cfg.sample_rate / static_cast<int>(cfg.hop)) != 100)
        throw std::runtime_error("codec: hop must give 100 Mel frames per second");
    return cfg;
}

std::string format_seconds(double s) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", s);
    return buf;
}

} // namespace

std::vector<size_t> encode_transcript(const std::string& text) {
    std::vector<size_t> out;
    out.reserve(text.size());
    for (char ch : text) {
        if (ch >= 'a' && ch <= 'z')
            out.push_back(static_cast<size_t>(ch - 'a'));
        else if (ch == ' ')
            out.push_back(kCharSpace);
        else
            throw std::runtime_error(std::string("transcript: character '") + ch +
                                     "' outside the a-z/space vocabulary");
    }
    return out;
}

std::string decode_transcript(const std::vector<size_t>& ids) {
    std::string out;
    for (size_t id : ids) {
        if (id < 26)
            out.push_back(static_cast<char>('a' + id));
        else if (id == kCharSpace)
            out.push_back(' ');
        else if (id == kCharEos)
            break;
        else
            throw std::runtime_error("transcript: id " + std::to_string(id) + " out of range");
    }
    return out;
}

void write_tokens(const std::string& path, const AudioTokenSeq& seq) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("tokens: cannot open " + path + " for writing");
    os.write("OMNITOK1", 8);
    const uint32_t depth = seq.frames.empty() ? 0 : static_cast<uint32_t>(seq.frames[0].codes.size());
    write_u32(os, depth);
    write_u32(os, static_cast<uint32_t>(seq.frames.size()));
    for (const CodeFrame& f : seq.frames) {
        if (f.codes.size() != depth) throw std::runtime_error("tokens: ragged frame depths");
        for (uint16_t c : f.codes) {
            unsigned char b[2] = {static_cast<unsigned char>(c & 0xff),
                                  static_cast<unsigned char>((c >> 8) & 0xff)};
            os.write(reinterpret_cast<const char*>(b), 2);
        }
    }
    if (!os) throw std::runtime_error("tokens: write failed for " + path);
}

AudioTokenSeq read_tokens(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("tokens: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != "OMNITOK1")
        throw std::runtime_error("tokens: " + path + " is not an OMNITOK1 token file");
    const uint32_t depth = read_u32(is, "depth");
    const uint32_t count = read_u32(is, "frame count");
    AudioTokenSeq seq;
    seq.frames.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        CodeFrame f;
        f.codes.resize(depth);
        for (uint32_t d = 0; d < depth; ++d) {
            unsigned char b[2];
            is.read(reinterpret_cast<char*>(b), 2);
            if (!is) throw std::runtime_error("tokens: truncated code payload");
            f.codes[d] = static_cast<uint16_t>(b[0] | (b[1] << 8));
        }
        seq.frames.push_back(std::move(f));
    }
    seq.source_duration = static_cast<double>(count) / seq.frame_rate;
    return seq;
}

AudioCodec::AudioCodec(const CodecConfig& cfg)
    : cfg_(fixed_config(cfg)),
      rng_(cfg_.seed),
      rvq_(cfg_.rvq, rng_),
      lm_({cfg_.lm_dim, cfg_.lm_layers, cfg_.lm_heads, true, true, 0.02}, rng_,
          /*trainable=*/false) {
    const size_t C = cfg_.hidden;
    enc_stem_ = Conv1d::init(cfg_.mel_bins, C, 3, 1, 1, rng_);
    for (int s = 0; s < 3; ++s) {
        Stage st;
        st.res1 = Conv1d::init(C, C, 3, 1, 1, rng_);
        st.res2 = Conv1d::init(C, C, 3, 1, 1, rng_);
        st.down = Conv1d::init(C, C, 2, 2, 0, rng_);
        enc_stages_.push_back(std::move(st));
    }
    enc_out_ = Conv1d::init(C, cfg_.latent, 1, 1, 0, rng_);

    dec_in_ = Conv1d::init(cfg_.latent, C, 1, 1, 0, rng_);
    for (int s = 0; s < 3; ++s) {
        UpStage st;
        st.up = Conv1d::init(C, C, 3, 1, 1, rng_);
        st.res1 = Conv1d::init(C, C, 3, 1, 1, rng_);
        st.res2 = Conv1d::init(C, C, 3, 1, 1, rng_);
        dec_stages_.push_back(std::move(st));
    }
    dec_head_ = Conv1d::init(C, cfg_.mel_bins, 3, 1, 1, rng_);

    lm_embed_ = Tensor::randn({kCharVocab, cfg_.lm_dim}, rng_, 0.02, false);
    lm_out_ = Linear::init(cfg_.lm_dim, kCharVocab, rng_, 0.02, false);
    lm_params_ = lm_.params();
    lm_params_.push_back(lm_embed_);
    lm_out_.collect(lm_params_);

    audio_proj_ = Linear::init(cfg_.latent, cfg_.lm_dim, rng_,
                               1.0 / std::sqrt(static_cast<double>(cfg_.latent)));

    opt_ = std::make_unique<Adam>(trainable_params(), AdamConfig{cfg_.lr, 0.9, 0.999, 1e-8});
}

double AudioCodec::min_duration() const {
    // Eight token frames: 8 * downsample Mel frames at 100 per second.
    return static_cast<double>(8 * cfg_.downsample) / 100.0;
}

Tensor AudioCodec::norm_mel(const Waveform& w) const {
    if (w.sample_rate != cfg_.sample_rate)
        throw std::runtime_error("codec: expected " + std::to_string(cfg_.sample_rate) +
                                 " Hz input, got " + std::to_string(w.sample_rate));
    MelSpectrogram m = mel_spectrogram(w, cfg_.n_fft, cfg_.hop, cfg_.mel_bins);
    const size_t T = m.frame_count - m.frame_count % cfg_.downsample;
    if (T == 0) throw std::runtime_error("codec: too little audio for one token frame");
    std::vector<double> data(cfg_.mel_bins * T);
    for (size_t b = 0; b < cfg_.mel_bins; ++b)
        for (size_t t = 0; t < T; ++t)
            data[b * T + t] = m.at(b, t) / kMelNormScale + 1.0;
    return Tensor::from_data({cfg_.mel_bins, T}, std::move(data));
}

Tensor AudioCodec::encode_latents(const Tensor& nm) const {
    if (nm.ndim() != 2 || nm.rows() != cfg_.mel_bins || nm.cols() % cfg_.downsample != 0)
        throw std::runtime_error("codec: encoder expects [" + std::to_string(cfg_.mel_bins) +
                                 ", 8k] Mel input, got " + shape_str(nm.shape()));
    Tensor h = gelu(enc_stem_.forward(nm));
    for (const Stage& st : enc_stages_) {
        h = add(h, st.res2.forward(gelu(st.res1.forward(gelu(h)))));
        h = gelu(st.down.forward(h));
    }
    return transpose(enc_out_.forward(h)); // [T/8, latent]
}

Tensor AudioCodec::decode_latents(const Tensor& latents) const {
    if (latents.ndim() != 2 || latents.cols() != cfg_.latent)
        throw std::runtime_error("codec: decoder expects [T, " + std::to_string(cfg_.latent) +
                                 "] latents, got " + shape_str(latents.shape()));
    Tensor h = gelu(dec_in_.forward(transpose(latents)));
    for (const UpStage& st : dec_stages_) {
        h = gelu(st.up.forward(upsample_repeat1d(h, 2)));
        h = add(h, st.res2.forward(gelu(st.res1.forward(gelu(h)))));
    }
    return dec_head_.forward(h); // [mel_bins, 8T] normalized
}

AudioTokenSeq AudioCodec::encode(const Waveform& w) const {
    const double dur = w.duration();
    if (dur < min_duration() - 1e-9)
        throw std::runtime_error("codec: input is " + format_seconds(dur) +
                                 " s, need at least " + format_seconds(min_duration()) +
                                 " s of audio");
    Tensor latents = encode_latents(norm_mel(w));
    AudioTokenSeq seq;
    seq.frames = rvq_.encode_rows(latents);
    seq.source_duration = dur;
    return seq;
}

MelSpectrogram AudioCodec::decode_mel(const AudioTokenSeq& seq) const {
    if (seq.frames.empty()) throw std::runtime_error("codec: empty token sequence");
    Tensor rows = rvq_.decode_rows(seq.frames);
    Tensor nm = decode_latents(rows);
    MelSpectrogram m;
    m.n_mels = cfg_.mel_bins;
    m.frame_count = nm.cols();
    m.n_fft = cfg_.n_fft;
    m.hop_length = cfg_.hop;
    m.sample_rate = cfg_.sample_rate;
    m.values.resize(nm.size());
    for (size_t i = 0; i < nm.size(); ++i) {
        const double logmel = (nm.at(i) - 1.0) * kMelNormScale;
        m.values[i] = std::max(logmel, kLogMelFloor);
    }
    return m;
}

Waveform AudioCodec::decode_wav(const AudioTokenSeq& seq, size_t griffin_lim_iters) const {
    return griffin_lim(decode_mel(seq), griffin_lim_iters);
}

Tensor AudioCodec::lm_head_logits(const Tensor& rows) const {
    return lm_out_.forward(lm_.forward(rows));
}

Tensor AudioCodec::transcript_logits(const Tensor& latents,
                                     const std::vector<size_t>& chars) const {
    for (const Tensor& p : lm_params_)
        if (p.requires_grad())
            throw std::runtime_error(
                "codec: frozen transcript LM has trainable parameters, freeze contract violated");
    for (size_t c : chars)
        if (c >= kCharVocab)
            throw std::runtime_error("codec: transcript id " + std::to_string(c) +
                                     " out of vocabulary");
    Tensor prefix = audio_proj_.forward(latents);
    std::vector<size_t> input_ids = {kCharEos}; // start symbol
    input_ids.insert(input_ids.end(), chars.begin(), chars.end());
    Tensor text_rows = embed_rows(lm_embed_, input_ids);
    Tensor rows = concat_rows({prefix, text_rows});
    Tensor logits = lm_head_logits(rows);
    return slice_rows(logits, latents.rows(), input_ids.size());
}

CodecLosses AudioCodec::train_step(const std::vector<std::pair<Waveform, std::string>>& batch) {
    if (batch.empty()) throw std::runtime_error("codec: empty training batch");
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    Tensor mel_sum = Tensor::scalar(0.0);
    Tensor commit_sum = Tensor::scalar(0.0);
    Tensor ce_sum = Tensor::scalar(0.0);
    std::vector<Tensor> ema_batches;

    for (const auto& [wav, text] : batch) {
        Tensor target = norm_mel(wav);
        Tensor latents = encode_latents(target);
        Tensor st = rvq_.quantize_st(latents);
        Tensor recon = decode_latents(st);
        mel_sum = add(mel_sum, multi_scale_mel_loss(recon, target, {1, 2, 4}));
        commit_sum = add(commit_sum, rvq_.commitment_loss(latents));

        std::vector<size_t> chars = encode_transcript(text);
        Tensor logits = transcript_logits(st, chars);
        chars.push_back(kCharEos);
        ce_sum = add(ce_sum, cross_entropy(logits, chars));

        ema_batches.push_back(detach(latents));
    }

    Tensor mel_loss = scale(mel_sum, inv_b);
    Tensor commit_loss = scale(commit_sum, inv_b);
    Tensor ce_loss = scale(ce_sum, inv_b);
    Tensor total = add(add(scale(mel_loss, cfg_.w_mel), scale(commit_loss, cfg_.w_commit)),
                       scale(ce_loss, cfg_.w_ce));

    std::vector<Tensor> params = trainable_params();
    zero_grads(params);
    backward(total);
    opt_->step();

    rvq_.ema_update(concat_rows(ema_batches), cfg_.ema_decay);

    CodecLosses out;
    out.mel_recon = mel_loss.value();
    out.commitment = commit_loss.value();
    out.transcript_ce = ce_loss.value();
    out.total = total.value();
    return out;
}

std::vector<Tensor> AudioCodec::trainable_params() const {
    std::vector<Tensor> out;
    enc_stem_.collect(out);
    for (const Stage& st : enc_stages_) {
        st.res1.collect(out);
        st.res2.collect(out);
        st.down.collect(out);
    }
    enc_out_.collect(out);
    dec_in_.collect(out);
    for (const UpStage& st : dec_stages_) {
        st.up.collect(out);
        st.res1.collect(out);
        st.res2.collect(out);
    }
    dec_head_.collect(out);
    audio_proj_.collect(out);
    return out;
}

NamedTensors AudioCodec::named_tensors() const {
    NamedTensors out;
    enc_stem_.named("enc.stem", out);
    for (size_t s = 0; s < enc_stages_.size(); ++s) {
        const std::string p = "enc.s" + std::to_string(s);
        enc_stages_[s].res1.named(p + ".res1", out);
        enc_stages_[s].res2.named(p + ".res2", out);
        enc_stages_[s].down.named(p + ".down", out);
    }
    enc_out_.named("enc.out", out);
    dec_in_.named("dec.in", out);
    for (size_t s = 0; s < dec_stages_.size(); ++s) {
        const std::string p = "dec.s" + std::to_string(s);
        dec_stages_[s].up.named(p + ".up", out);
        dec_stages_[s].res1.named(p + ".res1", out);
        dec_stages_[s].res2.named(p + ".res2", out);
    }
    dec_head_.named("dec.head", out);
    audio_proj_.named("audio_proj", out);
    out.emplace_back("lm.embed", lm_embed_);
    lm_.named("lm.tf", out);
    lm_out_.named("lm.out", out);
    for (auto& nt : rvq_.named_tensors()) out.push_back(std::move(nt));
    return out;
}

void AudioCodec::save(const std::string& path) const { save_checkpoint(path, named_tensors()); }

void AudioCodec::load(const std::string& path) {
    NamedTensors stored = load_checkpoint(path);
    NamedTensors mine;
    for (auto& nt : named_tensors())
        if (nt.first.rfind("rvq.", 0) != 0) mine.push_back(std::move(nt));
    load_named(mine, stored);
    rvq_.load_tensors(stored);
}

void AudioCodec::set_lm_trainable_for_test(bool trainable) {
    for (Tensor& p : lm_params_) p.node()->requires_grad = trainable;
}

Tensor AudioCodec::latents_of(const AudioTokenSeq& seq) const {
    if (seq.frames.empty()) throw std::runtime_error("codec: empty token sequence");
    return rvq_.decode_rows(seq.frames);
}

double roundtrip_mel_l1(const AudioCodec& codec, const Waveform& w) {
    Tensor target = codec.norm_mel(w);
    Tensor pred = codec.decode_latents(codec.latents_of(codec.encode(w)));
    const auto& a = target.data();
    const auto& b = pred.data();
    if (a.size() != b.size())
        throw std::logic_error("roundtrip_mel_l1: shape drift between target and prediction");
    double sum = 0.0;
    for (size_t i = 0; i < a.size(); ++i) sum += std::abs(a[i] - b[i]);
    return sum / static_cast<double>(a.size());
}

} // namespace omni
