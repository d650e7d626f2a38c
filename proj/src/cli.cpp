#include "omni/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "omni/codec.hpp"
#include "omni/datapipe.hpp"
#include "omni/flowmatch.hpp"
#include "omni/orchestrator.hpp"
#include "omni/wav.hpp"

namespace omni {

namespace {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string fixed(double v, int places) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(places) << v;
    return os.str();
}

// Seeded sine-tone clips with number-word transcripts, the stock
// training set for the desk codec.
std::vector<std::pair<Waveform, std::string>> tone_batch(size_t pairs, double seconds) {
    static const char* kWords[] = {"zero", "one",  "two", "three", "four",  "five",
                                   "six",  "seven", "eight", "nine", "ten",  "eleven",
                                   "twelve", "thirteen", "fourteen", "fifteen"};
    std::vector<std::pair<Waveform, std::string>> out;
    const int sr = 16000;
    const size_t n = static_cast<size_t>(std::llround(seconds * sr));
    for (size_t i = 0; i < pairs; ++i) {
        Waveform w;
        w.sample_rate = sr;
        w.samples.resize(n);
        const double freq = 220.0 * std::pow(2.0, static_cast<double>(i) / 12.0);
        for (size_t k = 0; k < n; ++k)
            w.samples[k] = 0.5 * std::sin(2.0 * M_PI * freq * static_cast<double>(k) / sr);
        out.emplace_back(std::move(w), std::string("tone ") + kWords[i % 16]);
    }
    return out;
}

// Built-in document corpus for synth-data. Plain ASCII prose so the
// sentence segmenter and the stub voices both apply cleanly.
const std::vector<std::pair<std::string, std::string>>& builtin_corpus() {
    static const std::vector<std::pair<std::string, std::string>> docs = {
        {"harbor",
         "The harbor wakes before the town does. Gulls argue over the first nets. "
         "A ferry horn rolls across the flat water. By noon the quay smells of tar "
         "and salt. Nobody remembers a quiet morning here."},
        {"loom",
         "The loom in the back room is older than the house. Its treadles are worn "
         "to the grain. Thread crosses thread a thousand times an hour. The pattern "
         "only shows once you step away from it."},
        {"glacier",
         "Ice moves slower than patience. The glacier carries boulders like loose "
         "change. Meltwater cuts a channel you can hear but not see. Every summer "
         "the snout retreats a little farther up the valley."},
        {"market",
         "Stalls open with a clatter of crates. Oranges stack into small bright "
         "pyramids. A scale pan rings against its weights. Bargaining here is a "
         "form of conversation. By dusk only cabbage leaves are left."},
        {"radio",
         "The shortwave set hums as it warms. Stations drift in and out of the "
         "static. A time signal ticks from another continent. Someone reads the "
         "shipping forecast to an empty sea."},
        {"orchard",
         "Frost decides the harvest long before autumn. The orchard rows run "
         "straight up the hill. Windfalls gather in the long grass. Cider presses "
         "wait under canvas by the barn."},
    };
    return docs;
}

void apply_config_value(const std::map<std::string, std::string>& cfg, const std::string& key,
                        const CLI::Option* opt, uint64_t& target) {
    auto it = cfg.find(key);
    if (it == cfg.end() || (opt != nullptr && opt->count() > 0)) return;
    try {
        size_t pos = 0;
        target = std::stoull(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing junk");
    } catch (const std::exception&) {
        throw std::runtime_error("config: bad value for " + key + ": '" + it->second + "'");
    }
}

void apply_config_value(const std::map<std::string, std::string>& cfg, const std::string& key,
                        const CLI::Option* opt, std::string& target) {
    auto it = cfg.find(key);
    if (it == cfg.end() || (opt != nullptr && opt->count() > 0)) return;
    target = it->second;
}

Preset parse_preset(const std::string& name) {
    if (name == "desk") return Preset::Desk;
    if (name == "paper") return Preset::Paper;
    throw std::runtime_error("unknown preset '" + name + "' (expected desk or paper)");
}

AudioCodec make_codec(uint64_t seed, const std::string& ckpt) {
    CodecConfig cc;
    cc.seed = seed;
    AudioCodec codec(cc);
    if (!ckpt.empty()) codec.load(ckpt);
    return codec;
}

} // namespace

int cli_main(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"desk-scale audio tokenizer, refiner, and stage trainer"};
    app.require_subcommand(1);

    uint64_t seed = 0;
    std::string config_path;
    std::string preset_name = "desk";
    auto* seed_opt = app.add_option("--seed", seed, "global rng seed");
    app.add_option("--config", config_path, "flat key=value defaults file");
    auto* preset_opt =
        app.add_option("--preset", preset_name, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));

    // train-codec
    auto* train = app.add_subcommand("train-codec", "train the tokenizer on stock tone clips");
    uint64_t tc_steps = 200, tc_pairs = 8, tc_log_every = 25;
    double tc_clip = 0.96;
    std::string tc_out;
    auto* tc_steps_opt = train->add_option("--steps", tc_steps, "training steps");
    train->add_option("--pairs", tc_pairs, "clips in the batch")->check(CLI::PositiveNumber);
    train->add_option("--clip", tc_clip, "seconds per clip")->check(CLI::PositiveNumber);
    train->add_option("--log-every", tc_log_every, "steps between loss lines")
        ->check(CLI::PositiveNumber);
    train->add_option("--out", tc_out, "checkpoint path to save");

    // encode
    auto* enc = app.add_subcommand("encode", "waveform to discrete audio tokens");
    std::string enc_in, enc_out, enc_ckpt;
    enc->add_option("input", enc_in, "input wav")->required();
    enc->add_option("output", enc_out, "output token file")->required();
    enc->add_option("--ckpt", enc_ckpt, "codec checkpoint");

    // decode
    auto* dec = app.add_subcommand("decode", "audio tokens back to a waveform");
    std::string dec_in, dec_out, dec_ckpt;
    uint64_t dec_gl = 32;
    dec->add_option("input", dec_in, "input token file")->required();
    dec->add_option("output", dec_out, "output wav")->required();
    dec->add_option("--ckpt", dec_ckpt, "codec checkpoint");
    dec->add_option("--griffin-lim", dec_gl, "phase recovery iterations")
        ->check(CLI::PositiveNumber);

    // tts-flow
    auto* tts = app.add_subcommand("tts-flow", "tokens to waveform through the flow refiner");
    std::string tts_in, tts_out, tts_ckpt, tts_flow_ckpt;
    uint64_t tts_steps = 10, tts_gl = 32;
    tts->add_option("input", tts_in, "input token file")->required();
    tts->add_option("output", tts_out, "output wav")->required();
    tts->add_option("--ckpt", tts_ckpt, "codec checkpoint");
    tts->add_option("--flow-ckpt", tts_flow_ckpt, "refiner checkpoint");
    tts->add_option("--euler-steps", tts_steps, "integration steps")->check(CLI::PositiveNumber);
    tts->add_option("--griffin-lim", tts_gl, "phase recovery iterations")
        ->check(CLI::PositiveNumber);

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "cross-modal samples from the builtin corpus");
    std::string synth_dir;
    uint64_t synth_docs = 0;
    synth->add_option("outdir", synth_dir, "output directory")->required();
    synth->add_option("--docs", synth_docs, "documents to take (0 = all)");

    // run-stage
    auto* rs = app.add_subcommand("run-stage", "run one training stage of the schedule");
    std::string rs_stage, rs_out;
    uint64_t rs_steps = 0;
    rs->add_option("stage", rs_stage, "stage name, e.g. audio-I")->required();
    auto* rs_steps_opt = rs->add_option("--steps", rs_steps, "override the stage's step count");
    rs->add_option("--out", rs_out, "write the run log as jsonl");

    // eval-roundtrip
    auto* ev = app.add_subcommand("eval-roundtrip", "encode/decode a wav and report mel error");
    std::string ev_in, ev_ckpt;
    ev->add_option("input", ev_in, "input wav")->required();
    ev->add_option("--ckpt", ev_ckpt, "codec checkpoint");

    // normalize
    auto* nz = app.add_subcommand("normalize", "rescale a score given its min and max");
    double nz_x = 0.0, nz_min = 0.0, nz_max = 0.0;
    nz->add_option("x", nz_x, "raw score")->required();
    nz->add_option("x_min", nz_min, "smallest raw score")->required();
    nz->add_option("x_max", nz_max, "largest raw score")->required();

    for (auto* sub : {train, enc, dec, tts, synth, rs, ev, nz}) sub->fallthrough();

    std::reverse(args.begin(), args.end());
    try {
        app.parse(std::move(args));
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 1;
    }

    try {
        if (!config_path.empty()) {
            auto cfg = read_config(config_path);
            apply_config_value(cfg, "seed", seed_opt, seed);
            apply_config_value(cfg, "preset", preset_opt, preset_name);
            apply_config_value(cfg, "steps", tc_steps_opt, tc_steps);
            apply_config_value(cfg, "steps", rs_steps_opt, rs_steps);
        }
        const Preset preset = parse_preset(preset_name);

        if (app.got_subcommand(train)) {
            CodecConfig cc;
            cc.seed = seed;
            AudioCodec codec(cc);
            auto batch = tone_batch(tc_pairs, tc_clip);
            CodecLosses losses;
            for (uint64_t s = 1; s <= tc_steps; ++s) {
                losses = codec.train_step(batch);
                if (s == 1 || s == tc_steps || s % tc_log_every == 0)
                    out << "step " << s << " total " << fixed(losses.total, 4) << " mel "
                        << fixed(losses.mel_recon, 4) << " commit "
                        << fixed(losses.commitment, 4) << " ce "
                        << fixed(losses.transcript_ce, 4) << "\n";
            }
            if (!tc_out.empty()) {
                codec.save(tc_out);
                out << "saved " << tc_out << "\n";
            }
        } else if (app.got_subcommand(enc)) {
            AudioCodec codec = make_codec(seed, enc_ckpt);
            Waveform w = wav_read(enc_in);
            AudioTokenSeq seq = codec.encode(w);
            write_tokens(enc_out, seq);
            out << "encoded " << seq.frames.size() << " frames at " << seq.frame_rate
                << " Hz from " << fixed(seq.source_duration, 3) << " s\n";
        } else if (app.got_subcommand(dec)) {
            AudioCodec codec = make_codec(seed, dec_ckpt);
            AudioTokenSeq seq = read_tokens(dec_in);
            Waveform w = codec.decode_wav(seq, dec_gl);
            wav_write(dec_out, w);
            out << "wrote " << dec_out << " ("
                << fixed(static_cast<double>(w.samples.size()) / w.sample_rate, 3) << " s)\n";
        } else if (app.got_subcommand(tts)) {
            AudioCodec codec = make_codec(seed, tts_ckpt);
            CFMConfig fc;
            FlowRefiner refiner(fc);
            if (!tts_flow_ckpt.empty()) refiner.load(tts_flow_ckpt);
            AudioTokenSeq seq = read_tokens(tts_in);
            Waveform w = refiner.refine(codec, seq, tts_steps, seed, tts_gl);
            wav_write(tts_out, w);
            out << "wrote " << tts_out << " via " << tts_steps << " euler steps ("
                << fixed(static_cast<double>(w.samples.size()) / w.sample_rate, 3) << " s)\n";
        } else if (app.got_subcommand(synth)) {
            const auto& corpus = builtin_corpus();
            size_t take = synth_docs == 0 ? corpus.size()
                                          : std::min<size_t>(synth_docs, corpus.size());
            VoiceBank bank = VoiceBank::default_bank();
            std::vector<CrossModalSample> samples;
            size_t audio_items = 0;
            for (size_t i = 0; i < take; ++i) {
                const auto& [id, text] = corpus[i];
                Document doc = segment_sentences(text, id, "builtin");
                CrossModalSample s = audify_quarter(doc, bank, document_seed(seed, id));
                audio_items += s.audio_count();
                samples.push_back(std::move(s));
            }
            write_samples(samples, synth_dir);
            out << "wrote " << samples.size() << " samples with " << audio_items
                << " audio spans to " << synth_dir << "\n";
        } else if (app.got_subcommand(rs)) {
            StageSpec spec = stage_by_name(rs_stage, preset);
            if (rs_steps > 0) spec.steps = rs_steps;
            OmniModel model;
            RunLog log = run_stage(model, spec, seed);
            if (!rs_out.empty()) {
                std::ofstream f(rs_out);
                if (!f) throw std::runtime_error("cannot open " + rs_out);
                f << log.to_jsonl();
            }
            out << "stage " << spec.name << " preset " << preset_name << " steps "
                << spec.steps << "\n";
            for (const auto& rec : log.steps)
                out << "step " << rec.step << " " << rec.source << " loss "
                    << fixed(rec.loss, 4) << "\n";
            for (size_t i = 0; i < log.before.size(); ++i)
                out << "group " << log.before[i].first << " "
                    << (log.before[i].second == log.after[i].second ? "frozen" : "updated")
                    << "\n";
            out << "digest " << hex64(log.digest()) << "\n";
        } else if (app.got_subcommand(ev)) {
            AudioCodec codec = make_codec(seed, ev_ckpt);
            Waveform w = wav_read(ev_in);
            AudioTokenSeq seq = codec.encode(w);
            const double l1 = roundtrip_mel_l1(codec, w);
            out << "frames " << seq.frames.size() << "\n";
            out << "duration " << fixed(seq.source_duration, 3) << " s\n";
            out << "mel_l1 " << fixed(l1, 4) << "\n";
        } else if (app.got_subcommand(nz)) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.5f", normalize_score(nz_x, nz_min, nz_max));
            out << buf << "\n";
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

int cli_main(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return cli_main(std::move(args), std::cout, std::cerr);
}

} // namespace omni
