#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "omni/cli.hpp"
#include "omni/codec.hpp"
#include "omni/datapipe.hpp"
#include "omni/wav.hpp"

using namespace omni;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int code = -1;
    std::string out;
    std::string err;
};

CliResult run(std::vector<std::string> args) {
    std::ostringstream out, err;
    CliResult r;
    r.code = cli_main(std::move(args), out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

fs::path work_dir() {
    fs::path p = "/tmp/omni_cli_test";
    fs::create_directories(p);
    return p;
}

std::string sine_wav(double seconds, const std::string& name) {
    Waveform w;
    w.sample_rate = 16000;
    const size_t n = static_cast<size_t>(std::llround(seconds * w.sample_rate));
    w.samples.resize(n);
    for (size_t i = 0; i < n; ++i)
        w.samples[i] = 0.5 * std::sin(2.0 * M_PI * 440.0 * static_cast<double>(i) / 16000.0);
    std::string path = (work_dir() / name).string();
    wav_write(path, w);
    return path;
}

std::string digest_line(const std::string& out) {
    std::istringstream lines(out);
    std::string line, found;
    while (std::getline(lines, line))
        if (line.rfind("digest ", 0) == 0) found = line;
    return found;
}

} // namespace

TEST_CASE("normalize prints the rescaled score to five places") {
    CliResult r = run({"normalize", "50", "40", "90"});
    CHECK(r.code == 0);
    CHECK(r.out == "0.33333\n");
    CHECK(r.err.empty());

    CHECK(run({"normalize", "90", "40", "90"}).out == "1.00000\n");
    CHECK(run({"normalize", "40", "40", "90"}).out == "0.16667\n");

    // degenerate range is a runtime failure, not a usage failure
    CliResult bad = run({"normalize", "1", "5", "5"});
    CHECK(bad.code == 2);
    CHECK(bad.err.find("error:") == 0);
}

TEST_CASE("usage failures exit 1 with text on the error stream") {
    CliResult none = run({});
    CHECK(none.code == 1);
    CHECK(!none.err.empty());

    CliResult unknown = run({"transcode"});
    CHECK(unknown.code == 1);
    CHECK(!unknown.err.empty());

    CliResult missing = run({"encode", "only-input.wav"});
    CHECK(missing.code == 1);

    CliResult preset = run({"run-stage", "audio-I", "--preset", "galaxy"});
    CHECK(preset.code == 1);

    CliResult nonnum = run({"normalize", "abc", "0", "1"});
    CHECK(nonnum.code == 1);

    CliResult help = run({"--help"});
    CHECK(help.code == 0);
    CHECK(help.out.find("normalize") != std::string::npos);
}

TEST_CASE("encode emits 25 frames for two seconds of audio") {
    std::string wav = sine_wav(2.0, "two_sec.wav");
    std::string tok = (work_dir() / "two_sec.tok").string();
    CliResult r = run({"encode", wav, tok});
    CHECK(r.code == 0);
    CHECK(r.out.find("encoded 25 frames") != std::string::npos);
    AudioTokenSeq seq = read_tokens(tok);
    CHECK(seq.frames.size() == 25);
    CHECK(seq.frame_rate == 12.5);

    CliResult ev = run({"eval-roundtrip", wav});
    CHECK(ev.code == 0);
    CHECK(ev.out.find("frames 25\n") != std::string::npos);
    CHECK(ev.out.find("mel_l1 ") != std::string::npos);

    // missing input is a runtime failure
    CHECK(run({"encode", (work_dir() / "nope.wav").string(), tok}).code == 2);
}

TEST_CASE("decode and tts-flow write waveforms of the token duration") {
    std::string wav = sine_wav(1.0, "one_sec.wav");
    std::string tok = (work_dir() / "one_sec.tok").string();
    REQUIRE(run({"encode", wav, tok}).code == 0);

    std::string out_wav = (work_dir() / "decoded.wav").string();
    CliResult r = run({"decode", tok, out_wav, "--griffin-lim", "4"});
    CHECK(r.code == 0);
    Waveform back = wav_read(out_wav);
    // 12 frames -> 96 Mel frames -> 96 * 160 samples
    CHECK(back.samples.size() == 96 * 160);

    std::string flow_wav = (work_dir() / "refined.wav").string();
    CliResult t = run({"tts-flow", tok, flow_wav, "--euler-steps", "2", "--griffin-lim", "2"});
    CHECK(t.code == 0);
    CHECK(wav_read(flow_wav).samples.size() == 96 * 160);

    CHECK(run({"decode", (work_dir() / "nope.tok").string(), out_wav}).code == 2);
}

TEST_CASE("run-stage digests are seed-deterministic") {
    CliResult a = run({"run-stage", "audio-I", "--steps", "10", "--seed", "7"});
    CliResult b = run({"run-stage", "audio-I", "--steps", "10", "--seed", "7"});
    CHECK(a.code == 0);
    CHECK(a.out == b.out);
    std::string d = digest_line(a.out);
    CHECK(d.size() == std::string("digest ").size() + 16);
    CHECK(digest_line(b.out) == d);

    CliResult c = run({"run-stage", "audio-I", "--steps", "10", "--seed", "8"});
    CHECK(digest_line(c.out) != d);

    // freeze summary names the untouched groups
    CHECK(a.out.find("group llm_backbone frozen") != std::string::npos);
    CHECK(a.out.find("group audio_embed updated") != std::string::npos);

    CHECK(run({"run-stage", "audio-III"}).code == 2);
}

TEST_CASE("run-stage writes a parseable jsonl log") {
    std::string log_path = (work_dir() / "runlog.jsonl").string();
    CliResult r =
        run({"run-stage", "image-I", "--steps", "3", "--seed", "2", "--out", log_path});
    REQUIRE(r.code == 0);
    std::ifstream in(log_path);
    REQUIRE(in.good());
    std::string line;
    size_t lines = 0;
    while (std::getline(in, line)) {
        nlohmann::json obj = nlohmann::json::parse(line);
        CHECK(obj.contains("event"));
        ++lines;
    }
    CHECK(lines == 5); // start + 3 steps + end
}

TEST_CASE("config file supplies defaults that flags override") {
    std::string cfg_path = (work_dir() / "run.cfg").string();
    {
        std::ofstream cfg(cfg_path);
        cfg << "# defaults for the smoke run\n";
        cfg << "seed = 7\n";
        cfg << "steps = 10\n";
    }
    CliResult from_cfg = run({"run-stage", "audio-I", "--config", cfg_path});
    CliResult from_flags = run({"run-stage", "audio-I", "--steps", "10", "--seed", "7"});
    CHECK(from_cfg.code == 0);
    CHECK(digest_line(from_cfg.out) == digest_line(from_flags.out));

    // an explicit flag wins over the file
    CliResult overridden = run({"run-stage", "audio-I", "--config", cfg_path, "--seed", "9"});
    CliResult direct = run({"run-stage", "audio-I", "--steps", "10", "--seed", "9"});
    CHECK(digest_line(overridden.out) == digest_line(direct.out));
    CHECK(digest_line(overridden.out) != digest_line(from_cfg.out));

    CHECK(run({"run-stage", "audio-I", "--config",
               (work_dir() / "missing.cfg").string()})
              .code == 2);
}

TEST_CASE("synth-data writes a readable manifest for the builtin corpus") {
    std::string dir = (work_dir() / "synth").string();
    fs::remove_all(dir);
    CliResult r = run({"synth-data", dir, "--docs", "3", "--seed", "5"});
    CHECK(r.code == 0);
    CHECK(r.out.find("wrote 3 samples") != std::string::npos);
    auto samples = read_samples(dir);
    REQUIRE(samples.size() == 3);
    for (const auto& s : samples) {
        CHECK(!s.items.empty());
        CHECK(s.audio_count() > 0);
        CHECK(!s.task_prompt.empty());
    }
}

TEST_CASE("train-codec logs losses and saves a loadable checkpoint") {
    std::string ckpt = (work_dir() / "codec.ckpt").string();
    CliResult r = run({"train-codec", "--steps", "2", "--pairs", "2", "--clip", "0.8",
                       "--log-every", "1", "--out", ckpt});
    CHECK(r.code == 0);
    CHECK(r.out.find("step 1 total ") != std::string::npos);
    CHECK(r.out.find("step 2 total ") != std::string::npos);
    CHECK(r.out.find("saved " + ckpt) != std::string::npos);
    REQUIRE(fs::exists(ckpt));

    std::string wav = sine_wav(1.0, "ckpt_probe.wav");
    std::string tok = (work_dir() / "ckpt_probe.tok").string();
    CHECK(run({"encode", wav, tok, "--ckpt", ckpt}).code == 0);
    CHECK(read_tokens(tok).frames.size() == 12);
}
