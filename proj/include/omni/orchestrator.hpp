#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "omni/datapipe.hpp"
#include "omni/interleave.hpp"
#include "omni/nn.hpp"
#include "omni/rng.hpp"
#include "omni/rvq.hpp"
#include "omni/tensor.hpp"

namespace omni {

// Leaderboard-style rescale: (x - x_min + 10) / (x_max - x_min + 10).
// Maps x_max to exactly 1 and is monotone in x.
double normalize_score(double x, double x_min, double x_max);

// Paper keeps the published sequence caps; Desk shrinks caps and step
// counts to minutes of CPU. Learning rates and freeze masks are
// identical in both.
enum class Preset { Desk, Paper };

// One schedule entry: which parameter groups move, at what rate, fed by
// which data mixture.
struct StageSpec {
    std::string name;
    std::vector<std::string> trainable;        // parameter-group names
    std::map<std::string, double> lr_overrides; // per-group rates
    double base_lr = 1e-5;                      // trainable groups with no override
    MixtureSpec mixture;
    size_t max_seq_len = 512;
    size_t steps = 25;
};

// The full built-in schedule: image-I, image-II, audio-I, audio-II,
// omni, then the two fine-tune passes sft-4.1 and sft-4.2.
std::vector<StageSpec> builtin_stages(Preset preset = Preset::Desk);
StageSpec stage_by_name(const std::string& name, Preset preset = Preset::Desk);

struct OmniModelConfig {
    size_t patch_dim = 16;  // visual feature width entering the encoder
    size_t vis_hidden = 32;
    size_t text_vocab = 16;
    size_t lm_dim = 32;
    size_t audio_entries = 8;
    size_t depth_dim = 16;
    uint64_t seed = 2718;
};

// Desk-size assembly of every trainable piece, addressed as six named
// parameter groups: visual_encoder, visual_projector, llm_backbone,
// audio_embed, audio_head, audio_tokenizer. The tokenizer's codebooks
// are EMA state rather than gradient parameters; they join the registry
// for checksum/freeze accounting but cannot be optimized.
class OmniModel {
public:
    explicit OmniModel(const OmniModelConfig& cfg = {});

    static const std::vector<std::string>& group_names();
    bool has_group(const std::string& name) const;
    bool gradient_group(const std::string& name) const;

    std::vector<Tensor> group_params(const std::string& name) const; // gradient groups only
    NamedTensors group_named(const std::string& name) const;
    uint64_t group_checksum(const std::string& name) const;

    // Scalar training loss on one synthetic batch of the given source
    // kind ("text", "image", "audio", "crossmodal", "audio_gen"). Every
    // batch exercises the backbone; image and audio kinds pull in their
    // extra pathways. Deterministic in (source, rng state).
    Tensor batch_loss(const std::string& source, size_t max_seq_len, Rng& rng) const;

    const OmniModelConfig& config() const { return cfg_; }
    const InterleavedLM& lm() const { return lm_; }
    const RvqStack& tokenizer() const { return tok_; }

private:
    OmniModelConfig cfg_;
    Linear enc1_, enc2_; // visual encoder stand-in
    VisualProjector proj_;
    InterleavedLM lm_;
    RvqStack tok_;
    NamedTensors lm_named_; // live handles, partitioned by prefix
};

struct StepRecord {
    size_t step = 0;
    std::string source;
    double loss = 0.0;
};

// Frozen groups must checksum identically in before and after; that is
// the freeze contract run_stage is audited against.
struct RunLog {
    std::string stage;
    std::vector<std::string> trainable;
    std::vector<StepRecord> steps;
    std::vector<std::pair<std::string, uint64_t>> before;
    std::vector<std::pair<std::string, uint64_t>> after;

    std::string to_jsonl() const;
    uint64_t digest() const;
};

// Applies the stage's freeze mask and per-group learning rates, runs
// spec.steps synthetic batches, and returns the audit log. Unknown or
// non-trainable groups fail before any step runs.
RunLog run_stage(OmniModel& model, const StageSpec& spec, uint64_t seed);

// Flat key=value file: blank lines and #-comments ignored, whitespace
// around keys and values trimmed.
std::map<std::string, std::string> read_config(const std::string& path);

} // namespace omni
