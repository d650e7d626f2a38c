#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "omni/adam.hpp"
#include "omni/nn.hpp"
#include "omni/rng.hpp"
#include "omni/rvq.hpp"
#include "omni/tensor.hpp"

namespace omni {

// Symbol layout of the mixed stream: text ids first, then the four
// reserved ids. Audio frames are not symbols of this table; they embed
// through their own per-layer tables.
struct TokenScheme {
    size_t text_vocab = 64;
    size_t audio_depth = 8;
    size_t audio_entries = 64; // K per RVQ layer

    size_t text_to_audio() const { return text_vocab; }
    size_t audio_to_text() const { return text_vocab + 1; }
    size_t bos() const { return text_vocab + 2; }
    size_t eos() const { return text_vocab + 3; }
    size_t total_symbols() const { return text_vocab + 4; }
};

enum class ItemKind { Text, Audio, Switch };
enum class SwitchKind { ToAudio, ToText };

struct Item {
    ItemKind kind = ItemKind::Text;
    size_t text_id = 0;  // Text
    CodeFrame frame;     // Audio
    SwitchKind sw = SwitchKind::ToAudio; // Switch

    static Item text(size_t id);
    static Item audio(CodeFrame f);
    static Item switch_to(SwitchKind k);

    bool operator==(const Item&) const = default;
};

struct InterleavedSequence {
    std::vector<Item> items;

    bool operator==(const InterleavedSequence&) const = default;
};

struct Violation {
    bool ok = true;
    size_t index = 0;
    std::string what;
};

// Protocol check: the stream starts in text mode, audio frames live
// only between a ToAudio switch and its matching ToText, switches
// alternate, the terminator ends the stream. allow_open_end accepts a
// prefix that is still inside an audio span (prompts).
Violation validate(const InterleavedSequence& seq, const TokenScheme& scheme,
                   bool allow_open_end = false);

// Fixture serialization, one item per line:
//   T:<id>      text symbol (specials included)
//   A:<c0,...>  audio frame codes
//   S:>A / S:>T switches
std::string serialize_sequence(const InterleavedSequence& seq);
InterleavedSequence parse_sequence(const std::string& text);

struct GenPolicy {
    size_t text_run = 2;  // text tokens per span
    size_t audio_run = 3; // audio frames per span
    size_t max_len = 32;  // total item budget, prompt included
    uint64_t seed = 0;
    bool greedy = false;
};

struct InterleaveConfig {
    TokenScheme scheme;
    size_t dim = 128; // backbone width
    size_t backbone_layers = 2;
    size_t backbone_heads = 8;
    size_t depth_dim = 64;
    size_t depth_layers = 3;
    size_t depth_heads = 4;
    uint64_t seed = 31337;
};

// Mixed text/audio stream model: one causal backbone over item
// embeddings, a text head over the symbol table, and a depth
// transformer that decodes one audio code layer per call, conditioning
// on the backbone state plus the codes already chosen within the frame.
class InterleavedLM {
public:
    explicit InterleavedLM(const InterleaveConfig& cfg);

    const InterleaveConfig& config() const { return cfg_; }
    const TokenScheme& scheme() const { return cfg_.scheme; }

    // [N items] -> [N, dim]; throws on protocol violations.
    Tensor embed(const InterleavedSequence& seq) const;
    Tensor backbone_forward(const Tensor& rows) const;
    Tensor text_logits(const Tensor& h) const; // [N, total_symbols]

    // K logits for code layer prev.size(), attending over the state row
    // and the codes chosen so far. Each call bumps head_call_count.
    Tensor audio_head_logits(const Tensor& state_row, const std::vector<uint16_t>& prev) const;
    // Exactly audio_depth sequential head calls. sampler null -> greedy.
    CodeFrame decode_frame(const Tensor& state_row, Rng* sampler) const;

    uint64_t head_call_count() const { return head_calls_; }
    void reset_head_call_count() { head_calls_ = 0; }

    InterleavedSequence generate(const InterleavedSequence& prompt, const GenPolicy& policy) const;

    std::vector<Tensor> trainable_params() const;
    NamedTensors named_tensors() const;
    void save(const std::string& path) const;
    void load(const std::string& path);

private:
    size_t sample_symbol(const Tensor& logits_row, Rng* sampler) const;

    InterleaveConfig cfg_;
    Rng rng_;
    Tensor text_table_;               // [total_symbols, dim]
    std::vector<Tensor> audio_tables_; // per layer [K, dim]
    Transformer backbone_;
    Linear text_head_;
    Linear depth_proj_; // dim -> depth_dim
    std::vector<Tensor> depth_tables_; // per layer [K, depth_dim]
    Transformer depth_;
    std::vector<Linear> depth_heads_; // per layer depth_dim -> K
    mutable uint64_t head_calls_ = 0;
};

// 2x2 neighborhood merge followed by a two-layer MLP; grid tokens come
// in row-major [H*W, in_dim] and leave as [(H/2)*(W/2), out_dim].
struct VisualProjector {
    size_t in_dim = 16;
    size_t hidden = 32;
    size_t out_dim = 128;
    Linear fc1; // 4*in_dim -> hidden
    Linear fc2; // hidden -> out_dim

    static VisualProjector init(size_t in_dim, size_t hidden, size_t out_dim, Rng& rng);
    // The pre-MLP merge: each output row is its 4 source rows
    // concatenated.
    Tensor merged(const Tensor& grid, size_t h, size_t w) const;
    Tensor forward(const Tensor& grid, size_t h, size_t w) const;
    void collect(std::vector<Tensor>& out) const;
    void named(const std::string& prefix, NamedTensors& out) const;
};

} // namespace omni
