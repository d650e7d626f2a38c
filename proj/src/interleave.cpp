#include "omni/interleave.hpp"

#include <cctype>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "omni/checkpoint.hpp"

namespace omni {

Item Item::text(size_t id) {
    Item it;
    it.kind = ItemKind::Text;
    it.text_id = id;
    return it;
}

Item Item::audio(CodeFrame f) {
    Item it;
    it.kind = ItemKind::Audio;
    it.frame = std::move(f);
    return it;
}

Item Item::switch_to(SwitchKind k) {
    Item it;
    it.kind = ItemKind::Switch;
    it.sw = k;
    return it;
}

Violation validate(const InterleavedSequence& seq, const TokenScheme& scheme,
                   bool allow_open_end) {
    bool in_audio = false;
    size_t open_idx = 0;
    bool terminated = false;
    auto unclosed = [&] {
        return Violation{false, open_idx,
                         "unclosed audio span at index " + std::to_string(open_idx)};
    };
    for (size_t i = 0; i < seq.items.size(); ++i) {
        const Item& it = seq.items[i];
        if (terminated) return {false, i, "item after terminator"};
        switch (it.kind) {
        case ItemKind::Text: {
            const size_t id = it.text_id;
            if (id >= scheme.total_symbols()) return {false, i, "text id out of range"};
            if (id == scheme.text_to_audio() || id == scheme.audio_to_text())
                return {false, i, "switch id encoded as a text item"};
            if (id == scheme.bos()) {
                if (i != 0) return {false, i, "begin marker inside the stream"};
                break;
            }
            if (id == scheme.eos()) {
                if (in_audio) return unclosed();
                terminated = true;
                break;
            }
            if (in_audio) return {false, i, "text token inside an audio span"};
            break;
        }
        case ItemKind::Audio: {
            if (!in_audio) return {false, i, "audio frame outside an audio span"};
            if (it.frame.codes.size() != scheme.audio_depth)
                return {false, i, "audio frame depth mismatch"};
            for (uint16_t c : it.frame.codes)
                if (c >= scheme.audio_entries) return {false, i, "audio code out of range"};
            break;
        }
        case ItemKind::Switch: {
            if (it.sw == SwitchKind::ToAudio) {
                if (in_audio) return {false, i, "nested audio span"};
                in_audio = true;
                open_idx = i;
            } else {
                if (!in_audio) return {false, i, "close switch without an open span"};
                in_audio = false;
            }
            break;
        }
        }
    }
    if (in_audio && !allow_open_end) return unclosed();
    return {};
}

std::string serialize_sequence(const InterleavedSequence& seq) {
    std::string out;
    for (const Item& it : seq.items) {
        switch (it.kind) {
        case ItemKind::Text:
            out += "T:" + std::to_string(it.text_id);
            break;
        case ItemKind::Audio: {
            out += "A:";
            for (size_t l = 0; l < it.frame.codes.size(); ++l) {
                if (l) out += ',';
                out += std::to_string(it.frame.codes[l]);
            }
            break;
        }
        case ItemKind::Switch:
            out += it.sw == SwitchKind::ToAudio ? "S:>A" : "S:>T";
            break;
        }
        out += '\n';
    }
    return out;
}

namespace {

unsigned long parse_num(const std::string& tok) {
    if (tok.empty() || !std::isdigit(static_cast<unsigned char>(tok[0])))
        throw std::invalid_argument("not a number");
    size_t pos = 0;
    unsigned long v = 0;
    try {
        v = std::stoul(tok, &pos);
    } catch (const std::out_of_range&) {
        throw std::invalid_argument("out of range");
    }
    if (pos != tok.size()) throw std::invalid_argument("trailing junk");
    return v;
}

} // namespace

InterleavedSequence parse_sequence(const std::string& text) {
    InterleavedSequence seq;
    std::istringstream in(text);
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto bad = [&](const std::string& why) {
            return std::runtime_error("parse error at line " + std::to_string(lineno) + ": " + why);
        };
        if (line.size() < 2 || line[1] != ':') throw bad("expected T:, A:, or S: prefix");
        const std::string body = line.substr(2);
        switch (line[0]) {
        case 'T': {
            unsigned long id;
            try {
                id = parse_num(body);
            } catch (const std::invalid_argument&) {
                throw bad("bad text id '" + body + "'");
            }
            seq.items.push_back(Item::text(id));
            break;
        }
        case 'A': {
            CodeFrame f;
            if (body.empty()) throw bad("audio frame has no codes");
            size_t start = 0;
            while (true) {
                const size_t comma = body.find(',', start);
                const std::string tok = comma == std::string::npos
                                            ? body.substr(start)
                                            : body.substr(start, comma - start);
                unsigned long c;
                try {
                    c = parse_num(tok);
                } catch (const std::invalid_argument&) {
                    throw bad("bad audio code '" + tok + "'");
                }
                if (c > std::numeric_limits<uint16_t>::max()) throw bad("audio code too large");
                f.codes.push_back(static_cast<uint16_t>(c));
                if (comma == std::string::npos) break;
                start = comma + 1;
            }
            seq.items.push_back(Item::audio(std::move(f)));
            break;
        }
        case 'S': {
            if (body == ">A")
                seq.items.push_back(Item::switch_to(SwitchKind::ToAudio));
            else if (body == ">T")
                seq.items.push_back(Item::switch_to(SwitchKind::ToText));
            else
                throw bad("unknown switch direction '" + body + "'");
            break;
        }
        default:
            throw bad("unknown item kind '" + std::string(1, line[0]) + "'");
        }
    }
    return seq;
}

namespace {

constexpr double kEmbedScale = 0.02;

std::vector<Tensor> make_tables(size_t n, size_t rows, size_t cols, Rng& rng) {
    std::vector<Tensor> t;
    t.reserve(n);
    for (size_t i = 0; i < n; ++i)
        t.push_back(Tensor::randn({rows, cols}, rng, kEmbedScale, true));
    return t;
}

std::vector<Linear> make_heads(size_t n, size_t in, size_t out, Rng& rng) {
    std::vector<Linear> h;
    h.reserve(n);
    for (size_t i = 0; i < n; ++i) h.push_back(Linear::init(in, out, rng, kEmbedScale));
    return h;
}

TransformerConfig backbone_cfg(const InterleaveConfig& c) {
    TransformerConfig t;
    t.dim = c.dim;
    t.layers = c.backbone_layers;
    t.heads = c.backbone_heads;
    return t;
}

TransformerConfig depth_cfg(const InterleaveConfig& c) {
    TransformerConfig t;
    t.dim = c.depth_dim;
    t.layers = c.depth_layers;
    t.heads = c.depth_heads;
    return t;
}

// Greedy argmax with ties to the lowest index, or a softmax draw when a
// sampler is supplied. `allowed` masks ids out entirely.
size_t pick_index(const std::vector<double>& logits, const std::vector<char>* allowed,
                  Rng* sampler) {
    auto ok = [&](size_t i) { return !allowed || (*allowed)[i]; };
    if (!sampler) {
        size_t best = logits.size();
        for (size_t i = 0; i < logits.size(); ++i)
            if (ok(i) && (best == logits.size() || logits[i] > logits[best])) best = i;
        return best;
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < logits.size(); ++i)
        if (ok(i)) mx = std::max(mx, logits[i]);
    std::vector<double> w(logits.size(), 0.0);
    double total = 0.0;
    for (size_t i = 0; i < logits.size(); ++i)
        if (ok(i)) {
            w[i] = std::exp(logits[i] - mx);
            total += w[i];
        }
    const double u = sampler->uniform() * total;
    double acc = 0.0;
    size_t last = 0;
    for (size_t i = 0; i < logits.size(); ++i) {
        if (!ok(i)) continue;
        acc += w[i];
        last = i;
        if (u < acc) return i;
    }
    return last;
}

} // namespace

InterleavedLM::InterleavedLM(const InterleaveConfig& cfg)
    : cfg_(cfg),
      rng_(cfg.seed),
      text_table_(Tensor::randn({cfg.scheme.total_symbols(), cfg.dim}, rng_, kEmbedScale, true)),
      audio_tables_(make_tables(cfg.scheme.audio_depth, cfg.scheme.audio_entries, cfg.dim, rng_)),
      backbone_(backbone_cfg(cfg), rng_),
      text_head_(Linear::init(cfg.dim, cfg.scheme.total_symbols(), rng_, kEmbedScale)),
      depth_proj_(Linear::init(cfg.dim, cfg.depth_dim, rng_, kEmbedScale)),
      depth_tables_(
          make_tables(cfg.scheme.audio_depth, cfg.scheme.audio_entries, cfg.depth_dim, rng_)),
      depth_(depth_cfg(cfg), rng_),
      depth_heads_(make_heads(cfg.scheme.audio_depth, cfg.depth_dim, cfg.scheme.audio_entries,
                              rng_)) {}

Tensor InterleavedLM::embed(const InterleavedSequence& seq) const {
    const Violation v = validate(seq, cfg_.scheme, true);
    if (!v.ok)
        throw std::invalid_argument("embed: invalid sequence, " + v.what + " (item " +
                                    std::to_string(v.index) + ")");
    if (seq.items.empty()) throw std::invalid_argument("embed: empty sequence");
    std::vector<Tensor> rows;
    rows.reserve(seq.items.size());
    for (const Item& it : seq.items) {
        switch (it.kind) {
        case ItemKind::Text:
            rows.push_back(embed_rows(text_table_, {it.text_id}));
            break;
        case ItemKind::Audio: {
            Tensor r = embed_rows(audio_tables_[0], {it.frame.codes[0]});
            for (size_t l = 1; l < audio_tables_.size(); ++l)
                r = add(r, embed_rows(audio_tables_[l],
                                      {static_cast<size_t>(it.frame.codes[l])}));
            rows.push_back(r);
            break;
        }
        case ItemKind::Switch:
            rows.push_back(embed_rows(text_table_, {it.sw == SwitchKind::ToAudio
                                                        ? cfg_.scheme.text_to_audio()
                                                        : cfg_.scheme.audio_to_text()}));
            break;
        }
    }
    return concat_rows(rows);
}

Tensor InterleavedLM::backbone_forward(const Tensor& rows) const {
    return backbone_.forward(rows);
}

Tensor InterleavedLM::text_logits(const Tensor& h) const { return text_head_.forward(h); }

Tensor InterleavedLM::audio_head_logits(const Tensor& state_row,
                                        const std::vector<uint16_t>& prev) const {
    ++head_calls_;
    const size_t depth = cfg_.scheme.audio_depth;
    if (prev.size() >= depth)
        throw std::invalid_argument("audio head: " + std::to_string(prev.size()) +
                                    " codes given, stack depth is " + std::to_string(depth));
    if (state_row.ndim() != 2 || state_row.rows() != 1 || state_row.cols() != cfg_.dim)
        throw std::invalid_argument("audio head: state must be a single backbone row");
    std::vector<Tensor> rows;
    rows.reserve(prev.size() + 1);
    rows.push_back(depth_proj_.forward(state_row));
    for (size_t l = 0; l < prev.size(); ++l) {
        if (prev[l] >= cfg_.scheme.audio_entries)
            throw std::out_of_range("audio head: code " + std::to_string(prev[l]) +
                                    " out of range");
        rows.push_back(embed_rows(depth_tables_[l], {static_cast<size_t>(prev[l])}));
    }
    const Tensor h = depth_.forward(concat_rows(rows));
    return depth_heads_[prev.size()].forward(slice_rows(h, prev.size(), 1));
}

CodeFrame InterleavedLM::decode_frame(const Tensor& state_row, Rng* sampler) const {
    CodeFrame f;
    f.codes.reserve(cfg_.scheme.audio_depth);
    for (size_t l = 0; l < cfg_.scheme.audio_depth; ++l) {
        const Tensor logits = audio_head_logits(state_row, f.codes);
        f.codes.push_back(static_cast<uint16_t>(pick_index(logits.data(), nullptr, sampler)));
    }
    return f;
}

size_t InterleavedLM::sample_symbol(const Tensor& logits_row, Rng* sampler) const {
    const TokenScheme& s = cfg_.scheme;
    std::vector<char> allowed(s.total_symbols(), 1);
    allowed[s.bos()] = 0;           // opener only
    allowed[s.text_to_audio()] = 0; // switching is the policy's call
    allowed[s.audio_to_text()] = 0;
    return pick_index(logits_row.data(), &allowed, sampler);
}

InterleavedSequence InterleavedLM::generate(const InterleavedSequence& prompt,
                                            const GenPolicy& policy) const {
    if (policy.text_run == 0 || policy.audio_run == 0)
        throw std::invalid_argument("generation policy: run lengths must be positive");
    const Violation pv = validate(prompt, cfg_.scheme, true);
    if (!pv.ok) throw std::invalid_argument("generate: invalid prompt, " + pv.what);

    InterleavedSequence seq = prompt;
    if (seq.items.empty() && policy.max_len > 0)
        seq.items.push_back(Item::text(cfg_.scheme.bos()));

    // Mode and within-run progress as the prompt leaves them.
    bool in_audio = false;
    size_t run = 0;
    for (const Item& it : seq.items) {
        switch (it.kind) {
        case ItemKind::Switch:
            in_audio = it.sw == SwitchKind::ToAudio;
            run = 0;
            break;
        case ItemKind::Audio:
            ++run;
            break;
        case ItemKind::Text:
            if (it.text_id < cfg_.scheme.text_vocab) ++run; // markers sit outside runs
            break;
        }
    }
    if (in_audio && seq.items.size() + 1 > policy.max_len)
        throw std::invalid_argument("generate: no room to close the prompt's open audio span");

    Rng sampler_state(policy.seed);
    Rng* sampler = policy.greedy ? nullptr : &sampler_state;
    bool terminated = !seq.items.empty() && seq.items.back().kind == ItemKind::Text &&
                      seq.items.back().text_id == cfg_.scheme.eos();

    while (!terminated && seq.items.size() < policy.max_len) {
        const size_t n = seq.items.size();
        if (!in_audio) {
            // A finished text run opens an audio span when the budget
            // still fits switch + one frame + close.
            if (run >= policy.text_run && n + 3 <= policy.max_len) {
                seq.items.push_back(Item::switch_to(SwitchKind::ToAudio));
                in_audio = true;
                run = 0;
                continue;
            }
            const Tensor h = backbone_forward(embed(seq));
            const size_t id = sample_symbol(text_logits(slice_rows(h, n - 1, 1)), sampler);
            seq.items.push_back(Item::text(id));
            if (id == cfg_.scheme.eos())
                terminated = true;
            else
                ++run;
        } else {
            if (run >= policy.audio_run || n + 2 > policy.max_len) {
                seq.items.push_back(Item::switch_to(SwitchKind::ToText));
                in_audio = false;
                run = 0;
                continue;
            }
            const Tensor h = backbone_forward(embed(seq));
            CodeFrame f = decode_frame(slice_rows(h, n - 1, 1), sampler);
            seq.items.push_back(Item::audio(std::move(f)));
            ++run;
        }
    }

    const Violation out = validate(seq, cfg_.scheme, false);
    if (!out.ok) throw std::logic_error("generate: produced " + out.what);
    return seq;
}

std::vector<Tensor> InterleavedLM::trainable_params() const {
    std::vector<Tensor> out;
    out.push_back(text_table_);
    for (const Tensor& t : audio_tables_) out.push_back(t);
    for (const Tensor& t : backbone_.params()) out.push_back(t);
    text_head_.collect(out);
    depth_proj_.collect(out);
    for (const Tensor& t : depth_tables_) out.push_back(t);
    for (const Tensor& t : depth_.params()) out.push_back(t);
    for (const Linear& h : depth_heads_) h.collect(out);
    return out;
}

NamedTensors InterleavedLM::named_tensors() const {
    NamedTensors out;
    out.emplace_back("embed.text", text_table_);
    for (size_t l = 0; l < audio_tables_.size(); ++l)
        out.emplace_back("embed.audio" + std::to_string(l), audio_tables_[l]);
    backbone_.named("backbone", out);
    text_head_.named("text_head", out);
    depth_proj_.named("depth.proj", out);
    for (size_t l = 0; l < depth_tables_.size(); ++l)
        out.emplace_back("depth.embed" + std::to_string(l), depth_tables_[l]);
    depth_.named("depth.tf", out);
    for (size_t l = 0; l < depth_heads_.size(); ++l)
        depth_heads_[l].named("depth.head" + std::to_string(l), out);
    return out;
}

void InterleavedLM::save(const std::string& path) const { save_checkpoint(path, named_tensors()); }

void InterleavedLM::load(const std::string& path) {
    load_named(named_tensors(), load_checkpoint(path));
}

VisualProjector VisualProjector::init(size_t in_dim, size_t hidden, size_t out_dim, Rng& rng) {
    VisualProjector p;
    p.in_dim = in_dim;
    p.hidden = hidden;
    p.out_dim = out_dim;
    p.fc1 = Linear::init(4 * in_dim, hidden, rng, 1.0 / std::sqrt(static_cast<double>(4 * in_dim)));
    p.fc2 = Linear::init(hidden, out_dim, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
    return p;
}

Tensor VisualProjector::merged(const Tensor& grid, size_t h, size_t w) const {
    if (h == 0 || w == 0 || h % 2 != 0 || w % 2 != 0)
        throw std::invalid_argument("visual projector: grid sides must be even, got " +
                                    std::to_string(h) + "x" + std::to_string(w));
    if (grid.ndim() != 2 || grid.rows() != h * w || grid.cols() != in_dim)
        throw std::invalid_argument("visual projector: grid must be [" + std::to_string(h * w) +
                                    ", " + std::to_string(in_dim) + "]");
    return merge_2x2(grid, h, w);
}

Tensor VisualProjector::forward(const Tensor& grid, size_t h, size_t w) const {
    return fc2.forward(gelu(fc1.forward(merged(grid, h, w))));
}

void VisualProjector::collect(std::vector<Tensor>& out) const {
    fc1.collect(out);
    fc2.collect(out);
}

void VisualProjector::named(const std::string& prefix, NamedTensors& out) const {
    fc1.named(prefix + ".fc1", out);
    fc2.named(prefix + ".fc2", out);
}

} // namespace omni
