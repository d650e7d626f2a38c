#include "omni/orchestrator.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>
#include <utility>

#include <json.hpp>

#include "omni/adam.hpp"
#include "omni/hash.hpp"

namespace omni {

double normalize_score(double x, double x_min, double x_max) {
    if (!(x_max > x_min))
        throw std::invalid_argument("normalize_score: x_max must exceed x_min");
    return (x - x_min + 10.0) / (x_max - x_min + 10.0);
}

// ---- stage table -----------------------------------------------------

namespace {

MixtureSpec mix(std::vector<std::pair<std::string, double>> weights) {
    MixtureSpec m;
    m.weights = std::move(weights);
    return m;
}

} // namespace

std::vector<StageSpec> builtin_stages(Preset preset) {
    const bool desk = preset == Preset::Desk;
    const size_t seq = desk ? 512 : 4096;
    const size_t omni_seq = desk ? 512 : 65536;
    const size_t steps = desk ? 25 : 1000;

    std::vector<StageSpec> out;

    {
        StageSpec s;
        s.name = "image-I";
        s.trainable = {"visual_projector"};
        s.lr_overrides = {{"visual_projector", 1e-3}};
        s.mixture = mix({{"image", 1.0}});
        s.max_seq_len = seq;
        s.steps = steps;
        out.push_back(std::move(s));
    }
    {
        StageSpec s;
        s.name = "image-II";
        s.trainable = {"visual_encoder", "visual_projector", "llm_backbone"};
        s.lr_overrides = {{"llm_backbone", 1e-5},
                          {"visual_projector", 1e-5},
                          {"visual_encoder", 1e-6}};
        s.mixture = mix({{"image", 0.6}, {"text", 0.4}});
        s.max_seq_len = seq;
        s.steps = steps;
        out.push_back(std::move(s));
    }
    {
        StageSpec s;
        s.name = "audio-I";
        s.trainable = {"audio_embed", "audio_head"};
        s.lr_overrides = {{"audio_embed", 1e-4}, {"audio_head", 1e-4}};
        s.mixture = mix({{"audio", 1.0}});
        s.max_seq_len = seq;
        s.steps = steps;
        out.push_back(std::move(s));
    }
    {
        StageSpec s;
        s.name = "audio-II";
        s.trainable = {"visual_projector", "llm_backbone", "audio_embed",
                       "audio_head"};
        s.lr_overrides = {{"visual_projector", 1e-5},
                          {"llm_backbone", 1e-5},
                          {"audio_embed", 1e-5},
                          {"audio_head", 1e-5}};
        s.mixture = mix({{"audio", 0.2}, {"image", 0.4}, {"text", 0.4}});
        s.max_seq_len = seq;
        s.steps = steps;
        out.push_back(std::move(s));
    }
    {
        StageSpec s;
        s.name = "omni";
        s.trainable = {"visual_encoder", "visual_projector", "llm_backbone",
                       "audio_embed", "audio_head"};
        s.lr_overrides = {{"visual_encoder", 4e-6},
                          {"visual_projector", 4e-6},
                          {"llm_backbone", 4e-6},
                          {"audio_embed", 4e-6},
                          {"audio_head", 4e-6}};
        s.mixture = mix({{"crossmodal", 1.0}});
        s.max_seq_len = omni_seq;
        s.steps = steps;
        out.push_back(std::move(s));
    }
    {
        StageSpec s;
        s.name = "sft-4.1"; // audio head stays frozen
        s.trainable = {"visual_encoder", "visual_projector", "llm_backbone",
                       "audio_embed"};
        s.mixture = mix({{"crossmodal", 1.0}});
        s.max_seq_len = seq;
        s.steps = steps;
        out.push_back(std::move(s));
    }
    {
        StageSpec s;
        s.name = "sft-4.2"; // speech-generation pass: head and embed only
        s.trainable = {"audio_head", "audio_embed"};
        s.mixture = mix({{"audio_gen", 1.0}});
        s.max_seq_len = seq;
        s.steps = steps;
        out.push_back(std::move(s));
    }

    return out;
}

StageSpec stage_by_name(const std::string& name, Preset preset) {
    for (auto& s : builtin_stages(preset))
        if (s.name == name) return s;
    throw std::invalid_argument(
        "unknown stage '" + name +
        "' (expected one of image-I, image-II, audio-I, audio-II, omni, "
        "sft-4.1, sft-4.2)");
}

// ---- model assembly --------------------------------------------------

namespace {

InterleaveConfig lm_config_for(const OmniModelConfig& c) {
    InterleaveConfig lc;
    lc.scheme.text_vocab = c.text_vocab;
    lc.scheme.audio_depth = 8;
    lc.scheme.audio_entries = c.audio_entries;
    lc.dim = c.lm_dim;
    lc.backbone_layers = 1;
    lc.backbone_heads = 4;
    lc.depth_dim = c.depth_dim;
    lc.depth_layers = 2;
    lc.depth_heads = 2;
    lc.seed = Rng(c.seed).fork(1).state();
    return lc;
}

RvqStack make_tokenizer(const OmniModelConfig& c) {
    RvqConfig rc;
    rc.layers = 8;
    rc.entries = c.audio_entries;
    rc.dim = 16;
    Rng r = Rng(c.seed).fork(2);
    return RvqStack(rc, r);
}

bool starts_with(const std::string& s, const std::string& prefix) {
    return s.rfind(prefix, 0) == 0;
}

bool lm_name_in_group(const std::string& group, const std::string& key) {
    if (group == "audio_embed") return starts_with(key, "embed.audio");
    if (group == "audio_head") return starts_with(key, "depth.");
    if (group == "llm_backbone")
        return key == "embed.text" || starts_with(key, "backbone.") ||
               starts_with(key, "text_head.");
    return false;
}

} // namespace

OmniModel::OmniModel(const OmniModelConfig& cfg)
    : cfg_(cfg), lm_(lm_config_for(cfg)), tok_(make_tokenizer(cfg)) {
    Rng vr = Rng(cfg.seed).fork(3);
    enc1_ = Linear::init(cfg.patch_dim, cfg.vis_hidden, vr, 0.1);
    enc2_ = Linear::init(cfg.vis_hidden, cfg.patch_dim, vr, 0.1);
    Rng pr = Rng(cfg.seed).fork(4);
    proj_ = VisualProjector::init(cfg.patch_dim, cfg.vis_hidden, cfg.lm_dim, pr);
    lm_named_ = lm_.named_tensors();
}

const std::vector<std::string>& OmniModel::group_names() {
    static const std::vector<std::string> names = {
        "visual_encoder", "visual_projector", "llm_backbone",
        "audio_embed",    "audio_head",       "audio_tokenizer",
    };
    return names;
}

bool OmniModel::has_group(const std::string& name) const {
    const auto& names = group_names();
    return std::find(names.begin(), names.end(), name) != names.end();
}

bool OmniModel::gradient_group(const std::string& name) const {
    if (!has_group(name))
        throw std::invalid_argument("unknown parameter group '" + name + "'");
    return name != "audio_tokenizer";
}

NamedTensors OmniModel::group_named(const std::string& name) const {
    if (!has_group(name))
        throw std::invalid_argument("unknown parameter group '" + name + "'");
    NamedTensors out;
    if (name == "visual_encoder") {
        enc1_.named("enc1", out);
        enc2_.named("enc2", out);
    } else if (name == "visual_projector") {
        proj_.named("proj", out);
    } else if (name == "audio_tokenizer") {
        out = tok_.named_tensors(); // snapshot of the EMA codebooks
    } else {
        for (const auto& [key, t] : lm_named_)
            if (lm_name_in_group(name, key)) out.emplace_back(key, t);
    }
    return out;
}

std::vector<Tensor> OmniModel::group_params(const std::string& name) const {
    if (!gradient_group(name))
        throw std::invalid_argument("group '" + name +
                                    "' is not gradient-trainable");
    std::vector<Tensor> out;
    for (const auto& [key, t] : group_named(name)) out.push_back(t);
    return out;
}

uint64_t OmniModel::group_checksum(const std::string& name) const {
    uint64_t h = fnv1a64(name);
    for (const auto& [key, t] : group_named(name)) {
        h = fnv1a64(key, h);
        const auto& v = t.data();
        h = fnv1a64(v.data(), v.size() * sizeof(double), h);
    }
    return h;
}

Tensor OmniModel::batch_loss(const std::string& source, size_t max_seq_len,
                             Rng& rng) const {
    const bool want_image = source == "image" || source == "crossmodal";
    const bool want_audio =
        source == "audio" || source == "audio_gen" || source == "crossmodal";
    if (!want_image && !want_audio && source != "text")
        throw std::invalid_argument("batch_loss: unknown data source '" +
                                    source + "'");
    if (max_seq_len == 0)
        throw std::invalid_argument("batch_loss: max_seq_len must be positive");

    const TokenScheme& sc = lm_.config().scheme;
    std::vector<Tensor> parts;

    // Plain next-symbol loss; every batch pushes something through the
    // backbone so llm_backbone always receives gradient when unfrozen.
    {
        const size_t len = std::min<size_t>(6, max_seq_len);
        InterleavedSequence seq;
        for (size_t i = 0; i < len; ++i)
            seq.items.push_back(Item::text(rng.below(sc.text_vocab)));
        Tensor h = lm_.backbone_forward(lm_.embed(seq));
        std::vector<size_t> targets;
        for (size_t i = 0; i < len; ++i) targets.push_back(rng.below(sc.text_vocab));
        parts.push_back(cross_entropy(lm_.text_logits(h), targets));
    }

    if (want_image && max_seq_len >= 8) {
        // 4x4 feature grid -> encoder -> 2x2 merge projector -> 4 rows
        // prepended to 4 text rows; loss reads the text tail.
        Tensor grid = Tensor::randn({16, cfg_.patch_dim}, rng);
        Tensor feats = enc2_.forward(gelu(enc1_.forward(grid)));
        Tensor vis = proj_.forward(feats, 4, 4);
        InterleavedSequence tail;
        for (size_t i = 0; i < 4; ++i)
            tail.items.push_back(Item::text(rng.below(sc.text_vocab)));
        Tensor rows = concat_rows({vis, lm_.embed(tail)});
        Tensor h = lm_.backbone_forward(rows);
        Tensor logits = lm_.text_logits(slice_rows(h, 4, 4));
        std::vector<size_t> targets;
        for (size_t i = 0; i < 4; ++i) targets.push_back(rng.below(sc.text_vocab));
        parts.push_back(cross_entropy(logits, targets));
    }

    if (want_audio && max_seq_len >= 8) {
        // Two text tokens, an audio span of one frame, close. The frame's
        // codes are supervised layer by layer through the depth head from
        // the backbone state at the opening switch.
        CodeFrame frame;
        for (size_t l = 0; l < sc.audio_depth; ++l)
            frame.codes.push_back(static_cast<uint16_t>(rng.below(sc.audio_entries)));
        InterleavedSequence seq;
        seq.items.push_back(Item::text(rng.below(sc.text_vocab)));
        seq.items.push_back(Item::text(rng.below(sc.text_vocab)));
        seq.items.push_back(Item::switch_to(SwitchKind::ToAudio));
        seq.items.push_back(Item::audio(frame));
        seq.items.push_back(Item::switch_to(SwitchKind::ToText));
        Tensor h = lm_.backbone_forward(lm_.embed(seq));

        std::vector<size_t> targets;
        for (size_t i = 0; i < seq.items.size(); ++i)
            targets.push_back(rng.below(sc.text_vocab));
        parts.push_back(cross_entropy(lm_.text_logits(h), targets));

        Tensor state = slice_rows(h, 2, 1);
        std::vector<uint16_t> prefix;
        for (size_t l = 0; l < sc.audio_depth; ++l) {
            Tensor logits = lm_.audio_head_logits(state, prefix);
            parts.push_back(scale(
                cross_entropy(logits, {static_cast<size_t>(frame.codes[l])}),
                1.0 / static_cast<double>(sc.audio_depth)));
            prefix.push_back(frame.codes[l]);
        }
    }

    Tensor total = parts[0];
    for (size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
    return total;
}

// ---- run log ---------------------------------------------------------

namespace {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(v));
    return buf;
}

nlohmann::json checksum_object(
    const std::vector<std::pair<std::string, uint64_t>>& sums) {
    nlohmann::json obj = nlohmann::json::object();
    for (const auto& [group, sum] : sums) obj[group] = hex64(sum);
    return obj;
}

} // namespace

std::string RunLog::to_jsonl() const {
    std::string out;
    nlohmann::json start;
    start["event"] = "start";
    start["stage"] = stage;
    start["trainable"] = trainable;
    start["checksums"] = checksum_object(before);
    out += start.dump();
    out += '\n';
    for (const auto& r : steps) {
        nlohmann::json s;
        s["event"] = "step";
        s["step"] = r.step;
        s["source"] = r.source;
        s["loss"] = r.loss;
        out += s.dump();
        out += '\n';
    }
    nlohmann::json end;
    end["event"] = "end";
    end["checksums"] = checksum_object(after);
    out += end.dump();
    out += '\n';
    return out;
}

uint64_t RunLog::digest() const { return fnv1a64(to_jsonl()); }

// ---- stage runner ----------------------------------------------------

RunLog run_stage(OmniModel& model, const StageSpec& spec, uint64_t seed) {
    if (spec.max_seq_len == 0)
        throw std::invalid_argument("stage " + spec.name +
                                    ": max_seq_len must be positive");
    if (!(spec.base_lr > 0.0))
        throw std::invalid_argument("stage " + spec.name +
                                    ": base_lr must be positive");
    std::set<std::string> trainable_set;
    for (const auto& g : spec.trainable) {
        if (!model.has_group(g))
            throw std::invalid_argument("stage " + spec.name +
                                        ": unknown parameter group '" + g + "'");
        if (!model.gradient_group(g))
            throw std::invalid_argument("stage " + spec.name + ": group '" + g +
                                        "' is not gradient-trainable");
        if (!trainable_set.insert(g).second)
            throw std::invalid_argument("stage " + spec.name +
                                        ": duplicate group '" + g + "'");
    }
    for (const auto& [g, lr] : spec.lr_overrides) {
        if (!trainable_set.count(g))
            throw std::invalid_argument("stage " + spec.name +
                                        ": lr override for non-trainable group '" +
                                        g + "'");
        if (!(lr > 0.0))
            throw std::invalid_argument("stage " + spec.name +
                                        ": lr for group '" + g +
                                        "' must be positive");
    }

    std::vector<std::string> sources;
    sources.reserve(spec.mixture.weights.size());
    for (const auto& [name, weight] : spec.mixture.weights)
        sources.push_back(name);

    Rng base(seed);
    MixtureSampler sampler(spec.mixture, sources, base.fork(1).state());

    RunLog log;
    log.stage = spec.name;
    log.trainable = spec.trainable;
    for (const auto& g : OmniModel::group_names())
        log.before.emplace_back(g, model.group_checksum(g));

    std::vector<Adam> optimizers;
    optimizers.reserve(spec.trainable.size());
    for (const auto& g : spec.trainable) {
        AdamConfig ac;
        auto it = spec.lr_overrides.find(g);
        ac.lr = it != spec.lr_overrides.end() ? it->second : spec.base_lr;
        optimizers.emplace_back(model.group_params(g), ac);
    }

    // Grad buffers of every gradient group get cleared each step; frozen
    // groups accumulate nothing across steps and never see an optimizer.
    std::vector<Tensor> all_grad_params;
    for (const auto& g : OmniModel::group_names())
        if (g != "audio_tokenizer")
            for (auto& t : model.group_params(g)) all_grad_params.push_back(t);

    for (size_t s = 0; s < spec.steps; ++s) {
        std::string source = sampler.next();
        Rng step_rng = base.fork(1000 + s);
        zero_grads(all_grad_params);
        Tensor loss = model.batch_loss(source, spec.max_seq_len, step_rng);
        backward(loss);
        for (auto& opt : optimizers) opt.step();
        StepRecord rec;
        rec.step = s;
        rec.source = std::move(source);
        rec.loss = loss.value();
        log.steps.push_back(std::move(rec));
    }

    for (const auto& g : OmniModel::group_names())
        log.after.emplace_back(g, model.group_checksum(g));
    return log;
}

// ---- config files ----------------------------------------------------

std::map<std::string, std::string> read_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    auto trim = [](const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string();
        size_t b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
    };
    std::map<std::string, std::string> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: line " + std::to_string(lineno) +
                                     ": expected key=value");
        std::string key = trim(t.substr(0, eq));
        if (key.empty())
            throw std::runtime_error("config: line " + std::to_string(lineno) +
                                     ": empty key");
        out[key] = trim(t.substr(eq + 1));
    }
    return out;
}

} // namespace omni
