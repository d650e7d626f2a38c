#include "omni/flowmatch.hpp"

#include <cmath>
#include <stdexcept>

#include "omni/checkpoint.hpp"

namespace omni {

Tensor ot_interpolant(const Tensor& x0, const Tensor& x1, double t, double sigma_min) {
    return add(scale(x0, 1.0 - (1.0 - sigma_min) * t), scale(x1, t));
}

Tensor ot_target(const Tensor& x0, const Tensor& x1, double sigma_min) {
    return sub(x1, scale(x0, 1.0 - sigma_min));
}

VectorFieldNet::VectorFieldNet(const CFMConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (!(cfg.sigma_min >= 0.0 && cfg.sigma_min < 1.0))
        throw std::runtime_error("flow: sigma_min must lie in [0,1), got " +
                                 std::to_string(cfg.sigma_min));
    if (cfg.time_dim % 2 != 0) throw std::runtime_error("flow: time_dim must be even");
    const size_t C = cfg.hidden;
    auto norm = [&C] {
        return Norm{Tensor::full({C}, 1.0, true), Tensor::zeros({C}, true)};
    };
    stem_ = Conv1d::init(cfg.mel_bins + cfg.cond_dim, C, 3, 1, 1, rng);
    norm_stem_ = norm();
    // each time projection emits a per-channel scale and shift pair
    time_stem_ = Linear::init(cfg.time_dim + 2, 2 * C, rng, 0.02);
    down_ = Conv1d::init(C, C, 2, 2, 0, rng);
    norm_down_ = norm();
    time_down_ = Linear::init(cfg.time_dim + 2, 2 * C, rng, 0.02);
    for (size_t i = 0; i < cfg.mid_blocks; ++i) {
        Mid m;
        m.c1 = Conv1d::init(C, C, 3, 1, 1, rng);
        m.c2 = Conv1d::init(C, C, 3, 1, 1, rng);
        m.norm = norm();
        m.time = Linear::init(cfg.time_dim + 2, 2 * C, rng, 0.02);
        mids_.push_back(std::move(m));
    }
    up_ = Conv1d::init(C, C, 3, 1, 1, rng);
    norm_up_ = norm();
    time_up_ = Linear::init(cfg.time_dim + 2, 2 * C, rng, 0.02);
    head_ = Conv1d::init(C, cfg.mel_bins, 3, 1, 1, rng);
    // the head starts near zero so the untrained field is almost still
    for (double& v : head_.w.data()) v *= 0.02;
    gate_ = Linear::init(cfg.time_dim + 2, 1, rng, 0.02);
}

Tensor VectorFieldNet::time_features(double t) const {
    // sinusoids plus the interpolant schedule: gamma and its log give
    // the blocks direct access to how far the path has collapsed
    std::vector<double> f(cfg_.time_dim + 2);
    const double g = std::max(1.0 - (1.0 - cfg_.sigma_min) * t, 0.05);
    f[cfg_.time_dim] = g;
    f[cfg_.time_dim + 1] = -std::log(g);
    const size_t half = cfg_.time_dim / 2;
    for (size_t i = 0; i < half; ++i) {
        const double freq = std::pow(
            1000.0, static_cast<double>(i) / static_cast<double>(half > 1 ? half - 1 : 1));
        f[2 * i] = std::sin(t * freq);
        f[2 * i + 1] = std::cos(t * freq);
    }
    return Tensor::from_data({1, cfg_.time_dim + 2}, std::move(f));
}

Tensor VectorFieldNet::forward(const Tensor& x, double t, const Tensor& cond) const {
    if (x.ndim() != 2 || x.rows() != cfg_.mel_bins)
        throw std::runtime_error("flow: expected [" + std::to_string(cfg_.mel_bins) +
                                 ", T] state, got " + shape_str(x.shape()));
    if (cond.ndim() != 2 || cond.rows() != cfg_.cond_dim || cond.cols() != x.cols())
        throw std::runtime_error("flow: conditioning shape " + shape_str(cond.shape()) +
                                 " does not match [" + std::to_string(cfg_.cond_dim) + ", " +
                                 std::to_string(x.cols()) + "]");
    if (x.cols() % 2 != 0)
        throw std::runtime_error("flow: frame count must be even for the down block");

    Tensor tf = time_features(t);
    const size_t C = cfg_.hidden;
    // normalize channels at each position, then apply the time scale
    // and shift; the gain rides on 1 so an untrained projection leaves
    // the features untouched
    auto stage = [&](const Norm& n, const Linear& proj, const Tensor& h) {
        Tensor nh = transpose(layernorm(transpose(h), n.g, n.b));
        Tensor sb = proj.forward(tf);
        Tensor gain = reshape(slice_cols(sb, 0, C), {C, 1});
        Tensor shift = reshape(slice_cols(sb, C, C), {C, 1});
        const size_t cols = h.cols();
        return add(mul(nh, upsample_repeat1d(add_scalar(gain, 1.0), cols)),
                   upsample_repeat1d(shift, cols));
    };

    Tensor h = gelu(stage(norm_stem_, time_stem_, stem_.forward(concat_rows({x, cond}))));
    Tensor skip = h;
    h = gelu(stage(norm_down_, time_down_, down_.forward(h)));
    for (const Mid& m : mids_) {
        Tensor r = m.c2.forward(gelu(stage(m.norm, m.time, m.c1.forward(gelu(h)))));
        h = add(h, r);
    }
    h = gelu(stage(norm_up_, time_up_, up_.forward(upsample_repeat1d(h, 2))));
    h = add(h, skip);
    // state bypass with a scalar time gain; the straight-line target
    // field is affine in x, so this path carries its x term directly
    Tensor g = upsample_repeat1d(gate_.forward(tf), x.cols());
    Tensor gx = mul(x, matmul(Tensor::full({cfg_.mel_bins, 1}, 1.0), g));
    return add(head_.forward(h), gx);
}

std::vector<Tensor> VectorFieldNet::params() const {
    std::vector<Tensor> out;
    stem_.collect(out);
    out.push_back(norm_stem_.g);
    out.push_back(norm_stem_.b);
    time_stem_.collect(out);
    down_.collect(out);
    out.push_back(norm_down_.g);
    out.push_back(norm_down_.b);
    time_down_.collect(out);
    for (const Mid& m : mids_) {
        m.c1.collect(out);
        m.c2.collect(out);
        out.push_back(m.norm.g);
        out.push_back(m.norm.b);
        m.time.collect(out);
    }
    up_.collect(out);
    out.push_back(norm_up_.g);
    out.push_back(norm_up_.b);
    time_up_.collect(out);
    head_.collect(out);
    gate_.collect(out);
    return out;
}

void VectorFieldNet::named(const std::string& prefix, NamedTensors& out) const {
    auto norm = [&out](const std::string& p, const Norm& n) {
        out.emplace_back(p + ".g", n.g);
        out.emplace_back(p + ".b", n.b);
    };
    stem_.named(prefix + ".stem", out);
    norm(prefix + ".norm_stem", norm_stem_);
    time_stem_.named(prefix + ".time_stem", out);
    down_.named(prefix + ".down", out);
    norm(prefix + ".norm_down", norm_down_);
    time_down_.named(prefix + ".time_down", out);
    for (size_t i = 0; i < mids_.size(); ++i) {
        const std::string p = prefix + ".mid" + std::to_string(i);
        mids_[i].c1.named(p + ".c1", out);
        mids_[i].c2.named(p + ".c2", out);
        norm(p + ".norm", mids_[i].norm);
        mids_[i].time.named(p + ".time", out);
    }
    up_.named(prefix + ".up", out);
    norm(prefix + ".norm_up", norm_up_);
    time_up_.named(prefix + ".time_up", out);
    head_.named(prefix + ".head", out);
    gate_.named(prefix + ".gate", out);
}

Tensor cfm_loss_at(const VectorFieldNet& net, const Tensor& x1, const Tensor& cond, double t,
                   const Tensor& x0) {
    if (x0.shape() != x1.shape())
        throw std::runtime_error("flow: x0 shape " + shape_str(x0.shape()) +
                                 " does not match x1 " + shape_str(x1.shape()));
    const double sigma = net.config().sigma_min;
    Tensor xt = ot_interpolant(x0, x1, t, sigma);
    Tensor u = ot_target(x0, x1, sigma);
    return mse_loss(net.forward(xt, t, cond), u);
}

Tensor cfm_loss(const VectorFieldNet& net, const Tensor& x1, const Tensor& cond, Rng& rng) {
    const double t = rng.uniform();
    Tensor x0 = Tensor::randn(x1.shape(), rng);
    return cfm_loss_at(net, x1, cond, t, detach(x0));
}

Tensor euler_integrate(const FieldFn& field, const Tensor& x0, size_t steps) {
    if (steps == 0) throw std::runtime_error("flow: euler steps must be at least 1");
    const double dt = 1.0 / static_cast<double>(steps);
    Tensor x = detach(x0);
    for (size_t k = 0; k < steps; ++k) {
        const double t = static_cast<double>(k) * dt;
        x = detach(add(x, scale(field(x, t), dt)));
    }
    return x;
}

Tensor euler_sample(const VectorFieldNet& net, const Tensor& cond, size_t steps, Rng& rng) {
    Tensor x0 = Tensor::randn({net.config().mel_bins, cond.cols()}, rng);
    FieldFn field = [&](const Tensor& x, double t) { return net.forward(x, t, cond); };
    return euler_integrate(field, x0, steps);
}

FlowRefiner::FlowRefiner(const CFMConfig& cfg)
    : cfg_(cfg), rng_(cfg.seed), net_(cfg, rng_) {
    opt_ = std::make_unique<Adam>(net_.params(), AdamConfig{1e-3, 0.9, 0.999, 1e-8});
}

Tensor FlowRefiner::cond_from_tokens(const AudioCodec& codec, const AudioTokenSeq& seq) const {
    if (seq.frames.empty()) throw std::runtime_error("flow: empty token sequence");
    if (codec.config().latent != cfg_.cond_dim)
        throw std::runtime_error("flow: codec latent width " +
                                 std::to_string(codec.config().latent) +
                                 " does not match cond_dim " + std::to_string(cfg_.cond_dim));
    Tensor rows = codec.rvq().decode_rows(seq.frames); // [T', latent]
    return upsample_repeat1d(transpose(rows), codec.config().downsample);
}

double FlowRefiner::train_step(const Tensor& x1, const Tensor& cond, Rng& rng) {
    Tensor loss = cfm_loss(net_, x1, cond, rng);
    std::vector<Tensor> params = net_.params();
    zero_grads(params);
    backward(loss);
    opt_->step();
    return loss.value();
}

Waveform FlowRefiner::refine(const AudioCodec& codec, const AudioTokenSeq& seq, size_t steps,
                             uint64_t sample_seed, size_t griffin_lim_iters) const {
    Tensor cond = cond_from_tokens(codec, seq);
    Rng rng(sample_seed);
    Tensor nm = euler_sample(net_, cond, steps, rng);

    MelSpectrogram m;
    m.n_mels = cfg_.mel_bins;
    m.frame_count = nm.cols();
    m.n_fft = codec.config().n_fft;
    m.hop_length = codec.config().hop;
    m.sample_rate = codec.config().sample_rate;
    m.values.resize(nm.size());
    for (size_t i = 0; i < nm.size(); ++i) {
        const double logmel = (nm.at(i) - 1.0) * kMelNormScale;
        m.values[i] = std::max(logmel, kLogMelFloor);
    }
    return griffin_lim(m, griffin_lim_iters);
}

NamedTensors FlowRefiner::named_tensors() const {
    NamedTensors out;
    net_.named("flow", out);
    return out;
}

void FlowRefiner::save(const std::string& path) const { save_checkpoint(path, named_tensors()); }

void FlowRefiner::load(const std::string& path) {
    load_named(named_tensors(), load_checkpoint(path));
}

} // namespace omni
