#include "consisid/nn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "consisid/errors.hpp"
#include "consisid/io.hpp"
#include "consisid/rng.hpp"

namespace csid::nn {

Var ParamStore::add(const std::string& name, ag::Shape shape, Init init, double scale) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    const std::size_t n = ag::shape_numel(shape);
    std::vector<double> data(n, 0.0);
    Rng rng(derive_seed(seed_, name));
    const int fan_in = shape.size() >= 2 ? shape[0] : static_cast<int>(n);
    switch (init) {
        case Init::Zeros:
            break;
        case Init::Ones:
            std::fill(data.begin(), data.end(), 1.0);
            break;
        case Init::FanIn: {
            const double bound = scale / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
            for (auto& v : data) v = (2.0 * uniform01(rng) - 1.0) * bound;
            break;
        }
        case Init::Normal:
            for (auto& v : data) v = scale * standard_normal(rng);
            break;
    }
    Var v = Var::parameter(std::move(shape), std::move(data));
    index_[name] = entries_.size();
    entries_.emplace_back(name, v);
    return v;
}

Var ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
    return entries_[it->second].second;
}

std::size_t ParamStore::numel() const {
    std::size_t n = 0;
    for (const auto& [_, v] : entries_) n += v.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [_, v] : entries_) {
        Var h = v;
        h.zero_grad();
    }
}

void ParamStore::set_trainable(const std::string& prefix, bool on) {
    for (auto& [name, v] : entries_) {
        if (name.rfind(prefix, 0) == 0) {
            Var h = v;
            h.set_requires_grad(on);
        }
    }
}

std::vector<Var> ParamStore::trainable() const {
    std::vector<Var> out;
    for (const auto& [_, v] : entries_)
        if (v.requires_grad()) out.push_back(v);
    return out;
}

void ParamStore::copy_values_from(const ParamStore& other) {
    for (auto& [name, v] : entries_) {
        if (!other.contains(name)) continue;
        Var src = other.get(name);
        if (src.numel() != v.numel()) throw std::invalid_argument("shape mismatch copying " + name);
        Var dst = v;
        std::copy(src.value().begin(), src.value().end(), dst.mutable_value().begin());
    }
}

Linear::Linear(ParamStore& ps, const std::string& name, int in, int out, bool with_bias, bool zero_init) {
    weight = ps.add(name + ".weight", {in, out}, zero_init ? Init::Zeros : Init::FanIn);
    if (with_bias) bias = ps.add(name + ".bias", {out}, Init::Zeros);
}

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, int dim) {
    gain = ps.add(name + ".gain", {dim}, Init::Ones);
    bias = ps.add(name + ".bias", {dim}, Init::Zeros);
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, int cin, int cout, int k, int s, int p)
    : kernel(k), stride(s), pad(p) {
    // FanIn on a [Cout, Cin*k*k] table would read Cout as fan-in; scale explicitly.
    const double fan_in = static_cast<double>(cin * k * k);
    weight = ps.add(name + ".weight", {cout, cin * k * k}, Init::Normal, std::sqrt(2.0 / fan_in) * 0.7);
    bias = ps.add(name + ".bias", {cout}, Init::Zeros);
}

Mlp::Mlp(ParamStore& ps, const std::string& name, int dim, int hidden, bool zero_out)
    : fc1(ps, name + ".fc1", dim, hidden), fc2(ps, name + ".fc2", hidden, dim, true, zero_out) {}

Var chw_to_tokens(const Var& x) {
    if (x.shape().size() != 3) throw std::invalid_argument("chw_to_tokens: expected [C,H,W]");
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    return ag::transpose(ag::reshape(x, {c, hw}));
}

std::vector<double> bilinear_matrix(int in_h, int in_w, int out_h, int out_w) {
    if (in_h < 1 || in_w < 1 || out_h < 1 || out_w < 1) throw std::invalid_argument("bilinear_matrix: empty grid");
    std::vector<double> m(static_cast<std::size_t>(out_h) * out_w * in_h * in_w, 0.0);
    auto axis = [](int out_i, int in_n, int out_n, int& i0, int& i1, double& frac) {
        const double src = (out_i + 0.5) * static_cast<double>(in_n) / out_n - 0.5;
        const double cl = std::clamp(src, 0.0, static_cast<double>(in_n - 1));
        i0 = static_cast<int>(std::floor(cl));
        i1 = std::min(i0 + 1, in_n - 1);
        frac = cl - i0;
    };
    for (int oy = 0; oy < out_h; ++oy) {
        int y0, y1;
        double fy;
        axis(oy, in_h, out_h, y0, y1, fy);
        for (int ox = 0; ox < out_w; ++ox) {
            int x0, x1;
            double fx;
            axis(ox, in_w, out_w, x0, x1, fx);
            double* row = m.data() + static_cast<std::size_t>(oy * out_w + ox) * in_h * in_w;
            row[y0 * in_w + x0] += (1 - fy) * (1 - fx);
            row[y0 * in_w + x1] += (1 - fy) * fx;
            row[y1 * in_w + x0] += fy * (1 - fx);
            row[y1 * in_w + x1] += fy * fx;
        }
    }
    return m;
}

Var resize_tokens(const Var& tokens, int in_h, int in_w, int out_h, int out_w) {
    if (tokens.rows() != in_h * in_w) throw std::invalid_argument("resize_tokens: token count mismatch");
    if (in_h == out_h && in_w == out_w) return tokens;
    Var m = Var::constant({out_h * out_w, in_h * in_w}, bilinear_matrix(in_h, in_w, out_h, out_w));
    return ag::matmul(m, tokens);
}

Var image_to_chw(const std::vector<float>& hwc, int h, int w, int c) {
    if (hwc.size() != static_cast<std::size_t>(h) * w * c) throw std::invalid_argument("image_to_chw: size mismatch");
    std::vector<double> out(hwc.size());
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int k = 0; k < c; ++k)
                out[(static_cast<std::size_t>(k) * h + y) * w + x] =
                    2.0 * static_cast<double>(hwc[(static_cast<std::size_t>(y) * w + x) * c + k]) - 1.0;
    return Var::constant({c, h, w}, std::move(out));
}

std::vector<double> sinusoidal_embedding(double t, int dim) {
    std::vector<double> out(dim, 0.0);
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / std::max(half, 1));
        out[i] = std::sin(t * freq);
        out[half + i] = std::cos(t * freq);
    }
    return out;
}

void AdamW::step(const std::vector<Var>& params, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (const auto& p : params) {
        auto* node = p.node();
        if (node->grad.size() != node->value.size()) continue;
        auto& [m, v] = moments_[node];
        if (m.size() != node->value.size()) {
            m.assign(node->value.size(), 0.0);
            v.assign(node->value.size(), 0.0);
        }
        const bool decay = node->shape.size() >= 2 && opt_.weight_decay > 0.0;
        for (std::size_t i = 0; i < node->value.size(); ++i) {
            const double g = node->grad[i];
            m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
            v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
            if (decay) node->value[i] -= lr * opt_.weight_decay * node->value[i];
            node->value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
        }
    }
}

double cosine_with_restarts(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, int cycles) {
    if (step < warmup_steps) return static_cast<double>(step + 1) / static_cast<double>(std::max<std::int64_t>(warmup_steps, 1));
    const double span = static_cast<double>(std::max<std::int64_t>(total_steps - warmup_steps, 1));
    const double progress = static_cast<double>(step - warmup_steps) / span;
    if (progress >= 1.0) return 0.0;
    const double phase = std::fmod(static_cast<double>(std::max(cycles, 1)) * progress, 1.0);
    return 0.5 * (1.0 + std::cos(3.141592653589793 * phase));
}

double global_grad_norm(const std::vector<Var>& params) {
    double s = 0.0;
    for (const auto& p : params)
        for (double g : p.grad()) s += g * g;
    return std::sqrt(s);
}

void clip_grad_norm(const std::vector<Var>& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (!(norm > max_norm) || !std::isfinite(norm)) return;
    const double s = max_norm / norm;
    for (auto p : params)
        for (auto& g : p.mutable_grad()) g *= s;
}

namespace {
constexpr char kCkptMagic[4] = {'C', 'S', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const std::string& header, const std::vector<const ParamStore*>& stores) {
    io::BinaryWriter w;
    w.put_bytes(std::string_view(kCkptMagic, 4));
    w.put<std::uint32_t>(kCkptVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(header.size()));
    w.put_bytes(header);
    std::uint32_t count = 0;
    for (const auto* s : stores) count += static_cast<std::uint32_t>(s->entries().size());
    w.put<std::uint32_t>(count);
    for (const auto* s : stores) {
        for (const auto& [name, v] : s->entries()) {
            w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
            w.put_bytes(name);
            w.put<std::uint32_t>(static_cast<std::uint32_t>(v.shape().size()));
            for (int d : v.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
            w.put<std::uint8_t>(1);
            w.put_array(v.value().data(), v.numel());
        }
    }
    io::write_file_atomic(path, w.buffer());
}

Checkpoint read_checkpoint(const std::string& path) {
    io::BinaryReader r(io::read_file(path));
    if (r.get_bytes(4) != std::string(kCkptMagic, 4)) throw CorruptFileError("bad checkpoint magic");
    if (r.get<std::uint32_t>() != kCkptVersion) throw CorruptFileError("unsupported checkpoint version");
    Checkpoint ck;
    ck.header = r.get_bytes(r.get<std::uint32_t>());
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.get_bytes(r.get<std::uint16_t>());
        const auto ndim = r.get<std::uint32_t>();
        if (ndim > 8) throw CorruptFileError("implausible tensor rank");
        ag::Shape shape(ndim);
        std::size_t n = 1;
        for (auto& d : shape) {
            d = static_cast<int>(r.get<std::uint32_t>());
            n *= static_cast<std::size_t>(d);
        }
        const auto dtype = r.get<std::uint8_t>();
        std::vector<double> data(n);
        if (dtype == 1) {
            r.get_array(data.data(), n);
        } else if (dtype == 0) {
            std::vector<float> f(n);
            r.get_array(f.data(), n);
            std::copy(f.begin(), f.end(), data.begin());
        } else {
            throw CorruptFileError("unknown tensor dtype");
        }
        ck.tensors.emplace_back(std::move(name), std::make_pair(std::move(shape), std::move(data)));
    }
    if (!r.at_end()) throw CorruptFileError("trailing bytes in checkpoint");
    return ck;
}

void load_into(const Checkpoint& ckpt, ParamStore& store) {
    std::map<std::string, const std::pair<ag::Shape, std::vector<double>>*> by_name;
    for (const auto& [name, t] : ckpt.tensors) by_name[name] = &t;
    for (const auto& [name, v] : store.entries()) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw CorruptFileError("checkpoint lacks parameter " + name);
        if (it->second->first != v.shape()) throw CorruptFileError("shape mismatch for parameter " + name);
        Var dst = v;
        std::copy(it->second->second.begin(), it->second->second.end(), dst.mutable_value().begin());
    }
}

}  // namespace csid::nn
