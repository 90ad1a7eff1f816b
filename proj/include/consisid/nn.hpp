#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "consisid/autograd.hpp"

namespace csid::nn {

using ag::Var;

enum class Init { Zeros, Ones, FanIn, Normal };

// Ordered table of named parameters. Initial values are a pure function of
// (seed, name), so two stores built with the same seed agree on every shared
// name no matter which other parameters were created in between.
class ParamStore {
public:
    explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

    Var add(const std::string& name, ag::Shape shape, Init init, double scale = 1.0);
    Var get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
    std::size_t numel() const;
    std::uint64_t seed() const { return seed_; }

    void zero_grad();
    // Enables/disables gradient recording for every parameter whose name starts with prefix.
    void set_trainable(const std::string& prefix, bool on);
    std::vector<Var> trainable() const;

    // Copies values (not graph handles) from another store for all names present in both.
    void copy_values_from(const ParamStore& other);

private:
    std::uint64_t seed_;
    std::vector<std::pair<std::string, Var>> entries_;
    std::map<std::string, std::size_t> index_;
};

struct Linear {
    Var weight;  // [in, out]
    Var bias;    // [out], may be null
    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, int in, int out, bool with_bias = true, bool zero_init = false);
    Var operator()(const Var& x) const { return ag::linear(x, weight, bias); }
    int in_features() const { return weight.dim(0); }
    int out_features() const { return weight.dim(1); }
};

struct LayerNorm {
    Var gain, bias;
    LayerNorm() = default;
    LayerNorm(ParamStore& ps, const std::string& name, int dim);
    Var operator()(const Var& x) const { return ag::layer_norm(x, gain, bias); }
};

struct Conv2d {
    Var weight, bias;
    int kernel = 3, stride = 1, pad = 1;
    Conv2d() = default;
    Conv2d(ParamStore& ps, const std::string& name, int cin, int cout, int kernel, int stride, int pad);
    Var operator()(const Var& x) const { return ag::conv2d(x, weight, bias, kernel, stride, pad); }
};

struct Mlp {
    Linear fc1, fc2;
    Mlp() = default;
    Mlp(ParamStore& ps, const std::string& name, int dim, int hidden, bool zero_out = false);
    Var operator()(const Var& x) const { return fc2(ag::gelu(fc1(x))); }
};

// [C,H,W] feature map -> [H*W, C] tokens (row-major spatial order).
Var chw_to_tokens(const Var& x);

// Constant [out_h*out_w, in_h*in_w] matrix for bilinear resampling with
// half-pixel centers (align_corners = false); apply as matmul(M, tokens).
std::vector<double> bilinear_matrix(int in_h, int in_w, int out_h, int out_w);
Var resize_tokens(const Var& tokens, int in_h, int in_w, int out_h, int out_w);

// Image in [H,W,C] float layout scaled to [-1,1], as a [C,H,W] constant.
Var image_to_chw(const std::vector<float>& hwc, int h, int w, int c);

std::vector<double> sinusoidal_embedding(double t, int dim);

class AdamW {
public:
    struct Options {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
    };
    AdamW() : AdamW(Options{}) {}
    explicit AdamW(Options opt) : opt_(opt) {}

    // Applies one update to every parameter in `params` that has a gradient.
    void step(const std::vector<Var>& params, double lr);
    std::int64_t steps() const { return t_; }

private:
    Options opt_;
    std::int64_t t_ = 0;
    std::map<const ag::Node*, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// Linear warmup followed by cosine decay with hard restarts.
double cosine_with_restarts(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps, int cycles);

double global_grad_norm(const std::vector<Var>& params);
void clip_grad_norm(const std::vector<Var>& params, double max_norm);

// Checkpoint file: magic "CSCK", u32 version, u32 header length, header text
// (JSON config), u32 tensor count, then per tensor: u16 name length, name,
// u32 ndim, u32 dims[ndim], u8 dtype (0 = f32, 1 = f64), little-endian data.
struct Checkpoint {
    std::string header;
    std::vector<std::pair<std::string, std::pair<ag::Shape, std::vector<double>>>> tensors;
};

void save_checkpoint(const std::string& path, const std::string& header, const std::vector<const ParamStore*>& stores);
Checkpoint read_checkpoint(const std::string& path);
// Loads every parameter of `store`; missing names or shape mismatches throw CorruptFileError.
void load_into(const Checkpoint& ckpt, ParamStore& store);

}  // namespace csid::nn
