#pragma once

#include "musekit/optim.hpp"
#include "musekit/rng.hpp"
#include "musekit/tape.hpp"

#include <string>
#include <vector>

namespace musekit {

// Parameter registration + forward helpers shared by the transformer and
// convolutional models. Parameters are addressed by hierarchical names;
// weight matrices carry the decay flag, biases/norms/embeddings do not.

template <class T>
TensorT<T> gaussian_init(std::vector<int> shape, RngState & rng, double stddev) {
    TensorT<T> t = TensorT<T>::zeros(shape);
    for (auto & x : t.data) x = (T)(stddev * rng.normal());
    return t;
}

template <class T>
void register_linear(ParamStoreT<T> & ps, RngState & rng, const std::string & p, int in, int out,
                     double stddev = 0.02) {
    ps.add(p + ".w", gaussian_init<T>({in, out}, rng, stddev), true);
    ps.add(p + ".b", TensorT<T>::zeros({out}), false);
}

template <class T>
Var linear_fw(TapeT<T> & tape, ParamStoreT<T> & ps, const std::string & p, Var x) {
    return tape.bias_add(tape.matmul(x, ps.var(p + ".w")), ps.var(p + ".b"));
}

template <class T>
void register_layernorm(ParamStoreT<T> & ps, const std::string & p, int dim) {
    ps.add(p + ".g", TensorT<T>::full({dim}, T(1)), false);
    ps.add(p + ".b", TensorT<T>::zeros({dim}), false);
}

template <class T>
Var layernorm_fw(TapeT<T> & tape, ParamStoreT<T> & ps, const std::string & p, Var x) {
    return tape.layernorm(x, ps.var(p + ".g"), ps.var(p + ".b"));
}

template <class T>
void register_attention(ParamStoreT<T> & ps, RngState & rng, const std::string & p, int dim) {
    register_linear(ps, rng, p + ".q", dim, dim);
    register_linear(ps, rng, p + ".k", dim, dim);
    register_linear(ps, rng, p + ".v", dim, dim);
    register_linear(ps, rng, p + ".o", dim, dim);
}

// queries from x, keys/values from ctx (ctx == x for self-attention)
template <class T>
Var attention_fw(TapeT<T> & tape, ParamStoreT<T> & ps, const std::string & p, Var x, Var ctx,
                 int heads, const std::vector<uint8_t> & ctx_valid = {}) {
    Var q = linear_fw(tape, ps, p + ".q", x);
    Var k = linear_fw(tape, ps, p + ".k", ctx);
    Var v = linear_fw(tape, ps, p + ".v", ctx);
    Var o = tape.mha(q, k, v, heads, ctx_valid);
    return linear_fw(tape, ps, p + ".o", o);
}

template <class T>
void register_mlp(ParamStoreT<T> & ps, RngState & rng, const std::string & p, int dim, int hidden) {
    register_linear(ps, rng, p + ".fc1", dim, hidden);
    register_linear(ps, rng, p + ".fc2", hidden, dim);
}

template <class T>
Var mlp_fw(TapeT<T> & tape, ParamStoreT<T> & ps, const std::string & p, Var x) {
    return linear_fw(tape, ps, p + ".fc2", tape.gelu(linear_fw(tape, ps, p + ".fc1", x)));
}

// pre-norm transformer layer: self-attention, optional cross-attention, MLP
template <class T>
void register_transformer_layer(ParamStoreT<T> & ps, RngState & rng, const std::string & p, int dim,
                                int mlp_dim, bool cross) {
    register_layernorm(ps, p + ".ln1", dim);
    register_attention(ps, rng, p + ".attn", dim);
    if (cross) {
        register_layernorm(ps, p + ".lnx", dim);
        register_attention(ps, rng, p + ".xattn", dim);
    }
    register_layernorm(ps, p + ".ln2", dim);
    register_mlp(ps, rng, p + ".mlp", dim, mlp_dim);
}

template <class T>
Var transformer_layer_fw(TapeT<T> & tape, ParamStoreT<T> & ps, const std::string & p, Var x,
                         int heads, Var cross_ctx = {}, const std::vector<uint8_t> & ctx_valid = {}) {
    Var h = layernorm_fw(tape, ps, p + ".ln1", x);
    x = tape.add(x, attention_fw(tape, ps, p + ".attn", h, h, heads));
    if (cross_ctx.valid()) {
        h = layernorm_fw(tape, ps, p + ".lnx", x);
        x = tape.add(x, attention_fw(tape, ps, p + ".xattn", h, cross_ctx, heads, ctx_valid));
    }
    h = layernorm_fw(tape, ps, p + ".ln2", x);
    return tape.add(x, mlp_fw(tape, ps, p + ".mlp", h));
}

// ---- convolutional pieces (tokenizer, discriminator, perceptual net) ----

template <class T>
void register_conv(ParamStoreT<T> & ps, RngState & rng, const std::string & p, int cout, int cin,
                   int k) {
    const double stddev = std::sqrt(2.0 / ((double)cin * k * k));
    ps.add(p + ".w", gaussian_init<T>({cout, cin, k, k}, rng, stddev), true);
    ps.add(p + ".b", TensorT<T>::zeros({cout}), false);
}

template <class T>
Var conv_fw(TapeT<T> & tape, ParamStoreT<T> & ps, const std::string & p, Var x, int stride,
            int pad) {
    return tape.conv2d(x, ps.var(p + ".w"), ps.var(p + ".b"), stride, pad);
}

template <class T>
void register_resblock(ParamStoreT<T> & ps, RngState & rng, const std::string & p, int ch) {
    register_conv(ps, rng, p + ".c1", ch, ch, 3);
    register_conv(ps, rng, p + ".c2", ch, ch, 3);
}

template <class T>
Var resblock_fw(TapeT<T> & tape, ParamStoreT<T> & ps, const std::string & p, Var x) {
    Var h = conv_fw(tape, ps, p + ".c1", tape.leaky_relu(x, 0.2), 1, 1);
    h = conv_fw(tape, ps, p + ".c2", tape.leaky_relu(h, 0.2), 1, 1);
    return tape.add(x, h);
}

} // namespace musekit
