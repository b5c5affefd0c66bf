#pragma once

#include "musekit/nn.hpp"

namespace musekit {

constexpr uint64_t kPerceptualSeed = 0x70657263ULL;

// Frozen randomly initialized 4-layer conv net. Serves two jobs with the same
// weights: perceptual distance for tokenizer training and the 64-dim feature
// space for Frechet statistics (global average pool of the last layer).
template <class T>
struct PerceptualNetT {
    ParamStoreT<T> ps;

    static PerceptualNetT build(uint64_t seed = kPerceptualSeed) {
        PerceptualNetT net;
        RngState rng = RngState::seeded(seed);
        const int ch[5] = {3, 16, 32, 48, 64};
        for (int l = 0; l < 4; ++l) {
            register_conv(net.ps, rng, "p" + std::to_string(l), ch[l + 1], ch[l], 3);
        }
        return net;
    }

    // stages weights as constants; returns the four post-activation maps
    std::vector<Var> features_fw(TapeT<T> & tape, Var img) {
        ps.stage(tape, false);
        std::vector<Var> feats;
        Var x = img;
        for (int l = 0; l < 4; ++l) {
            x = tape.leaky_relu(conv_fw(tape, ps, "p" + std::to_string(l), x, 2, 1), 0.2);
            feats.push_back(x);
        }
        return feats;
    }

    Var loss_fw(TapeT<T> & tape, Var a, Var b) {
        std::vector<Var> fa = features_fw(tape, a);
        std::vector<Var> fb = features_fw(tape, b);
        Var total = tape.mse_loss(fa[0], fb[0]);
        for (size_t l = 1; l < fa.size(); ++l) total = tape.add(total, tape.mse_loss(fa[l], fb[l]));
        return total;
    }

    // 64-dim pooled feature of an image tensor [3,H,W]
    std::vector<double> feature_vec(const TensorT<T> & img) {
        TapeT<T> tape(false);
        Var x = tape.constant(img);
        std::vector<Var> feats = features_fw(tape, x);
        const TensorT<T> & last = tape.value(feats.back());
        const int C = last.dim(0);
        const int hw = last.dim(1) * last.dim(2);
        std::vector<double> out((size_t)C, 0.0);
        for (int c = 0; c < C; ++c) {
            double s = 0;
            for (int p = 0; p < hw; ++p) s += (double)last[(int64_t)c * hw + p];
            out[(size_t)c] = s / hw;
        }
        return out;
    }
};

using PerceptualNet = PerceptualNetT<float>;

} // namespace musekit
