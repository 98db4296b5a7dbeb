#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "voxrel/rng.hpp"
#include "voxrel/tensor.hpp"
#include "voxrel/threading.hpp"

namespace voxrel {

namespace detail {

// First output coordinate whose source index o*stride - pad + k is >= 0.
inline int64_t conv_lo(int64_t pad, int64_t k, int64_t stride) {
    const int64_t a = pad - k;
    return a <= 0 ? 0 : (a + stride - 1) / stride;
}

// One past the last output coordinate whose source index stays < in_dim.
inline int64_t conv_hi(int64_t in_dim, int64_t pad, int64_t k, int64_t stride, int64_t out_dim) {
    const int64_t a = in_dim - 1 + pad - k;
    if (a < 0) return 0;
    return std::min(out_dim, a / stride + 1);
}

}  // namespace detail

// out[n,f,zo,yo,xo] = bias[f] + sum_{c,i,j,k} in[n,c,zo*s-p+i, yo*s-p+j, xo*s-p+k] * w[f,c,i,j,k]
// with zero padding outside bounds.
template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias, int64_t stride = 1, int64_t padding = 0) {
    if (input.ndim() != 5) throw ShapeError("conv3d: input must be [N,C,D,H,W], got " + input.shape_str());
    if (weight.ndim() != 5) throw ShapeError("conv3d: weight must be [F,C,kd,kh,kw], got " + weight.shape_str());
    if (stride < 1) throw ValueError("conv3d: stride must be >= 1");
    if (padding < 0) throw ValueError("conv3d: padding must be >= 0");
    const int64_t N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
    const int64_t F = weight.dim(0), kd = weight.dim(2), kh = weight.dim(3), kw = weight.dim(4);
    if (weight.dim(1) != C)
        throw ShapeError("conv3d: input has " + std::to_string(C) + " channels, weight expects " +
                         std::to_string(weight.dim(1)));
    if (bias.numel() != F) throw ShapeError("conv3d: bias size must equal filter count");
    if (kd > D + 2 * padding || kh > H + 2 * padding || kw > W + 2 * padding)
        throw ShapeError("conv3d: kernel larger than padded input");
    const int64_t Do = (D + 2 * padding - kd) / stride + 1;
    const int64_t Ho = (H + 2 * padding - kh) / stride + 1;
    const int64_t Wo = (W + 2 * padding - kw) / stride + 1;
    if (Do <= 0 || Ho <= 0 || Wo <= 0) throw ShapeError("conv3d: zero-size output");

    Tensor<T> out = Tensor<T>::zeros({N, F, Do, Ho, Wo});
    const T* in = input.data();
    const T* w = weight.data();
    const T* b = bias.data();
    T* o = out.data();
    const int64_t in_sl = D * H * W, out_sl = Do * Ho * Wo;
    const int64_t s = stride, p = padding;

    parallel_for(N * F, [&](int64_t task) {
        const int64_t n = task / F, f = task % F;
        T* oc = o + (n * F + f) * out_sl;
        std::fill(oc, oc + out_sl, b[f]);
        for (int64_t c = 0; c < C; ++c) {
            const T* ic = in + (n * C + c) * in_sl;
            for (int64_t i = 0; i < kd; ++i) {
                const int64_t zlo = detail::conv_lo(p, i, s), zhi = detail::conv_hi(D, p, i, s, Do);
                for (int64_t j = 0; j < kh; ++j) {
                    const int64_t ylo = detail::conv_lo(p, j, s), yhi = detail::conv_hi(H, p, j, s, Ho);
                    for (int64_t k = 0; k < kw; ++k) {
                        const int64_t xlo = detail::conv_lo(p, k, s), xhi = detail::conv_hi(W, p, k, s, Wo);
                        const T wv = w[(((f * C + c) * kd + i) * kh + j) * kw + k];
                        if (wv == T(0)) continue;
                        for (int64_t zo = zlo; zo < zhi; ++zo) {
                            const int64_t zi = zo * s - p + i;
                            for (int64_t yo = ylo; yo < yhi; ++yo) {
                                const int64_t yi = yo * s - p + j;
                                const T* irow = ic + (zi * H + yi) * W - p + k;
                                T* orow = oc + (zo * Ho + yo) * Wo;
                                if (s == 1) {
                                    for (int64_t xo = xlo; xo < xhi; ++xo) orow[xo] += wv * irow[xo];
                                } else {
                                    for (int64_t xo = xlo; xo < xhi; ++xo) orow[xo] += wv * irow[xo * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    if (!tape.recording || !(input.tracks_grad() || weight.tracks_grad() || bias.tracks_grad()))
        return out;

    out.enable_grad();
    Tensor<T> in_t = input, w_t = weight, b_t = bias, out_t = out;
    tape.touch(in_t); tape.touch(w_t); tape.touch(b_t); tape.touch(out_t);
    out.tape_id = tape.record([in_t, w_t, b_t, out_t, N, C, D, H, W, F, kd, kh, kw,
                               Do, Ho, Wo, s, p, in_sl, out_sl](Tape<T>&) mutable {
        const T* go = out_t.grad();
        const T* in = in_t.data();
        const T* w = w_t.data();
        if (b_t.tracks_grad()) {
            T* gb = b_t.grad();
            for (int64_t f = 0; f < F; ++f) {
                double acc = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const T* g = go + (n * F + f) * out_sl;
                    for (int64_t e = 0; e < out_sl; ++e) acc += static_cast<double>(g[e]);
                }
                gb[f] += static_cast<T>(acc);
            }
        }
        if (w_t.tracks_grad()) {
            T* gw = w_t.grad();
            parallel_for(F * C, [&](int64_t task) {
                const int64_t f = task / C, c = task % C;
                for (int64_t i = 0; i < kd; ++i) {
                    const int64_t zlo = detail::conv_lo(p, i, s), zhi = detail::conv_hi(D, p, i, s, Do);
                    for (int64_t j = 0; j < kh; ++j) {
                        const int64_t ylo = detail::conv_lo(p, j, s), yhi = detail::conv_hi(H, p, j, s, Ho);
                        for (int64_t k = 0; k < kw; ++k) {
                            const int64_t xlo = detail::conv_lo(p, k, s), xhi = detail::conv_hi(W, p, k, s, Wo);
                            double acc = 0.0;
                            for (int64_t n = 0; n < N; ++n) {
                                const T* gc = go + (n * F + f) * out_sl;
                                const T* ic = in + (n * C + c) * in_sl;
                                for (int64_t zo = zlo; zo < zhi; ++zo) {
                                    const int64_t zi = zo * s - p + i;
                                    for (int64_t yo = ylo; yo < yhi; ++yo) {
                                        const int64_t yi = yo * s - p + j;
                                        const T* grow = gc + (zo * Ho + yo) * Wo;
                                        const T* irow = ic + (zi * H + yi) * W - p + k;
                                        if (s == 1) {
                                            for (int64_t xo = xlo; xo < xhi; ++xo)
                                                acc += static_cast<double>(grow[xo]) * irow[xo];
                                        } else {
                                            for (int64_t xo = xlo; xo < xhi; ++xo)
                                                acc += static_cast<double>(grow[xo]) * irow[xo * s];
                                        }
                                    }
                                }
                            }
                            gw[(((f * C + c) * kd + i) * kh + j) * kw + k] += static_cast<T>(acc);
                        }
                    }
                }
            });
        }
        if (in_t.tracks_grad()) {
            T* gi = in_t.grad();
            parallel_for(N * C, [&](int64_t task) {
                const int64_t n = task / C, c = task % C;
                T* gic = gi + (n * C + c) * in_sl;
                for (int64_t f = 0; f < F; ++f) {
                    const T* gc = go + (n * F + f) * out_sl;
                    for (int64_t i = 0; i < kd; ++i) {
                        const int64_t zlo = detail::conv_lo(p, i, s), zhi = detail::conv_hi(D, p, i, s, Do);
                        for (int64_t j = 0; j < kh; ++j) {
                            const int64_t ylo = detail::conv_lo(p, j, s), yhi = detail::conv_hi(H, p, j, s, Ho);
                            for (int64_t k = 0; k < kw; ++k) {
                                const int64_t xlo = detail::conv_lo(p, k, s), xhi = detail::conv_hi(W, p, k, s, Wo);
                                const T wv = w[(((f * C + c) * kd + i) * kh + j) * kw + k];
                                if (wv == T(0)) continue;
                                for (int64_t zo = zlo; zo < zhi; ++zo) {
                                    const int64_t zi = zo * s - p + i;
                                    for (int64_t yo = ylo; yo < yhi; ++yo) {
                                        const int64_t yi = yo * s - p + j;
                                        const T* grow = gc + (zo * Ho + yo) * Wo;
                                        T* girow = gic + (zi * H + yi) * W - p + k;
                                        if (s == 1) {
                                            for (int64_t xo = xlo; xo < xhi; ++xo) girow[xo] += wv * grow[xo];
                                        } else {
                                            for (int64_t xo = xlo; xo < xhi; ++xo) girow[xo * s] += wv * grow[xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
    });
    return out;
}

// Window max; backward routes the gradient to the first-in-scan-order argmax.
template <typename T>
Tensor<T> maxpool3d(Tape<T>& tape, const Tensor<T>& input, int64_t kernel, int64_t stride) {
    if (input.ndim() != 5) throw ShapeError("maxpool3d: input must be [N,C,D,H,W]");
    if (kernel < 1 || stride < 1) throw ValueError("maxpool3d: kernel and stride must be >= 1");
    const int64_t N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
    if (kernel > D || kernel > H || kernel > W)
        throw ShapeError("maxpool3d: kernel " + std::to_string(kernel) + " exceeds spatial dims " +
                         input.shape_str());
    const int64_t Do = (D - kernel) / stride + 1, Ho = (H - kernel) / stride + 1,
                  Wo = (W - kernel) / stride + 1;

    Tensor<T> out = Tensor<T>::zeros({N, C, Do, Ho, Wo});
    auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(out.numel()));
    const T* in = input.data();
    T* o = out.data();
    int64_t* am = argmax->data();
    const int64_t in_sl = D * H * W, out_sl = Do * Ho * Wo;

    parallel_for(N * C, [&](int64_t task) {
        const T* ic = in + task * in_sl;
        T* oc = o + task * out_sl;
        int64_t* ac = am + task * out_sl;
        for (int64_t zo = 0; zo < Do; ++zo)
            for (int64_t yo = 0; yo < Ho; ++yo)
                for (int64_t xo = 0; xo < Wo; ++xo) {
                    const int64_t z0 = zo * stride, y0 = yo * stride, x0 = xo * stride;
                    T best = ic[(z0 * H + y0) * W + x0];
                    int64_t best_idx = (z0 * H + y0) * W + x0;
                    for (int64_t i = 0; i < kernel; ++i)
                        for (int64_t j = 0; j < kernel; ++j)
                            for (int64_t k = 0; k < kernel; ++k) {
                                const int64_t idx = ((z0 + i) * H + y0 + j) * W + x0 + k;
                                if (ic[idx] > best) { best = ic[idx]; best_idx = idx; }
                            }
                    oc[(zo * Ho + yo) * Wo + xo] = best;
                    ac[(zo * Ho + yo) * Wo + xo] = task * in_sl + best_idx;
                }
    });

    if (!tape.recording || !input.tracks_grad()) return out;
    out.enable_grad();
    Tensor<T> in_t = input, out_t = out;
    tape.touch(in_t); tape.touch(out_t);
    out.tape_id = tape.record([in_t, out_t, argmax](Tape<T>&) mutable {
        const T* go = out_t.grad();
        T* gi = in_t.grad();
        const int64_t n = out_t.numel();
        const int64_t* am = argmax->data();
        for (int64_t e = 0; e < n; ++e) gi[am[e]] += go[e];
    });
    return out;
}

// max(0, x). Standard backward gates on input sign; guided mode additionally
// zeroes negative upstream gradients.
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& input) {
    Tensor<T> out = Tensor<T>::zeros(input.shape);
    const T* in = input.data();
    T* o = out.data();
    const int64_t n = input.numel();
    for (int64_t i = 0; i < n; ++i) o[i] = in[i] > T(0) ? in[i] : T(0);

    if (!tape.recording || !input.tracks_grad()) return out;
    out.enable_grad();
    Tensor<T> in_t = input, out_t = out;
    tape.touch(in_t); tape.touch(out_t);
    out.tape_id = tape.record([in_t, out_t](Tape<T>& tp) mutable {
        const T* go = out_t.grad();
        const T* in = in_t.data();
        T* gi = in_t.grad();
        const int64_t n = in_t.numel();
        if (tp.relu_mode == Tape<T>::ReluMode::Guided) {
            for (int64_t i = 0; i < n; ++i)
                if (in[i] > T(0) && go[i] > T(0)) gi[i] += go[i];
        } else {
            for (int64_t i = 0; i < n; ++i)
                if (in[i] > T(0)) gi[i] += go[i];
        }
    });
    return out;
}

template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    bool initialized = false;

    explicit BatchNormState(int64_t channels = 0)
        : running_mean(static_cast<size_t>(channels), T(0)),
          running_var(static_cast<size_t>(channels), T(1)) {}
};

// Per-channel normalization over (N,D,H,W). Train mode uses batch statistics
// (population variance) and folds them into the running estimates; eval mode
// applies the running estimates as constants.
template <typename T>
Tensor<T> batchnorm3d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& gamma,
                      const Tensor<T>& beta, BatchNormState<T>& state, Mode mode,
                      T momentum, T eps) {
    if (input.ndim() != 5) throw ShapeError("batchnorm3d: input must be [N,C,D,H,W]");
    const int64_t N = input.dim(0), C = input.dim(1), D = input.dim(2), H = input.dim(3), W = input.dim(4);
    if (gamma.numel() != C || beta.numel() != C)
        throw ShapeError("batchnorm3d: gamma/beta must have one entry per channel");
    if (static_cast<int64_t>(state.running_mean.size()) != C)
        throw ShapeError("batchnorm3d: state channel count mismatch");
    const int64_t m = N * D * H * W;
    if (mode == Mode::Train && m < 2)
        throw ValueError("batchnorm3d: train mode needs at least 2 values per channel");
    if (mode == Mode::Eval && !state.initialized)
        throw Error("batchnorm3d: eval mode before any running stats recorded");

    const int64_t sl = D * H * W;
    Tensor<T> out = Tensor<T>::zeros(input.shape);
    auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(input.numel()));
    auto invstd = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
    const T* in = input.data();
    const T* g = gamma.data();
    const T* b = beta.data();
    T* o = out.data();

    parallel_for(C, [&](int64_t c) {
        double mean, var;
        if (mode == Mode::Train) {
            double sum = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const T* p = in + (n * C + c) * sl;
                for (int64_t e = 0; e < sl; ++e) sum += static_cast<double>(p[e]);
            }
            mean = sum / static_cast<double>(m);
            double sq = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const T* p = in + (n * C + c) * sl;
                for (int64_t e = 0; e < sl; ++e) {
                    const double d = static_cast<double>(p[e]) - mean;
                    sq += d * d;
                }
            }
            var = sq / static_cast<double>(m);
            state.running_mean[c] = static_cast<T>((1.0 - static_cast<double>(momentum)) *
                                                       static_cast<double>(state.running_mean[c]) +
                                                   static_cast<double>(momentum) * mean);
            state.running_var[c] = static_cast<T>((1.0 - static_cast<double>(momentum)) *
                                                      static_cast<double>(state.running_var[c]) +
                                                  static_cast<double>(momentum) * var);
        } else {
            mean = static_cast<double>(state.running_mean[c]);
            var = static_cast<double>(state.running_var[c]);
        }
        const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
        (*invstd)[c] = static_cast<T>(istd);
        for (int64_t n = 0; n < N; ++n) {
            const T* p = in + (n * C + c) * sl;
            T* xh = xhat->data() + (n * C + c) * sl;
            T* po = o + (n * C + c) * sl;
            for (int64_t e = 0; e < sl; ++e) {
                xh[e] = static_cast<T>((static_cast<double>(p[e]) - mean) * istd);
                po[e] = g[c] * xh[e] + b[c];
            }
        }
    });
    if (mode == Mode::Train) state.initialized = true;

    if (!tape.recording ||
        !(input.tracks_grad() || gamma.tracks_grad() || beta.tracks_grad()))
        return out;
    out.enable_grad();
    Tensor<T> in_t = input, g_t = gamma, b_t = beta, out_t = out;
    tape.touch(in_t); tape.touch(g_t); tape.touch(b_t); tape.touch(out_t);
    const bool train = mode == Mode::Train;
    out.tape_id = tape.record([in_t, g_t, b_t, out_t, xhat, invstd, N, C, sl, m, train](Tape<T>&) mutable {
        const T* go = out_t.grad();
        const T* g = g_t.data();
        parallel_for(C, [&](int64_t c) {
            double sum_go = 0.0, sum_go_xhat = 0.0;
            for (int64_t n = 0; n < N; ++n) {
                const T* pg = go + (n * C + c) * sl;
                const T* xh = xhat->data() + (n * C + c) * sl;
                for (int64_t e = 0; e < sl; ++e) {
                    sum_go += static_cast<double>(pg[e]);
                    sum_go_xhat += static_cast<double>(pg[e]) * static_cast<double>(xh[e]);
                }
            }
            if (g_t.tracks_grad()) g_t.grad()[c] += static_cast<T>(sum_go_xhat);
            if (b_t.tracks_grad()) b_t.grad()[c] += static_cast<T>(sum_go);
            if (in_t.tracks_grad()) {
                T* gi = in_t.grad();
                const double istd = static_cast<double>((*invstd)[c]);
                const double gc = static_cast<double>(g[c]);
                if (train) {
                    const double mg = sum_go / static_cast<double>(m);
                    const double mgx = sum_go_xhat / static_cast<double>(m);
                    for (int64_t n = 0; n < N; ++n) {
                        const T* pg = go + (n * C + c) * sl;
                        const T* xh = xhat->data() + (n * C + c) * sl;
                        T* pgi = gi + (n * C + c) * sl;
                        for (int64_t e = 0; e < sl; ++e)
                            pgi[e] += static_cast<T>(gc * istd *
                                                     (static_cast<double>(pg[e]) - mg -
                                                      static_cast<double>(xh[e]) * mgx));
                    }
                } else {
                    for (int64_t n = 0; n < N; ++n) {
                        const T* pg = go + (n * C + c) * sl;
                        T* pgi = gi + (n * C + c) * sl;
                        for (int64_t e = 0; e < sl; ++e)
                            pgi[e] += static_cast<T>(gc * istd * static_cast<double>(pg[e]));
                    }
                }
            }
        });
    });
    return out;
}

// Inverted dropout: survivors scaled by 1/(1-p) in train mode, identity in eval.
template <typename T>
Tensor<T> dropout(Tape<T>& tape, const Tensor<T>& input, double p_drop, Mode mode, Rng& rng) {
    if (p_drop < 0.0 || p_drop >= 1.0) throw ValueError("dropout: p_drop must be in [0, 1)");
    if (mode == Mode::Eval) return input;

    const int64_t n = input.numel();
    auto mask = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p_drop));
    for (int64_t i = 0; i < n; ++i)
        (*mask)[i] = rng.uniform() < p_drop ? T(0) : keep_scale;

    Tensor<T> out = Tensor<T>::zeros(input.shape);
    const T* in = input.data();
    T* o = out.data();
    for (int64_t i = 0; i < n; ++i) o[i] = in[i] * (*mask)[i];

    if (!tape.recording || !input.tracks_grad()) return out;
    out.enable_grad();
    Tensor<T> in_t = input, out_t = out;
    tape.touch(in_t); tape.touch(out_t);
    out.tape_id = tape.record([in_t, out_t, mask](Tape<T>&) mutable {
        const T* go = out_t.grad();
        T* gi = in_t.grad();
        const int64_t n = in_t.numel();
        for (int64_t i = 0; i < n; ++i) gi[i] += go[i] * (*mask)[i];
    });
    return out;
}

// out = input * weight^T + bias, input [N,I], weight [O,I], bias [O].
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
    if (input.ndim() != 2 || weight.ndim() != 2)
        throw ShapeError("linear: input and weight must be 2-d");
    const int64_t N = input.dim(0), I = input.dim(1), O = weight.dim(0);
    if (weight.dim(1) != I)
        throw ShapeError("linear: input width " + std::to_string(I) + " vs weight width " +
                         std::to_string(weight.dim(1)));
    if (bias.numel() != O) throw ShapeError("linear: bias size must equal output width");

    Tensor<T> out = Tensor<T>::zeros({N, O});
    const T* in = input.data();
    const T* w = weight.data();
    const T* b = bias.data();
    T* o = out.data();
    parallel_for(N, [&](int64_t n) {
        for (int64_t k = 0; k < O; ++k) {
            double acc = static_cast<double>(b[k]);
            const T* irow = in + n * I;
            const T* wrow = w + k * I;
            for (int64_t i = 0; i < I; ++i) acc += static_cast<double>(irow[i]) * wrow[i];
            o[n * O + k] = static_cast<T>(acc);
        }
    });

    if (!tape.recording || !(input.tracks_grad() || weight.tracks_grad() || bias.tracks_grad()))
        return out;
    out.enable_grad();
    Tensor<T> in_t = input, w_t = weight, b_t = bias, out_t = out;
    tape.touch(in_t); tape.touch(w_t); tape.touch(b_t); tape.touch(out_t);
    out.tape_id = tape.record([in_t, w_t, b_t, out_t, N, I, O](Tape<T>&) mutable {
        const T* go = out_t.grad();
        if (b_t.tracks_grad()) {
            T* gb = b_t.grad();
            for (int64_t k = 0; k < O; ++k) {
                double acc = 0.0;
                for (int64_t n = 0; n < N; ++n) acc += static_cast<double>(go[n * O + k]);
                gb[k] += static_cast<T>(acc);
            }
        }
        if (w_t.tracks_grad()) {
            const T* in = in_t.data();
            T* gw = w_t.grad();
            for (int64_t k = 0; k < O; ++k)
                for (int64_t n = 0; n < N; ++n) {
                    const T gv = go[n * O + k];
                    if (gv == T(0)) continue;
                    const T* irow = in + n * I;
                    T* grow = gw + k * I;
                    for (int64_t i = 0; i < I; ++i) grow[i] += gv * irow[i];
                }
        }
        if (in_t.tracks_grad()) {
            const T* w = w_t.data();
            T* gi = in_t.grad();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t k = 0; k < O; ++k) {
                    const T gv = go[n * O + k];
                    if (gv == T(0)) continue;
                    const T* wrow = w + k * I;
                    T* girow = gi + n * I;
                    for (int64_t i = 0; i < I; ++i) girow[i] += gv * wrow[i];
                }
        }
    });
    return out;
}

// Row-wise softmax with max-shift stabilization, input [N,K].
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& input) {
    if (input.ndim() != 2) throw ShapeError("softmax: input must be [N,K]");
    const int64_t N = input.dim(0), K = input.dim(1);
    if (K < 1) throw ShapeError("softmax: need at least one column");

    Tensor<T> out = Tensor<T>::zeros(input.shape);
    const T* in = input.data();
    T* o = out.data();
    for (int64_t n = 0; n < N; ++n) {
        const T* row = in + n * K;
        T* orow = o + n * K;
        double mx = static_cast<double>(row[0]);
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, static_cast<double>(row[k]));
        double sum = 0.0;
        for (int64_t k = 0; k < K; ++k) {
            const double e = std::exp(static_cast<double>(row[k]) - mx);
            orow[k] = static_cast<T>(e);
            sum += e;
        }
        for (int64_t k = 0; k < K; ++k) orow[k] = static_cast<T>(static_cast<double>(orow[k]) / sum);
    }

    if (!tape.recording || !input.tracks_grad()) return out;
    out.enable_grad();
    Tensor<T> in_t = input, out_t = out;
    tape.touch(in_t); tape.touch(out_t);
    out.tape_id = tape.record([in_t, out_t, N, K](Tape<T>&) mutable {
        const T* go = out_t.grad();
        const T* y = out_t.data();
        T* gi = in_t.grad();
        for (int64_t n = 0; n < N; ++n) {
            const T* grow = go + n * K;
            const T* yrow = y + n * K;
            T* girow = gi + n * K;
            double dot = 0.0;
            for (int64_t k = 0; k < K; ++k)
                dot += static_cast<double>(grow[k]) * static_cast<double>(yrow[k]);
            for (int64_t k = 0; k < K; ++k)
                girow[k] += static_cast<T>(static_cast<double>(yrow[k]) *
                                           (static_cast<double>(grow[k]) - dot));
        }
    });
    return out;
}

// -(1/N) * sum_n log(probs[n, labels[n]] + eps_log), on already-normalized rows.
template <typename T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& probs, const std::vector<int>& labels,
                        T eps_log = static_cast<T>(1e-12)) {
    if (probs.ndim() != 2) throw ShapeError("cross_entropy: probs must be [N,K]");
    const int64_t N = probs.dim(0), K = probs.dim(1);
    if (static_cast<int64_t>(labels.size()) != N)
        throw ShapeError("cross_entropy: need one label per row");
    for (int l : labels)
        if (l < 0 || l >= K)
            throw ValueError("cross_entropy: label " + std::to_string(l) + " out of range [0," +
                             std::to_string(K) + ")");

    const T* p = probs.data();
    double acc = 0.0;
    for (int64_t n = 0; n < N; ++n)
        acc += std::log(static_cast<double>(p[n * K + labels[n]]) + static_cast<double>(eps_log));
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(-acc / static_cast<double>(N)));

    if (!tape.recording || !probs.tracks_grad()) return out;
    out.enable_grad();
    Tensor<T> p_t = probs, out_t = out;
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    tape.touch(p_t); tape.touch(out_t);
    out.tape_id = tape.record([p_t, out_t, labels_copy, N, K, eps_log](Tape<T>&) mutable {
        const T g = out_t.grad()[0];
        const T* p = p_t.data();
        T* gp = p_t.grad();
        for (int64_t n = 0; n < N; ++n) {
            const int64_t idx = n * K + (*labels_copy)[n];
            gp[idx] += static_cast<T>(-static_cast<double>(g) /
                                      (static_cast<double>(N) *
                                       (static_cast<double>(p[idx]) + static_cast<double>(eps_log))));
        }
    });
    return out;
}

// View with a new shape; element and gradient buffers are shared, so the
// gradient flows through without a tape record.
template <typename T>
Tensor<T> reshape(const Tensor<T>& input, std::vector<int64_t> new_shape) {
    Tensor<T> out;
    out.shape = std::move(new_shape);
    if (out.numel() != input.numel())
        throw ShapeError("reshape: " + input.shape_str() + " -> " + out.shape_str() +
                         " changes element count");
    out.data_ = input.data_;
    out.grad_ = input.grad_;
    out.tape_id = input.tape_id;
    return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& input) {
    double acc = 0.0;
    const T* in = input.data();
    const int64_t n = input.numel();
    for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(in[i]);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));

    if (!tape.recording || !input.tracks_grad()) return out;
    out.enable_grad();
    Tensor<T> in_t = input, out_t = out;
    tape.touch(in_t); tape.touch(out_t);
    out.tape_id = tape.record([in_t, out_t](Tape<T>&) mutable {
        const T g = out_t.grad()[0];
        T* gi = in_t.grad();
        const int64_t n = in_t.numel();
        for (int64_t i = 0; i < n; ++i) gi[i] += g;
    });
    return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& input, T factor) {
    Tensor<T> out = Tensor<T>::zeros(input.shape);
    const T* in = input.data();
    T* o = out.data();
    const int64_t n = input.numel();
    for (int64_t i = 0; i < n; ++i) o[i] = factor * in[i];

    if (!tape.recording || !input.tracks_grad()) return out;
    out.enable_grad();
    Tensor<T> in_t = input, out_t = out;
    tape.touch(in_t); tape.touch(out_t);
    out.tape_id = tape.record([in_t, out_t, factor](Tape<T>&) mutable {
        const T* go = out_t.grad();
        T* gi = in_t.grad();
        const int64_t n = in_t.numel();
        for (int64_t i = 0; i < n; ++i) gi[i] += factor * go[i];
    });
    return out;
}

}  // namespace voxrel
