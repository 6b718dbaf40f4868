#include "patchforge/diff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace patchforge::diff {

namespace {

template <typename S>
inline void axpy(std::size_t n, S a, const S* x, S* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void require(bool cond, const std::string& op, const std::string& what) {
    if (!cond) throw ShapeError(op + ": " + what);
}

void require_same(const Shape& a, const Shape& b, const std::string& op) {
    require(a == b, op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Unfolds one C x H x W image into (C*K*K) x (Ho*Wo) columns.
template <typename S>
void im2col(const S* img, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
            std::size_t ho, std::size_t wo, S* col) {
    const auto ih = static_cast<std::ptrdiff_t>(h);
    const auto iw = static_cast<std::ptrdiff_t>(w);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                S* row = col + ((ch * k + ky) * k + kx) * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const auto sy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
                    S* dst = row + oy * wo;
                    if (sy < 0 || sy >= ih) {
                        std::fill(dst, dst + wo, S(0));
                        continue;
                    }
                    const S* src = img + (ch * h + static_cast<std::size_t>(sy)) * w;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const auto sx = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
                        dst[ox] = (sx < 0 || sx >= iw) ? S(0) : src[sx];
                    }
                }
            }
        }
    }
}

template <typename S>
void col2im_add(const S* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
                std::size_t ho, std::size_t wo, S* img) {
    const auto ih = static_cast<std::ptrdiff_t>(h);
    const auto iw = static_cast<std::ptrdiff_t>(w);
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const S* row = col + ((ch * k + ky) * k + kx) * ho * wo;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const auto sy = static_cast<std::ptrdiff_t>(oy + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (sy < 0 || sy >= ih) continue;
                    const S* src = row + oy * wo;
                    S* dst = img + (ch * h + static_cast<std::size_t>(sy)) * w;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const auto sx = static_cast<std::ptrdiff_t>(ox + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (sx >= 0 && sx < iw) dst[sx] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, std::size_t pad) {
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    require(xs.size() == 4, "conv2d", "input must be N x C x H x W, got " + shape_str(xs));
    require(ws.size() == 4 && ws[2] == ws[3], "conv2d", "weight must be O x C x K x K, got " + shape_str(ws));
    require(ws[1] == xs[1], "conv2d",
            "input has " + std::to_string(xs[1]) + " channels, weight expects " + std::to_string(ws[1]));
    require(bias.shape() == Shape{ws[0]}, "conv2d", "bias shape " + shape_str(bias.shape()));
    const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
    const std::size_t o = ws[0], k = ws[2];
    require(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d", "kernel larger than padded input");
    const std::size_t ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1;
    const std::size_t kk = c * k * k, p = ho * wo;

    Tensor<S> out(Shape{n, o, ho, wo});
    std::vector<S> col(kk * p);
    const S* wd = weight.value().data();
    const S* bd = bias.value().data();
    for (std::size_t b = 0; b < n; ++b) {
        im2col(x.value().data() + b * c * h * w, c, h, w, k, pad, ho, wo, col.data());
        S* dst = out.data() + b * o * p;
        for (std::size_t oc = 0; oc < o; ++oc) {
            S* row = dst + oc * p;
            std::fill(row, row + p, bd[oc]);
            for (std::size_t q = 0; q < kk; ++q) axpy(p, wd[oc * kk + q], col.data() + q * p, row);
        }
    }

    const std::size_t xi = x.id(), wi = weight.id(), bi = bias.id();
    return x.graph().record("conv2d", std::move(out), {x, weight, bias},
        [=](Graph<S>& g, std::size_t self) {
            const S* gout = g.out_grad(self).data();
            Tensor<S>* gx = g.grad_sink(xi);
            Tensor<S>* gw = g.grad_sink(wi);
            Tensor<S>* gb = g.grad_sink(bi);
            const S* xd = g.value(xi).data();
            const S* wv = g.value(wi).data();
            std::vector<S> colbuf(kk * p);
            std::vector<S> colT;
            if (gw) colT.resize(p * kk);
            for (std::size_t b = 0; b < n; ++b) {
                const S* go = gout + b * o * p;
                if (gb) {
                    for (std::size_t oc = 0; oc < o; ++oc) {
                        S acc = 0;
                        for (std::size_t q = 0; q < p; ++q) acc += go[oc * p + q];
                        (*gb)[oc] += acc;
                    }
                }
                if (gw) {
                    im2col(xd + b * c * h * w, c, h, w, k, pad, ho, wo, colbuf.data());
                    for (std::size_t q = 0; q < kk; ++q)
                        for (std::size_t r = 0; r < p; ++r) colT[r * kk + q] = colbuf[q * p + r];
                    for (std::size_t oc = 0; oc < o; ++oc) {
                        S* dw = gw->data() + oc * kk;
                        for (std::size_t r = 0; r < p; ++r) {
                            const S gv = go[oc * p + r];
                            if (gv != S(0)) axpy(kk, gv, colT.data() + r * kk, dw);
                        }
                    }
                }
                if (gx) {
                    std::fill(colbuf.begin(), colbuf.end(), S(0));
                    for (std::size_t oc = 0; oc < o; ++oc)
                        for (std::size_t q = 0; q < kk; ++q)
                            axpy(p, wv[oc * kk + q], go + oc * p, colbuf.data() + q * p);
                    col2im_add(colbuf.data(), c, h, w, k, pad, ho, wo, gx->data() + b * c * h * w);
                }
            }
        });
}

template <typename S>
Var<S> dense(const Var<S>& x, const Var<S>& weight, const Var<S>& bias) {
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    require(xs.size() >= 2, "dense", "input must have a batch dimension, got " + shape_str(xs));
    require(ws.size() == 2, "dense", "weight must be O x I, got " + shape_str(ws));
    const std::size_t n = xs[0];
    const std::size_t in = x.value().size() / n;
    const std::size_t o = ws[0];
    require(ws[1] == in, "dense",
            "input has " + std::to_string(in) + " features, weight expects " + std::to_string(ws[1]));
    require(bias.shape() == Shape{o}, "dense", "bias shape " + shape_str(bias.shape()));

    std::vector<S> wt(in * o);
    const S* wd = weight.value().data();
    for (std::size_t r = 0; r < o; ++r)
        for (std::size_t i = 0; i < in; ++i) wt[i * o + r] = wd[r * in + i];

    Tensor<S> out(Shape{n, o});
    const S* xd = x.value().data();
    for (std::size_t b = 0; b < n; ++b) {
        S* y = out.data() + b * o;
        std::copy(bias.value().data(), bias.value().data() + o, y);
        for (std::size_t i = 0; i < in; ++i) {
            const S v = xd[b * in + i];
            if (v != S(0)) axpy(o, v, wt.data() + i * o, y);
        }
    }

    const std::size_t xi = x.id(), wi = weight.id(), bi = bias.id();
    return x.graph().record("dense", std::move(out), {x, weight, bias},
        [=](Graph<S>& g, std::size_t self) {
            const S* gout = g.out_grad(self).data();
            Tensor<S>* gx = g.grad_sink(xi);
            Tensor<S>* gw = g.grad_sink(wi);
            Tensor<S>* gb = g.grad_sink(bi);
            const S* xv = g.value(xi).data();
            const S* wv = g.value(wi).data();
            for (std::size_t b = 0; b < n; ++b) {
                const S* gy = gout + b * o;
                for (std::size_t r = 0; r < o; ++r) {
                    const S gv = gy[r];
                    if (gb) (*gb)[r] += gv;
                    if (gv == S(0)) continue;
                    if (gw) axpy(in, gv, xv + b * in, gw->data() + r * in);
                    if (gx) axpy(in, gv, wv + r * in, gx->data() + b * in);
                }
            }
        });
}

template <typename S>
Var<S> relu(const Var<S>& x) {
    Tensor<S> out(x.shape());
    const auto xv = x.value().values();
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > S(0) ? xv[i] : S(0);
    const std::size_t xi = x.id();
    return x.graph().record("relu", std::move(out), {x}, [=](Graph<S>& g, std::size_t self) {
        Tensor<S>* gx = g.grad_sink(xi);
        if (!gx) return;
        const auto& go = g.out_grad(self);
        const auto& in = g.value(xi);
        for (std::size_t i = 0; i < go.size(); ++i)
            if (in[i] > S(0)) (*gx)[i] += go[i];
    });
}

template <typename S>
Var<S> maxpool2(const Var<S>& x) {
    const Shape& xs = x.shape();
    require(xs.size() == 4, "maxpool2", "input must be N x C x H x W, got " + shape_str(xs));
    require(xs[2] % 2 == 0 && xs[3] % 2 == 0, "maxpool2", "spatial extent must be even, got " + shape_str(xs));
    const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
    const std::size_t ho = h / 2, wo = w / 2;
    Tensor<S> out(Shape{xs[0], xs[1], ho, wo});
    std::vector<std::uint32_t> arg(out.size());
    const S* xd = x.value().data();
    for (std::size_t pl = 0; pl < planes; ++pl) {
        for (std::size_t oy = 0; oy < ho; ++oy) {
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const std::size_t base = pl * h * w + 2 * oy * w + 2 * ox;
                const std::size_t cand[4] = {base, base + 1, base + w, base + w + 1};
                std::size_t best = cand[0];
                for (int t = 1; t < 4; ++t)
                    if (xd[cand[t]] > xd[best]) best = cand[t];
                const std::size_t oi = (pl * ho + oy) * wo + ox;
                out[oi] = xd[best];
                arg[oi] = static_cast<std::uint32_t>(best);
            }
        }
    }
    const std::size_t xi = x.id();
    return x.graph().record("maxpool2", std::move(out), {x},
        [xi, arg = std::move(arg)](Graph<S>& g, std::size_t self) {
            Tensor<S>* gx = g.grad_sink(xi);
            if (!gx) return;
            const auto& go = g.out_grad(self);
            for (std::size_t i = 0; i < go.size(); ++i) (*gx)[arg[i]] += go[i];
        });
}

template <typename S>
Var<S> sum(const Var<S>& x) {
    S acc = 0;
    for (S v : x.value().values()) acc += v;
    const std::size_t xi = x.id();
    return x.graph().record("sum", Tensor<S>::scalar(acc), {x}, [=](Graph<S>& g, std::size_t self) {
        Tensor<S>* gx = g.grad_sink(xi);
        if (!gx) return;
        const S go = g.out_grad(self)[0];
        for (auto& v : gx->values()) v += go;
    });
}

template <typename S>
Var<S> mean(const Var<S>& x) {
    const std::size_t count = x.value().size();
    S acc = 0;
    for (S v : x.value().values()) acc += v;
    const std::size_t xi = x.id();
    return x.graph().record("mean", Tensor<S>::scalar(acc / static_cast<S>(count)), {x},
        [=](Graph<S>& g, std::size_t self) {
            Tensor<S>* gx = g.grad_sink(xi);
            if (!gx) return;
            const S go = g.out_grad(self)[0] / static_cast<S>(count);
            for (auto& v : gx->values()) v += go;
        });
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    require_same(a.shape(), b.shape(), "add");
    Tensor<S> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    const std::size_t ai = a.id(), bi = b.id();
    return a.graph().record("add", std::move(out), {a, b}, [=](Graph<S>& g, std::size_t self) {
        const auto& go = g.out_grad(self);
        for (std::size_t id : {ai, bi}) {
            if (Tensor<S>* gi = g.grad_sink(id))
                for (std::size_t i = 0; i < go.size(); ++i) (*gi)[i] += go[i];
        }
    });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    require_same(a.shape(), b.shape(), "mul");
    Tensor<S> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    const std::size_t ai = a.id(), bi = b.id();
    return a.graph().record("mul", std::move(out), {a, b}, [=](Graph<S>& g, std::size_t self) {
        const auto& go = g.out_grad(self);
        if (Tensor<S>* ga = g.grad_sink(ai)) {
            const auto& bv = g.value(bi);
            for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * bv[i];
        }
        if (Tensor<S>* gb = g.grad_sink(bi)) {
            const auto& av = g.value(ai);
            for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i] * av[i];
        }
    });
}

template <typename S>
Var<S> scale(const Var<S>& x, S factor) {
    Tensor<S> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * factor;
    const std::size_t xi = x.id();
    return x.graph().record("scale", std::move(out), {x}, [=](Graph<S>& g, std::size_t self) {
        Tensor<S>* gx = g.grad_sink(xi);
        if (!gx) return;
        const auto& go = g.out_grad(self);
        for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i] * factor;
    });
}

template <typename S>
Var<S> square(const Var<S>& x) {
    Tensor<S> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * x.value()[i];
    const std::size_t xi = x.id();
    return x.graph().record("square", std::move(out), {x}, [=](Graph<S>& g, std::size_t self) {
        Tensor<S>* gx = g.grad_sink(xi);
        if (!gx) return;
        const auto& go = g.out_grad(self);
        const auto& in = g.value(xi);
        for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += S(2) * in[i] * go[i];
    });
}

template <typename S>
Var<S> clamp_st(const Var<S>& x, S lo, S hi, S band) {
    if (!(lo <= hi) || band < S(0)) throw Error("clamp_st: invalid interval or band");
    Tensor<S> out(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x.value()[i], lo, hi);
    const std::size_t xi = x.id();
    return x.graph().record("clamp_st", std::move(out), {x}, [=](Graph<S>& g, std::size_t self) {
        Tensor<S>* gx = g.grad_sink(xi);
        if (!gx) return;
        const auto& go = g.out_grad(self);
        const auto& in = g.value(xi);
        for (std::size_t i = 0; i < go.size(); ++i)
            if (in[i] >= lo - band && in[i] <= hi + band) (*gx)[i] += go[i];
    });
}

template <typename S>
Var<S> softmax_cross_entropy(const Var<S>& logits, std::span<const int> targets) {
    const Shape& ls = logits.shape();
    require(ls.size() == 2, "softmax_cross_entropy", "logits must be N x C, got " + shape_str(ls));
    const std::size_t n = ls[0], c = ls[1];
    require(targets.size() == n, "softmax_cross_entropy",
            std::to_string(targets.size()) + " targets for batch of " + std::to_string(n));
    for (int t : targets)
        require(t >= 0 && static_cast<std::size_t>(t) < c, "softmax_cross_entropy",
                "target " + std::to_string(t) + " out of range for " + std::to_string(c) + " classes");

    Tensor<S> probs = softmax(logits.value());
    S total = 0;
    const S* z = logits.value().data();
    for (std::size_t b = 0; b < n; ++b) {
        const S* row = z + b * c;
        const S m = *std::max_element(row, row + c);
        S se = 0;
        for (std::size_t j = 0; j < c; ++j) se += std::exp(row[j] - m);
        total += m + std::log(se) - row[targets[b]];
    }
    std::vector<int> tgt(targets.begin(), targets.end());
    const std::size_t li = logits.id();
    return logits.graph().record("softmax_cross_entropy", Tensor<S>::scalar(total / static_cast<S>(n)), {logits},
        [li, n, c, tgt = std::move(tgt), probs = std::move(probs)](Graph<S>& g, std::size_t self) {
            Tensor<S>* gl = g.grad_sink(li);
            if (!gl) return;
            const S go = g.out_grad(self)[0] / static_cast<S>(n);
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t j = 0; j < c; ++j) {
                    const S onehot = static_cast<std::size_t>(tgt[b]) == j ? S(1) : S(0);
                    (*gl)[b * c + j] += go * (probs[b * c + j] - onehot);
                }
            }
        });
}

template <typename S>
Var<S> pick(const Var<S>& x, std::span<const int> index) {
    const Shape& xs = x.shape();
    require(xs.size() == 2, "pick", "input must be N x C, got " + shape_str(xs));
    const std::size_t n = xs[0], c = xs[1];
    require(index.size() == n, "pick", "index length mismatch");
    Tensor<S> out(Shape{n});
    for (std::size_t b = 0; b < n; ++b) {
        require(index[b] >= 0 && static_cast<std::size_t>(index[b]) < c, "pick", "index out of range");
        out[b] = x.value()[b * c + static_cast<std::size_t>(index[b])];
    }
    std::vector<int> idx(index.begin(), index.end());
    const std::size_t xi = x.id();
    return x.graph().record("pick", std::move(out), {x},
        [xi, c, idx = std::move(idx)](Graph<S>& g, std::size_t self) {
            Tensor<S>* gx = g.grad_sink(xi);
            if (!gx) return;
            const auto& go = g.out_grad(self);
            for (std::size_t b = 0; b < idx.size(); ++b) (*gx)[b * c + static_cast<std::size_t>(idx[b])] += go[b];
        });
}

template <typename S>
Var<S> bilinear_sample(const Var<S>& src, const SampleGrid& grid) {
    const Shape& ss = src.shape();
    require(ss.size() == 3, "bilinear_sample", "source must be C x h x w, got " + shape_str(ss));
    require(ss[1] == grid.src_height && ss[2] == grid.src_width, "bilinear_sample",
            "grid built for " + std::to_string(grid.src_height) + "x" + std::to_string(grid.src_width) +
                " source, got " + shape_str(ss));
    require(grid.taps.size() == grid.batch * grid.height * grid.width, "bilinear_sample", "malformed grid");
    const std::size_t c = ss[0], sh = ss[1], sw = ss[2];
    const std::size_t n = grid.batch, h = grid.height, w = grid.width;
    Tensor<S> out(Shape{n, c, h, w});
    const S* sd = src.value().data();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                const auto& t = grid.tap(b, i, j);
                if (!t.valid) continue;
                const auto y0 = static_cast<std::size_t>(t.y0), x0 = static_cast<std::size_t>(t.x0);
                const std::size_t y1 = std::min(y0 + 1, sh - 1), x1 = std::min(x0 + 1, sw - 1);
                const S fy = static_cast<S>(t.fy), fx = static_cast<S>(t.fx);
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const S* plane = sd + ch * sh * sw;
                    const S a = plane[y0 * sw + x0], bb = plane[y0 * sw + x1];
                    const S cc = plane[y1 * sw + x0], d = plane[y1 * sw + x1];
                    // a + f * (b - a) keeps constant inputs exactly constant.
                    const S top = a + fx * (bb - a);
                    const S bottom = cc + fx * (d - cc);
                    out[((b * c + ch) * h + i) * w + j] = top + fy * (bottom - top);
                }
            }
        }
    }
    const std::size_t si = src.id();
    return src.graph().record("bilinear_sample", std::move(out), {src},
        [si, grid, c, sh, sw](Graph<S>& g, std::size_t self) {
            Tensor<S>* gs = g.grad_sink(si);
            if (!gs) return;
            const auto& go = g.out_grad(self);
            const std::size_t n = grid.batch, h = grid.height, w = grid.width;
            for (std::size_t b = 0; b < n; ++b) {
                for (std::size_t i = 0; i < h; ++i) {
                    for (std::size_t j = 0; j < w; ++j) {
                        const auto& t = grid.tap(b, i, j);
                        if (!t.valid) continue;
                        const auto y0 = static_cast<std::size_t>(t.y0), x0 = static_cast<std::size_t>(t.x0);
                        const std::size_t y1 = std::min(y0 + 1, sh - 1), x1 = std::min(x0 + 1, sw - 1);
                        const S fy = static_cast<S>(t.fy), fx = static_cast<S>(t.fx);
                        const S w00 = (S(1) - fy) * (S(1) - fx), w01 = (S(1) - fy) * fx;
                        const S w10 = fy * (S(1) - fx), w11 = fy * fx;
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            const S gv = go[((b * c + ch) * h + i) * w + j];
                            if (gv == S(0)) continue;
                            S* plane = gs->data() + ch * sh * sw;
                            plane[y0 * sw + x0] += gv * w00;
                            plane[y0 * sw + x1] += gv * w01;
                            plane[y1 * sw + x0] += gv * w10;
                            plane[y1 * sw + x1] += gv * w11;
                        }
                    }
                }
            }
        });
}

template <typename S>
Var<S> lerp(const Var<S>& x, const Var<S>& p, const Var<S>& m) {
    const Shape& xs = x.shape();
    require(xs.size() == 4, "lerp", "image must be N x C x H x W, got " + shape_str(xs));
    require_same(xs, p.shape(), "lerp");
    require(m.shape() == Shape{xs[0], 1, xs[2], xs[3]}, "lerp",
            "mask shape " + shape_str(m.shape()) + " does not match image " + shape_str(xs));
    const std::size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
    Tensor<S> out(xs);
    const S* xd = x.value().data();
    const S* pd = p.value().data();
    const S* md = m.value().data();
    for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * hw;
            for (std::size_t q = 0; q < hw; ++q) {
                const S mv = md[b * hw + q];
                out[off + q] = mv * pd[off + q] + (S(1) - mv) * xd[off + q];
            }
        }
    }
    const std::size_t xi = x.id(), pi = p.id(), mi = m.id();
    return x.graph().record("lerp", std::move(out), {x, p, m}, [=](Graph<S>& g, std::size_t self) {
        const auto& go = g.out_grad(self);
        Tensor<S>* gx = g.grad_sink(xi);
        Tensor<S>* gp = g.grad_sink(pi);
        Tensor<S>* gm = g.grad_sink(mi);
        const auto& xv = g.value(xi);
        const auto& pv = g.value(pi);
        const auto& mv = g.value(mi);
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t off = (b * c + ch) * hw;
                for (std::size_t q = 0; q < hw; ++q) {
                    const S gv = go[off + q];
                    const S mm = mv[b * hw + q];
                    if (gx) (*gx)[off + q] += gv * (S(1) - mm);
                    if (gp) (*gp)[off + q] += gv * mm;
                    if (gm) (*gm)[b * hw + q] += gv * (pv[off + q] - xv[off + q]);
                }
            }
        }
    });
}

template <typename S>
Tensor<S> softmax(const Tensor<S>& logits) {
    if (logits.rank() != 2) throw ShapeError("softmax: logits must be N x C, got " + shape_str(logits.shape()));
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    Tensor<S> out(logits.shape());
    for (std::size_t b = 0; b < n; ++b) {
        const S* row = logits.data() + b * c;
        const S m = *std::max_element(row, row + c);
        S se = 0;
        for (std::size_t j = 0; j < c; ++j) se += std::exp(row[j] - m);
        for (std::size_t j = 0; j < c; ++j) out[b * c + j] = std::exp(row[j] - m) / se;
    }
    return out;
}

#define PATCHFORGE_INSTANTIATE_OPS(S)                                                                  \
    template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, std::size_t);                  \
    template Var<S> dense(const Var<S>&, const Var<S>&, const Var<S>&);                                \
    template Var<S> relu(const Var<S>&);                                                               \
    template Var<S> maxpool2(const Var<S>&);                                                           \
    template Var<S> sum(const Var<S>&);                                                                \
    template Var<S> mean(const Var<S>&);                                                               \
    template Var<S> add(const Var<S>&, const Var<S>&);                                                 \
    template Var<S> mul(const Var<S>&, const Var<S>&);                                                 \
    template Var<S> scale(const Var<S>&, S);                                                           \
    template Var<S> square(const Var<S>&);                                                             \
    template Var<S> clamp_st(const Var<S>&, S, S, S);                                                  \
    template Var<S> softmax_cross_entropy(const Var<S>&, std::span<const int>);                        \
    template Var<S> pick(const Var<S>&, std::span<const int>);                                         \
    template Var<S> bilinear_sample(const Var<S>&, const SampleGrid&);                                 \
    template Var<S> lerp(const Var<S>&, const Var<S>&, const Var<S>&);                                 \
    template Tensor<S> softmax(const Tensor<S>&);

PATCHFORGE_INSTANTIATE_OPS(float)
PATCHFORGE_INSTANTIATE_OPS(double)

}  // namespace patchforge::diff
