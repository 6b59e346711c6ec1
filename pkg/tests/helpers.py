"""Independent oracles the tests check the fast paths against: naive loop
implementations, brute-force scans, and central finite differences."""
import numpy as np

from mmrb import nn
from mmrb.nn import LayerSpec, ModelSpec


def naive_matmul(a, b):
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def naive_conv2d(x, k, b, padding="same"):
    n, h, w, c_in = x.shape
    kh, kw, _, c_out = k.shape
    if padding == "same":
        ph, pw = kh // 2, kw // 2
        xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c_in))
        xp[:, ph:ph + h, pw:pw + w, :] = x
        oh, ow = h, w
    else:
        xp = x
        oh, ow = h - kh + 1, w - kw + 1
    out = np.zeros((n, oh, ow, c_out))
    for i in range(n):
        for y in range(oh):
            for xx in range(ow):
                for co in range(c_out):
                    acc = 0.0
                    for dy in range(kh):
                        for dx in range(kw):
                            for ci in range(c_in):
                                acc += xp[i, y + dy, xx + dx, ci] * k[dy, dx, ci, co]
                    out[i, y, xx, co] = acc + b[co]
    return out


def naive_maxpool2(x):
    n, h, w, c = x.shape
    out = np.zeros((n, h // 2, w // 2, c))
    for i in range(n):
        for y in range(h // 2):
            for xx in range(w // 2):
                for ch in range(c):
                    out[i, y, xx, ch] = x[i, 2 * y:2 * y + 2, 2 * xx:2 * xx + 2, ch].max()
    return out


def central_diff(f, x, step=1e-6):
    """Gradient of scalar f at x by central differences, coordinate-wise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def linear_softmax_spec(d: int, k: int) -> ModelSpec:
    """Single affine layer: cross-entropy of these logits is convex in the
    input, so the exact ball maximum sits at a vertex."""
    return ModelSpec(layers=(LayerSpec("affine", width=k),),
                     capacity_scale=1, num_classes=k, input_shape=(d,))


def linear_softmax_model(d: int, k: int, seed: int) -> nn.Model:
    spec = linear_softmax_spec(d, k)
    rng = np.random.default_rng(seed)
    params = nn.ModelParams(weights=[rng.normal(0, 1.0, size=(d, k))],
                            biases=[rng.normal(0, 0.5, size=k)])
    return nn.Model(spec, params)


def enumerate_vertex_max(model, x0, y, epsilon):
    """Exact inner max of the cross-entropy over the linf ball for a convex
    instance: try all 2^d sign vertices."""
    d = x0.size
    best = -np.inf
    for mask in range(1 << d):
        signs = np.array([1.0 if mask >> i & 1 else -1.0 for i in range(d)])
        x = x0 + epsilon * signs
        loss = model.loss_rows(x[None], np.array([y]))[0]
        best = max(best, float(loss))
    return best
