"""Dense float64 tensors with tape-based reverse-mode differentiation.

A ``Tape`` records one forward pass as an append-only node list; ids are
topologically ordered by construction, so ``backward`` is a single reverse
sweep that visits each node exactly once. Forward values are computed by the
same numpy calls whether or not a tape is recording, so recording never
changes results. Every op output is checked finite.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

Array = np.ndarray
Pull = Callable[[Array], Array]


def _as_f64(values) -> Array:
    return np.asarray(values, dtype=np.float64)


def _check_finite(arr: Array, op: str) -> Array:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


class Tape:
    """Append-only operation record for one forward pass.

    A node stores its parent ids and one "pull" callable per parent that maps
    the node's output gradient to that parent's gradient contribution. Nodes
    whose subtree contains no gradient-requesting leaf are skipped during the
    backward sweep.
    """

    def __init__(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._pulls: list[tuple[Pull, ...]] = []
        self._needs: list[bool] = []

    def __len__(self) -> int:
        return len(self._parents)

    def record(self, parents: tuple[int, ...], pulls: tuple[Pull, ...], needs_grad: bool | None = None) -> int:
        """Append a node; used by the ops below and by custom objectives."""
        nid = len(self._parents)
        for p in parents:
            assert 0 <= p < nid, "tape nodes must be recorded after their inputs"
        if needs_grad is None:
            needs_grad = any(self._needs[p] for p in parents)
        self._parents.append(parents)
        self._pulls.append(pulls)
        self._needs.append(needs_grad)
        return nid


class Tensor:
    """Immutable dense value, optionally tied to a node on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = _as_f64(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"


def constant(data) -> Tensor:
    return Tensor(_check_finite(_as_f64(data), "constant"))


def watch(tape: Tape, data, needs_grad: bool = True) -> Tensor:
    """Register a leaf on the tape (an input or a parameter)."""
    arr = _check_finite(_as_f64(data), "watch")
    node = tape.record((), (), needs_grad=needs_grad)
    return Tensor(arr, tape, node)


def _joint_tape(tensors: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands were recorded on different tapes")
    return tape


def custom_op(out_data: Array, inputs: Sequence[Tensor], pulls: Sequence[Pull | None], op: str) -> Tensor:
    """Create the output tensor of an operation, recording it if any input is
    on a tape. ``pulls[i]`` maps the output gradient to inputs[i]'s gradient
    (None for non-differentiable inputs)."""
    out = _check_finite(out_data, op)
    tape = _joint_tape(inputs)
    if tape is None:
        return Tensor(out)
    parents = []
    parent_pulls = []
    for t, pull in zip(inputs, pulls):
        if t.node is not None and pull is not None:
            parents.append(t.node)
            parent_pulls.append(pull)
    node = tape.record(tuple(parents), tuple(parent_pulls))
    return Tensor(out, tape, node)


def backward(tape: Tape, root: Tensor) -> dict[int, Tensor]:
    """Reverse-mode sweep from a scalar root.

    Returns a map of node id to gradient for every node reached by the sweep;
    leaves registered with ``watch`` appear under their node id.
    """
    if root.tape is not tape or root.node is None:
        raise ValueError("root was not recorded on this tape")
    if root.data.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    grads: list[Array | None] = [None] * len(tape)
    grads[root.node] = np.ones((), dtype=np.float64)
    for nid in range(root.node, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        for parent, pull in zip(tape._parents[nid], tape._pulls[nid]):
            if not tape._needs[parent]:
                continue
            pg = pull(g)
            if grads[parent] is None:
                grads[parent] = pg
            else:
                grads[parent] = grads[parent] + pg
    return {nid: Tensor(g) for nid, g in enumerate(grads) if g is not None}


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: {a.shape} vs {b.shape}")
    return custom_op(a.data + b.data, (a, b), (lambda g: g, lambda g: g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"sub: {a.shape} vs {b.shape}")
    return custom_op(a.data - b.data, (a, b), (lambda g: g, lambda g: -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return custom_op(ad * bd, (a, b), (lambda g: g * bd, lambda g: g * ad), "mul")


def smul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return custom_op(a.data * c, (a,), (lambda g: g * c,), "smul")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return custom_op(np.asarray(a.data.sum(), dtype=np.float64), (a,),
                     (lambda g: np.full(shape, float(g)),), "tsum")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return custom_op(a.data.reshape(shape), (a,), (lambda g: g.reshape(old),), "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0          # subgradient at 0 is 0
    return custom_op(np.maximum(a.data, 0.0), (a,), (lambda g: g * mask,), "relu")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fully connected layer: out[i, j] = sum_k x[i, k] w[k, j] + b[j]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeMismatchError("affine expects x[n,d_in], w[d_in,d_out], b[d_out]")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"affine: x{x.shape} w{w.shape} b{b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd + b.data
    return custom_op(out, (x, w, b),
                     (lambda g: g @ wd.T,
                      lambda g: xd.T @ g,
                      lambda g: g.sum(axis=0)),
                     "affine")


def _conv_slabs(xp: Array, kh: int, kw: int) -> Array:
    """[kh*kw, n*hh*ww, c] shifted-window slabs of a (pre-padded) batch.

    Each slab is the whole batch shifted by one kernel offset, copied as
    contiguous runs; the correlation is then a short sum of plain GEMMs,
    which beats gathering overlapping patches one window at a time.
    """
    n, h, w, c = xp.shape
    hh, ww = h - kh + 1, w - kw + 1
    slabs = np.empty((kh * kw, n, hh, ww, c))
    for dy in range(kh):
        for dx in range(kw):
            slabs[dy * kw + dx] = xp[:, dy:dy + hh, dx:dx + ww, :]
    return slabs.reshape(kh * kw, n * hh * ww, c)


def _corr_valid(x: Array, k: Array) -> tuple[Array, Array, str]:
    """Valid-mode cross-correlation, stride 1; k is [kh, kw, c_in, c_out].
    Returns the output plus the patch data and strategy used to build it."""
    kh, kw, c_in, c_out = k.shape
    n, h, w, _ = x.shape
    hh, ww = h - kh + 1, w - kw + 1
    if c_in == 1:
        # single-channel input: one small-patch GEMM beats the slab loop,
        # whose rank-1 accumulations are memory bound
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
        cols = win.reshape(n * hh * ww, kh * kw)
        out = cols @ k.reshape(kh * kw, c_out)
        return out.reshape(n, hh, ww, c_out), cols, "cols"
    slabs = _conv_slabs(x, kh, kw)
    kflat = k.reshape(kh * kw, c_in, c_out)
    out = slabs[0] @ kflat[0]
    tmp = np.empty_like(out)
    for j in range(1, kh * kw):
        np.matmul(slabs[j], kflat[j], out=tmp)
        out += tmp
    return out.reshape(n, hh, ww, c_out), slabs, "slabs"


def conv2d(x: Tensor, k: Tensor, b: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation with zero 'same' padding or 'valid'."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeMismatchError("conv2d expects x[n,h,w,c_in], k[kh,kw,c_in,c_out]")
    kh, kw, c_in, c_out = k.shape
    if x.shape[3] != c_in:
        raise ShapeMismatchError(f"conv2d: input has {x.shape[3]} channels, kernel expects {c_in}")
    if b.shape != (c_out,):
        raise ShapeMismatchError(f"conv2d: bias {b.shape} vs {c_out} filters")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeMismatchError("same padding requires odd kernel dims")
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    elif padding == "valid":
        if x.shape[1] < kh or x.shape[2] < kw:
            raise ShapeMismatchError("input smaller than kernel")
        xp = x.data
    else:
        raise ValueError(f"unknown padding {padding!r}")

    raw, patches, strategy = _corr_valid(xp, k.data)
    out = raw + b.data
    kd = k.data
    n, hh, ww = out.shape[:3]
    pad_h, pad_w = xp.shape[1] - x.shape[1], xp.shape[2] - x.shape[2]

    def pull_x(g: Array) -> Array:
        # exact adjoint of the shifted-slab correlation: scatter each
        # offset's contribution back into the padded input, then crop
        dxp = np.zeros(xp.shape)
        gf = g.reshape(n * hh * ww, c_out)
        kflat = kd.reshape(kh * kw, c_in, c_out)
        tmp = np.empty((n * hh * ww, c_in))
        for dy in range(kh):
            for dx in range(kw):
                np.matmul(gf, kflat[dy * kw + dx].T, out=tmp)
                dxp[:, dy:dy + hh, dx:dx + ww, :] += tmp.reshape(n, hh, ww, c_in)
        if pad_h or pad_w:
            ph, pw = pad_h // 2, pad_w // 2
            return dxp[:, ph:ph + x.shape[1], pw:pw + x.shape[2], :]
        return dxp

    def pull_k(g: Array) -> Array:
        gf = g.reshape(n * hh * ww, c_out)
        if strategy == "cols":
            return (patches.T @ gf).reshape(kd.shape)
        dk = np.empty((kh * kw, c_in, c_out))
        for j in range(kh * kw):
            np.matmul(patches[j].T, gf, out=dk[j])
        return dk.reshape(kd.shape)

    return custom_op(out, (x, k, b),
                     (pull_x, pull_k, lambda g: g.sum(axis=(0, 1, 2))),
                     "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 window max; gradient routes to the argmax element,
    ties broken toward the lowest flat index."""
    if x.data.ndim != 4:
        raise ShapeMismatchError("maxpool2 expects x[n,h,w,c]")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"maxpool2 requires even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    x6 = x.data.reshape(n, h2, 2, w2, 2, c)
    cells = [x6[:, :, di, :, dj, :] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(cells[0], cells[1]), np.maximum(cells[2], cells[3]))

    def pull(g: Array) -> Array:
        dx6 = np.zeros((n, h2, 2, w2, 2, c))
        taken = np.zeros(out.shape, dtype=bool)
        for di in (0, 1):            # flat window order: ties go to the
            for dj in (0, 1):        # lowest original flat index
                hit = (cells[2 * di + dj] == out) & ~taken
                dx6[:, :, di, :, dj, :] = g * hit
                taken |= hit
        return dx6.reshape(n, h, w, c)

    return custom_op(out, (x,), (pull,), "maxpool2")


def standardize_image(x: Tensor) -> Tensor:
    """Per-image zero mean, unit variance with the denominator floored at
    1/sqrt(d); the model-internal transform placed ahead of conv stacks."""
    if x.data.ndim != 4:
        raise ShapeMismatchError("standardize_image expects x[n,h,w,c]")
    n = x.shape[0]
    d = int(np.prod(x.shape[1:]))
    floor = 1.0 / np.sqrt(d)
    flat = x.data.reshape(n, d)
    mu = flat.mean(axis=1, keepdims=True)
    centered = flat - mu
    sig = np.sqrt((centered ** 2).mean(axis=1, keepdims=True))
    denom = np.maximum(sig, floor)
    out = (centered / denom).reshape(x.shape)
    use_sig = sig > floor

    def pull(g: Array) -> Array:
        gf = g.reshape(n, d)
        gc = gf - gf.mean(axis=1, keepdims=True)
        y = centered / denom
        corr = (gf * y).sum(axis=1, keepdims=True) * y / d
        dx = np.where(use_sig, (gc - corr) / denom, gc / denom)
        return dx.reshape(x.shape)

    return custom_op(out, (x,), (pull,), "standardize_image")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _validate_labels(labels, k: int, n: int) -> Array:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeMismatchError(f"labels shape {y.shape}, expected ({n},)")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return y.astype(np.int64)


def softmax_rows(logits: Array) -> Array:
    """Row softmax with the log-sum-exp shift (plain numpy, no tape)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def xent_rows_data(logits: Array, labels: Array) -> Array:
    """Per-example cross-entropy values (plain numpy, no tape)."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


def xent_rows(logits: Tensor, labels) -> Tensor:
    """Per-example cross-entropy -log softmax(logits)[label], as a tensor op."""
    if logits.data.ndim != 2:
        raise ShapeMismatchError("xent_rows expects logits[n,k]")
    n, k = logits.shape
    y = _validate_labels(labels, k, n)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    rows = np.log(se[:, 0]) - z[np.arange(n), y]
    p = e / se

    def pull(g: Array) -> Array:
        d = p * g[:, None]
        d[np.arange(n), y] -= g
        return d

    return custom_op(rows, (logits,), (pull,), "xent_rows")


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over the batch; gradient is (softmax - onehot)/n."""
    n = logits.shape[0]
    return smul(tsum(xent_rows(logits, labels)), 1.0 / n)
