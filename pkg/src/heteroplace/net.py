"""Two-level U-Net mapping a 40x120 polar grid to a 40x120 embedding.

Layout is channels-last ``(N, H, W, C)`` throughout.  Every convolution is
3x3, stride 1, padded circularly along the sector axis (W) and with zeros
along the ring axis (H).  Gradients are derived by hand for this fixed graph.

A convolution is evaluated on the padded grid flattened to rows, so each of
the nine taps is a contiguous row window ``buf[m + o : m + o + L]`` and the
whole layer is nine ``(L, C) @ (C, O)`` products without an im2col copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .descriptor import PolarDescriptor

DEFAULT_WIDTHS = (8, 16, 32)
LAYER_NAMES = ("enc1a", "enc1b", "enc2a", "enc2b", "mid_a", "mid_b", "dec2", "dec1", "head")


def layer_channels(widths=DEFAULT_WIDTHS) -> list[tuple[int, int]]:
    """(in, out) channels of each layer in :data:`LAYER_NAMES` order."""
    c1, c2, c3 = widths
    return [(1, c1), (c1, c1), (c1, c2), (c2, c2), (c2, c3), (c3, c3), (c3 + c2, c2), (c2 + c1, c1), (c1, 1)]


@dataclass
class NetParams:
    widths: tuple[int, int, int]
    weights: list[np.ndarray]  # (out, in, 3, 3)
    biases: list[np.ndarray]  # (out,)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        expected = layer_channels(self.widths)
        if len(self.weights) != len(expected) or len(self.biases) != len(expected):
            raise ValueError(f"expected {len(expected)} layers, got {len(self.weights)}")
        for name, (cin, cout), w, b in zip(LAYER_NAMES, expected, self.weights, self.biases):
            if w.shape != (cout, cin, 3, 3) or b.shape != (cout,):
                raise ValueError(
                    f"layer {name}: expected weight {(cout, cin, 3, 3)} / bias {(cout,)}, "
                    f"got {w.shape} / {b.shape}"
                )

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def tensors(self) -> list[np.ndarray]:
        """Flat [w0, b0, w1, b1, ...] view used by the optimiser."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_tensors(self, tensors) -> "NetParams":
        return NetParams(self.widths, list(tensors[0::2]), list(tensors[1::2]))

    def astype(self, dtype) -> "NetParams":
        return self.with_tensors([t.astype(dtype) for t in self.tensors()])

    def copy(self) -> "NetParams":
        return self.with_tensors([t.copy() for t in self.tensors()])

    def zeros_like(self) -> "NetParams":
        return self.with_tensors([np.zeros_like(t) for t in self.tensors()])


ParamGrads = NetParams


def init_params(seed: int, widths=DEFAULT_WIDTHS, dtype=np.float32) -> NetParams:
    """Kernels ~ U(-a, a) with a = sqrt(6 / fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for cin, cout in layer_channels(widths):
        fan_in = cin * 9
        a = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-a, a, size=(cout, cin, 3, 3)).astype(dtype))
        biases.append(np.zeros(cout, dtype=dtype))
    return NetParams(tuple(widths), weights, biases)


# ---------------------------------------------------------------- primitives


def _pad_rows(x: np.ndarray):
    """Pad (N, H, W, C) circular-in-W / zero-in-H and flatten to rows with a margin."""
    n, h, w, c = x.shape
    hp, wp = h + 2, w + 2
    m = wp + 1
    buf = np.zeros((n * hp * wp + 2 * m, c), dtype=x.dtype)
    grid = buf[m : m + n * hp * wp].reshape(n, hp, wp, c)
    grid[:, 1:-1, 1:-1] = x
    grid[:, 1:-1, 0] = x[:, :, -1]
    grid[:, 1:-1, -1] = x[:, :, 0]
    return buf


def _offsets(w: int) -> list[int]:
    wp = w + 2
    return [(ky - 1) * wp + (kx - 1) for ky in range(3) for kx in range(3)]


def _tap_matrices(weight: np.ndarray) -> np.ndarray:
    """(O, C, 3, 3) kernel -> contiguous (9, C, O) per-tap matrices."""
    cout, cin = weight.shape[:2]
    return np.ascontiguousarray(weight.transpose(2, 3, 1, 0)).reshape(9, cin, cout)


def _block_rows(*channels: int) -> int:
    """Row block keeping the working set of one tap product in cache."""
    return int(np.clip((1 << 17) // max(channels), 1024, 16384))


def _accumulate_taps(src: np.ndarray, m: int, offsets, taps: np.ndarray, rows: int) -> np.ndarray:
    """sum_k src[m + o_k + r] @ taps[k] for r < rows, evaluated block by block."""
    out = np.empty((rows, taps.shape[2]), dtype=src.dtype)
    bs = _block_rows(*taps.shape[1:])
    if taps.shape[1] == 1:
        # single input channel: gather the nine taps side by side, one (rows, 9) GEMM
        flat = taps.reshape(len(offsets), -1)
        cols = np.empty((bs, len(offsets)), dtype=src.dtype)
        for s in range(0, rows, bs):
            e = min(rows, s + bs)
            for k, o in enumerate(offsets):
                cols[: e - s, k] = src[m + o + s : m + o + e, 0]
            np.matmul(cols[: e - s], flat, out=out[s:e])
        return out
    for s in range(0, rows, bs):
        e = min(rows, s + bs)
        acc = src[m + offsets[0] + s : m + offsets[0] + e] @ taps[0]
        for k in range(1, len(offsets)):
            o = offsets[k]
            acc += src[m + o + s : m + o + e] @ taps[k]
        out[s:e] = acc
    return out


def conv_forward(buf: np.ndarray, shape, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    n, h, w, _ = shape
    hp, wp = h + 2, w + 2
    m = wp + 1
    rows = n * hp * wp
    out = _accumulate_taps(buf, m, _offsets(w), _tap_matrices(weight), rows)
    out = out.reshape(n, hp, wp, -1)[:, 1:-1, 1:-1]
    return out + bias


def conv_backward(g: np.ndarray, buf: np.ndarray, weight: np.ndarray, need_input=True):
    """Gradients of a padded 3x3 convolution given d(out) ``g`` of shape (N, H, W, O)."""
    n, h, w, cout = g.shape
    cin = weight.shape[1]
    hp, wp = h + 2, w + 2
    m = wp + 1
    rows = n * hp * wp
    offsets = _offsets(w)
    gbuf = np.zeros((rows + 2 * m, cout), dtype=g.dtype)
    gbuf[m : m + rows].reshape(n, hp, wp, cout)[:, 1:-1, 1:-1] = g

    dw_taps = np.zeros((9, cin, cout), dtype=g.dtype)
    bs = _block_rows(cin, cout)
    for s in range(0, rows, bs):
        e = min(rows, s + bs)
        gm = gbuf[m + s : m + e]
        for k, o in enumerate(offsets):
            dw_taps[k] += buf[m + o + s : m + o + e].T @ gm
    dw = dw_taps.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1).copy()
    db = g.sum(axis=(0, 1, 2))
    if not need_input:
        return dw, db, None

    taps_t = np.ascontiguousarray(_tap_matrices(weight).transpose(0, 2, 1))
    dgrid = _accumulate_taps(gbuf, m, [-o for o in offsets], taps_t, rows)
    dgrid = dgrid.reshape(n, hp, wp, -1)
    dx = dgrid[:, 1:-1, 1:-1].copy()
    dx[:, :, -1] += dgrid[:, 1:-1, 0]
    dx[:, :, 0] += dgrid[:, 1:-1, -1]
    return dw, db, dx


def _pool(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _pool_backward(g):
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25


def _upsample(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample_backward(g):
    n, h, w, c = g.shape
    return g.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# ---------------------------------------------------------------- network


@dataclass
class ForwardCache:
    widths: tuple[int, int, int]
    shape: tuple[int, ...]
    bufs: list[np.ndarray] = field(default_factory=list)  # padded conv inputs (post-activations)
    pre: list[np.ndarray] = field(default_factory=list)  # conv outputs before ReLU


def _as_batch(x) -> np.ndarray:
    if isinstance(x, PolarDescriptor):
        x = x.values
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] % 4 or x.shape[2] % 4:
        raise ValueError(f"expected (N, H, W) maps with H, W divisible by 4, got {x.shape}")
    return x


def forward_batch(params: NetParams, x, dtype=np.float64):
    """Embed a batch of (N, 40, 120) maps.  Returns (N, 40, 120) embeddings and the cache."""
    x = _as_batch(x).astype(dtype, copy=False)
    ws = [w.astype(dtype, copy=False) for w in params.weights]
    bs = [b.astype(dtype, copy=False) for b in params.biases]
    cache = ForwardCache(params.widths, x.shape)

    def conv(i, inp, relu=True):
        buf = _pad_rows(inp)
        pre = conv_forward(buf, inp.shape, ws[i], bs[i])
        cache.bufs.append(buf)
        cache.pre.append(pre)
        return np.maximum(pre, 0) if relu else pre

    a = conv(0, x[..., None])
    s1 = conv(1, a)
    a = conv(2, _pool(s1))
    s2 = conv(3, a)
    a = conv(4, _pool(s2))
    a = conv(5, a)
    d2 = conv(6, np.concatenate([_upsample(a), s2], axis=-1))
    d1 = conv(7, np.concatenate([_upsample(d2), s1], axis=-1))
    out = conv(8, d1, relu=False)
    return out[..., 0], cache


def backward_batch(params: NetParams, cache: ForwardCache, grad_output, need_input=True):
    """Reverse pass: returns (ParamGrads, d(loss)/d(input) of shape (N, H, W))."""
    if tuple(params.widths) != tuple(cache.widths):
        raise ValueError(f"cache built for widths {cache.widths}, params have {params.widths}")
    if len(cache.bufs) != len(LAYER_NAMES):
        raise ValueError("forward cache is incomplete")
    g = np.asarray(grad_output)
    if g.ndim == 2:
        g = g[None]
    if g.shape != cache.shape:
        raise ValueError(f"grad_output shape {g.shape} does not match forward input {cache.shape}")
    dtype = cache.pre[0].dtype
    g = g.astype(dtype, copy=False)
    ws = [w.astype(dtype, copy=False) for w in params.weights]
    c1, c2, c3 = params.widths
    dws = [None] * 9
    dbs = [None] * 9

    def back(i, g, need=True):
        dws[i], dbs[i], dx = conv_backward(g, cache.bufs[i], ws[i], need)
        return dx

    def relu_mask(i, g):
        return g * (cache.pre[i] > 0)

    g = back(8, g[..., None])
    g = back(7, relu_mask(7, g))
    g_s1 = g[..., c2:]
    g = back(6, relu_mask(6, _upsample_backward(g[..., :c2])))
    g_s2 = g[..., c3:]
    g = back(5, relu_mask(5, _upsample_backward(g[..., :c3])))
    g = back(4, relu_mask(4, g))
    g = back(3, relu_mask(3, g_s2 + _pool_backward(g)))
    g = back(2, relu_mask(2, g))
    g = back(1, relu_mask(1, g_s1 + _pool_backward(g)))
    g = back(0, relu_mask(0, g), need_input)
    grads = NetParams(params.widths, dws, dbs)
    return grads, (g[..., 0] if g is not None else None)


def forward(params: NetParams, desc, dtype=np.float64):
    """Embed one 40x120 descriptor.  Returns ((40, 120) embedding, cache)."""
    x = _as_batch(desc)
    if x.shape != (1, 40, 120):
        raise ValueError(f"expected a single 40x120 descriptor, got {x.shape[1:]}")
    out, cache = forward_batch(params, x, dtype)
    return out[0], cache


def backward(params: NetParams, cache: ForwardCache, grad_output):
    grads, gin = backward_batch(params, cache, grad_output)
    return grads, gin[0]


def embed(params: NetParams, maps, batch_size: int = 64, dtype=np.float64) -> np.ndarray:
    """Inference over many maps in fixed-size chunks."""
    maps = _as_batch(maps)
    out = [forward_batch(params, maps[i : i + batch_size], dtype)[0] for i in range(0, len(maps), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0,) + maps.shape[1:])
