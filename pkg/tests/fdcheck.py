"""Test helpers: a plain reference U-Net and a ReLU-kink-aware finite-difference check."""

import numpy as np

from heteroplace import net


def ref_conv(x, w, b):
    """(N, H, W, C) -> (N, H, W, O); wrap along W, zeros along H, written with np.pad and einsum."""
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)), mode="wrap")
    p = np.pad(p, ((0, 0), (1, 1), (0, 0), (0, 0)))
    h, wd = x.shape[1:3]
    out = np.zeros(x.shape[:3] + (w.shape[0],))
    for ky in range(3):
        for kx in range(3):
            out += np.einsum("nhwc,oc->nhwo", p[:, ky : ky + h, kx : kx + wd], w[:, :, ky, kx])
    return out + b


def ref_forward(params, x, with_pre=False):
    """Reference embedding of (N, H, W) maps; optionally also the pre-activation list."""
    ws = [w.astype(float) for w in params.weights]
    bs = [b.astype(float) for b in params.biases]
    pres = []

    def conv(i, inp, relu=True):
        z = ref_conv(inp, ws[i], bs[i])
        pres.append(z)
        return np.maximum(z, 0) if relu else z

    def pool(a):
        n, h, w, c = a.shape
        return a.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def up(a):
        return a.repeat(2, axis=1).repeat(2, axis=2)

    a = conv(0, np.asarray(x, float)[..., None])
    s1 = conv(1, a)
    s2 = conv(3, conv(2, pool(s1)))
    a = conv(5, conv(4, pool(s2)))
    d2 = conv(6, np.concatenate([up(a), s2], axis=-1))
    d1 = conv(7, np.concatenate([up(d2), s1], axis=-1))
    out = conv(8, d1, relu=False)[..., 0]
    return (out, pres) if with_pre else out


def relu_pattern(params, inputs):
    """Sign pattern of every ReLU pre-activation for each input batch (fast path; only used to spot kinks)."""
    return [np.concatenate([(p > 0).ravel() for p in net.forward_batch(params, x)[1].pre[:-1]]) for x in inputs]


def perturbed(params, t, idx, delta):
    ts = [a.astype(float).copy() for a in params.tensors()]
    ts[t][idx] += delta
    return params.with_tensors(ts)


def kink_safe_fd(params, loss_fn, grads, inputs, n, rng, h=1e-6, max_tries=None):
    """Central differences at ``n`` random parameter entries whose +/-h steps leave every ReLU on the same side.

    ``loss_fn(params) -> float``; ``grads`` are analytic gradients (NetParams);
    ``inputs`` are the batches fed to the network, used for the kink test.
    Returns a list of (analytic, numeric) pairs.
    """
    tensors = params.tensors()
    gts = grads.tensors()
    sizes = np.array([t.size for t in tensors])
    base = relu_pattern(params, inputs)
    out = []
    tries = 0
    limit = max_tries or 20 * n
    while len(out) < n:
        tries += 1
        if tries > limit:
            raise RuntimeError("could not find enough kink-free parameters")
        t = int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        idx = np.unravel_index(int(rng.integers(tensors[t].size)), tensors[t].shape)
        plus, minus = perturbed(params, t, idx, h), perturbed(params, t, idx, -h)
        if any(not np.array_equal(a, b) for a, b in zip(base, relu_pattern(plus, inputs))):
            continue
        if any(not np.array_equal(a, b) for a, b in zip(base, relu_pattern(minus, inputs))):
            continue
        numeric = (loss_fn(plus) - loss_fn(minus)) / (2 * h)
        out.append((float(gts[t][idx]), numeric))
    return out


def rel_errors(pairs, floor=1e-10):
    return np.array([abs(a - f) / max(abs(a), abs(f), floor) for a, f in pairs])


def small_params(seed, widths=(2, 4, 8)):
    p = net.init_params(seed, widths, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    # nonzero biases so the bias gradient path is exercised
    return p.with_tensors([t + (0.05 * rng.standard_normal(t.shape) if t.ndim == 1 else 0) for t in p.tensors()])
