"""Rotation-invariant spectral signatures.

A column shift of the polar map (a rotation of the sensor) only changes the
phase of its 2-D DFT, so the centred magnitude spectrum is unchanged.  The
signature keeps the central low-frequency block and L2-normalises it.
"""

from __future__ import annotations

import numpy as np

EPS = 1e-12
CROP = 32
MAP_SHAPE = (40, 120)


def _crop_slices(shape, size=CROP):
    h, w = shape
    r0 = h // 2 - size // 2
    c0 = w // 2 - size // 2
    return slice(r0, r0 + size), slice(c0, c0 + size)


def dft2_magnitude(x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Centred 2-D DFT magnitude over the last two axes, sqrt(re^2 + im^2 + eps)."""
    z = np.fft.fftshift(np.fft.fft2(np.asarray(x, dtype=float)), axes=(-2, -1))
    return np.sqrt(z.real**2 + z.imag**2 + eps)


def lowpass_crop(mag: np.ndarray) -> np.ndarray:
    """Central 32x32 block of a centred 40x120 spectrum: rows 4..35, columns 44..75."""
    mag = np.asarray(mag)
    if mag.shape[-2:] != MAP_SHAPE:
        raise ValueError(f"expected a {MAP_SHAPE} spectrum, got shape {mag.shape}")
    rs, cs = _crop_slices(MAP_SHAPE)
    return mag[..., rs, cs]


def _normalise(c: np.ndarray, zero: np.ndarray):
    flat = c.reshape(c.shape[:-2] + (-1,))
    norm = np.sqrt(np.sum(flat * flat, axis=-1))
    norm = np.where(zero, 1.0, norm)
    s = c / norm[..., None, None]
    s[zero] = 0.0
    return s, norm


def signature(emb) -> np.ndarray:
    """32x32 unit-norm signature of a 40x120 map (or a batch of maps).

    An all-zero map yields the all-zero signature.
    """
    x = np.asarray(getattr(emb, "values", emb), dtype=float)
    if x.shape[-2:] != MAP_SHAPE:
        raise ValueError(f"expected maps of shape {MAP_SHAPE}, got {x.shape}")
    zero = ~np.any(x != 0, axis=(-2, -1))
    s, _ = _normalise(lowpass_crop(dft2_magnitude(x)), zero)
    return s


def signature_with_grad(x: np.ndarray):
    """Signatures of a batch of maps plus a closure mapping d(loss)/d(signature) to d(loss)/d(map)."""
    x = np.asarray(x, dtype=float)
    batch_shape = x.shape[:-2]
    spec = np.fft.fftshift(np.fft.fft2(x), axes=(-2, -1))
    mag = np.sqrt(spec.real**2 + spec.imag**2 + EPS)
    rs, cs = _crop_slices(MAP_SHAPE)
    crop = mag[..., rs, cs]
    zero = ~np.any(x != 0, axis=(-2, -1))
    s, norm = _normalise(crop, zero)

    def backward(gs: np.ndarray) -> np.ndarray:
        gs = np.asarray(gs, dtype=float).reshape(batch_shape + (CROP, CROP))
        dot = np.sum(gs * s, axis=(-2, -1), keepdims=True)
        gcrop = (gs - s * dot) / norm[..., None, None]
        gcrop[zero] = 0.0
        gmag = np.zeros(batch_shape + MAP_SHAPE)
        gmag[..., rs, cs] = gcrop
        gz = gmag / mag * spec  # d/dRe + i d/dIm
        gz = np.fft.ifftshift(gz, axes=(-2, -1))
        return np.real(np.fft.ifft2(gz)) * (MAP_SHAPE[0] * MAP_SHAPE[1])

    return s, backward


def signature_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"signature shapes differ: {a.shape} vs {b.shape}")
    d = (a - b).ravel()
    return float(np.sqrt(np.dot(d, d)))
