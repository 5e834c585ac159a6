"""Triplet sampling, the joint cross-modal triplet loss, Adam, and the training loop.

A training location carries both a lidar and a radar descriptor.  The joint
loss averages the hinge over all 2^3 ways of choosing the modality of the
anchor, positive and negative signatures, which pulls both sensors into one
signature space.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import net, spectral
from .descriptor import LIDAR, RADAR

JOINT = "joint-L1"
COMBINED = "combined-L1-2"
SEPARATE = "separate-per-modality"
LOSS_MODES = (JOINT, COMBINED, SEPARATE)

# (anchor, positive, negative) modality choices; 0 = radar, 1 = lidar
COMBINATIONS = tuple(itertools.product((0, 1), repeat=3))


class TrainingDivergence(ArithmeticError):
    """Raised when a gradient or parameter stops being finite."""


class DegenerateDataset(ValueError):
    """Raised when triplets cannot be formed from the given locations."""


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 1.0
    alpha: float = 0.2
    learning_rate: float = 1e-3
    lr_decay: float = 0.9
    batch_size: int = 16
    epochs: int = 6
    samples_per_epoch: int = 1400
    d_pos: float = 3.0
    d_neg: float = 25.0
    loss_mode: str = JOINT
    two_networks: bool = False
    widths: tuple[int, int, int] = net.DEFAULT_WIDTHS
    seed: int = 0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.d_pos < self.d_neg:
            raise ValueError("d_pos must be smaller than d_neg")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.samples_per_epoch < 0:
            raise ValueError("epochs and samples_per_epoch must be >= 0")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    @property
    def steps_per_epoch(self) -> int:
        return self.samples_per_epoch // self.batch_size


# ---------------------------------------------------------------- data


@dataclass
class LocationSet:
    """Per-location paired descriptors: ``lidar[i]`` and ``radar[i]`` were taken at ``xy[i]``."""

    xy: np.ndarray
    lidar: np.ndarray
    radar: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        self.lidar = np.asarray(self.lidar)
        self.radar = np.asarray(self.radar)
        n = len(self.xy)
        if self.lidar.shape[0] != n or self.radar.shape[0] != n:
            raise ValueError("xy, lidar and radar must have one entry per location")
        if self.lidar.shape[1:] != self.radar.shape[1:]:
            raise ValueError("lidar and radar descriptors differ in shape")

    def __len__(self):
        return len(self.xy)


@dataclass
class TripletBatch:
    anchor: np.ndarray  # location indices, shape (B,)
    positive: np.ndarray
    negative: np.ndarray

    def __len__(self):
        return len(self.anchor)

    def indices(self) -> np.ndarray:
        """Anchor, positive and negative indices stacked into one (3B,) array."""
        return np.concatenate([self.anchor, self.positive, self.negative])


class TripletSampler:
    """Neighbour tables for drawing triplets by pose distance."""

    def __init__(self, xy: np.ndarray, d_pos: float, d_neg: float):
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        diff = xy[:, None, :] - xy[None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        self.positives = [np.flatnonzero(row <= d_pos) for row in dist]
        self.negatives = [np.flatnonzero(row >= d_neg) for row in dist]
        self.anchors = np.array([i for i, n in enumerate(self.negatives) if len(n)], dtype=np.int64)
        if len(self.anchors) == 0:
            raise DegenerateDataset(f"no two locations are {d_neg} m apart; cannot form negatives")

    def sample(self, batch_size: int, rng: np.random.Generator) -> TripletBatch:
        a = self.anchors[rng.integers(len(self.anchors), size=batch_size)]
        p = np.array([self.positives[i][rng.integers(len(self.positives[i]))] for i in a], dtype=np.int64)
        n = np.array([self.negatives[i][rng.integers(len(self.negatives[i]))] for i in a], dtype=np.int64)
        return TripletBatch(a, p, n)


def sample_triplets(data: LocationSet, cfg: TrainConfig, rng: np.random.Generator) -> TripletBatch:
    return TripletSampler(data.xy, cfg.d_pos, cfg.d_neg).sample(cfg.batch_size, rng)


# ---------------------------------------------------------------- losses


def _pair_distance(a, b):
    d = a - b
    dist = np.sqrt(np.sum(d * d, axis=(-2, -1)))
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where((dist > 0)[..., None, None], d / safe[..., None, None], 0.0)
    return dist, unit


def _check_shapes(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"signature shapes differ: {shape} vs {a.shape}")


def joint_triplet_loss(anchor, positive, negative, margin: float = 1.0):
    """Hinge triplet loss averaged over the 8 modality assignments and the batch.

    Each argument is a ``(F_radar, F_lidar)`` pair of signatures, either single
    ``(h, w)`` arrays or batches ``(B, h, w)``.  Returns ``(loss, grads)`` where
    ``grads`` mirrors the input structure.
    """
    sig = [np.asarray(x, dtype=float) for pair in (anchor, positive, negative) for x in pair]
    _check_shapes(*sig)
    single = sig[0].ndim == 2
    if single:
        sig = [s[None] for s in sig]
    b = sig[0].shape[0]
    grads = [np.zeros_like(s) for s in sig]
    total = np.zeros(b)
    scale = 1.0 / (len(COMBINATIONS) * b)
    for ma, mp, mn in COMBINATIONS:
        a, p, n = sig[ma], sig[2 + mp], sig[4 + mn]
        dp, up = _pair_distance(a, p)
        dn, un = _pair_distance(a, n)
        h = margin + dp - dn
        active = (h > 0).astype(float)
        total += np.maximum(h, 0.0)
        w = (active * scale)[:, None, None]
        grads[ma] += w * (up - un)
        grads[2 + mp] -= w * up
        grads[4 + mn] += w * un
    loss = float(np.sum(total) * scale)
    if single:
        grads = [g[0] for g in grads]
    return loss, ((grads[0], grads[1]), (grads[2], grads[3]), (grads[4], grads[5]))


def triplet_loss(anchor, positive, negative, margin: float = 1.0):
    """Single-modality hinge loss averaged over the batch.  Returns (loss, (ga, gp, gn))."""
    a, p, n = (np.asarray(x, dtype=float) for x in (anchor, positive, negative))
    _check_shapes(a, p, n)
    single = a.ndim == 2
    if single:
        a, p, n = a[None], p[None], n[None]
    dp, up = _pair_distance(a, p)
    dn, un = _pair_distance(a, n)
    h = margin + dp - dn
    w = ((h > 0) / len(a))[:, None, None]
    loss = float(np.mean(np.maximum(h, 0.0)))
    ga, gp, gn = w * (up - un), -w * up, w * un
    if single:
        ga, gp, gn = ga[0], gp[0], gn[0]
    return loss, (ga, gp, gn)


def transform_loss(f_radar, f_lidar):
    """Mean Euclidean distance between same-location radar and lidar signatures."""
    r = np.asarray(f_radar, dtype=float)
    l = np.asarray(f_lidar, dtype=float)
    _check_shapes(r, l)
    single = r.ndim == 2
    if single:
        r, l = r[None], l[None]
    dist, unit = _pair_distance(r, l)
    loss = float(np.mean(dist))
    gr = unit / len(r)
    if single:
        gr = gr[0]
    return loss, (gr, -gr)


def combined_loss(l1, l2, alpha: float = 0.2):
    """``L1 + alpha * L2`` for ``(loss, grads)`` pairs whose grads are arrays or nested tuples of arrays."""
    loss1, g1 = l1
    loss2, g2 = l2

    def mix(a, b):
        if isinstance(a, (tuple, list)):
            return type(a)(mix(x, y) for x, y in zip(a, b))
        return a + alpha * b

    return loss1 + alpha * loss2, mix(g1, g2)


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: net.NetParams) -> "AdamState":
        ts = params.tensors()
        return cls([np.zeros_like(t) for t in ts], [np.zeros_like(t) for t in ts])

    def copy(self) -> "AdamState":
        return replace(self, m=[a.copy() for a in self.m], v=[a.copy() for a in self.v])


def adam_step(params: net.NetParams, grads: net.NetParams, state: AdamState, lr: float):
    """One bias-corrected Adam update.  Returns new (params, state); inputs are not modified."""
    ps, gs = params.tensors(), grads.tensors()
    if len(ps) != len(gs) or len(ps) != len(state.m):
        raise ValueError("params, grads and optimiser state are not congruent")
    for p, g, m in zip(ps, gs, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence("non-finite gradient")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        g = g.astype(np.float64)
        m64 = b1 * m.astype(np.float64) + (1.0 - b1) * g
        v64 = b2 * v.astype(np.float64) + (1.0 - b2) * g * g
        upd = lr * (m64 / c1) / (np.sqrt(v64 / c2) + state.eps)
        new_p.append((p.astype(np.float64) - upd).astype(p.dtype))
        new_m.append(m64.astype(m.dtype))
        new_v.append(v64.astype(v.dtype))
    return params.with_tensors(new_p), replace(state, m=new_m, v=new_v, step=t)


# ---------------------------------------------------------------- model


@dataclass
class EmbeddingModel:
    """Encoder(s) per modality.  In the shared setting both names point to one NetParams object."""

    radar: net.NetParams
    lidar: net.NetParams

    @classmethod
    def shared(cls, params: net.NetParams) -> "EmbeddingModel":
        return cls(params, params)

    @property
    def is_shared(self) -> bool:
        return self.radar is self.lidar

    def params_for(self, modality: str) -> net.NetParams:
        if modality == RADAR:
            return self.radar
        if modality == LIDAR:
            return self.lidar
        raise ValueError(f"unknown modality {modality!r}")

    def parameter_sets(self) -> list[net.NetParams]:
        return [self.radar] if self.is_shared else [self.radar, self.lidar]

    def signatures(self, maps: np.ndarray, modality: str, batch_size: int = 64) -> np.ndarray:
        """Embed descriptors with the modality's encoder and take their signatures."""
        return spectral.signature(net.embed(self.params_for(modality), maps, batch_size))


@dataclass
class HistoryRow:
    step: int
    epoch: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    model: EmbeddingModel
    history: list[HistoryRow] = field(default_factory=list)
    optimizer: list[AdamState] = field(default_factory=list)

    def __iter__(self):
        return iter((self.model, self.history))


# ---------------------------------------------------------------- training


def _embed_with_grad(params, maps, dtype):
    """Forward maps and signatures; returns (signatures, backward(grad_sig) -> ParamGrads)."""
    emb, cache = net.forward_batch(params, maps, dtype=dtype)
    sig, sig_back = spectral.signature_with_grad(emb)

    def backward(g_sig):
        g_emb = sig_back(g_sig)
        grads, _ = net.backward_batch(params, cache, g_emb, need_input=False)
        return grads

    return sig, backward


def joint_step_loss(model: EmbeddingModel, data: LocationSet, batch: TripletBatch, cfg: TrainConfig, dtype=np.float32):
    """Loss and per-parameter-set gradients for one batch in the joint or combined mode."""
    idx = batch.indices()
    b = len(batch)
    radar_maps, lidar_maps = data.radar[idx], data.lidar[idx]
    if model.is_shared:
        sig, back = _embed_with_grad(model.radar, np.concatenate([radar_maps, lidar_maps]), dtype)
        sr, sl = sig[: 3 * b], sig[3 * b :]
    else:
        sr, back_r = _embed_with_grad(model.radar, radar_maps, dtype)
        sl, back_l = _embed_with_grad(model.lidar, lidar_maps, dtype)
    parts = [(sr[k * b : (k + 1) * b], sl[k * b : (k + 1) * b]) for k in range(3)]
    l1 = joint_triplet_loss(*parts, margin=cfg.margin)
    if cfg.loss_mode == COMBINED:
        lt, (gtr, gtl) = transform_loss(sr, sl)
        thirds = lambda g: [g[k * b : (k + 1) * b] for k in range(3)]
        l2 = (lt, tuple(zip(thirds(gtr), thirds(gtl))))
        loss, (ga, gp, gn) = combined_loss(l1, l2, cfg.alpha)
    else:
        loss, (ga, gp, gn) = l1
    g_r = np.concatenate([ga[0], gp[0], gn[0]])
    g_l = np.concatenate([ga[1], gp[1], gn[1]])
    if model.is_shared:
        grads = [back(np.concatenate([g_r, g_l]))]
    else:
        grads = [back_r(g_r), back_l(g_l)]
    return loss, grads


def separate_step_loss(model: EmbeddingModel, data: LocationSet, batch: TripletBatch, cfg: TrainConfig, dtype=np.float32):
    """Per-modality triplet losses; each encoder only ever sees its own sensor."""
    idx = batch.indices()
    b = len(batch)
    losses, grads = [], []
    for params, maps in ((model.radar, data.radar[idx]), (model.lidar, data.lidar[idx])):
        sig, back = _embed_with_grad(params, maps, dtype)
        loss, (ga, gp, gn) = triplet_loss(sig[:b], sig[b : 2 * b], sig[2 * b :], cfg.margin)
        losses.append(loss)
        grads.append(back(np.concatenate([ga, gp, gn])))
    return losses[0] + losses[1], grads


def init_model(cfg: TrainConfig) -> EmbeddingModel:
    first = net.init_params(cfg.seed, cfg.widths)
    if cfg.loss_mode == SEPARATE or cfg.two_networks:
        return EmbeddingModel(first, net.init_params(cfg.seed + 1, cfg.widths))
    return EmbeddingModel.shared(first)


def train(
    data: LocationSet,
    cfg: TrainConfig = TrainConfig(),
    on_epoch: Callable[[int, TrainResult], None] | None = None,
    dtype=np.float32,
) -> TrainResult:
    """Run ``epochs * steps_per_epoch`` Adam steps; the learning rate decays after each epoch.

    ``on_epoch(epoch, result)`` is called after every epoch (checkpointing hook).
    The result unpacks as ``model, history``.
    """
    model = init_model(cfg)
    result = TrainResult(model, [], [AdamState.zeros_like(p) for p in model.parameter_sets()])
    if cfg.epochs == 0 or cfg.steps_per_epoch == 0:
        return result
    sampler = TripletSampler(data.xy, cfg.d_pos, cfg.d_neg)
    rng = np.random.default_rng([cfg.seed, 0x7E])
    step_loss = separate_step_loss if cfg.loss_mode == SEPARATE else joint_step_loss
    lr = cfg.learning_rate
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            batch = sampler.sample(cfg.batch_size, rng)
            loss, grads = step_loss(result.model, data, batch, cfg, dtype)
            if not math.isfinite(loss):
                raise TrainingDivergence(f"loss became {loss} at step {step}")
            new_sets = []
            for k, (params, g) in enumerate(zip(result.model.parameter_sets(), grads)):
                params, result.optimizer[k] = adam_step(params, g, result.optimizer[k], lr)
                new_sets.append(params)
            if result.model.is_shared:
                result.model = EmbeddingModel.shared(new_sets[0])
            else:
                result.model = EmbeddingModel(*new_sets)
            result.history.append(HistoryRow(step, epoch, loss, lr))
            step += 1
        if on_epoch is not None:
            on_epoch(epoch, result)
        lr *= cfg.lr_decay
    return result
