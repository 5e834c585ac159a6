"""Acceptance gate: one test per criterion, each recording a pass/fail line.

The two training runs on the synthetic split dominate the runtime (about
ten minutes each on one core).
"""

import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from fdcheck import kink_safe_fd, rel_errors, small_params
from heteroplace import evaluation, net, pipeline, retrieval, spectral, training
from heteroplace.geometry import Trajectory, search_backward_bound, search_forward_bound, SubmapConfig
from heteroplace.training import COMBINED, JOINT, SEPARATE, EmbeddingModel, LocationSet, TrainConfig, TripletBatch
from test_cli import digest, pipeline_run
from test_evaluation import oracle_pr
from test_formats import ENCODE, N, header_fields
from test_geometry import oracle_backward, oracle_forward

SEED = 0
TRAIN_BUDGET_S = 15 * 60


@pytest.fixture(scope="module")
def experiment():
    return pipeline.build_experiment(pipeline.ExperimentConfig(seed=SEED))


def timed_train(exp, mode):
    t0 = time.process_time()
    result = training.train(exp.train.locations(), TrainConfig(loss_mode=mode, seed=SEED))
    return result, time.process_time() - t0


@pytest.fixture(scope="module")
def joint(experiment):
    return timed_train(experiment, JOINT)


@pytest.fixture(scope="module")
def separate(experiment):
    return timed_train(experiment, SEPARATE)


def fmt(recalls):
    return " ".join(f"{k}={v.recall_at_1:.1f}" for k, v in recalls.items())


# ---------------------------------------------------------------- 1


def test_c01_identity_signature_rotation_invariance(report):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    x = rng.random((1000, 40, 120))
    shifts = rng.integers(0, 120, 1000)
    rolled = np.stack([np.roll(d, int(k), axis=1) for d, k in zip(x, shifts)])
    err = np.abs(spectral.signature(rolled) - spectral.signature(x)).max()
    elapsed = time.perf_counter() - t0
    report(1, err < 1e-9 and elapsed < 10, f"max-abs {err:.2e} (< 1e-9), {elapsed:.2f} s (< 10 s)")


# ---------------------------------------------------------------- 2


def test_c02_equivariance_and_trained_drift(report, joint, experiment):
    rng = np.random.default_rng(2)
    params = net.init_params(2)
    x = rng.random((100, 40, 120))
    k = 4 * rng.integers(1, 30, 100)
    out = net.embed(params, x)
    out_shifted = net.embed(params, np.stack([np.roll(a, int(s), axis=1) for a, s in zip(x, k)]))
    eq = max(np.abs(np.roll(o, int(s), axis=1) - o2).max() for o, o2, s in zip(out, out_shifted, k))

    model = joint[0].model
    drifts = []
    for modality in ("lidar", "radar"):
        maps = experiment.map.maps(modality)[rng.choice(600, 50, replace=False)]
        shifts = rng.integers(1, 120, len(maps))
        base = model.signatures(maps, modality)
        moved = model.signatures(np.stack([np.roll(m, int(s), axis=1) for m, s in zip(maps, shifts)]), modality)
        drifts.append(np.linalg.norm((moved - base).reshape(len(maps), -1), axis=1))
    drift = np.concatenate(drifts)
    ok = eq < 1e-6 and drift.mean() < 0.05
    report(2, ok, f"shift-by-4 error {eq:.2e} (< 1e-6); trained drift mean {drift.mean():.4f} (< 0.05), max {drift.max():.4f}")


# ---------------------------------------------------------------- 3


def _full_loss_fd(mode, rng):
    params = small_params(3)
    # zero-mean maps keep the spectrum from being all DC, so gradients are not tiny
    data = LocationSet(np.zeros((6, 2)), rng.normal(size=(6, 40, 120)), rng.normal(size=(6, 40, 120)))
    batch = TripletBatch(np.array([0, 1]), np.array([2, 3]), np.array([4, 5]))
    cfg = TrainConfig(loss_mode=mode, widths=(2, 4, 8), margin=1.0)
    step = training.joint_step_loss

    radar, lidar = data.radar[batch.indices()], data.lidar[batch.indices()]

    def loss_fn(p):
        # forward only: signatures of both sensors composed with the loss functions
        sr = spectral.signature(net.forward_batch(p, radar, dtype=np.float64)[0])
        sl = spectral.signature(net.forward_batch(p, lidar, dtype=np.float64)[0])
        parts = [(sr[2 * k : 2 * k + 2], sl[2 * k : 2 * k + 2]) for k in range(3)]
        l1 = training.joint_triplet_loss(*parts, margin=cfg.margin)
        if mode == COMBINED:
            return training.combined_loss(l1, training.transform_loss(sr, sl), cfg.alpha)[0]
        return l1[0]

    _, (grads,) = step(EmbeddingModel.shared(params), data, batch, cfg, np.float64)
    inputs = [np.concatenate([radar, lidar])]
    return rel_errors(kink_safe_fd(params, loss_fn, grads, inputs, 110, rng, h=1e-5))


def test_c03_full_loss_gradient(report):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    errs = np.concatenate([_full_loss_fd(JOINT, rng), _full_loss_fd(COMBINED, rng)])
    elapsed = time.perf_counter() - t0
    ok = len(errs) >= 200 and errs.max() < 1e-4 and elapsed < 60
    report(3, ok, f"{len(errs)} parameters, max rel error {errs.max():.2e} (< 1e-4), {elapsed:.1f} s (< 60 s)")


# ---------------------------------------------------------------- 4


def random_trajectory(rng, n=500):
    yaw = np.cumsum(rng.normal(0, 0.2, n))
    step = rng.uniform(0.1, 3.0, n)
    return Trajectory(np.arange(n) * 0.1, np.cumsum(step * np.cos(yaw)), np.cumsum(step * np.sin(yaw)), yaw)


def test_c04_submap_bounds_match_oracle(report):
    rng = np.random.default_rng(4)
    cfg = SubmapConfig()
    checked = agree = 0
    for _ in range(100):
        traj = random_trajectory(rng)
        for c in rng.choice(len(traj), 5, replace=False):
            checked += 1
            agree += (search_backward_bound(traj, int(c), cfg), search_forward_bound(traj, int(c), cfg)) == (
                oracle_backward(traj, int(c), cfg),
                oracle_forward(traj, int(c), cfg),
            )
    report(4, agree == checked, f"{agree}/{checked} centres agree on 100 trajectories of 500 poses")


# ---------------------------------------------------------------- 5


def test_c05_joint_beats_separate(report, experiment, joint, separate):
    j = pipeline.signature_recall(joint[0].model, experiment)
    s = pipeline.signature_recall(separate[0].model, experiment)
    r = lambda m, k: m[k].recall_at_1
    ok_joint = r(j, "R2L") >= 80 and r(j, "L2L") >= 90 and r(j, "R2R") >= 85
    ok_sep = r(s, "R2L") <= 20 and r(s, "L2L") >= 85 and r(s, "R2R") >= 85
    ok_time = joint[1] <= TRAIN_BUDGET_S and separate[1] <= TRAIN_BUDGET_S
    report(
        5,
        ok_joint and ok_sep and ok_time,
        f"joint [{fmt(j)}] in {joint[1]:.0f} s; separate [{fmt(s)}] in {separate[1]:.0f} s",
    )


# ---------------------------------------------------------------- 6


def test_c06_scancontext_baseline(report, experiment):
    sc = pipeline.scancontext_recall(experiment, ("L2L", "R2L"), candidate_frac=0.01)
    ok = sc["L2L"].recall_at_1 >= 80 and sc["R2L"].recall_at_1 <= 20
    report(6, ok, f"ScanContext [{fmt(sc)}] (L2L >= 80, R2L <= 20)")


# ---------------------------------------------------------------- 7


def test_c07_loss_decreases(report, joint):
    losses = np.array([h.loss for h in joint[0].history])
    window = np.convolve(losses, np.ones(100) / 100, mode="valid")
    drop = 1 - window[-1] / window[0]
    report(7, drop >= 0.5, f"moving average {window[0]:.3f} -> {window[-1]:.3f}, drop {100 * drop:.1f}% (>= 50%)")


# ---------------------------------------------------------------- 8


def test_c08_metric_oracles(report):
    rng = np.random.default_rng(8)
    failures = 0
    for _ in range(20):
        q = rng.uniform(0, 60, (50, 2))
        db = rng.uniform(0, 60, (50, 2))
        sig_q, sig_db = rng.random((50, 2, 3)), rng.random((50, 2, 3))
        sig_q /= np.linalg.norm(sig_q, axis=(1, 2), keepdims=True)
        sig_db /= np.linalg.norm(sig_db, axis=(1, 2), keepdims=True)
        flat_q, flat_db = sig_q.reshape(50, -1), sig_db.reshape(50, -1)
        # brute-force retrieval and metrics
        idx_o = [min(range(50), key=lambda j: (math.dist(a, flat_db[j]), j)) for a in flat_q]
        dist_o = [math.dist(a, flat_db[j]) for a, j in zip(flat_q, idx_o)]
        correct_o = [math.dist(q[i], db[j]) <= 3.0 for i, j in enumerate(idx_o)]
        has_o = [any(math.dist(q[i], p) <= 3.0 for p in db) for i in range(50)]
        recall_o = 100.0 * sum(correct_o) / 50
        pr_o = oracle_pr(dist_o, correct_o, has_o, 200)
        f1_o = max((2 * p * r / (p + r) if p + r else 0.0) for p, r in pr_o)

        idx, dist = retrieval.top1(retrieval.SignatureDatabase.from_signatures(sig_db), sig_q)
        m = evaluation.evaluate(idx, dist, q, db)
        pr = [(p.precision, p.recall) for p in m.pr_points]
        recalls = [p.recall for p in m.pr_points]
        ok = (
            list(idx) == idx_o
            and np.allclose(dist, dist_o, rtol=0, atol=1e-12)
            and m.recall_at_1 == recall_o
            and np.allclose(pr, pr_o, rtol=0, atol=1e-15)
            and abs(m.max_f1 - f1_o) <= 1e-15
            and all(a <= b for a, b in zip(recalls, recalls[1:]))
        )
        failures += not ok
    report(8, failures == 0, f"{20 - failures}/20 random 50x50 instances match the brute-force oracles")


# ---------------------------------------------------------------- 9


def test_c09_end_to_end_determinism(report, tmp_path):
    a = digest(pipeline_run(tmp_path / "a"))
    b = digest(pipeline_run(tmp_path / "b"))
    keys = [k for k in a if k.endswith(".hprn") or k.startswith("eval/")]
    same = a == b
    report(9, same and len(keys) >= 3, f"{len(a)} artifacts compared ({', '.join(sorted(keys))}); identical: {same}")


# ---------------------------------------------------------------- 10


def test_c10_format_round_trips_and_fuzz(report):
    from heteroplace.formats import FormatError

    bad = 0
    for kind, (encode, decode) in ENCODE.items():
        rng = np.random.default_rng(100 + list(ENCODE).index(kind))
        for _ in range(N):
            data = encode(rng)
            again = decode(data)
            if _encode_back(kind, again) != data:
                bad += 1
            corrupt = bytearray(data)
            pos = int(rng.choice(header_fields(kind, corrupt)))
            corrupt[pos] ^= int(rng.integers(1, 256))
            try:
                decode(bytes(corrupt))
                bad += 1
            except FormatError:
                pass
    report(10, bad == 0, f"{len(ENCODE)} formats x {N} payloads and {N} corruptions; {bad} failures")


def _encode_back(kind, record):
    from heteroplace import formats

    if kind == "cloud":
        return formats.encode_cloud(record)
    if kind == "radar":
        return formats.encode_radar(record)
    if kind == "desc":
        return formats.encode_descriptor(record)
    if kind == "sig":
        return formats.encode_signature(record)
    moments = SimpleNamespace(m=record.moment1, v=record.moment2)
    return formats.encode_checkpoint(record.params, record.step, record.seed, moments)
