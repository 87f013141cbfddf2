"""End-to-end acceptance checks.

Each test prints one ``[PASS]`` / ``[FAIL]`` line with the measured numbers,
then asserts at the stated tolerance.
"""

import json
import time

import numpy as np
import pytest

from dsc.cli import main
from dsc.evaluation import (
    LabeledPairScores,
    describe_clouds,
    evaluate_sequence,
    extended_precision,
    f1_max,
    pr_curve,
    robustness_eval,
)
from dsc.features import FrameFeatures, extract_frame_features, segment_feature
from dsc.network import NetworkConfig, describe, init_network
from dsc.pointcloud import PointCloud
from dsc.retrieval import DescriptorDb
from dsc.segmentation import GridConfig, segment_cloud
from dsc.toy import ToyConfig, make_sequence, toy_train_config
from dsc.training import LossConfig, QuadrupletBatch, build_pair_index, gradients, lazy_quadruplet_loss, train


@pytest.fixture
def verdict(capsys):
    def report(n, title, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
        assert ok, detail

    return report


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


# ----------------------------------------------------------------------------
# 1. segmentation partition
# ----------------------------------------------------------------------------


def test_segmentation_partition(verdict):
    rng = np.random.default_rng(101)
    cfg = GridConfig(60, 20, 60.0)
    clouds = []
    for _ in range(1000):
        n = int(rng.integers(0, 2000))
        pts = rng.uniform(-80, 80, size=(n, 3))
        pts[:, 2] *= 0.05
        clouds.append(PointCloud(pts))
    start = time.perf_counter()
    segsets = [segment_cloud(c, cfg) for c in clouds]
    elapsed = time.perf_counter() - start
    bad, max_segments = 0, 0
    for cloud, segs in zip(clouds, segsets):
        pts = cloud.points
        in_range = np.hypot(pts[:, 0], pts[:, 1]) <= cfg.max_range
        hits = np.zeros(len(pts), dtype=np.int64)
        for idx in segs.segments.values():
            hits[idx] += 1
        max_segments = max(max_segments, len(segs))
        ok = np.all(hits[in_range] == 1) and np.all(hits[~in_range] == 0) and len(segs) <= 1200
        ok = ok and segs.n_discarded == int((~in_range).sum())
        bad += not ok
    verdict(
        1,
        "segmentation partition",
        bad == 0 and elapsed < 1.0,
        f"{bad} bad clouds of 1000, max {max_segments} segments, {elapsed:.2f} s",
    )


# ----------------------------------------------------------------------------
# 2. eigenvalue rotation invariance
# ----------------------------------------------------------------------------


def test_eigenvalue_rotation_invariance(verdict):
    rng = np.random.default_rng(102)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(500):
        n = int(rng.integers(5, 200))
        center = rng.uniform(-50, 50, size=3)
        pts = rng.normal(size=(n, 3)) * rng.uniform(0.05, 2.0, size=3) @ _random_rotation(rng).T + center
        rot = _random_rotation(rng)
        a = segment_feature(pts).eigvals
        b = segment_feature(pts @ rot.T).eigvals
        worst = max(worst, float(np.max(np.abs(a - b) / np.abs(a))))
    elapsed = time.perf_counter() - start
    verdict(2, "eigenvalue rotation invariance", worst <= 1e-9 and elapsed < 1.0, f"max rel diff {worst:.2e}, {elapsed:.2f} s")


# ----------------------------------------------------------------------------
# 3. gradient correctness
# ----------------------------------------------------------------------------


def _random_frames(rng, n, t_range):
    frames = {}
    for fid in range(n):
        t = int(rng.integers(*t_range))
        eig = np.sort(rng.uniform(0, 2, size=(t, 3)), axis=1)[:, ::-1]
        idx = np.column_stack([np.arange(t) + 1, np.ones(t, int)])
        frames[fid] = FrameFeatures(fid, rng.uniform(-30, 30, size=(t, 3)), eig, idx, np.full(t, 6))
    return frames


def test_gradient_correctness(verdict):
    rng = np.random.default_rng(103)
    eps, worst, checked, skipped = 1e-5, 0.0, 0, 0
    n_configs = 20
    start = time.perf_counter()
    for c in range(n_configs):
        cfg = NetworkConfig(
            k=int(rng.integers(2, 5)),
            eu_layers=tuple(tuple(int(w) for w in rng.integers(2, 6, size=rng.integers(1, 3))) for _ in range(rng.integers(1, 3))),
            eig_layers=tuple(tuple(int(w) for w in rng.integers(2, 6, size=rng.integers(1, 3))) for _ in range(rng.integers(1, 3))),
            n_clusters=int(rng.integers(1, 4)),
            out_dim=int(rng.integers(3, 7)),
        )
        net = init_network(cfg, seed=c)
        m = int(rng.integers(1, 4))
        frames = _random_frames(rng, m + 3, (cfg.k + 2, 12))
        batch = QuadrupletBatch(0, 1, tuple(range(2, 2 + m)), m + 2)
        loss_cfg = LossConfig(alpha=float(rng.uniform(1.0, 2.0)), beta=float(rng.uniform(0.5, 1.5)), m=m)
        bg = gradients(batch, net, loss_cfg, frames, signature=True)
        for name, arr in net.params.items():
            flat, g = arr.reshape(-1), bg.grads[name].reshape(-1)
            for n in range(flat.size):
                old = flat[n]
                flat[n] = old + eps
                up = gradients(batch, net, loss_cfg, frames, need_grads=False, signature=True)
                flat[n] = old - eps
                down = gradients(batch, net, loss_cfg, frames, need_grads=False, signature=True)
                flat[n] = old
                if up.signature != bg.signature or down.signature != bg.signature:
                    skipped += 1
                    continue
                num = (up.loss - down.loss) / (2 * eps)
                worst = max(worst, abs(num - g[n]) / max(abs(num), abs(g[n]), 1e-6))
                checked += 1
    elapsed = time.perf_counter() - start
    verdict(
        3,
        "gradient correctness",
        worst <= 1e-4 and checked > 0 and elapsed < 30,
        f"{n_configs} configs, {checked} params checked, {skipped} near kinks, max rel err {worst:.2e}, {elapsed:.1f} s",
    )


# ----------------------------------------------------------------------------
# 4. loss hand value
# ----------------------------------------------------------------------------


def test_loss_hand_value(verdict):
    # realise |q-pos| = 0.2, |q-neg| = {0.9, 1.1}, |neg*-neg| = {0.3, 0.6}
    q, pos = np.zeros(3), np.array([0.2, 0.0, 0.0])
    phi = np.arccos((0.9**2 + 1.1**2 - 0.5**2) / (2 * 0.9 * 1.1))  # negatives 0.5 apart
    negs = np.array([[0.9, 0, 0], [1.1 * np.cos(phi), 1.1 * np.sin(phi), 0]])
    d01 = np.linalg.norm(negs[1] - negs[0])
    along = (0.3**2 - 0.6**2 + d01**2) / (2 * d01)
    axis = (negs[1] - negs[0]) / d01
    perp = np.cross(axis, [0, 0, 1.0])
    star = negs[0] + along * axis + np.sqrt(0.3**2 - along**2) * perp
    dists = (np.linalg.norm(q - negs, axis=1), np.linalg.norm(star - negs, axis=1))
    loss = lazy_quadruplet_loss(q, pos, negs, star, LossConfig(alpha=0.5, beta=0.2))
    ok = abs(loss - 0.1) <= 1e-12
    verdict(4, "loss hand value", ok, f"loss {loss!r}, realised distances {np.round(dists, 12).tolist()}")


# ----------------------------------------------------------------------------
# 5. metric oracles
# ----------------------------------------------------------------------------


def _brute(scores, labels):
    pts = []
    for tau in set(scores.tolist()):
        pred = scores >= tau
        tp = int(np.sum(pred & labels))
        pts.append((tp / int(pred.sum()), tp / int(labels.sum())))
    f1 = max((2 * p * r / (p + r) if p + r > 0 else 0.0) for p, r in pts)
    r0 = min(r for _, r in pts if r > 0)
    p_r0 = max(p for p, r in pts if r == r0)
    r_p100 = max((r for p, r in pts if p == 1.0), default=0.0) if p_r0 == 1.0 else 0.0
    return f1, (p_r0 + r_p100) / 2


def test_metric_oracles(verdict):
    rng = np.random.default_rng(105)
    mismatches, done = 0, 0
    start = time.perf_counter()
    while done < 1000:
        n = int(rng.integers(2, 13))
        scores = rng.integers(0, 6, size=n).astype(float) if done % 2 else rng.random(n)
        labels = rng.random(n) < rng.uniform(0.2, 0.8)
        if labels.all() or not labels.any():
            continue
        curve = pr_curve(LabeledPairScores.from_scores(scores, labels))
        mismatches += (f1_max(curve), extended_precision(curve)) != _brute(scores, labels)
        done += 1
    # precision at minimum recall below 1 forces the full-precision recall to 0
    inverted = pr_curve(LabeledPairScores.from_scores([0.1, 0.9], [True, False]))
    mixed = pr_curve(LabeledPairScores.from_scores([5, 5, 4, 3], [True, False, True, True]))
    full = pr_curve(LabeledPairScores.from_scores([9, 8, 7, 6, 5, 4], [1, 1, 1, 0, 1, 1]))
    constructed = (
        extended_precision(inverted) == 0.25
        and extended_precision(mixed) == 0.25
        and extended_precision(full) == pytest.approx(0.8, abs=1e-15)
    )
    elapsed = time.perf_counter() - start
    verdict(
        5,
        "metric oracles",
        mismatches == 0 and constructed and elapsed < 10,
        f"{mismatches} mismatches of 1000, constructed EP cases {'ok' if constructed else 'wrong'}, {elapsed:.2f} s",
    )


# ----------------------------------------------------------------------------
# 6. retrieval exactness and speed
# ----------------------------------------------------------------------------


def test_retrieval_exact_and_fast(verdict):
    rng = np.random.default_rng(106)
    data = rng.normal(size=(18236, 256))
    data /= np.linalg.norm(data, axis=1, keepdims=True)
    db = DescriptorDb()
    for n, v in enumerate(data):
        db.insert(0, n, v)
    t0 = time.perf_counter()
    db.build_index()
    build = time.perf_counter() - t0
    queries = rng.normal(size=(1000, 256))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    t0 = time.perf_counter()
    hits = [db.query(q, top_k=1)[0] for q in queries]
    latency = (time.perf_counter() - t0) / len(queries)
    stored = db.descriptors
    mismatches = 0
    for q, (_, frame, dist) in zip(queries, hits):
        q32 = q.astype(np.float32).astype(np.float64)
        d = np.sqrt(((stored - q32) ** 2).sum(axis=1))
        best = int(np.lexsort((np.arange(len(d)), d))[0])
        mismatches += (frame, dist) != (best, float(d[best]))
    verdict(
        6,
        "retrieval exactness and speed",
        mismatches == 0 and latency < 5e-3 and build < 5.0,
        f"{mismatches} mismatches of 1000, {latency * 1e3:.2f} ms/query, build {build:.2f} s",
    )


# ----------------------------------------------------------------------------
# 7. toy-scale learning
# ----------------------------------------------------------------------------


def test_toy_learning(verdict):
    start = time.perf_counter()
    toy = ToyConfig()
    seq = make_sequence(toy)
    frames = {c.frame_id: extract_frame_features(c) for c in seq.clouds}
    cfg = toy_train_config()
    res = train(frames, build_pair_index(seq.poses), cfg)
    first, last = res.epoch_losses[0], res.epoch_losses[-1]

    db = DescriptorDb()
    for fid, f in frames.items():
        db.insert(0, fid, describe(f, res.net))
    db.build_index()
    held = make_sequence(toy, range(toy.n_visits, toy.n_visits + 5))
    held_desc = describe_clouds(held.clouds, res.net)
    correct = 0
    for c, place in zip(held.clouds, held.places):
        _, frame, _ = db.query(held_desc[c.frame_id])[0]
        correct += int(seq.places[frame] == place)
    top1 = correct / len(held.clouds)

    pairs = build_pair_index(held.poses)
    base = evaluate_sequence(held_desc, pairs)
    rot = robustness_eval(held.clouds, pairs, res.net, "rotation", seed=1)
    elapsed = time.perf_counter() - start
    ok = last < 0.1 * first and cfg.epochs <= 200 and top1 >= 0.9 and abs(rot.f1_max - base.f1_max) <= 0.15
    verdict(
        7,
        "toy-scale learning",
        ok and elapsed < 600,
        f"loss {first:.4f} -> {last:.4f} ({last / first:.1%}) in {cfg.epochs} epochs, "
        f"held-out top-1 {top1:.3f}, F1max {base.f1_max:.3f} vs rotated {rot.f1_max:.3f}, {elapsed:.0f} s",
    )


# ----------------------------------------------------------------------------
# 8. determinism
# ----------------------------------------------------------------------------


def _pipeline(root, cfg_path):
    # relative paths, so both runs see byte-identical inputs
    common = ["--config", str(cfg_path)]
    scan = "seq/velodyne/000003.bin"
    steps = [
        ["toy-data", "--out", "seq"],
        ["segment", scan, "--out", "segment.json"],
        ["features", scan, "--out", "features.json"],
        ["train", "seq", "--out", "net.bin"],
        ["describe", "seq", "--weights", "net.bin", "--out", "db.bin"],
        ["query", "db.bin", scan, "--weights", "net.bin", "--top-k", "5", "--out", "query.json"],
        ["eval", "db.bin", "seq", "--out", "eval.json"],
        ["perturb-eval", "seq", "--weights", "net.bin", "--perturbation", "rotation", "--out", "rot.json"],
        ["perturb-eval", "seq", "--weights", "net.bin", "--perturbation", "occlusion", "--out", "occ.json"],
        ["selftest", "--out", "selftest.json"],
    ]
    for step in steps:
        assert main(step[:1] + common + step[1:]) == 0, step
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism(verdict, tmp_path, monkeypatch):
    cfg = tmp_path / "run.json"
    cfg.write_text(
        json.dumps(
            {
                "seed": 11,
                "knn": 4,
                "eu_layers": [[8, 8], [8]],
                "eig_layers": [[8]],
                "n_clusters": 4,
                "m": 4,
                "epochs": 3,
                "lr": 3e-3,
                "toy": {"n_places": 5, "n_visits": 3, "n_blobs": 16},
            }
        )
    )
    runs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        monkeypatch.chdir(tmp_path / name)
        runs.append(_pipeline(tmp_path / name, cfg))
    a, b = runs
    differing = sorted(k for k in a if a[k] != b.get(k)) + sorted(set(b) - set(a))
    verdict(8, "determinism", not differing and len(a) > 10, f"{len(a)} output files compared, differing: {differing or 'none'}")


# ----------------------------------------------------------------------------
# 9. descriptor contract
# ----------------------------------------------------------------------------


def test_descriptor_contract(verdict):
    rng = np.random.default_rng(109)
    net = init_network(seed=109)
    bad_dim = bad_norm = 0
    worst_perm = 0.0
    start = time.perf_counter()
    for i in range(10000):
        t = int(rng.integers(net.config.k + 1, 120))
        sizes = rng.uniform(0.01, 2.0, size=(t, 3))
        eig = np.sort(sizes**2, axis=1)[:, ::-1]
        rho, th = rng.uniform(0, 60, t), rng.uniform(0, 2 * np.pi, t)
        cent = np.column_stack([rho * np.cos(th), rho * np.sin(th), rng.normal(size=t)])
        frame = FrameFeatures(i, cent, eig, np.column_stack([np.arange(t) + 1, np.ones(t, int)]), np.full(t, 5))
        d = describe(frame, net)
        bad_dim += d.shape != (256,)
        bad_norm += abs(np.linalg.norm(d) - 1.0) > 1e-6
        dp = describe(frame.permuted(rng.permutation(t)), net)
        worst_perm = max(worst_perm, float(np.max(np.abs(dp - d))))
    elapsed = time.perf_counter() - start
    verdict(
        9,
        "descriptor contract",
        bad_dim == 0 and bad_norm == 0 and worst_perm <= 1e-6,
        f"10000 frames, {bad_dim} wrong dim, {bad_norm} off-norm, max permutation diff {worst_perm:.1e}, {elapsed:.0f} s",
    )
