"""``dsc`` command-line front end.

Every subcommand reads an optional JSON run config (``--config``); the
common flags override individual keys. All randomness is split from the
top-level ``seed``, and the seed is recorded in every JSON output.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import __version__
from .evaluation import describe_clouds, evaluate_sequence, robustness_eval
from .features import extract_frame_features, features_to_json
from .network import NetworkConfig, describe, init_network, load_network, save_network
from .pointcloud import PointCloud, derive_seed, load_kitti_bin, load_poses_and_times, sequence_scans
from .retrieval import DescriptorDb
from .segmentation import GridConfig, segment_cloud, summarize
from .toy import ToyConfig, make_sequence, toy_train_config, write_sequence
from .training import TrainConfig, build_pair_index, train, write_loss_csv

log = logging.getLogger("dsc")


class CliError(Exception):
    """A user-facing failure; the message is printed as the diagnostic."""


@dataclass
class RunConfig:
    seed: int = 0
    grid_sectors: int = 60
    grid_rings: int = 20
    max_range: float = 60.0
    min_points: int = 5
    knn: int = 10
    eu_layers: list = field(default_factory=lambda: [[64, 64], [128]])
    eig_layers: list = field(default_factory=lambda: [[64, 64], [128]])
    n_clusters: int = 32
    out_dim: int = 256
    alpha: float = 0.5
    beta: float = 0.2
    m: int = 18
    epochs: int = 10
    lr: float = 1e-3
    pos_th: float = 3.0
    neg_th: float = 20.0
    time_excl: float = 30.0
    np_multiplier: int = 100
    top_k: int = 1
    sequence_id: int = 0
    toy: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @property
    def grid(self) -> GridConfig:
        return GridConfig(self.grid_sectors, self.grid_rings, self.max_range)

    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig(
            k=self.knn,
            eu_layers=tuple(tuple(l) for l in self.eu_layers),
            eig_layers=tuple(tuple(l) for l in self.eig_layers),
            n_clusters=self.n_clusters,
            out_dim=self.out_dim,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.network, self.alpha, self.beta, self.m, self.epochs, self.lr, self.subseed("train"))

    def subseed(self, name: str) -> int:
        return derive_seed(self.seed, name)

    def to_dict(self) -> dict:
        return asdict(self)


def toy_run_config(seed: int = 0) -> RunConfig:
    """Run config matching the reduced network and schedule used on the toy benchmark."""
    tc = toy_train_config()
    net = tc.network
    return RunConfig(
        seed=seed,
        knn=net.k,
        eu_layers=[list(l) for l in net.eu_layers],
        eig_layers=[list(l) for l in net.eig_layers],
        n_clusters=net.n_clusters,
        m=tc.m,
        epochs=tc.epochs,
        lr=tc.lr,
    )


# ----------------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------------


@contextmanager
def _outputs(*paths: Path | None) -> Iterator[None]:
    """Remove every listed output if the body fails part-way."""
    targets = [Path(p) for p in paths if p is not None]
    for p in targets:
        p.parent.mkdir(parents=True, exist_ok=True)
    try:
        yield
    except BaseException:
        for p in targets:
            if p.is_file():
                p.unlink()
        raise


def _write_json(obj: dict, path: Path | None) -> None:
    text = json.dumps(obj, indent=1) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def _require_out(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise CliError(f"{args.command}: --out is required")
    return Path(args.out)


def _load_sequence(seq_dir: str) -> tuple[list[PointCloud], list]:
    root = Path(seq_dir)
    if not root.is_dir():
        raise CliError(f"sequence directory not found: {root}")
    scans = sequence_scans(root)
    if not scans:
        raise CliError(f"no .bin scans under {root}")
    pose_path, time_path = root / "poses.txt", root / "times.txt"
    poses = load_poses_and_times(pose_path, time_path) if pose_path.is_file() else []
    if poses and len(poses) != len(scans):
        raise CliError(f"{root}: {len(scans)} scans but {len(poses)} poses")
    clouds = []
    for n, path in enumerate(scans):
        try:
            fid = int(path.stem)
        except ValueError:
            raise CliError(f"scan name is not a frame number: {path.name}") from None
        stamp = poses[n].timestamp if poses else 0.0
        clouds.append(load_kitti_bin(path, frame_id=fid, timestamp=stamp))
    return clouds, poses


def _pairs(run: RunConfig, clouds: Sequence[PointCloud], poses: list):
    if not poses:
        raise CliError("poses.txt and times.txt are required for pair labels")
    return build_pair_index(poses, run.pos_th, run.neg_th, run.time_excl, frame_ids=[c.frame_id for c in clouds])


def _write_report(rep, args: argparse.Namespace) -> None:
    out = _require_out(args)
    curve = Path(args.curve_out) if args.curve_out else out.with_suffix(".csv")
    with _outputs(out, curve):
        rep.write_json(out)
        rep.write_curve_csv(curve)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_segment(run: RunConfig, args: argparse.Namespace) -> None:
    cloud = load_kitti_bin(args.cloud)
    summary = summarize(segment_cloud(cloud, run.grid))
    summary["grid"] = {"n_sectors": run.grid_sectors, "n_rings": run.grid_rings, "max_range": run.max_range}
    out = Path(args.out) if args.out else None
    with _outputs(out):
        _write_json(summary, out)


def cmd_features(run: RunConfig, args: argparse.Namespace) -> None:
    frame = extract_frame_features(load_kitti_bin(args.cloud), run.grid, run.min_points)
    out = Path(args.out) if args.out else None
    with _outputs(out):
        _write_json(features_to_json(frame), out)


def cmd_toy_data(run: RunConfig, args: argparse.Namespace) -> None:
    out = _require_out(args)
    cfg = ToyConfig(**run.toy) if run.toy else ToyConfig()
    first = args.first_visit
    visits = cfg.n_visits if args.visits is None else args.visits
    seq = make_sequence(cfg, range(first, first + visits))
    if out.exists() and any(out.iterdir()):
        raise CliError(f"output directory is not empty: {out}")
    try:
        write_sequence(seq, out)
        _write_json(toy_run_config(run.seed).to_dict(), out / "config.json")
        np.savetxt(out / "places.txt", seq.places, fmt="%d")
    except BaseException:
        for p in sorted(out.rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
        raise


def cmd_train(run: RunConfig, args: argparse.Namespace) -> None:
    out = _require_out(args)
    loss_out = Path(args.loss_out) if args.loss_out else out.with_suffix(".loss.csv")
    clouds, poses = _load_sequence(args.sequence)
    pairs = _pairs(run, clouds, poses)
    frames = {c.frame_id: extract_frame_features(c, run.grid, run.min_points) for c in clouds}
    cfg = run.train_config()
    with _outputs(out, loss_out):
        res = train(frames, pairs, cfg)
        save_network(res.net, out)
        write_loss_csv(res.epoch_losses, loss_out)


def _weights(args: argparse.Namespace):
    if not args.weights:
        raise CliError(f"{args.command}: --weights is required")
    return load_network(args.weights)


def cmd_describe(run: RunConfig, args: argparse.Namespace) -> None:
    out = _require_out(args)
    net = _weights(args)
    clouds, _ = _load_sequence(args.sequence)
    db = DescriptorDb(dim=net.config.out_dim)
    for fid, d in describe_clouds(clouds, net, run.grid, run.min_points).items():
        db.insert(run.sequence_id, fid, d)
    with _outputs(out):
        db.save(out)


def cmd_query(run: RunConfig, args: argparse.Namespace) -> None:
    net = _weights(args)
    db = DescriptorDb.load(args.db)
    if len(db) == 0:
        raise CliError(f"{args.db}: database is empty")
    desc = describe(extract_frame_features(load_kitti_bin(args.cloud), run.grid, run.min_points), net)
    k = min(run.top_k, len(db))
    hits = db.query(desc, top_k=k)
    result = {
        "query": str(args.cloud),
        "seed": run.seed,
        "top_k": k,
        "results": [{"sequence_id": s, "frame_id": f, "distance": d} for s, f, d in hits],
    }
    out = Path(args.out) if args.out else None
    with _outputs(out):
        _write_json(result, out)


def cmd_eval(run: RunConfig, args: argparse.Namespace) -> None:
    db = DescriptorDb.load(args.db, build=False)
    clouds, poses = _load_sequence(args.sequence)
    pairs = _pairs(run, clouds, poses)
    mat = db.descriptors
    descs = {f: mat[n] for n, (s, f) in enumerate(db.keys) if s == run.sequence_id}
    meta = {"seed": run.seed, "sequence_id": run.sequence_id}
    rep = evaluate_sequence(descs, pairs, run.np_multiplier, run.subseed("pairs"), meta)
    _write_report(rep, args)


def cmd_perturb_eval(run: RunConfig, args: argparse.Namespace) -> None:
    net = _weights(args)
    clouds, poses = _load_sequence(args.sequence)
    pairs = _pairs(run, clouds, poses)
    extra = {}
    if args.max_angle is not None:
        extra["max_angle"] = args.max_angle
    if args.extent is not None:
        extra["extent"] = args.extent
    rep = robustness_eval(
        clouds,
        pairs,
        net,
        args.perturbation,
        seed=run.subseed("perturb"),
        grid=run.grid,
        min_points=run.min_points,
        np_multiplier=run.np_multiplier,
        pair_seed=run.subseed("pairs"),
        **extra,
    )
    rep.metadata["seed"] = run.seed
    _write_report(rep, args)


def cmd_selftest(run: RunConfig, args: argparse.Namespace) -> int:
    from .selftest import run_selftest

    results = run_selftest(run.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    out = Path(args.out) if args.out else None
    if out is not None:
        with _outputs(out):
            _write_json({"seed": run.seed, "checks": [r._asdict() for r in results]}, out)
    return 0 if all(r.passed for r in results) else 1


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid-sectors", type=int)
    p.add_argument("--grid-rings", type=int)
    p.add_argument("--max-range", type=float)
    p.add_argument("--knn", type=int)
    p.add_argument("--top-k", type=int)
    p.add_argument("--out", help="output path")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsc", description="Segment-graph LiDAR place recognition.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common()

    p = sub.add_parser("segment", parents=[common], help="cloud -> segment summary JSON")
    p.add_argument("cloud")
    p = sub.add_parser("features", parents=[common], help="cloud -> per-segment features JSON")
    p.add_argument("cloud")
    p = sub.add_parser("toy-data", parents=[common], help="write the synthetic benchmark as a KITTI sequence")
    p.add_argument("--first-visit", type=int, default=0)
    p.add_argument("--visits", type=int)
    p = sub.add_parser("train", parents=[common], help="sequence -> network file + loss CSV")
    p.add_argument("sequence")
    p.add_argument("--loss-out")
    p = sub.add_parser("describe", parents=[common], help="sequence -> descriptor database")
    p.add_argument("sequence")
    p.add_argument("--weights")
    p = sub.add_parser("query", parents=[common], help="database + cloud -> top-k JSON")
    p.add_argument("db")
    p.add_argument("cloud")
    p.add_argument("--weights")
    p = sub.add_parser("eval", parents=[common], help="database + poses -> report JSON + PR CSV")
    p.add_argument("db")
    p.add_argument("sequence")
    p.add_argument("--curve-out")
    p = sub.add_parser("perturb-eval", parents=[common], help="rotation or occlusion robustness report")
    p.add_argument("sequence")
    p.add_argument("--weights")
    p.add_argument("--perturbation", choices=["rotation", "occlusion"], required=True)
    p.add_argument("--max-angle", type=float)
    p.add_argument("--extent", type=float)
    p.add_argument("--curve-out")
    sub.add_parser("selftest", parents=[common], help="run the built-in oracle checks")
    return parser


_FLAG_KEYS = {
    "seed": "seed",
    "grid_sectors": "grid_sectors",
    "grid_rings": "grid_rings",
    "max_range": "max_range",
    "knn": "knn",
    "top_k": "top_k",
}

COMMANDS = {
    "segment": cmd_segment,
    "features": cmd_features,
    "toy-data": cmd_toy_data,
    "train": cmd_train,
    "describe": cmd_describe,
    "query": cmd_query,
    "eval": cmd_eval,
    "perturb-eval": cmd_perturb_eval,
    "selftest": cmd_selftest,
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from None
    run = RunConfig.from_dict(base)
    overrides = {key: getattr(args, flag) for flag, key in _FLAG_KEYS.items() if getattr(args, flag) is not None}
    return replace(run, **overrides)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = resolve_config(args)
        status = COMMANDS[args.command](run, args)
    except KeyboardInterrupt:
        print("dsc: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # every module error becomes a diagnostic
        print(f"dsc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
