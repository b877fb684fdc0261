"""Command-line interface.

Exit status: 0 on success, 1 when the pipeline fails (for example a pair
cannot be registered), 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .autolabel import auto_label_round, extract_segments
from .config import ConfigError, PipelineConfig
from .evaluation import run_benchmark
from .fileio import (FormatError, atomic_write, load_checkpoint, read_kitti_bin, read_ply,
                     save_checkpoint, write_ply, write_segments_jsonl, write_segments_ply)
from .geometry import PointCloud, voxel_downsample
from .lines import LineSegment, training_correspondences
from .net import MicroNet
from .pipeline import LinePipeline
from .registration import RegistrationError
from .synth import (LineSceneConfig, SceneRecipe, generate_dataset, random_pose,
                    random_primitive, registration_pair)
from .train import PairSample, Sample, TrainConfig, accuracy, train_joint, train_segmentation

log = logging.getLogger("lidarlines")


class UsageError(Exception):
    pass


class PipelineFailure(Exception):
    pass


# -- helpers ------------------------------------------------------------------

def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _read_scan(path: str, cfg: PipelineConfig) -> PointCloud:
    """PLY scans are used as stored; raw KITTI scans are voxel-downsampled."""
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    if p.suffix == ".bin":
        return voxel_downsample(read_kitti_bin(p), cfg.lines.voxel_size)
    if p.suffix == ".ply":
        return read_ply(p).cloud
    raise UsageError(f"unsupported scan format {p.suffix!r} (use .bin or .ply)")


def _scan_files(directory: str) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"not a directory: {directory}")
    files = sorted(d.glob("*.ply"))
    if not files:
        raise UsageError(f"no .ply scans in {directory}")
    return files


def _recipe_sampler(cfg: PipelineConfig):
    s = cfg.synth

    def sample(rng: np.random.Generator, seed: int) -> SceneRecipe:
        return SceneRecipe(random_primitive(rng), s.n_primitive_points, s.noise_fraction,
                           s.n_background_chunks, s.points_per_chunk, s.total_points, seed,
                           pose=random_pose(rng))

    return sample


def _synthetic_samples(cfg: PipelineConfig, data: Optional[str]) -> List[Sample]:
    if data:
        clouds = [read_ply(f).cloud for f in _scan_files(data)]
        if any(c.labels is None for c in clouds):
            raise UsageError("training scans need a line_label property")
        return [Sample(c.points, c.labels) for c in clouds]
    scenes = generate_dataset(cfg.synth.n_clouds, _recipe_sampler(cfg), seed=cfg.seed)
    return [Sample(s.cloud.points, s.cloud.labels) for s in scenes]


def _train_cfg(cfg: PipelineConfig, epochs: Optional[int]) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=epochs if epochs is not None else t.epochs, lr=t.lr,
                       batch_size=t.batch_size, seed=cfg.seed)


def _scene_config(cfg: PipelineConfig) -> LineSceneConfig:
    return LineSceneConfig(n_lines=cfg.eval.n_lines, extent=cfg.eval.extent)


def _pair_seeds(seed: int, n: int) -> List[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def _write_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------

def cmd_gen(args, cfg: PipelineConfig, out: Path) -> None:
    n = args.n if args.n is not None else cfg.synth.n_clouds
    scenes = generate_dataset(n, _recipe_sampler(cfg), seed=cfg.seed)
    manifest = []
    for i, sc in enumerate(scenes):
        name = f"scene_{i:04d}"
        write_ply(out / f"{name}.ply", sc.cloud, binary=True)
        members = np.flatnonzero(sc.cloud.labels)
        e0, e1 = sc.lines[0]
        seg = LineSegment(e0, e1, e1 - e0, members)
        write_segments_jsonl(out / f"{name}.lines.jsonl", [seg])
        manifest.append({"name": name, "kind": sc.kind.value, "points": len(sc.cloud),
                         "positives": int(sc.cloud.labels.sum())})
    _write_json(out / "manifest.json", {"seed": cfg.seed, "scenes": manifest})
    print(f"wrote {n} scenes to {out}")


def cmd_pretrain(args, cfg: PipelineConfig, out: Path) -> None:
    samples = _synthetic_samples(cfg, args.data)
    n_test = max(1, len(samples) // 10)
    train, test = samples[:-n_test], samples[-n_test:]
    net = MicroNet(dataclasses.replace(cfg.net, scale_invariant_first_layer=True), seed=cfg.seed)
    history = train_segmentation(net, train, _train_cfg(cfg, args.epochs))
    acc = accuracy(net, test)
    save_checkpoint(out / "pretrain.ckpt", net, {"stage": "pretrain", "seed": cfg.seed})
    _write_json(out / "pretrain.json", {"loss": history, "heldout_accuracy": acc})
    print(f"held-out accuracy {acc:.4f}")


def cmd_label(args, cfg: PipelineConfig, out: Path) -> None:
    net = load_checkpoint(args.checkpoint)
    files = _scan_files(args.data)
    clouds = [read_ply(f).cloud for f in files]
    clouds = [PointCloud(c.points) for c in clouds]
    iterations = args.iterations if args.iterations is not None else cfg.adapt.iterations
    seeds = _pair_seeds(cfg.seed, iterations)
    results = []
    for it in range(iterations):
        results = auto_label_round(clouds, net, cfg.adapt, seed=seeds[it])
        samples = [Sample(r.cloud.points, r.cloud.labels) for r in results]
        if any(s.labels.any() for s in samples):
            train_segmentation(net, samples, _train_cfg(cfg, args.epochs))
        save_checkpoint(out / f"label_iter_{it + 1}.ckpt", net,
                        {"stage": "label", "iteration": it + 1, "seed": cfg.seed})
        n_lines = sum(len(r.segments) for r in results)
        print(f"iteration {it + 1}: {n_lines} lines")
    for f, r in zip(files, results):
        write_ply(out / f"{f.stem}.labeled.ply", r.cloud, binary=True)
        write_segments_jsonl(out / f"{f.stem}.lines.jsonl", r.segments)


def _budget(scene, n: int, rng: np.random.Generator):
    if len(scene.cloud) <= n:
        return scene
    keep = np.sort(rng.choice(len(scene.cloud), n, replace=False))
    return dataclasses.replace(scene, cloud=scene.cloud.subset(keep), line_ids=scene.line_ids[keep])


def _pair_sample(pair, cfg: PipelineConfig, rng: np.random.Generator) -> Optional[PairSample]:
    pair = dataclasses.replace(pair, source=_budget(pair.source, cfg.eval.train_points, rng),
                               target=_budget(pair.target, cfg.eval.train_points, rng))
    seg_a, _ = extract_segments(pair.source.cloud, pair.source.cloud.labels.astype(bool), cfg.adapt)
    seg_b, _ = extract_segments(pair.target.cloud, pair.target.cloud.labels.astype(bool), cfg.adapt)
    corr = training_correspondences(pair.source.cloud, seg_a, seg_b, pair.pose,
                                    cfg.lines.correspondence_distance)
    if not corr:
        return None
    return PairSample(Sample(pair.source.cloud.points, pair.source.cloud.labels),
                      Sample(pair.target.cloud.points, pair.target.cloud.labels),
                      [s.member_indices for s in seg_a], [s.member_indices for s in seg_b],
                      np.array([(i, j) for i, j, _ in corr], dtype=np.int64))


def cmd_train(args, cfg: PipelineConfig, out: Path) -> None:
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
    else:
        net = MicroNet(cfg.net, seed=cfg.seed)
    scene_cfg = _scene_config(cfg)
    pairs = []
    rng = np.random.default_rng(cfg.seed)
    for s in _pair_seeds(cfg.seed, args.pairs):
        p = _pair_sample(registration_pair(s, scene_cfg, cfg.eval.max_translation), cfg, rng)
        if p is not None:
            pairs.append(p)
    if not pairs:
        raise PipelineFailure("no training pairs with line correspondences")
    history = train_joint(net, pairs, _train_cfg(cfg, args.epochs), cfg.loss)
    save_checkpoint(out / "joint.ckpt", net, {"stage": "joint", "seed": cfg.seed})
    _write_json(out / "joint.json", {"loss": history, "pairs": len(pairs)})
    print(f"final loss {history[-1]:.4f}")


def _pipeline(args, cfg: PipelineConfig) -> LinePipeline:
    model = load_checkpoint(args.checkpoint) if getattr(args, "checkpoint", None) else None
    return LinePipeline(model, cfg.adapt, cfg.solver, cfg.lines.match_threshold,
                        max_points=cfg.eval.eval_points, seed=cfg.seed)


def cmd_extract(args, cfg: PipelineConfig, out: Path) -> None:
    cloud = _read_scan(args.scan, cfg)
    pipe = _pipeline(args, cfg)
    if pipe.model is None and cloud.labels is None:
        raise UsageError("scan has no line_label property; pass --checkpoint")
    ex = pipe.extract(cloud)
    stem = Path(args.scan).stem
    write_segments_jsonl(out / f"{stem}.lines.jsonl", ex.segments)
    write_segments_ply(out / f"{stem}.lines.ply", ex.segments)
    write_ply(out / f"{stem}.described.ply", ex.cloud, binary=True)
    print(f"{len(ex.segments)} lines")


def cmd_register(args, cfg: PipelineConfig, out: Path) -> None:
    source, target = _read_scan(args.source, cfg), _read_scan(args.target, cfg)
    pipe = _pipeline(args, cfg)
    if pipe.model is None and (source.labels is None or target.labels is None):
        raise UsageError("scans have no line_label property; pass --checkpoint")
    try:
        res = pipe.register(source, target)
    except RegistrationError as exc:
        raise PipelineFailure(str(exc)) from None
    report = {
        "pose": np.round(res.transform.as_matrix(), 12).tolist(),
        "converged": res.converged,
        "inliers": res.inliers.tolist(),
        "line_mean_distances": res.line_distances.tolist(),
        "outlier_rounds": res.rounds,
    }
    _write_json(out / "registration.json", report)
    np.set_printoptions(precision=6, suppress=True)
    print("pose (source -> target):")
    print(np.round(res.transform.as_matrix(), 6) + 0.0)
    print("per-line mean distance:", np.round(res.line_distances, 6).tolist())


def cmd_eval(args, cfg: PipelineConfig, out: Path) -> None:
    n = args.pairs if args.pairs is not None else cfg.eval.n_pairs
    scene_cfg = _scene_config(cfg)
    seeds = _pair_seeds(cfg.seed, n)
    triples, names = [], []
    for i, s in enumerate(seeds):
        p = registration_pair(s, scene_cfg, cfg.eval.max_translation)
        triples.append((p.source.cloud, p.target.cloud, p.pose))
        names.append(f"pair_{i:04d}")
    report = run_benchmark(triples, _pipeline(args, cfg), seed=cfg.seed, names=names)
    atomic_write(out / "report.json", report.to_json())
    atomic_write(out / "report.txt", report.table())
    print(report.table(), end="")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline config")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="out", help="output directory (default: out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="lidarlines", description=__doc__.splitlines()[0])
    parser.add_argument("--dump-config", action="store_true",
                        help="print the default config and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, help="number of scenes")

    p = sub.add_parser("pretrain", parents=[common], help="train on synthetic scenes")
    p.add_argument("--data", help="directory of labeled .ply scans (default: generate)")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("label", parents=[common], help="auto-label scans by geometric adaptation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory of .ply scans")
    p.add_argument("--iterations", type=int)
    p.add_argument("--epochs", type=int, help="retraining epochs per iteration")

    p = sub.add_parser("train", parents=[common], help="joint segmentation and description training")
    p.add_argument("--checkpoint", help="initial weights")
    p.add_argument("--pairs", type=int, default=20, help="synthetic training pairs")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("extract", parents=[common], help="extract described lines from a scan")
    p.add_argument("scan")
    p.add_argument("--checkpoint")

    p = sub.add_parser("register", parents=[common], help="register a source scan to a target")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--checkpoint")

    p = sub.add_parser("eval", parents=[common], help="benchmark on seeded synthetic pairs")
    p.add_argument("--pairs", type=int)
    p.add_argument("--checkpoint")
    return parser


COMMANDS = {
    "gen": cmd_gen, "pretrain": cmd_pretrain, "label": cmd_label, "train": cmd_train,
    "extract": cmd_extract, "register": cmd_register, "eval": cmd_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if args.dump_config:
        print(PipelineConfig().dumps(), end="")
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
    except (UsageError, ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PipelineFailure, RegistrationError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
