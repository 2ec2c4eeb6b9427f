"""``rank-odo`` command line: gen | train | eval | latent | scale-sweep.

Exit codes: 0 success, 1 usage/config/IO error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import ConfigError, RunConfig, load_config
from .errors import NonFiniteLossError, RankOdoError
from .net import infer_batch, model_from_json, model_to_json, train_dof, zero_model
from .pose import (
    DOF_NAMES,
    EulerPose6D,
    accumulate,
    euler_to_transform,
    parse_kitti_poses,
    wrap_angle,
    write_kitti_poses,
)
from .synth import derive_seed, load_dataset, sample_dataset, save_dataset

log = logging.getLogger("rank_odo")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
_SWEEP_STREAM = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Run:
    """Resolved configuration plus output-directory overrides for one command."""

    def __init__(self, cfg: RunConfig, base: Path, out: str | None, command: str):
        self.cfg = cfg
        self.base = base
        self.dataset_dir = self._resolve(cfg.paths.dataset_dir)
        self.checkpoint_dir = self._resolve(cfg.paths.checkpoint_dir)
        self.report_dir = self._resolve(cfg.paths.report_dir)
        if out is not None:
            target = Path(out)
            if command == "gen":
                self.dataset_dir = target
            elif command == "train":
                self.checkpoint_dir = target
            else:
                self.report_dir = target

    def _resolve(self, p: str) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    def split(self, name: str) -> list:
        directory = self.dataset_dir / name
        if not (directory / "manifest.json").is_file():
            raise FileNotFoundError(f"no dataset at {directory} (run `rank-odo gen` first)")
        return load_dataset(directory)

    def dofs(self, arg: str | None) -> list:
        if arg is None:
            return list(self.cfg.train.dofs)
        if arg == "all":
            return list(range(6))
        try:
            dof = int(arg)
        except ValueError:
            if arg in DOF_NAMES:
                return [DOF_NAMES.index(arg)]
            raise UsageError(f"--dof must be 0..5, a DoF name or 'all', got {arg!r}") from None
        if not 0 <= dof < 6:
            raise UsageError(f"--dof must be in 0..5, got {dof}")
        return [dof]

    def checkpoint_path(self, dof: int) -> Path:
        return self.checkpoint_dir / f"model_{DOF_NAMES[dof]}.json"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def trace_csv(losses) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for k, v in enumerate(losses):
        w.writerow([k, repr(float(v))])
    return buf.getvalue()


def cmd_gen(run: Run, args) -> int:
    cfg = run.cfg
    scene = cfg.scene.build()
    ranges = cfg.data.ranges()
    splits = {"train": cfg.data.n_train, "test": cfg.data.n_test}
    for offset, (name, n) in enumerate(splits.items()):
        if n == 0:
            continue
        seed = derive_seed(cfg.data.seed, offset)
        samples = sample_dataset(n, ranges, scene, cfg.data.sigma, seed)
        manifest = save_dataset(samples, run.dataset_dir / name)
        log.info("%s: %d samples -> %s", name, n, manifest)
    return EXIT_OK


def train_models(run: Run, dataset: list, dofs: list) -> dict:
    reports = {}
    for dof in dofs:
        tc = run.cfg.train.build(dof)
        log.info("training %s on %d samples", DOF_NAMES[dof], len(dataset))
        reports[dof] = (train_dof(dataset, tc), tc)
    return reports


def cmd_train(run: Run, args) -> int:
    dataset = run.split("train")
    for dof, (report, tc) in train_models(run, dataset, run.dofs(args.dof)).items():
        _write(run.checkpoint_path(dof), model_to_json(report.model, tc))
        _write(run.checkpoint_dir / f"loss_trace_{DOF_NAMES[dof]}.csv", trace_csv(report.losses))
        log.info("%s: %d steps, final loss %.6g (%.1f s)", DOF_NAMES[dof], len(report.losses),
                 report.losses[-1] if report.losses else float("nan"), report.seconds)
    return EXIT_OK


def load_models(run: Run, dofs: list) -> dict:
    models = {}
    for dof in dofs:
        path = run.checkpoint_path(dof)
        if path.is_file():
            models[dof] = model_from_json(path.read_text())
    return models


def evaluate_models(run: Run, models: dict, test: list) -> tuple:
    """Per-DoF correlations and drift of the trajectory rebuilt from predictions.

    DoFs without a model are predicted as 0.
    """
    input_dim = 2 * test[0].flow.width * test[0].flow.height
    for dof, m in models.items():
        if m.input_dim != input_dim:
            raise UsageError(
                f"{run.checkpoint_path(dof)} expects {m.input_dim} inputs but {run.dataset_dir / 'test'} "
                f"has flows of {input_dim}"
            )
    correlations = {dof: ev.ranking_alignment(ev.latent_dump(m, test)) for dof, m in sorted(models.items())}
    full = [models[d] if d in models else zero_model(input_dim, dof_index=d) for d in range(6)]
    flows = [s.flow for s in test]
    columns = np.stack([infer_batch(m, flows) for m in full], axis=1)
    preds = [EulerPose6D.from_array(_wrap_row(row)) for row in columns]
    gt = accumulate(euler_to_transform(s.state) for s in test)
    pred = accumulate(euler_to_transform(p) for p in preds)
    e = run.cfg.eval
    drift = ev.kitti_drift(gt, pred, e.lengths, e.stride, e.aggregation)
    return correlations, drift, gt, pred


def _wrap_row(row):
    return [*row[:3], *(wrap_angle(a) for a in row[3:])]


def cmd_eval(run: Run, args) -> int:
    e = run.cfg.eval
    if args.gt_poses or args.pred_poses:
        if not (args.gt_poses and args.pred_poses):
            raise UsageError("--gt-poses and --pred-poses must be given together")
        gt = parse_kitti_poses(Path(args.gt_poses).read_text())
        pred = parse_kitti_poses(Path(args.pred_poses).read_text())
        if len(gt) != len(pred):
            raise UsageError(f"{args.gt_poses} has {len(gt)} poses but {args.pred_poses} has {len(pred)}")
        drift = ev.kitti_drift(gt, pred, e.lengths, e.stride, e.aggregation)
        _write(run.report_dir / "drift.csv", ev.drift_csv(drift))
        return EXIT_OK
    test = run.split("test")
    models = load_models(run, run.dofs(args.dof))
    if not models:
        raise FileNotFoundError(f"no checkpoints in {run.checkpoint_dir} (run `rank-odo train` first)")
    correlations, drift, gt, pred = evaluate_models(run, models, test)
    _write(run.report_dir / "correlations.csv", ev.correlation_csv(correlations))
    _write(run.report_dir / "drift.csv", ev.drift_csv(drift))
    _write(run.report_dir / "gt_poses.txt", write_kitti_poses(gt))
    _write(run.report_dir / "pred_poses.txt", write_kitti_poses(pred))
    if drift.empty:
        log.warning("trajectory shorter than the shortest segment length; drift report is empty")
    return EXIT_OK


def cmd_latent(run: Run, args) -> int:
    dataset = run.split(args.split)
    models = load_models(run, run.dofs(args.dof))
    if not models:
        raise FileNotFoundError(f"no checkpoints in {run.checkpoint_dir} (run `rank-odo train` first)")
    for dof, model in sorted(models.items()):
        _write(run.report_dir / f"latent_{DOF_NAMES[dof]}.csv", ev.latent_csv(ev.latent_dump(model, dataset)))
    return EXIT_OK


def fraction_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices of a seeded random subset; fraction 1.0 keeps the original order."""
    k = max(1, int(round(fraction * n)))
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, _SWEEP_STREAM)))
    return np.sort(rng.permutation(n)[:k])


def cmd_scale_sweep(run: Run, args) -> int:
    train = run.split("train")
    test = run.split("test")
    dofs = run.dofs(args.dof)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["fraction", "n_train"]
    for dof in dofs:
        header += [f"r_s_{DOF_NAMES[dof]}", f"r_k_{DOF_NAMES[dof]}"]
    w.writerow(header + ["t_rel", "r_rel"])
    for fraction in run.cfg.sweep.fractions:
        idx = fraction_subset(len(train), fraction, run.cfg.sweep.seed)
        subset = [train[i] for i in idx]
        reports = train_models(run, subset, dofs)
        models = {dof: rep.model for dof, (rep, _) in reports.items()}
        correlations, drift, _, _ = evaluate_models(run, models, test)
        row = [ev._fmt(fraction), len(subset)]
        for dof in dofs:
            row += [ev._fmt(correlations[dof].r_s), ev._fmt(correlations[dof].r_k)]
        w.writerow(row + [ev._fmt(drift.t_rel), ev._fmt(drift.r_rel)])
        log.info("fraction %.2f: %s", fraction, row)
    _write(run.report_dir / "scale_sweep.csv", buf.getvalue())
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "latent": cmd_latent,
    "scale-sweep": cmd_scale_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rank-odo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--dof", help="DoF index 0..5, name, or 'all' (default: train.dofs)")
        p.add_argument("--out", help="output directory override")
        if name == "eval":
            p.add_argument("--gt-poses", help="KITTI pose file; with --pred-poses evaluates drift only")
            p.add_argument("--pred-poses", help="KITTI pose file of the estimated trajectory")
        if name == "latent":
            p.add_argument("--split", default="test", choices=("train", "test"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg, base = load_config(args.config)
        return COMMANDS[args.command](Run(cfg, base, args.out, args.command), args)
    except NonFiniteLossError as exc:
        print(f"rank-odo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError) as exc:
        print(f"rank-odo: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        where = f" ({exc.filename})" if getattr(exc, "filename", None) else ""
        print(f"rank-odo: {exc.strerror or exc}{where}", file=sys.stderr)
        return EXIT_USAGE
    except RankOdoError as exc:
        print(f"rank-odo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
