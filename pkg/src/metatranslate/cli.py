"""Command-line entry points.

Exit codes: 0 ok, 1 check failure, 2 usage/config/input error, 3 divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import replace
from pathlib import Path
from typing import Any

import numpy as np

from . import checkpoint as ckpt_io
from .autodiff import ContractError
from .evaluation import RunReport, cyclegan_scratch, fold_report, frechet_samples
from .gradcheck import run_suite
from .meta import MetaState, MetaTrainingAborted, TrainingDivergence, adapt, meta_train
from .protocol import run_protocol
from .runconfig import RunConfig, load_config
from .tasks import (
    TaskDistribution,
    TranslationTask,
    load_task_dir,
    materialize,
    sample_task,
    split_support_query,
    write_matrix,
)

logger = logging.getLogger("metatranslate")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

METRIC_COLUMNS = ("step", "task_id", "adv_f", "adv_b", "cyc", "idt", "total", "mode")
CURVE_COLUMNS = ("step", "adv_f", "adv_b", "cyc", "idt", "total")
REPORT_COLUMNS = ("method", "direction", "mean", "std", "n")


class UsageError(Exception):
    pass


def _fmt(v: Any) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.with_seed(args.seed)


def _write_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.txt").write_text(cfg.to_text())
    (out / "config.sha256").write_text(cfg.digest() + "\n")


# -- meta-train -----------------------------------------------------------------


def cmd_meta_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dist = cfg.distribution()
    hp = cfg.hyperparams(cfg.data_dim())
    _write_config(cfg, out)
    digest = cfg.digest()

    with (out / "metrics.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)

        def on_metrics(batch: int, rows: list[dict[str, Any]]) -> None:
            for r in rows:
                writer.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
            fh.flush()

        def on_checkpoint(meta: MetaState, final: bool) -> None:
            name = "ckpt_final" if final else f"ckpt_{meta.step}"
            ckpt_io.save(ckpt_io.from_meta(meta, digest), out / name)

        try:
            meta = meta_train(
                dist,
                hp,
                train_indices=cfg.train_indices(),
                on_metrics=on_metrics,
                on_checkpoint=on_checkpoint,
                checkpoint_every=cfg.checkpoint_every,
            )
        except (MetaTrainingAborted, TrainingDivergence) as exc:
            print(f"meta-train: diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGED
    print(f"meta-train: {meta.step} meta-batches, checkpoint {out / 'ckpt_final'} (config {digest[:12]})")
    return EXIT_OK


# -- adapt ------------------------------------------------------------------------


def _load_task(spec: str, cfg: RunConfig, K: int, seed: int) -> TranslationTask:
    """``builtin:<family>:<index>`` or a directory holding domain_x.csv/domain_y.csv."""
    episode = replace(cfg.hyperparams(2).episode, K=K)
    if spec.startswith("builtin:"):
        parts = spec.split(":")
        if len(parts) != 3 or not parts[2].isdigit():
            raise UsageError(f"--task builtin form is builtin:<family>:<index>, got {spec!r}")
        dist = replace(cfg.distribution(), family=parts[1], task_dir=None)
        if dist.family == "file_backed":
            raise UsageError("--task builtin: file_backed tasks are given as a directory")
        return sample_task(dist, int(parts[2]), episode, draw=seed)
    path = Path(spec)
    x, y = load_task_dir(path)
    return split_support_query(x, y, episode, [cfg.dist_seed, seed], task_id=path.name)


def cmd_adapt(args: argparse.Namespace) -> int:
    if args.steps < 1:
        raise UsageError(f"--steps must be >= 1, got {args.steps}")
    if args.k < 1:
        raise UsageError(f"--k must be >= 1, got {args.k}")
    cfg = _config(args)
    seed = cfg.seed
    ck = ckpt_io.load(args.ckpt)
    meta = ck.meta_state()
    if args.config:
        hp = cfg.hyperparams(meta.gen_spec.input_dim)
        ck.check_specs(hp.gen_spec, hp.disc_spec)
    hp = replace(cfg.hyperparams(meta.gen_spec.input_dim), gen_spec=meta.gen_spec, disc_spec=meta.disc_spec)
    task = _load_task(args.task, cfg, args.k, seed)
    if task.support_x.shape[1] != meta.gen_spec.input_dim:
        raise ckpt_io.CheckpointError(
            f"task dimension {task.support_x.shape[1]} does not match network input_dim {meta.gen_spec.input_dim}"
        )
    lr = args.lr if args.lr is not None else cfg.adapt_lr
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out)
    try:
        if args.method == "mtgan":
            state, curve = adapt(meta, task, hp, args.steps, lr=lr)
        else:
            state, curve = cyclegan_scratch(task, hp, args.steps, seed=seed, lr=lr)
    except TrainingDivergence as exc:
        _write_curve(out / "curve.csv", exc.curve)
        print(f"adapt: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _write_curve(out / "curve.csv", curve)
    fwd, bwd = state.translate_x(task.query_x), state.translate_y(task.query_y)
    write_matrix(out / "translated_forward.csv", fwd)
    write_matrix(out / "translated_backward.csv", bwd)
    write_matrix(out / "query_x.csv", task.query_x)
    write_matrix(out / "query_y.csv", task.query_y)
    report = RunReport(
        fold_id=args.fold,
        method=args.method,
        K=task.K,
        frechet_forward=frechet_samples(fwd, task.query_y),
        frechet_backward=frechet_samples(bwd, task.query_x),
        cyc_curve=tuple(c.cyc for c in curve),
        seed=seed,
        batch=seed,
        dim=task.query_x.shape[1],
    )
    extra = {"task": args.task, "task_id": task.task_id, "source_ckpt_digest": ck.config_digest}
    ckpt_io.save(ckpt_io.from_fine_tuned(state, cfg.digest(), extra), out / "ckpt_adapted")
    (out / "run.json").write_text(
        json.dumps({**report.to_dict(), **extra, "config_digest": cfg.digest()}, indent=1) + "\n"
    )
    print(
        f"adapt: {args.method} on {task.task_id} K={task.K} steps={args.steps}: "
        f"frechet forward {report.frechet_forward:.6g}, backward {report.frechet_backward:.6g}"
    )
    return EXIT_OK


def _write_curve(path: Path, curve: Sequence[Any]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for i, bd in enumerate(curve):
            d = bd.as_dict()
            w.writerow([i, *(_fmt(d[c]) for c in CURVE_COLUMNS[1:])])


# -- eval -------------------------------------------------------------------------


def _run_reports(run_dirs: Sequence[str]) -> list[RunReport]:
    missing = [str(Path(d) / "run.json") for d in run_dirs if not (Path(d) / "run.json").is_file()]
    if missing:
        raise UsageError("missing run artifacts:\n  " + "\n  ".join(missing))
    reports = []
    for d in run_dirs:
        try:
            reports.append(RunReport.from_dict(json.loads((Path(d) / "run.json").read_text())))
        except (KeyError, ValueError, TypeError) as exc:
            raise UsageError(f"{Path(d) / 'run.json'}: malformed run report: {exc}") from exc
    return reports


def write_report(reports: Sequence[RunReport], out: Path, directions: Sequence[str]) -> None:
    rep = fold_report(reports)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "report.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in rep.rows:
            if r.direction in directions:
                w.writerow([r.method, r.direction, _fmt(r.mean), _fmt(r.std), r.n])
    if rep.shot_rows:
        with (out / "report_by_k.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("K", *REPORT_COLUMNS))
            for r in rep.shot_rows:
                if r.direction in directions:
                    w.writerow([r.K, r.method, r.direction, _fmt(r.mean), _fmt(r.std), r.n])
    (out / "summary.txt").write_text(rep.summary() + "\n")


def cmd_eval(args: argparse.Namespace) -> int:
    reports = _run_reports(args.run_dirs)
    directions = ("forward", "backward") if args.direction == "both" else (args.direction,)
    out = Path(args.out)
    write_report(reports, out, directions)
    print((out / "summary.txt").read_text(), end="")
    return EXIT_OK


# -- gradcheck --------------------------------------------------------------------


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results, elapsed = run_suite(args.seed if args.seed is not None else 0)
    ranked = sorted(results, key=lambda r: r.error / r.tol, reverse=True)
    print(f"gradcheck: {len(results)} checks in {elapsed:.1f}s; worst offenders:")
    for r in ranked[: args.top]:
        print(f"  {'ok  ' if r.ok else 'FAIL'} {r.name:<44} rel err {r.error:.3e} (tol {r.tol:.0e}) {r.where}")
    failed = [r for r in ranked if not r.ok]
    for r in failed:
        print(f"gradcheck: FAIL {r.name}: rel err {r.error:.3e} exceeds {r.tol:.0e}", file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


# -- make-tasks -------------------------------------------------------------------


def cmd_make_tasks(args: argparse.Namespace) -> int:
    if args.family == "file_backed":
        raise UsageError("make-tasks: choose a synthetic family to materialize")
    dist = TaskDistribution(family=args.family, seed=args.seed if args.seed is not None else 0)
    paths = materialize(dist, args.out, args.n_tasks, args.n_samples)
    print(f"make-tasks: wrote {len(paths)} {args.family} tasks under {args.out}")
    return EXIT_OK


# -- experiment -------------------------------------------------------------------


def cmd_experiment(args: argparse.Namespace) -> int:
    """Hold-one-out comparison of meta-init and scratch adaptation over folds."""
    cfg = _config(args)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config(cfg, out)
    dist = cfg.distribution()
    hp = cfg.hyperparams(cfg.data_dim())
    run_dirs: list[str] = []

    def on_fold(fold_id: int, meta: MetaState, reports: list[RunReport]) -> None:
        fold_dir = out / f"fold_{fold_id}"
        fold_dir.mkdir(exist_ok=True)
        ckpt_io.save(ckpt_io.from_meta(meta, cfg.digest()), fold_dir / "ckpt_final")
        for r in reports:
            d = fold_dir / f"{r.method}_K{r.K}_ep{r.batch}"
            d.mkdir(exist_ok=True)
            (d / "run.json").write_text(json.dumps({**r.to_dict(), "config_digest": cfg.digest()}, indent=1) + "\n")
            run_dirs.append(str(d))
        logger.info("fold %d done", fold_id)

    try:
        run_protocol(dist, hp, cfg.protocol(), folds=list(cfg.folds) or None, on_fold=on_fold)
    except (MetaTrainingAborted, TrainingDivergence) as exc:
        print(f"experiment: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    write_report(_run_reports(run_dirs), out, ("forward", "backward"))
    print((out / "summary.txt").read_text(), end="")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metatranslate", description="Meta-learned few-shot unpaired translation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def seed_opt(sp):
        sp.add_argument("--seed", type=int, default=None, help="override the seed")

    sp = sub.add_parser("meta-train", help="meta-train (G, D) from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None, help="output directory (default: output_dir from the config)")
    seed_opt(sp)
    sp.set_defaults(fn=cmd_meta_train)

    sp = sub.add_parser("adapt", help="fine-tune a checkpoint on one task's support set")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--task", required=True, help="task directory or builtin:<family>:<index>")
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", default=None, help="config supplying loss weights, L, lr and task family")
    sp.add_argument("--lr", type=float, default=None, help="Adam learning rate (default: adapt_lr, else beta)")
    sp.add_argument("--method", choices=("mtgan", "cyclegan_scratch"), default="mtgan")
    sp.add_argument("--fold", type=int, default=0, help="fold id recorded in run.json")
    seed_opt(sp)
    sp.set_defaults(fn=cmd_adapt)

    sp = sub.add_parser("eval", help="aggregate adapt runs into report.csv and summary.txt")
    sp.add_argument("run_dirs", nargs="+")
    sp.add_argument("--out", default=".")
    sp.add_argument("--direction", choices=("forward", "backward", "both"), default="forward")
    seed_opt(sp)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    sp.add_argument("--top", type=int, default=8, help="number of worst checks to print")
    seed_opt(sp)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("make-tasks", help="write synthetic tasks in the file-backed layout")
    sp.add_argument("--family", required=True, choices=("affine2d", "ring2d", "glyph_identity", "file_backed"))
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-tasks", type=int, default=10)
    sp.add_argument("--n-samples", type=int, default=200)
    seed_opt(sp)
    sp.set_defaults(fn=cmd_make_tasks)

    sp = sub.add_parser("experiment", help="hold-one-out meta-init vs scratch comparison")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None)
    seed_opt(sp)
    sp.set_defaults(fn=cmd_experiment)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        # config, checkpoint, task-file and shape errors
        print(f"{args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
