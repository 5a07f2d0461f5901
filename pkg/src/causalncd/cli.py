"""Command line front end.

Subcommands:
  generate  write the synthetic scenes of a config to disk
  run       one end-to-end run (a single ablation row)
  ablate    the four-row ablation grid over several seeds
  eval      re-score a persisted run from its own artifacts
  inspect   print the learned state stored in a checkpoint

Exit status is 0 only when the requested work completed and every
internal consistency check passed; package-level errors exit 1 with a
one-line message on stderr.  CAUSALNCD_LOG=debug|info|warning controls
log verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import graph as cg
from . import pipeline as pl
from .config import ABLATION_ROWS, RunConfig, load_config, row_config
from .errors import CausalNcdError, UsageError
from .scenes import generate_dataset, save_scene

log = logging.getLogger("causalncd")

_LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO,
               "warning": logging.WARNING, "error": logging.ERROR}


def _log_level(value: str) -> int:
    try:
        return _LOG_LEVELS[value.strip().lower()]
    except KeyError:
        raise UsageError(
            f"CAUSALNCD_LOG must be one of {sorted(_LOG_LEVELS)}, "
            f"got {value!r}") from None


def _configure_logging() -> None:
    raw = os.environ.get("CAUSALNCD_LOG")
    level = _log_level(raw) if raw else logging.WARNING
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, output_dir=args.out)
    return cfg


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise UsageError(
            f"--seeds expects comma-separated integers, got {text!r}") \
            from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _base_config(args)
    if cfg.output_dir is None:
        raise UsageError("generate needs --out (or run.output_dir in the "
                         "config) to know where to write scenes")
    train, test = generate_dataset(cfg.scene_spec(), cfg.train_scenes,
                                   cfg.test_scenes)
    os.makedirs(cfg.output_dir, exist_ok=True)
    for i, scene in enumerate(train):
        save_scene(os.path.join(cfg.output_dir, f"train-{i:03d}.json"), scene)
    for i, scene in enumerate(test):
        save_scene(os.path.join(cfg.output_dir, f"test-{i:03d}.json"), scene)
    print(f"wrote {len(train)} train and {len(test)} test scenes "
          f"to {cfg.output_dir}")
    return 0


def cmd_run(args) -> int:
    cfg = row_config(_base_config(args), args.row)
    log.info("running row %s with seed %d", args.row, cfg.seed)
    rep = pl.run_pipeline(cfg)
    print(f"row {rep.ablation_id}  seed {cfg.seed}  "
          f"config {rep.config_hash}")
    print(f"{'split':<8}{'class':<12}{'group':<8}iou")
    for s in rep.iou_report.scores:
        print(f"{s.split:<8}{s.class_name:<12}{s.group:<8}{s.iou:.4f}")
    print(f"miou known {rep.iou_report.miou_known:.4f}  "
          f"novel {rep.iou_report.miou_novel:.4f}  "
          f"all {rep.iou_report.miou_all:.4f}")
    ok = True
    for name, passed in sorted(rep.self_checks.items()):
        print(f"check {name}: {'ok' if passed else 'FAILED'}")
        ok = ok and passed
    if cfg.output_dir is not None:
        print(f"artifacts under {cfg.output_dir}")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    cfg = _base_config(args)
    seeds = _parse_seeds(args.seeds)
    log.info("ablation grid over seeds %s", seeds)
    table = pl.run_ablation_suite(cfg, seeds)
    sys.stdout.write(table.aggregate_csv())
    ok = True
    for cell in table.cells:
        if cell.error is not None:
            print(f"cell {cell.row}/seed-{cell.seed} failed: {cell.error}")
            ok = False
    for rep in table.reports.values():
        ok = ok and rep.all_checks_passed
    return 0 if ok else 1


def cmd_eval(args) -> int:
    res = pl.rescore_run(args.run)
    stored, fresh = res.stored_summary, res.recomputed_summary
    for key in ("miou_known", "miou_novel", "miou_all"):
        marker = "" if stored.get(key) == fresh[key] else "  <- differs"
        print(f"{key}: stored {stored.get(key)}  "
              f"recomputed {fresh[key]}{marker}")
    if res.matches_summary:
        print("re-score matches the stored summary")
        return 0
    print("re-score DOES NOT match the stored summary")
    return 1


def _cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.maximum(np.linalg.norm(vectors, axis=1, keepdims=True), 1e-300)
    unit = vectors / norms
    return unit @ unit.T


def _print_matrix(mat: np.ndarray, indent: str = "  ") -> None:
    for row in mat:
        print(indent + " ".join(f"{v: .4f}" for v in row))


def cmd_inspect(args) -> int:
    path = args.run
    if os.path.isdir(path):
        path = os.path.join(path, "checkpoint.json")
    doc = pl.load_checkpoint(path)
    print(f"checkpoint {path}")
    print(f"config hash {doc['config_hash']}  epochs trained {doc['epoch']}")

    protos = np.asarray(doc["prototypes"], dtype=float)
    print(f"base prototypes ({protos.shape[0]} x {protos.shape[1]})")
    norms = np.linalg.norm(protos, axis=1)
    print("  norms: " + " ".join(f"{n:.6f}" for n in norms))
    print("  pairwise cosine:")
    _print_matrix(_cosine_matrix(protos), indent="    ")

    if doc.get("graph") is None:
        print("no graph in this checkpoint")
        return 0
    graph = cg.graph_from_doc(doc["graph"])
    novel_norms = np.linalg.norm(graph.novel_vectors, axis=1)
    print(f"novel prototypes ({graph.num_novel} x "
          f"{graph.novel_vectors.shape[1]})")
    print("  norms: " + " ".join(f"{n:.6f}" for n in novel_norms))
    # repr round-trips the exact float held in the file
    print(f"edge threshold theta = {graph.theta!r}")
    print("base -> novel edges (weight, state)")
    for j in range(graph.num_novel):
        for i in range(graph.num_base):
            if graph.fallback_mask[i, j]:
                state = "fallback"
            elif graph.kept_mask[i, j]:
                state = "kept"
            else:
                state = "pruned"
            print(f"  base-{i} -> novel-{j}  {graph.adjacency[i, j]!r}"
                  f"  {state}")
    print("novel -> novel weights:")
    _print_matrix(graph.novel_weights)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="causalncd",
        description="novel-class discovery on confounded point scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="config file (key=value lines)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("generate", help="write synthetic scenes to disk")
    common(p, "directory for the scene files")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("run", help="one end-to-end run")
    common(p, "directory for run artifacts")
    p.add_argument("--row", choices=ABLATION_ROWS, default="full",
                   help="which ablation row to run (default: full)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="four-row ablation over several seeds")
    common(p, "directory for per-cell artifacts and the aggregate table")
    p.add_argument("--seeds", default="0,1",
                   help="comma-separated seeds (at least two)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="re-score a persisted run")
    p.add_argument("--run", required=True, help="run directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print a checkpoint's learned state")
    p.add_argument("--run", required=True,
                   help="run directory or checkpoint file")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CausalNcdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
