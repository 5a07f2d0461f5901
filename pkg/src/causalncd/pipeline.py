"""End-to-end runs: data generation through scoring and persistence.

A single run is deterministic given its config (the seed feeds every
random stream), so all persisted documents are byte-stable; wall time is
reported on the in-memory result only and never written to disk.  The four
ablation rows differ in which stages run:

  baseline  plain classifier features, k-means novel clusters,
            nearest-prototype labels
  crp       adversarially deconfounded features and prototype matching,
            then the same clustering and labeling
  crp-crg   adds the fitted causal graph; novel points are labeled by a
            balanced-transport plan against the novel prototypes
  full      adds graph propagation: novel prototypes are refined through
            the pruned graph and points take the nearest refined prototype
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines as bl
from . import deconfound as dc
from . import graph as cg
from . import metrics as mt
from . import propagate as pr
from .config import (ABLATION_ROWS, RunConfig, config_hash, dump_config,
                     load_config, row_config)
from .errors import CheckpointError, DataError, UsageError
from .scenes import base_points, generate_dataset, novel_points


@dataclass
class MetricsReport:
    iou_report: mt.IoUReport
    loss_traces: dict[str, list[float]]
    ablation_id: str
    wall_time: float
    config_hash: str
    self_checks: dict[str, bool] = field(default_factory=dict)

    @property
    def all_checks_passed(self) -> bool:
        return all(self.self_checks.values())


def _crp_config(cfg: RunConfig) -> dc.CrpConfig:
    return dc.CrpConfig(
        feature_dim=cfg.dim, num_classes=cfg.num_base, hidden=cfg.hidden,
        adversary_hidden=cfg.adversary_hidden, epochs=cfg.epochs,
        lr=cfg.lr, lr_floor=cfg.lr_floor, lr_decay_every=cfg.lr_decay_every,
        lambda_adv=cfg.lambda_adv_init, lambda_adv_max=cfg.lambda_adv_max,
        lambda_reg=cfg.lambda_reg, adversary_steps=cfg.adversary_steps,
        adversary_lr_scale=cfg.adversary_lr_scale,
        adversary_weight_decay=cfg.adversary_weight_decay,
        use_adversary=cfg.use_crp, use_proto_loss=cfg.use_crp,
        seed=cfg.seed)


def _check_divergence(trace: list[dc.LossReport]) -> None:
    for rep in trace:
        if not (math.isfinite(rep.l_cls) and math.isfinite(rep.l_total)):
            raise DataError(
                f"training diverged at epoch {rep.epoch}: non-finite loss")


def _scene_features(extractor: dc.ExtractorParams, scene) -> np.ndarray:
    attrs, _ = novel_points(scene)
    return dc.extract_features(extractor, [scene], "novel").data \
        if attrs.shape[0] else np.zeros((0, extractor.w2.shape[1]))


def run_pipeline(cfg: RunConfig) -> MetricsReport:
    """Execute one configuration end to end; see the module docstring for
    what each ablation row does.  Persists config snapshot, metrics CSV,
    summary, checkpoint, test-scene cluster labels (and training
    pseudo-labels when propagation ran) under cfg.output_dir when set."""
    t0 = time.perf_counter()
    spec = cfg.scene_spec()
    train, test = generate_dataset(spec, cfg.train_scenes, cfg.test_scenes)

    result = dc.fit_crp(train, _crp_config(cfg))
    _check_divergence(result.trace)
    base_protos = result.prototypes

    # graph stages anchor on the iteration-0 class-mean prototype set: the
    # converged soft refinement can merge near-antipodal class pairs on this
    # feature geometry, and a merged anchor makes parent attention useless
    train_base = dc.extract_features(result.extractor, train, "base").data
    base_labels = np.concatenate([base_points(s)[1] for s in train])
    anchors = dc.class_mean_prototypes(train_base, base_labels, cfg.num_base)

    train_novel = dc.extract_features(result.extractor, train, "novel").data
    novel_protos = cg.cluster_novel_prototypes(train_novel, cfg.num_novel,
                                               seed=cfg.seed)

    graph = None
    refined = None
    labeling = None
    checks: dict[str, bool] = {}
    if cfg.use_crg:
        fit = cg.fit_graph(anchors.vectors, novel_protos,
                           cg.GraphFitConfig(steps=cfg.graph_steps,
                                             lr=cfg.graph_lr, tau=cfg.tau,
                                             theta_init=cfg.theta_init))
        graph = fit.graph
        checks["adjacency_columns_sum_to_one"] = bool(
            np.all(np.abs(graph.adjacency.sum(axis=0) - 1.0) < 1e-9))
        checks["degrees_at_least_one"] = bool(
            np.all(graph.base_degrees >= 1.0)
            and np.all(graph.novel_degrees >= 1.0))
    if cfg.use_gcpl:
        refined = pr.propagate(graph, anchors.vectors, graph.novel_vectors,
                               pr.GcnParams(num_layers=cfg.gcn_layers,
                                            leaky_slope=cfg.leaky_slope))
        train_assign = bl.nearest_prototype_labels(train_novel,
                                                   novel_protos.vectors)
        labeling = pr.assign_pseudo_labels(refined, anchors, train_assign)

    base_preds = []
    novel_feat_blocks = []
    for scene in test:
        with_feats = dc.extract_features(result.extractor, [scene], "base")
        logits = result.extractor.logits_from(
            dc.Tensor(with_feats.data)).data
        base_preds.append(logits.argmax(axis=1))
        novel_feat_blocks.append(_scene_features(result.extractor, scene))

    if cfg.use_gcpl:
        cluster_ids = [bl.nearest_prototype_labels(f, refined)
                       for f in novel_feat_blocks]
    elif cfg.use_crg:
        pooled = np.vstack(novel_feat_blocks)
        plan = bl.sinkhorn_labels(pooled, novel_protos.vectors,
                                  epsilon=cfg.sinkhorn_epsilon)
        row_err, col_err = plan.marginal_errors()
        checks["transport_marginals"] = bool(max(row_err, col_err) <= 1e-6)
        labels = plan.labels
        cluster_ids = []
        offset = 0
        for f in novel_feat_blocks:
            cluster_ids.append(labels[offset:offset + f.shape[0]])
            offset += f.shape[0]
    else:
        cluster_ids = [bl.nearest_prototype_labels(f, novel_protos.vectors)
                       for f in novel_feat_blocks]

    report = mt.evaluate(test, base_preds, cluster_ids,
                         num_base=cfg.num_base, num_novel=cfg.num_novel)

    # label-free assignment weights over training features: rows on the
    # simplex put every prototype inside the convex hull of the features
    weights = dc.similarity_weights(train_base, base_protos)
    checks["assignment_rows_sum_to_one"] = bool(
        np.all(np.abs(weights.sum(axis=1) - 1.0) < 1e-9))
    checks["assignment_weights_nonnegative"] = bool(np.all(weights >= 0.0))
    checks["prototypes_finite"] = bool(
        np.all(np.isfinite(base_protos.vectors))
        and np.all(np.isfinite(novel_protos.vectors)))

    traces = {
        "l_cls": [r.l_cls for r in result.trace],
        "l_adv": [r.l_adv for r in result.trace],
        "l_pro": [r.l_pro for r in result.trace],
        "l_total": [r.l_total for r in result.trace],
    }
    out = MetricsReport(iou_report=report, loss_traces=traces,
                        ablation_id=cfg.row_name(),
                        wall_time=time.perf_counter() - t0,
                        config_hash=config_hash(cfg), self_checks=checks)
    if cfg.output_dir is not None:
        persist_run(cfg, out, result, graph, labeling, cluster_ids)
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _tensor_doc(t) -> list:
    return t.data.tolist()


def checkpoint_doc(result: dc.CrpResult, graph, cfg_hash: str) -> dict:
    ext = result.extractor
    doc = {
        "config_hash": cfg_hash,
        "epoch": len(result.trace),
        "extractor": {
            "w1": _tensor_doc(ext.w1), "b1": _tensor_doc(ext.b1),
            "w2": _tensor_doc(ext.w2), "b2": _tensor_doc(ext.b2),
            "w_head": _tensor_doc(ext.w_head),
            "center": ext.center.tolist(),
        },
        "adversary": None,
        "prototypes": result.prototypes.vectors.tolist(),
        "graph": cg.graph_to_doc(graph) if graph is not None else None,
    }
    if result.adversary is not None:
        adv = result.adversary
        doc["adversary"] = {
            "w1": _tensor_doc(adv.w1), "b1": _tensor_doc(adv.b1),
            "w2": _tensor_doc(adv.w2), "b2": _tensor_doc(adv.b2),
        }
    return doc


def save_checkpoint(path, result: dc.CrpResult, graph, cfg_hash: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_doc(result, graph, cfg_hash), fh,
                  sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, expected_hash: str | None = None,
                    force: bool = False) -> dict:
    """Read a checkpoint document; JSON errors carry the byte offset."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(
            f"corrupt checkpoint {path}: {exc.msg} at byte offset {exc.pos}"
        ) from exc
    if not isinstance(doc, dict) or "config_hash" not in doc:
        raise CheckpointError(f"checkpoint {path} lacks a config hash")
    if expected_hash is not None and doc["config_hash"] != expected_hash \
            and not force:
        raise CheckpointError(
            f"checkpoint hash {doc['config_hash']} does not match the "
            f"config hash {expected_hash}; pass force to load anyway")
    return doc


def loss_trace_csv(traces: dict[str, list[float]]) -> str:
    names = list(traces)
    rows = ["epoch," + ",".join(names)]
    for i in range(len(traces[names[0]]) if names else 0):
        rows.append(f"{i}," + ",".join(f"{traces[n][i]:.10f}"
                                       for n in names))
    return "\n".join(rows) + "\n"


def test_labels_text(cluster_ids: list[np.ndarray]) -> str:
    """One line per test novel point: scene index, point index within the
    scene's novel subset, assigned cluster id."""
    lines = []
    for s, ids in enumerate(cluster_ids):
        for p, c in enumerate(np.asarray(ids).reshape(-1)):
            lines.append(f"{s}\t{p}\t{int(c)}")
    return "\n".join(lines) + "\n" if lines else ""


def persist_run(cfg: RunConfig, report: MetricsReport,
                result: dc.CrpResult, graph, labeling,
                cluster_ids: list[np.ndarray]) -> None:
    out = cfg.output_dir
    try:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(dump_config(cfg))
        mt.write_metrics_csv(os.path.join(out, "metrics.csv"),
                             report.iou_report)
        with open(os.path.join(out, "summary.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(mt.summary_doc(report.iou_report, cfg.seed,
                                     report.config_hash), fh, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out, "loss_trace.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write(loss_trace_csv(report.loss_traces))
        save_checkpoint(os.path.join(out, "checkpoint.json"), result, graph,
                        report.config_hash)
        with open(os.path.join(out, "test_labels.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(test_labels_text(cluster_ids))
        if labeling is not None:
            with open(os.path.join(out, "pseudo_labels.txt"), "w",
                      encoding="utf-8") as fh:
                for row in pr.labeling_rows(labeling):
                    fh.write(f"{row['point_index']}\t{row['pseudo_label']}\t"
                             f"{row['confidence']:.10f}\n")
    except OSError as exc:
        raise UsageError(f"cannot write run outputs under {out}: {exc}") \
            from exc


def extractor_from_doc(doc: dict) -> dc.ExtractorParams:
    try:
        return dc.ExtractorParams(
            w1=dc.Tensor(np.asarray(doc["w1"], dtype=float)),
            b1=dc.Tensor(np.asarray(doc["b1"], dtype=float)),
            w2=dc.Tensor(np.asarray(doc["w2"], dtype=float)),
            b2=dc.Tensor(np.asarray(doc["b2"], dtype=float)),
            w_head=dc.Tensor(np.asarray(doc["w_head"], dtype=float)),
            center=np.asarray(doc["center"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(
            f"checkpoint extractor block is malformed: {exc}") from exc


def _read_test_labels(path, num_scenes: int) -> list[np.ndarray]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read saved labels {path}: {exc}") from exc
    per_scene: list[list[int]] = [[] for _ in range(num_scenes)]
    for lineno, line in enumerate(lines, start=1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise UsageError(f"{path} line {lineno}: expected "
                             "scene<TAB>point<TAB>cluster")
        try:
            s, p, c = (int(v) for v in parts)
        except ValueError as exc:
            raise UsageError(f"{path} line {lineno}: {exc}") from exc
        if not 0 <= s < num_scenes:
            raise UsageError(f"{path} line {lineno}: scene {s} out of range")
        if p != len(per_scene[s]):
            raise UsageError(f"{path} line {lineno}: point indices must be "
                             "contiguous per scene")
        per_scene[s].append(c)
    return [np.asarray(ids, dtype=np.int64) for ids in per_scene]


@dataclass
class RescoreResult:
    report: mt.IoUReport
    stored_summary: dict
    recomputed_summary: dict

    @property
    def matches_summary(self) -> bool:
        return self.stored_summary == self.recomputed_summary


def rescore_run(run_dir) -> RescoreResult:
    """Re-score a persisted run from its own artifacts.

    Test scenes are regenerated from the saved config (generation is
    deterministic), base predictions come from the checkpointed extractor,
    and novel cluster ids come from the saved label file, so the recomputed
    summary must equal the stored one unless an artifact was edited.
    """
    cfg = load_config(os.path.join(run_dir, "config.txt"))
    expected = config_hash(cfg)
    doc = load_checkpoint(os.path.join(run_dir, "checkpoint.json"),
                          expected_hash=expected)
    extractor = extractor_from_doc(doc["extractor"])
    _, test = generate_dataset(cfg.scene_spec(), cfg.train_scenes,
                               cfg.test_scenes)
    cluster_ids = _read_test_labels(
        os.path.join(run_dir, "test_labels.txt"), len(test))
    base_preds = []
    for scene in test:
        feats = dc.extract_features(extractor, [scene], "base")
        logits = extractor.logits_from(dc.Tensor(feats.data)).data
        base_preds.append(logits.argmax(axis=1))
    report = mt.evaluate(test, base_preds, cluster_ids,
                         num_base=cfg.num_base, num_novel=cfg.num_novel)
    try:
        with open(os.path.join(run_dir, "summary.json"), "r",
                  encoding="utf-8") as fh:
            stored = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read stored summary: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"stored summary is not valid JSON: {exc.msg} at "
                         f"byte offset {exc.pos}") from exc
    recomputed = mt.summary_doc(report, cfg.seed, expected)
    return RescoreResult(report=report, stored_summary=stored,
                         recomputed_summary=recomputed)


# ---------------------------------------------------------------------------
# ablation suite
# ---------------------------------------------------------------------------

@dataclass
class AblationCell:
    row: str
    seed: int
    novel_miou: float | None
    error: str | None = None


@dataclass
class AblationTable:
    cells: list[AblationCell]
    reports: dict[tuple[str, int], MetricsReport]

    def row_values(self, row: str) -> list[float]:
        return [c.novel_miou for c in self.cells
                if c.row == row and c.novel_miou is not None]

    def aggregate_csv(self) -> str:
        lines = ["row,mean_novel_miou,stddev_novel_miou,runs_ok,runs_failed"]
        for row in ABLATION_ROWS:
            vals = self.row_values(row)
            failed = sum(1 for c in self.cells
                         if c.row == row and c.error is not None)
            mean = float(np.mean(vals)) if vals else float("nan")
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            lines.append(f"{row},{mean:.10f},{std:.10f},{len(vals)},{failed}")
        return "\n".join(lines) + "\n"


def run_ablation_suite(base_cfg: RunConfig, seeds: list[int]) -> AblationTable:
    """All four flag combinations per seed; failures are recorded per cell
    and the suite keeps going."""
    if len(seeds) < 2:
        raise UsageError("the ablation suite needs at least two seeds")
    cells: list[AblationCell] = []
    reports: dict[tuple[str, int], MetricsReport] = {}
    for row in ABLATION_ROWS:
        for seed in seeds:
            cfg = row_config(replace(base_cfg, seed=seed), row)
            if base_cfg.output_dir is not None:
                cfg = replace(cfg, output_dir=os.path.join(
                    base_cfg.output_dir, row, f"seed-{seed}"))
            try:
                rep = run_pipeline(cfg)
            except Exception as exc:  # record and continue
                cells.append(AblationCell(row=row, seed=seed,
                                          novel_miou=None, error=str(exc)))
                continue
            reports[(row, seed)] = rep
            cells.append(AblationCell(row=row, seed=seed,
                                      novel_miou=rep.iou_report.miou_novel))
    table = AblationTable(cells=cells, reports=reports)
    if base_cfg.output_dir is not None:
        try:
            os.makedirs(base_cfg.output_dir, exist_ok=True)
            with open(os.path.join(base_cfg.output_dir, "ablation.csv"),
                      "w", encoding="utf-8") as fh:
                fh.write(table.aggregate_csv())
        except OSError as exc:
            raise UsageError(f"cannot write ablation aggregate: {exc}") \
                from exc
    return table
