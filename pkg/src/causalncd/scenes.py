"""Synthetic confounded point scenes.

Generative story (a small structural causal model):

* every class (base and novel) owns a signature vector living on the
  "causal" channels; a point is its class signature plus Gaussian noise;
* novel-class signatures are derived from a parent base signature by a
  rotation inside a random 2-plane plus a small shift, so base knowledge
  genuinely carries over to novel classes;
* a binary confounder tag rides along with every point.  Tagged points get
  a class-specific shortcut pattern written onto a reserved block of
  "confounded" channels.  In train scenes the pattern matches the point's
  own class, which makes the shortcut channels predictive of the label.
  In test scenes the pattern's class is resampled for a ``flip_rate``
  fraction of tagged points, which breaks that correlation;
* the tag's own frequency is only mildly class-skewed (``tag_skew``), so a
  feature map that drops the shortcut channels keeps the tag nearly
  unpredictable while staying fully label-informative.

Scene files are JSON documents; floats round-trip losslessly through
``repr`` which is what the json module emits.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CheckpointError, DataError, ParameterError
from .rng import derive_seed, stream

SPLITS = ("train", "test")


@dataclass(frozen=True)
class NovelDerivation:
    """How one novel class is carved out of a base class."""

    parent: int
    angle: float = 0.5
    shift: float = 0.15


@dataclass(frozen=True)
class SceneSpec:
    num_base: int
    num_novel: int
    points: int
    dim: int
    confounder_strength: float
    confounder_flip_rate: float
    novel_derivation: tuple[NovelDerivation, ...]
    noise_sigma: float
    seed: int
    tag_skew: float = 0.05
    shortcut_noise: float = 0.08

    def __post_init__(self) -> None:
        if self.num_base < 2:
            raise ParameterError("need at least two base classes")
        if self.num_novel < 1:
            raise ParameterError("need at least one novel class")
        if self.dim < 2:
            raise ParameterError("feature dimension must be at least 2")
        if self.points < self.num_base + self.num_novel:
            raise ParameterError("too few points for the class count")
        for name, v in (("confounder_strength", self.confounder_strength),
                        ("confounder_flip_rate", self.confounder_flip_rate)):
            if not (0.0 <= v <= 1.0):
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")
        if not (self.noise_sigma > 0.0):
            raise ParameterError("noise_sigma must be positive")
        if len(self.novel_derivation) != self.num_novel:
            raise ParameterError("novel_derivation must list every novel class")
        for der in self.novel_derivation:
            if not (0 <= der.parent < self.num_base):
                raise ParameterError(f"novel parent {der.parent} out of range")
            if not (0.0 < der.angle < math.pi / 2):
                raise ParameterError("derivation angle must lie in (0, pi/2)")
            if der.shift < 0.0:
                raise ParameterError("derivation shift must be non-negative")


def default_derivation(num_base: int, num_novel: int,
                       angle: float = 0.5, shift: float = 0.15) -> tuple[NovelDerivation, ...]:
    """Round-robin parent assignment."""
    return tuple(NovelDerivation(parent=j % num_base, angle=angle, shift=shift)
                 for j in range(num_novel))


@dataclass(frozen=True)
class ConfounderPlan:
    """Which channels the confounder writes to and how strongly."""

    channels: tuple[int, ...]
    correlation: float
    decorrelated_in_test: bool


@dataclass
class PointScene:
    attrs: np.ndarray                    # (P, d) float64
    base_labels: np.ndarray              # (P,) int64, -1 where the point is novel
    novel_labels_hidden: np.ndarray      # (P,) int64, -1 where the point is base
    confounder_tags: np.ndarray          # (P,) int64 in {0, 1}
    split: str
    scene_seed: int
    spec_hash: str

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise DataError(f"unknown split tag {self.split!r}")
        if not np.all(np.isfinite(self.attrs)):
            raise DataError("scene attributes contain non-finite values")
        n = self.attrs.shape[0]
        for name, arr in (("base_labels", self.base_labels),
                          ("novel_labels_hidden", self.novel_labels_hidden),
                          ("confounder_tags", self.confounder_tags)):
            if arr.shape != (n,):
                raise DataError(f"{name} must have one entry per point")
        both = (self.base_labels >= 0) & (self.novel_labels_hidden >= 0)
        neither = (self.base_labels < 0) & (self.novel_labels_hidden < 0)
        if np.any(both) or np.any(neither):
            raise DataError("every point is exactly one of base or novel")
        if not np.all(np.isin(self.confounder_tags, (0, 1))):
            raise DataError("confounder tags must be binary")

    @property
    def num_points(self) -> int:
        return self.attrs.shape[0]


# ---------------------------------------------------------------------------
# deterministic spec-level structures
# ---------------------------------------------------------------------------

def spec_hash(spec: SceneSpec) -> str:
    payload = repr(spec).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


def confounder_plan(spec: SceneSpec) -> ConfounderPlan:
    n_conf = max(1, spec.dim // 4)
    channels = tuple(range(spec.dim - n_conf, spec.dim))
    return ConfounderPlan(channels=channels,
                          correlation=spec.confounder_strength,
                          decorrelated_in_test=spec.confounder_flip_rate > 0.0)


def _sparse_positive_unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.dirichlet(np.full(dim, 0.3))
    return v / np.linalg.norm(v)


def class_signatures(spec: SceneSpec) -> np.ndarray:
    """Signature vectors for all M+K classes, shape (M+K, d).

    Signatures occupy the causal channels only (zero on confounded ones) and
    stay in the non-negative orthant up to the small rotation leakage, which
    keeps downstream LeakyReLU propagation close to linear.  Base signatures
    are re-drawn (bounded retries) until they are mutually well separated.
    """
    plan = confounder_plan(spec)
    causal = [i for i in range(spec.dim) if i not in plan.channels]
    d_c = len(causal)
    rng = stream(spec.seed, "signatures")
    base = np.zeros((spec.num_base, d_c))
    for i in range(spec.num_base):
        best, best_score = None, np.inf
        for _ in range(200):
            cand = _sparse_positive_unit(rng, d_c)
            score = max((float(cand @ base[j]) for j in range(i)), default=-1.0)
            if score < best_score:
                best, best_score = cand, score
            if score < 0.45:
                break
        base[i] = best
    novel = np.zeros((spec.num_novel, d_c))
    for j, der in enumerate(spec.novel_derivation):
        parent = base[der.parent]
        u = np.abs(rng.normal(size=d_c))
        u_perp = u - (u @ parent) * parent
        norm = np.linalg.norm(u_perp)
        if norm < 1e-12:
            u_perp = np.eye(d_c)[0] - parent[0] * parent
            norm = np.linalg.norm(u_perp)
        u_perp /= norm
        rotated = math.cos(der.angle) * parent + math.sin(der.angle) * u_perp
        v = np.abs(rng.normal(size=d_c))
        v /= np.linalg.norm(v)
        novel[j] = rotated + der.shift * v
    out = np.zeros((spec.num_base + spec.num_novel, spec.dim))
    out[:spec.num_base, causal] = base
    out[spec.num_base:, causal] = novel
    return out


def shortcut_patterns(spec: SceneSpec) -> np.ndarray:
    """Per-class unit patterns on the confounded channels, shape (M+K, n_conf)."""
    plan = confounder_plan(spec)
    rng = stream(spec.seed, "shortcut-patterns")
    pats = rng.normal(size=(spec.num_base + spec.num_novel, len(plan.channels)))
    pats /= np.linalg.norm(pats, axis=1, keepdims=True)
    return pats


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _balanced_labels(rng: np.random.Generator, points: int, classes: int) -> np.ndarray:
    base_count = points // classes
    counts = np.full(classes, base_count, dtype=np.int64)
    counts[: points - base_count * classes] += 1
    labels = np.repeat(np.arange(classes, dtype=np.int64), counts)
    return rng.permutation(labels)


def generate_scene(spec: SceneSpec, scene_seed: int, split: str = "train") -> PointScene:
    """One deterministic scene for (spec.seed, scene_seed, split)."""
    if split not in SPLITS:
        raise DataError(f"unknown split tag {split!r}")
    plan = confounder_plan(spec)
    conf = list(plan.channels)
    causal = [i for i in range(spec.dim) if i not in plan.channels]
    sigs = class_signatures(spec)
    patterns = shortcut_patterns(spec)
    total = spec.num_base + spec.num_novel
    rng = stream(spec.seed, "scene", split, scene_seed)

    labels = _balanced_labels(rng, spec.points, total)
    attrs = np.zeros((spec.points, spec.dim))
    attrs[:, causal] = sigs[labels][:, causal] \
        + rng.normal(0.0, spec.noise_sigma, size=(spec.points, len(causal)))
    attrs[:, conf] = rng.normal(0.0, spec.shortcut_noise,
                                size=(spec.points, len(conf)))

    # tag frequency: mildly skewed by class parity in train, flat in test
    if split == "train":
        parity = (labels % 2) * 2 - 1
        p_tag = 0.5 + spec.tag_skew * spec.confounder_strength * parity
    else:
        p_tag = np.full(spec.points, 0.5)
    tags = (rng.random(spec.points) < p_tag).astype(np.int64)

    # shortcut pattern: own class in train; resampled per flip_rate in test
    pattern_class = labels.copy()
    if split == "test" and spec.confounder_flip_rate > 0.0:
        resample = rng.random(spec.points) < spec.confounder_flip_rate
        pattern_class[resample] = rng.integers(0, total, size=int(resample.sum()))
    tagged = tags == 1
    attrs[np.ix_(tagged, conf)] += \
        spec.confounder_strength * patterns[pattern_class[tagged]]

    base_labels = np.where(labels < spec.num_base, labels, -1)
    novel_hidden = np.where(labels >= spec.num_base, labels - spec.num_base, -1)
    return PointScene(attrs=attrs, base_labels=base_labels,
                      novel_labels_hidden=novel_hidden, confounder_tags=tags,
                      split=split, scene_seed=int(scene_seed),
                      spec_hash=spec_hash(spec))


def generate_dataset(spec: SceneSpec, n_train: int, n_test: int
                     ) -> tuple[list[PointScene], list[PointScene]]:
    """Train/test scene lists; scene seeds derive from spec.seed via splitmix."""
    if n_train < 1 or n_test < 1:
        raise ParameterError("need at least one scene per split")
    train = [generate_scene(spec, derive_seed(spec.seed, "train-scene", i), "train")
             for i in range(n_train)]
    test = [generate_scene(spec, derive_seed(spec.seed, "test-scene", i), "test")
            for i in range(n_test)]
    return train, test


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def scene_to_doc(scene: PointScene) -> dict:
    points = []
    for i in range(scene.num_points):
        b = int(scene.base_labels[i])
        nv = int(scene.novel_labels_hidden[i])
        points.append({
            "attrs": [float(x) for x in scene.attrs[i]],
            "base_label": b if b >= 0 else None,
            "novel_label_hidden": nv if nv >= 0 else None,
            "confounder_tag": int(scene.confounder_tags[i]),
            "split": scene.split,
        })
    return {"spec_hash": scene.spec_hash, "seed": scene.scene_seed,
            "points": points}


def scene_from_doc(doc: dict) -> PointScene:
    try:
        pts = doc["points"]
        attrs = np.array([p["attrs"] for p in pts], dtype=np.float64)
        base = np.array([-1 if p["base_label"] is None else p["base_label"]
                         for p in pts], dtype=np.int64)
        novel = np.array([-1 if p["novel_label_hidden"] is None
                          else p["novel_label_hidden"] for p in pts], dtype=np.int64)
        tags = np.array([p["confounder_tag"] for p in pts], dtype=np.int64)
        split = pts[0]["split"] if pts else "train"
        return PointScene(attrs=attrs, base_labels=base,
                          novel_labels_hidden=novel, confounder_tags=tags,
                          split=split, scene_seed=int(doc["seed"]),
                          spec_hash=str(doc["spec_hash"]))
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise DataError(f"malformed scene document: {exc}") from exc


def save_scene(path, scene: PointScene) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_doc(scene), fh)
        fh.write("\n")


def load_scene(path) -> PointScene:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(
            f"scene file {path}: parse error at byte offset {exc.pos}") from exc
    return scene_from_doc(doc)


# convenience views used throughout the pipeline -----------------------------

def base_points(scene: PointScene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(attrs, labels, tags) restricted to labeled base points."""
    mask = scene.base_labels >= 0
    return scene.attrs[mask], scene.base_labels[mask], scene.confounder_tags[mask]


def novel_points(scene: PointScene) -> tuple[np.ndarray, np.ndarray]:
    """(attrs, hidden labels) restricted to novel points."""
    mask = scene.novel_labels_hidden >= 0
    return scene.attrs[mask], scene.novel_labels_hidden[mask]
