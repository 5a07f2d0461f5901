"""Run configuration: one flat key=value file drives the whole pipeline.

Keys carry dotted section prefixes (scene., data., hyper., ablation.,
run.) and map one-to-one onto RunConfig fields.  Parsing and dumping are
inverse up to canonical formatting, and the config hash is a digest of the
canonical dump, so two configs hash equal iff every effective value is
equal.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .errors import ParameterError, UsageError
from .scenes import SceneSpec, default_derivation

ABLATION_ROWS = {
    "baseline": (False, False, False),
    "crp": (True, False, False),
    "crp-crg": (True, True, False),
    "full": (True, True, True),
}


@dataclass
class RunConfig:
    # scene geometry
    num_base: int = 4
    num_novel: int = 3
    points: int = 2048
    dim: int = 16
    confounder_strength: float = 0.9
    confounder_flip_rate: float = 1.0
    # high enough that novel cluster centroids are genuinely noisy: the
    # benchmark should exercise balanced transport and graph denoising, not
    # hand them already-separated clusters
    noise_sigma: float = 0.7
    tag_skew: float = 0.05
    shortcut_noise: float = 0.08
    derivation_angle: float = 0.5
    derivation_shift: float = 0.15
    # dataset size
    train_scenes: int = 40
    test_scenes: int = 10
    # optimization and model hyperparameters
    tau: float = 0.06
    lambda_reg: float = 0.02
    lambda_adv_init: float = 0.5
    theta_init: float = 0.5
    gcn_layers: int = 3
    leaky_slope: float = 0.01
    lr: float = 1e-3
    lr_floor: float = 1e-5
    lr_decay_every: int = 5
    epochs: int = 60
    sinkhorn_epsilon: float = 0.05
    hidden: int = 32
    adversary_hidden: int = 32
    adversary_steps: int = 1
    adversary_lr_scale: float = 1.0
    adversary_weight_decay: float = 0.0
    lambda_adv_max: float | None = None
    graph_steps: int = 150
    graph_lr: float = 5e-2
    # ablation flags
    use_crp: bool = True
    use_crg: bool = True
    use_gcpl: bool = True
    # run identity
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self) -> None:
        for name in ("tau", "lambda_reg", "lr", "sinkhorn_epsilon"):
            if not (getattr(self, name) > 0.0):
                raise ParameterError(f"{name} must be positive")
        if not (0.0 < self.theta_init < 1.0):
            raise ParameterError("theta_init must lie strictly inside (0, 1)")
        if self.gcn_layers < 1 or self.epochs < 1:
            raise ParameterError("gcn_layers and epochs must be at least 1")
        if self.train_scenes < 1 or self.test_scenes < 1:
            raise ParameterError("need at least one scene per split")
        if self.lambda_adv_init < 0.0:
            raise ParameterError("lambda_adv_init must be nonnegative")
        if self.use_gcpl and not self.use_crg:
            raise ParameterError(
                "use_gcpl requires use_crg: propagation consumes the graph")

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(
            num_base=self.num_base, num_novel=self.num_novel,
            points=self.points, dim=self.dim,
            confounder_strength=self.confounder_strength,
            confounder_flip_rate=self.confounder_flip_rate,
            novel_derivation=default_derivation(
                self.num_base, self.num_novel,
                angle=self.derivation_angle, shift=self.derivation_shift),
            noise_sigma=self.noise_sigma, seed=self.seed,
            tag_skew=self.tag_skew, shortcut_noise=self.shortcut_noise)

    def row_name(self) -> str:
        flags = (self.use_crp, self.use_crg, self.use_gcpl)
        for name, combo in ABLATION_ROWS.items():
            if combo == flags:
                return name
        return "custom"


def row_config(cfg: RunConfig, row: str) -> RunConfig:
    if row not in ABLATION_ROWS:
        raise UsageError(f"unknown ablation row {row!r}; "
                         f"choose from {sorted(ABLATION_ROWS)}")
    crp, crg, gcpl = ABLATION_ROWS[row]
    return replace(cfg, use_crp=crp, use_crg=crg, use_gcpl=gcpl)


# ---------------------------------------------------------------------------
# flat key=value format
# ---------------------------------------------------------------------------

_SECTIONS = {
    "scene": ["num_base", "num_novel", "points", "dim",
              "confounder_strength", "confounder_flip_rate", "noise_sigma",
              "tag_skew", "shortcut_noise", "derivation_angle",
              "derivation_shift"],
    "data": ["train_scenes", "test_scenes"],
    "hyper": ["tau", "lambda_reg", "lambda_adv_init", "theta_init",
              "gcn_layers", "leaky_slope", "lr", "lr_floor",
              "lr_decay_every", "epochs", "sinkhorn_epsilon", "hidden",
              "adversary_hidden", "adversary_steps", "adversary_lr_scale",
              "adversary_weight_decay", "lambda_adv_max", "graph_steps",
              "graph_lr"],
    "ablation": ["use_crp", "use_crg", "use_gcpl"],
    "run": ["seed", "output_dir"],
}

_KEY_TO_FIELD = {f"{sec}.{name}": name
                 for sec, names in _SECTIONS.items() for name in names}


def _parse_value(field_name: str, raw: str):
    kind = {f.name: f.type for f in fields(RunConfig)}[field_name]
    raw = raw.strip()
    if field_name == "lambda_adv_max":
        return None if raw.lower() in ("", "none") else float(raw)
    if field_name == "output_dir":
        # "none" mirrors the canonical dump of an unset path; a directory
        # literally named none needs a qualified path like ./none
        return None if raw == "" or raw.lower() == "none" else raw
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    return float(raw)


def parse_config(text: str) -> RunConfig:
    """Parse the flat format; unknown keys and bad values name the line."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"line {lineno}: expected key=value, "
                             f"got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _KEY_TO_FIELD:
            raise UsageError(f"line {lineno}: unknown config key {key!r}")
        name = _KEY_TO_FIELD[key]
        if name in values:
            raise UsageError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[name] = _parse_value(name, raw)
        except ValueError as exc:
            raise UsageError(f"line {lineno}: bad value for {key!r}: {exc}") \
                from exc
    return RunConfig(**values)


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    """Canonical dump: fixed section and key order, one key per line."""
    lines = []
    for sec, names in _SECTIONS.items():
        for name in names:
            lines.append(f"{sec}.{name}={_format_value(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Short fingerprint of the computation a config describes.

    The output directory is excluded: where results land does not change
    what was computed, and runs of one experiment written to two places
    must carry the same hash."""
    text = "\n".join(line for line in dump_config(cfg).splitlines()
                     if not line.startswith("run.output_dir"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


# ---------------------------------------------------------------------------
# benchmark recipe
# ---------------------------------------------------------------------------

def benchmark_config(seed: int = 0, output_dir: str | None = None,
                     epochs: int = 12) -> RunConfig:
    """The default synthetic benchmark with the training recipe that
    reliably removes the confounder shortcut at this scale: a stronger,
    faster adversary (more steps per extractor step, higher lr, weight
    decay) and a ramped adversarial weight."""
    return RunConfig(seed=seed, output_dir=output_dir, epochs=epochs,
                     hidden=64, adversary_hidden=32,
                     adversary_steps=5, adversary_lr_scale=30.0,
                     adversary_weight_decay=1e-2, lambda_adv_max=3.0)
