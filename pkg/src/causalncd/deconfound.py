"""Deconfounded base-class representation learning.

A small extractor MLP is trained on labeled base points under a min-max
objective: minimize classification loss while maximizing the loss of an
adversary that tries to read the scene confounder tag out of the features.
The two networks take alternating optimizer steps.

The inner maximization is handled twice over.  An MLP adversary takes
gradient steps on frozen features and serves as the measurement instrument
(its held-out accuracy is how deconfounding is judged).  The pressure on
the extractor, however, comes from an exact inner solve: per batch and per
base class, the optimal L2-regularized linear tag predictor is computed in
closed form (Newton on a convex problem) and the extractor ascends that
predictor's cross entropy with the coefficients held fixed.  At the inner
optimum the coefficient gradient vanishes, so treating them as constants
still yields the exact gradient of the inner-max value.  The per-class
conditioning matters: a tag that is readable only conditioned on the class
is invisible to any single linear probe fit across classes, yet an MLP
recovers it by routing on class first, so each class gets its own probe.

On top of the learned features, base-class prototypes are refined by
alternating soft similarity assignments with weighted-mean updates, and a
matching loss ties features to their prototypes during training.

All updates run on the package's own reverse-mode tape; randomness comes
from named streams so that disabling one component never perturbs another.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (DataError, DegenerateInputError, ParameterError,
                     UsageError)
from .optim import OptimState, decayed_lr, init_optim, optim_step
from .rng import stream
from .scenes import PointScene, base_points

PROB_CLAMP = 1e-7


@dataclass
class FeatureMatrix:
    """Extracted features plus the role of the points they came from."""

    data: np.ndarray
    role: str  # "base" | "novel"

    def __post_init__(self) -> None:
        if self.role not in ("base", "novel"):
            raise DataError(f"unknown feature role {self.role!r}")
        if self.data.ndim != 2:
            raise UsageError("feature matrix must be 2-D")


def _data(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.data
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int,
                 name: str) -> tuple[Tensor, Tensor]:
    w = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)),
               requires_grad=True, name=f"{name}.w")
    b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b")
    return w, b


@dataclass
class ExtractorParams:
    """d_raw -> hidden -> d feature map with a d -> M classification head.

    ``center`` (a running mean of the pre-centered training features, not a
    learned parameter) is subtracted from the map's output.  Prototype
    geometry downstream is angular, and without centering the shared offset
    of the features is an uncontrolled nuisance direction that cosine
    similarity is blind to during training but not at prototype time.

    The head is bias-free for the same reason: with per-class biases the
    cross entropy is satisfiable by features collapsed onto a single line
    (the biases carve the line into class intervals), and collapsed class
    directions are invisible to every cosine-based stage downstream.
    Through-the-origin logits force the classes apart in angle.
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w_head: Tensor
    center: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.center is None:
            self.center = np.zeros(self.w2.shape[1])

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.w_head]

    def features(self, x) -> Tensor:
        xt = x if isinstance(x, Tensor) else Tensor(_data(x))
        h = (xt @ self.w1 + self.b1).tanh()
        return h @ self.w2 + self.b2 - Tensor(self.center)

    def logits_from(self, feats: Tensor) -> Tensor:
        return feats @ self.w_head

    def classify(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            logits = self.logits_from(self.features(x))
        return np.argmax(logits.data, axis=1)


@dataclass
class AdversaryParams:
    """d -> hidden -> 1 tag predictor with a sigmoid output."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, z) -> Tensor:
        zt = z if isinstance(z, Tensor) else Tensor(_data(z))
        h = (zt @ self.w1 + self.b1).tanh()
        return (h @ self.w2 + self.b2).sigmoid().reshape(-1)


def init_extractor(d_raw: int, hidden: int, d_out: int, num_classes: int,
                   rng: np.random.Generator) -> ExtractorParams:
    if hidden < d_out:
        raise ParameterError("extractor hidden width must be at least d")
    w1, b1 = _linear_init(rng, d_raw, hidden, "ext1")
    w2, b2 = _linear_init(rng, hidden, d_out, "ext2")
    wh, _ = _linear_init(rng, d_out, num_classes, "head")
    return ExtractorParams(w1, b1, w2, b2, wh)


def init_adversary(d_in: int, hidden: int, rng: np.random.Generator) -> AdversaryParams:
    w1, b1 = _linear_init(rng, d_in, hidden, "adv1")
    w2, b2 = _linear_init(rng, hidden, 1, "adv2")
    return AdversaryParams(w1, b1, w2, b2)


def extract_features(extractor: ExtractorParams, scenes: list[PointScene],
                     role: str) -> FeatureMatrix:
    """Features of all base (labeled) or novel points across scenes."""
    blocks = []
    for scene in scenes:
        mask = (scene.base_labels >= 0) if role == "base" \
            else (scene.novel_labels_hidden >= 0)
        if not np.any(mask):
            continue
        with ad.no_grad():
            blocks.append(extractor.features(scene.attrs[mask]).data)
    if not blocks:
        raise UsageError(f"no {role} points found in the given scenes")
    return FeatureMatrix(np.vstack(blocks), role)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def classification_loss(logits, labels) -> Tensor:
    """Mean cross entropy of softmax(logits) against integer labels."""
    lt = logits if isinstance(logits, Tensor) else Tensor(logits)
    if lt.ndim != 2 or lt.shape[0] == 0:
        raise UsageError("classification_loss expects a non-empty (n, M) matrix")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (lt.shape[0],):
        raise UsageError("one label per logit row required")
    if y.min() < 0 or y.max() >= lt.shape[1]:
        raise DataError("label outside [0, M)")
    shifted = lt - lt.data.max(axis=1, keepdims=True)
    lse = shifted.exp().sum(axis=1, keepdims=True).log()
    log_probs = shifted - lse
    return -log_probs.gather_rows(y).mean()


def adversarial_loss(preds, tags) -> Tensor:
    """Binary cross entropy of tag probabilities, clamped at 1e-7."""
    pt = preds if isinstance(preds, Tensor) else Tensor(preds)
    pt = pt.reshape(-1)
    u = np.asarray(tags, dtype=np.float64).reshape(-1)
    if pt.shape != u.shape or pt.shape[0] == 0:
        raise UsageError("adversarial_loss expects matching non-empty shapes")
    if not np.all(np.isin(u, (0.0, 1.0))):
        raise DataError("confounder tags must be binary")
    if np.any(pt.data < 0.0) or np.any(pt.data > 1.0):
        raise DataError("adversary outputs must be probabilities")
    p = pt.clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
    likelihood = p * u + (1.0 - p) * (1.0 - u)
    return -likelihood.log().mean()


def solve_tag_logistic(feats: np.ndarray, tags, alpha: float = 1e-2,
                       iters: int = 6) -> np.ndarray:
    """Exact optimum of the L2-regularized logistic tag predictor.

    Returns the (d+1,) weight vector (bias last) minimizing
    mean BCE(sigmoid(z @ w[:-1] + w[-1]), tags) + (alpha/2)·||w||².
    Strictly convex for alpha > 0, so a handful of Newton steps lands on
    the optimum to machine precision at these scales.
    """
    z = np.asarray(feats, dtype=np.float64)
    t = np.asarray(tags, dtype=np.float64).reshape(-1)
    if z.ndim != 2 or z.shape[0] != t.shape[0] or z.shape[0] == 0:
        raise UsageError("solve_tag_logistic expects (n, d) features, n tags")
    if not np.all(np.isin(t, (0.0, 1.0))):
        raise DataError("confounder tags must be binary")
    if alpha <= 0.0:
        raise ParameterError("ridge strength must be positive")
    n, d = z.shape
    x = np.hstack([z, np.ones((n, 1))])
    w = np.zeros(d + 1)
    eye = np.eye(d + 1)
    for _ in range(iters):
        s = np.clip(x @ w, -35.0, 35.0)
        p = 1.0 / (1.0 + np.exp(-s))
        grad = x.T @ (p - t) / n + alpha * w
        curve = np.clip(p * (1.0 - p), 1e-6, None)
        hess = (x.T * curve) @ x / n + alpha * eye
        w = w - np.linalg.solve(hess, grad)
    return w


def _masked_adversarial_loss(preds: Tensor, tags: np.ndarray,
                             mask: np.ndarray) -> Tensor:
    """Mean BCE over the masked subset only (mask is 0/1 per point)."""
    p = preds.reshape(-1).clip(PROB_CLAMP, 1.0 - PROB_CLAMP)
    u = np.asarray(tags, dtype=np.float64).reshape(-1)
    likelihood = p * u + (1.0 - p) * (1.0 - u)
    return -(likelihood.log() * mask).sum() * (1.0 / mask.sum())


# ---------------------------------------------------------------------------
# prototypes
# ---------------------------------------------------------------------------

@dataclass
class PrototypeSet:
    vectors: np.ndarray  # (M, d)
    iteration: int = 0

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2:
            raise UsageError("prototype set must be a 2-D matrix")
        if np.any(np.linalg.norm(self.vectors, axis=1) == 0.0):
            raise DegenerateInputError("prototype with zero norm")


def similarity_weights(feats, prototypes) -> np.ndarray:
    """Soft assignment of each feature row to prototypes.

    Row j is softmax over i of cosine(z_j, c_i); rows sum to one and every
    entry is strictly inside (0, 1).
    """
    z = _data(feats)
    c = prototypes.vectors if isinstance(prototypes, PrototypeSet) else _data(prototypes)
    if z.ndim != 2 or c.ndim != 2 or z.shape[1] != c.shape[1]:
        raise UsageError("similarity_weights expects (P, d) features and (M, d) prototypes")
    zn = np.linalg.norm(z, axis=1, keepdims=True)
    cn = np.linalg.norm(c, axis=1, keepdims=True)
    if np.any(zn < 1e-12) or np.any(cn < 1e-12):
        raise DegenerateInputError("zero-norm row in similarity_weights input")
    sims = (z / zn) @ (c / cn).T
    return ad.softmax(sims, axis=1)


def update_prototypes(feats, prototypes: PrototypeSet, weights: np.ndarray) -> PrototypeSet:
    """Weighted-mean prototype update; each output row is a convex
    combination of feature rows, hence inside their per-dimension hull."""
    z = _data(feats)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (z.shape[0], prototypes.vectors.shape[0]):
        raise UsageError("weight matrix shape mismatch")
    col = w.sum(axis=0)
    if np.any(col < 1e-12):
        raise DegenerateInputError("soft assignment column collapsed to zero")
    new = (w.T @ z) / col[:, None]
    return PrototypeSet(vectors=new, iteration=prototypes.iteration + 1)


def prototype_matching_loss(feats, prototypes, weights, lam: float) -> Tensor:
    """Negative weighted feature-prototype cosine plus a norm penalty."""
    if lam < 0.0:
        raise ParameterError("prototype norm penalty must be non-negative")
    zt = feats if isinstance(feats, Tensor) else Tensor(_data(feats))
    craw = prototypes.vectors if isinstance(prototypes, PrototypeSet) else prototypes
    ct = craw if isinstance(craw, Tensor) else Tensor(_data(craw))
    w = np.asarray(_data(weights), dtype=np.float64)
    if w.shape != (zt.shape[0], ct.shape[0]):
        raise UsageError("weight matrix shape mismatch")
    sims = ad.cosine_matrix(zt, ct)
    return -(Tensor(w) * sims).sum() + lam * (ct * ct).sum()


def class_mean_prototypes(feats, labels, num_classes: int) -> PrototypeSet:
    z = _data(feats)
    y = np.asarray(labels, dtype=np.int64)
    vectors = np.zeros((num_classes, z.shape[1]))
    for c in range(num_classes):
        mask = y == c
        if not np.any(mask):
            raise DegenerateInputError(f"class {c} has no labeled points")
        vectors[c] = z[mask].mean(axis=0)
    return PrototypeSet(vectors=vectors, iteration=0)


def refine_prototypes(feats, prototypes: PrototypeSet, tol: float = 1e-6,
                      max_iters: int = 200) -> tuple[PrototypeSet, list[float], bool]:
    """Alternate soft assignment and weighted-mean updates until the largest
    prototype movement (row L2) drops below ``tol``.  Past ``max_iters`` a
    warning is emitted and the last iterate is returned."""
    current = prototypes
    trace: list[float] = []
    for _ in range(max_iters):
        w = similarity_weights(feats, current)
        nxt = update_prototypes(feats, current, w)
        movement = float(np.max(np.linalg.norm(nxt.vectors - current.vectors, axis=1)))
        trace.append(movement)
        current = nxt
        if movement < tol:
            return current, trace, True
    warnings.warn("prototype refinement hit the iteration cap before "
                  f"movement < {tol}", RuntimeWarning)
    return current, trace, False


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class CrpConfig:
    feature_dim: int
    num_classes: int
    hidden: int = 32
    adversary_hidden: int = 32
    epochs: int = 15
    lr: float = 1e-3
    lr_floor: float = 1e-5
    lr_decay_every: int = 5
    weight_decay: float = 0.0
    lambda_adv: float = 0.5
    lambda_adv_warmup_frac: float = 0.0
    # end value of a linear schedule for the adversarial weight;  None holds
    # lambda_adv flat for the whole run
    lambda_adv_max: float | None = None
    lambda_reg: float = 0.02
    # inner-max handling: MLP adversary steps per extractor step, its
    # learning-rate multiple, and the ridge/iteration budget of the exact
    # per-class linear solve that drives the extractor
    adversary_steps: int = 1
    adversary_lr_scale: float = 1.0
    adversary_weight_decay: float = 0.0
    envelope_alpha: float = 1e-2
    envelope_iters: int = 6
    proto_warmup_epochs: int = 1
    proto_loss_weight: float = 1.0
    use_adversary: bool = True
    use_proto_loss: bool = True
    proto_tol: float = 1e-6
    proto_max_iters: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ParameterError("need at least one training epoch")
        if self.lambda_adv < 0.0:
            raise ParameterError("lambda_adv must be non-negative")
        if not (0.0 <= self.lambda_adv_warmup_frac <= 1.0):
            raise ParameterError("warm-up fraction must lie in [0, 1]")
        if self.lambda_adv_max is not None and self.lambda_adv_max < 0.0:
            raise ParameterError("lambda_adv_max must be non-negative")
        if self.adversary_steps < 1:
            raise ParameterError("need at least one adversary step")
        if self.adversary_lr_scale <= 0.0:
            raise ParameterError("adversary lr scale must be positive")
        if self.envelope_alpha <= 0.0 or self.envelope_iters < 1:
            raise ParameterError("bad inner-solve settings")


@dataclass
class LossReport:
    """Per-step (or per-epoch average) loss summary.

    ``l_adv`` is the MLP adversary's own cross entropy on the current
    features (NaN when no adversary runs); ``l_total`` is the value of the
    objective the extractor actually stepped on.
    """

    l_cls: float
    l_adv: float
    l_pro: float
    l_total: float
    epoch: int = 0

    def __post_init__(self) -> None:
        if self.l_cls < 0.0 or (not math.isnan(self.l_adv) and self.l_adv < 0.0):
            raise DataError("cross-entropy losses cannot be negative")


def conditional_tag_probes(z_const: np.ndarray, labels: np.ndarray,
                           tags: np.ndarray, num_classes: int,
                           alpha: float = 1e-2, iters: int = 6,
                           min_points: int = 8
                           ) -> list[tuple[np.ndarray, np.ndarray]]:
    """Optimal linear tag predictor per base class on frozen features.

    Returns (class mask, optimal weights) pairs; classes whose batch slice
    is too small or single-tagged are skipped.  Deterministic given inputs.
    """
    probes = []
    for c in range(num_classes):
        mask = labels == c
        t_c = tags[mask]
        if t_c.size < min_points or t_c.min() == t_c.max():
            continue
        w = solve_tag_logistic(z_const[mask], t_c, alpha=alpha, iters=iters)
        probes.append((mask.astype(np.float64), w))
    return probes


def train_step(batch: tuple[np.ndarray, np.ndarray, np.ndarray],
               extractor: ExtractorParams, adversary: AdversaryParams | None,
               opt_ext: OptimState, opt_adv: OptimState | None,
               cfg: CrpConfig, *, epoch: int = 0,
               lam_adv: float | None = None,
               prototypes: PrototypeSet | None = None) -> LossReport:
    """One alternating min-max step on a single scene batch.

    (a) the adversary minimizes its tag cross entropy on frozen features
        (``cfg.adversary_steps`` optimizer steps);
    (b) the extractor minimizes classification loss minus ``lam_adv`` times
        the inner-max adversarial loss, plus the prototype matching loss
        once prototypes are active.  The inner max is evaluated exactly via
        the per-class linear solves (coefficients frozen; see module notes).

    ``lam_adv`` defaults to the schedule value for ``epoch``.
    """
    x, labels, tags = batch
    if x.shape[0] == 0:
        raise UsageError("scene batch has no labeled base points")
    lam = _effective_lambda(cfg, epoch) if lam_adv is None else lam_adv

    z_const: np.ndarray | None = None
    if adversary is not None or lam != 0.0:
        with ad.no_grad():
            z_const = extractor.features(x).data

    # (a) adversary steps on detached features
    if adversary is not None:
        if opt_adv is None:
            raise UsageError("adversary optimizer state missing")
        zt = Tensor(z_const)
        for _ in range(cfg.adversary_steps):
            l_adv_a = adversarial_loss(adversary.forward(zt), tags)
            grads = ad.gradients(l_adv_a, adversary.parameters())
            optim_step(adversary.parameters(), grads, opt_adv)

    # (b) extractor step against the frozen inner maximizer
    feats = extractor.features(Tensor(x))
    logits = extractor.logits_from(feats)
    l_cls = classification_loss(logits, labels)
    objective = l_cls
    if lam != 0.0:
        probes = conditional_tag_probes(z_const, labels, tags,
                                        cfg.num_classes,
                                        alpha=cfg.envelope_alpha,
                                        iters=cfg.envelope_iters)
        if probes:
            terms = []
            for mask, w in probes:
                wt = Tensor(w[:-1].reshape(-1, 1))
                bt = Tensor(w[-1:])
                preds = (feats @ wt + bt).sigmoid()
                terms.append(_masked_adversarial_loss(preds, tags, mask))
            total = terms[0]
            for term in terms[1:]:
                total = total + term
            objective = objective - (lam / len(terms)) * total
    l_pro_val = 0.0
    if prototypes is not None:
        # base points carry labels here, so the matching weights are the
        # one-hot assignments; soft weights would pull every point toward
        # the other classes' prototypes too (the softmax over cosines in
        # [-1, 1] never puts less than ~0.12 on a wrong prototype) and that
        # cross-pull collapses the angular separation CE builds
        w = np.eye(prototypes.vectors.shape[0])[labels]
        l_pro = prototype_matching_loss(feats, Tensor(prototypes.vectors), w,
                                        cfg.lambda_reg)
        l_pro_val = float(l_pro.data)
        # the matching loss sums over points while the cross entropies are
        # per-point means; average it so the three terms share one scale
        objective = objective + (cfg.proto_loss_weight / x.shape[0]) * l_pro
    grads = ad.gradients(objective, extractor.parameters())
    optim_step(extractor.parameters(), grads, opt_ext)

    l_adv_val = math.nan
    if adversary is not None:
        with ad.no_grad():
            post = extractor.features(x)
            l_adv_val = float(adversarial_loss(adversary.forward(post), tags).data)
    return LossReport(l_cls=float(l_cls.data), l_adv=l_adv_val,
                      l_pro=l_pro_val, l_total=float(objective.data),
                      epoch=epoch)


@dataclass
class CrpResult:
    extractor: ExtractorParams
    adversary: AdversaryParams | None
    prototypes: PrototypeSet
    trace: list[LossReport] = field(default_factory=list)
    proto_trace: list[float] = field(default_factory=list)
    proto_converged: bool = True


def _scene_batches(scenes: list[PointScene]) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    batches = []
    for scene in scenes:
        x, y, t = base_points(scene)
        if x.shape[0] == 0:
            raise UsageError("scene without labeled base points")
        batches.append((x, y, t))
    return batches


def _effective_lambda(cfg: CrpConfig, epoch: int) -> float:
    """Adversarial weight schedule: optional warm-up from zero, then either
    a flat hold at ``lambda_adv`` or a linear ramp to ``lambda_adv_max``.
    A zero base weight disables the term entirely regardless of schedule."""
    if not cfg.use_adversary or cfg.lambda_adv == 0.0:
        return 0.0
    warm = int(round(cfg.lambda_adv_warmup_frac * cfg.epochs))
    if warm > 0 and epoch < warm:
        return cfg.lambda_adv * (epoch + 1) / warm
    if cfg.lambda_adv_max is None:
        return cfg.lambda_adv
    span = max(1, cfg.epochs - 1 - warm)
    frac = min(1.0, (epoch - warm) / span)
    return cfg.lambda_adv + (cfg.lambda_adv_max - cfg.lambda_adv) * frac


def fit_crp(train_scenes: list[PointScene], cfg: CrpConfig) -> CrpResult:
    """Full deconfounded-representation training loop.

    Epoch 0..warmup-1 train the classifier (and adversary) alone.  At the
    end of the warm-up the prototypes are initialized to class means of the
    current features; from then on the matching loss joins the extractor
    objective under the supervised one-hot weights, and the prototypes take
    the matching weighted-mean update each epoch (with one-hot weights that
    update IS the per-class feature mean).  The soft assignment/update
    alternation, which needs no labels, runs after training on frozen
    features until convergence.
    """
    batches = _scene_batches(train_scenes)
    d_raw = batches[0][0].shape[1]
    extractor = init_extractor(d_raw, cfg.hidden, cfg.feature_dim,
                               cfg.num_classes, stream(cfg.seed, "extractor-init"))
    adversary = None
    opt_adv = None
    if cfg.use_adversary:
        adversary = init_adversary(cfg.feature_dim, cfg.adversary_hidden,
                                   stream(cfg.seed, "adversary-init"))
        opt_adv = init_optim(adversary.parameters(),
                             cfg.lr * cfg.adversary_lr_scale,
                             weight_decay=cfg.adversary_weight_decay)
    opt_ext = init_optim(extractor.parameters(), cfg.lr,
                         weight_decay=cfg.weight_decay)

    all_x = np.vstack([b[0] for b in batches])
    all_y = np.concatenate([b[1] for b in batches])
    prototypes: PrototypeSet | None = None
    trace: list[LossReport] = []
    for epoch in range(cfg.epochs):
        lr = decayed_lr(cfg.lr, epoch, cfg.lr_decay_every, floor=cfg.lr_floor)
        opt_ext.lr = lr
        if opt_adv is not None:
            opt_adv.lr = lr * cfg.adversary_lr_scale
        if (cfg.use_proto_loss and prototypes is None
                and epoch >= cfg.proto_warmup_epochs):
            with ad.no_grad():
                feats = extractor.features(all_x).data
            prototypes = class_mean_prototypes(feats, all_y, cfg.num_classes)
        reports = [train_step(batch, extractor, adversary, opt_ext, opt_adv,
                              cfg, epoch=epoch, prototypes=prototypes)
                   for batch in batches]
        trace.append(LossReport(
            l_cls=float(np.mean([r.l_cls for r in reports])),
            l_adv=float(np.mean([r.l_adv for r in reports])),
            l_pro=float(np.mean([r.l_pro for r in reports])),
            l_total=float(np.mean([r.l_total for r in reports])),
            epoch=epoch))
        # re-zero the feature mean; the classification head absorbs the
        # shift and prototype geometry stays purely angular
        with ad.no_grad():
            extractor.center = extractor.center \
                + extractor.features(all_x).data.mean(axis=0)
        if prototypes is not None:
            # weighted-mean update under the supervised one-hot weights;
            # the soft label-free alternation runs after training
            with ad.no_grad():
                feats = extractor.features(all_x).data
            prototypes = PrototypeSet(
                class_mean_prototypes(feats, all_y, cfg.num_classes).vectors,
                iteration=prototypes.iteration + 1)

    with ad.no_grad():
        feats = extractor.features(all_x).data
    if prototypes is None:
        prototypes = class_mean_prototypes(feats, all_y, cfg.num_classes)
    prototypes, proto_trace, converged = refine_prototypes(
        feats, prototypes, tol=cfg.proto_tol, max_iters=cfg.proto_max_iters)
    return CrpResult(extractor=extractor, adversary=adversary,
                     prototypes=prototypes, trace=trace,
                     proto_trace=proto_trace, proto_converged=converged)


# ---------------------------------------------------------------------------
# confounder probing
# ---------------------------------------------------------------------------

def adversary_accuracy(extractor: ExtractorParams, adversary: AdversaryParams,
                       scenes: list[PointScene]) -> tuple[float, float]:
    """Thresholded tag accuracy of the trained adversary on base points.

    Returns (accuracy, chance) where chance is the majority-tag rate of the
    given scenes.  This scores the adversary that trained alongside the
    extractor; for a freshly fit probe see probe_confounder_accuracy.
    """
    zs, ts = [], []
    for scene in scenes:
        x, _, t = base_points(scene)
        with ad.no_grad():
            zs.append(extractor.features(x).data)
        ts.append(t)
    z = np.vstack(zs)
    t = np.concatenate(ts).astype(np.float64)
    with ad.no_grad():
        preds = adversary.forward(z).data
    accuracy = float(((preds >= 0.5).astype(np.float64) == t).mean())
    chance = float(max(t.mean(), 1.0 - t.mean()))
    return accuracy, chance


def probe_confounder_accuracy(extractor: ExtractorParams,
                              fit_scenes: list[PointScene],
                              heldout_scenes: list[PointScene],
                              seed: int, steps: int = 200, lr: float = 1e-2,
                              hidden: int = 32, max_points: int = 16384
                              ) -> tuple[float, float]:
    """Tag decodability of the frozen features.

    A fresh adversary is trained full-batch on base-point features of
    ``fit_scenes`` and scored on ``heldout_scenes``.  Returns
    (held-out accuracy, held-out chance rate).
    """
    def collect(scene_list):
        zs, ts = [], []
        for scene in scene_list:
            x, _, t = base_points(scene)
            with ad.no_grad():
                zs.append(extractor.features(x).data)
            ts.append(t)
        return np.vstack(zs), np.concatenate(ts).astype(np.float64)

    z_fit, t_fit = collect(fit_scenes)
    if z_fit.shape[0] > max_points:
        keep = stream(seed, "probe-subsample").permutation(z_fit.shape[0])[:max_points]
        z_fit, t_fit = z_fit[keep], t_fit[keep]
    z_out, t_out = collect(heldout_scenes)
    probe = init_adversary(z_fit.shape[1], hidden, stream(seed, "probe-init"))
    opt = init_optim(probe.parameters(), lr)
    zt = Tensor(z_fit)
    for _ in range(steps):
        loss = adversarial_loss(probe.forward(zt), t_fit)
        optim_step(probe.parameters(),
                   ad.gradients(loss, probe.parameters()), opt)
    with ad.no_grad():
        preds = probe.forward(z_out).data
    accuracy = float(((preds >= 0.5).astype(np.float64) == t_out).mean())
    chance = float(max(t_out.mean(), 1.0 - t_out.mean()))
    return accuracy, chance
