"""Task and distillation objectives with analytic gradients.

Every loss returns a :class:`LossResult` whose ``grad_features`` has the shape
of its differentiable feature input. Teacher-side inputs are treated as
constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from svdkd.data_model import Modality, modality_pairs
from svdkd.errors import ArgumentError, DataError, MiningError
from svdkd.spectral import ProjectionBasis


@dataclass
class LossResult:
    value: float
    grad_features: np.ndarray
    grad_aux: np.ndarray | None = None
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LossWeights:
    task: float = 0.01
    cosine: float = 0.29
    pcm: float = 0.35
    fr: float = 0.35

    def __post_init__(self) -> None:
        vals = (self.task, self.cosine, self.pcm, self.fr)
        if any(v < 0 for v in vals):
            raise ArgumentError(f"loss weights must be nonnegative, got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ArgumentError(f"loss weights must sum to 1 (got {sum(vals):.12g})")

    def as_dict(self) -> dict:
        return {"task": self.task, "cosine": self.cosine, "pcm": self.pcm, "fr": self.fr}


# Loss-weight presets of the distillation ablation; "a" is the no-distillation baseline.
TABLE3_CONFIGS = {
    "a": LossWeights(1.0, 0.0, 0.0, 0.0),
    "b": LossWeights(0.01, 0.99, 0.0, 0.0),
    "c": LossWeights(0.01, 0.29, 0.0, 0.70),
    "d": LossWeights(0.01, 0.29, 0.70, 0.0),
    "e": LossWeights(0.01, 0.29, 0.35, 0.35),
}


@dataclass(frozen=True)
class TaskLossConfig:
    margin: float = 0.3
    tau: float = 0.02
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.margin < 0:
            raise ArgumentError(f"margin must be >= 0, got {self.margin}")
        if not self.tau > 0:
            raise ArgumentError(f"tau must be > 0, got {self.tau}")
        if not self.epsilon > 0:
            raise ArgumentError(f"epsilon must be > 0, got {self.epsilon}")


# ------------------------------------------------------------------ helpers


def _row_norms(X: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise DataError(f"{what} contains a zero-norm row")
    return norms


def _log_softmax(Z: np.ndarray) -> np.ndarray:
    # scipy.special.log_softmax is equivalent but its dispatch overhead dominates on tiny batches
    shifted = Z - Z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _normalize_backward(grad_hat: np.ndarray, X_hat: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. X/|X| (row-wise) back to X."""
    radial = np.sum(grad_hat * X_hat, axis=1, keepdims=True)
    return (grad_hat - X_hat * radial) / norms[:, None]


# --------------------------------------------------------------- task losses


def id_loss(logits: np.ndarray, labels: np.ndarray) -> LossResult:
    """Mean softmax cross-entropy; the gradient is w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    N, C = logits.shape
    if labels.shape != (N,) or np.any(labels < 0) or np.any(labels >= C):
        raise ArgumentError(f"labels must be {N} integers in [0, {C})")
    logp = _log_softmax(logits)
    rows = np.arange(N)
    value = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return LossResult(float(value), grad / N)


def _sq_dists(F: np.ndarray) -> np.ndarray:
    diff = F[:, None, :] - F[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def triplet_loss(features: np.ndarray, labels: np.ndarray, margin: float = 0.3) -> LossResult:
    """Batch-hard triplet loss on squared Euclidean distances.

    Per anchor the farthest same-identity row and the nearest other-identity
    row are mined; ties resolve to the lowest row index.
    """
    F = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if margin < 0:
        raise ArgumentError(f"margin must be >= 0, got {margin}")
    N = F.shape[0]
    D = _sq_dists(F)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(N, dtype=bool)
    neg_mask = ~same
    if not np.all(pos_mask.any(axis=1)) or not np.all(neg_mask.any(axis=1)):
        bad = np.flatnonzero(~(pos_mask.any(axis=1) & neg_mask.any(axis=1)))
        raise MiningError(f"anchors {bad.tolist()} lack a positive or a negative in the batch")
    p = np.argmax(np.where(pos_mask, D, -np.inf), axis=1)
    n = np.argmin(np.where(neg_mask, D, np.inf), axis=1)
    rows = np.arange(N)
    hinge = D[rows, p] - D[rows, n] + margin
    active = hinge > 0
    value = np.where(active, hinge, 0.0).sum() / N

    grad = np.zeros_like(F)
    a = rows[active]
    pa, na = p[active], n[active]
    to_p = F[a] - F[pa]
    to_n = F[a] - F[na]
    np.add.at(grad, a, 2.0 * (to_p - to_n))
    np.add.at(grad, pa, -2.0 * to_p)
    np.add.at(grad, na, 2.0 * to_n)
    return LossResult(float(value), grad / N, info={"active": int(active.sum())})


def sdm_pair_loss(
    F_m: np.ndarray,
    F_n: np.ndarray,
    labels_m: np.ndarray,
    labels_n: np.ndarray,
    cfg: TaskLossConfig = TaskLossConfig(),
) -> LossResult:
    """One direction (m -> n) of similarity-distribution matching.

    Returns gradients for both blocks: ``grad_features`` for ``F_m`` and
    ``grad_aux`` for ``F_n``.
    """
    if not cfg.tau > 0:
        raise ArgumentError("tau must be > 0")
    F_m = np.asarray(F_m, dtype=np.float64)
    F_n = np.asarray(F_n, dtype=np.float64)
    labels_m = np.asarray(labels_m)
    labels_n = np.asarray(labels_n)
    Y = (labels_m[:, None] == labels_n[None, :]).astype(np.float64)
    counts = Y.sum(axis=1)
    if np.any(counts == 0):
        raise ArgumentError("every query row needs at least one matching identity on the other side")
    norm_m = _row_norms(F_m, "F_m")
    norm_n = _row_norms(F_n, "F_n")
    Xm = F_m / norm_m[:, None]
    Xn = F_n / norm_n[:, None]
    S = Xm @ Xn.T
    Z = S / cfg.tau
    logp = _log_softmax(Z)
    P = np.exp(logp)
    Q = Y / counts[:, None]
    A = logp - np.log(Q + cfg.epsilon)
    per_row = np.sum(P * A, axis=1)
    Nm = F_m.shape[0]
    value = per_row.sum() / Nm

    dZ = P * (A - per_row[:, None]) / Nm
    dS = dZ / cfg.tau
    g_m = _normalize_backward(dS @ Xn, Xm, norm_m)
    g_n = _normalize_backward(dS.T @ Xm, Xn, norm_n)
    return LossResult(float(value), g_m, g_n)


def sdm_total(
    features: np.ndarray,
    labels: np.ndarray,
    modalities: np.ndarray,
    cfg: TaskLossConfig = TaskLossConfig(),
) -> LossResult:
    """Bidirectional SDM summed over every present modality pair.

    Query rows without a cross-modal match are dropped per direction. The
    number of directional terms is reported in ``info["terms"]``; a batch with
    fewer than two modalities yields zero with ``info["degenerate"] = True``.
    """
    F = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    modalities = np.asarray(modalities)
    grad = np.zeros_like(F)
    present = sorted({Modality(int(m)) for m in np.unique(modalities)})
    value = 0.0
    terms: list[tuple[str, str]] = []
    for m, n in modality_pairs(present):
        rows_m = np.flatnonzero(modalities == int(m))
        rows_n = np.flatnonzero(modalities == int(n))
        for q_rows, g_rows, direction in ((rows_m, rows_n, (m, n)), (rows_n, rows_m, (n, m))):
            has_match = np.isin(labels[q_rows], labels[g_rows])
            if not has_match.any():
                continue
            q_rows = q_rows[has_match]
            res = sdm_pair_loss(F[q_rows], F[g_rows], labels[q_rows], labels[g_rows], cfg)
            value += res.value
            grad[q_rows] += res.grad_features
            grad[g_rows] += res.grad_aux
            terms.append((str(direction[0]), str(direction[1])))
    return LossResult(float(value), grad, info={"terms": len(terms), "directions": terms, "degenerate": len(present) < 2})


def task_loss(
    features: np.ndarray,
    logits: np.ndarray,
    labels: np.ndarray,
    modalities: np.ndarray,
    cfg: TaskLossConfig = TaskLossConfig(),
) -> LossResult:
    """ID + triplet + SDM with unit weights.

    ``grad_features`` is w.r.t. ``features``; ``grad_aux`` is w.r.t. ``logits``.
    """
    lid = id_loss(logits, labels)
    ltri = triplet_loss(features, labels, cfg.margin)
    lsdm = sdm_total(features, labels, modalities, cfg)
    return LossResult(
        lid.value + ltri.value + lsdm.value,
        ltri.grad_features + lsdm.grad_features,
        lid.grad_features,
        info={"id": lid.value, "triplet": ltri.value, "sdm": lsdm.value, "sdm_terms": lsdm.info["terms"]},
    )


# --------------------------------------------------------- distillation losses


def cosine_loss(F_c: np.ndarray, F_e: np.ndarray) -> LossResult:
    """Mean of ``1 - cos(teacher_i, student_i)``; gradient w.r.t. the student rows only."""
    F_c = np.asarray(F_c, dtype=np.float64)
    F_e = np.asarray(F_e, dtype=np.float64)
    if F_c.shape != F_e.shape:
        raise ArgumentError(f"teacher {F_c.shape} and student {F_e.shape} shapes differ")
    nc = _row_norms(F_c, "teacher features")
    ne = _row_norms(F_e, "student features")
    Xc = F_c / nc[:, None]
    Xe = F_e / ne[:, None]
    cos = np.sum(Xc * Xe, axis=1)
    N = F_e.shape[0]
    grad = -_normalize_backward(Xc, Xe, ne) / N
    return LossResult(float(np.mean(1.0 - cos)), grad)


MatchFn = Callable[[np.ndarray, np.ndarray], LossResult]


def pcm_loss(F_c: np.ndarray, F_e: np.ndarray, basis: ProjectionBasis, match: MatchFn = cosine_loss) -> LossResult:
    """Matching loss after projecting both sides onto the teacher's top-k right singular vectors."""
    F_e = np.asarray(F_e, dtype=np.float64)
    if basis.d != F_e.shape[1]:
        raise ArgumentError(f"basis dimension {basis.d} does not match feature dimension {F_e.shape[1]}")
    try:
        inner = match(basis.project(np.asarray(F_c, dtype=np.float64)), basis.project(F_e))
    except DataError as exc:
        raise DataError(f"projected features vanish in the retained subspace: {exc}") from exc
    return LossResult(inner.value, inner.grad_features @ basis.V_k.T)


def _gram(F: np.ndarray) -> np.ndarray:
    return F.T @ F / F.shape[0]


def fr_loss(F_c: np.ndarray, F_e: np.ndarray) -> LossResult:
    """``1 - cos`` between the flattened d x d batch Gram matrices ``F^T F / N``."""
    F_c = np.asarray(F_c, dtype=np.float64)
    F_e = np.asarray(F_e, dtype=np.float64)
    if F_c.shape != F_e.shape:
        raise ArgumentError(f"teacher {F_c.shape} and student {F_e.shape} shapes differ")
    N = F_e.shape[0]
    if N < 2:
        raise ArgumentError("feature relation loss needs a batch of at least 2 rows")
    _row_norms(F_c, "teacher features")
    _row_norms(F_e, "student features")
    Gc = _gram(F_c)
    Ge = _gram(F_e)
    nc = np.linalg.norm(Gc)
    ne = np.linalg.norm(Ge)
    Gc_hat = Gc / nc
    Ge_hat = Ge / ne
    cos = float(np.sum(Gc_hat * Ge_hat))
    dGe = -(Gc_hat - cos * Ge_hat) / ne
    grad = F_e @ (dGe + dGe.T) / N
    return LossResult(1.0 - cos, grad)


def distill_loss(task: LossResult, cosine: LossResult, pcm: LossResult, fr: LossResult, w: LossWeights) -> LossResult:
    """Weighted sum of the four components; logits gradient travels in ``grad_aux``."""
    if abs(w.task + w.cosine + w.pcm + w.fr - 1.0) > 1e-9:
        raise ArgumentError("loss weights must sum to 1")
    value = w.task * task.value + w.cosine * cosine.value + w.pcm * pcm.value + w.fr * fr.value
    grad = (
        w.task * task.grad_features
        + w.cosine * cosine.grad_features
        + w.pcm * pcm.grad_features
        + w.fr * fr.grad_features
    )
    aux = None if task.grad_aux is None else w.task * task.grad_aux
    return LossResult(
        float(value),
        grad,
        aux,
        info={"task": task.value, "cosine": cosine.value, "pcm": pcm.value, "fr": fr.value},
    )
