"""Edge-side student encoder, LoRA adapters, AdamW and the distillation loop.

The student routes each raw input through its modality's affine projection,
a shared trunk of ReLU layers, and an output projection into the teacher's
feature space. An identity classifier sits on top of the features.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from svdkd.data_model import EmbeddingSet, Modality, iter_epoch
from svdkd.errors import ArgumentError, FormatError, IoError, NumericalError
from svdkd.evaluation import DEFAULT_TASKS, EvalMode, RankingMetrics, evaluate_retrieval
from svdkd.gradcheck import max_relative_error, numeric_grad_entries
from svdkd.losses import (
    LossWeights,
    TaskLossConfig,
    cosine_loss,
    distill_loss,
    fr_loss,
    pcm_loss,
    task_loss,
)
from svdkd.spectral import ProjectionBasis, thin_svd, top_k_basis

logger = logging.getLogger(__name__)


# ------------------------------------------------------------------- model


@dataclass(frozen=True)
class Architecture:
    d_in: int
    hidden: int
    d: int
    n_classes: int
    depth: int = 8
    residual: bool = True


@dataclass(frozen=True)
class LoraConfig:
    enabled: bool = False
    rank: int = 16
    stride: int = 2
    dense_tail: int = 4


@dataclass
class StudentModel:
    arch: Architecture
    params: dict[str, np.ndarray]
    lora_layers: tuple[int, ...] = ()
    lora_rank: int = 0
    frozen: frozenset[str] = frozenset()

    def copy(self) -> "StudentModel":
        return copy.deepcopy(self)

    @property
    def lora_active(self) -> bool:
        return bool(self.lora_layers)

    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in self.frozen]

    def n_parameters(self, trainable_only: bool = False) -> int:
        names = self.trainable() if trainable_only else list(self.params)
        return int(sum(self.params[k].size for k in names))


def _pname(kind: str, key) -> str:
    return f"{kind}.{key}"


def init_student(arch: Architecture, rng: np.random.Generator) -> StudentModel:
    """He-initialised trunk, zero biases."""
    h = arch.hidden
    p: dict[str, np.ndarray] = {}
    for m in Modality:
        p[_pname("proj_W", m)] = rng.standard_normal((h, arch.d_in)) / math.sqrt(arch.d_in)
        p[_pname("proj_b", m)] = np.zeros(h)
    for layer in range(1, arch.depth + 1):
        scale = math.sqrt(2.0 / h) / (math.sqrt(arch.depth) if arch.residual else 1.0)
        p[_pname("trunk_W", layer)] = rng.standard_normal((h, h)) * scale
        p[_pname("trunk_b", layer)] = np.zeros(h)
    p["out_W"] = rng.standard_normal((arch.d, h)) / h
    p["out_b"] = np.zeros(arch.d)
    p["cls_W"] = rng.standard_normal((arch.n_classes, arch.d)) / math.sqrt(arch.d)
    p["cls_b"] = np.zeros(arch.n_classes)
    return StudentModel(arch, p)


def lora_layer_indices(depth: int, stride: int, dense_tail: int = 4) -> tuple[int, ...]:
    """1-indexed trunk layers that receive adapters.

    The last ``dense_tail`` layers always do; below them every ``stride``-th
    layer counting downward from the first dense one.
    """
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    if dense_tail < 0 or dense_tail > depth:
        raise ArgumentError(f"dense_tail must lie in [0, {depth}], got {dense_tail}")
    first_dense = depth - dense_tail + 1
    layers = set(range(first_dense, depth + 1))
    layers.update(range(first_dense - stride, 0, -stride))
    return tuple(sorted(layers))


def lora_attach(
    model: StudentModel, rank: int, stride: int, dense_tail: int = 4, rng: np.random.Generator | None = None
) -> StudentModel:
    """Return a copy with zero-initialised low-rank adapters and a frozen trunk.

    ``B`` starts at zero and ``A`` at small Gaussian values, so the adapted
    model computes exactly the same function as before.
    """
    if rank < 1:
        raise ArgumentError(f"LoRA rank must be >= 1, got {rank}")
    h = model.arch.hidden
    if rank > h // 4:
        raise ArgumentError(f"LoRA rank {rank} is not low-rank for hidden width {h} (need rank <= {h // 4})")
    if model.lora_active:
        raise ArgumentError("adapters are already attached")
    layers = lora_layer_indices(model.arch.depth, stride, dense_tail)
    rng = rng if rng is not None else np.random.default_rng(0)
    out = model.copy()
    for layer in layers:
        out.params[_pname("lora_A", layer)] = rng.standard_normal((rank, h)) * 0.01
        out.params[_pname("lora_B", layer)] = np.zeros((h, rank))
    frozen = {_pname(kind, layer) for layer in range(1, model.arch.depth + 1) for kind in ("trunk_W", "trunk_b")}
    out.lora_layers = layers
    out.lora_rank = rank
    out.frozen = frozenset(frozen)
    return out


def lora_delta(model: StudentModel, layer: int) -> np.ndarray:
    return model.params[_pname("lora_B", layer)] @ model.params[_pname("lora_A", layer)]


def lora_merge(model: StudentModel, layers: tuple[int, ...] | None = None) -> StudentModel:
    """Fold ``W + B A`` into the base weight of each listed adapted layer."""
    layers = model.lora_layers if layers is None else tuple(layers)
    out = model.copy()
    for layer in layers:
        if layer not in model.lora_layers:
            raise ArgumentError(f"layer {layer} carries no adapter")
        key = _pname("trunk_W", layer)
        out.params[key] = out.params[key] + lora_delta(model, layer)
        del out.params[_pname("lora_A", layer)]
        del out.params[_pname("lora_B", layer)]
    out.lora_layers = tuple(x for x in model.lora_layers if x not in layers)
    if not out.lora_layers:
        out.lora_rank = 0
        out.frozen = frozenset()
    return out


@dataclass
class _Cache:
    inputs: np.ndarray
    modalities: np.ndarray
    acts: list[np.ndarray]  # trunk inputs; acts[l-1] feeds layer l, acts[depth] feeds out
    pre: list[np.ndarray]  # pre-activations per trunk layer
    lora_mid: dict[int, np.ndarray]
    features: np.ndarray


def _forward(model: StudentModel, inputs: np.ndarray, modalities: np.ndarray) -> _Cache:
    inputs = np.asarray(inputs, dtype=np.float64)
    modalities = np.asarray(modalities, dtype=np.int64)
    arch = model.arch
    if inputs.ndim != 2 or inputs.shape[1] != arch.d_in:
        raise ArgumentError(f"expected inputs of shape (N, {arch.d_in}), got {inputs.shape}")
    if modalities.shape != (inputs.shape[0],):
        raise ArgumentError("one modality code per input row is required")
    p = model.params
    x = np.zeros((inputs.shape[0], arch.hidden))
    for m in Modality:
        rows = modalities == int(m)
        if rows.any():
            x[rows] = inputs[rows] @ p[_pname("proj_W", m)].T + p[_pname("proj_b", m)]
    acts, pre, mids = [x], [], {}
    for layer in range(1, arch.depth + 1):
        z = x @ p[_pname("trunk_W", layer)].T
        if layer in model.lora_layers:
            mid = x @ p[_pname("lora_A", layer)].T
            mids[layer] = mid
            z = z + mid @ p[_pname("lora_B", layer)].T
        z = z + p[_pname("trunk_b", layer)]
        pre.append(z)
        x = x + np.maximum(z, 0.0) if arch.residual else np.maximum(z, 0.0)
        acts.append(x)
    feats = x @ p["out_W"].T + p["out_b"]
    return _Cache(inputs, modalities, acts, pre, mids, feats)


def forward(model: StudentModel, inputs: np.ndarray, modalities: np.ndarray) -> np.ndarray:
    """N x d student features."""
    return _forward(model, inputs, modalities).features


def classify(model: StudentModel, features: np.ndarray) -> np.ndarray:
    return features @ model.params["cls_W"].T + model.params["cls_b"]


def encode_set(model: StudentModel, es: EmbeddingSet, source_tag: str = "edge") -> EmbeddingSet:
    """Replace a set's features by the student's outputs on its raw inputs."""
    if es.raw_inputs is None:
        raise ArgumentError("set has no raw_inputs to encode")
    return es.with_features(forward(model, es.raw_inputs, es.modalities), source_tag=source_tag)


def backward(
    model: StudentModel, cache: _Cache, grad_features: np.ndarray, grad_logits: np.ndarray | None
) -> dict[str, np.ndarray]:
    """Gradients of every parameter (frozen ones included) given upstream feature/logit gradients."""
    p = model.params
    g: dict[str, np.ndarray] = {}
    dF = np.array(grad_features, dtype=np.float64, copy=True)
    if grad_logits is not None:
        g["cls_W"] = grad_logits.T @ cache.features
        g["cls_b"] = grad_logits.sum(axis=0)
        dF += grad_logits @ p["cls_W"]
    else:
        g["cls_W"] = np.zeros_like(p["cls_W"])
        g["cls_b"] = np.zeros_like(p["cls_b"])
    g["out_W"] = dF.T @ cache.acts[-1]
    g["out_b"] = dF.sum(axis=0)
    dx = dF @ p["out_W"]
    for layer in range(model.arch.depth, 0, -1):
        x_in = cache.acts[layer - 1]
        dz = dx * (cache.pre[layer - 1] > 0)
        g[_pname("trunk_W", layer)] = dz.T @ x_in
        g[_pname("trunk_b", layer)] = dz.sum(axis=0)
        skip = dx if model.arch.residual else 0.0
        dx = skip + dz @ p[_pname("trunk_W", layer)]
        if layer in model.lora_layers:
            A = p[_pname("lora_A", layer)]
            B = p[_pname("lora_B", layer)]
            mid = cache.lora_mid[layer]
            g[_pname("lora_B", layer)] = dz.T @ mid
            dmid = dz @ B
            g[_pname("lora_A", layer)] = dmid.T @ x_in
            dx = dx + dmid @ A
    for m in Modality:
        rows = cache.modalities == int(m)
        g[_pname("proj_W", m)] = dx[rows].T @ cache.inputs[rows]
        g[_pname("proj_b", m)] = dx[rows].sum(axis=0)
    return g


# -------------------------------------------------------------- optimisation


def cosine_lr(step: int, total_steps: int, lr_initial: float, lr_min: float) -> float:
    """Cosine decay from ``lr_initial`` at step 0 to ``lr_min`` at ``total_steps``."""
    if step <= 0:
        return float(lr_initial)
    if step >= total_steps:
        return float(lr_min)
    return float(lr_min + 0.5 * (lr_initial - lr_min) * (1.0 + math.cos(math.pi * step / total_steps)))


@dataclass
class AdamW:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float, names) -> None:
        """One decoupled-weight-decay Adam step on ``names`` (in place)."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k in names:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] = params[k] * (1.0 - lr * self.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainConfig:
    """Distillation settings.

    Reference-scale values: 60 epochs, batch 16 x 8, lr 1e-5 -> 1e-6, pcm_k 50.
    Defaults below are desk-scale.
    """

    epochs: int = 20
    P: int = 4
    K: int = 8
    weights: LossWeights = LossWeights()
    task: TaskLossConfig = TaskLossConfig()
    pcm_k: int = 50
    lr_initial: float = 1e-3
    lr_min: float = 1e-6
    weight_decay: float = 0.01
    hidden: int = 128
    depth: int = 8
    residual: bool = True
    lora: LoraConfig = LoraConfig()
    holdout_fraction: float = 0.2
    grad_check: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lr_min > self.lr_initial:
            raise ArgumentError("lr_min must not exceed lr_initial")
        if self.epochs < 0 or self.P < 2 or self.K < 2:
            raise ArgumentError("epochs must be >= 0, P >= 2 and K >= 2")
        if self.pcm_k < 1:
            raise ArgumentError("pcm_k must be >= 1")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ArgumentError("holdout_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ArgumentError(f"unknown train config keys: {sorted(unknown)}")
        if "weights" in data and not isinstance(data["weights"], LossWeights):
            data["weights"] = LossWeights(**_strict(data["weights"], LossWeights))
        if "task" in data and not isinstance(data["task"], TaskLossConfig):
            data["task"] = TaskLossConfig(**_strict(data["task"], TaskLossConfig))
        if "lora" in data and not isinstance(data["lora"], LoraConfig):
            data["lora"] = LoraConfig(**_strict(data["lora"], LoraConfig))
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def _strict(section: dict, klass) -> dict:
    known = {f.name for f in fields(klass)}
    unknown = set(section) - known
    if unknown:
        raise ArgumentError(f"unknown keys for {klass.__name__}: {sorted(unknown)}")
    return section


STEP_FIELDS = ("step", "lr", "task", "cosine", "pcm", "fr", "total", "shared")


@dataclass(frozen=True)
class StepRecord:
    step: int
    lr: float
    task: float
    cosine: float
    pcm: float
    fr: float
    total: float

    @property
    def shared(self) -> float:
        """Unweighted task + cosine, the common yardstick across weight configurations."""
        return self.task + self.cosine


@dataclass
class TrainingLog:
    config: dict
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    grad_check_error: float | None = None

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(STEP_FIELDS)
        for r in self.steps:
            writer.writerow([r.step, *(repr(float(v)) for v in (r.lr, r.task, r.cosine, r.pcm, r.fr, r.total, r.shared))])
        return out.getvalue()

    def final_heldout_map(self) -> float | None:
        if not self.epochs:
            return None
        return self.epochs[-1]["avg_map"]


def _distill_objective(model, cache, teacher, labels, modalities, basis, cfg: TrainConfig):
    logits = classify(model, cache.features)
    F_e = cache.features
    task = task_loss(F_e, logits, labels, modalities, cfg.task)
    cos = cosine_loss(teacher, F_e)
    pcm = pcm_loss(teacher, F_e, basis)
    fr = fr_loss(teacher, F_e)
    return distill_loss(task, cos, pcm, fr, cfg.weights)


def train_step(
    model: StudentModel,
    opt: AdamW,
    inputs: np.ndarray,
    modalities: np.ndarray,
    labels: np.ndarray,
    teacher: np.ndarray,
    basis: ProjectionBasis,
    cfg: TrainConfig,
    lr: float,
    step: int,
) -> tuple[StepRecord, dict[str, np.ndarray]]:
    """Forward, all four objectives, backward and one AdamW update (in place).

    Returns the unweighted step record and the raw parameter gradients.
    """
    cache = _forward(model, inputs, modalities)
    total = _distill_objective(model, cache, teacher, labels, modalities, basis, cfg)
    grads = backward(model, cache, total.grad_features, total.grad_aux)
    finite = np.isfinite(total.value) and all(np.all(np.isfinite(grads[k])) for k in model.trainable())
    if not finite:
        logger.error("non-finite loss or gradient at step %d (loss=%r)", step, total.value)
        raise NumericalError(f"non-finite loss or gradient at step {step}")
    opt.update(model.params, grads, lr, model.trainable())
    info = total.info
    rec = StepRecord(step, lr, info["task"], info["cosine"], info["pcm"], info["fr"], total.value)
    return rec, grads


def parameter_grad_check(
    model: StudentModel,
    inputs: np.ndarray,
    modalities: np.ndarray,
    labels: np.ndarray,
    teacher: np.ndarray,
    basis: ProjectionBasis,
    cfg: TrainConfig,
    rng: np.random.Generator,
    n_entries: int = 32,
    h: float = 1e-5,
) -> float:
    """Relative error of backprop vs central differences on a random trainable-parameter slice."""
    probe = model.copy()
    cache = _forward(probe, inputs, modalities)
    total = _distill_objective(probe, cache, teacher, labels, modalities, basis, cfg)
    grads = backward(probe, cache, total.grad_features, total.grad_aux)
    names = probe.trainable()
    sizes = np.array([probe.params[k].size for k in names])
    flat = rng.choice(int(sizes.sum()), size=min(n_entries, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = []
    for f in np.sort(flat):
        j = int(np.searchsorted(offsets, f, side="right") - 1)
        arr = probe.params[names[j]]
        picks.append((names[j], np.unravel_index(int(f - offsets[j]), arr.shape)))

    def objective() -> float:
        c = _forward(probe, inputs, modalities)
        return _distill_objective(probe, c, teacher, labels, modalities, basis, cfg).value

    analytic = np.array([grads[name][idx] for name, idx in picks])
    numeric = numeric_grad_entries(objective, [(probe.params[name], idx) for name, idx in picks], h)
    return max_relative_error(analytic, numeric)


def split_identities(es: EmbeddingSet, holdout_fraction: float, rng: np.random.Generator):
    """Disjoint identity split; the training part is relabeled onto [0, C_train)."""
    pids = np.unique(es.identity_ids)
    n_hold = int(round(holdout_fraction * pids.size))
    held = np.sort(rng.permutation(pids)[:n_hold]) if n_hold else np.array([], dtype=np.int64)
    mask = np.isin(es.identity_ids, held)
    train = es.subset(np.flatnonzero(~mask)).relabeled()
    heldout = es.subset(np.flatnonzero(mask)) if n_hold else None
    return train, heldout


def evaluate_student(model: StudentModel, heldout: EmbeddingSet, mode: EvalMode = EvalMode.E2E) -> dict:
    """Per-task ranking metrics of the student on held-out identities, plus their mean mAP."""
    edge = encode_set(model, heldout, "edge")
    gallery = edge if mode is EvalMode.E2E else heldout.with_features(heldout.features, "cloud")
    query = edge if mode is not EvalMode.C2C else heldout.with_features(heldout.features, "cloud")
    out: dict = {}
    for task in DEFAULT_TASKS:
        out[str(task)] = evaluate_retrieval(query, gallery, task, mode)
    out["avg_map"] = float(np.mean([m.map for m in out.values() if isinstance(m, RankingMetrics)]))
    return out


def train_distill(
    teacher_set: EmbeddingSet, cfg: TrainConfig, heldout: EmbeddingSet | None = None
) -> tuple[StudentModel, TrainingLog]:
    """Distil a student from frozen teacher features.

    Identities are split into training and held-out parts unless ``heldout``
    is given explicitly; the PCM basis comes from one SVD of the training
    teacher features and stays fixed.
    """
    if teacher_set.raw_inputs is None:
        raise ArgumentError("teacher set must carry raw_inputs for the student")
    if teacher_set.source_tag not in ("cloud", "synthetic"):
        raise ArgumentError(f"teacher set must be tagged 'cloud' or 'synthetic', got {teacher_set.source_tag!r}")
    if cfg.pcm_k > teacher_set.d:
        raise ArgumentError(f"pcm_k={cfg.pcm_k} exceeds teacher dimension {teacher_set.d}")
    rng = np.random.default_rng(cfg.seed)
    if heldout is None and cfg.holdout_fraction > 0:
        train, heldout = split_identities(teacher_set, cfg.holdout_fraction, rng)
    else:
        train = teacher_set.relabeled()
    arch = Architecture(train.d_in, cfg.hidden, train.d, train.n_identities, cfg.depth, cfg.residual)
    model = init_student(arch, rng)
    if cfg.lora.enabled:
        model = lora_attach(model, cfg.lora.rank, cfg.lora.stride, cfg.lora.dense_tail, rng)
    log = TrainingLog(config=cfg.to_dict())
    if cfg.epochs == 0:
        return model, log

    basis = top_k_basis(thin_svd(train.features), cfg.pcm_k)
    per_epoch = train.n_identities // cfg.P
    total_steps = cfg.epochs * per_epoch
    opt = AdamW(weight_decay=cfg.weight_decay)
    X, T = train.raw_inputs, train.features
    mods, labels = train.modalities, train.identity_ids
    step = 0
    for epoch in range(cfg.epochs):
        for batch in iter_epoch(train, cfg.P, cfg.K, rng):
            idx = batch.indices
            if step == 0 and cfg.grad_check:
                err = parameter_grad_check(model, X[idx], mods[idx], labels[idx], T[idx], basis, cfg, rng)
                log.grad_check_error = err
                if not err < 1e-3:
                    raise NumericalError(f"first-step gradient check failed: relative error {err:.3e}")
            lr = cosine_lr(step, max(total_steps - 1, 1), cfg.lr_initial, cfg.lr_min)
            rec, _ = train_step(model, opt, X[idx], mods[idx], labels[idx], T[idx], basis, cfg, lr, step)
            log.steps.append(rec)
            step += 1
        if heldout is not None:
            metrics = evaluate_student(model, heldout)
            log.epochs.append({"epoch": epoch + 1, **metrics})
            logger.info("epoch %d held-out avg mAP %.4f", epoch + 1, metrics["avg_map"])
    return model, log


# ---------------------------------------------------------------- checkpoint

STU_MAGIC = b"STU1"
_STU_HEAD = struct.Struct("<4sII")


def save_student(model: StudentModel, path: str | Path, extra: dict | None = None) -> None:
    """``STU1`` container: u32 version, u32 block count, named f64 blocks, JSON echo.

    Each block is ``u32 name_len | name | u64 count | count * f64``; the JSON
    trailer (``u64 len | bytes``) records architecture, shapes and adapters.
    """
    buf = io.BytesIO()
    buf.write(_STU_HEAD.pack(STU_MAGIC, 1, len(model.params)))
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.size))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    echo = {
        "architecture": asdict(model.arch),
        "shapes": {k: list(v.shape) for k, v in model.params.items()},
        "lora_layers": list(model.lora_layers),
        "lora_rank": model.lora_rank,
        "frozen": sorted(model.frozen),
        "config": extra or {},
    }
    blob = json.dumps(echo, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_student(path: str | Path) -> tuple[StudentModel, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _STU_HEAD.size:
        raise FormatError("file too short for a STU1 header")
    magic, version, count = _STU_HEAD.unpack_from(blob, 0)
    if magic != STU_MAGIC or version != 1:
        raise FormatError(f"not a STU1 v1 checkpoint (magic={magic!r}, version={version})")
    off = _STU_HEAD.size
    raw_blocks = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (size,) = struct.unpack_from("<Q", blob, off)
            off += 8
            raw_blocks[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).astype(np.float64)
            off += 8 * size
        (jlen,) = struct.unpack_from("<Q", blob, off)
        off += 8
        echo = json.loads(blob[off : off + jlen].decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt STU1 checkpoint: {exc}") from exc
    params = {k: v.reshape(echo["shapes"][k]) for k, v in raw_blocks.items()}
    model = StudentModel(
        Architecture(**echo["architecture"]),
        params,
        tuple(echo["lora_layers"]),
        int(echo["lora_rank"]),
        frozenset(echo["frozen"]),
    )
    return model, echo.get("config", {})
