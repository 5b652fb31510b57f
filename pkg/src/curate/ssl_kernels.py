"""Self-distillation loss terms, teacher centering and training schedules.

Everything here is float64 numpy over plain arrays. Loss functions return
``(loss, gradient)`` with the gradient taken with respect to the student
input, so each one can be checked against finite differences.

Shapes: prototype scores are ``B x K``; patch scores are ``B x P x K``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    LengthMismatch,
    MaskOutOfRange,
    NonFinite,
    ShapeMismatch,
    StepOutOfRange,
    TooFewPoints,
    ZeroVector,
)

LOG_FLOOR = 1e-30
KOLEO_EPS = 1e-8


@dataclass(frozen=True)
class LossConfig:
    student_temp: float = 0.1
    teacher_temp: float = 0.07
    koleo_weight: float = 0.1
    dino_weight: float = 1.0
    ibot_weight: float = 1.0
    centering: Literal["ema", "sinkhorn_knopp"] = "sinkhorn_knopp"
    sk_iters: int = 3
    sk_epsilon: float = 0.05
    center_momentum: float = 0.9
    shared_heads: bool = False
    n_prototypes: int = 1024

    def __post_init__(self):
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ValueError("temperatures must be > 0")
        if min(self.koleo_weight, self.dino_weight, self.ibot_weight) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.sk_iters < 1:
            raise ValueError("sk_iters must be >= 1")
        if self.centering not in ("ema", "sinkhorn_knopp"):
            raise ValueError(f"unknown centering {self.centering!r}")


def teacher_temp_schedule(step: int, warmup_steps: int, start: float = 0.04, end: float = 0.07) -> float:
    """Linear teacher-temperature warmup, constant afterwards."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return end
    return start + (end - start) * step / warmup_steps


def _check_finite(x: np.ndarray, what: str):
    if not np.all(np.isfinite(x)):
        raise NonFinite(f"non-finite values in {what}")


def softmax(scores, temperature: float = 1.0) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(scores, dtype=np.float64)
    _check_finite(z, "scores")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(scores, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class CenterState:
    center: np.ndarray
    momentum: float = 0.9

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        _check_finite(np.asarray(self.center), "center")

    @classmethod
    def zeros(cls, k: int, momentum: float = 0.9) -> "CenterState":
        return cls(np.zeros(k), momentum)


def center_ema_update(state: CenterState, teacher_scores) -> CenterState:
    t = np.atleast_2d(np.asarray(teacher_scores, dtype=np.float64))
    if t.shape[-1] != state.center.shape[-1]:
        raise DimensionMismatch(f"center K={state.center.shape[-1]}, scores K={t.shape[-1]}")
    m = state.momentum
    return CenterState(m * state.center + (1.0 - m) * t.mean(axis=0), m)


def teacher_distribution(scores, state: CenterState, teacher_temp: float) -> np.ndarray:
    """Softmax of centered teacher logits: ``softmax((scores - center) / T)``."""
    s = np.asarray(scores, dtype=np.float64)
    if s.shape[-1] != state.center.shape[-1]:
        raise DimensionMismatch(f"center K={state.center.shape[-1]}, scores K={s.shape[-1]}")
    return softmax(s - state.center, teacher_temp)


def sinkhorn_knopp(scores, iters: int = 3, epsilon: float = 0.05) -> np.ndarray:
    """Balanced teacher assignment by Sinkhorn-Knopp normalization.

    Q = exp(scores^T / epsilon) is scaled to unit mass, then ``iters`` rounds
    of: prototype rows to 1/K each, sample columns to 1/B each. The result is
    multiplied by B and transposed, so every sample row sums to one.

    The global maximum is subtracted before exponentiating; it cancels in the
    first normalization. Underflow that empties a row or column raises
    :class:`NonFinite`.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    _check_finite(s, "scores")
    b, k = s.shape
    z = s.T / epsilon
    _check_finite(z, "scores / epsilon")
    q = np.exp(z - z.max())
    q /= q.sum()
    for _ in range(iters):
        rows = q.sum(axis=1, keepdims=True)
        if np.any(rows == 0):
            raise NonFinite("a prototype received zero mass (epsilon too small)")
        q /= rows
        q /= k
        cols = q.sum(axis=0, keepdims=True)
        if np.any(cols == 0):
            raise NonFinite("a sample received zero mass (epsilon too small)")
        q /= cols
        q /= b
    q *= b
    _check_finite(q, "sinkhorn output")
    return q.T


def _cross_entropy(student, teacher_probs, temp: float, denom: int):
    log_ps = np.maximum(log_softmax(student, temp), math.log(LOG_FLOOR))
    loss = -float((teacher_probs * log_ps).sum()) / denom
    grad = (softmax(student, temp) - teacher_probs) / (denom * temp)
    return loss, grad


def dino_loss(student_scores, teacher_probs, config: LossConfig = LossConfig()):
    """Cross-entropy between teacher and student prototype distributions.

    loss = -(1/B) sum_b sum_k p_t log p_s with p_s = softmax(student / T_s);
    gradient w.r.t. the student scores is (p_s - p_t) / (B T_s).
    """
    s = np.asarray(student_scores, dtype=np.float64)
    t = np.asarray(teacher_probs, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 2:
        raise ShapeMismatch(f"student {s.shape} vs teacher {t.shape}")
    _check_finite(s, "student scores")
    return _cross_entropy(s, t, config.student_temp, len(s))


def _check_masks(masks, b: int, p: int) -> list[np.ndarray]:
    if len(masks) != b:
        raise MaskOutOfRange(f"{len(masks)} masks for a batch of {b}")
    out = []
    for i, m in enumerate(masks):
        m = np.asarray(m, dtype=np.int64).ravel()
        if len(m) and (m.min() < 0 or m.max() >= p):
            raise MaskOutOfRange(f"sample {i}: patch index outside [0, {p})")
        if len(np.unique(m)) != len(m):
            raise MaskOutOfRange(f"sample {i}: repeated patch index")
        out.append(m)
    return out


def ibot_loss(student_patch_scores, teacher_patch_probs, masks: Sequence, config: LossConfig = LossConfig()):
    """Masked-patch cross-entropy averaged over every masked patch in the batch."""
    s = np.asarray(student_patch_scores, dtype=np.float64)
    t = np.asarray(teacher_patch_probs, dtype=np.float64)
    if s.shape != t.shape or s.ndim != 3:
        raise ShapeMismatch(f"student {s.shape} vs teacher {t.shape}")
    b, p, _ = s.shape
    masks = _check_masks(masks, b, p)
    grad = np.zeros_like(s)
    total = sum(len(m) for m in masks)
    if total == 0:
        return 0.0, grad
    rows = np.concatenate([np.full(len(m), i) for i, m in enumerate(masks)])
    cols = np.concatenate(masks)
    loss, g = _cross_entropy(s[rows, cols], t[rows, cols], config.student_temp, total)
    grad[rows, cols] = g
    return loss, grad


def koleo(features, eps: float = KOLEO_EPS):
    """Kozachenko-Leonenko spreading term on l2-normalized rows.

    loss = -(1/B) sum_i log(max(min_{j != i} ||y_i - y_j||, eps)). The nearest
    neighbor is the smallest j among exact ties. The gradient flows through
    the normalization; clamped distances contribute nothing.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise TooFewPoints("koleo needs at least 2 rows")
    r = np.linalg.norm(x, axis=1)
    if np.any(r < 1e-12):
        raise ZeroVector(int(np.flatnonzero(r < 1e-12)[0]))
    y = x / r[:, None]
    b = len(y)
    diff = y[:, None, :] - y[None, :, :]
    dist = np.sqrt((diff * diff).sum(-1))
    np.fill_diagonal(dist, np.inf)
    nn = dist.argmin(axis=1)
    d = dist[np.arange(b), nn]
    loss = -float(np.log(np.maximum(d, eps)).sum()) / b
    active = d > eps
    coef = np.where(active, -1.0 / (b * np.where(active, d, 1.0) ** 2), 0.0)
    step = coef[:, None] * (y - y[nn])
    gy = step.copy()
    np.add.at(gy, nn, -step)
    gx = (gy - y * (y * gy).sum(1, keepdims=True)) / r[:, None]
    return loss, gx


@dataclass
class LossBundle:
    """One training step's worth of head outputs.

    ``student_cls`` holds every student crop (global crops first);
    ``teacher_cls`` the teacher's global crops. Patch fields are per global
    crop, ``B x P x K``, with ``masks[g][b]`` the masked patch indices of
    sample ``b`` in crop ``g``. ``cls_features`` are the student class tokens
    of the first global crop, used by the KoLeo term.
    """

    student_cls: list
    teacher_cls: list
    student_patch: list = field(default_factory=list)
    teacher_patch: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    cls_features: np.ndarray | None = None


def _teacher_probs(scores, config: LossConfig, state: CenterState | None):
    if config.centering == "sinkhorn_knopp":
        return sinkhorn_knopp(scores, config.sk_iters, config.sk_epsilon)
    return teacher_distribution(scores, state, config.teacher_temp)


def total_loss(bundle: LossBundle, config: LossConfig = LossConfig(), centers: dict | None = None):
    """Weighted sum of the DINO, iBOT and KoLeo terms.

    The DINO term averages the cross-entropy over every (student crop, teacher
    global crop) pair except a global crop against itself. The iBOT term pools
    the masked patches of all global crops. With EMA centering, ``centers``
    maps ``"dino"``/``"ibot"`` to :class:`CenterState`; shared heads use the
    ``"dino"`` state for both terms. Updated states are returned in the
    breakdown under ``"centers"``.
    """
    n_global = len(bundle.teacher_cls)
    k = np.asarray(bundle.teacher_cls[0]).shape[-1]
    centers = dict(centers or {})
    centers.setdefault("dino", CenterState.zeros(k, config.center_momentum))
    if not config.shared_heads:
        centers.setdefault("ibot", CenterState.zeros(k, config.center_momentum))
    ibot_key = "dino" if config.shared_heads else "ibot"

    teacher_probs = [_teacher_probs(t, config, centers["dino"]) for t in bundle.teacher_cls]
    pair_losses = []
    for i, s in enumerate(bundle.student_cls):
        for j, pt in enumerate(teacher_probs):
            if i == j and i < n_global:
                continue
            pair_losses.append(dino_loss(s, pt, config)[0])
    l_dino = float(np.mean(pair_losses)) if pair_losses else 0.0

    l_ibot = 0.0
    masked_teacher = np.empty((0, k))
    if bundle.student_patch:
        s_patch = np.concatenate([np.asarray(p, dtype=np.float64) for p in bundle.student_patch])
        t_patch = np.concatenate([np.asarray(p, dtype=np.float64) for p in bundle.teacher_patch])
        masks = [m for crop in bundle.masks for m in crop]
        masks = _check_masks(masks, len(s_patch), s_patch.shape[1])
        rows = np.concatenate([np.full(len(m), i) for i, m in enumerate(masks)]) if masks else np.empty(0, int)
        cols = np.concatenate(masks) if masks else np.empty(0, int)
        masked_teacher = t_patch[rows, cols]
        if len(masked_teacher):
            probs = np.zeros_like(t_patch)
            probs[rows, cols] = _teacher_probs(masked_teacher, config, centers[ibot_key])
            l_ibot = ibot_loss(s_patch, probs, masks, config)[0]

    l_koleo = 0.0
    if config.koleo_weight > 0 and bundle.cls_features is not None:
        l_koleo = koleo(bundle.cls_features)[0]

    total = config.dino_weight * l_dino + config.ibot_weight * l_ibot + config.koleo_weight * l_koleo

    new_centers = dict(centers)
    if config.centering == "ema":
        t_cls = np.concatenate([np.asarray(t, dtype=np.float64) for t in bundle.teacher_cls])
        if config.shared_heads:
            new_centers["dino"] = center_ema_update(centers["dino"], np.concatenate([t_cls, masked_teacher]))
        else:
            new_centers["dino"] = center_ema_update(centers["dino"], t_cls)
            if len(masked_teacher):
                new_centers["ibot"] = center_ema_update(centers["ibot"], masked_teacher)
    breakdown = {
        "dino": l_dino,
        "ibot": l_ibot,
        "koleo": l_koleo,
        "total": total,
        "centers": new_centers,
    }
    return total, breakdown


@dataclass(frozen=True)
class TeacherStudentPair:
    teacher: np.ndarray
    student: np.ndarray

    def __post_init__(self):
        if np.shape(self.teacher) != np.shape(self.student):
            raise LengthMismatch("teacher and student parameter vectors differ in length")

    @classmethod
    def from_student(cls, student) -> "TeacherStudentPair":
        """Teacher starts as an exact copy of the student."""
        s = np.asarray(student, dtype=np.float64)
        return cls(s.copy(), s.copy())


def ema_update(pair: TeacherStudentPair, momentum: float) -> TeacherStudentPair:
    if not 0.0 <= momentum <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    t = np.asarray(pair.teacher, dtype=np.float64)
    s = np.asarray(pair.student, dtype=np.float64)
    if t.shape != s.shape:
        raise LengthMismatch("teacher and student parameter vectors differ in length")
    return TeacherStudentPair(momentum * t + (1.0 - momentum) * s, pair.student)


def cosine_schedule(start: float, end: float, step: int, total: int) -> float:
    """Half-cosine from ``start`` at step 0 to ``end`` at ``total``."""
    if total < 1:
        raise StepOutOfRange("total must be >= 1")
    if not 0 <= step <= total:
        raise StepOutOfRange(f"step {step} outside [0, {total}]")
    if step == 0:
        return start
    if step == total:
        return end
    return end + (start - end) * (1.0 + math.cos(math.pi * step / total)) / 2.0


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int = 625_000
    warmup_steps: int = 100_000
    lr_base: float = 3.5e-4
    momentum_start: float = 0.994
    momentum_end: float = 1.0
    wd_start: float = 0.04
    wd_end: float = 0.2

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")


def lr_schedule(config: ScheduleConfig, step: int) -> float:
    """Linear warmup to ``lr_base``, then cosine decay to zero."""
    if not 0 <= step <= config.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {config.total_steps}]")
    w = config.warmup_steps
    if step < w:
        return config.lr_base * step / w
    if config.total_steps == w:
        return config.lr_base
    return cosine_schedule(config.lr_base, 0.0, step - w, config.total_steps - w)


def momentum_schedule(config: ScheduleConfig, step: int) -> float:
    return cosine_schedule(config.momentum_start, config.momentum_end, step, config.total_steps)


def wd_schedule(config: ScheduleConfig, step: int) -> float:
    return cosine_schedule(config.wd_start, config.wd_end, step, config.total_steps)


def compress_schedule(config: ScheduleConfig, new_total: int = 10_000, lr_factor: float = 0.1) -> ScheduleConfig:
    """Rescale every step count to ``new_total`` and scale the base lr by ``lr_factor``."""
    if new_total < 1:
        raise ValueError("new_total must be >= 1")
    warmup = config.warmup_steps * new_total // config.total_steps
    if config.warmup_steps > 0:
        warmup = max(1, warmup)
    return replace(
        config,
        total_steps=new_total,
        warmup_steps=min(warmup, new_total),
        lr_base=config.lr_base * lr_factor,
    )


@dataclass(frozen=True)
class TrainingSetup:
    """Loss configuration plus the training switches distillation changes."""

    loss: LossConfig = LossConfig()
    masking: bool = True
    drop_rate: float = 0.4
    ibot_on_all_global_patches: bool = False
    teacher_frozen: bool = False
    keep_student_ema: bool = False


def distill_config(base: TrainingSetup) -> TrainingSetup:
    """Settings for distilling a smaller student from a frozen large teacher.

    Masking and stochastic depth are removed, iBOT covers the patches of both
    global crops, the teacher is not EMA-updated, and a spare EMA of the
    student is kept as the released model.
    """
    return replace(
        base,
        masking=False,
        drop_rate=0.0,
        ibot_on_all_global_patches=True,
        teacher_frozen=True,
        keep_student_ema=True,
    )
