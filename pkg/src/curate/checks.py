"""Self-check batteries behind ``curate losses check`` and ``curate pack check``.

Each battery returns a :class:`BatteryReport` listing every check with its
measured value and tolerance. Gradient checks compare analytic gradients
with 64-bit central differences; the error of one instance is
``max|analytic - numeric| / max(max|numeric|, 1e-12)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .packing import (
    AttentionParams,
    StochasticDepthConfig,
    attention_forward,
    keep_count,
    kept_indices,
    pack,
    packed_forward,
    stochastic_depth_slice,
)
from .rng import derive_seed, generator
from .ssl_kernels import (
    LossConfig,
    ScheduleConfig,
    TeacherStudentPair,
    compress_schedule,
    dino_loss,
    ema_update,
    ibot_loss,
    koleo,
    lr_schedule,
    momentum_schedule,
    sinkhorn_knopp,
    softmax,
    wd_schedule,
)

FD_STEP = 1e-5
GRAD_TOL = 1e-4
KOLEO_GAP = 1e-3
SCORE_DIM = 256


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""


@dataclass
class BatteryReport:
    name: str
    seed: int
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, value: float, tolerance: float, *, le: bool = True, detail: str = "") -> Check:
        ok = bool(value <= tolerance) if le else bool(value >= tolerance)
        c = Check(name, ok, float(value), float(tolerance), detail)
        self.checks.append(c)
        return c

    def to_json(self) -> str:
        body = {"battery": self.name, "seed": self.seed, "passed": self.passed, "checks": [asdict(c) for c in self.checks]}
        return json.dumps(body, indent=2) + "\n"

    def lines(self) -> list[str]:
        return [
            f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.value:.3e} (tol {c.tolerance:.1e}){' ' + c.detail if c.detail else ''}"
            for c in self.checks
        ]


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max()) / scale


def koleo_min_gap(x: np.ndarray) -> float:
    """Smallest gap between each row's nearest and second-nearest distance."""
    y = x / np.linalg.norm(x, axis=1, keepdims=True)
    d = np.sqrt(((y[:, None] - y[None]) ** 2).sum(-1))
    np.fill_diagonal(d, np.inf)
    if len(y) < 3:
        return np.inf
    two = np.sort(d, axis=1)[:, :2]
    return float((two[:, 1] - two[:, 0]).min())


def dino_instance(rng) -> tuple[np.ndarray, np.ndarray, LossConfig]:
    b, k = int(rng.integers(1, 6)), int(rng.integers(2, 12))
    s = rng.standard_normal((b, k))
    t = softmax(rng.standard_normal((b, k)), 0.5)
    return s, t, LossConfig(student_temp=float(rng.uniform(0.1, 1.0)))


def ibot_instance(rng):
    b, p, k = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(2, 8))
    s = rng.standard_normal((b, p, k))
    t = softmax(rng.standard_normal((b, p, k)), 0.5)
    masks = [np.sort(rng.choice(p, size=int(rng.integers(1, p + 1)), replace=False)) for _ in range(b)]
    return s, t, masks, LossConfig(student_temp=float(rng.uniform(0.1, 1.0)))


def koleo_instance(rng) -> np.ndarray:
    while True:
        x = rng.standard_normal((int(rng.integers(3, 10)), int(rng.integers(2, 8))))
        if koleo_min_gap(x) >= KOLEO_GAP:
            return x


def _unit_rows(rng, n: int, d: int) -> np.ndarray:
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def prototype_scores(rng, dim: int = SCORE_DIM) -> np.ndarray:
    """Cosines between unit head outputs and unit prototypes, B x K.

    Sinkhorn's convergence rate degrades with exp(score range / epsilon);
    scores of this geometry keep 50 iterations well inside 1e-6.
    """
    b, k = int(rng.integers(2, 65)), int(rng.integers(2, 65))
    return _unit_rows(rng, b, dim) @ _unit_rows(rng, k, dim).T


def gradient_errors(seed: int, n: int = 100) -> dict[str, list[float]]:
    errs: dict[str, list[float]] = {"dino": [], "ibot": [], "koleo": []}
    rng = generator(derive_seed(seed, "check/dino"))
    for _ in range(n):
        s, t, cfg = dino_instance(rng)
        _, g = dino_loss(s, t, cfg)
        errs["dino"].append(relative_error(g, central_difference(lambda v: dino_loss(v, t, cfg)[0], s)))
    rng = generator(derive_seed(seed, "check/ibot"))
    for _ in range(n):
        s, t, masks, cfg = ibot_instance(rng)
        _, g = ibot_loss(s, t, masks, cfg)
        errs["ibot"].append(relative_error(g, central_difference(lambda v: ibot_loss(v, t, masks, cfg)[0], s)))
    rng = generator(derive_seed(seed, "check/koleo"))
    for _ in range(n):
        x = koleo_instance(rng)
        _, g = koleo(x)
        errs["koleo"].append(relative_error(g, central_difference(lambda v: koleo(v)[0], x)))
    return errs


def losses_battery(seed: int = 0, n: int = 100) -> BatteryReport:
    rep = BatteryReport("losses", seed)
    for name, e in gradient_errors(seed, n).items():
        rep.add(f"{name}_gradient", max(e), GRAD_TOL, detail=f"{len(e)} instances")

    rng = generator(derive_seed(seed, "check/invariants"))
    gibbs = []
    for _ in range(n):
        s, t, cfg = dino_instance(rng)
        loss, _ = dino_loss(s, t, cfg)
        entropy = -float((t * np.log(t)).sum()) / len(t)
        gibbs.append(entropy - loss)
    rep.add("dino_gibbs_bound", max(gibbs), 1e-12)

    sums3, marg50 = [], []
    for _ in range(n):
        s = prototype_scores(rng)
        b, k = s.shape
        q3 = sinkhorn_knopp(s, 3)
        sums3.append(float(np.abs(q3.sum(1) - 1).max()))
        q50 = sinkhorn_knopp(s, 50)
        marg50.append(max(float(np.abs(q50.sum(1) - 1).max()), float(np.abs(q50.sum(0) - b / k).max())))
    rep.add("sinkhorn_rows_3_iters", max(sums3), 1e-6)
    rep.add("sinkhorn_marginals_50_iters", max(marg50), 1e-6)
    q = sinkhorn_knopp(np.zeros((6, 4)), 3)
    rep.add("sinkhorn_uniform_fixed_point", float(np.abs(q - 0.25).max()), 4 * np.finfo(float).eps)

    sched = ScheduleConfig()
    end = sched.total_steps
    endpoints = max(
        abs(momentum_schedule(sched, 0) - 0.994), abs(momentum_schedule(sched, end) - 1.0),
        abs(wd_schedule(sched, 0) - 0.04), abs(wd_schedule(sched, end) - 0.2),
    )
    rep.add("schedule_endpoints", endpoints, 0.0)
    rep.add("lr_peak_after_warmup", abs(lr_schedule(sched, sched.warmup_steps) - sched.lr_base), 0.0)
    comp = compress_schedule(sched)
    frac = 0.0
    for f in (0.0, 0.25, 0.5, 0.75, 1.0):
        a, b = round(f * end), round(f * comp.total_steps)
        frac = max(frac, abs(momentum_schedule(sched, a) - momentum_schedule(comp, b)),
                   abs(wd_schedule(sched, a) - wd_schedule(comp, b)),
                   abs(lr_schedule(sched, a) / sched.lr_base - lr_schedule(comp, b) / comp.lr_base))
    rep.add("compress_schedule_fractions", frac, 1e-6)

    pair = TeacherStudentPair(rng.standard_normal(12), rng.standard_normal(12))
    twice = ema_update(ema_update(pair, 0.9), 0.9)
    once = ema_update(pair, 0.81)
    rep.add("ema_composition", float(np.abs(twice.teacher - once.teacher).max()), 1e-12)
    return rep


def _separate_forward(params, seqs):
    return np.concatenate([attention_forward(params, s) for s in seqs])


def packing_deviation(rng) -> float:
    heads = int(rng.choice([1, 2, 4]))
    d = heads * int(rng.integers(1, 128 // heads + 1))
    params = AttentionParams.random(d, heads, rng)
    seqs = [rng.standard_normal((int(rng.integers(1, 65)), d)) for _ in range(int(rng.integers(1, 9)))]
    packed = packed_forward(params, pack(seqs)).tokens
    return float(np.abs(packed - _separate_forward(params, seqs)).max())


def mask_reference(x, config: StochasticDepthConfig, residual_fn) -> np.ndarray:
    """Residual on every sample, zeroed by a keep mask: the unoptimized form."""
    keep = np.zeros(len(x), dtype=bool)
    keep[kept_indices(len(x), config)] = True
    return np.where(keep[:, None], x + residual_fn(x) / (1.0 - config.drop_rate), x)


def rowwise_residual(x):
    # elementwise so slice and full-batch evaluation round identically
    return np.tanh(1.3 * x + 0.2) * 0.7


def pack_battery(seed: int = 0, n: int = 200, depth_seeds: int = 10_000) -> BatteryReport:
    rep = BatteryReport("pack", seed)
    rng = generator(derive_seed(seed, "check/pack"))
    rep.add("packed_vs_separate", max(packing_deviation(rng) for _ in range(n)), 1e-12, detail=f"{n} configurations")

    rng = generator(derive_seed(seed, "check/depth"))
    worst = 0.0
    for i in range(50):
        x = rng.standard_normal((int(rng.integers(1, 33)), 8))
        cfg = StochasticDepthConfig(float(rng.uniform(0, 0.9)), derive_seed(seed, f"depth/{i}"))
        worst = max(worst, float(np.abs(stochastic_depth_slice(x, cfg, rowwise_residual)
                                        - mask_reference(x, cfg, rowwise_residual)).max()))
    rep.add("slice_vs_mask_reference", worst, 0.0)

    calls = []
    x = rng.standard_normal((10, 4))
    stochastic_depth_slice(x, StochasticDepthConfig(0.4, seed), lambda v: calls.append(len(v)) or np.zeros_like(v))
    rep.add("residuals_computed_b10_d04", abs(calls[0] - 6), 0, detail=f"computed {calls[0]}")

    x = rng.standard_normal((10, 3))
    mean = np.zeros_like(x)
    sq = np.zeros_like(x)
    for s in range(depth_seeds):
        y = stochastic_depth_slice(x, StochasticDepthConfig(0.4, derive_seed(seed, f"mean/{s}")), rowwise_residual)
        mean += y
        sq += y * y
    mean /= depth_seeds
    se = np.sqrt(np.maximum(sq / depth_seeds - mean**2, 0.0) / depth_seeds)
    z = np.abs(mean - (x + rowwise_residual(x))) / se
    rep.add("depth_expectation_z", float(z.max()), 3.0, detail=f"{depth_seeds} seeds")
    rep.add("keep_count_rounding", abs(keep_count(10, 0.4) - 6) + abs(keep_count(1, 0.9) - 1), 0)
    return rep
