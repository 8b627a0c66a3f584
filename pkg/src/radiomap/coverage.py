"""Antenna-orientation optimization for M base stations through a frozen predictor.

Two objectives are supported: the 10th percentile of the total received
power over a target area (``macro_diversity``) and the number of target pixels
whose best SINR clears a threshold (``max_sinr``).  Exact objectives are used
for evaluation and random search.  Gradient descent works on smooth surrogates
whose gradients w.r.t. the predicted maps are computed here in closed form
and pushed back through the network to the angle-dependent input channels.
"""

from __future__ import annotations

import csv
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .engine import AdamState, Tensor, adam_step, no_grad, weighted_sum
from .features import (FeaturePreset, angle_sensitivity, assemble_input_stack, channel_bounds,
                       encode_azimuth_map, encode_gain_floor, normalize)
from .model import UNetDCN
from .propagation import Scene, TxConfig
from .scaling import ScalingConfig

SCENARIOS = ("macro_diversity", "max_sinr")
AZIMUTH_HALF_RANGE = 0.75 * math.pi
ELEVATION_RANGE = (0.5 * math.pi, math.pi)


# ------------------------------------------------------------------ problem
@dataclass
class CoverageProblem:
    scene: Scene
    txs: list[TxConfig]
    target_mask: np.ndarray
    preset: FeaturePreset
    scenario: str = "macro_diversity"
    noise_dbm: float = -104.0
    threshold_db: float = 20.0
    scaling: ScalingConfig = field(default_factory=ScalingConfig)

    def __post_init__(self):
        if len(self.txs) < 1:
            raise ValueError("need at least one base station")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        self.target_mask = np.asarray(self.target_mask, dtype=bool)
        if self.target_mask.shape != self.scene.shape:
            raise ValueError("target mask shape must match the scene")
        if not self.target_mask.any():
            raise ValueError("target area is empty")

    @property
    def m(self) -> int:
        return len(self.txs)

    def initial_angles(self) -> np.ndarray:
        return np.array([[t.azimuth, t.elevation] for t in self.txs])

    def box(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-BS bounds ``(lo, hi)``, each ``(M, 2)``, for (azimuth, elevation)."""
        phi0 = np.array([t.azimuth for t in self.txs])
        lo = np.stack([phi0 - AZIMUTH_HALF_RANGE, np.full(self.m, ELEVATION_RANGE[0])], axis=1)
        hi = np.stack([phi0 + AZIMUTH_HALF_RANGE, np.full(self.m, ELEVATION_RANGE[1])], axis=1)
        return lo, hi

    def project(self, angles: np.ndarray) -> np.ndarray:
        lo, hi = self.box()
        return np.clip(angles, lo, hi)

    def inside_box(self, angles: np.ndarray, tol: float = 1e-12) -> bool:
        lo, hi = self.box()
        return bool(np.all(angles >= lo - tol) and np.all(angles <= hi + tol))


@dataclass(frozen=True)
class RelaxationConfig:
    alpha: float = -2.0  # Boltzmann inverse temperature, per dB
    kappa: float = 4.0  # sigmoid slope, per dB
    rank: float = 10.0
    temperature: float = 0.1  # smooth max over base stations, dB

    def __post_init__(self):
        if not self.alpha < 0:
            raise ValueError("alpha must be negative")
        if not self.kappa > 0 or not self.temperature > 0:
            raise ValueError("kappa and temperature must be positive")
        if not 0 < self.rank <= 100:
            raise ValueError("rank must lie in (0, 100]")


# ------------------------------------------------------------------ map algebra
def dbm_to_mw(p):
    return np.power(10.0, np.asarray(p, dtype=np.float64) / 10.0)


def mw_to_dbm(p):
    return 10.0 * np.log10(p)


def total_power_map(power_maps, floor_dbm: float | None = None, with_grad: bool = False):
    """Sum of received powers in the linear domain, back in dBm.

    ``with_grad`` also returns ``d total / d P_i`` (dB per dB), shape ``(M, H, W)``.
    """
    p = np.asarray(power_maps, dtype=np.float64)
    top = p.max(axis=0)
    lin = np.power(10.0, (p - top) / 10.0)
    s = lin.sum(axis=0)
    total = top + 10.0 * np.log10(s)
    floored = np.zeros(total.shape, dtype=bool)
    if floor_dbm is not None:
        floored = total < floor_dbm
        total = np.where(floored, floor_dbm, total)
    if not with_grad:
        return total
    return total, np.where(floored, 0.0, lin / s)


def percentile_objective(values, mask, rank: float = 10.0) -> float:
    """Nearest-rank percentile: the smallest value with at least ``rank`` % of target pixels at or below it."""
    v = np.sort(np.asarray(values, dtype=np.float64)[np.asarray(mask, dtype=bool)], axis=None)
    if v.size == 0:
        raise ValueError("target area is empty")
    k = math.ceil(Fraction(rank) * v.size / 100)
    return float(v[max(k, 1) - 1])


def boltzmann(values, alpha: float, with_grad: bool = False):
    """Boltzmann-weighted mean ``sum x exp(a x) / sum exp(a x)`` (soft minimum for ``a < 0``)."""
    if not alpha < 0:
        raise ValueError("alpha must be negative")
    x = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("values must be finite")
    z = alpha * x
    w = np.exp(z - z.max())
    w /= w.sum()
    b = float(np.dot(w, x))
    if not with_grad:
        return b
    return b, w * (1.0 + alpha * (x - b))


def sinr_map(power_maps, noise_dbm: float, smooth: float | None = None, with_grad: bool = False):
    """Best per-pixel SINR over base stations, in dB.

    ``smooth`` replaces the max by ``T * logsumexp(s / T)`` with temperature ``T`` (dB).
    ``with_grad`` (smooth only) also returns ``d sinr / d P_i``, shape ``(M, H, W)``.
    """
    p = np.asarray(power_maps, dtype=np.float64)
    ref = max(float(p.max()), noise_dbm)
    lin = np.power(10.0, (p - ref) / 10.0)
    noise = 10.0 ** ((noise_dbm - ref) / 10.0)
    interf = lin.sum(axis=0)[None] - lin + noise
    s = 10.0 * np.log10(lin) - 10.0 * np.log10(interf)
    if smooth is None:
        if with_grad:
            raise ValueError("gradients need the smooth max")
        return s.max(axis=0)
    z = s / smooth
    top = z.max(axis=0)
    e = np.exp(z - top)
    out = smooth * (top + np.log(e.sum(axis=0)))
    if not with_grad:
        return out
    w = e / e.sum(axis=0)  # d out / d s_i
    # d s_i / d P_k = [i == k] - [i != k] p_k / I_i
    a = (w / interf).sum(axis=0)  # sum_i w_i / I_i
    grad = w - lin * (a[None] - w / interf)
    return out, grad


def coverage_count(sinr_db, mask, threshold_db: float) -> int:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("target area is empty")
    return int(np.count_nonzero(np.asarray(sinr_db)[mask] >= threshold_db))


def soft_coverage(sinr_db, mask, threshold_db: float, kappa: float, with_grad: bool = False):
    """Sum over the target of ``sigmoid(kappa * (sinr - t))``."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("target area is empty")
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    u = kappa * (np.asarray(sinr_db, dtype=np.float64) - threshold_db)
    sig = 0.5 * (1.0 + np.tanh(0.5 * u))
    total = float(sig[mask].sum())
    if not with_grad:
        return total
    return total, np.where(mask, kappa * sig * (1.0 - sig), 0.0)


# ------------------------------------------------------------------ predictor plumbing
@contextmanager
def frozen(model: UNetDCN):
    """Eval mode with parameters excluded from autodiff."""
    params = model.parameters()
    flags = [p.requires_grad for p in params]
    was_training = model.training
    model.eval()
    for p in params:
        p.requires_grad = False
    try:
        yield model
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
        model.train(was_training)


def _require_trained(model):
    if not getattr(model, "trained", False):
        raise RuntimeError("predictor has not been trained or loaded from a checkpoint")


class StackCache:
    """Input stacks for a fixed scene; only the orientation-dependent channels are recomputed."""

    def __init__(self, problem: CoverageProblem):
        self.problem = problem
        self.shape = problem.scene.shape
        self.base = [assemble_input_stack(problem.scene, tx, problem.preset) for tx in problem.txs]
        self.manifest = self.base[0].manifest

    def txs_for(self, angles: np.ndarray) -> list[TxConfig]:
        return [tx.with_angles(float(a[0]), float(a[1])) for tx, a in zip(self.problem.txs, angles)]

    def stacks(self, angles: np.ndarray) -> np.ndarray:
        out = np.stack([b.channels for b in self.base])
        for i, tx in enumerate(self.txs_for(angles)):
            if "gain_floor" in self.manifest:
                out[i, self.manifest.index("gain_floor")] = normalize(
                    encode_gain_floor(tx, self.shape), channel_bounds("gain_floor", self.shape, tx))
            if "azimuth" in self.manifest:
                out[i, self.manifest.index("azimuth")] = normalize(
                    encode_azimuth_map(tx, self.shape), channel_bounds("azimuth", self.shape, tx))
        return out


def _db_maps(problem: CoverageProblem, pred: np.ndarray, clamp: bool) -> np.ndarray:
    s = problem.scaling
    g = np.clip(pred, 0.0, 1.0) if clamp else pred
    p_tx = np.array([t.power_dbm for t in problem.txs])[:, None, None]
    return p_tx + s.pl_trnc_db + g * s.gray_span_db


def received_power_maps(problem: CoverageProblem, model: UNetDCN, angles=None, clamp: bool = True,
                        cache: StackCache | None = None) -> np.ndarray:
    """Received power in dBm, ``(M, H, W)``, for the given angles (default: initial)."""
    _require_trained(model)
    angles = problem.initial_angles() if angles is None else np.asarray(angles, dtype=np.float64)
    cache = cache or StackCache(problem)
    with frozen(model), no_grad():
        pred = model(cache.stacks(angles).astype(model.config.dtype)).data[:, 0].astype(np.float64)
    return _db_maps(problem, pred, clamp)


def floor_dbm(problem: CoverageProblem) -> float:
    return problem.scaling.pl_trnc_db + min(t.power_dbm for t in problem.txs)


def exact_objective(problem: CoverageProblem, power_maps: np.ndarray, rank: float = 10.0) -> float:
    if problem.scenario == "macro_diversity":
        return percentile_objective(total_power_map(power_maps, floor_dbm(problem)), problem.target_mask, rank)
    return float(coverage_count(sinr_map(power_maps, problem.noise_dbm), problem.target_mask,
                                problem.threshold_db))


def relaxed_objective(problem: CoverageProblem, power_maps: np.ndarray, relax: RelaxationConfig):
    """Smooth objective and its gradient w.r.t. each power map, ``(M, H, W)``."""
    mask = problem.target_mask
    if problem.scenario == "macro_diversity":
        total, dt = total_power_map(power_maps, floor_dbm(problem), with_grad=True)
        b, db = boltzmann(total[mask], relax.alpha, with_grad=True)
        g = np.zeros(total.shape)
        g[mask] = db
        return b, dt * g[None]
    s, ds = sinr_map(power_maps, problem.noise_dbm, smooth=relax.temperature, with_grad=True)
    c, dc = soft_coverage(s, mask, problem.threshold_db, relax.kappa, with_grad=True)
    return c, ds * dc[None]


def angle_gradient(problem: CoverageProblem, model: UNetDCN, angles: np.ndarray, relax: RelaxationConfig,
                   cache: StackCache | None = None):
    """Relaxed objective, its gradient w.r.t. ``angles`` (M, 2), and the exact objective at ``angles``."""
    _require_trained(model)
    cache = cache or StackCache(problem)
    x = Tensor(cache.stacks(angles).astype(model.config.dtype), requires_grad=True)
    with frozen(model):
        y = model(x)
        pred = y.data[:, 0].astype(np.float64)
        if not np.all(np.isfinite(pred)):
            raise FloatingPointError("predictor returned non-finite values")
        value, dpow = relaxed_objective(problem, _db_maps(problem, pred, clamp=False), relax)
        dpred = dpow * problem.scaling.gray_span_db
        weighted_sum(y, dpred[:, None].astype(y.dtype)).backward()
    gx = x.grad.astype(np.float64)
    grad = np.zeros_like(angles, dtype=np.float64)
    for i, tx in enumerate(cache.txs_for(angles)):
        d_phi, d_theta = angle_sensitivity(tx, cache.shape, cache.manifest)
        grad[i, 0] = float(np.sum(gx[i] * d_phi))
        grad[i, 1] = float(np.sum(gx[i] * d_theta))
    exact = exact_objective(problem, _db_maps(problem, pred, clamp=True), relax.rank)
    return value, grad, exact


# ------------------------------------------------------------------ optimizers
@dataclass
class OptimizationResult:
    angles: np.ndarray
    score: float
    initial_score: float
    trace: list[dict]

    def write_csv(self, path):
        write_trace(path, self.trace)


def write_trace(path, trace: list[dict]):
    m = len(trace[0]["angles"]) if trace else 0
    cols = ["iter", "relaxed", "exact", "best"] + [f"{a}{i}" for i in range(m) for a in ("phi", "theta")]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in trace:
            rel = "" if row["relaxed"] is None else repr(row["relaxed"])
            w.writerow([row["iter"], rel, repr(row["exact"]), repr(row["best"])]
                       + [repr(float(v)) for v in np.asarray(row["angles"]).ravel()])


def random_search(problem: CoverageProblem, model: UNetDCN, iters: int = 500, seed: int = 0,
                  chunk: int = 8, rank: float = 10.0) -> OptimizationResult:
    """Uniform draws inside the box; keeps the best exact objective seen."""
    _require_trained(model)
    rng = np.random.default_rng(seed)
    lo, hi = problem.box()
    cache = StackCache(problem)
    initial = exact_objective(problem, received_power_maps(problem, model, cache=cache), rank)
    draws = rng.uniform(lo[None], hi[None], size=(iters,) + lo.shape)
    best, best_angles, trace = -math.inf, problem.initial_angles(), []
    m = problem.m
    for s in range(0, iters, chunk):
        block = draws[s:s + chunk]
        x = np.concatenate([cache.stacks(a) for a in block])
        with frozen(model), no_grad():
            pred = model(x.astype(model.config.dtype)).data[:, 0].astype(np.float64)
        for j, a in enumerate(block):
            score = exact_objective(problem, _db_maps(problem, pred[j * m:(j + 1) * m], clamp=True), rank)
            if score > best:
                best, best_angles = score, a.copy()
            trace.append({"iter": s + j, "relaxed": None, "exact": score, "best": best, "angles": a.copy()})
    return OptimizationResult(best_angles, best, initial, trace)


def gradient_descent_angles(problem: CoverageProblem, model: UNetDCN, relax: RelaxationConfig | None = None,
                            iters: int = 500, lr: float = 0.15, log=None) -> OptimizationResult:
    """Adam ascent on the relaxed objective with projection onto the angle box.

    Iteration 0 evaluates the initial angles; the returned angles are those
    with the best exact objective among all evaluated iterates.
    """
    relax = relax or RelaxationConfig()
    _require_trained(model)
    cache = StackCache(problem)
    angles = problem.initial_angles()
    state = AdamState(lr=lr)
    best, best_angles, trace, initial = -math.inf, angles.copy(), [], None
    for it in range(iters):
        if not problem.inside_box(angles):
            raise AssertionError(f"angles left the box at iteration {it}")
        try:
            value, grad, exact = angle_gradient(problem, model, angles, relax, cache)
        except FloatingPointError as exc:
            raise FloatingPointError(f"{exc} at iteration {it}") from exc
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            raise FloatingPointError(f"non-finite objective gradient at iteration {it}")
        if initial is None:
            initial = exact
        if exact > best:
            best, best_angles = exact, angles.copy()
        trace.append({"iter": it, "relaxed": value, "exact": exact, "best": best, "angles": angles.copy()})
        if log is not None:
            log(f"iter {it:4d} relaxed {value:.4f} exact {exact:.4f}")
        angles = problem.project(adam_step({"angles": angles}, {"angles": -grad}, state)["angles"])
    return OptimizationResult(best_angles, best, initial, trace)


# ------------------------------------------------------------------ calibration
def calibrate_alpha(values_list, masks, rank: float = 10.0, lo: float = -20.0, hi: float = -1e-4,
                    iters: int = 60) -> float:
    """Alpha whose Boltzmann value matches the nearest-rank percentile on average over maps.

    The Boltzmann value is non-decreasing in alpha, so the mean mismatch is
    bisected on a log scale of ``-alpha``.
    """
    def gap(alpha):
        return float(np.mean([boltzmann(v[m], alpha) - percentile_objective(v, m, rank)
                              for v, m in zip(values_list, masks)]))

    a, b = math.log(-hi), math.log(-lo)  # gap(-exp(a)) >= gap(-exp(b))
    if gap(-math.exp(b)) > 0:
        return lo
    if gap(-math.exp(a)) < 0:
        return hi
    for _ in range(iters):
        mid = 0.5 * (a + b)
        if gap(-math.exp(mid)) > 0:
            a = mid
        else:
            b = mid
    return -math.exp(0.5 * (a + b))


def with_scenario(problem: CoverageProblem, scenario: str) -> CoverageProblem:
    return replace(problem, scenario=scenario)
