"""Robust loss and a staged Powell-dogleg nonlinear least-squares solver.

Energies are plain sums of squared residuals, ``F(x) = |r(x)|^2``. Robust terms
enter by rescaling each residual group ``e`` to ``sqrt(w / (sigma^2 + |e|^2)) * e``
so that its squared norm is ``w * rho(|e|^2)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

RADIUS_MIN = 1e-12
RADIUS_MAX = 1e6
DEFAULT_MAX_ITERATIONS = 30
DEFAULT_RELATIVE_TOLERANCE = 1e-4
DEFAULT_SIGMA_2D = 10.0


class SolverError(RuntimeError):
    pass


def geman_mcclure(squared_norm, sigma):
    """``s / (sigma^2 + s)`` for a squared residual norm ``s``; bounded by 1."""
    s = np.asarray(squared_norm, dtype=float)
    out = s / (sigma * sigma + s)
    return float(out) if out.ndim == 0 else out


def robust_groups(errors: np.ndarray, jacobian: Optional[np.ndarray], sigma: float, weights=None):
    """Rescale residual groups for Geman-McClure.

    ``errors`` is ``(G, d)`` and ``jacobian`` ``(G, d, n)`` (or None). Returns the
    flattened scaled residuals and their exact Jacobian.
    """
    e = np.asarray(errors, dtype=float)
    g = e.shape[0]
    w = np.ones(g) if weights is None else np.asarray(weights, dtype=float)
    s = np.einsum("gd,gd->g", e, e)
    denom = sigma * sigma + s
    scale = np.sqrt(w / denom)
    r = (scale[:, None] * e).reshape(-1)
    if jacobian is None:
        return r, None
    de = np.asarray(jacobian)
    # d/dx [scale(s) e] = scale de - scale / denom * e (e^T de)
    proj = np.einsum("gd,gdn->gn", e, de)
    jac = scale[:, None, None] * de - (scale / denom)[:, None, None] * e[:, :, None] * proj[:, None, :]
    return r, jac.reshape(g * e.shape[1], -1)


@dataclass(frozen=True)
class Stage:
    weights: dict = field(default_factory=dict)
    sigma: float = 100.0
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    relative_tolerance: float = DEFAULT_RELATIVE_TOLERANCE

    def __post_init__(self):
        for name, value in self.weights.items():
            if not math.isfinite(value):
                raise ValueError(f"stage weight {name} is not finite")
        if not self.sigma > 0:
            raise ValueError("stage sigma must be positive")
        if self.max_iterations < 0 or not self.relative_tolerance > 0:
            raise ValueError("stage needs max_iterations >= 0 and relative_tolerance > 0")

    def weight(self, name: str, default: float = 0.0) -> float:
        return float(self.weights.get(name, default))


@dataclass(frozen=True)
class StageSchedule:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("a schedule needs at least one stage")

    def __iter__(self):
        return iter(self.stages)

    def __len__(self):
        return len(self.stages)


def _stage_list(rows, keys) -> StageSchedule:
    stages = []
    for row in rows:
        weights = {k: float(row[k]) for k in keys if k in row}
        if "sigma_2d" in row:
            weights["sigma_2d"] = float(row["sigma_2d"])
        stages.append(
            Stage(
                weights,
                float(row["sigma"]),
                int(row.get("max_iters", DEFAULT_MAX_ITERATIONS)),
                float(row.get("rel_tol", DEFAULT_RELATIVE_TOLERANCE)),
            )
        )
    return StageSchedule(tuple(stages))


POSE_TABLE = ((91.0, 100.0), (91.0, 50.0), (47.4, 10.0), (4.78, 5.0))
POSE_SIGMA = 100.0
SHAPE_TABLE_SYNTHETIC = ((6.5, 0.9, 0.05), (5.25, 0.75, 0.03), (4.0, 0.6, 0.01))
SHAPE_TABLE_REAL = ((6.5, 0.9, 0.08), (5.25, 0.75, 0.04), (4.0, 0.6, 0.03))


def default_pose_schedule() -> StageSchedule:
    return StageSchedule(tuple(Stage({"w_theta": a, "w_beta": b}, POSE_SIGMA) for a, b in POSE_TABLE))


def default_shape_schedule(dataset: str = "synthetic") -> StageSchedule:
    table = {"synthetic": SHAPE_TABLE_SYNTHETIC, "real": SHAPE_TABLE_REAL}[dataset]
    return StageSchedule(tuple(Stage({"w_L": wl, "w_B": wb, "sigma_2d": DEFAULT_SIGMA_2D}, s) for wl, wb, s in table))


def load_schedules(text: str) -> tuple[StageSchedule, StageSchedule]:
    """Parse a schedule file into (pose schedule, shape schedule); a missing
    section falls back to the built-in synthetic defaults."""
    doc = json.loads(text)
    pose = _stage_list(doc["pose_stages"], ("w_theta", "w_beta")) if "pose_stages" in doc else default_pose_schedule()
    shape = _stage_list(doc["shape_stages"], ("w_L", "w_B")) if "shape_stages" in doc else default_shape_schedule()
    return pose, shape


def dump_schedules(pose: StageSchedule, shape: StageSchedule) -> str:
    def rows(schedule):
        return [
            {**st.weights, "sigma": st.sigma, "max_iters": st.max_iterations, "rel_tol": st.relative_tolerance}
            for st in schedule
        ]

    return json.dumps({"pose_stages": rows(pose), "shape_stages": rows(shape)}, indent=1)


@dataclass
class ParameterBlock:
    name: str
    size: int
    frozen: bool = False


class LeastSquaresProblem:
    """Residual function ``r(x, stage)`` with an optional analytic Jacobian.

    ``jacobian`` may return a dense array or a scipy sparse matrix. Without
    one, central differences are used.
    """

    def __init__(
        self,
        residual: Callable[[np.ndarray, Stage], np.ndarray],
        jacobian: Optional[Callable[[np.ndarray, Stage], np.ndarray]] = None,
        blocks: Optional[Sequence[ParameterBlock]] = None,
        fd_step: float = 1e-6,
    ):
        self.residual = residual
        self.jacobian = jacobian
        self.blocks = list(blocks) if blocks is not None else None
        self.fd_step = fd_step

    def block_slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for b in self.blocks or []:
            out[b.name] = slice(start, start + b.size)
            start += b.size
        return out

    def free_indices(self, n: int) -> np.ndarray:
        if self.blocks is None:
            return np.arange(n)
        if sum(b.size for b in self.blocks) != n:
            raise ValueError("parameter blocks do not cover the parameter vector")
        mask = np.concatenate([np.full(b.size, not b.frozen) for b in self.blocks]) if self.blocks else np.ones(0, bool)
        return np.flatnonzero(mask)

    def evaluate_jacobian(self, x: np.ndarray, stage: Stage):
        if self.jacobian is not None:
            return self.jacobian(x, stage)
        return numeric_jacobian(lambda z: self.residual(z, stage), x, self.fd_step)


def numeric_jacobian(f: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-6) -> np.ndarray:
    """Central differences, one column per parameter."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[j] += h
        xm.flat[j] -= h
        fp = np.asarray(f(xp), dtype=float).reshape(-1)
        fm = np.asarray(f(xm), dtype=float).reshape(-1)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise SolverError(f"non-finite evaluation while differencing parameter {j}")
        # divide by the step actually taken; x +/- h is rounded
        cols.append((fp - fm) / (xp.flat[j] - xm.flat[j]))
    return np.column_stack(cols) if cols else np.zeros((np.asarray(f(x)).size, 0))


@dataclass
class StageTrace:
    stage: Stage
    energies: list[float]
    radii: list[float]
    iterations: int = 0
    accepted: int = 0

    @property
    def weights(self) -> dict:
        return dict(self.stage.weights)


@dataclass
class SolveResult:
    x: np.ndarray
    traces: list[StageTrace]

    @property
    def energy(self) -> float:
        return self.traces[-1].energies[-1]

    @property
    def initial_energy(self) -> float:
        return self.traces[0].energies[0]


def _gauss_newton_step(jac, r: np.ndarray) -> np.ndarray:
    """Minimizer of |J h + r| via SVD, damped when J is near rank-deficient."""
    if sp.issparse(jac):
        a = (jac.T @ jac).tocsc()
        g = jac.T @ r
        lam = 1e-12 * a.diagonal().sum() / max(a.shape[0], 1)
        try:
            h = spla.spsolve(a + lam * sp.identity(a.shape[0], format="csc"), -g)
        except RuntimeError:
            h = np.full(a.shape[0], np.nan)
        if not np.all(np.isfinite(h)):
            lam = 1e-6 * a.diagonal().sum()
            h = spla.spsolve(a + lam * sp.identity(a.shape[0], format="csc"), -g)
        return np.asarray(h)
    u, s, vt = np.linalg.svd(jac, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros(jac.shape[1])
    ur = u.T @ r
    if s[-1] < 1e-8 * s[0]:
        lam = 1e-6 * np.sum(s * s)
        coef = s / (s * s + lam)
    else:
        coef = 1.0 / s
    return -(vt.T @ (coef * ur))


def _dogleg_step(jac, r: np.ndarray, g: np.ndarray, radius: float) -> np.ndarray:
    h_gn = _gauss_newton_step(jac, r)
    if np.linalg.norm(h_gn) <= radius:
        return h_gn
    jg = jac @ g
    gnorm2 = float(g @ g)
    alpha = gnorm2 / float(jg @ jg) if np.any(jg) else 0.0
    h_sd = -alpha * g
    sd_norm = np.linalg.norm(h_sd)
    if sd_norm >= radius or alpha == 0.0:
        return -(radius / math.sqrt(gnorm2)) * g
    # point on the segment h_sd -> h_gn at distance radius
    d = h_gn - h_sd
    a = float(d @ d)
    b = 2.0 * float(h_sd @ d)
    c = sd_norm * sd_norm - radius * radius
    beta = (-b + math.sqrt(max(b * b - 4 * a * c, 0.0))) / (2 * a)
    return h_sd + beta * d


def dogleg_minimize(
    problem: LeastSquaresProblem,
    x0,
    schedule: StageSchedule,
    initial_radius: float = 1.0,
    stage_callback: Optional[Callable[[int, np.ndarray], None]] = None,
    max_radius: float = RADIUS_MAX,
    feasible: Optional[Callable[[np.ndarray], bool]] = None,
) -> SolveResult:
    """Run the stages of ``schedule`` in order with Powell's dogleg method.

    ``stage_callback(k, x)`` runs before stage ``k`` and may update problem
    state (e.g. rebuild correspondences); it must not change the residual
    within a stage. ``max_radius`` caps the trust region, which keeps steps
    local on problems with distant equivalent minima. Steps to points where
    ``feasible(x)`` is false are rejected like steps that raise the energy.
    """
    top = float(np.clip(max_radius, RADIUS_MIN, RADIUS_MAX))
    x = np.array(x0, dtype=float)
    free = problem.free_indices(x.size)
    radius = float(np.clip(initial_radius, RADIUS_MIN, top))
    traces = []
    for k, stage in enumerate(schedule):
        if stage_callback is not None:
            stage_callback(k, x.copy())
        log.debug("stage %d weights=%s sigma=%g", k, stage.weights, stage.sigma)
        r = np.asarray(problem.residual(x, stage), dtype=float)
        if not np.all(np.isfinite(r)):
            raise SolverError(f"non-finite residual at the start of stage {k}")
        energy = float(r @ r)
        trace = StageTrace(stage, [energy], [radius])
        traces.append(trace)
        if free.size == 0 or stage.max_iterations == 0:
            continue
        jac = None
        while trace.iterations < stage.max_iterations:
            if energy == 0.0:
                break
            if jac is None:
                full = problem.evaluate_jacobian(x, stage)
                jac = full[:, free] if not sp.issparse(full) else full.tocsc()[:, free]
                if sp.issparse(jac):
                    if not np.all(np.isfinite(jac.data)):
                        raise SolverError(f"non-finite Jacobian in stage {k}")
                elif not np.all(np.isfinite(jac)):
                    raise SolverError(f"non-finite Jacobian in stage {k}")
                g = np.asarray(jac.T @ r).reshape(-1)
            if not np.any(g):
                break
            h = _dogleg_step(jac, r, g, radius)
            step = float(np.linalg.norm(h))
            if step <= 1e-15 * (float(np.linalg.norm(x[free])) + 1e-15):
                break
            predicted = energy - float(np.sum((r + jac @ h) ** 2))
            x_new = x.copy()
            x_new[free] += h
            trace.iterations += 1
            if feasible is None or feasible(x_new):
                r_new = np.asarray(problem.residual(x_new, stage), dtype=float)
                energy_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else math.inf
            else:
                energy_new = math.inf
            gain = (energy - energy_new) / predicted if predicted > 0 else -1.0
            if energy_new < energy and gain > 0:
                relative = (energy - energy_new) / energy
                x, r, energy = x_new, r_new, energy_new
                jac = None
                trace.accepted += 1
                trace.energies.append(energy)
                if gain > 0.75:
                    radius = max(radius, 3.0 * step)
                elif gain < 0.25:
                    radius = 0.5 * radius
                radius = float(np.clip(radius, RADIUS_MIN, top))
                trace.radii.append(radius)
                if relative < stage.relative_tolerance:
                    break
            else:
                radius = float(np.clip(0.5 * min(radius, step), RADIUS_MIN, top))
                trace.radii.append(radius)
                if radius <= RADIUS_MIN:
                    break
        log.debug("stage %d: %d iterations, %d accepted, energy %.6g", k, trace.iterations, trace.accepted, energy)
    return SolveResult(x, traces)
