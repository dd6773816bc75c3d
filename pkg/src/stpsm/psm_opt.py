"""Particle-based correspondence optimization over cohorts of shape sequences.

The spatiotemporal objective is

    Q = alpha * (sum_t H(Z_t) + sum_n H(Z_n)) - sum_{n,t} H(X_{n,t})

where ``Z_t`` is the ensemble of subjects at time ``t``, ``Z_n`` the ensemble of
time points of subject ``n`` and ``H(X_{n,t})`` a kernel entropy of the
particles on one surface that rewards even spreading. The cross-sectional
objective keeps only the first time point and the inter-subject term.

The sampling term is a Gaussian-kernel repulsion whose gradient is a
weighted sum of unit offsets between neighbours. Kernel widths follow the
usual adaptive rule but are frozen for the length of each particle level, so
the objective is smooth within a level and every update is a descent
direction of the quantity the step controller checks.
"""
from __future__ import annotations

import enum
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import special

from .core import Cohort, EnsembleMatrix, generalized_procrustes
from .errors import (DegenerateConfiguration, InvalidSpec, NonFiniteObjective,
                     ProjectionFailure)
from .seeds import derive_seed
from .surfaces import EllipsoidDomain, ShapeDomain, _ellipsoid_batch, tangent_component

logger = logging.getLogger(__name__)

_SQRT_HALF = math.sqrt(0.5)
_BACKTRACKS = 8
_SQRT_HALF_PI = math.sqrt(0.5 * math.pi)

__all__ = [
    "Mode",
    "AlphaSchedule",
    "SamplingKernel",
    "OptimizerConfig",
    "ObjectiveBreakdown",
    "OptimizationResult",
    "shape_entropy",
    "correspondence_gradient",
    "parzen_entropy",
    "sampling_entropy",
    "sampling_gradient",
    "anneal_alpha",
    "split_particles",
    "initialize_particles",
    "optimize",
    "propagate_by_projection",
    "write_trace_csv",
]


class Mode(str, enum.Enum):
    CROSS_SECTIONAL = "cross_sectional"
    SPATIOTEMPORAL = "spatiotemporal"


class AlphaSchedule(str, enum.Enum):
    GEOMETRIC = "geometric"
    LINEAR = "linear"


@dataclass(frozen=True)
class SamplingKernel:
    """Adaptive Gaussian Parzen kernel.

    Each particle uses its ``neighbors`` nearest neighbours; its bandwidth is
    the distance to the ``ceil(neighbors / 2)``-th one, clamped to
    ``[sigma_min, sigma_max]`` times the domain's extent diagonal.
    """

    neighbors: int = 8
    sigma_min: float = 1e-3
    sigma_max: float = 0.25


@dataclass(frozen=True)
class OptimizerConfig:
    alpha_start: float = 100.0
    alpha_end: float = 0.1
    alpha_schedule: AlphaSchedule = AlphaSchedule.GEOMETRIC
    iterations_per_split: int = 100
    target_particles: int = 256
    step_size: float = 0.5
    step_decay: float = 1.0
    max_halvings: int = 5
    sampling_kernel: SamplingKernel = field(default_factory=SamplingKernel)
    procrustes_cadence: int = 32
    split_offset: float = 0.01
    mode: Mode = Mode.SPATIOTEMPORAL
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "alpha_schedule", AlphaSchedule(self.alpha_schedule))
        if isinstance(self.sampling_kernel, dict):
            object.__setattr__(self, "sampling_kernel", SamplingKernel(**self.sampling_kernel))
        self.validate()

    def validate(self) -> None:
        if not self.alpha_start >= self.alpha_end > 0:
            raise InvalidSpec("need alpha_start >= alpha_end > 0")
        tp = self.target_particles
        if tp < 1 or tp & (tp - 1):
            raise InvalidSpec(f"target_particles must be a power of two, got {tp}")
        if self.iterations_per_split < 1:
            raise InvalidSpec("iterations_per_split must be positive")
        if not 0 < self.step_decay <= 1:
            raise InvalidSpec("step_decay must lie in (0, 1]")
        if self.step_size <= 0 or self.procrustes_cadence < 1:
            raise InvalidSpec("step_size and procrustes_cadence must be positive")

    @property
    def n_levels(self) -> int:
        return int(round(math.log2(self.target_particles))) + 1

    @property
    def total_iterations(self) -> int:
        return self.n_levels * self.iterations_per_split

    @property
    def anneal_iterations(self) -> int:
        """Iterations over which alpha decays; the final level runs at ``alpha_end``."""
        return (self.n_levels - 1) * self.iterations_per_split

    def to_dict(self) -> dict:
        out = asdict(self)
        out["mode"] = self.mode.value
        out["alpha_schedule"] = self.alpha_schedule.value
        return out


@dataclass(frozen=True)
class ObjectiveBreakdown:
    total: float
    inter_subject_entropy_sum: float
    intra_subject_entropy_sum: float
    sampling_entropy_sum: float
    alpha: float
    iteration: int
    step: float = 0.0
    n_particles: int = 0
    halved: bool = False


# ---------------------------------------------------------------------------
# Shape-space entropy

def _rows(Y) -> np.ndarray:
    """Ensemble members as rows, ``(..., K, dM)``."""
    if isinstance(Y, EnsembleMatrix):
        return Y.Y.T
    return np.swapaxes(np.asarray(Y, dtype=float), -1, -2)


def _centered_basis(k: int) -> np.ndarray:
    """Orthonormal ``K x (K-1)`` basis of vectors orthogonal to all-ones."""
    q, _ = np.linalg.qr(np.eye(k) - 1.0 / k)
    return q[:, : k - 1]


def _batched_entropy(rows: np.ndarray, alpha: float) -> np.ndarray:
    k = rows.shape[-2]
    if k < 2:
        return np.zeros(rows.shape[:-2])
    q = _centered_basis(k)
    gram = rows @ np.swapaxes(rows, -1, -2)
    reduced = q.T @ gram @ q
    lam = np.linalg.eigvalsh(reduced)
    return 0.5 * np.log(np.maximum(lam, 0.0) + alpha).sum(axis=-1)


def _batched_gradient(rows: np.ndarray, alpha: float) -> np.ndarray:
    k = rows.shape[-2]
    gram = rows @ np.swapaxes(rows, -1, -2)
    return np.linalg.solve(gram + alpha * np.eye(k), rows)


def shape_entropy(Y, alpha: float) -> float:
    """Gaussian entropy of a shape-space ensemble with Tikhonov floor ``alpha``.

    Returns ``0.5 * sum_i log(lambda_i + alpha)`` over the ``K - 1`` non-trivial
    eigenvalues of the Gram matrix ``Y^T Y`` of the centered ``dM x K``
    ensemble. These are the nonzero eigenvalues of the scatter matrix
    ``Y Y^T``; the ``1/(K-1)`` covariance normalisation only adds a constant.
    A single-member ensemble has zero entropy.
    """
    return float(_batched_entropy(_rows(Y), alpha))


def correspondence_gradient(Y, alpha: float) -> np.ndarray:
    """``Y (Y^T Y + alpha I)^{-1}``: gradient of :func:`shape_entropy`.

    Column ``j`` is the derivative of the ensemble entropy with respect to the
    flattened world-space particles of member ``j``; moving against it pulls
    the member towards the ensemble mean.
    """
    rows = _rows(Y)
    return np.swapaxes(_batched_gradient(rows, alpha), -1, -2)


# ---------------------------------------------------------------------------
# Sampling entropy

def _knn(points: np.ndarray, k: int):
    """Sorted ``k`` nearest neighbours within each point set of a ``(B, M, d)`` batch.

    Ties are resolved towards the lower particle index.
    """
    diff = points[:, :, None, :] - points[:, None, :, :]
    d2 = (diff * diff).sum(axis=-1)
    m = points.shape[1]
    d2[:, np.arange(m), np.arange(m)] = np.inf
    order = np.argsort(d2, axis=-1, kind="stable")[..., :k]
    nd2 = np.take_along_axis(d2, order, axis=-1)
    return order, nd2


def _bandwidths(points: np.ndarray, kernel: SamplingKernel, diag: np.ndarray) -> np.ndarray:
    """Adaptive kernel widths: distance to the ``ceil(k/2)``-th neighbour, clamped."""
    b, m, _ = points.shape
    if m < 2:
        return np.zeros((b, m))
    k = min(kernel.neighbors, m - 1)
    _, nd2 = _knn(points, k)
    raw = np.sqrt(nd2[..., int(math.ceil(k / 2)) - 1])
    return np.clip(raw, (kernel.sigma_min * diag)[:, None], (kernel.sigma_max * diag)[:, None])


def _pair_distances(points: np.ndarray) -> np.ndarray:
    sq = (points * points).sum(axis=-1)
    d2 = sq[..., :, None] + sq[..., None, :] - 2.0 * points @ np.swapaxes(points, -1, -2)
    return np.sqrt(np.maximum(d2, 0.0))


def _repulsion(points: np.ndarray, sigma: np.ndarray):
    """Kernel repulsion entropy per shape, its exact gradient and the kernel mass.

    For one shape with widths ``sigma`` the entropy is

        E = (1/M) sum_i sum_{j != i} psi(|x_i - x_j| / sigma_i),
        psi(r) = int_0^r exp(-u^2 / 2) du,

    so the derivative along a unit offset is the Gaussian weight
    ``w_ij = exp(-d_ij^2 / (2 sigma_i^2))``. ``E`` grows as particles spread
    out and saturates once they are several widths apart.
    """
    b, m, _ = points.shape
    if m < 2:
        return np.zeros(b), np.zeros_like(points), np.zeros((b, m))
    if np.any(sigma <= 0):
        raise DegenerateConfiguration("coincident particles leave the kernel bandwidth at zero")
    dist = _pair_distances(points)
    idx = np.arange(m)
    r = dist / sigma[..., None]
    psi = _SQRT_HALF_PI * special.erf(r * _SQRT_HALF)
    psi[:, idx, idx] = 0.0
    w = np.exp(-0.5 * r * r)
    w[:, idx, idx] = 0.0
    entropy = psi.sum(axis=(-1, -2)) / m
    # grad_i = (1/M) sum_j (w_ij / sigma_i + w_ji / sigma_j) (x_i - x_j) / d_ij
    c = w / sigma[..., None]
    c = c + np.swapaxes(c, -1, -2)
    dist[:, idx, idx] = np.inf
    c /= np.maximum(dist, 1e-300)
    grad = (c.sum(axis=-1)[..., None] * points - c @ points) / m
    return entropy, grad, w.sum(axis=-1)


def _precondition(grad: np.ndarray, sigma: np.ndarray, wsum: np.ndarray) -> np.ndarray:
    """Scale particle ``i`` by ``M sigma_i^2 / (2 sum_j w_ij)`` and cap the move at ``sigma_i``.

    On the repulsion gradient this gives the kernel-weighted mean of the unit
    offsets from the neighbours times ``sigma_i``. The scale is positive per
    particle, so the result stays an ascent direction of whatever ``grad`` is
    the gradient of.
    """
    m = grad.shape[-2]
    scale = m * sigma ** 2 / (2.0 * np.maximum(wsum, 1e-12))
    step = scale[..., None] * grad
    norm = np.linalg.norm(step, axis=-1)
    shrink = np.where(norm > sigma, sigma / np.maximum(norm, 1e-300), 1.0)
    return step * shrink[..., None]


def _sampling_terms(points: np.ndarray, kernel: SamplingKernel, diag: np.ndarray,
                    intrinsic_dim: int | None = None, sigma: np.ndarray | None = None):
    """Adaptive-kernel Parzen entropy of each shape in a ``(B, M, d)`` batch.

    The entropy of one shape is the mean over particles of

        H_i = -log((1/k) sum_j exp(-|x_i - x_j|^2 / (2 sigma_i^2)))
              + (q/2) log(2 pi sigma_i^2)

    over the ``k`` nearest neighbours ``j``, with ``q`` the intrinsic
    (surface) dimension.
    """
    b, m, d = points.shape
    intrinsic_dim = d - 1 if intrinsic_dim is None else intrinsic_dim
    if m < 2:
        return np.zeros(b)
    k = min(kernel.neighbors, m - 1)
    _, nd2 = _knn(points, k)
    if sigma is None:
        sigma = _bandwidths(points, kernel, diag)
    s2 = sigma ** 2
    logw = -nd2 / (2.0 * s2[..., None])
    shift = logw.max(axis=-1, keepdims=True)
    wsum = np.exp(logw - shift).sum(axis=-1)
    h = -(np.log(wsum / k) + shift[..., 0]) + 0.5 * intrinsic_dim * np.log(2.0 * np.pi * s2)
    return h.mean(axis=-1)


def parzen_entropy(points: np.ndarray, kernel: SamplingKernel = SamplingKernel(),
                   diag: float | None = None, sigma: np.ndarray | None = None,
                   intrinsic_dim: int | None = None) -> float:
    """Adaptive-kernel Parzen estimate of the entropy of one ``(M, d)`` point set.

    Pass ``sigma`` to hold the bandwidths fixed (used for finite differences).
    """
    points = np.asarray(points, dtype=float)
    diag = _default_diag(points) if diag is None else diag
    sig = None if sigma is None else np.asarray(sigma, dtype=float)[None]
    return float(_sampling_terms(points[None], kernel, np.array([diag]), intrinsic_dim, sig)[0])


def _default_diag(points: np.ndarray) -> float:
    ext = points.max(axis=0) - points.min(axis=0)
    return float(np.linalg.norm(ext)) or 1.0


def sampling_entropy(points: np.ndarray, kernel: SamplingKernel = SamplingKernel(),
                     diag: float | None = None, sigma: np.ndarray | None = None) -> float:
    """Kernel repulsion entropy of one ``(M, d)`` point set (the optimizer's sampling term).

    ``sigma`` defaults to the adaptive widths of the current positions.
    """
    pts = np.asarray(points, dtype=float)[None]
    if sigma is None:
        diag = _default_diag(pts[0]) if diag is None else diag
        sigma = _bandwidths(pts, kernel, np.array([diag]))[0]
    return float(_repulsion(pts, np.asarray(sigma, dtype=float)[None])[0][0])


def sampling_gradient(shape, config: OptimizerConfig = None, normals: np.ndarray | None = None,
                      diag: float | None = None, return_sigma: bool = False):
    """Per-particle repulsion update that spreads particles over their surface.

    Each particle moves along a Gaussian-weighted mean of the unit vectors
    pointing away from the other particles, with weights at its adaptive
    bandwidth ``sigma`` and length at most ``sigma``. The update is an ascent
    direction of :func:`sampling_entropy`. With surface ``normals`` it is
    restricted to the tangent planes.
    """
    pts = np.asarray(getattr(shape, "points", shape), dtype=float)
    if pts.shape[0] < 2:
        raise DegenerateConfiguration("sampling needs at least two particles")
    if np.ptp(pts, axis=0).max() == 0:
        raise DegenerateConfiguration("all particles coincide")
    kernel = (config or OptimizerConfig()).sampling_kernel
    diag = _default_diag(pts) if diag is None else diag
    sigma = _bandwidths(pts[None], kernel, np.array([diag]))
    _, grad, wsum = _repulsion(pts[None], sigma)
    update = _precondition(grad, sigma, wsum)[0]
    if normals is not None:
        update = tangent_component(update, np.asarray(normals, dtype=float))
    return (update, sigma[0]) if return_sigma else update


# ---------------------------------------------------------------------------
# Annealing and splitting

def anneal_alpha(config: OptimizerConfig, iteration: int, total_iterations: int) -> float:
    """Weight at ``iteration`` of ``total_iterations``; endpoints are exact."""
    if total_iterations <= 0 or iteration >= total_iterations:
        return float(config.alpha_end)
    if iteration <= 0:
        return float(config.alpha_start)
    frac = iteration / total_iterations
    a0, a1 = config.alpha_start, config.alpha_end
    if config.alpha_schedule is AlphaSchedule.LINEAR:
        return float(a0 + (a1 - a0) * frac)
    return float(a0 * (a1 / a0) ** frac)


class _DomainGrid:
    """Batched signed-distance queries over a flat list of domains."""

    def __init__(self, domains):
        self.domains = list(domains)
        self.tol = np.array([dom.surface_tol for dom in self.domains])
        self.diag = np.array([dom.extent_diagonal for dom in self.domains])
        self._ellipsoids = all(isinstance(dom, EllipsoidDomain) for dom in self.domains)
        if self._ellipsoids:
            self._centers = np.array([dom.center for dom in self.domains], dtype=float)
            self._radii = np.array([dom.radii for dom in self.domains], dtype=float)

    def evaluate(self, points: np.ndarray):
        """``points`` is ``(B, M, d)``."""
        if self._ellipsoids:
            return _ellipsoid_batch(points, self._centers[:, None, :], self._radii[:, None, :])
        vals = np.empty(points.shape[:2])
        grads = np.empty_like(points)
        for i, dom in enumerate(self.domains):
            vals[i], grads[i] = dom.evaluate(points[i])
        return vals, grads

    def project(self, points: np.ndarray, max_steps: int = 50) -> np.ndarray:
        p = np.array(points, dtype=float)
        tol = self.tol[:, None]
        for _ in range(max_steps + 1):
            v, g = self.evaluate(p)
            active = np.abs(v) > tol
            if not active.any():
                return p
            gn2 = (g * g).sum(axis=-1)
            if np.any(gn2[active] < 1e-12):
                raise ProjectionFailure("vanishing sdf gradient during projection")
            step = np.where(active, v / np.where(active, gn2, 1.0), 0.0)
            p = p - step[..., None] * g
        raise ProjectionFailure(f"particles failed to reach the surface in {max_steps} steps "
                                f"(max residual {np.abs(v).max():.3e})")


def _flat_domains(domains) -> list:
    if isinstance(domains, ShapeDomain):
        return [domains]
    out = []
    for row in domains:
        out.extend(row if not isinstance(row, ShapeDomain) else [row])
    return out


def initialize_particles(domains) -> np.ndarray:
    """One particle per domain at the surface point nearest its centroid.

    Returns ``(N, T, 1, d)``.
    """
    grid = [list(row) for row in domains]
    n, t = len(grid), len(grid[0])
    flat = _DomainGrid(_flat_domains(grid))
    start = np.array([dom.centroid for dom in flat.domains])[:, None, :]
    _, g = flat.evaluate(start)
    weak = (g * g).sum(axis=-1)[:, 0] < 1e-12
    if weak.any():
        # Flat sdf at the centroid: nudge along a fixed direction.
        nudge = np.array([3.0, 2.0, 1.0][: start.shape[-1]])
        nudge = nudge / np.linalg.norm(nudge)
        start[weak, 0] += 1e-3 * flat.diag[weak, None] * nudge
    pts = flat.project(start)
    return pts.reshape(n, t, 1, -1)


def split_particles(pdm: Cohort, offset_scale: float, seed: int, domains=None) -> Cohort:
    """Double the particle count; particle ``m`` becomes ``2m`` and ``2m + 1``.

    Children sit at ``x + delta_m`` and ``x - delta_m`` with the same random
    offset ``delta_m`` (length ``offset_scale``) on every shape, so
    correspondence is preserved at birth. With ``domains`` (an ``N x T`` grid)
    the children are projected back onto their surfaces.
    """
    m = pdm.n_points
    if m & (m - 1):
        raise InvalidSpec(f"particle count {m} is not a power of two")
    rng = np.random.default_rng(seed)
    delta = rng.normal(size=(m, pdm.dim))
    delta *= offset_scale / np.linalg.norm(delta, axis=1, keepdims=True)
    pts = pdm.points
    children = np.empty(pts.shape[:2] + (2 * m, pdm.dim))
    children[:, :, 0::2] = pts + delta
    children[:, :, 1::2] = pts - delta
    if domains is not None:
        n, t = pts.shape[:2]
        grid = _DomainGrid(_flat_domains(domains))
        children = grid.project(children.reshape(n * t, 2 * m, -1)).reshape(children.shape)
    return pdm.replace_points(children)


# ---------------------------------------------------------------------------
# The optimizer

@dataclass
class OptimizationResult:
    pdm: Cohort
    trace: list
    rotations: np.ndarray          # (N, T, d, d)
    translations: np.ndarray       # (N, T, d)
    config: OptimizerConfig
    completed: bool = True

    def world(self) -> np.ndarray:
        return _to_world(self.pdm.points, self.rotations, self.translations)


def _to_world(x, rot, tr):
    return np.einsum("ntij,ntmj->ntmi", rot, x) + tr[:, :, None, :]


class _State:
    """Mutable optimizer state; everything needed to resume a run."""

    def __init__(self, x, rot, tr, sigma, level, it_level, global_it, step, halvings, trace):
        self.x, self.rot, self.tr, self.sigma = x, rot, tr, sigma
        self.level, self.it_level, self.global_it = level, it_level, global_it
        self.step, self.halvings, self.trace = step, halvings, trace

    def save(self, path) -> None:
        cols = ["total", "inter", "intra", "sampling", "alpha", "iteration", "step", "n", "halved"]
        tr = np.array([[getattr(r, f) for f in ObjectiveBreakdown.__dataclass_fields__] for r in self.trace],
                      dtype=float).reshape(-1, len(cols))
        tmp = str(path) + ".tmp.npz"
        np.savez(tmp, x=self.x, rot=self.rot, tr=self.tr, sigma=self.sigma, trace=tr,
                 counters=np.array([self.level, self.it_level, self.global_it, self.halvings]),
                 step=np.array(self.step))
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "_State":
        with np.load(path) as z:
            level, it_level, global_it, halvings = (int(v) for v in z["counters"])
            trace = [ObjectiveBreakdown(float(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]),
                                        int(r[5]), float(r[6]), int(r[7]), bool(r[8])) for r in z["trace"]]
            return cls(z["x"].copy(), z["rot"].copy(), z["tr"].copy(), z["sigma"].copy(),
                       level, it_level, global_it,
                       float(z["step"]), halvings, trace)


class _Problem:
    """Objective and gradient evaluation for a fixed domain grid and mode."""

    def __init__(self, domains, config: OptimizerConfig):
        self.config = config
        self.n, self.t = len(domains), len(domains[0])
        self.grid = _DomainGrid(_flat_domains(domains))
        self.spatiotemporal = config.mode is Mode.SPATIOTEMPORAL

    def entropies(self, z: np.ndarray, alpha: float):
        n, t, m, d = z.shape
        flat = z.reshape(n, t, m * d)
        by_time = np.swapaxes(flat, 0, 1)                      # (T, N, dM)
        by_time = by_time - by_time.mean(axis=1, keepdims=True)
        inter = float(_batched_entropy(by_time, alpha).sum())
        intra = 0.0
        by_subject = None
        if self.spatiotemporal:
            by_subject = flat - flat.mean(axis=1, keepdims=True)  # (N, T, dM)
            intra = float(_batched_entropy(by_subject, alpha).sum())
        return inter, intra, by_time, by_subject

    def bandwidths(self, x) -> np.ndarray:
        n, t, m, d = x.shape
        return _bandwidths(x.reshape(n * t, m, d), self.config.sampling_kernel,
                           self.grid.diag).reshape(n, t, m)

    def evaluate(self, x, rot, tr, sigma, alpha: float, with_gradient: bool = False):
        n, t, m, d = x.shape
        z = _to_world(x, rot, tr)
        inter, intra, by_time, by_subject = self.entropies(z, alpha)
        flat_sigma = sigma.reshape(n * t, m)
        h, h_grad, wsum = _repulsion(x.reshape(n * t, m, d), flat_sigma)
        sampling = float(h.sum())
        total = alpha * (inter + intra) - sampling
        if not with_gradient:
            return total, inter, intra, sampling, None
        grad = np.swapaxes(_batched_gradient(by_time, alpha), 0, 1)
        if by_subject is not None:
            grad = grad + _batched_gradient(by_subject, alpha)
        grad_world = grad.reshape(n, t, m, d)
        # World-space vectors back to configuration space: R^T v.
        grad_cfg = np.einsum("ntji,ntmj->ntmi", rot, grad_world)
        descent = h_grad.reshape(x.shape) - alpha * grad_cfg
        if m < 2:
            return total, inter, intra, sampling, descent
        update = _precondition(descent.reshape(n * t, m, d), flat_sigma, wsum)
        return total, inter, intra, sampling, update.reshape(x.shape)

    def realign(self, x):
        n, t, m, d = x.shape
        if m <= d:
            # Too few particles to fix a rotation: translation only.
            rot = np.broadcast_to(np.eye(d), (n, t, d, d)).copy()
            tr = -x.mean(axis=2)
            return rot, tr
        res = generalized_procrustes(x.reshape(n * t, m, d), max_iters=100, tol=1e-8)
        return res.rotations.reshape(n, t, d, d), res.translations.reshape(n, t, d)

    def tangent(self, x, update):
        n, t, m, d = x.shape
        _, g = self.grid.evaluate(x.reshape(n * t, m, d))
        return tangent_component(update, g.reshape(x.shape))

    def project(self, x):
        n, t, m, d = x.shape
        return self.grid.project(x.reshape(n * t, m, d)).reshape(x.shape)


def _dump(state: _State, config: OptimizerConfig, dump_dir) -> str:
    dump_dir = Path(dump_dir or tempfile.gettempdir())
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"stpsm_nonfinite_{os.getpid()}.npz"
    state.save(path)
    return str(path)


def optimize(cohort_domains, config: OptimizerConfig, checkpoint_path=None,
             checkpoint_every: int = 0, resume: bool = False, stop_after: int | None = None,
             dump_dir=None, subject_ids=(), time_labels=()) -> OptimizationResult:
    """Optimize particle positions on an ``N x T`` grid of shape domains.

    Starts from one particle per shape, and for every particle level runs
    ``iterations_per_split`` gradient iterations before splitting, until
    ``target_particles`` is reached and its own budget is spent. Each
    iteration moves all particles along the combined correspondence and
    sampling update, restricted to tangent planes and projected back onto the
    surfaces. An iteration that raises the objective halves the step for the
    rest of the level; once ``max_halvings`` halvings are spent, such an
    iteration backtracks to shorter trial steps and is discarded if none of
    them lowers the objective.

    In cross-sectional mode only the first time point of every subject is
    optimized and the result has ``T = 1``.

    ``checkpoint_path`` with ``checkpoint_every > 0`` saves the state
    periodically; ``resume=True`` continues from it. ``stop_after`` ends the
    run after that many iterations in this call (simulates an interruption)
    and returns ``completed=False``.
    """
    config.validate()
    domains = [list(row) for row in cohort_domains]
    if not domains or not domains[0] or any(len(row) != len(domains[0]) for row in domains):
        raise InvalidSpec("domain grid must be dense and non-empty")
    if config.mode is Mode.CROSS_SECTIONAL:
        domains = [[row[0]] for row in domains]
        time_labels = tuple(time_labels[:1])
    problem = _Problem(domains, config)

    if resume and checkpoint_path and Path(checkpoint_path).exists():
        state = _State.load(checkpoint_path)
    else:
        x = initialize_particles(domains)
        rot, tr = problem.realign(x)
        state = _State(x, rot, tr, problem.bandwidths(x), level=0, it_level=0, global_it=0,
                       step=config.step_size, halvings=0, trace=[])

    done_this_call = 0
    ipl = config.iterations_per_split
    while state.level < config.n_levels:
        while state.it_level < ipl:
            if stop_after is not None and done_this_call >= stop_after:
                if checkpoint_path:
                    state.save(checkpoint_path)
                return _result(state, config, subject_ids, time_labels, completed=False)
            _iterate(problem, state, config, dump_dir)
            done_this_call += 1
            if checkpoint_path and checkpoint_every and state.global_it % checkpoint_every == 0:
                state.save(checkpoint_path)
        if state.level + 1 < config.n_levels:
            cohort = Cohort(state.x)
            seed = derive_seed(config.rng_seed, "split", state.level)
            offset = config.split_offset * float(np.mean(problem.grid.diag))
            state.x = split_particles(cohort, offset, seed, domains).points.copy()
            state.rot, state.tr = problem.realign(state.x)
            state.sigma = problem.bandwidths(state.x)
            state.step = config.step_size
            state.halvings = 0
        state.level += 1
        state.it_level = 0
    if checkpoint_path:
        state.save(checkpoint_path)
    return _result(state, config, subject_ids, time_labels, completed=True)


def _iterate(problem: _Problem, state: _State, config: OptimizerConfig, dump_dir) -> None:
    alpha = anneal_alpha(config, state.global_it, config.anneal_iterations)
    if state.it_level > 0 and state.it_level % config.procrustes_cadence == 0:
        rot, tr = problem.realign(state.x)
        old = problem.evaluate(state.x, state.rot, state.tr, state.sigma, alpha)[0]
        new = problem.evaluate(state.x, rot, tr, state.sigma, alpha)[0]
        if new <= old:
            state.rot, state.tr = rot, tr

    total, inter, intra, samp, update = problem.evaluate(state.x, state.rot, state.tr, state.sigma,
                                                         alpha, with_gradient=True)
    if not np.isfinite(total) or not np.all(np.isfinite(update)):
        path = _dump(state, config, dump_dir)
        raise NonFiniteObjective(f"non-finite objective at iteration {state.global_it}", path)

    step = state.step
    x_new = problem.project(state.x + step * problem.tangent(state.x, update))
    new = problem.evaluate(x_new, state.rot, state.tr, state.sigma, alpha)
    halved = False
    if not np.isfinite(new[0]):
        path = _dump(state, config, dump_dir)
        raise NonFiniteObjective(f"non-finite objective at iteration {state.global_it}", path)
    if new[0] <= total:
        state.x = x_new
        total, inter, intra, samp = new[:4]
    elif state.halvings < config.max_halvings:
        # Keep the move but halve the step for the rest of the level.
        state.x = x_new
        total, inter, intra, samp = new[:4]
        halved = True
        state.step *= 0.5
        state.halvings += 1
    else:
        # Halving budget spent: backtrack within this iteration only. If no
        # shorter trial lowers the objective the move is dropped.
        trial = step
        for _ in range(_BACKTRACKS):
            trial *= 0.5
            x_try = problem.project(state.x + trial * problem.tangent(state.x, update))
            cand = problem.evaluate(x_try, state.rot, state.tr, state.sigma, alpha)
            if np.isfinite(cand[0]) and cand[0] <= total:
                state.x = x_try
                total, inter, intra, samp = cand[:4]
                step = trial
                break
    state.step *= config.step_decay
    m = state.x.shape[2]
    state.trace.append(ObjectiveBreakdown(total, inter, intra, samp, alpha, state.global_it,
                                          step, m, halved))
    state.global_it += 1
    state.it_level += 1


def _result(state, config, subject_ids, time_labels, completed) -> OptimizationResult:
    pdm = Cohort(state.x, subject_ids=tuple(subject_ids), time_labels=tuple(time_labels))
    return OptimizationResult(pdm=pdm, trace=list(state.trace), rotations=state.rot,
                              translations=state.tr, config=config, completed=completed)


def propagate_by_projection(pdm_first: Cohort, cohort_domains) -> Cohort:
    """Carry first-frame particles through each subject's sequence by index.

    Particles of frame ``t`` are the closest points on domain ``(n, t)`` to
    the particles of frame ``t - 1``, so each subject is tracked on its own
    without any population statistics.
    """
    domains = [list(row) for row in cohort_domains]
    n, t = len(domains), len(domains[0])
    pts = np.empty((n, t) + pdm_first.points.shape[2:])
    pts[:, 0] = pdm_first.points[:, 0]
    for j in range(1, t):
        grid = _DomainGrid([row[j] for row in domains])
        pts[:, j] = grid.project(pts[:, j - 1])
    return Cohort(pts, subject_ids=pdm_first.subject_ids)


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("iteration,alpha,total,inter_entropy,intra_entropy,sampling_entropy,step\n")
        for r in trace:
            fh.write(f"{r.iteration},{r.alpha!r},{r.total!r},{r.inter_subject_entropy_sum!r},"
                     f"{r.intra_subject_entropy_sum!r},{r.sampling_entropy_sum!r},{r.step!r}\n")
