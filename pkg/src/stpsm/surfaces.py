"""Shape domains as signed-distance functions, surface projection and the
synthetic ellipsoid cohort generator.

Signed distances are negative inside a shape. Every domain evaluates batches
of points at once: ``domain.evaluate(points)`` returns ``(values, gradients)``
for an ``(P, d)`` array.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import InvalidSpec, OutOfBounds, ProjectionFailure

__all__ = [
    "ShapeDomain",
    "EllipsoidDomain",
    "PlaneDomain",
    "GridDomain",
    "SynthSpec",
    "SyntheticCohort",
    "sdf_eval",
    "project_to_surface",
    "project_points",
    "tangent_component",
    "fibonacci_sphere",
    "generate_synthetic_cohort",
    "save_domain",
    "load_domain",
]

_NEWTON_MAX_STEPS = 200


class ShapeDomain:
    """Base class for immutable signed-distance shape domains."""

    surface_tol: float

    @property
    def dim(self) -> int:
        return len(self.bounds[0])

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Box on which the signed distance is defined."""
        raise NotImplementedError

    @property
    def extent_diagonal(self) -> float:
        """Diagonal of the tight bounding box of the shape itself."""
        raise NotImplementedError

    @property
    def centroid(self) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def contains(self, points: np.ndarray, slack: float = 0.0) -> np.ndarray:
        lo, hi = self.bounds
        points = np.atleast_2d(points)
        return np.all((points >= lo - slack) & (points <= hi + slack), axis=-1)


def _ellipsoid_closest(y: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Closest point on an axis-aligned ellipsoid for points in the positive orthant.

    ``y`` holds absolute coordinates relative to the center, ``a`` the radii
    (broadcast to ``y``). The nearest point is ``a^2 y / (a^2 + lam)`` where
    ``lam`` is the root of a monotone secular equation found by Newton's method. The
    branch where the root sits on the pole ``-a_min^2`` (interior points on a
    plane through the shortest axes) is solved in closed form.
    """
    a2 = a * a
    amin = a.min(axis=-1, keepdims=True)
    on_min = a <= amin
    ymin_axis = np.where(on_min, y, 0.0).max(axis=-1, keepdims=True)

    gap = a2 - amin * amin
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(~on_min & (y > 0), a * y / gap, 0.0)
    degenerate = (ymin_axis[..., 0] == 0.0) & ((off * off).sum(axis=-1) <= 1.0)

    # Solve for s = lam + a_min^2 >= 0 so that a_i^2 + lam = gap_i + s keeps
    # full precision near the pole. The secular function is convex and
    # decreasing in s, so Newton iterates started where it is non-negative
    # increase monotonically to the root without overshooting.
    s = amin * ymin_axis
    cy2 = np.where(y > 0, a * y, 0.0) ** 2
    for _ in range(_NEWTON_MAX_STEPS):
        u = gap + s
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(cy2 > 0, cy2 / (u * u), 0.0).sum(axis=-1, keepdims=True) - 1.0
            fp = -2.0 * np.where(cy2 > 0, cy2 / (u * u * u), 0.0).sum(axis=-1, keepdims=True)
            step = np.where((f > 0) & (fp < 0), -f / fp, 0.0)
        step = np.nan_to_num(step, nan=0.0, posinf=0.0)
        s = s + step
        if np.all(step <= 1e-15 * np.maximum(s, amin * amin)):
            break
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(y > 0, a2 * y / (gap + s), 0.0)

    if np.any(degenerate):
        qd = off * a
        rest = np.sqrt(np.maximum(0.0, 1.0 - (off * off).sum(axis=-1)))
        first_min = np.argmax(on_min, axis=-1)
        idx = np.nonzero(degenerate)
        qd[idx + (first_min[idx],)] = amin[..., 0][idx] * rest[idx]
        q = np.where(degenerate[..., None], qd, q)
    return q


@dataclass(frozen=True)
class EllipsoidDomain(ShapeDomain):
    """Axis-aligned ellipsoid with exact signed distance.

    The value is the true Euclidean distance to the nearest surface point and
    the gradient is the outward unit normal at that point.
    """

    radii: tuple
    center: tuple = (0.0, 0.0, 0.0)
    surface_tol: float | None = None
    padding: float | None = None

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        center = tuple(float(c) for c in self.center)
        if len(center) != len(radii):
            center = tuple([0.0] * len(radii))
        if min(radii) <= 0:
            raise InvalidSpec(f"ellipsoid radii must be positive, got {radii}")
        object.__setattr__(self, "radii", radii)
        object.__setattr__(self, "center", center)
        if self.surface_tol is None:
            object.__setattr__(self, "surface_tol", 1e-4 * self.extent_diagonal)
        if self.padding is None:
            object.__setattr__(self, "padding", max(radii))

    @classmethod
    def sphere(cls, radius: float = 1.0, center=(0.0, 0.0, 0.0), **kwargs) -> "EllipsoidDomain":
        return cls(radii=(radius,) * len(center), center=center, **kwargs)

    @property
    def bounds(self):
        c = np.asarray(self.center)
        r = np.asarray(self.radii) + self.padding
        return c - r, c + r

    @property
    def extent_diagonal(self) -> float:
        return float(2.0 * np.linalg.norm(self.radii))

    @property
    def centroid(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    def closest_points(self, points: np.ndarray) -> np.ndarray:
        rel = np.atleast_2d(points) - np.asarray(self.center)
        sgn = np.where(rel < 0, -1.0, 1.0)
        q = _ellipsoid_closest(np.abs(rel), np.broadcast_to(self.radii, rel.shape))
        return sgn * q + np.asarray(self.center)

    def evaluate(self, points):
        return _ellipsoid_batch(np.atleast_2d(points), np.asarray(self.center), np.asarray(self.radii))

    def implicit(self, points) -> np.ndarray:
        """Normalized implicit function ``|(p - c) / r| - 1`` (not a distance)."""
        rel = (np.atleast_2d(points) - np.asarray(self.center)) / np.asarray(self.radii)
        return np.linalg.norm(rel, axis=-1) - 1.0

    def point_at(self, directions: np.ndarray) -> np.ndarray:
        """Map unit-sphere directions through the ellipsoid parameterization."""
        return np.asarray(self.center) + np.asarray(directions) * np.asarray(self.radii)


def _ellipsoid_batch(points, centers, radii):
    """Signed distance and gradient for points against per-point ellipsoids."""
    rel = points - centers
    sgn = np.where(rel < 0, -1.0, 1.0)
    y = np.abs(rel)
    a = np.broadcast_to(radii, y.shape)
    q = _ellipsoid_closest(y, a)
    dist = np.linalg.norm(y - q, axis=-1)
    inside = ((y / a) ** 2).sum(axis=-1) < 1.0
    values = np.where(inside, -dist, dist)
    normal = q / (a * a)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    return values, sgn * normal


@dataclass(frozen=True)
class PlaneDomain(ShapeDomain):
    """Half-space ``normal . x <= offset`` restricted to a box."""

    normal: tuple
    offset: float = 0.0
    half_width: float = 10.0
    surface_tol: float = 1e-6

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", tuple(n / np.linalg.norm(n)))

    @property
    def bounds(self):
        d = len(self.normal)
        return -self.half_width * np.ones(d), self.half_width * np.ones(d)

    @property
    def extent_diagonal(self) -> float:
        return float(2 * self.half_width * math.sqrt(len(self.normal)))

    @property
    def centroid(self):
        return np.asarray(self.normal) * self.offset

    def evaluate(self, points):
        points = np.atleast_2d(points)
        n = np.asarray(self.normal)
        return points @ n - self.offset, np.broadcast_to(n, points.shape).copy()


@dataclass(frozen=True, eq=False)
class GridDomain(ShapeDomain):
    """Signed distance sampled on a regular grid, trilinearly interpolated.

    ``values[i, j, k]`` is the distance at ``origin + (i, j, k) * spacing``.
    """

    values: np.ndarray
    spacing: tuple
    origin: tuple
    surface_tol: float | None = None
    shape_diagonal: float | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if self.shape_diagonal is None:
            inside = np.argwhere(vals <= 0)
            if len(inside):
                ext = (inside.max(axis=0) - inside.min(axis=0) + 1) * np.asarray(self.spacing)
                diag = float(np.linalg.norm(ext))
            else:
                diag = float(np.linalg.norm((np.asarray(vals.shape) - 1) * self.spacing))
            object.__setattr__(self, "shape_diagonal", diag)
        if self.surface_tol is None:
            object.__setattr__(self, "surface_tol", 1e-4 * self.shape_diagonal)

    @classmethod
    def from_domain(cls, domain: ShapeDomain, spacing: float, **kwargs) -> "GridDomain":
        lo, hi = domain.bounds
        counts = np.floor((hi - lo) / spacing + 1e-9).astype(int) + 1
        axes = [lo[i] + spacing * np.arange(counts[i]) for i in range(len(lo))]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        vals, _ = domain.evaluate(mesh.reshape(-1, len(lo)))
        kwargs.setdefault("shape_diagonal", domain.extent_diagonal)
        return cls(vals.reshape(tuple(counts)), (spacing,) * len(lo), tuple(lo), **kwargs)

    @property
    def bounds(self):
        lo = np.asarray(self.origin)
        return lo, lo + (np.asarray(self.values.shape) - 1) * np.asarray(self.spacing)

    @property
    def extent_diagonal(self) -> float:
        return float(self.shape_diagonal)

    @property
    def centroid(self):
        idx = np.argwhere(self.values <= 0)
        if not len(idx):
            lo, hi = self.bounds
            return 0.5 * (lo + hi)
        return np.asarray(self.origin) + idx.mean(axis=0) * np.asarray(self.spacing)

    def evaluate(self, points):
        points = np.atleast_2d(points).astype(float)
        d = points.shape[1]
        h = np.asarray(self.spacing)
        shape = np.asarray(self.values.shape)
        g = (points - np.asarray(self.origin)) / h
        base = np.clip(np.floor(g).astype(int), 0, shape - 2)
        frac = np.clip(g - base, 0.0, 1.0)
        value = np.zeros(len(points))
        grad = np.zeros_like(points)
        for corner in range(2 ** d):
            bits = np.array([(corner >> k) & 1 for k in range(d)])
            idx = tuple((base + bits).T)
            v = self.values[idx]
            w_axes = np.where(bits, frac, 1.0 - frac)
            value += v * w_axes.prod(axis=1)
            for k in range(d):
                others = np.delete(w_axes, k, axis=1).prod(axis=1)
                grad[:, k] += v * others * (1.0 if bits[k] else -1.0) / h[k]
        return value, grad


def sdf_eval(domain: ShapeDomain, p) -> tuple[float, np.ndarray]:
    """Signed distance and gradient at a single point."""
    p = np.asarray(p, dtype=float)
    if not domain.contains(p)[0]:
        raise OutOfBounds(f"point {p} outside domain bounds")
    v, g = domain.evaluate(p[None])
    return float(v[0]), g[0]


def project_points(domain: ShapeDomain, points: np.ndarray, max_steps: int = 50,
                   tol: float | None = None) -> np.ndarray:
    """Newton-project a batch of points onto the zero level set."""
    tol = domain.surface_tol if tol is None else tol
    p = np.array(points, dtype=float, ndmin=2)
    for _ in range(max_steps + 1):
        v, g = domain.evaluate(p)
        active = np.abs(v) > tol
        if not active.any():
            return p
        gn2 = (g * g).sum(axis=1)
        if np.any(gn2[active] < 1e-12):
            raise ProjectionFailure("vanishing sdf gradient during projection")
        step = np.where(active, v / np.where(active, gn2, 1.0), 0.0)
        p = p - step[:, None] * g
    raise ProjectionFailure(f"projection did not reach |sdf| <= {tol} in {max_steps} steps "
                            f"(max residual {np.abs(v).max():.3e})")


def project_to_surface(domain: ShapeDomain, p, max_steps: int = 50) -> np.ndarray:
    """Move ``p`` along the sdf gradient until ``|sdf| <= surface_tol``."""
    return project_points(domain, np.asarray(p, dtype=float)[None], max_steps)[0]


def tangent_component(vectors: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Remove the component of each vector along the matching (unit) normal."""
    n = normals / np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), 1e-300)
    return vectors - (vectors * n).sum(axis=-1, keepdims=True) * n


def fibonacci_sphere(count: int) -> np.ndarray:
    """Deterministic, near-uniform unit vectors on the 2-sphere."""
    i = np.arange(count) + 0.5
    z = 1.0 - 2.0 * i / count
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


# ---------------------------------------------------------------------------
# Synthetic cohorts

@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a synthetic cohort of pulsating ellipsoids.

    Subject ``n`` gets base radii drawn from ``N(radii_mean, radii_std)``.
    Radius ``i`` at frame ``t`` (zero-based) is multiplied by
    ``1 + amplitude[i] * sin(2 pi t / T + phase[i])``, one full period over the
    sequence, and perturbed by Gaussian noise of ``noise_stdev``.
    """

    n_subjects: int = 8
    n_timepoints: int = 10
    radii_mean: tuple = (1.0, 0.75, 0.5)
    radii_std: tuple = (0.08, 0.06, 0.04)
    amplitude: tuple = (0.2, 0.0, 0.0)
    phase: tuple = (0.0, 0.0, 0.0)
    noise_stdev: float = 0.0
    seed: int = 0
    n_points: int = 256

    def validate(self) -> None:
        d = len(self.radii_mean)
        if self.n_subjects < 1 or self.n_timepoints < 1 or self.n_points < 1:
            raise InvalidSpec("subject, time point and point counts must be positive")
        for name in ("radii_std", "amplitude", "phase"):
            if len(getattr(self, name)) != d:
                raise InvalidSpec(f"{name} must have {d} entries")
        if min(self.radii_mean) <= 0:
            raise InvalidSpec("radii_mean must be positive")
        if any(s < 0 for s in self.radii_std) or self.noise_stdev < 0:
            raise InvalidSpec("standard deviations must be non-negative")
        if any(abs(a) >= 1 for a in self.amplitude):
            raise InvalidSpec("modulation amplitude must be below 1 to keep radii positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticCohort:
    domains: list                 # N x T nested list of EllipsoidDomain
    truth: np.ndarray             # (N, T, M, d) ground-truth correspondences
    radii: np.ndarray             # (N, T, d)
    directions: np.ndarray        # (M, d) unit-sphere sample
    spec: SynthSpec = field(default_factory=SynthSpec)


def _positive_normal(rng, mean, std, size):
    out = rng.normal(mean, std, size=size)
    bad = out <= 0
    while bad.any():
        out[bad] = rng.normal(np.broadcast_to(mean, size)[bad], np.broadcast_to(std, size)[bad])
        bad = out <= 0
    return out


def generate_synthetic_cohort(spec: SynthSpec) -> SyntheticCohort:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, t = spec.n_subjects, spec.n_timepoints
    mean = np.asarray(spec.radii_mean, dtype=float)
    std = np.asarray(spec.radii_std, dtype=float)
    base = _positive_normal(rng, mean, std, (n, len(mean)))
    phase = 2.0 * np.pi * np.arange(t) / t
    modulation = 1.0 + np.asarray(spec.amplitude) * np.sin(phase[:, None] + np.asarray(spec.phase))
    radii = base[:, None, :] * modulation[None, :, :]
    if spec.noise_stdev > 0:
        noise = rng.normal(0.0, spec.noise_stdev, size=radii.shape)
        bad = radii + noise <= 0
        while bad.any():
            noise[bad] = rng.normal(0.0, spec.noise_stdev, size=int(bad.sum()))
            bad = radii + noise <= 0
        radii = radii + noise
    directions = fibonacci_sphere(spec.n_points)
    truth = radii[:, :, None, :] * directions[None, None, :, :]
    domains = [[EllipsoidDomain(radii=tuple(radii[i, j])) for j in range(t)] for i in range(n)]
    return SyntheticCohort(domains=domains, truth=truth, radii=radii, directions=directions, spec=spec)


# ---------------------------------------------------------------------------
# Domain files

_VOLUME_MAGIC = "STPSM-SDF 1"


def save_domain(path, domain: ShapeDomain) -> None:
    """Write an analytic domain as JSON or a grid domain as a volume file."""
    path = Path(path)
    if isinstance(domain, EllipsoidDomain):
        doc = {"kind": "ellipsoid", "radii": list(domain.radii), "center": list(domain.center),
               "surface_tol": domain.surface_tol, "padding": domain.padding}
        path.write_text(json.dumps(doc) + "\n")
    elif isinstance(domain, GridDomain):
        header = {"dims": list(domain.values.shape), "spacing": list(domain.spacing),
                  "origin": list(domain.origin), "surface_tol": domain.surface_tol,
                  "shape_diagonal": domain.shape_diagonal}
        with open(path, "wb") as fh:
            fh.write((_VOLUME_MAGIC + "\n" + json.dumps(header) + "\n").encode())
            fh.write(np.ascontiguousarray(domain.values, dtype="<f4").tobytes())
    else:
        raise TypeError(f"cannot serialize {type(domain).__name__}")


def load_domain(path) -> ShapeDomain:
    path = Path(path)
    with open(path, "rb") as fh:
        first = fh.readline()
        if first.decode(errors="replace").strip() == _VOLUME_MAGIC:
            header = json.loads(fh.readline())
            data = np.frombuffer(fh.read(), dtype="<f4").astype(float)
            return GridDomain(data.reshape(header["dims"]), header["spacing"], header["origin"],
                              surface_tol=header.get("surface_tol"),
                              shape_diagonal=header.get("shape_diagonal"))
    doc = json.loads(path.read_text())
    if doc.get("kind") != "ellipsoid":
        raise ValueError(f"unknown domain kind in {path}: {doc.get('kind')!r}")
    return EllipsoidDomain(radii=tuple(doc["radii"]), center=tuple(doc["center"]),
                           surface_tol=doc.get("surface_tol"), padding=doc.get("padding"))
