"""Cohort containers, rigid alignment and centered ensemble matrices.

Point sets are stored as ``(M, d)`` arrays. A cohort keeps its whole grid in
one ``(N, T, M, d)`` array so the optimizer and the metrics can work on it
without Python loops. Whenever a point set is flattened to a ``dM`` vector the
order is point-major: ``x1, y1, z1, x2, y2, z2, ...``.
"""
from __future__ import annotations

import enum
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateShape, IndexOutOfRange, ShapeMismatch

__all__ = [
    "PointSet",
    "Cohort",
    "RigidTransform",
    "EnsembleAxis",
    "EnsembleMatrix",
    "AlignmentResult",
    "optimal_rotation",
    "generalized_procrustes",
    "procrustes_align",
    "build_ensemble",
    "apply_transform",
    "flatten_points",
    "unflatten_points",
    "read_particles",
    "write_particles",
    "particle_filename",
    "write_manifest",
    "read_manifest",
]


@dataclass(frozen=True)
class PointSet:
    """An ordered set of ``M`` particles in ``d`` dimensions."""

    points: np.ndarray
    domain_id: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ShapeMismatch(f"point set must be (M, d) with M >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point set contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def flatten(self) -> np.ndarray:
        return self.points.reshape(-1)


@dataclass(frozen=True)
class Cohort:
    """Dense ``N x T`` grid of point sets sharing ``M`` and ``d``.

    ``mask`` (``N x T`` booleans) is only used by the dynamical-model code to
    mark observed frames; the particle grid itself is always fully populated.
    """

    points: np.ndarray
    subject_ids: tuple = ()
    time_labels: tuple = ()
    mask: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 4:
            raise ShapeMismatch(f"cohort points must be (N, T, M, d), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("cohort contains non-finite coordinates")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        n, t = pts.shape[:2]
        subj = tuple(self.subject_ids) or tuple(f"subject{i + 1}" for i in range(n))
        times = tuple(self.time_labels) or tuple(str(j + 1) for j in range(t))
        if len(subj) != n or len(times) != t:
            raise ShapeMismatch("label counts do not match the cohort grid")
        object.__setattr__(self, "subject_ids", subj)
        object.__setattr__(self, "time_labels", times)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != (n, t):
                raise ShapeMismatch("mask must be N x T")
            object.__setattr__(self, "mask", mask)

    @classmethod
    def from_grid(cls, shapes: Sequence[Sequence[PointSet]], **kwargs) -> "Cohort":
        arr = np.array([[np.asarray(s.points) for s in row] for row in shapes], dtype=float)
        return cls(arr, **kwargs)

    @property
    def n_subjects(self) -> int:
        return self.points.shape[0]

    @property
    def n_times(self) -> int:
        return self.points.shape[1]

    @property
    def n_points(self) -> int:
        return self.points.shape[2]

    @property
    def dim(self) -> int:
        return self.points.shape[3]

    def shape(self, n: int, t: int) -> PointSet:
        return PointSet(self.points[n, t], domain_id=f"{self.subject_ids[n]}_{self.time_labels[t]}")

    def observations(self) -> np.ndarray:
        """The cohort as ``(N, T, dM)`` flattened observation vectors."""
        n, t, m, d = self.points.shape
        return self.points.reshape(n, t, m * d)

    def replace_points(self, points: np.ndarray) -> "Cohort":
        return Cohort(points, self.subject_ids, self.time_labels, self.mask)


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion ``x -> R x + b`` (no scaling, no reflection)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=float)
        tr = np.array(self.translation, dtype=float)
        d = rot.shape[0]
        if rot.shape != (d, d) or tr.shape != (d,):
            raise ShapeMismatch("rotation must be d x d and translation a d-vector")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(tr)):
            raise ValueError("rigid transform has non-finite entries")
        ortho = np.linalg.norm(rot.T @ rot - np.eye(d))
        if ortho > 1e-9 or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        rot.setflags(write=False)
        tr.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls, d: int = 3) -> "RigidTransform":
        return cls(np.eye(d), np.zeros(d))

    @property
    def dim(self) -> int:
        return self.rotation.shape[0]

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def matrix(self) -> np.ndarray:
        d = self.dim
        out = np.eye(d + 1)
        out[:d, :d] = self.rotation
        out[:d, d] = self.translation
        return out

    def is_proper(self, tol: float = 1e-10) -> bool:
        d = self.dim
        ortho = np.linalg.norm(self.rotation.T @ self.rotation - np.eye(d)) <= tol
        return bool(ortho and abs(np.linalg.det(self.rotation) - 1.0) <= tol)


def apply_transform(t: RigidTransform, p: PointSet) -> PointSet:
    if t.dim != p.dim:
        raise ShapeMismatch(f"transform is {t.dim}-D but point set is {p.dim}-D")
    return PointSet(t.apply(p.points), domain_id=p.domain_id)


def flatten_points(points: np.ndarray) -> np.ndarray:
    """Flatten trailing ``(M, d)`` axes point-major into ``dM``."""
    points = np.asarray(points)
    return points.reshape(points.shape[:-2] + (-1,))


def unflatten_points(vec: np.ndarray, d: int = 3) -> np.ndarray:
    vec = np.asarray(vec)
    return vec.reshape(vec.shape[:-1] + (-1, d))


# ---------------------------------------------------------------------------
# Procrustes

def optimal_rotation(source: np.ndarray, target: np.ndarray, allow_reflection: bool = False) -> np.ndarray:
    """Rotation ``R`` minimising ``||source @ R.T - target||`` for centered inputs.

    Works on a batch: ``source`` and ``target`` are ``(..., M, d)``. The sign of
    the last singular direction is flipped when needed so that ``det(R) = +1``.
    """
    h = np.swapaxes(source, -1, -2) @ target
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, -1, -2)
    ut = np.swapaxes(u, -1, -2)
    if allow_reflection:
        return v @ ut
    det = np.linalg.det(v @ ut)
    d = source.shape[-1]
    fix = np.ones(det.shape + (d,))
    fix[..., -1] = np.where(det < 0, -1.0, 1.0)
    return (v * fix[..., None, :]) @ ut


@dataclass
class AlignmentResult:
    """Output of :func:`generalized_procrustes`.

    ``rotations`` is ``(B, d, d)``, ``translations`` ``(B, d)``; the world
    position of point ``x`` of shape ``b`` is ``rotations[b] @ x + translations[b]``.
    """

    rotations: np.ndarray
    translations: np.ndarray
    scales: np.ndarray
    aligned: np.ndarray
    mean_shape: np.ndarray
    converged: bool
    iterations: int
    objective: list = field(default_factory=list)

    def transform(self, b: int) -> RigidTransform:
        return RigidTransform(self.rotations[b], self.translations[b])


def generalized_procrustes(shapes: np.ndarray, max_iters: int = 100, tol: float = 1e-8,
                           scaling: bool = False, reference: int = 0) -> AlignmentResult:
    """Iteratively align a batch of ``(B, M, d)`` point sets to their mean.

    Each sweep rotates every centered shape onto the current mean shape and
    then recomputes the mean; iteration stops once the mean moves less than
    ``tol`` (Frobenius norm). The global rotation of the solution is fixed by
    giving shape ``reference`` the identity rotation, which makes the result
    idempotent under re-alignment.
    """
    shapes = np.asarray(shapes, dtype=float)
    b, m, d = shapes.shape
    centroids = shapes.mean(axis=1)
    centered = shapes - centroids[:, None, :]
    norms = np.linalg.norm(centered.reshape(b, -1), axis=1)
    scale_ref = max(1.0, float(np.abs(shapes).max()))
    if np.any(norms <= 1e-12 * scale_ref):
        bad = int(np.argmax(norms <= 1e-12 * scale_ref))
        raise DegenerateShape(f"shape {bad} has all points coincident; rotation is undefined")

    scales = np.ones(b)
    rotations = np.broadcast_to(np.eye(d), (b, d, d)).copy()
    current = centered.copy()
    mean = centered[reference].copy()
    objective = []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        rotations = optimal_rotation(centered, np.broadcast_to(mean, centered.shape))
        current = centered @ np.swapaxes(rotations, -1, -2)
        if scaling:
            num = np.einsum("bmd,md->b", current, mean)
            den = np.einsum("bmd,bmd->b", current, current)
            scales = num / den
            current = current * scales[:, None, None]
        new_mean = current.mean(axis=0)
        if scaling:
            new_mean *= np.linalg.norm(centered[reference]) / np.linalg.norm(new_mean)
        objective.append(float(((current - new_mean) ** 2).sum()))
        change = np.linalg.norm(new_mean - mean)
        mean = new_mean
        if change < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"Procrustes alignment did not converge in {max_iters} iterations",
                      RuntimeWarning, stacklevel=2)

    # Fix the gauge: reference shape keeps its orientation.
    gauge = rotations[reference].T
    rotations = gauge[None] @ rotations
    current = current @ gauge.T
    mean = mean @ gauge.T
    translations = -np.einsum("bij,bj->bi", rotations, centroids) * scales[:, None]
    return AlignmentResult(rotations=rotations, translations=translations, scales=scales,
                           aligned=current, mean_shape=mean, converged=converged,
                           iterations=it, objective=objective)


def procrustes_align(cohort: Cohort, max_iters: int = 100, tol: float = 1e-8,
                     scaling: bool = False):
    """Rigidly align every point set of a dense cohort.

    Returns ``(transforms, aligned, result)`` where ``transforms`` is an
    ``N x T`` nested list of :class:`RigidTransform` and ``aligned`` is the
    world-space cohort whose mean shape is centered at the origin.
    ``result.converged`` carries the non-convergence flag.
    """
    n, t, m, d = cohort.points.shape
    res = generalized_procrustes(cohort.points.reshape(n * t, m, d), max_iters, tol, scaling)
    transforms = [[res.transform(i * t + j) for j in range(t)] for i in range(n)]
    aligned = cohort.replace_points(res.aligned.reshape(n, t, m, d))
    return transforms, aligned, res


# ---------------------------------------------------------------------------
# Ensembles

class EnsembleAxis(str, enum.Enum):
    INTER_SUBJECT = "inter_subject"  # fixed time t, members are subjects
    INTRA_SUBJECT = "intra_subject"  # fixed subject n, members are time points


@dataclass(frozen=True)
class EnsembleMatrix:
    """Centered ``dM x K`` data matrix of one shape-space ensemble."""

    Y: np.ndarray
    axis: EnsembleAxis
    ensemble_mean: np.ndarray

    @property
    def n_members(self) -> int:
        return self.Y.shape[1]

    @classmethod
    def from_members(cls, members: np.ndarray, axis=EnsembleAxis.INTER_SUBJECT) -> "EnsembleMatrix":
        """Build from ``(K, M, d)`` or ``(K, dM)`` world-space members."""
        members = np.asarray(members, dtype=float)
        flat = members.reshape(members.shape[0], -1)
        mean = flat.mean(axis=0)
        return cls(Y=(flat - mean).T, axis=EnsembleAxis(axis), ensemble_mean=mean)


def build_ensemble(aligned: Cohort, axis, index: int) -> EnsembleMatrix:
    """Centered ensemble for one time point (inter-subject) or one subject (intra-subject).

    ``index`` is zero-based: the time index for ``inter_subject`` and the
    subject index for ``intra_subject``.
    """
    axis = EnsembleAxis(axis)
    n, t = aligned.n_subjects, aligned.n_times
    limit = t if axis is EnsembleAxis.INTER_SUBJECT else n
    if not 0 <= index < limit:
        raise IndexOutOfRange(f"{axis.value} index {index} outside [0, {limit})")
    if axis is EnsembleAxis.INTER_SUBJECT:
        members = aligned.points[:, index]
    else:
        members = aligned.points[index, :]
    return EnsembleMatrix.from_members(members, axis)


# ---------------------------------------------------------------------------
# Particle files

def particle_filename(n: int, t: int) -> str:
    """File name for subject ``n``, time ``t`` (both one-based on disk)."""
    return f"subject{n}_time{t}.particles"


def write_particles(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=float)
    lines = [" ".join(np.format_float_positional(v, unique=True, trim="-") for v in row)
             for row in points]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_particles(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split()])
    return np.array(rows, dtype=float)


def write_manifest(path, particle_files, domain_files=None, subject_ids=None, time_labels=None) -> None:
    """Write the JSON manifest describing an ``N x T`` file grid.

    Paths are stored relative to the manifest's directory.
    """
    base = Path(path).parent
    rel = lambda p: os.path.relpath(p, base)  # noqa: E731
    doc = {
        "subjects": list(subject_ids) if subject_ids is not None else None,
        "times": list(time_labels) if time_labels is not None else None,
        "particles": [[rel(p) for p in row] for row in particle_files] if particle_files else None,
        "domains": [[rel(p) for p in row] for row in domain_files] if domain_files else None,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_manifest(path) -> dict:
    """Load a manifest, resolving file paths against its directory."""
    base = Path(path).parent
    doc = json.loads(Path(path).read_text())
    for key in ("particles", "domains"):
        if doc.get(key):
            doc[key] = [[str(base / p) for p in row] for row in doc[key]]
    return doc


def load_cohort(manifest_path) -> Cohort:
    doc = read_manifest(manifest_path)
    if not doc.get("particles"):
        raise ValueError(f"manifest {manifest_path} lists no particle files")
    pts = np.array([[read_particles(p) for p in row] for row in doc["particles"]])
    return Cohort(pts, subject_ids=doc.get("subjects") or (), time_labels=doc.get("times") or ())
