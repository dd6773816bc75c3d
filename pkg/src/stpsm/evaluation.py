"""Model-quality metrics for shape sequence models.

All errors use the pooled root-mean-square form

    RMSE = sqrt( (1 / (N T d M)) * sum (x - x_hat)^2 )

over whatever entries take part. Reports keep the per-unit, per-time errors
as long-format records, so every summary number can be recomputed from the
CSV output.
"""
from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Cohort, procrustes_align
from .errors import DegenerateEnsemble, InvalidArgument, InvalidFraction, ShapeMismatch
from .lds import LdsParams, UniformScaler, em_fit, reconstruct, sample
from .seeds import derive_seed

__all__ = [
    "MetricKind",
    "MetricsReport",
    "PcaModes",
    "rmse",
    "kfold_splits",
    "random_time_mask",
    "full_sequence_generalization",
    "partial_sequence_reconstruction",
    "specificity",
    "evaluate_cohort",
    "pool_reports",
    "modes_of_variation",
    "write_long_csv",
    "summary_row",
]


class MetricKind(str, enum.Enum):
    FULL_GENERALIZATION = "full_generalization"
    PARTIAL_RECONSTRUCTION = "partial_reconstruction"
    SPECIFICITY = "specificity"


def _as_sequences(data) -> np.ndarray:
    if isinstance(data, Cohort):
        return data.observations()
    x = np.asarray(data, dtype=float)
    if x.ndim == 4:
        x = x.reshape(x.shape[0], x.shape[1], -1)
    if x.ndim != 3:
        raise ShapeMismatch("expected (N, T, D) or (N, T, M, d) data")
    return x


def rmse(x, xhat) -> float:
    """Pooled root-mean-square difference over every entry."""
    a = np.asarray(x, dtype=float)
    b = np.asarray(xhat, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ShapeMismatch("rmse of an empty array")
    diff = a - b
    return math.sqrt(float(np.mean(diff * diff)))


@dataclass
class MetricsReport:
    """One metric evaluated on one fold (or pooled over folds).

    ``records`` holds ``(unit, t, rmse)`` rows: the error of one held-out
    sequence (or one sample) at one time point. Every row covers the same
    number of entries, so ``overall_rmse`` is the root mean square of the
    record values and ``per_timepoint_rmse[t]`` is the same over rows at
    ``t``. ``overall_std`` is the spread of the per-unit whole-sequence
    errors, whose plain mean is ``mean_unit_rmse``.
    """

    metric_kind: MetricKind
    per_timepoint_rmse: list
    overall_rmse: float | None
    overall_std: float | None
    mean_unit_rmse: float | None
    unit_rmse: list
    records: list = field(default_factory=list, repr=False)
    fold_id: int | None = None
    mask_fraction: float | None = None
    n_samples: int | None = None

    def to_dict(self) -> dict:
        return {
            "metric_kind": self.metric_kind.value,
            "fold_id": self.fold_id,
            "mask_fraction": self.mask_fraction,
            "n_samples": self.n_samples,
            "overall_rmse": self.overall_rmse,
            "overall_std": self.overall_std,
            "mean_unit_rmse": self.mean_unit_rmse,
            "per_timepoint_rmse": [None if v is None else float(v) for v in self.per_timepoint_rmse],
        }


def _report(kind: MetricKind, records: list, n_times: int, **meta) -> MetricsReport:
    """Build a report from ``(unit, t, rmse)`` records of equal weight."""
    if not records:
        return MetricsReport(kind, [None] * n_times, None, None, None, [], [], **meta)
    units = {}
    per_t = [[] for _ in range(n_times)]
    for unit, t, value in records:
        units.setdefault(unit, []).append(value * value)
        per_t[t].append(value * value)
    per_timepoint = [math.sqrt(sum(v) / len(v)) if v else None for v in per_t]
    squares = np.array([r[2] for r in records]) ** 2
    overall = math.sqrt(float(squares.mean()))
    unit_rmse = [math.sqrt(sum(v) / len(v)) for v in units.values()]
    return MetricsReport(kind, per_timepoint, overall, float(np.std(unit_rmse)),
                         float(np.mean(unit_rmse)), unit_rmse, list(records), **meta)


def pool_reports(reports: list) -> MetricsReport:
    """Combine fold reports into one report over all their records."""
    if not reports:
        raise InvalidArgument("nothing to pool")
    kind = reports[0].metric_kind
    n_times = len(reports[0].per_timepoint_rmse)
    records = []
    for rep in reports:
        records.extend(((rep.fold_id, unit), t, v) for unit, t, v in rep.records)
    return _report(kind, records, n_times, fold_id=None, mask_fraction=reports[0].mask_fraction,
                   n_samples=None if reports[0].n_samples is None
                   else sum(r.n_samples for r in reports))


def kfold_splits(n_subjects: int, folds: int, seed: int) -> list:
    """Shuffled subject-level folds; returns the test indices of each fold."""
    if not 2 <= folds <= n_subjects:
        raise InvalidArgument(f"need 2 <= folds <= N, got folds={folds}, N={n_subjects}")
    order = np.random.default_rng(seed).permutation(n_subjects)
    return [np.sort(part) for part in np.array_split(order, folds)]


def random_time_mask(n_sequences: int, n_times: int, fraction: float, rng) -> np.ndarray:
    """Hide ``floor(fraction * T)`` random time points per sequence, never the first."""
    if not 0.0 < fraction < 1.0:
        raise InvalidFraction(f"mask fraction must be in (0, 1), got {fraction}")
    k = int(math.floor(fraction * n_times))
    k = min(k, n_times - 1)
    mask = np.ones((n_sequences, n_times), dtype=bool)
    for i in range(n_sequences):
        hidden = rng.choice(np.arange(1, n_times), size=k, replace=False)
        mask[i, hidden] = False
    return mask


def _time_records(x: np.ndarray, xhat: np.ndarray, units, select=None) -> list:
    """``(unit, t, rmse)`` rows; ``select`` limits rows to chosen ``(i, t)`` cells."""
    err = np.sqrt(((x - xhat) ** 2).mean(axis=-1))          # (N, T)
    rows = []
    for i, unit in enumerate(units):
        for t in range(x.shape[1]):
            if select is None or select[i, t]:
                rows.append((unit, t, float(err[i, t])))
    return rows


def _fit(train: np.ndarray, L: int, iters: int, seed: int) -> LdsParams:
    params, _ = em_fit(train, L, iters, init_seed=seed)
    return params


def _prepare(pdm, scale: bool):
    x = _as_sequences(pdm)
    scaler = UniformScaler.fit(x) if scale else None
    return (scaler.transform(x) if scaler else x), scaler


def full_sequence_generalization(pdm, folds: int = 5, L: int = 64, iters: int = 50, seed: int = 0,
                                 scale: bool = True) -> list:
    """Held-out reconstruction error, one report per subject-level fold.

    Each fold fits a model on the training subjects and reconstructs the
    held-out sequences from their smoothed states. Errors are measured in
    the uniformly scaled space when ``scale`` is true.
    """
    return evaluate_cohort(pdm, folds=folds, L=L, iters=iters, seed=seed, scale=scale,
                           mask_fractions=(), n_samples=0)["full"]


def partial_sequence_reconstruction(pdm, mask_fractions=(0.25,), trials: int = 1, seed: int = 0,
                                    folds: int = 5, L: int = 64, iters: int = 50,
                                    scale: bool = True, masked_only: bool = True) -> dict:
    """Error on randomly hidden time points of held-out sequences.

    Returns ``{fraction: [report per fold]}``. With ``masked_only`` (the
    default) only hidden time points are scored; otherwise the whole
    reconstructed sequence is compared with the unmasked one.
    """
    return evaluate_cohort(pdm, folds=folds, L=L, iters=iters, seed=seed, scale=scale,
                           mask_fractions=mask_fractions, trials=trials, n_samples=0,
                           masked_only=masked_only)["partial"]


def specificity(params: LdsParams, train, n_samples: int, seed: int) -> MetricsReport:
    """Distance from model samples to their nearest training sequence.

    Each sample is matched to the training sequence with the smallest
    whole-sequence RMSE; the report's records are the per-time errors
    against that match.
    """
    if n_samples < 1:
        raise InvalidArgument("n_samples must be at least 1")
    x = _as_sequences(train)
    draws = sample(params, n_samples, seed)
    diff = draws[:, None] - x[None]                          # (S, N, T, D)
    dist = np.sqrt((diff * diff).mean(axis=(-1, -2)))        # (S, N)
    nearest = dist.argmin(axis=1)
    rows = []
    for s in range(n_samples):
        err = np.sqrt(((draws[s] - x[nearest[s]]) ** 2).mean(axis=-1))
        rows.extend((s, t, float(err[t])) for t in range(x.shape[1]))
    return _report(MetricKind.SPECIFICITY, rows, x.shape[1], n_samples=n_samples)


def evaluate_cohort(pdm, folds: int = 5, L: int = 64, iters: int = 50, seed: int = 0,
                    scale: bool = True, mask_fractions=(0.25,), trials: int = 1,
                    n_samples: int = 100, masked_only: bool = True) -> dict:
    """Run all metrics with one model fit per fold.

    Returns ``{"full": [...], "partial": {fraction: [...]}, "specificity": [...]}``
    with one report per fold in each list. Specificity samples
    ``ceil(n_samples / folds)`` sequences from each fold's model and compares
    them with that fold's training sequences.
    """
    x, _ = _prepare(pdm, scale)
    n, t_len, _ = x.shape
    for f in mask_fractions:
        if not 0.0 < f < 1.0:
            raise InvalidFraction(f"mask fraction must be in (0, 1), got {f}")
    splits = kfold_splits(n, folds, derive_seed(seed, "folds"))
    out = {"full": [], "partial": {f: [] for f in mask_fractions}, "specificity": []}
    per_fold_samples = int(math.ceil(n_samples / folds)) if n_samples else 0
    for k, test in enumerate(splits):
        train_idx = np.setdiff1d(np.arange(n), test)
        params = _fit(x[train_idx], L, iters, derive_seed(seed, "fit", k))
        held = x[test]
        units = [int(i) for i in test]
        xhat = reconstruct(params, held)
        out["full"].append(_report(MetricKind.FULL_GENERALIZATION, _time_records(held, xhat, units),
                                   t_len, fold_id=k))
        for f in mask_fractions:
            rng = np.random.default_rng(derive_seed(seed, "mask", k, repr(f)))
            rows = []
            for trial in range(trials):
                mask = random_time_mask(len(test), t_len, f, rng)
                xhat = reconstruct(params, held, mask)
                select = None if not masked_only else ~mask
                trial_units = [(u, trial) for u in units]
                rows.extend(_time_records(held, xhat, trial_units, select))
            out["partial"][f].append(_report(MetricKind.PARTIAL_RECONSTRUCTION, rows, t_len,
                                             fold_id=k, mask_fraction=f))
        if per_fold_samples:
            rep = specificity(params, x[train_idx], per_fold_samples,
                              derive_seed(seed, "sample", k))
            rep.fold_id = k
            out["specificity"].append(rep)
    return out


# ---------------------------------------------------------------------------
# Modes of variation

@dataclass
class PcaModes:
    """Principal modes of a pooled shape ensemble.

    ``sweep[i, j]`` is ``mean + (j - 2) * sqrt(eigenvalues[i]) * modes[i]`` for
    ``j = 0..4``, i.e. the mean moved by -2 to +2 standard deviations.
    """

    mean_shape: np.ndarray
    modes: np.ndarray          # (k, dM), orthonormal rows
    eigenvalues: np.ndarray    # (k,), non-increasing
    sweep: np.ndarray          # (k, 5, dM)
    total_variance: float

    @property
    def explained_ratio(self) -> np.ndarray:
        return self.eigenvalues / self.total_variance if self.total_variance > 0 else self.eigenvalues * 0


def modes_of_variation(pdm, k: int = 2, align: bool = True) -> PcaModes:
    """PCA over all point sets of the cohort, pooled over subjects and time.

    Eigenvalues are variances with ``1/(K-1)`` normalisation, ``K = N T``.
    With ``align`` the point sets are first rigidly aligned.
    """
    if isinstance(pdm, Cohort):
        cohort = pdm
    else:
        arr = np.asarray(pdm, dtype=float)
        if arr.ndim != 4:
            raise ShapeMismatch("modes_of_variation needs (N, T, M, d) points")
        cohort = Cohort(arr)
    if cohort.n_subjects * cohort.n_times < 2:
        raise DegenerateEnsemble("need at least two shapes")
    if align and cohort.n_points > cohort.dim:
        _, cohort, _ = procrustes_align(cohort)
    x = cohort.observations().reshape(-1, cohort.n_points * cohort.dim)
    mean = x.mean(axis=0)
    y = x - mean
    _, sv, vt = np.linalg.svd(y, full_matrices=False)
    eig = sv ** 2 / (x.shape[0] - 1)
    total = float((y * y).sum() / (x.shape[0] - 1))
    if total <= 0:
        raise DegenerateEnsemble("all shapes are identical")
    k = min(k, vt.shape[0])
    modes = vt[:k]
    # Fix the sign so the largest-magnitude entry of each mode is positive.
    big = np.abs(modes).argmax(axis=1)
    modes = modes * np.sign(modes[np.arange(k), big])[:, None]
    steps = np.arange(-2, 3)
    sweep = mean[None, None] + steps[None, :, None] * np.sqrt(eig[:k])[:, None, None] * modes[:, None]
    return PcaModes(mean_shape=mean, modes=modes, eigenvalues=eig[:k], sweep=sweep,
                    total_variance=total)


# ---------------------------------------------------------------------------
# Output

def write_long_csv(path, reports_by_label: dict) -> None:
    """Long-format rows ``approach, metric, fraction, fold, unit, t, value``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["approach", "metric", "mask_fraction", "fold", "unit", "t", "value"])
        for label, reports in reports_by_label.items():
            for rep in reports:
                frac = "" if rep.mask_fraction is None else repr(rep.mask_fraction)
                for unit, t, value in rep.records:
                    unit_txt = unit if isinstance(unit, (int, str)) else "-".join(map(str, _flatten(unit)))
                    w.writerow([label, rep.metric_kind.value, frac, rep.fold_id, unit_txt, t, repr(value)])


def _flatten(unit):
    if isinstance(unit, tuple):
        for u in unit:
            yield from _flatten(u)
    else:
        yield unit


def summary_row(approach: str, results: dict) -> dict:
    """One comparison-table row: pooled RMSE and spread for each metric."""
    def fmt(reports):
        if not reports:
            return None
        pooled = pool_reports(reports)
        return {"rmse": pooled.overall_rmse, "std": pooled.overall_std}
    row = {"approach": approach, "full_sequence": fmt(results["full"])}
    row["partial_sequence"] = {repr(f): fmt(r) for f, r in results["partial"].items()}
    row["specificity"] = fmt(results["specificity"])
    return row


def write_summary_json(path, rows: list) -> None:
    Path(path).write_text(json.dumps({"rows": rows}, indent=2) + "\n")
