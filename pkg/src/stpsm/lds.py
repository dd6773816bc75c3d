"""Time-variant linear dynamical system over shape sequences.

State and observation equations, for subject ``n`` and time ``t``::

    s_1 ~ N(mu_0, V_0)
    s_t = A_t s_{t-1} + e_s,    e_s ~ N(0, Sigma_s)
    x_t = W_t s_t + e_x,        e_x ~ N(0, diag(Sigma_x))

Inference is a Kalman filter (Joseph-form covariance update) followed by a
Rauch-Tung-Striebel smoother; parameters are learned with EM. Time indices
are zero-based throughout, so ``A[0]`` is stored but never used.

The observation noise is diagonal, which lets every ``D x D`` inverse go
through the ``L``-dimensional latent space. Covariances of the filter do not
depend on the data, only on which time points are observed, so they are
computed once per distinct mask pattern and shared by all sequences with
that pattern.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import (InvalidArgument, NonFinite, RankDeficientStatistics, ShapeMismatch,
                     SingularInnovation, SingularPrediction)

logger = logging.getLogger(__name__)

__all__ = [
    "LdsParams",
    "ObservationMask",
    "PosteriorMoments",
    "UniformScaler",
    "kalman_filter",
    "rts_smooth",
    "posterior",
    "em_fit",
    "log_likelihood",
    "reconstruct",
    "sample",
    "save_params",
    "load_params",
    "write_loglik_csv",
]

_LOG_2PI = math.log(2.0 * math.pi)


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _clamp_psd(a: np.ndarray, name: str) -> np.ndarray:
    """Symmetrize and clip tiny negative eigenvalues; larger ones are an error."""
    a = _sym(np.asarray(a, dtype=float))
    if a.size == 0:
        return a
    w, v = np.linalg.eigh(a)
    scale = max(1.0, float(np.abs(w).max()))
    if w.min() < -1e-10 * scale:
        raise ValueError(f"{name} is not positive semi-definite (min eigenvalue {w.min():.3e})")
    if w.min() >= 0:
        return a
    return _sym((v * np.maximum(w, 0.0)) @ v.T)


@dataclass(frozen=True)
class LdsParams:
    """Parameters of a time-variant LDS.

    Attributes
    ----------
    A : (T, L, L) transitions; ``A[t]`` maps ``s_{t-1}`` to ``s_t``, ``A[0]`` unused.
    W : (T, D, L) observation matrices.
    state_cov : (L, L) state noise covariance.
    obs_cov : (D,) diagonal of the observation noise covariance.
    prior_mean : (L,) mean of ``s_1``.
    prior_cov : (L, L) covariance of ``s_1``.
    """

    A: np.ndarray
    W: np.ndarray
    state_cov: np.ndarray
    obs_cov: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        W = np.array(self.W, dtype=float)
        obs = np.array(self.obs_cov, dtype=float)
        if obs.ndim == 2:
            if np.any(obs - np.diag(np.diag(obs))):
                raise ValueError("obs_cov must be diagonal")
            obs = np.diag(obs).copy()
        if A.ndim != 3 or W.ndim != 3 or A.shape[0] != W.shape[0]:
            raise ShapeMismatch("A must be (T, L, L) and W (T, D, L) with the same T")
        t, d, l = W.shape
        if A.shape[1:] != (l, l) or obs.shape != (d,):
            raise ShapeMismatch("inconsistent LDS dimensions")
        if np.any(obs < -1e-10 * max(1.0, float(np.abs(obs).max(initial=0.0)))):
            raise ValueError("obs_cov has negative entries")
        obs = np.maximum(obs, 0.0)
        state = _clamp_psd(np.reshape(self.state_cov, (l, l)), "state_cov")
        prior = _clamp_psd(np.reshape(self.prior_cov, (l, l)), "prior_cov")
        mu0 = np.array(self.prior_mean, dtype=float).reshape(l)
        for name, arr in (("A", A), ("W", W), ("obs_cov", obs), ("state_cov", state),
                          ("prior_mean", mu0), ("prior_cov", prior)):
            if not np.all(np.isfinite(arr)):
                raise NonFinite(f"{name} has non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def L(self) -> int:
        return self.A.shape[1]

    @property
    def D(self) -> int:
        return self.W.shape[1]

    @property
    def T(self) -> int:
        return self.A.shape[0]

    @property
    def obs_cov_matrix(self) -> np.ndarray:
        return np.diag(self.obs_cov)

    def with_(self, **changes) -> "LdsParams":
        return replace(self, **changes)

    def to_arrays(self) -> dict:
        return {"A": self.A, "W": self.W, "state_cov": self.state_cov, "obs_cov": self.obs_cov,
                "prior_mean": self.prior_mean, "prior_cov": self.prior_cov}

    @classmethod
    def scalar(cls, a: float, w: float, q: float, r: float, mu0: float, v0: float, T: int) -> "LdsParams":
        """Stationary ``L = D = 1`` system, handy for tests and examples."""
        return cls(A=np.full((T, 1, 1), a), W=np.full((T, 1, 1), w), state_cov=[[q]],
                   obs_cov=[r], prior_mean=[mu0], prior_cov=[[v0]])


@dataclass(frozen=True)
class ObservationMask:
    """Which ``(n, t)`` observations are present; ``True`` means observed."""

    observed: np.ndarray

    def __post_init__(self):
        obs = np.array(self.observed, dtype=bool)
        if obs.ndim != 2:
            raise ShapeMismatch("mask must be N x T")
        if not obs.any(axis=1).all():
            raise InvalidArgument("every sequence needs at least one observed time point")
        if not obs[:, 0].all():
            raise InvalidArgument("the first time point must be observed in every sequence")
        obs.setflags(write=False)
        object.__setattr__(self, "observed", obs)

    @classmethod
    def full(cls, n: int, t: int) -> "ObservationMask":
        return cls(np.ones((n, t), dtype=bool))

    @property
    def all_observed(self) -> bool:
        return bool(self.observed.all())


@dataclass
class PosteriorMoments:
    """Filtered, predicted and smoothed latent moments.

    Means are ``(N, T, L)``; covariances are ``(N, T, L, L)`` and identical
    for all sequences with the same mask pattern.
    ``lag_one_cov[:, t - 1]`` is the smoothed ``Cov[s_t, s_{t-1}]``.
    ``loglik`` holds the per-observation innovation log-densities
    (zero where masked).
    """

    predicted_mean: np.ndarray
    predicted_cov: np.ndarray
    filtered_mean: np.ndarray
    filtered_cov: np.ndarray
    loglik: np.ndarray
    mask: np.ndarray
    smoothed_mean: np.ndarray | None = None
    smoothed_cov: np.ndarray | None = None
    lag_one_cov: np.ndarray | None = None
    gains: np.ndarray | None = field(default=None, repr=False)

    @property
    def total_loglik(self) -> float:
        return float(self.loglik.sum())


def _as_obs(obs) -> np.ndarray:
    x = np.asarray(obs, dtype=float)
    if x.ndim == 4:
        x = x.reshape(x.shape[0], x.shape[1], -1)
    if x.ndim != 3:
        raise ShapeMismatch("observations must be N x T x D (or N x T x M x d)")
    return x


def _as_mask(mask, n: int, t: int) -> np.ndarray:
    if mask is None:
        return np.ones((n, t), dtype=bool)
    m = mask.observed if isinstance(mask, ObservationMask) else ObservationMask(mask).observed
    if m.shape != (n, t):
        raise ShapeMismatch(f"mask shape {m.shape} does not match observations ({n}, {t})")
    return m


def _check_inputs(params: LdsParams, x: np.ndarray, mask: np.ndarray) -> None:
    if x.shape[1] != params.T or x.shape[2] != params.D:
        raise ShapeMismatch(f"observations {x.shape} do not match params (T={params.T}, D={params.D})")
    if not np.all(np.isfinite(x[mask])):
        raise NonFinite("observations contain non-finite values at observed entries")


def _patterns(mask: np.ndarray):
    """Unique mask rows and the index of each sequence's row."""
    uniq, inverse = np.unique(mask, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


class _Measurement:
    """Everything about one measurement update that does not depend on the data."""

    def __init__(self, W: np.ndarray, R: np.ndarray, V: np.ndarray):
        l = V.shape[0]
        d = W.shape[0]
        self.W = W
        self.zero_gain = False
        if np.all(R > 0):
            # Woodbury through the latent space: P = W V W^T + R with R diagonal.
            # With V = S S^T, (I + V C)^{-1} V = S (I + S^T C S)^{-1} S^T and
            # det(I + V C) = det(I + S^T C S), whose matrix is SPD with
            # eigenvalues >= 1 even when V is singular.
            WtRi = W.T / R                                   # (L, D)
            C = WtRi @ W
            w, v = np.linalg.eigh(V)
            S = v * np.sqrt(np.maximum(w, 0.0))
            inner = _sym(np.eye(l) + S.T @ C @ S)
            try:
                cho = linalg.cho_factor(inner)
            except linalg.LinAlgError as exc:
                raise SingularInnovation("innovation covariance is singular") from exc
            M_inv_V = _sym(S @ linalg.cho_solve(cho, S.T))  # (I + V C)^{-1} V
            self.gain = M_inv_V @ WtRi                       # K = (I + V C)^{-1} V W^T R^{-1}
            logdet_ivc = 2.0 * float(np.log(np.diag(cho[0])).sum())
            self.logdet = float(np.log(R).sum() + logdet_ivc)
            self._wtri = WtRi
            self._m_inv_v = M_inv_V
            self._R = R
            self._dense = None
            KW = M_inv_V @ C
            KRKt = M_inv_V @ C @ M_inv_V.T
        else:
            P = _sym(W @ V @ W.T + np.diag(R))
            try:
                cho = linalg.cho_factor(P)
            except linalg.LinAlgError:
                if np.allclose(V, 0.0):
                    # Deterministic state: nothing to learn from the measurement.
                    self.zero_gain = True
                    self.gain = np.zeros((l, d))
                    self.logdet = -np.inf
                    self._dense = None
                    self.filtered_cov = V.copy()
                    return
                raise SingularInnovation("innovation covariance is singular") from None
            self._dense = cho
            self.gain = linalg.cho_solve(cho, W @ V).T       # V W^T P^{-1}
            self.logdet = float(2.0 * np.log(np.diag(cho[0])).sum())
            KW = self.gain @ W
            KRKt = (self.gain * R) @ self.gain.T
        IKW = np.eye(l) - KW
        # Joseph form: (I - K W) V (I - K W)^T + K R K^T.
        self.filtered_cov = _sym(IKW @ V @ IKW.T + KRKt)
        self.dim = d

    def loglik(self, r: np.ndarray) -> np.ndarray:
        """Log-density of innovations ``r`` (rows) under ``N(0, P)``."""
        if self.zero_gain:
            return np.full(r.shape[0], np.nan)
        if self._dense is not None:
            maha = (r * linalg.cho_solve(self._dense, r.T).T).sum(axis=1)
        else:
            u = r @ self._wtri.T                             # W^T R^{-1} r
            maha = ((r * r) / self._R).sum(axis=1) - (u * (u @ self._m_inv_v.T)).sum(axis=1)
        return -0.5 * (self.dim * _LOG_2PI + self.logdet + maha)


def kalman_filter(params: LdsParams, obs, mask=None) -> PosteriorMoments:
    """Forward pass: predicted and filtered moments for every sequence.

    Masked time points skip the measurement update, so their filtered
    moments equal the predicted ones.
    """
    x = _as_obs(obs)
    n, t_len, _ = x.shape
    mask = _as_mask(mask, n, t_len)
    _check_inputs(params, x, mask)
    l = params.L
    pm = np.empty((n, t_len, l))
    fm = np.empty((n, t_len, l))
    pc_all = np.empty((n, t_len, l, l))
    fc_all = np.empty((n, t_len, l, l))
    gains = np.zeros((n, t_len, l, params.D))
    ll = np.zeros((n, t_len))
    uniq, which = _patterns(mask)
    for p, row in enumerate(uniq):
        idx = np.flatnonzero(which == p)
        mean = None
        cov = None
        for t in range(t_len):
            if t == 0:
                mean = np.broadcast_to(params.prior_mean, (idx.size, l)).copy()
                cov = params.prior_cov.copy()
            else:
                mean = mean @ params.A[t].T
                cov = _sym(params.A[t] @ cov @ params.A[t].T + params.state_cov)
            pm[idx, t] = mean
            pc_all[idx, t] = cov
            if row[t]:
                meas = _Measurement(params.W[t], params.obs_cov, cov)
                r = x[idx, t] - mean @ params.W[t].T
                if meas.zero_gain:
                    ll[idx, t] = np.nan
                else:
                    ll[idx, t] = meas.loglik(r)
                    mean = mean + r @ meas.gain.T
                cov = meas.filtered_cov
                gains[idx, t] = meas.gain
            fm[idx, t] = mean
            fc_all[idx, t] = cov
    if not (np.all(np.isfinite(fm)) and np.all(np.isfinite(fc_all))):
        raise NonFinite("filter produced non-finite moments")
    return PosteriorMoments(predicted_mean=pm, predicted_cov=pc_all, filtered_mean=fm,
                            filtered_cov=fc_all, loglik=ll, mask=mask, gains=gains)


def _backward_gain(filt_cov: np.ndarray, A_next: np.ndarray, pred_next: np.ndarray) -> np.ndarray:
    """``J = V_f A^T V_p^{-1}``; pseudo-inverse when the prediction is singular."""
    rhs = A_next @ filt_cov                                  # (V_f A^T)^T
    try:
        cho = linalg.cho_factor(pred_next)
        jt = linalg.cho_solve(cho, rhs)
    except linalg.LinAlgError:
        jt = np.linalg.pinv(pred_next, hermitian=True) @ rhs
    j = jt.T
    if not np.all(np.isfinite(j)):
        raise SingularPrediction("predicted covariance is singular")
    return j


def rts_smooth(params: LdsParams, filt: PosteriorMoments) -> PosteriorMoments:
    """Backward pass adding smoothed moments and lag-one covariances.

    ``Cov[s_{t+1}, s_t | x_{1:T}] = V^s_{t+1} J_t^T``, which equals the
    classical backward recursion for the lag-one covariance.
    """
    n, t_len, l = filt.filtered_mean.shape
    sm = filt.filtered_mean.copy()
    sc = filt.filtered_cov.copy()
    lag = np.empty((n, max(t_len - 1, 0), l, l))
    uniq, which = _patterns(filt.mask)
    for p in range(uniq.shape[0]):
        idx = np.flatnonzero(which == p)
        i0 = idx[0]
        cov_next = filt.filtered_cov[i0, t_len - 1]
        mean_next = filt.filtered_mean[idx, t_len - 1]
        for t in range(t_len - 2, -1, -1):
            fc = filt.filtered_cov[i0, t]
            pc = filt.predicted_cov[i0, t + 1]
            J = _backward_gain(fc, params.A[t + 1], pc)
            mean = filt.filtered_mean[idx, t] + (mean_next - filt.predicted_mean[idx, t + 1]) @ J.T
            cov = _sym(fc + J @ (cov_next - pc) @ J.T)
            lag[idx, t] = cov_next @ J.T
            sm[idx, t] = mean
            sc[idx, t] = cov
            mean_next, cov_next = mean, cov
    if not (np.all(np.isfinite(sm)) and np.all(np.isfinite(sc))):
        raise NonFinite("smoother produced non-finite moments")
    filt.smoothed_mean = sm
    filt.smoothed_cov = sc
    filt.lag_one_cov = lag
    return filt


def posterior(params: LdsParams, obs, mask=None) -> PosteriorMoments:
    """Filter then smooth (the E-step)."""
    return rts_smooth(params, kalman_filter(params, obs, mask))


def log_likelihood(params: LdsParams, obs, mask=None) -> float:
    """Observed-data log-likelihood, summed over observed ``(n, t)`` innovations."""
    ll = kalman_filter(params, obs, mask).loglik
    if np.isnan(ll).any():
        raise SingularInnovation("log-likelihood undefined: innovation covariance is zero")
    return float(ll.sum())


def reconstruct(params: LdsParams, obs, mask=None) -> np.ndarray:
    """``W_t`` times the smoothed state for every ``(n, t)``, observed or not."""
    x = _as_obs(obs)
    mom = posterior(params, x, mask)
    return np.einsum("tdl,ntl->ntd", params.W, mom.smoothed_mean)


def sample(params: LdsParams, n_sequences: int, seed: int) -> np.ndarray:
    """Draw ``(n_sequences, T, D)`` observation sequences from the model."""
    if n_sequences < 0:
        raise InvalidArgument("n_sequences must be non-negative")
    rng = np.random.default_rng(seed)
    l, d, t_len = params.L, params.D, params.T

    def draw(mean, cov, size):
        # Factor via eigh so singular covariances are fine.
        w, v = np.linalg.eigh(cov)
        root = v * np.sqrt(np.maximum(w, 0.0))
        return mean + rng.standard_normal((size, cov.shape[0])) @ root.T

    xs = np.empty((n_sequences, t_len, d))
    s = draw(params.prior_mean, params.prior_cov, n_sequences)
    obs_sd = np.sqrt(params.obs_cov)
    for t in range(t_len):
        if t > 0:
            s = draw(s @ params.A[t].T, params.state_cov, n_sequences)
        xs[:, t] = s @ params.W[t].T + rng.standard_normal((n_sequences, d)) * obs_sd
    return xs


# ---------------------------------------------------------------------------
# EM

def _solve_normal(lhs: np.ndarray, rhs: np.ndarray, t: int, ridge: float) -> np.ndarray:
    """Solve ``X lhs = rhs`` for symmetric PSD ``lhs``, adding a ridge only if needed."""
    lhs = _sym(lhs)
    l = lhs.shape[0]
    scale = max(float(np.trace(lhs)) / max(l, 1), 1e-300)
    try:
        cho = linalg.cho_factor(lhs)
        if np.linalg.cond(lhs) < 1e12:
            return linalg.cho_solve(cho, rhs.T).T
    except linalg.LinAlgError:
        pass
    try:
        cho = linalg.cho_factor(lhs + ridge * scale * np.eye(l))
    except linalg.LinAlgError as exc:
        raise RankDeficientStatistics(f"sufficient statistics at t={t} are rank deficient", t) from exc
    return linalg.cho_solve(cho, rhs.T).T


def _initial_params(x: np.ndarray, mask: np.ndarray, L: int, seed: int, var_floor: float) -> LdsParams:
    n, t_len, d = x.shape
    rows = x[mask]                                            # observed vectors only
    u, sv, _ = np.linalg.svd(rows.T, full_matrices=False)
    k = min(L, u.shape[1], int((sv > sv.max(initial=0.0) * 1e-12).sum()))
    W = np.zeros((d, L))
    W[:, :k] = u[:, :k]
    if k < L:
        # Too few data directions: complete with random orthogonal columns.
        rng = np.random.default_rng(seed)
        extra = rng.standard_normal((d, L - k))
        extra -= W[:, :k] @ (W[:, :k].T @ extra)
        q, _ = np.linalg.qr(extra)
        W[:, k:] = q[:, : L - k] if q.shape[1] >= L - k else np.pad(q, ((0, 0), (0, L - k - q.shape[1])))
    resid = rows - (rows @ W) @ W.T
    obs_var = np.maximum((resid ** 2).mean(axis=0), var_floor)
    s1 = x[:, 0] @ W
    mu0 = s1.mean(axis=0)
    v0 = np.cov(s1.T, bias=True).reshape(L, L) if n > 1 else np.zeros((L, L))
    v0 = v0 + 0.1 * np.eye(L)
    return LdsParams(A=np.broadcast_to(np.eye(L), (t_len, L, L)), W=np.broadcast_to(W, (t_len, d, L)),
                     state_cov=0.1 * np.eye(L), obs_cov=obs_var, prior_mean=mu0, prior_cov=v0)


def _m_step(params: LdsParams, x: np.ndarray, mask: np.ndarray, mom: PosteriorMoments,
            ridge: float, var_floor: float) -> LdsParams:
    n, t_len, d = x.shape
    l = params.L
    Es = mom.smoothed_mean                                   # (N, T, L)
    Ess = mom.smoothed_cov + Es[..., :, None] * Es[..., None, :]
    W = np.array(params.W)
    A = np.array(params.A)
    resid_sum = np.zeros(d)
    n_obs = 0
    for t in range(t_len):
        obs_n = mask[:, t]
        if not obs_n.any():
            continue
        xs = x[obs_n, t]
        sxs = xs.T @ Es[obs_n, t]                            # (D, L)
        sss = Ess[obs_n, t].sum(axis=0)
        W[t] = _solve_normal(sss, sxs, t, ridge)
        # E[(x - W s)(x - W s)^T] diagonal with the new W.
        resid_sum += ((xs * xs).sum(axis=0) - 2.0 * (W[t] * sxs).sum(axis=1)
                      + ((W[t] @ sss) * W[t]).sum(axis=1))
        n_obs += int(obs_n.sum())
    obs_cov = np.maximum(resid_sum / max(n_obs, 1), var_floor)

    state_sum = np.zeros((l, l))
    for t in range(1, t_len):
        cross = (mom.lag_one_cov[:, t - 1] + Es[:, t, :, None] * Es[:, t - 1, None, :]).sum(axis=0)
        prev = Ess[:, t - 1].sum(axis=0)
        A[t] = _solve_normal(prev, cross, t, ridge)
        cur = Ess[:, t].sum(axis=0)
        state_sum += cur - A[t] @ cross.T - cross @ A[t].T + A[t] @ prev @ A[t].T
    state_cov = _sym(state_sum / max(n * (t_len - 1), 1)) if t_len > 1 else params.state_cov
    mu0 = Es[:, 0].mean(axis=0)
    v0 = _sym(Ess[:, 0].mean(axis=0) - np.outer(mu0, mu0))
    return LdsParams(A=A, W=W, state_cov=_psd_floor(state_cov), obs_cov=obs_cov,
                     prior_mean=mu0, prior_cov=_psd_floor(v0))


def _psd_floor(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(_sym(a))
    if w.min() >= 0:
        return a
    return _sym((v * np.maximum(w, 0.0)) @ v.T)


def em_fit(obs, L: int, iters: int, mask=None, init_seed: int = 0, ridge: float = 1e-8,
           var_floor: float | None = None, init: LdsParams | None = None):
    """Fit an LDS by expectation-maximization.

    Parameters
    ----------
    obs : (N, T, D) or (N, T, M, d) array
        Observation sequences; values at masked entries are ignored.
    L : int
        Latent dimension.
    iters : int
        Number of EM iterations (at least one).
    mask : ObservationMask or (N, T) bool array, optional
    init_seed : int
        Only used when fewer than ``L`` data directions exist and the
        initial observation matrix must be completed at random.
    ridge : float
        Relative ridge added to a normal-equation matrix only if it is
        numerically singular.
    var_floor : float, optional
        Lower bound on the observation noise variances. Defaults to
        ``1e-6`` times the mean per-coordinate variance of the data (itself
        bounded below by ``1e-6`` times the mean square). With
        per-time observation matrices and fewer sequences than latent
        dimensions the noise otherwise collapses towards zero and the
        likelihood degenerates.
    init : LdsParams, optional
        Starting parameters instead of the PCA initialization.

    Returns
    -------
    params : LdsParams
    loglik_trace : (iters,) array
        ``loglik_trace[i]`` is the observed-data log-likelihood of the
        parameters after iteration ``i + 1``; the last entry belongs to the
        returned parameters.
    """
    if iters < 1:
        raise InvalidArgument("em_fit needs at least one iteration")
    x = _as_obs(obs)
    n, t_len, d = x.shape
    if n < 1:
        raise InvalidArgument("no sequences to fit")
    if L < 1:
        raise InvalidArgument("latent dimension must be positive")
    mask = _as_mask(mask, n, t_len)
    if not np.all(np.isfinite(x[mask])):
        raise NonFinite("observations contain non-finite values at observed entries")
    x = np.where(mask[..., None], x, 0.0)
    if var_floor is None:
        # Near-constant data would otherwise give a floor at rounding level.
        meansq = float((x[mask] ** 2).mean()) or 1.0
        base = max(float(x[mask].var(axis=0).mean()), 1e-6 * meansq)
        var_floor = 1e-6 * base
    params = init if init is not None else _initial_params(x, mask, L, init_seed, var_floor)
    mom = posterior(params, x, mask)
    trace = np.empty(iters)
    for i in range(iters):
        params = _m_step(params, x, mask, mom, ridge, var_floor)
        mom = posterior(params, x, mask)
        trace[i] = mom.total_loglik
        if not np.isfinite(trace[i]):
            raise NonFinite(f"log-likelihood became non-finite at EM iteration {i + 1}")
        logger.debug("EM iteration %d: loglik %.6f", i + 1, trace[i])
    return params, trace


# ---------------------------------------------------------------------------
# Scaling and persistence

@dataclass(frozen=True)
class UniformScaler:
    """Affine map of all coordinates to ``[0, 1]`` with one shared scale.

    A single offset and factor for every coordinate keeps shapes undistorted.
    """

    offset: float
    scale: float

    @classmethod
    def fit(cls, data) -> "UniformScaler":
        a = np.asarray(data, dtype=float)
        lo, hi = float(a.min()), float(a.max())
        return cls(offset=lo, scale=(hi - lo) or 1.0)

    def transform(self, data) -> np.ndarray:
        return (np.asarray(data, dtype=float) - self.offset) / self.scale

    def inverse(self, data) -> np.ndarray:
        return np.asarray(data, dtype=float) * self.scale + self.offset

    def to_dict(self) -> dict:
        return {"offset": self.offset, "scale": self.scale}


def save_params(path, params: LdsParams, scaler: UniformScaler | None = None) -> None:
    """Write parameters (and optional scaling) as a named-array ``.npz`` container."""
    arrays = dict(params.to_arrays())
    if scaler is not None:
        arrays["scaler"] = np.array([scaler.offset, scaler.scale])
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(params, scaler_or_None)``."""
    with np.load(path) as z:
        params = LdsParams(A=z["A"], W=z["W"], state_cov=z["state_cov"], obs_cov=z["obs_cov"],
                           prior_mean=z["prior_mean"], prior_cov=z["prior_cov"])
        scaler = UniformScaler(*map(float, z["scaler"])) if "scaler" in z.files else None
    return params, scaler


def write_loglik_csv(path, trace) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("iteration,loglik\n")
        for i, v in enumerate(trace, start=1):
            fh.write(f"{i},{float(v)!r}\n")
