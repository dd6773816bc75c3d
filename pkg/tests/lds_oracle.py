"""Brute-force joint-Gaussian conditioning for small LDS instances."""
import numpy as np


def joint_moments(p):
    """Mean and covariance of the stacked states and observations."""
    T, D, L = p.T, p.D, p.L
    means = [p.prior_mean]
    for t in range(1, T):
        means.append(p.A[t] @ means[-1])
    mean_s = np.concatenate(means)

    def phi(t, k):
        out = np.eye(L)
        for j in range(k + 1, t + 1):
            out = p.A[j] @ out
        return out

    noise = [p.prior_cov] + [p.state_cov] * (T - 1)
    cov_s = np.zeros((T * L, T * L))
    for t in range(T):
        for u in range(T):
            c = sum(phi(t, k) @ noise[k] @ phi(u, k).T for k in range(min(t, u) + 1))
            cov_s[t * L:(t + 1) * L, u * L:(u + 1) * L] = c
    wb = np.zeros((T * D, T * L))
    for t in range(T):
        wb[t * D:(t + 1) * D, t * L:(t + 1) * L] = p.W[t]
    cov_x = wb @ cov_s @ wb.T + np.kron(np.eye(T), np.diag(p.obs_cov))
    return mean_s, cov_s, wb @ mean_s, cov_x, cov_s @ wb.T


def condition(p, x, observed=None):
    """Posterior mean/cov of all states given the observed time points of one sequence."""
    T, D = p.T, p.D
    observed = np.ones(T, bool) if observed is None else np.asarray(observed)
    ms, cs, mx, cx, csx = joint_moments(p)
    idx = np.concatenate([np.arange(t * D, (t + 1) * D) for t in range(T) if observed[t]])
    gain = csx[:, idx] @ np.linalg.inv(cx[np.ix_(idx, idx)])
    mean = ms + gain @ (np.ravel(x)[idx] - mx[idx])
    cov = cs - gain @ csx[:, idx].T
    r = np.ravel(x)[idx] - mx[idx]
    sub = cx[np.ix_(idx, idx)]
    ll = -0.5 * (len(r) * np.log(2 * np.pi) + np.linalg.slogdet(sub)[1] + r @ np.linalg.solve(sub, r))
    return mean, cov, ll


def random_params(rng, L, D, T):
    from stpsm.lds import LdsParams

    def spd(k):
        b = rng.normal(size=(k, k))
        return b @ b.T + 0.1 * np.eye(k)

    return LdsParams(A=rng.normal(size=(T, L, L)) * 0.7, W=rng.normal(size=(T, D, L)),
                     state_cov=spd(L), obs_cov=rng.uniform(0.1, 1.0, D),
                     prior_mean=rng.normal(size=L), prior_cov=spd(L))
