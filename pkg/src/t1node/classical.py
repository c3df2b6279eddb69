"""Voxel-wise nonlinear least-squares fitting of the three-parameter recovery model.

The Levenberg-Marquardt solver is vectorized over voxels: every row carries
its own damping factor, iteration count and convergence flag, so fitting a
batch gives the same numbers as fitting its rows one at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .relaxometry import (
    MAGNITUDE,
    SIGNED,
    RelaxationParams,
    VoxelSeries,
    polarity_candidates,
    signal,
    signal_jacobian,
)

MAX_ITER = 200
GTOL = 1e-8
XTOL = 1e-10
LAMBDA0 = 1e-3
LAMBDA_MAX = 1e16
RANK_RCOND = 1e-12
# rows drifting toward the linear limit (t1_star -> inf) are stopped unconverged
RUNAWAY_T1_STAR = 1e5
TIE_TOL = 1e-15


class FitError(RuntimeError):
    pass


class RankDeficientError(FitError):
    pass


@dataclass
class FitResult:
    params: RelaxationParams
    null_index: int
    residuals: np.ndarray
    rss: float
    covariance: np.ndarray
    converged: bool
    iterations: int
    times_ms: np.ndarray

    @property
    def t1(self) -> float:
        return self.params.t1

    @property
    def jacobian(self) -> np.ndarray:
        return signal_jacobian(self.params, self.times_ms)


@dataclass
class BatchFit:
    """Row-wise LM output; ``x`` holds ``(c, k, t1_star)`` per row."""

    x: np.ndarray
    rss: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    rank_deficient: np.ndarray

    @property
    def t1(self) -> np.ndarray:
        return self.x[:, 2] * (self.x[:, 1] - 1.0)

    @property
    def valid(self) -> np.ndarray:
        x = self.x
        return (
            np.all(np.isfinite(x), axis=1)
            & (x[:, 0] > 0)
            & (x[:, 1] > 1)
            & (x[:, 2] > 0)
            & ~self.rank_deficient
        )


def default_init(signals: np.ndarray, ms_per_unit: float = 1.0) -> np.ndarray:
    """``c = max|S|, k = 2, t1_star = 1000 ms`` for each row of ``signals``.

    ``ms_per_unit`` is the length of one time unit in ms (``t_ref`` for
    normalized series), so the guess scales with the time axis.
    """
    s = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    init = np.empty((s.shape[0], 3))
    init[:, 0] = np.max(np.abs(s), axis=1)
    init[:, 1] = 2.0
    init[:, 2] = 1000.0 / ms_per_unit
    return init


def _ms_per_unit(series: VoxelSeries) -> float:
    return series.t_ref if series.normalized else 1.0


def _residuals(x, times, y):
    return signal(x, times) - y


def _rank_deficient(J: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(J, axis=1, keepdims=True)
    ok = np.all(norms[:, 0, :] > 0, axis=1) & np.all(np.isfinite(J), axis=(1, 2))
    Jn = np.where(norms > 0, J / np.where(norms > 0, norms, 1.0), 0.0)
    sv = np.linalg.svd(np.where(np.isfinite(Jn), Jn, 0.0), compute_uv=False)
    return ~ok | (sv[:, -1] <= RANK_RCOND * sv[:, 0])


def lm_fit_batch(times, signals, init=None, max_iter: int = MAX_ITER) -> BatchFit:
    """Levenberg-Marquardt fit of every row of ``signals``.

    Marquardt damping (``JtJ + lambda * diag(JtJ)``) starting at 1e-3, divided by
    10 on an accepted step and multiplied by 10 on a rejected one. A row stops
    when the largest cosine between the residual and a Jacobian column drops
    below 1e-8 (the scale-free gradient test), an accepted step is smaller
    than 1e-10 relative to the parameters, or no damping up to 1e16 reduces the
    residual (numerical stationary point). ``iterations`` counts accepted steps.
    Rows whose ``t1_star`` leaves ``(0, 1e5]`` are abandoned as unconverged.
    """
    y = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    B, N = y.shape
    t = np.asarray(times, dtype=np.float64)
    if t.ndim == 1:
        t = np.broadcast_to(t, (B, N))
    x = default_init(y) if init is None else np.array(np.atleast_2d(init), dtype=np.float64)
    if x.shape != (B, 3):
        raise ValueError(f"init must have shape {(B, 3)}, got {x.shape}")

    r = _residuals(x, t, y)
    rss = np.einsum("bn,bn->b", r, r)
    lam = np.full(B, LAMBDA0)
    iters = np.zeros(B, dtype=np.int64)
    converged = np.zeros(B, dtype=bool)
    active = np.isfinite(rss)

    while active.any():
        idx = np.flatnonzero(active)
        xa, ta, ya, ra = x[idx], t[idx], y[idx], r[idx]
        J = signal_jacobian(xa, ta)
        g = np.einsum("bni,bn->bi", J, ra)
        A = np.einsum("bni,bnj->bij", J, J)

        # scale-free gradient test: cosine between residual and each Jacobian column
        denom = np.linalg.norm(J, axis=1) * np.sqrt(rss[idx])[:, None]
        with np.errstate(all="ignore"):
            cosine = np.where(denom > 0, np.abs(g) / denom, 0.0)
        small_grad = np.max(cosine, axis=1) < GTOL
        converged[idx[small_grad]] = True
        active[idx[small_grad]] = False

        diag = np.einsum("bii->bi", A)
        M = A + (lam[idx] * 1.0)[:, None, None] * (diag[:, :, None] * np.eye(3))
        with np.errstate(all="ignore"):
            delta = _solve3(M, -g)
            x_new = xa + delta
            r_new = _residuals(x_new, ta, ya)
            rss_new = np.einsum("bn,bn->b", r_new, r_new)
        accept = ~small_grad & np.isfinite(rss_new) & (rss_new < rss[idx])
        reject = ~small_grad & ~accept

        a = idx[accept]
        x[a] = x_new[accept]
        r[a] = r_new[accept]
        rss[a] = rss_new[accept]
        lam[a] /= 10.0
        iters[a] += 1
        step = np.linalg.norm(delta[accept], axis=1)
        tiny = step <= XTOL * (np.linalg.norm(x_new[accept], axis=1) + XTOL)
        converged[a[tiny]] = True
        active[a[tiny]] = False
        out_of_budget = a[~tiny][iters[a[~tiny]] >= max_iter]
        active[out_of_budget] = False
        runaway = a[(np.abs(x[a, 2]) > RUNAWAY_T1_STAR) | (x[a, 2] <= 0)]
        active[runaway] = False

        rj = idx[reject]
        lam[rj] *= 10.0
        stuck = rj[lam[rj] > LAMBDA_MAX]
        converged[stuck] = True
        active[stuck] = False

    J = signal_jacobian(x, t)
    rank_def = _rank_deficient(J)
    bf = BatchFit(x, rss, converged, iters, rank_def)
    # a stationary point outside c > 0, k > 1, t1_star > 0 is not a usable fit
    bf.converged &= bf.valid & np.isfinite(rss)
    return bf


def _solve3(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched 3x3 solve with Jacobi scaling; singular rows give NaN."""
    d = np.sqrt(np.abs(np.einsum("bii->bi", M)))
    d = np.where((d > 0) & np.isfinite(d), d, 1.0)
    Ms = M / d[:, :, None] / d[:, None, :]
    out = np.full_like(b, np.nan)
    det = np.linalg.det(np.where(np.isfinite(Ms), Ms, 0.0))
    ok = np.isfinite(det) & (np.abs(det) > 1e-14) & np.all(np.isfinite(Ms), axis=(1, 2))
    if ok.any():
        out[ok] = np.linalg.solve(Ms[ok], (b[ok] / d[ok])[..., None])[..., 0] / d[ok]
    return out


def covariance_batch(x, times, rss) -> np.ndarray:
    """``rss / (n - 3) * inv(JtJ)`` per row; NaN where undefined."""
    x = np.atleast_2d(x)
    t = np.asarray(times, dtype=np.float64)
    if t.ndim == 1:
        t = np.broadcast_to(t, (x.shape[0], t.size))
    n = t.shape[1]
    J = signal_jacobian(x, t)
    A = np.einsum("bni,bnj->bij", J, J)
    cov = np.full((x.shape[0], 3, 3), np.nan)
    if n <= 3:
        return cov
    sigma2 = np.asarray(rss, dtype=np.float64) / (n - 3)
    for b in range(x.shape[0]):
        try:
            cov[b] = sigma2[b] * np.linalg.inv(A[b])
        except np.linalg.LinAlgError:
            pass
    return cov


def fitting_sd_batch(x, times, rss) -> np.ndarray:
    """Residual-based SD of T1 by linear error propagation, one value per row."""
    x = np.atleast_2d(x)
    cov = covariance_batch(x, times, rss)
    grad = np.stack([np.zeros(x.shape[0]), x[:, 2], x[:, 1] - 1.0], axis=1)
    var = np.einsum("bi,bij,bj->b", grad, cov, grad)
    return np.sqrt(np.maximum(var, 0.0))


def _to_result(series: VoxelSeries, bf: BatchFit, row: int, null_index: int, signals=None) -> FitResult:
    x = bf.x[row]
    y = series.signals if signals is None else signals
    params = RelaxationParams.from_array(x)
    res = signal(params, series.times_ms) - y
    cov = covariance_batch(x[None], series.times_ms, bf.rss[row : row + 1])[0]
    return FitResult(
        params=params,
        null_index=int(null_index),
        residuals=res,
        rss=float(bf.rss[row]),
        covariance=cov,
        converged=bool(bf.converged[row]),
        iterations=int(bf.iterations[row]),
        times_ms=series.times_ms.copy(),
    )


def _check_fit_input(series: VoxelSeries, polarity: str):
    if series.polarity != polarity:
        raise ValueError(f"expected a {polarity} series, got {series.polarity}")
    if np.unique(series.times_ms).size < 3:
        raise ValueError("need at least 3 distinct inversion times")


def lm_fit(series: VoxelSeries, init: RelaxationParams | None = None) -> FitResult:
    _check_fit_input(series, SIGNED)
    x0 = default_init(series.signals, _ms_per_unit(series)) if init is None else init.as_array()[None]
    bf = lm_fit_batch(series.times_ms, series.signals[None], x0)
    if bf.rank_deficient[0]:
        raise RankDeficientError("rank-deficient Jacobian at the final iterate")
    return _to_result(series, bf, 0, null_index=0)


DEFAULT_BOUNDS_FACTOR = 10.0


def default_bounds(signals, ms_per_unit: float = 1.0) -> np.ndarray:
    """``c in (0, 10 max|S|], k in (1, 5], t1_star in (1, 5000] ms`` as a (3, 2) array."""
    smax = float(np.max(np.abs(signals)))
    return np.array([[0.0, DEFAULT_BOUNDS_FACTOR * smax], [1.0, 5.0],
                     [1.0 / ms_per_unit, 5000.0 / ms_per_unit]])


def trf_fit(series: VoxelSeries, init: RelaxationParams | None = None, bounds=None) -> FitResult:
    """Bounded fit with SciPy's trust-region-reflective solver and analytic Jacobian."""
    _check_fit_input(series, SIGNED)
    unit = _ms_per_unit(series)
    b = default_bounds(series.signals, unit) if bounds is None else np.asarray(bounds, dtype=np.float64)
    if b.shape != (3, 2) or not np.all(np.isfinite(b)):
        raise ValueError("bounds must be a finite (3, 2) array of [lo, hi]")
    if np.any(b[:, 0] >= b[:, 1]):
        raise ValueError("infeasible bounds: lo >= hi")
    x0 = (default_init(series.signals, unit)[0] if init is None else init.as_array())
    if init is None:
        x0 = np.clip(x0, b[:, 0] + 1e-6 * (b[:, 1] - b[:, 0]), b[:, 1] - 1e-6 * (b[:, 1] - b[:, 0]))
    if np.any(x0 <= b[:, 0]) or np.any(x0 >= b[:, 1]):
        raise ValueError("initial guess must lie strictly inside the bounds")
    t, y = series.times_ms, series.signals
    sol = least_squares(
        lambda p: signal(p, t) - y,
        x0,
        jac=lambda p: signal_jacobian(p, t),
        bounds=(b[:, 0], b[:, 1]),
        method="trf",
        x_scale="jac",
        ftol=1e-15,
        xtol=XTOL,
        gtol=GTOL,
        max_nfev=MAX_ITER * 10,
    )
    x = np.clip(sol.x, b[:, 0], b[:, 1])
    r = signal(x, t) - y
    rss = float(r @ r)
    bf = BatchFit(
        x[None], np.array([rss]), np.array([sol.status > 0]), np.array([sol.nfev]), np.array([False])
    )
    return _to_result(series, bf, 0, null_index=0)


def trf_fit_batch(times, signals, bounds=None) -> BatchFit:
    y = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    t = np.asarray(times, dtype=np.float64)
    x = np.full((y.shape[0], 3), np.nan)
    rss = np.full(y.shape[0], np.inf)
    conv = np.zeros(y.shape[0], dtype=bool)
    iters = np.zeros(y.shape[0], dtype=np.int64)
    for i, row in enumerate(y):
        tr = t if t.ndim == 1 else t[i]
        try:
            fit = trf_fit(VoxelSeries(row, tr), bounds=bounds)
        except (ValueError, FitError):
            continue
        x[i], rss[i], conv[i], iters[i] = fit.params.as_array(), fit.rss, fit.converged, fit.iterations
    return BatchFit(x, rss, conv, iters, np.zeros(y.shape[0], dtype=bool))


def select_candidate(rss: np.ndarray, ok: np.ndarray) -> np.ndarray:
    """Per row, the smallest index whose rss is within ``TIE_TOL`` of the row minimum.

    Rows with no usable candidate get ``-1``.
    """
    r = np.where(ok, rss, np.inf)
    best = np.min(r, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore"):
        within = np.isfinite(r) & (r - best < TIE_TOL)
    j = np.argmax(within, axis=-1)
    return np.where(np.any(within, axis=-1), j, -1)


def polarity_restore_batch(times, magnitude, method: str = "lm") -> tuple[np.ndarray, BatchFit]:
    """Fit all prefix-negation trials of each magnitude row; return winners.

    Returns ``(null_index, fits)`` where ``fits`` is the winning candidate's fit
    per row (``null_index = -1`` where every candidate failed).
    """
    mag = np.atleast_2d(np.asarray(magnitude, dtype=np.float64))
    B, N = mag.shape
    trials = polarity_candidates(mag).reshape(B * (N + 1), N)
    t = np.asarray(times, dtype=np.float64)
    tt = np.repeat(t, N + 1, axis=0) if t.ndim == 2 else t
    bf = lm_fit_batch(tt, trials) if method == "lm" else trf_fit_batch(tt, trials)
    ok = (np.isfinite(bf.rss) & ~bf.rank_deficient).reshape(B, N + 1)
    j = select_candidate(bf.rss.reshape(B, N + 1), ok)
    rows = np.arange(B) * (N + 1) + np.maximum(j, 0)
    win = BatchFit(bf.x[rows], bf.rss[rows], bf.converged[rows] & (j >= 0), bf.iterations[rows], bf.rank_deficient[rows] | (j < 0))
    return j, win


def polarity_restore_fit(series: VoxelSeries, method: str = "lm") -> FitResult:
    """Classical null-index search over the ``N + 1`` prefix-negation candidates."""
    if series.polarity != MAGNITUDE:
        raise ValueError("polarity restoration needs a magnitude series")
    if np.any(np.diff(series.times_ms) <= 0):
        raise ValueError("samples must be sorted by time")
    j, win = polarity_restore_batch(series.times_ms, series.signals[None], method)
    if j[0] < 0:
        raise FitError("every polarity candidate failed to fit")
    signed = series.signals.copy()
    signed[: j[0]] *= -1.0
    return _to_result(series, win, 0, null_index=j[0], signals=signed)


def fitting_sd(fit: FitResult, n: int | None = None) -> float:
    """SD of T1 (ms) propagated from the fit residuals.

    ``sigma^2 = rss / (n - 3)``, ``Cov = sigma^2 inv(JtJ)``, and
    ``SD = sqrt(g' Cov g)`` with ``g = (0, t1_star, k - 1)``.
    """
    n = len(fit.times_ms) if n is None else n
    if n <= 3:
        raise ValueError("fitting SD needs more than 3 samples")
    J = fit.jacobian
    A = J.T @ J
    if np.linalg.matrix_rank(A) < 3:
        raise RankDeficientError("singular JtJ")
    cov = fit.rss / (n - 3) * np.linalg.inv(A)
    p = fit.params
    g = np.array([0.0, p.t1_star, p.k - 1.0])
    return float(np.sqrt(max(g @ cov @ g, 0.0)))
