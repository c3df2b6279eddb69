"""Monte Carlo subset evaluation, bias and fitting-SD statistics, report tables."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .inference import MapResult, classical_map, map_volume
from .models import ModelCheckpoint
from .relaxometry import PhantomVolume
from .training import sample_subset

ALPHA = 0.05
CSV_FIELDS = ("method", "regime", "subset_size", "n_runs", "mean_bias_ms", "bias_std_ms",
              "mean_sd_ms", "sd_std_ms", "t_stat", "p_value", "significant")


# --------------------------------------------------------------------------- #
# estimators
# --------------------------------------------------------------------------- #


class ClassicalEstimator:
    def __init__(self, method: str = "lm"):
        if method not in ("lm", "trf"):
            raise ValueError(f"unknown classical method {method!r}")
        self.method = method
        self.name = method.upper()

    def __call__(self, volume: PhantomVolume, subset) -> MapResult:
        return classical_map(volume, subset, self.method)


class ModelEstimator:
    def __init__(self, ckpt: ModelCheckpoint, name: str | None = None, chunk: int = 256):
        self.ckpt, self.chunk = ckpt, chunk
        self.name = name or ckpt.model.kind

    def __call__(self, volume: PhantomVolume, subset) -> MapResult:
        return map_volume(self.ckpt, volume, subset, chunk=self.chunk)


def as_estimator(method):
    if isinstance(method, str):
        return ClassicalEstimator(method)
    if isinstance(method, ModelCheckpoint):
        return ModelEstimator(method)
    if callable(method):
        return method
    raise TypeError(f"cannot use {type(method).__name__} as an estimator")


# --------------------------------------------------------------------------- #
# Monte Carlo
# --------------------------------------------------------------------------- #


@dataclass
class MonteCarloResult:
    roi: np.ndarray  # (R,) voxel indices
    subsets: np.ndarray  # (n_runs, n)
    t1: np.ndarray  # (n_runs, R) ms, NaN where the estimator failed
    sd: np.ndarray  # (n_runs, R) ms, NaN where undefined
    seed: int

    @property
    def n_runs(self) -> int:
        return self.t1.shape[0]

    @property
    def subset_size(self) -> int:
        return self.subsets.shape[1]

    def voxel_means(self) -> tuple[np.ndarray, np.ndarray]:
        """Run-averaged T1 and SD per ROI voxel (failed runs skipped)."""
        return _nanmean0(self.t1), _nanmean0(self.sd)


def _nanmean0(a: np.ndarray) -> np.ndarray:
    ok = np.isfinite(a)
    cnt = ok.sum(axis=0)
    tot = np.where(ok, a, 0.0).sum(axis=0)
    return np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)


def monte_carlo(method, volume: PhantomVolume, n_runs: int, subset_size: int,
                seed: int) -> MonteCarloResult:
    """Run ``method`` on ``n_runs`` phase-covering random subsets of the schedule.

    Run ``r`` draws its subset from the ``r``-th child of ``SeedSequence(seed)``,
    so any run can be reproduced alone. Per-voxel failures appear as NaN.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    N = len(volume.schedule)
    if not 3 <= subset_size <= N:
        raise ValueError(f"subset_size must lie in [3, {N}]")
    est = as_estimator(method)
    roi = volume.roi_indices()
    if roi.size == 0:
        raise ValueError("empty ROI")
    children = np.random.SeedSequence(seed).spawn(n_runs)
    subsets = np.stack([sample_subset(N, subset_size, np.random.default_rng(c)) for c in children])
    t1 = np.full((n_runs, roi.size), np.nan)
    sd = np.full((n_runs, roi.size), np.nan)
    for r, sub in enumerate(subsets):
        res = est(volume, sub)
        ok = res.valid_mask[roi]
        t1[r] = np.where(ok, res.t1_map[roi], np.nan)
        sd[r] = np.where(ok, res.sd_map[roi], np.nan)
    return MonteCarloResult(roi, subsets, t1, sd, seed)


# --------------------------------------------------------------------------- #
# statistics
# --------------------------------------------------------------------------- #


def mean_bias(estimates, truth, roi_mask=None) -> tuple[float, float]:
    """ROI mean and sample standard deviation of ``estimates - truth`` (ms).

    ``estimates`` may be (V,) or (runs, V); runs are averaged per voxel first.
    Voxels without any finite estimate are skipped.
    """
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.ndim == 2:
        est = _nanmean0(est)
    if est.shape != tru.shape:
        raise ValueError("estimates and truth must align")
    mask = np.ones(est.shape, dtype=bool) if roi_mask is None else np.asarray(roi_mask, dtype=bool)
    if mask.shape != est.shape:
        raise ValueError("ROI mask must align with the estimates")
    b = (est - tru)[mask & np.isfinite(est)]
    if b.size == 0:
        raise ValueError("empty ROI")
    std = float(np.std(b, ddof=1)) if b.size > 1 else 0.0
    return float(np.mean(b)), std


def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(ln_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(ln_front) * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0
    return min(1.0, max(0.0, betainc_reg(df / 2.0, 0.5, df / (df + t * t))))


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    degenerate: bool = False


def paired_t_test(a, b) -> TTestResult:
    """Paired two-sided t-test on ``d = a - b`` with sample standard deviation."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = d.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    mean = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n - 1)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n - 1, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, student_t_sf2(t, n - 1), n - 1)


def fitting_sd_map(method, volume: PhantomVolume, subset) -> np.ndarray:
    """Per-voxel fitting SD (ms) over the full volume; NaN outside valid voxels."""
    idx = np.arange(len(volume.schedule)) if subset is None else np.asarray(subset)
    if idx.size <= 3:
        raise ValueError("fitting SD needs at least 4 samples (n - 3 residual dof)")
    return as_estimator(method)(volume, idx).sd_map


# --------------------------------------------------------------------------- #
# reports
# --------------------------------------------------------------------------- #


@dataclass
class EvalCell:
    method: str
    regime: str
    subset_size: int
    n_runs: int
    mean_bias_ms: float
    bias_std_ms: float
    mean_sd_ms: float
    sd_std_ms: float
    t_stat: float
    p_value: float
    significant: bool


@dataclass
class EvalReport:
    cells: list[EvalCell]
    meta: dict = field(default_factory=dict)

    def cell(self, method: str, subset_size: int, regime: str | None = None) -> EvalCell:
        for c in self.cells:
            if c.method == method and c.subset_size == subset_size and regime in (None, c.regime):
                return c
        raise KeyError((method, subset_size, regime))


def summarize(name: str, mc: MonteCarloResult, volume: PhantomVolume) -> EvalCell:
    """One report cell: bias statistics, mean fitting SD and the bias t-test."""
    est, sd = mc.voxel_means()
    truth = volume.truth_t1[mc.roi]
    ok = np.isfinite(est)
    mean, std = mean_bias(est[ok], truth[ok])
    tt = paired_t_test(est[ok], truth[ok]) if ok.sum() >= 2 else TTestResult(math.nan, math.nan, 0)
    sd_ok = sd[np.isfinite(sd)]
    if mc.subset_size > 3 and sd_ok.size:
        msd = float(np.mean(sd_ok))
        ssd = float(np.std(sd_ok, ddof=1)) if sd_ok.size > 1 else 0.0
    else:
        msd = ssd = math.nan
    return EvalCell(name, volume.regime, mc.subset_size, mc.n_runs, mean, std, msd, ssd,
                    float(tt.t), float(tt.p), bool(tt.p < ALPHA))


def evaluate(methods: dict, volume: PhantomVolume, subset_sizes, n_runs: int,
             seed: int) -> EvalReport:
    """Monte Carlo every named method at every subset size (same subsets across methods)."""
    cells = [summarize(name, monte_carlo(m, volume, n_runs, int(n), seed), volume)
             for name, m in methods.items() for n in subset_sizes]
    meta = {"n_runs": n_runs, "seed": seed, "phantom_seed": volume.seed, "regime": volume.regime}
    return EvalReport(cells, meta)


def _fmt_float(x: float) -> str:
    return repr(float(x))


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        for c in report.cells:
            row = asdict(c)
            w.writerow([_fmt_float(v) if isinstance(v, float) else v for v in (row[k] for k in CSV_FIELDS)])


def read_report_csv(path) -> EvalReport:
    types = {f.name: f.type for f in fields(EvalCell)}
    cells = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if tuple(row) != CSV_FIELDS:
                raise ValueError(f"unexpected report columns {list(row)}")
            vals = {}
            for k, v in row.items():
                t = types[k]
                if t == "bool":
                    if v not in ("True", "False"):
                        raise ValueError(f"bad boolean {v!r}")
                    vals[k] = v == "True"
                elif t == "int":
                    vals[k] = int(v)
                elif t == "float":
                    vals[k] = float(v)
                else:
                    vals[k] = v
            cells.append(EvalCell(**vals))
    return EvalReport(cells)


def format_cell(mean: float, std: float, significant: bool | None = None) -> str:
    """``mean(std)`` with two decimals; ``*`` marks a bias not significantly nonzero."""
    if not math.isfinite(mean):
        return "N/A"
    star = "*" if significant is False else ""
    return f"{mean:.2f}{star}({std:.2f})"


def render_table(report: EvalReport) -> str:
    """Text table: regime blocks, method rows, LL_n columns; best column entry bracketed."""
    sizes = sorted({c.subset_size for c in report.cells})
    regimes = list(dict.fromkeys(c.regime for c in report.cells))
    lines = []
    for title, key, std_key in (("Mean T1 bias (ms)", "mean_bias_ms", "bias_std_ms"),
                                ("Fitting SD (ms)", "mean_sd_ms", "sd_std_ms")):
        for regime in regimes:
            cells = [c for c in report.cells if c.regime == regime]
            methods = list(dict.fromkeys(c.method for c in cells))
            lookup = {(c.method, c.subset_size): c for c in cells}
            best = {}
            for n in sizes:
                vals = [(abs(getattr(c, key)), c.method) for c in cells
                        if c.subset_size == n and math.isfinite(getattr(c, key))]
                if vals:
                    best[n] = min(vals)[1]
            header = ["method"] + [f"LL{n}" for n in sizes]
            rows = []
            for m in methods:
                row = [m]
                for n in sizes:
                    c = lookup.get((m, n))
                    if c is None:
                        row.append("-")
                        continue
                    sig = c.significant if key == "mean_bias_ms" else None
                    s = format_cell(getattr(c, key), getattr(c, std_key), sig)
                    row.append(f"[{s}]" if best.get(n) == m else s)
                rows.append(row)
            widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
            lines.append(f"{title}, {regime}")
            for r in [header] + rows:
                lines.append("  ".join(s.ljust(w) for s, w in zip(r, widths)).rstrip())
            lines.append("")
    lines.append("[x] best |value| per column; * bias not significantly nonzero "
                 f"(paired t-test, p >= {ALPHA})")
    return "\n".join(lines) + "\n"
