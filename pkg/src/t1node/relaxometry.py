"""MOLLI signal physics, schedule construction and synthetic phantoms.

The signal model is the usual three-parameter Look-Locker recovery

    S(t) = c * (1 - k * exp(-t / T1*)),   T1 = T1* * (k - 1)

All times are in milliseconds unless a series has been normalized.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

SIGNED = "signed"
MAGNITUDE = "magnitude"

BACKGROUND = "background"


@dataclass(frozen=True)
class RelaxationParams:
    """Per-voxel recovery parameters ``{c, k, t1_star}``."""

    c: float
    k: float
    t1_star: float

    @property
    def t1(self) -> float:
        return t1_from_params(self)

    @property
    def t_null(self) -> float:
        """Zero crossing of the signed recovery curve (ms)."""
        return self.t1_star * np.log(self.k)

    @property
    def is_valid(self) -> bool:
        vals = (self.c, self.k, self.t1_star)
        return bool(np.all(np.isfinite(vals)) and self.c > 0 and self.k > 1 and self.t1_star > 0)

    def as_array(self) -> np.ndarray:
        return np.array([self.c, self.k, self.t1_star], dtype=np.float64)

    @classmethod
    def from_array(cls, x: Sequence[float]) -> "RelaxationParams":
        return cls(float(x[0]), float(x[1]), float(x[2]))

    @classmethod
    def from_t1(cls, t1: float, k: float, c: float = 1.0) -> "RelaxationParams":
        return cls(float(c), float(k), float(t1) / (float(k) - 1.0))


def signal(params, t):
    """Signed recovery signal at time(s) ``t``.

    ``params`` may be a :class:`RelaxationParams` or an array whose last axis
    holds ``(c, k, t1_star)``; in the latter case the result broadcasts as
    ``params[..., None]`` against ``t``.
    """
    c, k, t1s = _unpack(params)
    return c * (1.0 - k * np.exp(-np.asarray(t, dtype=np.float64) / t1s))


def signal_derivative(params, t):
    """Time derivative dS/dt of :func:`signal` (signal units per ms)."""
    c, k, t1s = _unpack(params)
    return (c * k / t1s) * np.exp(-np.asarray(t, dtype=np.float64) / t1s)


def signal_jacobian(params, t) -> np.ndarray:
    """Partial derivatives of the signal w.r.t. ``(c, k, t1_star)``.

    Returns an array of shape ``t.shape + (3,)`` (with leading batch axes when
    ``params`` is batched).
    """
    c, k, t1s = _unpack(params)
    t = np.asarray(t, dtype=np.float64)
    e = np.exp(-t / t1s)
    return np.stack(
        np.broadcast_arrays(1.0 - k * e, -c * e, -c * k * e * t / t1s**2), axis=-1
    )


def t1_from_params(params):
    c, k, t1s = _unpack(params)
    return t1s * (k - 1.0)


def _unpack(params):
    if isinstance(params, RelaxationParams):
        return params.c, params.k, params.t1_star
    p = np.asarray(params, dtype=np.float64)
    if p.ndim == 1:
        return p[0], p[1], p[2]
    return p[..., 0:1], p[..., 1:2], p[..., 2:3]


# --------------------------------------------------------------------------- #
# Schedules
# --------------------------------------------------------------------------- #

_SCHEME_RE = re.compile(r"^\s*(\d+)((?:\(\d+\)\d+)*)\s*$")


class ScheduleError(ValueError):
    pass


def parse_scheme(scheme: str) -> tuple[list[int], list[int]]:
    """Split ``"3(3)3(3)5"`` into image counts ``[3, 3, 5]`` and rests ``[3, 3]``."""
    m = _SCHEME_RE.match(scheme)
    if m is None:
        raise ScheduleError(f"malformed MOLLI scheme {scheme!r}")
    counts = [int(m.group(1))]
    rests = []
    for rest, count in re.findall(r"\((\d+)\)(\d+)", m.group(2)):
        rests.append(int(rest))
        counts.append(int(count))
    if any(n < 1 for n in counts):
        raise ScheduleError(f"scheme {scheme!r} has an empty Look-Locker experiment")
    return counts, rests


@dataclass(frozen=True)
class MolliSchedule:
    times_ms: tuple[float, ...]
    ll_labels: tuple[int, ...]
    scheme: str
    rr_ms: float

    def __len__(self) -> int:
        return len(self.times_ms)

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.times_ms, dtype=np.float64)


DEFAULT_SCHEME = "3(3)3(3)5"
DEFAULT_RR_MS = 1000.0
DEFAULT_TI_OFFSETS_MS = (100.0, 180.0, 260.0)


def build_schedule(
    scheme: str = DEFAULT_SCHEME,
    rr_ms: float = DEFAULT_RR_MS,
    ti_offsets_ms: Sequence[float] = DEFAULT_TI_OFFSETS_MS,
) -> MolliSchedule:
    """Merge the Look-Locker experiments of ``scheme`` into one sorted series.

    Experiment ``g`` reads out at ``ti_offsets_ms[g] + j * rr_ms``.  Each
    experiment is assumed to start from full recovery, so rest periods do not
    enter the inversion times.
    """
    counts, _ = parse_scheme(scheme)
    if not rr_ms > 0:
        raise ScheduleError(f"RR interval must be positive, got {rr_ms}")
    if len(ti_offsets_ms) != len(counts):
        raise ScheduleError(
            f"scheme {scheme!r} has {len(counts)} experiments but {len(ti_offsets_ms)} offsets given"
        )
    times, labels = [], []
    for g, (n, off) in enumerate(zip(counts, ti_offsets_ms)):
        for j in range(n):
            times.append(float(off) + j * float(rr_ms))
            labels.append(g)
    order = sorted(range(len(times)), key=lambda i: (times[i], labels[i]))
    times = [times[i] for i in order]
    labels = [labels[i] for i in order]
    for a, b in zip(times, times[1:]):
        if b <= a:
            raise ScheduleError(f"duplicate inversion time {a} ms in scheme {scheme!r}")
    if times[0] < 0:
        raise ScheduleError("inversion times must be non-negative")
    return MolliSchedule(tuple(times), tuple(labels), scheme, float(rr_ms))


# --------------------------------------------------------------------------- #
# Voxel series
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class VoxelSeries:
    signals: np.ndarray
    times_ms: np.ndarray
    polarity: str = SIGNED
    s_ref: float = 1.0
    t_ref: float = 1.0
    normalized: bool = False

    def __post_init__(self):
        s = np.asarray(self.signals, dtype=np.float64)
        t = np.asarray(self.times_ms, dtype=np.float64)
        object.__setattr__(self, "signals", s)
        object.__setattr__(self, "times_ms", t)
        if s.shape != t.shape or s.ndim != 1 or len(s) < 2:
            raise ValueError("signals and times must be 1-D of equal length >= 2")
        if self.polarity not in (SIGNED, MAGNITUDE):
            raise ValueError(f"unknown polarity {self.polarity!r}")
        if self.polarity == MAGNITUDE and np.any(s < 0):
            raise ValueError("magnitude series contains negative samples")
        if not (self.s_ref > 0 and self.t_ref > 0):
            raise ValueError("normalization scales must be positive")

    def __len__(self) -> int:
        return len(self.signals)

    def subset(self, idx) -> "VoxelSeries":
        idx = np.asarray(idx)
        return replace(self, signals=self.signals[idx], times_ms=self.times_ms[idx])


def magnitude_view(series: VoxelSeries) -> VoxelSeries:
    if series.polarity != SIGNED:
        raise ValueError("series is already a magnitude view")
    return replace(series, signals=np.abs(series.signals), polarity=MAGNITUDE)


def restore_polarity(series: VoxelSeries, null_index: int) -> VoxelSeries:
    """Negate the first ``null_index`` samples of a magnitude series."""
    if not 0 <= null_index <= len(series):
        raise ValueError(f"null index {null_index} outside [0, {len(series)}]")
    s = series.signals.copy()
    s[:null_index] *= -1.0
    return replace(series, signals=s, polarity=SIGNED)


def polarity_candidates(mag: np.ndarray) -> np.ndarray:
    """All prefix-negation trials of magnitude rows.

    ``mag`` has shape ``(..., N)``; the result has shape ``(..., N + 1, N)``
    where trial ``j`` negates samples ``0..j-1``.
    """
    mag = np.asarray(mag, dtype=np.float64)
    n = mag.shape[-1]
    sign = np.where(np.arange(n)[None, :] < np.arange(n + 1)[:, None], -1.0, 1.0)
    return mag[..., None, :] * sign


# --------------------------------------------------------------------------- #
# Phantoms
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class TissueRange:
    t1_ms: tuple[float, float]
    k: tuple[float, float] = (1.7, 2.1)
    c: tuple[float, float] = (0.7, 1.3)


REGIMES: dict[str, dict[str, TissueRange]] = {
    "native": {
        "myocardium": TissueRange((1100.0, 1400.0)),
        "blood": TissueRange((1700.0, 2000.0)),
    },
    "post_gd": {
        "myocardium": TissueRange((350.0, 650.0)),
        "blood": TissueRange((250.0, 450.0)),
    },
}


@dataclass
class PhantomSpec:
    """Tissue layout, parameter ranges, noise level and acquisition schedule.

    ``layout`` is ``"ring"`` (blood pool inside a myocardial ring, background
    outside) or ``"uniform:<tissue>"``.
    """

    dims: tuple[int, int, int] = (24, 24, 1)
    layout: str = "ring"
    regime: str = "native"
    tissues: dict[str, TissueRange] | None = None
    roi_tissues: tuple[str, ...] = ("myocardium", "blood")
    noise_sigma: float = 0.0
    scheme: str = DEFAULT_SCHEME
    rr_ms: float = DEFAULT_RR_MS
    ti_offsets_ms: tuple[float, ...] = DEFAULT_TI_OFFSETS_MS
    blood_radius: float = 0.25
    myo_radius: float = 0.45

    def tissue_ranges(self) -> dict[str, TissueRange]:
        if self.tissues is not None:
            return dict(self.tissues)
        return dict(REGIMES[self.regime])


@dataclass
class PhantomVolume:
    dims: tuple[int, int, int]
    truth: np.ndarray  # (V, 3) float64, (c, k, t1_star)
    tissue: np.ndarray  # (V,) int, index into legend
    legend: tuple[str, ...]
    roi_mask: np.ndarray  # (V,) bool
    schedule: MolliSchedule
    noise_sigma: float
    seed: int
    signed: np.ndarray  # (V, N)
    regime: str = "native"
    meta: dict = field(default_factory=dict)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.signed)

    @property
    def truth_t1(self) -> np.ndarray:
        # stored volumes carry T1 rounded once, not re-derived from rounded c/k/t1*
        if "truth_t1" in self.meta:
            return self.meta["truth_t1"]
        return self.truth[:, 2] * (self.truth[:, 1] - 1.0)

    def series(self, v: int, polarity: str = SIGNED) -> VoxelSeries:
        s = self.signed[v] if polarity == SIGNED else np.abs(self.signed[v])
        return VoxelSeries(s, self.schedule.times, polarity)

    def truth_params(self, v: int) -> RelaxationParams:
        return RelaxationParams.from_array(self.truth[v])

    def roi_indices(self) -> np.ndarray:
        return np.flatnonzero(self.roi_mask)


def tissue_layout(spec: PhantomSpec) -> tuple[np.ndarray, tuple[str, ...]]:
    """Tissue label per voxel (voxel-major, x fastest) and the label legend."""
    nx, ny, nz = spec.dims
    ranges = spec.tissue_ranges()
    if not ranges:
        raise ValueError("empty tissue layout")
    if spec.layout.startswith("uniform:"):
        name = spec.layout.split(":", 1)[1]
        if name not in ranges:
            raise ValueError(f"tissue {name!r} has no parameter range")
        legend = (BACKGROUND, name)
        return np.ones(nx * ny * nz, dtype=np.int64), legend
    if spec.layout != "ring":
        raise ValueError(f"unknown layout {spec.layout!r}")
    for name in ("myocardium", "blood"):
        if name not in ranges:
            raise ValueError(f"ring layout needs a range for {name!r}")
    legend = (BACKGROUND, "myocardium", "blood")
    x, y = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    r = np.hypot(x - (nx - 1) / 2.0, y - (ny - 1) / 2.0) / min(nx, ny)
    plane = np.zeros((ny, nx), dtype=np.int64)
    plane[r < spec.myo_radius] = 1
    plane[r < spec.blood_radius] = 2
    # voxel index = x + nx * (y + ny * z)
    labels = np.tile(plane.reshape(-1), nz)
    return labels, legend


def voxel_rng(seed: int, v: int) -> np.random.Generator:
    """Independent generator per voxel, so chunked generation equals serial."""
    return np.random.default_rng([int(seed), int(v)])


def synthesize_phantom(spec: PhantomSpec, seed: int) -> PhantomVolume:
    if min(spec.dims) < 1:
        raise ValueError(f"invalid dims {spec.dims}")
    if spec.noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    schedule = build_schedule(spec.scheme, spec.rr_ms, spec.ti_offsets_ms)
    ranges = spec.tissue_ranges()
    labels, legend = tissue_layout(spec)
    nv = labels.size
    times = schedule.times
    truth = np.zeros((nv, 3))
    signed = np.zeros((nv, len(times)))
    for v in range(nv):
        name = legend[labels[v]]
        if name == BACKGROUND:
            continue
        rng = voxel_rng(seed, v)
        tr = ranges[name]
        t1 = rng.uniform(*tr.t1_ms)
        k = rng.uniform(*tr.k)
        c = rng.uniform(*tr.c)
        truth[v] = (c, k, t1 / (k - 1.0))
        clean = signal(truth[v], times)
        if spec.noise_sigma > 0:
            clean = clean + rng.normal(0.0, spec.noise_sigma, size=times.size)
        signed[v] = clean
    roi = np.array([legend[i] in spec.roi_tissues for i in labels], dtype=bool)
    return PhantomVolume(
        dims=tuple(int(d) for d in spec.dims),
        truth=truth,
        tissue=labels,
        legend=legend,
        roi_mask=roi,
        schedule=schedule,
        noise_sigma=float(spec.noise_sigma),
        seed=int(seed),
        signed=signed,
        regime=spec.regime,
        meta={"ti_offsets_ms": [float(o) for o in spec.ti_offsets_ms]},
    )
