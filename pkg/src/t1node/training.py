"""Physics-informed losses and the pretrain / fine-tune loop."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .classical import lm_fit_batch
from .models import FcnnModel, Model, ModelCheckpoint, is_physics
from .relaxometry import PhantomVolume, VoxelSeries, signal, signal_derivative

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lam: float = 0.01
    grid_points: int = 1000
    grid_knee_ms: float = 2000.0
    grid_frac: float = 0.75
    t_max_ms: float = 5000.0
    s_ref: float | None = None
    t_ref: float = 1000.0
    lr: float = 1e-3
    epochs_pretrain: int = 200
    epochs_finetune: int = 400
    subset_sizes: tuple[int, ...] = (3, 4, 5)
    seed: int = 0
    batch_size: int = 64

    def __post_init__(self):
        self.subset_sizes = tuple(int(n) for n in self.subset_sizes)
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 < self.grid_frac < 1:
            raise ValueError("grid_frac must lie in (0, 1)")
        if not self.grid_knee_ms < self.t_max_ms:
            raise ValueError("grid_knee_ms must be below t_max_ms")
        if self.grid_points < 2:
            raise ValueError("grid_points must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        d["subset_sizes"] = list(self.subset_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------- #
# normalization and grids
# --------------------------------------------------------------------------- #


def normalize(series: VoxelSeries, s_ref: float, t_ref: float) -> VoxelSeries:
    if not (s_ref > 0 and t_ref > 0):
        raise ValueError("normalization scales must be positive")
    return replace(series, signals=series.signals / s_ref, times_ms=series.times_ms / t_ref,
                   s_ref=float(s_ref), t_ref=float(t_ref), normalized=True)


def denormalize(series: VoxelSeries) -> VoxelSeries:
    if not series.normalized:
        return series
    return replace(series, signals=series.signals * series.s_ref,
                   times_ms=series.times_ms * series.t_ref, s_ref=1.0, t_ref=1.0, normalized=False)


def gamma_factor(s_ref: float, t_ref: float) -> float:
    """Converts a raw-unit slope dS/dt into normalized units dS^/dt^."""
    return float(t_ref) / float(s_ref)


def params_to_normalized(x, s_ref, t_ref) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    x[..., 0] /= s_ref
    x[..., 2] /= t_ref
    return x


def params_to_raw(x, s_ref, t_ref) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    x[..., 0] *= s_ref
    x[..., 2] *= t_ref
    return x


def dense_time_grid(config: TrainConfig) -> np.ndarray:
    """``grid_frac`` of the points on [0, knee], the rest on (knee, t_max]."""
    n = config.grid_points
    n_low = min(max(int(round(config.grid_frac * n)), 1), n - 1)
    low = np.linspace(0.0, config.grid_knee_ms, n_low)
    if n_low == 1:
        low = np.array([0.0])
    high = np.linspace(config.grid_knee_ms, config.t_max_ms, n - n_low + 1)[1:]
    return np.unique(np.concatenate([low, high]))


# --------------------------------------------------------------------------- #
# losses
# --------------------------------------------------------------------------- #


def _t1_node(pred: ad.Node) -> ad.Node:
    if pred.shape[-1] == 1:
        return pred
    return ad.mul(pred[:, 2:3], ad.sub(pred[:, 1:2], 1.0))


def t1_loss(pred: ad.Node, truth: np.ndarray) -> ad.Node:
    """Mean squared T1 error. ``pred`` is (B, 3) params or (B, 1) T1; ``truth`` is (B, 3).

    Both sides are in normalized time units.
    """
    pred = ad.constant(pred)
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if pred.shape[0] != truth.shape[0]:
        raise ValueError("batch size mismatch")
    t1_true = (truth[:, 2] * (truth[:, 1] - 1.0))[:, None]
    return ad.mean(ad.square(ad.sub(_t1_node(pred), t1_true)))


def curve_nodes(pred: ad.Node, t_hat: np.ndarray) -> tuple[ad.Node, ad.Node]:
    """Signal and its time derivative at normalized times for (B, 3) params."""
    c, k, t1s = pred[:, 0:1], pred[:, 1:2], pred[:, 2:3]
    e = ad.exp(ad.div(-np.asarray(t_hat)[None, :], t1s))
    s = ad.mul(c, ad.sub(1.0, ad.mul(k, e)))
    ds = ad.mul(ad.div(ad.mul(c, k), t1s), e)
    return s, ds


def physics_loss(pred: ad.Node, truth: np.ndarray, grid_ms: np.ndarray, lam: float, gamma: float,
                 s_ref: float = 1.0, t_ref: float = 1.0) -> ad.Node:
    """Curve-reconstruction plus weighted slope mismatch on a dense grid.

    ``pred`` holds normalized parameters; ``truth`` holds raw parameters
    (signal units, ms) evaluated on ``grid_ms``. The target slope is taken in
    raw units and scaled by ``gamma`` into normalized units.
    """
    pred = ad.constant(pred)
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    grid_ms = np.asarray(grid_ms, dtype=np.float64)
    if grid_ms.size == 0:
        raise ValueError("empty grid")
    s_true = signal(truth, grid_ms) / s_ref
    ds_true = gamma * signal_derivative(truth, grid_ms)
    s_pred, ds_pred = curve_nodes(pred, grid_ms / t_ref)
    term = ad.square(ad.sub(s_true, s_pred))
    if lam:
        term = ad.add(term, ad.mul(lam, ad.square(ad.sub(ds_true, ds_pred))))
    return ad.mean(term)


def total_loss(pred, truth, grid_ms, lam, gamma, s_ref=1.0, t_ref=1.0):
    """Returns ``(total, t1_term, physics_term)``; ``truth`` in raw units."""
    truth_n = params_to_normalized(truth, s_ref, t_ref)
    lt = t1_loss(pred, truth_n)
    lp = physics_loss(pred, truth, grid_ms, lam, gamma, s_ref, t_ref)
    return ad.add(lt, lp), lt, lp


# --------------------------------------------------------------------------- #
# sampling and labels
# --------------------------------------------------------------------------- #


def phase_bounds(n_times: int) -> tuple[int, int]:
    """Index boundaries (early | intermediate | convergence); (3, 8) for 11 images."""
    return int(round(n_times * 3 / 11)), int(round(n_times * 8 / 11))


def sample_subset(n_times: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices with at least one from each of the three phases."""
    if hasattr(n_times, "__len__"):
        n_times = len(n_times)
    if n < 3:
        raise ValueError("subset size must be >= 3 to cover all phases")
    if n > n_times:
        raise ValueError(f"subset size {n} exceeds {n_times} acquisitions")
    a, b = phase_bounds(n_times)
    picks = [int(rng.integers(0, a)), int(rng.integers(a, b)), int(rng.integers(b, n_times))]
    rest = np.setdiff1d(np.arange(n_times), picks)
    extra = rng.choice(rest, size=n - 3, replace=False) if n > 3 else np.array([], dtype=int)
    return np.sort(np.concatenate([picks, extra]).astype(np.int64))


def fit_labels(volume: PhantomVolume) -> tuple[np.ndarray, np.ndarray]:
    """LM labels on the full signed series of ROI voxels.

    Returns ``(labels, mask)``: (V, 3) raw parameters (NaN outside the mask) and
    the boolean training mask (ROI and converged).
    """
    roi = volume.roi_indices()
    labels = np.full((volume.n_voxels, 3), np.nan)
    mask = np.zeros(volume.n_voxels, dtype=bool)
    if roi.size == 0:
        return labels, mask
    bf = lm_fit_batch(volume.schedule.times, volume.signed[roi])
    ok = bf.converged & bf.valid
    labels[roi[ok]] = bf.x[ok]
    mask[roi[ok]] = True
    return labels, mask


# --------------------------------------------------------------------------- #
# optimizer and loop
# --------------------------------------------------------------------------- #


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainData:
    signals: np.ndarray  # (M, N) raw signed
    times: np.ndarray  # (N,) ms
    labels: np.ndarray  # (M, 3) raw


def training_data(volume: PhantomVolume, labels: np.ndarray, mask: np.ndarray) -> TrainData:
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise ValueError("no labelled voxels to train on")
    lab = labels[idx]
    if not np.all(np.isfinite(lab)):
        raise ValueError("labels must cover every masked voxel")
    return TrainData(volume.signed[idx], volume.schedule.times, lab)


def model_inputs(model: Model, signals: np.ndarray, s_ref: float) -> np.ndarray:
    """Normalized input signals; the direct-T1 baseline sees magnitudes only."""
    s = signals / s_ref
    return np.abs(s) if not is_physics(model) else s


def batch_loss(model: Model, sig, times_ms, lab, cfg: TrainConfig, s_ref, t_ref, grid):
    pred = model.forward(model_inputs(model, sig, s_ref), times_ms / t_ref)
    if not is_physics(model):
        lt = t1_loss(pred, params_to_normalized(lab, s_ref, t_ref))
        return lt, lt, None
    return total_loss(pred, lab, grid, cfg.lam, gamma_factor(s_ref, t_ref), s_ref, t_ref)


def _gather(data: TrainData, rows, subsets):
    if subsets is None:
        return data.signals[rows], np.broadcast_to(data.times, (len(rows), data.times.size))
    sig = np.take_along_axis(data.signals[rows], subsets, axis=1)
    return sig, data.times[subsets]


def _draw_subsets(n_rows, n_times, sizes, rng):
    n = int(rng.choice(sizes))
    return np.stack([sample_subset(n_times, n, rng) for _ in range(n_rows)])


def train(model: Model, volume: PhantomVolume, labels: np.ndarray, mask: np.ndarray,
          config: TrainConfig, progress=None) -> tuple[ModelCheckpoint, list[dict]]:
    """Pretrain on full series, then fine-tune on phase-covering subsets.

    The loss trace is evaluated after every epoch on a fixed monitor set (all
    training voxels; full series while pretraining, one seeded subset per
    voxel while fine-tuning), so it is comparable across epochs.
    """
    data = training_data(volume, labels, mask)
    s_ref = config.s_ref or float(np.max(np.abs(data.signals)))
    t_ref = config.t_ref
    grid = dense_time_grid(config)
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), lr=config.lr)
    M, N = data.signals.shape

    fixed = model.n_inputs if isinstance(model, FcnnModel) else None
    phases = []
    if config.epochs_pretrain > 0 and (fixed is None or fixed == N):
        phases.append(("pretrain", config.epochs_pretrain, None))
    if config.epochs_finetune > 0:
        sizes = (fixed,) if fixed is not None else config.subset_sizes
        if fixed is not None and fixed == N:
            sizes = None
        phases.append(("finetune", config.epochs_finetune, sizes))
    if not phases:
        raise ValueError("nothing to train: no epochs for this architecture")

    monitor_rng = np.random.default_rng([config.seed, 1])
    monitors = {
        name: None if sizes is None else [
            np.stack([sample_subset(N, n, monitor_rng) for _ in range(M)]) for n in sizes
        ]
        for name, _, sizes in phases
    }

    def evaluate(name):
        parts = monitors[name] or [None]
        acc = np.zeros(3)
        with ad.no_grad():
            for subs in parts:
                sig, tms = _gather(data, np.arange(M), subs)
                tot, lt, lp = batch_loss(model, sig, tms, data.labels, config, s_ref, t_ref, grid)
                acc += [lt.value, 0.0 if lp is None else lp.value, tot.value]
        acc /= len(parts)
        return {"l_t1": float(acc[0]), "l_physics": float(acc[1]), "l_total": float(acc[2])}

    trace = [{"epoch": 0, **evaluate(phases[0][0])}]
    epoch = 0
    for name, n_epochs, sizes in phases:
        for _ in range(n_epochs):
            epoch += 1
            order = rng.permutation(M)
            for start in range(0, M, config.batch_size):
                rows = order[start : start + config.batch_size]
                subs = None if sizes is None else _draw_subsets(len(rows), N, sizes, rng)
                sig, tms = _gather(data, rows, subs)
                model.zero_grad()
                tot, _, _ = batch_loss(model, sig, tms, data.labels[rows], config, s_ref, t_ref, grid)
                if not np.isfinite(tot.value):
                    raise TrainingDivergence(f"loss became {tot.value} at epoch {epoch} ({name})")
                ad.backward(tot)
                opt.step()
            row = {"epoch": epoch, **evaluate(name)}
            if not np.isfinite(row["l_total"]):
                raise TrainingDivergence(f"monitor loss became {row['l_total']} at epoch {epoch}")
            trace.append(row)
            if progress is not None:
                progress(name, row)
    ckpt = ModelCheckpoint(
        model, s_ref, t_ref, config.seed,
        training={"config": config.to_dict(), "n_voxels": int(M), "epochs": epoch,
                  "final_loss": trace[-1]["l_total"]},
    )
    return ckpt, trace


def write_trace(trace: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "l_t1", "l_physics", "l_total"])
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "l_t1": float(r["l_t1"]), "l_physics": float(r["l_physics"]),
             "l_total": float(r["l_total"])}
            for r in csv.DictReader(fh)
        ]
