"""Polarity-corrected T1 mapping with trained models and classical fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .classical import fitting_sd_batch, polarity_restore_batch, select_candidate
from .models import ModelCheckpoint, arity, is_physics
from .ode import IntegrationError
from .relaxometry import (
    MAGNITUDE,
    PhantomVolume,
    RelaxationParams,
    VoxelSeries,
    polarity_candidates,
    signal,
)
from .training import params_to_raw
from .volume_io import read_arrays, write_arrays

DEFAULT_CHUNK = 256


@dataclass
class MapResult:
    dims: tuple[int, int, int]
    t1_map: np.ndarray  # (V,) ms, 0 outside valid voxels
    null_index_map: np.ndarray  # (V,) int
    residual_map: np.ndarray  # (V,) reconstruction MSE of the winning trial
    params_map: np.ndarray  # (V, 3) raw (c, k, t1_star)
    sd_map: np.ndarray  # (V,) ms, NaN where undefined
    valid_mask: np.ndarray  # (V,) bool
    n_trials: int = 0

    def arrays(self) -> dict:
        return {
            "t1_map": self.t1_map,
            "null_index_map": self.null_index_map.astype(np.float64),
            "residual_map": self.residual_map,
            "c_map": self.params_map[:, 0],
            "k_map": self.params_map[:, 1],
            "t1_star_map": self.params_map[:, 2],
            "sd_map": self.sd_map,
        }


@dataclass
class VoxelInference:
    null_index: np.ndarray  # (B,)
    params: np.ndarray  # (B, 3) raw
    residual: np.ndarray  # (B,)
    trial_residuals: np.ndarray  # (B, n + 1)
    t1: np.ndarray  # (B,)
    signed: np.ndarray  # (B, n) winning trial, raw units
    valid: np.ndarray  # (B,)


def _predict(ckpt: ModelCheckpoint, signals_n: np.ndarray, times_n: np.ndarray) -> np.ndarray:
    with ad.no_grad(), ad.exact_rows():
        return ckpt.model.forward(signals_n, times_n).value


def _predict_guarded(ckpt, signals_n, times_n, out_dim):
    """Forward pass; on failure retry row by row and mark failed rows NaN."""
    try:
        out = _predict(ckpt, signals_n, times_n)
        if np.all(np.isfinite(out)):
            return out
    except (IntegrationError, ValueError, FloatingPointError):
        pass
    out = np.full((signals_n.shape[0], out_dim), np.nan)
    tn = np.broadcast_to(times_n, signals_n.shape)
    for i in range(signals_n.shape[0]):
        try:
            out[i] = _predict(ckpt, signals_n[i : i + 1], tn[i : i + 1])[0]
        except (IntegrationError, ValueError, FloatingPointError):
            pass
    return out


def infer_batch(ckpt: ModelCheckpoint, magnitude: np.ndarray, times_ms: np.ndarray) -> VoxelInference:
    """Polarity-corrected inference for magnitude rows ``(B, n)`` at ``times_ms`` (n,).

    Every prefix-negation trial ``j = 0..n`` is passed through the model and
    scored by the mean squared difference between the trial signals and the
    model's recovery curve at the acquisition times (normalized units). The
    smallest score wins; ties go to the smaller ``j``. Direct-T1 models have no
    curve to score and read the magnitudes as given.
    """
    model, s_ref, t_ref = ckpt.model, ckpt.s_ref, ckpt.t_ref
    mag = np.atleast_2d(np.asarray(magnitude, dtype=np.float64))
    if np.any(mag < 0):
        raise ValueError("magnitude rows contain negative samples")
    B, n = mag.shape
    t = np.asarray(times_ms, dtype=np.float64)
    if t.shape != (n,):
        raise ValueError("times must match the row length")
    k = arity(model)
    if k is not None and k != n:
        raise ValueError(f"model expects {k} samples per voxel, got {n}")
    tn = t / t_ref

    if not is_physics(model):
        t1n = _predict_guarded(ckpt, mag / s_ref, tn, 1)[:, 0]
        nan3 = np.full((B, 3), np.nan)
        return VoxelInference(np.zeros(B, dtype=np.int64), nan3, np.full(B, np.nan),
                              np.full((B, n + 1), np.nan), t1n * t_ref, mag.copy(), np.isfinite(t1n))

    trials = polarity_candidates(mag).reshape(B * (n + 1), n) / s_ref
    pred = _predict_guarded(ckpt, trials, tn, 3)
    recon = signal(pred, tn)
    mse = np.mean((recon - trials) ** 2, axis=1).reshape(B, n + 1)
    ok = np.isfinite(mse)
    j = select_candidate(mse, ok)
    valid = j >= 0
    jj = np.maximum(j, 0)
    rows = np.arange(B) * (n + 1) + jj
    params = params_to_raw(pred[rows], s_ref, t_ref)
    params[~valid] = np.nan
    t1 = params[:, 2] * (params[:, 1] - 1.0)
    signed = trials[rows] * s_ref
    resid = np.where(valid, mse[np.arange(B), jj], np.nan)
    return VoxelInference(j, params, resid, mse, t1, signed, valid)


def polarity_corrected_infer(ckpt: ModelCheckpoint, series: VoxelSeries):
    """Single-voxel form: returns ``(null_index, params, residual)``."""
    if series.polarity != MAGNITUDE:
        raise ValueError("inference expects a magnitude series")
    out = infer_batch(ckpt, series.signals[None], series.times_ms)
    if not out.valid[0]:
        raise RuntimeError("every polarity trial failed")
    return int(out.null_index[0]), RelaxationParams.from_array(out.params[0]), float(out.residual[0])


def _empty_map(volume: PhantomVolume, n_trials: int) -> MapResult:
    V = volume.n_voxels
    return MapResult(
        dims=volume.dims,
        t1_map=np.zeros(V),
        null_index_map=np.zeros(V, dtype=np.int64),
        residual_map=np.full(V, np.nan),
        params_map=np.full((V, 3), np.nan),
        sd_map=np.full(V, np.nan),
        valid_mask=np.zeros(V, dtype=bool),
        n_trials=n_trials,
    )


def _resolve_subset(volume: PhantomVolume, subset) -> np.ndarray:
    N = len(volume.schedule)
    if subset is None:
        return np.arange(N)
    idx = np.asarray(subset, dtype=np.int64)
    if idx.ndim != 1 or idx.size < 3 or idx.size > N:
        raise ValueError(f"subset must hold 3..{N} indices, got {idx.size}")
    if np.any(idx < 0) or np.any(idx >= N) or np.any(np.diff(idx) <= 0):
        raise ValueError("subset indices must be sorted, unique and within the schedule")
    return idx


def map_volume(ckpt: ModelCheckpoint, volume: PhantomVolume, subset=None,
               chunk: int = DEFAULT_CHUNK) -> MapResult:
    """Polarity-corrected inference over all ROI voxels.

    Voxels are processed in chunks of ``chunk``; each voxel's numbers do not
    depend on the chunk size. Background voxels get T1 = 0 and are flagged
    invalid.
    """
    idx = _resolve_subset(volume, subset)
    roi = volume.roi_indices()
    if roi.size == 0:
        raise ValueError("empty ROI")
    n = idx.size
    out = _empty_map(volume, n + 1)
    mag = np.abs(volume.signed[roi][:, idx])
    times = volume.schedule.times[idx]
    for start in range(0, roi.size, max(int(chunk), 1)):
        sl = slice(start, start + chunk)
        vox = roi[sl]
        res = infer_batch(ckpt, mag[sl], times)
        _store(out, vox, res.t1, res.null_index, res.residual, res.params, res.valid)
        if is_physics(ckpt.model) and n > 3:
            rss = np.sum((signal(res.params, times) - res.signed) ** 2, axis=1)
            sd = fitting_sd_batch(np.nan_to_num(res.params, nan=1.0), times, rss)
            out.sd_map[vox] = np.where(res.valid, sd, np.nan)
    return out


def _store(out: MapResult, vox, t1, null_index, residual, params, valid):
    out.t1_map[vox] = np.where(valid, t1, 0.0)
    out.null_index_map[vox] = np.maximum(null_index, 0)
    out.residual_map[vox] = residual
    out.params_map[vox] = params
    out.valid_mask[vox] = valid


def classical_map(volume: PhantomVolume, subset=None, method: str = "lm") -> MapResult:
    """Polarity-restored classical fit (``lm`` or ``trf``) over all ROI voxels."""
    idx = _resolve_subset(volume, subset)
    roi = volume.roi_indices()
    if roi.size == 0:
        raise ValueError("empty ROI")
    n = idx.size
    out = _empty_map(volume, n + 1)
    times = volume.schedule.times[idx]
    mag = np.abs(volume.signed[roi][:, idx])
    j, fit = polarity_restore_batch(times, mag, method)
    valid = (j >= 0) & np.all(np.isfinite(fit.x), axis=1)
    _store(out, roi, fit.t1, j, fit.rss / n, fit.x, valid)
    if n > 3:
        out.sd_map[roi] = np.where(valid, fitting_sd_batch(fit.x, times, fit.rss), np.nan)
    return out


def save_map(result: MapResult, out_dir, kind: str = "map", meta: dict | None = None):
    meta = {"dims": list(result.dims), "n_trials": result.n_trials, **(meta or {})}
    return write_arrays(out_dir, kind, meta, result.arrays(), {"valid_mask": result.valid_mask})


def load_map(in_dir) -> MapResult:
    manifest, a = read_arrays(in_dir)
    params = np.stack([a["c_map"], a["k_map"], a["t1_star_map"]], axis=1)
    return MapResult(tuple(manifest["dims"]), a["t1_map"], a["null_index_map"].astype(np.int64),
                     a["residual_map"], params, a["sd_map"], a["valid_mask"],
                     int(manifest.get("n_trials", 0)))
