"""Manifest + raw-array directory format shared by volumes, fits, maps and checkpoints.

A directory holds ``manifest.json`` (UTF-8) and one file per array. Float
arrays are little-endian float32 (``.f32``); boolean masks are bit-packed
(``.bits``). The manifest records each array's shape, encoding and SHA-256.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .relaxometry import MolliSchedule, PhantomVolume, build_schedule

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class FormatError(ValueError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_arrays(out_dir, kind: str, meta: dict, arrays: dict, masks: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
        fname = f"{name}.f32"
        (out / fname).write_bytes(a.tobytes())
        entries[name] = {"file": fname, "shape": list(a.shape), "encoding": "float32le"}
    for name, arr in (masks or {}).items():
        a = np.asarray(arr, dtype=bool)
        fname = f"{name}.bits"
        (out / fname).write_bytes(np.packbits(a.reshape(-1)).tobytes())
        entries[name] = {"file": fname, "shape": list(a.shape), "encoding": "packbits"}
    for e in entries.values():
        e["sha256"] = _sha256(out / e["file"])
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, **meta, "arrays": entries}
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_manifest(in_dir) -> dict:
    path = Path(in_dir) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no manifest in {in_dir}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {manifest.get('format_version')}")
    return manifest


def read_arrays(in_dir, verify: bool = True) -> tuple[dict, dict]:
    """Return ``(manifest, arrays)``; float arrays come back as float64."""
    src = Path(in_dir)
    manifest = read_manifest(src)
    arrays = {}
    for name, e in manifest["arrays"].items():
        path = src / e["file"]
        if verify and _sha256(path) != e["sha256"]:
            raise FormatError(f"checksum mismatch for {path}")
        raw = path.read_bytes()
        shape = tuple(e["shape"])
        if e["encoding"] == "float32le":
            a = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            if a.size != int(np.prod(shape)):
                raise FormatError(f"{path}: expected {shape}, got {a.size} values")
            arrays[name] = a.reshape(shape)
        elif e["encoding"] == "packbits":
            n = int(np.prod(shape))
            bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))[:n]
            arrays[name] = bits.astype(bool).reshape(shape)
        else:
            raise FormatError(f"unknown encoding {e['encoding']!r}")
    return manifest, arrays


def schedule_meta(schedule: MolliSchedule, offsets) -> dict:
    return {
        "scheme": schedule.scheme,
        "rr_ms": schedule.rr_ms,
        "ti_offsets_ms": [float(o) for o in offsets],
        "times_ms": list(schedule.times_ms),
    }


def save_volume(volume: PhantomVolume, out_dir) -> Path:
    offsets = volume.meta.get("ti_offsets_ms")
    if offsets is None:
        offsets = _offsets_from_schedule(volume.schedule)
    meta = {
        "dims": list(volume.dims),
        **schedule_meta(volume.schedule, offsets),
        "noise_sigma": volume.noise_sigma,
        "seed": volume.seed,
        "regime": volume.regime,
        "tissue_legend": list(volume.legend),
        "n_times": len(volume.schedule),
    }
    arrays = {
        "truth_c": volume.truth[:, 0],
        "truth_k": volume.truth[:, 1],
        "truth_t1_star": volume.truth[:, 2],
        "truth_t1": volume.truth_t1,
        "tissue": volume.tissue.astype(np.float64),
        "acquisitions_signed": volume.signed,
        "acquisitions_magnitude": np.abs(volume.signed),
    }
    return write_arrays(out_dir, "phantom", meta, arrays, {"roi_mask": volume.roi_mask})


def _offsets_from_schedule(schedule: MolliSchedule) -> list[float]:
    first = {}
    for t, g in zip(schedule.times_ms, schedule.ll_labels):
        first.setdefault(g, t)
    return [first[g] for g in sorted(first)]


def load_volume(in_dir) -> PhantomVolume:
    manifest, arrays = read_arrays(in_dir)
    if manifest["kind"] != "phantom":
        raise FormatError(f"{in_dir} holds a {manifest['kind']!r}, not a phantom")
    schedule = build_schedule(manifest["scheme"], manifest["rr_ms"], manifest["ti_offsets_ms"])
    truth = np.stack([arrays["truth_c"], arrays["truth_k"], arrays["truth_t1_star"]], axis=1)
    signed = arrays["acquisitions_signed"]
    if signed.shape[1] != len(schedule):
        raise FormatError("acquisition length does not match schedule")
    return PhantomVolume(
        dims=tuple(manifest["dims"]),
        truth=truth,
        tissue=arrays["tissue"].astype(np.int64),
        legend=tuple(manifest["tissue_legend"]),
        roi_mask=arrays["roi_mask"],
        schedule=schedule,
        noise_sigma=float(manifest["noise_sigma"]),
        seed=int(manifest["seed"]),
        signed=signed,
        regime=manifest.get("regime", "native"),
        meta={"ti_offsets_ms": manifest["ti_offsets_ms"], "truth_t1": arrays["truth_t1"]},
    )
