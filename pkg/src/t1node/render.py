"""PGM/PPM map images and SVG plots (relaxation curves, loss traces)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .relaxometry import signal

T1_WINDOWS_MS = {"native": (0.0, 2000.0), "post_gd": (0.0, 800.0)}

# piecewise-linear colormap anchors (dark blue -> cyan -> yellow -> red)
_CMAP = np.array([
    [0.0, 0, 0, 96],
    [0.25, 0, 96, 255],
    [0.5, 0, 224, 224],
    [0.75, 255, 224, 0],
    [1.0, 224, 0, 0],
])


def _slices(values: np.ndarray, dims) -> np.ndarray:
    """(V,) -> 2-D mosaic of the z-slices side by side, (ny, nx * nz)."""
    nx, ny, nz = dims
    vol = np.asarray(values).reshape(nz, ny, nx)
    return np.concatenate(list(vol), axis=1)


def window(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise ValueError("window upper bound must exceed the lower bound")
    v = np.nan_to_num(np.asarray(values, dtype=np.float64), nan=lo)
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0)


def colormap(u: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to uint8 RGB."""
    u = np.asarray(u, dtype=np.float64)
    rgb = [np.interp(u, _CMAP[:, 0], _CMAP[:, i]) for i in (1, 2, 3)]
    return np.rint(np.stack(rgb, axis=-1)).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> Path:
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
    return path


def write_ppm(path, image: np.ndarray) -> Path:
    img = np.asarray(image, dtype=np.uint8)
    h, w, _ = img.shape
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    magic, w, h, _ = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    raw = np.frombuffer(parts[4], dtype=np.uint8)
    return raw.reshape(h, w, 3) if magic == b"P6" else raw.reshape(h, w)


def render_t1_map(path, t1_map, dims, regime: str = "native", valid_mask=None,
                  win: tuple[float, float] | None = None) -> Path:
    """Pseudocolor T1 image; invalid voxels are black."""
    lo, hi = win or T1_WINDOWS_MS.get(regime, T1_WINDOWS_MS["native"])
    rgb = colormap(window(t1_map, lo, hi))
    if valid_mask is not None:
        rgb[~np.asarray(valid_mask, dtype=bool)] = 0
    img = np.stack([_slices(rgb[:, i], dims) for i in range(3)], axis=-1)
    return write_ppm(path, img)


def render_index_map(path, index_map, dims, n_max: int) -> Path:
    """Grayscale null-index image scaled so ``n_max`` is white."""
    u = np.clip(np.asarray(index_map, dtype=np.float64) / max(n_max, 1), 0.0, 1.0)
    return write_pgm(path, np.rint(255 * _slices(u, dims)).astype(np.uint8))


# --------------------------------------------------------------------------- #
# SVG
# --------------------------------------------------------------------------- #

W, H, PAD = 480, 320, 48


class _Axes:
    def __init__(self, x_range, y_range):
        self.x0, self.x1 = x_range
        self.y0, self.y1 = y_range
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0

    def px(self, x):
        return PAD + (np.asarray(x) - self.x0) / (self.x1 - self.x0) * (W - 2 * PAD)

    def py(self, y):
        return H - PAD - (np.asarray(y) - self.y0) / (self.y1 - self.y0) * (H - 2 * PAD)


def _polyline(ax, xs, ys, cls, color):
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(ax.px(xs), ax.py(ys)))
    return f'<polyline class="{cls}" fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def _frame(ax, title, xlabel, ylabel):
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<text x="{W / 2}" y="{H - 10}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
        f'<text x="14" y="{H / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {H / 2})">{escape(ylabel)}</text>',
        f'<text x="{PAD}" y="{H - PAD + 14}" font-size="9">{ax.x0:.4g}</text>',
        f'<text x="{W - PAD}" y="{H - PAD + 14}" text-anchor="end" font-size="9">{ax.x1:.4g}</text>',
        f'<text x="{PAD - 4}" y="{H - PAD}" text-anchor="end" font-size="9">{ax.y0:.3g}</text>',
        f'<text x="{PAD - 4}" y="{PAD + 4}" text-anchor="end" font-size="9">{ax.y1:.3g}</text>',
    ]


def relaxation_svg(times_ms, signals, params=None, null_index: int | None = None,
                   title: str = "") -> str:
    """Data markers (one ``circle.data`` per sample), fitted curve and null marker."""
    t = np.asarray(times_ms, dtype=np.float64)
    s = np.asarray(signals, dtype=np.float64)
    t_hi = float(t.max()) * 1.05
    grid = np.linspace(0.0, t_hi, 200)
    curve = signal(np.asarray(params, dtype=np.float64), grid) if params is not None else None
    ys = s if curve is None else np.concatenate([s, curve])
    ax = _Axes((0.0, t_hi), (min(0.0, float(ys.min())), max(0.0, float(ys.max()))))
    out = _frame(ax, title, "inversion time (ms)", "signal")
    out.append(f'<line x1="{PAD}" y1="{ax.py(0):.2f}" x2="{W - PAD}" y2="{ax.py(0):.2f}" '
               'stroke="#999" stroke-dasharray="3,3"/>')
    if curve is not None:
        out.append(_polyline(ax, grid, curve, "fit", "#c03030"))
        c, k, t1s = np.asarray(params, dtype=np.float64)
        if k > 1 and t1s > 0:
            tn = t1s * np.log(k)
            out.append(f'<line class="null" x1="{ax.px(tn):.2f}" y1="{PAD}" x2="{ax.px(tn):.2f}" '
                       f'y2="{H - PAD}" stroke="#3050c0" stroke-dasharray="4,2"/>')
    for i, (a, b) in enumerate(zip(ax.px(t), ax.py(s))):
        fill = "#3050c0" if null_index is not None and i < null_index else "black"
        out.append(f'<circle class="data" cx="{a:.2f}" cy="{b:.2f}" r="3.5" fill="{fill}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def loss_trace_svg(trace: list[dict], title: str = "training loss") -> str:
    """Log-scale loss curves (l_t1, l_physics, l_total) against epoch."""
    ep = np.array([r["epoch"] for r in trace], dtype=np.float64)
    series = {k: np.array([r[k] for r in trace], dtype=np.float64)
              for k in ("l_t1", "l_physics", "l_total")}
    logs = {k: np.log10(np.maximum(v, 1e-300)) for k, v in series.items() if np.any(v > 0)}
    allv = np.concatenate(list(logs.values())) if logs else np.zeros(1)
    ax = _Axes((float(ep.min()), float(ep.max())), (float(allv.min()), float(allv.max())))
    out = _frame(ax, title, "epoch", "log10 loss")
    colors = {"l_t1": "#3050c0", "l_physics": "#30a030", "l_total": "black"}
    for i, (k, v) in enumerate(logs.items()):
        out.append(_polyline(ax, ep, v, k, colors[k]))
        out.append(f'<text x="{W - PAD}" y="{PAD + 12 * i}" text-anchor="end" font-size="10" '
                   f'fill="{colors[k]}">{k}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
