"""LSTM-ODE estimator and fully connected baselines.

Both families map a (normalized) voxel series to recovery parameters. The
LSTM-ODE runs a gated update per sample and evolves the candidate hidden state
with a learned vector field between consecutive inversion times; the cell
state stays discrete.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .ode import dopri5_integrate

LSTM_ODE = "lstm_ode"
FCNN = "fcnn"
HEAD_DIRECT = "direct_t1"
HEAD_PHYSICS = "physics_params"


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def softplus_params(raw: ad.Node) -> ad.Node:
    """Map raw (B, 3) outputs to ``(c, k, t1_star)`` with ``c > 0, k > 1, t1_star > 0``."""
    return ad.add(ad.softplus(raw), np.array([0.0, 1.0, 0.0]))


class Model:
    """Named parameter leaves plus architecture metadata."""

    kind: str = ""

    def __init__(self):
        self.params: dict[str, ad.Node] = {}

    def _add(self, name: str, value: np.ndarray) -> ad.Node:
        node = ad.parameter(value, name=name)
        self.params[name] = node
        return node

    def parameters(self) -> list[ad.Node]:
        return list(self.params.values())

    def zero_grad(self):
        ad.reset_grads(self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, node in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != node.value.shape:
                raise ValueError(f"{k}: expected {node.value.shape}, got {v.shape}")
            node.value = v.copy()
            node.zero_grad()

    def config(self) -> dict:
        raise NotImplementedError


# --------------------------------------------------------------------------- #
# LSTM-ODE
# --------------------------------------------------------------------------- #


def lstm_cell(x, h_prev, c_prev, W, b):
    """One gated update. ``W`` is (4H, d_in + H), rows ordered (i, f, o, g).

    Returns ``(h_candidate, c_new)``.
    """
    x, h_prev, c_prev = ad.constant(x), ad.constant(h_prev), ad.constant(c_prev)
    H = h_prev.shape[-1]
    if W.shape[0] != 4 * H or W.shape[1] != x.shape[-1] + H:
        raise ValueError(f"shape mismatch: W {W.shape}, x {x.shape}, h {h_prev.shape}")
    z = ad.linear_map(ad.concat([x, h_prev], axis=-1), W, b)
    i = ad.sigmoid(z[..., 0:H])
    f = ad.sigmoid(z[..., H : 2 * H])
    o = ad.sigmoid(z[..., 2 * H : 3 * H])
    g = ad.tanh(z[..., 3 * H : 4 * H])
    c_new = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h_cand = ad.mul(o, ad.tanh(c_new))
    return h_cand, c_new


class LstmOdeModel(Model):
    kind = LSTM_ODE

    def __init__(self, d_emb: int = 16, hidden: int = 32, dyn_hidden: int = 32,
                 dec_hidden: int = 32, solver_tol: float = 1e-3, seed: int = 0):
        super().__init__()
        self.d_emb, self.hidden = d_emb, hidden
        self.dyn_hidden, self.dec_hidden = dyn_hidden, dec_hidden
        self.solver_tol = solver_tol
        self.seed = seed
        rng = np.random.default_rng(seed)
        H = hidden
        self._add("embed_W", _uniform(rng, (d_emb, 2), 2))
        self._add("embed_b", _uniform(rng, (d_emb,), 2))
        self._add("lstm_W", _uniform(rng, (4 * H, d_emb + H), d_emb + H))
        self._add("lstm_b", _uniform(rng, (4 * H,), d_emb + H))
        self._add("dyn_W1", _uniform(rng, (dyn_hidden, H + 1), H + 1))
        self._add("dyn_b1", _uniform(rng, (dyn_hidden,), H + 1))
        self._add("dyn_W2", _uniform(rng, (H, dyn_hidden), dyn_hidden))
        self._add("dyn_b2", _uniform(rng, (H,), dyn_hidden))
        self._add("dec_W1", _uniform(rng, (dec_hidden, H), H))
        self._add("dec_b1", _uniform(rng, (dec_hidden,), H))
        self._add("dec_W2", _uniform(rng, (3, dec_hidden), dec_hidden))
        self._add("dec_b2", _uniform(rng, (3,), dec_hidden))
        self.last_stats: dict = {}

    def config(self) -> dict:
        return {"kind": self.kind, "d_emb": self.d_emb, "hidden": self.hidden,
                "dyn_hidden": self.dyn_hidden, "dec_hidden": self.dec_hidden,
                "solver_tol": self.solver_tol, "seed": self.seed}

    def dynamics(self, h: ad.Node, t: ad.Node) -> ad.Node:
        p = self.params
        z = ad.tanh(ad.linear_map(ad.concat([h, t], axis=-1), p["dyn_W1"], p["dyn_b1"]))
        return ad.linear_map(z, p["dyn_W2"], p["dyn_b2"])

    def embed(self, s, t) -> ad.Node:
        pair = np.stack([np.asarray(s, dtype=np.float64), np.asarray(t, dtype=np.float64)], axis=-1)
        return ad.linear_map(pair, self.params["embed_W"], self.params["embed_b"])

    def encode(self, signals: np.ndarray, times: np.ndarray) -> ad.Node:
        """Final hidden state for normalized rows ``signals``/``times`` of shape (B, N)."""
        S = np.atleast_2d(np.asarray(signals, dtype=np.float64))
        T = np.atleast_2d(np.asarray(times, dtype=np.float64))
        if T.shape[0] == 1 and S.shape[0] > 1:
            T = np.broadcast_to(T, S.shape)
        if S.shape != T.shape or S.shape[1] < 2:
            raise ValueError("signals and times must be (B, N) with N >= 2")
        if np.any(np.diff(T, axis=1) < 0) or np.any(T[:, 0] < 0):
            raise ValueError("inversion times must be non-negative and non-decreasing")
        B, N = S.shape
        h = ad.constant(np.zeros((B, self.hidden)))
        c = ad.constant(np.zeros((B, self.hidden)))
        t_prev = np.zeros(B)
        stats: dict = {}
        tol = self.solver_tol
        for i in range(N):
            x = self.embed(S[:, i], T[:, i])
            h_cand, c = lstm_cell(x, h, c, self.params["lstm_W"], self.params["lstm_b"])
            h = dopri5_integrate(self.dynamics, h_cand, t_prev, T[:, i], tol, tol, stats=stats)
            t_prev = T[:, i]
        self.last_stats = stats
        return h

    def decode_raw(self, h: ad.Node) -> ad.Node:
        if not np.all(np.isfinite(h.value)):
            raise ValueError("non-finite hidden state")
        p = self.params
        z = ad.tanh(ad.linear_map(h, p["dec_W1"], p["dec_b1"]))
        return ad.linear_map(z, p["dec_W2"], p["dec_b2"])

    def decode(self, h: ad.Node) -> ad.Node:
        return softplus_params(self.decode_raw(h))

    def forward(self, signals, times) -> ad.Node:
        """Normalized ``(c, k, t1_star)`` per row, shape (B, 3)."""
        return self.decode(self.encode(signals, times))


# --------------------------------------------------------------------------- #
# FCNN baselines
# --------------------------------------------------------------------------- #


class FcnnModel(Model):
    """Fully connected net over the flattened ``(S1, t1, ..., SN, tN)`` vector."""

    kind = FCNN

    def __init__(self, n_inputs: int, head: str = HEAD_PHYSICS,
                 hidden: tuple[int, ...] = (64, 64, 64), seed: int = 0):
        super().__init__()
        if head not in (HEAD_DIRECT, HEAD_PHYSICS):
            raise ValueError(f"unknown head {head!r}")
        self.n_inputs, self.head, self.hidden, self.seed = n_inputs, head, tuple(hidden), seed
        rng = np.random.default_rng(seed)
        sizes = [2 * n_inputs, *hidden, 1 if head == HEAD_DIRECT else 3]
        for li, (a, b) in enumerate(zip(sizes, sizes[1:])):
            self._add(f"W{li}", _uniform(rng, (b, a), a))
            self._add(f"b{li}", _uniform(rng, (b,), a))
        self.n_layers = len(sizes) - 1

    def config(self) -> dict:
        return {"kind": self.kind, "n_inputs": self.n_inputs, "head": self.head,
                "hidden": list(self.hidden), "seed": self.seed}

    def forward_raw(self, signals, times) -> ad.Node:
        S = np.atleast_2d(np.asarray(signals, dtype=np.float64))
        T = np.atleast_2d(np.asarray(times, dtype=np.float64))
        if T.shape[0] == 1 and S.shape[0] > 1:
            T = np.broadcast_to(T, S.shape)
        if S.shape[1] != self.n_inputs or T.shape != S.shape:
            raise ValueError(f"model expects {self.n_inputs} samples, got {S.shape[1]}")
        z = ad.constant(np.stack([S, T], axis=-1).reshape(S.shape[0], -1))
        for li in range(self.n_layers):
            z = ad.linear_map(z, self.params[f"W{li}"], self.params[f"b{li}"])
            if li < self.n_layers - 1:
                z = ad.tanh(z)
        return z

    def forward(self, signals, times) -> ad.Node:
        """(B, 1) normalized T1 for the direct head, (B, 3) parameters otherwise."""
        raw = self.forward_raw(signals, times)
        if self.head == HEAD_DIRECT:
            return ad.softplus(raw)
        return softplus_params(raw)


def build_model(cfg: dict) -> Model:
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == LSTM_ODE:
        return LstmOdeModel(**cfg)
    if kind == FCNN:
        cfg["hidden"] = tuple(cfg.get("hidden", (64, 64, 64)))
        return FcnnModel(**cfg)
    raise ValueError(f"unknown model kind {kind!r}")


def is_physics(model: Model) -> bool:
    return not (isinstance(model, FcnnModel) and model.head == HEAD_DIRECT)


def arity(model: Model) -> int | None:
    return model.n_inputs if isinstance(model, FcnnModel) else None


@dataclass
class ModelCheckpoint:
    model: Model
    s_ref: float
    t_ref: float
    seed: int = 0
    training: dict = field(default_factory=dict)


def save_checkpoint(ckpt: ModelCheckpoint, out_dir):
    from .volume_io import write_arrays

    meta = {
        "architecture": ckpt.model.config(),
        "s_ref": ckpt.s_ref,
        "t_ref": ckpt.t_ref,
        "seed": ckpt.seed,
        "training": ckpt.training,
    }
    return write_arrays(out_dir, "checkpoint", meta, ckpt.model.state_dict())


def load_checkpoint(in_dir) -> ModelCheckpoint:
    from .volume_io import FormatError, read_arrays

    manifest, arrays = read_arrays(in_dir)
    if manifest["kind"] != "checkpoint":
        raise FormatError(f"{in_dir} holds a {manifest['kind']!r}, not a checkpoint")
    model = build_model(manifest["architecture"])
    model.load_state_dict(arrays)
    return ModelCheckpoint(model, float(manifest["s_ref"]), float(manifest["t_ref"]),
                           int(manifest.get("seed", 0)), manifest.get("training", {}))
