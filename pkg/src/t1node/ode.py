"""Adaptive Dormand-Prince RK5(4) integration recorded on the autodiff graph.

Each row of a batched state carries its own time, step size and accept/reject
decisions, so a row integrates identically whether alone or inside a batch.
The step-size controller is itself part of the graph: backpropagating through
the result differentiates the exact sequence of accepted steps, including the
dependence of each step size on the previous error estimate.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
B5 = A[6] + (0.0,)
B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
E = tuple(b5 - b4 for b5, b4 in zip(B5, B4))

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
MAX_STEPS = 100_000


class IntegrationError(RuntimeError):
    pass


def _check_finite(k: ad.Node, rows):
    if not np.all(np.isfinite(k.value[rows])):
        raise IntegrationError("dynamics returned a non-finite value")


def dopri5_integrate(f, h0, t0, t1, rtol: float = 1e-3, atol: float = 1e-3,
                     stats: dict | None = None) -> ad.Node:
    """Integrate ``dh/dt = f(h, t)`` from ``t0`` to ``t1``.

    ``h0`` has shape (H,) or (B, H); ``t0``/``t1`` are scalars or length-B
    arrays. ``f`` receives ``h`` (B, H) and ``t`` (B, 1) as nodes. The scaled
    RMS error ``|err| / (atol + rtol * max(|h|, |h_new|))`` decides acceptance;
    the next step is ``dt * clip(0.9 * norm**-0.2, 0.2, 5)``. The first trial
    step spans the whole interval.
    """
    if not (rtol > 0 and atol > 0):
        raise ValueError("tolerances must be positive")
    h0 = ad.constant(h0)
    squeeze = h0.value.ndim == 1
    h = ad.reshape(h0, (1, -1)) if squeeze else h0
    nb = h.shape[0]
    ta = np.broadcast_to(np.asarray(t0, dtype=np.float64), (nb,)).reshape(nb, 1).copy()
    tb = np.broadcast_to(np.asarray(t1, dtype=np.float64), (nb,)).reshape(nb, 1).copy()
    if np.any(tb < ta):
        raise ValueError("integration end precedes start")
    span = tb - ta
    done = (span[:, 0] == 0.0)
    if done.all():
        return h0
    t_end = ad.constant(tb)
    t = ad.constant(ta)
    dt = ad.constant(span.copy())
    k1 = None
    n_acc = n_rej = 0

    for _ in range(MAX_STEPS):
        active = ~done
        if not active.any():
            break
        act = active[:, None]
        remaining = ad.sub(t_end, t)
        last = act & (dt.value >= remaining.value)
        dt_eff = ad.where(act, ad.where(last, remaining, dt), 0.0)
        if np.any(dt_eff.value[active, 0] < 1e-12 * span[active, 0]):
            raise IntegrationError("step size underflow")

        if k1 is None:
            k1 = f(h, t)
            _check_finite(k1, active)
        ks = [k1]
        for i in range(1, 7):
            incr = ad.lincomb(A[i], ks)
            yi = ad.add(h, ad.mul(dt_eff, incr))
            if i == 6:
                y5 = yi
            ki = f(yi, ad.add(t, ad.mul(dt_eff, C[i])))
            _check_finite(ki, active)
            ks.append(ki)

        err = ad.mul(dt_eff, ad.lincomb(E, ks))
        scale = ad.add(atol, ad.mul(rtol, ad.maximum(ad.absolute(h), ad.absolute(y5))))
        ratio = ad.div(err, scale)
        norm = ad.sqrt(ad.mean(ad.square(ratio), axis=1, keepdims=True))
        accept = act & (norm.value <= 1.0)

        factor = ad.mul(SAFETY, ad.power(ad.maximum(norm, 1e-10), -0.2))
        factor = ad.minimum(ad.maximum(factor, MIN_FACTOR), MAX_FACTOR)

        h = ad.where(accept, y5, h)
        k1 = ad.where(accept, ks[6], k1)
        t = ad.where(accept & last, t_end, ad.where(accept, ad.add(t, dt_eff), t))
        dt = ad.where(act, ad.mul(dt_eff, factor), dt)
        done = done | (accept & last)[:, 0]
        n_acc += int(accept.sum())
        n_rej += int((act & ~accept).sum())
    else:
        raise IntegrationError("too many steps")

    if stats is not None:
        stats["accepted"] = stats.get("accepted", 0) + n_acc
        stats["rejected"] = stats.get("rejected", 0) + n_rej
    return ad.reshape(h, (-1,)) if squeeze else h
