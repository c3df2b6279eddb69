"""Desk-scale training analogue: train LSTM-ODE and FCNN baselines, evaluate by Monte Carlo."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .evaluation import ClassicalEstimator, EvalReport, ModelEstimator, evaluate
from .models import HEAD_DIRECT, HEAD_PHYSICS, FcnnModel, LstmOdeModel, ModelCheckpoint
from .relaxometry import PhantomSpec, PhantomVolume, synthesize_phantom
from .training import TrainConfig, fit_labels, train

LSTM = "LSTM-ODE"
P_FCNN = "P-FCNN"
D_FCNN = "D-FCNN"


@dataclass
class DeskConfig:
    phantom: PhantomSpec = field(default_factory=lambda: PhantomSpec(dims=(24, 24, 1),
                                                                     noise_sigma=0.02))
    train_seed: int = 1  # phantom the models are trained on
    eval_seed: int = 2  # held-out phantom drawn from the same spec
    training: TrainConfig = field(default_factory=TrainConfig)
    model_seed: int = 0
    fcnn_sizes: tuple[int, ...] = (3, 4, 5)
    n_runs: int = 100
    mc_seed: int = 7
    subset_sizes: tuple[int, ...] = (3, 4, 5)
    include_lm: bool = True


@dataclass
class DeskResult:
    train_volume: PhantomVolume
    eval_volume: PhantomVolume
    checkpoints: dict  # name -> ModelCheckpoint or {arity: ModelCheckpoint}
    traces: dict
    train_seconds: dict
    report: EvalReport | None = None


class _ArityDispatch:
    """Routes each subset size to the FCNN checkpoint of matching arity."""

    def __init__(self, name: str, by_arity: dict):
        self.name, self.by_arity = name, by_arity

    def __call__(self, volume, subset):
        n = len(volume.schedule) if subset is None else len(subset)
        if n not in self.by_arity:
            raise ValueError(f"{self.name}: no model of arity {n}")
        return ModelEstimator(self.by_arity[n])(volume, subset)


def train_models(cfg: DeskConfig, progress=None) -> DeskResult:
    train_vol = synthesize_phantom(cfg.phantom, cfg.train_seed)
    eval_vol = synthesize_phantom(cfg.phantom, cfg.eval_seed)
    labels, mask = fit_labels(train_vol)
    tc = replace(cfg.training, seed=cfg.model_seed)
    ckpts, traces, secs = {}, {}, {}

    def run(key, model):
        t0 = time.perf_counter()
        ckpt, trace = train(model, train_vol, labels, mask, tc)
        secs[key] = time.perf_counter() - t0
        traces[key] = trace
        if progress:
            progress(key, secs[key], trace[-1])
        return ckpt

    ckpts[LSTM] = run(LSTM, LstmOdeModel(seed=cfg.model_seed))
    for name, head in ((P_FCNN, HEAD_PHYSICS), (D_FCNN, HEAD_DIRECT)):
        ckpts[name] = {n: run((name, n), FcnnModel(n, head=head, seed=cfg.model_seed))
                       for n in cfg.fcnn_sizes}
    return DeskResult(train_vol, eval_vol, ckpts, traces, secs)


def estimators(result: DeskResult, include_lm: bool = True) -> dict:
    out = {}
    if include_lm:
        out["LM"] = ClassicalEstimator("lm")
    for name, ck in result.checkpoints.items():
        out[name] = ModelEstimator(ck, name) if isinstance(ck, ModelCheckpoint) else _ArityDispatch(name, ck)
    return out


def evaluate_models(cfg: DeskConfig, result: DeskResult) -> EvalReport:
    result.report = evaluate(estimators(result, cfg.include_lm), result.eval_volume,
                             cfg.subset_sizes, cfg.n_runs, cfg.mc_seed)
    result.report.meta.update({"train_phantom_seed": cfg.train_seed,
                               "train_seconds": {str(k): v for k, v in result.train_seconds.items()}})
    return result.report


def total_train_seconds(result: DeskResult) -> float:
    return float(np.sum(list(result.train_seconds.values())))
