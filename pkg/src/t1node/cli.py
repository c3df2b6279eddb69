"""Command-line entry point: ``t1node <subcommand> ...``.

Every subcommand writes its outputs plus one ``run_manifest.json`` into
``--out`` and exits nonzero with a one-line diagnostic on any error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (ClassicalEstimator, ModelEstimator, evaluate, render_table,
                         write_report_csv)
from .inference import MapResult, classical_map, load_map, map_volume, save_map
from .models import (HEAD_DIRECT, HEAD_PHYSICS, FcnnModel, LstmOdeModel, load_checkpoint,
                     save_checkpoint)
from .relaxometry import PhantomSpec, TissueRange, synthesize_phantom
from .render import loss_trace_svg, relaxation_svg, render_index_map, render_t1_map
from .training import TrainConfig, fit_labels, read_trace, sample_subset, train, write_trace
from .volume_io import load_volume, read_arrays, save_volume, write_arrays

RUN_MANIFEST = "run_manifest.json"
MODEL_CHOICES = ("lstm_ode", "fcnn_physics", "fcnn_direct")


class CliError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_path: str | None
    inputs: list[str]
    outputs: list[str]
    seed: int
    threads: int
    version: str = __version__
    wall_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        path = Path(out_dir) / RUN_MANIFEST
        path.write_text(json.dumps(asdict(self), indent=2), encoding="utf-8")
        return path


def read_run_manifest(out_dir) -> RunManifest:
    return RunManifest(**json.loads((Path(out_dir) / RUN_MANIFEST).read_text(encoding="utf-8")))


# --------------------------------------------------------------------------- #
# helpers
# --------------------------------------------------------------------------- #


def _load_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CliError(f"config {p} is not valid JSON: {exc}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{what} not found: {p}")
    return p


def phantom_spec_from(cfg: dict) -> PhantomSpec:
    known = {f.name for f in fields(PhantomSpec)}
    unknown = set(cfg) - known
    if unknown:
        raise CliError(f"unknown phantom config keys: {sorted(unknown)}")
    cfg = dict(cfg)
    for key in ("dims", "roi_tissues", "ti_offsets_ms"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    if cfg.get("tissues") is not None:
        cfg["tissues"] = {name: TissueRange(**{k: tuple(v) for k, v in r.items()})
                          for name, r in cfg["tissues"].items()}
    return PhantomSpec(**cfg)


def resolve_subset(n_times: int, subset_size: int | None, indices: list[int] | None,
                   seed: int) -> np.ndarray | None:
    if indices is not None:
        return np.asarray(indices, dtype=np.int64)
    if subset_size is None or subset_size == n_times:
        return None
    if subset_size > n_times or subset_size < 3:
        raise CliError(f"subset size {subset_size} incompatible with a {n_times}-point schedule")
    return sample_subset(n_times, subset_size, np.random.default_rng(seed))


def _write_map_outputs(out: Path, result: MapResult, regime: str, meta: dict) -> list[str]:
    save_map(result, out, meta=meta)
    render_t1_map(out / "t1_map.ppm", result.t1_map, result.dims, regime, result.valid_mask)
    render_index_map(out / "null_index_map.pgm", result.null_index_map, result.dims,
                     result.n_trials - 1)
    return [str(out / "manifest.json"), str(out / "t1_map.ppm"), str(out / "null_index_map.pgm")]


def build_estimator_model(kind: str, arity: int | None, n_times: int, seed: int):
    if kind == "lstm_ode":
        return LstmOdeModel(seed=seed)
    head = HEAD_PHYSICS if kind == "fcnn_physics" else HEAD_DIRECT
    return FcnnModel(arity or n_times, head=head, seed=seed)


# --------------------------------------------------------------------------- #
# subcommands; each returns (inputs, outputs, extra)
# --------------------------------------------------------------------------- #


def cmd_simulate(args, out: Path):
    cfg = _load_json(args.config)
    for key in ("dims", "noise_sigma", "regime", "layout", "scheme"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    spec = phantom_spec_from(cfg)
    vol = synthesize_phantom(spec, args.seed)
    save_volume(vol, out)
    return [], [str(out / "manifest.json")], {"n_roi": int(vol.roi_mask.sum())}


def cmd_labels(args, out: Path):
    vol = load_volume(_require_dir(args.volume, "volume"))
    labels, mask = fit_labels(vol)
    write_arrays(out, "labels", {"n_voxels": vol.n_voxels},
                 {"c": labels[:, 0], "k": labels[:, 1], "t1_star": labels[:, 2]}, {"mask": mask})
    return [args.volume], [str(out / "manifest.json")], {"n_labelled": int(mask.sum())}


def _read_labels(path, n_voxels: int):
    manifest, a = read_arrays(_require_dir(path, "labels"))
    if manifest["kind"] != "labels":
        raise CliError(f"{path} holds {manifest['kind']!r}, not labels")
    labels = np.stack([a["c"], a["k"], a["t1_star"]], axis=1)
    if labels.shape[0] != n_voxels:
        raise CliError("labels do not match the volume's voxel count")
    return labels, a["mask"]


def cmd_fit(args, out: Path):
    vol = load_volume(_require_dir(args.volume, "volume"))
    subset = resolve_subset(len(vol.schedule), args.subset_size, args.indices, args.seed)
    try:
        res = classical_map(vol, subset, args.method)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    meta = {"method": args.method, "subset": None if subset is None else subset.tolist()}
    return [args.volume], _write_map_outputs(out, res, vol.regime, meta), meta


def cmd_train(args, out: Path):
    vol = load_volume(_require_dir(args.volume, "volume"))
    cfg = TrainConfig.from_dict({**_load_json(args.config), "seed": args.seed})
    if args.epochs_pretrain is not None:
        cfg = replace(cfg, epochs_pretrain=args.epochs_pretrain)
    if args.epochs_finetune is not None:
        cfg = replace(cfg, epochs_finetune=args.epochs_finetune)
    if args.labels:
        labels, mask = _read_labels(args.labels, vol.n_voxels)
    else:
        labels, mask = fit_labels(vol)
    model = build_estimator_model(args.model, args.arity, len(vol.schedule), args.seed)
    ckpt, trace = train(model, vol, labels, mask, cfg)
    ckpt_dir = out / "checkpoint"
    save_checkpoint(ckpt, ckpt_dir)
    write_trace(trace, out / "loss.csv")
    cfg.save(out / "train_config.json")
    inputs = [args.volume] + ([args.labels] if args.labels else [])
    return inputs, [str(ckpt_dir), str(out / "loss.csv")], {"final_loss": trace[-1]["l_total"]}


def _load_ckpt(path):
    p = Path(path)
    if (p / "checkpoint").is_dir():
        p = p / "checkpoint"
    return load_checkpoint(_require_dir(p, "checkpoint"))


def cmd_map(args, out: Path):
    ckpt = _load_ckpt(args.checkpoint)
    vol = load_volume(_require_dir(args.volume, "volume"))
    subset = resolve_subset(len(vol.schedule), args.subset_size, args.indices, args.seed)
    try:
        res = map_volume(ckpt, vol, subset)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    meta = {"model": ckpt.model.config(), "subset": None if subset is None else subset.tolist()}
    return [args.checkpoint, args.volume], _write_map_outputs(out, res, vol.regime, meta), meta


def _parse_method(text: str):
    name, _, target = text.partition("=")
    if name in ("lm", "trf") and not target:
        return name.upper(), ClassicalEstimator(name)
    if not target:
        target, name = name, Path(name).name
    return name, ModelEstimator(_load_ckpt(target), name)


def cmd_evaluate(args, out: Path):
    vol = load_volume(_require_dir(args.volume, "volume"))
    methods = dict(_parse_method(m) for m in args.methods)
    report = evaluate(methods, vol, args.subset_sizes, args.n_runs, args.seed)
    write_report_csv(report, out / "report.csv")
    table = render_table(report)
    (out / "report.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return [args.volume], [str(out / "report.csv"), str(out / "report.txt")], report.meta


def cmd_plot(args, out: Path):
    outputs, inputs = [], []
    if args.trace:
        for path in args.trace:
            svg = out / (Path(path).stem + ".svg")
            svg.write_text(loss_trace_svg(read_trace(path)), encoding="utf-8")
            outputs.append(str(svg))
            inputs.append(path)
    if args.voxels:
        if not args.volume:
            raise CliError("--voxels requires --volume")
        vol = load_volume(_require_dir(args.volume, "volume"))
        inputs.append(args.volume)
        fit = load_map(_require_dir(args.map, "map")) if args.map else None
        if fit is not None:
            inputs.append(args.map)
        times = vol.schedule.times
        for v in args.voxels:
            if not 0 <= v < vol.n_voxels:
                raise CliError(f"voxel {v} outside volume of {vol.n_voxels}")
            mag = vol.magnitude[v]
            params = j = None
            if fit is not None:
                if fit.n_trials != len(times) + 1:
                    raise CliError("map was computed on a subset; plot needs a full-series map")
                j = int(fit.null_index_map[v])
                params = fit.params_map[v] if np.all(np.isfinite(fit.params_map[v])) else None
            sig = mag.copy()
            if j is not None:
                sig[:j] *= -1.0
            svg = out / f"voxel_{v}.svg"
            svg.write_text(relaxation_svg(times, sig, params, j, title=f"voxel {v}"), encoding="utf-8")
            outputs.append(str(svg))
    if not outputs:
        raise CliError("nothing to plot: give --trace and/or --voxels")
    return inputs, outputs, {}


COMMANDS = {
    "simulate": cmd_simulate, "labels": cmd_labels, "fit": cmd_fit, "train": cmd_train,
    "map": cmd_map, "evaluate": cmd_evaluate, "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (flags override its values)")
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker count (computation is serial; recorded in the manifest)")
    common.add_argument("--out", required=True, help="output directory")

    p = argparse.ArgumentParser(prog="t1node", description="MOLLI T1 mapping toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="synthesize a phantom volume")
    s.add_argument("--dims", type=_int_list)
    s.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    s.add_argument("--regime", choices=("native", "post_gd"))
    s.add_argument("--layout")
    s.add_argument("--scheme")

    s = sub.add_parser("labels", parents=[common], help="LM labels on the full signed series")
    s.add_argument("volume")

    def subset_flags(sp):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--subset-size", type=int)
        g.add_argument("--indices", type=_int_list, help="comma-separated acquisition indices")

    s = sub.add_parser("fit", parents=[common], help="classical polarity-restored fit")
    s.add_argument("volume")
    s.add_argument("--method", choices=("lm", "trf"), default="lm")
    subset_flags(s)

    s = sub.add_parser("train", parents=[common], help="pretrain and fine-tune a model")
    s.add_argument("volume")
    s.add_argument("--labels")
    s.add_argument("--model", choices=MODEL_CHOICES, default="lstm_ode")
    s.add_argument("--arity", type=int, help="FCNN input length (default: full schedule)")
    s.add_argument("--epochs-pretrain", type=int)
    s.add_argument("--epochs-finetune", type=int)

    s = sub.add_parser("map", parents=[common], help="polarity-corrected model inference")
    s.add_argument("checkpoint")
    s.add_argument("volume")
    subset_flags(s)

    s = sub.add_parser("evaluate", parents=[common], help="Monte Carlo report")
    s.add_argument("volume")
    s.add_argument("--methods", nargs="+", required=True,
                   help="lm, trf, or [name=]checkpoint_dir")
    s.add_argument("--n-runs", type=int, default=100)
    s.add_argument("--subset-sizes", type=_int_list, default=[3, 4, 5])

    s = sub.add_parser("plot", parents=[common], help="relaxation-curve and loss SVGs")
    s.add_argument("--volume")
    s.add_argument("--map", help="full-series map directory (fit or map output)")
    s.add_argument("--voxels", type=_int_list)
    s.add_argument("--trace", nargs="+", help="loss CSV files")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    t0 = time.perf_counter()
    try:
        if out.exists() and not out.is_dir():
            raise CliError(f"--out {out} exists and is not a directory")
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs, extra = COMMANDS[args.command](args, out)
        for path in outputs:
            if not Path(path).exists():
                raise CliError(f"expected output missing: {path}")
    except Exception as exc:  # one-line diagnostic, nonzero exit
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"t1node {args.command}: error: {msg}", file=sys.stderr)
        return 1
    RunManifest(args.command, argv, args.config, [str(i) for i in inputs], outputs, args.seed,
                args.threads, wall_time_s=time.perf_counter() - t0, extra=extra).write(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
