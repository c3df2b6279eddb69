"""Train LSTM-ODE and FCNN baselines on the desk phantom, then write the Monte Carlo report.

Usage: python scripts/desk_table1.py --out runs/desk [--n-runs 100] [--no-lm]
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from t1node.evaluation import render_table, write_report_csv
from t1node.experiments import DeskConfig, evaluate_models, total_train_seconds, train_models
from t1node.models import ModelCheckpoint, save_checkpoint
from t1node.training import write_trace

log = logging.getLogger("desk")


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--n-runs", type=int, default=100)
    p.add_argument("--no-lm", action="store_true", help="skip the classical LM rows")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(DeskConfig(), n_runs=args.n_runs, include_lm=not args.no_lm)

    def progress(key, secs, last):
        log.info("trained %s in %.1f s, final loss %.3g", key, secs, last["l_total"])

    result = train_models(cfg, progress)
    for key, ck in result.checkpoints.items():
        items = {key: ck} if isinstance(ck, ModelCheckpoint) else {f"{key}_LL{n}": c for n, c in ck.items()}
        for name, c in items.items():
            save_checkpoint(c, out / "checkpoints" / name)
    for key, trace in result.traces.items():
        name = key if isinstance(key, str) else f"{key[0]}_LL{key[1]}"
        write_trace(trace, out / f"loss_{name}.csv")

    report = evaluate_models(cfg, result)
    write_report_csv(report, out / "report.csv")
    table = render_table(report)
    (out / "report.txt").write_text(table, encoding="utf-8")
    (out / "meta.json").write_text(json.dumps({**report.meta, "total_train_seconds":
                                               total_train_seconds(result)}, indent=2))
    sys.stdout.write(table)
    return 0


if __name__ == "__main__":
    sys.exit(main())
