"""Train and evaluate every desk-scale run used by the outcome and ablation checks.

Runs are cached under ``<results>/cache/<config_hash>/`` so an interrupted
invocation resumes where it stopped, and the acceptance suite reads the same
cache. Tables go to ``<results>/ablation_<axis>.{json,txt}``.

    python scripts/run_desk_experiments.py --config configs/desk_cpu.yaml
"""

import argparse
import logging
from pathlib import Path

from vecmap.ablation import run_suite
from vecmap.config import load_config
from vecmap.experiments import RunCache

ROOT = Path(__file__).resolve().parent.parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk_cpu.yaml"))
    ap.add_argument("--results", default=str(ROOT / "results"))
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    base = load_config(args.config)
    results = Path(args.results)
    tables = run_suite(base, RunCache(results / "cache"), [int(s) for s in args.seeds.split(",")],
                       args.jobs, results)
    for axis, table in tables.items():
        print(f"== {axis}\n{table.to_text()}")


if __name__ == "__main__":
    main()
