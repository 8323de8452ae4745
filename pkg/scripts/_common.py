import argparse
import sys
from pathlib import Path

from sgnn.cli import export_plotdata, run_config
from sgnn.config import load_config

ROOT = Path(__file__).resolve().parent.parent


def run(default_config: str, summarize):
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(ROOT / "configs" / default_config))
    p.add_argument("--out", default=None)
    args = p.parse_args()
    cfg = load_config(args.config)
    out = run_config(cfg, args.out)
    export_plotdata(out)
    summarize(out)
    return 0


def read_rows(path):
    import csv
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def say(msg):
    print(msg, file=sys.stderr)
