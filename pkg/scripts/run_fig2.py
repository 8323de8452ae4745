"""Bayes convergence: SGNN-to-oracle MSE should shrink as N grows."""
import sys
from collections import defaultdict

import numpy as np

from _common import read_rows, run, say


def summarize(out):
    by_n = defaultdict(list)
    for r in read_rows(out / "bayes_convergence.csv"):
        by_n[int(r["n_train"])].append(r)
    for n in sorted(by_n):
        rows = by_n[n]
        med = {k: np.median([float(r[k]) for r in rows])
               for k in ("mse_to_oracle", "mse_to_theta", "kernel_baseline_mse")}
        say(f"N={n:>7d}  " + "  ".join(f"{k}={v:.5f}" for k, v in med.items()))


if __name__ == "__main__":
    sys.exit(run("fig2_bayes_convergence.toml", summarize))
