"""Structural model selection: SGNN classification error per epoch against AIC."""
import sys

from _common import read_rows, run, say


def summarize(out):
    for r in read_rows(out / "fig5.csv"):
        say(f"epoch={r['epoch']:>3}  sgnn_error={float(r['sgnn_error']):.4f}  aic_error={float(r['aic_error']):.4f}")


if __name__ == "__main__":
    sys.exit(run("fig5_model_selection.toml", summarize))
