"""KL-aligned attribution: per-epoch KL to the discrete posterior and moment errors."""
import sys

from _common import read_rows, run, say


def summarize(out):
    for r in read_rows(out / "attribution_epochs.csv"):
        say(f"epoch={r['epoch']:>3}  train_kl={float(r['train_kl']):.4f}  "
            f"heldout_kl={float(r['heldout_kl']):.4f}  theta_mse={float(r['theta_mse']):.5f}  "
            f"m2_rel_err={float(r['m2_rel_err']):.4f}")


if __name__ == "__main__":
    sys.exit(run("fig4_attribution.toml", summarize))
