"""Mismatch sweep: real excess risk against the empirical and worst-case bounds."""
import sys

from sgnn.bounds import MismatchRow, aggregate_rows

from _common import read_rows, run, say


def summarize(out):
    fields = MismatchRow.__dataclass_fields__
    rows = [MismatchRow(**{k: (int(v) if k == "seed" else float(v)) for k, v in r.items() if k in fields})
            for r in read_rows(out / "mismatch_sweep.csv")]
    for agg in aggregate_rows(rows):
        say(f"delta={agg['delta']:.2f}  real_excess={agg['real_excess']:.4f}  "
            f"bound_emp={agg['bound_empirical']:.4f}  bound_worst={agg['bound_worst']:.4f}")


if __name__ == "__main__":
    sys.exit(run("fig3_mismatch_sweep.toml", summarize))
