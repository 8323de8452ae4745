"""Command line entry point: ``sgnn <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 invalid config or arguments.
Progress goes to stderr; data only to files.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import platform
import sys
import time
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
MANIFEST = "manifest.json"
FIGURES = {
    "bayes_convergence": "fig2.csv",
    "mismatch_sweep": "fig3.csv",
    "attribution": "fig4.csv",
    "model_selection": "fig5.csv",
}


class UsageError(ValueError):
    pass


def log(msg: str):
    print(msg, file=sys.stderr, flush=True)


# ------------------------------------------------------------------ files

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):  # numpy scalar
        return _fmt(v.item())
    return str(v)


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        values = [row[h] for h in header] if isinstance(row, dict) else row
        w.writerow([_fmt(v) for v in values])
    return buf.getvalue().encode()


def write_atomic(path: Path, data: bytes) -> str:
    """Write via a temporary sibling and rename; returns the sha256."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    import numpy
    import scipy
    return {"sgnn": __version__, "python": platform.python_version(),
            "numpy": numpy.__version__, "scipy": scipy.__version__}


# --------------------------------------------------------- experiment runs

def _rows_bayes(knobs):
    from .oracle import run_bayes_convergence
    rows = run_bayes_convergence(knobs, log)
    header = ["seed", "n_train", "mse_to_oracle", "mse_to_theta", "kernel_baseline_mse", "bandwidth"]
    return {"bayes_convergence.csv": csv_bytes(header, rows)}


def _rows_sweep(knobs):
    from dataclasses import asdict
    from .bounds import MismatchRow, mismatch_sweep
    rows = [asdict(r) for r in mismatch_sweep(knobs, log)]
    return {"mismatch_sweep.csv": csv_bytes(list(MismatchRow.__dataclass_fields__), rows)}


ATTR_COLUMNS = ["epoch", "pred_loss", "train_kl", "heldout_kl", "floored_terms", "h_sq",
                "theta_mse", "prior_mean_mse", "m1_abs_err", "m2_abs_err", "m2_rel_err"]


def _rows_attribution(knobs):
    from .attribution import run_attribution_experiment
    rep = run_attribution_experiment(knobs, log)
    m = rep.moments
    names = rep.library.theta_names
    moments = []
    for q, atom in enumerate(m["atom_index"]):
        for j, name in enumerate(names):
            moments.append([int(atom), name, float(m["target_m1"][q, j]), float(m["attr_m1"][q, j]),
                            float(m["target_m2"][q, j]), float(m["attr_m2"][q, j])])
    theta_hat = rep.query_weights @ rep.library.thetas
    queries = [[q, *map(float, rep.query_thetas[q]), *map(float, theta_hat[q])]
               for q in range(len(theta_hat))]
    q_header = ["query", *[f"{n}_true" for n in names], *[f"{n}_attr" for n in names]]
    return {
        "attribution_epochs.csv": csv_bytes(ATTR_COLUMNS, rep.epochs),
        "attribution_moments.csv": csv_bytes(
            ["atom", "param", "target_m1", "attr_m1", "target_m2", "attr_m2"], moments),
        "attribution_queries.csv": csv_bytes(q_header, queries),
    }


def _rows_selection(knobs):
    from .modelselect import run_model_selection_experiment
    rep = run_model_selection_experiment(knobs, log)
    report = [[e + 1, err, None] for e, err in enumerate(rep.sgnn_error)]
    report.append([None, None, rep.aic_error])
    return {
        "model_selection.csv": csv_bytes(["epoch", "sgnn_error", "aic_error"], report),
        "model_selection_trajectories.csv": csv_bytes(
            ["index", "label", "aic_choice", "sgnn_choice"], rep.per_trajectory_rows()),
    }


RUNNERS = {
    "bayes_convergence": _rows_bayes,
    "mismatch_sweep": _rows_sweep,
    "attribution": _rows_attribution,
    "model_selection": _rows_selection,
}


def run_config(cfg, out_dir: Path | None = None) -> Path:
    out = Path(out_dir) if out_dir is not None else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    files, stages = {}, {}
    t0 = time.perf_counter()
    for tag in cfg.experiments:
        log(f"== {tag}")
        ts = time.perf_counter()
        for name, data in RUNNERS[tag](cfg.knobs[tag]).items():
            files[name] = write_atomic(out / name, data)
        stages[tag] = {"seconds": round(time.perf_counter() - ts, 3),
                       "seeds": cfg.seeds()[tag]}
    manifest = {
        "config_digest": cfg.digest(), "config": cfg.resolved(), "experiments": list(cfg.experiments),
        "files": files, "stages": stages, "versions": _versions(),
        "wall_clock_seconds": round(time.perf_counter() - t0, 3),
    }
    write_atomic(out / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    log(f"wrote {len(files)} files and {MANIFEST} to {out}")
    return out


# ------------------------------------------------------------------ export

def read_manifest(run_dir: Path) -> dict:
    path = Path(run_dir) / MANIFEST
    try:
        manifest = json.loads(path.read_text())
    except OSError:
        raise UsageError(f"no manifest at {str(path)!r}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"corrupt manifest {str(path)!r}: {exc}") from None
    if not isinstance(manifest, dict) or not isinstance(manifest.get("files"), dict):
        raise UsageError(f"corrupt manifest {str(path)!r}: no file table")
    for name, digest in manifest["files"].items():
        f = Path(run_dir) / name
        if not f.exists() or sha256_file(f) != digest:
            raise UsageError(f"checksum mismatch for {name!r}; run directory is incomplete")
    return manifest


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _long(rows, keys, metrics):
    out = []
    for r in rows:
        for m in metrics:
            out.append([*(r[k] for k in keys), m, r[m]])
    return out


def export_plotdata(run_dir) -> dict:
    """Tidy per-figure CSVs from a finished run; returns ``{name: sha256}``."""
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    made = {}
    for tag in manifest.get("experiments", []):
        if tag == "bayes_convergence":
            rows = _read_csv(run_dir / "bayes_convergence.csv")
            body = csv_bytes(["n_train", "seed", "metric", "value"], _long(
                rows, ["n_train", "seed"], ["mse_to_oracle", "mse_to_theta", "kernel_baseline_mse"]))
        elif tag == "mismatch_sweep":
            rows = _read_csv(run_dir / "mismatch_sweep.csv")
            body = csv_bytes(["delta", "seed", "metric", "value"], _long(
                rows, ["delta", "seed"], ["real_excess", "bound_empirical", "bound_worst",
                                          "real_loss", "real_loss_se", "syn_loss"]))
        elif tag == "attribution":
            rows = _read_csv(run_dir / "attribution_epochs.csv")
            body = csv_bytes(["epoch", "metric", "value"], _long(
                rows, ["epoch"], ["train_kl", "heldout_kl", "theta_mse", "prior_mean_mse",
                                  "m1_abs_err", "m2_rel_err"]))
        elif tag == "model_selection":
            rows = _read_csv(run_dir / "model_selection.csv")
            aic = next(r["aic_error"] for r in rows if r["aic_error"])
            body = csv_bytes(["epoch", "sgnn_error", "aic_error"],
                             [[r["epoch"], r["sgnn_error"], aic] for r in rows if r["epoch"]])
        else:
            raise UsageError(f"manifest lists unknown experiment {tag!r}")
        made[FIGURES[tag]] = write_atomic(run_dir / FIGURES[tag], body)
    manifest["files"].update(made)
    manifest["exports"] = sorted(made)
    write_atomic(run_dir / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return made


# ------------------------------------------------------------ subcommands

TASKS = ("lds_params", "sir_forecast", "model_class")


def _task(name, args):
    from .datagen import lds_params_task, model_class_task, sir_forecast_task
    if name == "lds_params":
        return lds_params_task(args.noise if args.noise is not None else 0.1)
    if name == "sir_forecast":
        return sir_forecast_task(noise=args.noise if args.noise is not None else 0.01)
    return model_class_task(noise=args.noise if args.noise is not None else 0.01)


def cmd_gen(args):
    from .datagen import export_csv, generate_dataset, save_dataset
    ds = generate_dataset(_task(args.task, args), args.n, args.seed)
    path = save_dataset(ds, args.out)
    log(f"wrote {len(ds)} examples to {path}")
    if args.csv:
        log(f"wrote {export_csv(ds, args.csv)}")


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_train(args):
    from .datagen import load_dataset
    from .nnet import LossSpec, NetworkSpec, TrainConfig, init_network, save_network, train
    ds = load_dataset(args.data)
    head = args.head or ("softmax" if args.loss == "cross_entropy" else "linear")
    spec = NetworkSpec((ds.inputs.shape[1], *args.hidden, ds.targets.shape[1]), args.activation, head)
    net = init_network(spec, args.seed)
    if args.scaling == "global":
        net.set_global_scaling(ds.inputs)
    elif args.scaling == "feature":
        net.set_standardization(ds.inputs)
    tcfg = TrainConfig(optimizer=args.optimizer, lr=args.lr, epochs=args.epochs,
                       batch_size=args.batch_size, seed=args.seed, final_lr=args.final_lr)

    def progress(net, epoch):
        log(f"train epoch={epoch + 1}/{tcfg.epochs}")
        return {}

    net, history = train(net, ds, tcfg, LossSpec(args.loss), on_epoch_end=progress)
    save_network(net, args.out)
    if args.history:
        write_atomic(Path(args.history), csv_bytes(
            ["epoch", "loss"], [[r.epoch + 1, r.loss] for r in history]))
    log(f"final loss {history[-1].loss!r}; wrote {args.out}")


def cmd_eval(args):
    from .bounds import estimate_risk
    from .datagen import load_dataset
    from .nnet import LossSpec, load_network
    net = load_network(args.net)
    ds = load_dataset(args.data)
    risk = estimate_risk(net, ds, LossSpec(args.loss))
    body = csv_bytes(["loss", "mean", "stderr", "n"], [[args.loss, risk.mean, risk.stderr, risk.n]])
    if args.out:
        write_atomic(Path(args.out), body)
        log(f"wrote {args.out}")
    else:
        sys.stdout.write(body.decode())


def _run_from_config(args, force=None):
    from .config import load_config
    cfg = load_config(args.config, force_experiment=force)
    run_config(cfg, args.out)


def cmd_run(args):
    _run_from_config(args)


def cmd_export(args):
    made = export_plotdata(args.run_dir)
    log("exported " + (", ".join(sorted(made)) if made else "nothing"))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgnn", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--csv", default=None, help="also write a CSV copy here")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a network on a saved dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--hidden", type=_ints, default=(128, 128))
    t.add_argument("--activation", default="gelu")
    t.add_argument("--head", default=None)
    t.add_argument("--loss", default="mse")
    t.add_argument("--optimizer", default="adam")
    t.add_argument("--scaling", choices=("feature", "global", "none"), default="feature")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--final-lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--history", default=None, help="per-epoch loss CSV")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Monte Carlo risk of a saved network")
    e.add_argument("--net", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--loss", default="mse")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    for name, tag, help_ in (("run", None, "run every experiment listed in a config"),
                             ("attribute", "attribution", "attribution experiment"),
                             ("sweep", "mismatch_sweep", "mismatch sweep experiment"),
                             ("select", "model_selection", "SGNN vs AIC model selection")):
        c = sub.add_parser(name, help=help_)
        c.add_argument("config")
        c.add_argument("--out", default=None, help="override output_dir")
        c.set_defaults(func=cmd_run if tag is None else
                       (lambda a, _t=tag: _run_from_config(a, _t)))

    x = sub.add_parser("export", help="tidy per-figure CSVs from a run directory")
    x.add_argument("run_dir")
    x.set_defaults(func=cmd_export)
    return p


def _error(kind: str, msg: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": msg, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    if args.threads is not None:
        if args.threads < 1:
            return _error("ConfigError", "--threads must be >= 1", EXIT_INVALID)
        # only effective before numpy loads its BLAS, which the lazy imports below ensure
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    from .config import ConfigError
    try:
        args.func(args)
    except (ConfigError, UsageError) as exc:
        return _error(type(exc).__name__, str(exc), EXIT_INVALID)
    except KeyboardInterrupt:
        return _error("Interrupted", "interrupted", EXIT_RUNTIME)
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as JSON
        return _error(type(exc).__name__, str(exc), EXIT_RUNTIME)
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
