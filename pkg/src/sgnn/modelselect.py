"""SIR/SEIR least-squares fitting, AIC scoring, and the SGNN-vs-AIC run."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .simcore import (SEIR_PRIOR, SIR_PRIOR, ParamVector, PriorSpec, RngStream,
                      compartmental_batch, default_init, infected_index)

N_PARAMS = {"SIR": 2, "SEIR": 3}
RSS_FLOOR = 1e-300


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    multistart: int = 8
    max_iter: int = 200
    max_halvings: int = 50
    rtol: float = 1e-10
    fd_step: float = 1e-7
    i0: float = 1e-2
    sir_box: PriorSpec = SIR_PRIOR
    seir_box: PriorSpec = SEIR_PRIOR

    def __post_init__(self):
        if self.multistart < 1:
            raise ValueError("multistart must be >= 1")

    def box(self, model_tag: str) -> PriorSpec:
        return {"SIR": self.sir_box, "SEIR": self.seir_box}[model_tag]


@dataclass
class FitResult:
    params: ParamVector
    rss: float
    converged: bool
    iterations: int
    candidate_rss: list = field(default_factory=list)  # best-so-far after each start


@dataclass
class BatchFit:
    params: np.ndarray  # (P, k)
    rss: np.ndarray  # (P,)
    converged: np.ndarray
    iterations: np.ndarray
    candidate_rss: np.ndarray  # (P, S) running best over starts, inf where failed


def _simulate_infected(model_tag, thetas, steps, i0):
    """(B, steps + 1) infected series; rows that leave [0, 1] come back as NaN."""
    states = compartmental_batch(model_tag, thetas, steps, default_init(model_tag, i0), check=False)
    bad = np.any((states < -1e-9) | (states > 1 + 1e-9) | ~np.isfinite(states), axis=(1, 2))
    infected = states[:, :, infected_index(model_tag)]
    infected[bad] = np.nan
    return infected


def latin_hypercube(box: PriorSpec, n: int, rng: RngStream) -> np.ndarray:
    k = box.dim
    strata = np.stack([rng.permutation(n) for _ in range(k)], axis=1)
    u = (strata + rng.uniform((n, k))) / n
    lo, hi = np.asarray(box.lows), np.asarray(box.highs)
    return lo + (hi - lo) * u


def _rss(resid):
    r = np.sum(resid * resid, axis=1)
    return np.where(np.isfinite(r), r, np.inf)


def fit_batch(model_tag: str, observed, cfg: FitConfig = FitConfig(), seed: int = 0,
              problem_ids=None) -> BatchFit:
    """Damped Gauss-Newton on many series at once, multistarted per series.

    Each series gets ``cfg.multistart`` Latin-hypercube starts drawn from
    ``RngStream(seed, problem_id)``; all (series, start) pairs iterate in
    lockstep with their own step lengths and stopping flags.
    """
    Y = np.atleast_2d(np.asarray(observed, dtype=float))
    P, T = Y.shape
    if T < 10:
        raise ValueError("need at least 10 observations per series")
    ids = np.arange(P) if problem_ids is None else np.asarray(problem_ids)
    box = cfg.box(model_tag)
    k, S = box.dim, cfg.multistart
    lo, hi = np.asarray(box.lows), np.asarray(box.highs)
    steps = T - 1

    theta = np.concatenate([latin_hypercube(box, S, RngStream(seed, int(i))) for i in ids])
    obs = np.repeat(Y, S, axis=0)

    def resid(th, rows):
        return _simulate_infected(model_tag, th, steps, cfg.i0) - obs[rows]

    rows_all = np.arange(P * S)
    rss = _rss(resid(theta, rows_all))
    active = np.isfinite(rss)
    converged = np.zeros(P * S, dtype=bool)
    iters = np.zeros(P * S, dtype=int)

    for _ in range(cfg.max_iter):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        iters[rows] += 1
        th = theta[rows]
        r0 = resid(th, rows)
        # forward-difference Jacobian, stepping inward at the upper bound
        h = cfg.fd_step * np.maximum(1.0, np.abs(th))
        h = np.where(th + h > hi, -h, h)
        J = np.empty((rows.size, T, k))
        for j in range(k):
            tp = th.copy()
            tp[:, j] += h[:, j]
            J[:, :, j] = (resid(tp, rows) - r0) / h[:, j][:, None]
        J = np.nan_to_num(J)
        g = np.einsum("btk,bt->bk", J, r0)
        # freeze coordinates pinned at a bound with the gradient pushing outward
        pinned = ((th <= lo) & (g > 0)) | ((th >= hi) & (g < 0))
        Jf = np.where(pinned[:, None, :], 0.0, J)
        A = np.einsum("bti,btj->bij", Jf, Jf)
        reg = 1e-12 * np.maximum(np.trace(A, axis1=1, axis2=2), 1e-300)
        A += reg[:, None, None] * np.eye(k)
        rhs = -np.einsum("btk,bt->bk", Jf, r0)
        p = np.linalg.solve(A, rhs[..., None])[..., 0]
        p[pinned] = 0.0

        old = rss[rows]
        alpha = np.ones(rows.size)
        accepted = np.zeros(rows.size, dtype=bool)
        new_theta = th.copy()
        new_rss = old.copy()
        pending = np.arange(rows.size)
        for _h in range(cfg.max_halvings + 1):
            cand = np.clip(th[pending] + alpha[pending, None] * p[pending], lo, hi)
            cr = _rss(resid(cand, rows[pending]))
            ok = cr < old[pending]
            acc = pending[ok]
            accepted[acc] = True
            new_theta[acc] = cand[ok]
            new_rss[acc] = cr[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
            alpha[pending] *= 0.5
        theta[rows] = new_theta
        rss[rows] = new_rss
        rel = np.abs(old - new_rss) <= cfg.rtol * np.maximum(old, 1e-300)
        done = ~accepted | rel | (new_rss < 1e-28)
        converged[rows[done]] = True
        active[rows[done]] = False

    rss_m = rss.reshape(P, S)
    best = np.argmin(rss_m, axis=1)
    pick = np.arange(P) * S + best
    cand = np.minimum.accumulate(rss_m, axis=1)
    flat = np.ptp(Y, axis=1) > 0
    ok = np.isfinite(rss[pick])
    return BatchFit(theta[pick], rss[pick], converged[pick] & ok & flat, iters[pick], cand)


def fit_least_squares(model_tag: str, observed, multistart: int = 8, seed: int = 0,
                      cfg: Optional[FitConfig] = None) -> FitResult:
    """Fit one infected series; raises :class:`FitError` if every start fails."""
    cfg = cfg or FitConfig(multistart=multistart)
    if cfg.multistart != multistart:
        cfg = FitConfig(**{**cfg.__dict__, "multistart": multistart})
    y = np.asarray(observed, dtype=float).reshape(-1)
    fit = fit_batch(model_tag, y[None, :], cfg, seed)
    if not np.isfinite(fit.rss[0]):
        raise FitError(f"every {model_tag} start failed")
    box = cfg.box(model_tag)
    return FitResult(ParamVector(fit.params[0], box.names, box.bounds), float(fit.rss[0]),
                     bool(fit.converged[0]), int(fit.iterations[0]), fit.candidate_rss[0].tolist())


def aic_score(rss: float, n: int, k: int) -> float:
    """``n log(RSS / n) + 2k``; RSS at or below 1e-300 is floored with a warning."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not rss > RSS_FLOOR:
        warnings.warn(f"RSS {rss!r} floored at {RSS_FLOOR}", RuntimeWarning, stacklevel=2)
        rss = RSS_FLOOR
    return n * math.log(rss / n) + 2 * k


def _aic_array(rss, n, k):
    return n * np.log(np.maximum(rss, RSS_FLOOR) / n) + 2 * k


def aic_select_batch(observed, cfg: FitConfig = FitConfig(), seed: int = 0, problem_ids=None):
    """Per-series choice: 'SIR', 'SEIR', or None when both fits fail."""
    Y = np.atleast_2d(np.asarray(observed, dtype=float))
    n = Y.shape[1]
    fits = {tag: fit_batch(tag, Y, cfg, seed, problem_ids) for tag in ("SIR", "SEIR")}
    aic = {}
    for tag, fit in fits.items():
        usable = np.isfinite(fit.rss) & (np.ptp(Y, axis=1) > 0)
        aic[tag] = np.where(usable, _aic_array(fit.rss, n, N_PARAMS[tag]), np.inf)
    choice = np.where(aic["SEIR"] < aic["SIR"] - 1e-9, "SEIR", "SIR").astype(object)
    choice[~np.isfinite(aic["SIR"]) & ~np.isfinite(aic["SEIR"])] = None
    return choice, aic, fits


def aic_select(observed, cfg: FitConfig = FitConfig(), seed: int = 0):
    choice, _, _ = aic_select_batch(np.asarray(observed, float)[None, :], cfg, seed)
    return choice[0]


# ------------------------------------------------------- SGNN vs AIC run

@dataclass(frozen=True)
class ModelSelectionConfig:
    n_total: int = 8_000
    train_fraction: float = 0.75
    steps: int = 99
    noise: float = 0.01
    hidden: tuple = (256, 256)
    activation: str = "gelu"
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    final_lr: float = 1e-5
    seed: int = 0
    fit: FitConfig = FitConfig()

    def __post_init__(self):
        if self.n_total < 100 or self.n_total % 2:
            raise ValueError("n_total must be an even count >= 100 (balanced classes)")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")


@dataclass
class SelectionReport:
    labels: np.ndarray  # true class per test trajectory, 0 = SIR, 1 = SEIR
    aic_choice: np.ndarray  # 'SIR' / 'SEIR' / None
    sgnn_choice: np.ndarray  # final-epoch class per test trajectory
    aic_error: float
    sgnn_error: list  # one entry per epoch
    test_index: np.ndarray = None

    def __post_init__(self):
        rates = [self.aic_error, *self.sgnn_error]
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError("error rates must lie in [0, 1]")

    def per_trajectory_rows(self) -> list[dict]:
        names = ("SIR", "SEIR")
        return [{"index": int(i), "label": names[int(y)], "aic_choice": a if a is not None else "",
                 "sgnn_choice": names[int(s)]}
                for i, y, a, s in zip(self.test_index, self.labels, self.aic_choice, self.sgnn_choice)]


def aic_error_rate(choice, labels) -> float:
    """Abstentions (None) count as errors."""
    names = np.array(["SIR", "SEIR"], dtype=object)[np.asarray(labels)]
    return float(np.mean(np.asarray(choice, dtype=object) != names))


def run_model_selection_experiment(cfg: ModelSelectionConfig = ModelSelectionConfig(),
                                   log=None) -> SelectionReport:
    """Train an SIR/SEIR classifier on simulated epidemics and score AIC on the same test set."""
    from .datagen import generate_dataset, model_class_task, split_indices
    from .nnet import LossSpec, NetworkSpec, TrainConfig, init_network, predict, train

    task = model_class_task(cfg.steps, cfg.noise, cfg.fit.seir_box)
    base = 1000 * cfg.seed
    full = generate_dataset(task, cfg.n_total, base + 1)
    train_index, test_index = split_indices(len(full), cfg.train_fraction, base + 2)
    train_ds, test_ds = full.subset(train_index), full.subset(test_index)
    labels = test_ds.labels

    if log:
        log(f"select: fitting SIR and SEIR to {len(test_ds)} test series")
    aic_choice, _, _ = aic_select_batch(test_ds.inputs, cfg.fit, base + 3, test_index)
    aic_err = aic_error_rate(aic_choice, labels)
    if log:
        log(f"select: aic_error={aic_err:.4f}")

    spec = NetworkSpec((train_ds.inputs.shape[1], *cfg.hidden, 2), cfg.activation, "softmax")
    net = init_network(spec, base + 4)
    net.set_global_scaling(train_ds.inputs)

    def evaluate(net, epoch):
        err = float(np.mean(np.argmax(predict(net, test_ds.inputs), axis=1) != labels))
        if log:
            log(f"select epoch={epoch + 1} sgnn_error={err:.4f}")
        return {"sgnn_error": err}

    tcfg = TrainConfig(lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=base + 5,
                       final_lr=cfg.final_lr)
    net, history = train(net, train_ds, tcfg, LossSpec("cross_entropy"), on_epoch_end=evaluate)
    sgnn_choice = np.argmax(predict(net, test_ds.inputs), axis=1)
    return SelectionReport(labels, aic_choice, sgnn_choice, aic_err,
                           [rec.extra["sgnn_error"] for rec in history], test_index)
