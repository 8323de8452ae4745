"""Risk estimates, excess-risk and mismatch bounds, and the mismatch sweep."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .datagen import Dataset, perturb_lds_matrix
from .nnet import (LossSpec, Network, NetworkSpec, TrainConfig, init_network,
                   per_example_loss, predict, train)
from .simcore import RngStream, simulate_linear


@dataclass(frozen=True)
class RiskEstimate:
    mean: float
    stderr: float
    n: int


def _predict_fn(predictor: Union[Network, Callable]) -> Callable:
    if isinstance(predictor, Network):
        return lambda X: predict(predictor, X)
    return predictor


def per_example_losses(predictor, ds: Dataset, loss: LossSpec) -> np.ndarray:
    if len(ds) == 0:
        raise ValueError("empty dataset")
    pred = np.asarray(_predict_fn(predictor)(ds.inputs), dtype=float)
    if pred.shape != ds.targets.shape:
        raise ValueError(f"predictions {pred.shape} do not match targets {ds.targets.shape}")
    return per_example_loss(loss, pred, ds.targets)


def risk_from_losses(losses: np.ndarray) -> RiskEstimate:
    n = len(losses)
    se = float(np.std(losses, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return RiskEstimate(float(np.mean(losses)), se, n)


def estimate_risk(predictor, ds: Dataset, loss: LossSpec) -> RiskEstimate:
    """Monte Carlo risk: sample mean and standard error of per-example losses."""
    return risk_from_losses(per_example_losses(predictor, ds, loss))


def tv_worst_case(delta: float, d: int, sigma: float) -> float:
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    return min(1.0, delta * math.sqrt(d) / sigma)


def tv_empirical(a0, a_star, inputs, sigma: float) -> float:
    """Data-dependent TV surrogate ``mean ||(A* - A0) x|| / (2 sigma)``, clipped to 1."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    if len(X) == 0:
        raise ValueError("inputs must be nonempty")
    diff = np.asarray(a_star, float) - np.asarray(a0, float)
    return min(1.0, float(np.mean(np.linalg.norm(X @ diff.T, axis=1))) / (2.0 * sigma))


def rademacher_finite(values, trials: int, rng: RngStream, chunk: int = 10_000) -> float:
    """Monte Carlo empirical Rademacher complexity of a finite function family.

    ``values[i, k]`` is candidate ``k`` evaluated on example ``i``.
    """
    V = np.atleast_2d(np.asarray(values, dtype=float))
    n, k = V.shape
    if n < 1 or k < 1 or trials < 1:
        raise ValueError("need n >= 1, K >= 1 and trials >= 1")
    total = 0.0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        signs = rng.signs((m, n))
        total += float(np.sum(np.max(signs @ V, axis=1))) / n
        done += m
    return total / trials


def excess_risk_bound(rademacher: float, lipschitz_l: float, bound_b: float, n: int,
                      delta: float) -> float:
    """Estimation-error term ``4 L R + 6 B sqrt(log(2/delta) / (2n))``.

    For squared loss on unbounded outputs no global Lipschitz constant
    exists, so ``lipschitz_l`` is whatever the caller can justify.
    """
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if n < 1 or rademacher < 0 or lipschitz_l <= 0 or bound_b <= 0:
        raise ValueError("rademacher >= 0, L > 0, B > 0 and n >= 1 required")
    return 4.0 * lipschitz_l * rademacher + 6.0 * bound_b * math.sqrt(math.log(2.0 / delta) / (2.0 * n))


def mismatch_bound(syn_excess: float, l_max: float, tv: float) -> float:
    if syn_excess < 0 or l_max < 0 or tv < 0:
        raise ValueError("mismatch_bound inputs must be >= 0")
    return syn_excess + 2.0 * l_max * tv


# --------------------------------------------------------------- the sweep

@dataclass(frozen=True)
class SweepConfig:
    deltas: tuple = tuple(round(0.05 * i, 2) for i in range(11))
    seeds: tuple = (0, 1, 2)
    a0: tuple = ((0.9, 0.0), (0.0, 0.8))
    sigma: float = 0.5
    n_train: int = 20_000
    n_test: int = 20_000
    traj_steps: int = 10
    hidden: tuple = (64, 64)
    activation: str = "gelu"
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    lmax_quantile: float = 0.999

    def __post_init__(self):
        if not self.deltas or any(d < 0 for d in self.deltas) or list(self.deltas) != sorted(self.deltas):
            raise ValueError("deltas must be nonempty, nonnegative and sorted")
        a0 = np.asarray(self.a0, dtype=float)
        if a0.ndim != 2 or a0.shape[0] != a0.shape[1]:
            raise ValueError("a0 must be a square matrix")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.n_train < self.traj_steps or self.n_test < self.traj_steps:
            raise ValueError("n_train and n_test must cover at least one trajectory")
        if not 0 < self.lmax_quantile <= 1:
            raise ValueError("lmax_quantile must lie in (0, 1]")

    @property
    def dim(self) -> int:
        return len(self.a0)


@dataclass
class MismatchRow:
    seed: int
    delta: float
    real_loss: float
    real_loss_se: float
    syn_loss: float
    bayes_risk: float
    real_excess: float
    syn_excess: float
    l_max: float
    tv_worst: float
    tv_empirical: float
    bound_worst: float
    bound_empirical: float
    mean_input_norm: float


def next_state_pairs(a, n_pairs: int, traj_steps: int, sigma: float, seed: int) -> Dataset:
    """Consecutive ``(x_t, x_{t+1})`` pairs from trajectories of ``x -> A x + eps``.

    Trajectory ``j`` uses ``RngStream(seed, j)`` for its standard-normal start
    state and its noise, so two matrices sampled with the same seed share
    every random draw.
    """
    a = np.asarray(a, dtype=float)
    d = len(a)
    n_traj = n_pairs // traj_steps
    xs, ys = [], []
    for j in range(n_traj):
        rng = RngStream(seed, j)
        x0 = rng.normal(d)
        states = simulate_linear(a, traj_steps, x0, sigma, rng)
        xs.append(states[:-1])
        ys.append(states[1:])
    X, Y = np.concatenate(xs), np.concatenate(ys)
    manifest = {"seed": int(seed), "n": len(X), "kind": "next_state", "a": a.tolist()}
    return Dataset(X, Y, np.zeros((len(X), 0)), np.zeros(len(X), dtype=np.uint8), (), manifest)


def mismatch_sweep(cfg: SweepConfig, log=None) -> list[MismatchRow]:
    a0 = np.asarray(cfg.a0, dtype=float)
    d = cfg.dim
    bayes = d * cfg.sigma**2
    mse = LossSpec("mse")
    rows = []
    for seed in cfg.seeds:
        base = 1000 * int(seed)
        train_ds = next_state_pairs(a0, cfg.n_train, cfg.traj_steps, cfg.sigma, base + 1)
        net = init_network(NetworkSpec((d, *cfg.hidden, d), cfg.activation), base + 2)
        net.set_standardization(train_ds.inputs)
        net, _ = train(net, train_ds, TrainConfig(lr=cfg.lr, epochs=cfg.epochs,
                                                  batch_size=cfg.batch_size, seed=base + 3), mse)
        syn_test = next_state_pairs(a0, cfg.n_test, cfg.traj_steps, cfg.sigma, base + 4)
        syn_losses = per_example_losses(net, syn_test, mse)
        syn = float(np.mean(syn_losses))
        syn_excess = max(0.0, syn - bayes)
        l_max = float(np.quantile(syn_losses, cfg.lmax_quantile))
        mean_norm = float(np.mean(np.linalg.norm(syn_test.inputs, axis=1)))
        for delta in cfg.deltas:
            a_star = perturb_lds_matrix(a0, delta, base + 5)
            real_test = next_state_pairs(a_star, cfg.n_test, cfg.traj_steps, cfg.sigma, base + 4)
            real = risk_from_losses(per_example_losses(net, real_test, mse))
            tw = tv_worst_case(delta, d, cfg.sigma)
            te = tv_empirical(a0, a_star, syn_test.inputs, cfg.sigma)
            row = MismatchRow(
                seed=int(seed), delta=float(delta), real_loss=real.mean, real_loss_se=real.stderr,
                syn_loss=syn, bayes_risk=bayes, real_excess=real.mean - bayes, syn_excess=syn_excess,
                l_max=l_max, tv_worst=tw, tv_empirical=te,
                bound_worst=mismatch_bound(syn_excess, l_max, tw),
                bound_empirical=mismatch_bound(syn_excess, l_max, te),
                mean_input_norm=mean_norm)
            rows.append(row)
            if log:
                log(f"sweep seed={seed} delta={delta:.2f} real_loss={real.mean:.5f} "
                    f"bound_emp={row.bound_empirical:.4f} bound_worst={row.bound_worst:.4f}")
    return rows


def aggregate_rows(rows: list[MismatchRow]) -> list[dict]:
    """Median over seeds of every numeric column, per delta."""
    out = []
    for delta in sorted({r.delta for r in rows}):
        sel = [r for r in rows if r.delta == delta]
        agg = {"delta": delta, "n_seeds": len(sel)}
        for key in MismatchRow.__dataclass_fields__:
            if key in ("seed", "delta"):
                continue
            agg[key] = float(np.median([getattr(r, key) for r in sel]))
        out.append(agg)
    return out
