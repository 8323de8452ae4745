"""Kernel Monte Carlo approximations of the Bayes predictor and of the
posterior over a finite library of simulated atoms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .simcore import RngStream

MAX_PAIRS = 10**6


class DegenerateBandwidthError(ValueError):
    pass


@dataclass
class ReferenceLibrary:
    """Simulated atoms ``(theta_i, x_i)`` plus their noiseless observations."""

    thetas: np.ndarray  # (M, k)
    inputs: np.ndarray  # (M, p)
    noiseless: Optional[np.ndarray] = None  # (M, p)
    embeddings: Optional[np.ndarray] = None
    theta_names: tuple = ()

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        if len(self.thetas) < 1 or len(self.thetas) != len(self.inputs):
            raise ValueError("library needs M >= 1 atoms with one input each")
        if self.noiseless is not None:
            self.noiseless = np.atleast_2d(np.asarray(self.noiseless, dtype=float))
            if self.noiseless.shape != self.inputs.shape:
                raise ValueError("noiseless observations must match input shape")

    def __len__(self) -> int:
        return len(self.thetas)

    @classmethod
    def from_dataset(cls, ds, noiseless=None) -> "ReferenceLibrary":
        return cls(ds.thetas, ds.inputs, noiseless, theta_names=ds.theta_names)


@dataclass
class AttributionDistribution:
    indices: np.ndarray
    weights: np.ndarray
    fallback: bool = False

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=int)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.indices.shape != self.weights.shape:
            raise ValueError("indices and weights differ in length")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("attribution weights must be a probability vector")

    def dense(self, m: int) -> np.ndarray:
        out = np.zeros(m)
        np.add.at(out, self.indices, self.weights)
        return out


class KernelEstimate(NamedTuple):
    theta: np.ndarray
    fallback: bool


def sq_distances(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, (Q, M)."""
    q = np.atleast_2d(queries)
    r = np.atleast_2d(refs)
    d = (q * q).sum(1)[:, None] + (r * r).sum(1)[None, :] - 2.0 * q @ r.T
    return np.maximum(d, 0.0)


def normalize_log_weights(log_w: np.ndarray, sq_dist: np.ndarray):
    """Row-normalize ``exp(log_w)`` stably.

    Rows where every weight underflows (non-finite maxima) fall back to a
    point mass on the nearest atom; the second return value flags them.
    """
    log_w = np.atleast_2d(log_w)
    mx = log_w.max(axis=1, keepdims=True)
    bad = ~np.isfinite(mx[:, 0])
    safe = np.where(np.isfinite(mx), mx, 0.0)
    w = np.exp(log_w - safe)
    w[bad] = 0.0
    s = w.sum(axis=1, keepdims=True)
    bad |= ~(s[:, 0] > 0)
    w = np.divide(w, s, out=np.zeros_like(w), where=s > 0)
    if bad.any():
        nearest = np.argmin(np.atleast_2d(sq_dist)[bad], axis=1)
        w[bad] = 0.0
        w[np.flatnonzero(bad), nearest] = 1.0
    return w, bad


def gaussian_kernel_weights(queries, refs, scale: float):
    """Weights ``exp(-||q - r||^2 / scale)`` normalized per query row."""
    d2 = sq_distances(queries, refs)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        log_w = -d2 / scale
    return normalize_log_weights(log_w, d2)


def median_sq_bandwidth(inputs, max_pairs: int = MAX_PAIRS, seed: int = 0,
                        squared: bool = True) -> float:
    """Median pairwise squared distance, ignoring zero-distance pairs.

    With ``squared=False`` the median of plain distances is returned instead
    (the other reading of the median heuristic). Pairs are enumerated exactly
    up to ``max_pairs``; beyond that a uniform sample of ordered index pairs
    (i != j) is used.
    """
    X = np.asarray(inputs, dtype=float)
    n = len(X)
    if n < 2:
        raise ValueError("need at least two vectors")
    n_pairs = n * (n - 1) // 2
    if n_pairs <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        rng = RngStream(seed, 0x4D454449)
        i = rng.integers(0, n, max_pairs)
        j = rng.integers(0, n - 1, max_pairs)
        j = j + (j >= i)  # uniform over j != i
    d2 = np.empty(len(i))
    for s in range(0, len(i), 200_000):
        diff = X[i[s:s + 200_000]] - X[j[s:s + 200_000]]
        d2[s:s + 200_000] = np.einsum("ij,ij->i", diff, diff)
    d2 = d2[d2 > 0]
    if d2.size == 0:
        raise DegenerateBandwidthError("all inputs identical; bandwidth undefined")
    return float(np.median(d2) if squared else np.median(np.sqrt(d2)))


def kernel_bayes_estimates(queries, lib: ReferenceLibrary, sigma_sq: float, chunk: int = 512):
    """Nadaraya-Watson posterior-mean estimates for a batch of queries."""
    if not sigma_sq > 0:
        raise ValueError("sigma_sq must be > 0")
    Q = np.atleast_2d(np.asarray(queries, dtype=float))
    est = np.empty((len(Q), lib.thetas.shape[1]))
    flags = np.zeros(len(Q), dtype=bool)
    for s in range(0, len(Q), chunk):
        w, bad = gaussian_kernel_weights(Q[s:s + chunk], lib.inputs, 2.0 * sigma_sq)
        est[s:s + chunk] = w @ lib.thetas
        flags[s:s + chunk] = bad
    return est, flags


LOOCV_GRID = tuple(10.0 ** (k / 4) for k in range(-16, 13))  # 1e-4 .. 1e3


def loocv_bandwidth(lib: ReferenceLibrary, grid=LOOCV_GRID, n_holdout: int = 2000,
                    seed: int = 0, chunk: int = 256) -> float:
    """sigma^2 minimizing leave-one-out theta error of the kernel estimate on the library.

    Up to ``n_holdout`` atoms act as queries against the rest of the library
    (their own atom excluded). Ties go to the larger bandwidth.
    """
    grid = np.asarray(sorted(grid), dtype=float)
    if grid.size == 0 or not np.all(grid > 0):
        raise ValueError("grid must hold positive bandwidths")
    m = len(lib)
    if m < 2:
        raise ValueError("need at least two atoms")
    idx = np.arange(m) if m <= n_holdout else np.sort(
        RngStream(seed, 0x4C4F4F).permutation(m)[:n_holdout])
    err = np.zeros(len(grid))
    for s in range(0, len(idx), chunk):
        rows = idx[s:s + chunk]
        d2 = sq_distances(lib.inputs[rows], lib.inputs)
        d2[np.arange(len(rows)), rows] = np.inf
        for g, s2 in enumerate(grid):
            w, _ = normalize_log_weights(-d2 / (2.0 * s2), d2)
            err[g] += np.sum((w @ lib.thetas - lib.thetas[rows]) ** 2)
    best = np.flatnonzero(err <= err.min() * (1 + 1e-12))
    return float(grid[best[-1]])


def kernel_bayes_estimate(query, lib: ReferenceLibrary, sigma_sq: float) -> KernelEstimate:
    est, flags = kernel_bayes_estimates(np.asarray(query, float)[None, :], lib, sigma_sq)
    return KernelEstimate(est[0], bool(flags[0]))


def discrete_posterior_weights(queries, lib: ReferenceLibrary, obs_sigma: float, atoms=None):
    """(Q, M) likelihood weights of each atom's noiseless observation.

    Uniform prior over atoms, Gaussian observation noise ``obs_sigma``.
    ``atoms`` restricts the support to a subset of library indices.
    """
    if lib.noiseless is None:
        raise ValueError("library atoms carry no noiseless observations")
    if not obs_sigma > 0:
        raise ValueError("obs_sigma must be > 0")
    ref = lib.noiseless if atoms is None else lib.noiseless[atoms]
    return gaussian_kernel_weights(queries, ref, 2.0 * obs_sigma**2)


def discrete_posterior(query, lib: ReferenceLibrary, obs_sigma: float) -> AttributionDistribution:
    w, bad = discrete_posterior_weights(np.asarray(query, float)[None, :], lib, obs_sigma)
    return AttributionDistribution(np.arange(len(lib)), w[0], bool(bad[0]))


# ------------------------------------------------------- Bayes-convergence run

@dataclass(frozen=True)
class BayesConvergenceConfig:
    """LDS parameter-recovery run comparing an SGNN with the kernel oracle."""

    train_sizes: tuple = (1_000, 10_000, 100_000)
    seeds: tuple = (0, 1, 2)
    library_size: int = 10_000
    test_size: int = 2_000
    process_sigma: float = 0.1
    steps: int = 10
    bandwidth: str = "loocv"  # or "median_sq", "median", or a positive number as text
    hidden: tuple = (128, 128)
    activation: str = "gelu"
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-3

    def __post_init__(self):
        if not self.train_sizes or min(self.train_sizes) < 1:
            raise ValueError("train_sizes must be nonempty positive counts")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.library_size < 2 or self.test_size < 1:
            raise ValueError("library_size >= 2 and test_size >= 1 required")
        if self.bandwidth not in ("loocv", "median_sq", "median"):
            try:
                if not float(self.bandwidth) > 0:
                    raise ValueError
            except ValueError:
                raise ValueError(f"bandwidth must be 'loocv', 'median_sq', 'median' or a positive number, "
                                 f"got {self.bandwidth!r}") from None


def _bandwidth(cfg: BayesConvergenceConfig, lib: ReferenceLibrary, seed) -> float:
    inputs = lib.inputs
    if cfg.bandwidth == "loocv":
        return loocv_bandwidth(lib, seed=seed)
    if cfg.bandwidth == "median_sq":
        return median_sq_bandwidth(inputs, seed=seed)
    if cfg.bandwidth == "median":
        return median_sq_bandwidth(inputs, seed=seed, squared=False)
    return float(cfg.bandwidth)


def run_bayes_convergence(cfg: BayesConvergenceConfig, log=None) -> list[dict]:
    """One row per (seed, N): SGNN-to-oracle MSE, SGNN and kernel theta-MSE.

    Data seeds are offset per role so training, library and test sets never
    share random streams.
    """
    from .datagen import generate_dataset, lds_params_task
    from .nnet import LossSpec, NetworkSpec, TrainConfig, init_network, predict, train

    task = lds_params_task(cfg.process_sigma, cfg.steps)
    rows = []
    for seed in cfg.seeds:
        base = 1000 * int(seed)
        lib = ReferenceLibrary.from_dataset(generate_dataset(task, cfg.library_size, base + 1))
        test = generate_dataset(task, cfg.test_size, base + 2)
        sigma_sq = _bandwidth(cfg, lib, seed)
        oracle, _ = kernel_bayes_estimates(test.inputs, lib, sigma_sq)
        kernel_mse = float(np.mean(np.sum((oracle - test.thetas) ** 2, axis=1)))
        full = generate_dataset(task, max(cfg.train_sizes), base + 3)
        for n in cfg.train_sizes:
            ds = full.subset(np.arange(n))
            spec = NetworkSpec((ds.inputs.shape[1], *cfg.hidden, ds.targets.shape[1]), cfg.activation)
            net = init_network(spec, base + 4)
            net.set_standardization(ds.inputs)
            tcfg = TrainConfig(lr=cfg.lr, epochs=cfg.epochs, batch_size=cfg.batch_size, seed=base + 5)
            net, _ = train(net, ds, tcfg, LossSpec("mse"))
            pred = predict(net, test.inputs)
            row = {
                "seed": int(seed), "n_train": int(n),
                "mse_to_oracle": float(np.mean(np.sum((pred - oracle) ** 2, axis=1))),
                "mse_to_theta": float(np.mean(np.sum((pred - test.thetas) ** 2, axis=1))),
                "kernel_baseline_mse": kernel_mse, "bandwidth": sigma_sq,
            }
            rows.append(row)
            if log:
                log(f"bayes_convergence seed={seed} N={n} " + " ".join(
                    f"{k}={v:.5g}" for k, v in row.items() if isinstance(v, float)))
    return rows
