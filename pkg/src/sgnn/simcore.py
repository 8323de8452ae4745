"""Random streams, priors and the mechanistic simulators (LDS, SIR, SEIR)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MODEL_TAGS = ("LDS", "SIR", "SEIR")

# Default epidemic seeding; also assumed known by the least-squares fitter.
DEFAULT_I0 = 1e-2
BLOWUP_TOL = 1e-9

_UINT64 = (1 << 64) - 1


class SimulationBlowup(ValueError):
    """A compartment left [0, 1] (beyond tolerance) during simulation."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"compartment left [0, 1] at step {step}")


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, so the byte sequence depends only on the key. Gaussian
    draws use Box-Muller on the stream's uniforms.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed <= _UINT64 and 0 <= stream_id <= _UINT64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream_id], dtype=np.uint64))
        )

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def uniform(self, size=None, low=0.0, high=1.0):
        return low + (high - low) * self._gen.random(size)

    def normal(self, size=None, scale=1.0):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        z = scale * z[:n]
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def signs(self, size):
        return np.where(self._gen.random(size) < 0.5, -1.0, 1.0)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    names: tuple[str, ...]
    bounds: np.ndarray  # (d, 2)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        bounds = np.asarray(self.bounds, dtype=float).reshape(-1, 2)
        names = tuple(self.names)
        if not (len(values) == len(names) == len(bounds)):
            raise ValueError("names, values and bounds must have equal length")
        if not np.all(np.isfinite(values)):
            raise ValueError("parameter values must be finite")
        if np.any(values < bounds[:, 0]) or np.any(values > bounds[:, 1]):
            raise ValueError(f"parameter values {values} outside bounds {bounds.tolist()}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}


@dataclass(frozen=True)
class PriorSpec:
    """Independent uniform prior over named parameters."""

    names: tuple[str, ...]
    lows: tuple[float, ...]
    highs: tuple[float, ...]
    dist: str = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "lows", tuple(float(v) for v in self.lows))
        object.__setattr__(self, "highs", tuple(float(v) for v in self.highs))
        if self.dist != "uniform":
            raise ValueError(f"unsupported prior distribution {self.dist!r}")
        if not (len(self.names) == len(self.lows) == len(self.highs)):
            raise ValueError("prior names and bounds must have equal length")
        for name, lo, hi in zip(self.names, self.lows, self.highs):
            if not lo < hi:
                raise ValueError(f"prior bounds for {name!r} need lo < hi, got [{lo}, {hi}]")

    @property
    def bounds(self) -> np.ndarray:
        return np.column_stack([self.lows, self.highs])

    @property
    def dim(self) -> int:
        return len(self.names)

    def mean(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lows) + np.asarray(self.highs))

    def subset(self, names: Sequence[str]) -> "PriorSpec":
        idx = [self.names.index(n) for n in names]
        return PriorSpec(tuple(names), tuple(self.lows[i] for i in idx), tuple(self.highs[i] for i in idx))

    def to_dict(self) -> dict:
        return {"dist": self.dist, "names": list(self.names),
                "lows": list(self.lows), "highs": list(self.highs)}


LDS_PRIOR = PriorSpec(("alpha", "beta"), (0.5, 0.5), (1.5, 1.5))
SIR_PRIOR = PriorSpec(("beta", "gamma"), (0.1, 0.05), (0.5, 0.2))
SEIR_PRIOR = PriorSpec(("beta", "gamma", "sigma"), (0.1, 0.05, 0.1), (0.5, 0.2, 0.3))


def sample_prior(prior: PriorSpec, rng: RngStream) -> ParamVector:
    lows, highs = np.asarray(prior.lows), np.asarray(prior.highs)
    u = rng.uniform(prior.dim)
    values = np.clip(lows + (highs - lows) * u, lows, highs)
    return ParamVector(values, prior.names, prior.bounds)


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray  # (T, d), time-major
    model_tag: str

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[0] < 1:
            raise ValueError("trajectory needs a (T, d) state matrix with T >= 1")
        if self.model_tag not in MODEL_TAGS:
            raise ValueError(f"unknown model tag {self.model_tag!r}")
        object.__setattr__(self, "states", states)

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1


@dataclass(frozen=True)
class ObservationSpec:
    noise_sigma: float = 0.0
    observed_dims: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "observed_dims", tuple(int(i) for i in self.observed_dims))
        if not self.noise_sigma >= 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.observed_dims:
            raise ValueError("observed_dims must be nonempty")

    def validate_for(self, state_dim: int):
        if any(i < 0 or i >= state_dim for i in self.observed_dims):
            raise ValueError(f"observed_dims {self.observed_dims} invalid for state dimension {state_dim}")


def _values(theta) -> np.ndarray:
    return np.asarray(theta.values if isinstance(theta, ParamVector) else theta, dtype=float).reshape(-1)


def simulate_linear(a, steps: int, x0, sigma: float, rng: RngStream | None = None) -> np.ndarray:
    """Roll out ``x_{t+1} = A x_t + eps_t``; returns ``steps + 1`` rows."""
    a = np.asarray(a, dtype=float)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not sigma >= 0:
        raise ValueError("sigma must be >= 0")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(x0))):
        raise ValueError("non-finite dynamics or initial state")
    d = len(x0)
    noise = np.zeros((steps, d))
    if sigma > 0:
        if rng is None:
            raise ValueError("a random stream is required when sigma > 0")
        noise = rng.normal((steps, d), scale=sigma)
    states = np.empty((steps + 1, d))
    states[0] = x0
    for t in range(steps):
        states[t + 1] = a @ states[t] + noise[t]
    return states


def simulate_lds(theta, steps: int, x0=(1.0, 1.0), sigma: float = 0.0,
                 rng: RngStream | None = None, perturbation=None) -> Trajectory:
    """Diagonal LDS with ``A = diag(alpha, beta)`` (plus an optional additive perturbation)."""
    vals = _values(theta)
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite LDS parameters")
    a = np.diag(vals)
    if perturbation is not None:
        a = a + np.asarray(perturbation, dtype=float)
    return Trajectory(simulate_linear(a, steps, x0, sigma, rng), "LDS")


def default_init(model_tag: str, i0: float = DEFAULT_I0) -> np.ndarray:
    if model_tag == "SIR":
        return np.array([1.0 - i0, i0, 0.0])
    if model_tag == "SEIR":
        return np.array([1.0 - i0, 0.0, i0, 0.0])
    raise ValueError(f"not a compartmental model: {model_tag!r}")


def _rollout(model_tag, thetas, init, steps, out):
    """Forward-Euler updates written into ``out[:, 1:]``."""
    b = thetas.shape[0]
    beta, gamma = thetas[:, 0], thetas[:, 1]
    if model_tag == "SIR":
        s, i, r = (np.full(b, v) for v in init)
        for t in range(steps):
            inf = beta * s * i
            rec = gamma * i
            s, i, r = s - inf, i + inf - rec, r + rec
            out[:, t + 1, 0], out[:, t + 1, 1], out[:, t + 1, 2] = s, i, r
    else:
        sig = thetas[:, 2]
        s, e, i, r = (np.full(b, v) for v in init)
        for t in range(steps):
            inf = beta * s * i
            onset = sig * e
            rec = gamma * i
            s, e, i, r = s - inf, e + inf - onset, i + onset - rec, r + rec
            out[:, t + 1, 0], out[:, t + 1, 1], out[:, t + 1, 2], out[:, t + 1, 3] = s, e, i, r


def compartmental_batch(model_tag: str, thetas, steps: int, init=None,
                        check: bool = True) -> np.ndarray:
    """Vectorized noiseless SIR/SEIR rollout.

    ``thetas`` is (B, k) with columns (beta, gamma[, sigma]). Returns the
    (B, steps + 1, d) state array. With ``check`` set, raises
    :class:`SimulationBlowup` naming the first offending step; otherwise
    offending rows are left as computed and the caller inspects them.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    init = default_init(model_tag) if init is None else np.asarray(init, dtype=float)
    if model_tag == "SIR":
        if thetas.shape[1] != 2 or init.shape != (3,):
            raise ValueError("SIR expects theta (beta, gamma) and a 3-compartment init")
    elif model_tag == "SEIR":
        if thetas.shape[1] != 3 or init.shape != (4,):
            raise ValueError("SEIR expects theta (beta, gamma, sigma) and a 4-compartment init")
    else:
        raise ValueError(f"not a compartmental model: {model_tag!r}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if np.any(init < 0) or abs(init.sum() - 1.0) > BLOWUP_TOL:
        raise ValueError("initial compartments must be nonnegative and sum to 1")
    if not np.all(np.isfinite(thetas)):
        raise ValueError("non-finite compartmental parameters")

    out = np.empty((thetas.shape[0], steps + 1, len(init)))
    out[:, 0] = init
    with np.errstate(over="ignore", invalid="ignore"):
        _rollout(model_tag, thetas, init, steps, out)
    if check:
        bad = (out < -BLOWUP_TOL) | (out > 1.0 + BLOWUP_TOL) | ~np.isfinite(out)
        if bad.any():
            step = int(np.argmax(bad.any(axis=(0, 2))))
            raise SimulationBlowup(step)
    return out


def simulate_compartmental(model_tag: str, theta, steps: int, init=None) -> Trajectory:
    states = compartmental_batch(model_tag, _values(theta)[None, :], steps, init)[0]
    return Trajectory(states, model_tag)


def infected_index(model_tag: str) -> int:
    return {"SIR": 1, "SEIR": 2}[model_tag]


def apply_observation(traj: Trajectory, obs: ObservationSpec, rng: RngStream | None = None) -> np.ndarray:
    obs.validate_for(traj.states.shape[1])
    selected = traj.states[:, list(obs.observed_dims)].copy()
    if obs.noise_sigma > 0:
        if rng is None:
            raise ValueError("a random stream is required when noise_sigma > 0")
        selected += rng.normal(selected.shape, scale=obs.noise_sigma)
    return selected
