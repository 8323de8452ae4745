"""Supervised datasets drawn from (prior, simulator, labeling function).

Example ``i`` of a dataset is generated from ``RngStream(seed, i)`` so any
subset can be regenerated independently and in any order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .simcore import (
    LDS_PRIOR,
    SEIR_PRIOR,
    ObservationSpec,
    ParamVector,
    PriorSpec,
    RngStream,
    apply_observation,
    compartmental_batch,
    default_init,
    infected_index,
    sample_prior,
    simulate_lds,
)

MAGIC = b"SGNN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHQIII")  # magic, version, n, input dim, target dim, theta dim

TARGET_KINDS = ("params", "forecast", "model_class")


class DatasetFormatError(ValueError):
    pass


class MalformedHeaderError(DatasetFormatError):
    pass


class ShapeMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class SimulatorConfig:
    """Which mechanistic model to run and how it is observed.

    ``steps`` counts state transitions, so a rollout has ``steps + 1`` rows.
    LDS inputs drop the fixed initial row; compartmental series keep it.
    Compartmental tasks always observe the infected compartment, so only the
    observation's noise level is used for them.
    """

    model_tag: str = "LDS"
    steps: int = 10
    observation: ObservationSpec = field(default_factory=lambda: ObservationSpec(0.0, (0, 1)))
    process_sigma: float = 0.0  # LDS only
    x0: tuple[float, ...] = (1.0, 1.0)  # LDS only
    i0: float = 1e-2  # SIR / SEIR only

    def __post_init__(self):
        if self.model_tag not in ("LDS", "SIR", "SEIR", "MIXED"):
            raise ValueError(f"unknown model tag {self.model_tag!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.process_sigma >= 0:
            raise ValueError("process_sigma must be >= 0")

    @property
    def series_length(self) -> int:
        return self.steps if self.model_tag == "LDS" else self.steps + 1


@dataclass(frozen=True)
class TargetSpec:
    kind: str = "params"
    input_len: int = 0
    horizon: int = 0
    noisy_target: bool = False  # forecast only

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")


@dataclass(frozen=True)
class Mismatch:
    delta: float
    seed: int

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError("mismatch delta must be >= 0")


@dataclass(frozen=True)
class TaskSpec:
    simulator: SimulatorConfig
    prior: PriorSpec
    target: TargetSpec = TargetSpec()
    mismatch: Optional[Mismatch] = None

    def __post_init__(self):
        t = self.target
        if t.kind == "forecast":
            if t.input_len < 1 or t.horizon < 1:
                raise ValueError("forecast needs input_len >= 1 and horizon >= 1")
            if t.input_len + t.horizon > self.simulator.series_length:
                raise ValueError(
                    f"forecast window {t.input_len}+{t.horizon} exceeds series length "
                    f"{self.simulator.series_length}")
        if t.kind == "model_class" and self.simulator.model_tag != "MIXED":
            raise ValueError("model_class targets need simulator model_tag 'MIXED'")
        if self.simulator.model_tag == "MIXED" and t.kind != "model_class":
            raise ValueError("MIXED simulator is only valid for model_class targets")
        if self.mismatch is not None and self.simulator.model_tag != "LDS":
            raise ValueError("mismatch perturbation applies to LDS tasks only")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prior"] = self.prior.to_dict()
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def lds_params_task(sigma: float = 0.1, steps: int = 10) -> TaskSpec:
    """Latent-parameter regression from a flattened 2-D LDS trajectory."""
    return TaskSpec(SimulatorConfig("LDS", steps, ObservationSpec(0.0, (0, 1)), process_sigma=sigma),
                    LDS_PRIOR, TargetSpec("params"))


def sir_forecast_task(steps: int = 49, input_len: int = 40, horizon: int = 10,
                      noise: float = 0.01, prior: PriorSpec | None = None) -> TaskSpec:
    return TaskSpec(SimulatorConfig("SIR", steps, ObservationSpec(noise, (1,))),
                    prior or SEIR_PRIOR.subset(("beta", "gamma")),
                    TargetSpec("forecast", input_len, horizon))


def model_class_task(steps: int = 99, noise: float = 0.01, prior: PriorSpec = SEIR_PRIOR) -> TaskSpec:
    return TaskSpec(SimulatorConfig("MIXED", steps, ObservationSpec(noise, (0,))),
                    prior, TargetSpec("model_class"))


@dataclass(frozen=True)
class Example:
    input: np.ndarray
    target: np.ndarray
    theta: ParamVector
    model_tag: str


@dataclass
class Dataset:
    """Columnar store of examples plus generation manifest.

    ``thetas`` is NaN-padded where a model has fewer parameters than the
    widest one (SIR rows inside a mixed SIR/SEIR dataset).
    """

    inputs: np.ndarray
    targets: np.ndarray
    thetas: np.ndarray
    tags: np.ndarray  # uint8 index into MODEL_TAG_CODES
    theta_names: tuple[str, ...]
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype="<f8")
        self.targets = np.ascontiguousarray(self.targets, dtype="<f8")
        self.thetas = np.ascontiguousarray(self.thetas, dtype="<f8")
        self.tags = np.ascontiguousarray(self.tags, dtype=np.uint8)
        self.theta_names = tuple(self.theta_names)
        n = len(self.inputs)
        if not (len(self.targets) == len(self.thetas) == len(self.tags) == n):
            raise ShapeMismatchError("inputs, targets, thetas and tags differ in length")
        if self.inputs.ndim != 2 or self.targets.ndim != 2 or self.thetas.ndim != 2:
            raise ShapeMismatchError("inputs, targets and thetas must be 2-D")
        if self.thetas.shape[1] != len(self.theta_names):
            raise ShapeMismatchError("theta width does not match theta_names")

    def __len__(self) -> int:
        return len(self.inputs)

    def __getitem__(self, i: int) -> Example:
        tag = MODEL_TAG_CODES[int(self.tags[i])]
        row = self.thetas[i]
        keep = ~np.isnan(row)
        names = tuple(n for n, k in zip(self.theta_names, keep) if k)
        bounds = np.column_stack([row[keep], row[keep]])
        return Example(self.inputs[i], self.targets[i], ParamVector(row[keep], names, bounds), tag)

    def __iter__(self) -> Iterator[Example]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        manifest = dict(self.manifest, parent_n=len(self))
        return Dataset(self.inputs[idx], self.targets[idx], self.thetas[idx], self.tags[idx],
                       self.theta_names, manifest)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.targets, axis=1)


MODEL_TAG_CODES = ("LDS", "SIR", "SEIR")


def _example_row(task: TaskSpec, i: int, seed: int, a_pert):
    """Generate example ``i``: returns (input, target, theta values, tag)."""
    sim, tgt = task.simulator, task.target
    rng = RngStream(seed, i)
    if sim.model_tag == "LDS":
        theta = sample_prior(task.prior, rng)
        traj = simulate_lds(theta, sim.steps, sim.x0, sim.process_sigma, rng, perturbation=a_pert)
        obs = apply_observation(traj, sim.observation, rng)[1:]
        x = obs.reshape(-1)
        return x, theta.values.copy(), theta.values, "LDS"

    if sim.model_tag == "MIXED":
        tag = "SIR" if i % 2 == 0 else "SEIR"
        prior = task.prior if tag == "SEIR" else task.prior.subset(("beta", "gamma"))
    else:
        tag, prior = sim.model_tag, task.prior
    theta = sample_prior(prior, rng)
    states = compartmental_batch(tag, theta.values[None, :], sim.steps, default_init(tag, sim.i0))[0]
    clean = states[:, infected_index(tag)]
    noisy = clean
    if sim.observation.noise_sigma > 0:
        noisy = clean + rng.normal(clean.shape, scale=sim.observation.noise_sigma)

    if tgt.kind == "model_class":
        y = np.array([1.0, 0.0]) if tag == "SIR" else np.array([0.0, 1.0])
        x = noisy
    elif tgt.kind == "forecast":
        x = noisy[: tgt.input_len]
        src = noisy if tgt.noisy_target else clean
        y = src[tgt.input_len: tgt.input_len + tgt.horizon]
    else:
        x, y = noisy, theta.values.copy()
    return x, y, theta.values, tag


def _theta_names(task: TaskSpec) -> tuple[str, ...]:
    return task.prior.names


def generate_dataset(task: TaskSpec, n: int, seed: int, indices=None) -> Dataset:
    """Draw ``n`` examples; ``indices`` optionally selects which stream ids to use.

    Passing a permutation of ``range(n)`` yields the same examples in that
    order, which is what makes chunked or parallel generation safe.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.arange(n) if indices is None else np.asarray(indices)
    a_pert = None
    if task.mismatch is not None:
        d = task.simulator.observation.observed_dims
        a_pert = perturb_lds_matrix(np.zeros((len(d), len(d))), task.mismatch.delta, task.mismatch.seed)
    names = _theta_names(task)
    xs, ys, ths, tags = [], [], [], []
    for i in idx:
        x, y, th, tag = _example_row(task, int(i), seed, a_pert)
        row = np.full(len(names), np.nan)
        row[: len(th)] = th
        xs.append(x)
        ys.append(y)
        ths.append(row)
        tags.append(MODEL_TAG_CODES.index(tag))
    manifest = {"seed": int(seed), "task_digest": task.digest(), "n": int(len(idx)),
                "task": task.to_dict()}
    return Dataset(np.array(xs), np.array(ys), np.array(ths), np.array(tags, dtype=np.uint8),
                   names, manifest)


def perturb_lds_matrix(a0, delta: float, seed: int) -> np.ndarray:
    """Return ``A0 + delta * U`` with ``U`` a unit-Frobenius Gaussian direction."""
    if not delta >= 0:
        raise ValueError("delta must be >= 0")
    a0 = np.asarray(a0, dtype=float)
    u = RngStream(seed, 0).normal(a0.shape)
    u /= np.linalg.norm(u)
    return a0 + delta * u


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Sorted (train, test) row indices of a seeded random split."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise ValueError(f"fraction {train_fraction} on n={n} leaves an empty part")
    perm = RngStream(seed, 0xFFFF_FFFF).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def split_dataset(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    tr, te = split_indices(len(ds), train_fraction, seed)
    return ds.subset(tr), ds.subset(te)


def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _is_model_class(manifest: dict) -> bool:
    return manifest.get("task", {}).get("target", {}).get("kind") == "model_class"


def save_dataset(ds: Dataset, path) -> Path:
    """Write the binary payload plus a ``<path>.json`` manifest sidecar.

    Model-class targets are stored as integer labels, one column.
    """
    path = Path(path)
    targets = ds.targets
    if _is_model_class(ds.manifest):
        targets = ds.labels.astype("<f8")[:, None]
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(ds), ds.inputs.shape[1],
                          targets.shape[1], ds.thetas.shape[1])
    blob = b"".join([header, ds.inputs.tobytes(), np.ascontiguousarray(targets, "<f8").tobytes(),
                     ds.thetas.tobytes(), ds.tags.tobytes()])
    path.write_bytes(blob)
    manifest = dict(ds.manifest)
    manifest.update(theta_names=list(ds.theta_names), sha256=hashlib.sha256(blob).hexdigest())
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        if not blob.startswith(MAGIC[: len(blob)]):
            raise MalformedHeaderError(f"{path}: bad magic")
        raise TruncatedFileError(f"{path}: file shorter than header")
    magic, version, n, p, q, k = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 8 * n * (p + q + k) + n
    if len(blob) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} bytes, found {len(blob)}")
    if len(blob) > expected:
        raise ShapeMismatchError(f"{path}: {len(blob) - expected} trailing bytes")

    off = _HEADER.size

    def take(count, dtype, shape):
        nonlocal off
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).reshape(shape)
        off += arr.nbytes
        return arr.copy()

    inputs = take(n * p, "<f8", (n, p))
    targets = take(n * q, "<f8", (n, q))
    thetas = take(n * k, "<f8", (n, k))
    tags = take(n, np.uint8, (n,))

    manifest = {}
    mpath = _manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
    names = manifest.pop("theta_names", None) or [f"theta{j}" for j in range(k)]
    if len(names) != k:
        raise ShapeMismatchError(f"{path}: manifest lists {len(names)} theta names, payload has {k}")
    digest = manifest.pop("sha256", None)
    if digest is not None and digest != hashlib.sha256(blob).hexdigest():
        raise DatasetFormatError(f"{path}: checksum does not match manifest")
    if _is_model_class(manifest):
        if q != 1:
            raise ShapeMismatchError(f"{path}: model-class file must hold one label column")
        targets = np.eye(2)[targets[:, 0].astype(int)]
    return Dataset(inputs, targets, thetas, tags, tuple(names), manifest)


def export_csv(ds: Dataset, path) -> Path:
    path = Path(path)
    targets = ds.labels[:, None] if _is_model_class(ds.manifest) else ds.targets
    p, q = ds.inputs.shape[1], targets.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(p)] + [f"y{j}" for j in range(q)]
                   + list(ds.theta_names) + ["model_tag"])
        for i in range(len(ds)):
            w.writerow([repr(float(v)) for v in ds.inputs[i]] + [repr(float(v)) for v in targets[i]]
                       + ["" if np.isnan(v) else repr(float(v)) for v in ds.thetas[i]]
                       + [MODEL_TAG_CODES[int(ds.tags[i])]])
    return path
