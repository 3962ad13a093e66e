"""Synthetic trajectory datasets: generation, corruption, (de)serialization.

A dataset directory holds a JSON manifest plus one tab-separated file per
split (rows: traj, time, observations, controls, states) and, for corrupted
splits, a retained-index file. See FORMATS.md for the full layout.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError
from .systems import (
    PendulumParams,
    SirParams,
    integrate_rk4,
    pendulum_control,
    pendulum_derivative,
    sir_derivative,
)
from . import specs

__all__ = [
    "Trajectory",
    "IrregularTrajectory",
    "Normalization",
    "TrajectorySet",
    "generate_dataset",
    "corrupt",
    "build_split_datasets",
    "save_dataset",
    "load_dataset",
    "DATASET_FORMAT_VERSION",
]

DATASET_FORMAT_VERSION = 1


@dataclass
class Trajectory:
    times: np.ndarray         # (T,)
    states: np.ndarray        # (T, d_z)
    observations: np.ndarray  # (T, d_x)
    controls: np.ndarray      # (T, d_u)

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or len(t) == 0:
            raise ConfigurationError("times must be a non-empty 1-d array")
        if np.any(np.diff(t) <= 0):
            raise ConfigurationError("times must be strictly increasing")
        n = len(t)
        for name in ("states", "observations", "controls"):
            arr = getattr(self, name)
            if len(arr) != n:
                raise ConfigurationError(
                    f"{name} has length {len(arr)}, expected {n}"
                )

    def __len__(self) -> int:
        return len(self.times)


@dataclass
class IrregularTrajectory(Trajectory):
    """A trajectory after noise/drop corruption.

    ``observations`` are the noisy values; ``clean_observations`` keeps the
    pre-noise emission at the retained timestamps for evaluation.
    """

    retained_indices: np.ndarray = field(default_factory=lambda: np.empty(0, int))
    clean_observations: np.ndarray = field(default_factory=lambda: np.empty(0))
    noise_sigma: float = 0.0
    drop_rate: float = 0.0
    seed: int = 0


@dataclass
class Normalization:
    mode: str = "none"  # "none" | "zscore"
    mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    std: np.ndarray = field(default_factory=lambda: np.ones(1))

    def apply(self, obs: np.ndarray) -> np.ndarray:
        if self.mode == "none":
            return obs
        return (obs - self.mean) / self.std

    @staticmethod
    def fit(mode: str, observation_blocks: list[np.ndarray]) -> "Normalization":
        stacked = np.concatenate(observation_blocks, axis=0)
        if mode == "none":
            d = stacked.shape[1]
            return Normalization("none", np.zeros(d), np.ones(d))
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return Normalization("zscore", mean, std)


@dataclass
class TrajectorySet:
    system: str
    dt: float
    seed: int
    trajectories: list[Trajectory]
    params: list[object]
    normalization: Normalization
    noise_sigma: float = 0.0
    drop_rate: float = 0.0
    corrupt_seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.trajectories)


# ---------------------------------------------------------------------------
# Per-system sampling, emission, and simulation


def _pendulum_sampler(rng: np.random.Generator):
    params = PendulumParams(
        length=float(rng.uniform(1.0, 2.0)),
        control_amplitude=float(rng.uniform(-5.0, 5.0)),
    )
    z0 = np.array([rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0)])
    return params, z0


def _sir_sampler(rng: np.random.Generator):
    params = SirParams(
        contact_rate=float(rng.uniform(0.2, 0.6)),
        removal_rate=float(rng.uniform(0.05, 0.25)),
        population=1.0,
    )
    i0 = rng.uniform(0.01, 0.1)
    z0 = np.array([1.0 - i0, i0, 0.0])
    return params, z0


def _linear4_sampler(rng: np.random.Generator):
    return None, rng.uniform(-1.0, 1.0, size=4)


_LINEAR4_A = (specs.RECOVERY_KNOWN + specs.RECOVERY_TRUE_UNKNOWN).numpy()


def _simulate(system: str, params, z0, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integrate one trajectory; returns (states, controls)."""
    if system == "pendulum":
        deriv = lambda z, u, t: pendulum_derivative(params, z, t)
        states = integrate_rk4(deriv, z0, times)
        controls = np.array([[pendulum_control(params, t)] for t in times])
    elif system == "sir":
        deriv = lambda z, u, t: sir_derivative(params, z, t)
        states = integrate_rk4(deriv, z0, times)
        controls = np.zeros((len(times), 0))
    elif system == "linear4":
        deriv = lambda z, u, t: _LINEAR4_A @ z
        states = integrate_rk4(deriv, z0, times)
        controls = np.zeros((len(times), 0))
    else:
        raise ConfigurationError(f"unknown system '{system}'")
    return states, controls


def emit(system: str, states: np.ndarray, params) -> np.ndarray:
    """Raw (pre-normalization) emission of a state sequence."""
    if system == "pendulum":
        theta, omega = states[..., 0], states[..., 1]
        return np.stack([np.sin(theta), np.cos(theta), omega], axis=-1)
    if system == "sir":
        return states / params.population
    if system == "linear4":
        return states.copy()
    raise ConfigurationError(f"unknown system '{system}'")


def default_normalization_mode(system: str) -> str:
    return "zscore" if system == "sir" else "none"


_SAMPLERS = {
    "pendulum": _pendulum_sampler,
    "sir": _sir_sampler,
    "linear4": _linear4_sampler,
}


def generate_dataset(
    system: str,
    n_trajectories: int,
    horizon: int,
    dt: float,
    param_sampler: Optional[Callable] = None,
    seed: int = 0,
    normalization: Optional[Normalization] = None,
    seed_offset: int = 0,
) -> TrajectorySet:
    """Simulate ``n_trajectories`` of ``horizon`` points with step ``dt``.

    Deterministic given ``seed``: trajectory k draws from a child stream
    keyed by (seed, seed_offset + k), so parallel generation and split
    layouts cannot change the result. ``normalization=None`` fits stats on
    the generated trajectories (mode per system default); pass existing
    stats to reuse another split's.
    """
    if horizon < 2:
        raise ConfigurationError(f"horizon must be >= 2, got {horizon}")
    if dt <= 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if system not in _SAMPLERS:
        raise ConfigurationError(
            f"unknown system '{system}', expected one of {sorted(_SAMPLERS)}"
        )
    sampler = param_sampler or _SAMPLERS[system]
    times = np.arange(horizon) * dt

    raw_obs: list[np.ndarray] = []
    sims: list[tuple] = []
    params_list: list[object] = []
    for k in range(n_trajectories):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(seed_offset + k,))
        )
        params, z0 = sampler(rng)
        states, controls = _simulate(system, params, z0, times)
        raw_obs.append(emit(system, states, params))
        sims.append((states, controls))
        params_list.append(params)

    if normalization is None:
        normalization = Normalization.fit(default_normalization_mode(system), raw_obs)

    trajectories = [
        Trajectory(
            times=times.copy(),
            states=states,
            observations=normalization.apply(obs),
            controls=controls,
        )
        for (states, controls), obs in zip(sims, raw_obs)
    ]
    return TrajectorySet(
        system=system,
        dt=dt,
        seed=seed,
        trajectories=trajectories,
        params=params_list,
        normalization=normalization,
    )


def corrupt(
    tset: TrajectorySet, noise_sigma: float, drop_rate: float, seed: int
) -> TrajectorySet:
    """Add observation noise and drop a random subset of non-initial points.

    States, controls and times are subset but never perturbed; the first
    index of every trajectory is always retained. Deterministic given seed.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise ConfigurationError(f"drop_rate must be in [0, 1), got {drop_rate}")
    if noise_sigma < 0:
        raise ConfigurationError(f"noise_sigma must be >= 0, got {noise_sigma}")

    corrupted: list[IrregularTrajectory] = []
    for k, traj in enumerate(tset.trajectories):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(k,))
        )
        n = len(traj)
        n_keep = int(round((1.0 - drop_rate) * n))
        if n_keep < 2:
            raise ConfigurationError(
                f"drop_rate {drop_rate} leaves {n_keep} < 2 points (length {n})"
            )
        n_drop = n - n_keep
        if n_drop > 0:
            dropped = rng.choice(np.arange(1, n), size=n_drop, replace=False)
            retained = np.setdiff1d(np.arange(n), dropped)
        else:
            retained = np.arange(n)
        clean = traj.observations[retained]
        noisy = clean + noise_sigma * rng.standard_normal(clean.shape)
        corrupted.append(
            IrregularTrajectory(
                times=traj.times[retained],
                states=traj.states[retained],
                observations=noisy,
                controls=traj.controls[retained],
                retained_indices=retained,
                clean_observations=clean,
                noise_sigma=noise_sigma,
                drop_rate=drop_rate,
                seed=seed,
            )
        )
    return TrajectorySet(
        system=tset.system,
        dt=tset.dt,
        seed=tset.seed,
        trajectories=corrupted,
        params=tset.params,
        normalization=tset.normalization,
        noise_sigma=noise_sigma,
        drop_rate=drop_rate,
        corrupt_seed=seed,
    )


def build_split_datasets(
    system: str,
    sizes: dict[str, int],
    horizon: int,
    dt: float,
    seed: int,
    noise_sigma: float = 0.0,
    drop_rate: float = 0.0,
    corrupt_seed: Optional[int] = None,
) -> dict[str, TrajectorySet]:
    """Generate train/val/test splits sharing train-fitted normalization.

    Split k's trajectories use seed streams offset so no stream is reused
    across splits; corruption (when enabled) is applied to every split with
    a per-split corruption seed.
    """
    order = [name for name in ("train", "val", "test") if name in sizes]
    splits: dict[str, TrajectorySet] = {}
    offset = 0
    norm: Optional[Normalization] = None
    for name in order:
        split = generate_dataset(
            system,
            sizes[name],
            horizon,
            dt,
            seed=seed,
            normalization=norm,
            seed_offset=offset,
        )
        if norm is None:
            norm = split.normalization
        offset += sizes[name]
        splits[name] = split
    if noise_sigma > 0 or drop_rate > 0:
        base = seed + 7919 if corrupt_seed is None else corrupt_seed
        for j, name in enumerate(order):
            splits[name] = corrupt(splits[name], noise_sigma, drop_rate, base + j)
    return splits


# ---------------------------------------------------------------------------
# Serialization


def _fmt(x: float) -> str:
    return repr(float(x))


def _params_to_dict(params) -> dict:
    if params is None:
        return {}
    d = asdict(params)
    return {k: v for k, v in d.items() if v is not None}


def _params_from_dict(system: str, d: dict):
    if system == "pendulum":
        return PendulumParams(**d)
    if system == "sir":
        return SirParams(**d)
    return None


def save_dataset(root: str, splits: dict[str, TrajectorySet], extra: Optional[dict] = None) -> None:
    """Write a dataset directory (manifest + per-split TSV files).

    Payload files are byte-reproducible for identical inputs: floats are
    written as shortest round-trip decimal and the manifest holds no
    wall-clock fields.
    """
    os.makedirs(root, exist_ok=True)
    any_split = next(iter(splits.values()))
    d_x = any_split.trajectories[0].observations.shape[1]
    d_u = any_split.trajectories[0].controls.shape[1]
    d_z = any_split.trajectories[0].states.shape[1]
    columns = (
        ["traj", "time"]
        + [f"obs_{i}" for i in range(d_x)]
        + [f"ctrl_{i}" for i in range(d_u)]
        + [f"state_{i}" for i in range(d_z)]
    )
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "system": any_split.system,
        "dt": any_split.dt,
        "seed": any_split.seed,
        "columns": columns,
        "normalization": {
            "mode": any_split.normalization.mode,
            "mean": [float(v) for v in any_split.normalization.mean],
            "std": [float(v) for v in any_split.normalization.std],
        },
        "corruption": {
            "noise_sigma": any_split.noise_sigma,
            "drop_rate": any_split.drop_rate,
            "seed": any_split.corrupt_seed,
        },
        "splits": {
            name: {
                "n_trajectories": len(s),
                "corrupt_seed": s.corrupt_seed,
                "params": [_params_to_dict(p) for p in s.params],
            }
            for name, s in splits.items()
        },
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")

    for name, s in splits.items():
        with open(os.path.join(root, f"{name}.tsv"), "w") as fh:
            fh.write("\t".join(columns) + "\n")
            for k, traj in enumerate(s.trajectories):
                for i in range(len(traj)):
                    row = (
                        [str(k), _fmt(traj.times[i])]
                        + [_fmt(v) for v in traj.observations[i]]
                        + [_fmt(v) for v in traj.controls[i]]
                        + [_fmt(v) for v in traj.states[i]]
                    )
                    fh.write("\t".join(row) + "\n")
        corrupted = isinstance(s.trajectories[0], IrregularTrajectory) and (
            s.noise_sigma > 0 or s.drop_rate > 0
        )
        if corrupted:
            with open(os.path.join(root, f"{name}.retained.tsv"), "w") as fh:
                fh.write("traj\tindex\n")
                for k, traj in enumerate(s.trajectories):
                    for idx in traj.retained_indices:
                        fh.write(f"{k}\t{int(idx)}\n")


def load_dataset(root: str) -> dict[str, TrajectorySet]:
    """Load a dataset directory written by save_dataset.

    Clean observations of corrupted splits are re-derived from the stored
    states through the recorded emission and normalization (exact, since
    states are stored losslessly).
    """
    manifest_path = os.path.join(root, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigurationError(f"no manifest.json under {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    system = manifest["system"]
    norm = Normalization(
        mode=manifest["normalization"]["mode"],
        mean=np.array(manifest["normalization"]["mean"]),
        std=np.array(manifest["normalization"]["std"]),
    )
    n_obs = sum(1 for c in manifest["columns"] if c.startswith("obs_"))
    n_ctrl = sum(1 for c in manifest["columns"] if c.startswith("ctrl_"))
    corruption = manifest["corruption"]

    splits: dict[str, TrajectorySet] = {}
    for name, meta in manifest["splits"].items():
        data = np.loadtxt(os.path.join(root, f"{name}.tsv"), skiprows=1, ndmin=2)
        params_list = [_params_from_dict(system, d) for d in meta["params"]]
        retained_path = os.path.join(root, f"{name}.retained.tsv")
        retained_map: dict[int, list[int]] = {}
        corrupted = os.path.exists(retained_path)
        if corrupted:
            pairs = np.loadtxt(retained_path, skiprows=1, dtype=int, ndmin=2)
            for traj_id, idx in pairs:
                retained_map.setdefault(int(traj_id), []).append(int(idx))

        trajectories: list[Trajectory] = []
        for k in range(meta["n_trajectories"]):
            rows = data[data[:, 0] == k]
            times = rows[:, 1]
            obs = rows[:, 2 : 2 + n_obs]
            ctrl = rows[:, 2 + n_obs : 2 + n_obs + n_ctrl]
            states = rows[:, 2 + n_obs + n_ctrl :]
            if corrupted:
                clean = norm.apply(emit(system, states, params_list[k]))
                trajectories.append(
                    IrregularTrajectory(
                        times=times,
                        states=states,
                        observations=obs,
                        controls=ctrl,
                        retained_indices=np.array(retained_map[k], dtype=int),
                        clean_observations=clean,
                        noise_sigma=corruption["noise_sigma"],
                        drop_rate=corruption["drop_rate"],
                        seed=meta["corrupt_seed"],
                    )
                )
            else:
                trajectories.append(
                    Trajectory(times=times, states=states, observations=obs, controls=ctrl)
                )
        splits[name] = TrajectorySet(
            system=system,
            dt=manifest["dt"],
            seed=manifest["seed"],
            trajectories=trajectories,
            params=params_list,
            normalization=norm,
            noise_sigma=corruption["noise_sigma"] if corrupted else 0.0,
            drop_rate=corruption["drop_rate"] if corrupted else 0.0,
            corrupt_seed=meta["corrupt_seed"],
        )
    return splits
