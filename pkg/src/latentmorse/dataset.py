"""Trajectory collection, labeling, windowing, splitting and CSV persistence."""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .systems import PendulumSystem, System, propagate_batch

# Rollouts are vectorized in fixed-size chunks so results do not depend on
# how many workers process them.
ROLLOUT_CHUNK = 64
MAX_RESAMPLE_ROUNDS = 100


class DatasetError(ValueError):
    pass


@dataclass
class Trajectory:
    id: int
    states: np.ndarray
    label: int

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or len(self.states) < 2:
            raise DatasetError(f"trajectory {self.id} needs at least 2 states")
        if not np.all(np.isfinite(self.states)):
            raise DatasetError(f"trajectory {self.id} has non-finite states")
        if self.label not in (0, 1):
            raise DatasetError(f"trajectory {self.id} has label {self.label}, expected 0 or 1")


def window(trajectory: Trajectory) -> list[tuple[np.ndarray, np.ndarray]]:
    """Consecutive ``(x, Im(x))`` pairs of a trajectory."""
    s = trajectory.states
    return [(s[i], s[i + 1]) for i in range(len(s) - 1)]


@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory]
    tag: str = "train"

    def __len__(self):
        return len(self.trajectories)

    @property
    def state_dim(self) -> int:
        return self.trajectories[0].states.shape[1]

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.trajectories:
            return np.empty((0, 0)), np.empty((0, 0))
        X = np.concatenate([t.states[:-1] for t in self.trajectories])
        Y = np.concatenate([t.states[1:] for t in self.trajectories])
        return X, Y

    @property
    def n_pairs(self) -> int:
        return sum(len(t.states) - 1 for t in self.trajectories)

    def all_states(self) -> np.ndarray:
        return np.concatenate([t.states for t in self.trajectories])

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trajectories], dtype=int)

    def initial_states(self) -> np.ndarray:
        return np.array([t.states[0] for t in self.trajectories])

    def final_states(self) -> np.ndarray:
        return np.array([t.states[-1] for t in self.trajectories])

    def success_finals(self) -> np.ndarray:
        F = self.final_states()
        return F[self.labels == 1]

    def failure_finals(self) -> np.ndarray:
        F = self.final_states()
        return F[self.labels == 0]

    @property
    def success_rate(self) -> float:
        return float(self.labels.mean()) if self.trajectories else 0.0

    def subset(self, ids: Sequence[int], tag: str | None = None) -> "TrajectoryDataset":
        wanted = set(int(i) for i in ids)
        return TrajectoryDataset([t for t in self.trajectories if t.id in wanted], tag or self.tag)

    # persistence

    def to_csv(self) -> str:
        n = self.state_dim if self.trajectories else 0
        buf = io.StringIO()
        buf.write(",".join(["traj_id", "step", "label"] + [f"x_{i}" for i in range(n)]) + "\n")
        for t in sorted(self.trajectories, key=lambda t: t.id):
            for step, row in enumerate(t.states):
                vals = ",".join(format(float(v), ".17g") for v in row)
                buf.write(f"{t.id},{step},{t.label},{vals}\n")
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str, tag: str = "train") -> "TrajectoryDataset":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError("empty dataset file") from None
        if header[:3] != ["traj_id", "step", "label"]:
            raise DatasetError(f"bad dataset header {header[:3]!r}")
        n = len(header) - 3
        rows: dict[int, list] = {}
        labels: dict[int, int] = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != n + 3:
                raise DatasetError(f"line {lineno}: expected {n + 3} fields, got {len(rec)}")
            try:
                tid, step, label = int(rec[0]), int(rec[1]), int(rec[2])
                values = [float(v) for v in rec[3:]]
            except ValueError:
                raise DatasetError(f"line {lineno}: unreadable number in {rec!r}") from None
            states = rows.setdefault(tid, [])
            if step != len(states):
                raise DatasetError(f"line {lineno}: trajectory {tid} step {step} out of order")
            if labels.setdefault(tid, label) != label:
                raise DatasetError(f"line {lineno}: trajectory {tid} label changes")
            states.append(values)
        trajs = [Trajectory(tid, np.array(rows[tid]), labels[tid]) for tid in sorted(rows)]
        return cls(trajs, tag)

    @classmethod
    def load(cls, path, tag: str | None = None) -> "TrajectoryDataset":
        path = Path(path)
        return cls.from_csv(path.read_text(), tag or path.stem)


def pendulum_success(final_observation, l: float = 1.0) -> int:
    """1 when the mass is near upright and near rest, else 0."""
    x, y, xd, yd = (float(v) for v in final_observation)
    return int(y > 0.995 * l and abs(xd) < 0.5 and abs(yd) < 0.5)


def bistable_success(final_state) -> int:
    return int(final_state[0] > 0)


def box_sampler(lower, upper, transform: Callable | None = None):
    """Uniform sampler over a box, optionally mapped into observation space."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)

    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        pts = rng.uniform(lower, upper, size=(n, len(lower)))
        return transform(pts) if transform is not None else pts

    return sample


def default_sampler(system: System, omega_range: float = 4.0):
    if isinstance(system, PendulumSystem):
        return box_sampler([-math.pi, -omega_range], [math.pi, omega_range], system.observe)
    return box_sampler(system.lower, system.upper)


def default_success(system: System) -> Callable:
    if isinstance(system, PendulumSystem):
        l = system.pendulum.l
        return lambda s: pendulum_success(s, l)
    return bistable_success


def _rollout_chunk(system: System, x0: np.ndarray, n_strides: int, tau: int):
    states = [x0]
    ok = system.in_domain(x0)
    cur = x0
    for _ in range(n_strides):
        cur, live = propagate_batch(system, cur, tau)
        ok &= live
        states.append(cur)
    return np.stack(states, axis=1), ok


def collect(
    system: System,
    n_traj: int,
    horizon: int,
    tau: int,
    init_sampler: Callable | None = None,
    success: Callable | None = None,
    seed: int = 0,
    workers: int = 1,
    tag: str = "all",
) -> TrajectoryDataset:
    """Roll out ``n_traj`` trajectories storing every ``tau``-th state.

    Initial states whose rollout leaves the domain are resampled; after
    ``MAX_RESAMPLE_ROUNDS`` rounds collection fails.
    """
    if n_traj < 1:
        raise DatasetError("n_traj must be >= 1")
    if tau < 1 or horizon < tau or horizon % tau:
        raise DatasetError(f"horizon {horizon} must be a positive multiple of tau {tau}")
    init_sampler = init_sampler or default_sampler(system)
    success = success or default_success(system)
    rng = np.random.default_rng(seed)
    n_strides = horizon // tau

    result = np.empty((n_traj, n_strides + 1, system.state_dim))
    pending = np.arange(n_traj)
    for _ in range(MAX_RESAMPLE_ROUNDS):
        if pending.size == 0:
            break
        x0 = init_sampler(rng, pending.size)
        chunks = [slice(i, i + ROLLOUT_CHUNK) for i in range(0, pending.size, ROLLOUT_CHUNK)]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outs = list(pool.map(lambda s: _rollout_chunk(system, x0[s], n_strides, tau), chunks))
        else:
            outs = [_rollout_chunk(system, x0[s], n_strides, tau) for s in chunks]
        trajs = np.concatenate([o[0] for o in outs])
        ok = np.concatenate([o[1] for o in outs])
        result[pending[ok]] = trajs[ok]
        pending = pending[~ok]
    else:
        if pending.size:
            raise DatasetError(f"{pending.size} trajectories kept leaving the domain")

    trajectories = [
        Trajectory(i, result[i], int(success(result[i, -1]))) for i in range(n_traj)
    ]
    return TrajectoryDataset(trajectories, tag)


def split(dataset: TrajectoryDataset, ratio: float = 0.8, seed: int = 0):
    """Random split by whole trajectories into ``(train, test)``."""
    if not 0 < ratio < 1:
        raise DatasetError("split ratio must lie in (0, 1)")
    n = len(dataset)
    if n < 2:
        raise DatasetError("need at least 2 trajectories to split")
    n_train = min(max(int(round(ratio * n)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    ids = np.array([t.id for t in dataset.trajectories])
    train_ids = ids[order[:n_train]]
    test_ids = ids[order[n_train:]]
    return dataset.subset(train_ids, "train"), dataset.subset(test_ids, "test")


def subsample(dataset: TrajectoryDataset, fraction: float, seed: int = 0) -> TrajectoryDataset:
    """Keep a random ``fraction`` of the trajectories (at least one)."""
    if not 0 < fraction <= 1:
        raise DatasetError("fraction must lie in (0, 1]")
    if fraction == 1:
        return dataset
    n = max(1, int(round(fraction * len(dataset))))
    order = np.random.default_rng(seed).permutation(len(dataset))[:n]
    ids = [dataset.trajectories[i].id for i in order]
    return dataset.subset(ids, dataset.tag)
