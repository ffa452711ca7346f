"""End-to-end glue: data -> trained autoencoder -> latent Morse analysis."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .dataset import TrajectoryDataset, collect, default_sampler, split, subsample
from .grid import CubicalGrid
from .morse import (BistableGraph, DesiredAttractorNotFound, MorseDecomposition, MultivaluedMap,
                    RoaClassifier, build_map, condense, estimate_lipschitz, retract)
from .neural import AutoencoderModel, TrainConfig, TrainingDiverged, train
from .systems import System, make_system

log = logging.getLogger(__name__)


class RestartBudgetExhausted(RuntimeError):
    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


def build_system(cfg: Config) -> System:
    s = cfg.system
    if s.name == "pendulum":
        return make_system("pendulum", m=s.m, l=s.l, G=s.G, beta=s.beta, u_max=s.u_max, dt=s.dt,
                           Q=np.diag([s.q_theta, s.q_omega]), R=s.r, omega_max=s.omega_max)
    return make_system(s.name, dim=s.dim)


def generate(cfg: Config, workers: int | None = None) -> tuple[TrajectoryDataset, TrajectoryDataset]:
    system = build_system(cfg)
    data = collect(system, cfg.data.n_traj, cfg.data.horizon, cfg.data.tau,
                   init_sampler=default_sampler(system, cfg.data.omega_range),
                   seed=cfg.run.seed, workers=workers or cfg.run.workers)
    if len(data) < 2:
        return TrajectoryDataset(data.trajectories, "train"), TrajectoryDataset([], "test")
    return split(data, cfg.data.split_ratio, seed=cfg.run.seed)


def train_config(cfg: Config, seed: int) -> TrainConfig:
    t = cfg.train
    return TrainConfig(latent_dim=t.latent_dim, hidden=cfg.hidden(),
                       lambdas=(t.lambda1, t.lambda2, t.lambda3, t.lambda4), c=t.c, lr=t.lr,
                       batch_size=t.batch_size, epochs=t.epochs, seed=seed,
                       use_l4=t.l4 == "on", restarts=t.restarts,
                       normalization=t.normalization, lr_schedule=t.lr_schedule)


def training_subset(train_set: TrajectoryDataset, cfg: Config) -> TrajectoryDataset:
    return subsample(train_set, cfg.train.fraction, seed=cfg.run.seed)


@dataclass
class Analysis:
    grid: CubicalGrid
    lipschitz_estimate: float
    lipschitz: float
    mvmap: MultivaluedMap
    decomposition: MorseDecomposition
    bistable: BistableGraph | None
    classifier: RoaClassifier | None
    error: str | None = None


def base_lipschitz(model: AutoencoderModel, grid: CubicalGrid, cfg: Config) -> tuple[float, float]:
    """``(estimate, base)`` where base is the configured value or max(1, estimate)."""
    m = cfg.morse
    est = estimate_lipschitz(model.latent_step, grid, m.lipschitz_samples, seed=cfg.run.seed,
                             compositions=m.compositions)
    base = max(1.0, est) if m.lipschitz == "auto" else float(m.lipschitz)
    return est, base


def latent_grid(model: AutoencoderModel, train_set: TrajectoryDataset, cfg: Config) -> CubicalGrid:
    grid = CubicalGrid.latent(model.latent_dim, cfg.grid_k())
    return grid.validate(model.encode(train_set.all_states()))


def analyze(model: AutoencoderModel, train_set: TrajectoryDataset, cfg: Config,
            workers: int | None = None, multiplier: float | None = None) -> Analysis:
    """Latent grid, outer approximation, Morse decomposition and retraction.

    Fewer than two attractors, or no attractor holding a successful final
    state, is recorded in ``Analysis.error`` (with no classifier) rather than
    raised so callers can inspect the Morse graph.
    """
    grid = latent_grid(model, train_set, cfg)
    est, base = base_lipschitz(model, grid, cfg)
    L = base * (cfg.morse.lipschitz_mult if multiplier is None else multiplier)
    mv = build_map(grid, model.latent_step, L, cfg.morse.compositions, cfg.morse.method,
                   workers=workers or cfg.run.workers)
    decomp = condense(mv)
    if decomp.n_attractors < 2:
        # one attractor leaves nothing to separate: no classifier
        return Analysis(grid, est, L, mv, decomp, None, None,
                        f"{decomp.n_attractors} attractor(s) found")
    try:
        bistable = retract(decomp, model.encode(train_set.success_finals()))
    except DesiredAttractorNotFound as exc:
        return Analysis(grid, est, L, mv, decomp, None, None, str(exc))
    return Analysis(grid, est, L, mv, decomp, bistable, RoaClassifier(grid, bistable.cell_labels))


@dataclass
class FitResult:
    model: AutoencoderModel
    history: list
    analysis: Analysis
    seed: int
    attempts: list = field(default_factory=list)


def fit(train_set: TrajectoryDataset, cfg: Config, seed: int | None = None,
        workers: int | None = None) -> FitResult:
    """Train and analyze, retraining with seed+1 while fewer than two attractors
    are found or no attractor holds a successful final state."""
    seed = cfg.run.seed if seed is None else seed
    data = training_subset(train_set, cfg)
    attempts = []
    last = None
    for attempt in range(cfg.train.restarts + 1):
        s = seed + attempt
        try:
            model, history = train(data, train_config(cfg, s))
        except TrainingDiverged as exc:
            attempts.append((s, f"diverged: {exc}"))
            continue
        analysis = analyze(model, data, cfg, workers)
        last = FitResult(model, history, analysis, s, attempts)
        if analysis.error is not None:
            attempts.append((s, analysis.error))
        else:
            attempts.append((s, "ok"))
            return last
        log.info("restarting: seed %d gave %s", s, attempts[-1][1])
    raise RestartBudgetExhausted(
        f"no acceptable model after {cfg.train.restarts + 1} attempts: {attempts}", last)


MAX_DIRECT_CORNERS = 50_000_000


@dataclass
class DirectResult:
    grid: CubicalGrid
    mvmap: MultivaluedMap
    decomposition: MorseDecomposition
    roa: np.ndarray  # per vertex: attracting minimal Morse node or -1


def direct_grid(cfg: Config, system: System) -> CubicalGrid:
    d = cfg.direct
    if d.breaks.strip():
        axes = [[float(v) for v in ax.split(",")] for ax in d.breaks.split(";")]
        axes += [axes[-1]] * (system.state_dim - len(axes))
        return CubicalGrid(tuple(axes[:system.state_dim]))
    k = [int(v) for v in d.k.split(",")] if d.k.strip() else [3]
    k = k * system.state_dim if len(k) == 1 else k
    return CubicalGrid.uniform(system.lower, system.upper, k)


def direct_analysis(cfg: Config, workers: int | None = None) -> DirectResult:
    """Morse decomposition of the raw system map on a grid of its own state space."""
    from .morse import regions_of_attraction

    system = build_system(cfg)
    grid = direct_grid(cfg, system)
    if grid.n_cells * 2 ** grid.dim > MAX_DIRECT_CORNERS:
        raise ValueError(f"direct grid too large: {grid.n_cells} cells in dimension {grid.dim}")
    mv = build_map(grid, system.step, cfg.direct.lipschitz, cfg.direct.tau, cfg.direct.method,
                   workers=workers or cfg.run.workers)
    decomp = condense(mv)
    return DirectResult(grid, mv, decomp, regions_of_attraction(decomp))
