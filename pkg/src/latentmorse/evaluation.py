"""Precision / recall scoring of the RoA classifier and ablation sweeps."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np

from .config import Config
from .dataset import TrajectoryDataset
from .morse import RoaClassifier
from .pipeline import RestartBudgetExhausted, analyze, fit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f_score: float
    n_true_success: int  # |I_s|
    n_pred_success: int  # |Î_s|
    n_hit: int  # |I_s ∩ Î_s|
    n_true_failure: int
    n_pred_failure: int
    precision_undefined: bool = False

    @property
    def n(self) -> int:
        return self.n_true_success + self.n_true_failure


def metrics_from_predictions(truth, predicted) -> Metrics:
    truth = np.asarray(truth, dtype=bool)
    predicted = np.asarray(predicted, dtype=bool)
    hit = int(np.sum(truth & predicted))
    n_pred, n_true = int(predicted.sum()), int(truth.sum())
    undefined = n_pred == 0
    P = 0.0 if undefined else hit / n_pred
    R = hit / n_true if n_true else 0.0
    F = 2 * P * R / (P + R) if P + R > 0 else 0.0
    return Metrics(P, R, F, n_true, n_pred, hit, int((~truth).sum()), int((~predicted).sum()),
                   undefined)


def score(model, classifier: RoaClassifier, dataset: TrajectoryDataset) -> Metrics:
    """Classify each trajectory's initial state and compare with its label."""
    if len(dataset) == 0:
        return metrics_from_predictions([], [])
    predicted = classifier.predict(model, dataset.initial_states())
    return metrics_from_predictions(dataset.labels == 1, predicted)


@dataclass
class AblationRow:
    axis: str
    setting: str
    seed: int | None
    metrics: Metrics | None
    train_metrics: Metrics | None = None
    n_test: int = 0
    error: str | None = None

    def csv(self) -> str:
        if self.metrics is None:
            return f"{self.axis},{self.setting},{self.seed},failed,failed,failed,{self.n_test}"
        m = self.metrics
        return (f"{self.axis},{self.setting},{self.seed},{m.precision:.6f},{m.recall:.6f},"
                f"{m.f_score:.6f},{self.n_test}")


AXES = {
    "fraction": ("1.0", "0.5", "0.1"),
    "lipschitz": ("1", "2", "4"),
    "l4": ("off", "on"),
    "latent_dim": ("2", "1"),
}


# restarts walk seed, seed+1, ...; spacing keeps the seeds' retrain chains apart
SEED_STRIDE = 1000


def seed_list(cfg: Config) -> list[int]:
    return [cfg.run.seed + SEED_STRIDE * i for i in range(cfg.eval.seeds)]


def _variant(cfg: Config, axis: str, setting: str) -> Config:
    v = copy.deepcopy(cfg)
    if axis == "fraction":
        v.train.fraction = float(setting)
    elif axis == "l4":
        v.train.l4 = setting
    elif axis == "latent_dim":
        v.train.latent_dim = int(setting)
        v.grid.k = v.grid.k.split(",")[0]
    elif axis != "lipschitz":
        raise ValueError(f"unknown ablation axis {axis!r}")
    return v


def best_of_seeds(train_set, test_set, cfg: Config, seeds, axis="base", setting="-",
                  workers=None, multipliers=None) -> list[AblationRow]:
    """Fit one model per seed and keep, per setting, the seed with the best train F.

    With ``multipliers`` each fitted model is re-analyzed at every Lipschitz
    multiplier and one row per multiplier is returned.
    """
    settings = multipliers or [None]
    candidates: dict = {s: [] for s in settings}
    for seed in seeds:
        try:
            result = fit(train_set, cfg, seed=seed, workers=workers)
        except RestartBudgetExhausted as exc:
            log.warning("%s=%s seed %d failed: %s", axis, setting, seed, exc)
            continue
        for mult in settings:
            analysis = result.analysis if mult is None else analyze(
                result.model, train_set, cfg, workers, multiplier=mult)
            if analysis.classifier is None:
                continue
            tr = score(result.model, analysis.classifier, train_set)
            te = score(result.model, analysis.classifier, test_set)
            candidates[mult].append((tr.f_score, -seed, result.seed, tr, te))
    rows = []
    for mult in settings:
        label = setting if mult is None else f"{mult:g}"
        if not candidates[mult]:
            rows.append(AblationRow(axis, label, None, None, None, len(test_set), "all seeds failed"))
            continue
        _, _, seed, tr, te = max(candidates[mult], key=lambda c: (c[0], c[1]))
        rows.append(AblationRow(axis, label, seed, te, tr, len(test_set)))
    return rows


def ablation_suite(train_set, test_set, cfg: Config, axis: str, settings=None,
                   seeds=None, workers=None) -> list[AblationRow]:
    """One best-of-seeds metrics row per setting of ``axis``."""
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}")
    settings = list(settings or AXES[axis])
    seeds = list(seeds if seeds is not None else seed_list(cfg))
    if axis == "lipschitz":
        return best_of_seeds(train_set, test_set, cfg, seeds, axis, workers=workers,
                             multipliers=[float(s) for s in settings])
    rows = []
    for setting in settings:
        try:
            rows += best_of_seeds(train_set, test_set, _variant(cfg, axis, setting), seeds,
                                  axis, setting, workers)
        except Exception as exc:  # a failed row must not stop the suite
            log.exception("ablation %s=%s failed", axis, setting)
            rows.append(AblationRow(axis, setting, None, None, None, len(test_set), str(exc)))
    return rows


def report_csv(rows) -> str:
    return "axis,setting,seed,P,R,F,n_test\n" + "".join(r.csv() + "\n" for r in rows)


def report_text(rows) -> str:
    lines = []
    for r in rows:
        if r.metrics is None:
            lines.append(f"{r.axis:>10} {r.setting:>6}  FAILED ({r.error})")
        else:
            m = r.metrics
            lines.append(f"{r.axis:>10} {r.setting:>6}  seed={r.seed}  P={m.precision:.1%}  "
                         f"R={m.recall:.1%}  F={m.f_score:.1%}  (n_test={r.n_test})")
    return "\n".join(lines)
