"""Pretrain-then-probe runs and the fusion / perturbation-magnitude sweeps."""
from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from afsrl.encoder import ModelParams
from afsrl.evaluation import accuracy_from_predictions, class_mean_accuracy, fit_linear_probe
from afsrl.pointcloud import Dataset
from afsrl.trainer import TrainConfig, embed_dataset, new_state, train

ARMS = {"da_only": (1.0, 0.0), "fa_only": (0.0, 1.0), "fused": (1.0, 1.0)}
DEFAULT_EPSILONS = (0.0, 0.25, 0.5, 1.0, 2.0, 5.0)


@dataclass
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    test_class_mean_accuracy: float
    status: str = "ok"  # "collapsed" when pre-training stopped on a numerical failure
    steps: int = 0


def probe_params(ds: Dataset, params: ModelParams, cfg: TrainConfig, lam: float = 1e-3,
                 epochs: int = 500, seed: int = 0) -> ProbeResult:
    """Embed every cloud, fit the probe on the train split only, score both splits."""
    emb, labels = embed_dataset(ds.clouds, params, cfg, seed=seed)
    tr, te = ds.train_idx, ds.test_idx
    model = fit_linear_probe(emb[tr], labels[tr], lam, epochs, seed)
    pred_te = model.predict(emb[te])
    return ProbeResult(
        accuracy_from_predictions(model.predict(emb[tr]), labels[tr]),
        accuracy_from_predictions(pred_te, labels[te]),
        class_mean_accuracy(pred_te, labels[te]),
    )


def pretrain_and_probe(ds: Dataset, cfg: TrainConfig, lam: float = 1e-3, probe_epochs: int = 500) -> ProbeResult:
    """Pre-train on the train split, then probe.

    A run that collapses is probed with the weights of its last finished step
    and marked ``collapsed``.
    """
    state = train(ds.subset(ds.train_idx), cfg, stop_on_failure=True)
    res = probe_params(ds, state.params, cfg, lam, probe_epochs, seed=cfg.seed)
    res.status = "ok" if state.aborted is None else "collapsed"
    res.steps = state.step
    return res


def untrained_probe(ds: Dataset, cfg: TrainConfig, lam: float = 1e-3, probe_epochs: int = 500) -> ProbeResult:
    return probe_params(ds, new_state(cfg).params, cfg, lam, probe_epochs, seed=cfg.seed)


@dataclass(frozen=True)
class Cell:
    arm: str
    epsilon: float
    seed: int


def ablation_cells(epsilons: Sequence[float] = DEFAULT_EPSILONS, seeds: Sequence[int] = (0, 1, 2),
                   arms: Iterable[str] = ("fused",), arm_epsilon: float = 1.0) -> list[Cell]:
    """Fused cells over the epsilon grid, plus single-arm cells at ``arm_epsilon``."""
    cells = [Cell("fused", float(e), s) for e in epsilons for s in seeds]
    for arm in arms:
        if arm != "fused":
            cells += [Cell(arm, arm_epsilon, s) for s in seeds]
    return cells


def cell_config(base: TrainConfig, cell: Cell) -> TrainConfig:
    alpha, beta = ARMS[cell.arm]
    return dataclasses.replace(base, alpha=alpha, beta=beta, epsilon=cell.epsilon, seed=cell.seed)


def run_cell(ds: Dataset, base: TrainConfig, cell: Cell, lam: float = 1e-3, probe_epochs: int = 500) -> ProbeResult:
    return pretrain_and_probe(ds, cell_config(base, cell), lam, probe_epochs)


def run_ablation(ds: Dataset, base: TrainConfig, cells: Sequence[Cell], workers: int = 1,
                 lam: float = 1e-3, probe_epochs: int = 500) -> list[ProbeResult]:
    """Results in cell order regardless of worker scheduling."""
    def one(c):
        return run_cell(ds, base, c, lam, probe_epochs)

    if workers <= 1:
        return [one(c) for c in cells]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, cells))


def median_by(cells: Sequence[Cell], results: Sequence[ProbeResult], key) -> dict:
    groups: dict = {}
    for c, r in zip(cells, results):
        groups.setdefault(key(c), []).append(r.test_accuracy)
    return {k: float(np.median(v)) for k, v in groups.items()}
