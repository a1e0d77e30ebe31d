"""Two-branch contrastive pre-training loop."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from afsrl.augmentation import AugmentedPair, knn_graph, make_pair
from afsrl.encoder import (
    ModelParams,
    encode,
    encode_batch,
    init_params,
    load_params,
    offset_params,
    perturb,
    project,
    read_layers,
    save_params,
    write_layers,
)
from afsrl.errors import DegenerateEmbeddingError, NumericalError
from afsrl.losses import LossWeights, loss_da, loss_fa, total_loss
from afsrl.numerics import Tensor
from afsrl.pointcloud import PointCloud, sample_surface

log = logging.getLogger(__name__)

EMBED_POINTS = 1024


@dataclass
class TrainConfig:
    k_neighbors: int = 10
    sample_ratio: float = 0.8
    tau: float = 0.5
    epsilon: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    batch_size: int = 16
    learning_rate: float = 1e-3
    epochs: int = 100
    seed: int = 0
    encoder_dims: tuple[int, ...] = (3, 64, 128)
    head_dims: tuple[int, ...] = (128, 128, 64)
    pooling: str = "mean"
    optimizer: str = "adam"
    fa_view: str = "u"  # "u" or "alternate"

    def __post_init__(self):
        self.encoder_dims = tuple(int(d) for d in self.encoder_dims)
        self.head_dims = tuple(int(d) for d in self.head_dims)
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if not 0 < self.sample_ratio <= 1:
            raise ValueError("sample_ratio must lie in (0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.pooling not in ("mean", "max"):
            raise ValueError("pooling must be mean or max")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")
        if self.fa_view not in ("u", "alternate"):
            raise ValueError("fa_view must be u or alternate")
        LossWeights(self.alpha, self.beta, self.tau)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.tau)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v!r}" if isinstance(v, float) else f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise KeyError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(kinds[key], raw)
        return cls(**kwargs)


def _coerce(kind, raw):
    if not isinstance(raw, str):
        return raw
    kind = str(kind)
    if kind.startswith("tuple"):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {line!r}")
        out[key.strip()] = val.strip()
    return out


class Adam:
    def __init__(self, shapes: Sequence[tuple[int, int]], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: Sequence[Tensor]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for w, m, v in zip(params, self.m, self.v):
            g = w.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            w.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, shapes, lr: float):
        self.lr = lr
        self.m = [np.zeros(s) for s in shapes]  # unused, kept for a uniform checkpoint layout
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: Sequence[Tensor]) -> None:
        self.t += 1
        for w in params:
            w.data -= self.lr * w.grad


def make_optimizer(cfg: TrainConfig, params: ModelParams):
    shapes = [w.shape for w in params.layers]
    if cfg.optimizer == "adam":
        return Adam(shapes, cfg.learning_rate)
    return SGD(shapes, cfg.learning_rate)


@dataclass
class TrainState:
    params: ModelParams
    optimizer: Adam | SGD
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    loss_history: list[tuple[int, float, float, float]] = field(default_factory=list)
    step_log: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    aborted: str | None = None  # diagnostic when training stopped on a numerical failure


def new_state(cfg: TrainConfig) -> TrainState:
    # separate streams for weight init and for augmentation/perturbation draws
    init_seed, run_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_params(cfg.encoder_dims, cfg.head_dims, seed=init_seed)
    return TrainState(params, make_optimizer(cfg, params), np.random.default_rng(run_seed))


@dataclass
class StepOutput:
    loss_da: float
    loss_fa: float
    loss: float


def forward_losses(pairs: Sequence[AugmentedPair], params: ModelParams, cfg: TrainConfig,
                   rng: np.random.Generator, fa_use_v: bool = False, offsets=None):
    """Build the three-branch graph and return (L_DA, L_FA, L, H, Z_partner) tensors.

    ``offsets`` replaces the fresh noise draw with fixed per-layer shifts.
    """
    gu = [p.g_u for p in pairs]
    gv = [p.g_v for p in pairs]
    zu = project(encode_batch(gu, params.encoder_layers, cfg.pooling), params.head_layers)
    zv = project(encode_batch(gv, params.encoder_layers, cfg.pooling), params.head_layers)
    pert = perturb(params, cfg.epsilon, rng) if offsets is None else offset_params(params, cfg.epsilon, offsets)
    fa_graphs, partner = (gv, zv) if fa_use_v else (gu, zu)
    h = project(encode_batch(fa_graphs, pert.perturbed_encoder_layers, cfg.pooling), params.head_layers)
    l_da = loss_da(zu, zv, cfg.tau)
    l_fa = loss_fa(partner, h, cfg.tau)
    return l_da, l_fa, total_loss(l_da, l_fa, cfg.weights), h, partner


def train_step(pairs: Sequence[AugmentedPair], state: TrainState, cfg: TrainConfig) -> StepOutput:
    """One gradient update on a batch of augmented pairs; mutates ``state``."""
    fa_use_v = cfg.fa_view == "alternate" and state.step % 2 == 1
    try:
        l_da, l_fa, loss, _, _ = forward_losses(pairs, state.params, cfg, state.rng, fa_use_v)
    except DegenerateEmbeddingError as exc:
        raise NumericalError(f"embedding collapse at step {state.step}: {exc}") from exc
    vals = (l_da.item(), l_fa.item(), loss.item())
    if not all(math.isfinite(v) for v in vals):
        raise NumericalError(
            f"non-finite loss at step {state.step} (L_DA={vals[0]}, L_FA={vals[1]}); "
            "embeddings collapsed or learning rate too high"
        )
    state.params.zero_grad()
    loss.backward()
    state.optimizer.step(state.params.layers)
    state.params.zero_grad()
    if not all(np.all(np.isfinite(w.data)) for w in state.params.layers):
        raise NumericalError(f"non-finite weights after step {state.step}")
    state.step += 1
    return StepOutput(*vals)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one item is dropped."""
    order = rng.permutation(n)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def train(clouds: Sequence[PointCloud], cfg: TrainConfig, out_dir: str | Path | None = None,
          state: TrainState | None = None, checkpoint_every: int = 1,
          stop_on_failure: bool = False) -> TrainState:
    """Run (remaining) epochs; with ``out_dir`` write metrics.csv and checkpoints.

    A numerical failure raises ``NumericalError`` unless ``stop_on_failure``,
    in which case training ends early with ``state.aborted`` set and the
    parameters from the last completed step left in place.
    """
    if not clouds:
        raise ValueError("cannot train on an empty dataset")
    state = state or new_state(cfg)
    out = Path(out_dir) if out_dir is not None else None
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "metrics.csv"
        fresh = state.epoch == 0 or not path.exists()
        metrics = open(path, "w" if fresh else "a")
        if fresh:
            metrics.write("epoch,step,loss_da,loss_fa,loss_total\n")
    try:
        while state.epoch < cfg.epochs:
            epoch = state.epoch + 1
            sums = np.zeros(3)
            steps = 0
            for idx in batches(len(clouds), cfg.batch_size, state.rng):
                pairs = [make_pair(clouds[i], cfg.k_neighbors, cfg.sample_ratio, state.rng, int(i)) for i in idx]
                try:
                    res = train_step(pairs, state, cfg)
                except NumericalError as exc:
                    if not stop_on_failure:
                        raise
                    state.aborted = str(exc)
                    log.warning("training stopped: %s", exc)
                    return state
                state.step_log.append((epoch, state.step, res.loss_da, res.loss_fa, res.loss))
                if metrics is not None:
                    metrics.write(f"{epoch},{state.step},{res.loss_da!r},{res.loss_fa!r},{res.loss!r}\n")
                sums += (res.loss_da, res.loss_fa, res.loss)
                steps += 1
            means = sums / max(steps, 1)
            state.loss_history.append((epoch, *map(float, means)))
            state.epoch = epoch
            log.info("epoch %d  L_DA %.4f  L_FA %.4f  L %.4f", epoch, *means)
            if metrics is not None:
                metrics.flush()
            if out is not None and (epoch % checkpoint_every == 0 or epoch == cfg.epochs):
                save_checkpoint(state, cfg, out)
    finally:
        if metrics is not None:
            metrics.close()
    return state


# --- persistence ---------------------------------------------------------

def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_checkpoint(state: TrainState, cfg: TrainConfig, out_dir: str | Path) -> Path:
    """model.afsr (weights), optimizer.afsr (moments), state.txt (config, rng, counters)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_params(state.params, out / "model.afsr")
    write_layers(state.optimizer.m + state.optimizer.v, out / "optimizer.afsr")
    sidecar = {
        "epoch": state.epoch,
        "step": state.step,
        "optimizer_t": state.optimizer.t,
        "n_encoder_layers": len(state.params.encoder_layers),
        "rng_state": json.dumps(state.rng.bit_generator.state),
        "loss_history": json.dumps([[e, repr(a), repr(b), repr(c)] for e, a, b, c in state.loss_history]),
    }
    text = cfg.to_text() + "".join(f"{k}={v}\n" for k, v in sidecar.items())
    _atomic_write_text(out / "state.txt", text)
    return out / "model.afsr"


STATE_KEYS = ("epoch", "step", "optimizer_t", "n_encoder_layers", "rng_state", "loss_history")


def load_checkpoint(out_dir: str | Path) -> tuple[TrainState, TrainConfig]:
    out = Path(out_dir)
    kv = parse_kv((out / "state.txt").read_text())
    cfg = TrainConfig.from_mapping({k: v for k, v in kv.items() if k not in STATE_KEYS})
    params = load_params(out / "model.afsr", int(kv["n_encoder_layers"]))
    opt = make_optimizer(cfg, params)
    moments = read_layers(out / "optimizer.afsr")
    half = len(moments) // 2
    opt.m, opt.v = moments[:half], moments[half:]
    opt.t = int(kv["optimizer_t"])
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(kv["rng_state"])
    history = [(int(e), float(a), float(b), float(c)) for e, a, b, c in json.loads(kv["loss_history"])]
    state = TrainState(params, opt, rng, int(kv["epoch"]), int(kv["step"]), history)
    return state, cfg


def read_config_params(out_dir: str | Path) -> tuple[ModelParams, TrainConfig]:
    state, cfg = load_checkpoint(out_dir)
    return state.params, cfg


# --- frozen embeddings ---------------------------------------------------

def probe_graph(cloud: PointCloud, k: int, rng: np.random.Generator, n_points: int = EMBED_POINTS):
    """kNN graph over up to ``n_points`` surface points, no subsampling augmentation."""
    if cloud.faces is not None and len(cloud.faces):
        cloud = sample_surface(cloud, n_points, rng)
    elif len(cloud) > n_points:
        cloud = cloud.take(rng.choice(len(cloud), size=n_points, replace=False))
    return knn_graph(cloud, k)


def embed_dataset(clouds: Sequence[PointCloud], params: ModelParams, cfg: TrainConfig,
                  seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Pre-projection representations (n_clouds x d) and labels (-1 when unlabeled)."""
    rng = np.random.default_rng(seed)
    rows = []
    for c in clouds:
        g = probe_graph(c, cfg.k_neighbors, rng)
        rows.append(encode(g, params.encoder_layers, cfg.pooling).data[0])
    labels = np.array([-1 if c.label is None else c.label for c in clouds], dtype=np.int64)
    emb = np.array(rows).reshape(len(clouds), params.embedding_dim)
    return emb, labels
