"""GCN encoder, MLP projection head, Gaussian weight perturbation, checkpoints."""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from afsrl.augmentation import Graph
from afsrl.errors import CheckpointError, DimensionError
from afsrl.numerics import (
    Tensor,
    add,
    constant,
    matmul,
    max_rows,
    mean_rows,
    relu,
    segment_max,
    segment_mean,
    sparse_matmul,
)

ENCODER_DIMS = (3, 64, 128)
HEAD_DIMS = (128, 128, 64)

MAGIC = b"AFSR"
FORMAT_VERSION = 1


@dataclass
class ModelParams:
    encoder_layers: list[Tensor]
    head_layers: list[Tensor]

    def __post_init__(self):
        layers = self.encoder_layers + self.head_layers
        for a, b in zip(layers[:-1], layers[1:]):
            if a.cols != b.rows:
                raise DimensionError(f"layer dims do not chain: {a.shape} -> {b.shape}")
        if not all(np.all(np.isfinite(w.data)) for w in layers):
            raise ValueError("non-finite weights")

    @property
    def layers(self) -> list[Tensor]:
        return self.encoder_layers + self.head_layers

    @property
    def embedding_dim(self) -> int:
        return self.encoder_layers[-1].cols

    def zero_grad(self) -> None:
        for w in self.layers:
            w.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams([w.detach() for w in self.encoder_layers], [w.detach() for w in self.head_layers])


@dataclass
class PerturbedParams:
    base: ModelParams
    epsilon: float
    perturbed_encoder_layers: list[Tensor]
    sigmas: list[float]


def _check_chain(dims: Sequence[int], what: str) -> None:
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise DimensionError(f"{what} dims must list >= 2 positive widths, got {tuple(dims)}")


def init_params(encoder_dims: Sequence[int] = ENCODER_DIMS, head_dims: Sequence[int] = HEAD_DIMS,
                seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, no biases."""
    _check_chain(encoder_dims, "encoder")
    _check_chain(head_dims, "head")
    if encoder_dims[-1] != head_dims[0]:
        raise DimensionError(f"encoder output {encoder_dims[-1]} != head input {head_dims[0]}")
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    enc = [glorot(a, b) for a, b in zip(encoder_dims[:-1], encoder_dims[1:])]
    head = [glorot(a, b) for a, b in zip(head_dims[:-1], head_dims[1:])]
    return ModelParams(enc, head)


def _propagate(x: Tensor, adj, layers: Sequence[Tensor]) -> Tensor:
    if x.cols != layers[0].rows:
        raise DimensionError(f"node features have {x.cols} columns, first layer expects {layers[0].rows}")
    for w in layers:
        # A (X W) == (A X) W; propagate on whichever side is narrower
        if x.cols < w.cols:
            x = relu(matmul(sparse_matmul(adj, x), w))
        else:
            x = relu(sparse_matmul(adj, matmul(x, w)))
    return x


def encode_nodes(g: Graph, layers: Sequence[Tensor]) -> Tensor:
    """Node embeddings after every GCN layer: X <- ReLU(A_hat X W)."""
    return _propagate(g.node_features, g.adj_csr, layers)


def encode(g: Graph, layers: Sequence[Tensor], pooling: str = "mean") -> Tensor:
    """1 x d graph representation (pooled node embeddings)."""
    x = encode_nodes(g, layers)
    if pooling == "mean":
        return mean_rows(x)
    if pooling == "max":
        return max_rows(x)
    raise ValueError(f"unknown pooling {pooling!r}")


def encode_batch(graphs: Sequence[Graph], layers: Sequence[Tensor], pooling: str = "mean") -> Tensor:
    """N x d representations; the batch runs as one block-diagonal graph."""
    if pooling not in ("mean", "max"):
        raise ValueError(f"unknown pooling {pooling!r}")
    sizes = [g.n_nodes for g in graphs]
    x = constant(np.vstack([g.node_features.data for g in graphs]))
    adj = _block_diag_csr([g.adj_csr for g in graphs])
    nodes = _propagate(x, adj, layers)
    return segment_mean(nodes, sizes) if pooling == "mean" else segment_max(nodes, sizes)


def _block_diag_csr(mats: Sequence[sparse.csr_matrix]) -> sparse.csr_matrix:
    """Square CSR blocks stacked on the diagonal, by offsetting index arrays directly."""
    sizes = np.array([m.shape[0] for m in mats])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    nnz = np.concatenate([[0], np.cumsum([m.nnz for m in mats])])
    indices = np.concatenate([m.indices + o for m, o in zip(mats, offsets[:-1])])
    indptr = np.concatenate([[0]] + [m.indptr[1:] + z for m, z in zip(mats, nnz[:-1])])
    data = np.concatenate([m.data for m in mats])
    n = int(offsets[-1])
    return sparse.csr_matrix((data, indices, indptr), shape=(n, n))


def project(y: Tensor, head_layers: Sequence[Tensor]) -> Tensor:
    """Bias-free MLP with ReLU between layers and a linear output."""
    if y.cols != head_layers[0].rows:
        raise DimensionError(f"representation width {y.cols} != head input {head_layers[0].rows}")
    z = y
    for i, w in enumerate(head_layers):
        z = matmul(z, w)
        if i < len(head_layers) - 1:
            z = relu(z)
    return z


def perturb(params: ModelParams, epsilon: float, rng: np.random.Generator) -> PerturbedParams:
    """theta'_l = theta_l + epsilon * eta_l, eta_l ~ N(0, std(theta_l)^2), encoder layers only.

    Noise is drawn even at epsilon = 0 so the rng stream does not depend on
    epsilon. The result stays differentiable with respect to the base weights.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    out, sigmas = [], []
    for w in params.encoder_layers:
        sigma = float(np.std(w.data, ddof=1)) if w.data.size > 1 else 0.0
        eta = rng.normal(0.0, 1.0, size=w.shape) * sigma
        out.append(add(w, constant(epsilon * eta)))
        sigmas.append(sigma)
    return PerturbedParams(params, float(epsilon), out, sigmas)


def offset_params(params: ModelParams, epsilon: float, offsets: Sequence[np.ndarray]) -> PerturbedParams:
    """Encoder layers shifted by fixed, already scaled offsets (noise frozen for gradient checks)."""
    if len(offsets) != len(params.encoder_layers):
        raise DimensionError(f"{len(offsets)} offsets for {len(params.encoder_layers)} encoder layers")
    out = []
    for w, off in zip(params.encoder_layers, offsets):
        off = np.asarray(off, dtype=np.float64)
        if off.shape != w.shape:
            raise DimensionError(f"offset shape {off.shape} != layer shape {w.shape}")
        out.append(add(w, constant(off)))
    return PerturbedParams(params, float(epsilon), out, [float("nan")] * len(out))


# --- checkpoint files ----------------------------------------------------

def write_layers(arrays: Sequence[np.ndarray], path: str | Path) -> None:
    """Little-endian: magic, u32 version, u32 count, then per layer u32 rows, u32 cols, f64 data.

    Written to a temp file in the same directory and renamed into place.
    """
    path = Path(path)
    buf = bytearray(MAGIC)
    buf += struct.pack("<II", FORMAT_VERSION, len(arrays))
    for a in arrays:
        a = np.asarray(a, dtype="<f8")
        if a.ndim != 2:
            raise CheckpointError(f"layers must be 2-D, got {a.shape}")
        buf += struct.pack("<II", *a.shape)
        buf += np.ascontiguousarray(a).tobytes()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_layers(path: str | Path) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos, out = 12, []
    for i in range(count):
        if pos + 8 > len(raw):
            raise CheckpointError(f"{path}: truncated at layer {i}")
        rows, cols = struct.unpack_from("<II", raw, pos)
        pos += 8
        nbytes = rows * cols * 8
        if pos + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data in layer {i}")
        out.append(np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float64))
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def save_params(params: ModelParams, path: str | Path) -> None:
    write_layers([w.data for w in params.layers], path)


def load_params(path: str | Path, n_encoder_layers: int | None = None) -> ModelParams:
    """Read a checkpoint; without ``n_encoder_layers`` the last two layers are taken as the head."""
    arrays = read_layers(path)
    split = len(arrays) - 2 if n_encoder_layers is None else n_encoder_layers
    if not 1 <= split < len(arrays):
        raise CheckpointError(f"cannot split {len(arrays)} layers at {split}")
    return ModelParams([Tensor(a) for a in arrays[:split]], [Tensor(a) for a in arrays[split:]])
