"""Linear probing on frozen embeddings, accuracy and part-segmentation mIoU."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from afsrl.encoder import ModelParams, encode_nodes
from afsrl.pointcloud import PointCloud


@dataclass
class ProbeModel:
    weights: np.ndarray  # d x C
    bias: np.ndarray  # C
    regularization: float
    classes: np.ndarray  # label value of each output column
    mean: np.ndarray  # feature standardization, fitted on the training inputs
    scale: np.ndarray

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float64) - self.mean) / self.scale) @ self.weights + self.bias

    def predict(self, x: np.ndarray, allowed: np.ndarray | None = None) -> np.ndarray:
        """Arg-max class; ``allowed`` (n x C bool) masks out columns per sample."""
        s = self.decision_function(x)
        if allowed is not None:
            s = np.where(allowed, s, -np.inf)
        return self.classes[np.argmax(s, axis=1)]


def fit_linear_probe(x: np.ndarray, y: np.ndarray, lam: float = 1e-3, epochs: int = 500,
                     seed: int = 0, lr: float = 0.1) -> ProbeModel:
    """One-vs-rest hinge-loss linear classifier with an L2 penalty.

    Full-batch proximal gradient descent: a subgradient step on the mean
    hinge loss followed by the closed-form shrink for (lam/2)||W||^2, which
    stays stable for any lam.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if lam < 0:
        raise ValueError("regularization must be >= 0")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("linear probe needs at least two classes")
    n, d = x.shape
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    xs = (x - mean) / scale
    target = np.where(y[:, None] == classes[None, :], 1.0, -1.0)
    rng = np.random.default_rng(seed)
    w = 1e-3 * rng.standard_normal((d, classes.size))
    b = np.zeros(classes.size)
    shrink = 1.0 / (1.0 + lr * lam)
    for _ in range(epochs):
        margin = target * (xs @ w + b)
        active = (margin < 1.0) * target  # d(hinge)/d(score) = -target where active
        gw = -(xs.T @ active) / n
        gb = -active.sum(axis=0) / n
        w = (w - lr * gw) * shrink
        b = b - lr * gb
    return ProbeModel(w, b, lam, classes, mean, scale)


def accuracy(model: ProbeModel, x: np.ndarray, y: np.ndarray) -> float:
    return accuracy_from_predictions(model.predict(x), y)


def accuracy_from_predictions(pred: np.ndarray, y: np.ndarray) -> float:
    pred, y = np.asarray(pred), np.asarray(y)
    if y.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(pred == y))


def class_mean_accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    """Per-class recall averaged over the classes present in ``y``."""
    pred, y = np.asarray(pred), np.asarray(y)
    if y.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean([np.mean(pred[y == c] == c) for c in np.unique(y)]))


def confusion_matrix(pred: np.ndarray, y: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y), np.asarray(pred)), 1)
    return cm


def part_ious(pred: Sequence[int], truth: Sequence[int], parts: Sequence[int]) -> np.ndarray:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction length {pred.size} != truth length {truth.size}")
    out = np.empty(len(parts))
    for i, p in enumerate(parts):
        inter = np.sum((pred == p) & (truth == p))
        union = np.sum((pred == p) | (truth == p))
        out[i] = 1.0 if union == 0 else inter / union
    return out


def miou(pred: Sequence[int], truth: Sequence[int], n_parts: int) -> float:
    """Object mIoU over parts 0..n_parts-1; a part absent from both scores 1."""
    return float(part_ious(pred, truth, range(n_parts)).mean())


def dataset_miou(objects: Sequence[tuple[Sequence[int], Sequence[int], Sequence[int]]]) -> float:
    """Mean of per-object mIoU over (pred, truth, part_ids) triples."""
    if not objects:
        raise ValueError("no objects to score")
    return float(np.mean([part_ious(p, t, parts).mean() for p, t, parts in objects]))


@dataclass
class SegmentationResult:
    miou: float
    per_object: np.ndarray


def _part_space(clouds: Sequence[PointCloud]) -> dict[int, np.ndarray]:
    """Global part ids per class: class c owns a contiguous block of ids."""
    n_parts: dict[int, int] = {}
    for c in clouds:
        cls = -1 if c.label is None else c.label
        n_parts[cls] = max(n_parts.get(cls, 0), int(c.part_labels.max()) + 1)
    out, offset = {}, 0
    for cls in sorted(n_parts):
        out[cls] = np.arange(offset, offset + n_parts[cls])
        offset += n_parts[cls]
    return out


def segmentation_probe(train_clouds: Sequence[PointCloud], test_clouds: Sequence[PointCloud],
                       params: ModelParams, k: int, lam: float = 1e-3, epochs: int = 500,
                       seed: int = 0, max_points: int = 1024) -> SegmentationResult:
    """Per-point linear probe on node embeddings; predictions restricted to the object's class parts."""
    from afsrl.trainer import probe_graph

    for c in list(train_clouds) + list(test_clouds):
        if c.part_labels is None:
            raise ValueError("segmentation probe needs per-point part labels")
    space = _part_space(list(train_clouds) + list(test_clouds))
    rng = np.random.default_rng(seed)

    def featurize(clouds):
        feats, labels, owners = [], [], []
        for c in clouds:
            g = probe_graph(c, k, rng, max_points)
            cls = -1 if c.label is None else c.label
            feats.append(encode_nodes(g, params.encoder_layers).data)
            labels.append(space[cls][g.part_labels])
            owners.append(cls)
        return feats, labels, owners

    tr_f, tr_y, _ = featurize(train_clouds)
    te_f, te_y, te_cls = featurize(test_clouds)
    model = fit_linear_probe(np.vstack(tr_f), np.concatenate(tr_y), lam, epochs, seed)
    scores = []
    for f, y, cls in zip(te_f, te_y, te_cls):
        allowed = np.isin(model.classes, space[cls])[None, :].repeat(len(f), axis=0)
        if not allowed.any():
            pred = np.full(len(f), -1)
        else:
            pred = model.predict(f, allowed)
        scores.append(part_ious(pred, y, space[cls]).mean())
    return SegmentationResult(float(np.mean(scores)), np.array(scores))
