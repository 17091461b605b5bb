"""Accuracy, the 2x2 grid pointing game and a Grad-CAM baseline."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, no_grad
from .data import DatasetManifest, encode_batch, resize_bilinear
from .explain import collapse_rows
from .models import BcosNet

log = logging.getLogger(__name__)

METHODS = {"inherent": "phbcos_inherent", "gradcam": "gradcam", "uniform": "uniform_baseline"}
GRID = 2


def predict_logits(model: BcosNet, samples, batch_size: int = 64, dtype=np.float64) -> np.ndarray:
    channels = model.config.input_channels
    out = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            x = Tensor(encode_batch([s.image for s in chunk], channels).astype(dtype))
            out.append(model(x).data.astype(np.float64))
    return np.concatenate(out) if out else np.zeros((0, model.config.num_classes))


def accuracy(model: BcosNet, manifest: DatasetManifest, split: str = "test") -> float:
    """Fraction of ``split`` samples whose argmax logit is the label (ties go to the lowest index)."""
    samples = manifest.split(split)
    if not samples:
        return float("nan")
    logits = predict_logits(model, samples)
    labels = np.array([s.label for s in samples])
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# grids ---------------------------------------------------------------------------------


@dataclass
class Grid:
    image: np.ndarray  # [3, 2S, 2S]
    classes: tuple[int, ...]  # tile classes in row-major quadrant order
    sample_indices: tuple[int, ...]

    @property
    def tile_size(self) -> int:
        return self.image.shape[-1] // GRID

    def quadrant(self, q: int) -> tuple[slice, slice]:
        s = self.tile_size
        r, c = divmod(q, GRID)
        return slice(r * s, (r + 1) * s), slice(c * s, (c + 1) * s)


def build_grids(model: BcosNet, manifest: DatasetManifest, num_grids: int, seed: int = 0,
                pool_size: int = 20, split: str = "test") -> list[Grid]:
    """2x2 grids of distinct-class tiles drawn from the most confident correct predictions.

    Per class, the ``pool_size`` correctly classified samples with the highest
    sigmoid confidence on their label form the pool; each grid picks four
    classes, one pool member per class, and a random quadrant order.
    """
    indices = {"test": manifest.test_idx, "train": manifest.train_idx}[split]
    samples = [manifest.samples[i] for i in indices]
    logits = predict_logits(model, samples)
    labels = np.array([s.label for s in samples], dtype=int)
    correct = np.argmax(logits, axis=1) == labels
    # sigmoid is monotone, so rank on the logit itself; sigmoid rounds to 1.0 past ~37
    conf = logits[np.arange(len(samples)), labels]
    pools = {}
    for k in range(manifest.num_classes):
        mine = np.flatnonzero(correct & (labels == k))
        ranked = mine[np.lexsort((mine, -conf[mine]))]
        if len(ranked):
            pools[k] = [indices[j] for j in ranked[:pool_size]]
    cells = GRID * GRID
    if len(pools) < cells:
        counts = {manifest.class_names[k]: len(pools.get(k, [])) for k in range(manifest.num_classes)}
        raise ValueError(f"need {cells} classes with correctly classified samples, have {counts}")

    rng = np.random.default_rng(seed)
    eligible = sorted(pools)
    grids = []
    for _ in range(num_grids):
        chosen = rng.choice(eligible, size=cells, replace=False)
        picks = [pools[int(k)][int(rng.integers(len(pools[int(k)])))] for k in chosen]
        tiles = [manifest.samples[i].image for i in picks]
        rows = [np.concatenate(tiles[r * GRID:(r + 1) * GRID], axis=2) for r in range(GRID)]
        grids.append(Grid(np.concatenate(rows, axis=1), tuple(int(k) for k in chosen), tuple(picks)))
    return grids


# attribution maps ----------------------------------------------------------------------


def grad_cam(model: BcosNet, x, k: int) -> np.ndarray:
    """Grad-CAM for class ``k`` on the feature map feeding the classifier, upsampled to the input."""
    return grad_cam_multi(model, x, [k])[0]


def grad_cam_multi(model: BcosNet, x, classes) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    logits, _, features = model.trace(Tensor(x))
    maps = []
    for k in classes:
        seed = np.zeros(logits.shape)
        seed[0, k] = 1
        features.grad = None
        logits.backward(seed)
        grad = features.grad if features.grad is not None else np.zeros(features.shape)
        weights = grad[0].mean(axis=(1, 2))
        cam = np.maximum(np.tensordot(weights, features.data[0], axes=1), 0)
        maps.append(resize_bilinear(cam, x.shape[-2:]))
    model.zero_grad()
    return np.stack(maps)


def _attributions(model: BcosNet, grid: Grid, method: str) -> np.ndarray:
    h, w = grid.image.shape[-2:]
    if method == "uniform":
        return np.ones((len(grid.classes), h, w))
    x = encode_batch([grid.image], model.config.input_channels).astype(np.float64)
    if method == "inherent":
        return collapse_rows(model, x, targets=grid.classes).pixel_maps()
    if method == "gradcam":
        return grad_cam_multi(model, x, grid.classes)
    raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")


def quadrant_share(attribution: np.ndarray, grid: Grid, q: int) -> tuple[float, bool]:
    """Positive attribution inside quadrant ``q`` over the total; 0.25 and flagged when the total is 0."""
    pos = np.maximum(attribution, 0)
    total = pos.sum()
    if not total > 0:
        return 1.0 / (GRID * GRID), True
    ys, xs = grid.quadrant(q)
    return float(pos[ys, xs].sum() / total), False


@dataclass
class GridGameReport:
    method: str
    num_grids: int
    per_grid: list[list[float]]
    flagged: list[tuple[int, int]] = field(default_factory=list)
    grid_size: int = GRID

    @property
    def localization_accuracy(self) -> float:
        scores = [s for grid in self.per_grid for s in grid]
        return float(np.mean(scores)) if scores else float("nan")

    def to_dict(self) -> dict:
        return {"method": self.method, "num_grids": self.num_grids,
                "localization_accuracy": self.localization_accuracy,
                "per_grid": self.per_grid, "flagged": [list(f) for f in self.flagged]}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def pointing_game(model: BcosNet, grids: list[Grid], method: str) -> GridGameReport:
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    per_grid, flagged = [], []
    for g, grid in enumerate(grids):
        maps = _attributions(model, grid, method)
        scores = []
        for q, attribution in enumerate(maps):
            score, fallback = quadrant_share(attribution, grid, q)
            if fallback:
                log.warning("grid %d tile %d: no positive attribution, scored 0.25", g, q)
                flagged.append((g, q))
            scores.append(score)
        per_grid.append(scores)
    return GridGameReport(METHODS[method], len(grids), per_grid, flagged)
