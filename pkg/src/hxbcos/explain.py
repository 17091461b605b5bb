"""Explanations from the exact linear collapse of a B-cos network.

Freezing every ``|cos|^(B-1)`` factor and every MaxOut selection at their
forward values turns the network into a linear map of its input. The gradient
of an output unit under that freezing is therefore the corresponding row of
the collapsed matrix, and ``sum(row * x)`` reproduces the output exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .autograd import Tensor, no_grad
from .models import BcosNet

# ops that are linear in the input when at most one operand depends on it
_LINEAR_OPS = {"add", "sub", "reshape", "getitem", "concat", "sum", "mean", "cast", "conv2d",
               "kronecker"}
# selection of one input element: linear once the selection is frozen
_SELECTION_OPS = {"max_over_axis"}


class NotDynamicLinearError(TypeError):
    """The computation from input to output is not dynamic-linear."""


def check_dynamic_linear(output: Tensor, inp: Tensor) -> None:
    """Reject graphs containing an op that is nonlinear in ``inp``.

    Products are allowed when only one factor depends on ``inp`` (the other is
    a parameter or a frozen factor); quotients when only the numerator does.
    """
    order = output._topo()
    depends = {id(inp)}
    for node in order:
        hits = [id(p) in depends for p in node._parents]
        if not any(hits):
            continue
        depends.add(id(node))
        op = node.op
        if op in _LINEAR_OPS or op in _SELECTION_OPS:
            if op in ("conv2d", "kronecker") and all(hits):
                raise NotDynamicLinearError(f"{op} with both operands input-dependent")
            continue
        if op == "mul" and sum(hits) == 1:
            continue
        if op == "div" and hits == [True, False]:
            continue
        raise NotDynamicLinearError(f"op {op!r} is not dynamic-linear in the input")


@dataclass
class LinearMap:
    """Rows of the collapsed linear map for selected output units.

    ``rows[k]`` has the shape of the input sample; ``outputs[k]`` is the
    network's value for ``targets[k]``.
    """

    rows: np.ndarray
    targets: list
    x: np.ndarray
    outputs: np.ndarray

    def contributions(self) -> np.ndarray:
        return self.rows * self.x[None]

    def pixel_maps(self) -> np.ndarray:
        return self.contributions().sum(axis=1)

    def reconstructed(self) -> np.ndarray:
        return self.contributions().reshape(len(self.targets), -1).sum(axis=1)

    def completeness_error(self) -> np.ndarray:
        return np.abs(self.outputs - self.reconstructed()) / (np.abs(self.outputs) + 1e-8)


def _require_bcos(model) -> None:
    if not isinstance(model, BcosNet):
        raise NotDynamicLinearError(f"{type(model).__name__} is not a B-cos network")


def _input_tensor(x) -> Tensor:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError("explanations take a single sample")
        x = x[0]
    return Tensor(x[None], requires_grad=True)


def _rows_from(output: Tensor, xt: Tensor, seeds) -> np.ndarray:
    rows = []
    for seed in seeds:
        xt.grad = None
        output.backward(seed)
        rows.append(xt.grad[0].copy())
    return np.stack(rows)


def collapse_rows(model: BcosNet, x, targets=None) -> LinearMap:
    """Rows of ``H_{1->N}(x)`` for the requested classes (all by default)."""
    _require_bcos(model)
    xt = _input_tensor(x)
    logits = model(xt, frozen=True)
    check_dynamic_linear(logits, xt)
    k = model.config.num_classes
    targets = list(range(k)) if targets is None else [int(t) for t in targets]
    for t in targets:
        if not 0 <= t < k:
            raise ValueError(f"class {t} out of range [0, {k})")
    seeds = []
    for t in targets:
        s = np.zeros(logits.shape)
        s[0, t] = 1
        seeds.append(s)
    rows = _rows_from(logits, xt, seeds)
    return LinearMap(rows, targets, xt.data[0], logits.data[0, targets].copy())


@dataclass
class ContributionMap:
    row: np.ndarray  # [C, H, W], partial collapse row
    contributions: np.ndarray  # [C, H, W], row * x
    pixel_map: np.ndarray  # [H, W], channel sum
    activation: float
    layer: int
    neuron: int
    location: tuple[int, int] | None

    def completeness_error(self) -> float:
        return abs(self.activation - self.pixel_map.sum()) / (abs(self.activation) + 1e-8)


def _check_unit(model: BcosNet, outputs, layer, neuron, location):
    n_layers = len(model.layers)
    if not 0 <= layer < n_layers:
        raise IndexError(f"layer {layer} out of range; valid layers are 0..{n_layers - 1}")
    _, c, h, w = outputs[layer].shape
    if not 0 <= neuron < c:
        raise IndexError(f"neuron {neuron} out of range; layer {layer} has {c} channels")
    if location is not None:
        y, xx = location
        if not (0 <= y < h and 0 <= xx < w):
            raise IndexError(f"location {location} outside layer {layer} map of size {(h, w)}")


def contribution_map(model: BcosNet, x, layer: int, neuron: int, location=None) -> ContributionMap:
    """Input contributions to one unit of ``model.layers[layer]``.

    ``location`` is a ``(y, x)`` position in that layer's output map; ``None``
    explains the spatial mean of the channel (for the last layer, the logit).
    """
    _require_bcos(model)
    xt = _input_tensor(x)
    _, outputs, _ = model.trace(xt, frozen=True)
    _check_unit(model, outputs, layer, neuron, location)
    out = outputs[layer]
    check_dynamic_linear(out, xt)
    seed = np.zeros(out.shape)
    if location is None:
        seed[0, neuron] = 1.0 / (out.shape[2] * out.shape[3])
        activation = float(out.data[0, neuron].mean(dtype=np.float64))
    else:
        seed[(0, neuron) + tuple(location)] = 1.0
        activation = float(out.data[(0, neuron) + tuple(location)])
    row = _rows_from(out, xt, [seed])[0]
    contrib = row * xt.data[0]
    return ContributionMap(row, contrib, contrib.sum(axis=0), activation, layer, neuron,
                           None if location is None else tuple(location))


@dataclass
class Activation:
    value: float
    sample_index: int
    source_id: str
    location: tuple[int, int]


def top_activating(model: BcosNet, manifest, layer: int, neuron: int, k: int = 3,
                   split: str = "test", batch_size: int = 32) -> list[Activation]:
    """The ``k`` samples whose maximal activation of (layer, neuron) is highest.

    Each sample contributes its single best location. Ties are ordered by
    sample index.
    """
    channels = model.config.input_channels
    from .data import encode_batch

    indices = {"test": manifest.test_idx, "train": manifest.train_idx,
               "all": list(range(len(manifest.samples)))}[split]
    found = []
    with no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            x = Tensor(encode_batch([manifest.samples[i].image for i in chunk], channels).astype(np.float64))
            _, outputs, _ = model.trace(x)
            if start == 0:
                _check_unit(model, outputs, layer, neuron, None)
            maps = outputs[layer].data[:, neuron]
            for j, idx in enumerate(chunk):
                flat = int(np.argmax(maps[j]))
                y, xx = divmod(flat, maps.shape[2])
                found.append(Activation(float(maps[j, y, xx]), idx, manifest.samples[idx].source_id, (y, xx)))
    found.sort(key=lambda a: (-a.value, a.sample_index))
    return found[:k]


# colour decoding and rendering ---------------------------------------------------------


@dataclass
class ExplanationImage:
    rgb: np.ndarray  # [H, W, 3] in [0, 1]
    alpha: np.ndarray  # [H, W] in [0, 1]
    percentile: float

    def rgba8(self) -> np.ndarray:
        stacked = np.concatenate([self.rgb, self.alpha[..., None]], axis=-1)
        return np.clip(np.floor(stacked * 255 + 0.5), 0, 255).astype(np.uint8)


def decode_color(row: np.ndarray, x: np.ndarray | None = None, percentile: float = 99.9) -> ExplanationImage:
    """Colour and opacity of one explanation row laid out as [r, g, b, 1-r, 1-g, 1-b].

    Each colour channel is ``p_c / (p_c + p_{c+3})`` over the positive parts of
    the row (0.5 when both vanish). Opacity is the per-pixel L2 norm of the
    row divided by its ``percentile``-th value, clipped to [0, 1]. When ``x``
    is given, pixels whose total contribution is not positive are transparent.
    """
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 3 or row.shape[0] not in (6, 8):
        raise ValueError(f"expected a [6, H, W] (or padded [8, H, W]) row, got {row.shape}")
    full = row
    row = row[:6]
    pos = np.maximum(row, 0)
    num, den = pos[:3], pos[:3] + pos[3:]
    rgb = np.where(den > 0, num / np.where(den > 0, den, 1), 0.5)
    alpha = np.sqrt((row ** 2).sum(axis=0))
    if x is not None:
        contrib = (full * np.asarray(x, dtype=np.float64)).sum(axis=0)
        alpha = np.where(contrib > 0, alpha, 0)
    cutoff = np.percentile(alpha, percentile)
    alpha = np.clip(alpha / cutoff, 0, 1) if cutoff > 0 else np.zeros_like(alpha)
    return ExplanationImage(rgb.transpose(1, 2, 0), alpha, percentile)


def render_png(img: ExplanationImage, path) -> None:
    """Write an 8-bit RGBA PNG whose alpha channel is the attribution mask."""
    Image.fromarray(img.rgba8(), "RGBA").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGBA")).copy()


def write_sidecar(path, target: int, logit: float, completeness_error: float, percentile: float) -> None:
    payload = {"class": int(target), "logit": float(logit),
               "completeness_error": float(completeness_error), "percentile": float(percentile)}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")
