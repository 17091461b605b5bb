"""Desk-scale B-cos networks: real, PH(n) and quaternion-like variants.

A network is a stack of 3x3 B-cos conv stages (each followed by MaxOut),
optionally with dense concatenation of a stage's input onto its output,
then a 1x1 B-cos classifier conv and a global average pool. There are no
biases, normalization layers or other nonlinearities, so every logit is an
input-dependent linear function of the input.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import ShapeError, Tensor, concat
from .bcos import BcosConv2d

VARIANTS = ("real", "ph", "quaternion")

DESK_WIDTHS = (24, 48, 48, 96, 96, 96)
DESK_STRIDES = (1, 2, 1, 2, 1, 1)

CHECKPOINT_MAGIC = b"HXB1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    variant: str = "ph"
    n: int = 3
    b: float = 2.0
    maxout_units: int = 2
    stage_widths: tuple[int, ...] = DESK_WIDTHS
    stage_strides: tuple[int, ...] = DESK_STRIDES
    kernel_size: int = 3
    dense_connectivity: bool = False
    input_channels: int = 6
    num_classes: int = 4
    image_size: int = 64
    gain_exponent: float = 0.5
    seed: int = 0
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.stage_strides = tuple(int(s) for s in self.stage_strides)
        self.class_names = tuple(self.class_names)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant == "quaternion":
            self.n = 4
        elif self.variant == "real":
            self.n = 1
        if len(self.stage_strides) != len(self.stage_widths):
            raise ValueError("stage_widths and stage_strides must have equal length")
        if self.gain_exponent < 0:
            raise ValueError("gain_exponent must be non-negative")

    @property
    def domain(self) -> int:
        return self.n

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line:
                continue
            key, _, raw = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kind = types[key]
            if kind == "bool":
                kwargs[key] = raw == "true"
            elif kind == "float":
                kwargs[key] = float(raw)
            elif kind == "int":
                kwargs[key] = int(raw)
            elif kind == "tuple[int, ...]":
                kwargs[key] = tuple(int(v) for v in raw.split(",")) if raw else ()
            elif kind == "tuple[str, ...]":
                kwargs[key] = tuple(raw.split(",")) if raw else ()
            else:
                kwargs[key] = raw
        return cls(**kwargs)


class BcosNet:
    """Composition of B-cos stages, classifier conv and average pooling."""

    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        n = config.n
        if config.input_channels % n:
            raise ValueError(f"input_channels={config.input_channels} not divisible by n={n}")
        self.stages: list[BcosConv2d] = []
        cin = config.input_channels
        for i, (width, stride) in enumerate(zip(config.stage_widths, config.stage_strides)):
            if width % n:
                raise ValueError(f"stage {i} width {width} not divisible by n={n}")
            self.stages.append(BcosConv2d(
                cin, width, config.kernel_size, stride=stride, b=config.b,
                maxout_units=config.maxout_units, variant=config.variant, n=n, rng=rng))
            cin = cin + width if self._concatenates(i) else width
        # num_classes is generally not divisible by n, so the head is a dense 1x1 unit.
        self.head = BcosConv2d(cin, config.num_classes, 1, stride=1, padding=0, b=config.b,
                               maxout_units=1, variant="real", rng=rng)

    def _concatenates(self, i: int) -> bool:
        return self.config.dense_connectivity and self.config.stage_strides[i] == 1

    @property
    def logit_scale(self) -> float:
        """Fixed positive factor applied to the pooled class map.

        A unit with ``|cos|`` near ``1/sqrt(fan_in)`` shrinks its input by about
        that factor, so a freshly initialised deep stack emits vanishing logits.
        Scaling each layer by ``fan_in ** gain_exponent`` compensates; since
        every layer is positively 1-homogeneous the per-layer gains fold into
        this single constant, which keeps each logit exactly ``W(x) x``.
        """
        fan_in = np.prod([float(layer.in_channels * layer.kernel_size[0] * layer.kernel_size[1])
                          for layer in self.layers])
        return float(fan_in ** self.config.gain_exponent)

    @property
    def layers(self) -> list[BcosConv2d]:
        return [*self.stages, self.head]

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, stage in enumerate(self.stages):
            for name, p in stage.parameters().items():
                params[f"stages.{i}.{name}"] = p
        for name, p in self.head.parameters().items():
            params[f"head.{name}"] = p
        return params

    def param_breakdown(self) -> dict:
        per_layer = [layer.param_breakdown() for layer in self.layers]
        totals = {key: sum(p[key] for p in per_layer) for key in ("filters", "algebra", "total")}
        totals["per_layer"] = per_layer
        return totals

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    # forward -----------------------------------------------------------------

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"model expects [N, {self.config.input_channels}, H, W] input, got {x.shape}")

    def trace(self, x, frozen: bool = False) -> tuple[Tensor, list[Tensor], Tensor]:
        """Run the network, returning ``(logits, layer_outputs, features)``.

        ``layer_outputs[l]`` is the output of ``self.layers[l]`` (for stages,
        after MaxOut and before any concatenation). ``features`` is the map fed
        into the classifier conv.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        outputs = []
        h = x
        for i, stage in enumerate(self.stages):
            out = stage(h, frozen=frozen)
            outputs.append(out)
            h = concat([h, out], axis=1) if self._concatenates(i) else out
        features = h
        class_map = self.head(features, frozen=frozen)
        outputs.append(class_map)
        logits = class_map.mean(axis=(2, 3)) * self.logit_scale
        return logits, outputs, features

    def forward(self, x, frozen: bool = False, return_features: bool = False):
        logits, _, features = self.trace(x, frozen)
        return (logits, features) if return_features else logits

    __call__ = forward

    # persistence -------------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(self, path)


def build_model(config: ModelConfig) -> BcosNet:
    return BcosNet(config)


def forward(model: BcosNet, x) -> Tensor:
    return model(x)


# checkpoint format ---------------------------------------------------------------
#
# magic "HXB1" | u16 version | u32 config length | config utf-8 (key=value lines)
# then per parameter: u32 name length | name utf-8 | u32 rank | u32 extents... |
# float32 little-endian values. All integers little-endian.


def checkpoint_bytes(model: BcosNet) -> bytes:
    config = model.config.to_text().encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION),
             struct.pack("<I", len(config)), config]
    for name, p in model.parameters().items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: BcosNet, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> BcosNet:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an HXB1 checkpoint")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", buf, 6)
    pos = 10
    config = ModelConfig.from_text(buf[pos:pos + clen].decode("utf-8"))
    pos += clen
    model = BcosNet(config)
    params = model.parameters()
    seen = set()
    while pos < len(buf):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32)
        pos += 4 * count
        if name not in params:
            raise ValueError(f"{path}: unexpected parameter {name!r}")
        target = params[name]
        if tuple(shape) != target.shape:
            raise ValueError(f"{path}: parameter {name!r} has shape {shape}, expected {target.shape}")
        target.data = values.reshape(shape)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ValueError(f"{path}: missing parameters {sorted(missing)}")
    return model
