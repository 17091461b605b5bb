"""B-cos convolution layers over dense, PH and quaternion-like weights.

For a unit-norm weight row ``w`` and an input patch ``h`` the layer computes
``(w . h) * |cos(h, w)|**(B - 1)``, i.e. ``||h|| |cos|^B sgn(cos)``. The
cosine is the convolution output divided by the patch norm, with padding zeros
counted inside the patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import ShapeError, Tensor, conv2d, detach, maximum, patch_norms
from .hypercomplex import (
    HAMILTON_FIXED,
    LEARNABLE_ALGEBRA,
    PhWeightSpec,
    assemble_ph_weight,
    dense_param_count,
)

EPSILON = 1e-12


def row_normalize(weight: Tensor, epsilon: float = EPSILON) -> Tensor:
    """Scale every output-channel slice to unit L2 norm; zero rows stay zero."""
    norms = weight.l2_norm(axis=(1, 2, 3), keepdims=True)
    return weight / maximum(norms, epsilon)


def maxout(h: Tensor, units: int) -> Tensor:
    """Max over each group of ``units`` consecutive channels."""
    if units == 1:
        return h
    n, c, hh, ww = h.shape
    if c % units:
        raise ShapeError(f"maxout: {c} channels not divisible by {units} units")
    return h.reshape(n, c // units, units, hh, ww).max(axis=2)


class BcosConv2d:
    """Bias-free B-cos convolution, optionally followed by MaxOut.

    ``variant`` selects how the weight is built: ``"real"`` (a dense tensor),
    ``"ph"`` (Kronecker sum with learnable algebra, parameter ``n``) or
    ``"quaternion"`` (Kronecker sum with the fixed Hamilton algebra).
    ``out_channels`` counts units after MaxOut; the convolution itself has
    ``out_channels * maxout_units`` channels.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None,
                 b=2.0, maxout_units=1, variant="real", n=1, epsilon=EPSILON, rng=None):
        if b < 1:
            raise ValueError(f"B must be >= 1, got {b}")
        if maxout_units < 1:
            raise ValueError("maxout_units must be >= 1")
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else tuple(kernel_size)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = (kh, kw)
        self.stride = stride
        self.padding = kh // 2 if padding is None else padding
        self.b = float(b)
        self.maxout_units = maxout_units
        self.variant = variant
        self.epsilon = epsilon
        conv_out = out_channels * maxout_units
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        if variant == "real":
            self.n = 1
            self.spec = None
            std = np.sqrt(2.0 / (in_channels * kh * kw))
            self.weight = Tensor(rng.normal(0.0, std, (conv_out, in_channels, kh, kw)).astype(np.float32),
                                 requires_grad=True)
        elif variant in ("ph", "quaternion"):
            mode = HAMILTON_FIXED if variant == "quaternion" else LEARNABLE_ALGEBRA
            self.n = 4 if variant == "quaternion" else n
            self.spec = PhWeightSpec(self.n, conv_out, in_channels, (kh, kw), mode=mode, rng=rng)
            self.weight = None
        else:
            raise ValueError(f"unknown variant {variant!r}")

    # parameters ------------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        if self.spec is None:
            return {"weight": self.weight}
        return dict(self.spec.parameters())

    def param_breakdown(self) -> dict[str, int]:
        if self.spec is None:
            count = self.weight.size
            return {"filters": count, "algebra": 0, "total": count}
        return self.spec.param_count()

    def dense_equivalent_count(self) -> int:
        kh, kw = self.kernel_size
        return dense_param_count(self.out_channels * self.maxout_units, self.in_channels, kh, kw)

    # forward -----------------------------------------------------------------

    def assembled_weight(self) -> Tensor:
        return self.weight if self.spec is None else assemble_ph_weight(self.spec)

    def normalized_weight(self) -> Tensor:
        return row_normalize(self.assembled_weight(), self.epsilon)

    def conv_output(self, h: Tensor, frozen: bool = False) -> Tensor:
        """B-cos output before MaxOut, shape ``[N, out*units, H', W']``.

        With ``frozen`` the ``|cos|^(B-1)`` factor is detached so the result
        is linear in ``h``.
        """
        if h.ndim != 4 or h.shape[1] != self.in_channels:
            raise ShapeError(f"expected input [N, {self.in_channels}, H, W], got {h.shape}")
        w = self.normalized_weight()
        if w.dtype != h.dtype:
            w = w.astype(h.dtype)
        s = conv2d(h, w, self.stride, self.padding)
        if self.b == 1.0:
            return s
        kh, kw = self.kernel_size
        norms = patch_norms(h, kh, kw, self.stride, self.padding)
        cos = s / maximum(norms, self.epsilon)
        scale = cos.abs() ** (self.b - 1.0)
        if frozen:
            scale = detach(scale)
        return s * scale

    def __call__(self, h: Tensor, frozen: bool = False) -> Tensor:
        return maxout(self.conv_output(h, frozen), self.maxout_units)

    forward = __call__

    def __repr__(self) -> str:
        return (f"BcosConv2d({self.in_channels}, {self.out_channels}, k={self.kernel_size}, "
                f"stride={self.stride}, B={self.b:g}, maxout={self.maxout_units}, "
                f"variant={self.variant}, n={self.n})")


def bcos_forward(layer: BcosConv2d, h: Tensor) -> Tensor:
    return layer(h)


@dataclass
class DynamicMatrix:
    """The input-dependent linear operator a B-cos layer applies to one input.

    ``weight`` holds the normalized rows, ``scale`` the per-output
    ``|cos|^(B-1)`` factors and ``selection`` the MaxOut winners
    (index within each group), all evaluated at the input the operator was
    extracted for.
    """

    weight: np.ndarray
    scale: np.ndarray
    selection: np.ndarray | None
    stride: int
    padding: int
    units: int
    in_shape: tuple[int, ...]

    def apply(self, h) -> Tensor:
        h = h if isinstance(h, Tensor) else Tensor(h)
        w = Tensor(self.weight.astype(h.dtype))
        s = conv2d(h, w, self.stride, self.padding) * Tensor(self.scale.astype(h.dtype))
        if self.selection is None:
            return s
        n, c, hh, ww = s.shape
        grouped = s.reshape(n, c // self.units, self.units, hh, ww)
        idx = self.selection
        nn_, cc, yy, xx = np.meshgrid(*(np.arange(e) for e in idx.shape), indexing="ij")
        return grouped[nn_, cc, idx, yy, xx]

    def dense(self, sample: int = 0) -> np.ndarray:
        """Materialize the operator for one sample as ``[out_size, in_size]``."""
        _, cin, h, w = self.in_shape
        cconv, _, kh, kw = self.weight.shape
        _, _, ho, wo = self.scale.shape
        p, st = self.padding, self.stride
        full = np.zeros((cconv, ho, wo, cin, h, w))
        for co in range(cconv):
            for y in range(ho):
                for x in range(wo):
                    for i in range(kh):
                        for j in range(kw):
                            yi, xj = y * st + i - p, x * st + j - p
                            if 0 <= yi < h and 0 <= xj < w:
                                full[co, y, x, :, yi, xj] += self.weight[co, :, i, j]
                    full[co, y, x] *= self.scale[sample, co, y, x]
        full = full.reshape(cconv, ho, wo, -1)
        if self.selection is not None:
            grouped = full.reshape(cconv // self.units, self.units, ho, wo, -1)
            sel = self.selection[sample]
            c_idx, y_idx, x_idx = np.meshgrid(*(np.arange(e) for e in sel.shape), indexing="ij")
            full = grouped[c_idx, sel, y_idx, x_idx]
        return full.reshape(-1, cin * h * w)


def dynamic_matrix(layer: BcosConv2d, h) -> DynamicMatrix:
    """Extract ``H(h)`` for ``layer``: applying it to ``h`` reproduces ``layer(h)``."""
    from .autograd import no_grad

    h = h if isinstance(h, Tensor) else Tensor(h)
    with no_grad():
        w = layer.normalized_weight().data.astype(np.float64)
        h64 = Tensor(h.data.astype(np.float64))
        s = conv2d(h64, Tensor(w), layer.stride, layer.padding).data
        if layer.b == 1.0:
            scale = np.ones_like(s)
        else:
            kh, kw = layer.kernel_size
            norms = patch_norms(h64, kh, kw, layer.stride, layer.padding).data
            scale = np.abs(s / np.maximum(norms, layer.epsilon)) ** (layer.b - 1.0)
    selection = None
    if layer.maxout_units > 1:
        n, c, hh, ww = s.shape
        out = (s * scale).reshape(n, c // layer.maxout_units, layer.maxout_units, hh, ww)
        selection = np.argmax(out, axis=2)
    return DynamicMatrix(w, scale, selection, layer.stride, layer.padding,
                         layer.maxout_units, tuple(h.shape))
