"""Parameterized hypercomplex (PH) and quaternion-like convolution weights.

A PH weight is a sum of Kronecker products ``sum_i A_i (x) F_i`` where the
``A_i`` are ``n x n`` algebra matrices and the ``F_i`` filter banks of shape
``[Cout/n, Cin/n, kh, kw]``. Fixing the ``A_i`` to the Hamilton rules yields
the quaternion-like weight layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autograd import ShapeError, Tensor

LEARNABLE_ALGEBRA = "learnable_algebra"
HAMILTON_FIXED = "hamilton_fixed"


class Quaternion(NamedTuple):
    q0: float
    q1: float
    q2: float
    q3: float


def hamilton_product(p, q) -> Quaternion:
    """Non-commutative quaternion product ``p x q``."""
    p0, p1, p2, p3 = p
    q0, q1, q2, q3 = q
    return Quaternion(
        p0 * q0 - p1 * q1 - p2 * q2 - p3 * q3,
        p0 * q1 + p1 * q0 + p2 * q3 - p3 * q2,
        p0 * q2 - p1 * q3 + p2 * q0 + p3 * q1,
        p0 * q3 + p1 * q2 - p2 * q1 + p3 * q0,
    )


def hamilton_algebra_matrices() -> np.ndarray:
    """The four fixed 4x4 algebra matrices, stacked as ``[4, 4, 4]``."""
    a1 = np.eye(4)
    a2 = np.array([[0, -1, 0, 0],
                   [1, 0, 0, 0],
                   [0, 0, 0, -1],
                   [0, 0, 1, 0]], dtype=float)
    a3 = np.array([[0, 0, -1, 0],
                   [0, 0, 0, 1],
                   [1, 0, 0, 0],
                   [0, -1, 0, 0]], dtype=float)
    a4 = np.array([[0, 0, 0, -1],
                   [0, 0, -1, 0],
                   [0, 1, 0, 0],
                   [1, 0, 0, 0]], dtype=float)
    return np.stack([a1, a2, a3, a4]).astype(np.float32)


def kronecker(a: Tensor, f: Tensor) -> Tensor:
    """Kronecker product over the two leading axes; trailing axes carried through.

    Block ``(i, j)`` of the result (rows ``i*r:(i+1)*r``, cols ``j*s:(j+1)*s``)
    is ``a[i, j] * f``.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    f = f if isinstance(f, Tensor) else Tensor(f)
    if a.ndim != 2 or f.ndim < 2:
        raise ShapeError(f"kronecker expects 2-D A and >=2-D F, got {a.shape}, {f.shape}")
    p, q = a.shape
    r, s = f.shape[:2]
    rest = f.shape[2:]
    dtype = np.result_type(a.data, f.data)
    # [p, r, q, s, ...] then merge (p, r) and (q, s)
    blocks = np.einsum("ij,ab...->iajb...", a.data.astype(dtype), f.data.astype(dtype))
    out = blocks.reshape((p * r, q * s) + rest)

    def backward(g):
        gb = g.reshape(p, r, q, s, -1)
        ga = gf = None
        if a.requires_grad:
            ga = np.einsum("iajbk,abk->ij", gb, f.data.reshape(r, s, -1)).astype(a.dtype)
        if f.requires_grad:
            gf = np.einsum("iajbk,ij->abk", gb, a.data).reshape(f.shape).astype(f.dtype)
        return ga, gf

    return Tensor._make(out, (a, f), backward, "kronecker")


def _init_rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


@dataclass
class PhWeightSpec:
    """Algebra matrices and filter banks that assemble into one conv weight."""

    n: int
    out_channels: int
    in_channels: int
    kernel_size: tuple[int, int]
    mode: str = LEARNABLE_ALGEBRA
    algebra: Tensor | None = None
    filters: Tensor | None = None
    rng: object = field(default=None, repr=False)

    def __post_init__(self):
        n = self.n
        if n < 1:
            raise ValueError(f"n must be a positive integer, got {n}")
        if self.out_channels % n or self.in_channels % n:
            raise ValueError(
                f"channels ({self.out_channels} out, {self.in_channels} in) not divisible by n={n}")
        if self.mode not in (LEARNABLE_ALGEBRA, HAMILTON_FIXED):
            raise ValueError(f"unknown mode {self.mode!r}")
        kh, kw = self.kernel_size
        rng = _init_rng(self.rng)
        self.rng = None
        if self.mode == HAMILTON_FIXED:
            if n != 4:
                raise ValueError("hamilton_fixed requires n == 4")
            fixed = hamilton_algebra_matrices()
            if self.algebra is not None and not np.array_equal(np.asarray(_data(self.algebra)), fixed):
                raise ValueError("hamilton_fixed algebra must be the Hamilton matrices")
            self.algebra = Tensor(fixed)
        elif self.algebra is None:
            self.algebra = Tensor(rng.normal(0.0, 1.0 / n, (n, n, n)).astype(np.float32),
                                  requires_grad=True)
        elif not isinstance(self.algebra, Tensor):
            self.algebra = Tensor(np.asarray(self.algebra, dtype=np.float32), requires_grad=True)
        if self.filters is None:
            std = np.sqrt(2.0 / (self.in_channels * kh * kw))
            shape = (n, self.out_channels // n, self.in_channels // n, kh, kw)
            self.filters = Tensor(rng.normal(0.0, std, shape).astype(np.float32), requires_grad=True)
        elif not isinstance(self.filters, Tensor):
            self.filters = Tensor(np.asarray(self.filters, dtype=np.float32), requires_grad=True)
        if self.algebra.shape != (n, n, n):
            raise ShapeError(f"algebra must have shape {(n, n, n)}, got {self.algebra.shape}")
        want = (n, self.out_channels // n, self.in_channels // n, kh, kw)
        if self.filters.shape != want:
            raise ShapeError(f"filters must have shape {want}, got {self.filters.shape}")

    def parameters(self) -> dict[str, Tensor]:
        params = {"filters": self.filters}
        if self.mode == LEARNABLE_ALGEBRA:
            params["algebra"] = self.algebra
        return params

    def param_count(self) -> dict[str, int]:
        filters = self.filters.size
        algebra = self.algebra.size if self.mode == LEARNABLE_ALGEBRA else 0
        return {"filters": filters, "algebra": algebra, "total": filters + algebra}


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def assemble_ph_weight(spec: PhWeightSpec) -> Tensor:
    """``W = sum_i kronecker(A_i, F_i)`` with shape ``[Cout, Cin, kh, kw]``."""
    total = None
    for i in range(spec.n):
        term = kronecker(spec.algebra[i], spec.filters[i])
        total = term if total is None else total + term
    return total


def dense_param_count(out_channels: int, in_channels: int, kh: int, kw: int) -> int:
    return out_channels * in_channels * kh * kw


def param_count(obj) -> dict:
    """Learnable scalar counts.

    Accepts a :class:`PhWeightSpec`, or any object exposing
    ``param_breakdown()`` (models and layers). Returns at least the keys
    ``filters``, ``algebra`` and ``total``.
    """
    if isinstance(obj, PhWeightSpec):
        return obj.param_count()
    if hasattr(obj, "param_breakdown"):
        return obj.param_breakdown()
    raise TypeError(f"cannot count parameters of {type(obj).__name__}")
