"""Dense small-order tensors over R^d.

A tensor of order m over R^d is a dense array with m axes of length d each
(order 0 is a scalar).  Entries are stored in row-major (C) multi-index
order, so serialized tensors are bit-reproducible across platforms.  No
covariance/contravariance distinction is made; all index positions are
interchangeable under the standard inner product.

Intended scale is small: d <= 4 and order <= 6, so dense storage wins over
any symmetric compression.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "outer", "tensor_power", "contract", "inf_norm"]


class Tensor:
    """Immutable dense tensor of a fixed order over R^d.

    Parameters
    ----------
    dim : int
        Ambient dimension d >= 1.
    entries : array-like
        Either a scalar (order 0), or an array whose shape is (d,)*order,
        or a flat array of length d**order in row-major multi-index order.
    order : int, optional
        Required when passing a flat array whose order is ambiguous
        (e.g. d=1); otherwise inferred from the shape.
    """

    __slots__ = ("dim", "order", "_a")

    def __init__(self, dim, entries, order=None):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        a = np.asarray(entries, dtype=np.float64)
        if order is None:
            if a.ndim == 0:
                order = 0
            elif all(s == dim for s in a.shape):
                order = a.ndim
            else:
                raise ValueError(
                    f"cannot infer order from shape {a.shape} with dim {dim}"
                )
        if a.size != dim**order:
            raise ValueError(
                f"entry count {a.size} != {dim}**{order} for order-{order} tensor"
            )
        a = a.reshape((dim,) * order)
        if not np.all(np.isfinite(a)):
            raise ValueError("tensor entries must be finite")
        a = a.copy()
        a.setflags(write=False)
        self.dim = int(dim)
        self.order = int(order)
        self._a = a

    @classmethod
    def scalar(cls, dim, value):
        return cls(dim, float(value), order=0)

    @classmethod
    def vector(cls, v):
        v = np.asarray(v, dtype=np.float64)
        return cls(v.shape[0], v, order=1)

    @classmethod
    def zeros(cls, dim, order):
        return cls(dim, np.zeros((dim,) * order), order=order)

    @property
    def array(self) -> np.ndarray:
        """Entries as a read-only ndarray of shape (d,)*order."""
        return self._a

    @property
    def flat(self) -> np.ndarray:
        """Entries flattened in row-major multi-index order."""
        return self._a.reshape(-1)

    def item(self) -> float:
        if self.order != 0:
            raise ValueError("item() requires an order-0 tensor")
        return float(self._a)

    def allclose(self, other, rtol=1e-12, atol=1e-12) -> bool:
        return (
            self.dim == other.dim
            and self.order == other.order
            and np.allclose(self._a, other._a, rtol=rtol, atol=atol)
        )

    def __repr__(self):
        return f"Tensor(dim={self.dim}, order={self.order})"


def outer(x: Tensor, y: Tensor) -> Tensor:
    """Tensor product: (x (x) y)_{ij} = x_i * y_j, order p+q."""
    if x.dim != y.dim:
        raise ValueError(f"dimension mismatch: {x.dim} vs {y.dim}")
    a = np.multiply.outer(x.array, y.array)
    return Tensor(x.dim, a, order=x.order + y.order)


def tensor_power(v: Tensor, r: int) -> Tensor:
    """r-fold tensor product of an order-1 tensor with itself; r=0 gives scalar 1."""
    if v.order != 1:
        raise ValueError("tensor_power requires an order-1 tensor")
    if r < 0:
        raise ValueError(f"power must be >= 0, got {r}")
    out = np.array(1.0)
    for _ in range(r):
        out = np.multiply.outer(out, v.array)
    return Tensor(v.dim, out, order=r)


def contract(x: Tensor, y: Tensor) -> Tensor:
    """Contract y against the trailing indices of x; result has order p - q.

    The trailing axes of x are paired with the axes of y in reverse order
    (x's last axis against y's first), which makes iterated contraction
    factor exactly through tensor products:

        contract(contract(x, y), z) == contract(x, outer(y, z))

    for arbitrary tensors.  When x is symmetric in the contracted slots
    (every tensor this library contracts in anger is), this coincides with
    the plain pairing <x, y>_i = sum_j x_{ij} y_j.
    """
    if x.dim != y.dim:
        raise ValueError(f"dimension mismatch: {x.dim} vs {y.dim}")
    if y.order > x.order:
        raise ValueError(
            f"cannot contract order {x.order} against higher order {y.order}"
        )
    if y.order == 0:
        a = x.array * y.item()
    else:
        axes_x = list(range(x.order - 1, x.order - 1 - y.order, -1))
        axes_y = list(range(y.order))
        a = np.tensordot(x.array, y.array, axes=(axes_x, axes_y))
    return Tensor(x.dim, a, order=x.order - y.order)


def inf_norm(x: Tensor) -> float:
    """Entrywise sup norm, max_i |x_i|."""
    return float(np.max(np.abs(x.array)))
