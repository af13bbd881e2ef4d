"""ReLU^k ridge atoms, discrete measures, and their derivative calculus.

An atom theta = (omega, b) with |omega| = 1 and b in [-1, 1] carries the
ridge function x -> (omega.x + b)_+^k on the unit ball.  The boundary set
{omega.x + b = 0} belongs to the active branch, and for k = 0 we take
0^0 = 1 (Heaviside).

The m-th derivative tensor of an active atom is

    (k!/(k-m)!) (omega.x + b)^{k-m} omega^{(x) m},

a scalar multiple of the m-fold power of the direction.  Taylor residuals
of these tensors across a projection chain, and the correction tensors of
the telescoping decomposition, are what the thinning pipeline colors.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .tensors import Tensor, contract, inf_norm, outer, tensor_power

__all__ = [
    "K_MAX",
    "Atom",
    "DiscreteMeasure",
    "SignedNetwork",
    "DecompositionTensors",
    "DecompositionCheck",
    "derivative_tensor",
    "taylor",
    "phi",
    "measure_derivative",
    "measure_derivative_grid",
    "decomposition_gammas",
    "verify_decomposition",
    "direction_powers",
]

# Derivative orders above this are outside the supported configuration.
K_MAX = 6
_FACT = [math.factorial(i) for i in range(K_MAX + 1)]


def _check_k(k):
    if not 0 <= k <= K_MAX:
        raise ValueError(f"k must be in 0..{K_MAX}, got {k}")


def deriv_coef(k, m):
    """k!/(k-m)!, the polynomial prefactor of the m-th derivative."""
    return _FACT[k] // _FACT[k - m]


@dataclass(frozen=True)
class Atom:
    """One ridge atom theta = (omega, b)."""

    omega: np.ndarray
    b: float

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=np.float64)
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "b", float(self.b))
        if abs(np.linalg.norm(omega) - 1.0) > 1e-12:
            raise ValueError("atom direction must be a unit vector (1e-12)")
        if not -1.0 <= self.b <= 1.0:
            raise ValueError(f"offset must lie in [-1, 1], got {self.b}")

    @property
    def dim(self):
        return self.omega.shape[0]

    def margin(self, x) -> float:
        return float(self.omega @ np.asarray(x, dtype=np.float64) + self.b)


class DiscreteMeasure:
    """Finitely supported nonnegative measure on atoms.

    Stored columnar: directions (n, d), offsets (n,), weights (n,).  In
    ``probability`` mode the weights must sum to 1 within 1e-10; in
    ``subprobability`` mode only nonnegativity is enforced.
    """

    def __init__(self, omegas, offsets, weights, mode="probability"):
        self.omegas = np.ascontiguousarray(omegas, dtype=np.float64)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.weights = np.asarray(weights, dtype=np.float64)
        if mode not in ("probability", "subprobability"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.validate()

    def validate(self):
        n, d = self.omegas.shape
        if self.offsets.shape != (n,) or self.weights.shape != (n,):
            raise ValueError("omegas, offsets, weights must have matching length")
        norms = np.linalg.norm(self.omegas, axis=1)
        if n and np.max(np.abs(norms - 1.0)) > 1e-12:
            raise ValueError("all directions must be unit vectors (1e-12)")
        if n and (np.min(self.offsets) < -1.0 or np.max(self.offsets) > 1.0):
            raise ValueError("offsets must lie in [-1, 1]")
        if n and np.min(self.weights) < 0.0:
            raise ValueError("weights must be nonnegative")
        if self.mode == "probability" and abs(self.weights.sum() - 1.0) > 1e-10:
            raise ValueError(
                f"probability mode requires unit mass, got {self.weights.sum()!r}"
            )

    @property
    def dim(self):
        return self.omegas.shape[1]

    @property
    def support_size(self):
        return self.omegas.shape[0]

    def total_mass(self) -> float:
        return float(self.weights.sum())

    def atom(self, i) -> Atom:
        return Atom(self.omegas[i], self.offsets[i])

    def subset(self, idx, weights=None, mode=None) -> "DiscreteMeasure":
        w = self.weights[idx] if weights is None else weights
        return DiscreteMeasure(
            self.omegas[idx], self.offsets[idx], w, mode or "subprobability"
        )

    def to_records(self):
        return [
            {"omega": list(map(float, o)), "b": float(b), "weight": float(w)}
            for o, b, w in zip(self.omegas, self.offsets, self.weights)
        ]

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_records(), fh)

    @classmethod
    def from_records(cls, records, mode="probability"):
        omegas = np.array([r["omega"] for r in records], dtype=np.float64)
        norms = np.linalg.norm(omegas, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero direction vector in measure records")
        omegas = omegas / norms
        offsets = np.array([r["b"] for r in records], dtype=np.float64)
        weights = np.array([r["weight"] for r in records], dtype=np.float64)
        return cls(omegas, offsets, weights, mode)

    @classmethod
    def from_json(cls, path, mode="probability"):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_records(json.load(fh), mode)


class SignedNetwork:
    """Shallow ridge expansion with signed coefficients and an l1 budget."""

    def __init__(self, omegas, offsets, coefficients, ell1_bound=None):
        self.omegas = np.ascontiguousarray(omegas, dtype=np.float64)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.coefficients = np.asarray(coefficients, dtype=np.float64)
        computed = float(np.abs(self.coefficients).sum())
        if ell1_bound is None:
            ell1_bound = computed
        if abs(ell1_bound - computed) > 1e-10:
            raise ValueError("ell1_bound disagrees with coefficients (1e-10)")
        self.ell1_bound = float(ell1_bound)

    @property
    def dim(self):
        return self.omegas.shape[1]

    @property
    def width(self):
        return self.omegas.shape[0]

    def to_records(self):
        return [
            {"omega": list(map(float, o)), "b": float(b), "coefficient": float(a)}
            for o, b, a in zip(self.omegas, self.offsets, self.coefficients)
        ]

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_records(), fh)

    @classmethod
    def from_records(cls, records):
        omegas = np.array([r["omega"] for r in records], dtype=np.float64)
        omegas = omegas / np.linalg.norm(omegas, axis=1, keepdims=True)
        offsets = np.array([r["b"] for r in records], dtype=np.float64)
        coefs = np.array([r["coefficient"] for r in records], dtype=np.float64)
        return cls(omegas, offsets, coefs)

    @classmethod
    def from_json(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_records(json.load(fh))

    def evaluate(self, X, k) -> np.ndarray:
        """Network values at rows of X."""
        s = np.asarray(X, dtype=np.float64) @ self.omegas.T + self.offsets
        return (np.where(s >= 0, s, 0.0) ** k if k > 0 else (s >= 0).astype(float)) @ self.coefficients


def derivative_tensor(theta: Atom, x, m: int, k: int) -> Tensor:
    """m-th derivative tensor of the ReLU^k atom at x (zero when inactive)."""
    _check_k(k)
    if m > k:
        raise ValueError(f"derivative order {m} exceeds smoothness {k}")
    d = theta.dim
    s = theta.margin(x)
    if s < 0:
        return Tensor.zeros(d, m)
    scale = deriv_coef(k, m) * s ** (k - m)
    base = tensor_power(Tensor.vector(theta.omega), m)
    return Tensor(d, scale * base.array, order=m)


def taylor(theta: Atom, x1, x2, m: int, r: int, k: int) -> Tensor:
    """Degree-r Taylor polynomial of the m-th derivative around x1, at x2."""
    _check_k(k)
    if m + r > k:
        raise ValueError(f"m + r = {m + r} exceeds smoothness {k}")
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    step = Tensor.vector(x2 - x1)
    out = Tensor.zeros(theta.dim, m)
    for q in range(r + 1):
        term = contract(derivative_tensor(theta, x1, m + q, k), tensor_power(step, q))
        out = Tensor(theta.dim, out.array + term.array / _FACT[q], order=m)
    return out


def phi(theta: Atom, x, proj, m: int, k: int) -> Tensor:
    """Level residual: derivative tensor at x minus its Taylor lift from proj.

    proj is the next-coarser projection of x, or None at the first level
    (where phi is the raw derivative tensor).  Vanishes whenever theta's
    hyperplane does not separate x from proj.
    """
    if proj is None:
        return derivative_tensor(theta, x, m, k)
    lift = taylor(theta, proj, x, m, k - m, k)
    raw = derivative_tensor(theta, x, m, k)
    return Tensor(theta.dim, raw.array - lift.array, order=m)


def direction_powers(V: np.ndarray, m: int) -> np.ndarray:
    """Rows v^{(x) m} flattened: shape (n, d**m)."""
    n, d = V.shape
    out = np.ones((n, 1))
    for _ in range(m):
        out = (out[:, :, None] * V[:, None, :]).reshape(n, -1)
    return out


def measure_derivative_grid(measure, X, m: int, k: int, chunk=2048) -> np.ndarray:
    """Weighted m-th derivative tensors of a measure at many points.

    Returns an array of shape (len(X), d**m) whose rows are row-major
    flattened tensors.  Accepts any object with omegas/offsets/weights
    (signed weights are fine, which is how measure differences and signed
    networks are evaluated in one pass).
    """
    _check_k(k)
    if m > k:
        raise ValueError(f"derivative order {m} exceeds smoothness {k}")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    omegas, offsets, weights = measure.omegas, measure.offsets, measure.weights
    wpow = direction_powers(omegas, m)
    coef = deriv_coef(k, m)
    out = np.empty((X.shape[0], wpow.shape[1]))
    for lo in range(0, X.shape[0], chunk):
        xs = X[lo : lo + chunk]
        s = xs @ omegas.T + offsets
        active = s >= 0
        p = coef * np.where(active, s ** (k - m), 0.0) * weights
        out[lo : lo + xs.shape[0]] = p @ wpow
    return out


def measure_derivative(tau: DiscreteMeasure, x, m: int, k: int) -> Tensor:
    """Weighted sum of atom derivative tensors at a single point."""
    flat = measure_derivative_grid(tau, np.asarray(x)[None, :], m, k)[0]
    return Tensor(tau.dim, flat, order=m)


@dataclass
class DecompositionTensors:
    """Correction tensors Gamma_{i,l}(x) of the telescoping decomposition.

    The tensors do not depend on the derivative order m; only the index
    range 1 <= i <= k - m does.  ``inner`` holds the chain-local tensors
    Gamma_{i,j}^{l} keyed by (i, start level j, end level l); ``gammas``
    holds the final Gamma_{i,l}(x) keyed by (i, l).
    """

    dim: int
    levels: int
    max_i: int
    gammas: dict = field(default_factory=dict)
    inner: dict = field(default_factory=dict)

    def norm_table(self):
        return {key: inf_norm(t) for key, t in self.gammas.items()}

    def check_decay(self, const) -> bool:
        """Empirical bound ||Gamma_{i,l}|| <= const * 2^{-i l}."""
        return all(
            inf_norm(t) <= const * 2.0 ** (-i * l) for (i, l), t in self.gammas.items()
        )


def _inner_gammas(chain, max_i):
    """Chain-local correction tensors Gamma_{i,j}^{l}.

    Recursion (steps dx_p = x_{p+1} - x_p):

        Gamma_{i,j}^{l} = (1/i!) sum_{p=j}^{l-1} dx_p^{(x) i}
          + sum_{q=1}^{i-1} (1/q!) sum_{p=j+1}^{l-1} Gamma_{i-q,j}^{p} (x) dx_p^{(x) q}
    """
    L = len(chain)
    steps = [Tensor.vector(chain[p + 1] - chain[p]) for p in range(L - 1)]
    inner = {}
    for i in range(1, max_i + 1):
        for j in range(1, L + 1):
            for l in range(j, L + 1):
                d = chain[0].shape[0]
                acc = Tensor.zeros(d, i)
                for p in range(j, l):  # levels p = j .. l-1, steps[p-1]
                    term = tensor_power(steps[p - 1], i)
                    acc = Tensor(d, acc.array + term.array / _FACT[i], order=i)
                for q in range(1, i):
                    for p in range(j + 1, l):
                        g = inner[(i - q, j, p)]
                        term = outer(g, tensor_power(steps[p - 1], q))
                        acc = Tensor(d, acc.array + term.array / _FACT[q], order=i)
                inner[(i, j, l)] = acc
    return inner


def decomposition_gammas(chain, x, m: int, k: int) -> DecompositionTensors:
    """All Gamma_{i,l}(x) for 1 <= i <= k - m over a projection chain.

    chain is the sequence x_1 .. x_L with x_L the deepest projection of x;
    each Gamma carries the (x - x_L)^{(x) i}/i! correction on top of the
    chain-local recursion.
    """
    _check_k(k)
    if m > k:
        raise ValueError(f"derivative order {m} exceeds smoothness {k}")
    chain = [np.asarray(p, dtype=np.float64) for p in chain]
    x = np.asarray(x, dtype=np.float64)
    L = len(chain)
    d = x.shape[0]
    max_i = k - m
    result = DecompositionTensors(dim=d, levels=L, max_i=max_i)
    if max_i == 0:
        return result
    inner = _inner_gammas(chain, max_i)
    result.inner = inner
    tail = Tensor.vector(x - chain[-1])
    for i in range(1, max_i + 1):
        for l in range(1, L + 1):
            acc = Tensor(d, tensor_power(tail, i).array / _FACT[i], order=i)
            if l <= L - 1:
                for q in range(0, i):
                    g = inner[(i - q, l, L)]
                    term = outer(g, tensor_power(tail, q))
                    acc = Tensor(d, acc.array + term.array / _FACT[q], order=i)
            result.gammas[(i, l)] = acc
    return result


@dataclass
class DecompositionCheck:
    residual: float
    agrees_at_bottom: bool
    first_disagreeing_level: int | None


def verify_decomposition(theta: Atom, x, chain, m: int, k: int) -> DecompositionCheck:
    """Residual of the multiscale identity for one atom at one point.

    Reconstructs the m-th derivative tensor at x from the level residuals
    phi along the chain plus their Gamma contractions, and reports the
    sup-norm residual.  The identity is exact (up to roundoff) whenever
    theta's hyperplane does not separate x from the deepest chain point;
    otherwise the first chain level lying on the wrong side of theta is
    reported.
    """
    chain = [np.asarray(p, dtype=np.float64) for p in chain]
    x = np.asarray(x, dtype=np.float64)
    L = len(chain)
    d = x.shape[0]

    lhs = derivative_tensor(theta, x, m, k)
    acc = np.zeros((d,) * m)
    for l in range(1, L + 1):
        proj = chain[l - 2] if l >= 2 else None
        acc = acc + phi(theta, chain[l - 1], proj, m, k).array
    gam = decomposition_gammas(chain, x, m, k)
    for i in range(1, k - m + 1):
        for l in range(1, L + 1):
            proj = chain[l - 2] if l >= 2 else None
            pt = phi(theta, chain[l - 1], proj, m + i, k)
            acc = acc + contract(pt, gam.gammas[(i, l)]).array

    residual = inf_norm(Tensor(d, lhs.array - acc, order=m))
    sign_x = theta.margin(x) >= 0
    first_bad = None
    for l in range(1, L + 1):
        if (theta.margin(chain[l - 1]) >= 0) != sign_x:
            first_bad = l
            break
    agrees = (theta.margin(chain[-1]) >= 0) == sign_x
    return DecompositionCheck(residual, agrees, first_bad)
