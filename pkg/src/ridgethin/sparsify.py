"""Support thinning: one reduction step and its iteration.

A step on a probability measure with N >= 6 atoms:

  1. split at the median weight: the small half S_- (weights <= median,
     each <= 2/N) and the untouched large half S_+;
  2. group S_- into weight-ordered triples covering >= half of it;
  3. build multiscale nets over the S_- halfspaces, assemble the Psi
     discrepancy system, and search for a partial coloring;
  4. recolor: for chi = +1 drop u and set b_v = 2 a_v,
     b_w = a_w + (a_u - a_v); for chi = -1 swap the roles of u and v;
     chi = 0 leaves the triple alone.

Mass is conserved exactly, weights stay nonnegative (w holds the largest
coefficient of its triple), S_+ rows pass through bit-identically, and the
support drops by the coloring's nonzero count.  Iterating until the
support reaches n yields the n-point approximation whose derivative-sup
error the rate harness measures against i.i.d. subsampling.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .coloring import (
    RidgePhiKernel,
    SearchBudget,
    TriplePartition,
    build_psi_system,
    calibrate_c_m,
    clamp_schedule,
    find_partial_coloring,
    make_schedule,
)
from .nets import HalfspaceMetric, MultiscaleNet, NetConfig
from .pointsets import ball_fill
from .reluk import DiscreteMeasure, SignedNetwork, measure_derivative_grid

__all__ = [
    "NoReductionError",
    "MedianSplit",
    "PipelineConfig",
    "ReductionStepReport",
    "RidgeGeometry",
    "median_split",
    "make_triples",
    "apply_coloring",
    "reduce_once",
    "sparsify_to",
    "compress_network",
    "sample_baseline",
    "sup_error",
    "default_grid",
]


class NoReductionError(Exception):
    """Raised when a measure is too small for a reduction step (N < 6)."""


@dataclass(frozen=True)
class MedianSplit:
    minus_idx: np.ndarray  # weights <= median (ties included)
    plus_idx: np.ndarray
    median: float


def median_split(tau) -> MedianSplit:
    """Split atoms at the median weight; the small half is the colored one.

    Every weight in the small half is <= 2/N: at least half the weights
    reach the median, and they sum to at most the unit total mass.
    """
    w = np.asarray(tau.weights if hasattr(tau, "weights") else tau, dtype=np.float64)
    n = len(w)
    if n < 6:
        raise NoReductionError(f"support {n} < 6, nothing to reduce")
    med = float(np.median(w))
    minus = np.nonzero(w <= med)[0]
    plus = np.nonzero(w > med)[0]
    return MedianSplit(minus, plus, med)


def make_triples(weights) -> TriplePartition:
    """Consecutive triples of the weight-sorted atoms (indices local).

    Sorting then grouping guarantees a_u <= a_v <= a_w within each triple
    and keeps the transfer mass |a_u - a_v| small; floor(n/3) triples
    cover all but at most two atoms.
    """
    w = np.asarray(weights, dtype=np.float64)
    n = len(w)
    if n < 3:
        raise ValueError(f"need at least 3 atoms for triples, got {n}")
    order = np.argsort(w, kind="stable")
    t = n // 3
    grouped = order[: 3 * t].reshape(t, 3)
    return TriplePartition(grouped[:, 0], grouped[:, 1], grouped[:, 2], n)


@dataclass
class ColoringApplication:
    keep_idx: np.ndarray  # local indices into S_- that survive
    weights: np.ndarray  # their new weights
    removed_idx: np.ndarray
    mass_before: float
    mass_after: float


def apply_coloring(weights, partition: TriplePartition, chi) -> ColoringApplication:
    """Recolored weights per the four-case transfer formula.

    chi = +1 removes u (b_v = 2 a_v, b_w = a_w + a_u - a_v); chi = -1
    removes v (b_u = 2 a_u, b_w = a_w + a_v - a_u); chi = 0 is a no-op.
    Nonnegativity holds because w carries the largest weight of its
    triple; total mass is conserved identically.
    """
    w = np.asarray(weights, dtype=np.float64)
    chi = np.asarray(chi)
    if len(chi) != partition.t:
        raise ValueError("coloring length must equal the number of triples")
    b = w.copy()
    up = np.nonzero(chi == 1)[0]
    dn = np.nonzero(chi == -1)[0]
    b[partition.v[up]] = 2.0 * w[partition.v[up]]
    b[partition.w[up]] += w[partition.u[up]] - w[partition.v[up]]
    b[partition.u[dn]] = 2.0 * w[partition.u[dn]]
    b[partition.w[dn]] += w[partition.v[dn]] - w[partition.u[dn]]
    removed = np.concatenate([partition.u[up], partition.v[dn]])
    keep = np.ones(len(w), dtype=bool)
    keep[removed] = False
    keep_idx = np.nonzero(keep)[0]
    new_w = b[keep_idx]
    if new_w.size and new_w.min() < 0:
        raise AssertionError("recolored weight went negative: partition ordering broken")
    return ColoringApplication(
        keep_idx, new_w, removed, float(w.sum()), float(new_w.sum())
    )


class RidgeGeometry:
    """Engine adapter for ReLU^k ridge measures on the ball."""

    def __init__(self, k: int):
        self.k = int(k)

    def sched_dim(self, tau) -> int:
        return tau.dim

    def take(self, tau, idx):
        return tau.subset(idx, mode="subprobability")

    def metric(self, sub):
        return HalfspaceMetric.from_measure(sub)

    def kernel(self, sub):
        return RidgePhiKernel(sub.omegas, sub.offsets, self.k)

    def rebuild(self, tau, keep_mask, new_weights):
        return DiscreteMeasure(
            tau.omegas[keep_mask], tau.offsets[keep_mask], new_weights, tau.mode
        )

    def derivative_sup(self, tau_a, tau_b, grid, m):
        return sup_error(tau_a, tau_b, grid, m, self.k)

    def default_grid(self, tau, size=None):
        return default_grid(tau.dim, size)


@dataclass
class PipelineConfig:
    """Everything one reduction step needs, with desk-scale defaults."""

    k: int = 1
    alpha: float = 0.25
    beta: float | None = None  # None -> k + 1
    kappa: float = 0.25
    c_m: float | None = None  # None -> calibrated from the measured Psi scales
    c_m_multiplier: float = 3.0
    delta_floor_mult: float = 4.0
    net: NetConfig = field(
        default_factory=lambda: NetConfig(
            cap_per_level=1536, pool_factor=2, pool_min=3072, pool_max=12288
        )
    )
    budget: SearchBudget = field(
        default_factory=lambda: SearchBudget(stage_a_samples=12288, batch=256)
    )
    step_grid: int = 0  # per-step diagnostic grid size (0 skips the sup check)
    step_time_budget: float | None = None  # seconds per coloring before stage C

    def beta_value(self) -> float:
        return self.k + 1.0 if self.beta is None else self.beta

    @classmethod
    def from_dict(cls, blob: dict) -> "PipelineConfig":
        cfg = cls()
        simple = {
            "k", "alpha", "beta", "kappa", "c_m", "c_m_multiplier",
            "delta_floor_mult", "step_grid", "step_time_budget",
        }
        for key, val in blob.items():
            if key in simple:
                setattr(cfg, key, val)
            elif key == "net":
                cfg.net = NetConfig(**val)
            elif key == "budget":
                cfg.budget = SearchBudget(**val)
            else:
                raise ValueError(f"unknown pipeline config key {key!r}")
        return cfg


@dataclass
class ReductionStepReport:
    input_support: int
    output_support: int
    removed: int
    realized_factor: float
    minus_size: int
    t: int
    median: float
    mass_residual: float
    net_sizes: list
    coloring: dict
    step_sup_error: dict  # m -> sup error on the step grid (empty if skipped)
    seconds: float
    top_level_points: np.ndarray | None = None  # deepest net, for eval grids

    def to_dict(self):
        return {
            "input_support": self.input_support,
            "output_support": self.output_support,
            "removed": self.removed,
            "realized_factor": self.realized_factor,
            "minus_size": self.minus_size,
            "t": self.t,
            "median": self.median,
            "mass_residual": self.mass_residual,
            "net_sizes": self.net_sizes,
            "coloring": self.coloring,
            "step_sup_error": {str(m): e for m, e in self.step_sup_error.items()},
            "seconds": self.seconds,
        }


def _step_seed(seed, step):
    return int(
        np.random.SeedSequence([int(seed) & 0x7FFFFFFF, int(step)]).generate_state(1)[0]
    )


def reduce_once(tau, config: PipelineConfig, seed=0, geometry=None):
    """One thinning step: median split, nets, Psi, coloring, recolor.

    Returns (tau', report).  Raises NoReductionError below 6 atoms.
    """
    t0 = time.monotonic()
    geometry = geometry or RidgeGeometry(config.k)
    n_in = tau.support_size
    split = median_split(tau)
    minus, plus = split.minus_idx, split.plus_idx
    w_minus = tau.weights[minus]
    part = make_triples(w_minus)
    sub = geometry.take(tau, minus)

    metric = geometry.metric(sub)
    nets = MultiscaleNet(metric, config.net)
    psi = build_psi_system(sub, part, nets, kernel=geometry.kernel(sub))
    c_m = config.c_m
    if c_m is None:
        c_m = calibrate_c_m(psi, n_in, config.c_m_multiplier)
    sched = make_schedule(
        n_in,
        geometry.sched_dim(tau),
        geometry.k,
        config.alpha,
        config.beta_value(),
        config.kappa,
        c_m,
        nets.L,
    )
    sched = clamp_schedule(sched, psi, config.delta_floor_mult)
    budget = config.budget
    if config.step_time_budget is not None:
        budget = dataclasses.replace(budget, time_budget=config.step_time_budget)
    coloring, creport = find_partial_coloring(psi, sched, budget, seed)

    applied = apply_coloring(w_minus, part, coloring.chi)
    new_weights = tau.weights.copy()
    new_weights[minus[applied.keep_idx]] = applied.weights
    keep_mask = np.ones(n_in, dtype=bool)
    keep_mask[minus[applied.removed_idx]] = False
    tau2 = geometry.rebuild(tau, keep_mask, new_weights[keep_mask])

    step_err = {}
    if config.step_grid:
        grid = geometry.default_grid(tau, config.step_grid)
        for m in range(geometry.k + 1):
            step_err[m] = geometry.derivative_sup(tau, tau2, grid, m)

    report = ReductionStepReport(
        input_support=n_in,
        output_support=tau2.support_size,
        removed=len(applied.removed_idx),
        realized_factor=tau2.support_size / n_in,
        minus_size=len(minus),
        t=part.t,
        median=split.median,
        mass_residual=abs(tau2.total_mass() - tau.total_mass()),
        net_sizes=nets.sizes,
        coloring=creport.to_dict(),
        step_sup_error=step_err,
        seconds=time.monotonic() - t0,
    )
    report.top_level_points = nets.levels[-1].points.copy()
    return tau2, report


def sparsify_to(tau, n, config: PipelineConfig, seed=0, geometry=None, observer=None):
    """Iterate reduction steps until the support is at most n.

    observer(tau_after_step, report) is called after every step; the final
    measure is returned unchanged when the support is already small enough
    or the step refuses (support < 6).
    """
    if n < 6:
        raise ValueError(f"target support must be >= 6, got {n}")
    geometry = geometry or RidgeGeometry(config.k)
    step = 0
    while tau.support_size > n:
        try:
            tau, report = reduce_once(
                tau, config, seed=_step_seed(seed, step), geometry=geometry
            )
        except NoReductionError:
            break
        if observer is not None:
            observer(tau, report)
        step += 1
    return tau


def compress_network(net: SignedNetwork, n, config: PipelineConfig, seed=0) -> SignedNetwork:
    """Thin a signed expansion to at most n terms, preserving the l1 budget.

    The positive and negative parts are normalized to probability measures,
    thinned to n/2 points each, and recombined with their original masses;
    a part with zero mass is skipped.
    """
    if n < 12:
        raise ValueError(f"signed compression needs n >= 12, got {n}")
    coefs = net.coefficients
    parts = []
    for sign_label, mask in (("pos", coefs > 0), ("neg", coefs < 0)):
        mass = float(np.abs(coefs[mask]).sum())
        if mass == 0.0:
            continue
        tau = DiscreteMeasure(
            net.omegas[mask],
            net.offsets[mask],
            np.abs(coefs[mask]) / mass,
            "probability",
        )
        sub_seed = _step_seed(seed, 1 if sign_label == "pos" else 2)
        thin = sparsify_to(tau, n // 2, config, seed=sub_seed)
        parts.append((1.0 if sign_label == "pos" else -1.0, mass, thin))
    if not parts:
        return SignedNetwork(net.omegas[:0], net.offsets[:0], coefs[:0])
    omegas = np.vstack([p.omegas for _, _, p in parts])
    offsets = np.concatenate([p.offsets for _, _, p in parts])
    coefficients = np.concatenate(
        [sign * mass * p.weights for sign, mass, p in parts]
    )
    return SignedNetwork(omegas, offsets, coefficients)


def sample_baseline(tau, n, seed=0):
    """n i.i.d. atoms from tau with uniform weights 1/n (duplicates merged)."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, 0xBA5E]))
    idx = rng.choice(tau.support_size, size=n, p=tau.weights / tau.total_mass())
    counts = np.bincount(idx, minlength=tau.support_size)
    keep = np.nonzero(counts)[0]
    return DiscreteMeasure(
        tau.omegas[keep], tau.offsets[keep], counts[keep] / n, tau.mode
    )


class _SignedStack:
    """Stacked atoms of two measures with signed weights, for one-pass sup error."""

    def __init__(self, tau_a, tau_b):
        self.omegas = np.vstack([tau_a.omegas, tau_b.omegas])
        self.offsets = np.concatenate([tau_a.offsets, tau_b.offsets])
        self.weights = np.concatenate([tau_a.weights, -tau_b.weights])


def sup_error(tau_a, tau_b, grid, m, k) -> float:
    """Max over the grid of the sup-norm of the order-m derivative gap."""
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if grid.shape[0] == 0:
        raise ValueError("empty evaluation grid")
    diff = measure_derivative_grid(_SignedStack(tau_a, tau_b), grid, m, k)
    return float(np.max(np.abs(diff)))


def default_grid(dim, size=None) -> np.ndarray:
    """Deterministic low-discrepancy evaluation grid in the unit ball."""
    if size is None:
        size = 20000 if dim <= 2 else 50000
    return ball_fill(size, dim)
