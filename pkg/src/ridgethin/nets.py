"""Multiscale covering nets of the ball under a mixed packing metric.

The metric between evaluation points x, z blends a continuous part (the
probability that a uniformly random halfspace separates them) with an
empirical part (the fraction of N reference halfspaces that separate
them):

    d_mu(x, z) = 1/2 * cont(x, z) + 1/2 * sep(x, z) / N.

Level-l nets are greedy maximal delta_l/2-packings of a deterministic
candidate pool (delta_l = 2^-l), so the packing property is exact by
construction.  Covering is enforced operationally: any point projected
onto a level with admission enabled either lands within delta_l/2 of an
existing net point (which bounds both its Euclidean distance and its
separation fraction) or joins the net, preserving maximality over
everything ever seen.  Net points at level l are linked to their
projections at level l-1; following links yields the projection chains
the decomposition consumes.

Separation counts are computed on bit-packed sign vectors, one bit per
reference halfspace.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.integrate import quad

from .pointsets import ball_fill

__all__ = [
    "kappa_d",
    "HalfspaceMetric",
    "SeparationMetric",
    "LevelNet",
    "MultiscaleNet",
    "NetConfig",
    "separation_count",
    "mixed_distance",
    "build_net",
    "project",
    "build_chain",
]

_POP = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)


@lru_cache(maxsize=16)
def kappa_d(d: int) -> float:
    """E_{omega in S^{d-1}} |omega . u| for any unit u, by adaptive quadrature."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    if d == 1:
        return 1.0
    num, _ = quad(
        lambda t: abs(math.cos(t)) * math.sin(t) ** (d - 2),
        0.0,
        math.pi,
        points=[math.pi / 2],
        epsabs=1e-12,
        epsrel=1e-12,
    )
    den, _ = quad(
        lambda t: math.sin(t) ** (d - 2), 0.0, math.pi, epsabs=1e-12, epsrel=1e-12
    )
    return num / den


def _pack_signs(margins: np.ndarray) -> np.ndarray:
    """Bit-pack the >= 0 sign pattern of a margin matrix, one row per point."""
    return np.packbits(margins >= 0, axis=1)


def _hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise popcount of XOR between equally shaped packed sign blocks."""
    return _POP[a ^ b].sum(axis=-1)


class SeparationMetric:
    """Shared machinery for mixed metrics; subclasses fix the geometry."""

    #: number of reference atoms N (empirical denominator)
    n_atoms: int
    #: exponent dimension for net size targets
    sched_dim: int
    #: ambient dimension of evaluation points
    point_dim: int

    def margins(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def cont_matrix(self, P: np.ndarray, Q: np.ndarray) -> np.ndarray:
        """Continuous separation probability for all pairs (rows of P) x (rows of Q)."""
        raise NotImplementedError

    def fill(self, n: int) -> np.ndarray:
        """Deterministic low-discrepancy candidate points for this domain."""
        raise NotImplementedError

    # -- generic helpers ------------------------------------------------

    def signs_packed(self, X: np.ndarray) -> np.ndarray:
        return _pack_signs(self.margins(np.atleast_2d(X)))

    def separation_count(self, x, z) -> int:
        mx = self.margins(np.asarray(x, dtype=np.float64)[None, :])[0]
        mz = self.margins(np.asarray(z, dtype=np.float64)[None, :])[0]
        return int(np.count_nonzero((mx >= 0) != (mz >= 0)))

    def mixed_distance(self, x, z) -> float:
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        cont = float(self.cont_matrix(x[None, :], z[None, :])[0, 0])
        return 0.5 * cont + 0.5 * self.separation_count(x, z) / self.n_atoms


class HalfspaceMetric(SeparationMetric):
    """Mixed metric on B^d induced by N reference halfspaces (omega, b).

    The continuous part has the closed form kappa_d |x - z| / 2: for a
    fixed direction, a uniform offset in [-1, 1] separates x from z with
    probability |omega . (x - z)| / 2.
    """

    def __init__(self, omegas, offsets):
        self.omegas = np.ascontiguousarray(omegas, dtype=np.float64)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.n_atoms = self.omegas.shape[0]
        if self.n_atoms == 0:
            raise ValueError("metric needs at least one reference halfspace")
        self.point_dim = self.omegas.shape[1]
        self.sched_dim = self.point_dim
        self.kappa = kappa_d(self.point_dim)

    @classmethod
    def from_measure(cls, measure):
        return cls(measure.omegas, measure.offsets)

    def margins(self, X):
        return np.atleast_2d(X) @ self.omegas.T + self.offsets

    def cont_matrix(self, P, Q):
        P = np.atleast_2d(P)
        Q = np.atleast_2d(Q)
        pp = np.einsum("ij,ij->i", P, P)[:, None]
        qq = np.einsum("ij,ij->i", Q, Q)[None, :]
        sq = np.maximum(pp + qq - 2.0 * (P @ Q.T), 0.0)
        # cancellation noise floor: coincident points must read exactly 0
        sq[sq < 1e-14] = 0.0
        return 0.5 * self.kappa * np.sqrt(sq)

    def fill(self, n):
        return ball_fill(n, self.point_dim)


def separation_count(metric: SeparationMetric, x, z) -> int:
    """Number of reference halfspaces whose boundary separates x from z."""
    return metric.separation_count(x, z)


def mixed_distance(metric: SeparationMetric, x, z) -> float:
    """The mixed packing metric d_mu(x, z)."""
    return metric.mixed_distance(x, z)


class LevelNet:
    """One net level: a delta/2-packing with growable storage."""

    def __init__(self, metric: SeparationMetric, delta: float):
        self.metric = metric
        self.delta = float(delta)
        self._pts = np.empty((0, metric.point_dim))
        self._packed = np.empty((0, 0), dtype=np.uint8)
        self.size = 0
        #: index of each point's projection at the next coarser level (-1 if none)
        self.link = []
        #: points admitted beyond the greedy pool phase (projections, queries)
        self.admitted_online = 0

    @property
    def points(self) -> np.ndarray:
        return self._pts[: self.size]

    @property
    def packed(self) -> np.ndarray:
        return self._packed[: self.size]

    def _ensure_capacity(self, extra, width):
        need = self.size + extra
        cap = self._pts.shape[0]
        if self._packed.shape[1] != width and self.size == 0:
            self._packed = np.empty((cap, width), dtype=np.uint8)
        if need <= cap:
            return
        newcap = max(64, 2 * cap, need)
        pts = np.empty((newcap, self.metric.point_dim))
        pts[: self.size] = self._pts[: self.size]
        packed = np.empty((newcap, self._packed.shape[1]), dtype=np.uint8)
        packed[: self.size] = self._packed[: self.size]
        self._pts = pts
        self._packed = packed

    def add(self, point: np.ndarray, packed_row: np.ndarray, online=False) -> int:
        self._ensure_capacity(1, packed_row.shape[0])
        self._pts[self.size] = point
        self._packed[self.size] = packed_row
        self.link.append(-1)
        self.size += 1
        if online:
            self.admitted_online += 1
        return self.size - 1

    def dmu_to_slice(self, x, packed_row, start=0):
        """Mixed distances from one query to net points [start:)."""
        pts = self._pts[start : self.size]
        if pts.shape[0] == 0:
            return np.empty(0), np.empty(0, dtype=np.int64)
        cont = self.metric.cont_matrix(x[None, :], pts)[0]
        ham = _hamming(packed_row[None, :], self._packed[start : self.size])
        dmu = 0.5 * cont + 0.5 * ham / self.metric.n_atoms
        return dmu, np.arange(start, self.size)

    def nearest(self, x, packed_row):
        """(index, d_mu) of the mixed-metric nearest net point; ties to lowest index.

        Far points are screened by the continuous lower bound d_mu >= cont/2,
        so the empirical part is only evaluated where it can matter.
        """
        if self.size == 0:
            return -1, np.inf
        cont = self.metric.cont_matrix(x[None, :], self.points)[0]
        j0 = int(np.argmin(cont))
        h0 = int(_hamming(packed_row[None, :], self._packed[j0 : j0 + 1])[0])
        best = 0.5 * cont[j0] + 0.5 * h0 / self.metric.n_atoms
        cand = np.nonzero(0.5 * cont <= best + 1e-18)[0]
        ham = _hamming(packed_row[None, :], self._packed[cand])
        dmu = 0.5 * cont[cand] + 0.5 * ham / self.metric.n_atoms
        k = int(np.argmin(dmu))  # first occurrence = lowest index (cand ascending)
        return int(cand[k]), float(dmu[k])

    def project_point(self, x, packed_row=None, admit=False):
        """Project one point; optionally admit it when uncovered (d_mu >= delta/2)."""
        x = np.asarray(x, dtype=np.float64)
        if packed_row is None:
            packed_row = self.metric.signs_packed(x[None, :])[0]
        j, dmu = self.nearest(x, packed_row)
        if admit and (j < 0 or dmu >= self.delta / 2):
            j = self.add(x, packed_row, online=True)
            dmu = 0.0
        return j, dmu

    def min_pairwise_dmu(self, chunk=256) -> float:
        """Exact minimum pairwise d_mu over the net (packing verification)."""
        if self.size < 2:
            return np.inf
        best = np.inf
        pts, packed = self.points, self.packed
        for lo in range(0, self.size, chunk):
            hi = min(lo + chunk, self.size)
            cont = self.metric.cont_matrix(pts[lo:hi], pts)
            low = 0.5 * cont
            # only pairs whose continuous lower bound could undercut `best`
            ii, jj = np.nonzero(low < min(best, self.delta))
            keep = (ii + lo) != jj
            ii, jj = ii[keep], jj[keep]
            if ii.size:
                ham = _hamming(packed[ii + lo], packed[jj])
                dmu = low[ii, jj] + 0.5 * ham / self.metric.n_atoms
                m = float(dmu.min())
                best = min(best, m)
        return best


def build_net(metric: SeparationMetric, delta: float, pool, cap=None, chunk=512) -> LevelNet:
    """Greedy maximal delta/2-packing of the pool, in pool order.

    A candidate is admitted iff its mixed distance to every admitted point
    is >= delta/2.  Pairs whose continuous part alone is >= delta are
    skipped without touching sign bits.  With cap set, admission stops at
    cap points (the cap is recorded; maximality then holds only for the
    scanned prefix).
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    if pool.shape[0] == 0:
        raise ValueError("empty candidate pool")
    net = LevelNet(metric, delta)
    packed = metric.signs_packed(pool)
    radius = delta / 2.0
    n = metric.n_atoms
    for lo in range(0, pool.shape[0], chunk):
        if cap is not None and net.size >= cap:
            break
        pts = pool[lo : lo + chunk]
        pks = packed[lo : lo + chunk]
        if net.size:
            cont = metric.cont_matrix(pts, net.points)
            ok = np.ones(pts.shape[0], dtype=bool)
            ii, jj = np.nonzero(cont < delta)
            if ii.size:
                ham = _hamming(pks[ii], net.packed[jj])
                dmu = 0.5 * cont[ii, jj] + 0.5 * ham / n
                ok[ii[dmu < radius]] = False
            cand = np.nonzero(ok)[0]
        else:
            cand = np.arange(pts.shape[0])
        base = net.size
        for i in cand:
            if cap is not None and net.size >= cap:
                break
            if net.size > base:
                dmu, _ = net.dmu_to_slice(pts[i], pks[i], start=base)
                if dmu.size and dmu.min() < radius:
                    continue
            net.add(pts[i], pks[i])
    return net


def project(net: LevelNet, metric: SeparationMetric, x, admit=False) -> np.ndarray:
    """The net point nearest to x in the mixed metric (admitting if asked)."""
    j, _ = net.project_point(np.asarray(x, dtype=np.float64), admit=admit)
    return net.points[j].copy()


@dataclass
class NetConfig:
    """Construction knobs for the multiscale net."""

    c0: float = 50.0  # per-level size target (c0 * 2^l)^d, from the packing bound
    c1: float = 3.0  # covering constant in |x - pi_l(x)| <= c1 * 2^-l * sqrt(d)
    cap_per_level: int = 20000  # greedy-phase budget per level
    pool_factor: int = 64  # pool size = pool_factor * size target, clamped below
    pool_min: int = 4096
    pool_max: int = 262144
    chunk: int = 512

    def pool_size(self, level: int, sched_dim: int) -> int:
        target = min((self.c0 * 2.0**level) ** sched_dim, float(self.cap_per_level))
        n = int(min(max(self.pool_factor * target, self.pool_min), self.pool_max))
        return n


class MultiscaleNet:
    """Nets at scales delta_l = 2^-l for l = 1..L with 2^L > N.

    Every net point at level l >= 2 stores a link to its projection at
    level l-1; links are created with admission enabled, so the covering
    bounds (Euclidean distance < 2 delta_{l-1} / kappa and separation
    count < delta_{l-1} N) hold for every link by construction.
    """

    def __init__(self, metric: SeparationMetric, config: NetConfig | None = None):
        self.metric = metric
        self.config = config or NetConfig()
        self.L = 1
        while 2**self.L <= metric.n_atoms:
            self.L += 1
        self.levels: list[LevelNet] = []
        self._build()
        self._link_all()

    # -- construction ----------------------------------------------------

    def _build(self):
        cfg = self.config
        prev_pts = []
        for l in range(1, self.L + 1):
            delta = 2.0**-l
            npool = cfg.pool_size(l, self.metric.sched_dim)
            fill = self.metric.fill(npool)
            pool = np.vstack(prev_pts + [fill]) if prev_pts else fill
            net = build_net(
                self.metric, delta, pool, cap=cfg.cap_per_level, chunk=cfg.chunk
            )
            self.levels.append(net)
            prev_pts = [net.points.copy()]

    def _link_all(self):
        for l in range(2, self.L + 1):
            net = self.levels[l - 1]
            i = 0
            while i < net.size:
                if net.link[i] < 0:
                    net.link[i] = self._link_point(l, net.points[i], net.packed[i])
                i += 1

    def _link_point(self, l, point, packed_row):
        """Project a level-l point onto level l-1, admitting and linking as needed."""
        coarser = self.levels[l - 2]
        before = coarser.size
        j, _ = coarser.project_point(point, packed_row, admit=True)
        if j >= before and l - 1 >= 2:
            coarser.link[j] = self._link_point(l - 1, coarser.points[j], coarser.packed[j])
        return j

    # -- queries ----------------------------------------------------------

    @property
    def sizes(self):
        return [net.size for net in self.levels]

    def delta(self, l: int) -> float:
        return 2.0**-l

    def project_level(self, l: int, x, admit=False) -> int:
        """Index of pi_l(x) in the level-l net; may grow the net when admitting."""
        net = self.levels[l - 1]
        before = net.size
        j, _ = net.project_point(np.asarray(x, dtype=np.float64), admit=admit)
        if j >= before and l >= 2:
            net.link[j] = self._link_point(l, net.points[j], net.packed[j])
        return j

    def chain_indices(self, x, admit=False) -> list[int]:
        """Per-level indices of the projection chain x_1 .. x_L for x."""
        jL = self.project_level(self.L, x, admit=admit)
        idx = [0] * self.L
        idx[self.L - 1] = jL
        for l in range(self.L, 1, -1):
            idx[l - 2] = self.levels[l - 1].link[idx[l - 1]]
        return idx

    def chain_points(self, x, admit=False) -> list[np.ndarray]:
        idx = self.chain_indices(x, admit=admit)
        return [self.levels[l].points[idx[l]].copy() for l in range(self.L)]

    # -- diagnostics -------------------------------------------------------

    def covering_stats(self, samples: np.ndarray, level: int, admit=True):
        """Euclidean and separation covering quality for a batch of samples.

        Returns (euclid_dist, sep_count) arrays for pi_level over the
        samples.  With admission on (the operational covering mode) every
        sample is covered by maximality; admitted samples report their
        pre-admission projection quality of 0 only when truly new, so the
        arrays reflect the state before each admission.
        """
        net = self.levels[level - 1]
        eu = np.empty(samples.shape[0])
        sep = np.empty(samples.shape[0], dtype=np.int64)
        packed = self.metric.signs_packed(samples)
        for i, x in enumerate(samples):
            before = net.size
            j, _ = net.project_point(x, packed[i], admit=admit)
            if j >= before:
                if level >= 2:
                    net.link[j] = self._link_point(level, net.points[j], net.packed[j])
                eu[i] = 0.0
                sep[i] = 0
            else:
                eu[i] = float(np.linalg.norm(x - net.points[j]))
                sep[i] = int(_hamming(packed[i][None, :], net.packed[j])[0])
        return eu, sep

    def dump(self) -> dict:
        return {
            "levels": [
                {
                    "level": l + 1,
                    "delta": self.delta(l + 1),
                    "size": net.size,
                    "admitted_online": net.admitted_online,
                    "points": net.points.tolist(),
                    "link": list(net.link),
                }
                for l, net in enumerate(self.levels)
            ]
        }

    def dump_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.dump(), fh)


def build_chain(nets: MultiscaleNet, x, admit=False) -> list[np.ndarray]:
    """Projection chain x_1 .. x_L (x_L deepest) for an evaluation point."""
    return nets.chain_points(x, admit=admit)
