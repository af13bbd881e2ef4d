"""Discrepancy system over atom triples and the partial-coloring search.

Given the small-coefficient half of a measure, a partition of its atoms
into weight-ordered triples (u, v, w), and multiscale nets, each net point
x at level l and derivative order m carries one discrepancy vector per
triple:

    Psi^m_{x,l,j} = -a_u phi^m_{x,l}(u) + a_v phi^m_{x,l}(v)
                    + (a_u - a_v) phi^m_{x,l}(w),

which is exactly the change in the level residual when triple j is
recolored.  Psi vanishes unless some atom of the triple separates x from
its coarser projection, so the system is stored sparsely on those bad
(point, triple) pairs.

A partial coloring chi in {-1,0,+1}^t is sought with per-bucket guarantee
||sum_j chi_j Psi^m_{x,l,j}|| <= Delta_l^m and at least t/4 nonzeros.  The
search runs in three stages: (A) random full colorings hashed by their
rounded bucket signatures, taking chi as half the difference of a far
colliding pair; (B) local search on the max bucket ratio; (C) doubling
every Delta and retrying, with the relaxation factor logged.  An
exhaustive oracle over {-1,0,+1}^t validates the search on small t.

Bucket thresholds follow the two-parameter profile
Delta_l^m = 2 M_l^m Lambda_{alpha,beta}(l - tau) with
M_l^m = C_M 2^{-(k-m+1/2) l} / sqrt(N), and an entropy-budget diagnostic
scores the feasibility of the chosen kappa.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .reluk import deriv_coef, direction_powers

__all__ = [
    "TriplePartition",
    "PsiSystem",
    "ColoringSchedule",
    "PartialColoring",
    "SearchBudget",
    "ColoringReport",
    "RidgePhiKernel",
    "build_psi_system",
    "make_schedule",
    "entropy_budget",
    "calibrate_c_m",
    "clamp_schedule",
    "find_partial_coloring",
    "exhaustive_oracle",
    "discrepancy_report",
]


@dataclass(frozen=True)
class TriplePartition:
    """Disjoint weight-ordered triples (u, v, w) covering >= half the atoms."""

    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    n_atoms: int

    def __post_init__(self):
        if not (len(self.u) == len(self.v) == len(self.w)):
            raise ValueError("triple arrays must have equal length")
        if self.t and 3 * self.t < self.n_atoms / 2:
            raise ValueError("triples must cover at least half the atoms")

    @property
    def t(self) -> int:
        return len(self.u)

    def triple_of_atom(self) -> np.ndarray:
        """Map atom index -> triple index (-1 when uncovered)."""
        out = np.full(self.n_atoms, -1, dtype=np.int64)
        for arr in (self.u, self.v, self.w):
            out[arr] = np.arange(self.t)
        return out

    def role_coefficients(self, weights) -> np.ndarray:
        """Per-atom Psi coefficient: -a_u, +a_v, or (a_u - a_v) by role."""
        coef = np.zeros(self.n_atoms)
        coef[self.u] = -weights[self.u]
        coef[self.v] = weights[self.v]
        coef[self.w] = weights[self.u] - weights[self.v]
        return coef


class RidgePhiKernel:
    """Scalar phi factors for ReLU^k ridge atoms.

    phi^m_{x,l}(theta) = g * omega^{(x) m} with
    g = (k!/(k-m)!) s_x^{k-m} (1{s_x >= 0} - 1{s_proj >= 0}), which is the
    Taylor-residual in closed form (the full-degree expansion of the
    active-branch polynomial telescopes exactly).
    """

    def __init__(self, omegas, offsets, k):
        self.omegas = np.ascontiguousarray(omegas, dtype=np.float64)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.k = int(k)
        self.dim = self.omegas.shape[1]
        self.n_atoms = self.omegas.shape[0]
        self._coefs = np.array(
            [deriv_coef(self.k, m) for m in range(self.k + 1)], dtype=np.float64
        )

    @property
    def orders(self):
        return self.k + 1

    def directions(self) -> np.ndarray:
        return self.omegas

    def level1_mask(self, points) -> np.ndarray:
        """(npoints, natoms) mask of atoms whose raw phi can be nonzero."""
        return (np.atleast_2d(points) @ self.omegas.T + self.offsets) >= 0

    def phi_factors_pairs(self, x_pts, proj_pts, pair_pt, pair_atom) -> np.ndarray:
        """phi scalars for (point, atom) pairs, shape (npairs, k+1).

        proj_pts None means first level: the factor is the raw derivative
        scalar of active atoms.
        """
        om = self.omegas[pair_atom]
        off = self.offsets[pair_atom]
        s_x = np.einsum("ij,ij->i", x_pts[pair_pt], om) + off
        act_x = (s_x >= 0).astype(np.float64)
        if proj_pts is None:
            ds = act_x
        else:
            s_p = np.einsum("ij,ij->i", proj_pts[pair_pt], om) + off
            ds = act_x - (s_p >= 0).astype(np.float64)
        out = np.empty((len(pair_atom), self.k + 1))
        for m in range(self.k + 1):
            out[:, m] = self._coefs[m] * s_x ** (self.k - m) * ds
        return out


@dataclass
class LevelPsi:
    """Sparse Psi storage for one level: values per (net point, bad triple)."""

    n_points: int
    point_idx: np.ndarray  # (npairs,) int
    triple_idx: np.ndarray  # (npairs,) int
    values: list  # per m: (npairs, d**m) float

    @property
    def n_pairs(self):
        return len(self.point_idx)

    def norms(self, m) -> np.ndarray:
        if self.n_pairs == 0:
            return np.zeros(0)
        return np.max(np.abs(self.values[m]), axis=1)


@dataclass
class PsiSystem:
    """All Psi vectors of one reduction step, sparse over bad pairs."""

    levels: list  # of LevelPsi, index l-1
    t: int
    k: int
    dim: int
    n_atoms: int

    @property
    def L(self):
        return len(self.levels)

    def n_pairs(self):
        return sum(lv.n_pairs for lv in self.levels)

    def bucket_norm_sums(self, l, m) -> np.ndarray:
        """sum_j ||Psi^m_{x,l,j}|| per net point x of level l."""
        lv = self.levels[l - 1]
        out = np.zeros(lv.n_points)
        if lv.n_pairs:
            np.add.at(out, lv.point_idx, lv.norms(m))
        return out

    def max_norm(self, l, m) -> float:
        lv = self.levels[l - 1]
        return float(lv.norms(m).max()) if lv.n_pairs else 0.0


def build_psi_system(S_minus, partition: TriplePartition, nets, k=None, kernel=None) -> PsiSystem:
    """Assemble the sparse Psi system over the nets' bad (point, triple) pairs.

    S_minus supplies the atom weights (and, for the default ridge kernel,
    the atom geometry); nets supplies per-level points and projection
    links.  Good triples are skipped outright: an atom contributes only
    where its sign at the net point differs from its sign at the coarser
    projection (at the first level, only where it is plain active).
    """
    if kernel is None:
        if k is None:
            raise ValueError("either k or an explicit kernel is required")
        kernel = RidgePhiKernel(S_minus.omegas, S_minus.offsets, k)
    weights = S_minus.weights
    natoms = kernel.n_atoms
    triple_of = partition.triple_of_atom()
    role_coef = partition.role_coefficients(weights)
    d = kernel.dim
    wpow = [direction_powers(kernel.directions(), m) for m in range(kernel.orders)]

    levels = []
    for l in range(1, nets.L + 1):
        net = nets.levels[l - 1]
        pts = net.points
        if l == 1:
            mask = kernel.level1_mask(pts)
            proj_pts = None
        else:
            coarse = nets.levels[l - 2]
            link = np.asarray(net.link[: net.size], dtype=np.int64)
            proj_pts = coarse.points[link]
            diff = np.unpackbits(net.packed ^ coarse.packed[link], axis=1)
            mask = diff[:, :natoms].astype(bool)
        pair_pt, pair_atom = np.nonzero(mask)
        keep = triple_of[pair_atom] >= 0
        pair_pt, pair_atom = pair_pt[keep], pair_atom[keep]
        if len(pair_pt) == 0:
            levels.append(
                LevelPsi(
                    net.size,
                    np.zeros(0, dtype=np.int64),
                    np.zeros(0, dtype=np.int64),
                    [np.zeros((0, d**m)) for m in range(kernel.orders)],
                )
            )
            continue
        g = kernel.phi_factors_pairs(pts, proj_pts, pair_pt, pair_atom)
        # group contributions by (point, triple)
        tri = triple_of[pair_atom]
        key = pair_pt * partition.t + tri
        uniq, inv = np.unique(key, return_inverse=True)
        upt = (uniq // partition.t).astype(np.int64)
        utri = (uniq % partition.t).astype(np.int64)
        coefs = role_coef[pair_atom]
        values = []
        for m in range(kernel.orders):
            contrib = (coefs * g[:, m])[:, None] * wpow[m][pair_atom]
            acc = np.zeros((len(uniq), d**m))
            np.add.at(acc, inv, contrib)
            values.append(acc)
        levels.append(LevelPsi(net.size, upt, utri, values))
    return PsiSystem(levels, partition.t, kernel.k, d, natoms)


@dataclass
class ColoringSchedule:
    """Bucket thresholds Delta_l^m and their building blocks."""

    N: int
    d: int
    k: int
    L: int
    alpha: float
    beta: float
    kappa: float
    C_M: float
    tau_int: int
    M: np.ndarray  # (L+1, k+1); row 0 unused
    Delta: np.ndarray

    def lam(self, l) -> float:
        return _lambda_profile(self.alpha, self.beta, l - self.tau_int)

    def schedule_sum(self, m) -> float:
        """sum_l sum_i 2^{-il} Delta_l^{m+i}, the per-m error budget."""
        total = 0.0
        for l in range(1, self.L + 1):
            for i in range(0, self.k - m + 1):
                total += 2.0 ** (-i * l) * self.Delta[l, m + i]
        return total


def _lambda_profile(alpha, beta, x) -> float:
    return 2.0 ** (alpha * x) if x >= 0 else 2.0 ** (beta * x)


def make_schedule(N, d, k, alpha, beta, kappa, C_M, L) -> ColoringSchedule:
    """Threshold table for a measure of support N with L net levels."""
    if not 0 < alpha < 0.5:
        raise ValueError(f"need 0 < alpha < 1/2 (schedule sum converges), got alpha={alpha}")
    if not beta > k + 0.5:
        raise ValueError(f"need beta > k + 1/2 (schedule sum converges), got beta={beta}")
    if not 0 < kappa <= 1:
        raise ValueError(f"need kappa in (0, 1], got kappa={kappa}")
    if N < 1 or L < 1:
        raise ValueError("N and L must be positive")
    tau = int(math.floor(math.log2(max(kappa * N, 1e-300)) / d))
    while 2.0 ** (d * (tau + 1)) <= kappa * N:
        tau += 1
    while 2.0 ** (d * tau) > kappa * N:
        tau -= 1
    M = np.zeros((L + 1, k + 1))
    Delta = np.zeros((L + 1, k + 1))
    for l in range(1, L + 1):
        lam = _lambda_profile(alpha, beta, l - tau)
        for m in range(k + 1):
            M[l, m] = C_M * 2.0 ** (-(k - m + 0.5) * l) / math.sqrt(N)
            Delta[l, m] = 2.0 * M[l, m] * lam
    return ColoringSchedule(N, d, k, L, alpha, beta, kappa, C_M, tau, M, Delta)


def _entropy_G(lam) -> float:
    """Entropy bound for a rounded sub-Gaussian variable (C0 = 1)."""
    if lam >= 10:
        return math.exp(-(lam**2) / 9.0)
    if lam > 0.1:
        return 1.0
    return -math.log2(lam)


def entropy_budget(schedule: ColoringSchedule, net_sizes, k, d, t) -> dict:
    """Advisory feasibility score of the rounding-signature entropy.

    Sums |N_l| d^m G(Lambda(l - tau)) over levels and orders against the
    t/5 budget; ratios above 1 flag an infeasible kappa.
    """
    total = 0.0
    per_level = []
    for l in range(1, len(net_sizes) + 1):
        g = _entropy_G(schedule.lam(l))
        contrib = net_sizes[l - 1] * sum(d**m for m in range(k + 1)) * g
        per_level.append(contrib)
        total += contrib
    budget = t / 5.0
    ratio = total / budget if budget > 0 else math.inf
    return {
        "entropy": total,
        "budget": budget,
        "ratio": ratio,
        "feasible": bool(ratio <= 1.0),
        "per_level": per_level,
        "tau_int": schedule.tau_int,
        "kappa": schedule.kappa,
    }


@dataclass
class PartialColoring:
    chi: np.ndarray  # int8 in {-1, 0, +1}
    nonzero_count: int

    @classmethod
    def from_chi(cls, chi):
        chi = np.asarray(chi, dtype=np.int8)
        return cls(chi, int(np.count_nonzero(chi)))


@dataclass
class SearchBudget:
    """Knobs for the three-stage search."""

    stage_a_samples: int = 200_000
    batch: int = 256
    per_key_store: int = 48
    max_stored: int = 20_000
    collision_eval_cap: int = 48  # full-ratio evaluations of colliding pairs
    hash_floor: float = 1.5  # rows enter the signature only when Delta >= floor * scale
    hash_cap: int = 1024  # at most this many hashed rows (tightest first)
    stage_b_passes: int = 6
    lns_rounds: int = 16  # exhaustive sub-neighborhood rounds (small instances)
    polish_t_max: int = 48  # keep minimizing after success when t is this small
    stage_c_doublings: int = 4
    time_budget: float | None = None  # seconds; exceeded -> skip ahead


@dataclass
class ColoringReport:
    stage_used: str
    samples_drawn: int
    relaxation_factor: float
    nonzero_count: int
    t: int
    max_bucket_ratio: float
    per_level_ratios: dict
    aggregate: dict
    feasible: bool
    stage_a_collision: bool = False

    def to_dict(self):
        return {
            "stage_used": self.stage_used,
            "samples_drawn": self.samples_drawn,
            "relaxation_factor": self.relaxation_factor,
            "nonzero_count": self.nonzero_count,
            "t": self.t,
            "max_bucket_ratio": self.max_bucket_ratio,
            "per_bucket_ratios": {
                f"l={l},m={m}": r for (l, m), r in self.per_level_ratios.items()
            },
            "aggregate": self.aggregate,
            "feasible": self.feasible,
            "stage_a_collision": self.stage_a_collision,
        }


def _search_rows(psi: PsiSystem, schedule: ColoringSchedule):
    """Component rows of the active buckets as a CSR matrix.

    A bucket (l, x, m) is active when sum_j ||Psi|| > Delta_l^m; inactive
    buckets satisfy their constraint under every coloring (triangle
    inequality) and are excluded from the search and the signatures.
    """
    rows_data, rows_idx, rows_col, row_delta = [], [], [], []
    nrows = 0
    for l in range(1, psi.L + 1):
        lv = psi.levels[l - 1]
        if lv.n_pairs == 0:
            continue
        for m in range(psi.k + 1):
            sums = psi.bucket_norm_sums(l, m)
            active = np.nonzero(sums > schedule.Delta[l, m])[0]
            if len(active) == 0:
                continue
            sel = np.isin(lv.point_idx, active)
            pt = lv.point_idx[sel]
            tri = lv.triple_idx[sel]
            vals = lv.values[m][sel]
            ncomp = vals.shape[1]
            # rows are (bucket, component) pairs, buckets renumbered densely
            brow = np.searchsorted(active, pt)
            for c in range(ncomp):
                rows_data.append(vals[:, c])
                rows_idx.append(nrows + brow * ncomp + c)
                rows_col.append(tri)
            nrows += len(active) * ncomp
            row_delta.append(np.full(len(active) * ncomp, schedule.Delta[l, m]))
    if nrows == 0:
        R = sparse.csr_matrix((0, psi.t))
        return R, np.zeros(0)
    data = np.concatenate(rows_data)
    rid = np.concatenate(rows_idx)
    cid = np.concatenate(rows_col)
    R = sparse.csr_matrix((data, (rid, cid)), shape=(nrows, psi.t))
    return R, np.concatenate(row_delta)


def _signature_key(col_sig) -> bytes:
    nz = np.nonzero(col_sig)[0]
    if len(nz) == 0:
        return b""
    return nz.astype(np.int32).tobytes() + col_sig[nz].astype(np.int8).tobytes()


def _max_ratio(R, row_delta, chi) -> float:
    if R.shape[0] == 0:
        return 0.0
    e = R @ chi.astype(np.float64)
    return float(np.max(np.abs(e) / row_delta))


def _stage_a(R, delta_eff, hash_idx, t, need, rng, samples_cap, budget, deadline):
    """Collision hashing over rounded signatures of the hashable rows.

    Signatures are computed only on rows whose threshold is at least
    ``hash_floor`` times the row's coloring scale: rows tighter than that
    almost never land two samples in one bin, so hashing them would only
    hide the collisions that do exist.  Colliding far pairs are scored by
    their full max ratio; the best coloring seen is returned together with
    the farthest pair (the local search's starting point).
    """
    Rh = R[hash_idx] if R.shape[0] else R
    dh = delta_eff[hash_idx] if R.shape[0] else delta_eff
    store: dict[bytes, list] = {}
    stored = 0
    best_pair = None  # (hamming, eps1, eps2)
    best_chi = None
    best_ratio = math.inf
    evals = 0
    samples = 0
    while samples < samples_cap:
        if deadline is not None and time.monotonic() > deadline:
            break
        b = min(budget.batch, samples_cap - samples)
        eps = rng.integers(0, 2, size=(t, b), dtype=np.int8) * 2 - 1
        if Rh.shape[0]:
            E = Rh @ eps.astype(np.float64)
            sig = np.clip(np.rint(E / dh[:, None]), -120, 120).astype(np.int8)
            cc, rr = np.nonzero(sig.T)  # sorted by column
            splits = np.searchsorted(cc, np.arange(1, b))
            rows_per_col = np.split(rr, splits)
        else:
            sig = np.zeros((0, b), np.int8)
            rows_per_col = [np.zeros(0, dtype=np.int64)] * b
        samples += b
        for c in range(b):
            nz = rows_per_col[c]
            key = nz.astype(np.int32).tobytes() + sig[nz, c].tobytes()
            e = eps[:, c]
            bucket = store.get(key)
            if bucket is None:
                if stored < budget.max_stored:
                    store[key] = [e]
                    stored += 1
                continue
            mates = np.stack(bucket, axis=1)
            ham = np.count_nonzero(mates != e[:, None], axis=0)
            j = int(np.argmax(ham))
            if best_pair is None or ham[j] > best_pair[0]:
                best_pair = (int(ham[j]), bucket[j].copy(), e.copy())
            if ham[j] >= need and evals < budget.collision_eval_cap:
                evals += 1
                chi = ((bucket[j].astype(np.int16) - e) // 2).astype(np.int8)
                ratio = _max_ratio(R, delta_eff, chi)
                if ratio < best_ratio:
                    best_ratio = ratio
                    best_chi = chi
                if ratio <= 1.0:
                    return best_chi, best_ratio, samples, best_pair
            if len(bucket) < budget.per_key_store and stored < budget.max_stored:
                bucket.append(e)
                stored += 1
    return best_chi, best_ratio, samples, best_pair


def calibrate_c_m(psi: PsiSystem, N, multiplier=3.0) -> float:
    """C_M from the measured Psi scales.

    Sets M_l^m to ``multiplier`` times the largest per-component
    sub-Gaussian scale sqrt(sum_j Psi_{i,j}^2) of any bucket, relative to
    the 2^{-(k-m+1/2)l} N^{-1/2} profile.  Thresholds tied to the actual
    variance are what make signature collisions findable at all.
    """
    worst = 0.0
    for l in range(1, psi.L + 1):
        lv = psi.levels[l - 1]
        if lv.n_pairs == 0:
            continue
        for m in range(psi.k + 1):
            sq = lv.values[m] ** 2
            acc = np.zeros((lv.n_points, sq.shape[1]))
            np.add.at(acc, lv.point_idx, sq)
            scale = math.sqrt(float(acc.max())) if acc.size else 0.0
            profile = 2.0 ** (-(psi.k - m + 0.5) * l) / math.sqrt(N)
            worst = max(worst, scale / profile)
    return multiplier * worst if worst > 0 else 1.0


def clamp_schedule(schedule: ColoringSchedule, psi: PsiSystem, floor_mult=4.0) -> ColoringSchedule:
    """Raise thresholds to the search's single-move resolution.

    Recoloring one triple moves any bucket component by at most twice the
    largest Psi entry at that (level, order), so thresholds below that
    resolution are unmeetable by any coloring the search can distinguish
    and would only fire needless relaxations.  Clamped levels contribute
    O(max ||Psi||) = O(1/N) to the per-step error, subdominant to the
    target rate.
    """
    D = schedule.Delta.copy()
    for l in range(1, min(psi.L, schedule.L) + 1):
        for m in range(psi.k + 1):
            floor = floor_mult * psi.max_norm(l, m)
            if floor > D[l, m]:
                D[l, m] = floor
    return dataclasses.replace(schedule, Delta=D)


def _greedy_fill(chi, R_csc, delta_eff, E, ratio_cap):
    """Flip remaining zeros to +-1 wherever every touched bucket stays within
    ratio_cap; more nonzeros means more support removed per step."""
    for j in np.nonzero(chi == 0)[0]:
        if R_csc is None:
            chi[j] = 1
            continue
        col = R_csc.getcol(j)
        if col.nnz == 0:
            chi[j] = 1
            continue
        idx, data = col.indices, col.data
        for val in (1, -1):
            cand = E[idx] + val * data
            if np.max(np.abs(cand) / delta_eff[idx]) <= ratio_cap + 1e-12:
                chi[j] = val
                E[idx] = cand
                break
    return chi, E


def _enforce_nonzeros(chi, need, R_csc, delta_eff, E):
    """Flip zero entries until the nonzero quota is met.

    Each flip picks the sign with the smaller local (affected rows only)
    ratio, which is cheap and good enough for a starting point.
    """
    deficit = need - int(np.count_nonzero(chi))
    for j in np.nonzero(chi == 0)[0]:
        if deficit <= 0:
            break
        val = 1
        if R_csc is not None:
            col = R_csc.getcol(j)
            if col.nnz:
                idx, data = col.indices, col.data
                plus = np.max(np.abs(E[idx] + data) / delta_eff[idx])
                minus = np.max(np.abs(E[idx] - data) / delta_eff[idx])
                val = 1 if plus <= minus else -1
                E[idx] += val * data
        chi[j] = val
        deficit -= 1
    return chi, E


_LNS_DIGITS: dict[int, np.ndarray] = {}


def _lns_digits(s):
    if s not in _LNS_DIGITS:
        powers = 3 ** np.arange(s)
        idx = np.arange(3**s)
        _LNS_DIGITS[s] = ((idx[:, None] // powers[None, :]) % 3 - 1).astype(np.int8)
    return _LNS_DIGITS[s]


def _stage_b(R, delta_eff, chi0, need, rng, budget, deadline=None):
    """Local search on the max bucket ratio, keeping >= need nonzeros.

    Single-coordinate moves always; exhaustive random-subset moves on
    small instances, where near-cancellations matter and single flips
    stall early.
    """
    t = len(chi0)
    chi = chi0.astype(np.int8).copy()
    if R.shape[0] == 0:
        chi, _ = _enforce_nonzeros(chi, need, None, delta_eff, None)
        return chi, 0.0
    R_csc = R.tocsc()
    E = R @ chi.astype(np.float64)
    chi, E = _enforce_nonzeros(chi, need, R_csc, delta_eff, E)
    obj = float(np.max(np.abs(E) / delta_eff))
    for _ in range(budget.stage_b_passes):
        if deadline is not None and time.monotonic() > deadline:
            break
        improved = False
        for j in rng.permutation(t):
            col = R_csc.getcol(j)
            nz = int(np.count_nonzero(chi))
            for val in (-1, 0, 1):
                if val == chi[j]:
                    continue
                if val == 0 and chi[j] != 0 and nz - 1 < need:
                    continue
                if col.nnz:
                    e2 = E.copy()
                    e2[col.indices] += (val - chi[j]) * col.data
                    cand = float(np.max(np.abs(e2) / delta_eff))
                else:
                    continue
                if cand < obj - 1e-15:
                    chi[j] = val
                    E = e2
                    obj = cand
                    improved = True
        # exhaustive sub-neighborhoods for small systems
        if t <= 24 and R.shape[0] <= 128:
            Rd = np.asarray(R.todense())
            s = min(10, t)
            digits = _lns_digits(s)
            for _round in range(budget.lns_rounds):
                S = np.sort(rng.choice(t, size=s, replace=False))
                base = E - Rd[:, S] @ chi[S].astype(np.float64)
                vals = base[:, None] + Rd[:, S] @ digits.T.astype(np.float64)
                ratios = np.max(np.abs(vals) / delta_eff[:, None], axis=0)
                nnz_out = (
                    int(np.count_nonzero(chi))
                    - int(np.count_nonzero(chi[S]))
                    + np.count_nonzero(digits, axis=1)
                )
                ratios[nnz_out < need] = np.inf
                jbest = int(np.argmin(ratios))
                if ratios[jbest] < obj - 1e-15:
                    chi[S] = digits[jbest]
                    E = base + Rd[:, S] @ digits[jbest].astype(np.float64)
                    obj = float(ratios[jbest])
                    improved = True
        if not improved:
            break
    return chi, obj


def find_partial_coloring(psi: PsiSystem, schedule: ColoringSchedule, budget: SearchBudget | None = None, seed=0):
    """Search for chi meeting every bucket threshold with >= t/4 nonzeros.

    Runs stages A (collision hashing), B (local search), and C (threshold
    doubling) in order until the per-bucket constraints hold at the
    current relaxation; the returned report carries the stage used, the
    relaxation factor, and exact achieved/target ratios over all buckets.
    """
    budget = budget or SearchBudget()
    t = psi.t
    if t == 0:
        empty = PartialColoring(np.zeros(0, dtype=np.int8), 0)
        return empty, _make_report(empty, psi, schedule, "empty", 0, 1.0, True, False)
    need = max(1, math.ceil(t / 4))
    R, row_delta = _search_rows(psi, schedule)
    row_scale = (
        np.sqrt(np.asarray(R.multiply(R).sum(axis=1)).ravel())
        if R.shape[0]
        else np.zeros(0)
    )
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, 0xC01]))
    deadline = (
        time.monotonic() + budget.time_budget if budget.time_budget is not None else None
    )

    samples_total = 0
    relax = 1.0
    best_pair = None
    stage_used = None
    collision_seen = False
    chi = None
    for doubling in range(budget.stage_c_doublings + 1):
        delta_eff = row_delta * relax
        if R.shape[0]:
            ok = np.nonzero(delta_eff >= budget.hash_floor * row_scale)[0]
            tightness = delta_eff[ok] / np.maximum(row_scale[ok], 1e-300)
            hash_idx = ok[np.argsort(tightness, kind="stable")][: budget.hash_cap]
        else:
            hash_idx = np.zeros(0, dtype=np.int64)
        cap = budget.stage_a_samples if doubling == 0 else max(budget.stage_a_samples // 4, 1024)
        got, got_ratio, samples, pair = _stage_a(
            R, delta_eff, hash_idx, t, need, rng, cap, budget, deadline
        )
        samples_total += samples
        if pair is not None:
            collision_seen = True
            if best_pair is None or pair[0] > best_pair[0]:
                best_pair = pair
        if got is not None and got_ratio <= 1.0:
            chi = got
            stage_used = "A" if doubling == 0 else "C"
            break
        # Stage B from the most promising starting point
        if got is not None:
            start = got
        elif best_pair is not None:
            start = ((best_pair[1].astype(np.int16) - best_pair[2]) // 2).astype(np.int8)
        else:
            start = np.zeros(t, dtype=np.int8)
        cand, ratio = _stage_b(R, delta_eff, start, need, rng, budget, deadline)
        if ratio <= 1.0:
            chi = cand
            stage_used = "B" if doubling == 0 else "C"
            break
        if doubling == budget.stage_c_doublings:
            if got is not None and got_ratio < ratio:
                chi = got
            else:
                chi = cand
            stage_used = "best_effort"
            break
        relax *= 2.0

    # polish small instances toward the oracle optimum
    if t <= budget.polish_t_max and R.shape[0] and stage_used in ("A", "C"):
        cand, ratio = _stage_b(R, row_delta * relax, chi, need, rng, budget, deadline)
        if ratio <= _max_ratio(R, row_delta * relax, chi):
            chi = cand

    # fill zeros wherever thresholds allow: more nonzeros, same guarantees
    if R.shape[0]:
        achieved = _max_ratio(R, row_delta * relax, chi)
        cap_ratio = achieved if t <= budget.polish_t_max else max(achieved, 1.0)
        E = R @ chi.astype(np.float64)
        chi, _ = _greedy_fill(chi, R.tocsc(), row_delta * relax, E, cap_ratio)
    else:
        chi, _ = _greedy_fill(chi, None, None, None, 1.0)

    coloring = PartialColoring.from_chi(chi)
    feasible = stage_used != "best_effort"
    report = _make_report(
        coloring, psi, schedule, stage_used, samples_total, relax, feasible, collision_seen
    )
    return coloring, report


def _make_report(coloring, psi, schedule, stage, samples, relax, feasible, collision):
    agg = discrepancy_report(coloring.chi, psi, schedule)
    return ColoringReport(
        stage_used=stage,
        samples_drawn=samples,
        relaxation_factor=relax,
        nonzero_count=coloring.nonzero_count,
        t=psi.t,
        max_bucket_ratio=agg["max_ratio"],
        per_level_ratios=agg["per_level_max_ratio"],
        aggregate=agg["aggregate"],
        feasible=feasible,
        stage_a_collision=collision,
    )


def discrepancy_report(chi, psi: PsiSystem, schedule: ColoringSchedule) -> dict:
    """Exact per-(l, m) sup norms of sum_j chi_j Psi and the weighted aggregates.

    The aggregate per m is sum_l sum_i 2^{-il} sup_x ||sum_j chi_j
    Psi^{m+i}_{x,l,j}||, the quantity the thinning step's error bound
    consumes; ``schedule_sum`` is its threshold-side counterpart.
    """
    chi = np.asarray(chi, dtype=np.float64)
    sup = np.zeros((psi.L + 1, psi.k + 1))
    ratios = {}
    for l in range(1, psi.L + 1):
        lv = psi.levels[l - 1]
        for m in range(psi.k + 1):
            if lv.n_pairs:
                contrib = lv.values[m] * chi[lv.triple_idx][:, None]
                acc = np.zeros((lv.n_points, lv.values[m].shape[1]))
                np.add.at(acc, lv.point_idx, contrib)
                sup[l, m] = float(np.max(np.abs(acc))) if acc.size else 0.0
            ratios[(l, m)] = sup[l, m] / schedule.Delta[l, m]
    aggregate = {}
    schedule_sums = {}
    for m in range(psi.k + 1):
        total = 0.0
        for l in range(1, psi.L + 1):
            for i in range(0, psi.k - m + 1):
                total += 2.0 ** (-i * l) * sup[l, m + i]
        aggregate[m] = total
        schedule_sums[m] = schedule.schedule_sum(m)
    return {
        "per_level_max_ratio": ratios,
        "max_ratio": max(ratios.values()) if ratios else 0.0,
        "aggregate": aggregate,
        "schedule_sum": schedule_sums,
    }


def exhaustive_oracle(psi: PsiSystem, schedule: ColoringSchedule, max_t=16):
    """Brute-force optimum over {-1,0,+1}^t with >= t/4 nonzeros.

    Minimizes the max bucket ratio over all buckets.  Intended as the
    validation oracle for the search; enumeration is 3^t, so t is capped.
    """
    t = psi.t
    if t > max_t:
        raise ValueError(f"exhaustive oracle limited to t <= {max_t}, got {t}")
    if t == 0:
        return PartialColoring(np.zeros(0, dtype=np.int8), 0), 0.0
    need = max(1, math.ceil(t / 4))
    # full (unpruned) rows: every bucket counts for the oracle
    rows = []
    deltas = []
    for l in range(1, psi.L + 1):
        lv = psi.levels[l - 1]
        if lv.n_pairs == 0:
            continue
        for m in range(psi.k + 1):
            ncomp = lv.values[m].shape[1]
            dense = np.zeros((lv.n_points * ncomp, t))
            for c in range(ncomp):
                np.add.at(
                    dense,
                    (lv.point_idx * ncomp + c, lv.triple_idx),
                    lv.values[m][:, c],
                )
            rows.append(dense)
            deltas.append(np.full(lv.n_points * ncomp, schedule.Delta[l, m]))
    if rows:
        R = np.vstack(rows)
        delta = np.concatenate(deltas)
    else:
        R = np.zeros((0, t))
        delta = np.zeros(0)

    powers = 3 ** np.arange(t)
    best_obj = math.inf
    best_idx = -1
    chunk = 59049  # 3^10
    for lo in range(0, 3**t, chunk):
        idx = np.arange(lo, min(lo + chunk, 3**t))
        digits = (idx[:, None] // powers[None, :]) % 3 - 1  # (B, t) in {-1,0,1}
        nz = np.count_nonzero(digits, axis=1)
        ok = nz >= need
        if not np.any(ok):
            continue
        digits = digits[ok]
        idx = idx[ok]
        if R.shape[0]:
            vals = np.max(np.abs(R @ digits.T.astype(np.float64)) / delta[:, None], axis=0)
        else:
            vals = np.zeros(len(idx))
        j = int(np.argmin(vals))
        if vals[j] < best_obj - 1e-15:
            best_obj = float(vals[j])
            best_idx = int(idx[j])
    digits = (best_idx // powers) % 3 - 1
    return PartialColoring.from_chi(digits.astype(np.int8)), best_obj
