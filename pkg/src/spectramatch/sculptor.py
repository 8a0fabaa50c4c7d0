"""Iterative eigenvalue placement for a direct sum of Hermitian blocks.

Starting from H_0, corrections h_1, h_2, ... with ||h_n|| < 2^-n are added
until every eigenvalue of block k sits on that block's grid and no value is
shared by two eigenvectors anywhere in the sum.  Each correction is diagonal
in the eigenbasis of H_0 and vanishes on eigenvectors already placed, so
placed eigenvalues never move again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .errors import GuardError, InfeasibleError, InputError

MAX_BLOCK_DIM = 64
MAX_DEPTH = 40
STEP_SAFETY = 0.999  # history norms stay strictly below 2^-n


@dataclass(frozen=True)
class GridSet:
    """{offset + j*step : j in Z} intersected with [-1, 1]."""

    step: float
    offset: float = 0.0

    def __post_init__(self):
        if not self.step > 0 or not math.isfinite(self.step):
            raise InputError("grid step must be positive")
        if not math.isfinite(self.offset):
            raise InputError("grid offset must be finite")

    def index_range(self):
        lo = math.ceil((-1.0 - self.offset) / self.step - 1e-12)
        hi = math.floor((1.0 - self.offset) / self.step + 1e-12)
        return lo, hi

    def point(self, j: int) -> float:
        return self.offset + j * self.step

    def count(self) -> int:
        lo, hi = self.index_range()
        return max(0, hi - lo + 1)

    def distance(self, v):
        """Distance from v to the nearest grid point inside [-1, 1]."""
        lo, hi = self.index_range()
        j = np.clip(np.round((np.asarray(v) - self.offset) / self.step), lo, hi)
        return np.abs(np.asarray(v) - (self.offset + j * self.step))

    def nearest_indices(self, v: float, count: int):
        lo, hi = self.index_range()
        c = int(round((v - self.offset) / self.step))
        c = min(max(c, lo), hi)
        out = [c]
        r = 1
        while len(out) < count and (c - r >= lo or c + r <= hi):
            for j in (c - r, c + r):
                if lo <= j <= hi:
                    out.append(j)
            r += 1
        return out


@dataclass(frozen=True)
class SpectralSets:
    per_block: tuple[GridSet, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_block", tuple(self.per_block))
        for g in self.per_block:
            if g.count() == 0:
                raise InputError(f"grid {g} has no points in [-1, 1]")

    def to_json(self) -> dict:
        return {"grids": [{"step": g.step, "offset": g.offset} for g in self.per_block]}

    @classmethod
    def from_json(cls, data) -> "SpectralSets":
        try:
            grids = data["grids"] if isinstance(data, dict) else data
            return cls(tuple(GridSet(float(g["step"]), float(g.get("offset", 0.0))) for g in grids))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed grid sets: {exc}") from exc


@dataclass
class HermitianBlocks:
    blocks: list                     # final Hermitian matrices
    history: tuple                   # ||h_n|| for n = 1, 2, ...
    eigenvectors: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    fixed_at: list = field(default_factory=list)    # step at which each eigenvector was placed
    trace: np.ndarray | None = None  # (steps + 1, total) Rayleigh quotients of every eigenvector
    complete: bool = True

    @property
    def dims(self):
        return [b.shape[0] for b in self.blocks]

    def to_json(self) -> dict:
        out = []
        for b in self.blocks:
            out.append({"dim": int(b.shape[0]), "real": [float(v) for v in b.real.ravel()],
                        "imag": [float(v) for v in b.imag.ravel()]})
        return {"blocks": out, "history": [float(v) for v in self.history], "complete": self.complete}

    @classmethod
    def from_json(cls, data) -> "HermitianBlocks":
        try:
            blocks = []
            for b in data["blocks"]:
                d = int(b["dim"])
                blocks.append((np.asarray(b["real"], float) + 1j * np.asarray(b["imag"], float)).reshape(d, d))
            return cls(blocks, tuple(float(v) for v in data.get("history", ())),
                       complete=bool(data.get("complete", True)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed Hermitian blocks: {exc}") from exc


def _canonical_eigh(h):
    """Ascending eigenpairs with each eigenvector's largest entry made real positive."""
    w, v = np.linalg.eigh(h)
    for c in range(v.shape[1]):
        col = v[:, c]
        j = int(np.argmax(np.abs(col) > np.abs(col).max() - 1e-12))
        ph = col[j] / abs(col[j])
        v[:, c] = col / ph
    return w, v


def _assign_targets(values, owners, sets: SpectralSets):
    """Distinct grid points for every eigenvalue, minimizing the largest move, then the total."""
    total = len(values)
    keys = {}
    cand = []
    for r, (v, k) in enumerate(zip(values, owners)):
        g = sets.per_block[k]
        for j in g.nearest_indices(float(v), total + 1):
            p = g.point(j)
            key = round(p, 12)
            col = keys.setdefault(key, (len(keys), p))[0]
            cand.append((r, col, abs(float(v) - p)))
    ncol = len(keys)
    if ncol < total:
        raise InfeasibleError(f"only {ncol} distinct grid points for {total} eigenvalues")
    rows = np.array([c[0] for c in cand])
    cols = np.array([c[1] for c in cand])
    cost = np.array([c[2] for c in cand])
    levels = np.unique(cost)

    def feasible(th):
        sel = cost <= th
        g = csr_matrix((np.ones(sel.sum()), (rows[sel], cols[sel])), shape=(total, ncol))
        match = maximum_bipartite_matching(g, perm_type="column")
        return np.all(match >= 0)

    lo, hi = 0, len(levels) - 1
    if not feasible(levels[hi]):
        raise InfeasibleError("grids cannot supply distinct values for every eigenvalue")
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(levels[mid]):
            hi = mid
        else:
            lo = mid + 1
    th = levels[lo]
    big = 1e6
    mat = np.full((total, ncol), big)
    ok = cost <= th
    mat[rows[ok], cols[ok]] = cost[ok]
    r_idx, c_idx = linear_sum_assignment(mat)
    points = {col: p for col, p in keys.values()}
    out = np.empty(total)
    out[r_idx] = [points[c] for c in c_idx]
    return out, float(th)


def sculpt(dims, sets: SpectralSets, depth: int, initial=None, seed=None) -> HermitianBlocks:
    """Place every eigenvalue of a block-diagonal Hermitian element on its grid.

    ``initial`` gives the starting blocks H_0 (default zero, or a random
    Hermitian of norm 1/4 per block when ``seed`` is set).  At step n each
    unplaced eigenvalue moves toward its target by at most 0.999 * 2^-n; it
    is placed as soon as it arrives.  Stops once everything is placed or
    after ``depth`` steps.
    """
    dims = [int(d) for d in dims]
    if len(dims) != len(sets.per_block):
        raise InputError(f"{len(dims)} blocks but {len(sets.per_block)} grid sets")
    if any(d < 1 or d > MAX_BLOCK_DIM for d in dims):
        raise GuardError("max_block_dim", f"block dimensions must be in 1..{MAX_BLOCK_DIM}")
    if not 1 <= depth <= MAX_DEPTH:
        raise GuardError("max_depth", f"depth must be in 1..{MAX_DEPTH}")
    for d, g in zip(dims, sets.per_block):
        if g.count() < d:
            raise InfeasibleError(f"grid {g} has {g.count()} points in [-1, 1], block needs {d}")
    rng = np.random.default_rng(seed) if seed is not None else None
    starts = []
    for k, d in enumerate(dims):
        if initial is not None:
            h0 = np.asarray(initial[k], dtype=complex)
            if h0.shape != (d, d) or np.abs(h0 - h0.conj().T).max() > 1e-12:
                raise InputError(f"initial block {k} is not a {d}x{d} Hermitian matrix")
        elif rng is not None:
            a = rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d))
            h0 = (a + a.conj().T) / 2
            h0 *= 0.25 / max(np.linalg.norm(h0, 2), 1e-300)
        else:
            h0 = np.zeros((d, d), dtype=complex)
        starts.append(h0)

    vecs, vals, owners = [], [], []
    for k, h0 in enumerate(starts):
        w, v = _canonical_eigh(h0)
        vecs.append(v)
        vals.append(w)
        owners += [k] * len(w)
    cur = np.concatenate(vals)
    owners = np.asarray(owners)
    targets, worst = _assign_targets(cur, owners, sets)
    budget = STEP_SAFETY * (1 - 2.0 ** -depth)
    if worst > budget:
        raise InfeasibleError(f"nearest distinct grid assignment needs a move of {worst:.3g} > {budget:.3g}")

    total = len(cur)
    fixed_at = np.full(total, -1)
    hit = cur == targets
    fixed_at[hit] = 0
    cur = np.where(hit, targets, cur)
    mats = [h.copy() for h in starts]
    history = []
    offsets = np.cumsum([0] + dims)
    trace = [_rayleigh(mats, vecs, offsets)]
    for n in range(1, depth + 1):
        if np.all(fixed_at >= 0):
            break
        bound = STEP_SAFETY * 2.0 ** -n
        gap = targets - cur
        move = np.where(fixed_at >= 0, 0.0, np.clip(gap, -bound, bound))
        arrive = (fixed_at < 0) & (np.abs(gap) <= bound)
        # land exactly on the target
        move[arrive] = gap[arrive]
        for k in range(len(dims)):
            sl = slice(offsets[k], offsets[k + 1])
            v = vecs[k]
            h = (v * move[sl]) @ v.conj().T
            mats[k] = mats[k] + h
        cur = np.where(arrive, targets, cur + move)
        fixed_at[arrive] = n
        history.append(float(np.abs(move).max()))
        trace.append(_rayleigh(mats, vecs, offsets))
    # write the placed eigenvalues back exactly, removing rounding from repeated sums
    final = []
    for k in range(len(dims)):
        sl = slice(offsets[k], offsets[k + 1])
        v = vecs[k]
        h = (v * cur[sl]) @ v.conj().T
        final.append((h + h.conj().T) / 2)
    return HermitianBlocks(final, tuple(history), vecs,
                           [targets[offsets[k]:offsets[k + 1]] for k in range(len(dims))],
                           [fixed_at[offsets[k]:offsets[k + 1]] for k in range(len(dims))],
                           np.array(trace), bool(np.all(fixed_at >= 0)))


def _rayleigh(mats, vecs, offsets):
    out = []
    for h, v in zip(mats, vecs):
        out.append(np.real(np.einsum("ij,ik,kj->j", v.conj(), h, v)))
    return np.concatenate(out)


@dataclass
class SculptReport:
    passed: bool
    max_grid_distance: float
    min_block_gap: float
    min_global_gap: float
    history_ok: bool
    max_drift: float
    errors: list = field(default_factory=list)


def verify_sculpt(h: HermitianBlocks, sets: SpectralSets, tol: float = 1e-6) -> SculptReport:
    """Re-diagonalize every block and check grid membership, simplicity and step bounds."""
    errors = []
    if len(h.blocks) != len(sets.per_block):
        errors.append(f"{len(h.blocks)} blocks but {len(sets.per_block)} grid sets")
        return SculptReport(False, math.inf, 0.0, 0.0, False, math.inf, errors)
    all_vals = []
    gdist = 0.0
    bgap = math.inf
    for k, (b, g) in enumerate(zip(h.blocks, sets.per_block)):
        b = np.asarray(b)
        if np.abs(b - b.conj().T).max() > 1e-12:
            errors.append(f"block {k} is not Hermitian")
        w = np.linalg.eigvalsh((b + b.conj().T) / 2)
        all_vals.append(w)
        dist = float(g.distance(w).max())
        gdist = max(gdist, dist)
        if dist > tol:
            errors.append(f"block {k}: eigenvalue {dist:.3g} away from its grid")
        if len(w) > 1:
            gap = float(np.diff(w).min())
            bgap = min(bgap, gap)
            if not gap > tol:
                errors.append(f"block {k}: eigenvalue gap {gap:.3g} <= {tol}")
    every = np.sort(np.concatenate(all_vals)) if all_vals else np.zeros(0)
    ggap = float(np.diff(every).min()) if every.size > 1 else math.inf
    history_ok = True
    for n, v in enumerate(h.history, start=1):
        if not v < 2.0 ** -n:
            history_ok = False
            errors.append(f"step {n}: ||h_n|| = {v:.3g} >= 2^-{n}")
    drift = 0.0
    if h.trace is not None and h.fixed_at:
        fixed = np.concatenate(h.fixed_at)
        tr = np.asarray(h.trace)
        for j, s in enumerate(fixed):
            if s >= 0:
                drift = max(drift, float(np.abs(tr[s:, j] - tr[s, j]).max()))
    return SculptReport(not errors, gdist, bgap, ggap, history_ok, drift, errors)
