"""Brute-force ground truth for small block-partition instances.

Nothing here calls into the matcher, so the two can check each other.
Energies are recomputed with ``np.unpackbits`` rather than the shared
popcount table.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from math import comb

import numpy as np

from .errors import GuardError, InputError
from .model import Partition, TargetSpectrum

ORACLE_K1_MAX_N = 10
ORACLE_K2_MAX_N = 6
EXHAUSTIVE_MAX_N = 24


def _bitcounts(bits) -> np.ndarray:
    b = np.ascontiguousarray(np.asarray(bits, dtype="<u4"))
    return np.unpackbits(b.view(np.uint8).reshape(-1, 4), axis=1).sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# exact minimum defect

def brute_force_min_defect(n: int, target: TargetSpectrum):
    """Smallest achievable max pairwise defect over all partitions, with a witness.

    k = 1: binary search over integer thresholds, each tested by a maximum
    matching on the 2^n subsets (pairs admissible when their better
    orientation has defect <= threshold).
    k = 2: depth-first search over block level-patterns with memoization;
    subsets of equal size are interchangeable, so the search runs on level
    counts and the witness takes subsets of each level in ascending order.
    """
    k = target.k
    if k == 1:
        if n > ORACLE_K1_MAX_N:
            raise GuardError("oracle_k1_max_n", f"n={n} exceeds {ORACLE_K1_MAX_N}")
        units, blocks = _min_defect_k1(n, target)
    elif k == 2:
        if n > ORACLE_K2_MAX_N:
            raise GuardError("oracle_k2_max_n", f"n={n} exceeds {ORACLE_K2_MAX_N}")
        if n < 2:
            raise InputError("k=2 needs n >= 2")
        units, blocks = _min_defect_k2(n, target)
    else:
        raise GuardError("oracle_k", f"oracle handles k=1 and k=2 only, got k={k}")
    return units * target.delta, _witness(n, target, blocks)


def _witness(n, target, blocks):
    """blocks: list of member tuples ordered by slot."""
    mem = np.array(blocks, dtype=np.int64).reshape(-1, target.size)
    res = _bitcounts(mem.ravel()).reshape(mem.shape) - np.asarray(target.units)[None, :]
    offs = res.min(axis=1) * target.delta
    order = np.argsort(mem.min(axis=1), kind="stable")
    slots = np.broadcast_to(np.arange(target.size), mem.shape)
    return Partition(n, target, mem[order], slots[order], offs[order], np.zeros(len(mem), bool))


def _min_defect_k1(n, target):
    import networkx as nx

    size = 1 << n
    pc = _bitcounts(np.arange(size))
    gap = target.units[1] - target.units[0]

    def cost(x, y):
        # x on mu_1, y on mu_2; returns best orientation
        a = abs(int(pc[x]) - int(pc[y]) + gap)
        b = abs(int(pc[y]) - int(pc[x]) + gap)
        return (a, (x, y)) if a <= b else (b, (y, x))

    pairs = {}
    for x in range(size):
        for y in range(x + 1, size):
            pairs[(x, y)] = cost(x, y)

    def matching(t):
        g = nx.Graph()
        g.add_nodes_from(range(size))
        g.add_edges_from(e for e, (c, _) in pairs.items() if c <= t)
        mt = nx.max_weight_matching(g, maxcardinality=True)
        return mt if 2 * len(mt) == size else None

    lo, hi = 0, n + abs(gap)
    best = matching(hi)
    while lo < hi:
        mid = (lo + hi) // 2
        mt = matching(mid)
        if mt is not None:
            hi, best = mid, mt
        else:
            lo = mid + 1
    blocks = sorted(pairs[tuple(sorted(e))][1] for e in best)
    return lo, blocks


def _min_defect_k2(n, target):
    u = target.units
    levels = list(range(n + 1))
    counts0 = tuple(comb(n, l) for l in levels)

    def patterns(t):
        pats = []
        for ls in itertools.product(levels, repeat=4):
            r = [l - v for l, v in zip(ls, u)]
            if max(r) - min(r) <= t:
                pats.append(ls)
        return pats

    def solve(t):
        pats = patterns(t)
        by_low = {}
        for p in pats:
            by_low.setdefault(min(p), []).append(p)

        @lru_cache(maxsize=None)
        def rec(counts):
            low = next((l for l, c in enumerate(counts) if c), None)
            if low is None:
                return ()
            for p in by_low.get(low, ()):
                need = [0] * (n + 1)
                for l in p:
                    need[l] += 1
                if all(counts[l] >= need[l] for l in range(n + 1)):
                    rest = tuple(c - d for c, d in zip(counts, need))
                    sub = rec(rest)
                    if sub is not None:
                        return (p,) + sub
            return None

        out = rec(counts0)
        rec.cache_clear()
        return out

    lo, hi = 0, n + 2 * target.bigK
    best = solve(hi)
    while lo < hi:
        mid = (lo + hi) // 2
        got = solve(mid)
        if got is not None:
            hi, best = mid, got
        else:
            lo = mid + 1
    pools = {l: [] for l in levels}
    for x in range(1 << n):
        pools[int(_bitcounts([x])[0])].append(x)
    cursor = {l: 0 for l in levels}
    blocks = []
    for p in best:
        row = []
        for l in p:
            row.append(pools[l][cursor[l]])
            cursor[l] += 1
        blocks.append(tuple(row))
    return lo, blocks


# ---------------------------------------------------------------------------
# structural verification

@dataclass
class StructuralReport:
    passed: bool
    cover_ok: bool
    disjoint_ok: bool
    bijective_ok: bool
    max_defect: float
    errors: list = field(default_factory=list)


def exhaustive_verify(p: Partition, epsilon: float | None = None) -> StructuralReport:
    """Re-check cover, disjointness, bijectivity and every pairwise defect.

    Defects are formed pair by pair, not from a max-min shortcut.
    """
    if p.n > EXHAUSTIVE_MAX_N:
        raise GuardError("exhaustive_max_n", f"n={p.n} exceeds {EXHAUSTIVE_MAX_N}")
    errors = []
    size = 1 << p.n
    m = p.target.size
    flat = np.asarray(p.members).ravel()
    in_range = bool(flat.size == 0 or (flat.min() >= 0 and flat.max() < size))
    if not in_range:
        errors.append("bit pattern out of range")
    uniq = np.unique(flat[(flat >= 0) & (flat < size)])
    disjoint_ok = in_range and len(uniq) == len(flat)
    cover_ok = in_range and len(uniq) == size
    if not disjoint_ok:
        errors.append(f"{len(flat) - len(uniq)} repeated slots")
    if not cover_ok:
        errors.append(f"{size - len(uniq)} subsets missing")
    bijective_ok = all(sorted(int(s) for s in row) == list(range(m)) for row in p.slots)
    if not bijective_ok:
        errors.append("assignment not a bijection in some block")
    max_defect = 0.0
    if in_range and bijective_ok and flat.size:
        delta = p.target.delta
        mu = np.asarray(p.target.mu)
        e = _bitcounts(flat).reshape(p.members.shape) * delta
        f = mu[np.asarray(p.slots)]
        d = np.abs((e[:, :, None] - e[:, None, :]) - (f[:, :, None] - f[:, None, :]))
        max_defect = float(d.max())
    passed = cover_ok and disjoint_ok and bijective_ok
    if epsilon is not None and not max_defect < epsilon:
        passed = False
        errors.append(f"max defect {max_defect} >= epsilon {epsilon}")
    return StructuralReport(passed, cover_ok, disjoint_ok, bijective_ok, max_defect, errors)


# ---------------------------------------------------------------------------
# level-count certificate

def level_relaxation_feasible(n: int, target: TargetSpectrum, window: int = 2, integral: bool = False):
    """Can the subset-size counts C(n, l) be cut into blocks with defect <= window*delta?

    Every block is typed by the sizes of its members in slot order; a block
    type is admissible when its residuals l_i - mu_i/delta span at most
    ``window``.  Infeasibility of this (linear or integer) program proves no
    partition at level n meets the bound.  Returns None for k > 2, where the
    type list is too long to be useful.
    """
    from scipy.optimize import Bounds, LinearConstraint, linprog, milp

    k = target.k
    if k > 2:
        return None
    u = target.units
    m = target.size
    vals = range(n + 1)
    types = set()
    for base in range(-max(u) - 1, n - min(u) + 1):
        ranges = [[l for l in vals if base <= l - u[i] <= base + window] for i in range(m)]
        types.update(itertools.product(*ranges))
    if not types:
        return False
    types = sorted(types)
    a = np.zeros((n + 1, len(types)))
    for j, t in enumerate(types):
        for l in t:
            a[l, j] += 1
    b = np.array([comb(n, l) for l in vals], dtype=float)
    if integral:
        res = milp(np.zeros(len(types)), constraints=LinearConstraint(a, b, b),
                   integrality=np.ones(len(types)), bounds=Bounds(0, np.inf))
    else:
        res = linprog(np.zeros(len(types)), A_eq=a, b_eq=b, bounds=(0, None), method="highs")
    return res.status == 0
