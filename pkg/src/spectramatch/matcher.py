"""Block partitions of the power set with prescribed energy spectra.

Given a centered target spectrum T on the grid delta*Z and uniform coefficients
lambda_i = delta, the power set of {1..N} is cut into blocks of 2^k subsets,
each with a bijection onto T, so that within a block E(x) - F(x) varies by at
most 2*delta.

The construction has three stages:

1. ``scan_good``: every subset whose centered walk E_n visits the midpoint tree
   of T at even times is *good*; good subsets are grouped into reflection
   orbits, one pristine block per orbit.
2. ``choose_substitutes``: the leftover subsets are placed into batches of
   2^k, pushing good subsets one grid step sideways to make room.
3. ``repair``: the plan is applied and a ``Partition`` assembled.

All energies are integers (counts of delta) until a report is produced.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConsistencyError, DegenerateTargetError, GuardError, InputError,
                     PreconditionError, ResourceExhaustedError, ToleranceTooFineError)
from .model import (MAX_N, Block, DefectReport, GoodPath, MidpointTree, Partition,
                    SubsetIndex, TargetSpectrum, popcount)

log = logging.getLogger(__name__)

MAX_GRID_UNITS = 10 ** 4
MAX_SCAN_N = 26  # full enumeration needs a few bytes per subset
STRATEGIES = ("transport", "reserve")


# ---------------------------------------------------------------------------
# targets and trees

def _round_half_away(v: float) -> int:
    return int(math.copysign(math.floor(abs(v) + 0.5), v))


def _tree_units(units):
    levels = [list(units)]
    while len(levels[-1]) > 1:
        prev = levels[-1]
        nxt = []
        for a, b in zip(prev[::2], prev[1::2]):
            if (a + b) % 2:
                return None
            nxt.append((a + b) // 2)
        levels.append(nxt)
    return levels


def _tree_is_strict(levels) -> bool:
    for j in range(1, len(levels)):
        for i, v in enumerate(levels[j]):
            if not levels[j - 1][2 * i] < v < levels[j - 1][2 * i + 1]:
                return False
    return True


def normalize_targets(raw, epsilon: float) -> TargetSpectrum:
    """Center, choose a grid step delta <= epsilon/3 and snap onto it.

    Subtracts the midpoint of the extreme values, then tries K = ceil(3M/eps),
    K+1, ... (M the half-width) with delta = M/K.  The first K for which the
    snapped values give a midpoint tree with every node on the grid and
    strictly separated children is used.
    """
    vals = sorted(float(v) for v in raw)
    m = len(vals)
    if m < 2 or m & (m - 1):
        raise InputError(f"target must have 2^k entries with k >= 1, got {m}")
    if not all(math.isfinite(v) for v in vals):
        raise InputError("target values must be finite")
    if not epsilon > 0 or not math.isfinite(epsilon):
        raise InputError("epsilon must be a positive real")
    k = m.bit_length() - 1
    mid = (vals[0] + vals[-1]) / 2
    centered = [v - mid for v in vals]
    half = (vals[-1] - vals[0]) / 2
    if half <= 0:
        raise DegenerateTargetError("all target values are equal")
    if len(set(vals)) < m:
        raise DegenerateTargetError("repeated target values give a degenerate midpoint tree")
    k0 = max(1, math.ceil(half / (epsilon / 3) - 1e-9))
    if k0 > MAX_GRID_UNITS:
        raise ToleranceTooFineError(f"half-width needs K={k0} > {MAX_GRID_UNITS} grid steps")
    for big_k in range(k0, MAX_GRID_UNITS + 1):
        delta = half / big_k
        units = [big_k if i == m - 1 else -big_k if i == 0 else _round_half_away(c / delta)
                 for i, c in enumerate(centered)]
        levels = _tree_units(units)
        if levels is not None and _tree_is_strict(levels):
            # strip float dust so that e.g. 0.3/3 reads as 0.1
            short = float(f"{delta:.12g}")
            if abs(short - delta) <= 4 * math.ulp(delta):
                delta = short
            return TargetSpectrum(k, tuple(units), delta)
    raise ToleranceTooFineError(f"no grid with K <= {MAX_GRID_UNITS} separates the target")


def midpoint_tree(target: TargetSpectrum) -> MidpointTree:
    """mu_{j,i} = (mu_{2^j(i-1)+1} + mu_{2^j i}) / 2 in grid units."""
    u = target.units
    k = target.k
    levels = []
    for j in range(k + 1):
        w = 2 ** j
        row = []
        for i in range(1, 2 ** (k - j) + 1):
            s = u[w * (i - 1)] + u[w * i - 1]
            if s % 2:
                raise InputError(f"node ({j},{i}) falls off the grid; refine delta")
            row.append(s // 2)
        levels.append(tuple(row))
    return MidpointTree(tuple(levels), target.delta)


def _require_strict(tree: MidpointTree):
    if not _tree_is_strict([list(r) for r in tree.units]):
        raise PreconditionError("midpoint tree has coinciding node values; good paths are ambiguous")


# ---------------------------------------------------------------------------
# single-subset operations

def good_path(x: SubsetIndex, tree: MidpointTree, target: TargetSpectrum | None = None):
    """Greedy hitting times of the midpoint tree by the walk E_n(x), or None.

    n_{j+1} is the first even n > n_j at which E_n(x) equals one of the two
    children of the current node; the child hit becomes i_{j+1}.
    """
    _require_strict(tree)
    k = tree.k
    # target is accepted for symmetry with the other operations
    ns, idx, vals = [0], [1], [tree.unit(k, 1)]
    j, i = 0, 1
    for n in range(2, x.n + 1, 2):
        if j == k:
            break
        e2 = 2 * x.count_upto(n) - n
        lo = tree.unit(k - j - 1, 2 * i - 1)
        hi = tree.unit(k - j - 1, 2 * i)
        if e2 == 2 * lo or e2 == 2 * hi:
            i = 2 * i - 1 if e2 == 2 * lo else 2 * i
            j += 1
            ns.append(n)
            idx.append(i)
            vals.append(lo if e2 == 2 * lo else hi)
    if j < k:
        return None
    return GoodPath(tuple(ns), tuple(idx), tuple(vals))


def reflect(x: SubsetIndex, path: GoodPath, m: int) -> SubsetIndex:
    """x with membership flipped on n_m+1..n_k.

    Requires the node values along the path to be monotone from step m on.
    """
    k = path.k
    if not 0 <= m < k:
        raise PreconditionError(f"reflection level m={m} outside 0..{k - 1}")
    if path.units and not path.is_monotone_from(m):
        raise PreconditionError(f"path values are not monotone from level {m}")
    return x.symmetric_difference(path.n[m], path.n[k])


def _subtree_extreme_partner(path: GoodPath, m: int) -> int:
    """Leaf index expected after reflecting at m: the opposite extreme of node (m, i_m)."""
    k = path.k
    width = 2 ** (k - m)
    first = (path.i[m] - 1) * width + 1
    last = first + width - 1
    return last if path.leaf == first else first


def _reflection_neighbours(x: SubsetIndex, path: GoodPath, tree: MidpointTree):
    out = []
    for m in range(path.k):
        if not path.is_monotone_from(m):
            continue
        y = reflect(x, path, m)
        q = good_path(y, tree)
        if (q is not None and q.end == path.end and q.n[m] == path.n[m]
                and q.leaf == _subtree_extreme_partner(path, m)):
            out.append((y, q))
    return out


def orbit(x: SubsetIndex, path: GoodPath, tree: MidpointTree, target: TargetSpectrum | None = None) -> Block:
    """The reflection orbit of a good subset, as a pristine block ordered by leaf.

    Raises ConsistencyError when the orbit does not close up into 2^k subsets
    with distinct leaves (possible for targets whose midpoint tree is not
    mirror symmetric); ``scan_good`` sends such subsets to the remainder.
    """
    k = tree.k
    seen = {x.bits: (x, path)}
    frontier = [(x, path)]
    while frontier:
        nxt = []
        for y, q in frontier:
            for z, r in _reflection_neighbours(y, q, tree):
                if z.bits not in seen:
                    seen[z.bits] = (z, r)
                    nxt.append((z, r))
        frontier = nxt
    leaves = sorted(q.leaf for _, q in seen.values())
    if leaves != list(range(1, 2 ** k + 1)):
        raise ConsistencyError(f"orbit of {x} has leaves {leaves}, expected each of 1..{2 ** k} once")
    ordered = sorted(seen.values(), key=lambda t: t[1].leaf)
    members = tuple(y.bits for y, _ in ordered)
    units0 = tree.unit(0, 1)
    offset = (len(ordered[0][0]) - units0) * tree.delta
    return Block(members, tuple(range(1, 2 ** k + 1)), offset, True)


# ---------------------------------------------------------------------------
# vectorized scan

@dataclass
class GoodScan:
    """Result of scanning all 2^n subsets at one truncation level."""

    n: int
    target: TargetSpectrum
    members: np.ndarray       # (B, 2^k) pristine blocks, row b sorted by leaf, rows by minimal member
    remainder: np.ndarray     # ascending bit patterns
    greedy_good: int = 0      # subsets with a complete greedy path
    rejected: int = 0         # greedy-good subsets whose orbit did not close

    @property
    def offsets_units(self) -> np.ndarray:
        """Raw-gauge block offsets C_b / delta."""
        if len(self.members) == 0:
            return np.zeros(0, dtype=np.int64)
        return popcount(self.members[:, 0]) - self.target.units[0]

    @property
    def good_count(self) -> int:
        return int(self.members.size)


def scan_good(n: int, tree: MidpointTree, target: TargetSpectrum) -> GoodScan:
    """Find all good subsets of {1..n} and group them into closed reflection orbits."""
    k = tree.k
    m = 2 ** k
    if n % 2 or n < 2 * k:
        raise InputError(f"scan level must be even and >= 2k, got {n}")
    if n > MAX_SCAN_N:
        raise GuardError("max_scan_n", f"full enumeration limited to n <= {MAX_SCAN_N}, got {n}")
    _require_strict(tree)
    size = 1 << n
    xs = np.arange(size, dtype=np.int64)
    cnt = np.zeros(size, dtype=np.int16)
    depth = np.zeros(size, dtype=np.int8)
    node = np.zeros(size, dtype=np.int32)
    hits = np.zeros((k + 1, size), dtype=np.int8)
    levels = [np.asarray(row, dtype=np.int32) for row in tree.units]
    for t in range(2, n + 1, 2):
        cnt += ((xs >> (t - 2)) & 1).astype(np.int16)
        cnt += ((xs >> (t - 1)) & 1).astype(np.int16)
        e = cnt - t // 2
        # deepest level first, so nothing advances twice at the same time
        for j in range(k - 1, -1, -1):
            idx = np.flatnonzero(depth == j)
            if idx.size == 0:
                continue
            nd = node[idx]
            child = levels[k - j - 1]
            ev = e[idx]
            right = ev == child[2 * nd + 1]
            hit = (ev == child[2 * nd]) | right
            sel = idx[hit]
            node[sel] = 2 * nd[hit] + right[hit]
            depth[sel] = j + 1
            hits[j + 1, sel] = t
    del cnt
    good = depth == k
    leaf = node  # 0-based leaf index for good subsets
    n_end = hits[k].astype(np.int64)

    partners = []
    for lev in range(k):
        w = 2 ** (k - lev)
        low_bits = leaf & (w - 1)
        all_left = low_bits == 0
        all_right = low_bits == w - 1
        can = good & (all_left | all_right)
        expected = np.where(all_left, leaf + (w - 1), leaf - (w - 1))
        n_m = hits[lev].astype(np.int64)
        mask = ((np.int64(1) << n_end) - 1) ^ ((np.int64(1) << n_m) - 1)
        y = np.where(can, xs ^ mask, xs)
        ok = can & good[y] & (n_end[y] == n_end) & (leaf[y] == expected) & (hits[lev][y] == hits[lev])
        partner = np.where(ok, y, xs)
        # keep only mutual edges
        partner = np.where(partner[partner] == xs, partner, xs)
        partners.append(partner)

    label = xs.copy()
    while True:
        new = label
        for partner in partners:
            new = np.minimum(new, new[partner])
        if np.array_equal(new, label):
            break
        label = new

    gidx = np.flatnonzero(good)
    counts = np.bincount(label[gidx], minlength=size)
    keep = gidx[counts[label[gidx]] == m]
    order = np.lexsort((leaf[keep], label[keep]))
    keep = keep[order]
    rows = keep.reshape(-1, m)
    ok_rows = np.all(leaf[rows] == np.arange(m), axis=1)
    members = rows[ok_rows]
    accepted = np.zeros(size, dtype=bool)
    accepted[members.ravel()] = True
    remainder = np.flatnonzero(~accepted).astype(np.int64)
    greedy = int(good.sum())
    scan = GoodScan(n, target, members.astype(np.int64), remainder, greedy, greedy - int(members.size))
    if scan.rejected:
        log.info("n=%d: %d greedy-good subsets rejected (orbit did not close)", n, scan.rejected)
    return scan


def collect_good(n: int, tree: MidpointTree, target: TargetSpectrum):
    """(pristine blocks, remainder) at truncation level n."""
    scan = scan_good(n, tree, target)
    blocks = []
    offs = scan.offsets_units
    assign = tuple(range(1, 2 ** tree.k + 1))
    for row, c in zip(scan.members, offs):
        blocks.append(Block(tuple(int(v) for v in row), assign, float(c) * target.delta, True))
    return blocks, [SubsetIndex(int(v), n) for v in scan.remainder]


def greedy_good_histogram(n: int, tree: MidpointTree):
    """Counts of greedy-good and non-good subsets of {1..n} by centered energy E_n/delta.

    Dynamic programming over the walk, so it is cheap at any n.
    """
    k = tree.k
    states = {(0, 0, 0): 1}  # (depth, node, E) -> count
    for t in range(2, n + 1, 2):
        nxt = {}
        for (d, i, e), c in states.items():
            for de, w in ((-1, 1), (0, 2), (1, 1)):
                key = (d, i, e + de)
                nxt[key] = nxt.get(key, 0) + c * w
        states = {}
        for (d, i, e), c in nxt.items():
            if d < k:
                lo = tree.units[k - d - 1][2 * i]
                hi = tree.units[k - d - 1][2 * i + 1]
                if e == lo or e == hi:
                    d, i = d + 1, 2 * i + (e == hi)
            key = (d, i, e)
            states[key] = states.get(key, 0) + c
    good, rest = {}, {}
    for (d, _, e), c in states.items():
        bucket = good if d == k else rest
        bucket[e] = bucket.get(e, 0) + c
    return dict(sorted(good.items())), dict(sorted(rest.items()))


# ---------------------------------------------------------------------------
# substitution plans

@dataclass
class SubstitutionPlan:
    """Where every displaced subset goes.

    ``dest_block`` indexes the pristine blocks first, then the new batch
    blocks (one per entry of ``batch_offsets``, centered gauge units).
    ``substitutes`` maps each remainder subset to its reserved donor set when
    the ``reserve`` strategy is used.
    """

    strategy: str
    elements: np.ndarray
    dest_block: np.ndarray
    dest_slot: np.ndarray
    batch_offsets: tuple[int, ...]
    substitutes: dict = field(default_factory=dict)

    @property
    def moves(self) -> int:
        return len(self.elements)


def _as_member_array(blocks, m):
    if isinstance(blocks, np.ndarray):
        return blocks.reshape(-1, m).astype(np.int64)
    return np.array([b.members for b in blocks], dtype=np.int64).reshape(-1, m)


def _as_bits(remainder):
    if isinstance(remainder, np.ndarray):
        return remainder.astype(np.int64)
    return np.array([x.bits if isinstance(x, SubsetIndex) else int(x) for x in remainder], dtype=np.int64)


def choose_substitutes(remainder, blocks, target: TargetSpectrum, *, n: int, strategy: str = "transport"):
    """Plan the placement of the remainder, or return None when infeasible at this n.

    ``reserve`` reserves, for each remainder subset in ascending order, one
    unused good subset at every centered energy -K..K (smallest bit pattern
    first) and cascades along that reserve.  ``transport`` solves a small
    integer program over energy counts for the fewest one-step moves.
    """
    if strategy not in STRATEGIES:
        raise InputError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    m = target.size
    members = _as_member_array(blocks, m)
    rem = np.sort(_as_bits(remainder))
    if len(rem) % m:
        raise ConsistencyError(f"remainder size {len(rem)} not divisible by {m}")
    if len(rem) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return SubstitutionPlan(strategy, empty, empty, empty, ())
    if strategy == "reserve":
        return _plan_reserve(rem, members, target, n)
    return _plan_transport(rem, members, target, n)


def _plan_reserve(rem, members, target, n):
    m = target.size
    big_k = target.bigK
    half = n // 2
    gv = popcount(members) - half           # centered energy of each good slot
    flat_bits = members.ravel()
    flat_val = gv.ravel()
    order = np.lexsort((flat_bits, flat_val))
    pools = {}
    for pos in order:
        pools.setdefault(int(flat_val[pos]), []).append(int(pos))
    cursor = {v: 0 for v in pools}
    reserve = {}
    for x in rem:
        picked = {}
        for v in range(-big_k, big_k + 1):
            pool = pools.get(v, [])
            if cursor.get(v, 0) >= len(pool):
                return None
            picked[v] = pool[cursor[v]]
            cursor[v] += 1
        reserve[int(x)] = picked
    rem_val = popcount(rem) - half
    if np.any(np.abs(rem_val) > big_k):
        return None
    els, dblk, dslot = [], [], []
    n_blocks = len(members)
    for b in range(len(rem) // m):
        for i in range(m):
            x = int(rem[b * m + i])
            e = int(rem_val[b * m + i])
            goal = target.units[i]
            picked = reserve[x]
            if e == goal:
                chain = [x]
            else:
                s = 1 if goal > e else -1
                steps = range(e + s, goal + s, s)
                chain = [x] + [int(flat_bits[picked[v]]) for v in steps]
                # each element takes the slot of the donor one grid step closer to the goal
                for src, v in zip(chain[:-1], steps):
                    pos = picked[v]
                    els.append(src)
                    dblk.append(pos // m)
                    dslot.append(pos % m)
            els.append(chain[-1])
            dblk.append(n_blocks + b)
            dslot.append(i)
    subs = {x: tuple(int(flat_bits[p]) for p in picked.values()) for x, picked in reserve.items()}
    return SubstitutionPlan("reserve", np.array(els, dtype=np.int64), np.array(dblk, dtype=np.int64),
                            np.array(dslot, dtype=np.int64), (0,) * (len(rem) // m), subs)


def _transport_counts(g, r, mu, n_batches):
    """Solve for one-step flows f[v][w] and batch offset counts y_c.

    Values are shifted so index 0 is centered energy -N/2.  Returns
    (flows dict, batch count dict) or None.
    """
    from scipy.optimize import Bounds, LinearConstraint, milp

    nv = len(g)
    tot = g + r
    fv = [(v, w) for v in range(nv) for w in (v - 1, v, v + 1) if 0 <= w < nv]
    lo_c = -min(mu)
    hi_c = nv - 1 - max(mu)
    cs = list(range(lo_c, hi_c + 1))
    if not cs:
        return None
    nvar = len(fv) + len(cs)
    a = np.zeros((2 * nv + 1, nvar))
    lo = np.zeros(2 * nv + 1)
    for j, (v, w) in enumerate(fv):
        a[v, j] = 1
        a[nv + w, j] = 1
    for j, c in enumerate(cs):
        for u in mu:
            a[nv + c + u, len(fv) + j] -= 1
    lo[:nv] = tot
    lo[nv:2 * nv] = g
    a[2 * nv, len(fv):] = 1
    lo[2 * nv] = n_batches
    cost = np.array([0.0 if v == w else 1.0 for v, w in fv] + [0.0] * len(cs))
    res = milp(cost, constraints=LinearConstraint(a, lo, lo), integrality=np.ones(nvar),
               bounds=Bounds(0, np.inf))
    if res.status != 0:
        return None
    sol = np.round(res.x).astype(np.int64)
    flows = {fv[j]: int(sol[j]) for j in range(len(fv)) if sol[j]}
    batches = {c: int(sol[len(fv) + j]) for j, c in enumerate(cs) if sol[len(fv) + j]}
    return flows, batches


def _plan_transport(rem, members, target, n):
    m = target.size
    half = n // 2
    nv = n + 1
    gvals = popcount(members).ravel()    # centered energy + n/2
    rvals = popcount(rem)
    g = np.bincount(gvals, minlength=nv)
    r = np.bincount(rvals, minlength=nv)
    mu = [u for u in target.units]
    sol = _transport_counts(g, r, mu, len(rem) // m)
    if sol is None:
        return None
    flows, batches = sol
    n_blocks = len(members)
    flat_bits = members.ravel()

    # open slots per value: batch slots, listed after vacated good slots below
    batch_offsets = []
    batch_slots = {v: [] for v in range(nv)}
    for c in sorted(batches):
        for _ in range(batches[c]):
            b = n_blocks + len(batch_offsets)
            batch_offsets.append(c - half)
            for i, u in enumerate(mu):
                batch_slots[c + u].append((b, i))

    order = np.lexsort((flat_bits, gvals))
    good_pos = {v: [] for v in range(nv)}
    for pos in order:
        good_pos[int(gvals[pos])].append(int(pos))
    rem_by_val = {v: [] for v in range(nv)}
    for x, v in zip(rem, rvals):
        rem_by_val[int(v)].append(int(x))

    kept = {v: min(len(good_pos[v]), flows.get((v, v), 0)) for v in range(nv)}
    movers = {}
    open_slots = {}
    for v in range(nv):
        leaving = good_pos[v][kept[v]:]
        movers[v] = rem_by_val[v] + [int(flat_bits[p]) for p in leaving]
        open_slots[v] = [(p // m, p % m) for p in leaving] + batch_slots[v]

    els, dblk, dslot = [], [], []
    fill = {w: 0 for w in range(nv)}
    for v in range(nv):
        q = movers[v]
        start = 0
        for w in (v, v - 1, v + 1):
            if not 0 <= w < nv:
                continue
            amount = flows.get((v, w), 0) - (kept[v] if w == v else 0)
            for x in q[start:start + amount]:
                b, i = open_slots[w][fill[w]]
                fill[w] += 1
                els.append(x)
                dblk.append(b)
                dslot.append(i)
            start += amount
        if start != len(q):
            raise ConsistencyError(f"value {v}: {len(q)} movers but {start} placements")
    for w in range(nv):
        if fill[w] != len(open_slots[w]):
            raise ConsistencyError(f"value {w}: {len(open_slots[w])} open slots, {fill[w]} filled")
    return SubstitutionPlan("transport", np.array(els, dtype=np.int64), np.array(dblk, dtype=np.int64),
                            np.array(dslot, dtype=np.int64), tuple(batch_offsets))


def repair(blocks, remainder, subs: SubstitutionPlan, target: TargetSpectrum, *, n: int) -> Partition:
    """Apply a substitution plan and return the full partition."""
    m = target.size
    members = _as_member_array(blocks, m)
    rem = _as_bits(remainder)
    g = len(members)
    nb = len(subs.batch_offsets)
    if nb * m != len(rem):
        raise ConsistencyError("plan batch count does not match the remainder")
    full = np.full((g + nb, m), -1, dtype=np.int64)
    full[:g] = members
    if g:
        off = popcount(members[:, 0]) - target.units[0]
    else:
        off = np.zeros(0, dtype=np.int64)
    offsets = np.concatenate([off, np.asarray(subs.batch_offsets, dtype=np.int64) + n // 2])
    pristine = np.ones(g + nb, dtype=bool)
    pristine[g:] = False
    if subs.moves:
        full[subs.dest_block, subs.dest_slot] = subs.elements
        pristine[subs.dest_block] = False
    if np.any(full < 0):
        raise ConsistencyError("plan left slots empty")
    # settle fully shifted blocks back onto an exact gauge
    touched = np.flatnonzero(~pristine)
    if touched.size:
        res = popcount(full[touched]) - np.asarray(target.units)[None, :] - offsets[touched, None]
        uniform = (res.min(axis=1) == res.max(axis=1)) & (res[:, 0] != 0)
        offsets[touched[uniform]] += res[uniform, 0]
    order = np.argsort(full.min(axis=1), kind="stable")
    slots = np.broadcast_to(np.arange(m), full.shape)
    return Partition(n, target, full[order], slots[order], offsets[order] * target.delta,
                     pristine[order], good_count=int(members.size))


# ---------------------------------------------------------------------------
# assembly

def assemble(n: int, target: TargetSpectrum, strategy: str = "transport"):
    """Build the partition at a fixed even n, or return None if the plan is infeasible."""
    tree = midpoint_tree(target)
    scan = scan_good(n, tree, target)
    plan = choose_substitutes(scan.remainder, scan.members, target, n=n, strategy=strategy)
    if plan is None:
        return None
    return repair(scan.members, scan.remainder, plan, target, n=n)


def build_partition(target_raw, epsilon: float, max_n: int = 20, strategy: str = "transport"):
    """Find the first even N with a feasible plan and return (partition, report).

    Levels where no partition with defect <= 2*delta can exist, by a
    level-count linear relaxation, are skipped without enumeration.
    """
    from .oracle import level_relaxation_feasible

    if max_n > MAX_N:
        raise GuardError("max_n", f"truncation level capped at {MAX_N}, got {max_n}")
    target = target_raw if isinstance(target_raw, TargetSpectrum) else normalize_targets(target_raw, epsilon)
    tree = midpoint_tree(target)
    _require_strict(tree)
    tried = []
    for n in range(2 * target.k + 2, max_n + 1, 2):
        if level_relaxation_feasible(n, target) is False:
            tried.append((n, "level-infeasible"))
            continue
        if n > MAX_SCAN_N:
            raise GuardError("max_scan_n", f"first candidate level n={n} exceeds the enumeration limit {MAX_SCAN_N}")
        scan = scan_good(n, tree, target)
        plan = choose_substitutes(scan.remainder, scan.members, target, n=n, strategy=strategy)
        if plan is None:
            tried.append((n, "plan-infeasible"))
            continue
        part = repair(scan.members, scan.remainder, plan, target, n=n)
        return part, verify_partition(part, epsilon)
    last = max_n - max_n % 2
    good, rest = greedy_good_histogram(last, tree) if last >= 2 * target.k else ({}, {})
    diag = {"target_units": list(target.units), "delta": target.delta, "max_n": max_n,
            "tried": tried, "good_histogram": good, "remainder_histogram": rest,
            "remainder_size": sum(rest.values())}
    raise ResourceExhaustedError(
        f"no feasible even N <= {max_n} for K={target.bigK}, k={target.k} ({strategy})", diag)


# ---------------------------------------------------------------------------
# verification

def verify_partition(p: Partition, epsilon: float) -> DefectReport:
    """Check cover, bijectivity and every pairwise defect from scratch."""
    errors = []
    n = p.n
    m = p.target.size
    members = p.members
    flat = members.ravel()
    if p.num_blocks != (1 << n) // m or (1 << n) % m:
        errors.append(f"expected {(1 << n) // m} blocks of {m}, got {p.num_blocks}")
    if flat.size and (flat.min() < 0 or flat.max() >= (1 << n)):
        errors.append("member bit pattern outside the ambient power set")
    else:
        seen = np.bincount(flat, minlength=1 << n)
        dup = int(np.sum(seen > 1))
        missing = int(np.sum(seen == 0))
        if dup:
            errors.append(f"{dup} subsets appear in more than one slot")
        if missing:
            errors.append(f"{missing} subsets are not covered")
    if p.num_blocks:
        if not np.array_equal(np.sort(p.slots, axis=1), np.broadcast_to(np.arange(m), p.slots.shape)):
            errors.append("assignment is not a bijection onto the target in some block")
    if errors:
        return DefectReport(np.zeros(p.num_blocks), math.inf, epsilon, False, tuple(errors))
    units = np.asarray(p.target.units, dtype=np.int64)
    phase = popcount(members) - units[p.slots]     # (E - F)/delta, exact
    per = (phase.max(axis=1) - phase.min(axis=1)) * p.target.delta
    per.setflags(write=False)
    gmax = float(per.max())
    return DefectReport(per, gmax, epsilon, gmax < epsilon, ())


def gauge_errors(p: Partition) -> np.ndarray:
    """|E(x) - mu_F(x) - C| for every slot, same shape as ``p.members``."""
    mu = np.asarray(p.target.mu)
    return np.abs(popcount(p.members) * p.target.delta - mu[p.slots] - p.offsets[:, None])


def write_report_csv(p: Partition, report: DefectReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block_id", "size", "max_defect", "pristine"])
        for b in range(p.num_blocks):
            w.writerow([b, p.target.size, repr(float(report.per_block[b])) if len(report.per_block) else "",
                        int(p.pristine[b])])
